//! Sub-layer similarity probes and decoding-speed measurement.

mod probe;
mod sweep;
mod timing;

pub use probe::{
    diagonal_stats, probe_records, render_heatmap, similarity_matrix, write_matrix_csv, Pooling, ProbeRecord, Sublayer,
    SublayerPair,
};
pub use sweep::{length_bucket, sweep, SweepAxis, BATCH_GRID, BEAM_GRID, DEPTH_GRID, LENGTH_BUCKETS};
pub use timing::{
    bench_decode, bench_interleaved, median, quality_gate, write_results_csv, BenchOptions, BenchResult, DecodeLength, RESULT_COLUMNS,
};
