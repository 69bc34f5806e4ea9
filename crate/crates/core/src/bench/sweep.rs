use serde::{Deserialize, Serialize};

use super::timing::{bench_interleaved, BenchOptions, BenchResult};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Scalar;

pub const BEAM_GRID: [usize; 4] = [1, 4, 16, 64];
pub const DEPTH_GRID: [(usize, usize); 4] = [(6, 6), (9, 4), (12, 2), (14, 1)];
pub const BATCH_GRID: [usize; 5] = [1, 4, 8, 16, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Beam(Vec<usize>),
    /// One grid point; the depth pairs are those of the models passed in.
    Depth,
    /// Batched greedy decoding at each size.
    Batch(Vec<usize>),
    /// Source-length buckets `<=10, 11-20, 21-30, 31+`.
    Length,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Beam(_) => "beam",
            Self::Depth => "depth",
            Self::Batch(_) => "batch",
            Self::Length => "length",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Self::Beam(BEAM_GRID.to_vec())),
            "depth" => Ok(Self::Depth),
            "batch" => Ok(Self::Batch(BATCH_GRID.to_vec())),
            "length" => Ok(Self::Length),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (beam | depth | batch | length)"))),
        }
    }
}

pub const LENGTH_BUCKETS: [&str; 4] = ["<=10", "11-20", "21-30", "31+"];

pub fn length_bucket(len: usize) -> usize {
    match len {
        0..=10 => 0,
        11..=20 => 1,
        21..=30 => 2,
        _ => 3,
    }
}

fn check_compatible<T: Scalar>(models: &[(&str, &Model<T>)]) -> Result<()> {
    let Some((_, first)) = models.first() else {
        return Err(Error::InvalidArgument("sweep needs at least one model".into()));
    };
    let f = first.config();
    for (label, m) in &models[1..] {
        let c = m.config();
        if (c.d_model, c.n_heads, c.vocab_src, c.vocab_tgt) != (f.d_model, f.n_heads, f.vocab_src, f.vocab_tgt) {
            return Err(Error::Config(format!("model `{label}` differs from `{}` in width, heads or vocabulary", models[0].0)));
        }
    }
    Ok(())
}

/// One result per (grid point, model), grid point major. Within a grid point
/// the first model is the baseline for every delta.
pub fn sweep<T: Scalar>(
    axis: &SweepAxis,
    models: &[(&str, &Model<T>)],
    sentences: &[Vec<u32>],
    base: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    check_compatible(models)?;
    let mut points: Vec<(String, BenchOptions, Vec<Vec<u32>>)> = Vec::new();
    match axis {
        SweepAxis::Beam(widths) => {
            for &b in widths {
                points.push((format!("beam={b}"), BenchOptions { beam: b, batch: 1, ..base.clone() }, sentences.to_vec()));
            }
        }
        SweepAxis::Depth => points.push(("depth".into(), base.clone(), sentences.to_vec())),
        SweepAxis::Batch(sizes) => {
            for &b in sizes {
                points.push((format!("batch={b}"), BenchOptions { beam: 1, batch: b, ..base.clone() }, sentences.to_vec()));
            }
        }
        SweepAxis::Length => {
            let mut buckets: Vec<Vec<Vec<u32>>> = vec![Vec::new(); LENGTH_BUCKETS.len()];
            for s in sentences {
                buckets[length_bucket(s.len())].push(s.clone());
            }
            for (name, set) in LENGTH_BUCKETS.iter().zip(buckets) {
                if !set.is_empty() {
                    points.push((format!("len{name}"), base.clone(), set));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(points.len() * models.len());
    for (point, opts, set) in &points {
        let ids: Vec<String> = models.iter().map(|(label, _)| format!("{point}/{label}")).collect();
        let named: Vec<(&str, &Model<T>)> = ids.iter().zip(models).map(|(id, (_, m))| (id.as_str(), *m)).collect();
        out.extend(bench_interleaved(&named, set, opts)?);
    }
    Ok(out)
}
