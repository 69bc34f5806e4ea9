//! Analytic gradients against central differences for every decoder variant
//! on a tiny model.
//!
//! cargo run --release --example gradient_check

use can_core::data::{gen_data, Task, TaskSpec};
use can_core::training::{gradcheck, Batch};
use can_core::{DecoderVariant, Model, ModelConfig};

fn main() -> can_core::Result<()> {
    let spec = TaskSpec { task: Task::MappedLexicon, vocab: 10, min_len: 1, max_len: 4, n_train: 3, n_valid: 0, n_test: 0, seed: 4 };
    let data = gen_data(&spec)?;
    let batch = Batch::new(data.train.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())));
    for v in [DecoderVariant::Standard, DecoderVariant::Compressed, DecoderVariant::AttnOnly, DecoderVariant::FfnOnly] {
        let model = Model::new(ModelConfig::new(8, 2, 1, 1, spec.vocab, v).with_seed(3))?;
        let r = gradcheck(&model, &batch, 1e-5)?;
        println!("{:<10} {:>5} entries  max relative error {:.2e} at {}", v.to_string(), r.entries, r.max_rel_error, r.worst);
    }
    Ok(())
}
