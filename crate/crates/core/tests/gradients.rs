mod common;

use can_core::data::{gen_data, Task, TaskSpec};
use can_core::training::{cross_entropy_smoothed, gradcheck, relative_error, Batch};
use can_core::{DecoderVariant, ModelConfig};
use common::*;

#[test]
fn every_variant_passes_finite_differences() {
    let spec = TaskSpec { task: Task::MappedLexicon, vocab: 10, min_len: 1, max_len: 4, n_train: 3, n_valid: 0, n_test: 0, seed: 4 };
    let data = gen_data(&spec).unwrap();
    let batch = Batch::new(data.train.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())));
    for v in [DecoderVariant::Standard, DecoderVariant::Compressed, DecoderVariant::AttnOnly, DecoderVariant::FfnOnly] {
        let model = perturbed_norms_model(ModelConfig::new(8, 2, 1, 1, 10, v), 3);
        let report = gradcheck(&model, &batch, 1e-5).unwrap();
        assert_eq!(report.entries, model.count_params(), "{v}: every scalar is checked");
        assert!(report.passes(1e-4), "{v}: {:.3e} in {}", report.max_rel_error, report.worst);
    }
}

#[test]
fn smoothed_cross_entropy_gradient_matches_differences() {
    let logits = random_matrix(3, 5, 9).scale(2.0);
    let targets = [1u32, 4, 0];
    for eps in [0.0, 0.1] {
        let (_, grad) = cross_entropy_smoothed(&logits, &targets, eps).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut up = logits.clone();
                up.set(i, j, logits.get(i, j) + 1e-6);
                let mut dn = logits.clone();
                dn.set(i, j, logits.get(i, j) - 1e-6);
                let num = (cross_entropy_smoothed(&up, &targets, eps).unwrap().0
                    - cross_entropy_smoothed(&dn, &targets, eps).unwrap().0)
                    / 2e-6;
                assert!(relative_error(grad.get(i, j), num) < 1e-6, "eps {eps} ({i},{j})");
            }
        }
    }
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-9) - 1e-2).abs() < 1e-12);
}
