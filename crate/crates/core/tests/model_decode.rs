mod common;

use can_core::inference::{
    beam_search, decode_step, decode_steps, greedy_decode, greedy_decode_batch, log_softmax, DecodeCache, SearchOptions,
};
use can_core::model::{config_param_count, decoder_input, decoder_layer_param_count, encoder_layer_param_count, EOS};
use can_core::{DecoderVariant, Model, ModelConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [DecoderVariant; 4] =
    [DecoderVariant::Standard, DecoderVariant::Compressed, DecoderVariant::AttnOnly, DecoderVariant::FfnOnly];

#[test]
fn full_model_matches_loop_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, &v) in VARIANTS.iter().enumerate() {
        let model = random_model(ModelConfig::new(8, 2, 2, 2, 12, v), i as u64);
        for _ in 0..3 {
            let src = random_tokens(&mut rng, 1..7, 12);
            let tgt = random_tokens(&mut rng, 0..6, 12);
            let want = logits(&model, &src, &decoder_input(&tgt));
            let got = model.teacher_forced_logits(&src, &tgt).unwrap();
            assert!(max_abs_diff(&want, &got) < 1e-10, "{v}");
            assert!(max_abs_diff(&encode(&model, &src), &model.encoder_forward(&src).unwrap()) < 1e-10);
        }
    }
}

#[test]
fn parameter_counts_follow_layer_shapes() {
    for &v in &VARIANTS {
        for d in [4usize, 8, 16] {
            let cfg = ModelConfig::new(d, 2, 3, 2, 10, v).with_depths(3, 2);
            let model: Model = Model::new(cfg.clone()).unwrap();
            assert_eq!(model.count_params(), config_param_count(&cfg));
            let per_layer = match v {
                DecoderVariant::Standard => 14 * d * d + 11 * d,
                DecoderVariant::Compressed => 19 * d * d + 7 * d,
                DecoderVariant::AttnOnly => 13 * d * d + 9 * d,
                DecoderVariant::FfnOnly => 17 * d * d + 9 * d,
            };
            assert_eq!(decoder_layer_param_count(v, d), per_layer);
            assert_eq!(encoder_layer_param_count(d), 11 * d * d + 9 * d);
        }
    }
}

/// Step-wise decoding with the cache reproduces every teacher-forced row.
#[test]
fn cached_steps_equal_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, &v) in VARIANTS.iter().enumerate() {
        let model = random_model(ModelConfig::new(8, 2, 2, 2, 12, v), 10 + i as u64);
        for _ in 0..50 {
            let src = random_tokens(&mut rng, 1..9, 12);
            let tgt = random_tokens(&mut rng, 0..9, 12);
            let full = model.teacher_forced_logits(&src, &tgt).unwrap();
            let mut cache = DecodeCache::new(&model, &src).unwrap();
            for (pos, &tok) in decoder_input(&tgt).iter().enumerate() {
                let row = decode_step(&model, &mut cache, tok).unwrap();
                let worst = row.iter().zip(full.row(pos)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(worst < 1e-9, "{v} pos {pos}: {worst}");
            }
        }
    }
}

#[test]
fn batched_steps_equal_single_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, &v) in VARIANTS.iter().enumerate() {
        let model = random_model(ModelConfig::new(8, 2, 1, 2, 12, v), 20 + i as u64);
        let srcs: Vec<Vec<u32>> = (0..4).map(|_| random_tokens(&mut rng, 1..7, 12)).collect();
        let mut batch: Vec<DecodeCache> = srcs.iter().map(|s| DecodeCache::new(&model, s).unwrap()).collect();
        let mut single: Vec<DecodeCache> = srcs.iter().map(|s| DecodeCache::new(&model, s).unwrap()).collect();
        for _ in 0..5 {
            let toks: Vec<u32> = (0..4).map(|_| rng.gen_range(0..12)).collect();
            let mut refs: Vec<&mut DecodeCache> = batch.iter_mut().collect();
            let rows = decode_steps(&model, &mut refs, &toks).unwrap();
            for (b, c) in single.iter_mut().enumerate() {
                let r = decode_step(&model, c, toks[b]).unwrap();
                let worst = r.iter().zip(rows.row(b)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(worst < 1e-12, "{v}: {worst}");
            }
        }
        let opts = SearchOptions::max_len(8);
        let refs: Vec<&[u32]> = srcs.iter().map(Vec::as_slice).collect();
        let batched = greedy_decode_batch(&model, &refs, &opts).unwrap();
        for (s, b) in srcs.iter().zip(&batched) {
            assert_eq!(&greedy_decode(&model, s, 8).unwrap(), b);
        }
    }
}

/// Best length-normalized score over every sequence up to `max_len` tokens,
/// each either ending in EOS or cut off at the limit. Ties go to the
/// lexicographically smaller token sequence.
fn exhaustive_best(model: &Model, src: &[u32], max_len: usize, alpha: f64) -> (Vec<u32>, f64) {
    let vocab = model.config().vocab_tgt as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack: Vec<Vec<u32>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let full = model.teacher_forced_logits(src, &prefix).unwrap();
        let mut logp = 0.0;
        for (i, &tok) in prefix.iter().enumerate() {
            logp += log_softmax(full.row(i))[tok as usize];
        }
        let ended = prefix.last() == Some(&EOS) || prefix.len() == max_len;
        if ended {
            let score = logp / (prefix.len() as f64).powf(alpha);
            let better = match &best {
                None => true,
                Some((bt, bs)) => score > *bs || (score == *bs && prefix < *bt),
            };
            if better {
                best = Some((prefix, score));
            }
            continue;
        }
        for tok in 0..vocab {
            let mut next = prefix.clone();
            next.push(tok);
            stack.push(next);
        }
    }
    best.unwrap()
}

#[test]
fn full_width_beam_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20u64 {
        let v = VARIANTS[seed as usize % 4];
        let model = random_model(ModelConfig::new(4, 1, 1, 1, 3, v), 100 + seed);
        let src: Vec<u32> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..3)).collect();
        for alpha in [0.0, 1.0] {
            let (want, score) = exhaustive_best(&model, &src, 3, alpha);
            let got = beam_search(&model, &src, 27, 3, alpha).unwrap();
            assert_eq!(got.tokens, want, "seed {seed} alpha {alpha}");
            assert!((got.score(alpha) - score).abs() < 1e-9);
        }
    }
}

#[test]
fn stage_counts_per_variant() {
    for &v in &VARIANTS {
        let model = random_model(ModelConfig::new(8, 2, 1, 3, 12, v), 7);
        let mut cache = DecodeCache::new(&model, &[5, 6, 7]).unwrap();
        for tok in [0u32, 5, 6] {
            decode_step(&model, &mut cache, tok).unwrap();
        }
        let c = cache.counter();
        assert_eq!(c.steps, 3);
        assert_eq!(c.layer_steps, 9);
        assert_eq!(c.sublayer_stages as usize, 9 * v.stages_per_layer());
        assert_eq!(c.softmax_stages as usize, 9 * v.softmaxes_per_layer());
        let want = match v {
            DecoderVariant::Standard => (3, 2),
            DecoderVariant::Compressed => (1, 1),
            DecoderVariant::AttnOnly => (2, 1),
            DecoderVariant::FfnOnly => (2, 2),
        };
        assert_eq!((v.stages_per_layer(), v.softmaxes_per_layer()), want);
    }
}
