//! Index-loop reference implementations shared by the integration tests.
//! Everything here works on plain `Vec<Vec<f64>>` and never calls the
//! library's kernels.

#![allow(dead_code)]

use can_core::attention::{DecoderLayerParams, FeedForwardParams, LayerNormParams};
use can_core::numerics::LAYER_NORM_EPS;
use can_core::{Matrix, Model};

pub type M = Vec<Vec<f64>>;

pub fn to_m(a: &Matrix) -> M {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &M, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), (b.rows(), b.cols()));
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn mmul(a: &M, b: &Matrix) -> M {
    a.iter()
        .map(|r| {
            (0..b.cols())
                .map(|j| {
                    let mut s = 0.0;
                    for (k, &x) in r.iter().enumerate() {
                        s += x * b.get(k, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax(v: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = v.iter().zip(allowed).filter(|(_, &a)| a).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().zip(allowed).map(|(x, &a)| if a { (x - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn layer_norm(x: &M, p: &LayerNormParams) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * p.gain.get(0, j) + p.bias.get(0, j)).collect()
        })
        .collect()
}

/// One key/value block: `keys` and `values` rows plus whether row `i` of the
/// query may see key `j`.
pub struct Block<'a> {
    pub keys: &'a M,
    pub values: &'a M,
    pub visible: &'a dyn Fn(usize, usize) -> bool,
}

/// Multi-head attention with one softmax per (row, head) over every block.
/// Returns the output and per-head probabilities over the concatenated keys.
pub fn attention(q: &M, blocks: &[Block<'_>], heads: usize) -> (M, Vec<M>) {
    let dq = q[0].len() / heads;
    let width = blocks[0].values[0].len();
    let dv = width / heads;
    let scale = 1.0 / (dq as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    let mut probs = vec![Vec::new(); heads];
    for hd in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let mut scores = Vec::new();
            let mut allowed = Vec::new();
            let mut vals = Vec::new();
            for b in blocks {
                for (j, k) in b.keys.iter().enumerate() {
                    let mut s = 0.0;
                    for c in hd * dq..(hd + 1) * dq {
                        s += qi[c] * k[c];
                    }
                    scores.push(s * scale);
                    allowed.push((b.visible)(i, j));
                    vals.push(&b.values[j]);
                }
            }
            let p = softmax(&scores, &allowed);
            for (pj, v) in p.iter().zip(&vals) {
                for c in hd * dv..(hd + 1) * dv {
                    out[i][c] += pj * v[c];
                }
            }
            probs[hd].push(p);
        }
    }
    (out, probs)
}

pub fn causal(i: usize, j: usize) -> bool {
    j <= i
}

pub fn always(_: usize, _: usize) -> bool {
    true
}

/// `ReLU(x W1 + b1 + extra) W2 + b2`.
pub fn ffn(x: &M, p: &FeedForwardParams, extra: Option<&M>) -> M {
    let mut hdn = mmul(x, &p.w1);
    for (i, r) in hdn.iter_mut().enumerate() {
        for (j, v) in r.iter_mut().enumerate() {
            *v += p.b1.get(0, j) + extra.map_or(0.0, |e| e[i][j]);
            *v = v.max(0.0);
        }
    }
    let mut y = mmul(&hdn, &p.w2);
    for r in &mut y {
        for (j, v) in r.iter_mut().enumerate() {
            *v += p.b2.get(0, j);
        }
    }
    y
}

pub fn embed(tokens: &[u32], table: &Matrix) -> M {
    let d = table.cols();
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    table.get(t as usize, i) * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect()
}

fn self_block<'a>(keys: &'a M, values: &'a M) -> Block<'a> {
    Block { keys, values, visible: &causal }
}

fn source_block<'a>(keys: &'a M, values: &'a M) -> Block<'a> {
    Block { keys, values, visible: &always }
}

/// One pre-norm decoder layer of any variant.
pub fn decoder_layer(x: &M, h: &M, layer: &DecoderLayerParams, heads: usize) -> M {
    match layer {
        DecoderLayerParams::Standard(p) => {
            let xn = layer_norm(x, &p.norm_self);
            let (k, v) = (mmul(&xn, &p.wk1), mmul(&xn, &p.wv1));
            let a = attention(&mmul(&xn, &p.wq1), &[self_block(&k, &v)], heads).0;
            let x1 = add(x, &a);
            let xn = layer_norm(&x1, &p.norm_cross);
            let (k, v) = (mmul(h, &p.wk2), mmul(h, &p.wv2));
            let c = attention(&mmul(&xn, &p.wq2), &[source_block(&k, &v)], heads).0;
            let x2 = add(&x1, &c);
            add(&x2, &ffn(&layer_norm(&x2, &p.norm_ffn), &p.ffn, None))
        }
        DecoderLayerParams::Compressed(p) => {
            let xn = layer_norm(x, &p.norm);
            let (k1, v1) = (mmul(&xn, &p.wk1), mmul(&xn, &p.wv1_folded));
            let (k2, v2) = (mmul(h, &p.wk2), mmul(h, &p.wv2_folded));
            let a = attention(&mmul(&xn, &p.wq), &[self_block(&k1, &v1), source_block(&k2, &v2)], heads).0;
            add(x, &ffn(&xn, &p.ffn, Some(&a)))
        }
        DecoderLayerParams::AttnOnly(p) => {
            let xn = layer_norm(x, &p.norm_attn);
            let (k1, v1) = (mmul(&xn, &p.wk1), mmul(&xn, &p.wv1));
            let (k2, v2) = (mmul(h, &p.wk2), mmul(h, &p.wv2));
            let a = attention(&mmul(&xn, &p.wq), &[self_block(&k1, &v1), source_block(&k2, &v2)], heads).0;
            let y = add(x, &a);
            add(&y, &ffn(&layer_norm(&y, &p.norm_ffn), &p.ffn, None))
        }
        DecoderLayerParams::FfnOnly(p) => {
            let xn = layer_norm(x, &p.norm_self);
            let (k, v) = (mmul(&xn, &p.wk1), mmul(&xn, &p.wv1));
            let a = attention(&mmul(&xn, &p.wq1), &[self_block(&k, &v)], heads).0;
            let x1 = add(x, &a);
            let xn = layer_norm(&x1, &p.norm_fused);
            let (k, v) = (mmul(h, &p.wk2), mmul(h, &p.wv2_folded));
            let c = attention(&mmul(&xn, &p.wq2), &[source_block(&k, &v)], heads).0;
            add(&x1, &ffn(&xn, &p.ffn, Some(&c)))
        }
    }
}

/// Encoder output for one sentence, after the final norm.
pub fn encode(model: &Model, src: &[u32]) -> M {
    let p = model.params();
    let heads = model.config().n_heads;
    let mut x = embed(src, &p.src_embed);
    for l in &p.encoder {
        let xn = layer_norm(&x, &l.norm_attn);
        let (k, v) = (mmul(&xn, &l.wk), mmul(&xn, &l.wv));
        let a = attention(&mmul(&xn, &l.wq), &[source_block(&k, &v)], heads).0;
        x = add(&x, &a);
        x = add(&x, &ffn(&layer_norm(&x, &l.norm_ffn), &l.ffn, None));
    }
    layer_norm(&x, &p.enc_norm)
}

/// Teacher-forced logits for decoder input `tgt_in`.
pub fn logits(model: &Model, src: &[u32], tgt_in: &[u32]) -> M {
    let p = model.params();
    let heads = model.config().n_heads;
    let h = encode(model, src);
    let mut x = embed(tgt_in, p.tgt_table());
    for l in &p.decoder {
        x = decoder_layer(&x, &h, l, heads);
    }
    mmul(&layer_norm(&x, &p.dec_norm), &p.out_proj)
}

pub fn from_m(a: &M) -> Matrix {
    let rows: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    Matrix::from_rows(&rows)
}

/// A model whose every tensor, norms included, is drawn uniformly from
/// `[-0.5, 0.5]` so that no identity or zero initialization hides a mistake.
pub fn random_model(config: can_core::ModelConfig, seed: u64) -> Model {
    use can_core::params::ParamSet;
    use rand::{Rng, SeedableRng};
    let mut model: Model = Model::new(config).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    model.params_mut().visit_mut("", &mut |_, m| {
        for v in m.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    });
    model
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    can_core::numerics::uniform_init(rows, cols, 1.0, seed)
}

/// Content tokens with a length drawn from `lens`.
pub fn random_tokens(rng: &mut impl rand::Rng, lens: std::ops::Range<usize>, vocab: u32) -> Vec<u32> {
    let len = if lens.is_empty() { lens.start } else { rng.gen_range(lens) };
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// Default initialization with layer-norm gains and biases moved off 1 and 0,
/// so their gradients are exercised while gradient magnitudes stay realistic.
pub fn perturbed_norms_model(config: can_core::ModelConfig, seed: u64) -> Model {
    use can_core::params::ParamSet;
    use rand::{Rng, SeedableRng};
    let mut model: Model = Model::new(config.with_seed(seed)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    model.params_mut().visit_mut("", &mut |name, m| {
        if name.contains("norm") || name.ends_with(".b1") || name.ends_with(".b2") {
            for v in m.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    });
    model
}
