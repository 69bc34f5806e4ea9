//! Incremental decoding with per-layer key/value caches.
//!
//! A [`SourceMemory`] holds the encoder output and every layer's source-side
//! key/value projections, computed once per sentence and shared by all
//! hypotheses through an `Arc`. Each [`DecodeCache`] owns the growing
//! target-side keys/values of one hypothesis. [`decode_steps`] advances any
//! number of caches by one token in a single batched pass.

mod search;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use search::{
    beam_search, beam_search_counted, beam_search_with, greedy_decode, greedy_decode_batch, greedy_decode_batch_counted,
    greedy_decode_with, Hypothesis, SearchOptions,
};

use crate::attention::layers::norm_fwd;
use crate::attention::{DecoderLayerParams, FeedForwardParams};
use crate::error::{Error, Result};
use crate::model::{embed_at, DecoderVariant, Model};
use crate::numerics::{dot, mm, relu_in_place, Matrix, Scalar};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `log softmax` of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Work counters: source projections are counted once per sentence, stages
/// and softmaxes once per decoder layer per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounter {
    pub source_projections: u64,
    pub steps: u64,
    pub layer_steps: u64,
    pub sublayer_stages: u64,
    pub softmax_stages: u64,
}

impl StageCounter {
    pub fn add(&mut self, o: &Self) {
        self.source_projections += o.source_projections;
        self.steps += o.steps;
        self.layer_steps += o.layer_steps;
        self.sublayer_stages += o.sublayer_stages;
        self.softmax_stages += o.softmax_stages;
    }

    pub fn stages_per_layer_step(&self) -> f64 {
        self.sublayer_stages as f64 / self.layer_steps.max(1) as f64
    }

    pub fn softmaxes_per_layer_step(&self) -> f64 {
        self.softmax_stages as f64 / self.layer_steps.max(1) as f64
    }
}

#[derive(Clone, Debug)]
struct SourceKv<T> {
    keys: Matrix<T>,
    values: Matrix<T>,
}

/// Encoder output plus each decoder layer's source keys and values.
#[derive(Debug)]
pub struct SourceMemory<T> {
    h: Matrix<T>,
    layers: Vec<SourceKv<T>>,
    projections: u64,
}

impl<T: Scalar> SourceMemory<T> {
    /// Runs the encoder and projects its output for every decoder layer.
    pub fn encode(model: &Model<T>, src: &[u32]) -> Result<Arc<Self>> {
        if src.is_empty() {
            return Err(Error::InvalidArgument("empty source".into()));
        }
        let h = model.encoder_forward(src)?;
        let mut projections = 0;
        let layers = model
            .params()
            .decoder
            .iter()
            .map(|layer| {
                let (wk, wv) = match layer {
                    DecoderLayerParams::Standard(p) => (&p.wk2, &p.wv2),
                    DecoderLayerParams::Compressed(p) => (&p.wk2, &p.wv2_folded),
                    DecoderLayerParams::AttnOnly(p) => (&p.wk2, &p.wv2),
                    DecoderLayerParams::FfnOnly(p) => (&p.wk2, &p.wv2_folded),
                };
                projections += 2;
                SourceKv { keys: mm(&h, wk), values: mm(&h, wv) }
            })
            .collect();
        Ok(Arc::new(Self { h, layers, projections }))
    }

    pub fn encoder_output(&self) -> &Matrix<T> {
        &self.h
    }

    pub fn source_len(&self) -> usize {
        self.h.rows()
    }

    /// Matrix products against the encoder output made while building.
    pub fn projection_count(&self) -> u64 {
        self.projections
    }
}

/// Row-major buffer that grows one row per step.
#[derive(Clone, Debug, Default)]
struct Rows<T> {
    data: Vec<T>,
    width: usize,
}

impl<T: Scalar> Rows<T> {
    fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    fn push(&mut self, row: &[T]) {
        self.width = row.len();
        self.data.extend_from_slice(row);
    }
}

#[derive(Clone, Debug, Default)]
struct SelfKv<T> {
    keys: Rows<T>,
    values: Rows<T>,
}

/// Decoding state for one hypothesis.
#[derive(Clone, Debug)]
pub struct DecodeCache<T = f64> {
    source: Option<Arc<SourceMemory<T>>>,
    layers: Vec<SelfKv<T>>,
    pos: usize,
    counter: StageCounter,
}

impl<T: Scalar> DecodeCache<T> {
    /// A cache with no source; stepping it is an error.
    pub fn uninitialized() -> Self {
        Self { source: None, layers: Vec::new(), pos: 0, counter: StageCounter::default() }
    }

    /// Encodes `src` and starts an empty target history.
    pub fn new(model: &Model<T>, src: &[u32]) -> Result<Self> {
        let memory = SourceMemory::encode(model, src)?;
        let mut cache = Self::from_memory(model, memory);
        cache.counter.source_projections = cache.source.as_ref().map_or(0, |m| m.projections);
        Ok(cache)
    }

    /// Starts a hypothesis over an already encoded source.
    pub fn from_memory(model: &Model<T>, memory: Arc<SourceMemory<T>>) -> Self {
        Self {
            source: Some(memory),
            layers: vec![SelfKv::default(); model.params().decoder.len()],
            pos: 0,
            counter: StageCounter::default(),
        }
    }

    /// Target positions consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Cached self-attention rows in every layer.
    pub fn self_rows(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keys.len()).collect()
    }

    pub fn counter(&self) -> &StageCounter {
        &self.counter
    }

    pub fn memory(&self) -> Option<&Arc<SourceMemory<T>>> {
        self.source.as_ref()
    }
}

/// Logits for the next token after feeding `last_token`.
pub fn decode_step<T: Scalar>(model: &Model<T>, cache: &mut DecodeCache<T>, last_token: u32) -> Result<Vec<T>> {
    let logits = decode_steps(model, &mut [cache], &[last_token])?;
    Ok(logits.row(0).to_vec())
}

/// Sources for one query row in a joint attention.
struct KvRef<'a, T> {
    keys: &'a [T],
    values: &'a [T],
    rows: usize,
}

/// Scaled dot-product attention of one query row over the concatenation of
/// `blocks`, one softmax per head across all blocks.
fn attend_row<T: Scalar>(q: &[T], heads: usize, blocks: &[KvRef<'_, T>], vwidth: usize, out: &mut [T], scratch: &mut Vec<T>) {
    let d = q.len();
    let dk = d / heads;
    let dv = vwidth / heads;
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    out.iter_mut().for_each(|v| *v = T::zero());
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        scratch.clear();
        for b in blocks {
            for j in 0..b.rows {
                scratch.push(dot(qh, &b.keys[j * d + h * dk..j * d + (h + 1) * dk]) * scale);
            }
        }
        crate::numerics::softmax_in_place(scratch, None);
        let oh = &mut out[h * dv..(h + 1) * dv];
        let mut idx = 0;
        for b in blocks {
            for j in 0..b.rows {
                let p = scratch[idx];
                idx += 1;
                let vrow = &b.values[j * vwidth + h * dv..j * vwidth + (h + 1) * dv];
                for (o, v) in oh.iter_mut().zip(vrow) {
                    *o += p * *v;
                }
            }
        }
    }
}

fn ffn_with<T: Scalar>(xn: &Matrix<T>, p: &FeedForwardParams<T>, extra: Option<&Matrix<T>>) -> Matrix<T> {
    let mut act = mm(xn, &p.w1);
    if let Some(e) = extra {
        act.add_assign(e);
    }
    act.add_row_broadcast(&p.b1);
    relu_in_place(act.data_mut());
    let mut y = mm(&act, &p.w2);
    y.add_row_broadcast(&p.b2);
    y
}

enum Keys {
    /// Attend over this layer's cached target rows only.
    SelfOnly,
    /// Attend over the source rows only.
    SourceOnly,
    /// One softmax over cached target rows then source rows.
    Joint,
}

/// Appends `k`/`v` rows (if given) and attends each query row over its own
/// cache.
#[allow(clippy::too_many_arguments)]
fn cached_attention<T: Scalar>(
    caches: &mut [&mut DecodeCache<T>],
    layer: usize,
    q: &Matrix<T>,
    new_kv: Option<(&Matrix<T>, &Matrix<T>)>,
    keys: Keys,
    heads: usize,
    vwidth: usize,
) -> Matrix<T> {
    let mut out = Matrix::zeros(caches.len(), vwidth);
    let mut scratch = Vec::new();
    for (r, cache) in caches.iter_mut().enumerate() {
        if let Some((k, v)) = new_kv {
            cache.layers[layer].keys.push(k.row(r));
            cache.layers[layer].values.push(v.row(r));
        }
        let memory = cache.source.as_ref().expect("checked by decode_steps");
        let src = &memory.layers[layer];
        let own = &cache.layers[layer];
        let self_ref = KvRef { keys: &own.keys.data, values: &own.values.data, rows: own.keys.len() };
        let src_ref = KvRef { keys: src.keys.data(), values: src.values.data(), rows: src.keys.rows() };
        let blocks: Vec<KvRef<'_, T>> = match keys {
            Keys::SelfOnly => vec![self_ref],
            Keys::SourceOnly => vec![src_ref],
            Keys::Joint => vec![self_ref, src_ref],
        };
        attend_row(q.row(r), heads, &blocks, vwidth, out.row_mut(r), &mut scratch);
    }
    out
}

/// Feeds `tokens[i]` to `caches[i]` and returns next-token logits, one row
/// per cache.
pub fn decode_steps<T: Scalar>(model: &Model<T>, caches: &mut [&mut DecodeCache<T>], tokens: &[u32]) -> Result<Matrix<T>> {
    if caches.len() != tokens.len() {
        return Err(Error::LengthMismatch { op: "decode_steps", expected: caches.len(), actual: tokens.len() });
    }
    let n_layers = model.params().decoder.len();
    for c in caches.iter() {
        let Some(m) = &c.source else {
            return Err(Error::UninitializedCache);
        };
        if c.layers.len() != n_layers || m.layers.len() != n_layers {
            return Err(Error::InvalidArgument("cache was built for a different model".into()));
        }
    }
    let d = model.config().d_model;
    let heads = model.config().n_heads;
    let hidden = model.config().hidden();
    let table = model.params().tgt_table();

    let mut x = Matrix::zeros(caches.len(), d);
    for (r, (c, &t)) in caches.iter().zip(tokens).enumerate() {
        let e = embed_at(&[t], table, c.pos)?;
        x.row_mut(r).copy_from_slice(e.row(0));
    }

    for (l, layer) in model.params().decoder.iter().enumerate() {
        x = match layer {
            DecoderLayerParams::Standard(p) => {
                let (xn, _) = norm_fwd(&x, &p.norm_self);
                let (k, v) = (mm(&xn, &p.wk1), mm(&xn, &p.wv1));
                let a = cached_attention(caches, l, &mm(&xn, &p.wq1), Some((&k, &v)), Keys::SelfOnly, heads, d);
                let mut x1 = x;
                x1.add_assign(&a);
                let (xn, _) = norm_fwd(&x1, &p.norm_cross);
                let c = cached_attention(caches, l, &mm(&xn, &p.wq2), None, Keys::SourceOnly, heads, d);
                x1.add_assign(&c);
                let (xn, _) = norm_fwd(&x1, &p.norm_ffn);
                x1.add_assign(&ffn_with(&xn, &p.ffn, None));
                x1
            }
            DecoderLayerParams::Compressed(p) => {
                let (xn, _) = norm_fwd(&x, &p.norm);
                let (k, v) = (mm(&xn, &p.wk1), mm(&xn, &p.wv1_folded));
                let a = cached_attention(caches, l, &mm(&xn, &p.wq), Some((&k, &v)), Keys::Joint, heads, hidden);
                x.add_assign(&ffn_with(&xn, &p.ffn, Some(&a)));
                x
            }
            DecoderLayerParams::AttnOnly(p) => {
                let (xn, _) = norm_fwd(&x, &p.norm_attn);
                let (k, v) = (mm(&xn, &p.wk1), mm(&xn, &p.wv1));
                let a = cached_attention(caches, l, &mm(&xn, &p.wq), Some((&k, &v)), Keys::Joint, heads, d);
                x.add_assign(&a);
                let (xn, _) = norm_fwd(&x, &p.norm_ffn);
                x.add_assign(&ffn_with(&xn, &p.ffn, None));
                x
            }
            DecoderLayerParams::FfnOnly(p) => {
                let (xn, _) = norm_fwd(&x, &p.norm_self);
                let (k, v) = (mm(&xn, &p.wk1), mm(&xn, &p.wv1));
                let a = cached_attention(caches, l, &mm(&xn, &p.wq1), Some((&k, &v)), Keys::SelfOnly, heads, d);
                x.add_assign(&a);
                let (xn, _) = norm_fwd(&x, &p.norm_fused);
                let c = cached_attention(caches, l, &mm(&xn, &p.wq2), None, Keys::SourceOnly, heads, hidden);
                x.add_assign(&ffn_with(&xn, &p.ffn, Some(&c)));
                x
            }
        };
    }
    let variant: DecoderVariant = model.variant();
    for c in caches.iter_mut() {
        c.pos += 1;
        c.counter.steps += 1;
        c.counter.layer_steps += n_layers as u64;
        c.counter.sublayer_stages += (variant.stages_per_layer() * n_layers) as u64;
        c.counter.softmax_stages += (variant.softmaxes_per_layer() * n_layers) as u64;
    }
    let (out, _) = norm_fwd(&x, &model.params().dec_norm);
    Ok(mm(&out, &model.params().out_proj))
}
