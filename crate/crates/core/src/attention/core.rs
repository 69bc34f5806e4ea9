//! Multi-head scaled dot-product attention over packed sequences.
//!
//! Queries are a packed `rows x (h * dk)` matrix split into per-sentence
//! segments. Keys and values come from one or more [`KvBlock`]s; query segment
//! `i` sees rows `block.segs[i]` of every block (only the causal prefix for a
//! causal block). With several blocks and [`Normalization::Joint`] the logits
//! of all visible keys share one softmax.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{dot, softmax_in_place, Matrix, Scalar};

#[derive(Clone, Copy)]
pub(crate) struct KvBlock<'a, T> {
    pub keys: &'a Matrix<T>,
    pub values: &'a Matrix<T>,
    pub segs: &'a [Range<usize>],
    pub causal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Normalization {
    /// One softmax across every visible key of every block.
    Joint,
    /// An independent softmax per block, each multiplied by `scale`.
    PerBlock { scale: f64 },
}

/// Inverted dropout with its own seeded stream.
pub struct Dropout {
    pub(crate) rate: f64,
    pub(crate) rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Keep-multipliers (`0` or `1/(1-rate)`) for `n` entries.
    pub(crate) fn mask<T: Scalar>(&mut self, n: usize) -> Vec<T> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect()
    }
}

/// Saved probabilities for the backward pass. For query row `r` and head `h`
/// the visible keys' probabilities live at `probs[offsets[r*heads+h]..]`,
/// ordered block by block.
#[derive(Clone, Debug)]
pub(crate) struct AttnTape<T> {
    pub heads: usize,
    pub probs: Vec<T>,
    pub offsets: Vec<usize>,
    pub keep: Option<Vec<T>>,
    pub row_seg: Vec<usize>,
}

pub(crate) struct AttnResult<T> {
    pub out: Matrix<T>,
    pub tape: AttnTape<T>,
}

fn visible<T>(block: &KvBlock<'_, T>, seg: usize, local_row: usize) -> Range<usize> {
    let r = block.segs[seg].clone();
    if block.causal {
        r.start..(r.start + local_row + 1).min(r.end)
    } else {
        r
    }
}

fn row_segments(q_segs: &[Range<usize>], rows: usize) -> Vec<usize> {
    let mut seg_of = vec![usize::MAX; rows];
    for (i, s) in q_segs.iter().enumerate() {
        for r in s.clone() {
            seg_of[r] = i;
        }
    }
    seg_of
}

pub(crate) fn attend<T: Scalar>(
    q: &Matrix<T>,
    q_segs: &[Range<usize>],
    blocks: &[KvBlock<'_, T>],
    heads: usize,
    norm: Normalization,
    dropout: Option<&mut Dropout>,
) -> AttnResult<T> {
    let rows = q.rows();
    let dk = q.cols() / heads;
    let dv = blocks[0].values.cols() / heads;
    debug_assert_eq!(q.cols(), dk * heads);
    for b in blocks {
        debug_assert_eq!(b.keys.cols(), q.cols());
        debug_assert_eq!(b.values.cols(), dv * heads);
        debug_assert_eq!(b.segs.len(), q_segs.len());
    }
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    let row_seg = row_segments(q_segs, rows);

    let mut out = Matrix::zeros(rows, dv * heads);
    let mut probs: Vec<T> = Vec::new();
    let mut offsets = Vec::with_capacity(rows * heads + 1);
    let mut ranges: Vec<Range<usize>> = Vec::with_capacity(blocks.len());

    for r in 0..rows {
        let seg = row_seg[r];
        let local = r - q_segs[seg].start;
        ranges.clear();
        ranges.extend(blocks.iter().map(|b| visible(b, seg, local)));
        let qrow = q.row(r);
        for h in 0..heads {
            let start = probs.len();
            offsets.push(start);
            let qh = &qrow[h * dk..(h + 1) * dk];
            for (b, range) in blocks.iter().zip(&ranges) {
                for j in range.clone() {
                    probs.push(dot(qh, &b.keys.row(j)[h * dk..(h + 1) * dk]) * scale);
                }
            }
            match norm {
                Normalization::Joint => {
                    softmax_in_place(&mut probs[start..], None);
                }
                Normalization::PerBlock { scale: s } => {
                    let s = T::from_f64(s);
                    let mut lo = start;
                    for range in &ranges {
                        let hi = lo + range.len();
                        softmax_in_place(&mut probs[lo..hi], None);
                        probs[lo..hi].iter_mut().for_each(|p| *p *= s);
                        lo = hi;
                    }
                }
            }
        }
    }
    offsets.push(probs.len());

    let keep = dropout.filter(|d| d.rate > 0.0).map(|d| d.mask::<T>(probs.len()));

    for r in 0..rows {
        let seg = row_seg[r];
        let local = r - q_segs[seg].start;
        for h in 0..heads {
            let mut idx = offsets[r * heads + h];
            let orow = &mut out.row_mut(r)[h * dv..(h + 1) * dv];
            for b in blocks {
                for j in visible(b, seg, local) {
                    let mut p = probs[idx];
                    if let Some(k) = &keep {
                        p *= k[idx];
                    }
                    idx += 1;
                    if p == T::zero() {
                        continue;
                    }
                    let vrow = &b.values.row(j)[h * dv..(h + 1) * dv];
                    for (o, v) in orow.iter_mut().zip(vrow) {
                        *o += p * *v;
                    }
                }
            }
        }
    }

    AttnResult {
        out,
        tape: AttnTape {
            heads,
            probs,
            offsets,
            keep,
            row_seg,
        },
    }
}

/// Gradients of [`attend`] (joint normalization only). Returns `dq` and one
/// `(dkeys, dvalues)` pair per block.
pub(crate) fn attend_backward<T: Scalar>(
    d_out: &Matrix<T>,
    q: &Matrix<T>,
    q_segs: &[Range<usize>],
    blocks: &[KvBlock<'_, T>],
    tape: &AttnTape<T>,
) -> (Matrix<T>, Vec<(Matrix<T>, Matrix<T>)>) {
    let heads = tape.heads;
    let rows = q.rows();
    let dk = q.cols() / heads;
    let dv = blocks[0].values.cols() / heads;
    let scale = T::one() / T::from_f64(dk as f64).sqrt();

    let mut dq = Matrix::zeros(rows, q.cols());
    let mut dkv: Vec<(Matrix<T>, Matrix<T>)> = blocks
        .iter()
        .map(|b| (Matrix::zeros(b.keys.rows(), b.keys.cols()), Matrix::zeros(b.values.rows(), b.values.cols())))
        .collect();
    let mut dp: Vec<T> = Vec::new();

    for r in 0..rows {
        let seg = tape.row_seg[r];
        let local = r - q_segs[seg].start;
        let qrow = q.row(r);
        let grow = d_out.row(r);
        for h in 0..heads {
            let start = tape.offsets[r * heads + h];
            let end = tape.offsets[r * heads + h + 1];
            let p = &tape.probs[start..end];
            let gh = &grow[h * dv..(h + 1) * dv];

            // dL/dp for the pre-dropout probabilities
            dp.clear();
            let mut idx = start;
            for (b, (_, dvals)) in blocks.iter().zip(dkv.iter_mut()) {
                for j in visible(b, seg, local) {
                    let k = tape.keep.as_ref().map_or(T::one(), |k| k[idx]);
                    let pe = tape.probs[idx] * k;
                    let vrow = &b.values.row(j)[h * dv..(h + 1) * dv];
                    dp.push(dot(gh, vrow) * k);
                    if pe != T::zero() {
                        let dvrow = &mut dvals.row_mut(j)[h * dv..(h + 1) * dv];
                        for (o, g) in dvrow.iter_mut().zip(gh) {
                            *o += pe * *g;
                        }
                    }
                    idx += 1;
                }
            }
            let c: T = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum();

            let qh = &qrow[h * dk..(h + 1) * dk];
            let mut n = 0;
            for (b, (dkeys, _)) in blocks.iter().zip(dkv.iter_mut()) {
                for j in visible(b, seg, local) {
                    let ds = p[n] * (dp[n] - c) * scale;
                    n += 1;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &b.keys.row(j)[h * dk..(h + 1) * dk];
                    let dqh = &mut dq.row_mut(r)[h * dk..(h + 1) * dk];
                    for (o, kv) in dqh.iter_mut().zip(krow) {
                        *o += ds * *kv;
                    }
                    let dkrow = &mut dkeys.row_mut(j)[h * dk..(h + 1) * dk];
                    for (o, qv) in dkrow.iter_mut().zip(qh) {
                        *o += ds * *qv;
                    }
                }
            }
        }
    }
    (dq, dkv)
}

/// Per-head attention distributions for one query segment laid out densely
/// over the concatenated key axis of all blocks (masked entries are zero).
pub(crate) fn dense_probs<T: Scalar>(
    tape: &AttnTape<T>,
    q_seg: Range<usize>,
    seg: usize,
    blocks: &[KvBlock<'_, T>],
) -> Vec<Matrix<T>> {
    let heads = tape.heads;
    let width: usize = blocks.iter().map(|b| b.segs[seg].len()).sum();
    let mut out = vec![Matrix::zeros(q_seg.len(), width); heads];
    for (li, r) in q_seg.clone().enumerate() {
        for (h, m) in out.iter_mut().enumerate() {
            let mut idx = tape.offsets[r * heads + h];
            let mut col0 = 0;
            for b in blocks {
                let base = b.segs[seg].start;
                for j in visible(b, seg, li) {
                    m.set(li, col0 + j - base, tape.probs[idx]);
                    idx += 1;
                }
                col0 += b.segs[seg].len();
            }
        }
    }
    out
}
