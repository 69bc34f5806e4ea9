use std::cmp::Ordering;

use super::{decode_steps, log_softmax, DecodeCache, SourceMemory, StageCounter};
use crate::error::{Error, Result};
use crate::model::{Model, BOS, EOS};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub max_len: usize,
    /// EOS is suppressed until this many tokens have been generated.
    pub min_len: usize,
    /// Exponent `a` in `score = logp / len^a`.
    pub length_penalty: f64,
}

impl SearchOptions {
    /// `max_len = 2 * src_len + 8`, no minimum, plain length normalization.
    pub fn for_source(src_len: usize) -> Self {
        Self { max_len: 2 * src_len + 8, min_len: 0, length_penalty: 1.0 }
    }

    pub fn max_len(max_len: usize) -> Self {
        Self { max_len, min_len: 0, length_penalty: 1.0 }
    }

    /// Exactly `len` tokens, EOS never chosen.
    pub fn forced(len: usize) -> Self {
        Self { max_len: len, min_len: len, length_penalty: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS when finished.
    pub tokens: Vec<u32>,
    pub logp: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        normalized(self.logp, self.tokens.len(), length_penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn normalized(logp: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 || alpha == 0.0 {
        logp
    } else {
        logp / (len as f64).powf(alpha)
    }
}

fn step_logp<T: Scalar>(row: &[T], generated: usize, opts: &SearchOptions) -> Vec<f64> {
    let mut lp: Vec<f64> = log_softmax(row).into_iter().map(|v| v.as_f64()).collect();
    if generated < opts.min_len && (EOS as usize) < lp.len() {
        lp[EOS as usize] = f64::NEG_INFINITY;
    }
    lp
}

/// Argmax decoding; ties go to the lowest id. Returns the generated tokens,
/// including a final EOS if one was produced.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    greedy_decode_with(model, src, &SearchOptions::max_len(max_len))
}

pub fn greedy_decode_with<T: Scalar>(model: &Model<T>, src: &[u32], opts: &SearchOptions) -> Result<Vec<u32>> {
    Ok(greedy_decode_batch(model, &[src], opts)?.pop().expect("one sentence"))
}

/// Greedy decoding of several sentences, stepping all unfinished ones in
/// one batched pass per position.
pub fn greedy_decode_batch<T: Scalar>(model: &Model<T>, srcs: &[&[u32]], opts: &SearchOptions) -> Result<Vec<Vec<u32>>> {
    Ok(greedy_decode_batch_counted(model, srcs, opts)?.0)
}

/// [`greedy_decode_batch`] plus the summed work counters of every sentence.
pub fn greedy_decode_batch_counted<T: Scalar>(
    model: &Model<T>,
    srcs: &[&[u32]],
    opts: &SearchOptions,
) -> Result<(Vec<Vec<u32>>, StageCounter)> {
    let mut caches = srcs.iter().map(|s| DecodeCache::new(model, s)).collect::<Result<Vec<_>>>()?;
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); srcs.len()];
    let mut live: Vec<usize> = (0..srcs.len()).collect();
    let mut last = vec![BOS; srcs.len()];
    for step in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        let tokens: Vec<u32> = live.iter().map(|&i| last[i]).collect();
        let mut refs: Vec<&mut DecodeCache<T>> = Vec::with_capacity(live.len());
        {
            let mut rest: &mut [DecodeCache<T>] = &mut caches;
            let mut base = 0;
            for &i in &live {
                let (_, tail) = rest.split_at_mut(i - base);
                let (head, tail) = tail.split_at_mut(1);
                refs.push(&mut head[0]);
                rest = tail;
                base = i + 1;
            }
        }
        let logits = decode_steps(model, &mut refs, &tokens)?;
        let mut next_live = Vec::with_capacity(live.len());
        for (r, &i) in live.iter().enumerate() {
            let lp = step_logp(logits.row(r), step, opts);
            let t = super::argmax(&lp) as u32;
            outputs[i].push(t);
            last[i] = t;
            if t != EOS {
                next_live.push(i);
            }
        }
        live = next_live;
    }
    let mut counter = StageCounter::default();
    caches.iter().for_each(|c| counter.add(c.counter()));
    Ok((outputs, counter))
}

pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    src: &[u32],
    width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    beam_search_with(model, src, width, &SearchOptions { max_len, min_len: 0, length_penalty })
}

struct Candidate {
    parent: usize,
    token: u32,
    logp: f64,
    score: f64,
    tokens: Vec<u32>,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> bool {
    match a.score(alpha).total_cmp(&b.score(alpha)) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.tokens < b.tokens,
    }
}

/// Beam search: each step expands every live hypothesis by every token and
/// keeps the `width` best by length-normalized score (ties to the
/// lexicographically smaller sequence). EOS-terminated survivors retire;
/// search ends when none are live or `max_len` tokens exist.
pub fn beam_search_with<T: Scalar>(model: &Model<T>, src: &[u32], width: usize, opts: &SearchOptions) -> Result<Hypothesis> {
    Ok(beam_search_counted(model, src, width, opts)?.0)
}

/// [`beam_search_with`] plus the work counters summed over all hypotheses.
pub fn beam_search_counted<T: Scalar>(
    model: &Model<T>,
    src: &[u32],
    width: usize,
    opts: &SearchOptions,
) -> Result<(Hypothesis, StageCounter)> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if opts.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let memory = SourceMemory::encode(model, src)?;
    let mut counter = StageCounter { source_projections: memory.projection_count(), ..Default::default() };
    let mut caches = vec![DecodeCache::from_memory(model, memory)];
    let mut alive = vec![Hypothesis { tokens: Vec::new(), logp: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let alpha = opts.length_penalty;

    for step in 0..opts.max_len {
        let tokens: Vec<u32> = alive.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let mut refs: Vec<&mut DecodeCache<T>> = caches.iter_mut().collect();
        let before: Vec<StageCounter> = refs.iter().map(|c| *c.counter()).collect();
        let logits = decode_steps(model, &mut refs, &tokens)?;
        for (c, b) in refs.iter().zip(&before) {
            let a = c.counter();
            counter.add(&StageCounter {
                source_projections: 0,
                steps: a.steps - b.steps,
                layer_steps: a.layer_steps - b.layer_steps,
                sublayer_stages: a.sublayer_stages - b.sublayer_stages,
                softmax_stages: a.softmax_stages - b.softmax_stages,
            });
        }

        let mut cands = Vec::with_capacity(alive.len() * logits.cols());
        for (r, hyp) in alive.iter().enumerate() {
            for (t, lp) in step_logp(logits.row(r), step, opts).into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let logp = hyp.logp + lp;
                let mut seq = hyp.tokens.clone();
                seq.push(t as u32);
                cands.push(Candidate { parent: r, token: t as u32, logp, score: normalized(logp, seq.len(), alpha), tokens: seq });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);

        let last_step = step + 1 == opts.max_len;
        let mut next_alive = Vec::new();
        let mut next_caches = Vec::new();
        for c in cands {
            let done = c.token == EOS;
            let hyp = Hypothesis { tokens: c.tokens, logp: c.logp, finished: done };
            if done || last_step {
                finished.push(hyp);
            } else {
                next_caches.push(caches[c.parent].clone());
                next_alive.push(hyp);
            }
        }
        alive = next_alive;
        caches = next_caches;
        if alive.is_empty() {
            break;
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| better(&h, b, alpha)) {
            best = Some(h);
        }
    }
    let best = best.ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))?;
    Ok((best, counter))
}
