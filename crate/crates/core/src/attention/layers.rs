//! Pre-norm layer forwards over packed batches, with the tapes and analytic
//! backward passes used in training.
//!
//! Every stream (source or target) is a packed matrix whose rows are the
//! concatenated positions of several sentences; `Range`s mark the sentences.

use std::ops::Range;

use super::core::{attend, attend_backward, AttnTape, Dropout, KvBlock, Normalization};
use super::params::{
    AttnOnlyLayerParams, CompressedLayerParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams,
    FfnOnlyLayerParams, LayerNormParams, StandardDecoderLayerParams,
};
use crate::numerics::{layer_norm_bwd, layer_norm_fwd, mm, mm_nt, mm_tn_acc, Matrix, NormStats, Scalar, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum KvKind {
    /// Keys/values from the normalized stream itself, causal.
    SelfCausal,
    /// Keys/values from the normalized stream itself, fully visible.
    SelfFull,
    /// Keys/values from the encoder output.
    Source,
}

pub(crate) struct KvProj<'p, T> {
    pub kind: KvKind,
    pub wk: &'p Matrix<T>,
    pub wv: &'p Matrix<T>,
}

#[derive(Clone, Copy)]
pub(crate) struct Segments<'a> {
    /// Sentences of the stream being transformed (queries, self keys).
    pub stream: &'a [Range<usize>],
    /// Sentences of the encoder output; empty for encoder layers.
    pub source: &'a [Range<usize>],
}

pub(crate) fn norm_fwd<T: Scalar>(x: &Matrix<T>, p: &LayerNormParams<T>) -> (Matrix<T>, NormStats<T>) {
    layer_norm_fwd(x, &p.gain, &p.bias, T::from_f64(LAYER_NORM_EPS))
}

pub(crate) fn norm_bwd<T: Scalar>(
    dy: &Matrix<T>,
    stats: &NormStats<T>,
    p: &LayerNormParams<T>,
    g: &mut LayerNormParams<T>,
) -> Matrix<T> {
    layer_norm_bwd(dy, stats, &p.gain, &mut g.gain, &mut g.bias)
}

/// `dx` of `y = x W`, accumulating `dW`.
fn linear_bwd<T: Scalar>(dy: &Matrix<T>, x: &Matrix<T>, w: &Matrix<T>, gw: &mut Matrix<T>) -> Matrix<T> {
    mm_tn_acc(gw, x, dy);
    mm_nt(dy, w)
}

fn apply_dropout<T: Scalar>(y: &mut Matrix<T>, dropout: Option<&mut Dropout>) -> Option<Vec<T>> {
    let d = dropout.filter(|d| d.rate > 0.0)?;
    let keep = d.mask::<T>(y.len());
    for (v, k) in y.data_mut().iter_mut().zip(&keep) {
        *v *= *k;
    }
    Some(keep)
}

fn dropout_bwd<T: Scalar>(d: &Matrix<T>, keep: &Option<Vec<T>>) -> Matrix<T> {
    match keep {
        None => d.clone(),
        Some(k) => {
            let mut out = d.clone();
            for (v, m) in out.data_mut().iter_mut().zip(k) {
                *v *= *m;
            }
            out
        }
    }
}

/// Normalize, project, attend. One stage of any attention sub-layer.
#[derive(Clone, Debug)]
pub(crate) struct AttnStage<T> {
    pub stats: NormStats<T>,
    pub xn: Matrix<T>,
    pub q: Matrix<T>,
    pub keys: Vec<Matrix<T>>,
    pub values: Vec<Matrix<T>>,
    pub attn: AttnTape<T>,
    kinds: Vec<KvKind>,
}

impl<T: Scalar> AttnStage<T> {
    fn blocks<'a>(&'a self, segs: Segments<'a>) -> Vec<KvBlock<'a, T>> {
        self.kinds
            .iter()
            .zip(self.keys.iter().zip(&self.values))
            .map(|(kind, (k, v))| KvBlock {
                keys: k,
                values: v,
                segs: if *kind == KvKind::Source { segs.source } else { segs.stream },
                causal: *kind == KvKind::SelfCausal,
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_stage_fwd<T: Scalar>(
    x: &Matrix<T>,
    norm: &LayerNormParams<T>,
    wq: &Matrix<T>,
    kv: &[KvProj<'_, T>],
    h: Option<&Matrix<T>>,
    segs: Segments<'_>,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> (Matrix<T>, AttnStage<T>) {
    let (xn, stats) = norm_fwd(x, norm);
    let q = mm(&xn, wq);
    let mut keys = Vec::with_capacity(kv.len());
    let mut values = Vec::with_capacity(kv.len());
    for p in kv {
        let input = match p.kind {
            KvKind::Source => h.expect("source block needs encoder output"),
            _ => &xn,
        };
        keys.push(mm(input, p.wk));
        values.push(mm(input, p.wv));
    }
    let mut stage = AttnStage {
        stats,
        xn,
        q,
        keys,
        values,
        attn: AttnTape {
            heads,
            probs: Vec::new(),
            offsets: Vec::new(),
            keep: None,
            row_seg: Vec::new(),
        },
        kinds: kv.iter().map(|p| p.kind).collect(),
    };
    let res = attend(&stage.q, segs.stream, &stage.blocks(segs), heads, Normalization::Joint, dropout);
    stage.attn = res.tape;
    (res.out, stage)
}

/// `ReLU(xn W1 + b1 + extra) W2 + b2`.
#[derive(Clone, Debug)]
pub(crate) struct FfnTape<T> {
    pub xn: Matrix<T>,
    pub act: Matrix<T>,
}

pub(crate) fn ffn_fwd<T: Scalar>(
    xn: Matrix<T>,
    p: &FeedForwardParams<T>,
    extra: Option<&Matrix<T>>,
) -> (Matrix<T>, FfnTape<T>) {
    let mut act = mm(&xn, &p.w1);
    if let Some(e) = extra {
        act.add_assign(e);
    }
    act.add_row_broadcast(&p.b1);
    crate::numerics::relu_in_place(act.data_mut());
    let mut y = mm(&act, &p.w2);
    y.add_row_broadcast(&p.b2);
    (y, FfnTape { xn, act })
}

/// Returns `(d xn, d pre-activation)`; the latter is also the gradient of `extra`.
pub(crate) fn ffn_bwd<T: Scalar>(
    tape: &FfnTape<T>,
    dy: &Matrix<T>,
    p: &FeedForwardParams<T>,
    g: &mut FeedForwardParams<T>,
) -> (Matrix<T>, Matrix<T>) {
    g.b2.add_assign(&dy.column_sums());
    let mut dpre = linear_bwd(dy, &tape.act, &p.w2, &mut g.w2);
    for (d, a) in dpre.data_mut().iter_mut().zip(tape.act.data()) {
        if *a <= T::zero() {
            *d = T::zero();
        }
    }
    g.b1.add_assign(&dpre.column_sums());
    let dxn = linear_bwd(&dpre, &tape.xn, &p.w1, &mut g.w1);
    (dxn, dpre)
}

/// Pre-norm FFN sub-layer with residual.
#[derive(Clone, Debug)]
pub(crate) struct FfnSublayerTape<T> {
    pub stats: NormStats<T>,
    pub ffn: FfnTape<T>,
    pub keep: Option<Vec<T>>,
}

fn ffn_sublayer_fwd<T: Scalar>(
    x: &Matrix<T>,
    norm: &LayerNormParams<T>,
    p: &FeedForwardParams<T>,
    dropout: Option<&mut Dropout>,
) -> (Matrix<T>, FfnSublayerTape<T>) {
    let (xn, stats) = norm_fwd(x, norm);
    let (mut y, ffn) = ffn_fwd(xn, p, None);
    let keep = apply_dropout(&mut y, dropout);
    y.add_assign(x);
    (y, FfnSublayerTape { stats, ffn, keep })
}

fn ffn_sublayer_bwd<T: Scalar>(
    tape: &FfnSublayerTape<T>,
    d_out: &Matrix<T>,
    norm: &LayerNormParams<T>,
    g_norm: &mut LayerNormParams<T>,
    p: &FeedForwardParams<T>,
    g: &mut FeedForwardParams<T>,
) -> Matrix<T> {
    let dy = dropout_bwd(d_out, &tape.keep);
    let (dxn, _) = ffn_bwd(&tape.ffn, &dy, p, g);
    let mut dx = norm_bwd(&dxn, &tape.stats, norm, g_norm);
    dx.add_assign(d_out);
    dx
}

fn residual<T: Scalar>(x: &Matrix<T>, mut y: Matrix<T>, dropout: Option<&mut Dropout>) -> (Matrix<T>, Option<Vec<T>>) {
    let keep = apply_dropout(&mut y, dropout);
    y.add_assign(x);
    (y, keep)
}

// ---------------------------------------------------------------- encoder

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerTape<T> {
    attn: AttnStage<T>,
    keep_attn: Option<Vec<T>>,
    ffn: FfnSublayerTape<T>,
}

impl<T: Scalar> EncoderLayerParams<T> {
    fn kv(&self) -> [KvProj<'_, T>; 1] {
        [KvProj { kind: KvKind::SelfFull, wk: &self.wk, wv: &self.wv }]
    }

    pub(crate) fn forward(
        &self,
        x: &Matrix<T>,
        segs: &[Range<usize>],
        heads: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> (Matrix<T>, EncoderLayerTape<T>) {
        let s = Segments { stream: segs, source: &[] };
        let (a, attn) = attn_stage_fwd(x, &self.norm_attn, &self.wq, &self.kv(), None, s, heads, dropout.as_deref_mut());
        let (x1, keep_attn) = residual(x, a, dropout.as_deref_mut());
        let (x2, ffn) = ffn_sublayer_fwd(&x1, &self.norm_ffn, &self.ffn, dropout);
        (x2, EncoderLayerTape { attn, keep_attn, ffn })
    }

    pub(crate) fn backward(
        &self,
        tape: &EncoderLayerTape<T>,
        d_out: &Matrix<T>,
        segs: &[Range<usize>],
        g: &mut Self,
    ) -> Matrix<T> {
        let EncoderLayerParams { norm_attn, wq, wk, wv, norm_ffn, ffn } = g;
        let mut dx1 = ffn_sublayer_bwd(&tape.ffn, d_out, &self.norm_ffn, norm_ffn, &self.ffn, ffn);
        let da = dropout_bwd(&dx1, &tape.keep_attn);
        let mut unused = Matrix::zeros(0, 0);
        let dx = attn_stage_bwd(
            &tape.attn,
            &da,
            None,
            &self.norm_attn,
            norm_attn,
            &self.wq,
            wq,
            &self.kv(),
            &mut [(wk, wv)],
            None,
            &mut unused,
            Segments { stream: segs, source: &[] },
        );
        dx1.add_assign(&dx);
        dx1
    }
}

// ---------------------------------------------------------------- decoder

/// Residual-stream inputs of each sub-layer, kept for similarity probes.
#[derive(Clone, Debug, Default)]
pub struct SublayerInputs<T> {
    pub self_attn: Option<Matrix<T>>,
    pub cross_attn: Option<Matrix<T>>,
    pub ffn: Option<Matrix<T>>,
}

#[derive(Clone, Debug)]
pub(crate) enum DecoderLayerTape<T> {
    Standard {
        self_stage: AttnStage<T>,
        keep_self: Option<Vec<T>>,
        x_cross: Matrix<T>,
        cross_stage: AttnStage<T>,
        keep_cross: Option<Vec<T>>,
        x_ffn: Matrix<T>,
        ffn: FfnSublayerTape<T>,
    },
    Compressed {
        stage: AttnStage<T>,
        ffn: FfnTape<T>,
        keep: Option<Vec<T>>,
    },
    AttnOnly {
        stage: AttnStage<T>,
        keep: Option<Vec<T>>,
        ffn: FfnSublayerTape<T>,
    },
    FfnOnly {
        self_stage: AttnStage<T>,
        keep_self: Option<Vec<T>>,
        fused_stage: AttnStage<T>,
        ffn: FfnTape<T>,
        keep: Option<Vec<T>>,
    },
}

impl<T: Scalar> DecoderLayerTape<T> {
    pub(crate) fn sublayer_inputs(&self, x: &Matrix<T>) -> SublayerInputs<T> {
        match self {
            Self::Standard { x_cross, x_ffn, .. } => SublayerInputs {
                self_attn: Some(x.clone()),
                cross_attn: Some(x_cross.clone()),
                ffn: Some(x_ffn.clone()),
            },
            _ => SublayerInputs::default(),
        }
    }
}

impl<T: Scalar> StandardDecoderLayerParams<T> {
    fn self_kv(&self) -> [KvProj<'_, T>; 1] {
        [KvProj { kind: KvKind::SelfCausal, wk: &self.wk1, wv: &self.wv1 }]
    }

    fn cross_kv(&self) -> [KvProj<'_, T>; 1] {
        [KvProj { kind: KvKind::Source, wk: &self.wk2, wv: &self.wv2 }]
    }
}

impl<T: Scalar> CompressedLayerParams<T> {
    fn kv(&self) -> [KvProj<'_, T>; 2] {
        [
            KvProj { kind: KvKind::SelfCausal, wk: &self.wk1, wv: &self.wv1_folded },
            KvProj { kind: KvKind::Source, wk: &self.wk2, wv: &self.wv2_folded },
        ]
    }
}

impl<T: Scalar> AttnOnlyLayerParams<T> {
    fn kv(&self) -> [KvProj<'_, T>; 2] {
        [
            KvProj { kind: KvKind::SelfCausal, wk: &self.wk1, wv: &self.wv1 },
            KvProj { kind: KvKind::Source, wk: &self.wk2, wv: &self.wv2 },
        ]
    }
}

impl<T: Scalar> FfnOnlyLayerParams<T> {
    fn self_kv(&self) -> [KvProj<'_, T>; 1] {
        [KvProj { kind: KvKind::SelfCausal, wk: &self.wk1, wv: &self.wv1 }]
    }

    fn fused_kv(&self) -> [KvProj<'_, T>; 1] {
        [KvProj { kind: KvKind::Source, wk: &self.wk2, wv: &self.wv2_folded }]
    }
}

impl<T: Scalar> DecoderLayerParams<T> {
    pub(crate) fn forward(
        &self,
        x: &Matrix<T>,
        h: &Matrix<T>,
        segs: Segments<'_>,
        heads: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> (Matrix<T>, DecoderLayerTape<T>) {
        let hs = Some(h);
        match self {
            Self::Standard(p) => {
                let (a, self_stage) =
                    attn_stage_fwd(x, &p.norm_self, &p.wq1, &p.self_kv(), hs, segs, heads, dropout.as_deref_mut());
                let (x_cross, keep_self) = residual(x, a, dropout.as_deref_mut());
                let (c, cross_stage) = attn_stage_fwd(
                    &x_cross,
                    &p.norm_cross,
                    &p.wq2,
                    &p.cross_kv(),
                    hs,
                    segs,
                    heads,
                    dropout.as_deref_mut(),
                );
                let (x_ffn, keep_cross) = residual(&x_cross, c, dropout.as_deref_mut());
                let (out, ffn) = ffn_sublayer_fwd(&x_ffn, &p.norm_ffn, &p.ffn, dropout);
                (
                    out,
                    DecoderLayerTape::Standard { self_stage, keep_self, x_cross, cross_stage, keep_cross, x_ffn, ffn },
                )
            }
            Self::Compressed(p) => {
                let (a, stage) = attn_stage_fwd(x, &p.norm, &p.wq, &p.kv(), hs, segs, heads, dropout.as_deref_mut());
                let (y, ffn) = ffn_fwd(stage.xn.clone(), &p.ffn, Some(&a));
                let (out, keep) = residual(x, y, dropout);
                (out, DecoderLayerTape::Compressed { stage, ffn, keep })
            }
            Self::AttnOnly(p) => {
                let (a, stage) =
                    attn_stage_fwd(x, &p.norm_attn, &p.wq, &p.kv(), hs, segs, heads, dropout.as_deref_mut());
                let (x_ffn, keep) = residual(x, a, dropout.as_deref_mut());
                let (out, ffn) = ffn_sublayer_fwd(&x_ffn, &p.norm_ffn, &p.ffn, dropout);
                (out, DecoderLayerTape::AttnOnly { stage, keep, ffn })
            }
            Self::FfnOnly(p) => {
                let (a, self_stage) =
                    attn_stage_fwd(x, &p.norm_self, &p.wq1, &p.self_kv(), hs, segs, heads, dropout.as_deref_mut());
                let (x_fused, keep_self) = residual(x, a, dropout.as_deref_mut());
                let (c, fused_stage) = attn_stage_fwd(
                    &x_fused,
                    &p.norm_fused,
                    &p.wq2,
                    &p.fused_kv(),
                    hs,
                    segs,
                    heads,
                    dropout.as_deref_mut(),
                );
                let (y, ffn) = ffn_fwd(fused_stage.xn.clone(), &p.ffn, Some(&c));
                let (out, keep) = residual(&x_fused, y, dropout);
                (out, DecoderLayerTape::FfnOnly { self_stage, keep_self, fused_stage, ffn, keep })
            }
        }
    }

    /// Backward through one decoder layer. Returns `dx`; accumulates the
    /// encoder-output gradient into `dh` and parameter gradients into `g`.
    pub(crate) fn backward(
        &self,
        tape: &DecoderLayerTape<T>,
        d_out: &Matrix<T>,
        h: &Matrix<T>,
        dh: &mut Matrix<T>,
        segs: Segments<'_>,
        g: &mut Self,
    ) -> Matrix<T> {
        let hs = Some(h);
        match (self, tape, g) {
            (
                Self::Standard(p),
                DecoderLayerTape::Standard { self_stage, keep_self, cross_stage, keep_cross, ffn, .. },
                Self::Standard(g),
            ) => {
                let StandardDecoderLayerParams {
                    norm_self,
                    wq1,
                    wk1,
                    wv1,
                    norm_cross,
                    wq2,
                    wk2,
                    wv2,
                    norm_ffn,
                    ffn: g_ffn,
                } = g;
                let mut dx2 = ffn_sublayer_bwd(ffn, d_out, &p.norm_ffn, norm_ffn, &p.ffn, g_ffn);
                let dc = dropout_bwd(&dx2, keep_cross);
                let d = attn_stage_bwd(
                    cross_stage,
                    &dc,
                    None,
                    &p.norm_cross,
                    norm_cross,
                    &p.wq2,
                    wq2,
                    &p.cross_kv(),
                    &mut [(wk2, wv2)],
                    hs,
                    dh,
                    segs,
                );
                dx2.add_assign(&d);
                let da = dropout_bwd(&dx2, keep_self);
                let d = attn_stage_bwd(
                    self_stage,
                    &da,
                    None,
                    &p.norm_self,
                    norm_self,
                    &p.wq1,
                    wq1,
                    &p.self_kv(),
                    &mut [(wk1, wv1)],
                    hs,
                    dh,
                    segs,
                );
                dx2.add_assign(&d);
                dx2
            }
            (Self::Compressed(p), DecoderLayerTape::Compressed { stage, ffn, keep }, Self::Compressed(g)) => {
                let CompressedLayerParams { norm, wq, wk1, wk2, wv1_folded, wv2_folded, ffn: g_ffn } = g;
                let dy = dropout_bwd(d_out, keep);
                let (dxn_ffn, dpre) = ffn_bwd(ffn, &dy, &p.ffn, g_ffn);
                // `xn` feeds both the attention stage and `xn W1`.
                let dx_attn = attn_stage_bwd(
                    stage,
                    &dpre,
                    Some(&dxn_ffn),
                    &p.norm,
                    norm,
                    &p.wq,
                    wq,
                    &p.kv(),
                    &mut [(wk1, wv1_folded), (wk2, wv2_folded)],
                    hs,
                    dh,
                    segs,
                );
                let mut dx = d_out.clone();
                dx.add_assign(&dx_attn);
                dx
            }
            (
                Self::AttnOnly(p),
                DecoderLayerTape::AttnOnly { stage, keep, ffn, .. },
                Self::AttnOnly(g),
            ) => {
                let AttnOnlyLayerParams { norm_attn, wq, wk1, wk2, wv1, wv2, norm_ffn, ffn: g_ffn } = g;
                let mut dx1 = ffn_sublayer_bwd(ffn, d_out, &p.norm_ffn, norm_ffn, &p.ffn, g_ffn);
                let da = dropout_bwd(&dx1, keep);
                let d = attn_stage_bwd(
                    stage,
                    &da,
                    None,
                    &p.norm_attn,
                    norm_attn,
                    &p.wq,
                    wq,
                    &p.kv(),
                    &mut [(wk1, wv1), (wk2, wv2)],
                    hs,
                    dh,
                    segs,
                );
                dx1.add_assign(&d);
                dx1
            }
            (
                Self::FfnOnly(p),
                DecoderLayerTape::FfnOnly { self_stage, keep_self, fused_stage, ffn, keep, .. },
                Self::FfnOnly(g),
            ) => {
                let FfnOnlyLayerParams {
                    norm_self,
                    wq1,
                    wk1,
                    wv1,
                    norm_fused,
                    wq2,
                    wk2,
                    wv2_folded,
                    ffn: g_ffn,
                } = g;
                let dy = dropout_bwd(d_out, keep);
                let (dxn_ffn, dpre) = ffn_bwd(ffn, &dy, &p.ffn, g_ffn);
                let d = attn_stage_bwd(
                    fused_stage,
                    &dpre,
                    Some(&dxn_ffn),
                    &p.norm_fused,
                    norm_fused,
                    &p.wq2,
                    wq2,
                    &p.fused_kv(),
                    &mut [(wk2, wv2_folded)],
                    hs,
                    dh,
                    segs,
                );
                let mut dx1 = d_out.clone();
                dx1.add_assign(&d);
                let da = dropout_bwd(&dx1, keep_self);
                let d = attn_stage_bwd(
                    self_stage,
                    &da,
                    None,
                    &p.norm_self,
                    norm_self,
                    &p.wq1,
                    wq1,
                    &p.self_kv(),
                    &mut [(wk1, wv1)],
                    hs,
                    dh,
                    segs,
                );
                dx1.add_assign(&d);
                dx1
            }
            _ => panic!("decoder layer, tape and gradient variants disagree"),
        }
    }
}

/// Backward through an attention stage; returns the gradient with respect to
/// the stage's (pre-norm) input and accumulates into `dh` for source blocks.
/// `d_xn_extra` is any further gradient reaching the normalized input (the
/// fused layers reuse `xn` for `xn W1`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_stage_bwd<T: Scalar>(
    stage: &AttnStage<T>,
    d_out: &Matrix<T>,
    d_xn_extra: Option<&Matrix<T>>,
    norm: &LayerNormParams<T>,
    g_norm: &mut LayerNormParams<T>,
    wq: &Matrix<T>,
    g_wq: &mut Matrix<T>,
    kv: &[KvProj<'_, T>],
    g_kv: &mut [(&mut Matrix<T>, &mut Matrix<T>)],
    h: Option<&Matrix<T>>,
    dh: &mut Matrix<T>,
    segs: Segments<'_>,
) -> Matrix<T> {
    let blocks = stage.blocks(segs);
    let (dq, dkv) = attend_backward(d_out, &stage.q, segs.stream, &blocks, &stage.attn);
    let mut dxn = linear_bwd(&dq, &stage.xn, wq, g_wq);
    if let Some(e) = d_xn_extra {
        dxn.add_assign(e);
    }
    for ((p, (dk, dv)), (g_wk, g_wv)) in kv.iter().zip(&dkv).zip(g_kv.iter_mut()) {
        let input = match p.kind {
            KvKind::Source => h.expect("source block needs encoder output"),
            _ => &stage.xn,
        };
        let mut d_in = linear_bwd(dk, input, p.wk, g_wk);
        d_in.add_assign(&linear_bwd(dv, input, p.wv, g_wv));
        match p.kind {
            KvKind::Source => dh.add_assign(&d_in),
            _ => dxn.add_assign(&d_in),
        }
    }
    norm_bwd(&dxn, &stage.stats, norm, g_norm)
}
