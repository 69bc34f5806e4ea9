//! Decoder sub-layers: self-attention, cross-attention and FFN, the compressed
//! attention that replaces all three, and the two partial-compression
//! ablations.
//!
//! The functions here operate on already-normalized inputs and return the
//! sub-layer output without a residual, except where noted. Model layers wrap
//! them with pre-norm and residual connections (see [`crate::model`]).
//!
//! Multi-head layout: `heads` divides the model width; each head uses a
//! `d/heads` slice of the query/key projections with `1/sqrt(d/heads)`
//! scaling and the matching `width/heads` slice of the values. For the
//! compressed layer the values are `4d` wide, so each head contributes a
//! `4d/heads` slice of the FFN pre-activation.

pub(crate) mod core;
pub(crate) mod layers;
mod params;

use std::ops::Range;

pub use params::{
    AttnOnlyLayerParams, CompressedLayerParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams,
    FfnOnlyLayerParams, LayerNormParams, StandardDecoderLayerParams,
};
pub(crate) use params::{CastParam, Init};
pub use self::core::Dropout;
pub use self::layers::SublayerInputs;

use self::core::{attend, dense_probs, KvBlock, Normalization};
use crate::error::{Error, Result};
use crate::numerics::{mm, Mask, Matrix, Scalar};

/// Visibility over the concatenated `[target; source]` key axis: target
/// position `i` sees target positions `0..=i` and every source position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointMask {
    t: usize,
    s: usize,
    allowed: Mask,
}

impl JointMask {
    pub fn new(t: usize, s: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidArgument("joint mask needs at least one source position".into()));
        }
        Ok(Self {
            t,
            s,
            allowed: Mask::from_fn(t, t + s, |i, j| j >= t || j <= i),
        })
    }

    pub fn target_len(&self) -> usize {
        self.t
    }

    pub fn source_len(&self) -> usize {
        self.s
    }

    pub fn allowed(&self) -> &Mask {
        &self.allowed
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed.allows(i, j)
    }

    fn check(&self, x: &Matrix<impl Scalar>, h: &Matrix<impl Scalar>) -> Result<()> {
        if self.t != x.rows() || self.s != h.rows() {
            return Err(Error::shape("joint mask", (self.t, self.s), (x.rows(), h.rows())));
        }
        Ok(())
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
    }
    Ok(())
}

fn check_width<T: Scalar>(op: &'static str, x: &Matrix<T>, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::shape(op, x.shape(), (x.rows(), d)));
    }
    Ok(())
}

fn whole(n: usize) -> [Range<usize>; 1] {
    [0..n]
}

fn single_block<T: Scalar>(
    q: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    causal: bool,
    heads: usize,
) -> Matrix<T> {
    let qs = whole(q.rows());
    let ks = whole(keys.rows());
    let blocks = [KvBlock { keys, values, segs: &ks, causal }];
    attend(q, &qs, &blocks, heads, Normalization::Joint, None).out
}

/// `softmax(X Wq1 (X Wk1)^T / sqrt(d_head)) X Wv1` per head, heads concatenated.
pub fn self_attention<T: Scalar>(
    x: &Matrix<T>,
    p: &StandardDecoderLayerParams<T>,
    heads: usize,
    causal: bool,
) -> Result<Matrix<T>> {
    let d = p.d_model();
    check_width("self_attention", x, d)?;
    check_heads(d, heads)?;
    let q = mm(x, &p.wq1);
    let k = mm(x, &p.wk1);
    let v = mm(x, &p.wv1);
    Ok(single_block(&q, &k, &v, causal, heads))
}

/// `softmax(X Wq2 (H Wk2)^T / sqrt(d_head)) H Wv2` per head.
pub fn cross_attention<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    p: &StandardDecoderLayerParams<T>,
    heads: usize,
) -> Result<Matrix<T>> {
    let d = p.d_model();
    check_width("cross_attention", x, d)?;
    check_width("cross_attention", h, d)?;
    check_heads(d, heads)?;
    if h.rows() == 0 {
        return Err(Error::InvalidArgument("cross attention needs a non-empty source".into()));
    }
    let q = mm(x, &p.wq2);
    let k = mm(h, &p.wk2);
    let v = mm(h, &p.wv2);
    Ok(single_block(&q, &k, &v, false, heads))
}

/// `ReLU(X W1 + b1) W2 + b2`.
pub fn ffn<T: Scalar>(x: &Matrix<T>, p: &FeedForwardParams<T>) -> Result<Matrix<T>> {
    check_width("ffn", x, p.d_model())?;
    Ok(layers::ffn_fwd(x.clone(), p, None).0)
}

/// `[Ax, Ah] [X Wv1; H Wv2]` as one product over the concatenated axis.
pub fn concat_attention_identity<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    ax: &Matrix<T>,
    ah: &Matrix<T>,
    wv1: &Matrix<T>,
    wv2: &Matrix<T>,
) -> Result<Matrix<T>> {
    let (t, s) = (x.rows(), h.rows());
    if ax.shape() != (t, t) {
        return Err(Error::shape("concat_attention_identity Ax", ax.shape(), (t, t)));
    }
    if ah.shape() != (t, s) {
        return Err(Error::shape("concat_attention_identity Ah", ah.shape(), (t, s)));
    }
    if x.cols() != wv1.rows() || h.cols() != wv2.rows() || wv1.cols() != wv2.cols() {
        return Err(Error::shape("concat_attention_identity values", wv1.shape(), wv2.shape()));
    }
    let a = Matrix::hcat(&[ax, ah])?;
    let values = Matrix::vcat(&[&mm(x, wv1), &mm(h, wv2)])?;
    crate::numerics::matmul(&a, &values)
}

fn joint_blocks_check<T: Scalar>(
    op: &'static str,
    x: &Matrix<T>,
    h: &Matrix<T>,
    d: usize,
    heads: usize,
    mask: &JointMask,
) -> Result<()> {
    check_width(op, x, d)?;
    check_width(op, h, d)?;
    check_heads(d, heads)?;
    mask.check(x, h)
}

#[allow(clippy::too_many_arguments)]
fn joint_attend<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    wq: &Matrix<T>,
    wk1: &Matrix<T>,
    wk2: &Matrix<T>,
    wv1: &Matrix<T>,
    wv2: &Matrix<T>,
    heads: usize,
    norm: Normalization,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let q = mm(x, wq);
    let (k1, k2) = (mm(x, wk1), mm(h, wk2));
    let (v1, v2) = (mm(x, wv1), mm(h, wv2));
    let ts = whole(x.rows());
    let ss = whole(h.rows());
    let blocks = [
        KvBlock { keys: &k1, values: &v1, segs: &ts, causal: true },
        KvBlock { keys: &k2, values: &v2, segs: &ss, causal: false },
    ];
    let res = attend(&q, &ts, &blocks, heads, norm, None);
    let probs = dense_probs(&res.tape, 0..x.rows(), 0, &blocks);
    (res.out, probs)
}

/// Per-head joint attention distributions `t x (t + s)` from a shared query
/// against `[X Wk1; H Wk2]` with a single softmax per row.
pub fn joint_attention_weights<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    wq: &Matrix<T>,
    wk1: &Matrix<T>,
    wk2: &Matrix<T>,
    heads: usize,
    mask: &JointMask,
) -> Result<Vec<Matrix<T>>> {
    joint_blocks_check("joint_attention_weights", x, h, wq.rows(), heads, mask)?;
    let zeros = Matrix::zeros(wq.rows(), heads);
    Ok(joint_attend(x, h, wq, wk1, wk2, &zeros, &zeros, heads, Normalization::Joint).1)
}

/// The fused layer body: `ReLU(X W1 + A [X W~v1; H W~v2] + b1) W2 + b2`.
pub fn compressed_attention<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    p: &CompressedLayerParams<T>,
    heads: usize,
    mask: &JointMask,
) -> Result<Matrix<T>> {
    joint_blocks_check("compressed_attention", x, h, p.d_model(), heads, mask)?;
    let (a, _) = joint_attend(x, h, &p.wq, &p.wk1, &p.wk2, &p.wv1_folded, &p.wv2_folded, heads, Normalization::Joint);
    Ok(layers::ffn_fwd(x.clone(), &p.ffn, Some(&a)).0)
}

/// Reference variant of [`compressed_attention`] that normalizes the target
/// and source blocks separately and scales the concatenation by `1/sqrt(2)`.
/// Test reference only; the model never uses it.
pub fn compressed_two_softmax_reference<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    p: &CompressedLayerParams<T>,
    heads: usize,
    mask: &JointMask,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    joint_blocks_check("compressed_two_softmax_reference", x, h, p.d_model(), heads, mask)?;
    let (a, probs) = joint_attend(
        x,
        h,
        &p.wq,
        &p.wk1,
        &p.wk2,
        &p.wv1_folded,
        &p.wv2_folded,
        heads,
        Normalization::PerBlock { scale: std::f64::consts::FRAC_1_SQRT_2 },
    );
    Ok((layers::ffn_fwd(x.clone(), &p.ffn, Some(&a)).0, probs))
}

/// Joint attention with d-wide values and a residual, followed by an FFN
/// sub-layer with its own residual: `Y = X + A [X Wv1; H Wv2]`, `Y + FFN(Y)`.
pub fn ablation_compress_attention_only<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    p: &AttnOnlyLayerParams<T>,
    heads: usize,
    mask: &JointMask,
) -> Result<Matrix<T>> {
    joint_blocks_check("ablation_compress_attention_only", x, h, p.d_model(), heads, mask)?;
    let (a, _) = joint_attend(x, h, &p.wq, &p.wk1, &p.wk2, &p.wv1, &p.wv2, heads, Normalization::Joint);
    let mut y = a;
    y.add_assign(x);
    let mut out = layers::ffn_fwd(y.clone(), &p.ffn, None).0;
    out.add_assign(&y);
    Ok(out)
}

/// Self-attention sub-layer with residual, `X' = X + Self(X)`, then the
/// fused cross-attention and FFN: `ReLU(X' W1 + Ah [H W~v2] + b1) W2 + b2`.
pub fn ablation_compress_ffn_only<T: Scalar>(
    x: &Matrix<T>,
    h: &Matrix<T>,
    p: &FfnOnlyLayerParams<T>,
    heads: usize,
    mask: &JointMask,
) -> Result<Matrix<T>> {
    joint_blocks_check("ablation_compress_ffn_only", x, h, p.d_model(), heads, mask)?;
    let q1 = mm(x, &p.wq1);
    let k1 = mm(x, &p.wk1);
    let v1 = mm(x, &p.wv1);
    let mut x1 = single_block(&q1, &k1, &v1, true, heads);
    x1.add_assign(x);
    let q2 = mm(&x1, &p.wq2);
    let k2 = mm(h, &p.wk2);
    let v2 = mm(h, &p.wv2_folded);
    let c = single_block(&q2, &k2, &v2, false, heads);
    Ok(layers::ffn_fwd(x1, &p.ffn, Some(&c)).0)
}
