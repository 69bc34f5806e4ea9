use crate::numerics::{uniform_init, xavier_init, Matrix, Scalar};
use crate::params::{impl_param_set, ParamSet};

/// Deterministic per-tensor seed derived from the model seed and the tensor's
/// name, so a tensor's initial value does not depend on what else the model
/// contains.
pub(crate) fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the model seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) struct Init<'a> {
    pub seed: u64,
    pub prefix: &'a str,
}

impl Init<'_> {
    pub(crate) fn xavier<T: Scalar>(&self, name: &str, rows: usize, cols: usize) -> Matrix<T> {
        let full = crate::params::join(self.prefix, name);
        xavier_init(rows, cols, tensor_seed(self.seed, &full))
    }

    pub(crate) fn uniform<T: Scalar>(&self, name: &str, rows: usize, cols: usize, bound: f64) -> Matrix<T> {
        let full = crate::params::join(self.prefix, name);
        uniform_init(rows, cols, bound, tensor_seed(self.seed, &full))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = f64> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
}

impl_param_set!(LayerNormParams { gain, bias });

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, T::one()),
            bias: Matrix::zeros(1, d),
        }
    }
}

/// Position-wise feed-forward weights: `ReLU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<T = f64> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl_param_set!(FeedForwardParams { w1, b1, w2, b2 });

impl<T: Scalar> FeedForwardParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        Self {
            w1: init.xavier("w1", d, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: init.xavier("w2", hidden, d),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }
}

/// Encoder layer: self-attention and FFN, each pre-normed and residual.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T = f64> {
    pub norm_attn: LayerNormParams<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub norm_ffn: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

impl_param_set!(EncoderLayerParams { norm_attn, wq, wk, wv, norm_ffn, ffn });

impl<T: Scalar> EncoderLayerParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        let ffn_init = Init { seed: init.seed, prefix: &crate::params::join(init.prefix, "ffn") };
        Self {
            norm_attn: LayerNormParams::new(d),
            wq: init.xavier("wq", d, d),
            wk: init.xavier("wk", d, d),
            wv: init.xavier("wv", d, d),
            norm_ffn: LayerNormParams::new(d),
            ffn: FeedForwardParams::init(&ffn_init, d, hidden),
        }
    }
}

/// Three-sub-layer decoder layer: causal self-attention, cross-attention, FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardDecoderLayerParams<T = f64> {
    pub norm_self: LayerNormParams<T>,
    pub wq1: Matrix<T>,
    pub wk1: Matrix<T>,
    pub wv1: Matrix<T>,
    pub norm_cross: LayerNormParams<T>,
    pub wq2: Matrix<T>,
    pub wk2: Matrix<T>,
    pub wv2: Matrix<T>,
    pub norm_ffn: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

impl_param_set!(StandardDecoderLayerParams {
    norm_self, wq1, wk1, wv1, norm_cross, wq2, wk2, wv2, norm_ffn, ffn
});

impl<T: Scalar> StandardDecoderLayerParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        let ffn_init = Init { seed: init.seed, prefix: &crate::params::join(init.prefix, "ffn") };
        Self {
            norm_self: LayerNormParams::new(d),
            wq1: init.xavier("wq1", d, d),
            wk1: init.xavier("wk1", d, d),
            wv1: init.xavier("wv1", d, d),
            norm_cross: LayerNormParams::new(d),
            wq2: init.xavier("wq2", d, d),
            wk2: init.xavier("wk2", d, d),
            wv2: init.xavier("wv2", d, d),
            norm_ffn: LayerNormParams::new(d),
            ffn: FeedForwardParams::init(&ffn_init, d, hidden),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq1.rows()
    }
}

/// Compressed decoder layer: one shared query, a joint softmax over target
/// and source keys, and value projections folded into the FFN input map.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayerParams<T = f64> {
    pub norm: LayerNormParams<T>,
    pub wq: Matrix<T>,
    pub wk1: Matrix<T>,
    pub wk2: Matrix<T>,
    /// Target-side value projection folded with `W1`, `d x 4d`.
    pub wv1_folded: Matrix<T>,
    /// Source-side value projection folded with `W1`, `d x 4d`.
    pub wv2_folded: Matrix<T>,
    pub ffn: FeedForwardParams<T>,
}

impl_param_set!(CompressedLayerParams { norm, wq, wk1, wk2, wv1_folded, wv2_folded, ffn });

impl<T: Scalar> CompressedLayerParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        let ffn_init = Init { seed: init.seed, prefix: &crate::params::join(init.prefix, "ffn") };
        Self {
            norm: LayerNormParams::new(d),
            wq: init.xavier("wq", d, d),
            wk1: init.xavier("wk1", d, d),
            wk2: init.xavier("wk2", d, d),
            wv1_folded: init.xavier("wv1_folded", d, hidden),
            wv2_folded: init.xavier("wv2_folded", d, hidden),
            ffn: FeedForwardParams::init(&ffn_init, d, hidden),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }
}

/// Ablation: joint attention with d-wide values, then an ordinary FFN sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnOnlyLayerParams<T = f64> {
    pub norm_attn: LayerNormParams<T>,
    pub wq: Matrix<T>,
    pub wk1: Matrix<T>,
    pub wk2: Matrix<T>,
    pub wv1: Matrix<T>,
    pub wv2: Matrix<T>,
    pub norm_ffn: LayerNormParams<T>,
    pub ffn: FeedForwardParams<T>,
}

impl_param_set!(AttnOnlyLayerParams { norm_attn, wq, wk1, wk2, wv1, wv2, norm_ffn, ffn });

impl<T: Scalar> AttnOnlyLayerParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        let ffn_init = Init { seed: init.seed, prefix: &crate::params::join(init.prefix, "ffn") };
        Self {
            norm_attn: LayerNormParams::new(d),
            wq: init.xavier("wq", d, d),
            wk1: init.xavier("wk1", d, d),
            wk2: init.xavier("wk2", d, d),
            wv1: init.xavier("wv1", d, d),
            wv2: init.xavier("wv2", d, d),
            norm_ffn: LayerNormParams::new(d),
            ffn: FeedForwardParams::init(&ffn_init, d, hidden),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }
}

/// Ablation: ordinary self-attention sub-layer, then cross-attention fused
/// into the FFN through a folded source value projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnOnlyLayerParams<T = f64> {
    pub norm_self: LayerNormParams<T>,
    pub wq1: Matrix<T>,
    pub wk1: Matrix<T>,
    pub wv1: Matrix<T>,
    pub norm_fused: LayerNormParams<T>,
    pub wq2: Matrix<T>,
    pub wk2: Matrix<T>,
    pub wv2_folded: Matrix<T>,
    pub ffn: FeedForwardParams<T>,
}

impl_param_set!(FfnOnlyLayerParams {
    norm_self, wq1, wk1, wv1, norm_fused, wq2, wk2, wv2_folded, ffn
});

impl<T: Scalar> FfnOnlyLayerParams<T> {
    pub(crate) fn init(init: &Init<'_>, d: usize, hidden: usize) -> Self {
        let ffn_init = Init { seed: init.seed, prefix: &crate::params::join(init.prefix, "ffn") };
        Self {
            norm_self: LayerNormParams::new(d),
            wq1: init.xavier("wq1", d, d),
            wk1: init.xavier("wk1", d, d),
            wv1: init.xavier("wv1", d, d),
            norm_fused: LayerNormParams::new(d),
            wq2: init.xavier("wq2", d, d),
            wk2: init.xavier("wk2", d, d),
            wv2_folded: init.xavier("wv2_folded", d, hidden),
            ffn: FeedForwardParams::init(&ffn_init, d, hidden),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq1.rows()
    }
}

/// Decoder layer weights for one of the four layer variants.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderLayerParams<T = f64> {
    Standard(StandardDecoderLayerParams<T>),
    Compressed(CompressedLayerParams<T>),
    AttnOnly(AttnOnlyLayerParams<T>),
    FfnOnly(FfnOnlyLayerParams<T>),
}

impl<T: Scalar> ParamSet<T> for DecoderLayerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        match self {
            Self::Standard(p) => p.visit(prefix, f),
            Self::Compressed(p) => p.visit(prefix, f),
            Self::AttnOnly(p) => p.visit(prefix, f),
            Self::FfnOnly(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        match self {
            Self::Standard(p) => p.visit_mut(prefix, f),
            Self::Compressed(p) => p.visit_mut(prefix, f),
            Self::AttnOnly(p) => p.visit_mut(prefix, f),
            Self::FfnOnly(p) => p.visit_mut(prefix, f),
        }
    }
}

macro_rules! cast_fields {
    ($src:expr, $ty:ident { $($field:ident),* }) => {
        $ty { $( $field: $src.$field.cast_param(), )* }
    };
}

pub(crate) trait CastParam<U> {
    fn cast_param(&self) -> U;
}

impl<T: Scalar, U: Scalar> CastParam<Matrix<U>> for Matrix<T> {
    fn cast_param(&self) -> Matrix<U> {
        self.cast()
    }
}

impl<T: Scalar, U: Scalar> CastParam<LayerNormParams<U>> for LayerNormParams<T> {
    fn cast_param(&self) -> LayerNormParams<U> {
        cast_fields!(self, LayerNormParams { gain, bias })
    }
}

impl<T: Scalar, U: Scalar> CastParam<FeedForwardParams<U>> for FeedForwardParams<T> {
    fn cast_param(&self) -> FeedForwardParams<U> {
        cast_fields!(self, FeedForwardParams { w1, b1, w2, b2 })
    }
}

impl<T: Scalar, U: Scalar> CastParam<EncoderLayerParams<U>> for EncoderLayerParams<T> {
    fn cast_param(&self) -> EncoderLayerParams<U> {
        cast_fields!(self, EncoderLayerParams { norm_attn, wq, wk, wv, norm_ffn, ffn })
    }
}

impl<T: Scalar, U: Scalar> CastParam<DecoderLayerParams<U>> for DecoderLayerParams<T> {
    fn cast_param(&self) -> DecoderLayerParams<U> {
        match self {
            Self::Standard(p) => DecoderLayerParams::Standard(cast_fields!(p, StandardDecoderLayerParams {
                norm_self, wq1, wk1, wv1, norm_cross, wq2, wk2, wv2, norm_ffn, ffn
            })),
            Self::Compressed(p) => DecoderLayerParams::Compressed(cast_fields!(p, CompressedLayerParams {
                norm, wq, wk1, wk2, wv1_folded, wv2_folded, ffn
            })),
            Self::AttnOnly(p) => DecoderLayerParams::AttnOnly(cast_fields!(p, AttnOnlyLayerParams {
                norm_attn, wq, wk1, wk2, wv1, wv2, norm_ffn, ffn
            })),
            Self::FfnOnly(p) => DecoderLayerParams::FfnOnly(cast_fields!(p, FfnOnlyLayerParams {
                norm_self, wq1, wk1, wv1, norm_fused, wq2, wk2, wv2_folded, ffn
            })),
        }
    }
}

impl<P: CastParam<Q>, Q> CastParam<Vec<Q>> for Vec<P> {
    fn cast_param(&self) -> Vec<Q> {
        self.iter().map(|p| p.cast_param()).collect()
    }
}
