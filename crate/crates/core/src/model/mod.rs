//! Encoder-decoder assembly: embeddings with sinusoidal positions, a pre-norm
//! encoder, a decoder stack in one of four layer variants, final norms and an
//! untied output projection.

pub mod checkpoint;
mod config;

use std::ops::Range;

pub use config::{DecoderVariant, ModelConfig};

use crate::attention::core::Dropout;
use crate::attention::layers::{norm_fwd, DecoderLayerTape, EncoderLayerTape, Segments, SublayerInputs};
use crate::attention::{
    AttnOnlyLayerParams, CastParam, CompressedLayerParams, DecoderLayerParams, EncoderLayerParams,
    FfnOnlyLayerParams, Init, LayerNormParams, StandardDecoderLayerParams,
};
use crate::error::{Error, Result};
use crate::numerics::{mm, Matrix, NormStats, Scalar};
use crate::params::{impl_param_set, ParamSet};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
/// First id available to content tokens.
pub const FIRST_CONTENT: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f64> {
    pub src_embed: Matrix<T>,
    /// `None` when source and target share `src_embed`.
    pub tgt_embed: Option<Matrix<T>>,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub enc_norm: LayerNormParams<T>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub dec_norm: LayerNormParams<T>,
    pub out_proj: Matrix<T>,
}

impl_param_set!(ModelParams { src_embed, tgt_embed, encoder, enc_norm, decoder, dec_norm, out_proj });

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let hidden = config.hidden();
        let seed = config.seed;
        let root = Init { seed, prefix: "" };
        let bound = (3.0 / d as f64).sqrt();
        let encoder = (0..config.n_enc_layers)
            .map(|i| EncoderLayerParams::init(&Init { seed, prefix: &format!("encoder.{i}") }, d, hidden))
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                let init = Init { seed, prefix: &name };
                match config.decoder_variant {
                    DecoderVariant::Standard => {
                        DecoderLayerParams::Standard(StandardDecoderLayerParams::init(&init, d, hidden))
                    }
                    DecoderVariant::Compressed => {
                        DecoderLayerParams::Compressed(CompressedLayerParams::init(&init, d, hidden))
                    }
                    DecoderVariant::AttnOnly => DecoderLayerParams::AttnOnly(AttnOnlyLayerParams::init(&init, d, hidden)),
                    DecoderVariant::FfnOnly => DecoderLayerParams::FfnOnly(FfnOnlyLayerParams::init(&init, d, hidden)),
                }
            })
            .collect();
        Self {
            src_embed: root.uniform("src_embed", config.vocab_src, d, bound),
            tgt_embed: (!config.share_embeddings).then(|| root.uniform("tgt_embed", config.vocab_tgt, d, bound)),
            encoder,
            enc_norm: LayerNormParams::new(d),
            decoder,
            dec_norm: LayerNormParams::new(d),
            out_proj: root.xavier("out_proj", d, config.vocab_tgt),
        }
    }

    pub fn tgt_table(&self) -> &Matrix<T> {
        self.tgt_embed.as_ref().unwrap_or(&self.src_embed)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            src_embed: self.src_embed.cast(),
            tgt_embed: self.tgt_embed.as_ref().map(|m| m.cast()),
            encoder: self.encoder.cast_param(),
            enc_norm: self.enc_norm.cast_param(),
            decoder: self.decoder.cast_param(),
            dec_norm: self.dec_norm.cast_param(),
            out_proj: self.out_proj.cast(),
        }
    }
}

/// Learnable scalars in one encoder layer of width `d`.
pub fn encoder_layer_param_count(d: usize) -> usize {
    // two norms, three d x d projections, FFN
    2 * 2 * d + 3 * d * d + ffn_param_count(d)
}

/// Learnable scalars in one decoder layer of width `d`.
pub fn decoder_layer_param_count(variant: DecoderVariant, d: usize) -> usize {
    let norm = 2 * d;
    match variant {
        DecoderVariant::Standard => 3 * norm + 6 * d * d + ffn_param_count(d),
        DecoderVariant::Compressed => norm + 3 * d * d + 2 * d * 4 * d + ffn_param_count(d),
        DecoderVariant::AttnOnly => 2 * norm + 5 * d * d + ffn_param_count(d),
        DecoderVariant::FfnOnly => 2 * norm + 5 * d * d + d * 4 * d + ffn_param_count(d),
    }
}

fn ffn_param_count(d: usize) -> usize {
    d * 4 * d + 4 * d + 4 * d * d + d
}

/// Closed-form learnable scalar count for a config.
pub fn config_param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let embed = c.vocab_src * d + if c.share_embeddings { 0 } else { c.vocab_tgt * d };
    embed
        + c.n_enc_layers * encoder_layer_param_count(d)
        + c.n_dec_layers * decoder_layer_param_count(c.decoder_variant, d)
        + 2 * 2 * d
        + d * c.vocab_tgt
}

/// Sentences packed row-wise into one matrix; `segs[i]` are the rows of
/// sentence `i`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Packed {
    pub tokens: Vec<u32>,
    pub segs: Vec<Range<usize>>,
}

impl Packed {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut p = Packed::default();
        for s in seqs {
            p.push(s.iter().copied());
        }
        p
    }

    pub fn push(&mut self, seq: impl IntoIterator<Item = u32>) {
        let start = self.tokens.len();
        self.tokens.extend(seq);
        self.segs.push(start..self.tokens.len());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sentences(&self) -> usize {
        self.segs.len()
    }
}

fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

const MAX_CACHED_POSITIONS: usize = 4096;

thread_local! {
    /// Per-width tables of already computed positions, row-major.
    static SINUSOIDS: std::cell::RefCell<Vec<(usize, Vec<f64>)>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Sinusoidal encoding of one position: `sin` on even, `cos` on odd columns.
pub fn position_encoding<T: Scalar>(pos: usize, d: usize, out: &mut [T]) {
    if pos >= MAX_CACHED_POSITIONS {
        for (i, o) in out[..d].iter_mut().enumerate() {
            *o = T::from_f64(sinusoid(pos, i, d));
        }
        return;
    }
    SINUSOIDS.with(|cell| {
        let mut tables = cell.borrow_mut();
        let idx = match tables.iter().position(|(w, _)| *w == d) {
            Some(i) => i,
            None => {
                tables.push((d, Vec::new()));
                tables.len() - 1
            }
        };
        let table = &mut tables[idx].1;
        while table.len() / d <= pos {
            let p = table.len() / d;
            table.extend((0..d).map(|i| sinusoid(p, i, d)));
        }
        for (o, v) in out[..d].iter_mut().zip(&table[pos * d..(pos + 1) * d]) {
            *o = T::from_f64(*v);
        }
    });
}

fn check_ids(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&id) => Err(Error::InvalidToken { id, vocab }),
        None => Ok(()),
    }
}

/// `table[token_i] * sqrt(d) + PE(i)` for each position.
pub fn embed<T: Scalar>(tokens: &[u32], table: &Matrix<T>) -> Result<Matrix<T>> {
    embed_at(tokens, table, 0)
}

/// [`embed`] with positions starting at `offset`.
pub fn embed_at<T: Scalar>(tokens: &[u32], table: &Matrix<T>, offset: usize) -> Result<Matrix<T>> {
    check_ids(tokens, table.rows())?;
    let d = table.cols();
    let scale = T::from_f64((d as f64).sqrt());
    let mut out = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        let row = out.row_mut(i);
        position_encoding(offset + i, d, row);
        for (o, e) in row.iter_mut().zip(table.row(t as usize)) {
            *o += *e * scale;
        }
    }
    Ok(out)
}

fn embed_packed<T: Scalar>(p: &Packed, table: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(p.len(), table.cols());
    for seg in &p.segs {
        let e = embed(&p.tokens[seg.clone()], table)?;
        for (i, r) in seg.clone().enumerate() {
            out.row_mut(r).copy_from_slice(e.row(i));
        }
    }
    Ok(out)
}

/// Everything the analytic backward pass needs from one forward.
pub(crate) struct ForwardTape<T> {
    pub src: Packed,
    pub tgt: Packed,
    pub enc: Vec<EncoderLayerTape<T>>,
    pub enc_stats: NormStats<T>,
    pub h: Matrix<T>,
    pub dec: Vec<DecoderLayerTape<T>>,
    pub dec_stats: NormStats<T>,
    pub dec_out: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f64> {
    config: ModelConfig,
    params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they match the config.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::<T>::init(&config);
        let want = reference.named_tensors();
        let got = params.named_tensors();
        if want.len() != got.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", want.len(), got.len())));
        }
        for ((wn, w), (gn, g)) in want.iter().zip(&got) {
            if wn != gn || w.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "tensor `{gn}` {:?} does not match `{wn}` {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> DecoderVariant {
        self.config.decoder_variant
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    /// Encoder output `s x d` (after the final norm) for one sentence.
    pub fn encoder_forward(&self, src: &[u32]) -> Result<Matrix<T>> {
        let p = Packed::new([src]);
        let (h, _, _) = self.encode_packed(&p, None)?;
        Ok(h)
    }

    /// Teacher-forced logits `t x vocab_tgt` for decoder input `tgt_in`
    /// against encoder output `h`.
    pub fn decoder_forward(&self, tgt_in: &[u32], h: &Matrix<T>) -> Result<Matrix<T>> {
        if h.cols() != self.config.d_model {
            return Err(Error::shape("decoder_forward", h.shape(), (h.rows(), self.config.d_model)));
        }
        if h.rows() == 0 {
            return Err(Error::InvalidArgument("empty source".into()));
        }
        let src_segs = [0..h.rows()];
        let tgt = Packed::new([tgt_in]);
        let out = self.decode_packed(&tgt, h, &src_segs, None, false)?;
        Ok(out.logits)
    }

    /// Logits for `BOS + tgt` given `src`; row `i` predicts `tgt[i]` (or EOS).
    pub fn teacher_forced_logits(&self, src: &[u32], tgt: &[u32]) -> Result<Matrix<T>> {
        let h = self.encoder_forward(src)?;
        self.decoder_forward(&decoder_input(tgt), &h)
    }

    /// Residual-stream inputs of every decoder sub-layer for a teacher-forced
    /// pass (standard variant only).
    pub fn sublayer_inputs(&self, src: &[u32], tgt_in: &[u32]) -> Result<Vec<SublayerInputs<T>>> {
        if self.variant() != DecoderVariant::Standard {
            return Err(Error::InvalidArgument(format!(
                "sub-layer inputs exist only for the standard variant, not {}",
                self.variant()
            )));
        }
        let h = self.encoder_forward(src)?;
        let tgt = Packed::new([tgt_in]);
        let out = self.decode_packed(&tgt, &h, &[0..h.rows()], None, true)?;
        Ok(out.dec.iter().zip(&out.dec_inputs).map(|(t, x)| t.sublayer_inputs(x)).collect())
    }

    fn encode_packed(
        &self,
        src: &Packed,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Matrix<T>, Vec<EncoderLayerTape<T>>, NormStats<T>)> {
        let mut x = embed_packed(src, &self.params.src_embed)?;
        let mut tapes = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let (y, tape) = layer.forward(&x, &src.segs, self.config.n_heads, dropout.as_deref_mut());
            tapes.push(tape);
            x = y;
        }
        let (h, stats) = norm_fwd(&x, &self.params.enc_norm);
        Ok((h, tapes, stats))
    }

    fn decode_packed(
        &self,
        tgt: &Packed,
        h: &Matrix<T>,
        src_segs: &[Range<usize>],
        mut dropout: Option<&mut Dropout>,
        keep_inputs: bool,
    ) -> Result<DecodeOut<T>> {
        let mut x = embed_packed(tgt, self.params.tgt_table())?;
        let segs = Segments { stream: &tgt.segs, source: src_segs };
        let n = self.params.decoder.len();
        let mut dec = Vec::with_capacity(n);
        let mut dec_inputs = Vec::with_capacity(n);
        for layer in &self.params.decoder {
            let (y, tape) = layer.forward(&x, h, segs, self.config.n_heads, dropout.as_deref_mut());
            dec.push(tape);
            if keep_inputs {
                dec_inputs.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        let (dec_out, dec_stats) = norm_fwd(&x, &self.params.dec_norm);
        let logits = mm(&dec_out, &self.params.out_proj);
        Ok(DecodeOut { dec_inputs, dec, dec_stats, dec_out, logits })
    }

    /// Teacher-forced forward over a packed batch, keeping activations.
    pub(crate) fn forward_tape(
        &self,
        src: Packed,
        tgt_in: Packed,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardTape<T>> {
        if src.sentences() != tgt_in.sentences() {
            return Err(Error::LengthMismatch {
                op: "forward",
                expected: src.sentences(),
                actual: tgt_in.sentences(),
            });
        }
        if src.segs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty source sentence".into()));
        }
        check_ids(&tgt_in.tokens, self.config.vocab_tgt)?;
        let (h, enc, enc_stats) = self.encode_packed(&src, dropout.as_deref_mut())?;
        let out = self.decode_packed(&tgt_in, &h, &src.segs, dropout, true)?;
        Ok(ForwardTape {
            src,
            tgt: tgt_in,
            enc,
            enc_stats,
            h,
            dec: out.dec,
            dec_stats: out.dec_stats,
            dec_out: out.dec_out,
            logits: out.logits,
        })
    }
}

struct DecodeOut<T> {
    dec_inputs: Vec<Matrix<T>>,
    dec: Vec<DecoderLayerTape<T>>,
    dec_stats: NormStats<T>,
    dec_out: Matrix<T>,
    logits: Matrix<T>,
}

/// `BOS` followed by `tgt`.
pub fn decoder_input(tgt: &[u32]) -> Vec<u32> {
    std::iter::once(BOS).chain(tgt.iter().copied()).collect()
}

/// `tgt` followed by `EOS`.
pub fn decoder_target(tgt: &[u32]) -> Vec<u32> {
    tgt.iter().copied().chain(std::iter::once(EOS)).collect()
}
