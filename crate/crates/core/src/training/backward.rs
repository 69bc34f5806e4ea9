use crate::attention::core::Dropout;
use crate::attention::layers::{norm_bwd, Segments};
use crate::error::{Error, Result};
use crate::model::{decoder_input, decoder_target, ForwardTape, Model, ModelParams, Packed};
use crate::numerics::{mm_nt, mm_tn_acc, Matrix};
use crate::params::ParamSet;

use super::loss::cross_entropy_smoothed;

/// Gradients share the parameter layout.
pub type Gradients = ModelParams<f64>;

/// A packed training batch: sources, `BOS + tgt` decoder inputs and
/// `tgt + EOS` targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Packed,
    pub tgt_in: Packed,
    pub tgt_out: Vec<u32>,
}

impl Batch {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Self {
        let mut b = Batch { src: Packed::default(), tgt_in: Packed::default(), tgt_out: Vec::new() };
        for (s, t) in pairs {
            b.src.push(s.iter().copied());
            b.tgt_in.push(decoder_input(t));
            b.tgt_out.extend(decoder_target(t));
        }
        b
    }

    pub fn sentences(&self) -> usize {
        self.src.sentences()
    }

    /// Predicted positions (the loss denominator).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.len()
    }
}

/// Mean per-token loss and its gradient for one batch.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Batch,
    label_smoothing: f64,
    dropout: Option<&mut Dropout>,
) -> Result<(f64, Gradients)> {
    if batch.sentences() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let tape = model.forward_tape(batch.src.clone(), batch.tgt_in.clone(), dropout)?;
    let (loss, d_logits) = cross_entropy_smoothed(&tape.logits, &batch.tgt_out, label_smoothing)?;
    let grads = backward(model, &tape, &d_logits);
    if !grads.named_tensors().iter().all(|(_, m)| m.is_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    Ok((loss, grads))
}

/// Mean per-token loss of a batch (no dropout).
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let tape = model.forward_tape(batch.src.clone(), batch.tgt_in.clone(), None)?;
    Ok(cross_entropy_smoothed(&tape.logits, &batch.tgt_out, 0.0)?.0)
}

fn scatter_embedding(g: &mut Matrix, tokens: &[u32], dx: &Matrix, scale: f64) {
    for (r, &t) in tokens.iter().enumerate() {
        for (o, v) in g.row_mut(t as usize).iter_mut().zip(dx.row(r)) {
            *o += *v * scale;
        }
    }
}

/// Gradients of the loss with respect to every parameter, given the logits
/// gradient for a recorded forward.
pub(crate) fn backward(model: &Model, tape: &ForwardTape<f64>, d_logits: &Matrix) -> Gradients {
    let p = model.params();
    let mut g = p.zeros_like();
    let scale = (model.config().d_model as f64).sqrt();

    mm_tn_acc(&mut g.out_proj, &tape.dec_out, d_logits);
    let d_dec_out = mm_nt(d_logits, &p.out_proj);
    let mut dx = norm_bwd(&d_dec_out, &tape.dec_stats, &p.dec_norm, &mut g.dec_norm);

    let mut dh = Matrix::zeros(tape.h.rows(), tape.h.cols());
    let segs = Segments { stream: &tape.tgt.segs, source: &tape.src.segs };
    for (i, layer) in p.decoder.iter().enumerate().rev() {
        dx = layer.backward(&tape.dec[i], &dx, &tape.h, &mut dh, segs, &mut g.decoder[i]);
    }
    match &mut g.tgt_embed {
        Some(t) => scatter_embedding(t, &tape.tgt.tokens, &dx, scale),
        None => scatter_embedding(&mut g.src_embed, &tape.tgt.tokens, &dx, scale),
    }

    let mut dx = norm_bwd(&dh, &tape.enc_stats, &p.enc_norm, &mut g.enc_norm);
    for (i, layer) in p.encoder.iter().enumerate().rev() {
        dx = layer.backward(&tape.enc[i], &dx, &tape.src.segs, &mut g.encoder[i]);
    }
    scatter_embedding(&mut g.src_embed, &tape.src.tokens, &dx, scale);
    g
}
