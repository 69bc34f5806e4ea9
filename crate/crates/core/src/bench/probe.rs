use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::model::{decoder_input, DecoderVariant, Model};
use crate::numerics::{cosine_similarity, Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sublayer {
    SelfAttn,
    CrossAttn,
    Ffn,
}

/// Which two adjacent sub-layers are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SublayerPair {
    SelfCross,
    CrossFfn,
}

impl SublayerPair {
    pub fn members(self) -> (Sublayer, Sublayer) {
        match self {
            Self::SelfCross => (Sublayer::SelfAttn, Sublayer::CrossAttn),
            Self::CrossFfn => (Sublayer::CrossAttn, Sublayer::Ffn),
        }
    }
}

impl std::str::FromStr for SublayerPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-cross" | "self_cross" => Ok(Self::SelfCross),
            "cross-ffn" | "cross_ffn" => Ok(Self::CrossFfn),
            _ => Err(Error::Config(format!("unknown sub-layer pair `{s}` (self-cross | cross-ffn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over positions per sentence, then over sentences, then cosine.
    #[default]
    SentenceMean,
    /// Cosine at every target position, averaged over all positions.
    PerPosition,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence-mean" | "sentence_mean" => Ok(Self::SentenceMean),
            "per-position" | "per_position" => Ok(Self::PerPosition),
            _ => Err(Error::Config(format!("unknown pooling `{s}` (sentence-mean | per-position)"))),
        }
    }
}

/// Pooled input of one decoder sub-layer over a probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub pooled: Vec<f64>,
}

/// Per sentence, per layer: inputs of self-attn, cross-attn and FFN.
type Captured = Vec<Vec<[Matrix<f64>; 3]>>;

fn capture<T: Scalar>(model: &Model<T>, probe_set: &[Pair]) -> Result<Captured> {
    if model.variant() != DecoderVariant::Standard {
        return Err(Error::InvalidArgument(format!(
            "similarity probe needs a standard decoder; {} layers have no distinct sub-layer inputs",
            model.variant()
        )));
    }
    if probe_set.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    probe_set
        .iter()
        .map(|p| {
            let layers = model.sublayer_inputs(&p.src, &decoder_input(&p.tgt))?;
            Ok(layers
                .into_iter()
                .map(|s| {
                    let take = |m: Option<Matrix<T>>| m.expect("standard layer records all inputs").cast::<f64>();
                    [take(s.self_attn), take(s.cross_attn), take(s.ffn)]
                })
                .collect())
        })
        .collect()
}

fn slot(s: Sublayer) -> usize {
    match s {
        Sublayer::SelfAttn => 0,
        Sublayer::CrossAttn => 1,
        Sublayer::Ffn => 2,
    }
}

fn row_mean(m: &Matrix<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        acc.iter_mut().zip(m.row(r)).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= m.rows() as f64);
    acc
}

fn pooled_records(captured: &Captured) -> Vec<ProbeRecord> {
    let n_layers = captured[0].len();
    let mut out = Vec::with_capacity(3 * n_layers);
    for layer in 0..n_layers {
        for sub in [Sublayer::SelfAttn, Sublayer::CrossAttn, Sublayer::Ffn] {
            let mut acc: Vec<f64> = Vec::new();
            for sent in captured {
                let m = row_mean(&sent[layer][slot(sub)]);
                if acc.is_empty() {
                    acc = m;
                } else {
                    acc.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
                }
            }
            acc.iter_mut().for_each(|a| *a /= captured.len() as f64);
            out.push(ProbeRecord { layer, sublayer: sub, pooled: acc });
        }
    }
    out
}

/// One record per (layer, sub-layer), sentence-mean pooled over `probe_set`.
pub fn probe_records<T: Scalar>(model: &Model<T>, probe_set: &[Pair]) -> Result<Vec<ProbeRecord>> {
    Ok(pooled_records(&capture(model, probe_set)?))
}

/// `L x L` matrix whose `(i, j)` entry is the cosine similarity between the
/// input of the pair's first sub-layer at layer `i` and of its second
/// sub-layer at layer `j`.
pub fn similarity_matrix<T: Scalar>(
    model: &Model<T>,
    probe_set: &[Pair],
    pair: SublayerPair,
    pooling: Pooling,
) -> Result<Matrix<f64>> {
    let captured = capture(model, probe_set)?;
    let n = model.config().n_dec_layers;
    let (a, b) = pair.members();
    let mut out = Matrix::zeros(n, n);
    match pooling {
        Pooling::SentenceMean => {
            let recs = pooled_records(&captured);
            let get = |l: usize, s: Sublayer| &recs[3 * l + slot(s)].pooled;
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, cosine_similarity(get(i, a), get(j, b))?);
                }
            }
        }
        Pooling::PerPosition => {
            let mut count = 0usize;
            for sent in &captured {
                for i in 0..n {
                    for j in 0..n {
                        let (x, y) = (&sent[i][slot(a)], &sent[j][slot(b)]);
                        let mut s = 0.0;
                        for r in 0..x.rows() {
                            s += cosine_similarity(x.row(r), y.row(r))?;
                        }
                        out.set(i, j, out.get(i, j) + s);
                    }
                }
                count += sent[0][0].rows();
            }
            out.data_mut().iter_mut().for_each(|v| *v /= count as f64);
        }
    }
    Ok(out)
}

/// Means of the diagonal and of the off-diagonal entries. The off-diagonal
/// mean is `None` for a 1 x 1 matrix.
pub fn diagonal_stats(m: &Matrix<f64>) -> (f64, Option<f64>) {
    let n = m.rows();
    let diag = (0..n).map(|i| m.get(i, i)).sum::<f64>() / n as f64;
    if n < 2 {
        return (diag, None);
    }
    let total: f64 = m.data().iter().sum();
    let off = (total - diag * n as f64) / (n * n - n) as f64;
    (diag, Some(off))
}

const SHADES: &[u8] = b" .:-=+*#%@";

/// Fixed-width text rendering: numeric cells followed by a shade strip,
/// darker for higher similarity.
pub fn render_heatmap(m: &Matrix<f64>, rows_label: &str, cols_label: &str) -> String {
    let mut s = String::new();
    writeln!(s, "rows: {rows_label} input at layer i; cols: {cols_label} input at layer j").unwrap();
    write!(s, "{:>4}", "").unwrap();
    for j in 0..m.cols() {
        write!(s, "{j:>8}").unwrap();
    }
    s.push('\n');
    for i in 0..m.rows() {
        write!(s, "{i:>4}").unwrap();
        for &v in m.row(i) {
            write!(s, "{v:>8.4}").unwrap();
        }
        s.push_str("  |");
        for &v in m.row(i) {
            let t = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (SHADES.len() - 1) as f64).round() as usize;
            s.push(SHADES[t] as char);
        }
        s.push_str("|\n");
    }
    s
}

/// Writes the matrix as CSV, one row per line, no header.
pub fn write_matrix_csv<W: io::Write>(out: W, m: &Matrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:.17}")))?;
    }
    w.flush()?;
    Ok(())
}
