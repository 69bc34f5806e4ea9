use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Standard,
    Compressed,
    AttnOnly,
    FfnOnly,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [Self::Standard, Self::Compressed, Self::AttnOnly, Self::FfnOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Compressed => "compressed",
            Self::AttnOnly => "attn_only",
            Self::FfnOnly => "ffn_only",
        }
    }

    /// Sequential sub-layer stages one decoder layer runs per decode step.
    pub fn stages_per_layer(self) -> usize {
        match self {
            Self::Standard => 3,
            Self::Compressed => 1,
            Self::AttnOnly | Self::FfnOnly => 2,
        }
    }

    /// Softmax normalizations one decoder layer runs per decode step.
    pub fn softmaxes_per_layer(self) -> usize {
        match self {
            Self::Standard | Self::FfnOnly => 2,
            Self::Compressed | Self::AttnOnly => 1,
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant `{s}`")))
    }
}

impl std::fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_ffn_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub decoder_variant: DecoderVariant,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub share_embeddings: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// A small config with the given width, heads, depths, shared vocabulary
    /// size and variant; no dropout.
    pub fn new(
        d_model: usize,
        n_heads: usize,
        n_enc_layers: usize,
        n_dec_layers: usize,
        vocab: usize,
        decoder_variant: DecoderVariant,
    ) -> Self {
        Self {
            d_model,
            n_heads,
            n_enc_layers,
            n_dec_layers,
            ffn_mult: 4,
            vocab_src: vocab,
            vocab_tgt: vocab,
            decoder_variant,
            dropout: 0.0,
            share_embeddings: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_variant(mut self, v: DecoderVariant) -> Self {
        self.decoder_variant = v;
        self
    }

    pub fn with_depths(mut self, n_enc: usize, n_dec: usize) -> Self {
        self.n_enc_layers = n_enc;
        self.n_dec_layers = n_dec;
        self
    }

    pub fn hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("encoder and decoder need at least one layer each".into());
        }
        if self.ffn_mult != 4 {
            return fail(format!("ffn_mult must be 4, got {}", self.ffn_mult));
        }
        // Two ids (BOS, EOS) are the minimum a decoder can run with; datasets
        // additionally reserve PAD and UNK.
        if self.vocab_src < 2 || self.vocab_tgt < 2 {
            return fail("vocabularies need at least the BOS and EOS ids".into());
        }
        if self.vocab_src > u32::MAX as usize || self.vocab_tgt > u32::MAX as usize {
            return fail("vocabulary too large".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.share_embeddings && self.vocab_src != self.vocab_tgt {
            return fail("shared embeddings need equal source and target vocabularies".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ok = ModelConfig::new(8, 2, 1, 1, 10, DecoderVariant::Standard);
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.n_dec_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.ffn_mult = 2;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.share_embeddings = true;
        c.vocab_tgt = 11;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_keys_and_parses_variants() {
        let j = r#"{"d_model":8,"n_heads":2,"n_enc_layers":1,"n_dec_layers":1,"vocab_src":6,"vocab_tgt":6,"decoder_variant":"attn_only"}"#;
        let c: ModelConfig = serde_json::from_str(j).unwrap();
        assert_eq!(c.decoder_variant, DecoderVariant::AttnOnly);
        assert_eq!(c.ffn_mult, 4);
        let bad = j.replace("\"seed\"", "x").replace('}', r#","bogus":1}"#);
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
        assert_eq!("ffn-only".parse::<DecoderVariant>().unwrap(), DecoderVariant::FfnOnly);
        assert!("other".parse::<DecoderVariant>().is_err());
    }
}
