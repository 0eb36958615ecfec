use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskSpec;

/// What the decoder sees at masked positions before the positional and lead
/// embeddings are added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFill {
    /// A learned mask token.
    #[default]
    Learned,
    /// The beat projection of an all-zero beat.
    Zero,
}

impl MaskFill {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(MaskFill::Learned),
            1 => Ok(MaskFill::Zero),
            _ => Err(Error::Format(format!("unknown mask fill code {c}"))),
        }
    }
}

/// Which beats the reconstruction loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScope {
    #[default]
    Masked,
    All,
}

impl LossScope {
    /// Global beat positions the loss runs over.
    pub fn selection(self, spec: &MaskSpec) -> Result<Vec<usize>> {
        let sel: Vec<usize> = match self {
            LossScope::Masked => spec.masked_positions(),
            LossScope::All => spec
                .active_positions()
                .into_iter()
                .filter(|&p| p >= crate::signal::N_LEADS)
                .collect(),
        };
        if sel.is_empty() {
            return Err(Error::EmptySelection(match self {
                LossScope::Masked => "no masked beats (mask ratio too small for loss scope 'masked')".into(),
                LossScope::All => "record has no valid beats".into(),
            }));
        }
        Ok(sel)
    }
}

impl std::str::FromStr for LossScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "masked" => Ok(LossScope::Masked),
            "all" => Ok(LossScope::All),
            _ => Err(Error::Config(format!("unknown loss scope {s:?} (masked|all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_t: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub mlp_dim: usize,
    /// Samples per beat token.
    pub beat_len: usize,
    /// Beat tokens per lead.
    pub n_beats: usize,
    pub dropout: f32,
    pub mask_fill: MaskFill,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 1,
            mlp_dim: 128,
            beat_len: 64,
            n_beats: 15,
            dropout: 0.0,
            mask_fill: MaskFill::Learned,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for gradient verification.
    pub fn toy() -> Self {
        Self {
            d_t: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            mlp_dim: 32,
            beat_len: 8,
            n_beats: 3,
            ..Self::default()
        }
    }

    /// Small configuration that trains in minutes on one core.
    pub fn small() -> Self {
        Self {
            d_t: 32,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 1,
            mlp_dim: 64,
            beat_len: 32,
            n_beats: 15,
            ..Self::default()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_t / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_t", self.d_t),
            ("n_heads", self.n_heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("mlp_dim", self.mlp_dim),
            ("beat_len", self.beat_len),
            ("n_beats", self.n_beats),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_t.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_t ({}) must be divisible by n_heads ({})",
                self.d_t, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
