use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Inner nonlinearity of the feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Silu,
    Relu,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Silu => z / (1.0 + (-z).exp()),
            Nonlinearity::Relu => z.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Nonlinearity::Silu => 0,
            Nonlinearity::Relu => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Nonlinearity::Silu),
            1 => Some(Nonlinearity::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dense,
    Moe,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Dense => "dense",
            Arch::Moe => "moe",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Arch::Dense),
            "moe" => Ok(Arch::Moe),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?} (expected dense or moe)"
            ))),
        }
    }
}

/// Feed-forward block layout. Dense models carry one FFN per layer; MoE
/// models carry a router and `experts` independent FFNs of width `expert_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum FfnConfig {
    Dense {
        ffn_dim: usize,
    },
    Moe {
        experts: usize,
        expert_dim: usize,
        top_k: usize,
        gate_renorm: bool,
    },
}

/// Architecture hyperparameters of a decoder-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    #[serde(flatten)]
    pub ffn: FfnConfig,
    pub vocab: usize,
    pub max_seq: usize,
    pub nonlinearity: Nonlinearity,
    pub final_layernorm: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Default dense toy model: 4 layers, width 128, 4 heads, FFN width 512.
    pub fn dense_default(vocab: usize) -> Self {
        ModelConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            d_head: 32,
            ffn: FfnConfig::Dense { ffn_dim: 512 },
            vocab,
            max_seq: 16,
            nonlinearity: Nonlinearity::Silu,
            final_layernorm: true,
            ln_eps: default_ln_eps(),
        }
    }

    /// Default MoE toy model: same trunk as [`Self::dense_default`], 8 experts
    /// of width 64 with top-2 routing.
    pub fn moe_default(vocab: usize) -> Self {
        ModelConfig {
            ffn: FfnConfig::Moe {
                experts: 8,
                expert_dim: 64,
                top_k: 2,
                gate_renorm: true,
            },
            ..Self::dense_default(vocab)
        }
    }

    pub fn default_for(arch: Arch, vocab: usize) -> Self {
        match arch {
            Arch::Dense => Self::dense_default(vocab),
            Arch::Moe => Self::moe_default(vocab),
        }
    }

    pub fn arch(&self) -> Arch {
        match self.ffn {
            FfnConfig::Dense { .. } => Arch::Dense,
            FfnConfig::Moe { .. } => Arch::Moe,
        }
    }

    /// Number of experts (1 for dense models).
    pub fn experts(&self) -> usize {
        match self.ffn {
            FfnConfig::Dense { .. } => 1,
            FfnConfig::Moe { experts, .. } => experts,
        }
    }

    /// Inner width of one FFN (the dense FFN or one expert).
    pub fn ffn_width(&self) -> usize {
        match self.ffn {
            FfnConfig::Dense { ffn_dim } => ffn_dim,
            FfnConfig::Moe { expert_dim, .. } => expert_dim,
        }
    }

    pub fn ffn_neurons_per_layer(&self) -> usize {
        self.experts() * self.ffn_width()
    }

    pub fn attn_neurons_per_layer(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.heads == 0 || self.d_head == 0 {
            return bad("d_model, heads and d_head must be positive".into());
        }
        if self.heads * self.d_head != self.d_model {
            return bad(format!(
                "heads ({}) x d_head ({}) must equal d_model ({})",
                self.heads, self.d_head, self.d_model
            ));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return bad("vocab and max_seq must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        match self.ffn {
            FfnConfig::Dense { ffn_dim: 0 } => bad("ffn_dim must be positive".into()),
            FfnConfig::Moe {
                experts,
                expert_dim,
                top_k,
                ..
            } => {
                if experts == 0 || expert_dim == 0 {
                    bad("experts and expert_dim must be positive".into())
                } else if top_k == 0 || top_k > experts {
                    bad(format!("top_k must be in 1..={experts}, got {top_k}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
