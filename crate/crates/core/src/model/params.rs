use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{FfnConfig, ModelConfig};
use crate::numerics::Matrix;

/// Layernorm gain and bias, each stored as a `1×d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// One attention head. `wv` is `d×d_head` and `wo` is `d_head×d`, so row
/// `k` of `wo` is the head's `k`-th output column (attention subvalue).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wv: Matrix,
    pub wo: Matrix,
}

/// Two-layer FFN (dense block or one expert). `w1` is `d×inner` and `w2`
/// is `inner×d`; row `k` of `w2` is neuron `k`'s subvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams {
    Dense(ExpertParams),
    Moe {
        /// `d×E` router projection.
        router: Matrix,
        experts: Vec<ExpertParams>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: NormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub heads: Vec<HeadParams>,
    pub ln2: NormParams,
    pub ffn: FfnParams,
}

/// Full weight set. Every projection is stored input-major (`y = x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Option<NormParams>,
    pub unembed: Matrix,
}

/// Whether a tensor is written as rank 1 (norm vectors) or rank 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRank {
    Vector,
    Matrix,
}

impl NormParams {
    fn identity(d: usize) -> Self {
        let mut gamma = Matrix::zeros(1, d);
        gamma.fill(1.0);
        NormParams {
            gamma,
            beta: Matrix::zeros(1, d),
        }
    }
}

impl Params {
    /// All-zero weights with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let zn = || NormParams {
            gamma: Matrix::zeros(1, d),
            beta: Matrix::zeros(1, d),
        };
        let expert = |inner: usize| ExpertParams {
            w1: Matrix::zeros(d, inner),
            w2: Matrix::zeros(inner, d),
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1: zn(),
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                heads: (0..cfg.heads)
                    .map(|_| HeadParams {
                        wv: Matrix::zeros(d, cfg.d_head),
                        wo: Matrix::zeros(cfg.d_head, d),
                    })
                    .collect(),
                ln2: zn(),
                ffn: match cfg.ffn {
                    FfnConfig::Dense { ffn_dim } => FfnParams::Dense(expert(ffn_dim)),
                    FfnConfig::Moe {
                        experts,
                        expert_dim,
                        ..
                    } => FfnParams::Moe {
                        router: Matrix::zeros(d, experts),
                        experts: (0..experts).map(|_| expert(expert_dim)).collect(),
                    },
                },
            })
            .collect();
        Params {
            tok_embed: Matrix::zeros(cfg.vocab, d),
            pos_embed: Matrix::zeros(cfg.max_seq, d),
            layers,
            final_norm: cfg.final_layernorm.then(zn),
            unembed: Matrix::zeros(d, cfg.vocab),
        }
    }

    /// Seeded Gaussian initialisation (std 0.02; residual output projections
    /// scaled by `1/sqrt(2L)`), unit layernorm gains, values rounded to `f32`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid_std = 0.02 / ((2 * cfg.layers.max(1)) as f64).sqrt();
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let d = cfg.d_model;
        for (name, rank, m) in p.named_tensors_mut() {
            if rank == TensorRank::Vector {
                if name.ends_with("gamma") {
                    *m = NormParams::identity(d).gamma;
                }
                continue;
            }
            let dist = if name.ends_with(".wo") || name.ends_with(".w2") {
                &resid
            } else {
                &base
            };
            for x in m.as_mut_slice() {
                *x = dist.sample(&mut rng) as f32 as f64;
            }
        }
        p
    }

    /// Unrounded Gaussian weights with standard deviation `std` everywhere;
    /// layernorm gains are `1 + N(0, std)`. Meant for tests and probes.
    pub fn random(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        for (name, _, m) in p.named_tensors_mut() {
            let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            for x in m.as_mut_slice() {
                *x = offset + dist.sample(&mut rng);
            }
        }
        p
    }

    /// Applies `f` to every parameter value, in canonical tensor order.
    pub fn map_values(&mut self, mut f: impl FnMut(f64) -> f64) {
        for (_, _, m) in self.named_tensors_mut() {
            for x in m.as_mut_slice() {
                *x = f(*x);
            }
        }
    }

    /// Tensors in canonical order together with their file names.
    pub fn named_tensors(&self) -> Vec<(String, TensorRank, &Matrix)> {
        use TensorRank::*;
        let mut out = vec![
            ("tok_embed".to_string(), Matrix, &self.tok_embed),
            ("pos_embed".to_string(), Matrix, &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.ln1.gamma"), Vector, &layer.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), Vector, &layer.ln1.beta));
            out.push((format!("{p}.attn.wq"), Matrix, &layer.wq));
            out.push((format!("{p}.attn.wk"), Matrix, &layer.wk));
            for (j, h) in layer.heads.iter().enumerate() {
                out.push((format!("{p}.attn.heads.{j}.wv"), Matrix, &h.wv));
                out.push((format!("{p}.attn.heads.{j}.wo"), Matrix, &h.wo));
            }
            out.push((format!("{p}.ln2.gamma"), Vector, &layer.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), Vector, &layer.ln2.beta));
            match &layer.ffn {
                FfnParams::Dense(e) => {
                    out.push((format!("{p}.ffn.w1"), Matrix, &e.w1));
                    out.push((format!("{p}.ffn.w2"), Matrix, &e.w2));
                }
                FfnParams::Moe { router, experts } => {
                    out.push((format!("{p}.moe.router"), Matrix, router));
                    for (e, ex) in experts.iter().enumerate() {
                        out.push((format!("{p}.moe.experts.{e}.w1"), Matrix, &ex.w1));
                        out.push((format!("{p}.moe.experts.{e}.w2"), Matrix, &ex.w2));
                    }
                }
            }
        }
        if let Some(n) = &self.final_norm {
            out.push(("final_norm.gamma".to_string(), Vector, &n.gamma));
            out.push(("final_norm.beta".to_string(), Vector, &n.beta));
        }
        out.push(("unembed".to_string(), Matrix, &self.unembed));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorRank, &mut Matrix)> {
        use TensorRank::*;
        let mut out = vec![
            ("tok_embed".to_string(), Matrix, &mut self.tok_embed),
            ("pos_embed".to_string(), Matrix, &mut self.pos_embed),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.ln1.gamma"), Vector, &mut layer.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), Vector, &mut layer.ln1.beta));
            out.push((format!("{p}.attn.wq"), Matrix, &mut layer.wq));
            out.push((format!("{p}.attn.wk"), Matrix, &mut layer.wk));
            for (j, h) in layer.heads.iter_mut().enumerate() {
                out.push((format!("{p}.attn.heads.{j}.wv"), Matrix, &mut h.wv));
                out.push((format!("{p}.attn.heads.{j}.wo"), Matrix, &mut h.wo));
            }
            out.push((format!("{p}.ln2.gamma"), Vector, &mut layer.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), Vector, &mut layer.ln2.beta));
            match &mut layer.ffn {
                FfnParams::Dense(e) => {
                    out.push((format!("{p}.ffn.w1"), Matrix, &mut e.w1));
                    out.push((format!("{p}.ffn.w2"), Matrix, &mut e.w2));
                }
                FfnParams::Moe { router, experts } => {
                    out.push((format!("{p}.moe.router"), Matrix, router));
                    for (e, ex) in experts.iter_mut().enumerate() {
                        out.push((format!("{p}.moe.experts.{e}.w1"), Matrix, &mut ex.w1));
                        out.push((format!("{p}.moe.experts.{e}.w2"), Matrix, &mut ex.w2));
                    }
                }
            }
        }
        if let Some(n) = &mut self.final_norm {
            out.push(("final_norm.gamma".to_string(), Vector, &mut n.gamma));
            out.push(("final_norm.beta".to_string(), Vector, &mut n.beta));
        }
        out.push(("unembed".to_string(), Matrix, &mut self.unembed));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .map(|(_, _, m)| m.as_slice().len())
            .sum()
    }
}
