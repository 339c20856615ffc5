//! Tracing forward pass.
//!
//! Blocks are pre-norm: `x += attn(ln1(x)); x += ffn(ln2(x))`, followed by an
//! optional final layernorm and the unembedding. The trace keeps every
//! intermediate the attribution and training code needs.

use super::config::{FfnConfig, ModelConfig, Nonlinearity};
use super::params::{ExpertParams, FfnParams, LayerParams, NormParams, Params};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_softmax, softmax, topk_indices, Matrix};

/// Layernorm output plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct NormTrace {
    /// Normalised input `(x - mean) * rstd`.
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
    pub out: Matrix,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// `h_p · W^V_j` for every position `p` (`T×d_head`).
    pub values: Matrix,
    /// Attention weights, row `i` = query position, column `p` = key
    /// position; zero above the diagonal.
    pub alpha: Matrix,
    /// `Σ_p alpha[i][p] · values[p]` (`T×d_head`).
    pub context: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub heads: Vec<HeadTrace>,
    /// Sum over unmasked heads of `context_j · W^O_j` (`T×d`).
    pub output: Matrix,
}

/// One selected expert at one position.
#[derive(Debug, Clone)]
pub struct Route {
    pub expert: usize,
    pub gate: f64,
    /// `x · W1` before the nonlinearity.
    pub pre: Vec<f64>,
    /// Activations `m` (zeroed where masked).
    pub act: Vec<f64>,
    /// Ungated expert output `m · W2`.
    pub out: Vec<f64>,
}

/// Routing decision for one position.
#[derive(Debug, Clone)]
pub struct RoutingRecord {
    /// Softmax router probabilities over all experts.
    pub probs: Vec<f64>,
    /// Selected experts in top-k order.
    pub routes: Vec<Route>,
}

impl RoutingRecord {
    pub fn route_for(&self, expert: usize) -> Option<&Route> {
        self.routes.iter().find(|r| r.expert == expert)
    }
}

#[derive(Debug, Clone)]
pub enum FfnTrace {
    Dense {
        pre: Matrix,
        act: Matrix,
        output: Matrix,
    },
    Moe {
        routing: Vec<RoutingRecord>,
        output: Matrix,
    },
}

impl FfnTrace {
    pub fn output(&self) -> &Matrix {
        match self {
            FfnTrace::Dense { output, .. } | FfnTrace::Moe { output, .. } => output,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub resid_in: Matrix,
    pub ln1: NormTrace,
    pub attn: AttnTrace,
    /// Residual after attention, the input `x` of the FFN/MoE block.
    pub resid_mid: Matrix,
    pub ln2: NormTrace,
    pub ffn: FfnTrace,
    pub resid_out: Matrix,
}

/// Everything captured by one forward pass over a token sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub embedded: Matrix,
    pub layers: Vec<LayerTrace>,
    pub final_norm: Option<NormTrace>,
    /// `T×vocab` logits at every position.
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Residual stream after the last block (before the final norm).
    pub fn final_residual(&self) -> &Matrix {
        self.layers
            .last()
            .map_or(&self.embedded, |l| &l.resid_out)
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Components switched off during a forward pass.
///
/// Head masks suppress a head's contribution to the attention output.
/// Neuron masks force the activation `m` of an FFN (or expert) neuron to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMask {
    /// `[layer][head]`
    pub heads: Vec<Vec<bool>>,
    /// `[layer][expert][column]`; dense models use a single expert slot.
    pub neurons: Vec<Vec<Vec<bool>>>,
}

impl ComponentMask {
    pub fn none(cfg: &ModelConfig) -> Self {
        ComponentMask {
            heads: vec![vec![false; cfg.heads]; cfg.layers],
            neurons: vec![vec![vec![false; cfg.ffn_width()]; cfg.experts()]; cfg.layers],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.iter().flatten().all(|m| !m)
            && self.neurons.iter().flatten().flatten().all(|m| !m)
    }
}

/// Where an injected vector is added to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    AfterAttention,
    AfterFfn,
}

/// Adds `delta` to the residual stream at `(layer, site, position)`, after
/// which all downstream computation sees the modified stream.
#[derive(Debug, Clone)]
pub struct Injection {
    pub layer: usize,
    pub site: Site,
    pub position: usize,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a ComponentMask>,
    pub injection: Option<&'a Injection>,
}

/// A model configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

pub fn layer_norm(x: &Matrix, p: &NormParams, eps: f64) -> NormTrace {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut out = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (gamma, beta) = (p.gamma.as_slice(), p.beta.as_slice());
    for i in 0..t {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mu) * r;
        }
        let xh = xhat.row(i).to_vec();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gamma[k] * xh[k] + beta[k];
        }
    }
    NormTrace { xhat, rstd, out }
}

/// One FFN on one input vector: returns `(W2ᵀ-weighted output, m, pre)`.
fn expert_ffn_full(
    x: &[f64],
    w: &ExpertParams,
    sigma: Nonlinearity,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if x.len() != w.w1.rows() || w.w2.rows() != w.w1.cols() || w.w2.cols() != x.len() {
        return Err(Error::shape(
            "expert_ffn",
            format!(
                "x[{}], W1 {:?}, W2 {:?}",
                x.len(),
                w.w1.shape(),
                w.w2.shape()
            ),
        ));
    }
    let inner = w.w1.cols();
    let mut pre = vec![0.0; inner];
    for (i, &xi) in x.iter().enumerate() {
        axpy(&mut pre, xi, w.w1.row(i));
    }
    let mut act: Vec<f64> = pre.iter().map(|&z| sigma.apply(z)).collect();
    if let Some(mask) = mask {
        for (a, &m) in act.iter_mut().zip(mask) {
            if m {
                *a = 0.0;
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for (k, &m) in act.iter().enumerate() {
        axpy(&mut out, m, w.w2.row(k));
    }
    Ok((out, act, pre))
}

/// Two-layer FFN: `m = σ(x·W1)`, output `m·W2`. Returns `(output, m)`.
pub fn expert_ffn(x: &[f64], w: &ExpertParams, sigma: Nonlinearity) -> Result<(Vec<f64>, Vec<f64>)> {
    let (out, act, _) = expert_ffn_full(x, w, sigma, None)?;
    Ok((out, act))
}

/// Mixture-of-experts layer on one input vector.
///
/// Router probabilities are a softmax over all experts; the top-k are kept
/// and, with `gate_renorm`, their gates rescaled to sum to one. The output
/// is `Σ gate_e · FFN_e(x)` over the selected experts in top-k order.
pub fn moe_layer_forward(
    x: &[f64],
    router: &Matrix,
    experts: &[ExpertParams],
    top_k: usize,
    gate_renorm: bool,
    sigma: Nonlinearity,
    mask: Option<&[Vec<bool>]>,
) -> Result<(Vec<f64>, RoutingRecord)> {
    if router.rows() != x.len() || router.cols() != experts.len() {
        return Err(Error::shape(
            "moe_layer_forward",
            format!("x[{}] with router {:?}", x.len(), router.shape()),
        ));
    }
    if top_k == 0 || top_k > experts.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k {top_k} with {} experts",
            experts.len()
        )));
    }
    let mut scores = vec![0.0; experts.len()];
    for (i, &xi) in x.iter().enumerate() {
        axpy(&mut scores, xi, router.row(i));
    }
    let probs = softmax(&scores)?;
    let selected = topk_indices(&probs, top_k)?;
    let norm: f64 = if gate_renorm {
        selected.iter().map(|&e| probs[e]).sum()
    } else {
        1.0
    };
    let mut output = vec![0.0; x.len()];
    let mut routes = Vec::with_capacity(top_k);
    for e in selected {
        let gate = probs[e] / norm;
        let emask = mask.map(|m| m[e].as_slice());
        let (out, act, pre) = expert_ffn_full(x, &experts[e], sigma, emask)?;
        axpy(&mut output, gate, &out);
        routes.push(Route {
            expert: e,
            gate,
            pre,
            act,
            out,
        });
    }
    Ok((output, RoutingRecord { probs, routes }))
}

/// Causal multi-head attention over normalised hidden states `h` (`T×d`).
///
/// Output at position `i` is `Σ_j Σ_{p≤i} α[j][i][p] · (h_p·W^V_j)·W^O_j`.
/// Heads flagged in `head_mask` are computed and traced but contribute
/// nothing to the output.
pub fn attention_forward(
    h: &Matrix,
    layer: &LayerParams,
    cfg: &ModelConfig,
    head_mask: Option<&[bool]>,
) -> Result<AttnTrace> {
    let (t, d) = h.shape();
    if d != cfg.d_model || t == 0 {
        return Err(Error::shape(
            "attention_forward",
            format!("hidden {:?} for d_model {}", h.shape(), cfg.d_model),
        ));
    }
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h.matmul(&layer.wq)?;
    let k = h.matmul(&layer.wk)?;
    let mut output = Matrix::zeros(t, d);
    let mut heads = Vec::with_capacity(cfg.heads);
    for (j, hp) in layer.heads.iter().enumerate() {
        let values = h.matmul(&hp.wv)?;
        let mut alpha = Matrix::zeros(t, t);
        let mut context = Matrix::zeros(t, dh);
        let cols = j * dh..(j + 1) * dh;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let scores: Vec<f64> = (0..=i)
                .map(|p| dot(qi, &k.row(p)[cols.clone()]) * scale)
                .collect();
            let a = softmax(&scores)?;
            let ctx = context.row_mut(i);
            for (p, &ap) in a.iter().enumerate() {
                axpy(ctx, ap, values.row(p));
            }
            alpha.row_mut(i)[..=i].copy_from_slice(&a);
        }
        let masked = head_mask.is_some_and(|m| m[j]);
        if !masked {
            for i in 0..t {
                let out_row = output.row_mut(i);
                for (c, &z) in context.row(i).iter().enumerate() {
                    axpy(out_row, z, hp.wo.row(c));
                }
            }
        }
        heads.push(HeadTrace {
            values,
            alpha,
            context,
        });
    }
    Ok(AttnTrace {
        q,
        k,
        heads,
        output,
    })
}

fn dense_ffn_forward(
    g: &Matrix,
    w: &ExpertParams,
    sigma: Nonlinearity,
    mask: Option<&[bool]>,
) -> Result<FfnTrace> {
    let pre = g.matmul(&w.w1)?;
    let mut act = pre.clone();
    for (a, &z) in act.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *a = sigma.apply(z);
    }
    if let Some(mask) = mask {
        for t in 0..act.rows() {
            for (a, &m) in act.row_mut(t).iter_mut().zip(mask) {
                if m {
                    *a = 0.0;
                }
            }
        }
    }
    let output = act.matmul(&w.w2)?;
    Ok(FfnTrace::Dense { pre, act, output })
}

fn add_rows(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *a += b;
    }
}

impl Model {
    /// Wraps weights after checking every tensor against the config.
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        let want = expected.named_tensors();
        let got = params.named_tensors();
        if want.len() != got.len() {
            return Err(Error::shape(
                "Model::new",
                format!("{} tensors, config implies {}", got.len(), want.len()),
            ));
        }
        for ((wn, _, wm), (gn, _, gm)) in want.iter().zip(&got) {
            if wn != gn || wm.shape() != gm.shape() {
                return Err(Error::shape(
                    "Model::new",
                    format!("tensor {gn} {:?}, expected {wn} {:?}", gm.shape(), wm.shape()),
                ));
            }
        }
        Ok(Model { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Model { config, params })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        self.forward_with(tokens, ForwardOptions::default())
    }

    pub fn forward_with(&self, tokens: &[usize], opts: ForwardOptions<'_>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        if let Some(inj) = opts.injection {
            if inj.layer >= cfg.layers || inj.position >= tokens.len() || inj.delta.len() != cfg.d_model {
                return Err(Error::InvalidArgument("injection outside the model".into()));
            }
        }
        let t = tokens.len();
        let d = cfg.d_model;
        let p = &self.params;
        let mut x = Matrix::zeros(t, d);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(p.tok_embed.row(tok));
            for (a, b) in row.iter_mut().zip(p.pos_embed.row(i)) {
                *a += b;
            }
        }
        let embedded = x.clone();
        let inject = |x: &mut Matrix, layer: usize, site: Site| {
            if let Some(inj) = opts.injection {
                if inj.layer == layer && inj.site == site {
                    for (a, b) in x.row_mut(inj.position).iter_mut().zip(&inj.delta) {
                        *a += b;
                    }
                }
            }
        };

        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let resid_in = x.clone();
            let ln1 = layer_norm(&x, &lp.ln1, cfg.ln_eps);
            let head_mask = opts.mask.map(|m| m.heads[l].as_slice());
            let attn = attention_forward(&ln1.out, lp, cfg, head_mask)?;
            add_rows(&mut x, &attn.output);
            inject(&mut x, l, Site::AfterAttention);
            let resid_mid = x.clone();
            let ln2 = layer_norm(&x, &lp.ln2, cfg.ln_eps);
            let ffn = match (&lp.ffn, &cfg.ffn) {
                (FfnParams::Dense(w), FfnConfig::Dense { .. }) => {
                    let mask = opts.mask.map(|m| m.neurons[l][0].as_slice());
                    dense_ffn_forward(&ln2.out, w, cfg.nonlinearity, mask)?
                }
                (
                    FfnParams::Moe { router, experts },
                    FfnConfig::Moe {
                        top_k, gate_renorm, ..
                    },
                ) => {
                    let mask = opts.mask.map(|m| m.neurons[l].as_slice());
                    let mut output = Matrix::zeros(t, d);
                    let mut routing = Vec::with_capacity(t);
                    for i in 0..t {
                        let (out, rec) = moe_layer_forward(
                            ln2.out.row(i),
                            router,
                            experts,
                            *top_k,
                            *gate_renorm,
                            cfg.nonlinearity,
                            mask,
                        )?;
                        output.row_mut(i).copy_from_slice(&out);
                        routing.push(rec);
                    }
                    FfnTrace::Moe { routing, output }
                }
                _ => {
                    return Err(Error::shape(
                        "forward",
                        format!("layer {l} FFN weights do not match the configured architecture"),
                    ))
                }
            };
            add_rows(&mut x, ffn.output());
            inject(&mut x, l, Site::AfterFfn);
            layers.push(LayerTrace {
                resid_in,
                ln1,
                attn,
                resid_mid,
                ln2,
                ffn,
                resid_out: x.clone(),
            });
        }

        let final_norm = p.final_norm.as_ref().map(|n| layer_norm(&x, n, cfg.ln_eps));
        let logits = match &final_norm {
            Some(n) => n.out.matmul(&p.unembed)?,
            None => x.matmul(&p.unembed)?,
        };
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            embedded,
            layers,
            final_norm,
            logits,
        })
    }

    /// Final norm (if configured) and unembedding of one residual vector.
    pub fn final_logits(&self, residual: &[f64]) -> Result<Vec<f64>> {
        if residual.len() != self.config.d_model {
            return Err(Error::shape(
                "final_logits",
                format!("residual of width {} for d_model {}", residual.len(), self.config.d_model),
            ));
        }
        let x = Matrix::from_vec(1, residual.len(), residual.to_vec())?;
        let u = match &self.params.final_norm {
            Some(n) => layer_norm(&x, n, self.config.ln_eps).out,
            None => x,
        };
        Ok(u.matmul(&self.params.unembed)?.into_vec())
    }

    /// `log p(target | residual)` through the final norm and unembedding.
    pub fn unembed_logprob(&self, residual: &[f64], target: usize) -> Result<f64> {
        if target >= self.config.vocab {
            return Err(Error::InvalidArgument(format!(
                "target {target} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        let logits = self.final_logits(residual)?;
        Ok(log_softmax(&logits)?[target])
    }
}
