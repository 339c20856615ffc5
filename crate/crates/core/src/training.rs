//! Next-token-prediction training with hand-written backward passes.
//!
//! Each training sequence is one rendered fact sentence. The loss is the
//! mean cross-entropy over every predicted position in the batch; MoE
//! models add `lambda_bal` times a balance penalty, the mean over layers of
//! `(1/E) Σ_e (P_e - 1/E)²`, where `P_e` is the mean router probability of
//! expert `e` over the batch tokens. Top-k selection itself is treated as
//! constant: gradients reach the router only through the selected gates and
//! through the balance penalty.
//!
//! Parameters and Adam moments are rounded to `f32` after every update, so a
//! run resumed from a checkpoint plus optimizer state continues bit for bit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read, read_to_string, sha256_file, write_atomic};
use crate::model::{
    decode_container, encode_container, fill_params, params_to_stored, AttnTrace, Checkpoint,
    ExpertParams, FfnConfig, FfnParams, FfnTrace, ForwardTrace, LayerParams, Model, ModelConfig,
    Nonlinearity, NormParams, NormTrace, Params, RoutingRecord, TensorRank,
};
use crate::numerics::{axpy, dot, log_softmax, softmax, Matrix};

pub const SERIES_MANIFEST: &str = "series.json";
pub const LOSS_LOG: &str = "loss.tsv";
pub const OPTIMIZER_FILE: &str = "optimizer.glpi";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sentences per step.
    pub batch_size: usize,
    /// Longest accepted training sentence, in tokens.
    pub seq_len: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warmup length; cosine decay to `min_lr_ratio * lr` afterwards.
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps at which checkpoints are written, besides step 0. `None` means
    /// every 5% of `steps`.
    pub schedule: Option<Vec<u64>>,
    pub seed: u64,
    /// Weight of the MoE balance penalty.
    pub lambda_bal: f64,
    /// Decoupled weight decay applied to weight matrices (not to norm
    /// gains and biases).
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            seq_len: 16,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            schedule: None,
            seed: 0,
            lambda_bal: 1.0,
            weight_decay: 0.0,
        }
    }
}

/// `ceil(steps * i / 20)` for `i = 1..=20`, deduplicated.
pub fn default_schedule(steps: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=20u64).map(|i| (steps * i).div_ceil(20)).filter(|&s| s > 0).collect();
    out.dedup();
    out
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.grad_clip < 0.0 || self.lambda_bal < 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive; grad_clip, lambda_bal and weight_decay non-negative".into());
        }
        if let Some(s) = &self.schedule {
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return bad("checkpoint schedule must be strictly increasing".into());
            }
            if s.iter().any(|&x| x == 0 || x > self.steps) {
                return bad(format!("checkpoint schedule must lie in [1, {}]", self.steps));
            }
        }
        Ok(())
    }

    /// All checkpoint steps including 0.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut out = vec![0];
        match &self.schedule {
            Some(s) => out.extend(s),
            None => out.extend(default_schedule(self.steps)),
        }
        out
    }

    /// Learning rate used for update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (PI * progress.min(1.0)).cos())
    }
}

/// Adam first and second moments, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
        }
    }

    pub fn to_bytes(&self, step: u64, cfg: &ModelConfig) -> Vec<u8> {
        let mut tensors = params_to_stored(&self.m, "m.");
        tensors.extend(params_to_stored(&self.v, "v."));
        encode_container(step, cfg, &tensors)
    }

    /// Decodes a state written by [`Self::to_bytes`]; returns its step.
    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig, path: &Path) -> Result<(u64, Self)> {
        let (step, file_cfg, mut tensors) = decode_container(bytes, path)?;
        if &file_cfg != cfg {
            return Err(Error::format(path, "optimizer state belongs to a different model config"));
        }
        let half = tensors.len() / 2;
        let v_tensors = tensors.split_off(half);
        let mut state = AdamState::new(cfg);
        fill_params(&mut state.m, tensors, "m.", path)?;
        fill_params(&mut state.v, v_tensors, "v.", path)?;
        Ok((step, state))
    }
}

/// Loss of one batch, split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub cross_entropy: f64,
    pub balance: f64,
    pub total: f64,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: BatchLoss,
    pub lr: f64,
    pub grad_norm: f64,
}

struct HeadT {
    wv_t: Matrix,
    wo_t: Matrix,
}

struct ExpertT {
    w1_t: Matrix,
    w2_t: Matrix,
}

enum FfnT {
    Dense(ExpertT),
    Moe { router_t: Matrix, experts: Vec<ExpertT> },
}

struct LayerT {
    wq_t: Matrix,
    wk_t: Matrix,
    heads: Vec<HeadT>,
    ffn: FfnT,
}

/// Weight transposes, so every backward product runs in row (axpy) form.
struct Transposes {
    layers: Vec<LayerT>,
    unembed_t: Matrix,
}

impl Transposes {
    fn new(p: &Params) -> Self {
        let expert = |e: &ExpertParams| ExpertT {
            w1_t: e.w1.transpose(),
            w2_t: e.w2.transpose(),
        };
        Transposes {
            layers: p
                .layers
                .iter()
                .map(|l| LayerT {
                    wq_t: l.wq.transpose(),
                    wk_t: l.wk.transpose(),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadT {
                            wv_t: h.wv.transpose(),
                            wo_t: h.wo.transpose(),
                        })
                        .collect(),
                    ffn: match &l.ffn {
                        FfnParams::Dense(e) => FfnT::Dense(expert(e)),
                        FfnParams::Moe { router, experts } => FfnT::Moe {
                            router_t: router.transpose(),
                            experts: experts.iter().map(expert).collect(),
                        },
                    },
                })
                .collect(),
            unembed_t: p.unembed.transpose(),
        }
    }
}

fn layer_norm_backward(tr: &NormTrace, p: &NormParams, g: &mut NormParams, dy: &Matrix) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let gamma = p.gamma.as_slice();
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = tr.xhat.row(i);
        for (gg, (a, b)) in g.gamma.as_mut_slice().iter_mut().zip(dyr.iter().zip(xh)) {
            *gg += a * b;
        }
        axpy(g.beta.as_mut_slice(), 1.0, dyr);
        for k in 0..d {
            dxhat[k] = dyr[k] * gamma[k];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        let r = tr.rstd[i];
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
    dx
}

fn attention_backward(
    h: &Matrix,
    tr: &AttnTrace,
    lt: &LayerT,
    g: &mut LayerParams,
    d_head: usize,
    dout: &Matrix,
) -> Result<Matrix> {
    let (t, d) = h.shape();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dh = Matrix::zeros(t, d);
    for (j, ht) in tr.heads.iter().enumerate() {
        g.heads[j].wo.add_xt_dy(&ht.context, dout)?;
        let dctx = dout.matmul(&lt.heads[j].wo_t)?;
        let mut dv = Matrix::zeros(t, d_head);
        let cols = j * d_head..(j + 1) * d_head;
        let mut da = Vec::with_capacity(t);
        for i in 0..t {
            let dci = dctx.row(i);
            let a = &ht.alpha.row(i)[..=i];
            da.clear();
            da.extend((0..=i).map(|p| dot(dci, ht.values.row(p))));
            for (p, &ap) in a.iter().enumerate() {
                axpy(dv.row_mut(p), ap, dci);
            }
            let s = dot(a, &da);
            for p in 0..=i {
                let ds = a[p] * (da[p] - s) * scale;
                axpy(&mut dq.row_mut(i)[cols.clone()], ds, &tr.k.row(p)[cols.clone()]);
                axpy(&mut dk.row_mut(p)[cols.clone()], ds, &tr.q.row(i)[cols.clone()]);
            }
        }
        g.heads[j].wv.add_xt_dy(h, &dv)?;
        dh.add_assign(&dv.matmul(&lt.heads[j].wv_t)?)?;
    }
    g.wq.add_xt_dy(h, &dq)?;
    g.wk.add_xt_dy(h, &dk)?;
    dh.add_assign(&dq.matmul(&lt.wq_t)?)?;
    dh.add_assign(&dk.matmul(&lt.wk_t)?)?;
    Ok(dh)
}

fn dense_ffn_backward(
    x: &Matrix,
    pre: &Matrix,
    act: &Matrix,
    wt: &ExpertT,
    g: &mut ExpertParams,
    sigma: Nonlinearity,
    dout: &Matrix,
) -> Result<Matrix> {
    let mut dpre = dout.matmul(&wt.w2_t)?;
    g.w2.add_xt_dy(act, dout)?;
    for (a, &z) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *a *= sigma.derivative(z);
    }
    g.w1.add_xt_dy(x, &dpre)?;
    dpre.matmul(&wt.w1_t)
}

#[allow(clippy::too_many_arguments)]
fn moe_backward(
    x: &Matrix,
    routing: &[RoutingRecord],
    router_t: &Matrix,
    experts_t: &[ExpertT],
    g_router: &mut Matrix,
    g_experts: &mut [ExpertParams],
    gate_renorm: bool,
    sigma: Nonlinearity,
    dprob_bal: &[f64],
    dout: &Matrix,
) -> Matrix {
    let (t, d) = x.shape();
    let n_exp = dprob_bal.len();
    let mut dx = Matrix::zeros(t, d);
    let mut dffn = vec![0.0; d];
    let mut dp = vec![0.0; n_exp];
    for i in 0..t {
        let rec = &routing[i];
        let xi = x.row(i);
        let di = dout.row(i);
        let dxi = dx.row_mut(i);
        let mut dgates = Vec::with_capacity(rec.routes.len());
        for route in &rec.routes {
            dgates.push(dot(di, &route.out));
            for (o, &v) in dffn.iter_mut().zip(di) {
                *o = route.gate * v;
            }
            let ge = &mut g_experts[route.expert];
            let et = &experts_t[route.expert];
            for (k, &m) in route.act.iter().enumerate() {
                axpy(ge.w2.row_mut(k), m, &dffn);
            }
            let mut dpre = vec![0.0; route.act.len()];
            for (c, &v) in dffn.iter().enumerate() {
                axpy(&mut dpre, v, et.w2_t.row(c));
            }
            for (a, &z) in dpre.iter_mut().zip(&route.pre) {
                *a *= sigma.derivative(z);
            }
            for (r, &xv) in xi.iter().enumerate() {
                axpy(ge.w1.row_mut(r), xv, &dpre);
            }
            for (k, &v) in dpre.iter().enumerate() {
                axpy(dxi, v, et.w1_t.row(k));
            }
        }
        dp.copy_from_slice(dprob_bal);
        if gate_renorm {
            let z: f64 = rec.routes.iter().map(|r| rec.probs[r.expert]).sum();
            let s: f64 = rec.routes.iter().zip(&dgates).map(|(r, dg)| r.gate * dg).sum();
            for (r, dg) in rec.routes.iter().zip(&dgates) {
                dp[r.expert] += (dg - s) / z;
            }
        } else {
            for (r, dg) in rec.routes.iter().zip(&dgates) {
                dp[r.expert] += dg;
            }
        }
        let s = dot(&rec.probs, &dp);
        let dscore: Vec<f64> = rec.probs.iter().zip(&dp).map(|(p, g)| p * (g - s)).collect();
        for (r, &xv) in xi.iter().enumerate() {
            axpy(g_router.row_mut(r), xv, &dscore);
        }
        for (e, &v) in dscore.iter().enumerate() {
            axpy(dxi, v, router_t.row(e));
        }
    }
    dx
}

/// Balance penalty and its gradient with respect to each token's router
/// probabilities (`[layer][expert]`, identical for every token).
fn balance_terms(traces: &[ForwardTrace], cfg: &ModelConfig, lambda: f64) -> (f64, Vec<Vec<f64>>) {
    let e = cfg.experts();
    if !matches!(cfg.ffn, FfnConfig::Moe { .. }) || cfg.layers == 0 {
        return (0.0, vec![vec![0.0; e]; cfg.layers]);
    }
    let n_tok: usize = traces.iter().map(|t| t.tokens.len()).sum();
    let target = 1.0 / e as f64;
    let mut penalty = 0.0;
    let mut grads = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut frac = vec![0.0; e];
        for tr in traces {
            if let FfnTrace::Moe { routing, .. } = &tr.layers[l].ffn {
                for rec in routing {
                    axpy(&mut frac, 1.0, &rec.probs);
                }
            }
        }
        frac.iter_mut().for_each(|f| *f /= n_tok as f64);
        penalty += frac.iter().map(|f| (f - target) * (f - target)).sum::<f64>() / e as f64;
        let c = lambda * 2.0 / (e as f64 * cfg.layers as f64 * n_tok as f64);
        grads.push(frac.iter().map(|f| c * (f - target)).collect());
    }
    (penalty / cfg.layers as f64, grads)
}

/// Forward passes for a batch, returning the loss and the traces.
fn batch_forward(model: &Model, batch: &[Vec<usize>], lambda: f64) -> Result<(BatchLoss, Vec<ForwardTrace>, usize)> {
    let n_pred: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_pred == 0 {
        return Err(Error::InvalidArgument("batch has no predicted positions".into()));
    }
    let mut ce = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    for seq in batch {
        let tr = model.forward(seq)?;
        for i in 0..seq.len() - 1 {
            ce -= log_softmax(tr.logits.row(i))?[seq[i + 1]];
        }
        traces.push(tr);
    }
    ce /= n_pred as f64;
    let (balance, _) = balance_terms(&traces, &model.config, lambda);
    let loss = BatchLoss {
        cross_entropy: ce,
        balance,
        total: ce + lambda * balance,
    };
    Ok((loss, traces, n_pred))
}

/// Total batch loss only.
pub fn batch_loss(model: &Model, batch: &[Vec<usize>], lambda_bal: f64) -> Result<BatchLoss> {
    Ok(batch_forward(model, batch, lambda_bal)?.0)
}

/// Loss and analytic gradient of the batch loss.
pub fn loss_and_grad(model: &Model, batch: &[Vec<usize>], lambda_bal: f64) -> Result<(BatchLoss, Params)> {
    let (loss, traces, n_pred) = batch_forward(model, batch, lambda_bal)?;
    let trans = Transposes::new(&model.params);
    let grads = backward(model, &trans, &traces, n_pred, lambda_bal)?;
    Ok((loss, grads))
}

fn backward(model: &Model, trans: &Transposes, traces: &[ForwardTrace], n_pred: usize, lambda: f64) -> Result<Params> {
    let cfg = &model.config;
    let p = &model.params;
    let mut g = Params::zeros(cfg);
    let (_, dprob_bal) = balance_terms(traces, cfg, lambda);
    for tr in traces {
        let t = tr.tokens.len();
        let mut dlogits = Matrix::zeros(t, cfg.vocab);
        for i in 0..t - 1 {
            let probs = softmax(tr.logits.row(i))?;
            let row = dlogits.row_mut(i);
            for (o, pr) in row.iter_mut().zip(&probs) {
                *o = pr / n_pred as f64;
            }
            row[tr.tokens[i + 1]] -= 1.0 / n_pred as f64;
        }
        let u = tr.final_norm.as_ref().map_or(tr.final_residual(), |n| &n.out);
        g.unembed.add_xt_dy(u, &dlogits)?;
        let du = dlogits.matmul(&trans.unembed_t)?;
        let mut dx = match (&tr.final_norm, &p.final_norm, &mut g.final_norm) {
            (Some(nt), Some(np), Some(ng)) => layer_norm_backward(nt, np, ng, &du),
            _ => du,
        };
        for l in (0..cfg.layers).rev() {
            let lt = &tr.layers[l];
            let lp = &p.layers[l];
            let ltr = &trans.layers[l];
            let gl = &mut g.layers[l];
            let dg = match (&lt.ffn, &lp.ffn, &ltr.ffn, &mut gl.ffn) {
                (FfnTrace::Dense { pre, act, .. }, FfnParams::Dense(_), FfnT::Dense(wt), FfnParams::Dense(ge)) => {
                    dense_ffn_backward(&lt.ln2.out, pre, act, wt, ge, cfg.nonlinearity, &dx)?
                }
                (
                    FfnTrace::Moe { routing, .. },
                    FfnParams::Moe { .. },
                    FfnT::Moe { router_t, experts },
                    FfnParams::Moe {
                        router: g_router,
                        experts: g_experts,
                    },
                ) => {
                    let renorm = matches!(cfg.ffn, FfnConfig::Moe { gate_renorm: true, .. });
                    moe_backward(
                        &lt.ln2.out,
                        routing,
                        router_t,
                        experts,
                        g_router,
                        g_experts,
                        renorm,
                        cfg.nonlinearity,
                        &dprob_bal[l],
                        &dx,
                    )
                }
                _ => return Err(Error::shape("backward", format!("layer {l} FFN kind mismatch"))),
            };
            dx.add_assign(&layer_norm_backward(&lt.ln2, &lp.ln2, &mut gl.ln2, &dg))?;
            let dh = attention_backward(&lt.ln1.out, &lt.attn, ltr, gl, cfg.d_head, &dx)?;
            dx.add_assign(&layer_norm_backward(&lt.ln1, &lp.ln1, &mut gl.ln1, &dh))?;
        }
        for (i, &tok) in tr.tokens.iter().enumerate() {
            axpy(g.tok_embed.row_mut(tok), 1.0, dx.row(i));
            axpy(g.pos_embed.row_mut(i), 1.0, dx.row(i));
        }
    }
    Ok(g)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Stateful trainer: model, optimizer state and a deterministic data order.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamState,
    pub train: TrainConfig,
    step: u64,
    sentences: Vec<Vec<usize>>,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model initialised from `train.seed`.
    pub fn new(config: ModelConfig, train: TrainConfig, sentences: Vec<Vec<usize>>) -> Result<Self> {
        let model = Model::init(config, train.seed)?;
        let optimizer = AdamState::new(&model.config);
        Self::from_state(model, optimizer, 0, train, sentences)
    }

    /// Continues from weights and optimizer state saved after `step` updates.
    pub fn from_state(
        model: Model,
        optimizer: AdamState,
        step: u64,
        train: TrainConfig,
        sentences: Vec<Vec<usize>>,
    ) -> Result<Self> {
        train.validate()?;
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        let limit = train.seq_len.min(model.config.max_seq);
        for (i, s) in sentences.iter().enumerate() {
            if s.len() < 2 || s.len() > limit {
                return Err(Error::InvalidArgument(format!(
                    "training sentence {i} has {} tokens; need 2..={limit}",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= model.config.vocab) {
                return Err(Error::InvalidArgument(format!(
                    "training sentence {i} has token {bad} outside vocabulary of {}",
                    model.config.vocab
                )));
            }
        }
        Ok(Trainer {
            model,
            optimizer,
            train,
            step,
            sentences,
            epoch_order: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model: self.model.clone(),
        }
    }

    fn sentence_index(&mut self, global: u64) -> usize {
        let n = self.sentences.len() as u64;
        let epoch = global / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
            rng.set_stream(epoch + 1);
            let mut order: Vec<usize> = (0..self.sentences.len()).collect();
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().expect("order set").1[(global % n) as usize]
    }

    /// Sentence indices used by update number `step` (1-based).
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let b = self.train.batch_size as u64;
        ((step - 1) * b..step * b).map(|g| self.sentence_index(g)).collect()
    }

    /// Runs one optimizer update.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.step + 1;
        let batch: Vec<Vec<usize>> = self
            .batch_indices(step)
            .into_iter()
            .map(|i| self.sentences[i].clone())
            .collect();
        let (loss, grads) = loss_and_grad(&self.model, &batch, self.train.lambda_bal).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let sq: f64 = grads
            .named_tensors()
            .iter()
            .flat_map(|(_, _, m)| m.as_slice())
            .map(|g| g * g)
            .sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let clip = self.train.grad_clip;
        let scale = if clip > 0.0 && grad_norm > clip {
            clip / grad_norm
        } else {
            1.0
        };
        let lr = self.train.lr_at(step);
        let (b1, b2, eps) = (self.train.beta1, self.train.beta2, self.train.adam_eps);
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        let params = self.model.params.named_tensors_mut();
        let ms = self.optimizer.m.named_tensors_mut();
        let vs = self.optimizer.v.named_tensors_mut();
        let gs = grads.named_tensors();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            let decay = if p.1 == TensorRank::Matrix { lr * self.train.weight_decay } else { 0.0 };
            let (p, m, v, g) = (p.2.as_mut_slice(), m.2.as_mut_slice(), v.2.as_mut_slice(), g.2.as_slice());
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = round_f32(b1 * m[i] + (1.0 - b1) * gi);
                v[i] = round_f32(b2 * v[i] + (1.0 - b2) * gi * gi);
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p[i] = round_f32(p[i] - decay * p[i] - update);
            }
        }
        self.step = step;
        Ok(StepStats {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Steps until `target` updates have been applied, calling `observe`
    /// after each one.
    pub fn run_until(&mut self, target: u64, mut observe: impl FnMut(&Self, &StepStats) -> Result<()>) -> Result<()> {
        while self.step < target {
            let stats = self.step()?;
            observe(self, &stats)?;
        }
        Ok(())
    }

    pub fn save_optimizer(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.optimizer.to_bytes(self.step, &self.model.config))
    }

    /// Restores a trainer from a checkpoint file and the optimizer state
    /// saved at the same step.
    pub fn resume(
        checkpoint: &Path,
        optimizer: &Path,
        train: TrainConfig,
        sentences: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let (step, opt) = AdamState::from_bytes(&read(optimizer)?, &ckpt.model.config, optimizer)?;
        if step != ckpt.step {
            return Err(Error::format(
                optimizer,
                format!("optimizer state at step {step}, checkpoint at step {}", ckpt.step),
            ));
        }
        Self::from_state(ckpt.model, opt, step, train, sentences)
    }
}

/// Selection counts `[layer][expert]` over one pass through `sentences`.
pub fn expert_usage(model: &Model, sentences: &[Vec<usize>]) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; model.config.experts()]; model.config.layers];
    for s in sentences {
        let tr = model.forward(s)?;
        for (l, lt) in tr.layers.iter().enumerate() {
            match &lt.ffn {
                FfnTrace::Moe { routing, .. } => {
                    for rec in routing {
                        for r in &rec.routes {
                            counts[l][r.expert] += 1;
                        }
                    }
                }
                FfnTrace::Dense { .. } => counts[l][0] += s.len() as u64,
            }
        }
    }
    Ok(counts)
}

/// One checkpoint of a series, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub step: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoints: Vec<SeriesEntry>,
    pub loss_log: String,
    pub optimizer: Option<String>,
}

/// A directory of checkpoints ordered by step.
#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    pub dir: PathBuf,
    pub manifest: Option<SeriesManifest>,
    pub entries: Vec<SeriesEntry>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt_{step:07}.glpi")
}

impl CheckpointSeries {
    /// Opens a series from its manifest, or failing that from the `*.glpi`
    /// checkpoint files in `dir` ordered by their stored step.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(SERIES_MANIFEST);
        if manifest_path.exists() {
            let manifest: SeriesManifest = serde_json::from_str(&read_to_string(&manifest_path)?)
                .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
            let entries = manifest.checkpoints.clone();
            let series = CheckpointSeries {
                dir: dir.to_path_buf(),
                manifest: Some(manifest),
                entries,
            };
            series.check_order()?;
            return Ok(series);
        }
        if !dir.is_dir() {
            return Err(Error::MissingInput(dir.display().to_string()));
        }
        let mut entries = Vec::new();
        let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for item in listing {
            let path = item.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "glpi") && path.file_name() != Some(OPTIMIZER_FILE.as_ref()) {
                let ckpt = Checkpoint::load(&path)?;
                entries.push(SeriesEntry {
                    step: ckpt.step,
                    file: path.file_name().unwrap().to_string_lossy().into_owned(),
                    sha256: sha256_file(&path)?,
                });
            }
        }
        entries.sort_by_key(|e| e.step);
        let series = CheckpointSeries {
            dir: dir.to_path_buf(),
            manifest: None,
            entries,
        };
        series.check_order()?;
        Ok(series)
    }

    fn check_order(&self) -> Result<()> {
        if self.entries.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::format(&self.dir, "checkpoint steps are not strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.step).collect()
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.dir.join(&self.entries[i].file)
    }

    /// Loads checkpoint `i`, checking its hash and that it shares the
    /// series' model config.
    pub fn load(&self, i: usize) -> Result<Checkpoint> {
        let path = self.path(i);
        let bytes = read(&path)?;
        let actual = crate::io::sha256_bytes(&bytes);
        if actual != self.entries[i].sha256 {
            return Err(Error::HashMismatch {
                path: path.clone(),
                expected: self.entries[i].sha256.clone(),
                actual,
            });
        }
        let ckpt = Checkpoint::from_bytes(&bytes, &path)?;
        if ckpt.step != self.entries[i].step {
            return Err(Error::format(&path, format!("stored step {} differs from manifest", ckpt.step)));
        }
        if let Some(m) = &self.manifest {
            if ckpt.model.config != m.model {
                return Err(Error::format(&path, "model config differs from the series manifest"));
            }
        }
        Ok(ckpt)
    }
}

/// Trains from scratch, writing checkpoints, the loss log, the final
/// optimizer state and the series manifest into `out_dir`.
pub fn train(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    sentences: &[Vec<usize>],
    out_dir: &Path,
) -> Result<CheckpointSeries> {
    let mut trainer = Trainer::new(config.clone(), train_cfg.clone(), sentences.to_vec())?;
    let schedule = train_cfg.checkpoint_steps();
    let mut entries = Vec::with_capacity(schedule.len());
    let save = |t: &Trainer, entries: &mut Vec<SeriesEntry>| -> Result<()> {
        let file = checkpoint_file_name(t.step_count());
        let path = out_dir.join(&file);
        let bytes = t.checkpoint().to_bytes();
        write_atomic(&path, &bytes)?;
        entries.push(SeriesEntry {
            step: t.step_count(),
            file,
            sha256: crate::io::sha256_bytes(&bytes),
        });
        Ok(())
    };
    save(&trainer, &mut entries)?;
    let mut log = String::from("step\tloss\tbalance_loss\n");
    let report_every = (train_cfg.steps / 10).max(1);
    trainer.run_until(train_cfg.steps, |t, stats| {
        writeln!(log, "{}\t{}\t{}", stats.step, stats.loss.cross_entropy, stats.loss.balance).expect("string write");
        if stats.step % report_every == 0 {
            log::info!(
                "step {}/{}: loss {:.4} balance {:.5} lr {:.2e}",
                stats.step,
                train_cfg.steps,
                stats.loss.cross_entropy,
                stats.loss.balance,
                stats.lr
            );
        }
        if schedule.binary_search(&stats.step).is_ok() {
            save(t, &mut entries)?;
        }
        Ok(())
    })?;
    write_atomic(&out_dir.join(LOSS_LOG), log.as_bytes())?;
    trainer.save_optimizer(&out_dir.join(OPTIMIZER_FILE))?;
    let manifest = SeriesManifest {
        config_hash: config.hash(),
        model: config.clone(),
        train: train_cfg.clone(),
        checkpoints: entries.clone(),
        loss_log: LOSS_LOG.to_string(),
        optimizer: Some(OPTIMIZER_FILE.to_string()),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&out_dir.join(SERIES_MANIFEST), json.as_bytes())?;
    Ok(CheckpointSeries {
        dir: out_dir.to_path_buf(),
        manifest: Some(manifest),
        entries,
    })
}

/// Parses a loss log written by [`train`] into `(step, loss, balance)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let parse = || -> Option<(u64, f64, f64)> { Some((f.first()?.parse().ok()?, f.get(1)?.parse().ok()?, f.get(2)?.parse().ok()?)) };
        out.push(parse().ok_or_else(|| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: "expected step, loss and balance_loss".into(),
        })?);
    }
    Ok(out)
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter entries compared.
    pub checked: usize,
    /// Entries skipped because the perturbation changed expert selection.
    pub skipped: usize,
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

fn routing_signature(model: &Model, batch: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut sig = Vec::new();
    for s in batch {
        for lt in model.forward(s)?.layers {
            if let FfnTrace::Moe { routing, .. } = lt.ffn {
                for rec in routing {
                    sig.extend(rec.routes.iter().map(|r| r.expert));
                }
            }
        }
    }
    Ok(sig)
}

/// Compares analytic gradients of the batch loss against central finite
/// differences on up to `probes` entries of every tensor (all entries of
/// smaller tensors).
pub fn grad_check_model(
    model: &Model,
    batch: &[Vec<usize>],
    lambda_bal: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grad(model, batch, lambda_bal)?;
    let base_sig = routing_signature(model, batch)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let grad_tensors = grads.named_tensors();
    for (ti, (_, _, g)) in grad_tensors.iter().enumerate() {
        let n = g.as_slice().len();
        let picks: Vec<usize> = if n <= probes {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, probes).into_vec()
        };
        for idx in picks {
            let original = {
                let mut slots = probe.params.named_tensors_mut();
                let v = slots[ti].2.as_mut_slice();
                let o = v[idx];
                v[idx] = o + FD_STEP;
                o
            };
            let sig_plus = routing_signature(&probe, batch)?;
            let plus = batch_loss(&probe, batch, lambda_bal)?.total;
            probe.params.named_tensors_mut()[ti].2.as_mut_slice()[idx] = original - FD_STEP;
            let sig_minus = routing_signature(&probe, batch)?;
            let minus = batch_loss(&probe, batch, lambda_bal)?.total;
            probe.params.named_tensors_mut()[ti].2.as_mut_slice()[idx] = original;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = g.as_slice()[idx];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Gradient check on a random model of the given (tiny) config, using two
/// random sequences.
pub fn grad_check(cfg: &ModelConfig, probes: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = Model::new(cfg.clone(), Params::random(cfg, seed, 0.5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let len = cfg.max_seq.clamp(2, 5);
    let batch: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect())
        .collect();
    grad_check_model(&model, &batch, 0.5, probes, seed)
}
