//! Log-probability-increase attribution for FFN (expert) and attention
//! neurons.
//!
//! Every neuron output at the prediction position is a scalar times a fixed
//! direction: `gate · m_k · W2[k]` for an FFN/expert neuron (zero when the
//! expert was not selected) and `context_j[k] · W^O_j[k]` for attention
//! column `k` of head `j`. The importance of a neuron is
//! `log p(w | r + output_v) - log p(w | r)` with `r` the final residual at the
//! last prompt position ("direct effect"). With `propagate`, `output_v` is
//! instead added to the residual stream right after the neuron's block and
//! the rest of the network is re-run.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Prompt;
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::model::{
    expert_ffn, layer_norm, moe_layer_forward, Checkpoint, FfnConfig, FfnParams, FfnTrace, ForwardTrace, Model,
    ModelConfig, Site,
};
use crate::numerics::{axpy, dot, log_softmax, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NeuronKind {
    Ffn,
    Attn,
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeuronKind::Ffn => "FFN",
            NeuronKind::Attn => "ATTN",
        })
    }
}

impl FromStr for NeuronKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FFN" => Ok(NeuronKind::Ffn),
            "ATTN" => Ok(NeuronKind::Attn),
            other => Err(Error::InvalidArgument(format!("unknown neuron kind {other:?}"))),
        }
    }
}

/// Address of one neuron. The derived order (layer, kind with FFN first,
/// expert, head, column) is the canonical tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub kind: NeuronKind,
    /// Expert index for MoE FFN neurons.
    pub expert: Option<usize>,
    /// Head index for attention neurons.
    pub head: Option<usize>,
    pub column: usize,
}

impl NeuronRef {
    pub fn ffn(layer: usize, expert: Option<usize>, column: usize) -> Self {
        NeuronRef {
            layer,
            kind: NeuronKind::Ffn,
            expert,
            head: None,
            column,
        }
    }

    pub fn attn(layer: usize, head: usize, column: usize) -> Self {
        NeuronRef {
            layer,
            kind: NeuronKind::Attn,
            expert: None,
            head: Some(head),
            column,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = || Err(Error::InvalidArgument(format!("neuron {self} does not exist in this model")));
        if self.layer >= cfg.layers {
            return bad();
        }
        match self.kind {
            NeuronKind::Ffn => {
                let expert_ok = match (&cfg.ffn, self.expert) {
                    (FfnConfig::Dense { .. }, None) => true,
                    (FfnConfig::Moe { experts, .. }, Some(e)) => e < *experts,
                    _ => false,
                };
                if !expert_ok || self.head.is_some() || self.column >= cfg.ffn_width() {
                    return bad();
                }
            }
            NeuronKind::Attn => {
                if self.expert.is_some() || !self.head.is_some_and(|h| h < cfg.heads) || self.column >= cfg.d_head {
                    return bad();
                }
            }
        }
        Ok(())
    }

    /// Position of this neuron in [`all_neurons`].
    pub fn flat_index(&self, cfg: &ModelConfig) -> usize {
        let per_layer = cfg.ffn_neurons_per_layer() + cfg.attn_neurons_per_layer();
        let within = match self.kind {
            NeuronKind::Ffn => self.expert.unwrap_or(0) * cfg.ffn_width() + self.column,
            NeuronKind::Attn => cfg.ffn_neurons_per_layer() + self.head.unwrap_or(0) * cfg.d_head + self.column,
        };
        self.layer * per_layer + within
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)?;
        if let Some(e) = self.expert {
            write!(f, ".e{e}")?;
        }
        if let Some(h) = self.head {
            write!(f, ".h{h}")?;
        }
        write!(f, ".{}", self.column)
    }
}

/// Every neuron of the model in canonical order.
pub fn all_neurons(cfg: &ModelConfig) -> Vec<NeuronRef> {
    let mut out = Vec::with_capacity(cfg.layers * (cfg.ffn_neurons_per_layer() + cfg.attn_neurons_per_layer()));
    for l in 0..cfg.layers {
        for e in 0..cfg.experts() {
            let expert = matches!(cfg.ffn, FfnConfig::Moe { .. }).then_some(e);
            for k in 0..cfg.ffn_width() {
                out.push(NeuronRef::ffn(l, expert, k));
            }
        }
        for j in 0..cfg.heads {
            for k in 0..cfg.d_head {
                out.push(NeuronRef::attn(l, j, k));
            }
        }
    }
    out
}

/// The neuron's fixed output direction (its subvalue).
pub fn neuron_direction<'a>(model: &'a Model, n: &NeuronRef) -> Result<&'a [f64]> {
    n.validate(&model.config)?;
    let layer = &model.params.layers[n.layer];
    Ok(match (n.kind, &layer.ffn) {
        (NeuronKind::Ffn, FfnParams::Dense(w)) => w.w2.row(n.column),
        (NeuronKind::Ffn, FfnParams::Moe { experts, .. }) => experts[n.expert.unwrap()].w2.row(n.column),
        (NeuronKind::Attn, _) => layer.heads[n.head.unwrap()].wo.row(n.column),
    })
}

fn check_position(trace: &ForwardTrace, position: usize) -> Result<()> {
    if position >= trace.tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "position {position} outside a {}-token trace",
            trace.tokens.len()
        )));
    }
    Ok(())
}

/// Scalar multiplying the neuron's direction at `position`: `gate · m_k`
/// (0 for an unselected expert) or `context_j[k]`.
pub fn neuron_coefficient(model: &Model, trace: &ForwardTrace, n: &NeuronRef, position: usize) -> Result<f64> {
    n.validate(&model.config)?;
    check_position(trace, position)?;
    let lt = &trace.layers[n.layer];
    Ok(match n.kind {
        NeuronKind::Ffn => match &lt.ffn {
            FfnTrace::Dense { act, .. } => act.get(position, n.column),
            FfnTrace::Moe { routing, .. } => routing[position]
                .route_for(n.expert.unwrap())
                .map_or(0.0, |r| r.gate * r.act[n.column]),
        },
        NeuronKind::Attn => lt.attn.heads[n.head.unwrap()].context.get(position, n.column),
    })
}

fn scaled(dir: &[f64], c: f64) -> Vec<f64> {
    dir.iter().map(|v| c * v).collect()
}

/// Output vector of an FFN or expert neuron at `position`.
pub fn ffn_neuron_output(model: &Model, trace: &ForwardTrace, n: &NeuronRef, position: usize) -> Result<Vec<f64>> {
    if n.kind != NeuronKind::Ffn {
        return Err(Error::InvalidArgument(format!("{n} is not an FFN neuron")));
    }
    let c = neuron_coefficient(model, trace, n, position)?;
    Ok(scaled(neuron_direction(model, n)?, c))
}

/// Output vector of an attention neuron at query position `position`:
/// `Σ_p α[i][p] · (h_p W^V_j)_k · W^O_j[k]`.
pub fn attn_neuron_output(model: &Model, trace: &ForwardTrace, n: &NeuronRef, position: usize) -> Result<Vec<f64>> {
    if n.kind != NeuronKind::Attn {
        return Err(Error::InvalidArgument(format!("{n} is not an attention neuron")));
    }
    let c = neuron_coefficient(model, trace, n, position)?;
    Ok(scaled(neuron_direction(model, n)?, c))
}

pub fn neuron_output(model: &Model, trace: &ForwardTrace, n: &NeuronRef, position: usize) -> Result<Vec<f64>> {
    match n.kind {
        NeuronKind::Ffn => ffn_neuron_output(model, trace, n, position),
        NeuronKind::Attn => attn_neuron_output(model, trace, n, position),
    }
}

/// Direct-effect importance: `log p(w | r + output_v) - log p(w | r)` with
/// `r` the final residual at the last position of `trace`.
pub fn neuron_importance(model: &Model, trace: &ForwardTrace, n: &NeuronRef, target: usize) -> Result<f64> {
    let pos = trace.last_position();
    let out = neuron_output(model, trace, n, pos)?;
    if out.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let r = trace.final_residual().row(pos);
    let mut shifted = r.to_vec();
    axpy(&mut shifted, 1.0, &out);
    Ok(model.unembed_logprob(&shifted, target)? - model.unembed_logprob(r, target)?)
}

/// Re-runs the last position from `(layer, site)` with `delta` added to the
/// residual stream there; earlier positions are unaffected under causal
/// attention, so their keys and values are reused from `trace`. Returns the
/// final residual at the last position.
pub fn rerun_last_position(model: &Model, trace: &ForwardTrace, layer: usize, site: Site, delta: &[f64]) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if layer >= cfg.layers || delta.len() != cfg.d_model {
        return Err(Error::InvalidArgument("injection outside the model".into()));
    }
    let last = trace.last_position();
    let lt = &trace.layers[layer];
    let mut x = match site {
        Site::AfterAttention => lt.resid_mid.row(last).to_vec(),
        Site::AfterFfn => lt.resid_out.row(last).to_vec(),
    };
    axpy(&mut x, 1.0, delta);
    let mut start = layer + 1;
    if site == Site::AfterAttention {
        ffn_step(model, layer, &mut x)?;
    }
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let dh = cfg.d_head;
    while start < cfg.layers {
        let lp = &model.params.layers[start];
        let lt = &trace.layers[start];
        let xm = Matrix::from_vec(1, x.len(), x.clone())?;
        let h = layer_norm(&xm, &lp.ln1, cfg.ln_eps).out;
        let q = h.matmul(&lp.wq)?;
        let k = h.matmul(&lp.wk)?;
        let mut out = vec![0.0; cfg.d_model];
        for (j, hp) in lp.heads.iter().enumerate() {
            let cols = j * dh..(j + 1) * dh;
            let qj = &q.row(0)[cols.clone()];
            let v_last = h.matmul(&hp.wv)?;
            let mut scores: Vec<f64> = (0..last)
                .map(|p| dot(qj, &lt.attn.k.row(p)[cols.clone()]) * scale)
                .collect();
            scores.push(dot(qj, &k.row(0)[cols.clone()]) * scale);
            let a = softmax(&scores)?;
            let mut ctx = vec![0.0; dh];
            for (p, &ap) in a.iter().enumerate() {
                let v = if p == last { v_last.row(0) } else { lt.attn.heads[j].values.row(p) };
                axpy(&mut ctx, ap, v);
            }
            for (c, &z) in ctx.iter().enumerate() {
                axpy(&mut out, z, hp.wo.row(c));
            }
        }
        axpy(&mut x, 1.0, &out);
        ffn_step(model, start, &mut x)?;
        start += 1;
    }
    Ok(x)
}

fn ffn_step(model: &Model, layer: usize, x: &mut [f64]) -> Result<()> {
    let cfg = &model.config;
    let lp = &model.params.layers[layer];
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let g = layer_norm(&xm, &lp.ln2, cfg.ln_eps).out;
    let out = match (&lp.ffn, &cfg.ffn) {
        (FfnParams::Dense(w), _) => expert_ffn(g.row(0), w, cfg.nonlinearity)?.0,
        (
            FfnParams::Moe { router, experts },
            FfnConfig::Moe {
                top_k, gate_renorm, ..
            },
        ) => moe_layer_forward(g.row(0), router, experts, *top_k, *gate_renorm, cfg.nonlinearity, None)?.0,
        _ => return Err(Error::shape("rerun_last_position", "FFN kind mismatch")),
    };
    axpy(x, 1.0, &out);
    Ok(())
}

/// Importance with the neuron's output injected at its own layer and all
/// downstream computation re-run.
pub fn neuron_importance_propagated(model: &Model, trace: &ForwardTrace, n: &NeuronRef, target: usize) -> Result<f64> {
    let pos = trace.last_position();
    let out = neuron_output(model, trace, n, pos)?;
    if out.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let site = match n.kind {
        NeuronKind::Ffn => Site::AfterFfn,
        NeuronKind::Attn => Site::AfterAttention,
    };
    let r_new = rerun_last_position(model, trace, n.layer, site, &out)?;
    let r = trace.final_residual().row(pos);
    Ok(model.unembed_logprob(&r_new, target)? - model.unembed_logprob(r, target)?)
}

/// How a layer's neuron scores are combined into one profile value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileAggregate {
    /// `Σ_v mean_I(v)`: mean over examples of the layer's summed `I`.
    #[default]
    SignedSum,
    /// Signed sum divided by the number of neurons in the layer.
    Mean,
    /// `Σ_v mean_abs_I(v)`.
    AbsSum,
}

impl fmt::Display for ProfileAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileAggregate::SignedSum => "signed-sum",
            ProfileAggregate::Mean => "mean",
            ProfileAggregate::AbsSum => "abs-sum",
        })
    }
}

impl FromStr for ProfileAggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed-sum" => Ok(ProfileAggregate::SignedSum),
            "mean" => Ok(ProfileAggregate::Mean),
            "abs-sum" => Ok(ProfileAggregate::AbsSum),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile aggregate {other:?} (signed-sum, mean, abs-sum)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub propagate: bool,
    pub aggregate: ProfileAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NeuronStats {
    pub mean_i: f64,
    pub mean_abs_i: f64,
    pub mean_pos_i: f64,
}

/// Per-checkpoint importance statistics for every neuron plus layer
/// profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub step: u64,
    pub examples: usize,
    pub aggregate: ProfileAggregate,
    /// Canonical order.
    pub neurons: Vec<NeuronRef>,
    pub stats: Vec<NeuronStats>,
    pub ffn_profile: Vec<f64>,
    pub attn_profile: Vec<f64>,
}

impl ImportanceTable {
    pub fn layers(&self) -> usize {
        self.ffn_profile.len()
    }

    /// `(neuron, stats)` pairs of one kind, in canonical order.
    pub fn scope(&self, kind: NeuronKind) -> Vec<(NeuronRef, NeuronStats)> {
        self.neurons
            .iter()
            .zip(&self.stats)
            .filter(|(n, _)| n.kind == kind)
            .map(|(n, s)| (*n, *s))
            .collect()
    }

    pub fn profile(&self, kind: NeuronKind) -> &[f64] {
        match kind {
            NeuronKind::Ffn => &self.ffn_profile,
            NeuronKind::Attn => &self.attn_profile,
        }
    }

    /// Recomputes both layer profiles from the neuron statistics.
    pub fn with_aggregate(mut self, aggregate: ProfileAggregate) -> Self {
        let (ffn, attn) = layer_profiles(&self.neurons, &self.stats, self.layers(), aggregate);
        self.ffn_profile = ffn;
        self.attn_profile = attn;
        self.aggregate = aggregate;
        self
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# examples={} aggregate={}\nstep\tlayer\tkind\texpert\thead\tcolumn\tmean_I\tmean_abs_I\tmean_pos_I\n",
            self.examples, self.aggregate
        );
        let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        for (n, st) in self.neurons.iter().zip(&self.stats) {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.step,
                n.layer,
                n.kind,
                opt(n.expert),
                opt(n.head),
                n.column,
                st.mean_i,
                st.mean_abs_i,
                st.mean_pos_i
            )
            .expect("string write");
        }
        s
    }

    pub fn profiles_tsv(&self) -> String {
        let mut s = String::from("step\tlayer\tkind\tprofile\n");
        for kind in [NeuronKind::Ffn, NeuronKind::Attn] {
            for (l, v) in self.profile(kind).iter().enumerate() {
                writeln!(s, "{}\t{l}\t{kind}\t{v}", self.step).expect("string write");
            }
        }
        s
    }

    /// Writes `<stem>.tsv` (neurons) and `<stem>.profile.tsv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.tsv")), self.to_tsv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.profile.tsv")), self.profiles_tsv().as_bytes())
    }

    /// Parses a neuron table written by [`Self::to_tsv`]; profiles are
    /// recomputed from the statistics.
    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let rec = |line: usize, message: String| Error::Record {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or_else(|| rec(1, "empty table".into()))?;
        let mut examples = None;
        let mut aggregate = ProfileAggregate::SignedSum;
        for field in meta.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("examples", v)) => examples = v.parse().ok(),
                Some(("aggregate", v)) => aggregate = v.parse()?,
                _ => {}
            }
        }
        let examples = examples.ok_or_else(|| rec(1, "missing examples= header".into()))?;
        lines.next();
        let mut step = None;
        let mut neurons = Vec::new();
        let mut stats = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(rec(i + 1, format!("expected 9 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| rec(i + 1, format!("bad integer {s:?}")));
            let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
            let real = |s: &str| s.parse::<f64>().map_err(|_| rec(i + 1, format!("bad number {s:?}")));
            let row_step: u64 = f[0].parse().map_err(|_| rec(i + 1, "bad step".into()))?;
            if *step.get_or_insert(row_step) != row_step {
                return Err(rec(i + 1, "mixed steps in one table".into()));
            }
            neurons.push(NeuronRef {
                layer: num(f[1])?,
                kind: f[2].parse()?,
                expert: opt(f[3])?,
                head: opt(f[4])?,
                column: num(f[5])?,
            });
            stats.push(NeuronStats {
                mean_i: real(f[6])?,
                mean_abs_i: real(f[7])?,
                mean_pos_i: real(f[8])?,
            });
        }
        if neurons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(rec(0, "neurons are not in canonical order".into()));
        }
        let layers = neurons.iter().map(|n| n.layer + 1).max().unwrap_or(0);
        let (ffn_profile, attn_profile) = layer_profiles(&neurons, &stats, layers, aggregate);
        Ok(ImportanceTable {
            step: step.unwrap_or(0),
            examples,
            aggregate,
            neurons,
            stats,
            ffn_profile,
            attn_profile,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&read_to_string(path)?, &path.display().to_string())
    }
}

fn layer_profiles(
    neurons: &[NeuronRef],
    stats: &[NeuronStats],
    layers: usize,
    aggregate: ProfileAggregate,
) -> (Vec<f64>, Vec<f64>) {
    let mut sums = [vec![0.0; layers], vec![0.0; layers]];
    let mut counts = [vec![0usize; layers], vec![0usize; layers]];
    for (n, s) in neurons.iter().zip(stats) {
        let k = (n.kind == NeuronKind::Attn) as usize;
        sums[k][n.layer] += match aggregate {
            ProfileAggregate::SignedSum | ProfileAggregate::Mean => s.mean_i,
            ProfileAggregate::AbsSum => s.mean_abs_i,
        };
        counts[k][n.layer] += 1;
    }
    if aggregate == ProfileAggregate::Mean {
        for k in 0..2 {
            for l in 0..layers {
                if counts[k][l] > 0 {
                    sums[k][l] /= counts[k][l] as f64;
                }
            }
        }
    }
    let [ffn, attn] = sums;
    (ffn, attn)
}

/// Per-checkpoint quantities that turn a neuron coefficient into logits.
///
/// Without a final norm, `logits(r + c·v) = logits(r) + c·(v·U)`. With it,
/// writing `r̃ = r - mean(r)` and `ṽ = v - mean(v)`,
/// `logits = ((r̃ + c·ṽ)∘γ·U) / s + β·U` with
/// `s² = var(r) + 2c·cov(r, v) + c²·var(v) + eps`.
struct LogitBasis {
    /// `ṽ∘γ·U` (or `v·U` without a final norm), one row per neuron.
    dir_logits: Matrix,
    /// Centred directions, one row per neuron (final norm only).
    centred: Matrix,
    var: Vec<f64>,
    beta_logits: Vec<f64>,
    norm: bool,
    eps: f64,
}

fn centre(v: &[f64]) -> (Vec<f64>, f64) {
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mu).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    (c, var)
}

impl LogitBasis {
    fn new(model: &Model, neurons: &[NeuronRef]) -> Result<Self> {
        let d = model.config.d_model;
        let mut dirs = Matrix::zeros(neurons.len(), d);
        let mut centred = Matrix::zeros(0, d);
        let mut var = Vec::new();
        let p = &model.params;
        let norm = p.final_norm.is_some();
        if let Some(fnorm) = &p.final_norm {
            centred = Matrix::zeros(neurons.len(), d);
            for (i, n) in neurons.iter().enumerate() {
                let (c, v) = centre(neuron_direction(model, n)?);
                for (o, (x, g)) in dirs.row_mut(i).iter_mut().zip(c.iter().zip(fnorm.gamma.as_slice())) {
                    *o = x * g;
                }
                centred.row_mut(i).copy_from_slice(&c);
                var.push(v);
            }
        } else {
            for (i, n) in neurons.iter().enumerate() {
                dirs.row_mut(i).copy_from_slice(neuron_direction(model, n)?);
            }
        }
        let beta_logits = match &p.final_norm {
            Some(fnorm) => fnorm.beta.matmul(&p.unembed)?.into_vec(),
            None => vec![0.0; model.config.vocab],
        };
        Ok(LogitBasis {
            dir_logits: dirs.matmul(&p.unembed)?,
            centred,
            var,
            beta_logits,
            norm,
            eps: model.config.ln_eps,
        })
    }
}

/// Per-example quantities for [`LogitBasis`].
struct ResidualBasis {
    /// `r̃∘γ·U` (or `r·U`).
    logits: Vec<f64>,
    centred: Vec<f64>,
    var: f64,
    base: f64,
}

fn logprob_from(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    logits[target] - max - sum.ln()
}

impl ResidualBasis {
    fn new(model: &Model, basis: &LogitBasis, r: &[f64], target: usize) -> Result<Self> {
        let p = &model.params;
        let (centred, var, logits) = match &p.final_norm {
            Some(fnorm) => {
                let (c, var) = centre(r);
                let cg: Vec<f64> = c.iter().zip(fnorm.gamma.as_slice()).map(|(x, g)| x * g).collect();
                let logits = Matrix::from_vec(1, cg.len(), cg)?.matmul(&p.unembed)?.into_vec();
                (c, var, logits)
            }
            None => {
                let logits = Matrix::from_vec(1, r.len(), r.to_vec())?.matmul(&p.unembed)?.into_vec();
                (Vec::new(), 0.0, logits)
            }
        };
        let mut rb = ResidualBasis {
            logits,
            centred,
            var,
            base: 0.0,
        };
        rb.base = rb.logprob(basis, None, target);
        Ok(rb)
    }

    /// `log p(target)` for `r + c·v_i`; `None` scores `r` alone.
    fn logprob(&self, basis: &LogitBasis, shift: Option<(usize, f64)>, target: usize) -> f64 {
        let mut logits = self.logits.clone();
        let mut inv_s = 1.0;
        if let Some((i, c)) = shift {
            axpy(&mut logits, c, basis.dir_logits.row(i));
        }
        if basis.norm {
            let (cov, var_v, c) = match shift {
                Some((i, c)) => (dot(&self.centred, basis.centred.row(i)) / self.centred.len() as f64, basis.var[i], c),
                None => (0.0, 0.0, 0.0),
            };
            inv_s = 1.0 / (self.var + 2.0 * c * cov + c * c * var_v + basis.eps).sqrt();
        }
        if basis.norm {
            for (z, b) in logits.iter_mut().zip(&basis.beta_logits) {
                *z = *z * inv_s + b;
            }
        }
        logprob_from(&logits, target)
    }

    fn importance(&self, basis: &LogitBasis, i: usize, c: f64, target: usize) -> f64 {
        if c == 0.0 {
            return 0.0;
        }
        self.logprob(basis, Some((i, c)), target) - self.base
    }
}

/// Neuron coefficients at `position`, in canonical order.
fn coefficients(model: &Model, trace: &ForwardTrace, position: usize) -> Vec<f64> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(cfg.layers * (cfg.ffn_neurons_per_layer() + cfg.attn_neurons_per_layer()));
    for lt in &trace.layers {
        match &lt.ffn {
            FfnTrace::Dense { act, .. } => out.extend_from_slice(act.row(position)),
            FfnTrace::Moe { routing, .. } => {
                let rec = &routing[position];
                for e in 0..cfg.experts() {
                    match rec.route_for(e) {
                        Some(r) => out.extend(r.act.iter().map(|m| r.gate * m)),
                        None => out.extend(std::iter::repeat_n(0.0, cfg.ffn_width())),
                    }
                }
            }
        }
        for h in &lt.attn.heads {
            out.extend_from_slice(h.context.row(position));
        }
    }
    out
}

/// Checks that neuron outputs sum to the recorded block outputs.
fn check_decomposition(model: &Model, trace: &ForwardTrace, neurons: &[NeuronRef], coeffs: &[f64], position: usize) -> Result<()> {
    let d = model.config.d_model;
    let layers = model.config.layers;
    let mut ffn = vec![vec![0.0; d]; layers];
    let mut attn = vec![vec![0.0; d]; layers];
    for (n, &c) in neurons.iter().zip(coeffs) {
        let target = match n.kind {
            NeuronKind::Ffn => &mut ffn[n.layer],
            NeuronKind::Attn => &mut attn[n.layer],
        };
        axpy(target, c, neuron_direction(model, n)?);
    }
    for (l, lt) in trace.layers.iter().enumerate() {
        let e1 = crate::numerics::max_abs_diff(&ffn[l], lt.ffn.output().row(position));
        let e2 = crate::numerics::max_abs_diff(&attn[l], lt.attn.output.row(position));
        if e1 > 1e-10 || e2 > 1e-10 {
            return Err(Error::NonFinite(format!(
                "layer {l} decomposition error: FFN {e1:e}, ATTN {e2:e}"
            )));
        }
    }
    Ok(())
}

/// Importance of every neuron (canonical order) on one prompt.
pub fn example_importances(model: &Model, prompt: &Prompt, opts: AttributionOptions) -> Result<Vec<f64>> {
    let neurons = all_neurons(&model.config);
    let basis = LogitBasis::new(model, &neurons)?;
    example_importances_with(model, &neurons, &basis, prompt, opts)
}

fn example_importances_with(
    model: &Model,
    neurons: &[NeuronRef],
    basis: &LogitBasis,
    prompt: &Prompt,
    opts: AttributionOptions,
) -> Result<Vec<f64>> {
    if prompt.target >= model.config.vocab {
        return Err(Error::InvalidArgument(format!("target {} outside vocabulary", prompt.target)));
    }
    let trace = model.forward(&prompt.tokens)?;
    let pos = trace.last_position();
    let coeffs = coefficients(model, &trace, pos);
    if cfg!(debug_assertions) {
        check_decomposition(model, &trace, neurons, &coeffs, pos)?;
    }
    if opts.propagate {
        return neurons
            .iter()
            .map(|n| neuron_importance_propagated(model, &trace, n, prompt.target))
            .collect();
    }
    let r = trace.final_residual().row(pos);
    let rb = ResidualBasis::new(model, basis, r, prompt.target)?;
    Ok(coeffs
        .iter()
        .enumerate()
        .map(|(i, &c)| rb.importance(basis, i, c, prompt.target))
        .collect())
}

/// Scores every neuron on every prompt and aggregates per neuron and per
/// layer. Prompts are processed in parallel; the reduction runs in input
/// order so the table is identical for any thread count.
pub fn attribute_checkpoint(ckpt: &Checkpoint, prompts: &[Prompt], opts: AttributionOptions) -> Result<ImportanceTable> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("attribution needs at least one example".into()));
    }
    let model = &ckpt.model;
    let neurons = all_neurons(&model.config);
    let basis = LogitBasis::new(model, &neurons)?;
    let per_example: Vec<Vec<f64>> = prompts
        .par_iter()
        .map(|p| example_importances_with(model, &neurons, &basis, p, opts))
        .collect::<Result<_>>()?;
    let mut sums = vec![NeuronStats::default(); neurons.len()];
    for imps in &per_example {
        for (s, &i) in sums.iter_mut().zip(imps) {
            if !i.is_finite() {
                return Err(Error::NonFinite(format!("importance at step {}", ckpt.step)));
            }
            s.mean_i += i;
            s.mean_abs_i += i.abs();
            s.mean_pos_i += i.max(0.0);
        }
    }
    let n = prompts.len() as f64;
    let stats: Vec<NeuronStats> = sums
        .into_iter()
        .map(|s| NeuronStats {
            mean_i: s.mean_i / n,
            mean_abs_i: s.mean_abs_i / n,
            mean_pos_i: s.mean_pos_i / n,
        })
        .collect();
    let (ffn_profile, attn_profile) = layer_profiles(&neurons, &stats, model.config.layers, opts.aggregate);
    Ok(ImportanceTable {
        step: ckpt.step,
        examples: prompts.len(),
        aggregate: opts.aggregate,
        neurons,
        stats,
        ffn_profile,
        attn_profile,
    })
}

/// `log p(target)` at the last position of a trace (used by callers that
/// compare against [`neuron_importance`]).
pub fn final_logprob(trace: &ForwardTrace, target: usize) -> Result<f64> {
    Ok(log_softmax(trace.logits.row(trace.last_position()))?[target])
}
