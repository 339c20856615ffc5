//! Slow reference implementations used by `selftest` and the acceptance
//! suite. They share no kernels with the main code paths: plain nested
//! loops over `Vec<Vec<f64>>`, full sorts instead of top-k selection, and
//! textbook formulas for every statistic.

use std::collections::HashSet;

use crate::attribution::{NeuronKind, NeuronRef};
use crate::model::{ExpertParams, FfnConfig, FfnParams, Model, Nonlinearity, NormParams};
use crate::numerics::Matrix;

type Rows = Vec<Vec<f64>>;

fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate() {
            s += xi * w.get(i, j);
        }
        *o = s;
    }
    out
}

fn norm(x: &[f64], p: &NormParams, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    (0..x.len())
        .map(|i| p.gamma.get(0, i) * (x[i] - mu) / s + p.beta.get(0, i))
        .collect()
}

fn act(z: f64, f: Nonlinearity) -> f64 {
    match f {
        Nonlinearity::Relu => z.max(0.0),
        Nonlinearity::Silu => z / (1.0 + (-z).exp()),
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn expert(x: &[f64], w: &ExpertParams, f: Nonlinearity) -> (Vec<f64>, Vec<f64>) {
    let m: Vec<f64> = vec_mat(x, &w.w1).into_iter().map(|z| act(z, f)).collect();
    (vec_mat(&m, &w.w2), m)
}

/// Selected experts and their gates, by full sort of router probabilities.
pub fn route(x: &[f64], router: &Matrix, top_k: usize, renorm: bool) -> Vec<(usize, f64)> {
    let probs = softmax(&vec_mat(x, router));
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let chosen = &order[..top_k];
    let z: f64 = if renorm { chosen.iter().map(|&e| probs[e]).sum() } else { 1.0 };
    chosen.iter().map(|&e| (e, probs[e] / z)).collect()
}

/// Per-position quantities recorded by [`forward`].
#[derive(Debug, Clone, Default)]
pub struct OracleTrace {
    /// `[layer][position]` FFN input after the second norm.
    pub ffn_in: Vec<Rows>,
    /// `[layer][position][head]` attention context vectors.
    pub context: Vec<Vec<Rows>>,
    /// `[layer][position]` attention and FFN block outputs.
    pub attn_out: Vec<Rows>,
    pub ffn_out: Vec<Rows>,
    /// Final residual stream (before the final norm).
    pub residual: Rows,
    pub logits: Rows,
}

/// Straightforward forward pass. With `zero_attention`, attention blocks
/// are evaluated but add nothing to the residual stream.
pub fn forward(model: &Model, tokens: &[usize], zero_attention: bool) -> OracleTrace {
    let cfg = &model.config;
    let p = &model.params;
    let (t_len, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head);
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| (0..d).map(|c| p.tok_embed.get(tok, c) + p.pos_embed.get(i, c)).collect())
        .collect();
    let mut tr = OracleTrace::default();
    for lp in &p.layers {
        let h: Rows = x.iter().map(|r| norm(r, &lp.ln1, cfg.ln_eps)).collect();
        let q: Rows = h.iter().map(|r| vec_mat(r, &lp.wq)).collect();
        let k: Rows = h.iter().map(|r| vec_mat(r, &lp.wk)).collect();
        let mut ctx_layer = vec![vec![Vec::new(); cfg.heads]; t_len];
        let mut attn = vec![vec![0.0; d]; t_len];
        for (j, hp) in lp.heads.iter().enumerate() {
            let v: Rows = h.iter().map(|r| vec_mat(r, &hp.wv)).collect();
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|s| (0..dh).map(|c| q[i][j * dh + c] * k[s][j * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                let ctx: Vec<f64> = (0..dh).map(|c| (0..=i).map(|s| a[s] * v[s][c]).sum()).collect();
                let o = vec_mat(&ctx, &hp.wo);
                for c in 0..d {
                    attn[i][c] += o[c];
                }
                ctx_layer[i][j] = ctx;
            }
        }
        for i in 0..t_len {
            if !zero_attention {
                for c in 0..d {
                    x[i][c] += attn[i][c];
                }
            }
        }
        let g: Rows = x.iter().map(|r| norm(r, &lp.ln2, cfg.ln_eps)).collect();
        let ffn: Rows = g
            .iter()
            .map(|r| match (&lp.ffn, &cfg.ffn) {
                (FfnParams::Dense(w), _) => expert(r, w, cfg.nonlinearity).0,
                (FfnParams::Moe { router, experts }, FfnConfig::Moe { top_k, gate_renorm, .. }) => {
                    let mut out = vec![0.0; d];
                    for (e, gate) in route(r, router, *top_k, *gate_renorm) {
                        let y = expert(r, &experts[e], cfg.nonlinearity).0;
                        for c in 0..d {
                            out[c] += gate * y[c];
                        }
                    }
                    out
                }
                _ => unreachable!("config and params disagree"),
            })
            .collect();
        for i in 0..t_len {
            for c in 0..d {
                x[i][c] += ffn[i][c];
            }
        }
        tr.ffn_in.push(g);
        tr.context.push(ctx_layer);
        tr.attn_out.push(attn);
        tr.ffn_out.push(ffn);
    }
    tr.logits = x
        .iter()
        .map(|r| {
            let z = match &p.final_norm {
                Some(n) => norm(r, n, cfg.ln_eps),
                None => r.clone(),
            };
            vec_mat(&z, &p.unembed)
        })
        .collect();
    tr.residual = x;
    tr
}

/// Output vector of one neuron at `position`, rebuilt from weights.
pub fn neuron_output(model: &Model, tr: &OracleTrace, n: &NeuronRef, position: usize) -> Vec<f64> {
    let cfg = &model.config;
    let lp = &model.params.layers[n.layer];
    let (c, dir) = match (n.kind, &lp.ffn, &cfg.ffn) {
        (NeuronKind::Attn, _, _) => {
            let j = n.head.unwrap();
            (tr.context[n.layer][position][j][n.column], lp.heads[j].wo.row(n.column))
        }
        (NeuronKind::Ffn, FfnParams::Dense(w), _) => {
            let m = expert(&tr.ffn_in[n.layer][position], w, cfg.nonlinearity).1;
            (m[n.column], w.w2.row(n.column))
        }
        (NeuronKind::Ffn, FfnParams::Moe { router, experts }, FfnConfig::Moe { top_k, gate_renorm, .. }) => {
            let e = n.expert.unwrap();
            let x = &tr.ffn_in[n.layer][position];
            let gate = route(x, router, *top_k, *gate_renorm)
                .into_iter()
                .find(|r| r.0 == e)
                .map_or(0.0, |r| r.1);
            let m = expert(x, &experts[e], cfg.nonlinearity).1;
            (gate * m[n.column], experts[e].w2.row(n.column))
        }
        _ => unreachable!("config and params disagree"),
    };
    dir.iter().map(|v| c * v).collect()
}

fn logprob(model: &Model, r: &[f64], target: usize) -> f64 {
    let p = &model.params;
    let z = match &p.final_norm {
        Some(n) => norm(r, n, model.config.ln_eps),
        None => r.to_vec(),
    };
    let logits = vec_mat(&z, &p.unembed);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logits[target] - m - logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Direct-effect importance of every neuron in `neurons` on one prompt.
pub fn importances(model: &Model, tokens: &[usize], target: usize, neurons: &[NeuronRef]) -> Vec<f64> {
    let tr = forward(model, tokens, false);
    let pos = tokens.len() - 1;
    let r = &tr.residual[pos];
    let base = logprob(model, r, target);
    neurons
        .iter()
        .map(|n| {
            let out = neuron_output(model, &tr, n, pos);
            if out.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            let shifted: Vec<f64> = r.iter().zip(&out).map(|(a, b)| a + b).collect();
            logprob(model, &shifted, target) - base
        })
        .collect()
}

/// HIT@10 by fully sorting each logit row.
pub fn hit_at_10(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut hits = 0;
    for (row, &t) in logits.iter().zip(targets) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if idx.iter().take(10).any(|&i| i == t) {
            hits += 1;
        }
    }
    hits as f64 / logits.len() as f64
}

/// Indices of the `ceil(fraction·n)` largest scores (ties to lower index),
/// by full sort.
pub fn top_indices(scores: &[f64], fraction: f64) -> HashSet<usize> {
    let k = ((fraction * scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).collect()
}

/// Mean consecutive Jaccard of the top sets of each score vector.
pub fn j_stab(series: &[Vec<f64>], fraction: f64) -> f64 {
    let sets: Vec<HashSet<usize>> = series.iter().map(|s| top_indices(s, fraction)).collect();
    let vals: Vec<f64> = sets
        .windows(2)
        .map(|w| w[0].intersection(&w[1]).count() as f64 / w[0].union(&w[1]).count() as f64)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Gain concentration between two `|I|` vectors; `None` without gains.
pub fn r_t(prev: &[f64], cur: &[f64], fraction: f64) -> Option<f64> {
    let gains: Vec<f64> = prev.iter().zip(cur).map(|(a, b)| if b > a { b - a } else { 0.0 }).collect();
    let total: f64 = gains.iter().sum();
    if total == 0.0 {
        return None;
    }
    let top = top_indices(&gains, fraction);
    let captured: f64 = (0..gains.len()).filter(|i| top.contains(i)).map(|i| gains[i]).sum();
    Some(captured / total)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n).sqrt();
    if a.iter().all(|&x| x == a[0]) || b.iter().all(|&x| x == b[0]) {
        return None;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    Some(cov / (sa * sb))
}

/// Mean pairwise Pearson correlation over non-constant profile pairs.
pub fn rho_avg(profiles: &[Vec<f64>]) -> Option<f64> {
    let mut vals = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            if let Some(r) = pearson(&profiles[i], &profiles[j]) {
                vals.push(r);
            }
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean over layers (with non-zero mean) of population std over |mean|.
pub fn sigma_rel(profiles: &[Vec<f64>]) -> Option<f64> {
    let s = profiles.len() as f64;
    let mut vals = Vec::new();
    for l in 0..profiles[0].len() {
        let mu = profiles.iter().map(|p| p[l]).sum::<f64>() / s;
        if mu == 0.0 {
            continue;
        }
        let sd = (profiles.iter().map(|p| (p[l] - mu).powi(2)).sum::<f64>() / s).sqrt();
        vals.push(sd / mu.abs());
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params};
    use crate::numerics::max_abs_diff;

    #[test]
    fn oracle_forward_matches_model() {
        for (moe, ln, seed) in [(false, true, 1), (true, false, 2), (true, true, 3)] {
            let cfg = ModelConfig {
                layers: 2,
                d_model: 6,
                heads: 2,
                d_head: 3,
                ffn: if moe {
                    FfnConfig::Moe {
                        experts: 4,
                        expert_dim: 3,
                        top_k: 2,
                        gate_renorm: seed == 2,
                    }
                } else {
                    FfnConfig::Dense { ffn_dim: 7 }
                },
                vocab: 11,
                max_seq: 5,
                nonlinearity: Nonlinearity::Silu,
                final_layernorm: ln,
                ln_eps: 1e-5,
            };
            let m = Model::new(cfg.clone(), Params::random(&cfg, seed, 0.5)).unwrap();
            let tokens = [3, 1, 4, 1, 5];
            let a = forward(&m, &tokens, false);
            let b = m.forward(&tokens).unwrap();
            for (i, row) in a.logits.iter().enumerate() {
                assert!(max_abs_diff(row, b.logits.row(i)) < 1e-10);
            }
        }
    }
}
