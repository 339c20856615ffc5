//! Randomised cross-checks of the main code paths against the brute-force
//! implementations in [`crate::oracle`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attribution::{
    all_neurons, example_importances, neuron_output, AttributionOptions, ImportanceTable, NeuronKind, NeuronRef,
    NeuronStats, ProfileAggregate,
};
use crate::dataset::Prompt;
use crate::error::Result;
use crate::intervention::{ablation_drop, prompt_logits, MaskSpec};
use crate::metrics::{
    cross_step_cv, hit_at_10, jaccard_stability, layer_consistency, positive_gain_concentration, top_set,
};
use crate::model::{FfnConfig, Model, ModelConfig, Nonlinearity, Params};
use crate::numerics::max_abs_diff;
use crate::oracle;
use crate::training::grad_check;

/// Outcome of one family of checks.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn finish(name: &str, instances: usize, max_error: f64, tolerance: f64, t0: Instant) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        instances,
        max_error,
        tolerance,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// A random model config with every dimension at most 16.
pub fn random_config(rng: &mut ChaCha8Rng, moe: bool) -> ModelConfig {
    let heads = rng.gen_range(1..=4);
    let d_head = rng.gen_range(if heads == 1 { 2 } else { 1 }..=16 / heads);
    let ffn = if moe {
        let experts = rng.gen_range(2..=6);
        FfnConfig::Moe {
            experts,
            expert_dim: rng.gen_range(1..=16),
            top_k: rng.gen_range(1..=experts),
            gate_renorm: rng.gen_bool(0.5),
        }
    } else {
        FfnConfig::Dense {
            ffn_dim: rng.gen_range(1..=16),
        }
    };
    ModelConfig {
        layers: rng.gen_range(1..=3),
        d_model: heads * d_head,
        heads,
        d_head,
        ffn,
        vocab: rng.gen_range(2..=16),
        max_seq: rng.gen_range(1..=8),
        nonlinearity: if rng.gen_bool(0.5) { Nonlinearity::Silu } else { Nonlinearity::Relu },
        final_layernorm: rng.gen_bool(0.5),
        ln_eps: 1e-5,
    }
}

fn random_model(rng: &mut ChaCha8Rng, moe: bool) -> Result<Model> {
    let cfg = random_config(rng, moe);
    let params = Params::random(&cfg, rng.gen(), 0.5);
    Model::new(cfg, params)
}

fn random_tokens(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<usize> {
    let len = rng.gen_range(1..=cfg.max_seq);
    (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect()
}

/// Sum of every neuron's output in a block against that block's output,
/// both as traced by the model and as recomputed by the oracle.
pub fn decomposition(configs: usize, seed: u64) -> Result<CheckResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..configs {
        let model = random_model(&mut rng, i % 2 == 1)?;
        let cfg = &model.config;
        let tokens = random_tokens(&mut rng, cfg);
        let trace = model.forward(&tokens)?;
        let otr = oracle::forward(&model, &tokens, false);
        let neurons = all_neurons(cfg);
        for pos in 0..tokens.len() {
            let mut ffn = vec![vec![0.0; cfg.d_model]; cfg.layers];
            let mut attn = vec![vec![0.0; cfg.d_model]; cfg.layers];
            for n in &neurons {
                let out = neuron_output(&model, &trace, n, pos)?;
                let acc = match n.kind {
                    NeuronKind::Ffn => &mut ffn[n.layer],
                    NeuronKind::Attn => &mut attn[n.layer],
                };
                for (a, v) in acc.iter_mut().zip(&out) {
                    *a += v;
                }
            }
            for (l, lt) in trace.layers.iter().enumerate() {
                worst = worst
                    .max(max_abs_diff(&ffn[l], lt.ffn.output().row(pos)))
                    .max(max_abs_diff(&attn[l], lt.attn.output.row(pos)))
                    .max(max_abs_diff(&ffn[l], &otr.ffn_out[l][pos]))
                    .max(max_abs_diff(&attn[l], &otr.attn_out[l][pos]));
            }
        }
    }
    Ok(finish("decomposition", configs, worst, 1e-10, t0))
}

/// Fast-path direct-effect importances against the oracle's per-neuron
/// full unembedding.
pub fn importance(configs: usize, seed: u64) -> Result<CheckResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..configs {
        let model = random_model(&mut rng, i % 2 == 1)?;
        let tokens = random_tokens(&mut rng, &model.config);
        let target = rng.gen_range(0..model.config.vocab);
        let fast = example_importances(
            &model,
            &Prompt {
                tokens: tokens.clone(),
                target,
            },
            AttributionOptions::default(),
        )?;
        let slow = oracle::importances(&model, &tokens, target, &all_neurons(&model.config));
        worst = worst.max(max_abs_diff(&fast, &slow));
    }
    Ok(finish("importance", configs, worst, 1e-10, t0))
}

fn diff_opt(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Scores drawn from a few levels so that ties are common.
fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let tied = rng.gen_bool(0.3);
    (0..n)
        .map(|_| {
            if tied {
                rng.gen_range(0..4) as f64 * 0.25
            } else {
                rng.gen::<f64>()
            }
        })
        .collect()
}

fn table_from_scores(step: u64, layers: usize, per_layer: usize, scores: &[f64]) -> ImportanceTable {
    let neurons: Vec<NeuronRef> = (0..layers)
        .flat_map(|l| (0..per_layer).map(move |c| NeuronRef::ffn(l, None, c)))
        .collect();
    let stats = scores
        .iter()
        .map(|&s| NeuronStats {
            mean_i: s,
            mean_abs_i: s,
            mean_pos_i: s,
        })
        .collect();
    ImportanceTable {
        step,
        examples: 1,
        aggregate: ProfileAggregate::SignedSum,
        neurons,
        stats,
        ffn_profile: vec![0.0; layers],
        attn_profile: vec![0.0; layers],
    }
}

/// J_stab, R_t, ρ_avg, σ_rel and HIT@10 against the oracle on random
/// instances (≤ 50 neurons, ≤ 6 checkpoints, ≤ 20-token vocabulary).
pub fn metrics(instances: usize, seed: u64) -> Result<CheckResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let layers = rng.gen_range(1..=5);
        let per_layer = rng.gen_range(1..=50 / layers);
        let n = layers * per_layer;
        let steps = rng.gen_range(2..=6);
        let fraction = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0][rng.gen_range(0..6)];
        let series: Vec<Vec<f64>> = (0..steps).map(|_| random_scores(&mut rng, n)).collect();
        let tables: Vec<ImportanceTable> = series
            .iter()
            .enumerate()
            .map(|(t, s)| table_from_scores(t as u64, layers, per_layer, s))
            .collect();

        let sets = tables
            .iter()
            .map(|t| top_set(t, fraction, NeuronKind::Ffn))
            .collect::<Result<Vec<_>>>()?;
        let (_, j) = jaccard_stability(&sets)?;
        worst = worst.max((j - oracle::j_stab(&series, fraction)).abs());

        for w in 0..steps - 1 {
            let r = positive_gain_concentration(&tables[w], &tables[w + 1], fraction, NeuronKind::Ffn)?;
            worst = worst.max(diff_opt(r, oracle::r_t(&series[w], &series[w + 1], fraction)));
        }

        let profile_len = rng.gen_range(2..=6);
        let profiles: Vec<Vec<f64>> = (0..steps)
            .map(|_| {
                let mut p = random_scores(&mut rng, profile_len);
                if rng.gen_bool(0.5) {
                    p.iter_mut().for_each(|v| *v -= 0.5);
                }
                p
            })
            .collect();
        worst = worst.max(diff_opt(layer_consistency(&profiles)?.rho_avg, oracle::rho_avg(&profiles)));
        worst = worst.max(diff_opt(cross_step_cv(&profiles)?.sigma_rel, oracle::sigma_rel(&profiles)));

        let vocab = rng.gen_range(10..=20);
        let rows = rng.gen_range(1..=8);
        let logits: Vec<Vec<f64>> = (0..rows).map(|_| random_scores(&mut rng, vocab)).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
        worst = worst.max((hit_at_10(&logits, &targets)? - oracle::hit_at_10(&logits, &targets)).abs());
    }
    Ok(finish("metrics", instances, worst, 1e-12, t0))
}

/// Analytic against central-difference gradients on tiny dense and MoE
/// models; the error is the maximum relative error.
pub fn gradients(seed: u64) -> Result<CheckResult> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, moe) in [false, true].into_iter().enumerate() {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_head: 4,
            ffn: if moe {
                FfnConfig::Moe {
                    experts: 4,
                    expert_dim: 6,
                    top_k: 2,
                    gate_renorm: true,
                }
            } else {
                FfnConfig::Dense { ffn_dim: 12 }
            },
            vocab: 10,
            max_seq: 5,
            nonlinearity: Nonlinearity::Silu,
            final_layernorm: true,
            ln_eps: 1e-5,
        };
        let report = grad_check(&cfg, 24, seed.wrapping_add(i as u64))?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    Ok(finish("gradients", checked, worst, 1e-4, t0))
}

/// Empty mask gives a drop of exactly zero; masking every head matches the
/// oracle forward with attention zeroed.
pub fn intervention(configs: usize, seed: u64) -> Result<CheckResult> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..configs {
        let model = random_model(&mut rng, i % 2 == 1)?;
        let prompts: Vec<Prompt> = (0..4)
            .map(|_| Prompt {
                tokens: random_tokens(&mut rng, &model.config),
                target: rng.gen_range(0..model.config.vocab),
            })
            .collect();
        let empty = ablation_drop(&model, &prompts, &MaskSpec::default())?;
        if empty.drop_pct.is_some_and(|d| d != 0.0) {
            worst = f64::INFINITY;
        }
        let masked = prompt_logits(&model, &prompts, &MaskSpec::all_heads(&model))?;
        for (row, p) in masked.iter().zip(&prompts) {
            let o = oracle::forward(&model, &p.tokens, true);
            worst = worst.max(max_abs_diff(row, o.logits.last().expect("non-empty prompt")));
        }
    }
    Ok(finish("intervention", configs, worst, 1e-10, t0))
}

/// The full suite with the sizes used by the `selftest` command.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        decomposition(100, seed)?,
        importance(50, seed)?,
        metrics(500, seed)?,
        gradients(seed)?,
        intervention(50, seed)?,
    ])
}
