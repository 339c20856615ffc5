//! Causal masking of attention heads and FFN neurons, and the HIT@10 drop
//! it causes. Unlike direct-effect attribution, a masked forward re-runs
//! every downstream layer, so routing can shift through upstream changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{ImportanceTable, NeuronKind, NeuronRef};
use crate::dataset::{Prompt, RelationExample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{hit_at_10, target_rank, top_set};
use crate::model::{ComponentMask, ForwardOptions, ForwardTrace, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.h{}", self.layer, self.head)
    }
}

/// Heads and FFN neurons to switch off.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub heads: BTreeSet<HeadRef>,
    pub neurons: BTreeSet<NeuronRef>,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty() && self.neurons.is_empty()
    }

    pub fn all_heads(model: &Model) -> Self {
        let cfg = &model.config;
        MaskSpec {
            heads: (0..cfg.layers)
                .flat_map(|layer| (0..cfg.heads).map(move |head| HeadRef { layer, head }))
                .collect(),
            neurons: BTreeSet::new(),
        }
    }

    pub fn to_component_mask(&self, model: &Model) -> Result<ComponentMask> {
        let cfg = &model.config;
        let mut m = ComponentMask::none(cfg);
        for h in &self.heads {
            if h.layer >= cfg.layers || h.head >= cfg.heads {
                return Err(Error::InvalidArgument(format!("mask references missing head {h}")));
            }
            m.heads[h.layer][h.head] = true;
        }
        for n in &self.neurons {
            if n.kind != NeuronKind::Ffn {
                return Err(Error::InvalidArgument(format!("only FFN neurons can be masked, got {n}")));
            }
            n.validate(cfg)?;
            m.neurons[n.layer][n.expert.unwrap_or(0)][n.column] = true;
        }
        Ok(m)
    }

    /// Short human-readable listing, e.g. `heads[L1.h0] ffn[21]`.
    pub fn describe(&self) -> String {
        let heads: Vec<String> = self.heads.iter().map(ToString::to_string).collect();
        format!("heads[{}] ffn[{}]", heads.join(","), self.neurons.len())
    }
}

/// A head and its importance (sum of its columns' `mean_abs_I`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: HeadRef,
    pub score: f64,
}

/// Heads by descending importance; ties keep canonical (layer, head) order.
pub fn rank_heads(table: &ImportanceTable) -> Result<Vec<HeadScore>> {
    let mut sums: BTreeMap<HeadRef, f64> = BTreeMap::new();
    for (n, s) in table.scope(NeuronKind::Attn) {
        let key = HeadRef {
            layer: n.layer,
            head: n.head.unwrap_or(0),
        };
        *sums.entry(key).or_insert(0.0) += s.mean_abs_i;
    }
    if sums.is_empty() {
        return Err(Error::InvalidArgument("table has no attention neurons".into()));
    }
    let mut ranked: Vec<HeadScore> = sums.into_iter().map(|(head, score)| HeadScore { head, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.head.cmp(&b.head)));
    Ok(ranked)
}

/// Full forward pass with the masked components switched off.
pub fn masked_forward(tokens: &[usize], model: &Model, mask: &MaskSpec) -> Result<ForwardTrace> {
    if mask.is_empty() {
        return model.forward(tokens);
    }
    let m = mask.to_component_mask(model)?;
    model.forward_with(
        tokens,
        ForwardOptions {
            mask: Some(&m),
            injection: None,
        },
    )
}

/// Logits at the last position of every prompt under `mask`.
pub fn prompt_logits(model: &Model, prompts: &[Prompt], mask: &MaskSpec) -> Result<Vec<Vec<f64>>> {
    let cm = if mask.is_empty() { None } else { Some(mask.to_component_mask(model)?) };
    prompts
        .par_iter()
        .map(|p| {
            let tr = model.forward_with(
                &p.tokens,
                ForwardOptions {
                    mask: cm.as_ref(),
                    injection: None,
                },
            )?;
            Ok(tr.logits.row(tr.last_position()).to_vec())
        })
        .collect()
}

fn hits(model: &Model, prompts: &[Prompt], mask: &MaskSpec) -> Result<Vec<bool>> {
    let logits = prompt_logits(model, prompts, mask)?;
    let mut out = Vec::with_capacity(prompts.len());
    for (row, p) in logits.iter().zip(prompts) {
        if p.target >= row.len() {
            return Err(Error::InvalidArgument(format!("target {} outside vocabulary", p.target)));
        }
        out.push(target_rank(row, p.target) < 10);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub baseline: f64,
    pub masked: f64,
    /// `100 · (baseline − masked) / baseline`; absent when the baseline is 0.
    pub drop_pct: Option<f64>,
}

impl InterventionResult {
    pub fn new(baseline: f64, masked: f64) -> Self {
        let drop_pct = (baseline > 0.0).then(|| {
            if baseline == masked {
                0.0
            } else {
                100.0 * (baseline - masked) / baseline
            }
        });
        InterventionResult {
            baseline,
            masked,
            drop_pct,
        }
    }
}

pub fn ablation_drop(model: &Model, prompts: &[Prompt], mask: &MaskSpec) -> Result<InterventionResult> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one example".into()));
    }
    let targets: Vec<usize> = prompts.iter().map(|p| p.target).collect();
    let baseline = hit_at_10(&prompt_logits(model, prompts, &MaskSpec::default())?, &targets)?;
    let masked = if mask.is_empty() {
        baseline
    } else {
        hit_at_10(&prompt_logits(model, prompts, mask)?, &targets)?
    };
    Ok(InterventionResult::new(baseline, masked))
}

/// The three masks of the standard ablation: the most important head, the
/// `top_heads` most important heads, and the top `fraction` of FFN neurons.
pub fn standard_masks(table: &ImportanceTable, fraction: f64, top_heads: usize) -> Result<Vec<(String, MaskSpec)>> {
    if top_heads == 0 {
        return Err(Error::InvalidArgument("--top-heads must be at least 1".into()));
    }
    let ranked = rank_heads(table)?;
    let heads = |n: usize| MaskSpec {
        heads: ranked.iter().take(n).map(|h| h.head).collect(),
        neurons: BTreeSet::new(),
    };
    let ffn = MaskSpec {
        heads: BTreeSet::new(),
        neurons: top_set(table, fraction, NeuronKind::Ffn)?.members,
    };
    Ok(vec![
        ("top-1 head".to_string(), heads(1)),
        (format!("top-{top_heads} heads"), heads(top_heads)),
        (format!("top-{}% FFN", fraction * 100.0), ffn),
    ])
}

/// Result for one group of examples (all, a category, or a relation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub examples: usize,
    pub result: InterventionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub step: u64,
    pub label: String,
    pub mask: String,
    pub overall: InterventionResult,
    pub groups: Vec<GroupResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn fraction_of(flags: &[bool], idx: &[usize]) -> f64 {
    idx.iter().filter(|&&i| flags[i]).count() as f64 / idx.len() as f64
}

/// Ablates each mask on one checkpoint, with a breakdown by category and
/// by relation. `examples[i]` must be the fact behind `prompts[i]`.
pub fn ablation_rows(
    model: &Model,
    step: u64,
    examples: &[RelationExample],
    prompts: &[Prompt],
    masks: &[(String, MaskSpec)],
) -> Result<Vec<AblationRow>> {
    if prompts.is_empty() || examples.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "ablation needs matching non-empty examples and prompts ({} vs {})",
            examples.len(),
            prompts.len()
        )));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups.entry(format!("category:{}", ex.category)).or_default().push(i);
        groups.entry(format!("relation:{}", ex.relation)).or_default().push(i);
    }
    let all: Vec<usize> = (0..prompts.len()).collect();
    let base = hits(model, prompts, &MaskSpec::default())?;
    masks
        .iter()
        .map(|(label, mask)| {
            let masked = if mask.is_empty() { base.clone() } else { hits(model, prompts, mask)? };
            let result = |idx: &[usize]| InterventionResult::new(fraction_of(&base, idx), fraction_of(&masked, idx));
            Ok(AblationRow {
                step,
                label: label.clone(),
                mask: mask.describe(),
                overall: result(&all),
                groups: groups
                    .iter()
                    .map(|(g, idx)| GroupResult {
                        group: g.clone(),
                        examples: idx.len(),
                        result: result(idx),
                    })
                    .collect(),
            })
        })
        .collect()
}

impl AblationReport {
    /// Rows of the last checkpoint in the report.
    pub fn final_rows(&self) -> Vec<&AblationRow> {
        let last = self.rows.iter().map(|r| r.step).max();
        self.rows.iter().filter(|r| Some(r.step) == last).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tmask\tgroup\texamples\tbaseline_hit10\tmasked_hit10\tdrop_pct\tmask_members\n");
        let fmt_drop = |r: &InterventionResult| r.drop_pct.map_or_else(|| "NA".to_string(), |d| d.to_string());
        for row in &self.rows {
            let total: usize = row.groups.iter().filter(|g| g.group.starts_with("category:")).map(|g| g.examples).sum();
            writeln!(
                s,
                "{}\t{}\tall\t{}\t{}\t{}\t{}\t{}",
                row.step,
                row.label,
                total,
                row.overall.baseline,
                row.overall.masked,
                fmt_drop(&row.overall),
                row.mask
            )
            .expect("string write");
            for g in &row.groups {
                writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    row.step,
                    row.label,
                    g.group,
                    g.examples,
                    g.result.baseline,
                    g.result.masked,
                    fmt_drop(&g.result),
                    row.mask
                )
                .expect("string write");
            }
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("ablation.tsv"), self.to_tsv().as_bytes())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(&dir.join("ablation.json"), json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{attribute_checkpoint, AttributionOptions, NeuronStats, ProfileAggregate};
    use crate::dataset::Category;
    use crate::model::{Checkpoint, FfnConfig, FfnTrace, ModelConfig, Nonlinearity, Params};

    fn model(moe: bool, seed: u64) -> Model {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 6,
            heads: 3,
            d_head: 2,
            ffn: if moe {
                FfnConfig::Moe {
                    experts: 3,
                    expert_dim: 4,
                    top_k: 2,
                    gate_renorm: true,
                }
            } else {
                FfnConfig::Dense { ffn_dim: 8 }
            },
            vocab: 14,
            max_seq: 5,
            nonlinearity: Nonlinearity::Relu,
            final_layernorm: true,
            ln_eps: 1e-5,
        };
        Model::new(cfg.clone(), Params::random(&cfg, seed, 0.7)).unwrap()
    }

    fn prompts() -> Vec<Prompt> {
        (0..6)
            .map(|i| Prompt {
                tokens: vec![i, (i * 3 + 1) % 14, (i * 5 + 2) % 14],
                target: (i * 7 + 3) % 14,
            })
            .collect()
    }

    #[test]
    fn empty_mask_is_identity() {
        for moe in [false, true] {
            let m = model(moe, 1);
            let a = masked_forward(&[1, 2, 3], &m, &MaskSpec::default()).unwrap();
            let b = m.forward(&[1, 2, 3]).unwrap();
            assert_eq!(a.logits, b.logits);
            let r = ablation_drop(&m, &prompts(), &MaskSpec::default()).unwrap();
            if r.baseline > 0.0 {
                assert_eq!(r.drop_pct, Some(0.0));
            }
        }
    }

    #[test]
    fn explicit_empty_component_mask_is_bitwise_identical() {
        let m = model(true, 2);
        let none = ComponentMask::none(&m.config);
        let a = m
            .forward_with(&[4, 5, 6], ForwardOptions { mask: Some(&none), injection: None })
            .unwrap();
        assert_eq!(a.logits, m.forward(&[4, 5, 6]).unwrap().logits);
    }

    #[test]
    fn masking_inactive_neuron_changes_nothing() {
        let m = model(false, 3);
        let tokens = [2, 9, 4];
        let tr = m.forward(&tokens).unwrap();
        let FfnTrace::Dense { act, .. } = &tr.layers[1].ffn else { panic!() };
        // a last-layer neuron that is zero at every position cannot affect logits
        let dead = (0..8).find(|&k| (0..3).all(|p| act.get(p, k) == 0.0));
        if let Some(k) = dead {
            let mask = MaskSpec {
                heads: BTreeSet::new(),
                neurons: [NeuronRef::ffn(1, None, k)].into_iter().collect(),
            };
            assert_eq!(masked_forward(&tokens, &m, &mask).unwrap().logits, tr.logits);
        }
    }

    #[test]
    fn invalid_masks_rejected() {
        let m = model(true, 4);
        let bad_head = MaskSpec {
            heads: [HeadRef { layer: 0, head: 3 }].into_iter().collect(),
            neurons: BTreeSet::new(),
        };
        assert!(masked_forward(&[1], &m, &bad_head).is_err());
        let attn = MaskSpec {
            heads: BTreeSet::new(),
            neurons: [NeuronRef::attn(0, 0, 0)].into_iter().collect(),
        };
        assert!(masked_forward(&[1], &m, &attn).is_err());
        let dense_ref = MaskSpec {
            heads: BTreeSet::new(),
            neurons: [NeuronRef::ffn(0, None, 0)].into_iter().collect(),
        };
        assert!(masked_forward(&[1], &m, &dense_ref).is_err());
    }

    #[test]
    fn drop_convention() {
        assert_eq!(InterventionResult::new(0.8, 0.2).drop_pct, Some(75.0));
        assert_eq!(InterventionResult::new(0.0, 0.0).drop_pct, None);
        assert_eq!(InterventionResult::new(0.5, 0.75).drop_pct, Some(-50.0));
    }

    fn attn_table(scores: &[(usize, usize, f64)]) -> ImportanceTable {
        let neurons: Vec<NeuronRef> = scores.iter().map(|&(l, h, _)| NeuronRef::attn(l, h, 0)).collect();
        let stats = scores
            .iter()
            .map(|&(_, _, s)| NeuronStats {
                mean_i: s,
                mean_abs_i: s,
                mean_pos_i: s,
            })
            .collect();
        ImportanceTable {
            step: 0,
            examples: 1,
            aggregate: ProfileAggregate::SignedSum,
            neurons,
            stats,
            ffn_profile: vec![0.0; 2],
            attn_profile: vec![0.0; 2],
        }
    }

    #[test]
    fn head_ranking() {
        let t = attn_table(&[(0, 0, 0.0), (0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.9)]);
        let r: Vec<HeadRef> = rank_heads(&t).unwrap().iter().map(|h| h.head).collect();
        assert_eq!(
            r,
            vec![
                HeadRef { layer: 1, head: 1 },
                HeadRef { layer: 0, head: 1 },
                HeadRef { layer: 1, head: 0 },
                HeadRef { layer: 0, head: 0 }
            ]
        );
        assert_eq!(rank_heads(&attn_table(&[(0, 0, 0.0)])).unwrap().len(), 1);
    }

    #[test]
    fn report_rows_and_groups() {
        let m = model(true, 5);
        let ckpt = Checkpoint { step: 7, model: m.clone() };
        let table = attribute_checkpoint(&ckpt, &prompts(), AttributionOptions::default()).unwrap();
        let masks = standard_masks(&table, 0.1, 2).unwrap();
        assert_eq!(masks[0].1.heads.len(), 1);
        assert_eq!(masks[1].1.heads.len(), 2);
        assert_eq!(masks[2].1.neurons.len(), 3);
        let examples: Vec<RelationExample> = (0..6)
            .map(|i| RelationExample {
                category: if i % 2 == 0 { Category::Factual } else { Category::Bias },
                relation: format!("r{}", i % 3),
                subject: "s".into(),
                object: "o".into(),
                template: "{} is".into(),
            })
            .collect();
        let rows = ablation_rows(&m, 7, &examples, &prompts(), &masks).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].groups.len(), 5);
        for row in &rows {
            let direct = ablation_drop(&m, &prompts(), &masks.iter().find(|x| x.0 == row.label).unwrap().1).unwrap();
            assert_eq!(row.overall, direct);
        }
        let report = AblationReport { rows };
        assert_eq!(report.to_tsv().lines().count(), 1 + 3 * 6);
    }
}
