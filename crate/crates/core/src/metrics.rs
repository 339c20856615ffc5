//! Evaluation and stability metrics over checkpoint series: HIT@10,
//! top-set Jaccard stability, positive-gain concentration `R_t`, layer
//! profile consistency `ρ_avg`, cross-step variation `σ_rel`, and the
//! random-subset Jaccard baseline.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{ImportanceTable, NeuronKind, NeuronRef};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{mean, pearson_corr, population_std};

/// 0-based rank of `target` among `logits`: the number of entries with a
/// larger logit, or an equal logit and a smaller index.
pub fn target_rank(logits: &[f64], target: usize) -> usize {
    let y = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &z)| z > y || (z == y && j < target))
        .count()
}

/// Fraction of examples whose target is among the 10 highest logits.
/// With fewer than 10 vocabulary entries every target qualifies and a
/// warning is logged.
pub fn hit_at_10(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("HIT@10 over zero examples".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::shape(
            "hit_at_10",
            format!("{} logit rows for {} targets", logits.len(), targets.len()),
        ));
    }
    let mut hits = 0usize;
    let mut warned = false;
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::InvalidArgument(format!("target {t} outside a {}-entry vocabulary", row.len())));
        }
        if row.len() < 10 && !warned {
            log::warn!("vocabulary of {} < 10: HIT@10 is trivially 1", row.len());
            warned = true;
        }
        if target_rank(row, t) < 10 {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.len() as f64)
}

/// `ceil(fraction · n)`, with a small guard so that products such as
/// `0.07 · 100` are not rounded up by representation error.
pub fn top_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    Ok(((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1.min(n), n))
}

/// The `k` highest-scoring neurons; equal scores go to the canonically
/// earlier neuron.
fn top_by_score(scored: &[(NeuronRef, f64)], k: usize) -> Vec<NeuronRef> {
    let mut v: Vec<&(NeuronRef, f64)> = scored.iter().collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSet {
    pub step: u64,
    pub fraction: f64,
    pub scope: NeuronKind,
    pub members: BTreeSet<NeuronRef>,
}

/// Top `fraction` of a scope's neurons by `mean_abs_I`.
pub fn top_set(table: &ImportanceTable, fraction: f64, scope: NeuronKind) -> Result<TopSet> {
    let scored: Vec<(NeuronRef, f64)> = table.scope(scope).into_iter().map(|(n, s)| (n, s.mean_abs_i)).collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument(format!("no {scope} neurons in table")));
    }
    let k = top_count(scored.len(), fraction)?;
    Ok(TopSet {
        step: table.step,
        fraction,
        scope,
        members: top_by_score(&scored, k).into_iter().collect(),
    })
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn need_two(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::MissingInput(format!("need ≥ 2 checkpoints, got {n}")));
    }
    Ok(())
}

fn check_unit(v: f64, what: &str) -> f64 {
    assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{what} = {v} outside [0, 1]");
    v.clamp(0.0, 1.0)
}

/// Consecutive-pair Jaccard overlaps and their mean (`J_stab`).
pub fn jaccard_stability(sets: &[TopSet]) -> Result<(Vec<f64>, f64)> {
    need_two(sets.len())?;
    if sets.iter().any(|s| s.scope != sets[0].scope || s.fraction != sets[0].fraction) {
        return Err(Error::InvalidArgument("top sets differ in scope or fraction".into()));
    }
    let pairs: Vec<f64> = sets
        .windows(2)
        .map(|w| check_unit(jaccard(&w[0].members, &w[1].members), "Jaccard"))
        .collect();
    let j = check_unit(mean(&pairs), "J_stab");
    Ok((pairs, j))
}

fn same_neurons(a: &ImportanceTable, b: &ImportanceTable) -> Result<()> {
    if a.neurons != b.neurons {
        return Err(Error::InvalidArgument(format!(
            "tables at steps {} and {} describe different models",
            a.step, b.step
        )));
    }
    Ok(())
}

/// Share of the total positive `|I|` gain captured by the top `fraction`
/// of neurons ranked by that gain. `None` when no neuron gained.
pub fn positive_gain_concentration(
    prev: &ImportanceTable,
    cur: &ImportanceTable,
    fraction: f64,
    scope: NeuronKind,
) -> Result<Option<f64>> {
    same_neurons(prev, cur)?;
    let gains: Vec<(NeuronRef, f64)> = prev
        .scope(scope)
        .into_iter()
        .zip(cur.scope(scope))
        .map(|((n, p), (_, c))| (n, (c.mean_abs_i - p.mean_abs_i).max(0.0)))
        .collect();
    if gains.is_empty() {
        return Err(Error::InvalidArgument(format!("no {scope} neurons in table")));
    }
    gain_ratio(&gains, fraction)
}

fn gain_ratio(gains: &[(NeuronRef, f64)], fraction: f64) -> Result<Option<f64>> {
    let k = top_count(gains.len(), fraction)?;
    let total: f64 = gains.iter().map(|g| g.1).sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let top: BTreeSet<NeuronRef> = top_by_score(gains, k).into_iter().collect();
    let captured: f64 = gains.iter().filter(|g| top.contains(&g.0)).map(|g| g.1).sum();
    Ok(Some(check_unit(captured / total, "R_t")))
}

/// Mean pairwise Pearson correlation of layer profiles; pairs involving a
/// constant profile are excluded and listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub rho_avg: Option<f64>,
    pub pairs_used: usize,
    pub excluded_pairs: Vec<(usize, usize)>,
}

fn check_profiles(profiles: &[Vec<f64>]) -> Result<usize> {
    need_two(profiles.len())?;
    let l = profiles[0].len();
    if profiles.iter().any(|p| p.len() != l) {
        return Err(Error::shape("layer profiles", "profiles differ in length"));
    }
    if profiles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer profile".into()));
    }
    Ok(l)
}

pub fn layer_consistency(profiles: &[Vec<f64>]) -> Result<Consistency> {
    let l = check_profiles(profiles)?;
    if l < 2 {
        return Err(Error::InvalidArgument("layer consistency needs at least 2 layers".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for a in 0..profiles.len() {
        for b in a + 1..profiles.len() {
            match pearson_corr(&profiles[a], &profiles[b]) {
                Ok(r) => {
                    sum += r;
                    used += 1;
                }
                Err(Error::Degenerate(_)) => excluded.push((a, b)),
                Err(e) => return Err(e),
            }
        }
    }
    let rho_avg = (used > 0).then(|| {
        let r = sum / used as f64;
        assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r), "ρ_avg = {r}");
        r.clamp(-1.0, 1.0)
    });
    Ok(Consistency {
        rho_avg,
        pairs_used: used,
        excluded_pairs: excluded,
    })
}

/// Mean over layers of `σ_l / |μ_l|` across steps; layers with `μ_l == 0`
/// are excluded and listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub sigma_rel: Option<f64>,
    pub excluded_layers: Vec<usize>,
}

pub fn cross_step_cv(profiles: &[Vec<f64>]) -> Result<Variation> {
    let l = check_profiles(profiles)?;
    let mut ratios = Vec::with_capacity(l);
    let mut excluded = Vec::new();
    for layer in 0..l {
        let series: Vec<f64> = profiles.iter().map(|p| p[layer]).collect();
        let mu = mean(&series);
        if mu == 0.0 {
            excluded.push(layer);
            continue;
        }
        ratios.push(population_std(&series) / mu.abs());
    }
    let sigma_rel = (!ratios.is_empty()).then(|| mean(&ratios));
    if let Some(s) = sigma_rel {
        assert!(s >= 0.0, "σ_rel = {s}");
    }
    Ok(Variation {
        sigma_rel,
        excluded_layers: excluded,
    })
}

/// Mean Jaccard of two independent uniform subsets of size
/// `ceil(fraction · n)`; trial `i` draws from its own ChaCha8 stream.
pub fn random_jaccard_baseline(n: usize, fraction: f64, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 || n == 0 {
        return Err(Error::InvalidArgument("baseline needs n ≥ 1 and trials ≥ 1".into()));
    }
    let k = top_count(n, fraction)?;
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let a: BTreeSet<usize> = sample(&mut rng, n, k).into_iter().collect();
        let b: BTreeSet<usize> = sample(&mut rng, n, k).into_iter().collect();
        total += jaccard(&a, &b);
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    pub fraction: f64,
    /// Keep the untrained step-0 checkpoint in the series.
    pub include_init: bool,
    pub baseline_trials: usize,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            fraction: 0.01,
            include_init: false,
            baseline_trials: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub from: u64,
    pub to: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepValue {
    pub step: u64,
    /// Absent when the statistic is undefined at this step.
    pub value: Option<f64>,
}

/// Means restricted to a step range. The early and late windows are the
/// first 12% of training and 17%–100% of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub name: String,
    pub start: u64,
    pub end: u64,
    pub j_stab: Option<f64>,
    pub mean_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeStability {
    pub scope: NeuronKind,
    pub neurons: usize,
    pub top_size: usize,
    pub jaccard: Vec<PairValue>,
    pub j_stab: f64,
    pub gains: Vec<StepValue>,
    pub mean_r: Option<f64>,
    pub consistency: Consistency,
    pub variation: Variation,
    pub random_baseline: f64,
    pub windows: Vec<WindowStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub options: StabilityOptions,
    pub steps: Vec<u64>,
    pub ffn: ScopeStability,
    pub attn: ScopeStability,
}

impl StabilityReport {
    pub fn scope(&self, kind: NeuronKind) -> &ScopeStability {
        match kind {
            NeuronKind::Ffn => &self.ffn,
            NeuronKind::Attn => &self.attn,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    /// Plot-ready series: `jaccard_<scope>.tsv` (pair end step vs overlap),
    /// `gain_<scope>.tsv` (step vs `R_t`, `NA` when undefined) and
    /// `profile_<scope>.tsv` (step by layer).
    pub fn write_plot_data(&self, tables: &[ImportanceTable], dir: &Path) -> Result<()> {
        for st in [&self.ffn, &self.attn] {
            let tag = st.scope.to_string().to_lowercase();
            let mut j = String::from("from_step\tstep\tjaccard\n");
            for p in &st.jaccard {
                writeln!(j, "{}\t{}\t{}", p.from, p.to, p.value).expect("string write");
            }
            write_atomic(&dir.join(format!("jaccard_{tag}.tsv")), j.as_bytes())?;
            let mut g = String::from("step\tgain_concentration\n");
            for v in &st.gains {
                let val = v.value.map_or_else(|| "NA".to_string(), |x| x.to_string());
                writeln!(g, "{}\t{val}", v.step).expect("string write");
            }
            write_atomic(&dir.join(format!("gain_{tag}.tsv")), g.as_bytes())?;
            let mut p = String::from("step");
            let layers = tables.first().map_or(0, |t| t.layers());
            for l in 0..layers {
                write!(p, "\tlayer{l}").expect("string write");
            }
            p.push('\n');
            for t in tables.iter().filter(|t| self.steps.contains(&t.step)) {
                write!(p, "{}", t.step).expect("string write");
                for v in t.profile(st.scope) {
                    write!(p, "\t{v}").expect("string write");
                }
                p.push('\n');
            }
            write_atomic(&dir.join(format!("profile_{tag}.tsv")), p.as_bytes())?;
        }
        Ok(())
    }
}

fn windows(steps: &[u64], jaccard: &[PairValue], gains: &[StepValue]) -> Vec<WindowStats> {
    let last = *steps.last().unwrap_or(&0) as f64;
    let bounds = [("early", 0.0, 0.12), ("late", 0.17, 1.0)];
    bounds
        .iter()
        .map(|&(name, a, b)| {
            let (start, end) = ((a * last).ceil() as u64, (b * last).floor() as u64);
            let inside = |s: u64| s >= start && s <= end;
            let js: Vec<f64> = jaccard
                .iter()
                .filter(|p| inside(p.from) && inside(p.to))
                .map(|p| p.value)
                .collect();
            let rs: Vec<f64> = gains.iter().filter(|g| inside(g.step)).filter_map(|g| g.value).collect();
            WindowStats {
                name: name.to_string(),
                start,
                end,
                j_stab: (!js.is_empty()).then(|| mean(&js)),
                mean_r: (!rs.is_empty()).then(|| mean(&rs)),
            }
        })
        .collect()
}

fn scope_stability(tables: &[&ImportanceTable], kind: NeuronKind, opts: &StabilityOptions) -> Result<ScopeStability> {
    let sets: Vec<TopSet> = tables
        .iter()
        .map(|t| top_set(t, opts.fraction, kind))
        .collect::<Result<_>>()?;
    let (pairs, j_stab) = jaccard_stability(&sets)?;
    let jaccard: Vec<PairValue> = tables
        .windows(2)
        .zip(&pairs)
        .map(|(w, &value)| PairValue {
            from: w[0].step,
            to: w[1].step,
            value,
        })
        .collect();
    let gains: Vec<StepValue> = tables
        .windows(2)
        .map(|w| {
            Ok(StepValue {
                step: w[1].step,
                value: positive_gain_concentration(w[0], w[1], opts.fraction, kind)?,
            })
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = gains.iter().filter_map(|g| g.value).collect();
    let profiles: Vec<Vec<f64>> = tables.iter().map(|t| t.profile(kind).to_vec()).collect();
    let consistency = if profiles[0].len() >= 2 {
        layer_consistency(&profiles)?
    } else {
        Consistency {
            rho_avg: None,
            pairs_used: 0,
            excluded_pairs: Vec::new(),
        }
    };
    let neurons = tables[0].scope(kind).len();
    let steps: Vec<u64> = tables.iter().map(|t| t.step).collect();
    Ok(ScopeStability {
        scope: kind,
        neurons,
        top_size: sets[0].members.len(),
        windows: windows(&steps, &jaccard, &gains),
        jaccard,
        j_stab,
        gains,
        mean_r: (!defined.is_empty()).then(|| mean(&defined)),
        consistency,
        variation: cross_step_cv(&profiles)?,
        random_baseline: random_jaccard_baseline(neurons, opts.fraction, opts.baseline_trials, opts.seed)?,
    })
}

/// Stability metrics over a step-ordered series of importance tables.
pub fn compute_stability(tables: &[ImportanceTable], opts: StabilityOptions) -> Result<StabilityReport> {
    let used: Vec<&ImportanceTable> = tables.iter().filter(|t| opts.include_init || t.step > 0).collect();
    need_two(used.len())?;
    if used.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::InvalidArgument("importance tables must have strictly increasing steps".into()));
    }
    for w in used.windows(2) {
        same_neurons(w[0], w[1])?;
    }
    Ok(StabilityReport {
        options: opts,
        steps: used.iter().map(|t| t.step).collect(),
        ffn: scope_stability(&used, NeuronKind::Ffn, &opts)?,
        attn: scope_stability(&used, NeuronKind::Attn, &opts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{NeuronStats, ProfileAggregate};

    fn ffn(i: usize) -> NeuronRef {
        NeuronRef::ffn(0, None, i)
    }

    fn set(step: u64, ids: &[usize]) -> TopSet {
        TopSet {
            step,
            fraction: 0.04,
            scope: NeuronKind::Ffn,
            members: ids.iter().map(|&i| ffn(i)).collect(),
        }
    }

    fn table(step: u64, abs: &[f64]) -> ImportanceTable {
        let neurons: Vec<NeuronRef> = (0..abs.len()).map(ffn).collect();
        let stats = abs
            .iter()
            .map(|&a| NeuronStats {
                mean_i: a,
                mean_abs_i: a,
                mean_pos_i: a,
            })
            .collect();
        ImportanceTable {
            step,
            examples: 1,
            aggregate: ProfileAggregate::SignedSum,
            neurons,
            stats,
            ffn_profile: vec![abs.iter().sum()],
            attn_profile: vec![0.0],
        }
    }

    #[test]
    fn hit_at_10_cases() {
        // target j of this row has rank j
        let row = |_: usize| (0..20).map(|j| -(j as f64)).collect::<Vec<f64>>();
        assert_eq!(hit_at_10(&[row(0), row(0)], &[0, 0]).unwrap(), 1.0);
        assert_eq!(hit_at_10(&[row(10)], &[10]).unwrap(), 0.0);
        let got = hit_at_10(&[row(0), row(9), row(10)], &[0, 9, 10]).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
        // ties go to the lower index
        let flat = vec![0.0; 12];
        assert_eq!(hit_at_10(std::slice::from_ref(&flat), &[9]).unwrap(), 1.0);
        assert_eq!(hit_at_10(&[flat], &[10]).unwrap(), 0.0);
        assert_eq!(hit_at_10(&[vec![0.0, 1.0, 2.0]], &[0]).unwrap(), 1.0);
        assert!(hit_at_10(&[], &[]).is_err());
    }

    #[test]
    fn top_set_cases() {
        let mut abs = vec![0.0; 100];
        abs[37] = 2.0;
        abs[5] = 1.0;
        let t = table(1, &abs);
        let s = top_set(&t, 0.01, NeuronKind::Ffn).unwrap();
        assert_eq!(s.members.iter().copied().collect::<Vec<_>>(), vec![ffn(37)]);
        let eq = top_set(&table(1, &[1.0; 10]), 0.3, NeuronKind::Ffn).unwrap();
        assert_eq!(eq.members.iter().copied().collect::<Vec<_>>(), vec![ffn(0), ffn(1), ffn(2)]);
        assert_eq!(top_count(100, 0.07).unwrap(), 7);
        assert_eq!(top_count(2048, 0.01).unwrap(), 21);
        assert!(top_set(&t, 0.0, NeuronKind::Ffn).is_err());
        assert!(top_set(&t, 1.5, NeuronKind::Ffn).is_err());
        assert!(top_set(&t, 0.1, NeuronKind::Attn).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let (pairs, j) = jaccard_stability(&[set(1, &[1, 2, 3, 4]), set(2, &[3, 4, 5, 6]), set(3, &[5, 6, 7, 8])]).unwrap();
        assert_eq!(pairs, vec![1.0 / 3.0, 1.0 / 3.0]);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_stability(&[set(1, &[1]), set(2, &[1])]).unwrap().1, 1.0);
        assert_eq!(jaccard_stability(&[set(1, &[1]), set(2, &[2])]).unwrap().1, 0.0);
        let err = jaccard_stability(&[set(1, &[1])]).unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 checkpoints"));
    }

    #[test]
    fn gain_cases() {
        let prev = table(1, &[0.0; 100]);
        let mut cur = vec![0.0; 100];
        cur[5] = 0.3;
        assert_eq!(positive_gain_concentration(&prev, &table(2, &cur), 0.01, NeuronKind::Ffn).unwrap(), Some(1.0));
        let r = positive_gain_concentration(&prev, &table(2, &[0.5; 100]), 0.01, NeuronKind::Ffn).unwrap().unwrap();
        assert!((r - 0.01).abs() < 1e-15);
        let mut g = vec![0.0; 100];
        g[..4].copy_from_slice(&[5.0, 3.0, 1.0, 1.0]);
        let r = positive_gain_concentration(&prev, &table(2, &g), 0.02, NeuronKind::Ffn).unwrap().unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        // only losses: undefined
        assert_eq!(positive_gain_concentration(&table(2, &g), &prev, 0.02, NeuronKind::Ffn).unwrap(), None);
    }

    #[test]
    fn consistency_cases() {
        let c = layer_consistency(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!((c.rho_avg.unwrap() - 1.0).abs() < 1e-15);
        let c = layer_consistency(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        assert!((c.rho_avg.unwrap() + 1.0).abs() < 1e-15);
        let c = layer_consistency(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 3.0, 2.0]]).unwrap();
        assert!((c.rho_avg.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let c = layer_consistency(&[vec![1.0, 2.0, 3.0], vec![2.0; 3], vec![3.0, 5.0, 9.0]]).unwrap();
        assert_eq!(c.excluded_pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(c.pairs_used, 1);
        let c = layer_consistency(&[vec![2.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!(c.rho_avg, None);
    }

    #[test]
    fn variation_cases() {
        assert_eq!(cross_step_cv(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap().sigma_rel, Some(0.0));
        let v = cross_step_cv(&[vec![1.0], vec![3.0]]).unwrap();
        assert!((v.sigma_rel.unwrap() - 0.5).abs() < 1e-15);
        let a = cross_step_cv(&[vec![1.0, -4.0], vec![3.0, -1.0], vec![2.5, -2.0]]).unwrap();
        let b = cross_step_cv(&[vec![7.0, -28.0], vec![21.0, -7.0], vec![17.5, -14.0]]).unwrap();
        assert!((a.sigma_rel.unwrap() - b.sigma_rel.unwrap()).abs() < 1e-12);
        let z = cross_step_cv(&[vec![1.0, -1.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(z.excluded_layers, vec![1]);
        assert!((z.sigma_rel.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_baseline_cases() {
        assert_eq!(random_jaccard_baseline(50, 1.0, 5, 3).unwrap(), 1.0);
        let m = random_jaccard_baseline(10_000, 0.01, 1000, 0).unwrap();
        assert!((m - 0.005).abs() < 0.002, "{m}");
        let half = random_jaccard_baseline(200, 0.5, 20_000, 1).unwrap();
        assert!((half - 1.0 / 3.0).abs() < 0.005, "{half}");
        assert_eq!(random_jaccard_baseline(300, 0.1, 10, 9).unwrap(), random_jaccard_baseline(300, 0.1, 10, 9).unwrap());
        assert!(random_jaccard_baseline(10, 0.1, 0, 0).is_err());
    }

    #[test]
    fn stability_report_over_series() {
        let tables: Vec<ImportanceTable> = (0..6u64)
            .map(|s| {
                let abs: Vec<f64> = (0..50).map(|i| ((i * 7 + s as usize * 13) % 50) as f64 * 0.01 + s as f64).collect();
                let mut t = table(s * 100, &abs);
                t.ffn_profile = vec![1.0 + s as f64, 2.0 - s as f64 * 0.1];
                t.attn_profile = vec![0.5, 0.25 * s as f64];
                t.neurons.iter_mut().skip(40).for_each(|n| *n = NeuronRef::attn(0, 0, n.column));
                t
            })
            .collect();
        let r = compute_stability(&tables, StabilityOptions { baseline_trials: 10, ..Default::default() }).unwrap();
        assert_eq!(r.steps, vec![100, 200, 300, 400, 500]);
        assert_eq!(r.ffn.jaccard.len(), 4);
        assert_eq!(r.ffn.neurons, 40);
        assert_eq!(r.attn.neurons, 10);
        assert_eq!(r.ffn.consistency.rho_avg.map(|v| (v - 1.0).abs() < 1e-12), Some(true));
        assert_eq!(r.windows_names(), vec!["early", "late"]);
        let single = compute_stability(&tables[..2], StabilityOptions::default()).unwrap_err();
        assert!(single.to_string().contains("need ≥ 2 checkpoints"));
        assert_eq!(single.exit_code(), 2);
    }

    impl StabilityReport {
        fn windows_names(&self) -> Vec<String> {
            self.ffn.windows.iter().map(|w| w.name.clone()).collect()
        }
    }
}
