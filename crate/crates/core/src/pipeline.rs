//! Experiment orchestration: data generation, training of both
//! architectures, attribution of every checkpoint, stability metrics,
//! ablations and the summary report.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! <out>/facts.jsonl            dataset (JSON lines)
//! <out>/facts.spec.json        generator parameters, when synthetic
//! <out>/<arch>/ckpts/          checkpoint series (series.json, ckpt_*.glpi, loss.tsv)
//! <out>/<arch>/importance/     step_*.tsv, step_*.profile.tsv, index.json
//! <out>/<arch>/stability.json
//! <out>/<arch>/plots/          plot-ready TSV series
//! <out>/<arch>/ablation.{tsv,json}
//! <out>/summary.{json,tsv}
//! <out>/manifest.json          every artifact above with its sha256
//! ```
//!
//! Every stage registers what it wrote in `manifest.json`; `report`
//! refuses to run if any registered file is missing or has changed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_checkpoint, AttributionOptions, ImportanceTable};
use crate::dataset::{
    load_relations, render_prompt, save_relations, synth_facts, training_sentences, Prompt, RelationExample, SynthSpec,
    Tokenizer, UnknownPolicy,
};
use crate::error::{Error, Result};
use crate::intervention::{ablation_rows, standard_masks, AblationReport};
use crate::io::{read_to_string, sha256_bytes, sha256_file, write_atomic};
use crate::metrics::{compute_stability, ScopeStability, StabilityOptions, StabilityReport};
use crate::model::{Arch, ModelConfig};
use crate::training::{train, CheckpointSeries, TrainConfig, LOSS_LOG, SERIES_MANIFEST};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const FACTS_SPEC_FILE: &str = "facts.spec.json";
pub const CKPT_DIR: &str = "ckpts";
pub const IMPORTANCE_DIR: &str = "importance";
pub const INDEX_FILE: &str = "index.json";
pub const STABILITY_FILE: &str = "stability.json";
pub const PLOTS_DIR: &str = "plots";
pub const ABLATION_JSON: &str = "ablation.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_TSV: &str = "summary.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default synthetic corpus: 12 relations × 20 subjects.
pub fn default_synth_spec(seed: u64) -> SynthSpec {
    SynthSpec::new(12, 20, seed)
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn arch_dir(out: &Path, arch: Arch) -> PathBuf {
    out.join(arch.to_string())
}

// ---------------------------------------------------------------------------
// Manifest

/// Dataset provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRecord {
    pub file: String,
    pub sha256: String,
    pub examples: usize,
    pub vocab: usize,
    /// Generator parameters; absent for externally supplied data.
    pub spec: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentManifest {
    /// Hash of the dataset and the configs; identical inputs give the same id.
    pub experiment_id: String,
    pub tool_version: String,
    pub data: Option<DataRecord>,
    pub models: BTreeMap<String, ModelConfig>,
    pub train: BTreeMap<String, TrainConfig>,
    pub checkpoints: BTreeMap<String, Vec<u64>>,
    /// Path relative to the experiment directory → sha256.
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentManifest {
    pub fn load_or_default(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if path.exists() {
            from_json(&path)
        } else {
            Ok(ExperimentManifest::default())
        }
    }

    pub fn save(&mut self, out: &Path) -> Result<()> {
        self.tool_version = TOOL_VERSION.to_string();
        self.experiment_id = self.compute_id()?;
        write_atomic(&out.join(MANIFEST_FILE), &to_json(self)?)
    }

    fn compute_id(&self) -> Result<String> {
        let key = serde_json::to_string(&(
            self.data.as_ref().map(|d| &d.sha256),
            &self.models,
            &self.train,
        ))?;
        Ok(sha256_bytes(key.as_bytes())[..16].to_string())
    }

    /// Records the current hash of `path`, which must lie inside `out`.
    /// Files outside the experiment directory are recorded by absolute path.
    pub fn register(&mut self, out: &Path, path: &Path) -> Result<()> {
        let key = match path.strip_prefix(out) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => path.display().to_string(),
        };
        self.artifacts.insert(key, sha256_file(path)?);
        Ok(())
    }

    /// Drops every artifact under `prefix` (a relative directory), used
    /// before a stage rewrites that directory.
    pub fn forget_prefix(&mut self, prefix: &str) {
        let p = format!("{}/", prefix.trim_end_matches('/'));
        self.artifacts.retain(|k, _| !k.starts_with(&p));
    }

    /// Checks that every recorded artifact exists with its recorded hash.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for (rel, expected) in &self.artifacts {
            let path = if Path::new(rel).is_absolute() { PathBuf::from(rel) } else { out.join(rel) };
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(Error::HashMismatch {
                    path,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

fn update_manifest(out: &Path, f: impl FnOnce(&mut ExperimentManifest) -> Result<()>) -> Result<()> {
    let mut m = ExperimentManifest::load_or_default(out)?;
    f(&mut m)?;
    m.save(out)
}

fn register_dir(m: &mut ExperimentManifest, out: &Path, dir: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    files.sort();
    for f in files {
        m.register(out, &f)?;
    }
    Ok(())
}

fn rel_key(out: &Path, dir: &Path) -> Option<String> {
    dir.strip_prefix(out).ok().map(|r| r.to_string_lossy().replace('\\', "/"))
}

// ---------------------------------------------------------------------------
// Data

/// Loaded dataset with its tokenizer, training sentences and prompts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<RelationExample>,
    pub tokenizer: Tokenizer,
    pub sentences: Vec<Vec<usize>>,
    pub prompts: Vec<Prompt>,
    pub sha256: String,
}

impl Corpus {
    pub fn from_examples(examples: Vec<RelationExample>, sha256: String) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::MissingInput("dataset has no examples".into()));
        }
        let tokenizer = Tokenizer::from_examples(&examples);
        let sentences = training_sentences(&examples)
            .iter()
            .map(|s| tokenizer.encode(s, UnknownPolicy::Strict))
            .collect::<Result<Vec<_>>>()?;
        let prompts = examples
            .iter()
            .map(|ex| render_prompt(ex, &tokenizer))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            examples,
            tokenizer,
            sentences,
            prompts,
            sha256,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let examples = load_relations(path)?;
        Self::from_examples(examples, sha256_file(path)?)
    }

    pub fn vocab(&self) -> usize {
        self.tokenizer.vocab_size()
    }
}

/// Generates the synthetic corpus into `<out>/facts.jsonl`.
pub fn gen_data(spec: &SynthSpec, out: &Path) -> Result<DataRecord> {
    let examples = synth_facts(spec)?;
    let path = out.join(FACTS_FILE);
    save_relations(&path, &examples)?;
    write_atomic(&out.join(FACTS_SPEC_FILE), &to_json(spec)?)?;
    let corpus = Corpus::from_examples(examples, sha256_file(&path)?)?;
    let record = DataRecord {
        file: FACTS_FILE.to_string(),
        sha256: corpus.sha256.clone(),
        examples: corpus.examples.len(),
        vocab: corpus.vocab(),
        spec: Some(spec.clone()),
    };
    update_manifest(out, |m| {
        m.data = Some(record.clone());
        m.register(out, &path)?;
        m.register(out, &out.join(FACTS_SPEC_FILE))
    })?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Training

/// Contents of a `--config` file. Absent model configs fall back to the
/// default toy config for the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dense: Option<ModelConfig>,
    pub moe: Option<ModelConfig>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        from_json(path)
    }

    pub fn model_for(&self, arch: Arch, vocab: usize) -> Result<ModelConfig> {
        let given = match arch {
            Arch::Dense => &self.dense,
            Arch::Moe => &self.moe,
        };
        let cfg = given.clone().unwrap_or_else(|| ModelConfig::default_for(arch, vocab));
        if cfg.arch() != arch {
            return Err(Error::InvalidArgument(format!("config for {arch} describes a {} model", cfg.arch())));
        }
        if cfg.vocab != vocab {
            return Err(Error::InvalidArgument(format!(
                "model vocabulary {} does not match the corpus vocabulary {vocab}",
                cfg.vocab
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

/// Trains one architecture into `ckpt_dir`, replacing its previous contents.
pub fn train_arch(arch: Arch, corpus: &Corpus, run: &RunConfig, ckpt_dir: &Path, out: &Path) -> Result<CheckpointSeries> {
    let cfg = run.model_for(arch, corpus.vocab())?;
    clear_dir(ckpt_dir)?;
    log::info!("training {arch} into {}", ckpt_dir.display());
    let series = train(&cfg, &run.train, &corpus.sentences, ckpt_dir)?;
    update_manifest(out, |m| {
        if let Some(k) = rel_key(out, ckpt_dir) {
            m.forget_prefix(&k);
        }
        let key = arch.to_string();
        m.models.insert(key.clone(), cfg.clone());
        m.train.insert(key.clone(), run.train.clone());
        m.checkpoints.insert(key, series.steps());
        register_dir(m, out, ckpt_dir)
    })?;
    Ok(series)
}

// ---------------------------------------------------------------------------
// Attribution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub step: u64,
    pub checkpoint_sha256: String,
    pub table: String,
    pub table_sha256: String,
}

/// `importance/index.json`: which checkpoint and dataset each table came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceIndex {
    pub data_sha256: String,
    pub options: AttributionOptions,
    pub entries: Vec<IndexEntry>,
}

pub fn table_stem(step: u64) -> String {
    format!("step_{step:07}")
}

/// Attributes every checkpoint of `series` on the corpus prompts and writes
/// the tables and their index into `dir`.
pub fn attribute_series(
    series: &CheckpointSeries,
    corpus: &Corpus,
    opts: AttributionOptions,
    dir: &Path,
    out: &Path,
) -> Result<Vec<ImportanceTable>> {
    if series.is_empty() {
        return Err(Error::MissingInput(format!("no checkpoints in {}", series.dir.display())));
    }
    clear_dir(dir)?;
    let mut tables = Vec::with_capacity(series.len());
    let mut entries = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let ckpt = series.load(i)?;
        let table = attribute_checkpoint(&ckpt, &corpus.prompts, opts)?;
        let stem = table_stem(ckpt.step);
        table.save(dir, &stem)?;
        let file = format!("{stem}.tsv");
        entries.push(IndexEntry {
            step: ckpt.step,
            checkpoint_sha256: series.entries[i].sha256.clone(),
            table_sha256: sha256_file(&dir.join(&file))?,
            table: file,
        });
        log::info!("attributed step {} ({} neurons)", ckpt.step, table.neurons.len());
        tables.push(table);
    }
    let index = ImportanceIndex {
        data_sha256: corpus.sha256.clone(),
        options: opts,
        entries,
    };
    write_atomic(&dir.join(INDEX_FILE), &to_json(&index)?)?;
    update_manifest(out, |m| {
        if let Some(k) = rel_key(out, dir) {
            m.forget_prefix(&k);
        }
        register_dir(m, out, dir)
    })?;
    Ok(tables)
}

/// Loads the tables listed in `dir/index.json`, checking their hashes.
pub fn load_tables(dir: &Path) -> Result<(ImportanceIndex, Vec<ImportanceTable>)> {
    let index: ImportanceIndex = from_json(&dir.join(INDEX_FILE))?;
    let mut tables = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let path = dir.join(&e.table);
        let bytes = crate::io::read(&path)?;
        let actual = sha256_bytes(&bytes);
        if actual != e.table_sha256 {
            return Err(Error::HashMismatch {
                path,
                expected: e.table_sha256.clone(),
                actual,
            });
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::format(&path, "not valid UTF-8"))?;
        let table = ImportanceTable::from_tsv(&text, &path.display().to_string())?.with_aggregate(index.options.aggregate);
        if table.step != e.step {
            return Err(Error::format(&path, format!("table step {} differs from index step {}", table.step, e.step)));
        }
        tables.push(table);
    }
    Ok((index, tables))
}

/// Checks that the tables in `index` were computed from `series` on the
/// dataset with hash `data_sha256`, pairing each checkpoint with its table.
pub fn match_tables(index: &ImportanceIndex, series: &CheckpointSeries, data_sha256: &str) -> Result<Vec<(usize, usize)>> {
    if index.data_sha256 != data_sha256 {
        return Err(Error::HashMismatch {
            path: PathBuf::from(INDEX_FILE),
            expected: index.data_sha256.clone(),
            actual: data_sha256.to_string(),
        });
    }
    let mut pairs = Vec::with_capacity(index.entries.len());
    for (t, e) in index.entries.iter().enumerate() {
        let c = series
            .entries
            .iter()
            .position(|s| s.step == e.step)
            .ok_or_else(|| Error::MissingInput(format!("no checkpoint for table step {}", e.step)))?;
        if series.entries[c].sha256 != e.checkpoint_sha256 {
            return Err(Error::HashMismatch {
                path: series.path(c),
                expected: e.checkpoint_sha256.clone(),
                actual: series.entries[c].sha256.clone(),
            });
        }
        pairs.push((c, t));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Metrics and ablation

/// Knobs shared by the stability and ablation stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub fraction: f64,
    pub top_heads: usize,
    pub include_init: bool,
    pub baseline_trials: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        let s = StabilityOptions::default();
        AnalysisOptions {
            fraction: s.fraction,
            top_heads: 10,
            include_init: s.include_init,
            baseline_trials: s.baseline_trials,
            seed: s.seed,
        }
    }
}

impl AnalysisOptions {
    pub fn stability(&self) -> StabilityOptions {
        StabilityOptions {
            fraction: self.fraction,
            include_init: self.include_init,
            baseline_trials: self.baseline_trials,
            seed: self.seed,
        }
    }
}

/// Computes the stability report and writes `stability.json` and `plots/`
/// into `dir`.
pub fn run_stability(tables: &[ImportanceTable], opts: &AnalysisOptions, dir: &Path, out: &Path) -> Result<StabilityReport> {
    let report = compute_stability(tables, opts.stability())?;
    let path = dir.join(STABILITY_FILE);
    report.save_json(&path)?;
    let plots = dir.join(PLOTS_DIR);
    clear_dir(&plots)?;
    report.write_plot_data(tables, &plots)?;
    update_manifest(out, |m| {
        m.register(out, &path)?;
        if let Some(k) = rel_key(out, &plots) {
            m.forget_prefix(&k);
        }
        register_dir(m, out, &plots)
    })?;
    Ok(report)
}

/// Runs the standard masks (top-1 head, top-N heads, top-fraction FFN) on
/// every checkpoint that has a table, writing `ablation.{tsv,json}`.
pub fn run_ablation(
    series: &CheckpointSeries,
    index: &ImportanceIndex,
    tables: &[ImportanceTable],
    corpus: &Corpus,
    opts: &AnalysisOptions,
    dir: &Path,
    out: &Path,
) -> Result<AblationReport> {
    let pairs = match_tables(index, series, &corpus.sha256)?;
    let mut report = AblationReport::default();
    for (c, t) in pairs {
        let ckpt = series.load(c)?;
        let masks = standard_masks(&tables[t], opts.fraction, opts.top_heads)?;
        report
            .rows
            .extend(ablation_rows(&ckpt.model, ckpt.step, &corpus.examples, &corpus.prompts, &masks)?);
        log::info!("ablated step {}", ckpt.step);
    }
    report.save(dir)?;
    update_manifest(out, |m| {
        m.register(out, &dir.join("ablation.tsv"))?;
        m.register(out, &dir.join(ABLATION_JSON))
    })?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Report

/// Stability figures of one neuron scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeSummary {
    pub neurons: usize,
    pub top_size: usize,
    pub j_stab: f64,
    pub j_stab_early: Option<f64>,
    pub j_stab_late: Option<f64>,
    pub mean_r: Option<f64>,
    pub rho_avg: Option<f64>,
    pub sigma_rel: Option<f64>,
    pub random_baseline: f64,
}

impl ScopeSummary {
    fn from_scope(s: &ScopeStability) -> Self {
        let window = |name: &str| s.windows.iter().find(|w| w.name == name).and_then(|w| w.j_stab);
        ScopeSummary {
            neurons: s.neurons,
            top_size: s.top_size,
            j_stab: s.j_stab,
            j_stab_early: window("early"),
            j_stab_late: window("late"),
            mean_r: s.mean_r,
            rho_avg: s.consistency.rho_avg,
            sigma_rel: s.variation.sigma_rel,
            random_baseline: s.random_baseline,
        }
    }
}

/// HIT@10 drop of one mask, averaged over the analysed checkpoints (each
/// with its own mask) and at the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub mask: String,
    pub mean_drop_pct: Option<f64>,
    pub checkpoints: usize,
    pub final_drop_pct: Option<f64>,
    pub final_baseline_hit10: f64,
    pub final_masked_hit10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSummary {
    pub steps: Vec<u64>,
    pub final_loss: Option<f64>,
    pub ffn: ScopeSummary,
    pub attn: ScopeSummary,
    pub ablation: Vec<DropSummary>,
}

/// Side-by-side comparison, present when both architectures were run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Mean FFN J_stab of MoE minus that of dense.
    pub j_stab_ffn_diff: f64,
    /// Mean top-fraction FFN drop of MoE minus that of dense.
    pub ffn_drop_diff: Option<f64>,
    pub moe_more_stable: bool,
    pub moe_more_robust: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment_id: String,
    pub tool_version: String,
    pub data_sha256: Option<String>,
    pub fraction: f64,
    pub archs: BTreeMap<String, ArchSummary>,
    pub comparison: Option<Comparison>,
}

impl ArchSummary {
    pub fn ffn_mask(&self) -> Option<&DropSummary> {
        self.ablation.iter().find(|d| d.mask.ends_with("FFN"))
    }
}

fn summarize_ablation(report: &AblationReport, steps: &[u64]) -> Vec<DropSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let finals = report.final_rows();
    labels
        .into_iter()
        .map(|label| {
            let drops: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.label == label && steps.contains(&r.step))
                .filter_map(|r| r.overall.drop_pct)
                .collect();
            let last = finals.iter().find(|r| r.label == label);
            DropSummary {
                mask: label.to_string(),
                mean_drop_pct: (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64),
                checkpoints: drops.len(),
                final_drop_pct: last.and_then(|r| r.overall.drop_pct),
                final_baseline_hit10: last.map_or(0.0, |r| r.overall.baseline),
                final_masked_hit10: last.map_or(0.0, |r| r.overall.masked),
            }
        })
        .collect()
}

fn final_loss(ckpt_dir: &Path) -> Option<f64> {
    crate::training::read_loss_log(&ckpt_dir.join(LOSS_LOG)).ok()?.last().map(|r| r.1)
}

/// Summary of one architecture from its stability and ablation files.
pub fn summarize_arch(dir: &Path) -> Result<ArchSummary> {
    let stability: StabilityReport = from_json(&dir.join(STABILITY_FILE))?;
    let ablation: AblationReport = from_json(&dir.join(ABLATION_JSON))?;
    Ok(ArchSummary {
        ablation: summarize_ablation(&ablation, &stability.steps),
        steps: stability.steps,
        final_loss: final_loss(&dir.join(CKPT_DIR)),
        ffn: ScopeSummary::from_scope(&stability.ffn),
        attn: ScopeSummary::from_scope(&stability.attn),
    })
}

pub fn compare(dense: &ArchSummary, moe: &ArchSummary) -> Comparison {
    let j = moe.ffn.j_stab - dense.ffn.j_stab;
    let drop = match (moe.ffn_mask().and_then(|d| d.mean_drop_pct), dense.ffn_mask().and_then(|d| d.mean_drop_pct)) {
        (Some(m), Some(d)) => Some(m - d),
        _ => None,
    };
    Comparison {
        j_stab_ffn_diff: j,
        ffn_drop_diff: drop,
        moe_more_stable: j > 0.0,
        moe_more_robust: drop.map(|d| d < 0.0),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl Summary {
    /// Plain-text rendering in the layout of the stability, layer and
    /// ablation tables.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "# neuron-level stability (fraction {})", self.fraction).unwrap();
        writeln!(w, "arch\tscope\tj_stab\tj_stab_early\tj_stab_late\tmean_r\trandom_baseline").unwrap();
        for (arch, a) in &self.archs {
            for (scope, x) in [("FFN", &a.ffn), ("ATTN", &a.attn)] {
                writeln!(
                    w,
                    "{arch}\t{scope}\t{:.6}\t{}\t{}\t{}\t{:.6}",
                    x.j_stab,
                    opt(x.j_stab_early),
                    opt(x.j_stab_late),
                    opt(x.mean_r),
                    x.random_baseline
                )
                .unwrap();
            }
        }
        writeln!(w, "\n# layer-level stability").unwrap();
        writeln!(w, "arch\tffn_rho_avg\tffn_sigma_rel\tattn_rho_avg\tattn_sigma_rel").unwrap();
        for (arch, a) in &self.archs {
            writeln!(
                w,
                "{arch}\t{}\t{}\t{}\t{}",
                opt(a.ffn.rho_avg),
                opt(a.ffn.sigma_rel),
                opt(a.attn.rho_avg),
                opt(a.attn.sigma_rel)
            )
            .unwrap();
        }
        writeln!(w, "\n# HIT@10 drop (%) from masking").unwrap();
        writeln!(w, "arch\tmask\tmean_drop_pct\tcheckpoints\tfinal_drop_pct\tfinal_baseline\tfinal_masked").unwrap();
        for (arch, a) in &self.archs {
            for d in &a.ablation {
                writeln!(
                    w,
                    "{arch}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
                    d.mask,
                    opt(d.mean_drop_pct),
                    d.checkpoints,
                    opt(d.final_drop_pct),
                    d.final_baseline_hit10,
                    d.final_masked_hit10
                )
                .unwrap();
            }
        }
        s
    }
}

/// Verifies the manifest, then writes `summary.json` and `summary.tsv` for
/// every architecture directory that has stability and ablation results.
pub fn report(out: &Path, fraction: f64) -> Result<Summary> {
    let mut manifest = ExperimentManifest::load_or_default(out)?;
    if manifest.artifacts.is_empty() {
        return Err(Error::MissingInput(format!("no {MANIFEST_FILE} with artifacts in {}", out.display())));
    }
    manifest.verify(out)?;
    let mut archs = BTreeMap::new();
    for arch in [Arch::Dense, Arch::Moe] {
        let dir = arch_dir(out, arch);
        if dir.join(STABILITY_FILE).exists() && dir.join(ABLATION_JSON).exists() {
            archs.insert(arch.to_string(), summarize_arch(&dir)?);
        }
    }
    if archs.is_empty() {
        return Err(Error::MissingInput(format!(
            "no architecture under {} has both {STABILITY_FILE} and {ABLATION_JSON}",
            out.display()
        )));
    }
    let comparison = match (archs.get("dense"), archs.get("moe")) {
        (Some(d), Some(m)) => Some(compare(d, m)),
        _ => None,
    };
    manifest.experiment_id = manifest.compute_id()?;
    let summary = Summary {
        experiment_id: manifest.experiment_id.clone(),
        tool_version: TOOL_VERSION.to_string(),
        data_sha256: manifest.data.as_ref().map(|d| d.sha256.clone()),
        fraction,
        archs,
        comparison,
    };
    write_atomic(&out.join(SUMMARY_FILE), &to_json(&summary)?)?;
    write_atomic(&out.join(SUMMARY_TSV), summary.to_tsv().as_bytes())?;
    manifest.register(out, &out.join(SUMMARY_FILE))?;
    manifest.register(out, &out.join(SUMMARY_TSV))?;
    manifest.save(out)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Full run

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub run: RunConfig,
    pub attribution: AttributionOptions,
    pub analysis: AnalysisOptions,
    pub archs: Vec<Arch>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: default_synth_spec(7),
            run: RunConfig::default(),
            attribution: AttributionOptions::default(),
            analysis: AnalysisOptions::default(),
            archs: vec![Arch::Dense, Arch::Moe],
        }
    }
}

/// Runs every stage for every architecture into `out` and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    gen_data(&cfg.data, out)?;
    let corpus = Corpus::load(&out.join(FACTS_FILE))?;
    for &arch in &cfg.archs {
        let dir = arch_dir(out, arch);
        let series = train_arch(arch, &corpus, &cfg.run, &dir.join(CKPT_DIR), out)?;
        let tables = attribute_series(&series, &corpus, cfg.attribution, &dir.join(IMPORTANCE_DIR), out)?;
        run_stability(&tables, &cfg.analysis, &dir, out)?;
        let (index, tables) = load_tables(&dir.join(IMPORTANCE_DIR))?;
        run_ablation(&series, &index, &tables, &corpus, &cfg.analysis, &dir, out)?;
    }
    report(out, cfg.analysis.fraction)
}

/// Opens a checkpoint series, refusing an empty one.
pub fn open_series(dir: &Path) -> Result<CheckpointSeries> {
    if !dir.join(SERIES_MANIFEST).exists() && !dir.is_dir() {
        return Err(Error::MissingInput(format!("checkpoint directory {}", dir.display())));
    }
    let series = CheckpointSeries::open(dir)?;
    if series.is_empty() {
        return Err(Error::MissingInput(format!("no checkpoints in {}", dir.display())));
    }
    Ok(series)
}
