//! `lpilab`: command-line driver for the experiment pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpilab_core::attribution::{AttributionOptions, ProfileAggregate};
use lpilab_core::dataset::SynthSpec;
use lpilab_core::model::Arch;
use lpilab_core::pipeline::{
    self, arch_dir, AnalysisOptions, Corpus, RunConfig, CKPT_DIR, FACTS_FILE, IMPORTANCE_DIR,
};
use lpilab_core::{selftest, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lpilab", version, about = "Gated-LPI attribution and training-dynamics lab for toy dense and MoE transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic relational-facts corpus into <out>/facts.jsonl.
    GenData(GenDataArgs),
    /// Train one architecture, writing a checkpoint series.
    Train(TrainArgs),
    /// Score every neuron of every checkpoint on the corpus prompts.
    Attribute(AttributeArgs),
    /// Top-set stability, gain concentration and layer-profile metrics.
    Stability(StabilityArgs),
    /// Mask top heads and top FFN neurons and measure the HIT@10 drop.
    Ablate(AblateArgs),
    /// Verify artifact hashes and write summary.json / summary.tsv.
    Report(ReportArgs),
    /// Cross-check the main code paths against brute-force oracles.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Experiment directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    relations: usize,
    /// Subjects per relation.
    #[arg(long, default_value_t = 20)]
    entities: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ArchArg {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset file [default: <out>/facts.jsonl].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// JSON file with optional "dense"/"moe" model configs and a "train" section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Training seed (overrides train.seed from --config).
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps (overrides train.steps from --config).
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint directory [default: <out>/<arch>/ckpts].
    #[arg(long)]
    ckpts: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// Checkpoint directory [default: <out>/<arch>/ckpts].
    #[arg(long)]
    ckpts: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Output table directory [default: <out>/<arch>/importance].
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Re-run downstream layers instead of scoring the direct effect.
    #[arg(long)]
    propagate: bool,
    /// Layer-profile aggregate: signed-sum, mean or abs-sum.
    #[arg(long, default_value = "signed-sum", value_parser = parse_aggregate)]
    aggregate: ProfileAggregate,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AnalysisArgs {
    /// Top-set fraction.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    /// Keep the untrained step-0 checkpoint in the series.
    #[arg(long)]
    include_init: bool,
    /// Seed of the random-subset Jaccard baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AnalysisArgs {
    fn options(&self, top_heads: usize) -> AnalysisOptions {
        AnalysisOptions {
            fraction: self.fraction,
            top_heads,
            include_init: self.include_init,
            seed: self.seed,
            ..AnalysisOptions::default()
        }
    }
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// Importance table directory [default: <out>/<arch>/importance].
    #[arg(long)]
    tables: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    arch: ArchArg,
    /// Checkpoint directory [default: <out>/<arch>/ckpts].
    #[arg(long)]
    ckpts: Option<PathBuf>,
    /// Importance table directory [default: <out>/<arch>/importance].
    #[arg(long)]
    tables: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Number of top-ranked heads in the multi-head mask.
    #[arg(long, default_value_t = 10)]
    top_heads: usize,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Top-set fraction recorded in the summary.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse::<Arch>().map_err(|e| e.to_string())
}

fn parse_aggregate(s: &str) -> std::result::Result<ProfileAggregate, String> {
    s.parse::<ProfileAggregate>().map_err(|e| e.to_string())
}

fn data_path(data: &DataArg, out: &Path) -> PathBuf {
    data.data.clone().unwrap_or_else(|| out.join(FACTS_FILE))
}

fn or_default(given: &Option<PathBuf>, out: &Path, arch: Arch, sub: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| arch_dir(out, arch).join(sub))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => {
            let rec = pipeline::gen_data(&SynthSpec::new(a.relations, a.entities, a.seed), &a.out.out)?;
            println!(
                "{}: {} examples, vocabulary {}, sha256 {}",
                a.out.out.join(&rec.file).display(),
                rec.examples,
                rec.vocab,
                rec.sha256
            );
        }
        Command::Train(a) => {
            let out = &a.out.out;
            let mut run = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                run.train.seed = s;
            }
            if let Some(s) = a.steps {
                run.train.steps = s;
                run.train.schedule = None;
            }
            let corpus = Corpus::load(&data_path(&a.data, out))?;
            let dir = or_default(&a.ckpts, out, a.arch.arch, CKPT_DIR);
            let series = pipeline::train_arch(a.arch.arch, &corpus, &run, &dir, out)?;
            println!("{}: {} checkpoints at steps {:?}", dir.display(), series.len(), series.steps());
        }
        Command::Attribute(a) => {
            let out = &a.out.out;
            let arch = a.arch.arch;
            let corpus = Corpus::load(&data_path(&a.data, out))?;
            let series = pipeline::open_series(&or_default(&a.ckpts, out, arch, CKPT_DIR))?;
            let dir = or_default(&a.tables, out, arch, IMPORTANCE_DIR);
            let opts = AttributionOptions {
                propagate: a.propagate,
                aggregate: a.aggregate,
            };
            let tables = pipeline::attribute_series(&series, &corpus, opts, &dir, out)?;
            println!("{}: {} importance tables", dir.display(), tables.len());
        }
        Command::Stability(a) => {
            let out = &a.out.out;
            let arch = a.arch.arch;
            let (_, tables) = pipeline::load_tables(&or_default(&a.tables, out, arch, IMPORTANCE_DIR))?;
            let report = pipeline::run_stability(&tables, &a.analysis.options(10), &arch_dir(out, arch), out)?;
            for s in [&report.ffn, &report.attn] {
                println!(
                    "{arch} {}: J_stab {:.4}, mean R_t {}, rho_avg {}, sigma_rel {}",
                    s.scope,
                    s.j_stab,
                    fmt_opt(s.mean_r),
                    fmt_opt(s.consistency.rho_avg),
                    fmt_opt(s.variation.sigma_rel)
                );
            }
        }
        Command::Ablate(a) => {
            let out = &a.out.out;
            let arch = a.arch.arch;
            let corpus = Corpus::load(&data_path(&a.data, out))?;
            let series = pipeline::open_series(&or_default(&a.ckpts, out, arch, CKPT_DIR))?;
            let (index, tables) = pipeline::load_tables(&or_default(&a.tables, out, arch, IMPORTANCE_DIR))?;
            let opts = a.analysis.options(a.top_heads);
            let report = pipeline::run_ablation(&series, &index, &tables, &corpus, &opts, &arch_dir(out, arch), out)?;
            for row in report.final_rows() {
                println!(
                    "{arch} step {} {}: HIT@10 {:.4} -> {:.4} (drop {}%)",
                    row.step,
                    row.label,
                    row.overall.baseline,
                    row.overall.masked,
                    fmt_opt(row.overall.drop_pct)
                );
            }
        }
        Command::Report(a) => {
            let summary = pipeline::report(&a.out.out, a.fraction)?;
            print!("{}", summary.to_tsv());
        }
        Command::Selftest(a) => {
            let results = selftest::run_all(a.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{} {}: {} instances, max error {:.3e} (tolerance {:.0e}), {:.1}s",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.instances,
                    r.max_error,
                    r.tolerance,
                    r.seconds
                );
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::SelfCheck(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
