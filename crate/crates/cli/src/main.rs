//! Operator surface for the anchoring laboratory: corpus generation,
//! retrieval inspection, task-vector extraction, pipeline runs, ablation
//! grids, injection sweeps, and report emission.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 data/artifact errors,
//! 4 numeric degeneracy.

mod config;

use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use anchorlab::corpus::{generate, load_corpus, write_corpus, CorpusSpec};
use anchorlab::error::{Error, Result};
use anchorlab::intervention::extract_task_vectors;
use anchorlab::model::{init_model, ModelConfig};
use anchorlab::pipelines::{run_ablation_grid, GridCell, RunContext, RunOptions};
use anchorlab::prompt::{assemble_anchored, assemble_icl, assemble_sub_sequence, Vocab};
use anchorlab::retrieval::{
    build_main_set, build_sub_set, embed_demo, CriterionId, Demo, DemoId, DemoPool,
    RetrievalQuery,
};
use anchorlab::runner::{
    check_vocab_compat, execute_run, rebuild_reports, AggregateRow, CorpusSource, RunConfig,
    SignificanceAnnex,
};
use anchorlab::sweep::{injection_sweep, sweep_csv, SweepGrid};
use anchorlab::eval::TestOutcome;
use anchorlab::intervention::GammaSchedule;

use config::{parse_f64_list, parse_u32_list, parse_usize_list, split_list, FlatConfig};

#[derive(Parser)]
#[command(
    name = "anchorlab",
    version,
    about = "Deterministic transformer laboratory for demonstration-anchored in-context learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class corpus and write it to a directory.
    GenCorpus(GenCorpusArgs),
    /// Inspect criterion-based retrieval for one test sample.
    Retrieve(RetrieveArgs),
    /// Extract a demonstration's per-layer task vectors to a binary file.
    Extract(ExtractArgs),
    /// Run pipelines over repeated seeds and write predictions + reports.
    Run(RunArgs),
    /// Cross retrieval modes with anchoring modes into a 12-cell grid.
    Grid(GridArgs),
    /// Sweep a unit-vector injection over positions, depths, and breadths.
    Sweep(SweepArgs),
    /// Rebuild aggregate.csv and significance.json from stored runs.
    Report(ReportArgs),
}

/// `--config`: flat TOML, every key overridable by the matching flag.
#[derive(Args, Default)]
struct ConfigOpt {
    /// Flat TOML config file (scalar keys only; lists are comma-separated
    /// strings). Command-line flags take precedence over its keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

impl ConfigOpt {
    fn load(&self) -> Result<FlatConfig> {
        match &self.config {
            Some(path) => FlatConfig::load(path),
            None => Ok(FlatConfig::empty()),
        }
    }
}

#[derive(Args, Default)]
struct ModelOpts {
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Weight initialization seed.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Optional readout temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Optional readout top-k mask.
    #[arg(long)]
    top_k: Option<usize>,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl ModelOpts {
    fn resolve(&self, doc: &FlatConfig) -> Result<ModelConfig> {
        let config = ModelConfig {
            num_layers: pick(self.num_layers, doc.usize("num_layers")?, 4),
            model_dim: pick(self.model_dim, doc.usize("model_dim")?, 32),
            num_heads: pick(self.num_heads, doc.usize("num_heads")?, 4),
            ff_dim: pick(self.ff_dim, doc.usize("ff_dim")?, 64),
            vocab_size: pick(self.vocab_size, doc.u32("vocab_size")?, 64),
            max_seq_len: pick(self.max_seq_len, doc.usize("max_seq_len")?, 512),
            init_seed: pick(self.init_seed, doc.u64("init_seed")?, 7),
            temperature: self.temperature.or(doc.f64("temperature")?),
            top_k: self.top_k.or(doc.usize("top_k")?),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Default)]
struct CorpusOpts {
    /// Corpus directory written by gen-corpus; omit to generate from the
    /// spec flags below.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    corpus_seed: Option<u64>,
    /// Pool demonstrations per class.
    #[arg(long)]
    n: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    shared_vocab_fraction: Option<f64>,
    /// Class separability: per-token probability of a class marker, in [0,1].
    #[arg(long)]
    delta: Option<f64>,
}

impl CorpusOpts {
    fn resolve_spec(&self, doc: &FlatConfig, vocab_size: u32) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            seed: pick(self.corpus_seed, doc.u64("corpus_seed")?, 11),
            n_per_class: pick(self.n, doc.usize("n_per_class")?, 60),
            n_test_per_class: pick(self.n_test, doc.usize("n_test_per_class")?, 24),
            min_len: pick(self.min_len, doc.usize("min_len")?, 3),
            max_len: pick(self.max_len, doc.usize("max_len")?, 8),
            shared_vocab_fraction: pick(
                self.shared_vocab_fraction,
                doc.f64("shared_vocab_fraction")?,
                0.5,
            ),
            marker_rate: pick(self.delta, doc.f64("delta")?, 0.7),
            vocab_size,
        })
    }

    fn resolve_source(&self, doc: &FlatConfig, vocab_size: u32) -> Result<CorpusSource> {
        match self.corpus.clone().or(doc.string("corpus_dir")?.map(PathBuf::from)) {
            Some(dir) => Ok(CorpusSource::Dir(dir)),
            None => Ok(CorpusSource::Spec(self.resolve_spec(doc, vocab_size)?)),
        }
    }

    /// For subcommands that require an existing corpus directory.
    fn require_dir(&self, doc: &FlatConfig) -> Result<PathBuf> {
        self.corpus
            .clone()
            .or(doc.string("corpus_dir")?.map(PathBuf::from))
            .ok_or_else(|| Error::Config("this command needs --corpus <DIR> (or corpus_dir in the config)".into()))
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Class separability: per-token probability of a class marker, in [0,1].
    #[arg(long, default_value_t = 0.7)]
    delta: f64,
    /// Pool demonstrations per class.
    #[arg(long, default_value_t = 60)]
    n: usize,
    /// Test samples per class.
    #[arg(long, default_value_t = 24)]
    n_test: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    shared_vocab_fraction: f64,
    #[arg(long, default_value_t = 64)]
    vocab_size: u32,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Id of the test sample (or pool demo) to retrieve for.
    #[arg(long)]
    test_id: u64,
    /// Also list each main demonstration's sub-demonstration set.
    #[arg(long)]
    sub: bool,
    /// Include the assembled anchored-prompt layout in the output.
    #[arg(long)]
    dump_layout: bool,
    /// Write the JSON here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Pool demonstration whose task vectors to extract.
    #[arg(long)]
    demo_id: u64,
    /// Output file for the binary vector set.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Comma-separated pipeline names.
    #[arg(long)]
    pipelines: Option<String>,
    /// Repeated runs per pipeline.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// AD/HC demonstration pairs per prompt (max 4).
    #[arg(long)]
    demo_pairs: Option<usize>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    /// Projection denominator guard.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated per-layer anchoring strengths (overrides the
    /// banded default).
    #[arg(long)]
    schedule: Option<String>,
    /// Pipeline the significance annex compares against.
    #[arg(long)]
    baseline: Option<String>,
    /// Give task-vector baselines their extraction demos in the test
    /// prompt too.
    #[arg(long)]
    tv_context_with_demos: bool,
    /// Worker thread count (results are identical for any value).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    corpus: CorpusOpts,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    schedule: Option<String>,
    /// Write the 12-cell CSV here (the table always prints to stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    model: ModelOpts,
    /// Comma-separated content token ids for the probe sequence.
    #[arg(long)]
    tokens: String,
    /// Seed for the injected unit direction.
    #[arg(long, default_value_t = 0)]
    direction_seed: u64,
    /// Comma-separated injection positions (default: first, middle, last).
    #[arg(long)]
    positions: Option<String>,
    /// Comma-separated injection strengths (default: 0, 0.5, 1).
    #[arg(long)]
    strengths: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory produced by `run`.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
    #[arg(long, default_value = "icl-random")]
    baseline: String,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::DegenerateVector(_) | Error::HookViolation(_) => 4,
        _ => 3,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        seed: args.seed,
        n_per_class: args.n,
        n_test_per_class: args.n_test,
        min_len: args.min_len,
        max_len: args.max_len,
        shared_vocab_fraction: args.shared_vocab_fraction,
        marker_rate: args.delta,
        vocab_size: args.vocab_size,
    };
    let (_vocab, pool, test) = generate(&spec)?;
    write_corpus(&args.out, &spec, &pool, &test)?;
    println!(
        "wrote {} pool + {} test demonstrations to {}",
        pool.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

/// Load a corpus directory and check it against the resolved model.
fn load_checked(
    dir: &PathBuf,
    model: &ModelConfig,
) -> Result<(CorpusSpec, Vocab, DemoPool, Vec<Demo>)> {
    let (spec, vocab, pool, test) = load_corpus(dir)?;
    check_vocab_compat(model, &spec)?;
    Ok((spec, vocab, pool, test))
}

fn find_demo<'a>(pool: &'a DemoPool, test: &'a [Demo], id: DemoId) -> Result<&'a Demo> {
    test.iter()
        .find(|d| d.id == id)
        .or_else(|| pool.get(id))
        .ok_or_else(|| Error::Data(format!("no demonstration with id {} in the corpus", id.0)))
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let doc = args.config.load()?;
    let model = args.model.resolve(&doc)?;
    let dir = args.corpus.require_dir(&doc)?;
    let (_spec, vocab, pool, test) = load_checked(&dir, &model)?;
    let weights = init_model(&model)?;
    pool.ensure_retrieval_capacity()?;
    pool.precompute_embeddings(&weights, &vocab)?;

    let target = find_demo(&pool, &test, DemoId(args.test_id))?;
    let query = RetrievalQuery {
        embedding: embed_demo(&weights, target, &vocab)?,
        length: target.len(),
    };
    let main = build_main_set(&pool, &query)?;

    let pairs: Vec<serde_json::Value> = CriterionId::ALL
        .iter()
        .zip(main.demos.chunks(2))
        .map(|(criterion, pair)| {
            serde_json::json!({
                "criterion": criterion.to_string(),
                "ad": pair[0].id.0,
                "hc": pair[1].id.0,
            })
        })
        .collect();
    let mut output = serde_json::json!({
        "test_id": args.test_id,
        "main_set": pairs,
        "main_ids": main.id_list().iter().map(|id| id.0).collect::<Vec<_>>(),
        "duplicate_ids": main.duplicate_ids.iter().map(|id| id.0).collect::<Vec<_>>(),
    });

    if args.sub {
        let main_ids = main.ids();
        let mut subs = Vec::new();
        for demo in &main.demos {
            let sub = build_sub_set(&pool, demo, &main_ids)?;
            subs.push(serde_json::json!({
                "main_demo": demo.id.0,
                "ids": sub.iter().map(|d| d.id.0).collect::<Vec<_>>(),
            }));
        }
        output["sub_sets"] = serde_json::Value::Array(subs);
    }
    if args.dump_layout {
        let refs: Vec<&Demo> = main.demos.iter().collect();
        let layout = assemble_anchored(&refs, &target.tokens, &vocab, model.max_seq_len)?;
        output["layout"] = serde_json::to_value(&layout)?;
    }

    let text = serde_json::to_string_pretty(&output)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let doc = args.config.load()?;
    let model = args.model.resolve(&doc)?;
    let dir = args.corpus.require_dir(&doc)?;
    let (_spec, vocab, pool, _test) = load_checked(&dir, &model)?;
    let weights = init_model(&model)?;
    pool.ensure_retrieval_capacity()?;
    pool.precompute_embeddings(&weights, &vocab)?;

    let demo = pool
        .get(DemoId(args.demo_id))
        .ok_or_else(|| Error::Data(format!("no pool demonstration with id {}", args.demo_id)))?;
    let sub = build_sub_set(&pool, demo, &BTreeSet::new())?;
    let refs: Vec<&Demo> = sub.iter().collect();
    let layout = assemble_sub_sequence(&refs, demo, &vocab, model.max_seq_len)?;
    let vectors = extract_task_vectors(&weights, &layout, demo.id)?;
    vectors.save(&args.out)?;
    println!(
        "extracted {} layers x dim {} for demo {} -> {}",
        vectors.num_layers(),
        vectors.dim(),
        args.demo_id,
        args.out.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let doc = args.config.load()?;
    let model = args.model.resolve(&doc)?;
    let corpus = args.corpus.resolve_source(&doc, model.vocab_size)?;
    let out_dir = pick(
        args.out.clone(),
        doc.string("out_dir")?.map(PathBuf::from),
        PathBuf::from("out"),
    );
    let mut config = RunConfig::with_defaults(model, corpus, out_dir);
    if let Some(list) = args.pipelines.map(|s| split_list(&s)).or(doc.string_list("pipelines")?) {
        config.pipelines = list;
    }
    config.runs = pick(args.runs, doc.usize("runs")?, config.runs);
    config.base_seed = pick(args.base_seed, doc.u64("base_seed")?, config.base_seed);
    config.demo_pairs = pick(args.demo_pairs, doc.usize("demo_pairs")?, config.demo_pairs);
    config.ensemble_size =
        pick(args.ensemble_size, doc.usize("ensemble_size")?, config.ensemble_size);
    config.epsilon = pick(args.epsilon, doc.f64("epsilon")?, config.epsilon);
    config.schedule = match args.schedule {
        Some(s) => Some(parse_f64_list("schedule", &s)?),
        None => doc.f64_list("schedule")?,
    };
    if let Some(baseline) = doc.string("baseline")? {
        config.baseline = baseline;
    }
    if let Some(baseline) = args.baseline {
        config.baseline = baseline;
    }
    config.tv_context_with_demos =
        args.tv_context_with_demos || doc.bool("tv_context_with_demos")?.unwrap_or(false);
    config.workers = args.workers.or(doc.usize("workers")?);

    let summary = execute_run(&config)?;
    print_aggregate(&summary.aggregate);
    println!();
    print_annex(&summary.annex);
    println!("\nartifacts in {}", summary.out_dir.display());
    Ok(())
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let doc = args.config.load()?;
    let model = args.model.resolve(&doc)?;
    let source = args.corpus.resolve_source(&doc, model.vocab_size)?;
    let (spec, vocab, pool, test) = anchorlab::runner::resolve_corpus(&source)?;
    check_vocab_compat(&model, &spec)?;
    let weights = init_model(&model)?;
    let options = RunOptions {
        epsilon: pick(args.epsilon, doc.f64("epsilon")?, 1e-6),
        schedule: match args.schedule {
            Some(s) => Some(GammaSchedule::from_values(parse_f64_list("schedule", &s)?)?),
            None => doc.f64_list("schedule")?.map(GammaSchedule::from_values).transpose()?,
        },
        tv_context_with_demos: false,
    };
    let ctx = RunContext { weights: &weights, vocab: &vocab, pool: &pool, options };
    let cells = run_ablation_grid(&ctx, args.seed, &test)?;

    println!("{:<14} {:<14} {:>9} {:>9}", "prompt", "anchor", "accuracy", "f1");
    for cell in &cells {
        println!(
            "{:<14} {:<14} {:>9.4} {:>9.4}",
            cell.prompt_mode.to_string(),
            anchor_name(cell),
            cell.accuracy,
            cell.f1
        );
    }
    if let Some(path) = &args.out {
        let mut csv = String::from("prompt,anchor,accuracy,f1\n");
        for cell in &cells {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                cell.prompt_mode,
                anchor_name(cell),
                cell.accuracy,
                cell.f1
            ));
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, csv)?;
        println!("\nwrote {}", path.display());
    }
    Ok(())
}

fn anchor_name(cell: &GridCell) -> String {
    match cell.anchor_mode {
        None => "none".to_string(),
        Some(mode) => mode.to_string(),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let doc = args.config.load()?;
    let model = args.model.resolve(&doc)?;
    let weights = init_model(&model)?;
    let vocab = Vocab::partition(model.vocab_size, 0.5, false)?;
    let tokens = parse_u32_list("tokens", &args.tokens)?;
    let layout = assemble_icl(&[], &tokens, &vocab, model.max_seq_len)?;
    let mut grid = SweepGrid::default_for(&layout);
    if let Some(s) = &args.positions {
        grid.positions = parse_usize_list("positions", s)?;
    }
    if let Some(s) = &args.strengths {
        grid.strengths = parse_f64_list("strengths", s)?;
    }
    let rows = injection_sweep(&weights, &layout, &grid, args.direction_seed)?;
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, &csv)?;
            println!("wrote {} sweep cells to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let (rows, annex) = rebuild_reports(&args.dir, &args.baseline)?;
    print_aggregate(&rows);
    println!();
    print_annex(&annex);
    Ok(())
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!("{:<16} {:>5} {:<10} {:>9} {:>9}", "pipeline", "pairs", "metric", "mean", "std");
    for r in rows {
        println!(
            "{:<16} {:>5} {:<10} {:>9.4} {:>9.4}",
            r.pipeline, r.demo_pairs, r.metric, r.mean, r.std
        );
    }
}

fn print_annex(annex: &SignificanceAnnex) {
    if annex.comparisons.is_empty() {
        println!("significance: no comparisons (only the baseline ran)");
        return;
    }
    println!("significance vs {} (t at p<0.005, signed-rank at p<0.01):", annex.baseline);
    for c in &annex.comparisons {
        println!(
            "  {:<16} {:<10} t {:<22} signed-rank {}",
            c.pipeline,
            c.metric,
            outcome_text(&c.paired_t, c.t_significant_p005),
            outcome_text(&c.wilcoxon, c.wilcoxon_significant_p01),
        );
    }
}

fn outcome_text(outcome: &TestOutcome, significant: bool) -> String {
    match outcome {
        TestOutcome::Valid { p_value, .. } => {
            format!("p={:.6}{}", p_value, if significant { " *" } else { "" })
        }
        TestOutcome::Degenerate { reason } => format!("degenerate: {reason}"),
    }
}
