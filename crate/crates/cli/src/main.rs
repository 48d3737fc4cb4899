//! `memmod` — build synthetic memory, train, evaluate, sweep and run
//! class-incremental experiments from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use memmod::checkpoint::{self, Checkpoint};
use memmod::harness::{self, EvalMode, MetricRow, ScenarioConfig, ScenarioReport, SweepAxis};
use memmod::incremental::{self, StagePlan};
use memmod::integration::InitScheme;
use memmod::memory::{self, BankSnapshot, ClassId, MemoryBank, Modality};
use memmod::prototypes::{self, PrototypeSet};
use memmod::synth::{self, SynthSpec};
use memmod::trainer::{self, LabeledQuery, TrainConfig};
use memmod::IntegrationParams;

const THREADS_ENV: &str = "MEMMOD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "memmod", version, about = "Retrieval-augmented classification with swappable memory")]
struct Cli {
    /// `key=value` config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Record wall-clock seconds in reports (makes reruns differ).
    #[arg(long, global = true)]
    record_timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark: banks, query sets and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        spec: SynthFlags,
    },
    /// Train integration parameters and write a checkpoint bundle.
    Train {
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        out: PathBuf,
        /// Training seed (initialization and batch order).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate one classifier mode on files, or on synthetic seeds.
    Eval {
        #[command(flatten)]
        data: OptionalDataFlags,
        /// Checkpoint directory (prototypes and parameters).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "mml")]
        mode: EvalMode,
        /// Train and evaluate on a fresh synthetic benchmark per seed.
        #[arg(long, conflicts_with_all = ["img_mem", "txt_mem", "queries", "checkpoint"])]
        synthetic: bool,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        spec: SynthFlags,
    },
    /// Sweep one knob over a grid on synthetic benchmarks.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated grid values; `full` means the whole bank for memory_size.
        #[arg(long, value_delimiter = ',', value_parser = parse_grid_value, required = true)]
        grid: Vec<f64>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        spec: SynthFlags,
    },
    /// Run a class-incremental plan under a memory budget.
    Incremental {
        /// Stage manifest: `stage<TAB>class_id<TAB>image.mmlm[<TAB>text.mmlm]`.
        #[arg(long, required_unless_present = "synthetic", requires = "queries")]
        stages: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Split a synthetic benchmark's classes into ten stages instead.
        #[arg(long, conflicts_with_all = ["stages", "queries"])]
        synthetic: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = incremental::DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        spec: SynthFlags,
    },
}

#[derive(Args, Debug)]
struct DataFlags {
    #[arg(long)]
    img_mem: PathBuf,
    #[arg(long)]
    txt_mem: PathBuf,
    /// Labeled queries: MMLM (labels are class ids) or CSV `class_id,x0,x1,...`.
    #[arg(long)]
    queries: PathBuf,
}

#[derive(Args, Debug)]
struct OptionalDataFlags {
    #[arg(long, required_unless_present = "synthetic")]
    img_mem: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    txt_mem: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    queries: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    wd: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SynthFlags {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Image and text items per class.
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    concentration: Option<f32>,
    #[arg(long)]
    offset: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: memmod::Error| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: memmod::Error| e.to_string())
}

fn parse_grid_value(s: &str) -> Result<f64, String> {
    match s.trim() {
        "full" => Ok(0.0),
        v => v.parse().map_err(|_| format!("bad grid value {v:?}")),
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.k {
            cfg.k_neighbors = v;
        }
        if let Some(v) = self.top_m {
            cfg.top_m = v;
        }
        if let Some(v) = self.tau {
            cfg.temperature = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.wd {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
    }
}

impl SynthFlags {
    fn apply(&self, spec: &mut SynthSpec) {
        if let Some(v) = self.classes {
            spec.num_classes = v;
        }
        if let Some(v) = self.dim {
            spec.dim = v;
        }
        if let Some(v) = self.items {
            spec.image_items_per_class = v;
            spec.text_items_per_class = v;
        }
        if let Some(v) = self.train_per_class {
            spec.train_per_class = v;
        }
        if let Some(v) = self.test_per_class {
            spec.test_per_class = v;
        }
        if let Some(v) = self.concentration {
            spec.intra_class_concentration = v;
        }
        if let Some(v) = self.offset {
            spec.cross_modal_offset = v;
        }
        if let Some(v) = self.noise {
            spec.memory_noise_rate = v;
        }
    }
}

/// Defaults, then the config file, then flags.
fn scenario_config(file: Option<&Path>, base: ScenarioConfig, train: &TrainFlags, spec: &SynthFlags) -> Result<ScenarioConfig> {
    let mut cfg = base;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').with_context(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            if !cfg.train.set(k, v)? && !cfg.synth.set(k, v)? {
                bail!("{}:{}: unknown key {:?}", path.display(), i + 1, k.trim());
            }
        }
    }
    train.apply(&mut cfg.train);
    spec.apply(&mut cfg.synth);
    Ok(cfg)
}

fn train_config(file: Option<&Path>, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        checkpoint::apply_config_text(&mut cfg, &text)?;
    }
    flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn seeds_or_default(seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![0]
    } else {
        seeds.to_vec()
    }
}

fn load_snapshot(path: &Path, modality: Modality) -> Result<BankSnapshot> {
    let bank = memory::load_bank(path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(bank.modality() == modality, "{} holds {} memory, expected {modality}", path.display(), bank.modality());
    Ok(BankSnapshot::new(bank))
}

fn load_queries(path: &Path) -> Result<Vec<LabeledQuery>> {
    let queries = if path.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label = fields.next().unwrap_or("").trim().parse().with_context(|| format!("{}:{}: bad class id", path.display(), i + 1))?;
            let embedding = fields
                .map(|f| f.trim().parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("{}:{}: bad embedding value", path.display(), i + 1))?;
            out.push(LabeledQuery { embedding, label });
        }
        out
    } else {
        let bank = memory::load_bank(path).with_context(|| format!("loading {}", path.display()))?;
        (0..bank.len()).map(|i| LabeledQuery { embedding: bank.vector(i).to_vec(), label: bank.label(i) }).collect()
    };
    ensure!(!queries.is_empty(), "{} holds no queries", path.display());
    Ok(queries)
}

fn query_bank(queries: &[LabeledQuery], classes: &[ClassId], dim: usize) -> Result<MemoryBank> {
    let items: Vec<_> = queries
        .iter()
        .map(|q| {
            let class = classes.iter().find(|c| c.id == q.label).cloned().expect("query labels come from the world");
            (class, q.embedding.clone())
        })
        .collect();
    Ok(MemoryBank::from_items(Modality::Image, dim, items)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(file: Option<&Path>, out: &Path, seed: u64, flags: &SynthFlags) -> Result<()> {
    let mut spec = scenario_config(file, ScenarioConfig::default(), &TrainFlags::default(), flags)?.synth;
    spec.seed = seed;
    let bench = synth::generate(&spec)?;
    fs::create_dir_all(out)?;
    memory::save_bank(&bench.img, out.join("img.mmlm"))?;
    memory::save_bank(&bench.txt, out.join("txt.mmlm"))?;
    memory::write_manifest(&bench.img, out.join("classes.tsv"))?;
    for (name, set) in [("train", &bench.train), ("test", &bench.test)] {
        write(&out.join(format!("{name}.csv")), synth::ground_truth_csv(set))?;
        memory::save_bank(&query_bank(set, &bench.world.classes, spec.dim)?, out.join(format!("{name}.mmlm")))?;
    }
    write(&out.join("spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    eprintln!("synth: {} classes, {} image / {} text items -> {}", spec.num_classes, bench.img.len(), bench.txt.len(), out.display());
    Ok(())
}

fn cmd_train(file: Option<&Path>, data: &DataFlags, out: &Path, seed: Option<u64>, flags: &TrainFlags) -> Result<()> {
    let mut cfg = train_config(file, flags)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let img = load_snapshot(&data.img_mem, Modality::Image)?;
    let txt = load_snapshot(&data.txt_mem, Modality::Text)?;
    let queries = load_queries(&data.queries)?;
    let protos = prototypes::consensus_prototypes(&img, &txt, cfg.top_m)?;
    let init = IntegrationParams::init(cfg.seed, img.dim(), InitScheme::ScaledUniform)?;
    let (params, curve) = trainer::train_from(init, &queries, &img, &txt, &protos, &cfg)?;
    checkpoint::save_checkpoint(out, &params, &protos, &cfg, &curve)?;
    if let Some(last) = curve.last() {
        eprintln!("train: {} epochs, final loss {:.4}, train acc {:.4}", curve.len(), last.loss, last.train_acc);
    }
    Ok(())
}

fn file_report(
    file: Option<&Path>,
    data: &OptionalDataFlags,
    ckpt: Option<&Path>,
    mode: EvalMode,
    flags: &TrainFlags,
) -> Result<ScenarioReport> {
    let (Some(img_path), Some(txt_path), Some(q_path)) = (&data.img_mem, &data.txt_mem, &data.queries) else {
        bail!("--img-mem, --txt-mem and --queries are required without --synthetic");
    };
    let img = load_snapshot(img_path, Modality::Image)?;
    let txt = load_snapshot(txt_path, Modality::Text)?;
    let queries = load_queries(q_path)?;
    let (params, protos, mut cfg): (IntegrationParams, PrototypeSet, TrainConfig) = match ckpt {
        Some(dir) => {
            let Checkpoint { params, prototypes, config } = checkpoint::load_checkpoint(dir)?;
            (params, prototypes, config)
        }
        None => {
            let cfg = train_config(file, &TrainFlags::default())?;
            let protos = prototypes::consensus_prototypes(&img, &txt, cfg.top_m)?;
            (IntegrationParams::zeros(img.dim()), protos, cfg)
        }
    };
    flags.apply(&mut cfg);
    let m = harness::evaluate(mode, &img, &txt, &protos, &params, &queries, cfg.k_neighbors)?;
    let config = serde_json::json!({
        "mode": mode,
        "img_mem": img_path,
        "txt_mem": txt_path,
        "queries": q_path,
        "checkpoint": ckpt,
        "train": cfg,
    });
    let mut report = ScenarioReport::new("eval", &config, &[cfg.seed])?;
    report.push(MetricRow::new("accuracy", vec![m.accuracy]))?;
    report.push(MetricRow::new("recall_at_1", vec![m.recall_at_1]))?;
    report.push(MetricRow::new("recall_at_16", vec![m.recall_at_16]))?;
    Ok(report)
}

fn synthetic_report(cfg: &ScenarioConfig, mode: EvalMode, seeds: &[u64]) -> Result<ScenarioReport> {
    use rayon::prelude::*;
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let c = cfg.for_seed(seed);
            let prep = harness::prepare(&c)?;
            let params = match mode {
                EvalMode::Mml => prep.train(&c.train)?,
                _ => IntegrationParams::zeros(c.synth.dim),
            };
            prep.evaluate(mode, &params, c.train.k_neighbors)
        })
        .collect::<memmod::Result<Vec<_>>>()?;
    let config = serde_json::json!({ "mode": mode, "scenario": cfg });
    let mut report = ScenarioReport::new("eval_synthetic", &config, seeds)?;
    report.push(MetricRow::new("accuracy", rows.iter().map(|m| m.accuracy).collect()))?;
    report.push(MetricRow::new("recall_at_1", rows.iter().map(|m| m.recall_at_1).collect()))?;
    report.push(MetricRow::new("recall_at_16", rows.iter().map(|m| m.recall_at_16).collect()))?;
    Ok(report)
}

fn cmd_sweep(cfg: &ScenarioConfig, axis: SweepAxis, grid: &[f64], seeds: &[u64], out: &Path) -> Result<()> {
    let rows = harness::sweep(axis, grid, cfg, seeds)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write(out, harness::sweep_csv(axis, &rows))?;
    let per_seed: String = rows.iter().map(|r| format!("{:?}\n", r.per_seed)).collect();
    eprintln!("sweep per-seed accuracies:\n{per_seed}");
    Ok(())
}

fn file_plan(stages: &Path, queries: &Path, budget: usize) -> Result<(StagePlan, Vec<Vec<LabeledQuery>>)> {
    let plan = incremental::load_stage_plan(stages, budget)?;
    let queries = load_queries(queries)?;
    let tests = plan
        .stages
        .iter()
        .map(|s| {
            let ids: Vec<u32> = s.classes().iter().map(|c| c.id).collect();
            queries.iter().filter(|q| ids.contains(&q.label)).cloned().collect()
        })
        .collect();
    Ok((plan, tests))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var(THREADS_ENV) {
        let n: usize = n.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        ensure!(n > 0, "{THREADS_ENV} must be a positive integer");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = cli.config.as_deref();
    let start = Instant::now();
    match &cli.command {
        Command::Synth { out, seed, spec } => cmd_synth(file, out, *seed, spec),
        Command::Train { data, out, seed, train } => cmd_train(file, data, out, *seed, train),
        Command::Eval { data, checkpoint, mode, synthetic, seeds, out, train, spec } => {
            let mut report = if *synthetic {
                let cfg = scenario_config(file, ScenarioConfig::default(), train, spec)?;
                synthetic_report(&cfg, *mode, &seeds_or_default(seeds))?
            } else {
                file_report(file, data, checkpoint.as_deref(), *mode, train)?
            };
            if cli.record_timing {
                report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
            }
            fs::create_dir_all(out)?;
            write(&out.join("report.json"), report.to_json() + "\n")?;
            write(&out.join("metrics.csv"), report.metrics_csv())?;
            let acc = report.metric("accuracy").map_or(f64::NAN, |m| m.mean);
            eprintln!("eval: accuracy {acc:.4} over {} seed(s)", report.seeds.len());
            Ok(())
        }
        Command::Sweep { axis, grid, seeds, out, train, spec } => {
            let cfg = scenario_config(file, ScenarioConfig::default(), train, spec)?;
            cmd_sweep(&cfg, *axis, grid, &seeds_or_default(seeds), out)
        }
        Command::Incremental { stages, queries, synthetic, checkpoint, budget, seed, out, train, spec } => {
            let cfg = scenario_config(file, ScenarioConfig::default(), train, spec)?.for_seed(*seed);
            let (plan, tests) = if *synthetic {
                let bench = synth::generate(&cfg.synth)?;
                let per_stage = cfg.synth.num_classes.div_ceil(harness::BUDGET_SWEEP_STAGES);
                harness::synthetic_stage_plan(&bench, per_stage, *budget)?
            } else {
                let (Some(s), Some(q)) = (stages, queries) else {
                    bail!("--stages and --queries are required without --synthetic");
                };
                file_plan(s, q, *budget)?
            };
            let dim = plan.stages.first().and_then(|s| s.image_items.first()).map(|(_, v)| v.len()).context("empty stage plan")?;
            let (params, mut train_cfg) = match checkpoint {
                Some(dir) => {
                    let c = checkpoint::load_checkpoint(dir)?;
                    (c.params, c.config)
                }
                None => (IntegrationParams::zeros(dim), cfg.train.clone()),
            };
            train.apply(&mut train_cfg);
            let results = incremental::incremental_eval(&plan, &tests, &params, train_cfg.k_neighbors, train_cfg.top_m)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write(out, incremental::stage_csv(&results))?;
            eprintln!("incremental: {} stages, budget {budget}", results.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
