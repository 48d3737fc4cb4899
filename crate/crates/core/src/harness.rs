//! Experiment scenarios over synthetic benchmarks: evaluation in the three
//! classifier modes, multi-seed runs, parameter sweeps and reports.
//!
//! Accuracies are fractions in `[0, 1]`. Every scenario seeds both the world
//! and the trainer from the run seed, so a scenario is a pure function of its
//! config and seed list.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Classifier};
use crate::error::{Error, Result};
use crate::incremental::{self, Stage, StagePlan};
use crate::integration::IntegrationParams;
use crate::memory::{BankSnapshot, ClassId};
use crate::prototypes::{self, PrototypeSet, PrototypeVariant};
use crate::retrieval;
use crate::synth::{self, SynthBench, SynthSpec};
use crate::trainer::{self, LabeledQuery, TrainConfig};
use crate::vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Mml,
    ProtoOnly,
    KnnVote,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mml" => Ok(Self::Mml),
            "proto_only" => Ok(Self::ProtoOnly),
            "knn_vote" => Ok(Self::KnnVote),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub recall_at_1: f64,
    pub recall_at_16: f64,
    pub queries: usize,
}

/// Scores `queries` in one mode. Recall is always measured on image-bank
/// retrieval, independent of the mode.
pub fn evaluate(
    mode: EvalMode,
    img: &BankSnapshot,
    txt: &BankSnapshot,
    prototypes: &PrototypeSet,
    params: &IntegrationParams,
    queries: &[LabeledQuery],
    k: usize,
) -> Result<EvalMetrics> {
    if queries.is_empty() {
        return Err(Error::invalid("no evaluation queries"));
    }
    let classifier = Classifier::new(img, txt, prototypes, params, k)?;
    let rows = queries
        .par_iter()
        .map(|q| {
            let predicted = match mode {
                EvalMode::Mml => classifier.classify(&q.embedding)?.predicted.id,
                EvalMode::ProtoOnly => classifier::prototype_only_classifier(&q.embedding, prototypes)?.id,
                EvalMode::KnnVote => synth::knn_majority_classifier(&q.embedding, img, k)?,
            };
            let r = retrieval::top_k(&q.embedding, img, 16)?;
            let r1 = retrieval::recall_at_k(&r, img, q.label, 1)?;
            let r16 = retrieval::recall_at_k(&r, img, q.label, r.len().min(16))?;
            Ok((predicted == q.label, r1, r16))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalMetrics {
        accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        recall_at_1: rows.iter().map(|r| f64::from(r.1)).sum::<f64>() / n,
        recall_at_16: rows.iter().map(|r| f64::from(r.2)).sum::<f64>() / n,
        queries: rows.len(),
    })
}

/// Mean cosine of integrated features to the true-class prototype minus the
/// mean cosine to the other classes' prototypes, averaged over both branches.
pub fn prototype_similarity_gap(classifier: &Classifier<'_>, queries: &[LabeledQuery]) -> Result<f64> {
    let protos = classifier.prototypes;
    let c = protos.num_classes();
    if c < 2 {
        return Err(Error::invalid("similarity gap needs at least two classes"));
    }
    let gaps = queries
        .par_iter()
        .map(|q| {
            let target = protos.class_index(q.label).ok_or(Error::UnknownClass(q.label))?;
            let nb = classifier.retrieve(&q.embedding)?;
            let (f_img, f_txt) = classifier.integrate(&q.embedding, &nb)?;
            let mut gap = 0.0f64;
            let mut sides = 0;
            for (matrix, f) in [(protos.image_matrix(), &f_img), (protos.text_matrix(), &f_txt)] {
                let Some(matrix) = matrix else { continue };
                let cos: Vec<f64> = matrix.chunks_exact(f.len()).map(|p| f64::from(vector::cosine(p, f))).collect();
                let pos = cos[target];
                let neg = (cos.iter().sum::<f64>() - pos) / (c - 1) as f64;
                gap += pos - neg;
                sides += 1;
            }
            Ok(gap / f64::from(sides))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Base configuration for synthetic scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub prototypes: PrototypeVariant,
}

impl Default for ScenarioConfig {
    /// Optimizer settings and a softer temperature suited to a few hundred
    /// synthetic training queries; `k` and `top_m` keep the model defaults.
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train: TrainConfig {
                learning_rate: 0.3,
                batch_size: 32,
                epochs: 40,
                temperature: 4.0,
                ..TrainConfig::default()
            },
            prototypes: PrototypeVariant::Consensus,
        }
    }
}

impl ScenarioConfig {
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg
    }
}

/// One seed's benchmark with its snapshots and prototypes.
pub struct Prepared {
    pub bench: SynthBench,
    pub img: BankSnapshot,
    pub txt: BankSnapshot,
    pub prototypes: PrototypeSet,
}

pub fn prepare(cfg: &ScenarioConfig) -> Result<Prepared> {
    let bench = synth::generate(&cfg.synth)?;
    let (img, txt) = bench.snapshots();
    let prototypes = prototypes::prototype_variant(&img, &txt, cfg.prototypes, cfg.train.top_m, cfg.synth.seed)?;
    Ok(Prepared { bench, img, txt, prototypes })
}

impl Prepared {
    pub fn train(&self, cfg: &TrainConfig) -> Result<IntegrationParams> {
        self.train_on(&self.bench.train, cfg)
    }

    pub fn train_on(&self, queries: &[LabeledQuery], cfg: &TrainConfig) -> Result<IntegrationParams> {
        Ok(trainer::train(queries, &self.img, &self.txt, &self.prototypes, cfg)?.0)
    }

    pub fn evaluate(&self, mode: EvalMode, params: &IntegrationParams, k: usize) -> Result<EvalMetrics> {
        evaluate(mode, &self.img, &self.txt, &self.prototypes, params, &self.bench.test, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub mml: EvalMetrics,
    pub proto_only: EvalMetrics,
    pub knn_vote: EvalMetrics,
}

/// Trains MML for one seed and scores all three modes on the same test set.
pub fn ablation_run(cfg: &ScenarioConfig, seed: u64) -> Result<AblationRun> {
    let cfg = cfg.for_seed(seed);
    let prep = prepare(&cfg)?;
    let params = prep.train(&cfg.train)?;
    let k = cfg.train.k_neighbors;
    Ok(AblationRun {
        seed,
        mml: prep.evaluate(EvalMode::Mml, &params, k)?,
        proto_only: prep.evaluate(EvalMode::ProtoOnly, &params, k)?,
        knn_vote: prep.evaluate(EvalMode::KnnVote, &params, k)?,
    })
}

pub fn ablation(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<AblationRun>> {
    seeds.par_iter().map(|&s| ablation_run(cfg, s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustnessRow {
    pub seed: u64,
    pub noise_rate: f32,
    pub consensus: f64,
    pub all_mean: f64,
}

/// Prototype-only accuracy of consensus and all-mean prototypes as memory
/// noise grows. Nothing is trained.
pub fn prototype_noise(cfg: &ScenarioConfig, rates: &[f32], seeds: &[u64]) -> Result<Vec<NoiseRobustnessRow>> {
    let jobs: Vec<(u64, f32)> = seeds.iter().flat_map(|&s| rates.iter().map(move |&r| (s, r))).collect();
    jobs.par_iter()
        .map(|&(seed, rate)| {
            let mut c = cfg.for_seed(seed);
            c.synth.memory_noise_rate = rate;
            let bench = synth::generate(&c.synth)?;
            let (img, txt) = bench.snapshots();
            let params = IntegrationParams::zeros(c.synth.dim);
            let mut acc = [0.0; 2];
            for (slot, variant) in [PrototypeVariant::Consensus, PrototypeVariant::AllMean].into_iter().enumerate() {
                let p = prototypes::prototype_variant(&img, &txt, variant, c.train.top_m, seed)?;
                acc[slot] = evaluate(EvalMode::ProtoOnly, &img, &txt, &p, &params, &bench.test, c.train.k_neighbors)?
                    .accuracy;
            }
            Ok(NoiseRobustnessRow { seed, noise_rate: rate, consensus: acc[0], all_mean: acc[1] })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRun {
    pub seed: u64,
    pub original: f64,
    /// `(memory seed, accuracy)` per regenerated memory.
    pub replaced: Vec<(u64, f64)>,
}

/// Trains once, then swaps in memory regenerated under each fresh seed
/// (same world, same queries), rebuilding prototypes but not retraining.
pub fn memory_replacement(cfg: &ScenarioConfig, seed: u64, memory_seeds: &[u64]) -> Result<ReplacementRun> {
    let cfg = cfg.for_seed(seed);
    let prep = prepare(&cfg)?;
    let params = prep.train(&cfg.train)?;
    let k = cfg.train.k_neighbors;
    let original = prep.evaluate(EvalMode::Mml, &params, k)?.accuracy;
    let replaced = memory_seeds
        .par_iter()
        .map(|&ms| {
            let (img, txt) = synth::regenerate_memory(&cfg.synth, ms)?;
            let (img, txt) = (prep.img.replace_classes(img.items())?, prep.txt.replace_classes(txt.items())?);
            let protos = prototypes::prototype_variant(&img, &txt, cfg.prototypes, cfg.train.top_m, ms)?;
            Ok((ms, evaluate(EvalMode::Mml, &img, &txt, &protos, &params, &prep.bench.test, k)?.accuracy))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplacementRun { seed, original, replaced })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNoiseRun {
    pub seed: u64,
    pub noise_rate: f64,
    pub mml_clean: f64,
    pub mml_noisy: f64,
    pub linear_clean: f64,
    pub linear_noisy: f64,
}

fn linear_accuracy(queries: &[LabeledQuery], classes: &[u32], test: &[LabeledQuery], cfg: &TrainConfig) -> Result<f64> {
    let (scorer, _) = trainer::train_linear(queries, classes, cfg)?;
    Ok(test.iter().filter(|q| scorer.predict(&q.embedding) == q.label).count() as f64 / test.len() as f64)
}

/// Clean vs corrupted-label training for MML and the linear scorer.
pub fn label_noise(cfg: &ScenarioConfig, rate: f64, seed: u64) -> Result<LabelNoiseRun> {
    let cfg = cfg.for_seed(seed);
    let prep = prepare(&cfg)?;
    let k = cfg.train.k_neighbors;
    let noisy = trainer::label_noise_corrupt(&prep.bench.train, rate, seed)?;
    let classes = prep.bench.class_ids();
    let mml = |q: &[LabeledQuery]| -> Result<f64> {
        Ok(prep.evaluate(EvalMode::Mml, &prep.train_on(q, &cfg.train)?, k)?.accuracy)
    };
    Ok(LabelNoiseRun {
        seed,
        noise_rate: rate,
        mml_clean: mml(&prep.bench.train)?,
        mml_noisy: mml(&noisy)?,
        linear_clean: linear_accuracy(&prep.bench.train, &classes, &prep.bench.test, &cfg.train)?,
        linear_noisy: linear_accuracy(&noisy, &classes, &prep.bench.test, &cfg.train)?,
    })
}

/// Splits a benchmark's classes into consecutive stages of
/// `classes_per_stage`, returning the plan and each stage's test queries.
pub fn synthetic_stage_plan(
    bench: &SynthBench,
    classes_per_stage: usize,
    budget: usize,
) -> Result<(StagePlan, Vec<Vec<LabeledQuery>>)> {
    if classes_per_stage == 0 {
        return Err(Error::invalid("classes per stage must be positive"));
    }
    let mut stages = Vec::new();
    let mut tests = Vec::new();
    for group in bench.world.classes.chunks(classes_per_stage) {
        let ids: Vec<u32> = group.iter().map(|c| c.id).collect();
        let take = |bank: &crate::memory::MemoryBank| -> Vec<(ClassId, Vec<f32>)> {
            bank.items().into_iter().filter(|(c, _)| ids.contains(&c.id)).collect()
        };
        stages.push(Stage { image_items: take(&bench.img), text_items: take(&bench.txt) });
        tests.push(bench.test.iter().filter(|q| ids.contains(&q.label)).cloned().collect());
    }
    Ok((StagePlan { stages, budget }, tests))
}

/// Which knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Neighbors retrieved, in training and evaluation.
    K,
    /// Softmax temperature, in training.
    Tau,
    /// Items per class kept in both banks at evaluation time (0 = full).
    MemorySize,
    /// Fraction of corrupted training labels.
    NoiseRate,
    /// Total image-item budget of a class-incremental run.
    Budget,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "tau" => Ok(Self::Tau),
            "memory_size" => Ok(Self::MemorySize),
            "noise_rate" => Ok(Self::NoiseRate),
            "budget" => Ok(Self::Budget),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// Stages in the class-incremental plan behind budget sweeps.
pub const BUDGET_SWEEP_STAGES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sweep_seed(axis: SweepAxis, grid: &[f64], cfg: &ScenarioConfig, seed: u64) -> Result<Vec<f64>> {
    let base = cfg.for_seed(seed);
    match axis {
        SweepAxis::K | SweepAxis::Tau => {
            let prep = prepare(&base)?;
            grid.par_iter()
                .map(|&v| {
                    let mut train = base.train.clone();
                    if axis == SweepAxis::K {
                        train.k_neighbors = v as usize;
                    } else {
                        train.temperature = v as f32;
                    }
                    let params = prep.train(&train)?;
                    Ok(prep.evaluate(EvalMode::Mml, &params, train.k_neighbors)?.accuracy)
                })
                .collect()
        }
        SweepAxis::NoiseRate => {
            let prep = prepare(&base)?;
            grid.par_iter()
                .map(|&v| {
                    let noisy = trainer::label_noise_corrupt(&prep.bench.train, v, seed)?;
                    let params = prep.train_on(&noisy, &base.train)?;
                    Ok(prep.evaluate(EvalMode::Mml, &params, base.train.k_neighbors)?.accuracy)
                })
                .collect()
        }
        SweepAxis::MemorySize => {
            let prep = prepare(&base)?;
            let params = prep.train(&base.train)?;
            grid.par_iter()
                .map(|&v| {
                    let (img, txt) = if v <= 0.0 || !v.is_finite() {
                        (prep.img.clone(), prep.txt.clone())
                    } else {
                        let n = v as usize;
                        (prep.img.subsample_per_class(n, seed)?, prep.txt.subsample_per_class(n, seed ^ 0x5eed)?)
                    };
                    let protos =
                        prototypes::prototype_variant(&img, &txt, base.prototypes, base.train.top_m, seed)?;
                    let m = evaluate(EvalMode::Mml, &img, &txt, &protos, &params, &prep.bench.test, base.train.k_neighbors)?;
                    Ok(m.accuracy)
                })
                .collect()
        }
        SweepAxis::Budget => {
            let prep = prepare(&base)?;
            let params = prep.train(&base.train)?;
            grid.par_iter()
                .map(|&v| {
                    let per_stage = base.synth.num_classes.div_ceil(BUDGET_SWEEP_STAGES);
                    let (plan, tests) = synthetic_stage_plan(&prep.bench, per_stage, v as usize)?;
                    let res = incremental::incremental_eval(&plan, &tests, &params, base.train.k_neighbors, base.train.top_m)?;
                    Ok(f64::from(res.last().expect("at least one stage").accuracy))
                })
                .collect()
        }
    }
}

/// Mean and standard deviation of accuracy at each grid value over seeds.
pub fn sweep(axis: SweepAxis, grid: &[f64], cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs a grid and at least one seed"));
    }
    let per_seed: Vec<Vec<f64>> = seeds.par_iter().map(|&s| sweep_seed(axis, grid, cfg, s)).collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(j, &value)| {
            let xs: Vec<f64> = per_seed.iter().map(|r| r[j]).collect();
            let (mean, std) = mean_std(&xs);
            SweepRow { value, mean, std, per_seed: xs }
        })
        .collect())
}

/// `value,mean_accuracy,std`; a memory-size value of 0 is written as `full`.
pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = String::from("value,mean_accuracy,std\n");
    for r in rows {
        if axis == SweepAxis::MemorySize && r.value == 0.0 {
            let _ = writeln!(out, "full,{},{}", r.mean, r.std);
        } else {
            let _ = writeln!(out, "{},{},{}", r.value, r.mean, r.std);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricRow {
    pub fn new(name: impl Into<String>, per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self { name: name.into(), mean, std, per_seed }
    }
}

/// Outcome of one harness scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricRow>,
    /// Left empty unless requested, so reruns produce identical reports.
    pub wall_clock_secs: Option<f64>,
}

impl ScenarioReport {
    pub fn new(scenario: impl Into<String>, config: &impl Serialize, seeds: &[u64]) -> Result<Self> {
        Ok(Self {
            scenario: scenario.into(),
            config: serde_json::to_value(config).map_err(|e| Error::invalid(e.to_string()))?,
            seeds: seeds.to_vec(),
            metrics: Vec::new(),
            wall_clock_secs: None,
        })
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !row.per_seed.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(format!("metric {} is not finite", row.name)));
        }
        self.metrics.push(row);
        Ok(())
    }

    pub fn metric(&self, name: &str) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// `metric,mean,std,seed_<s>...` with one row per metric.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("metric,mean,std");
        for s in &self.seeds {
            let _ = write!(out, ",seed_{s}");
        }
        out.push('\n');
        for m in &self.metrics {
            let _ = write!(out, "{},{},{}", m.name, m.mean, m.std);
            for x in &m.per_seed {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times `f` and stores the elapsed seconds in the report it returns.
pub fn timed<F>(f: F) -> Result<ScenarioReport>
where
    F: FnOnce() -> Result<ScenarioReport>,
{
    let start = Instant::now();
    let mut report = f()?;
    report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn parse_enums() {
        assert_eq!("knn_vote".parse::<EvalMode>().unwrap(), EvalMode::KnnVote);
        assert_eq!("memory_size".parse::<SweepAxis>().unwrap(), SweepAxis::MemorySize);
        assert!("bogus".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn report_rejects_non_finite() {
        let mut r = ScenarioReport::new("x", &1, &[0]).unwrap();
        assert!(r.push(MetricRow::new("bad", vec![f64::NAN])).is_err());
        r.push(MetricRow::new("ok", vec![0.5])).unwrap();
        assert_eq!(r.metrics_csv(), "metric,mean,std,seed_0\nok,0.5,0,0.5\n");
    }
}
