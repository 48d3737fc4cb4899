//! Class-incremental memory under a fixed image-item budget.
//!
//! Classes arrive in stages. After each stage every seen class gets an equal
//! share of the budget (the remainder goes to the earliest classes) and is
//! shrunk to it by herding: keep the items closest in cosine to the class
//! mean. Text memory, when staged, is carried in full. Prototypes are rebuilt
//! from the surviving memory after every stage. Integration parameters are
//! never retrained.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::integration::IntegrationParams;
use crate::memory::{self, BankSnapshot, ClassId, MemoryBank, Modality};
use crate::prototypes::{self, PrototypeSet, PrototypeSource};
use crate::trainer::LabeledQuery;
use crate::vector;

pub const DEFAULT_BUDGET: usize = 2000;

/// Indices of the `quota` items nearest (cosine) to the mean of all `items`,
/// ties to the lower index, returned ascending.
pub fn herd_select<V: AsRef<[f32]>>(items: &[V], quota: usize) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::invalid("herding needs at least one item"));
    }
    if quota == 0 || quota > items.len() {
        return Err(Error::invalid(format!("quota {quota} outside 1..={}", items.len())));
    }
    let d = items[0].as_ref().len();
    let mut mean = vec![0.0f32; d];
    for v in items {
        vector::add_assign(&mut mean, v.as_ref());
    }
    let n = items.len() as f32;
    mean.iter_mut().for_each(|x| *x /= n);
    let mut scored: Vec<(f32, usize)> =
        items.iter().enumerate().map(|(i, v)| (vector::cosine(v.as_ref(), &mean), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored.into_iter().take(quota).map(|(_, i)| i).collect();
    keep.sort_unstable();
    Ok(keep)
}

/// Per-class quotas for `classes` classes in arrival order.
pub fn class_quotas(budget: usize, classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || budget < classes {
        return Err(Error::invalid(format!("budget {budget} cannot hold {classes} classes")));
    }
    let base = budget / classes;
    let extra = budget % classes;
    Ok((0..classes).map(|i| base + usize::from(i < extra)).collect())
}

/// New classes arriving together, with their candidate memory.
#[derive(Clone, Debug, Default)]
pub struct Stage {
    pub image_items: Vec<(ClassId, Vec<f32>)>,
    /// Optional text memory for the same classes.
    pub text_items: Vec<(ClassId, Vec<f32>)>,
}

impl Stage {
    /// Class ids in first-appearance order.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut seen = HashSet::new();
        self.image_items.iter().filter(|(c, _)| seen.insert(c.id)).map(|(c, _)| c.clone()).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    pub budget: usize,
}

/// Memory and prototypes after some number of stages.
#[derive(Clone, Debug)]
pub struct IncrementalState {
    pub img: BankSnapshot,
    pub txt: Option<BankSnapshot>,
    pub prototypes: PrototypeSet,
    /// Seen classes in arrival order.
    pub seen: Vec<ClassId>,
    pub top_m: usize,
}

fn build_prototypes(img: &BankSnapshot, txt: Option<&BankSnapshot>, m: usize) -> Result<PrototypeSet> {
    if let Some(txt) = txt {
        return prototypes::consensus_prototypes(img, txt, m);
    }
    let mut classes = img.classes().to_vec();
    classes.sort_by_key(|c| c.id);
    let mut rows = Vec::with_capacity(classes.len() * img.dim());
    for c in &classes {
        let mut sum = vec![0.0f32; img.dim()];
        let idx = img.indices_of(c.id);
        for &i in &idx {
            vector::add_assign(&mut sum, img.vector(i));
        }
        sum.iter_mut().for_each(|x| *x /= idx.len() as f32);
        rows.extend(vector::normalized(&sum).ok_or_else(|| Error::invalid("class mean is zero"))?);
    }
    PrototypeSet::new(img.dim(), classes, Some(rows), None, PrototypeSource::AllMean)
}

fn shrink(bank: &MemoryBank, order: &[ClassId], quotas: &[usize]) -> Result<MemoryBank> {
    let mut keep = Vec::new();
    for (c, &quota) in order.iter().zip(quotas) {
        let idx = bank.indices_of(c.id);
        if idx.is_empty() {
            return Err(Error::EmptyClass(c.id));
        }
        let vectors: Vec<&[f32]> = idx.iter().map(|&i| bank.vector(i)).collect();
        let chosen = herd_select(&vectors, quota.min(idx.len()))?;
        keep.extend(chosen.into_iter().map(|j| idx[j]));
    }
    bank.select(&keep)
}

/// Admits one stage: herds every class to its quota and rebuilds prototypes.
pub fn advance_stage(
    state: Option<&IncrementalState>,
    stage: &Stage,
    budget: usize,
    top_m: usize,
) -> Result<IncrementalState> {
    let new_classes = stage.classes();
    if new_classes.is_empty() {
        return Err(Error::invalid("stage introduces no classes"));
    }
    let mut seen = state.map(|s| s.seen.clone()).unwrap_or_default();
    let known: HashSet<u32> = seen.iter().map(|c| c.id).collect();
    if let Some(c) = new_classes.iter().find(|c| known.contains(&c.id)) {
        return Err(Error::ClassCollision(c.id));
    }
    seen.extend(new_classes.iter().cloned());
    let quotas = class_quotas(budget, seen.len())?;

    let dim = stage.image_items[0].1.len();
    let candidates = match state {
        Some(s) => s.img.expand_classes(stage.image_items.clone())?,
        None => BankSnapshot::new(MemoryBank::from_items(Modality::Image, dim, stage.image_items.clone())?),
    };
    // arrival order, so the remainder lands on the earliest classes
    let img = BankSnapshot::new(shrink(&candidates, &seen, &quotas)?);

    let txt = match (state.and_then(|s| s.txt.as_ref()), stage.text_items.is_empty()) {
        (Some(t), false) => Some(t.expand_classes(stage.text_items.clone())?),
        (None, false) if state.is_none() => {
            Some(BankSnapshot::new(MemoryBank::from_items(Modality::Text, dim, stage.text_items.clone())?))
        }
        (Some(_), true) | (None, false) => {
            return Err(Error::invalid("text memory must be staged for every stage or for none"))
        }
        (None, true) => None,
    };
    let prototypes = build_prototypes(&img, txt.as_ref(), top_m)?;
    Ok(IncrementalState { img, txt, prototypes, seen, top_m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub accuracy: f32,
    pub classes_seen: usize,
    pub memory_items: usize,
}

pub fn stage_csv(results: &[StageResult]) -> String {
    let mut out = String::from("stage,accuracy,classes_seen\n");
    for r in results {
        let _ = writeln!(out, "{},{},{}", r.stage, r.accuracy, r.classes_seen);
    }
    out
}

/// Runs the plan, evaluating after each stage on the test queries of every
/// stage seen so far. `params` stay frozen throughout.
pub fn incremental_eval(
    plan: &StagePlan,
    test_per_stage: &[Vec<LabeledQuery>],
    params: &IntegrationParams,
    k: usize,
    top_m: usize,
) -> Result<Vec<StageResult>> {
    if plan.stages.len() != test_per_stage.len() {
        return Err(Error::invalid("one test set per stage is required"));
    }
    let mut state: Option<IncrementalState> = None;
    let mut results = Vec::new();
    let mut pool: Vec<&LabeledQuery> = Vec::new();
    for (t, (stage, tests)) in plan.stages.iter().zip(test_per_stage).enumerate() {
        if tests.is_empty() {
            return Err(Error::invalid(format!("stage {t} has no test queries")));
        }
        let next = advance_stage(state.as_ref(), stage, plan.budget, top_m)?;
        pool.extend(tests);
        // without staged text memory the text branch has nothing to retrieve from
        let txt = next.txt.clone().unwrap_or_else(|| next.img.clone());
        let classifier = Classifier::new(&next.img, &txt, &next.prototypes, params, k)?;
        let correct = pool
            .par_iter()
            .map(|q| Ok(usize::from(classifier.classify(&q.embedding)?.predicted.id == q.label)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        results.push(StageResult {
            stage: t,
            accuracy: correct as f32 / pool.len() as f32,
            classes_seen: next.seen.len(),
            memory_items: next.img.len(),
        });
        state = Some(next);
    }
    Ok(results)
}

/// One line of a stage-plan manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub stage: usize,
    pub class_id: u32,
    pub image_path: PathBuf,
    pub text_path: Option<PathBuf>,
}

/// Parses a stage-plan manifest: `stage<TAB>class_id<TAB>image.mmlm[<TAB>text.mmlm]`
/// per line, `#` comments. Relative paths resolve against `base`.
pub fn parse_plan_manifest(text: &str, base: &Path) -> Result<Vec<PlanEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        if !(3..=4).contains(&fields.len()) {
            return Err(err("expected stage, class_id, image path and optional text path"));
        }
        let stage = fields[0].trim().parse().map_err(|_| err("bad stage index"))?;
        let class_id = fields[1].trim().parse().map_err(|_| err("bad class id"))?;
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(PlanEntry {
            stage,
            class_id,
            image_path: resolve(fields[2]),
            text_path: fields.get(3).filter(|s| !s.trim().is_empty()).map(|s| resolve(s)),
        });
    }
    Ok(out)
}

pub fn write_plan_manifest(entries: &[PlanEntry]) -> String {
    let mut out = String::from("# stage\tclass_id\timage_mmlm\ttext_mmlm\n");
    for e in entries {
        let _ = write!(out, "{}\t{}\t{}", e.stage, e.class_id, e.image_path.display());
        if let Some(t) = &e.text_path {
            let _ = write!(out, "\t{}", t.display());
        }
        out.push('\n');
    }
    out
}

/// Loads a stage plan manifest and the items it references.
pub fn load_stage_plan(path: impl AsRef<Path>, budget: usize) -> Result<StagePlan> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_plan_manifest(&fs::read_to_string(path)?, base)?;
    let mut cache: BTreeMap<PathBuf, MemoryBank> = BTreeMap::new();
    let mut stages: BTreeMap<usize, Stage> = BTreeMap::new();
    for e in &entries {
        let stage = stages.entry(e.stage).or_default();
        for (p, text) in std::iter::once((&e.image_path, false)).chain(e.text_path.iter().map(|p| (p, true))) {
            if !cache.contains_key(p) {
                cache.insert(p.clone(), memory::load_bank(p)?);
            }
            let bank = &cache[p];
            let class = bank.class(e.class_id).ok_or(Error::UnknownClass(e.class_id))?.clone();
            let items = bank.indices_of(e.class_id).into_iter().map(|i| (class.clone(), bank.vector(i).to_vec()));
            if text {
                stage.text_items.extend(items);
            } else {
                stage.image_items.extend(items);
            }
        }
    }
    let expected: Vec<usize> = (0..stages.len()).collect();
    if stages.keys().copied().collect::<Vec<_>>() != expected {
        return Err(Error::invalid("stage indices must be contiguous from 0"));
    }
    Ok(StagePlan { stages: stages.into_values().collect(), budget })
}
