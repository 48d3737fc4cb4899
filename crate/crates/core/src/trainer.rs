//! Training of the integration parameters against frozen memory and
//! prototypes, plus the linear-scorer baseline and label corruption used by
//! the noise experiments.
//!
//! The optimizer is plain mini-batch gradient descent with decoupled weight
//! decay. Shuffling is a fixed permutation per `(seed, epoch)` and gradients
//! are reduced in a fixed order, so a run is bit-reproducible regardless of the
//! number of worker threads.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Classifier};
use crate::error::{Error, Result};
use crate::integration::{self, InitScheme, IntegrationParams};
use crate::memory::BankSnapshot;
use crate::prototypes::PrototypeSet;
use crate::retrieval;
use crate::vector;

/// Per-example gradients are summed in fixed-size chunks, then chunk sums are
/// added in order. The chunk size must not depend on the thread count.
const REDUCTION_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub temperature: f32,
    pub k_neighbors: usize,
    pub top_m: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            weight_decay: 5e-4,
            batch_size: 256,
            temperature: 16.0,
            k_neighbors: retrieval::DEFAULT_K,
            top_m: crate::prototypes::DEFAULT_TOP_M,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be finite and non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.batch_size == 0 || self.k_neighbors == 0 || self.top_m == 0 {
            return Err(Error::invalid("batch_size, k_neighbors and top_m must be positive"));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in declaration order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "learning_rate={}", self.learning_rate);
        let _ = writeln!(out, "weight_decay={}", self.weight_decay);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "temperature={}", self.temperature);
        let _ = writeln!(out, "k_neighbors={}", self.k_neighbors);
        let _ = writeln!(out, "top_m={}", self.top_m);
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    /// Sets one field from its `key=value` spelling. Returns `false` for keys
    /// this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        match key.trim() {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "weight_decay" | "wd" => self.weight_decay = parse(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse(key, value)?,
            "temperature" | "tau" => self.temperature = parse(key, value)?,
            "k_neighbors" | "k" => self.k_neighbors = parse(key, value)?,
            "top_m" => self.top_m = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A query embedding with its class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub embedding: Vec<f32>,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub train_acc: f32,
}

/// `epoch,loss,train_acc` CSV with header, LF line endings.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for s in curve {
        let _ = writeln!(out, "{},{},{}", s.epoch, s.loss, s.train_acc);
    }
    out
}

/// A differentiable per-example loss over a flat parameter vector.
pub(crate) trait Objective: Sync {
    fn num_examples(&self) -> usize;
    /// Adds the gradient of example `i`'s loss to `grad`; returns the loss and
    /// whether the example was classified correctly.
    fn accumulate(&self, params: &[f32], i: usize, grad: &mut [f32]) -> Result<(f32, bool)>;
}

fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub(crate) fn optimize(objective: &impl Objective, params: &mut [f32], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let n = objective.num_examples();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    let p = params.len();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_permutation(cfg.seed, epoch, n);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &[f32] = params;
            let partials = batch
                .par_chunks(REDUCTION_CHUNK)
                .map(|chunk| {
                    let mut grad = vec![0.0f32; p];
                    let mut loss = 0.0f64;
                    let mut hits = 0usize;
                    for &i in chunk {
                        let (l, ok) = objective.accumulate(snapshot, i, &mut grad)?;
                        loss += f64::from(l);
                        hits += ok as usize;
                    }
                    Ok((grad, loss, hits))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0f32; p];
            for (g, l, h) in partials {
                vector::add_assign(&mut grad, &g);
                loss_sum += l;
                correct += h;
            }
            let step = cfg.learning_rate / batch.len() as f32;
            let keep = 1.0 - cfg.learning_rate * cfg.weight_decay;
            for (w, g) in params.iter_mut().zip(&grad) {
                *w = *w * keep - step * g;
            }
        }
        let loss = (loss_sum / n as f64) as f32;
        if !loss.is_finite() || !vector::all_finite(params) {
            return Err(Error::Diverged { epoch });
        }
        curve.push(EpochStats { epoch, loss, train_acc: correct as f32 / n as f32 });
    }
    Ok(curve)
}

/// The full model's objective: retrieval is precomputed once because banks,
/// prototypes and query embeddings stay frozen during training.
struct MmlObjective<'a> {
    classifier: Classifier<'a>,
    queries: &'a [LabeledQuery],
    targets: Vec<usize>,
    img_neighbors: Vec<Vec<&'a [f32]>>,
    txt_neighbors: Vec<Vec<&'a [f32]>>,
    tau: f32,
}

impl<'a> MmlObjective<'a> {
    fn new(classifier: Classifier<'a>, queries: &'a [LabeledQuery], tau: f32) -> Result<Self> {
        let targets = queries
            .iter()
            .map(|q| classifier.prototypes.class_index(q.label).ok_or(Error::UnknownClass(q.label)))
            .collect::<Result<Vec<_>>>()?;
        let img_neighbors = neighbor_lists(queries, classifier.img, classifier.k)?;
        let txt_neighbors = neighbor_lists(queries, classifier.txt, classifier.k)?;
        Ok(Self { classifier, queries, targets, img_neighbors, txt_neighbors, tau })
    }
}

fn neighbor_lists<'b>(queries: &[LabeledQuery], bank: &'b BankSnapshot, k: usize) -> Result<Vec<Vec<&'b [f32]>>> {
    let embeddings: Vec<&[f32]> = queries.iter().map(|q| q.embedding.as_slice()).collect();
    Ok(retrieval::top_k_batch(&embeddings, bank, k)?
        .iter()
        .map(|r| Classifier::neighbor_vectors(bank, r))
        .collect())
}

impl Objective for MmlObjective<'_> {
    fn num_examples(&self) -> usize {
        self.queries.len()
    }

    fn accumulate(&self, params: &[f32], i: usize, grad: &mut [f32]) -> Result<(f32, bool)> {
        let c = &self.classifier;
        let d = c.dim();
        let q = &self.queries[i].embedding;
        let branch_len = IntegrationParams::branch_len(d);
        let (p_img, p_txt) = params.split_at(branch_len);
        let (g_img, g_txt) = grad.split_at_mut(branch_len);
        let bp_img = integration::BranchParams::new(d, p_img)?;
        let bp_txt = integration::BranchParams::new(d, p_txt)?;

        let t_img = c.branches.image().then(|| integration::forward_trace(q, &self.img_neighbors[i], bp_img));
        let t_txt = c.branches.text().then(|| integration::forward_trace(q, &self.txt_neighbors[i], bp_txt));
        let f_img = t_img.as_ref().map_or(q.as_slice(), |t| &t.output);
        let f_txt = t_txt.as_ref().map_or(q.as_slice(), |t| &t.output);
        let logits = classifier::logits_for(c.prototypes, c.branches, f_img, f_txt)?;
        let target = self.targets[i];
        let (loss, g_logits) = classifier::softmax_cross_entropy(&logits, target, self.tau);

        if let Some(t) = &t_img {
            let up = classifier::cosine_backward(c.prototypes.image_matrix().expect("checked"), &t.output, &g_logits);
            integration::backward_trace(t, q, &self.img_neighbors[i], bp_img, &up, g_img);
        }
        if let Some(t) = &t_txt {
            let up = classifier::cosine_backward(c.prototypes.text_matrix().expect("checked"), &t.output, &g_logits);
            integration::backward_trace(t, q, &self.txt_neighbors[i], bp_txt, &up, g_txt);
        }
        Ok((loss, vector::argmax(&logits) == target))
    }
}

/// Trains integration parameters starting from `init`. Banks, prototypes and
/// queries are only read.
pub fn train_from(
    init: IntegrationParams,
    queries: &[LabeledQuery],
    img: &BankSnapshot,
    txt: &BankSnapshot,
    prototypes: &PrototypeSet,
    cfg: &TrainConfig,
) -> Result<(IntegrationParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut params = init;
    let mut data = params.as_slice().to_vec();
    let curve = {
        let classifier = Classifier::new(img, txt, prototypes, &params, cfg.k_neighbors)?;
        let objective = MmlObjective::new(classifier, queries, cfg.temperature)?;
        optimize(&objective, &mut data, cfg)?
    };
    params.as_mut_slice().copy_from_slice(&data);
    Ok((params, curve))
}

/// Trains from the scaled-uniform initialization seeded by `cfg.seed`.
pub fn train(
    queries: &[LabeledQuery],
    img: &BankSnapshot,
    txt: &BankSnapshot,
    prototypes: &PrototypeSet,
    cfg: &TrainConfig,
) -> Result<(IntegrationParams, Vec<EpochStats>)> {
    let init = IntegrationParams::init(cfg.seed, prototypes.dim(), InitScheme::ScaledUniform)?;
    train_from(init, queries, img, txt, prototypes, cfg)
}

/// Plain linear scorer `z = W f + b` over raw embeddings; the prototype-free
/// baseline for the label-noise experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScorer {
    pub dim: usize,
    /// Class ids in row order.
    pub class_ids: Vec<u32>,
    /// `C × d` weights followed by `C` biases.
    pub params: Vec<f32>,
}

impl LinearScorer {
    pub fn logits(&self, query: &[f32]) -> Vec<f32> {
        let c = self.class_ids.len();
        let (w, b) = self.params.split_at(c * self.dim);
        let mut z = vec![0.0; c];
        vector::matvec(w, query, &mut z);
        vector::add_assign(&mut z, b);
        z
    }

    pub fn predict(&self, query: &[f32]) -> u32 {
        self.class_ids[vector::argmax(&self.logits(query))]
    }
}

struct LinearObjective<'a> {
    scorer: LinearScorer,
    queries: &'a [LabeledQuery],
    targets: Vec<usize>,
    tau: f32,
}

impl Objective for LinearObjective<'_> {
    fn num_examples(&self) -> usize {
        self.queries.len()
    }

    fn accumulate(&self, params: &[f32], i: usize, grad: &mut [f32]) -> Result<(f32, bool)> {
        let d = self.scorer.dim;
        let c = self.scorer.class_ids.len();
        let q = &self.queries[i].embedding;
        let (w, b) = params.split_at(c * d);
        let mut z = vec![0.0; c];
        vector::matvec(w, q, &mut z);
        vector::add_assign(&mut z, b);
        let (loss, g) = classifier::softmax_cross_entropy(&z, self.targets[i], self.tau);
        let (gw, gb) = grad.split_at_mut(c * d);
        vector::outer_acc(&g, q, gw);
        vector::add_assign(gb, &g);
        Ok((loss, vector::argmax(&z) == self.targets[i]))
    }
}

/// Trains a linear scorer over `class_ids` with the same loop and config as
/// the full model. Weights start scaled-uniform under `cfg.seed`.
pub fn train_linear(
    queries: &[LabeledQuery],
    class_ids: &[u32],
    cfg: &TrainConfig,
) -> Result<(LinearScorer, Vec<EpochStats>)> {
    let dim = queries.first().ok_or_else(|| Error::invalid("training set is empty"))?.embedding.len();
    let c = class_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (dim as f32).sqrt();
    let mut params: Vec<f32> = (0..c * dim).map(|_| rng.random_range(-bound..=bound)).collect();
    params.extend(std::iter::repeat_n(0.0, c));
    let targets = queries
        .iter()
        .map(|q| class_ids.iter().position(|&id| id == q.label).ok_or(Error::UnknownClass(q.label)))
        .collect::<Result<Vec<_>>>()?;
    let scorer = LinearScorer { dim, class_ids: class_ids.to_vec(), params: Vec::new() };
    let objective = LinearObjective { scorer: scorer.clone(), queries, targets, tau: cfg.temperature };
    let curve = optimize(&objective, &mut params, cfg)?;
    Ok((LinearScorer { params, ..scorer }, curve))
}

/// Replaces exactly `⌊rate · N⌋` labels, chosen under `seed`, with a uniformly
/// random different class from the labels present.
pub fn label_noise_corrupt(queries: &[LabeledQuery], rate: f64, seed: u64) -> Result<Vec<LabeledQuery>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("noise rate must lie in [0, 1)"));
    }
    let classes: Vec<u32> = queries.iter().map(|q| q.label).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("label corruption needs at least two classes"));
    }
    let mut out = queries.to_vec();
    let n = (rate * queries.len() as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, queries.len(), n).into_vec();
    picked.sort_unstable();
    for i in picked {
        let current = classes.binary_search(&out[i].label).expect("label from set");
        let mut j = rng.random_range(0..classes.len() - 1);
        if j >= current {
            j += 1;
        }
        out[i].label = classes[j];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queries(n: usize, classes: u32) -> Vec<LabeledQuery> {
        (0..n).map(|i| LabeledQuery { embedding: vec![1.0, i as f32], label: i as u32 % classes }).collect()
    }

    #[test]
    fn corruption_counts() {
        let q = queries(100, 5);
        assert_eq!(label_noise_corrupt(&q, 0.0, 1).unwrap(), q);
        let c = label_noise_corrupt(&q, 0.4, 1).unwrap();
        let changed = q.iter().zip(&c).filter(|(a, b)| a.label != b.label).count();
        assert_eq!(changed, 40);
        assert_eq!(c, label_noise_corrupt(&q, 0.4, 1).unwrap());
        assert!(c.iter().zip(&q).all(|(a, b)| a.embedding == b.embedding));
    }

    #[test]
    fn corruption_errors() {
        assert!(label_noise_corrupt(&queries(10, 1), 0.2, 0).is_err());
        assert!(label_noise_corrupt(&queries(10, 2), 1.0, 0).is_err());
    }

    #[test]
    fn permutation_depends_on_epoch() {
        assert_eq!(epoch_permutation(3, 0, 50), epoch_permutation(3, 0, 50));
        assert_ne!(epoch_permutation(3, 0, 50), epoch_permutation(3, 1, 50));
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = TrainConfig { learning_rate: 0.25, epochs: 7, seed: 9, ..TrainConfig::default() };
        let mut back = TrainConfig::default();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k, v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("unknown", "1").unwrap());
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.k_neighbors, cfg.top_m, cfg.batch_size), (32, 16, 256));
        assert_eq!((cfg.temperature, cfg.learning_rate, cfg.weight_decay), (16.0, 1e-6, 5e-4));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let spec = crate::synth::SynthSpec {
            num_classes: 3,
            dim: 6,
            image_items_per_class: 5,
            text_items_per_class: 5,
            train_per_class: 2,
            test_per_class: 1,
            ..Default::default()
        };
        let bench = crate::synth::generate(&spec).unwrap();
        let (img, txt) = bench.snapshots();
        let protos = crate::prototypes::consensus_prototypes(&img, &txt, 3).unwrap();
        let params = IntegrationParams::init(4, 6, InitScheme::ScaledUniform).unwrap();
        let classifier = Classifier::new(&img, &txt, &protos, &params, 4).unwrap();
        let objective = MmlObjective::new(classifier, &bench.train, 2.0).unwrap();
        let base = params.as_slice().to_vec();
        let mut grad = vec![0.0; base.len()];
        objective.accumulate(&base, 0, &mut grad).unwrap();
        let loss_at = |w: &[f32]| objective.accumulate(w, 0, &mut vec![0.0; w.len()]).unwrap().0 as f64;
        let h = 1e-2f32;
        for j in (0..base.len()).step_by(7) {
            let (mut a, mut b) = (base.clone(), base.clone());
            a[j] += h;
            b[j] -= h;
            let numeric = (loss_at(&a) - loss_at(&b)) / (2.0 * f64::from(h));
            let analytic = f64::from(grad[j]);
            assert!((analytic - numeric).abs() <= 2e-2 * numeric.abs().max(analytic.abs()) + 1e-3, "{j}: {analytic} vs {numeric}");
        }
    }
}
