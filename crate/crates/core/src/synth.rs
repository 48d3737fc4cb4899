//! Synthetic embedding worlds for desk-scale experiments, plus the
//! retrieval-only baseline.
//!
//! A world fixes, per class, a unit image centroid, a text centroid rotated
//! away from it by `cross_modal_offset` radians in a random plane, and a
//! confuser class. Items are `normalize(center + σ·g)` with `g ~ N(0, I)` and
//! per-coordinate standard deviation `σ = 1/sqrt(concentration)`. Memory noise
//! replaces a fraction of each class's items with draws from its confuser
//! class while keeping the label, the way a keyword search returns pictures of
//! a look-alike. Queries are always clean.
//!
//! The world, the memory draws and the query draws use independent random
//! streams, so memory can be regenerated under a fresh seed while the classes
//! and the queries stay fixed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{BankSnapshot, ClassId, MemoryBank, Modality};
use crate::retrieval;
use crate::trainer::LabeledQuery;
use crate::vector;

pub use crate::classifier::prototype_only_classifier;

const WORLD_STREAM: u64 = 0;
const MEMORY_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub image_items_per_class: usize,
    pub text_items_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub intra_class_concentration: f32,
    /// Angle in radians between a class's image and text centroids.
    pub cross_modal_offset: f32,
    pub memory_noise_rate: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            image_items_per_class: 100,
            text_items_per_class: 100,
            train_per_class: 32,
            test_per_class: 100,
            intra_class_concentration: 10.0,
            cross_modal_offset: 0.8,
            memory_noise_rate: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.dim < 4 {
            return Err(Error::invalid("dimension must be at least 4"));
        }
        if self.intra_class_concentration.is_nan() || self.intra_class_concentration <= 0.0 {
            return Err(Error::invalid("concentration must be positive"));
        }
        if !(0.0..1.0).contains(&self.memory_noise_rate) {
            return Err(Error::invalid("memory noise rate must lie in [0, 1)"));
        }
        if !self.cross_modal_offset.is_finite() {
            return Err(Error::invalid("cross-modal offset must be finite"));
        }
        if self.image_items_per_class == 0 || self.text_items_per_class == 0 {
            return Err(Error::invalid("each class needs at least one memory item per modality"));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` spelling. Returns `false` for keys
    /// this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
        }
        match key.trim() {
            "num_classes" | "classes" => self.num_classes = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "items_per_class" | "items" => {
                self.image_items_per_class = parse(key, value)?;
                self.text_items_per_class = self.image_items_per_class;
            }
            "image_items_per_class" => self.image_items_per_class = parse(key, value)?,
            "text_items_per_class" => self.text_items_per_class = parse(key, value)?,
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "intra_class_concentration" | "concentration" => self.intra_class_concentration = parse(key, value)?,
            "cross_modal_offset" | "offset" => self.cross_modal_offset = parse(key, value)?,
            "memory_noise_rate" | "noise" => self.memory_noise_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Per-coordinate standard deviation of the Gaussian perturbation.
    pub fn sigma(&self) -> f32 {
        1.0 / self.intra_class_concentration.sqrt()
    }
}

/// Class geometry shared by every draw from one world seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub classes: Vec<ClassId>,
    pub image_centroids: Vec<Vec<f32>>,
    pub text_centroids: Vec<Vec<f32>>,
    /// Noise source class for each class.
    pub confusers: Vec<usize>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(WORLD_STREAM);
        let d = spec.dim;
        let mut image_centroids = Vec::new();
        let mut text_centroids = Vec::new();
        let mut confusers = Vec::new();
        for c in 0..spec.num_classes {
            let u = random_unit(&mut rng, d);
            let mut w = gaussian(&mut rng, d);
            let proj = vector::dot(&w, &u);
            vector::axpy(-proj, &u, &mut w);
            let w = vector::normalized(&w).expect("orthogonal direction is non-zero");
            let (s, co) = spec.cross_modal_offset.sin_cos();
            let t: Vec<f32> = u.iter().zip(&w).map(|(a, b)| co * a + s * b).collect();
            image_centroids.push(u);
            text_centroids.push(vector::normalized(&t).expect("unit combination"));
            let mut other = rng.random_range(0..spec.num_classes - 1);
            if other >= c {
                other += 1;
            }
            confusers.push(other);
        }
        let classes = (0..spec.num_classes).map(|c| ClassId::new(c as u32, format!("class_{c}"))).collect();
        Ok(Self { classes, image_centroids, text_centroids, confusers })
    }
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        if let Some(v) = vector::normalized(&gaussian(rng, d)) {
            return v;
        }
    }
}

fn perturbed(rng: &mut impl Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    // draw even when sigma is zero so the stream stays aligned
    let offsets = gaussian(rng, center.len());
    displaced(center, &offsets, sigma)
}

/// `center + sigma * offsets`, renormalized.
fn displaced(center: &[f32], offsets: &[f32], sigma: f32) -> Vec<f32> {
    if sigma == 0.0 {
        return center.to_vec();
    }
    let v: Vec<f32> = center.iter().zip(offsets).map(|(c, o)| c + sigma * o).collect();
    vector::normalized(&v).unwrap_or_else(|| center.to_vec())
}

/// Everything one synthetic run needs.
#[derive(Clone, Debug)]
pub struct SynthBench {
    pub spec: SynthSpec,
    pub world: SynthWorld,
    pub img: MemoryBank,
    pub txt: MemoryBank,
    pub train: Vec<LabeledQuery>,
    pub test: Vec<LabeledQuery>,
}

impl SynthBench {
    pub fn snapshots(&self) -> (BankSnapshot, BankSnapshot) {
        (BankSnapshot::new(self.img.clone()), BankSnapshot::new(self.txt.clone()))
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.world.classes.iter().map(|c| c.id).collect()
    }
}

fn memory_bank(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    world: &SynthWorld,
    modality: Modality,
    per_class: usize,
) -> Result<MemoryBank> {
    let centroids = match modality {
        Modality::Text => &world.text_centroids,
        _ => &world.image_centroids,
    };
    let sigma = spec.sigma();
    let n_noise = (f64::from(spec.memory_noise_rate) * per_class as f64).round() as usize;
    let mut items = Vec::with_capacity(spec.num_classes * per_class);
    for (c, class) in world.classes.iter().enumerate() {
        // The draws do not depend on the noise rate: raising it only swaps
        // more slots (a prefix of a fixed order) over to the confuser class.
        let order = rand::seq::index::sample(rng, per_class, per_class).into_vec();
        let mut is_noise = vec![false; per_class];
        order.into_iter().take(n_noise).for_each(|i| is_noise[i] = true);
        for noise in is_noise {
            let offsets = gaussian(rng, spec.dim);
            let src = if noise { world.confusers[c] } else { c };
            items.push((class.clone(), displaced(&centroids[src], &offsets, sigma)));
        }
    }
    MemoryBank::from_items(modality, spec.dim, items)
}

/// Draws image and text memory for the world of `spec.seed` using an
/// independent `memory_seed`.
pub fn regenerate_memory(spec: &SynthSpec, memory_seed: u64) -> Result<(MemoryBank, MemoryBank)> {
    let world = SynthWorld::new(spec)?;
    memory_for_world(spec, &world, memory_seed)
}

fn memory_for_world(spec: &SynthSpec, world: &SynthWorld, memory_seed: u64) -> Result<(MemoryBank, MemoryBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(memory_seed);
    rng.set_stream(MEMORY_STREAM);
    let img = memory_bank(&mut rng, spec, world, Modality::Image, spec.image_items_per_class)?;
    let txt = memory_bank(&mut rng, spec, world, Modality::Text, spec.text_items_per_class)?;
    Ok((img, txt))
}

fn queries(rng: &mut ChaCha8Rng, spec: &SynthSpec, world: &SynthWorld, per_class: usize) -> Vec<LabeledQuery> {
    let sigma = spec.sigma();
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    for (c, class) in world.classes.iter().enumerate() {
        for _ in 0..per_class {
            out.push(LabeledQuery { embedding: perturbed(rng, &world.image_centroids[c], sigma), label: class.id });
        }
    }
    out
}

/// Generates banks and query sets, fully determined by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthBench> {
    let world = SynthWorld::new(spec)?;
    let (img, txt) = memory_for_world(spec, &world, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(QUERY_STREAM);
    let train = queries(&mut rng, spec, &world, spec.train_per_class);
    let test = queries(&mut rng, spec, &world, spec.test_per_class);
    Ok(SynthBench { spec: spec.clone(), world, img, txt, train, test })
}

/// `query_index,class_id` CSV with header.
pub fn ground_truth_csv(queries: &[LabeledQuery]) -> String {
    let mut out = String::from("query_index,class_id\n");
    for (i, q) in queries.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", q.label);
    }
    out
}

/// Majority vote over the `k` nearest image items. Vote ties go to the class
/// with the larger summed similarity, then to the lower class id.
pub fn knn_majority_classifier(query: &[f32], img: &BankSnapshot, k: usize) -> Result<u32> {
    let r = retrieval::top_k(query, img, k)?;
    let mut tally: BTreeMap<u32, (usize, f32)> = BTreeMap::new();
    for (&i, &s) in r.neighbor_indices.iter().zip(&r.similarities) {
        let e = tally.entry(img.label(i)).or_default();
        e.0 += 1;
        e.1 += s;
    }
    let mut best: Option<(u32, usize, f32)> = None;
    for (id, (votes, sim)) in tally {
        let better = match best {
            None => true,
            Some((_, bv, bs)) => votes > bv || (votes == bv && sim > bs),
        };
        if better {
            best = Some((id, votes, sim));
        }
    }
    Ok(best.expect("top_k returns at least one neighbor").0)
}
