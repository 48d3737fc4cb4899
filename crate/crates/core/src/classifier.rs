//! Classification against multi-modal prototypes.
//!
//! For a query `f`, neighbors are retrieved from both banks with the same
//! (image) query, each branch integrates its neighbors, and class `c` scores
//! `z_c = cos(p_c^txt, f^txt) + cos(p_c^img, f^img)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integration::{self, Branch, IntegrationParams};
use crate::memory::{BankSnapshot, ClassId};
use crate::prototypes::PrototypeSet;
use crate::retrieval::{self, RetrievalResult};
use crate::vector;

/// Which modality branches contribute to the logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    ImageOnly,
    TextOnly,
}

impl Branches {
    pub fn image(self) -> bool {
        matches!(self, Branches::Both | Branches::ImageOnly)
    }

    pub fn text(self) -> bool {
        matches!(self, Branches::Both | Branches::TextOnly)
    }

    /// Every branch the prototype set can serve.
    pub fn for_prototypes(protos: &PrototypeSet) -> Self {
        match (protos.has_image(), protos.has_text()) {
            (true, false) => Branches::ImageOnly,
            (false, true) => Branches::TextOnly,
            _ => Branches::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    /// One score per prototype class, each in `[-2, 2]`.
    pub logits: Vec<f32>,
    pub predicted_index: usize,
    pub predicted: ClassId,
}

/// Neighbors of one query in both banks.
#[derive(Clone, Debug)]
pub struct Neighbors {
    pub image: RetrievalResult,
    pub text: RetrievalResult,
}

/// Cosine between a unit prototype and `f`.
#[inline]
fn cos_to(proto: &[f32], f: &[f32], f_norm: f32) -> f32 {
    if f_norm > 0.0 {
        vector::dot(proto, f) / f_norm
    } else {
        0.0
    }
}

/// Adds `cos(p_c, f)` for every class to `logits`.
fn add_cosines(protos: &[f32], f: &[f32], logits: &mut [f32]) {
    let n = vector::norm(f);
    for (z, p) in logits.iter_mut().zip(protos.chunks_exact(f.len())) {
        *z += cos_to(p, f, n);
    }
}

/// Gradient w.r.t. `f` of `Σ_c g_c · cos(p_c, f)`.
pub(crate) fn cosine_backward(protos: &[f32], f: &[f32], g_logits: &[f32]) -> Vec<f32> {
    let d = f.len();
    let n = vector::norm(f);
    let mut u = vec![0.0; d];
    let mut s = 0.0;
    for (g, p) in g_logits.iter().zip(protos.chunks_exact(d)) {
        vector::axpy(*g, p, &mut u);
        s += g * vector::dot(p, f);
    }
    let inv = 1.0 / n;
    let inv3 = inv * inv * inv;
    u.iter().zip(f).map(|(ui, fi)| ui * inv - s * fi * inv3).collect()
}

/// Logits for already-integrated branch features.
pub fn logits_for(protos: &PrototypeSet, branches: Branches, f_img: &[f32], f_txt: &[f32]) -> Result<Vec<f32>> {
    let mut logits = vec![0.0; protos.num_classes()];
    if branches.text() {
        let p = protos.text_matrix().ok_or(Error::MissingPrototypes("text"))?;
        add_cosines(p, f_txt, &mut logits);
    }
    if branches.image() {
        let p = protos.image_matrix().ok_or(Error::MissingPrototypes("image"))?;
        add_cosines(p, f_img, &mut logits);
    }
    Ok(logits)
}

/// Retrieval-augmented classifier bound to one pair of snapshots, a prototype
/// set, and frozen integration parameters.
#[derive(Clone, Copy, Debug)]
pub struct Classifier<'a> {
    pub img: &'a BankSnapshot,
    pub txt: &'a BankSnapshot,
    pub prototypes: &'a PrototypeSet,
    pub params: &'a IntegrationParams,
    pub k: usize,
    pub branches: Branches,
}

impl<'a> Classifier<'a> {
    pub fn new(
        img: &'a BankSnapshot,
        txt: &'a BankSnapshot,
        prototypes: &'a PrototypeSet,
        params: &'a IntegrationParams,
        k: usize,
    ) -> Result<Self> {
        Self::with_branches(img, txt, prototypes, params, k, Branches::for_prototypes(prototypes))
    }

    pub fn with_branches(
        img: &'a BankSnapshot,
        txt: &'a BankSnapshot,
        prototypes: &'a PrototypeSet,
        params: &'a IntegrationParams,
        k: usize,
        branches: Branches,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let d = prototypes.dim();
        for found in [img.dim(), txt.dim(), params.dim()] {
            if found != d {
                return Err(Error::ShapeMismatch { expected: d, found });
            }
        }
        if branches.image() && !prototypes.has_image() {
            return Err(Error::MissingPrototypes("image"));
        }
        if branches.text() && !prototypes.has_text() {
            return Err(Error::MissingPrototypes("text"));
        }
        Ok(Self { img, txt, prototypes, params, k, branches })
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    pub fn retrieve(&self, query: &[f32]) -> Result<Neighbors> {
        Ok(Neighbors {
            image: retrieval::top_k(query, self.img, self.k)?,
            text: retrieval::top_k(query, self.txt, self.k)?,
        })
    }

    pub(crate) fn neighbor_vectors<'b>(bank: &'b BankSnapshot, r: &RetrievalResult) -> Vec<&'b [f32]> {
        r.neighbor_indices.iter().map(|&i| bank.vector(i)).collect()
    }

    /// Integrated `(f^img, f^txt)`; a disabled branch passes the query through.
    pub fn integrate(&self, query: &[f32], nb: &Neighbors) -> Result<(Vec<f32>, Vec<f32>)> {
        let f_img = if self.branches.image() {
            let n = Self::neighbor_vectors(self.img, &nb.image);
            integration::integrate(query, &n, self.params.branch(Branch::Image))?.integrated
        } else {
            query.to_vec()
        };
        let f_txt = if self.branches.text() {
            let n = Self::neighbor_vectors(self.txt, &nb.text);
            integration::integrate(query, &n, self.params.branch(Branch::Text))?.integrated
        } else {
            query.to_vec()
        };
        Ok((f_img, f_txt))
    }

    pub fn logits_with(&self, query: &[f32], nb: &Neighbors) -> Result<Vec<f32>> {
        let (f_img, f_txt) = self.integrate(query, nb)?;
        logits_for(self.prototypes, self.branches, &f_img, &f_txt)
    }

    pub fn classify(&self, query: &[f32]) -> Result<Classification> {
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch { expected: self.dim(), found: query.len() });
        }
        let nb = self.retrieve(query)?;
        let logits = self.logits_with(query, &nb)?;
        Ok(self.decide(logits))
    }

    pub(crate) fn decide(&self, logits: Vec<f32>) -> Classification {
        let predicted_index = vector::argmax(&logits);
        Classification {
            predicted: self.prototypes.classes()[predicted_index].clone(),
            predicted_index,
            logits,
        }
    }
}

/// Classifies one query with every branch the prototypes support.
pub fn classify(
    query: &[f32],
    img: &BankSnapshot,
    txt: &BankSnapshot,
    prototypes: &PrototypeSet,
    params: &IntegrationParams,
    k: usize,
) -> Result<Classification> {
    Classifier::new(img, txt, prototypes, params, k)?.classify(query)
}

/// Prototype matching without retrieval or integration (`f^img = f^txt = f`).
pub fn prototype_only_logits(query: &[f32], prototypes: &PrototypeSet) -> Result<Vec<f32>> {
    if query.len() != prototypes.dim() {
        return Err(Error::ShapeMismatch { expected: prototypes.dim(), found: query.len() });
    }
    logits_for(prototypes, Branches::for_prototypes(prototypes), query, query)
}

pub fn prototype_only_classifier(query: &[f32], prototypes: &PrototypeSet) -> Result<ClassId> {
    let logits = prototype_only_logits(query, prototypes)?;
    Ok(prototypes.classes()[vector::argmax(&logits)].clone())
}

/// Cross-entropy of `softmax(τ · z)` at `target`, with its gradient w.r.t. `z`.
///
/// Logits are multiplied by the temperature: cosine logits live in `[-2, 2]`,
/// so larger `τ` sharpens the distribution.
pub fn softmax_cross_entropy(logits: &[f32], target: usize, tau: f32) -> (f32, Vec<f32>) {
    let scaled: Vec<f32> = logits.iter().map(|z| tau * z).collect();
    let max = scaled.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = scaled.iter().map(|s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - scaled[target];
    let grad = scaled
        .iter()
        .enumerate()
        .map(|(c, s)| tau * ((s - lse).exp() - if c == target { 1.0 } else { 0.0 }))
        .collect();
    (loss, grad)
}

/// Cross-entropy loss for one query.
pub fn loss(logits: &[f32], target: usize, tau: f32) -> Result<f32> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!("label index {target} outside {} classes", logits.len())));
    }
    Ok(softmax_cross_entropy(logits, target, tau).0)
}
