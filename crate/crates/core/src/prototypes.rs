//! Class prototypes. Zero-shot prototypes come from cross-modal consensus:
//! each image item of a class is scored by its summed cosine similarity to
//! every text item of the same class, and the top-`m` scorers are averaged
//! (and symmetrically for text). Few-shot prototypes average labeled supports.
//!
//! All prototypes are L2-normalized after averaging.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{BankSnapshot, ClassId, Modality, RawVectors};
use crate::vector;

/// Top-M used for consensus prototypes when nothing else is configured.
pub const DEFAULT_TOP_M: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    ZeroShotConsensus,
    FewShotSupport,
    SingleModalityImage,
    SingleModalityText,
    AllMean,
    RandomSubset,
}

impl PrototypeSource {
    fn code(self) -> u8 {
        match self {
            Self::ZeroShotConsensus => 0,
            Self::FewShotSupport => 1,
            Self::SingleModalityImage => 2,
            Self::SingleModalityText => 3,
            Self::AllMean => 4,
            Self::RandomSubset => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::ZeroShotConsensus,
            1 => Self::FewShotSupport,
            2 => Self::SingleModalityImage,
            3 => Self::SingleModalityText,
            4 => Self::AllMean,
            5 => Self::RandomSubset,
            _ => return None,
        })
    }
}

/// Ablation variants of prototype construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeVariant {
    AllMean,
    RandomM,
    ImageOnly,
    TextOnly,
    Consensus,
}

/// Per-class image and text prototypes. A missing modality is `None`, never
/// filled with placeholder values.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    dim: usize,
    classes: Vec<ClassId>,
    image: Option<Vec<f32>>,
    text: Option<Vec<f32>>,
    source: PrototypeSource,
}

impl PrototypeSet {
    /// Classes must be sorted by id; each present side holds `classes.len() × dim`
    /// unit vectors.
    pub fn new(
        dim: usize,
        classes: Vec<ClassId>,
        image: Option<Vec<f32>>,
        text: Option<Vec<f32>>,
        source: PrototypeSource,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("prototype set needs at least one class"));
        }
        if classes.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::invalid("prototype classes must be sorted by unique id"));
        }
        if image.is_none() && text.is_none() {
            return Err(Error::invalid("prototype set has neither modality"));
        }
        for side in [&image, &text].into_iter().flatten() {
            if side.len() != classes.len() * dim {
                return Err(Error::ShapeMismatch { expected: classes.len() * dim, found: side.len() });
            }
            if !vector::all_finite(side) {
                return Err(Error::invalid("prototype contains non-finite values"));
            }
        }
        Ok(Self { dim, classes, image, text, source })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn source(&self) -> PrototypeSource {
        self.source
    }

    /// Position of a class id in the prototype order.
    pub fn class_index(&self, id: u32) -> Option<usize> {
        self.classes.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }

    pub fn has_text(&self) -> bool {
        self.text.is_some()
    }

    pub fn image(&self, class_index: usize) -> Option<&[f32]> {
        self.image.as_deref().map(|p| &p[class_index * self.dim..(class_index + 1) * self.dim])
    }

    pub fn text(&self, class_index: usize) -> Option<&[f32]> {
        self.text.as_deref().map(|p| &p[class_index * self.dim..(class_index + 1) * self.dim])
    }

    /// Flat `C × d` image prototypes.
    pub fn image_matrix(&self) -> Option<&[f32]> {
        self.image.as_deref()
    }

    pub fn text_matrix(&self) -> Option<&[f32]> {
        self.text.as_deref()
    }
}

/// Indices (into `candidates`) of the `m` candidates with the largest summed
/// cosine similarity to all `references`; ties to the lower index. Returned in
/// ascending index order.
pub fn consensus_select(candidates: &[&[f32]], references: &[&[f32]], m: usize) -> Vec<usize> {
    let d = candidates.first().map_or(0, |c| c.len());
    let mut reference_sum = vec![0.0f32; d];
    for r in references {
        vector::add_assign(&mut reference_sum, r);
    }
    let mut scored: Vec<(f32, usize)> =
        candidates.iter().enumerate().map(|(i, c)| (vector::dot(c, &reference_sum), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = scored.into_iter().take(m).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

fn mean_direction(vectors: &[&[f32]], dim: usize) -> Result<Vec<f32>> {
    let mut sum = vec![0.0f32; dim];
    for v in vectors {
        vector::add_assign(&mut sum, v);
    }
    let n = vectors.len() as f32;
    sum.iter_mut().for_each(|x| *x /= n);
    vector::normalized(&sum).ok_or_else(|| Error::invalid("class items average to the zero vector"))
}

fn grouped(bank: &BankSnapshot) -> BTreeMap<u32, Vec<&[f32]>> {
    let mut out: BTreeMap<u32, Vec<&[f32]>> = BTreeMap::new();
    for i in 0..bank.len() {
        out.entry(bank.label(i)).or_default().push(bank.vector(i));
    }
    out
}

fn check_pair(img: &BankSnapshot, txt: &BankSnapshot) -> Result<Vec<ClassId>> {
    if img.dim() != txt.dim() {
        return Err(Error::ShapeMismatch { expected: img.dim(), found: txt.dim() });
    }
    let a: BTreeSet<u32> = img.class_ids().into_iter().collect();
    let b: BTreeSet<u32> = txt.class_ids().into_iter().collect();
    if a != b {
        return Err(Error::ClassSetMismatch);
    }
    Ok(sorted_classes(img))
}

fn sorted_classes(bank: &BankSnapshot) -> Vec<ClassId> {
    let mut classes = bank.classes().to_vec();
    classes.sort_by_key(|c| c.id);
    classes
}

fn flatten(rows: Vec<Vec<f32>>) -> Vec<f32> {
    rows.into_iter().flatten().collect()
}

/// Consensus top-`m` prototypes for both modalities. Classes with fewer than
/// `m` items on a side use all of them.
pub fn consensus_prototypes(img: &BankSnapshot, txt: &BankSnapshot, m: usize) -> Result<PrototypeSet> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let classes = check_pair(img, txt)?;
    let (gi, gt) = (grouped(img), grouped(txt));
    let d = img.dim();
    let (image, text): (Vec<_>, Vec<_>) = classes
        .par_iter()
        .map(|c| {
            let (vi, vt) = (&gi[&c.id], &gt[&c.id]);
            let si: Vec<&[f32]> = consensus_select(vi, vt, m).into_iter().map(|i| vi[i]).collect();
            let st: Vec<&[f32]> = consensus_select(vt, vi, m).into_iter().map(|i| vt[i]).collect();
            Ok((mean_direction(&si, d)?, mean_direction(&st, d)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    PrototypeSet::new(d, classes, Some(flatten(image)), Some(flatten(text)), PrototypeSource::ZeroShotConsensus)
}

/// Few-shot prototypes: the image side averages the supports of each class.
/// With a text bank, each class's text prototype is the consensus top-`m` of
/// its text items scored against that class's supports.
pub fn support_prototypes(
    supports: &[(ClassId, Vec<f32>)],
    txt: Option<&BankSnapshot>,
    m: usize,
) -> Result<PrototypeSet> {
    if supports.is_empty() {
        return Err(Error::invalid("no supports given"));
    }
    let d = supports[0].1.len();
    let mut by_class: BTreeMap<u32, (ClassId, Vec<Vec<f32>>)> = BTreeMap::new();
    for (c, v) in supports {
        if v.len() != d {
            return Err(Error::ShapeMismatch { expected: d, found: v.len() });
        }
        let v = vector::normalized(v).ok_or_else(|| Error::invalid("support vector is zero or non-finite"))?;
        by_class.entry(c.id).or_insert_with(|| (c.clone(), Vec::new())).1.push(v);
    }
    let classes: Vec<ClassId> = by_class.values().map(|(c, _)| c.clone()).collect();
    let image = by_class
        .values()
        .map(|(_, vs)| mean_direction(&vs.iter().map(Vec::as_slice).collect::<Vec<_>>(), d))
        .collect::<Result<Vec<_>>>()?;
    let (text, source) = match txt {
        Some(txt) => {
            if txt.dim() != d {
                return Err(Error::ShapeMismatch { expected: d, found: txt.dim() });
            }
            let gt = grouped(txt);
            let rows = by_class
                .iter()
                .map(|(id, (_, vs))| {
                    let vt = gt.get(id).ok_or(Error::ClassSetMismatch)?;
                    let refs: Vec<&[f32]> = vs.iter().map(Vec::as_slice).collect();
                    let st: Vec<&[f32]> = consensus_select(vt, &refs, m).into_iter().map(|i| vt[i]).collect();
                    mean_direction(&st, d)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(flatten(rows)), PrototypeSource::FewShotSupport)
        }
        None => (None, PrototypeSource::FewShotSupport),
    };
    PrototypeSet::new(d, classes, Some(flatten(image)), text, source)
}

/// Builds one of the prototype ablation variants. `seed` only matters for
/// [`PrototypeVariant::RandomM`].
pub fn prototype_variant(
    img: &BankSnapshot,
    txt: &BankSnapshot,
    variant: PrototypeVariant,
    m: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    match variant {
        PrototypeVariant::Consensus => consensus_prototypes(img, txt, m),
        PrototypeVariant::ImageOnly | PrototypeVariant::TextOnly => {
            let full = consensus_prototypes(img, txt, m)?;
            let (image, text, source) = if variant == PrototypeVariant::ImageOnly {
                (full.image, None, PrototypeSource::SingleModalityImage)
            } else {
                (None, full.text, PrototypeSource::SingleModalityText)
            };
            PrototypeSet::new(full.dim, full.classes, image, text, source)
        }
        PrototypeVariant::AllMean => {
            let classes = check_pair(img, txt)?;
            let (gi, gt) = (grouped(img), grouped(txt));
            let d = img.dim();
            let image = classes.iter().map(|c| mean_direction(&gi[&c.id], d)).collect::<Result<Vec<_>>>()?;
            let text = classes.iter().map(|c| mean_direction(&gt[&c.id], d)).collect::<Result<Vec<_>>>()?;
            PrototypeSet::new(d, classes, Some(flatten(image)), Some(flatten(text)), PrototypeSource::AllMean)
        }
        PrototypeVariant::RandomM => {
            let classes = check_pair(img, txt)?;
            let (gi, gt) = (grouped(img), grouped(txt));
            let d = img.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick = |vs: &Vec<&[f32]>| -> Result<Vec<f32>> {
                let mut idx = index::sample(&mut rng, vs.len(), m.min(vs.len())).into_vec();
                idx.sort_unstable();
                mean_direction(&idx.into_iter().map(|i| vs[i]).collect::<Vec<_>>(), d)
            };
            let mut image = Vec::new();
            let mut text = Vec::new();
            for c in &classes {
                image.push(pick(&gi[&c.id])?);
                text.push(pick(&gt[&c.id])?);
            }
            PrototypeSet::new(d, classes, Some(flatten(image)), Some(flatten(text)), PrototypeSource::RandomSubset)
        }
    }
}

const HAS_IMAGE: u8 = 0b01;
const HAS_TEXT: u8 = 0b10;

/// Prototype files reuse the MMLM layout with modality code 2. The reserved
/// byte carries presence flags (bit 0 image, bit 1 text) and the source code in
/// the high nibble. Items are all image prototypes in class order, then all
/// text prototypes.
pub fn encode_prototypes(set: &PrototypeSet) -> Result<Vec<u8>> {
    let mut flags = set.source.code() << 4;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (flag, side) in [(HAS_IMAGE, &set.image), (HAS_TEXT, &set.text)] {
        if let Some(side) = side {
            flags |= flag;
            labels.extend(set.classes.iter().map(|c| c.id));
            data.extend_from_slice(side);
        }
    }
    RawVectors {
        modality: Modality::Prototype.code(),
        reserved: flags,
        dim: set.dim,
        classes: set.classes.clone(),
        labels,
        data,
    }
    .encode()
}

pub fn decode_prototypes(bytes: &[u8]) -> Result<PrototypeSet> {
    let raw = RawVectors::decode(bytes)?;
    if raw.modality != Modality::Prototype.code() {
        return Err(Error::MalformedHeader(format!("expected prototype modality, found {}", raw.modality)));
    }
    let source = PrototypeSource::from_code(raw.reserved >> 4)
        .ok_or_else(|| Error::MalformedHeader("unknown prototype source".into()))?;
    let (has_image, has_text) = (raw.reserved & HAS_IMAGE != 0, raw.reserved & HAS_TEXT != 0);
    let c = raw.classes.len();
    let sides = has_image as usize + has_text as usize;
    if raw.labels.len() != c * sides {
        return Err(Error::MalformedHeader("prototype count does not match class table".into()));
    }
    let block = c * raw.dim;
    let mut data = raw.data;
    let text = has_text.then(|| data.split_off(data.len() - block));
    let image = has_image.then_some(data);
    PrototypeSet::new(raw.dim, raw.classes, image, text, source)
}

pub fn save_prototypes(set: &PrototypeSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_prototypes(set)?)?;
    Ok(())
}

pub fn load_prototypes(path: impl AsRef<Path>) -> Result<PrototypeSet> {
    decode_prototypes(&fs::read(path)?)
}
