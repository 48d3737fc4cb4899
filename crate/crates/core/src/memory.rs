//! Memory banks: class-tagged, unit-normalized embedding collections for one
//! modality, the immutable snapshots that retrieval binds to, and the MMLM
//! binary file format.
//!
//! MMLM layout (little-endian):
//!
//! ```text
//! "MMLM" | version u16 = 1 | modality u8 | reserved u8 | dim u32 | item_count u64
//! | class_table_count u32 | (class_id u32, name_len u16, name utf-8)*
//! | (class_id u32, dim × f32)*
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

pub const MMLM_MAGIC: &[u8; 4] = b"MMLM";
pub const MMLM_VERSION: u16 = 1;

/// Stored vectors whose norm is already this close to 1 are kept bit-for-bit.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    /// Only used by prototype files; banks are always image or text.
    Prototype,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Prototype => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            2 => Some(Modality::Prototype),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Prototype => "prototype",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId {
    pub id: u32,
    pub name: String,
}

impl ClassId {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Self { id, name: name.into() }
    }
}

/// An immutable collection of `(class, unit vector)` items sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    modality: Modality,
    dim: usize,
    classes: Vec<ClassId>,
    labels: Vec<u32>,
    data: Vec<f32>,
}

impl MemoryBank {
    /// Builds a bank from items. The class table follows first appearance.
    /// Vectors are normalized unless already within [`UNIT_NORM_TOLERANCE`].
    pub fn from_items(
        modality: Modality,
        dim: usize,
        items: impl IntoIterator<Item = (ClassId, Vec<f32>)>,
    ) -> Result<Self> {
        let mut classes: Vec<ClassId> = Vec::new();
        let mut seen: HashMap<u32, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (class, v) in items {
            if v.len() != dim {
                return Err(Error::ShapeMismatch { expected: dim, found: v.len() });
            }
            match seen.get(&class.id) {
                Some(&slot) if classes[slot].name != class.name => {
                    return Err(Error::ConflictingClassName {
                        id: class.id,
                        first: classes[slot].name.clone(),
                        second: class.name,
                    })
                }
                Some(_) => {}
                None => {
                    seen.insert(class.id, classes.len());
                    labels.push(class.id);
                    classes.push(class);
                    data.extend_from_slice(&v);
                    continue;
                }
            }
            labels.push(class.id);
            data.extend_from_slice(&v);
        }
        Self::from_parts(modality, dim, classes, labels, data)
    }

    pub(crate) fn from_parts(
        modality: Modality,
        dim: usize,
        classes: Vec<ClassId>,
        labels: Vec<u32>,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBank);
        }
        debug_assert_eq!(data.len(), labels.len() * dim);
        let mut ids = HashSet::new();
        for c in &classes {
            if !ids.insert(c.id) {
                return Err(Error::ClassCollision(c.id));
            }
            if c.name.is_empty() {
                return Err(Error::EmptyClassName(c.id));
            }
        }
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &l in &labels {
            if !ids.contains(&l) {
                return Err(Error::UnknownClass(l));
            }
            *counts.entry(l).or_default() += 1;
        }
        if let Some(c) = classes.iter().find(|c| !counts.contains_key(&c.id)) {
            return Err(Error::EmptyClass(c.id));
        }
        for (item, v) in data.chunks_exact_mut(dim).enumerate() {
            if !vector::all_finite(v) {
                return Err(Error::NonFinite { item });
            }
            let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroVector { item });
            }
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
            }
        }
        Ok(Self { modality, dim, classes, labels, data })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class table in storage order.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&ClassId> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn label(&self, index: usize) -> u32 {
        self.labels[index]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Flat row-major storage, `len() × dim()` entries.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Per-class item counts `N_c`, keyed by class id.
    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_default() += 1;
        }
        counts
    }

    /// Bank indices of the items of one class, ascending.
    pub fn indices_of(&self, id: u32) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == id).map(|(i, _)| i).collect()
    }

    /// Items as owned `(class, vector)` pairs, in storage order.
    pub fn items(&self) -> Vec<(ClassId, Vec<f32>)> {
        (0..self.len())
            .map(|i| (self.class(self.labels[i]).cloned().expect("label in table"), self.vector(i).to_vec()))
            .collect()
    }

    /// A new bank keeping only the given indices (in the given order).
    /// Classes left without items disappear from the class table.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let kept: HashSet<u32> = indices.iter().map(|&i| self.labels[i]).collect();
        let classes = self.classes.iter().filter(|c| kept.contains(&c.id)).cloned().collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.vector(i));
        }
        Self::from_parts(self.modality, self.dim, classes, labels, data)
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

/// A frozen, versioned view of a bank. Cloning is cheap; mutations return a
/// new snapshot with a larger version and never touch this one.
#[derive(Clone, Debug)]
pub struct BankSnapshot {
    version: u64,
    bank: Arc<MemoryBank>,
}

impl BankSnapshot {
    pub fn new(bank: MemoryBank) -> Self {
        Self { version: NEXT_VERSION.fetch_add(1, Ordering::Relaxed), bank: Arc::new(bank) }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    fn successor(&self, bank: MemoryBank) -> Self {
        let next = NEXT_VERSION.fetch_add(1, Ordering::Relaxed).max(self.version + 1);
        Self { version: next, bank: Arc::new(bank) }
    }

    /// Full replacement: the result holds exactly `new_items`; classes not
    /// mentioned are dropped.
    pub fn replace_classes(&self, new_items: Vec<(ClassId, Vec<f32>)>) -> Result<Self> {
        if new_items.is_empty() {
            return Err(Error::EmptyBank);
        }
        let bank = MemoryBank::from_items(self.modality, self.dim, new_items)?;
        Ok(self.successor(bank))
    }

    /// Union with new classes. Existing items are copied bit-for-bit.
    pub fn expand_classes(&self, new_items: Vec<(ClassId, Vec<f32>)>) -> Result<Self> {
        let existing: HashSet<u32> = self.classes.iter().map(|c| c.id).collect();
        if let Some((c, _)) = new_items.iter().find(|(c, _)| existing.contains(&c.id)) {
            return Err(Error::ClassCollision(c.id));
        }
        let added = MemoryBank::from_items(self.modality, self.dim, new_items)?;
        let mut classes = self.classes.clone();
        classes.extend(added.classes);
        let mut labels = self.labels.clone();
        labels.extend(added.labels);
        let mut data = self.data.clone();
        data.extend(added.data);
        let bank = MemoryBank::from_parts(self.modality, self.dim, classes, labels, data)?;
        Ok(self.successor(bank))
    }

    /// Keeps the given indices only (herding, budget enforcement).
    pub fn retain(&self, indices: &[usize]) -> Result<Self> {
        Ok(self.successor(self.bank.select(indices)?))
    }

    /// Keeps at most `per_class` items of every class, chosen uniformly at
    /// random under `seed`; surviving items keep their relative order.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::invalid("per-class sample size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for c in &self.classes {
            let idx = self.indices_of(c.id);
            if idx.len() <= per_class {
                keep.extend(idx);
            } else {
                let mut picked: Vec<usize> =
                    index::sample(&mut rng, idx.len(), per_class).into_iter().map(|j| idx[j]).collect();
                picked.sort_unstable();
                keep.extend(picked);
            }
        }
        keep.sort_unstable();
        self.retain(&keep)
    }
}

impl Deref for BankSnapshot {
    type Target = MemoryBank;

    fn deref(&self) -> &MemoryBank {
        &self.bank
    }
}

/// Structural contents of an MMLM-layout file before bank invariants apply.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RawVectors {
    pub modality: u8,
    pub reserved: u8,
    pub dim: usize,
    pub classes: Vec<ClassId>,
    pub labels: Vec<u32>,
    pub data: Vec<f32>,
}

impl RawVectors {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        let n_classes =
            u32::try_from(self.classes.len()).map_err(|_| Error::invalid("too many classes"))?;
        let mut out = Vec::with_capacity(24 + self.data.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(MMLM_MAGIC);
        out.extend_from_slice(&MMLM_VERSION.to_le_bytes());
        out.push(self.modality);
        out.push(self.reserved);
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&n_classes.to_le_bytes());
        for c in &self.classes {
            let name = c.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("class name for {} too long", c.id)))?;
            out.extend_from_slice(&c.id.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
        }
        for (label, v) in self.labels.iter().zip(self.data.chunks_exact(self.dim)) {
            out.extend_from_slice(&label.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = |m: &str| Error::MalformedHeader(m.to_string());
        if r.take(4).ok_or_else(|| header("file shorter than magic"))? != MMLM_MAGIC {
            return Err(header("bad magic"));
        }
        let version = r.u16().ok_or_else(|| header("missing version"))?;
        if version != MMLM_VERSION {
            return Err(Error::MalformedHeader(format!("unsupported version {version}")));
        }
        let modality = r.u8().ok_or_else(|| header("missing modality"))?;
        let reserved = r.u8().ok_or_else(|| header("missing reserved byte"))?;
        let dim = r.u32().ok_or_else(|| header("missing dim"))? as usize;
        let count = r.u64().ok_or_else(|| header("missing item count"))?;
        let n_classes = r.u32().ok_or_else(|| header("missing class table count"))?;
        if dim == 0 {
            return Err(header("dimension is zero"));
        }
        let mut classes = Vec::new();
        for _ in 0..n_classes {
            let id = r.u32().ok_or_else(|| header("truncated class table"))?;
            let len = r.u16().ok_or_else(|| header("truncated class table"))? as usize;
            let name = r.take(len).ok_or_else(|| header("truncated class name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::MalformedHeader(format!("class {id} name is not UTF-8")))?;
            classes.push(ClassId::new(id, name));
        }
        if count == 0 {
            return Err(Error::EmptyBank);
        }
        let remaining = bytes.len() - r.pos;
        let record = 4 + 4 * dim;
        let expected = usize::try_from(count)
            .ok()
            .and_then(|n| n.checked_mul(record))
            .ok_or_else(|| header("item count overflows"))?;
        if remaining != expected {
            let n = count as usize;
            if remaining.is_multiple_of(n) && remaining / n > 4 && (remaining / n - 4).is_multiple_of(4) {
                return Err(Error::DimensionMismatch { declared: dim, found: (remaining / n - 4) / 4 });
            }
            return Err(Error::TruncatedPayload { expected, found: remaining });
        }
        let n = count as usize;
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for item in 0..n {
            labels.push(r.u32().expect("length checked"));
            for _ in 0..dim {
                let x = f32::from_le_bytes(r.take(4).expect("length checked").try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::NonFinite { item });
                }
                data.push(x);
            }
        }
        Ok(Self { modality, reserved, dim, classes, labels, data })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn encode_bank(bank: &MemoryBank) -> Result<Vec<u8>> {
    RawVectors {
        modality: bank.modality.code(),
        reserved: 0,
        dim: bank.dim,
        classes: bank.classes.clone(),
        labels: bank.labels.clone(),
        data: bank.data.clone(),
    }
    .encode()
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let raw = RawVectors::decode(bytes)?;
    let modality = match Modality::from_code(raw.modality) {
        Some(m @ (Modality::Image | Modality::Text)) => m,
        _ => return Err(Error::MalformedHeader(format!("bank modality code {}", raw.modality))),
    };
    if raw.reserved != 0 {
        return Err(Error::MalformedHeader("reserved byte is not zero".into()));
    }
    MemoryBank::from_parts(modality, raw.dim, raw.classes, raw.labels, raw.data)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<MemoryBank> {
    decode_bank(&fs::read(path)?)
}

pub fn save_bank(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    fs::write(path, encode_bank(bank)?)?;
    Ok(())
}

/// Writes the human-readable sidecar: one `class_id<TAB>name` line per class.
pub fn write_manifest(bank: &MemoryBank, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for c in bank.classes() {
        out.push_str(&format!("{}\t{}\n", c.id, c.name));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ClassId>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected class_id<TAB>name".into() })?;
        let id = id
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad class id {id:?}") })?;
        out.push(ClassId::new(id, name));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[hot] = 1.0;
        v
    }

    fn two_class_bank() -> MemoryBank {
        let a = ClassId::new(0, "apple");
        let b = ClassId::new(1, "banana");
        let items = (0..3)
            .flat_map(|i| [(a.clone(), unit(4, i)), (b.clone(), unit(4, 3 - i))])
            .collect::<Vec<_>>();
        MemoryBank::from_items(Modality::Image, 4, items).unwrap()
    }

    #[test]
    fn load_counts_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.mmlm");
        save_bank(&two_class_bank(), &path).unwrap();
        let bank = load_bank(&path).unwrap();
        assert_eq!(bank.len(), 6);
        assert_eq!(bank.class_counts().into_iter().collect::<Vec<_>>(), vec![(0, 3), (1, 3)]);
    }

    #[test]
    fn load_normalizes() {
        let raw = RawVectors {
            modality: 0,
            reserved: 0,
            dim: 2,
            classes: vec![ClassId::new(3, "x")],
            labels: vec![3],
            data: vec![3.0, 4.0],
        };
        let bank = decode_bank(&raw.encode().unwrap()).unwrap();
        assert_eq!(bank.vector(0), &[0.6, 0.8]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        // header says d=8, payload written with d=7
        let raw = RawVectors {
            modality: 0,
            reserved: 0,
            dim: 7,
            classes: vec![ClassId::new(0, "a")],
            labels: vec![0, 0],
            data: vec![0.5; 14],
        };
        let mut bytes = raw.encode().unwrap();
        bytes[8..12].copy_from_slice(&8u32.to_le_bytes());
        match decode_bank(&bytes) {
            Err(Error::DimensionMismatch { declared: 8, found: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let raw = RawVectors {
            modality: 1,
            reserved: 0,
            dim: 2,
            classes: vec![ClassId::new(0, "a")],
            labels: vec![0, 0],
            data: vec![1.0, 0.0, f32::NAN, 1.0],
        };
        assert!(matches!(decode_bank(&raw.encode().unwrap()), Err(Error::NonFinite { item: 1 })));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_bank(b"MML"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_bank(b"XXXX\x01\x00"), Err(Error::MalformedHeader(_))));
        let mut bytes = encode_bank(&two_class_bank()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_bank(&bytes), Err(Error::MalformedHeader(_))));
        let mut bytes = encode_bank(&two_class_bank()).unwrap();
        bytes[6] = 7;
        assert!(matches!(decode_bank(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn zero_items_is_empty_bank() {
        let raw = RawVectors {
            modality: 0,
            reserved: 0,
            dim: 4,
            classes: vec![],
            labels: vec![],
            data: vec![],
        };
        assert!(matches!(decode_bank(&raw.encode().unwrap()), Err(Error::EmptyBank)));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_bank(&two_class_bank()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_bank(&bytes), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn replace_drops_unmentioned_classes() {
        let snap = BankSnapshot::new(two_class_bank());
        let c = ClassId::new(7, "cherry");
        let d = ClassId::new(8, "date");
        let next = snap.replace_classes(vec![(c, unit(4, 0)), (d, unit(4, 1))]).unwrap();
        assert_eq!(next.class_ids(), vec![7, 8]);
        assert!(next.version() > snap.version());
        assert_eq!(snap.class_ids(), vec![0, 1]);
    }

    #[test]
    fn replace_reusing_id() {
        let snap = BankSnapshot::new(two_class_bank());
        let a2 = ClassId::new(0, "apple");
        let next = snap.replace_classes(vec![(a2, vec![0.0, 0.0, 0.6, 0.8])]).unwrap();
        assert_eq!(next.class_ids(), vec![0]);
        assert_eq!(next.vector(0), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn replace_with_nothing_fails() {
        let snap = BankSnapshot::new(two_class_bank());
        assert!(matches!(snap.replace_classes(vec![]), Err(Error::EmptyBank)));
    }

    #[test]
    fn replace_dimension_mismatch() {
        let snap = BankSnapshot::new(two_class_bank());
        let r = snap.replace_classes(vec![(ClassId::new(1, "b"), vec![1.0; 5])]);
        assert!(matches!(r, Err(Error::ShapeMismatch { expected: 4, found: 5 })));
    }

    #[test]
    fn expand_keeps_existing_bits() {
        let a = ClassId::new(0, "a");
        let b = ClassId::new(1, "b");
        let first = MemoryBank::from_items(
            Modality::Text,
            3,
            (0..3).map(|i| (a.clone(), vec![0.1 * i as f32 + 0.3, 0.2, -0.7])),
        )
        .unwrap();
        let snap = BankSnapshot::new(first);
        let next = snap.expand_classes((0..5).map(|_| (b.clone(), vec![0.0, 1.0, 0.0])).collect()).unwrap();
        assert_eq!(next.len(), 8);
        assert_eq!(&next.data()[..9], snap.data());
        assert!(matches!(
            next.expand_classes(vec![(a, vec![1.0, 0.0, 0.0])]),
            Err(Error::ClassCollision(0))
        ));
    }

    #[test]
    fn save_empty_or_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing-dir").join("b.mmlm");
        assert!(matches!(save_bank(&two_class_bank(), &bad), Err(Error::Io(_))));
    }

    #[test]
    fn conflicting_names_rejected() {
        let r = MemoryBank::from_items(
            Modality::Image,
            2,
            vec![(ClassId::new(0, "a"), vec![1.0, 0.0]), (ClassId::new(0, "b"), vec![0.0, 1.0])],
        );
        assert!(matches!(r, Err(Error::ConflictingClassName { .. })));
        let r = MemoryBank::from_items(Modality::Image, 2, vec![(ClassId::new(0, ""), vec![1.0, 0.0])]);
        assert!(matches!(r, Err(Error::EmptyClassName(0))));
    }

    #[test]
    fn class_table_without_items_rejected() {
        let raw = RawVectors {
            modality: 0,
            reserved: 0,
            dim: 2,
            classes: vec![ClassId::new(0, "a"), ClassId::new(1, "b")],
            labels: vec![0],
            data: vec![1.0, 0.0],
        };
        assert!(matches!(decode_bank(&raw.encode().unwrap()), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.tsv");
        let bank = two_class_bank();
        write_manifest(&bank, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), bank.classes());
    }

    #[test]
    fn subsample_is_seeded_and_bounded() {
        let snap = BankSnapshot::new(two_class_bank());
        let a = snap.subsample_per_class(2, 5).unwrap();
        let b = snap.subsample_per_class(2, 5).unwrap();
        assert_eq!(a.bank(), b.bank());
        assert_eq!(a.class_counts().values().copied().collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(snap.subsample_per_class(10, 0).unwrap().bank(), snap.bank());
    }
}
