//! Reference implementations the engine is checked against. They favor the
//! most literal formulation over speed: full sorts, f64 arithmetic, explicit
//! loops.

#![allow(dead_code)]

use memmod::memory::{BankSnapshot, ClassId, MemoryBank, Modality};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    let v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random unit-norm bank with `n` items spread over `classes` classes.
/// Roughly one item in `dup_every` is an exact copy of an earlier one, so
/// score ties actually occur.
pub fn random_bank(rng: &mut impl Rng, n: usize, d: usize, classes: u32, dup_every: usize) -> BankSnapshot {
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && dup_every > 0 && rng.random_range(0..dup_every) == 0 {
            let j = rng.random_range(0..i);
            rows.push(rows[j].clone());
        } else {
            rows.push(unit(rng, d));
        }
    }
    let items = rows.into_iter().enumerate().map(|(i, v)| {
        let c = i as u32 % classes;
        (ClassId::new(c, format!("c{c}")), v)
    });
    BankSnapshot::new(MemoryBank::from_items(Modality::Image, d, items).unwrap())
}

/// Left-to-right f32 dot product.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Top-k by a full stable sort on descending score, so equal scores keep
/// ascending index order.
pub fn stable_top_k(query: &[f32], bank: &BankSnapshot, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f32, usize)> = (0..bank.len()).map(|i| (dot_f32(query, bank.vector(i)), i)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One branch of the attention integration in f64, straight from the formula
/// `f + Σ_k softmax_k(Q(f)·K(n_k)/√d) V(n_k)` with `P(x) = silu(W x + b)`.
/// `params` follows the branch layout `W_Q, b_Q, W_K, b_K, W_V, b_V`.
pub fn integrate_f64(params: &[f64], query: &[f64], neighbors: &[Vec<f64>]) -> Vec<f64> {
    let d = query.len();
    let block = d * d + d;
    let affine = |p: usize, x: &[f64]| -> Vec<f64> {
        let w = &params[p * block..p * block + d * d];
        let b = &params[p * block + d * d..(p + 1) * block];
        (0..d).map(|i| silu((0..d).map(|j| w[i * d + j] * x[j]).sum::<f64>() + b[i])).collect()
    };
    let q = affine(0, query);
    let scores: Vec<f64> = neighbors
        .iter()
        .map(|n| {
            let k = affine(1, n);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut out = query.to_vec();
    for (n, e) in neighbors.iter().zip(&exp) {
        let v = affine(2, n);
        for i in 0..d {
            out[i] += e / z * v[i];
        }
    }
    out
}

/// Indices of the `quota` items closest in cosine to the item mean, found by
/// ranking every item against every other; returned ascending.
pub fn herd_oracle(items: &[Vec<f32>], quota: usize) -> Vec<usize> {
    let d = items[0].len();
    let mut mean = vec![0.0f64; d];
    for v in items {
        for i in 0..d {
            mean[i] += f64::from(v[i]) / items.len() as f64;
        }
    }
    let mnorm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = items
        .iter()
        .map(|v| {
            let vn = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            v.iter().zip(&mean).map(|(a, b)| f64::from(*a) * b).sum::<f64>() / (vn * mnorm)
        })
        .collect();
    (0..items.len())
        .filter(|&i| {
            let better = (0..items.len()).filter(|&j| cos[j] > cos[i] || (cos[j] == cos[i] && j < i)).count();
            better < quota
        })
        .collect()
}
