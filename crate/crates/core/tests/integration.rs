mod oracle;

use memmod::integration::{self, Branch, BranchParams, InitScheme, IntegrationParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    params: Vec<f32>,
    query: Vec<f32>,
    neighbors: Vec<Vec<f32>>,
}

fn instance(seed: u64, d: usize, k: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = IntegrationParams::init(seed, d, InitScheme::ScaledUniform).unwrap();
    let mut params = init.branch(Branch::Text).as_slice().to_vec();
    for x in params.iter_mut().filter(|x| **x == 0.0) {
        *x = rng.random_range(-0.3..0.3);
    }
    Instance { params, query: oracle::unit(&mut rng, d), neighbors: (0..k).map(|_| oracle::unit(&mut rng, d)).collect() }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

#[test]
fn forward_matches_reference() {
    for seed in 0..20 {
        let t = instance(seed, 8, 4);
        let out = integration::integrate(&t.query, &t.neighbors, BranchParams::new(8, &t.params).unwrap()).unwrap();
        let n64: Vec<Vec<f64>> = t.neighbors.iter().map(|n| widen(n)).collect();
        let want = oracle::integrate_f64(&widen(&t.params), &widen(&t.query), &n64);
        for (got, want) in out.integrated.iter().zip(&want) {
            assert!((f64::from(*got) - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let (d, k, h) = (8, 4, 1e-3);
    for seed in 0..10 {
        let t = instance(seed, d, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let upstream = oracle::gaussian(&mut rng, d);
        let grad = integration::integrate_backward(&t.query, &t.neighbors, BranchParams::new(d, &t.params).unwrap(), &upstream)
            .unwrap();
        let n64: Vec<Vec<f64>> = t.neighbors.iter().map(|n| widen(n)).collect();
        let (q64, u64_) = (widen(&t.query), widen(&upstream));
        let f = |p: &[f64]| oracle::integrate_f64(p, &q64, &n64).iter().zip(&u64_).map(|(a, b)| a * b).sum::<f64>();
        let p64 = widen(&t.params);
        for j in 0..p64.len() {
            let (mut a, mut b) = (p64.clone(), p64.clone());
            a[j] += h;
            b[j] -= h;
            let numeric = (f(&a) - f(&b)) / (2.0 * h);
            let analytic = f64::from(grad.params[j]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            assert!(rel < 1e-2, "seed {seed} param {j}: {analytic} vs {numeric}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_a_distribution(seed in any::<u64>(), d in 2usize..12, k in 1usize..10) {
        let t = instance(seed, d, k);
        let out = integration::integrate(&t.query, &t.neighbors, BranchParams::new(d, &t.params).unwrap()).unwrap();
        prop_assert_eq!(out.attention.len(), k);
        prop_assert!(out.attention.iter().all(|&a| (0.0..=1.0).contains(&a)));
        prop_assert!((out.attention.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn neighbor_order_only_permutes_attention(seed in any::<u64>(), d in 2usize..12, k in 2usize..10, shift in 1usize..9) {
        let t = instance(seed, d, k);
        let bp = BranchParams::new(d, &t.params).unwrap();
        let mut rotated = t.neighbors.clone();
        rotated.rotate_left(shift % k);
        let a = integration::integrate(&t.query, &t.neighbors, bp).unwrap();
        let b = integration::integrate(&t.query, &rotated, bp).unwrap();
        let mut expected = a.attention.clone();
        expected.rotate_left(shift % k);
        for (x, y) in expected.iter().zip(&b.attention) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.integrated.iter().zip(&b.integrated) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_parameters_pass_the_query_through(seed in any::<u64>(), d in 1usize..16, k in 1usize..8) {
        let t = instance(seed, d, k);
        let zeros = IntegrationParams::zeros(d);
        let out = integration::integrate(&t.query, &t.neighbors, zeros.branch(Branch::Image)).unwrap();
        prop_assert_eq!(out.integrated, t.query);
    }
}
