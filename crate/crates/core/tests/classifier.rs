mod oracle;

use memmod::classifier::{self, Classifier};
use memmod::integration::{Branch, InitScheme, IntegrationParams};
use memmod::memory::{BankSnapshot, ClassId, MemoryBank, Modality};
use memmod::{prototypes, vector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bank(rng: &mut ChaCha8Rng, modality: Modality, classes: u32, n: usize, d: usize) -> BankSnapshot {
    let items = (0..n).map(|i| {
        let c = i as u32 % classes;
        (ClassId::new(c, format!("class {c}")), oracle::unit(rng, d))
    });
    BankSnapshot::new(MemoryBank::from_items(modality, d, items).unwrap())
}

fn cos64(a: &[f64], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * f64::from(*y)).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn end_to_end_matches_reference_pipeline() {
    let (c, d, k) = (4, 8, 5);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = bank(&mut rng, Modality::Image, c, 20, d);
        let txt = bank(&mut rng, Modality::Text, c, 20, d);
        let protos = prototypes::consensus_prototypes(&img, &txt, 3).unwrap();
        let params = IntegrationParams::init(seed, d, InitScheme::ScaledUniform).unwrap();
        let query = oracle::unit(&mut rng, d);
        let got = classifier::classify(&query, &img, &txt, &protos, &params, k).unwrap();

        let q64: Vec<f64> = query.iter().map(|&x| f64::from(x)).collect();
        let branch = |bank: &BankSnapshot, b: Branch| {
            let nb: Vec<Vec<f64>> = oracle::stable_top_k(&query, bank, k)
                .into_iter()
                .map(|i| bank.vector(i).iter().map(|&x| f64::from(x)).collect())
                .collect();
            let p: Vec<f64> = params.branch(b).as_slice().iter().map(|&x| f64::from(x)).collect();
            oracle::integrate_f64(&p, &q64, &nb)
        };
        let (fi, ft) = (branch(&img, Branch::Image), branch(&txt, Branch::Text));
        for ci in 0..c as usize {
            let want = cos64(&ft, protos.text(ci).unwrap()) + cos64(&fi, protos.image(ci).unwrap());
            assert!((f64::from(got.logits[ci]) - want).abs() < 1e-6, "class {ci}: {} vs {want}", got.logits[ci]);
        }
        assert_eq!(got.predicted_index, vector::argmax(&got.logits));
        assert_eq!(got.predicted.id, protos.classes()[got.predicted_index].id);
    }
}

#[test]
fn uniform_logits_give_log_c() {
    for tau in [1.0, 4.0, 16.0, 64.0] {
        let l = classifier::loss(&[0.3; 7], 2, tau).unwrap();
        assert!((l - 7f32.ln()).abs() < 1e-6);
    }
}

#[test]
fn classifier_reports_retrieved_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = bank(&mut rng, Modality::Image, 3, 30, 6);
    let txt = bank(&mut rng, Modality::Text, 3, 30, 6);
    let protos = prototypes::consensus_prototypes(&img, &txt, 4).unwrap();
    let params = IntegrationParams::zeros(6);
    let clf = Classifier::new(&img, &txt, &protos, &params, 7).unwrap();
    let q = oracle::unit(&mut rng, 6);
    let nb = clf.retrieve(&q).unwrap();
    assert_eq!(nb.image.neighbor_indices, oracle::stable_top_k(&q, &img, 7));
    assert_eq!(nb.text.neighbor_indices, oracle::stable_top_k(&q, &txt, 7));
}

proptest! {
    #[test]
    fn scaling_logits_keeps_the_argmax(logits in proptest::collection::vec(-2.0f32..2.0, 2..20), scale in 0.01f32..100.0) {
        let scaled: Vec<f32> = logits.iter().map(|z| z * scale).collect();
        prop_assert_eq!(vector::argmax(&logits), vector::argmax(&scaled));
    }

    #[test]
    fn loss_gradient_sums_to_zero(logits in proptest::collection::vec(-2.0f32..2.0, 2..20), tau in 0.5f32..64.0) {
        let target = logits.len() / 2;
        let (l, g) = classifier::softmax_cross_entropy(&logits, target, tau);
        prop_assert!(l >= 0.0);
        prop_assert!(g.iter().sum::<f32>().abs() < 1e-3 * tau);
        prop_assert!(g[target] <= 0.0);
    }
}
