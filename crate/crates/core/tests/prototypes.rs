mod oracle;

use memmod::harness::{self, EvalMode};
use memmod::memory::{BankSnapshot, ClassId, MemoryBank, Modality};
use memmod::prototypes::{self, PrototypeVariant, DEFAULT_TOP_M};
use memmod::synth::{self, SynthSpec};
use memmod::{vector, IntegrationParams};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn near(rng: &mut ChaCha8Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    let v: Vec<f32> = center.iter().zip(oracle::gaussian(rng, center.len())).map(|(c, g)| c + sigma * g).collect();
    vector::normalized(&v).unwrap()
}

fn snapshot(modality: Modality, dim: usize, rows: Vec<Vec<f32>>) -> BankSnapshot {
    let class = ClassId::new(7, "target");
    BankSnapshot::new(MemoryBank::from_items(modality, dim, rows.into_iter().map(|v| (class.clone(), v))).unwrap())
}

#[test]
fn consensus_excludes_planted_noise() {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let centre = oracle::unit(&mut rng, d);
    let far = oracle::unit(&mut rng, d);
    let cluster: Vec<Vec<f32>> = (0..16).map(|_| near(&mut rng, &centre, 0.05)).collect();
    let noise: Vec<Vec<f32>> = (0..4).map(|_| near(&mut rng, &far, 0.05)).collect();
    // noise interleaved at arbitrary positions
    let mut rows = cluster.clone();
    for (i, n) in noise.into_iter().enumerate() {
        rows.insert(i * 5 + 2, n);
    }
    let text: Vec<Vec<f32>> = (0..10).map(|_| near(&mut rng, &centre, 0.05)).collect();
    let img = snapshot(Modality::Image, d, rows);
    let txt = snapshot(Modality::Text, d, text);
    let set = prototypes::consensus_prototypes(&img, &txt, 16).unwrap();

    let mut mean = vec![0.0f64; d];
    for v in &cluster {
        for i in 0..d {
            mean[i] += f64::from(v[i]);
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (got, want) in set.image(0).unwrap().iter().zip(&mean) {
        assert!((f64::from(*got) - want / n).abs() < 1e-6);
    }
}

#[test]
fn default_top_m() {
    assert_eq!(DEFAULT_TOP_M, 16);
}

#[test]
fn consensus_beats_random_subsets_downstream() {
    let mut gap = 0.0;
    for seed in 0..3 {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let bench = synth::generate(&spec).unwrap();
        let (img, txt) = bench.snapshots();
        let params = IntegrationParams::zeros(spec.dim);
        let acc = |variant| {
            let p = prototypes::prototype_variant(&img, &txt, variant, 16, seed).unwrap();
            harness::evaluate(EvalMode::ProtoOnly, &img, &txt, &p, &params, &bench.test, 32).unwrap().accuracy
        };
        gap += acc(PrototypeVariant::Consensus) - acc(PrototypeVariant::RandomM);
    }
    assert!(gap > 0.0, "consensus minus random-m accuracy summed over seeds: {gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn consensus_ignores_item_order(seed in any::<u64>(), n_img in 1usize..40, n_txt in 1usize..20, m in 1usize..24) {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img_rows: Vec<Vec<f32>> = (0..n_img).map(|_| oracle::unit(&mut rng, d)).collect();
        let txt_rows: Vec<Vec<f32>> = (0..n_txt).map(|_| oracle::unit(&mut rng, d)).collect();
        let base = prototypes::consensus_prototypes(
            &snapshot(Modality::Image, d, img_rows.clone()),
            &snapshot(Modality::Text, d, txt_rows.clone()),
            m,
        ).unwrap();
        let (mut a, mut b) = (img_rows, txt_rows);
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let shuffled = prototypes::consensus_prototypes(&snapshot(Modality::Image, d, a), &snapshot(Modality::Text, d, b), m).unwrap();
        for (x, y) in base.image_matrix().unwrap().iter().zip(shuffled.image_matrix().unwrap()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in base.text_matrix().unwrap().iter().zip(shuffled.text_matrix().unwrap()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn prototypes_are_unit_norm(seed in any::<u64>(), classes in 2u64..6) {
        let spec = SynthSpec { num_classes: classes as usize, dim: 8, image_items_per_class: 12, text_items_per_class: 6,
            train_per_class: 1, test_per_class: 1, seed, ..SynthSpec::default() };
        let bench = synth::generate(&spec).unwrap();
        let (img, txt) = bench.snapshots();
        let set = prototypes::consensus_prototypes(&img, &txt, 4).unwrap();
        for row in set.image_matrix().unwrap().chunks(8).chain(set.text_matrix().unwrap().chunks(8)) {
            prop_assert!((vector::norm(row) - 1.0).abs() < 1e-5);
        }
    }
}
