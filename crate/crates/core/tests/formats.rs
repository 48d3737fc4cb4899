mod oracle;

use memmod::checkpoint;
use memmod::integration::{self, InitScheme, IntegrationParams};
use memmod::memory::{self, ClassId, MemoryBank, Modality};
use memmod::prototypes;
use memmod::synth::{self, SynthSpec};
use memmod::trainer::{EpochStats, TrainConfig};
use memmod::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bank(seed: u64, n: usize, d: usize, classes: u32) -> MemoryBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n).map(|i| {
        let c = (i as u32 * 7) % classes + 3;
        (ClassId::new(c, format!("class «{c}»")), oracle::unit(&mut rng, d))
    });
    MemoryBank::from_items(Modality::Text, d, items).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn banks_round_trip(seed in any::<u64>(), n in 1usize..120, d in 1usize..40, classes in 1u32..9) {
        let b = bank(seed, n, d, classes);
        let back = memory::decode_bank(&memory::encode_bank(&b).unwrap()).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn params_round_trip(seed in any::<u64>(), d in 1usize..24) {
        let p = IntegrationParams::init(seed, d, InitScheme::ScaledUniform).unwrap();
        prop_assert_eq!(integration::decode_params(&integration::encode_params(&p)).unwrap(), p);
    }

    #[test]
    fn truncation_is_an_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = memory::encode_bank(&bank(seed, 20, 6, 3)).unwrap();
        let at = (cut * bytes.len() as f64) as usize;
        prop_assert!(memory::decode_bank(&bytes[..at]).is_err());
        let p = integration::encode_params(&IntegrationParams::zeros(5));
        let at = (cut * p.len() as f64) as usize;
        prop_assert!(integration::decode_params(&p[..at]).is_err());
    }
}

#[test]
fn corrupted_headers_are_rejected() {
    let good = memory::encode_bank(&bank(0, 10, 4, 2)).unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(memory::decode_bank(&magic), Err(Error::MalformedHeader(_))));
    let mut version = good.clone();
    version[4] = 9;
    assert!(memory::decode_bank(&version).is_err());
    let mut modality = good.clone();
    modality[6] = 77;
    assert!(memory::decode_bank(&modality).is_err());
    let mut trailing = good;
    trailing.push(0);
    assert!(memory::decode_bank(&trailing).is_err());

    let mut p = integration::encode_params(&IntegrationParams::zeros(4));
    p[1] = b'Q';
    assert!(integration::decode_params(&p).is_err());
}

#[test]
fn rows_are_normalized_and_checked() {
    let a = ClassId::new(0, "a");
    let b = MemoryBank::from_items(Modality::Image, 2, vec![(a.clone(), vec![3.0, 4.0])]).unwrap();
    assert_eq!(b.vector(0), &[0.6, 0.8]);
    assert!(MemoryBank::from_items(Modality::Image, 2, vec![(a.clone(), vec![0.0, 0.0])]).is_err());
    assert!(MemoryBank::from_items(Modality::Image, 3, vec![(a.clone(), vec![1.0, 0.0])]).is_err());
    let renamed = vec![(a, vec![1.0, 0.0]), (ClassId::new(0, "b"), vec![0.0, 1.0])];
    assert!(MemoryBank::from_items(Modality::Image, 2, renamed).is_err());
}

#[test]
fn missing_files_surface_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(memory::load_bank(dir.path().join("absent.mmlm")), Err(Error::Io(_))));
    assert!(checkpoint::load_checkpoint(dir.path().join("absent")).is_err());
}

#[test]
fn bank_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = bank(3, 40, 9, 4);
    let path = dir.path().join("bank.mmlm");
    memory::save_bank(&b, &path).unwrap();
    assert_eq!(memory::load_bank(&path).unwrap(), b);
}

#[test]
fn checkpoints_round_trip() {
    let spec = SynthSpec { num_classes: 4, dim: 8, image_items_per_class: 10, text_items_per_class: 6, ..SynthSpec::default() };
    let bench = synth::generate(&spec).unwrap();
    let (img, txt) = bench.snapshots();
    let protos = prototypes::consensus_prototypes(&img, &txt, 4).unwrap();
    let params = IntegrationParams::init(7, 8, InitScheme::ScaledUniform).unwrap();
    let config = TrainConfig { learning_rate: 0.25, epochs: 3, seed: 11, ..TrainConfig::default() };
    let curve: Vec<EpochStats> = (0..3).map(|e| EpochStats { epoch: e, loss: 1.0 / (e + 1) as f32, train_acc: 0.5 }).collect();

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_checkpoint(dir.path(), &params, &protos, &config, &curve).unwrap();
    let back = checkpoint::load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.params, params);
    assert_eq!(back.prototypes, protos);
    assert_eq!(back.config, config);
    let loss = std::fs::read_to_string(dir.path().join(checkpoint::CURVE_FILE)).unwrap();
    assert_eq!(loss.lines().count(), 4);
}

#[test]
fn unknown_config_keys_are_errors() {
    let mut cfg = TrainConfig::default();
    assert!(checkpoint::apply_config_text(&mut cfg, "learning_rate=0.5\nbogus=1\n").is_err());
    checkpoint::apply_config_text(&mut cfg, &TrainConfig { epochs: 3, ..TrainConfig::default() }.to_kv()).unwrap();
    assert_eq!(cfg.epochs, 3);
}
