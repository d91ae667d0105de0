use dualscreen::classifier::{crops_from_records, train_classifier, Backbone, ClassifierTrainConfig, CropSample};
use dualscreen::data::{AnomalyLabel, Image};
use dualscreen::synth::{generate_scene, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

/// Grey noise, with a dark square in the middle when `blob` is set.
fn patch(blob: bool, r: &mut impl Rng) -> Image {
    let mut img = Image::filled(SIDE, SIDE, [0.7, 0.7, 0.7]);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v = 0.7 + r.gen_range(-0.05..0.05);
            img.set_pixel(y, x, [v, v, v]);
        }
    }
    if blob {
        for y in 5..11 {
            for x in 5..11 {
                img.set_pixel(y, x, [0.05, 0.05, 0.1]);
            }
        }
    }
    img
}

fn separable(count: usize, seed: u64) -> Vec<CropSample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| CropSample {
            patch: patch(i % 2 == 1, &mut r),
            label: AnomalyLabel::from_flag(i % 2 == 1),
            source_class: None,
            source_image_id: format!("p{i}"),
        })
        .collect()
}

fn config(fine_grained: bool) -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        backbone: Backbone::Small,
        fine_grained,
        input_size: [SIDE, SIDE],
        epochs: 15,
        batch_size: 4,
        seed: 9,
        ..ClassifierTrainConfig::default()
    }
}

#[test]
fn separable_crops_are_fitted_exactly() {
    let crops = separable(20, 1);
    let (_, log) = train_classifier(&crops, &[], &config(false)).unwrap();
    assert_eq!(log.epochs.last().unwrap().train_accuracy, 1.0, "{log:?}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let (crops, val) = (separable(12, 2), separable(8, 3));
    let cfg = ClassifierTrainConfig { epochs: 3, ..config(true) };
    let (a, la) = train_classifier(&crops, &val, &cfg).unwrap();
    let (b, lb) = train_classifier(&crops, &val, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn single_label_training_set_is_rejected() {
    let crops: Vec<_> = separable(10, 4).into_iter().filter(|c| c.label == AnomalyLabel::Benign).collect();
    assert!(train_classifier(&crops, &[], &config(false)).is_err());
}

#[test]
fn warm_started_bank_keeps_base_validation_accuracy() {
    let (crops, val) = (separable(16, 5), separable(10, 6));
    let cfg = ClassifierTrainConfig { epochs: 2, ..config(false) };
    let (base, _) = train_classifier(&crops, &val, &cfg).unwrap();
    let (fine, log) = train_classifier(&crops, &val, &ClassifierTrainConfig { fine_grained: true, ..cfg }).unwrap();
    assert!(fine.fine_grained && !base.fine_grained);
    let acc = |m: &dualscreen::classifier::ClassifierModel| {
        val.iter().filter(|s| m.classify(&s.patch).unwrap().0 == s.label).count()
    };
    assert!(acc(&fine) >= acc(&base), "fine {} < base {} ({log:?})", acc(&fine), acc(&base));
}

#[test]
fn held_out_synthetic_crops_are_classified() {
    let scene = SceneConfig {
        image_size: [96, 96],
        object_size: [30.0, 44.0],
        anomaly_contrast: 1.0,
        distractor_rate: 0.0,
        seed: 21,
        ..SceneConfig::default()
    };
    let records = |range: std::ops::Range<u64>| -> Vec<_> { range.map(|i| generate_scene(&scene, i).unwrap()).collect() };
    let size = (24, 24);
    let train = crops_from_records(&records(0..120), 0.1, size).unwrap();
    let test = crops_from_records(&records(120..160), 0.1, size).unwrap();
    let cfg = ClassifierTrainConfig {
        input_size: [24, 24],
        epochs: 10,
        batch_size: 8,
        ..config(false)
    };
    let (model, _) = train_classifier(&train, &[], &cfg).unwrap();
    let correct = test.iter().filter(|s| model.classify(&s.patch).unwrap().0 == s.label).count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy >= 0.95, "held-out accuracy {accuracy:.3} on {} crops", test.len());
}
