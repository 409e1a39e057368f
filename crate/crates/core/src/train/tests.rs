use super::*;
use crate::annotation::{generate_synthetic, SynthConfig};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.decoder_layers = 1;
    c.model.encoder_layers = 1;
    c.epochs = 1;
    c.batch_size = 2;
    c
}

fn tiny_data(count: usize) -> Dataset {
    let (images, coco) = generate_synthetic(&SynthConfig { count, seed: 5, ..Default::default() }).unwrap();
    Dataset::from_synthetic(&images, coco).unwrap()
}

#[test]
fn config_defaults() {
    let c = RunConfig::default();
    assert_eq!((c.lr_backbone, c.lr_detector, c.epochs), (1e-5, 1e-4, 24));
    assert_eq!(c.clip_norm, 0.1);
    assert_eq!(c.adam_at(100).lr_detector, 1e-4);
}

#[test]
fn lr_drop_applies_from_its_epoch() {
    let c = RunConfig { lr_drop: Some(3), lr_detector: 2e-4, lr_backbone: 1e-5, ..RunConfig::default() };
    assert_eq!(c.adam_at(2).lr_detector, 2e-4);
    let late = c.adam_at(3);
    assert!((late.lr_detector - 2e-5).abs() < 1e-18 && (late.lr_backbone - 1e-6).abs() < 1e-18);
}

#[test]
fn config_json_round_trip_and_partial_files() {
    let c = RunConfig::default();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    let partial: RunConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn thread_count_does_not_change_results() {
    let data = tiny_data(4);
    let run = |threads: usize| {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.threads = threads;
        let out = t.fit(&data, None, &mut (), None).unwrap();
        (out.steps, t.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn epoch_order_is_seeded() {
    let t = Trainer::new(tiny_config()).unwrap();
    assert_eq!(t.epoch_order(2, 10), t.epoch_order(2, 10));
    assert_ne!(t.epoch_order(1, 10), t.epoch_order(2, 10));
}

#[test]
fn nonfinite_loss_dumps_the_batch() {
    let data = tiny_data(2);
    let mut t = Trainer::new(tiny_config()).unwrap();
    let id = t.detector.heads.class.bias;
    t.store.value_mut(id).data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let err = t.train_step(0, &batch, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    let dump = std::fs::read_to_string(dir.path().join("nonfinite_batch.json")).unwrap();
    assert!(dump.contains("synth_00001.ppm"));
}

#[test]
fn predictions_use_dataset_categories() {
    let data = tiny_data(2);
    let t = Trainer::new(tiny_config()).unwrap();
    let preds = predict(&t.detector, &t.store, &data).unwrap();
    let m = &t.config.model;
    assert_eq!(preds.len(), 2 * m.queries * m.num_classes);
    assert!(preds.iter().all(|p| p.category_id == 1 || p.category_id == 2));
    evaluate(&preds, &data.coco).unwrap();
}

#[test]
fn mismatched_categories_are_rejected() {
    let data = tiny_data(1);
    let mut model = DetectorConfig::desk();
    model.num_classes = 3;
    assert!(data.check_compatible(&model).is_err());
}
