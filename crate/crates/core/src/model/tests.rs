use super::*;
use crate::tensor::{gradcheck, Tape};
use rand::{Rng, SeedableRng};

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn backbone_level_shapes() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let levels = det.backbone.forward(&ctx, tape.constant(image(0, 64, 64))).unwrap();
    let shapes: Vec<Vec<usize>> = levels.iter().map(|l| l.shape()).collect();
    assert_eq!(shapes, vec![vec![64, 32], vec![16, 32], vec![4, 32], vec![1, 32]]);
}

#[test]
fn zero_image_gives_zero_pyramid() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let levels = det.backbone.forward(&ctx, tape.constant(Tensor::zeros([3, 64, 64]))).unwrap();
    for l in levels {
        assert!(l.to_tensor().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    assert!(det.forward(&ctx, tape.constant(Tensor::zeros([3, 32, 64]))).is_err());
}

#[test]
fn encoder_without_layers_is_identity() {
    let mut config = DetectorConfig::desk();
    config.encoder_layers = 0;
    let (det, store) = Detector::new(config, 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src = tape.constant(Tensor::from_fn([85, 32], |_| rng.random_range(-1.0..1.0)));
    let out = det.encoder.forward(&ctx, src).unwrap();
    assert_eq!(out.to_tensor(), src.to_tensor());
}

#[test]
fn encoder_preserves_shape() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 1).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let memory = det.encode(&ctx, tape.constant(image(2, 64, 64))).unwrap();
    assert_eq!(memory.flat.shape(), vec![85, 32]);
}

#[test]
fn zero_heads_predict_center_boxes_and_uniform_classes() {
    let (det, mut store) = Detector::new(DetectorConfig::desk(), 4).unwrap();
    let head_params: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("head."))
        .map(|(id, _)| id)
        .collect();
    for id in head_params {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(shape);
    }
    let dets = det.detect(&store, &image(5, 64, 64)).unwrap();
    for d in dets {
        assert_eq!(d.bbox, BoxCxCyWh { cx: 0.5, cy: 0.5, w: 0.5, h: 0.5 });
        assert!((d.score - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (det, store) = Detector::new(DetectorConfig::desk(), 9).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = det.forward(&ctx, tape.constant(image(1, 64, 64))).unwrap();
        let last = out.predictions.last().unwrap();
        (last.logits.to_tensor(), last.boxes.to_tensor())
    };
    assert_eq!(run(), run());
}

#[test]
fn layers_read_round_robin_levels() {
    let mut config = DetectorConfig::desk();
    config.decoder_layers = 6;
    let (det, store) = Detector::new(config, 2).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let out = det.forward(&ctx, tape.constant(image(1, 64, 64))).unwrap();
    let levels: Vec<usize> = out.steps.iter().map(|s| s.level).collect();
    assert_eq!(levels, vec![0, 1, 2, 3, 0, 1]);
}

#[test]
fn query_permutation_permutes_outputs() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 6).unwrap();
    let perm = [3, 0, 9, 1, 2, 8, 4, 7, 5, 6];
    let img = image(8, 64, 64);
    let run = |order: &[usize]| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let memory = det.encode(&ctx, tape.constant(img.clone())).unwrap();
        let content = ctx.param(det.query_content).index_select(order).unwrap();
        let pos = ctx.param(det.query_pos).index_select(order).unwrap();
        let out = det.decode(&ctx, memory, content, pos).unwrap();
        out.predictions.last().unwrap().boxes.to_tensor()
    };
    let base = run(&(0..10).collect::<Vec<_>>());
    let permuted = run(&perm);
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((permuted.at(&[i, c]) - base.at(&[p, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn closed_gates_reduce_to_plain_decoder() {
    let (det, mut store) = Detector::new(DetectorConfig::desk(), 3).unwrap();
    let mut plain = det.clone();
    for layer in &mut plain.decoder {
        layer.use_aligner = false;
    }
    for layer in &det.decoder {
        let gate = &layer.aligner.reweight.gate;
        *store.value_mut(gate.weight) = Tensor::zeros(store.value(gate.weight).shape().to_vec());
        *store.value_mut(gate.bias) = Tensor::full(store.value(gate.bias).shape().to_vec(), -1000.0);
    }
    let img = image(4, 64, 64);
    let a = det.detect(&store, &img).unwrap();
    let b = plain.detect(&store, &img).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_width_cross_attention_input() {
    let mut config = DetectorConfig::full();
    config.image_height = 64;
    config.image_width = 64;
    config.queries = 3;
    config.encoder_layers = 1;
    config.decoder_layers = 1;
    let (det, store) = Detector::new(config, 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let out = det.forward(&ctx, tape.constant(image(0, 64, 64))).unwrap();
    assert_eq!(out.steps[0].cross_query.shape(), vec![3, 2048]);
    assert_eq!(out.steps[0].salient_points.unwrap().shape(), vec![3, 8, 2]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let (det, store) = Detector::new(DetectorConfig::desk(), 11).unwrap();
    save_checkpoint(&path, &det.config, &store).unwrap();
    let (det2, store2) = load_checkpoint(&path).unwrap();
    assert_eq!(det2.config, det.config);
    for ((_, a), (_, b)) in store.iter().zip(store2.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn checkpoint_with_other_config_is_rejected() {
    let (det, store) = Detector::new(DetectorConfig::desk(), 11).unwrap();
    let mut ckpt = Checkpoint::capture(&det.config, &store);
    ckpt.config.d = 16;
    assert!(ckpt.restore().is_err());
}

#[test]
fn heads_gradient() {
    let mut config = DetectorConfig::desk();
    config.d = 8;
    config.heads = 2;
    let (det, store) = Detector::new(config, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let state = Tensor::from_fn([3, 8], |_| rng.random_range(-1.0..1.0));
    let params = [det.heads.class.weight, det.heads.boxes.layers[0].weight];
    let err = gradcheck::check_params(&store, &params, &[state], 40, |ctx, v| {
        let p = det.heads.forward(ctx, v[0])?;
        Var::concat(&[p.logits.softmax(1)?, p.boxes], 1)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backbone_gradient_through_one_level() {
    let mut config = DetectorConfig::desk();
    config.backbone_channels = vec![2, 3, 3, 3, 3, 3];
    config.d = 8;
    config.heads = 2;
    let (det, store) = Detector::new(config, 13).unwrap();
    let params = [det.backbone.stages[0].weight, det.backbone.projections[0].weight];
    let err = gradcheck::check_params(&store, &params, &[image(6, 64, 64)], 30, |ctx, v| {
        Ok(det.backbone.forward(ctx, v[0])?[0])
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
