use detr_kit::model::{Detector, DetectorConfig};
use detr_kit::nn::Ctx;
use detr_kit::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_projection_layer_only_normalizes() {
    let config = DetectorConfig { encoder_layers: 1, ..DetectorConfig::desk() };
    let (det, mut store) = Detector::new(config, 9).unwrap();
    let layer = &det.encoder.layers[0];
    let mut linears = vec![&layer.attn.value_proj, &layer.attn.offsets, &layer.attn.attention, &layer.attn.output_proj];
    linears.extend(layer.ffn.layers.iter());
    for lin in linears {
        for id in [lin.weight, lin.bias] {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
    }
    let s = det.encoder.layout().total_len();
    let d = det.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src = Tensor::from_fn([s, d], |_| rng.random_range(-2.0..2.0));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let out = det.encoder.forward(&ctx, ctx.constant(src.clone())).unwrap().to_tensor();
    // residual plus zero sublayers, then the two unit-gain norms
    let mut want = Vec::with_capacity(s * d);
    for row in src.data().chunks(d) {
        let norm = |r: &[f64]| -> Vec<f64> {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            r.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        };
        want.extend(norm(&norm(row)));
    }
    let want = Tensor::new([s, d], want).unwrap();
    assert!(out.max_abs_diff(&want) < 1e-12);
}
