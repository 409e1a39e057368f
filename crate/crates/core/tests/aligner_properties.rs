use detr_kit::aligner::{project_ref_boxes, project_ref_points};
use detr_kit::nn::{Ctx, Init, Linear};
use detr_kit::tensor::{gradcheck, ParamGroup, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn projection(seed: u64, in_dim: usize, out_dim: usize, scale: f64) -> (Linear, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = Linear::new(&mut Init { store: &mut store, rng: &mut rng, group: ParamGroup::Detector }, "p", in_dim, out_dim);
    let w = store.value(lin.weight).map(|v| v * scale);
    *store.value_mut(lin.weight) = w;
    *store.value_mut(lin.bias) = Tensor::from_fn([out_dim], |i| 0.3 * i as f64 - 0.4);
    (lin, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reference_boxes_and_points_stay_in_the_unit_square(
        seed in 0u64..1000,
        // |logit| stays below ~37, where f64 sigmoid would round to 0 or 1
        scale in 0.1f64..2.0,
        pos in prop::collection::vec(-2.0f64..2.0, 16),
    ) {
        let (box_proj, store_a) = projection(seed, 8, 4, scale);
        let (point_proj, store_b) = projection(seed + 1, 4, 2, scale);
        let tape = Tape::new();
        let ctx_a = Ctx::new(&tape, &store_a);
        let boxes = project_ref_boxes(&ctx_a, &box_proj, ctx_a.constant(Tensor::new([2, 8], pos).unwrap())).unwrap();
        let ctx_b = Ctx::new(&tape, &store_b);
        let points = project_ref_points(&ctx_b, &point_proj, ctx_b.constant(boxes.to_tensor())).unwrap();
        for v in boxes.to_tensor().data().iter().chain(points.to_tensor().data()) {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }
}

#[test]
fn reference_points_are_not_box_centers() {
    let (point_proj, store) = projection(5, 4, 2, 1.0);
    let boxes = Tensor::new([2, 4], vec![0.2, 0.7, 0.1, 0.3, 0.6, 0.4, 0.5, 0.2]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let points = project_ref_points(&ctx, &point_proj, ctx.constant(boxes.clone())).unwrap().to_tensor();
    for n in 0..2 {
        let dx = (points.at(&[n, 0]) - boxes.at(&[n, 0])).abs();
        let dy = (points.at(&[n, 1]) - boxes.at(&[n, 1])).abs();
        assert!(dx > 1e-3 || dy > 1e-3);
    }
}

#[test]
fn reference_projections_pass_gradcheck() {
    for seed in 0..20 {
        let (box_proj, store) = projection(seed, 6, 4, 1.0);
        let pos = Tensor::from_fn([3, 6], |i| ((i * 7 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        let params = [box_proj.weight, box_proj.bias];
        let err = gradcheck::check_params(&store, &params, &[pos], 64, |ctx, v| project_ref_boxes(ctx, &box_proj, v[0])).unwrap();
        assert!(err < 1e-5, "boxes: {err}");

        let (point_proj, store) = projection(seed + 100, 4, 2, 1.0);
        let boxes = Tensor::from_fn([3, 4], |i| 0.1 + 0.07 * ((i + seed as usize) % 12) as f64);
        let params = [point_proj.weight, point_proj.bias];
        let err = gradcheck::check_params(&store, &params, &[boxes], 64, |ctx, v| project_ref_points(ctx, &point_proj, v[0])).unwrap();
        assert!(err < 1e-5, "points: {err}");
    }
}
