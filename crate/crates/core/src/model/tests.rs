use super::gradcheck::{check_param_gradients, loss_fn};
use super::*;
use crate::autodiff::Tape;
use crate::geometry::{rasterize_box, BoundingBox};
use crate::tensor::Tensor;
use crate::testutil::{rand_tensor, rng};

fn small_dims() -> ModelDims {
    ModelDims {
        embed_dim: 4,
        feature_dim: 6,
        hidden_dim: 6,
        stem_width: 4,
        backbone_widths: [3, 4],
        decoder_widths: [4, 4, 3],
        ..ModelDims::default()
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut r = rng(seed);
    rand_tensor(&mut r, &[h, w, 3]).map(|v| 1.0 / (1.0 + (-v).exp()))
}

#[test]
fn zero_weights_give_zero_encodings() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(0).zeros_like();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let pyr = model.backbone.forward(&p, tape.constant(image(1, 16, 16))).unwrap();
    let raster = tape.constant(rasterize_box(&BoundingBox::new(3, 4, 6, 5), 16, 16).unwrap());
    let out = model.encoder.encode(&p, pyr.deepest(), raster).unwrap();
    for v in [out.e, out.w, out.m] {
        assert_eq!(v.shape(), vec![4, 4, 4]);
        assert!(v.value().data().iter().all(|&x| x == 0.0));
    }
    let (e, w) = model.refiner.encode(&p, pyr.deepest(), raster).unwrap();
    assert!(e.value().max_abs() == 0.0 && w.value().max_abs() == 0.0);
    let logits = model.decoder.decode(&p, out.e, out.m, &pyr).unwrap();
    assert_eq!(logits.shape(), vec![16, 16, 1]);
    assert!(logits.value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn encoder_shapes_follow_config() {
    let dims = ModelDims::default();
    let model = Model::new(dims.clone()).unwrap();
    let store = model.init_params(4);
    for (h, w) in [(16, 16), (32, 24), (64, 64)] {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let pyr = model.backbone.forward(&p, tape.constant(image(2, h, w))).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes[0], vec![h, w, dims.backbone_widths[0]]);
        assert_eq!(shapes[1], vec![h / 2, w / 2, dims.backbone_widths[1]]);
        assert_eq!(shapes[2], vec![h / 4, w / 4, dims.feature_dim]);
        let raster = tape.constant(rasterize_box(&BoundingBox::new(2, 2, 5, 7), h, w).unwrap());
        let out = model.encoder.encode(&p, pyr.deepest(), raster).unwrap();
        for v in [out.e, out.w, out.m] {
            assert_eq!(v.shape(), vec![h / STRIDE, w / STRIDE, dims.embed_dim]);
            assert!(v.value().is_finite());
        }
        assert!(out.m.value().data().iter().all(|&v| v >= 0.0));
        let logits = model.decoder.decode(&p, out.e, out.m, &pyr).unwrap();
        assert_eq!(logits.shape(), vec![h, w, 1]);
    }
}

#[test]
fn encoding_is_deterministic() {
    let model = Model::new(small_dims()).unwrap();
    let run = || {
        let store = model.init_params(9);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let pyr = model.backbone.forward(&p, tape.constant(image(5, 16, 16))).unwrap();
        let raster = tape.constant(rasterize_box(&BoundingBox::new(1, 1, 9, 9), 16, 16).unwrap());
        let out = model.encoder.encode(&p, pyr.deepest(), raster).unwrap();
        (out.e.value().data().to_vec(), out.w.value().data().to_vec(), out.m.value().data().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn raster_resolution_mismatch_is_rejected() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let pyr = model.backbone.forward(&p, tape.constant(image(1, 16, 16))).unwrap();
    let raster = tape.constant(rasterize_box(&BoundingBox::new(0, 0, 4, 4), 32, 32).unwrap());
    assert!(model.encoder.encode(&p, pyr.deepest(), raster).is_err());
    assert!(model.backbone.forward(&p, tape.constant(image(1, 18, 16))).is_err());
}

#[test]
fn refinement_rejects_out_of_range_masks() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let x = tape.constant(Tensor::zeros(&[4, 4, 6]));
    let mut y = Tensor::full(&[16, 16, 1], 0.5);
    y.data_mut()[7] = 1.0 + 1e-7;
    assert!(model.refiner.encode(&p, x, tape.constant(y.clone())).is_ok());
    y.data_mut()[7] = 1.0 + 1e-5;
    assert!(model.refiner.encode(&p, x, tape.constant(y.clone())).is_err());
    y.data_mut()[7] = -1e-5;
    assert!(model.refiner.encode(&p, x, tape.constant(y)).is_err());
}

#[test]
fn refinement_input_gradient_matches_finite_differences() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(12);
    let mut r = rng(13);
    let y0 = rand_tensor(&mut r, &[16, 16, 1]).map(|v| 0.2 + 0.6 / (1.0 + (-v).exp()));
    let proj = rand_tensor(&mut r, &[4, 4, 4]);
    let x = Tensor::zeros(&[4, 4, 6]);
    let eval = |y: &Tensor, want_grad: bool| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let yv = if want_grad { tape.param(y.clone()) } else { tape.constant(y.clone()) };
        let (e, w) = model.refiner.encode(&p, tape.constant(x.clone()), yv).unwrap();
        let pv = tape.constant(proj.clone());
        let loss = e.dot(pv).unwrap().add(w.mul(w).unwrap().dot(pv).unwrap()).unwrap();
        let g = want_grad.then(|| tape.backward(loss).unwrap().wrt(yv));
        (loss.item(), g)
    };
    let (_, g) = eval(&y0, true);
    let g = g.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for idx in (0..y0.len()).step_by(7) {
        let mut yp = y0.clone();
        yp.data_mut()[idx] += h;
        let mut ym = y0.clone();
        ym.data_mut()[idx] -= h;
        let fd = (eval(&yp, false).0 - eval(&ym, false).0) / (2.0 * h);
        let err = (fd - g.data()[idx]).abs() / fd.abs().max(g.data()[idx].abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(21);
    let img = image(22, 16, 16);
    let mut r = rng(23);
    let s = rand_tensor(&mut r, &[4, 4, 4]);
    let m = rand_tensor(&mut r, &[4, 4, 4]).map(f64::abs);
    let proj = rand_tensor(&mut r, &[16, 16, 1]);
    let loss = loss_fn(|tape, p| {
        let pyr = model.backbone.forward(p, tape.constant(img.clone()))?;
        let logits = model.decoder.decode(p, tape.constant(s.clone()), tape.constant(m.clone()), &pyr)?;
        logits.dot(tape.constant(proj.clone()))
    });
    let checks = check_param_gradients(&store, &loss, 1e-5, 1e-6, 24).unwrap();
    let relevant: Vec<_> = checks
        .iter()
        .filter(|c| c.name.starts_with("decoder") || c.name.starts_with("backbone"))
        .collect();
    assert!(!relevant.is_empty());
    for c in relevant {
        assert!(c.rel_error <= 1e-4, "{c:?}");
    }
}

#[test]
fn decoder_rejects_mismatched_resolution() {
    let model = Model::new(small_dims()).unwrap();
    let store = model.init_params(0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let pyr = model.backbone.forward(&p, tape.constant(image(1, 16, 16))).unwrap();
    let s = tape.constant(Tensor::zeros(&[8, 8, 4]));
    assert!(model.decoder.decode(&p, s, s, &pyr).is_err());
}

#[test]
fn lambda_parameter_starts_at_default() {
    let model = Model::new(ModelDims::default()).unwrap();
    let store = model.init_params(0);
    let raw = store.get(LAMBDA_PARAM).unwrap().item().unwrap();
    let tape = Tape::new();
    let lam = tape.scalar(raw).softplus().unwrap().item();
    assert!((lam - 0.05).abs() < 1e-12);
}

#[test]
fn invalid_dims_are_rejected() {
    let even = ModelDims { kernel_size: 2, ..ModelDims::default() };
    assert!(Model::new(even).is_err());
    let wide = ModelDims { embed_dim: 17, ..ModelDims::default() };
    assert!(Model::new(wide).is_err());
}
