use tidewater::features::{FeatureError, FeatureExtractor};
use tidewater::imaging::Image;
use tidewater::model::NetOutput;
use tidewater_autograd::{Tensor, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tidewater::features::{Layer, Profile, Source, CONTRASTIVE_TAP_WEIGHTS};
use tidewater::losses::*;
use tidewater::model::{LayoutBuilder, ModelWeights};
use tidewater_autograd::Graph;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn perceptual() -> FeatureExtractor {
    FeatureExtractor::new(Profile::Perceptual16, 4, &Source::SeededRandom { seed: 3 }).unwrap()
}

fn contrastive() -> FeatureExtractor {
    FeatureExtractor::new(Profile::Contrastive19, 4, &Source::SeededRandom { seed: 4 }).unwrap()
}

fn value(v: &Var<'_>) -> f64 {
    v.value().item()
}

#[test]
fn l1_cases() {
    let g = Graph::new();
    let c = |v: f64| g.constant(Tensor::full(vec![1, 3, 8, 8], v));
    assert_eq!(value(&l1_loss(&c(0.4), &c(0.4)).unwrap()), 0.0);
    assert_eq!(value(&l1_loss(&c(1.0), &c(0.0)).unwrap()), 1.0);
    assert!((value(&l1_loss(&c(0.3), &c(0.1)).unwrap()) - 0.2).abs() < 1e-15);
    let other = g.constant(Tensor::zeros(vec![1, 3, 8, 4]));
    assert!(matches!(l1_loss(&c(0.0), &other), Err(LossError::ShapeMismatch(_))));
    let a = c(0.25);
    assert_eq!(value(&consistency_loss(&a, &c(0.5)).unwrap()), value(&l1_loss(&a, &c(0.5)).unwrap()));
}

#[test]
fn perceptual_matches_unit_weight_feature_distance() {
    let fx = perceptual();
    let (a, b) = (random_image(32, 32, 1), random_image(32, 32, 2));
    let g = Graph::new();
    let (va, vb) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
    let p = value(&perceptual_loss(&va, &vb, &fx).unwrap());
    assert_eq!(p, value(&perceptual_loss(&vb, &va, &fx).unwrap()));
    assert_eq!(p, tidewater::features::image_feature_distance(&fx, &a, &b, &[1.0; 3]).unwrap());
    assert_eq!(value(&perceptual_loss(&va, &va, &fx).unwrap()), 0.0);
    let tiny = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    assert!(matches!(perceptual_loss(&tiny, &tiny, &fx), Err(LossError::Feature(FeatureError::InputTooSmall { .. }))));
}

#[test]
fn gradient_loss_cases() {
    let g = Graph::new();
    let gt = random_image(16, 16, 5);
    let target = g.constant(gradient_target(&[&gt]).unwrap());
    assert_eq!(value(&gradient_loss(&target, &target).unwrap()), 0.0);
    let flat = Image::filled(16, 16, [0.3, 0.3, 0.3]).unwrap();
    let zero_target = g.constant(gradient_target(&[&flat]).unwrap());
    let zeros = g.constant(Tensor::zeros(vec![1, 1, 16, 16]));
    assert_eq!(value(&gradient_loss(&zeros, &zero_target).unwrap()), 0.0);
    let c = g.constant(Tensor::full(vec![1, 1, 16, 16], 0.7));
    assert!((value(&gradient_loss(&c, &zero_target).unwrap()) - 0.7).abs() < 1e-12);
}

#[test]
fn supervised_total_cases() {
    let fx = perceptual();
    let gt = random_image(16, 16, 6);
    let g = Graph::new();
    let gv = g.constant(gt.to_tensor());
    let target = g.constant(gradient_target(&[&gt]).unwrap());
    let w = LossWeights::default();
    let perfect = NetOutput { restored: gv, gradient: target };
    assert_eq!(value(&supervised_total(&perfect, &gv, &target, &w, &fx).unwrap().total), 0.0);

    let noisy = NetOutput {
        restored: g.constant(random_image(16, 16, 7).to_tensor()),
        gradient: g.constant(Tensor::full(vec![1, 1, 16, 16], 0.2)),
    };
    let t = supervised_total(&noisy, &gv, &target, &w, &fx).unwrap();
    let by_hand = value(&t.l1) + 0.3 * value(&t.perceptual) + 0.1 * value(&t.gradient);
    assert!((value(&t.total) - by_hand).abs() < 1e-10);
    let zero = LossWeights { beta1: 0.0, beta2: 0.0, ..w };
    let t0 = supervised_total(&noisy, &gv, &target, &zero, &fx).unwrap();
    assert_eq!(value(&t0.total), value(&l1_loss(&noisy.restored, &gv).unwrap()));
}

#[test]
fn contrastive_cases() {
    let fx = contrastive();
    let (o, p, n) = (random_image(32, 32, 8), random_image(32, 32, 9), random_image(32, 32, 10));
    let g = Graph::new();
    let (vo, vp, vn) = (g.constant(o.to_tensor()), g.constant(p.to_tensor()), g.constant(n.to_tensor()));
    let w = CONTRASTIVE_TAP_WEIGHTS;
    assert_eq!(value(&contrastive_loss(&vp, &vp, &vn, &fx, &w, 1e-7).unwrap()), 0.0);

    let guarded = value(&contrastive_loss(&vo, &vp, &vo, &fx, &w, 1e-7).unwrap());
    let num: f64 = fx.tap_distances(&vo, &vp).unwrap().iter().zip(&w).map(|(d, w)| w * value(d)).sum();
    assert!(guarded.is_finite());
    assert!((guarded - num / 1e-7).abs() <= 1e-9 * guarded);

    // Straight-line recomputation from the raw tap arrays.
    let (fo, fp, fn_) = (fx.extract_image(&o).unwrap(), fx.extract_image(&p).unwrap(), fx.extract_image(&n).unwrap());
    let mad = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
    };
    let mut expected = 0.0;
    for (j, name) in fx.tap_names().iter().enumerate() {
        expected += w[j] * mad(&fo[name], &fp[name]) / (mad(&fo[name], &fn_[name]) + 1e-7);
    }
    let got = value(&contrastive_loss(&vo, &vp, &vn, &fx, &w, 1e-7).unwrap());
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    assert!(contrastive_loss(&vo, &vp, &vn, &fx, &w, 0.0).is_err());

    let batch = |a: &Image, b: &Image| g.constant(Image::batch_tensor(&[a, b]).unwrap());
    let pair = contrastive_loss(&batch(&o, &p), &batch(&p, &n), &batch(&n, &o), &fx, &w, 1e-7).unwrap();
    let second = contrastive_loss(&vp, &vn, &vo, &fx, &w, 1e-7).unwrap();
    assert!((value(&pair) - (got + value(&second)) / 2.0).abs() < 1e-12);
}

#[test]
fn contrastive_numerators_shrink_toward_positive() {
    let mut b = LayoutBuilder::default();
    b.conv("lin", 3, 4, 3);
    let weights = ModelWeights::initialize(&b.specs, 11);
    let layers = vec![Layer::Conv { name: "lin".into(), cin: 3, cout: 4 }, Layer::Tap("lin".into())];
    let fx = FeatureExtractor::custom(layers, weights, false).unwrap();
    let (o, p) = (random_image(16, 16, 12), random_image(16, 16, 13));
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let blend = tidewater::imaging::alpha_blend(&p, &o, t).unwrap();
        let g = Graph::new();
        let d = value(&fx.tap_distances(&g.constant(blend.to_tensor()), &g.constant(p.to_tensor())).unwrap()[0]);
        assert!(d <= last + 1e-15);
        last = d;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn scalar_combinators() {
    assert_eq!(unsupervised_total(0.4, 9.0, 0.0), 0.4);
    assert_eq!(unsupervised_total(0.0, 0.5, 1.0), 0.5);
    assert!((unsupervised_total(0.3, 0.2, 1.0) - 0.5).abs() < 1e-15);
    assert!((overall_loss(1.0, 2.0, 0.2) - 1.4).abs() < 1e-15);
    assert_eq!(overall_loss(0.7, 5.0, 0.0), 0.7);
}

#[test]
fn report_recomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = LossWeights::default();
    for _ in 0..100 {
        let c: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
        let r = LossReport::compose(&w, c[0], c[1], c[2], c[3], c[4], c[5]);
        let expected = (c[0] + 0.3 * c[1] + 0.1 * c[2]) + c[5] * (c[3] + c[4]);
        assert!((r.total - expected).abs() < 1e-10);
    }
}

#[test]
fn lambda_schedule_values() {
    let w = LossWeights::default();
    assert!((lambda_schedule(200, &w).unwrap() - 0.2).abs() < 1e-15);
    assert!((lambda_schedule(0, &w).unwrap() - 1.3475893998170934e-3).abs() < 1e-12);
    assert!((lambda_schedule(100, &w).unwrap() - 5.730095937203802e-2).abs() < 1e-12);
    let values: Vec<f64> = (0..=200).map(|t| lambda_schedule(t, &w).unwrap()).collect();
    assert!(values.windows(2).all(|v| v[0] < v[1]));
    assert!(values.iter().all(|v| *v <= 0.2));
    assert!(matches!(lambda_schedule(201, &w), Err(LossError::EpochOutOfRange { .. })));
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { beta1: -1.0, ..Default::default() }.validate().is_err());
    assert!(LossWeights { epsilon_cr: 0.0, ..Default::default() }.validate().is_err());
    assert!(LossWeights { warmup_total: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn sample_selection() {
    let g = Graph::new();
    let a = random_image(8, 8, 15);
    let b = random_image(8, 8, 16);
    let batch = g.constant(Image::batch_tensor(&[&a, &b]).unwrap());
    let picked = select_samples(&batch, &[1]).unwrap();
    assert_eq!(picked.shape(), vec![1, 3, 8, 8]);
    assert_eq!(picked.value().data(), b.data());
}

/// Autodiff against central differences with respect to the student output,
/// sampled away from L1 kinks.
fn check_gradient(x: &Image, skip: impl Fn(usize) -> bool, loss: impl for<'g> Fn(&Var<'g>) -> Var<'g>) {
    let g = Graph::new();
    let v = g.param(x.to_tensor());
    let autodiff = g.backward(&loss(&v)).unwrap().get(&v).unwrap().clone();
    let eval = |t: Tensor| {
        let g = Graph::new();
        value(&loss(&g.param(t)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-4;
    let (mut checked, mut good) = (0, 0);
    while checked < 24 {
        let i = rng.gen_range(0..autodiff.numel());
        if skip(i) {
            continue;
        }
        let mut plus = x.to_tensor();
        plus.data_mut()[i] += h;
        let mut minus = x.to_tensor();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let ad = autodiff.data()[i];
        checked += 1;
        if (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8) < 1e-3 {
            good += 1;
        }
    }
    assert!(good >= 23, "{good}/24 coordinates agree");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (o, p, n) = (random_image(32, 32, 18), random_image(32, 32, 19), random_image(32, 32, 20));
    let far = |i: usize| (o.data()[i] - p.data()[i]).abs() < 1e-2 || (o.data()[i] - n.data()[i]).abs() < 1e-2;
    let (fx, pf) = (contrastive(), perceptual());
    check_gradient(&o, far, |v| {
        let g = v.graph();
        let (vp, vn) = (g.constant(p.to_tensor()), g.constant(n.to_tensor()));
        contrastive_loss(v, &vp, &vn, &fx, &CONTRASTIVE_TAP_WEIGHTS, 1e-7).unwrap()
    });
    check_gradient(&o, far, |v| perceptual_loss(v, &v.graph().constant(p.to_tensor()), &pf).unwrap());
    check_gradient(&o, far, |v| consistency_loss(v, &v.graph().constant(p.to_tensor())).unwrap());
}
