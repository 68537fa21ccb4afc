use std::collections::BTreeMap;
use tidewater::model::ModelWeights;
use tidewater_autograd::Tensor;

use tidewater::optim::*;

fn weights(values: &[(&str, Vec<usize>, Vec<f64>)]) -> ModelWeights {
    ModelWeights::new(
        values.iter().map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap())).collect(),
    )
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    let mut w = weights(&[("a", vec![3], vec![1.0, -2.0, 0.5])]);
    let grads = BTreeMap::from([("a".to_string(), Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap())]);
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerParams::default(), &w);
    opt.apply(&mut w, &grads, 0.01).unwrap();
    let got = w.get("a").unwrap().data();
    assert!((got[0] - (1.0 - 0.01)).abs() < 1e-9);
    assert!((got[1] - (-2.0 + 0.01)).abs() < 1e-9);
    assert_eq!(got[2], 0.5);
}

#[test]
fn adam_matches_straight_line_recurrence() {
    let mut w = weights(&[("a", vec![1], vec![0.7])]);
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerParams::default(), &w);
    let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let g = (p - 0.2) * 2.0;
        opt.apply(&mut w, &BTreeMap::from([("a".to_string(), Tensor::new(vec![1], vec![g]).unwrap())]), 0.05).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        p -= 0.05 * mh / (vh.sqrt() + 1e-8);
        assert!((w.get("a").unwrap().data()[0] - p).abs() < 1e-10);
    }
}

#[test]
fn projection_keeps_update_tangent_for_orthogonal_gradient() {
    // Each gradient row is orthogonal to its weight row, but the Adam
    // direction (roughly the gradient sign) is not.
    let p = vec![2.0, 1.0, 1.0, 2.0];
    let g = vec![1.0, -2.0, 2.0, -1.0];
    let grads = BTreeMap::from([("k".to_string(), Tensor::new(vec![2, 2], g).unwrap())]);
    let radial = |w: &ModelWeights, r: usize| {
        let row = &w.get("k").unwrap().data()[r * 2..r * 2 + 2];
        row[0] * p[r * 2] + row[1] * p[r * 2 + 1]
    };
    let mut projected = weights(&[("k", vec![2, 2], p.clone())]);
    Optimizer::new(OptimizerKind::AdaptiveMomentProjected, OptimizerParams::default(), &projected)
        .apply(&mut projected, &grads, 0.1)
        .unwrap();
    let mut plain = weights(&[("k", vec![2, 2], p.clone())]);
    Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerParams::default(), &plain)
        .apply(&mut plain, &grads, 0.1)
        .unwrap();
    for r in 0..2 {
        assert!((radial(&projected, r) - 5.0).abs() < 1e-7);
        assert!((radial(&plain, r) - 5.0).abs() > 0.05);
    }
}

#[test]
fn projection_skips_aligned_gradients() {
    let p = vec![1.0, 2.0, 3.0, 4.0];
    let mut a = weights(&[("k", vec![2, 2], p.clone())]);
    let mut b = a.clone();
    let grads = BTreeMap::from([("k".to_string(), Tensor::new(vec![2, 2], p).unwrap())]);
    Optimizer::new(OptimizerKind::AdaptiveMomentProjected, OptimizerParams::default(), &a)
        .apply(&mut a, &grads, 0.1)
        .unwrap();
    Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerParams::default(), &b).apply(&mut b, &grads, 0.1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn state_round_trip_and_errors() {
    let mut w = weights(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![1], vec![0.0])]);
    let grads = BTreeMap::from([
        ("a".to_string(), Tensor::new(vec![2], vec![0.1, 0.2]).unwrap()),
        ("b".to_string(), Tensor::new(vec![1], vec![-1.0]).unwrap()),
    ]);
    let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, OptimizerParams::default(), &w);
    opt.apply(&mut w, &grads, 0.1).unwrap();
    let arrays = opt.to_arrays("opt.");
    let back = Optimizer::from_arrays(opt.kind, opt.params.clone(), opt.step, &arrays, "opt.", &w).unwrap();
    assert_eq!(back, opt);

    let partial = BTreeMap::from([("a".to_string(), grads["a"].clone())]);
    assert!(matches!(opt.apply(&mut w, &partial, 0.1), Err(OptimError::MissingGradient(_))));
}
