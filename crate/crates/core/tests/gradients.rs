mod common;

use common::*;
use fedunlearn::losses::{fairness_grad, fairness_value, LossKind, LossSpec, PreferenceVector};
use fedunlearn::model::{loss_and_grad, Activation, ModelSpec};
use fedunlearn::numkit::{GradientMatrix, ParamVector};

const KINDS: [LossKind; 4] = [LossKind::Ce, LossKind::Mbs, LossKind::Uce, LossKind::KlUniform];

fn check_model(sizes: Vec<usize>, act: Activation, seed: u64) {
    let spec = ModelSpec::new(sizes.clone(), act, seed).unwrap();
    let mut r = rng(seed);
    let batch = random_batch(&mut r, 24, sizes[0], *sizes.last().unwrap());
    let w = random_params(&mut r, spec.param_count(), 0.8);
    for kind in KINDS {
        let loss = LossSpec::new(kind, 1e-3).unwrap();
        let (value, grad) = loss_and_grad(&ParamVector::new(w.clone()), &spec, &batch, &loss).unwrap();
        assert!((value - naive_loss(&w, &spec, &batch, &loss)).abs() < 1e-10);
        let coords = pick_coordinates(&mut r, w.len(), 20, |j| !kink_adjacent(&w, &spec, &batch, 1e-3, j));
        assert!(coords.len() >= 10, "{kind:?}: too few smooth coordinates");
        for j in coords {
            let fd = central_difference(|p| naive_loss(p, &spec, &batch, &loss), &w, j);
            assert!(
                within_fd_tolerance(grad[j], fd),
                "{kind:?} {act:?} coordinate {j}: analytic {} vs numeric {fd}",
                grad[j]
            );
        }
    }
}

#[test]
fn relu_mlp_gradients_match_finite_differences() {
    check_model(vec![2, 16, 3], Activation::Relu, 11);
    check_model(vec![5, 12, 8, 4], Activation::Relu, 12);
}

#[test]
fn tanh_mlp_gradients_match_finite_differences() {
    check_model(vec![3, 10, 5], Activation::Tanh, 13);
}

#[test]
fn logistic_model_gradients_match_finite_differences() {
    check_model(vec![4, 3], Activation::Relu, 14);
}

#[test]
fn fairness_gradient_through_the_model_matches_finite_differences() {
    let spec = ModelSpec::new(vec![2, 16, 3], Activation::Tanh, 5).unwrap();
    let mut r = rng(5);
    let batches: Vec<_> = (0..3).map(|_| random_batch(&mut r, 12, 2, 3)).collect();
    let losses = [LossSpec::mbs(1e-3).unwrap(), LossSpec::ce(), LossSpec::ce()];
    let w = random_params(&mut r, spec.param_count(), 0.8);
    let pref = PreferenceVector::new(vec![0.0, 1.0, 1.0]).unwrap();
    let client_losses = |p: &[f64]| -> Vec<f64> {
        batches.iter().zip(&losses).map(|(b, l)| naive_loss(p, &spec, b, l)).collect()
    };
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for (b, l) in batches.iter().zip(&losses) {
        let (v, g) = loss_and_grad(&ParamVector::new(w.clone()), &spec, b, l).unwrap();
        values.push(v);
        grads.push(g);
    }
    let g = fairness_grad(&values, &pref, &GradientMatrix::from_columns(grads).unwrap()).unwrap();
    let coords = pick_coordinates(&mut r, w.len(), 20, |j| !kink_adjacent(&w, &spec, &batches[0], 1e-3, j));
    for j in coords {
        let fd = central_difference(|p| fairness_value(&client_losses(p), &pref).unwrap(), &w, j);
        assert!(within_fd_tolerance(g[j], fd), "coordinate {j}: {} vs {fd}", g[j]);
    }
}
