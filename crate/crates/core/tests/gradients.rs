//! Central-difference checks of the full training objective on a tiny instance.

mod common;

use anchor_codec::train::gradcheck::{check_objective, grad_check, sample_coords};
use anchor_codec::train::{loss_and_grad, total_loss, MaskMode, ParamGroup, StepOptions};
use common::fixture;

#[test]
fn every_group_matches_central_differences() {
    let f = fixture();
    for use_autoencoder in [false, true] {
        let opts = StepOptions { noise: Some(&f.noise), use_autoencoder, masks: MaskMode::Soft, batch: None, reproducible: true };
        let reports = check_objective(&f.params, &f.weights, &f.cloud, &f.frame, &opts, 50, 1e-5, 11).unwrap();
        for (g, rep) in reports {
            assert!(rep.max_rel_err < 1e-4, "autoencoder={use_autoencoder} {g:?}: {rep:?}");
            if use_autoencoder || g != ParamGroup::Autoencoder {
                assert!(rep.checked >= 50.min(f.params.group(g).len()));
            }
        }
    }
}

#[test]
fn batched_objective_matches_central_differences() {
    let f = fixture();
    let batch = [1, 4, 6];
    let opts = StepOptions { noise: Some(&f.noise), use_autoencoder: true, masks: MaskMode::Soft, batch: Some(&batch), reproducible: false };
    for (g, rep) in check_objective(&f.params, &f.weights, &f.cloud, &f.frame, &opts, 30, 1e-5, 4).unwrap() {
        assert!(rep.max_rel_err < 1e-4, "{g:?}: {rep:?}");
    }
}

#[test]
fn corrupted_layer_is_reported() {
    let f = fixture();
    let opts = StepOptions { noise: Some(&f.noise), use_autoencoder: true, masks: MaskMode::Soft, batch: None, reproducible: true };
    let (parts, grads) = loss_and_grad(&f.params, &f.weights, &f.cloud, &f.frame, &opts, true).unwrap();
    let mut grads = grads.unwrap();
    // double the gradient of the first hidden layer's weights
    let l = f.params.model.layers[0];
    for v in &mut grads.model[l.weight_offset..l.bias_offset] {
        *v *= 2.0;
    }
    let floor = 1e-5 * total_loss(&parts, &f.weights, 0).unwrap().abs().max(1.0);
    let coords: Vec<usize> = (l.weight_offset..l.bias_offset).collect();
    let mut trial = f.params.clone();
    let rep = grad_check(
        |theta| {
            trial.model.params.copy_from_slice(theta);
            let (p, _) = loss_and_grad(&trial, &f.weights, &f.cloud, &f.frame, &opts, false).unwrap();
            total_loss(&p, &f.weights, 0).unwrap()
        },
        &f.params.model.params,
        &grads.model,
        &coords,
        floor,
    );
    assert!((rep.max_rel_err - 1.0).abs() < 0.05, "{rep:?}");
    assert_eq!(sample_coords(5, 50, 0).len(), 5);
}
