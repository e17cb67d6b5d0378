//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor::AnchorCloud;
use crate::error::Result;
use crate::train::loss::{loss_and_grad, total_loss, Frame, LossWeights, ParamGroup, Params, StepOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|numeric|, floor)`.
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Step for coordinate value `theta`.
pub fn fd_step(theta: f64) -> f64 {
    1e-6 * theta.abs().max(1.0)
}

/// Compare `analytic` with central differences of `loss` at `coords`.
/// `floor` bounds the denominator away from zero for vanishing gradients.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    floor: f64,
) -> GradCheckReport {
    let mut theta = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, worst_pair: (0.0, 0.0), checked: 0 };
    for &i in coords {
        let h = fd_step(params[i]);
        theta[i] = params[i] + h;
        let up = loss(&theta);
        theta[i] = params[i] - h;
        let down = loss(&theta);
        theta[i] = params[i];
        // divide by the step actually taken, not the nominal one
        let numeric = (up - down) / ((params[i] + h) - (params[i] - h));
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(floor);
        report.checked += 1;
        if !(err <= report.max_rel_err) {
            report.max_rel_err = err;
            report.worst = Some(i);
            report.worst_pair = (analytic[i], numeric);
        }
    }
    report
}

/// `count` distinct coordinates out of `len`, ascending; all of them when `len <= count`.
pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), len, count).into_vec();
    v.sort_unstable();
    v
}

/// Check every parameter group of the full objective at `count` coordinates each.
///
/// Central differences of a loss `L` carry rounding noise of about
/// `1e-10 |L|` at the step used here, so the denominator floor is
/// `floor_rel * max(1, |L|)`: derivatives smaller than that are compared in
/// absolute terms.
pub fn check_objective(
    params: &Params,
    weights: &LossWeights,
    cloud: &AnchorCloud<f64>,
    frame: &Frame,
    opts: &StepOptions,
    count: usize,
    floor_rel: f64,
    seed: u64,
) -> Result<Vec<(ParamGroup, GradCheckReport)>> {
    let (parts, grads) = loss_and_grad(params, weights, cloud, frame, opts, true)?;
    let grads = grads.expect("gradients were requested");
    let floor = floor_rel * total_loss(&parts, weights, 0)?.abs().max(1.0);
    let mut out = Vec::new();
    for (gi, g) in ParamGroup::ALL.into_iter().enumerate() {
        let len = params.group(g).len();
        let coords = sample_coords(len, count, seed.wrapping_add(gi as u64));
        let mut trial = params.clone();
        let report = grad_check(
            |theta| {
                trial.group_mut(g).copy_from_slice(theta);
                let (parts, _) = loss_and_grad(&trial, weights, cloud, frame, opts, false).expect("shapes were checked");
                total_loss(&parts, weights, 0).unwrap_or(f64::NAN)
            },
            params.group(g),
            grads.group(g),
            &coords,
            floor,
        );
        out.push((g, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = vec![0.3, -1.2, 0.5, 0.25];
        let r = grad_check(|t| t.iter().sum(), &w, &[1.0; 4], &[0, 1, 2, 3], 1e-8);
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn corrupted_gradient_reports_about_one() {
        let w = vec![0.5, 2.0];
        let good = [2.0 * 0.5, 2.0 * 2.0];
        let bad = [good[0], 2.0 * good[1]];
        let f = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>();
        assert!(grad_check(f, &w, &good, &[0, 1], 1e-8).max_rel_err < 1e-8);
        let r = grad_check(f, &w, &bad, &[0, 1], 1e-8);
        assert!((r.max_rel_err - 1.0).abs() < 1e-6, "{r:?}");
        assert_eq!(r.worst, Some(1));
    }

    #[test]
    fn coords_are_distinct_and_sorted() {
        let c = sample_coords(1000, 50, 3);
        assert_eq!(c.len(), 50);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coords(7, 50, 3), (0..7).collect::<Vec<_>>());
    }
}
