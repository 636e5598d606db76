//! Flatness metrics and the numerical verifier for the descent/ascent
//! surrogate: one paired update approximately equals a gradient step of
//! length `eta^2 / 2` on `|grad L|^2`, with an `O(eta^3)` residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{fd_hessian_vector_product, BatchRef, LossOracle};
use crate::optimizer::alternating_pair;
use crate::param::ParamVector;

/// Squared gradient norm `|grad L(point)|^2`, the first-order flatness proxy.
pub fn grad_norm_flatness<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    batch: &BatchRef,
) -> Result<f64> {
    Ok(loss.evaluate(point, batch)?.gradient.norm_sq())
}

/// Power-iteration estimate of the dominant Hessian eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    /// Rayleigh quotient at the final iterate; signed, dominant by magnitude.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Power iteration on the Hessian-vector product from a fixed-seed random
/// unit start. Converges when successive Rayleigh quotients differ by less
/// than `tol`; on hitting `max_iters` the estimate is returned flagged
/// unconverged.
pub fn hessian_top_eigenvalue<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    batch: &BatchRef,
    max_iters: usize,
    tol: f64,
) -> Result<EigenEstimate> {
    if max_iters == 0 {
        return Err(Error::Contract("max_iters must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Contract(format!("tol must be positive, got {tol}")));
    }
    let n = loss.dim();
    point.check_dim("hessian_top_eigenvalue point", n)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0F_E16E);
    let mut v: ParamVector = (0..n)
        .map(|_| {
            use rand::Rng;
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .collect();
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::Contract("degenerate start vector".into()));
    }
    v = v.scale(1.0 / norm);

    let mut estimate = f64::NAN;
    for k in 1..=max_iters {
        let hv = loss.hessian_vector_product(point, &v, batch)?;
        let rayleigh = v.dot(&hv);
        let hv_norm = hv.norm();
        if hv_norm <= f64::MIN_POSITIVE {
            // Hessian annihilates the iterate: spectrum is 0 along it
            return Ok(EigenEstimate {
                value: 0.0,
                converged: true,
                iterations: k,
            });
        }
        if k > 1 && (rayleigh - estimate).abs() < tol {
            return Ok(EigenEstimate {
                value: rayleigh,
                converged: true,
                iterations: k,
            });
        }
        estimate = rayleigh;
        v = hv.scale(1.0 / hv_norm);
    }
    Ok(EigenEstimate {
        value: estimate,
        converged: false,
        iterations: max_iters,
    })
}

/// Mean loss increase under `draws` random perturbations of radius `rho`,
/// directions uniform on the unit sphere, deterministic in `seed`.
pub fn perturbation_sharpness<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    rho: f64,
    draws: usize,
    seed: u64,
    batch: &BatchRef,
) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::Contract(format!("rho must be positive, got {rho}")));
    }
    if draws == 0 {
        return Err(Error::Contract("draws must be at least 1".into()));
    }
    let base = loss.evaluate(point, batch)?.value;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = loss.dim();
    let mut total = 0.0;
    for _ in 0..draws {
        let mut u: ParamVector = (0..n)
            .map(|_| {
                use rand::Rng;
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect();
        let norm = u.norm();
        if norm == 0.0 {
            continue;
        }
        u = u.scale(1.0 / norm);
        total += loss.evaluate(&point.add_scaled(&u, rho), batch)?.value - base;
    }
    Ok(total / draws as f64)
}

/// Bundle of the three flatness metrics at one point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub grad_norm_sq: f64,
    pub top_hessian_eigenvalue: f64,
    pub perturbation_sharpness: f64,
    pub point: ParamVector,
    pub rho: f64,
}

impl FlatnessReport {
    /// Computes all three metrics. `draws` must be at least 32 so the
    /// perturbation estimate is meaningful.
    pub fn compute<L: LossOracle + ?Sized>(
        loss: &L,
        point: &ParamVector,
        rho: f64,
        draws: usize,
        seed: u64,
        batch: &BatchRef,
    ) -> Result<Self> {
        if draws < 32 {
            return Err(Error::Contract(format!(
                "perturbation sharpness needs at least 32 draws, got {draws}"
            )));
        }
        Ok(Self {
            grad_norm_sq: grad_norm_flatness(loss, point, batch)?,
            top_hessian_eigenvalue: hessian_top_eigenvalue(loss, point, batch, 200, 1e-9)?.value,
            perturbation_sharpness: perturbation_sharpness(loss, point, rho, draws, seed, batch)?,
            point: point.clone(),
            rho,
        })
    }
}

/// Per-step-size comparison of the paired update against the surrogate
/// gradient step on `|grad L|^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub eta_values: Vec<f64>,
    pub composite_points: Vec<ParamVector>,
    pub surrogate_points: Vec<ParamVector>,
    /// `|composite - surrogate|` per eta.
    pub errors: Vec<f64>,
    /// Log-log slope of error against eta; absent when the two updates agree
    /// to round-off (quadratics), flagged by `exact_match`.
    pub fitted_order: Option<f64>,
    pub exact_match: bool,
}

/// Error threshold under which the composite and surrogate count as equal.
const EXACT_MATCH_TOL: f64 = 1e-10;

/// Runs the surrogate comparison at each step size.
///
/// The composite point is one [`alternating_pair`] on the batch; the
/// surrogate point is `point - (eta^2 / 2) * grad |grad L|^2`, with
/// `grad |grad L|^2 = 2 H grad L` computed through the oracle's exact
/// Hessian-vector product when it has one, and central differences with the
/// tightened step `1e-5 * (1 + |point|)` otherwise.
pub fn theorem1_check<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    eta_values: &[f64],
    batch: &BatchRef,
) -> Result<Theorem1Report> {
    if eta_values.len() < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 eta values, got {}",
            eta_values.len()
        )));
    }
    if eta_values.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Contract("eta values must be positive".into()));
    }
    if eta_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract("eta values must be strictly ascending".into()));
    }
    let span = eta_values.last().unwrap() / eta_values.first().unwrap();
    if span < 4.0 - 1e-9 {
        return Err(Error::Contract(format!(
            "eta values must span at least a 4x range, got {span:.3}x"
        )));
    }

    let grad = loss.evaluate(point, batch)?.gradient;
    let h_grad = if loss.has_exact_hessian() {
        loss.hessian_vector_product(point, &grad, batch)?
    } else {
        fd_hessian_vector_product(loss, point, &grad, batch, Some(1e-5))?
    };
    // grad |grad L|^2 = 2 H grad L, so the eta^2/2 step becomes eta^2 * H grad L
    let mut composite_points = Vec::with_capacity(eta_values.len());
    let mut surrogate_points = Vec::with_capacity(eta_values.len());
    let mut errors = Vec::with_capacity(eta_values.len());
    for &eta in eta_values {
        let composite = alternating_pair(loss, point, eta, batch)?;
        let surrogate = point.add_scaled(&h_grad, -eta * eta);
        errors.push(composite.sub(&surrogate).norm());
        composite_points.push(composite);
        surrogate_points.push(surrogate);
    }

    let exact_match = errors.iter().all(|e| *e <= EXACT_MATCH_TOL);
    let fitted_order = if exact_match {
        None
    } else {
        Some(log_log_slope(eta_values, &errors))
    };
    Ok(Theorem1Report {
        eta_values: eta_values.to_vec(),
        composite_points,
        surrogate_points,
        errors,
        fitted_order,
        exact_match,
    })
}

/// Least-squares slope of `ln err` against `ln eta`. Zero errors are floored
/// at `1e-300` so degenerate points drag the fit down rather than poison it.
fn log_log_slope(etas: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = etas.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{DoubleWellLoss, QuadraticLoss};

    fn b1() -> BatchRef {
        BatchRef::all(1)
    }

    #[test]
    fn grad_norm_flatness_examples() {
        let q = QuadraticLoss::scalar(2.0);
        let v = grad_norm_flatness(&q, &ParamVector::new(vec![1.0]), &b1()).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let at_min = grad_norm_flatness(&q, &ParamVector::zeros(1), &b1()).unwrap();
        assert!(at_min < 1e-10);
    }

    #[test]
    fn flat_center_neighborhood_has_smaller_grad_norm() {
        // closed-form gradients at offsets of 0.1 from each center:
        // 0.00196655 (flat) vs 1.19803 (sharp)
        let w = DoubleWellLoss::default();
        let flat = grad_norm_flatness(&w, &ParamVector::new(vec![-1.9]), &b1()).unwrap();
        let sharp = grad_norm_flatness(&w, &ParamVector::new(vec![2.1]), &b1()).unwrap();
        assert!((flat - 0.0019665489728061).abs() < 1e-12);
        assert!((sharp - 1.1980268704897477).abs() < 1e-10);
        assert!(flat < sharp);
    }

    #[test]
    fn power_iteration_on_diagonal_quadratics() {
        let q = QuadraticLoss::diagonal(&[1.0, 4.0], ParamVector::zeros(2)).unwrap();
        let e = hessian_top_eigenvalue(&q, &ParamVector::zeros(2), &b1(), 500, 1e-10).unwrap();
        assert!(e.converged);
        assert!((e.value - 4.0).abs() < 1e-6);

        let id = QuadraticLoss::diagonal(&[1.0, 1.0, 1.0], ParamVector::zeros(3)).unwrap();
        let e = hessian_top_eigenvalue(&id, &ParamVector::zeros(3), &b1(), 50, 1e-10).unwrap();
        assert!(e.converged);
        assert!((e.value - 1.0).abs() < 1e-12);
        assert!(e.iterations <= 2);
    }

    #[test]
    fn power_iteration_finds_negative_dominant_eigenvalue() {
        let q = QuadraticLoss::diagonal(&[-3.0, 1.0], ParamVector::zeros(2)).unwrap();
        let e = hessian_top_eigenvalue(&q, &ParamVector::zeros(2), &b1(), 500, 1e-10).unwrap();
        assert!((e.value + 3.0).abs() < 1e-6);
    }

    #[test]
    fn power_iteration_at_sharp_center() {
        // true curvature 11.0335258; the spec's 1% claim is against a2/s2^2
        let w = DoubleWellLoss::default();
        let e = hessian_top_eigenvalue(&w, &ParamVector::new(vec![2.0]), &b1(), 100, 1e-10).unwrap();
        assert!(e.converged);
        assert!((e.value - 11.0335258003383).abs() < 1e-9);
        assert!((e.value - 11.111111111111).abs() / 11.111111111111 < 0.01);
    }

    #[test]
    fn unconverged_flag_on_tiny_budget() {
        let q = QuadraticLoss::diagonal(&[1.0, 1.000001], ParamVector::zeros(2)).unwrap();
        let e = hessian_top_eigenvalue(&q, &ParamVector::zeros(2), &b1(), 1, 1e-15).unwrap();
        assert!(!e.converged);
        assert!(e.value.is_finite());
    }

    #[test]
    fn perturbation_sharpness_vanishes_with_rho() {
        for loss in [
            &QuadraticLoss::diagonal(&[2.0, 2.0], ParamVector::zeros(2)).unwrap() as &dyn LossOracle,
            &DoubleWellLoss::default() as &dyn LossOracle,
        ] {
            let p = ParamVector::zeros(loss.dim());
            let v = perturbation_sharpness(loss, &p, 1e-6, 64, 1, &b1()).unwrap();
            assert!(v.abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn isotropic_quadratic_sharpness_is_exact() {
        // E[0.5 rho^2 u'Au] with |u|=1 and A = 2I is rho^2 exactly, per draw
        let q = QuadraticLoss::diagonal(&[2.0, 2.0], ParamVector::zeros(2)).unwrap();
        let v = perturbation_sharpness(&q, &ParamVector::zeros(2), 0.1, 64, 9, &b1()).unwrap();
        assert!((v - 0.01).abs() < 1e-14);
    }

    #[test]
    fn anisotropic_quadratic_matches_trace_formula_within_3se() {
        // E = rho^2 trace(A) / (2 n); Monte-Carlo with many draws
        let diag = [0.5, 1.5, 3.0, 5.0];
        let q = QuadraticLoss::diagonal(&diag, ParamVector::zeros(4)).unwrap();
        let rho = 0.1;
        let draws = 100_000;
        let v = perturbation_sharpness(&q, &ParamVector::zeros(4), rho, draws, 17, &b1()).unwrap();
        let expect = rho * rho * diag.iter().sum::<f64>() / (2.0 * 4.0);
        // variance of 0.5 rho^2 u'Au is bounded by (0.5 rho^2 lambda_max)^2
        let se = 0.5 * rho * rho * 5.0 / (draws as f64).sqrt();
        assert!(
            (v - expect).abs() <= 3.0 * se,
            "got {v}, expected {expect} +- {}",
            3.0 * se
        );
    }

    #[test]
    fn sharp_center_is_sharper_under_perturbation() {
        let w = DoubleWellLoss::default();
        let flat = perturbation_sharpness(&w, &ParamVector::new(vec![-2.0]), 0.1, 128, 3, &b1())
            .unwrap();
        let sharp = perturbation_sharpness(&w, &ParamVector::new(vec![2.0]), 0.1, 128, 3, &b1())
            .unwrap();
        assert!(sharp > flat);
    }

    #[test]
    fn all_three_metrics_rank_sharp_above_flat() {
        let w = DoubleWellLoss::default();
        let delta = 0.1;
        let flat_pt = ParamVector::new(vec![w.flat_center() + delta]);
        let sharp_pt = ParamVector::new(vec![w.sharp_center() + delta]);
        let flat = FlatnessReport::compute(&w, &flat_pt, 0.05, 128, 5, &b1()).unwrap();
        let sharp = FlatnessReport::compute(&w, &sharp_pt, 0.05, 128, 5, &b1()).unwrap();
        assert!(flat.grad_norm_sq < sharp.grad_norm_sq);
        assert!(flat.top_hessian_eigenvalue < sharp.top_hessian_eigenvalue);
        assert!(flat.perturbation_sharpness < sharp.perturbation_sharpness);
    }

    #[test]
    fn theorem1_exact_on_quadratics() {
        let q = QuadraticLoss::diagonal(&[1.0, 4.0], ParamVector::zeros(2)).unwrap();
        let r = theorem1_check(
            &q,
            &ParamVector::new(vec![1.0, -0.5]),
            &[0.02, 0.04, 0.08],
            &b1(),
        )
        .unwrap();
        assert!(r.exact_match);
        assert!(r.fitted_order.is_none());
        assert!(r.errors.iter().all(|e| *e <= 1e-10));
    }

    #[test]
    fn theorem1_identity_at_minimizer() {
        let w = DoubleWellLoss::default();
        let r = theorem1_check(
            &w,
            &ParamVector::new(vec![-2.0]),
            &[0.02, 0.04, 0.08],
            &b1(),
        )
        .unwrap();
        assert!(r.exact_match);
        for (c, s) in r.composite_points.iter().zip(&r.surrogate_points) {
            assert!((c[0] - s[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn theorem1_order_on_double_well() {
        // high-precision reference: order 2.995 at -1.5 with these etas
        let w = DoubleWellLoss::default();
        let r = theorem1_check(
            &w,
            &ParamVector::new(vec![-1.5]),
            &[0.02, 0.04, 0.08],
            &b1(),
        )
        .unwrap();
        assert!(!r.exact_match);
        let order = r.fitted_order.unwrap();
        assert!((order - 2.995).abs() < 0.01, "order {order}");
    }

    #[test]
    fn theorem1_rejects_narrow_eta_ranges() {
        let w = DoubleWellLoss::default();
        let p = ParamVector::new(vec![-1.0]);
        assert!(theorem1_check(&w, &p, &[0.02, 0.04], &b1()).is_err());
        assert!(theorem1_check(&w, &p, &[0.02, 0.03, 0.04], &b1()).is_err());
        assert!(theorem1_check(&w, &p, &[0.04, 0.03, 0.02], &b1()).is_err());
    }

    #[test]
    fn reports_serialize_with_named_fields() {
        let w = DoubleWellLoss::default();
        let r = theorem1_check(&w, &ParamVector::new(vec![-1.5]), &[0.02, 0.04, 0.08], &b1())
            .unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in [
            "eta_values",
            "composite_points",
            "surrogate_points",
            "errors",
            "fitted_order",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let f = FlatnessReport::compute(&w, &ParamVector::new(vec![-2.0]), 0.05, 32, 0, &b1())
            .unwrap();
        let json = serde_json::to_value(&f).unwrap();
        for key in [
            "grad_norm_sq",
            "top_hessian_eigenvalue",
            "perturbation_sharpness",
            "point",
            "rho",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    mod power_iteration_vs_dense {
        use super::*;
        use nalgebra::DMatrix;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        #[test]
        fn agrees_with_dense_eigendecomposition_up_to_dim_8() {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            for case in 0..20 {
                let n = 1 + case % 8;
                // A = B'B + diag boost to vary spectra
                let b: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let mut rows = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        rows[i][j] = (0..n).map(|k| b[k][i] * b[k][j]).sum::<f64>();
                    }
                    rows[i][i] += rng.gen_range(0.0..0.5);
                }
                let q = QuadraticLoss::new(rows.clone(), ParamVector::zeros(n)).unwrap();
                let est = hessian_top_eigenvalue(&q, &ParamVector::zeros(n), &b1(), 100_000, 1e-13)
                    .unwrap();

                let dense = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                let spectrum = dense.symmetric_eigenvalues();
                let top = spectrum.iter().cloned().fold(0.0f64, |acc, l| {
                    if l.abs() > acc.abs() {
                        l
                    } else {
                        acc
                    }
                });
                assert!(
                    (est.value - top).abs() <= 1e-6 * top.abs().max(1e-12),
                    "case {case}: power {} vs dense {top}",
                    est.value
                );
            }
        }
    }
}
