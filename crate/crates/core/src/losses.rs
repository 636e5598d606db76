//! The loss-oracle abstraction and the analytic benchmark losses.
//!
//! A [`LossOracle`] exposes a scalar objective together with its gradient and
//! a Hessian-vector product at any parameter point. Analytic losses answer in
//! closed form; model-backed losses fall back to central finite differences
//! for the Hessian-vector product. Every oracle accepts a [`BatchRef`] so the
//! optimizer code path is identical for deterministic and mini-batch losses;
//! analytic losses ignore it.

use crate::error::{Error, Result};
use crate::param::ParamVector;

/// Indices of the samples a gradient evaluation is taken over.
///
/// Losses without data (the analytic ones) expose a single pseudo-sample, so
/// `BatchRef::all(1)` is the batch to pass when none is meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRef {
    indices: Vec<usize>,
}

impl BatchRef {
    /// A batch over explicit sample indices. Must be non-empty.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidBatch("empty index list".into()));
        }
        Ok(Self { indices })
    }

    /// The full batch `0..n`.
    pub fn all(n: usize) -> Self {
        Self {
            indices: (0..n.max(1)).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Stable identifier of the index set (FNV-1a over the indices).
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &i in &self.indices {
            for b in (i as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Value and gradient of a loss at one point, over one batch.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub value: f64,
    pub gradient: ParamVector,
    pub batch_id: u64,
}

/// A differentiable scalar objective.
///
/// Implementations must be pure: the same `(point, batch)` always yields the
/// same evaluation, so oracles are safe to share across threads.
pub trait LossOracle: Send + Sync {
    /// Parameter dimension the oracle accepts.
    fn dim(&self) -> usize;

    /// Number of addressable samples. Analytic losses report 1.
    fn num_samples(&self) -> usize {
        1
    }

    /// Loss value and gradient at `point` over `batch`.
    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation>;

    /// Hessian-vector product `H(point) * direction`.
    ///
    /// The default computes central finite differences of the gradient,
    /// `(grad(p + eps v) - grad(p - eps v)) / (2 eps)` with
    /// `eps = sqrt(machine epsilon) * (1 + |p|) / max(|v|, 1e-12)`.
    /// Closed-form losses override this.
    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        batch: &BatchRef,
    ) -> Result<ParamVector> {
        fd_hessian_vector_product(self, point, direction, batch, None)
    }

    /// Whether `hessian_vector_product` is exact rather than finite-difference.
    fn has_exact_hessian(&self) -> bool {
        false
    }
}

impl<L: LossOracle + ?Sized> LossOracle for &L {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn num_samples(&self) -> usize {
        (**self).num_samples()
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        (**self).evaluate(point, batch)
    }

    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        batch: &BatchRef,
    ) -> Result<ParamVector> {
        (**self).hessian_vector_product(point, direction, batch)
    }

    fn has_exact_hessian(&self) -> bool {
        (**self).has_exact_hessian()
    }
}

/// Central-difference Hessian-vector product.
///
/// `step_scale` overrides the default `sqrt(machine epsilon)` factor in the
/// step-size formula; the landscape diagnostics pass `1e-5` to keep the
/// finite-difference error below the signal they measure.
pub fn fd_hessian_vector_product<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    direction: &ParamVector,
    batch: &BatchRef,
    step_scale: Option<f64>,
) -> Result<ParamVector> {
    if point.dim() == 0 {
        return Err(Error::Contract(
            "hessian_vector_product on zero-dimensional input".into(),
        ));
    }
    direction.check_dim("hessian_vector_product direction", point.dim())?;
    let dir_norm = direction.norm();
    if dir_norm == 0.0 {
        return Ok(ParamVector::zeros(point.dim()));
    }
    let scale = step_scale.unwrap_or_else(|| f64::EPSILON.sqrt());
    let eps = scale * (1.0 + point.norm()) / dir_norm.max(1e-12);
    let plus = loss.evaluate(&point.add_scaled(direction, eps), batch)?;
    let minus = loss.evaluate(&point.add_scaled(direction, -eps), batch)?;
    Ok(plus.gradient.sub(&minus.gradient).scale(1.0 / (2.0 * eps)))
}

/// Quadratic bowl `L(p) = 0.5 (p - offset)' A (p - offset)` with symmetric
/// positive-semidefinite `A`. Exact gradient `A (p - offset)` and Hessian `A`.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    matrix: Vec<f64>, // n*n, row-major, symmetrized at construction
    offset: ParamVector,
}

impl QuadraticLoss {
    /// Builds from explicit rows. Rejects non-square input and asymmetry
    /// beyond 1e-12; the stored matrix is the exact symmetrization.
    pub fn new(rows: Vec<Vec<f64>>, offset: ParamVector) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Contract("quadratic matrix must be non-empty".into()));
        }
        for row in &rows {
            if row.len() != n {
                return Err(Error::dim("quadratic matrix row", n, row.len()));
            }
        }
        offset.check_dim("quadratic offset", n)?;
        for i in 0..n {
            for j in 0..n {
                if (rows[i][j] - rows[j][i]).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "quadratic matrix asymmetric at ({i},{j}): {} vs {}",
                        rows[i][j], rows[j][i]
                    )));
                }
            }
        }
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                matrix[i * n + j] = 0.5 * (rows[i][j] + rows[j][i]);
            }
        }
        Ok(Self { matrix, offset })
    }

    pub fn diagonal(diag: &[f64], offset: ParamVector) -> Result<Self> {
        let n = diag.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, &d) in diag.iter().enumerate() {
            rows[i][i] = d;
        }
        Self::new(rows, offset)
    }

    /// One-dimensional `L(p) = 0.5 a p^2`.
    pub fn scalar(a: f64) -> Self {
        Self::diagonal(&[a], ParamVector::zeros(1)).expect("1x1 is always valid")
    }

    pub fn offset(&self) -> &ParamVector {
        &self.offset
    }

    fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.offset.dim();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &self.matrix[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        out
    }
}

impl LossOracle for QuadraticLoss {
    fn dim(&self) -> usize {
        self.offset.dim()
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        point.check_dim("quadratic evaluate", self.dim())?;
        let d: Vec<f64> = point
            .iter()
            .zip(self.offset.iter())
            .map(|(p, o)| p - o)
            .collect();
        let ad = self.mat_vec(&d);
        let value = 0.5 * d.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>();
        Ok(LossEvaluation {
            value,
            gradient: ParamVector::new(ad),
            batch_id: batch.id(),
        })
    }

    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        _batch: &BatchRef,
    ) -> Result<ParamVector> {
        if point.dim() == 0 {
            return Err(Error::Contract(
                "hessian_vector_product on zero-dimensional input".into(),
            ));
        }
        point.check_dim("quadratic hvp point", self.dim())?;
        direction.check_dim("quadratic hvp direction", self.dim())?;
        Ok(ParamVector::new(self.mat_vec(direction.as_slice())))
    }

    fn has_exact_hessian(&self) -> bool {
        true
    }
}

/// One-dimensional sum of two inverted Gaussian wells,
/// `L(x) = a1 + a2 - a1 exp(-(x-m1)^2 / (2 s1^2)) - a2 exp(-(x-m2)^2 / (2 s2^2))`,
/// with `s1 > s2` so the well at `m1` is flat and the one at `m2` is sharp.
#[derive(Debug, Clone)]
pub struct DoubleWellLoss {
    centers: (f64, f64),
    depths: (f64, f64),
    widths: (f64, f64),
}

impl DoubleWellLoss {
    pub fn new(centers: (f64, f64), depths: (f64, f64), widths: (f64, f64)) -> Result<Self> {
        if !(depths.0 > 0.0 && depths.1 > 0.0) {
            return Err(Error::Contract("double-well depths must be positive".into()));
        }
        if !(widths.0 > 0.0 && widths.1 > 0.0) {
            return Err(Error::Contract("double-well widths must be positive".into()));
        }
        if widths.0 <= widths.1 {
            return Err(Error::Contract(format!(
                "double-well requires s1 > s2 (flat well first), got s1={} s2={}",
                widths.0, widths.1
            )));
        }
        // curvature at the sharp center must dominate: a2/s2^2 > a1/s1^2
        if depths.1 / (widths.1 * widths.1) <= depths.0 / (widths.0 * widths.0) {
            return Err(Error::Contract(
                "double-well curvature ordering a2/s2^2 > a1/s1^2 violated".into(),
            ));
        }
        Ok(Self {
            centers,
            depths,
            widths,
        })
    }

    pub fn centers(&self) -> (f64, f64) {
        self.centers
    }

    /// Flat-well center `m1`.
    pub fn flat_center(&self) -> f64 {
        self.centers.0
    }

    /// Sharp-well center `m2`.
    pub fn sharp_center(&self) -> f64 {
        self.centers.1
    }

    fn wells(&self) -> [(f64, f64, f64); 2] {
        [
            (self.centers.0, self.depths.0, self.widths.0),
            (self.centers.1, self.depths.1, self.widths.1),
        ]
    }

    pub fn value(&self, x: f64) -> f64 {
        let mut v = self.depths.0 + self.depths.1;
        for (m, a, s) in self.wells() {
            v -= a * (-(x - m) * (x - m) / (2.0 * s * s)).exp();
        }
        v
    }

    pub fn grad(&self, x: f64) -> f64 {
        let mut g = 0.0;
        for (m, a, s) in self.wells() {
            g += a * (x - m) / (s * s) * (-(x - m) * (x - m) / (2.0 * s * s)).exp();
        }
        g
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let mut h = 0.0;
        for (m, a, s) in self.wells() {
            let d = x - m;
            h += a / (s * s) * (1.0 - d * d / (s * s)) * (-d * d / (2.0 * s * s)).exp();
        }
        h
    }
}

impl Default for DoubleWellLoss {
    /// The benchmark parameterization: wells at -2 and +2, unit depths,
    /// widths 1.5 (flat) and 0.3 (sharp).
    fn default() -> Self {
        Self::new((-2.0, 2.0), (1.0, 1.0), (1.5, 0.3)).expect("default parameters are valid")
    }
}

impl LossOracle for DoubleWellLoss {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        point.check_dim("double-well evaluate", 1)?;
        let x = point[0];
        Ok(LossEvaluation {
            value: self.value(x),
            gradient: ParamVector::new(vec![self.grad(x)]),
            batch_id: batch.id(),
        })
    }

    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        _batch: &BatchRef,
    ) -> Result<ParamVector> {
        point.check_dim("double-well hvp point", 1)?;
        direction.check_dim("double-well hvp direction", 1)?;
        Ok(ParamVector::new(vec![
            self.second_derivative(point[0]) * direction[0],
        ]))
    }

    fn has_exact_hessian(&self) -> bool {
        true
    }
}
