//! The two-phase descent/ascent schedule and its per-session runner.
//!
//! A session of `T` iterations spends the first `floor(p * T)` on plain
//! gradient descent and the remainder on paired descent-then-ascent updates.
//! The phase always ends on a descent: an odd remainder gets a single final
//! descent step, and an even remainder has its last ascent replaced by a
//! descent, so a session never hands a deliberately worsened point to its
//! successor.
//!
//! RNG contract (bitwise reproducibility): batch shuffling uses
//! `ChaCha8Rng::seed_from_u64(rng_seed)`; per-pass sample orders are drawn
//! with Fisher-Yates `shuffle` and consumed in chunks of `batch_size` (final
//! short chunk included). Injected gradient noise, when enabled, uses an
//! independent `ChaCha8Rng::seed_from_u64(rng_seed ^ NOISE_STREAM_SALT)`
//! drawing `dim` standard normals per perturbed gradient, one draw per
//! sub-step in the order the gradients are consumed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BatchRef, LossOracle};
use crate::param::ParamVector;

/// Salt for the gradient-noise RNG stream, kept distinct from batch shuffling.
pub const NOISE_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Which sub-step produced an iteration's update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    Normal,
    AlternativeDescent,
    AlternativeAscent,
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseTag::Normal => "normal",
            PhaseTag::AlternativeDescent => "alt_descent",
            PhaseTag::AlternativeAscent => "alt_ascent",
        };
        f.write_str(s)
    }
}

/// Whether the two sub-steps of a pair see the same mini-batch.
///
/// `SameBatch` is the default and what the surrogate analysis assumes;
/// `FreshBatch` exists for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairBatchMode {
    SameBatch,
    FreshBatch,
}

/// Iteration budget, phase split, learning rate, and regularization
/// coefficients for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Total iteration budget `T` (every sub-step counts as one iteration).
    pub total_iterations: usize,
    /// Fraction `p` of the budget spent in the normal phase, in `[0, 1]`.
    pub alternative_ratio: f64,
    pub learning_rate: f64,
    /// Regularizer coefficient; `lambda_a`/`lambda_b` default to it.
    pub lambda_reg: f64,
    /// Descent-step regularizer coefficient, when split from `lambda_reg`.
    pub lambda_a: Option<f64>,
    /// Ascent-step regularizer coefficient, when split from `lambda_reg`.
    pub lambda_b: Option<f64>,
    pub batch_size: usize,
    pub pair_batch_mode: PairBatchMode,
    /// Std of Gaussian noise added to every consumed gradient; a harness
    /// knob standing in for mini-batch noise on deterministic losses.
    pub grad_noise_std: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iterations: 1000,
            alternative_ratio: 25.0 / 30.0,
            learning_rate: 0.01,
            lambda_reg: 100.0,
            lambda_a: None,
            lambda_b: None,
            batch_size: 32,
            pair_batch_mode: PairBatchMode::SameBatch,
            grad_noise_std: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::Contract("total_iterations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alternative_ratio) {
            return Err(Error::Contract(format!(
                "alternative_ratio must lie in [0, 1], got {}",
                self.alternative_ratio
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("lambda_reg", Some(self.lambda_reg)),
            ("lambda_a", self.lambda_a),
            ("lambda_b", self.lambda_b),
            ("grad_noise_std", Some(self.grad_noise_std)),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) {
                    return Err(Error::Contract(format!(
                        "{name} must be non-negative, got {v}"
                    )));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `floor(p * T)`, the length of the normal phase.
    pub fn normal_iterations(&self) -> usize {
        (self.alternative_ratio * self.total_iterations as f64).floor() as usize
    }

    pub fn effective_lambda_a(&self) -> f64 {
        self.lambda_a.unwrap_or(self.lambda_reg)
    }

    pub fn effective_lambda_b(&self) -> f64 {
        self.lambda_b.unwrap_or(self.lambda_reg)
    }
}

/// One logged iteration: the objective value at the pre-update point and the
/// norm of the update gradient (before noise injection).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub session: usize,
    pub iteration: usize,
    pub phase: PhaseTag,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Receives records in iteration order.
pub trait RecordSink {
    fn record(&mut self, record: IterationRecord);
}

/// In-memory sink.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Vec<IterationRecord>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<IterationRecord> {
        self.records
    }
}

impl RecordSink for MemorySink {
    fn record(&mut self, record: IterationRecord) {
        self.records.push(record);
    }
}

/// Discards records.
#[derive(Debug, Default)]
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _record: IterationRecord) {}
}

/// Plain gradient-descent step `point - eta * grad`, as a new vector.
pub fn sgd_step(point: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    grad.check_dim("sgd_step gradient", point.dim())?;
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {eta}")));
    }
    grad.check_finite("sgd_step gradient")?;
    Ok(point.add_scaled(grad, -eta))
}

/// One descent-then-ascent pair on the same batch:
/// `theta' = theta - eta * grad(theta)`, then `theta'' = theta' + eta * grad(theta')`.
pub fn alternating_pair<L: LossOracle + ?Sized>(
    loss: &L,
    point: &ParamVector,
    eta: f64,
    batch: &BatchRef,
) -> Result<ParamVector> {
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {eta}")));
    }
    let down = loss.evaluate(point, batch)?;
    let mid = point.add_scaled(&down.gradient, -eta);
    let up = loss.evaluate(&mid, batch)?;
    Ok(mid.add_scaled(&up.gradient, eta))
}

/// The regularized pair: ascent applies to the task loss only while the
/// regularizer keeps descending in both sub-steps.
///
/// `theta'  = theta  - eta * (grad_task + lambda_a * grad_reg)` at `theta`;
/// `theta'' = theta' - eta * (-grad_task + lambda_b * grad_reg)` at `theta'`.
pub fn regularized_alternating_pair<L, R>(
    task_loss: &L,
    regularizer: &R,
    point: &ParamVector,
    eta: f64,
    lambda_a: f64,
    lambda_b: f64,
    batch: &BatchRef,
) -> Result<ParamVector>
where
    L: LossOracle + ?Sized,
    R: LossOracle + ?Sized,
{
    if !(eta > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {eta}")));
    }
    if lambda_a < 0.0 || lambda_b < 0.0 {
        return Err(Error::Contract("regularizer coefficients must be non-negative".into()));
    }
    let t0 = task_loss.evaluate(point, batch)?;
    let r0 = regularizer.evaluate(point, &BatchRef::all(regularizer.num_samples()))?;
    let down = t0.gradient.add_scaled(&r0.gradient, lambda_a);
    let mid = point.add_scaled(&down, -eta);
    let t1 = task_loss.evaluate(&mid, batch)?;
    let r1 = regularizer.evaluate(&mid, &BatchRef::all(regularizer.num_samples()))?;
    let up = t1.gradient.scale(-1.0).add_scaled(&r1.gradient, lambda_b);
    Ok(mid.add_scaled(&up, -eta))
}

/// Serves shuffled sample indices in batch-sized chunks, reshuffling at every
/// pass over the data.
struct BatchStream {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            order: (0..n).collect(),
            cursor: n, // force a shuffle on first use
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self) -> BatchRef {
        if self.cursor >= self.n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = BatchRef::new(self.order[self.cursor..end].to_vec())
            .expect("stream chunks are non-empty");
        self.cursor = end;
        batch
    }
}

struct GradNoise {
    std: f64,
    rng: ChaCha8Rng,
}

impl GradNoise {
    fn new(std: f64, seed: u64) -> Option<Self> {
        if std > 0.0 {
            Some(Self {
                std,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })
        } else {
            None
        }
    }

    fn perturb(&mut self, grad: &mut ParamVector) {
        use rand::Rng;
        for g in grad.as_mut_slice() {
            *g += self.std * self.rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Runs one session of the two-phase schedule.
///
/// With a regularizer, the normal phase and pair descents use
/// `grad_task + lambda_a * grad_reg` and pair ascents use
/// `-grad_task + lambda_b * grad_reg`. Each iteration logs the objective
/// `task + lambda_a * reg` at the pre-update point and the norm of the
/// (pre-noise) update gradient. Aborts with a diagnostic error if the loss or
/// the parameters go non-finite.
pub fn run_session<L: LossOracle + ?Sized>(
    task_loss: &L,
    regularizer: Option<&dyn LossOracle>,
    theta0: &ParamVector,
    cfg: &ScheduleConfig,
    session: usize,
    rng_seed: u64,
    sink: &mut dyn RecordSink,
) -> Result<ParamVector> {
    cfg.validate()?;
    theta0.check_dim("run_session theta0", task_loss.dim())?;
    if let Some(reg) = regularizer {
        if reg.dim() != task_loss.dim() {
            return Err(Error::dim("run_session regularizer", task_loss.dim(), reg.dim()));
        }
    }

    let total = cfg.total_iterations;
    let normal = cfg.normal_iterations();
    let (lambda_a, lambda_b) = (cfg.effective_lambda_a(), cfg.effective_lambda_b());
    let mut stream = BatchStream::new(task_loss.num_samples(), cfg.batch_size, rng_seed);
    let mut noise = GradNoise::new(cfg.grad_noise_std, rng_seed ^ NOISE_STREAM_SALT);
    let mut theta = theta0.clone();

    let reg_batch = BatchRef::all(regularizer.map_or(1, |r| r.num_samples()));
    // objective value, update gradient, and logged loss for one sub-step
    let eval_step = |theta: &ParamVector, batch: &BatchRef, ascent: bool| -> Result<(f64, ParamVector)> {
        let task = task_loss.evaluate(theta, batch)?;
        match regularizer {
            None => {
                let grad = if ascent {
                    task.gradient.scale(-1.0)
                } else {
                    task.gradient
                };
                Ok((task.value, grad))
            }
            Some(reg) => {
                let r = reg.evaluate(theta, &reg_batch)?;
                let loss = task.value + lambda_a * r.value;
                let grad = if ascent {
                    task.gradient.scale(-1.0).add_scaled(&r.gradient, lambda_b)
                } else {
                    task.gradient.add_scaled(&r.gradient, lambda_a)
                };
                Ok((loss, grad))
            }
        }
    };

    let mut pending_batch: Option<BatchRef> = None;
    for iteration in 1..=total {
        let phase = phase_for(iteration, normal, total);
        let ascent = phase == PhaseTag::AlternativeAscent;
        let batch = match (&phase, cfg.pair_batch_mode) {
            // an ascent completes a pair: reuse the descent's batch
            (PhaseTag::AlternativeAscent, PairBatchMode::SameBatch) => pending_batch
                .take()
                .unwrap_or_else(|| stream.next_batch()),
            _ => stream.next_batch(),
        };
        if phase == PhaseTag::AlternativeDescent && cfg.pair_batch_mode == PairBatchMode::SameBatch
        {
            pending_batch = Some(batch.clone());
        }

        let (loss, mut grad) = eval_step(&theta, &batch, ascent)?;
        if !loss.is_finite() {
            sink.record(IterationRecord {
                session,
                iteration,
                phase,
                loss,
                grad_norm: f64::NAN,
            });
            return Err(Error::Diverged {
                what: "loss",
                session,
                iteration,
                phase,
            });
        }
        sink.record(IterationRecord {
            session,
            iteration,
            phase,
            loss,
            grad_norm: grad.norm(),
        });
        if let Some(noise) = noise.as_mut() {
            noise.perturb(&mut grad);
        }
        theta = theta.add_scaled(&grad, -cfg.learning_rate);
        if !theta.is_finite() {
            return Err(Error::Diverged {
                what: "parameters",
                session,
                iteration,
                phase,
            });
        }
    }
    Ok(theta)
}

/// Phase of the `iteration`-th update (1-based) under the end-on-descent rule.
fn phase_for(iteration: usize, normal: usize, total: usize) -> PhaseTag {
    debug_assert!(iteration >= 1 && iteration <= total);
    if iteration <= normal {
        PhaseTag::Normal
    } else {
        let r = iteration - normal;
        if iteration == total || r % 2 == 1 {
            PhaseTag::AlternativeDescent
        } else {
            PhaseTag::AlternativeAscent
        }
    }
}
