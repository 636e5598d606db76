//! Session sequencing over disjoint tasks, the quadratic anchor regularizer,
//! and the accuracy/forgetting bookkeeping that replaces per-class IoU tables
//! at desk scale.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BatchRef, LossEvaluation, LossOracle};
use crate::model::{accuracy_within, init_params, MlpSpec, MlpTaskLoss, TaskDataset};
use crate::optimizer::{run_session, RecordSink, ScheduleConfig};
use crate::param::ParamVector;

/// Ordered disjoint task datasets sharing one model architecture.
#[derive(Debug, Clone)]
pub struct SessionSequence {
    tasks: Vec<TaskDataset>,
    shared_spec: MlpSpec,
}

impl SessionSequence {
    pub fn new(tasks: Vec<TaskDataset>, shared_spec: MlpSpec) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Contract("session sequence needs at least one task".into()));
        }
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for task in &tasks {
            if task.feature_dim() != shared_spec.input_dim() {
                return Err(Error::dim(
                    "session sequence features",
                    shared_spec.input_dim(),
                    task.feature_dim(),
                ));
            }
            for &c in task.class_set() {
                if c >= shared_spec.num_classes() {
                    return Err(Error::Contract(format!(
                        "class {c} outside model output range 0..{}",
                        shared_spec.num_classes()
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Contract(format!(
                        "class {c} appears in more than one session"
                    )));
                }
            }
        }
        Ok(Self { tasks, shared_spec })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn shared_spec(&self) -> &MlpSpec {
        &self.shared_spec
    }

    pub fn num_sessions(&self) -> usize {
        self.tasks.len()
    }

    /// Union of class sets of sessions `0..=through`.
    pub fn classes_through(&self, through: usize) -> BTreeSet<usize> {
        self.tasks[..=through]
            .iter()
            .flat_map(|t| t.class_set().iter().copied())
            .collect()
    }
}

/// Quadratic anchor `R(p) = 0.5 * sum_i w_i (p_i - anchor_i)^2`, the crate's
/// realization of the regularization term: zero exactly at the anchor, exact
/// gradient `w .* (p - anchor)` and Hessian `diag(w)`.
#[derive(Debug, Clone)]
pub struct AnchorRegularizer {
    anchor: ParamVector,
    weights: ParamVector,
}

impl AnchorRegularizer {
    /// Unit importance weights: plain L2 distance to the anchor.
    pub fn unit(anchor: ParamVector) -> Self {
        let weights = ParamVector::new(vec![1.0; anchor.dim()]);
        Self { anchor, weights }
    }

    /// Per-parameter importance weights, all non-negative.
    pub fn with_weights(anchor: ParamVector, weights: ParamVector) -> Result<Self> {
        weights.check_dim("anchor weights", anchor.dim())?;
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Contract("anchor weights must be non-negative and finite".into()));
        }
        Ok(Self { anchor, weights })
    }

    pub fn anchor(&self) -> &ParamVector {
        &self.anchor
    }
}

impl LossOracle for AnchorRegularizer {
    fn dim(&self) -> usize {
        self.anchor.dim()
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        point.check_dim("anchor regularizer", self.dim())?;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let d = point[i] - self.anchor[i];
            value += 0.5 * self.weights[i] * d * d;
            grad.push(self.weights[i] * d);
        }
        Ok(LossEvaluation {
            value,
            gradient: ParamVector::new(grad),
            batch_id: batch.id(),
        })
    }

    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        _batch: &BatchRef,
    ) -> Result<ParamVector> {
        point.check_dim("anchor hvp point", self.dim())?;
        direction.check_dim("anchor hvp direction", self.dim())?;
        Ok(ParamVector::new(
            direction
                .iter()
                .zip(self.weights.iter())
                .map(|(v, w)| v * w)
                .collect(),
        ))
    }

    fn has_exact_hessian(&self) -> bool {
        true
    }
}

/// Composite oracle `task + lambda * regularizer`.
#[derive(Debug, Clone)]
pub struct RegularizedLoss<L> {
    task: L,
    regularizer: AnchorRegularizer,
    lambda: f64,
}

/// Builds the composite objective of a regularized continual step.
pub fn regularized_loss<L: LossOracle>(
    task: L,
    regularizer: AnchorRegularizer,
    lambda: f64,
) -> Result<RegularizedLoss<L>> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    if regularizer.dim() != task.dim() {
        return Err(Error::dim("regularized_loss anchor", task.dim(), regularizer.dim()));
    }
    Ok(RegularizedLoss {
        task,
        regularizer,
        lambda,
    })
}

impl<L: LossOracle> LossOracle for RegularizedLoss<L> {
    fn dim(&self) -> usize {
        self.task.dim()
    }

    fn num_samples(&self) -> usize {
        self.task.num_samples()
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        let t = self.task.evaluate(point, batch)?;
        let r = self.regularizer.evaluate(point, &BatchRef::all(1))?;
        Ok(LossEvaluation {
            value: t.value + self.lambda * r.value,
            gradient: t.gradient.add_scaled(&r.gradient, self.lambda),
            batch_id: t.batch_id,
        })
    }

    fn hessian_vector_product(
        &self,
        point: &ParamVector,
        direction: &ParamVector,
        batch: &BatchRef,
    ) -> Result<ParamVector> {
        let th = self.task.hessian_vector_product(point, direction, batch)?;
        let rh = self
            .regularizer
            .hessian_vector_product(point, direction, &BatchRef::all(1))?;
        Ok(th.add_scaled(&rh, self.lambda))
    }

    fn has_exact_hessian(&self) -> bool {
        self.task.has_exact_hessian()
    }
}

/// Per-task accuracy after each session; entry `(task, after_session)` is
/// defined only for `after_session >= task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    size: usize,
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            entries: vec![None; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn set(&mut self, task: usize, after_session: usize, acc: f64) -> Result<()> {
        if task >= self.size || after_session >= self.size {
            return Err(Error::Contract(format!(
                "matrix index ({task}, {after_session}) out of range for {} sessions",
                self.size
            )));
        }
        if after_session < task {
            return Err(Error::Contract(format!(
                "entry ({task}, {after_session}) is below the diagonal and stays undefined"
            )));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Contract(format!("accuracy {acc} outside [0, 1]")));
        }
        self.entries[task * self.size + after_session] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after_session: usize) -> Option<f64> {
        if task >= self.size || after_session >= self.size {
            return None;
        }
        self.entries[task * self.size + after_session]
    }

    /// Defined `(task, after_session, accuracy)` triples in row order.
    pub fn defined_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.size).flat_map(move |t| {
            (0..self.size).filter_map(move |s| self.get(t, s).map(|a| (t, s, a)))
        })
    }

    /// Mean accuracy over all tasks after the final session.
    pub fn mean_final_accuracy(&self) -> Option<f64> {
        let last = self.size.checked_sub(1)?;
        let mut sum = 0.0;
        for t in 0..self.size {
            sum += self.get(t, last)?;
        }
        Some(sum / self.size as f64)
    }

    /// CSV serialization with header `task,after_session,accuracy`; absent
    /// entries are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,after_session,accuracy\n");
        for (t, s, a) in self.defined_entries() {
            out.push_str(&format!("{t},{s},{a}\n"));
        }
        out
    }
}

/// Forgetting of `task`: its maximum accuracy over the sessions since it was
/// learned, minus its accuracy after the final session. Non-negative because
/// the maximum ranges over the final column too.
pub fn forgetting(matrix: &AccuracyMatrix, task: usize) -> Result<f64> {
    if task >= matrix.size() {
        return Err(Error::Contract(format!(
            "task {task} out of range for {} sessions",
            matrix.size()
        )));
    }
    let last = matrix.size() - 1;
    let final_acc = matrix.get(task, last).ok_or_else(|| {
        Error::Contract(format!("entry ({task}, {last}) undefined; run all sessions first"))
    })?;
    let mut best = f64::NEG_INFINITY;
    for s in task..=last {
        let acc = matrix.get(task, s).ok_or_else(|| {
            Error::Contract(format!("entry ({task}, {s}) undefined; run all sessions first"))
        })?;
        best = best.max(acc);
    }
    Ok(best - final_acc)
}

/// Which optimizer drives each session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// The two-phase schedule as configured.
    AlterSgd,
    /// Plain SGD: the schedule with the alternative phase forced empty.
    PlainSgd,
}

/// Runs all sessions of a sequence.
///
/// Session 0 trains from `init_params(shared_spec)` under `cfg_initial` with
/// no regularizer; every later session anchors a unit-weight quadratic
/// regularizer at the previous session's parameters and trains under
/// `cfg_continual`. Training always masks labels (classes outside the current
/// session's class set count as background); evaluation after session `j`
/// scores each task seen so far with the arg-max restricted to the classes
/// learned through `j`. `PlainSgd` forces `alternative_ratio = 1`.
pub fn run_continual(
    seq: &SessionSequence,
    cfg_initial: &ScheduleConfig,
    cfg_continual: &ScheduleConfig,
    optimizer: OptimizerKind,
    seed: u64,
    sink: &mut dyn RecordSink,
) -> Result<(ParamVector, AccuracyMatrix)> {
    cfg_initial.validate()?;
    cfg_continual.validate()?;
    let spec = seq.shared_spec();
    let mut theta = init_params(spec);
    let mut matrix = AccuracyMatrix::new(seq.num_sessions());

    for (s, task) in seq.tasks().iter().enumerate() {
        let mut cfg = if s == 0 {
            cfg_initial.clone()
        } else {
            cfg_continual.clone()
        };
        if optimizer == OptimizerKind::PlainSgd {
            cfg.alternative_ratio = 1.0;
        }
        let loss = MlpTaskLoss::new(spec.clone(), task.clone(), true)?;
        let anchor = if s == 0 {
            None
        } else {
            Some(AnchorRegularizer::unit(theta.clone()))
        };
        let session_seed = seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        theta = run_session(
            &loss,
            anchor.as_ref().map(|a| a as &dyn LossOracle),
            &theta,
            &cfg,
            s,
            session_seed,
            sink,
        )?;

        let learned = seq.classes_through(s);
        for (i, earlier) in seq.tasks().iter().enumerate().take(s + 1) {
            let acc = accuracy_within(spec, &theta, earlier, &learned)?;
            matrix.set(i, s, acc)?;
        }
    }
    Ok((theta, matrix))
}
