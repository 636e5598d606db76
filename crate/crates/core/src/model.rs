//! Small reverse-mode MLP, synthetic class-incremental datasets, and the
//! mini-batch cross-entropy loss oracle built on them.
//!
//! The network is deliberately tiny: parameters live in one flat
//! [`ParamVector`] laid out layer by layer (row-major weight matrix, then
//! biases), and forward/backward passes are written out by hand.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::continual::SessionSequence;
use crate::error::{Error, Result};
use crate::losses::{BatchRef, LossEvaluation, LossOracle};
use crate::param::ParamVector;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output. The relu
    /// subgradient at 0 is taken as 0.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture and initialization seed of the MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Sizes from input to output, at least two entries; the last is the
    /// number of classes and must be at least 2.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Contract("mlp needs at least input and output layers".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("mlp layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::Contract("mlp output size must be at least 2".into()));
        }
        Ok(Self {
            layer_sizes,
            activation,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of trainable parameters: sum of `n_i * n_{i+1} + n_{i+1}`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Glorot-uniform weight initialization, zero biases, deterministic in the
/// spec seed. Weights are drawn layer by layer in storage order.
pub fn init_params(spec: &MlpSpec) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let half = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.gen_range(-half..half));
        }
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParamVector::new(values)
}

/// Labeled feature vectors for one session's classes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_set: BTreeSet<usize>,
    task_id: usize,
}

impl TaskDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, task_id: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Contract("dataset must be non-empty".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::dim("dataset labels", inputs.len(), labels.len()));
        }
        let d = inputs[0].len();
        if d == 0 || inputs.iter().any(|x| x.len() != d) {
            return Err(Error::Contract("dataset features must share a positive dimension".into()));
        }
        let class_set = labels.iter().copied().collect();
        Ok(Self {
            inputs,
            labels,
            class_set,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_set(&self) -> &BTreeSet<usize> {
        &self.class_set
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    fn check_batch(&self, batch: &BatchRef) -> Result<()> {
        if let Some(&bad) = batch.indices().iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidBatch(format!(
                "index {bad} out of range for {} samples",
                self.len()
            )));
        }
        Ok(())
    }
}

struct Forward {
    /// Activations per layer, input first, logits last.
    activations: Vec<Vec<f64>>,
}

fn forward_sample(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Forward {
    let mut activations = Vec::with_capacity(spec.layer_sizes.len());
    activations.push(input.to_vec());
    let mut offset = 0;
    let last = spec.layer_sizes.len() - 2;
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (m, k) = (w[0], w[1]);
        let weights = &params.as_slice()[offset..offset + m * k];
        let biases = &params.as_slice()[offset + m * k..offset + m * k + k];
        offset += m * k + k;
        let prev = activations.last().unwrap();
        let mut out = Vec::with_capacity(k);
        for o in 0..k {
            let row = &weights[o * m..(o + 1) * m];
            let z: f64 = row.iter().zip(prev).map(|(wi, ai)| wi * ai).sum::<f64>() + biases[o];
            out.push(if l == last { z } else { spec.activation.apply(z) });
        }
        activations.push(out);
    }
    Forward { activations }
}

/// The label group a sample's probability mass is scored against: the label
/// itself, or the merged background group when masking folds it into class 0.
fn label_group(label: usize, class_set: &BTreeSet<usize>, k: usize, masking: bool) -> Vec<usize> {
    if !masking {
        return vec![label];
    }
    let background: Vec<usize> = (0..k)
        .filter(|c| *c == 0 || !class_set.contains(c))
        .collect();
    if label == 0 || !class_set.contains(&label) {
        background
    } else {
        vec![label]
    }
}

/// Mean softmax cross-entropy over a batch, with reverse-mode gradient.
///
/// With `label_masking`, classes outside `data.class_set` are merged into a
/// shared background class (index 0): the loss scores the summed probability
/// of the merged group instead of a single class.
pub fn batch_loss(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &TaskDataset,
    batch: &BatchRef,
    label_masking: bool,
) -> Result<LossEvaluation> {
    params.check_dim("batch_loss params", spec.param_count())?;
    if data.feature_dim() != spec.input_dim() {
        return Err(Error::dim("batch_loss features", spec.input_dim(), data.feature_dim()));
    }
    data.check_batch(batch)?;
    let k = spec.num_classes();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} outside model output range 0..{k}"
        )));
    }

    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; spec.param_count()];

    for &idx in batch.indices() {
        let fwd = forward_sample(spec, params, data.input(idx));
        let logits = fwd.activations.last().unwrap();

        // stable log-sum-exp over all classes and over the label group
        let zmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_all: f64 = logits.iter().map(|z| (z - zmax).exp()).sum();
        let lse_all = zmax + sum_all.ln();
        let group = label_group(data.label(idx), &data.class_set, k, label_masking);
        let gmax = group
            .iter()
            .map(|&c| logits[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_g: f64 = group.iter().map(|&c| (logits[c] - gmax).exp()).sum();
        let lse_g = gmax + sum_g.ln();
        total += lse_all - lse_g;

        // d loss / d logits = softmax - group-normalized softmax
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse_all).exp() / n).collect();
        for &c in &group {
            delta[c] -= (logits[c] - lse_g).exp() / n;
        }

        // backprop through the layers
        let mut offsets = Vec::with_capacity(spec.layer_sizes.len() - 1);
        let mut off = 0;
        for w in spec.layer_sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        for l in (0..spec.layer_sizes.len() - 1).rev() {
            let (m, kk) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let off = offsets[l];
            let prev = &fwd.activations[l];
            for o in 0..kk {
                let d = delta[o];
                let wrow = off + o * m;
                for i in 0..m {
                    grad[wrow + i] += d * prev[i];
                }
                grad[off + m * kk + o] += d;
            }
            if l > 0 {
                let weights = &params.as_slice()[off..off + m * kk];
                let mut next = vec![0.0; m];
                for (i, nx) in next.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (o, d) in delta.iter().enumerate() {
                        s += d * weights[o * m + i];
                    }
                    *nx = s * spec.activation.derivative_from_output(fwd.activations[l][i]);
                }
                delta = next;
            }
        }
    }

    Ok(LossEvaluation {
        value: total / n,
        gradient: ParamVector::new(grad),
        batch_id: batch.id(),
    })
}

/// Fraction of samples whose arg-max class equals the label. Ties break
/// toward the lowest class index.
pub fn accuracy(spec: &MlpSpec, params: &ParamVector, data: &TaskDataset) -> Result<f64> {
    let all: BTreeSet<usize> = (0..spec.num_classes()).collect();
    accuracy_within(spec, params, data, &all)
}

/// Accuracy with the arg-max restricted to `allowed` classes, as used when
/// evaluating old tasks after later sessions.
pub fn accuracy_within(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &TaskDataset,
    allowed: &BTreeSet<usize>,
) -> Result<f64> {
    params.check_dim("accuracy params", spec.param_count())?;
    if data.feature_dim() != spec.input_dim() {
        return Err(Error::dim("accuracy features", spec.input_dim(), data.feature_dim()));
    }
    if allowed.is_empty() || allowed.iter().any(|&c| c >= spec.num_classes()) {
        return Err(Error::Contract("allowed class set invalid for this model".into()));
    }
    let mut hits = 0usize;
    for i in 0..data.len() {
        let fwd = forward_sample(spec, params, data.input(i));
        let logits = fwd.activations.last().unwrap();
        let mut best = usize::MAX;
        let mut best_z = f64::NEG_INFINITY;
        for &c in allowed {
            if logits[c] > best_z {
                best_z = logits[c];
                best = c;
            }
        }
        if best == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mini-batch cross-entropy oracle over one task dataset.
#[derive(Debug, Clone)]
pub struct MlpTaskLoss {
    spec: MlpSpec,
    data: TaskDataset,
    label_masking: bool,
}

impl MlpTaskLoss {
    pub fn new(spec: MlpSpec, data: TaskDataset, label_masking: bool) -> Result<Self> {
        if data.feature_dim() != spec.input_dim() {
            return Err(Error::dim("task loss features", spec.input_dim(), data.feature_dim()));
        }
        Ok(Self {
            spec,
            data,
            label_masking,
        })
    }

    pub fn data(&self) -> &TaskDataset {
        &self.data
    }
}

impl LossOracle for MlpTaskLoss {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn num_samples(&self) -> usize {
        self.data.len()
    }

    fn evaluate(&self, point: &ParamVector, batch: &BatchRef) -> Result<LossEvaluation> {
        batch_loss(&self.spec, point, &self.data, batch, self.label_masking)
    }
}

/// Builds the class-incremental blob benchmark: one Gaussian cluster per
/// class, centers on a ring, cluster std `0.35 * ring gap`. Session class
/// sets partition `0..K` in order (`classes_per_session[s]` new classes at
/// session `s`). Classes are interleaved around the ring so that each
/// session's new classes land between already-learned ones.
pub fn make_split_blobs(
    classes_per_session: &[usize],
    samples_per_class: usize,
    seed: u64,
) -> Result<SessionSequence> {
    if classes_per_session.is_empty() || classes_per_session.iter().any(|&c| c == 0) {
        return Err(Error::Contract("classes_per_session must be positive".into()));
    }
    if samples_per_class == 0 {
        return Err(Error::Contract("samples_per_class must be positive".into()));
    }
    let k: usize = classes_per_session.iter().sum();
    if k < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }

    const RADIUS: f64 = 2.0;
    let gap = 2.0 * RADIUS * (std::f64::consts::PI / k as f64).sin();
    let std = 0.35 * gap;
    let stride = (2..k).find(|s| gcd(*s, k) == 1).unwrap_or(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(classes_per_session.len());
    let mut class = 0usize;
    for (task_id, &nc) in classes_per_session.iter().enumerate() {
        let mut inputs = Vec::with_capacity(nc * samples_per_class);
        let mut labels = Vec::with_capacity(nc * samples_per_class);
        for c in class..class + nc {
            let angle = 2.0 * std::f64::consts::PI * ((c * stride) % k) as f64 / k as f64;
            let center = [RADIUS * angle.cos(), RADIUS * angle.sin()];
            for _ in 0..samples_per_class {
                let dx: f64 = rng.sample(rand_distr::StandardNormal);
                let dy: f64 = rng.sample(rand_distr::StandardNormal);
                inputs.push(vec![center[0] + std * dx, center[1] + std * dy]);
                labels.push(c);
            }
        }
        tasks.push(TaskDataset::new(inputs, labels, task_id)?);
        class += nc;
    }

    let spec = MlpSpec::new(vec![2, 32, k], Activation::Relu, seed ^ 0xA11CE)?;
    SessionSequence::new(tasks, spec)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Writes datasets in the line format `feature1,...,featureD,label,task_id`.
pub fn save_datasets<P: AsRef<Path>>(tasks: &[TaskDataset], path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for task in tasks {
        for i in 0..task.len() {
            for x in task.input(i) {
                write!(w, "{x},")?;
            }
            writeln!(w, "{},{}", task.label(i), task.task_id())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads datasets written by [`save_datasets`], grouping lines by task id.
/// Malformed lines are rejected with their 1-based line number.
pub fn load_datasets<P: AsRef<Path>>(path: P) -> Result<Vec<TaskDataset>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut per_task: std::collections::BTreeMap<usize, (Vec<Vec<f64>>, Vec<usize>)> =
        std::collections::BTreeMap::new();
    let mut feature_dim = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::MalformedLine {
                line: lineno,
                message: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        let d = fields.len() - 2;
        match feature_dim {
            None => feature_dim = Some(d),
            Some(fd) if fd != d => {
                return Err(Error::MalformedLine {
                    line: lineno,
                    message: format!("feature dimension {d} differs from earlier {fd}"),
                })
            }
            _ => {}
        }
        let mut features = Vec::with_capacity(d);
        for f in &fields[..d] {
            features.push(f.trim().parse::<f64>().map_err(|e| Error::MalformedLine {
                line: lineno,
                message: format!("bad feature {f:?}: {e}"),
            })?);
        }
        let label = fields[d].trim().parse::<usize>().map_err(|e| Error::MalformedLine {
            line: lineno,
            message: format!("bad label {:?}: {e}", fields[d]),
        })?;
        let task_id = fields[d + 1]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::MalformedLine {
                line: lineno,
                message: format!("bad task id {:?}: {e}", fields[d + 1]),
            })?;
        let entry = per_task.entry(task_id).or_default();
        entry.0.push(features);
        entry.1.push(label);
    }
    per_task
        .into_iter()
        .map(|(task_id, (inputs, labels))| TaskDataset::new(inputs, labels, task_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_22() -> MlpSpec {
        MlpSpec::new(vec![2, 4, 2], Activation::Tanh, 7).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let spec = spec_22();
        assert_eq!(spec.param_count(), 22);
        let a = init_params(&spec);
        let b = init_params(&spec);
        assert_eq!(a, b);
        assert_eq!(a.dim(), 22);
    }

    #[test]
    fn biases_start_at_zero() {
        let spec = spec_22();
        let p = init_params(&spec);
        // layout: 8 weights, 4 biases, 8 weights, 2 biases
        for i in 8..12 {
            assert_eq!(p[i], 0.0);
        }
        for i in 20..22 {
            assert_eq!(p[i], 0.0);
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let spec = spec_22();
        let params = ParamVector::zeros(22);
        let data = TaskDataset::new(vec![vec![0.3, -0.4], vec![1.0, 2.0]], vec![0, 1], 0).unwrap();
        let e = batch_loss(&spec, &params, &data, &BatchRef::all(2), false).unwrap();
        assert!((e.value - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn label_outside_output_range_is_rejected() {
        let spec = spec_22();
        let params = init_params(&spec);
        let data = TaskDataset::new(vec![vec![0.0, 0.0]], vec![5], 0).unwrap();
        let r = batch_loss(&spec, &params, &data, &BatchRef::all(1), false);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn loss_is_finite_for_finite_logits() {
        let spec = spec_22();
        let mut params = init_params(&spec);
        for v in params.as_mut_slice() {
            *v *= 50.0; // extreme but finite
        }
        let data = TaskDataset::new(vec![vec![3.0, -3.0]], vec![1], 0).unwrap();
        let e = batch_loss(&spec, &params, &data, &BatchRef::all(1), false).unwrap();
        assert!(e.value.is_finite());
    }

    #[test]
    fn batch_order_does_not_change_value() {
        let spec = spec_22();
        let params = init_params(&spec);
        let inputs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, -(i as f64)]).collect();
        let data = TaskDataset::new(inputs, vec![0, 1, 0, 1, 0, 1], 0).unwrap();
        let a = batch_loss(&spec, &params, &data, &BatchRef::new(vec![0, 1, 2, 3, 4, 5]).unwrap(), false)
            .unwrap();
        let b = batch_loss(&spec, &params, &data, &BatchRef::new(vec![5, 3, 1, 4, 2, 0]).unwrap(), false)
            .unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn masking_is_identity_when_class_set_covers_model() {
        let spec = spec_22();
        let params = init_params(&spec);
        let data =
            TaskDataset::new(vec![vec![0.1, 0.2], vec![-0.3, 0.4]], vec![0, 1], 0).unwrap();
        let m = batch_loss(&spec, &params, &data, &BatchRef::all(2), true).unwrap();
        let u = batch_loss(&spec, &params, &data, &BatchRef::all(2), false).unwrap();
        assert_eq!(m.value, u.value);
        assert_eq!(m.gradient, u.gradient);
    }

    #[test]
    fn masking_merges_unseen_classes_into_background() {
        // 3-class model, dataset of class 1 only: group for label 0/2 is {0,2}
        let spec = MlpSpec::new(vec![2, 3], Activation::Tanh, 1).unwrap();
        let params = init_params(&spec);
        let data = TaskDataset::new(vec![vec![0.5, 0.5]], vec![1], 0).unwrap();
        let masked = batch_loss(&spec, &params, &data, &BatchRef::all(1), true).unwrap();
        let unmasked = batch_loss(&spec, &params, &data, &BatchRef::all(1), false).unwrap();
        // label 1 is in the class set, so its group is the singleton either way
        assert!((masked.value - unmasked.value).abs() < 1e-12);
    }

    #[test]
    fn constant_favoring_logits_give_full_accuracy() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Tanh, 0).unwrap();
        let mut params = ParamVector::zeros(spec.param_count());
        // bias of class 1 output
        let bias_idx = 2 * 2 + 1;
        params[bias_idx] = 5.0;
        let data = TaskDataset::new(vec![vec![0.0, 0.0]; 10], vec![1; 10], 0).unwrap();
        assert_eq!(accuracy(&spec, &params, &data).unwrap(), 1.0);
        // and zero when every label is the other class
        let data0 = TaskDataset::new(vec![vec![0.0, 0.0]; 10], vec![0; 10], 0).unwrap();
        assert_eq!(accuracy(&spec, &params, &data0).unwrap(), 0.0);
    }

    #[test]
    fn argmax_ties_break_toward_lowest_class() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Tanh, 0).unwrap();
        let params = ParamVector::zeros(spec.param_count());
        let data = TaskDataset::new(vec![vec![1.0, 1.0]], vec![0], 0).unwrap();
        assert_eq!(accuracy(&spec, &params, &data).unwrap(), 1.0);
    }

    #[test]
    fn fresh_net_on_balanced_two_class_data_is_near_chance() {
        // Monte-Carlo sanity bound established once: accuracy within
        // [0.35, 0.65] for 20 seeds on 1000 balanced samples.
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        for seed in 0..20 {
            let spec = MlpSpec::new(vec![2, 8, 2], Activation::Tanh, seed).unwrap();
            let params = init_params(&spec);
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..1000 {
                inputs.push(vec![
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                    rng.sample::<f64, _>(rand_distr::StandardNormal),
                ]);
                labels.push(i % 2);
            }
            let data = TaskDataset::new(inputs, labels, 0).unwrap();
            let acc = accuracy(&spec, &params, &data).unwrap();
            assert!((0.35..=0.65).contains(&acc), "seed {seed}: acc {acc}");
        }
    }

    #[test]
    fn split_blobs_partition_is_disjoint_and_deterministic() {
        let a = make_split_blobs(&[4, 1, 1, 1], 50, 9).unwrap();
        let b = make_split_blobs(&[4, 1, 1, 1], 50, 9).unwrap();
        assert_eq!(a.tasks().len(), 4);
        let sets: Vec<_> = a.tasks().iter().map(|t| t.class_set().clone()).collect();
        assert_eq!(sets[0], (0..4).collect());
        assert_eq!(sets[1], std::iter::once(4).collect());
        assert_eq!(sets[2], std::iter::once(5).collect());
        assert_eq!(sets[3], std::iter::once(6).collect());
        for (x, y) in a.tasks().iter().zip(b.tasks()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn dataset_roundtrip_through_text_format() {
        let seq = make_split_blobs(&[2, 1], 5, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("blobs-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        save_datasets(seq.tasks(), &path).unwrap();
        let loaded = load_datasets(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in seq.tasks().iter().zip(&loaded) {
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_reports_line_numbers() {
        let dir = std::env::temp_dir().join(format!("badblobs-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "0.1,0.2,0,0\n0.1,oops,1,0\n").unwrap();
        match load_datasets(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-line error, got {other:?}"),
        }
        std::fs::write(&path, "0.1,0.2,0,0\n0.3,1,0\n").unwrap();
        match load_datasets(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-line error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    mod gradient_checks {
        use super::*;

        fn fd_check(spec: &MlpSpec, data: &TaskDataset, params: &ParamVector) {
            let batch = BatchRef::all(data.len());
            let e = batch_loss(spec, params, data, &batch, false).unwrap();
            for i in 0..params.dim() {
                let h = 1e-6 * (1.0 + params[i].abs());
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fp = batch_loss(spec, &plus, data, &batch, false).unwrap().value;
                let fm = batch_loss(spec, &minus, data, &batch, false).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let a = e.gradient[i];
                let err = (a - fd).abs();
                assert!(
                    err < 1e-5 * a.abs().max(fd.abs()) || err < 1e-9,
                    "param {i}: analytic {a}, fd {fd}"
                );
            }
        }

        fn random_case(seed: u64, activation: Activation) -> (MlpSpec, TaskDataset, ParamVector) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = MlpSpec::new(vec![2, 4, 2], activation, seed).unwrap();
            let mut params = init_params(&spec);
            for v in params.as_mut_slice() {
                *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..8 {
                // jitter keeps relu pre-activations away from exact zero
                inputs.push(vec![
                    rng.gen_range(-2.0..2.0) + 1e-3 * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    rng.gen_range(-2.0..2.0) + 1e-3 * rng.sample::<f64, _>(rand_distr::StandardNormal),
                ]);
                labels.push(i % 2);
            }
            (spec, TaskDataset::new(inputs, labels, 0).unwrap(), params)
        }

        #[test]
        fn tanh_gradients_match_finite_differences_25_cases() {
            for seed in 0..25 {
                let (spec, data, params) = random_case(seed, Activation::Tanh);
                fd_check(&spec, &data, &params);
            }
        }

        #[test]
        fn relu_gradients_match_finite_differences_25_cases() {
            for seed in 100..125 {
                let (spec, data, params) = random_case(seed, Activation::Relu);
                fd_check(&spec, &data, &params);
            }
        }

        #[test]
        fn masked_gradients_match_finite_differences() {
            // 4-class model, dataset over classes {2, 3}: background group {0, 1}
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let spec = MlpSpec::new(vec![2, 5, 4], Activation::Tanh, 77).unwrap();
            let params = init_params(&spec);
            let inputs: Vec<Vec<f64>> = (0..8)
                .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let labels = vec![2, 3, 2, 3, 2, 3, 2, 3];
            let data = TaskDataset::new(inputs, labels, 1).unwrap();
            let batch = BatchRef::all(8);
            let e = batch_loss(&spec, &params, &data, &batch, true).unwrap();
            for i in (0..params.dim()).step_by(3) {
                let h = 1e-6 * (1.0 + params[i].abs());
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fp = batch_loss(&spec, &plus, &data, &batch, true).unwrap().value;
                let fm = batch_loss(&spec, &minus, &data, &batch, true).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let a = e.gradient[i];
                let err = (a - fd).abs();
                assert!(err < 1e-5 * a.abs().max(fd.abs()) || err < 1e-9);
            }
        }
    }
}
