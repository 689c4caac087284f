//! Loss functions, performance estimators and accuracy metrics.
//!
//! The scalar functions here are the reference definitions; the `*_node`
//! builders express the same losses on a [`ComputeGraph`] for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_batched, ModelBundle, Role, NUM_STAGES};
use crate::tensorops::{focal_term, ComputeGraph, Element, Var, LOG_CLAMP};

/// Label for a task the annotator could not resolve.
pub const MISSING_LABEL: i32 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per-stage consistency weights λ_s.
    pub stage: [f64; NUM_STAGES],
    /// Shape exponent ψ of the acquisition-retention indicator.
    pub psi: f64,
    /// Focusing parameter γ_m per task; tasks beyond the list use 1.
    pub gamma: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stage: [1.0; NUM_STAGES],
            psi: 4.0,
            gamma: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn gamma_for(&self, m: usize) -> f64 {
        self.gamma.get(m).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config(format!("stage weights must be >= 0: {:?}", self.stage)));
        }
        if !(self.psi > 1.0) {
            return Err(Error::Config(format!("psi must exceed 1, got {}", self.psi)));
        }
        if self.gamma.iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::Config(format!("gamma must be >= 0: {:?}", self.gamma)));
        }
        Ok(())
    }
}

/// `−y · ln ŷ` for a one-hot `y`, with `ŷ` clamped below at 1e-12.
pub fn cross_entropy<T: Element>(y: &[T], y_hat: &[T]) -> Result<T> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "label of length {} vs prediction of length {}",
            y.len(),
            y_hat.len()
        )));
    }
    let ones = y.iter().filter(|&&v| v == T::one()).count();
    let zeros = y.iter().filter(|&&v| v == T::zero()).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(Error::Contract(format!("label {y:?} is not one-hot")));
    }
    let clamp = T::of(LOG_CLAMP);
    Ok(y.iter()
        .zip(y_hat)
        .filter(|(&t, _)| t == T::one())
        .map(|(_, &p)| -p.max(clamp).ln())
        .sum())
}

/// `(1/|d|)·‖d − d′‖²`.
pub fn stage_consistency<T: Element>(d: &[T], d_teacher: &[T]) -> Result<T> {
    if d.len() != d_teacher.len() || d.is_empty() {
        return Err(Error::Dimension(format!(
            "embeddings of length {} and {}",
            d.len(),
            d_teacher.len()
        )));
    }
    let sq: T = d.iter().zip(d_teacher).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sq / T::of(d.len() as f64))
}

/// `Σ_s λ_s · L_cst,s`.
pub fn consistency_total(stage_losses: &[f64; NUM_STAGES], weights: &LossWeights) -> f64 {
    stage_losses.iter().zip(&weights.stage).map(|(l, w)| l * w).sum()
}

/// Acquisition-retention indicator `β = (1 − p̂^ψ)^{1/ψ}`.
pub fn pari_beta(p_hat: f64, psi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::Contract(format!("estimated accuracy {p_hat} outside [0, 1]")));
    }
    Ok((1.0 - p_hat.powf(psi)).powf(1.0 / psi))
}

/// `ω·p̂_prev + (1 − ω)·p_observed`.
pub fn update_accuracy_estimate(p_hat_prev: f64, p_observed: f64, omega: f64) -> f64 {
    omega * p_hat_prev + (1.0 - omega) * p_observed
}

/// `β·L_cls + (1 − β)·L_cst`.
pub fn kaa_total_loss(l_cls: f64, l_cst: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Contract(format!("beta {beta} outside [0, 1]")));
    }
    Ok(beta * l_cls + (1.0 - beta) * l_cst)
}

fn check_labels(labels: &[i32], class_counts: &[usize]) -> Result<()> {
    if labels.len() != class_counts.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} tasks",
            labels.len(),
            class_counts.len()
        )));
    }
    for (m, (&l, &k)) in labels.iter().zip(class_counts).enumerate() {
        if l != MISSING_LABEL && !(0..k as i32).contains(&l) {
            return Err(Error::Contract(format!(
                "label {l} for task {} outside -1 or 0..{k}",
                m + 1
            )));
        }
    }
    Ok(())
}

/// Masked multitask focal loss of one sample: the sum over tasks with a
/// label other than −1 of `−(1 − ŷ_m[c])^γ_m · ln ŷ_m[c]`.
pub fn focal_multitask_loss<T: Element>(labels: &[i32], probs: &[&[T]], weights: &LossWeights) -> Result<T> {
    let counts: Vec<usize> = probs.iter().map(|p| p.len()).collect();
    check_labels(labels, &counts)?;
    let mut total = T::zero();
    for (m, (&l, p)) in labels.iter().zip(probs).enumerate() {
        if l != MISSING_LABEL {
            total += focal_term(p[l as usize], weights.gamma_for(m));
        }
    }
    Ok(total)
}

/// Running estimate p̂ of each task's accuracy, refreshed once per cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPerformanceEstimate {
    pub omega: f64,
    estimates: Vec<f64>,
}

impl TaskPerformanceEstimate {
    /// Starts every task at chance level `1/|U_m|`.
    pub fn chance(class_counts: &[usize], omega: f64) -> Self {
        Self {
            omega,
            estimates: class_counts.iter().map(|&k| 1.0 / k as f64).collect(),
        }
    }

    pub fn with_defaults(defaults: Vec<f64>, omega: f64) -> Result<Self> {
        if defaults.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("initial estimates must lie in [0, 1]: {defaults:?}")));
        }
        Ok(Self {
            omega,
            estimates: defaults,
        })
    }

    /// p̂ used for the next visit of task `m`.
    pub fn estimate(&self, m: usize) -> f64 {
        self.estimates[m]
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    /// Folds in the accuracy task `m` achieved on its latest visit; the
    /// result is what the same task sees one cycle later.
    pub fn record(&mut self, m: usize, observed: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&observed) {
            return Err(Error::Contract(format!("observed accuracy {observed} outside [0, 1]")));
        }
        let next = update_accuracy_estimate(self.estimates[m], observed, self.omega);
        self.estimates[m] = next.clamp(0.0, 1.0);
        Ok(())
    }
}

/// Graph form of the per-stage consistency loss summed with weights λ_s.
/// Stages with zero weight are left out of the tape.
pub fn consistency_node<T: Element>(
    g: &mut ComputeGraph<T>,
    student: &[Var; NUM_STAGES],
    teacher: &[Var; NUM_STAGES],
    weights: &LossWeights,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for s in 0..NUM_STAGES {
        if weights.stage[s] != 0.0 {
            terms.push((g.mse_rows(student[s], teacher[s])?, weights.stage[s]));
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.weighted_sum(&terms)?))
}

/// Graph form of the masked multitask focal loss, averaged over the batch.
/// `labels[b][m]` is the label of sample `b` for task `m`.
pub fn focal_multitask_node<T: Element>(
    g: &mut ComputeGraph<T>,
    probs: &[Var],
    labels: &[Vec<i32>],
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (m, &p) in probs.iter().enumerate() {
        let column: Vec<Option<usize>> = labels
            .iter()
            .map(|row| (row[m] != MISSING_LABEL).then_some(row[m] as usize))
            .collect();
        if column.iter().any(Option::is_some) {
            terms.push((g.focal(p, &column, weights.gamma_for(m))?, 1.0));
        }
    }
    if terms.is_empty() {
        // Fully masked batch: a constant zero loss with no trainable inputs.
        let zero = g.constant(crate::tensorops::Tensor::scalar(T::zero()));
        return g.weighted_sum(&[(zero, 1.0)]);
    }
    g.weighted_sum(&terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Accuracy per requested task, `None` when it had no labelled example.
    pub per_task: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Unweighted mean over tasks that were present.
    pub average: Option<f64>,
}

/// Argmax accuracy per task over examples whose label is not −1.
pub fn accuracy_from_predictions(predicted: &[Vec<usize>], labels: &[Vec<i32>], tasks: &[usize]) -> AccuracyReport {
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut counts = Vec::with_capacity(tasks.len());
    for &m in tasks {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (b, row) in labels.iter().enumerate() {
            if row[m] != MISSING_LABEL {
                total += 1;
                if predicted[m][b] == row[m] as usize {
                    correct += 1;
                }
            }
        }
        counts.push(total);
        per_task.push((total > 0).then(|| correct as f64 / total as f64));
    }
    let present: Vec<f64> = per_task.iter().flatten().copied().collect();
    let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    AccuracyReport {
        per_task,
        counts,
        average,
    }
}

/// Runs `bundle`'s student backbone over `images` and scores `tasks`.
pub fn evaluate_accuracy(
    bundle: &ModelBundle<f32>,
    images: &[&[f32]],
    labels: &[Vec<i32>],
    tasks: &[usize],
) -> Result<AccuracyReport> {
    if images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images with {} label vectors",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Contract("accuracy over an empty dataset".into()));
    }
    for row in labels {
        check_labels(row, &bundle.config.class_counts)?;
    }
    let pred = predict_batched(images, bundle, Role::Student, 128)?;
    let predicted: Vec<Vec<usize>> = (0..bundle.num_tasks()).map(|m| pred.argmax(m)).collect();
    Ok(accuracy_from_predictions(&predicted, labels, tasks))
}
