//! Cyclical monotask training with EMA consolidation into a teacher.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_backbone, forward_head, init_params, patchify, BackboneVars, EncoderConfig, FreezeMask, ModelBundle,
    ModelConfig, ParamStore, Role, NUM_STAGES,
};
use crate::objectives::{
    consistency_node, evaluate_accuracy, pari_beta, LossWeights, TaskPerformanceEstimate,
};
use crate::synthdata::{DatasetBundle, Example, Split};
use crate::tensorops::{AdamWConfig, ComputeGraph, Gradients, LrSchedule, OptimizerState, Tensor, Var};

/// Maps a 1-based learning iteration to its 1-based `(cycle, task)`.
pub fn index_map(i: u64, num_tasks: usize) -> Result<(u64, usize)> {
    if i == 0 || num_tasks == 0 {
        return Err(Error::Contract(format!("iteration {i} with {num_tasks} tasks")));
    }
    let m_total = num_tasks as u64;
    let t = i.div_ceil(m_total);
    Ok((t, (i - (t - 1) * m_total) as usize))
}

/// Inverse of [`index_map`].
pub fn index_unmap(t: u64, m: usize, num_tasks: usize) -> Result<u64> {
    if t == 0 || m == 0 || m > num_tasks {
        return Err(Error::Contract(format!(
            "cycle {t}, task {m} out of range for {num_tasks} tasks"
        )));
    }
    Ok((t - 1) * num_tasks as u64 + m as u64)
}

/// Stability coefficient `0.9 + 0.05·(1 − cos(tπ/T))`.
pub fn stability_alpha(t: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Contract("stability schedule with zero cycles".into()));
    }
    if t > total {
        return Err(Error::Contract(format!("cycle {t} beyond schedule of {total}")));
    }
    let x = t as f64 * std::f64::consts::PI / total as f64;
    Ok(0.9 + 0.05 * (1.0 - x.cos()))
}

/// `θ′ ← α·θ′ + (1 − α)·θ` over every backbone tensor.
pub fn ema_consolidate(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if teacher.names() != student.names() {
        return Err(Error::Dimension("teacher and student hold different tensors".into()));
    }
    for (t, s) in teacher.tensors().iter().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::Dimension(format!(
                "teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }
    let (a, b) = (alpha as f32, (1.0 - alpha) as f32);
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracySource {
    /// Running accuracy over the mini-batches of the task's latest pass.
    TrainingBatch,
    /// Accuracy of the student on the task's validation split after the pass.
    Validation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Minimum improvement, in accuracy points, of the cycle-average
    /// validation accuracy.
    pub min_delta_points: f64,
    pub patience: u64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            min_delta_points: 0.1,
            patience: 3,
        }
    }
}

/// Rate multiplier used by `KaaConfig::default` for from-scratch training on
/// the synthetic bundle.
pub const DEFAULT_KAA_LR_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrConfig {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_fraction: f64,
    /// Multiplies all three rates.
    pub scale: f64,
}

impl LrConfig {
    pub fn kaa() -> Self {
        Self {
            start: 1e-6,
            peak: 5e-4,
            end: 1e-5,
            warmup_fraction: 0.1,
            scale: 1.0,
        }
    }

    pub fn cal() -> Self {
        Self {
            peak: 1e-3,
            ..Self::kaa()
        }
    }

    pub fn schedule(&self, total_steps: u64) -> Result<LrSchedule> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("lr scale must be positive, got {}", self.scale)));
        }
        LrSchedule::with_warmup_fraction(
            self.warmup_fraction,
            self.start * self.scale,
            self.peak * self.scale,
            self.end * self.scale,
            total_steps,
        )
    }
}

impl Default for LrConfig {
    fn default() -> Self {
        Self::kaa()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KaaConfig {
    pub cycles: u64,
    pub batch_size: usize,
    pub omega: f64,
    /// Initial p̂ per task; chance level when absent.
    pub initial_estimate: Option<Vec<f64>>,
    pub accuracy_source: AccuracySource,
    pub weights: LossWeights,
    pub adamw: AdamWConfig,
    pub lr: LrConfig,
    pub early_stop: Option<EarlyStop>,
    /// Visit tasks in a shuffled order each cycle instead of 1..M.
    pub shuffle_tasks: bool,
    /// Use β ≡ 1 instead of the acquisition-retention indicator.
    pub fixed_beta: bool,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for KaaConfig {
    fn default() -> Self {
        Self {
            cycles: 40,
            batch_size: 32,
            omega: 0.9,
            initial_estimate: None,
            accuracy_source: AccuracySource::TrainingBatch,
            weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
            lr: LrConfig {
                scale: DEFAULT_KAA_LR_SCALE,
                ..LrConfig::kaa()
            },
            early_stop: None,
            shuffle_tasks: false,
            fixed_beta: false,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl KaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("at least one cycle is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega {} outside [0, 1)", self.omega)));
        }
        self.weights.validate()?;
        self.encoder.validate()
    }
}

/// One learning iteration (one pass over one task's training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub i: u64,
    pub t: u64,
    /// 1-based task index.
    pub m: usize,
    pub beta: f64,
    pub p_hat: f64,
    pub observed: f64,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_cst: f64,
    pub loss_total: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub t: u64,
    pub alpha: f64,
    /// Validation accuracy per task of the consolidated model (teacher
    /// backbone with the current heads).
    pub val_foundation: Vec<f64>,
    /// Validation accuracy per task of the student.
    pub val_student: Vec<f64>,
}

impl CycleRecord {
    pub fn foundation_average(&self) -> f64 {
        self.val_foundation.iter().sum::<f64>() / self.val_foundation.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KaaHistory {
    pub iterations: Vec<IterationRecord>,
    pub cycles: Vec<CycleRecord>,
    pub stopped_early_at: Option<u64>,
}

/// Batch-level loss values from one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub cst: f64,
    pub total: f64,
    pub correct: usize,
}

/// Teacher stage embeddings for `images`, computed without gradient
/// recording.
pub fn teacher_embeddings(bundle: &ModelBundle<f32>, images: &[&[f32]]) -> Result<[Tensor<f32>; NUM_STAGES]> {
    let enc = &bundle.config.encoder;
    let mut g = ComputeGraph::new();
    let leaves = bundle.leaves(&mut g, Role::Teacher, &FreezeMask::none(), |_| false);
    let x = g.constant(patchify(enc, images)?);
    let bb = forward_backbone(&mut g, enc, &leaves.backbone, x, images.len())?;
    Ok(bb.embeddings.map(|v| g.value(v).clone()))
}

/// Builds the training loss of one batch for task `m` (0-based) and returns
/// its gradients. `teacher` is `None` when no teacher pass was run; the
/// consistency term is then omitted, which is only valid when it carries no
/// weight.
pub fn kaa_batch_gradients(
    bundle: &ModelBundle<f32>,
    images: &[&[f32]],
    labels: &[usize],
    m: usize,
    beta: f64,
    weights: &LossWeights,
    teacher: Option<&[Tensor<f32>; NUM_STAGES]>,
) -> Result<(Gradients<f32>, crate::model::Leaves, StepLosses)> {
    let enc = &bundle.config.encoder;
    let mut g = ComputeGraph::new();
    let head_w = format!("head{}.", m + 1);
    let leaves = bundle.leaves(&mut g, Role::Student, &FreezeMask::none(), |name| {
        !name.starts_with("head") || name.starts_with(&head_w)
    });
    let x = g.constant(patchify(enc, images)?);
    let BackboneVars { embeddings, .. } = forward_backbone(&mut g, enc, &leaves.backbone, x, images.len())?;
    let probs = forward_head(&mut g, &leaves.heads, m, embeddings[NUM_STAGES - 1])?;
    let cls = g.cross_entropy(probs, labels)?;

    let mut terms = vec![(cls, beta)];
    let mut cst_var: Option<Var> = None;
    if beta < 1.0 {
        if let Some(t) = teacher {
            let tv: [Var; NUM_STAGES] = std::array::from_fn(|s| g.constant(t[s].clone()));
            cst_var = consistency_node(&mut g, &embeddings, &tv, weights)?;
        } else if weights.stage.iter().any(|&l| l != 0.0) {
            return Err(Error::Contract("consistency loss needs teacher embeddings".into()));
        }
    }
    if let Some(c) = cst_var {
        terms.push((c, 1.0 - beta));
    }
    let total = g.weighted_sum(&terms)?;

    let p = g.value(probs);
    let k = p.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| crate::model::argmax(&p.data()[r * k..(r + 1) * k]) == l)
        .count();
    let losses = StepLosses {
        cls: g.value(cls).data()[0] as f64,
        cst: cst_var.map_or(0.0, |c| g.value(c).data()[0] as f64),
        total: g.value(total).data()[0] as f64,
        correct,
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", losses.total)));
    }
    let grads = g.backward(total)?;
    Ok((grads, leaves, losses))
}

pub(crate) fn steps_per_pass(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

pub(crate) fn images_of<'a>(items: &[&'a Example]) -> Vec<&'a [f32]> {
    items.iter().map(|e| e.image.as_slice()).collect()
}

fn val_accuracy(model: &ModelBundle<f32>, data: &DatasetBundle, m: usize) -> Result<f64> {
    let val = data.subset(m, Split::Val);
    let labels: Vec<Vec<i32>> = val.iter().map(|e| e.visible_labels()).collect();
    let r = evaluate_accuracy(model, &images_of(&val), &labels, &[m])?;
    Ok(r.per_task[0].unwrap_or(0.0))
}

/// Model configuration matching a dataset bundle.
pub fn model_config_for(data: &DatasetBundle, encoder: &EncoderConfig) -> Result<ModelConfig> {
    let enc = EncoderConfig {
        height: data.config.height,
        width: data.config.width,
        ..encoder.clone()
    };
    let cfg = ModelConfig {
        encoder: enc,
        class_counts: data.config.class_counts(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains from a fresh initialisation and returns the foundation bundle.
pub fn run_kaa(data: &DatasetBundle, cfg: &KaaConfig) -> Result<(ModelBundle<f32>, KaaHistory)> {
    let model_cfg = model_config_for(data, &cfg.encoder)?;
    let mut model = init_params::<f32>(&model_cfg, cfg.seed)?;
    let history = run_kaa_on(&mut model, data, cfg)?;
    Ok((model.foundation(), history))
}

/// Runs the cyclical schedule on `model` in place. On return the student
/// and teacher hold their final values; call [`ModelBundle::foundation`]
/// for the deployable model.
pub fn run_kaa_on(model: &mut ModelBundle<f32>, data: &DatasetBundle, cfg: &KaaConfig) -> Result<KaaHistory> {
    cfg.validate()?;
    let num_tasks = model.num_tasks();
    if num_tasks != data.config.num_tasks() {
        return Err(Error::Config(format!(
            "model has {num_tasks} heads but the data has {} tasks",
            data.config.num_tasks()
        )));
    }
    let train: Vec<Vec<&Example>> = (0..num_tasks).map(|m| data.subset(m, Split::Train)).collect();
    for (m, t) in train.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::Config(format!("task {} has an empty training split", m + 1)));
        }
    }
    let per_cycle: u64 = train.iter().map(|t| steps_per_pass(t.len(), cfg.batch_size)).sum();
    let schedule = cfg.lr.schedule(per_cycle * cfg.cycles)?;
    let mut estimate = match &cfg.initial_estimate {
        Some(v) => {
            if v.len() != num_tasks {
                return Err(Error::Config(format!("{} initial estimates for {num_tasks} tasks", v.len())));
            }
            TaskPerformanceEstimate::with_defaults(v.clone(), cfg.omega)?
        }
        None => TaskPerformanceEstimate::chance(&model.config.class_counts, cfg.omega),
    };
    let mut opt = OptimizerState::new(cfg.adamw);
    let mask = FreezeMask::none();
    let mut history = KaaHistory::default();
    let mut step: u64 = 0;
    let mut best_avg = f64::NEG_INFINITY;
    let mut stale = 0u64;

    for t in 1..=cfg.cycles {
        let mut order: Vec<usize> = (0..num_tasks).collect();
        if cfg.shuffle_tasks {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX - t);
            order.shuffle(&mut rng);
        }
        for (slot, &m) in order.iter().enumerate() {
            let i = index_unmap(t, slot + 1, num_tasks)?;
            let p_hat = estimate.estimate(m);
            let beta = if cfg.fixed_beta { 1.0 } else { pari_beta(p_hat, cfg.weights.psi)? };
            let mut items = train[m].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i);
            items.shuffle(&mut rng);

            let need_teacher = beta < 1.0 && cfg.weights.stage.iter().any(|&l| l != 0.0);
            let (mut cls, mut cst, mut total) = (0.0, 0.0, 0.0);
            let mut correct = 0usize;
            let mut lr = 0.0;
            let mut steps = 0u64;
            for batch in items.chunks(cfg.batch_size) {
                let images = images_of(batch);
                let labels: Vec<usize> = batch.iter().map(|e| e.labels[m]).collect();
                let teacher = if need_teacher {
                    Some(teacher_embeddings(model, &images)?)
                } else {
                    None
                };
                let (mut grads, leaves, losses) =
                    kaa_batch_gradients(model, &images, &labels, m, beta, &cfg.weights, teacher.as_ref())
                        .map_err(|e| e.context(format!("cycle {t}, task {}", m + 1)))?;
                lr = schedule.lr_at(step)?;
                model
                    .apply_gradients(&mut grads, &leaves, &mask, &mut opt, lr)
                    .map_err(|e| e.context(format!("cycle {t}, task {}", m + 1)))?;
                step += 1;
                steps += 1;
                let w = batch.len() as f64;
                cls += losses.cls * w;
                cst += losses.cst * w;
                total += losses.total * w;
                correct += losses.correct;
            }
            let n = items.len() as f64;
            let observed = match cfg.accuracy_source {
                AccuracySource::TrainingBatch => correct as f64 / n,
                AccuracySource::Validation => val_accuracy(model, data, m)?,
            };
            estimate.record(m, observed)?;
            history.iterations.push(IterationRecord {
                i,
                t,
                m: m + 1,
                beta,
                p_hat,
                observed,
                lr,
                loss_cls: cls / n,
                loss_cst: cst / n,
                loss_total: total / n,
                steps,
            });
            log::debug!(
                "cycle {t} task {} beta {beta:.4} acc {observed:.4} loss {:.5}",
                m + 1,
                total / n
            );
        }
        let alpha = stability_alpha(t, cfg.cycles)?;
        ema_consolidate(&mut model.teacher, &model.student, alpha)?;

        let foundation = model.foundation();
        let mut val_foundation = Vec::with_capacity(num_tasks);
        let mut val_student = Vec::with_capacity(num_tasks);
        for m in 0..num_tasks {
            val_foundation.push(val_accuracy(&foundation, data, m)?);
            val_student.push(val_accuracy(model, data, m)?);
        }
        let record = CycleRecord {
            t,
            alpha,
            val_foundation,
            val_student,
        };
        log::info!(
            "cycle {t}/{}: alpha {alpha:.4} val {:?}",
            cfg.cycles,
            record.val_foundation
        );
        let avg = record.foundation_average();
        history.cycles.push(record);

        if let Some(es) = cfg.early_stop {
            if (avg - best_avg) * 100.0 < es.min_delta_points {
                stale += 1;
            } else {
                stale = 0;
            }
            best_avg = best_avg.max(avg);
            if stale >= es.patience {
                history.stopped_early_at = Some(t);
                break;
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_bundle, SynthConfig};

    #[test]
    fn index_examples() {
        assert_eq!(index_map(8, 7).unwrap(), (2, 1));
        assert_eq!(index_map(7, 7).unwrap(), (1, 7));
        assert_eq!(index_unmap(3, 1, 7).unwrap(), 15);
        assert!(index_unmap(1, 8, 7).is_err());
        assert!(index_unmap(1, 0, 7).is_err());
        assert!(index_map(0, 3).is_err());
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(stability_alpha(0, 40).unwrap(), 0.9);
        assert_eq!(stability_alpha(40, 40).unwrap(), 1.0);
        assert!((stability_alpha(20, 40).unwrap() - 0.95).abs() < 1e-15);
        assert!(stability_alpha(1, 0).is_err());
        let mut prev = 0.0;
        for t in 0..=40 {
            let a = stability_alpha(t, 40).unwrap();
            assert!(a >= prev && (0.9..=1.0).contains(&a));
            prev = a;
        }
    }

    fn store(v: f32) -> ParamStore<f32> {
        ParamStore::from_parts(vec!["w".into()], vec![Tensor::vector(vec![v, 2.0 * v])]).unwrap()
    }

    #[test]
    fn ema_examples() {
        let mut t = store(1.0);
        ema_consolidate(&mut t, &store(0.0), 0.9).unwrap();
        assert_eq!(t.tensors()[0].data()[0], 0.9);
        let mut t = store(1.0);
        ema_consolidate(&mut t, &store(5.0), 1.0).unwrap();
        assert_eq!(t, store(1.0));
        let other = ParamStore::from_parts(vec!["w".into()], vec![Tensor::vector(vec![0.0])]).unwrap();
        assert!(matches!(ema_consolidate(&mut t, &other, 0.9), Err(Error::Dimension(_))));
    }

    fn tiny_data() -> DatasetBundle {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            train_size: 12,
            val_size: 6,
            test_size: 6,
            joint_size: 6,
            ..Default::default()
        };
        generate_bundle(&cfg, 0).unwrap()
    }

    fn tiny_cfg() -> KaaConfig {
        KaaConfig {
            cycles: 2,
            batch_size: 8,
            encoder: EncoderConfig::toy(),
            ..Default::default()
        }
    }

    #[test]
    fn single_cycle_single_consolidation() {
        let mut data = tiny_data();
        data.config.attributes.truncate(1);
        for e in &mut data.examples {
            e.labels.truncate(1);
        }
        data.examples.retain(|e| {
            !matches!(e.partition, crate::synthdata::Partition::Subset { task, .. } if task > 0)
        });
        for (i, e) in data.examples.iter_mut().enumerate() {
            e.id = i as u64;
        }
        let cfg = KaaConfig {
            cycles: 1,
            ..tiny_cfg()
        };
        let mut model = init_params::<f32>(&model_config_for(&data, &cfg.encoder).unwrap(), 0).unwrap();
        let theta0 = model.teacher.clone();
        run_kaa_on(&mut model, &data, &cfg).unwrap();
        let mut expected = theta0;
        ema_consolidate(&mut expected, &model.student, stability_alpha(1, 1).unwrap()).unwrap();
        assert_eq!(model.teacher, expected);
    }

    #[test]
    fn run_is_deterministic_and_visits_tasks_in_order() {
        let data = tiny_data();
        let (a, ha) = run_kaa(&data, &tiny_cfg()).unwrap();
        let (b, hb) = run_kaa(&data, &tiny_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        for r in &ha.iterations {
            assert_eq!(index_map(r.i, 3).unwrap(), (r.t, r.m));
        }
        assert_eq!(ha.cycles.len(), 2);
        assert_eq!(ha.iterations[0].beta, pari_beta(1.0 / 3.0, 4.0).unwrap());
    }

    #[test]
    fn zero_consistency_weight_ignores_teacher() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut model = init_params::<f32>(&model_config_for(&data, &cfg.encoder).unwrap(), 3).unwrap();
        // make the teacher differ from the student
        for t in model.teacher.tensors_mut() {
            for v in t.data_mut() {
                *v *= 0.5;
            }
        }
        let weights = LossWeights {
            stage: [0.0; NUM_STAGES],
            ..Default::default()
        };
        let train = data.subset(0, Split::Train);
        let images = images_of(&train);
        let labels: Vec<usize> = train.iter().map(|e| e.labels[0]).collect();
        let teacher = teacher_embeddings(&model, &images).unwrap();
        let (mut with, lw, _) =
            kaa_batch_gradients(&model, &images, &labels, 0, 0.7, &weights, Some(&teacher)).unwrap();
        let (mut without, lo, _) = kaa_batch_gradients(&model, &images, &labels, 0, 0.7, &weights, None).unwrap();
        for (a, b) in lw.backbone.iter().zip(&lo.backbone) {
            match (with.take(*a), without.take(*b)) {
                (Some(ga), Some(gb)) => {
                    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
                }
                (None, None) => {}
                _ => panic!("gradient present in only one run"),
            }
        }
    }

    #[test]
    fn teacher_untouched_within_cycle() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut model = init_params::<f32>(&model_config_for(&data, &cfg.encoder).unwrap(), 0).unwrap();
        let before = model.teacher.clone();
        let train = data.subset(1, Split::Train);
        let images = images_of(&train);
        let labels: Vec<usize> = train.iter().map(|e| e.labels[1]).collect();
        let teacher = teacher_embeddings(&model, &images).unwrap();
        let (mut grads, leaves, _) =
            kaa_batch_gradients(&model, &images, &labels, 1, 0.5, &cfg.weights, Some(&teacher)).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default());
        model
            .apply_gradients(&mut grads, &leaves, &FreezeMask::none(), &mut opt, 1e-2)
            .unwrap();
        assert_eq!(model.teacher, before);
        assert!(!opt.has_state("head1.weight") && opt.has_state("head2.weight"));
    }

    #[test]
    fn empty_split_is_config_error() {
        let mut data = tiny_data();
        data.examples.retain(|e| {
            !matches!(e.partition, crate::synthdata::Partition::Subset { task: 2, split: Split::Train })
        });
        assert!(matches!(run_kaa(&data, &tiny_cfg()), Err(Error::Config(_))));
    }
}
