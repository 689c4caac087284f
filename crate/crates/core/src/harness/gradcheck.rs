//! Whole-model gradient verification on the toy encoder.
//!
//! In 64-bit mode the analytic gradient is compared with central differences
//! of the same 64-bit loss. In 32-bit mode the 32-bit analytic gradient is
//! compared with central differences of the 64-bit loss at the identical
//! (exactly widened) point, because 32-bit differences are dominated by
//! rounding at any step small enough to stay clear of ReLU kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    forward_backbone, forward_head, init_params, patchify, EncoderConfig, FreezeMask, ModelBundle, ModelConfig, Role,
    NUM_STAGES,
};
use crate::objectives::{consistency_node, focal_multitask_node, LossWeights, MISSING_LABEL};
use crate::tensorops::{
    check_against_differences, finite_difference_check, ComputeGraph, Element, GradCheckReport, GraphLoss, LossFunction,
    Tensor, Var,
};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE_F32: f64 = 1e-4;
pub const TOLERANCE_F64: f64 = 1e-6;
/// Minimum distance of every ReLU input from zero at the check point.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: u64 = 1000;
const BATCH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            _ => Err(crate::Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradCheck {
    pub precision: Precision,
    pub kaa_loss: f64,
    pub focal_loss: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl ModelGradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.kaa_loss.max(self.focal_loss)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= self.tolerance
    }
}

/// Toy model with jittered biases, a perturbed teacher and random images.
/// Values are drawn in f64 and rounded to f32 so both precisions see the
/// same point.
struct Toy {
    bundle: ModelBundle<f64>,
    images: Vec<Vec<f64>>,
}

/// Draws toy points from `seed` until every ReLU input of the student pass
/// is at least [`KINK_MARGIN`] away from zero.
fn toy(seed: u64) -> Result<Toy> {
    for attempt in 0..MAX_ATTEMPTS {
        let toy = toy_attempt(seed, attempt)?;
        let refs: Vec<&[f64]> = toy.images.iter().map(Vec::as_slice).collect();
        let enc = &toy.bundle.config.encoder;
        let mut g = ComputeGraph::new();
        let leaves = toy.bundle.leaves(&mut g, Role::Student, &FreezeMask::none(), |_| false);
        let x = g.constant(patchify(enc, &refs)?);
        forward_backbone(&mut g, enc, &leaves.backbone, x, refs.len())?;
        if g.kink_margin().is_some_and(|m| m >= KINK_MARGIN) {
            return Ok(toy);
        }
    }
    Err(crate::Error::Numeric(format!(
        "no toy point with ReLU margin {KINK_MARGIN} in {MAX_ATTEMPTS} draws"
    )))
}

fn toy_attempt(seed: u64, attempt: u64) -> Result<Toy> {
    let cfg = ModelConfig {
        encoder: EncoderConfig::toy(),
        class_counts: vec![3, 2, 4],
    };
    let mut bundle = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let names = bundle.student.names().to_vec();
    // Zero biases put ReLU inputs exactly on the kink wherever an upstream
    // unit is inactive; move them off it.
    for (name, t) in names.iter().zip(bundle.student.tensors_mut()) {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.random_range(0.05..0.2);
            }
        }
    }
    bundle.teacher = bundle.student.clone();
    for t in bundle.teacher.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let n = cfg.encoder.image_len();
    let images: Vec<Vec<f64>> = (0..BATCH)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0) as f32 as f64).collect())
        .collect();
    Ok(Toy {
        bundle: bundle.cast::<f32>().cast::<f64>(),
        images,
    })
}

fn weights() -> LossWeights {
    LossWeights {
        stage: [1.0, 0.5, 2.0, 1.0],
        gamma: vec![2.0, 0.0, 1.5],
        ..LossWeights::default()
    }
}

const KAA_LABELS: [usize; 3] = [2, 0, 1];
const BETA: f64 = 0.6;

fn focal_labels() -> Vec<Vec<i32>> {
    vec![vec![2, MISSING_LABEL, 3], vec![MISSING_LABEL, 1, 0], vec![0, 0, MISSING_LABEL]]
}

struct Problem<T> {
    bundle: ModelBundle<T>,
    patches: Tensor<T>,
    teacher: [Tensor<T>; NUM_STAGES],
    batch: usize,
}

impl<T: Element> Problem<T> {
    fn new(bundle: ModelBundle<T>, images: &[Vec<T>], teacher: Option<[Tensor<T>; NUM_STAGES]>) -> Result<Self> {
        let refs: Vec<&[T]> = images.iter().map(Vec::as_slice).collect();
        let enc = bundle.config.encoder.clone();
        let patches = patchify(&enc, &refs)?;
        let teacher = match teacher {
            Some(t) => t,
            None => {
                let mut g = ComputeGraph::new();
                let leaves = bundle.leaves(&mut g, Role::Teacher, &FreezeMask::none(), |_| false);
                let x = g.constant(patches.clone());
                let bb = forward_backbone(&mut g, &enc, &leaves.backbone, x, refs.len())?;
                bb.embeddings.map(|v| g.value(v).clone())
            }
        };
        Ok(Self {
            bundle,
            patches,
            teacher,
            batch: refs.len(),
        })
    }

    fn params(&self) -> Vec<Tensor<T>> {
        self.bundle.student.tensors().iter().chain(self.bundle.heads.tensors()).cloned().collect()
    }

    /// β·CE(task 1) + (1 − β)·Σ λ_s consistency.
    fn kaa_loss(&self) -> impl FnMut(&mut ComputeGraph<T>, &[Var]) -> Result<Var> + '_ {
        let nb = self.bundle.student.len();
        let w = weights();
        move |g, v| {
            let x = g.constant(self.patches.clone());
            let bb = forward_backbone(g, &self.bundle.config.encoder, &v[..nb], x, self.batch)?;
            let probs = forward_head(g, &v[nb..], 0, bb.embeddings[NUM_STAGES - 1])?;
            let cls = g.cross_entropy(probs, &KAA_LABELS)?;
            let tv: [Var; NUM_STAGES] = std::array::from_fn(|s| g.constant(self.teacher[s].clone()));
            let cst = consistency_node(g, &bb.embeddings, &tv, &w)?.expect("nonzero stage weights");
            g.weighted_sum(&[(cls, BETA), (cst, 1.0 - BETA)])
        }
    }

    /// Masked focal loss over all three heads.
    fn focal_loss(&self) -> impl FnMut(&mut ComputeGraph<T>, &[Var]) -> Result<Var> + '_ {
        let nb = self.bundle.student.len();
        let w = weights();
        let labels = focal_labels();
        move |g, v| {
            let x = g.constant(self.patches.clone());
            let bb = forward_backbone(g, &self.bundle.config.encoder, &v[..nb], x, self.batch)?;
            let probs: Vec<Var> = (0..self.bundle.num_tasks())
                .map(|m| forward_head(g, &v[nb..], m, bb.embeddings[NUM_STAGES - 1]))
                .collect::<Result<_>>()?;
            focal_multitask_node(g, &probs, &labels, &w)
        }
    }
}

fn widen(t: &[Tensor<f32>]) -> Vec<Tensor<f64>> {
    t.iter().map(Tensor::cast).collect()
}

/// Checks the acquisition-retention weighted loss (task 1, β = 0.6, all four
/// consistency stages) and the masked focal multitask loss with respect to
/// every backbone and head tensor of the 16×16 toy model.
pub fn check_model_gradients(precision: Precision, seed: u64) -> Result<ModelGradCheck> {
    let toy = toy(seed)?;
    let reference = Problem::new(toy.bundle.clone(), &toy.images, None)?;
    let p64 = reference.params();
    let (kaa, focal, coords, tolerance) = match precision {
        Precision::F64 => {
            let a = finite_difference_check(&mut GraphLoss::new(reference.kaa_loss()), &p64, STEP, TOLERANCE_F64, seed)?;
            let b = finite_difference_check(&mut GraphLoss::new(reference.focal_loss()), &p64, STEP, TOLERANCE_F64, seed + 1)?;
            (a.max_relative_error, b.max_relative_error, a.coords_checked + b.coords_checked, TOLERANCE_F64)
        }
        Precision::F32 => {
            let images: Vec<Vec<f32>> = toy.images.iter().map(|i| i.iter().map(|&v| v as f32).collect()).collect();
            let low = Problem::new(toy.bundle.cast::<f32>(), &images, None)?;
            // The 64-bit reference uses the 32-bit teacher targets so both
            // sides evaluate the same function.
            let reference = Problem::new(toy.bundle.clone(), &toy.images, Some(low.teacher.clone().map(|t| t.cast())))?;
            let p32 = low.params();
            let ga = widen(&GraphLoss::new(low.kaa_loss()).gradient(&p32)?);
            let gb = widen(&GraphLoss::new(low.focal_loss()).gradient(&p32)?);
            let a: GradCheckReport = check_against_differences(
                &mut GraphLoss::new(reference.kaa_loss()),
                &p64,
                &ga,
                STEP,
                TOLERANCE_F32,
                seed,
            )?;
            let b = check_against_differences(
                &mut GraphLoss::new(reference.focal_loss()),
                &p64,
                &gb,
                STEP,
                TOLERANCE_F32,
                seed + 1,
            )?;
            (a.max_relative_error, b.max_relative_error, a.coords_checked + b.coords_checked, TOLERANCE_F32)
        }
    };
    Ok(ModelGradCheck {
        precision,
        kaa_loss: kaa,
        focal_loss: focal,
        coords_checked: coords,
        tolerance,
    })
}
