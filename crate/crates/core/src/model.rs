//! Four-stage encoder, per-stage projectors and per-task classifier heads.
//!
//! Feature maps are kept channel-last as `[batch·h·w × c]` matrices so
//! every channel mix is a single matrix product. The single-image helpers
//! ([`encode_stages`], [`project_stage`]) report maps as `[c, h, w]`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::{ComputeGraph, Element, Gradients, OptimizerState, ParamUpdate, Tensor, Var};

pub const NUM_STAGES: usize = 4;
/// Linear layers in each projector MLP (two hidden layers plus output).
pub const PROJECTOR_LAYERS: usize = 3;
const PATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub projector_dims: [usize; NUM_STAGES],
    /// Pixels enter the stem as `(x - input_mean) * input_scale`.
    pub input_mean: f64,
    pub input_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            stage_channels: [16, 32, 64, 128],
            projector_dims: [32, 64, 128, 256],
            input_mean: 0.5,
            input_scale: 4.0,
        }
    }
}

impl EncoderConfig {
    /// Smallest layout used for gradient verification: 16×16 input, the
    /// minimum that survives four 2× reductions.
    pub fn toy() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            stage_channels: [2, 4, 8, 16],
            projector_dims: [4, 8, 16, 32],
            input_mean: 0.0,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reduction = 1 << NUM_STAGES;
        if self.height % reduction != 0 || self.width % reduction != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {reduction}",
                self.height, self.width
            )));
        }
        if !self.input_mean.is_finite() || !self.input_scale.is_finite() || self.input_scale == 0.0 {
            return Err(Error::Config("input normalisation must be finite with a nonzero scale".into()));
        }
        if self.channels == 0 || self.stage_channels[0] == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for s in 1..NUM_STAGES {
            if self.stage_channels[s] != 2 * self.stage_channels[s - 1] {
                return Err(Error::Config(format!(
                    "stage {} must double the channels of stage {s}: {:?}",
                    s + 1,
                    self.stage_channels
                )));
            }
        }
        for s in 0..NUM_STAGES {
            if self.projector_dims[s] != 2 * self.stage_channels[s] {
                return Err(Error::Config(format!(
                    "projector {} must output twice its stage width: {:?}",
                    s + 1,
                    self.projector_dims
                )));
            }
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Spatial size `(h, w)` of stage `s` (0-based).
    pub fn stage_spatial(&self, s: usize) -> (usize, usize) {
        (self.height >> (s + 1), self.width >> (s + 1))
    }

    /// `[c, h, w]` of stage `s` (0-based).
    pub fn stage_shape(&self, s: usize) -> [usize; 3] {
        let (h, w) = self.stage_spatial(s);
        [self.stage_channels[s], h, w]
    }

    fn stage_in(&self, s: usize) -> usize {
        if s == 0 {
            self.channels * PATCH * PATCH
        } else {
            self.stage_channels[s - 1]
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector_dims[NUM_STAGES - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Class count `|U_m|` of each task head.
    pub class_counts: Vec<usize>,
}

impl ModelConfig {
    pub fn num_tasks(&self) -> usize {
        self.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.class_counts.is_empty() {
            return Err(Error::Config("at least one task head is required".into()));
        }
        if let Some(k) = self.class_counts.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!("a task needs at least 2 classes, got {k}")));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Format(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self { names, tensors })
    }
}

/// Index of the weight of stage `s` in a backbone store; the bias follows.
fn stage_index(s: usize) -> usize {
    2 * s
}

/// Index of the weight of layer `l` of projector `s`; the bias follows.
fn projector_index(s: usize, l: usize) -> usize {
    2 * NUM_STAGES + 2 * (s * PROJECTOR_LAYERS + l)
}

pub fn stage_param_names(s: usize) -> [String; 2] {
    [
        format!("encoder.stage{}.weight", s + 1),
        format!("encoder.stage{}.bias", s + 1),
    ]
}

pub fn projector_param_names(s: usize) -> Vec<String> {
    (0..PROJECTOR_LAYERS)
        .flat_map(|l| {
            [
                format!("projector{}.fc{}.weight", s + 1, l + 1),
                format!("projector{}.fc{}.bias", s + 1, l + 1),
            ]
        })
        .collect()
}

fn head_index(m: usize) -> usize {
    2 * m
}

/// Which backbone copy a forward pass runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// Student backbone θ, teacher backbone θ′ and classifier heads φ₁..φ_M.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub heads: ParamStore<T>,
}

/// Xavier-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier<T: Element>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan sizes")
}

/// Fresh bundle with Xavier-uniform weights and zero biases; the teacher
/// starts as an exact copy of the student.
pub fn init_params<T: Element>(config: &ModelConfig, seed: u64) -> Result<ModelBundle<T>> {
    config.validate()?;
    let enc = &config.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = ParamStore::new();
    for s in 0..NUM_STAGES {
        let [w, b] = stage_param_names(s);
        let (fi, fo) = (enc.stage_in(s), enc.stage_channels[s]);
        student.push(w, xavier(&mut rng, fi, fo));
        student.push(b, Tensor::zeros(&[fo]));
    }
    for s in 0..NUM_STAGES {
        let names = projector_param_names(s);
        let dim = enc.projector_dims[s];
        for l in 0..PROJECTOR_LAYERS {
            let fi = if l == 0 { enc.stage_channels[s] } else { dim };
            student.push(names[2 * l].clone(), xavier(&mut rng, fi, dim));
            student.push(names[2 * l + 1].clone(), Tensor::zeros(&[dim]));
        }
    }
    let mut heads = ParamStore::new();
    let d = enc.embedding_dim();
    for (m, &k) in config.class_counts.iter().enumerate() {
        heads.push(format!("head{}.weight", m + 1), xavier(&mut rng, d, k));
        heads.push(format!("head{}.bias", m + 1), Tensor::zeros(&[k]));
    }
    Ok(ModelBundle {
        config: config.clone(),
        teacher: student.clone(),
        student,
        heads,
    })
}

/// Rearranges channel-first images `[c, h, w]` into 2×2 patch rows
/// `[batch·(h/2)·(w/2) × 4c]`, features ordered (channel, dy, dx).
pub fn patchify<T: Element>(enc: &EncoderConfig, images: &[&[T]]) -> Result<Tensor<T>> {
    let (c, h, w) = (enc.channels, enc.height, enc.width);
    let (ho, wo) = (h / PATCH, w / PATCH);
    let feat = c * PATCH * PATCH;
    let (mean, scale) = (T::of(enc.input_mean), T::of(enc.input_scale));
    let mut out = vec![T::zero(); images.len() * ho * wo * feat];
    for (b, img) in images.iter().enumerate() {
        if img.len() != c * h * w {
            return Err(Error::Dimension(format!(
                "image has {} values, expected {c}x{h}x{w}",
                img.len()
            )));
        }
        for y in 0..ho {
            for x in 0..wo {
                let row = &mut out[((b * ho + y) * wo + x) * feat..][..feat];
                let mut f = 0;
                for ch in 0..c {
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            row[f] = (img[(ch * h + PATCH * y + dy) * w + PATCH * x + dx] - mean) * scale;
                            f += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(images.len() * ho * wo, feat, out)
}

fn linear<T: Element>(g: &mut ComputeGraph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Graph nodes for the four stage maps and their embeddings.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub maps: [Var; NUM_STAGES],
    pub embeddings: [Var; NUM_STAGES],
}

/// Runs the encoder and all four projectors on patchified input.
pub fn forward_backbone<T: Element>(
    g: &mut ComputeGraph<T>,
    enc: &EncoderConfig,
    params: &[Var],
    patches: Var,
    batch: usize,
) -> Result<BackboneVars> {
    let mut maps = Vec::with_capacity(NUM_STAGES);
    let mut x = patches;
    for s in 0..NUM_STAGES {
        if s > 0 {
            let (h, w) = enc.stage_spatial(s - 1);
            x = g.avg_pool2x2(x, batch, h, w)?;
        }
        let i = stage_index(s);
        let y = linear(g, x, params[i], params[i + 1])?;
        x = g.relu(y)?;
        maps.push(x);
    }
    let mut embeddings = Vec::with_capacity(NUM_STAGES);
    for (s, &map) in maps.iter().enumerate() {
        embeddings.push(forward_projector(g, params, s, map, batch)?);
    }
    Ok(BackboneVars {
        maps: maps.try_into().expect("four stages"),
        embeddings: embeddings.try_into().expect("four stages"),
    })
}

fn forward_projector<T: Element>(
    g: &mut ComputeGraph<T>,
    params: &[Var],
    s: usize,
    map: Var,
    batch: usize,
) -> Result<Var> {
    let mut x = g.global_avg_pool(map, batch)?;
    for l in 0..PROJECTOR_LAYERS {
        let i = projector_index(s, l);
        x = linear(g, x, params[i], params[i + 1])?;
        if l + 1 < PROJECTOR_LAYERS {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Probability rows `[batch × |U_m|]` for head `m`.
pub fn forward_head<T: Element>(g: &mut ComputeGraph<T>, heads: &[Var], m: usize, d_iv: Var) -> Result<Var> {
    let i = head_index(m);
    if i + 1 >= heads.len() {
        return Err(Error::Contract(format!("no classifier head {}", m + 1)));
    }
    let z = linear(g, d_iv, heads[i], heads[i + 1])?;
    g.softmax_rows(z)
}

/// Parameter names exempt from optimizer updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Encoder stages I–III and their projectors.
    pub fn first_three_stages() -> Self {
        Self::from_names((0..3).flat_map(|s| {
            stage_param_names(s)
                .into_iter()
                .chain(projector_param_names(s))
        }))
    }

    pub fn all<T: Element>(bundle: &ModelBundle<T>) -> Self {
        Self::from_names(bundle.student.names().iter().chain(bundle.heads.names()).cloned())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn validate<T: Element>(&self, bundle: &ModelBundle<T>) -> Result<()> {
        for n in &self.names {
            if bundle.student.get(n).is_none() && bundle.heads.get(n).is_none() {
                return Err(Error::Config(format!("freeze mask names unknown parameter {n}")));
            }
        }
        Ok(())
    }
}

/// Drops masked parameters from an optimizer update.
pub fn apply_freeze_mask<'a, T>(mask: &FreezeMask, updates: Vec<ParamUpdate<'a, T>>) -> Vec<ParamUpdate<'a, T>> {
    updates.into_iter().filter(|u| !mask.contains(u.name)).collect()
}

/// Graph leaves for one forward pass of a bundle.
pub struct Leaves {
    pub backbone: Vec<Var>,
    pub heads: Vec<Var>,
}

/// Output of [`predict_all`]: probabilities per head and the four embeddings.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub probs: Vec<Tensor<T>>,
    pub embeddings: [Tensor<T>; NUM_STAGES],
}

impl<T: Element> Prediction<T> {
    /// Argmax class per row of head `m`.
    pub fn argmax(&self, m: usize) -> Vec<usize> {
        let p = &self.probs[m];
        let (rows, _) = p.dims2().expect("probability matrix");
        (0..rows).map(|r| argmax(p.row(r))).collect()
    }
}

pub fn argmax<T: Element>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Element> ModelBundle<T> {
    pub fn backbone(&self, role: Role) -> &ParamStore<T> {
        match role {
            Role::Student => &self.student,
            Role::Teacher => &self.teacher,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks()
    }

    /// The deployable model: teacher backbone with the current heads, used
    /// as both student and teacher of the returned bundle.
    pub fn foundation(&self) -> Self {
        Self {
            config: self.config.clone(),
            student: self.teacher.clone(),
            teacher: self.teacher.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn cast<U: Element>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            student: self.student.cast(),
            teacher: self.teacher.cast(),
            heads: self.heads.cast(),
        }
    }

    /// Adds leaves for `role`'s backbone and all heads. A tensor is a
    /// gradient-recording parameter only if `trainable` says so and it is not
    /// frozen; everything else enters as a constant.
    pub fn leaves(
        &self,
        g: &mut ComputeGraph<T>,
        role: Role,
        mask: &FreezeMask,
        trainable: impl Fn(&str) -> bool,
    ) -> Leaves {
        let mut add = |name: &str, t: &Tensor<T>| {
            if trainable(name) && !mask.contains(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let backbone = self.backbone(role).iter().map(|(n, t)| add(n, t)).collect();
        let heads = self.heads.iter().map(|(n, t)| add(n, t)).collect();
        Leaves { backbone, heads }
    }

    /// Steps the student and heads with `grads`, skipping masked tensors and
    /// tensors without a gradient. The teacher is never touched.
    pub fn apply_gradients(
        &mut self,
        grads: &mut Gradients<T>,
        leaves: &Leaves,
        mask: &FreezeMask,
        opt: &mut OptimizerState<T>,
        lr: f64,
    ) -> Result<()> {
        let backbone_grads: Vec<Option<Tensor<T>>> = leaves.backbone.iter().map(|&v| grads.take(v)).collect();
        let head_grads: Vec<Option<Tensor<T>>> = leaves.heads.iter().map(|&v| grads.take(v)).collect();
        let mut updates = Vec::new();
        for ((name, param), grad) in self
            .student
            .names
            .iter()
            .zip(self.student.tensors.iter_mut())
            .zip(&backbone_grads)
        {
            if let Some(grad) = grad {
                updates.push(ParamUpdate { name, param, grad });
            }
        }
        for ((name, param), grad) in self.heads.names.iter().zip(self.heads.tensors.iter_mut()).zip(&head_grads) {
            if let Some(grad) = grad {
                updates.push(ParamUpdate { name, param, grad });
            }
        }
        let mut updates = apply_freeze_mask(mask, updates);
        opt.step(&mut updates, lr)
    }
}

/// One shared forward pass over a batch of images: every head's
/// probabilities plus the four stage embeddings of `role`'s backbone.
pub fn predict_all<T: Element>(images: &[&[T]], bundle: &ModelBundle<T>, role: Role) -> Result<Prediction<T>> {
    let enc = &bundle.config.encoder;
    let mut g = ComputeGraph::new();
    let leaves = bundle.leaves(&mut g, role, &FreezeMask::none(), |_| false);
    let x = g.constant(patchify(enc, images)?);
    let bb = forward_backbone(&mut g, enc, &leaves.backbone, x, images.len())?;
    let mut probs = Vec::with_capacity(bundle.num_tasks());
    for m in 0..bundle.num_tasks() {
        let p = forward_head(&mut g, &leaves.heads, m, bb.embeddings[3])?;
        probs.push(g.value(p).clone());
    }
    let embeddings = bb.embeddings.map(|v| g.value(v).clone());
    Ok(Prediction { probs, embeddings })
}

/// Runs [`predict_all`] in chunks of `chunk` images.
pub fn predict_batched<T: Element>(
    images: &[&[T]],
    bundle: &ModelBundle<T>,
    role: Role,
    chunk: usize,
) -> Result<Prediction<T>> {
    let mut probs: Vec<Vec<T>> = vec![Vec::new(); bundle.num_tasks()];
    let mut embs: Vec<Vec<T>> = vec![Vec::new(); NUM_STAGES];
    for part in images.chunks(chunk.max(1)) {
        let p = predict_all(part, bundle, role)?;
        for (dst, src) in probs.iter_mut().zip(&p.probs) {
            dst.extend_from_slice(src.data());
        }
        for (dst, src) in embs.iter_mut().zip(&p.embeddings) {
            dst.extend_from_slice(src.data());
        }
    }
    let n = images.len();
    if n == 0 {
        return Err(Error::Contract("prediction over zero images".into()));
    }
    let probs = probs
        .into_iter()
        .zip(&bundle.config.class_counts)
        .map(|(d, &k)| Tensor::matrix(n, k, d))
        .collect::<Result<Vec<_>>>()?;
    let dims = bundle.config.encoder.projector_dims;
    let embeddings: Vec<Tensor<T>> = embs
        .into_iter()
        .zip(dims)
        .map(|(d, k)| Tensor::matrix(n, k, d))
        .collect::<Result<_>>()?;
    Ok(Prediction {
        probs,
        embeddings: embeddings.try_into().expect("four stages"),
    })
}

/// Stage feature maps of one `[3, h, w]` image, each as `[c, h, w]`.
pub fn encode_stages<T: Element>(image: &Tensor<T>, bundle: &ModelBundle<T>, role: Role) -> Result<[Tensor<T>; NUM_STAGES]> {
    let enc = &bundle.config.encoder;
    if image.shape() != [enc.channels, enc.height, enc.width] {
        return Err(Error::Dimension(format!(
            "input {:?} does not match {}x{}x{}",
            image.shape(),
            enc.channels,
            enc.height,
            enc.width
        )));
    }
    let mut g = ComputeGraph::new();
    let leaves = bundle.leaves(&mut g, role, &FreezeMask::none(), |_| false);
    let x = g.constant(patchify(enc, &[image.data()])?);
    let bb = forward_backbone(&mut g, enc, &leaves.backbone, x, 1)?;
    let mut out = Vec::with_capacity(NUM_STAGES);
    for (s, &v) in bb.maps.iter().enumerate() {
        let channel_last = g.value(v).transpose()?;
        out.push(channel_last.reshape(&enc.stage_shape(s))?);
    }
    Ok(out.try_into().expect("four stages"))
}

/// Projector `s` (0-based) applied to one `[c, h, w]` stage map.
pub fn project_stage<T: Element>(map: &Tensor<T>, bundle: &ModelBundle<T>, role: Role, s: usize) -> Result<Tensor<T>> {
    if s >= NUM_STAGES {
        return Err(Error::Contract(format!("stage index {s} out of range")));
    }
    let enc = &bundle.config.encoder;
    if map.shape() != enc.stage_shape(s) {
        return Err(Error::Dimension(format!(
            "stage {} map {:?} does not match {:?}",
            s + 1,
            map.shape(),
            enc.stage_shape(s)
        )));
    }
    let c = map.shape()[0];
    let hw = map.numel() / c;
    let channel_last = map.clone().reshape(&[c, hw])?.transpose()?;
    let mut g = ComputeGraph::new();
    let leaves = bundle.leaves(&mut g, role, &FreezeMask::none(), |_| false);
    let x = g.constant(channel_last);
    let d = forward_projector(&mut g, &leaves.backbone, s, x, 1)?;
    Ok(g.value(d).clone().reshape(&[enc.projector_dims[s]])?)
}

/// Head `m` applied to one final-stage embedding.
pub fn classify<T: Element>(d_iv: &Tensor<T>, bundle: &ModelBundle<T>, m: usize) -> Result<Tensor<T>> {
    if m >= bundle.num_tasks() {
        return Err(Error::Contract(format!("no classifier head {}", m + 1)));
    }
    let dim = bundle.config.encoder.embedding_dim();
    if d_iv.numel() != dim {
        return Err(Error::Dimension(format!(
            "embedding of length {} does not match head input {dim}",
            d_iv.numel()
        )));
    }
    let mut g = ComputeGraph::new();
    let leaves = bundle.leaves(&mut g, Role::Student, &FreezeMask::none(), |_| false);
    let x = g.constant(d_iv.clone().reshape(&[1, dim])?);
    let p = forward_head(&mut g, &leaves.heads, m, x)?;
    let k = bundle.config.class_counts[m];
    g.value(p).clone().reshape(&[k])
}
