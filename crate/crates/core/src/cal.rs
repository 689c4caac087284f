//! Consistency-based active learning: pools, sample selection, annotation
//! and frozen-backbone multitask fine-tuning, plus two baseline samplers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaa::{images_of, steps_per_pass, LrConfig};
use crate::model::{
    forward_backbone, forward_head, patchify, FreezeMask, ModelBundle, Role, NUM_STAGES,
};
use crate::objectives::{evaluate_accuracy, focal_multitask_node, AccuracyReport, LossWeights, MISSING_LABEL};
use crate::synthdata::{DatasetBundle, Example, Partition, SimulatedAnnotator, Split};
use crate::tensorops::{AdamWConfig, ComputeGraph, OptimizerState, Tensor, Var};

const PREDICT_CHUNK: usize = 128;

/// An item with a full M-long label vector (−1 where unknown).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: u64,
    pub labels: Vec<i32>,
}

/// An unlabelled pool item and the single-label subset it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: u64,
    pub source: usize,
}

/// D^T, D^U and D^L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pools {
    pub test: Vec<LabeledItem>,
    /// Sorted by id.
    unlabeled: Vec<PoolItem>,
    labeled: Vec<LabeledItem>,
    total: usize,
}

impl Pools {
    /// Builds pools from explicit parts. `unlabeled` may be in any order.
    pub fn new(test: Vec<LabeledItem>, mut unlabeled: Vec<PoolItem>) -> Result<Self> {
        unlabeled.sort_by_key(|p| p.id);
        if unlabeled.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Consistency("duplicate id in unlabelled pool".into()));
        }
        let total = unlabeled.len();
        Ok(Self {
            test,
            unlabeled,
            labeled: Vec::new(),
            total,
        })
    }

    /// D^U is the union of every subset's training split; D^T is sampled
    /// from the joint pool by [`build_test_set`].
    pub fn from_bundle(data: &DatasetBundle, kappa: usize, seed: u64, oracle: &mut dyn Oracle) -> Result<Self> {
        let candidates = data.joint();
        let test = build_test_set(&candidates, &data.config.class_counts(), kappa, seed, oracle)?;
        let unlabeled = data
            .examples
            .iter()
            .filter_map(|e| match e.partition {
                Partition::Subset {
                    task,
                    split: Split::Train,
                } => Some(PoolItem { id: e.id, source: task }),
                _ => None,
            })
            .collect();
        Self::new(test, unlabeled)
    }

    pub fn unlabeled(&self) -> &[PoolItem] {
        &self.unlabeled
    }

    pub fn unlabeled_ids(&self) -> Vec<u64> {
        self.unlabeled.iter().map(|p| p.id).collect()
    }

    pub fn labeled(&self) -> &[LabeledItem] {
        &self.labeled
    }

    pub fn contains_unlabeled(&self, id: u64) -> bool {
        self.unlabeled.binary_search_by_key(&id, |p| p.id).is_ok()
    }

    /// Checks disjointness and conservation of D^U ∪ D^L.
    pub fn check(&self) -> Result<()> {
        if self.unlabeled.len() + self.labeled.len() != self.total {
            return Err(Error::Consistency(format!(
                "{} unlabelled + {} labelled != {}",
                self.unlabeled.len(),
                self.labeled.len(),
                self.total
            )));
        }
        let mut seen = BTreeSet::new();
        for id in self.unlabeled.iter().map(|p| p.id).chain(self.labeled.iter().map(|l| l.id)) {
            if !seen.insert(id) {
                return Err(Error::Consistency(format!("id {id} appears twice across pools")));
            }
        }
        Ok(())
    }
}

/// Samples `kappa` candidates per class of every attribute using ground
/// truth for stratification, deduplicates by id and has the oracle annotate
/// the union on all attributes. The result is sorted by id.
pub fn build_test_set(
    candidates: &[&Example],
    class_counts: &[usize],
    kappa: usize,
    seed: u64,
    oracle: &mut dyn Oracle,
) -> Result<Vec<LabeledItem>> {
    if kappa == 0 {
        return Err(Error::Config("kappa must be positive; an empty test set leaves selection undefined".into()));
    }
    let mut chosen = BTreeSet::new();
    for (m, &k) in class_counts.iter().enumerate() {
        for c in 0..k {
            let mut ids: Vec<u64> = candidates.iter().filter(|e| e.labels[m] == c).map(|e| e.id).collect();
            if ids.len() < kappa {
                return Err(Error::Config(format!(
                    "attribute {} class {c} has {} test images, fewer than kappa = {kappa}",
                    m + 1,
                    ids.len()
                )));
            }
            ids.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((m as u64) << 32) | c as u64);
            ids.shuffle(&mut rng);
            chosen.extend(&ids[..kappa]);
        }
    }
    let ids: Vec<u64> = chosen.into_iter().collect();
    let request = AnnotationRequest {
        iteration: 0,
        ids: ids.clone(),
        suggestions: None,
    };
    let labels = oracle.annotate(&request)?;
    check_annotations(&ids, &labels, class_counts)?;
    Ok(ids
        .into_iter()
        .zip(labels)
        .map(|(id, labels)| LabeledItem { id, labels })
        .collect())
}

/// Negative Euclidean distance, accumulated in f64.
pub fn consistency_score(v: &[f32], u: &[f32]) -> Result<f64> {
    if v.len() != u.len() {
        return Err(Error::Contract(format!(
            "embeddings of length {} and {}",
            v.len(),
            u.len()
        )));
    }
    let sq: f64 = v
        .iter()
        .zip(u)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(-sq.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: u64,
    /// Consistency score for the CAL sampler, distance to the nearest
    /// center for k-center, absent for random picks.
    pub score: Option<f64>,
    /// Test item this pool item was matched to.
    pub matched: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionBatch {
    pub items: Vec<Selected>,
}

impl SelectionBatch {
    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|s| s.id).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Embeddings keyed by item id, row-aligned with `ids`.
#[derive(Clone, Debug)]
pub struct EmbeddingSet<'a> {
    pub ids: &'a [u64],
    pub rows: Vec<&'a [f32]>,
}

impl<'a> EmbeddingSet<'a> {
    pub fn new(ids: &'a [u64], rows: Vec<&'a [f32]>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Dimension(format!("{} ids with {} embeddings", ids.len(), rows.len())));
        }
        Ok(Self { ids, rows })
    }

    /// Splits a `[n × d]` matrix into rows.
    pub fn from_matrix(ids: &'a [u64], matrix: &'a Tensor<f32>) -> Result<Self> {
        let (n, _) = matrix.dims2()?;
        Self::new(ids, (0..n).map(|r| matrix.row(r)).collect())
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

fn check_budget(b: usize, pool: usize) -> Result<()> {
    if b > pool {
        return Err(Error::Budget(format!("budget {b} exceeds the {pool} unlabelled items")));
    }
    Ok(())
}

/// Descending score, then ascending id.
fn rank(a: (f64, u64), b: (f64, u64)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Consistency selection: every test item picks its nearest pool item, the
/// pairs are ranked by score and distinct pool items taken top-down. When
/// fewer than `b` distinct items come out, the rest of the pool is ranked by
/// its best score over the test set. Ties go to the smaller pool id. The
/// batch is returned in nonincreasing score order.
pub fn select_by_consistency(test: &EmbeddingSet<'_>, pool: &EmbeddingSet<'_>, b: usize) -> Result<SelectionBatch> {
    check_budget(b, pool.len())?;
    if b == 0 {
        return Ok(SelectionBatch::default());
    }
    if test.len() == 0 {
        return Err(Error::Config("test set is empty; selection is undefined".into()));
    }
    // best[u] = (score, test id) of u's most similar test item.
    let mut best: Vec<(f64, u64)> = vec![(f64::NEG_INFINITY, u64::MAX); pool.len()];
    let mut pairs = Vec::with_capacity(test.len());
    for (vi, v) in test.rows.iter().enumerate() {
        let mut nn: Option<(f64, usize)> = None;
        for (ui, u) in pool.rows.iter().enumerate() {
            let s = consistency_score(v, u)?;
            let better = match nn {
                None => true,
                Some((bs, bi)) => rank((s, pool.ids[ui]), (bs, pool.ids[bi])).is_lt(),
            };
            if better {
                nn = Some((s, ui));
            }
            if (s, test.ids[vi]) != best[ui] && rank((s, test.ids[vi]), best[ui]).is_lt() {
                best[ui] = (s, test.ids[vi]);
            }
        }
        let (s, ui) = nn.expect("pool is nonempty when b > 0");
        pairs.push((s, ui, test.ids[vi]));
    }
    pairs.sort_by(|a, b| rank((a.0, pool.ids[a.1]), (b.0, pool.ids[b.1])).then(a.2.cmp(&b.2)));

    let mut taken = vec![false; pool.len()];
    let mut items = Vec::with_capacity(b);
    for &(s, ui, vid) in &pairs {
        if items.len() == b {
            break;
        }
        if !taken[ui] {
            taken[ui] = true;
            items.push(Selected {
                id: pool.ids[ui],
                score: Some(s),
                matched: Some(vid),
            });
        }
    }
    if items.len() < b {
        let mut rest: Vec<usize> = (0..pool.len()).filter(|&ui| !taken[ui]).collect();
        rest.sort_by(|&x, &y| rank((best[x].0, pool.ids[x]), (best[y].0, pool.ids[y])));
        for ui in rest.into_iter().take(b - items.len()) {
            items.push(Selected {
                id: pool.ids[ui],
                score: Some(best[ui].0),
                matched: Some(best[ui].1),
            });
        }
    }
    items.sort_by(|a, b| rank((a.score.unwrap(), a.id), (b.score.unwrap(), b.id)));
    Ok(SelectionBatch { items })
}

/// Greedy k-center: `b` times, take the pool item farthest from its nearest
/// center and make it a center. Ties go to the smaller id.
pub fn baseline_kcenter(pool: &EmbeddingSet<'_>, centers: &[&[f32]], b: usize) -> Result<SelectionBatch> {
    check_budget(b, pool.len())?;
    if b == 0 {
        return Ok(SelectionBatch::default());
    }
    if centers.is_empty() {
        return Err(Error::Contract("k-center selection needs at least one center".into()));
    }
    let mut nearest: Vec<f64> = Vec::with_capacity(pool.len());
    for u in &pool.rows {
        let mut d = f64::INFINITY;
        for c in centers {
            d = d.min(-consistency_score(u, c)?);
        }
        nearest.push(d);
    }
    let mut taken = vec![false; pool.len()];
    let mut items = Vec::with_capacity(b);
    for _ in 0..b {
        let mut pick: Option<usize> = None;
        for ui in (0..pool.len()).filter(|&ui| !taken[ui]) {
            pick = match pick {
                Some(p) if rank((nearest[ui], pool.ids[ui]), (nearest[p], pool.ids[p])).is_ge() => Some(p),
                _ => Some(ui),
            };
        }
        let p = pick.expect("budget checked against pool size");
        taken[p] = true;
        items.push(Selected {
            id: pool.ids[p],
            score: Some(nearest[p]),
            matched: None,
        });
        for ui in 0..pool.len() {
            if !taken[ui] {
                nearest[ui] = nearest[ui].min(-consistency_score(pool.rows[ui], pool.rows[p])?);
            }
        }
    }
    Ok(SelectionBatch { items })
}

/// Uniform selection without replacement, stratified by source subset.
/// Each subset receives a share proportional to its remaining pool size
/// (largest remainder, ties to the lower subset index).
pub fn baseline_random(pool: &[PoolItem], b: usize, seed: u64, iteration: u64) -> Result<SelectionBatch> {
    check_budget(b, pool.len())?;
    if b == 0 {
        return Ok(SelectionBatch::default());
    }
    let mut by_source: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for p in pool {
        by_source.entry(p.source).or_default().push(p.id);
    }
    let n = pool.len() as u128;
    let mut quota: Vec<(usize, usize, u128)> = by_source
        .iter()
        .map(|(&s, ids)| {
            let num = b as u128 * ids.len() as u128;
            (s, (num / n) as usize, num % n)
        })
        .collect();
    let assigned: usize = quota.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&x, &y| quota[y].2.cmp(&quota[x].2).then(quota[x].0.cmp(&quota[y].0)));
    for &k in order.iter().take(b - assigned) {
        quota[k].1 += 1;
    }
    let mut items = Vec::with_capacity(b);
    for (s, q, _) in quota {
        let mut ids = by_source[&s].clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((iteration << 16) | s as u64);
        ids.shuffle(&mut rng);
        items.extend(ids.into_iter().take(q).map(|id| Selected {
            id,
            score: None,
            matched: None,
        }));
    }
    Ok(SelectionBatch { items })
}

/// What the oracle is asked to label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    /// CAL iteration (1-based); 0 for the test set.
    pub iteration: usize,
    pub ids: Vec<u64>,
    /// Model argmax per item and task, when a model is available.
    pub suggestions: Option<Vec<Vec<usize>>>,
}

/// Label provider. Returns one M-long vector per requested id, in order,
/// with −1 where it declines.
pub trait Oracle {
    fn annotate(&mut self, request: &AnnotationRequest) -> Result<Vec<Vec<i32>>>;

    /// Called after every evaluated CAL iteration.
    fn progress(&mut self, _record: &CalRecord, _budget_remaining: usize) {}
}

/// Oracle backed by the generator's ground truth.
pub struct SyntheticOracle<'a> {
    data: &'a DatasetBundle,
    annotator: SimulatedAnnotator,
}

impl<'a> SyntheticOracle<'a> {
    pub fn new(data: &'a DatasetBundle, annotator: SimulatedAnnotator) -> Self {
        Self { data, annotator }
    }

    pub fn exact(data: &'a DatasetBundle) -> Self {
        Self::new(data, SimulatedAnnotator { decline_rate: 0.0, seed: 0 })
    }
}

impl Oracle for SyntheticOracle<'_> {
    fn annotate(&mut self, request: &AnnotationRequest) -> Result<Vec<Vec<i32>>> {
        request.ids.iter().map(|&id| self.annotator.label(self.data, id)).collect()
    }
}

fn check_annotations(ids: &[u64], labels: &[Vec<i32>], class_counts: &[usize]) -> Result<()> {
    if labels.len() != ids.len() {
        return Err(Error::Contract(format!(
            "oracle returned {} label vectors for {} items",
            labels.len(),
            ids.len()
        )));
    }
    for (id, row) in ids.iter().zip(labels) {
        if row.len() != class_counts.len() {
            return Err(Error::Contract(format!(
                "item {id}: {} labels for {} tasks",
                row.len(),
                class_counts.len()
            )));
        }
        for (m, (&l, &k)) in row.iter().zip(class_counts).enumerate() {
            if l != MISSING_LABEL && !(0..k as i32).contains(&l) {
                return Err(Error::Contract(format!("item {id}: label {l} invalid for task {}", m + 1)));
            }
        }
    }
    Ok(())
}

/// Has the oracle label `selection` and moves it from D^U to D^L. Nothing
/// changes unless every step succeeds.
pub fn annotate_and_move(
    selection: &SelectionBatch,
    oracle: &mut dyn Oracle,
    pools: &mut Pools,
    class_counts: &[usize],
    iteration: usize,
    suggestions: Option<Vec<Vec<usize>>>,
) -> Result<()> {
    if selection.is_empty() {
        return Ok(());
    }
    let ids = selection.ids();
    let mut seen = BTreeSet::new();
    for &id in &ids {
        if !pools.contains_unlabeled(id) {
            return Err(Error::Consistency(format!("item {id} is not in the unlabelled pool")));
        }
        if !seen.insert(id) {
            return Err(Error::Consistency(format!("item {id} selected twice")));
        }
    }
    let request = AnnotationRequest {
        iteration,
        ids: ids.clone(),
        suggestions,
    };
    let labels = oracle.annotate(&request)?;
    check_annotations(&ids, &labels, class_counts)?;
    pools.unlabeled.retain(|p| !seen.contains(&p.id));
    pools
        .labeled
        .extend(ids.into_iter().zip(labels).map(|(id, labels)| LabeledItem { id, labels }));
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    #[default]
    Cal,
    Random,
    Kcenter,
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cal" => Ok(Self::Cal),
            "random" => Ok(Self::Random),
            "kcenter" => Ok(Self::Kcenter),
            _ => Err(Error::Config(format!("unknown sampler {s:?} (expected cal, random or kcenter)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultitaskLoss {
    #[default]
    Focal,
    /// Plain cross-entropy; every task column of a batch must be fully
    /// labelled or fully masked.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalConfig {
    pub kappa: usize,
    /// N_CAL, used when `budgets` is absent.
    pub iterations: usize,
    /// Per-iteration budget as a fraction of the initial pool size.
    pub budget_fraction: f64,
    pub budgets: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub lr: LrConfig,
    pub weights: LossWeights,
    pub loss: MultitaskLoss,
    pub freeze: FreezeMask,
    /// Score with the foundation model instead of the current adapted one.
    pub pin_scoring_to_foundation: bool,
    /// Stop once average test accuracy improves by less than this many
    /// points between iterations.
    pub plateau_points: Option<f64>,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for CalConfig {
    fn default() -> Self {
        Self {
            kappa: 10,
            iterations: 5,
            budget_fraction: 0.01,
            budgets: None,
            epochs: 30,
            batch_size: 32,
            adamw: AdamWConfig::default(),
            lr: LrConfig::cal(),
            weights: LossWeights::default(),
            loss: MultitaskLoss::Focal,
            freeze: FreezeMask::first_three_stages(),
            pin_scoring_to_foundation: false,
            plateau_points: None,
            sampler: Sampler::Cal,
            seed: 0,
        }
    }
}

impl CalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::Config(format!("budget fraction {} outside (0, 1]", self.budget_fraction)));
        }
        self.weights.validate()
    }

    /// Explicit budgets, or `iterations` copies of the rounded fraction of
    /// `pool_size` (at least one item).
    pub fn resolve_budgets(&self, pool_size: usize) -> Vec<usize> {
        match &self.budgets {
            Some(b) => b.clone(),
            None => {
                let b = ((self.budget_fraction * pool_size as f64).round() as usize).max(1);
                vec![b; self.iterations]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: u64,
    /// Mean training loss over the last epoch.
    pub loss: f64,
    pub lr: f64,
}

fn multitask_loss_node(
    g: &mut ComputeGraph<f32>,
    probs: &[Var],
    labels: &[Vec<i32>],
    cfg: &CalConfig,
) -> Result<Var> {
    match cfg.loss {
        MultitaskLoss::Focal => focal_multitask_node(g, probs, labels, &cfg.weights),
        MultitaskLoss::CrossEntropy => {
            let mut terms = Vec::new();
            for (m, &p) in probs.iter().enumerate() {
                let present = labels.iter().filter(|r| r[m] != MISSING_LABEL).count();
                if present == 0 {
                    continue;
                }
                if present != labels.len() {
                    return Err(Error::Contract(format!(
                        "cross-entropy mode cannot mask part of task {}",
                        m + 1
                    )));
                }
                let column: Vec<usize> = labels.iter().map(|r| r[m] as usize).collect();
                terms.push((g.cross_entropy(p, &column)?, 1.0));
            }
            if terms.is_empty() {
                let zero = g.constant(Tensor::scalar(0.0));
                return g.weighted_sum(&[(zero, 1.0)]);
            }
            g.weighted_sum(&terms)
        }
    }
}

/// Fine-tunes the student backbone and all heads on D^L with a fresh
/// optimizer, leaving masked tensors untouched. `iteration` only seeds the
/// batch order.
pub fn finetune_multitask(
    bundle: &mut ModelBundle<f32>,
    data: &DatasetBundle,
    labeled: &[LabeledItem],
    cfg: &CalConfig,
    iteration: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    cfg.freeze.validate(bundle)?;
    if labeled.is_empty() {
        return Err(Error::Contract("fine-tuning on an empty labelled set".into()));
    }
    if labeled.iter().all(|l| l.labels.iter().all(|&v| v == MISSING_LABEL)) {
        return Err(Error::NoSignal(format!(
            "all {} labelled items are −1 on every task",
            labeled.len()
        )));
    }
    check_annotations(
        &labeled.iter().map(|l| l.id).collect::<Vec<_>>(),
        &labeled.iter().map(|l| l.labels.clone()).collect::<Vec<_>>(),
        &bundle.config.class_counts,
    )?;
    let examples: Vec<(&Example, &[i32])> = labeled
        .iter()
        .map(|l| Ok((data.get(l.id)?, l.labels.as_slice())))
        .collect::<Result<_>>()?;
    let per_epoch = steps_per_pass(examples.len(), cfg.batch_size);
    let schedule = cfg.lr.schedule(per_epoch * cfg.epochs as u64)?;
    let mut opt = OptimizerState::new(cfg.adamw);
    let enc = bundle.config.encoder.clone();
    let mut report = FinetuneReport::default();
    for epoch in 0..cfg.epochs as u64 {
        let mut order = examples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((iteration << 32) | epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&Example> = batch.iter().map(|b| b.0).collect();
            let images = images_of(&items);
            let labels: Vec<Vec<i32>> = batch.iter().map(|b| b.1.to_vec()).collect();
            let mut g = ComputeGraph::new();
            let leaves = bundle.leaves(&mut g, Role::Student, &cfg.freeze, |_| true);
            let x = g.constant(patchify(&enc, &images)?);
            let bb = forward_backbone(&mut g, &enc, &leaves.backbone, x, images.len())?;
            let probs: Vec<Var> = (0..bundle.num_tasks())
                .map(|m| forward_head(&mut g, &leaves.heads, m, bb.embeddings[NUM_STAGES - 1]))
                .collect::<Result<_>>()?;
            let loss = multitask_loss_node(&mut g, &probs, &labels, cfg)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss {value}")));
            }
            let mut grads = g.backward(loss)?;
            report.lr = schedule.lr_at(report.steps)?;
            bundle.apply_gradients(&mut grads, &leaves, &cfg.freeze, &mut opt, report.lr)?;
            report.steps += 1;
            epoch_loss += value * batch.len() as f64;
        }
        report.loss = epoch_loss / examples.len() as f64;
    }
    Ok(report)
}

/// One point of the accuracy-vs-budget curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalRecord {
    /// 0 for the pre-adaptation point.
    pub iteration: usize,
    pub labeled_count: usize,
    pub selected: Vec<u64>,
    pub test: AccuracyReport,
    pub finetune: Option<FinetuneReport>,
}

impl CalRecord {
    pub fn average(&self) -> f64 {
        self.test.average.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalHistory {
    pub sampler: Sampler,
    pub records: Vec<CalRecord>,
    pub stopped_early_at: Option<usize>,
}

/// Adapted model and curve. The student backbone and heads hold the
/// adapted weights; the teacher still holds the foundation backbone.
#[derive(Clone, Debug)]
pub struct CalRun {
    pub model: ModelBundle<f32>,
    pub history: CalHistory,
}

/// A run that failed part-way, with everything completed before the
/// failing iteration.
#[derive(Debug)]
pub struct CalAbort {
    pub error: Error,
    pub partial: CalRun,
}

impl From<CalAbort> for Error {
    fn from(a: CalAbort) -> Self {
        a.error
    }
}

fn test_images<'a>(data: &'a DatasetBundle, pools: &Pools) -> Result<(Vec<u64>, Vec<&'a [f32]>, Vec<Vec<i32>>)> {
    let ids: Vec<u64> = pools.test.iter().map(|t| t.id).collect();
    let images = ids
        .iter()
        .map(|&id| Ok(data.get(id)?.image.as_slice()))
        .collect::<Result<_>>()?;
    let labels = pools.test.iter().map(|t| t.labels.clone()).collect();
    Ok((ids, images, labels))
}

fn evaluate_test(model: &ModelBundle<f32>, data: &DatasetBundle, pools: &Pools) -> Result<AccuracyReport> {
    let (_, images, labels) = test_images(data, pools)?;
    let tasks: Vec<usize> = (0..model.num_tasks()).collect();
    evaluate_accuracy(model, &images, &labels, &tasks)
}

fn final_embeddings(model: &ModelBundle<f32>, images: &[&[f32]]) -> Result<Tensor<f32>> {
    let pred = crate::model::predict_batched(images, model, Role::Student, PREDICT_CHUNK)?;
    let [_, _, _, d_iv] = pred.embeddings;
    Ok(d_iv)
}

/// Picks the next batch with the configured sampler.
pub fn select_next(
    model: &ModelBundle<f32>,
    data: &DatasetBundle,
    pools: &Pools,
    b: usize,
    cfg: &CalConfig,
    iteration: usize,
) -> Result<SelectionBatch> {
    check_budget(b, pools.unlabeled.len())?;
    let needs_embeddings = match cfg.sampler {
        Sampler::Random => false,
        Sampler::Kcenter => !pools.labeled.is_empty(),
        Sampler::Cal => true,
    };
    if !needs_embeddings || b == 0 {
        return baseline_random(&pools.unlabeled, b, cfg.seed, iteration as u64);
    }
    let pool_ids = pools.unlabeled_ids();
    let pool_images: Vec<&[f32]> = pool_ids
        .iter()
        .map(|&id| Ok(data.get(id)?.image.as_slice()))
        .collect::<Result<_>>()?;
    let pool_emb = final_embeddings(model, &pool_images)?;
    let pool_set = EmbeddingSet::from_matrix(&pool_ids, &pool_emb)?;
    match cfg.sampler {
        Sampler::Cal => {
            let (test_ids, images, _) = test_images(data, pools)?;
            let test_emb = final_embeddings(model, &images)?;
            let test_set = EmbeddingSet::from_matrix(&test_ids, &test_emb)?;
            select_by_consistency(&test_set, &pool_set, b)
        }
        Sampler::Kcenter => {
            let center_images: Vec<&[f32]> = pools
                .labeled
                .iter()
                .map(|l| Ok(data.get(l.id)?.image.as_slice()))
                .collect::<Result<_>>()?;
            let center_emb = final_embeddings(model, &center_images)?;
            let (n, _) = center_emb.dims2()?;
            let centers: Vec<&[f32]> = (0..n).map(|r| center_emb.row(r)).collect();
            baseline_kcenter(&pool_set, &centers, b)
        }
        Sampler::Random => unreachable!(),
    }
}

fn suggestions(model: &ModelBundle<f32>, data: &DatasetBundle, ids: &[u64]) -> Result<Vec<Vec<usize>>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let images: Vec<&[f32]> = ids
        .iter()
        .map(|&id| Ok(data.get(id)?.image.as_slice()))
        .collect::<Result<_>>()?;
    let pred = crate::model::predict_batched(&images, model, Role::Student, PREDICT_CHUNK)?;
    let per_task: Vec<Vec<usize>> = (0..model.num_tasks()).map(|m| pred.argmax(m)).collect();
    Ok((0..ids.len()).map(|r| per_task.iter().map(|t| t[r]).collect()).collect())
}

/// The active-learning loop. Starts from `foundation`, evaluates it on D^T,
/// then for each budget selects, annotates, fine-tunes and re-evaluates.
/// A failing iteration aborts the run and returns the completed prefix.
pub fn run_cal(
    foundation: &ModelBundle<f32>,
    data: &DatasetBundle,
    pools: &mut Pools,
    budgets: &[usize],
    oracle: &mut dyn Oracle,
    cfg: &CalConfig,
) -> std::result::Result<CalRun, CalAbort> {
    let mut run = CalRun {
        model: foundation.clone(),
        history: CalHistory {
            sampler: cfg.sampler,
            ..CalHistory::default()
        },
    };
    let abort = |error: Error, run: CalRun| CalAbort { error, partial: run };
    if let Err(e) = cfg.validate().and_then(|_| pools.check()) {
        return Err(abort(e, run));
    }
    let initial = match evaluate_test(&run.model, data, pools) {
        Ok(r) => r,
        Err(e) => return Err(abort(e, run)),
    };
    let record = CalRecord {
        iteration: 0,
        labeled_count: pools.labeled.len(),
        selected: Vec::new(),
        test: initial,
        finetune: None,
    };
    let mut remaining: usize = budgets.iter().sum();
    oracle.progress(&record, remaining);
    run.history.records.push(record);

    for (k, &b) in budgets.iter().enumerate() {
        let j = k + 1;
        let step = (|| -> Result<(ModelBundle<f32>, CalRecord)> {
            let scorer = if cfg.pin_scoring_to_foundation { foundation } else { &run.model };
            let selection = select_next(scorer, data, pools, b, cfg, j)?;
            let hints = suggestions(&run.model, data, &selection.ids())?;
            let mut next_pools = pools.clone();
            annotate_and_move(
                &selection,
                oracle,
                &mut next_pools,
                &run.model.config.class_counts,
                j,
                Some(hints),
            )?;
            let mut model = run.model.clone();
            let report = finetune_multitask(&mut model, data, &next_pools.labeled, cfg, j as u64)?;
            let test = evaluate_test(&model, data, &next_pools)?;
            next_pools.check()?;
            *pools = next_pools;
            Ok((
                model,
                CalRecord {
                    iteration: j,
                    labeled_count: pools.labeled.len(),
                    selected: selection.ids(),
                    test,
                    finetune: Some(report),
                },
            ))
        })();
        let (model, record) = match step {
            Ok(v) => v,
            Err(e) => return Err(abort(e.context(format!("CAL iteration {j}")), run)),
        };
        remaining -= b;
        log::info!(
            "cal iteration {j}: {} labelled, test average {:.4}",
            record.labeled_count,
            record.average()
        );
        oracle.progress(&record, remaining);
        let prev = run.history.records.last().map(CalRecord::average).unwrap_or(0.0);
        let gain = (record.average() - prev) * 100.0;
        run.model = model;
        run.history.records.push(record);
        if let Some(min) = cfg.plateau_points {
            if gain < min {
                run.history.stopped_early_at = Some(j);
                break;
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::synthdata::{generate_bundle, SynthConfig};

    fn set<'a>(ids: &'a [u64], rows: &'a [Vec<f32>]) -> EmbeddingSet<'a> {
        EmbeddingSet::new(ids, rows.iter().map(|r| r.as_slice()).collect()).unwrap()
    }

    fn points(v: &[f32]) -> Vec<Vec<f32>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn score_examples() {
        assert_eq!(consistency_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(consistency_score(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
        assert_eq!(
            consistency_score(&[0.5, -2.0], &[3.0, 4.0]).unwrap(),
            consistency_score(&[3.0, 4.0], &[0.5, -2.0]).unwrap()
        );
        assert!(matches!(consistency_score(&[0.0], &[0.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn selection_examples() {
        let t = points(&[0.0, 10.0]);
        let u = points(&[2.0, 9.0, 50.0]);
        let sel = select_by_consistency(&set(&[100, 101], &t), &set(&[0, 1, 2], &u), 1).unwrap();
        assert_eq!(sel.ids(), vec![1]);
        assert_eq!(sel.items[0].score, Some(-1.0));
        assert_eq!(sel.items[0].matched, Some(101));

        let t = points(&[0.0, 0.5]);
        let u = points(&[1.0, 40.0]);
        let sel = select_by_consistency(&set(&[100, 101], &t), &set(&[0, 1], &u), 2).unwrap();
        assert_eq!(sel.ids(), vec![0, 1]);

        let u = points(&[2.0, 9.0, 50.0]);
        let sel = select_by_consistency(&set(&[7], &points(&[0.0])), &set(&[0, 1, 2], &u), 3).unwrap();
        assert_eq!(sel.ids(), vec![0, 1, 2]);
        assert!(matches!(
            select_by_consistency(&set(&[7], &points(&[0.0])), &set(&[0, 1, 2], &u), 4),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn kcenter_examples() {
        let u = points(&[0.0, 1.0, 2.0, 10.0]);
        let ids = [0, 1, 2, 3];
        let sel = baseline_kcenter(&set(&ids, &u), &[&[0.0]], 2).unwrap();
        assert_eq!(sel.ids(), vec![3, 2]);
        let same = points(&[1.0; 4]);
        let sel = baseline_kcenter(&set(&ids, &same), &[&[0.0]], 3).unwrap();
        assert_eq!(sel.ids(), vec![0, 1, 2]);
        assert!(matches!(baseline_kcenter(&set(&ids, &u), &[], 1), Err(Error::Contract(_))));
    }

    fn pool(n: u64, sources: usize) -> Vec<PoolItem> {
        (0..n)
            .map(|id| PoolItem {
                id,
                source: id as usize % sources,
            })
            .collect()
    }

    #[test]
    fn random_is_stratified_and_seeded() {
        let p = pool(90, 3);
        let a = baseline_random(&p, 9, 4, 1).unwrap();
        assert_eq!(a, baseline_random(&p, 9, 4, 1).unwrap());
        assert_ne!(a, baseline_random(&p, 9, 5, 1).unwrap());
        for s in 0..3 {
            assert_eq!(a.ids().iter().filter(|&&id| id as usize % 3 == s).count(), 3);
        }
        let ids: BTreeSet<u64> = a.ids().into_iter().collect();
        assert_eq!(ids.len(), 9);
        assert_eq!(baseline_random(&p, 90, 4, 1).unwrap().len(), 90);
        assert!(matches!(baseline_random(&p, 91, 4, 1), Err(Error::Budget(_))));
    }

    struct Fixed(Vec<i32>);

    impl Oracle for Fixed {
        fn annotate(&mut self, r: &AnnotationRequest) -> Result<Vec<Vec<i32>>> {
            Ok(vec![self.0.clone(); r.ids.len()])
        }
    }

    #[test]
    fn annotate_moves_items() {
        let mut pools = Pools::new(Vec::new(), pool(100, 2)).unwrap();
        let sel = baseline_random(pools.unlabeled(), 10, 0, 1).unwrap();
        let mut oracle = Fixed(vec![1, 0, MISSING_LABEL]);
        annotate_and_move(&sel, &mut oracle, &mut pools, &[2, 2, 2], 1, None).unwrap();
        assert_eq!(pools.unlabeled().len(), 90);
        assert_eq!(pools.labeled().len(), 10);
        assert_eq!(pools.labeled()[0].labels[2], MISSING_LABEL);
        pools.check().unwrap();
        let before = pools.clone();
        annotate_and_move(&SelectionBatch::default(), &mut oracle, &mut pools, &[2, 2, 2], 2, None).unwrap();
        assert_eq!(pools, before);
        let err = annotate_and_move(&sel, &mut oracle, &mut pools, &[2, 2, 2], 2, None);
        assert!(matches!(err, Err(Error::Consistency(_))));
        assert_eq!(pools, before);
        let fresh = baseline_random(pools.unlabeled(), 1, 0, 3).unwrap();
        let err = annotate_and_move(&fresh, &mut Fixed(vec![5, 0, 0]), &mut pools, &[2, 2, 2], 3, None);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert_eq!(pools, before);
    }

    fn small_data() -> DatasetBundle {
        let cfg = SynthConfig {
            height: 16,
            width: 16,
            train_size: 24,
            val_size: 6,
            test_size: 6,
            joint_size: 120,
            ..SynthConfig::default()
        };
        generate_bundle(&cfg, 3).unwrap()
    }

    fn small_model(data: &DatasetBundle) -> ModelBundle<f32> {
        let cfg = ModelConfig {
            encoder: crate::model::EncoderConfig {
                height: 16,
                width: 16,
                stage_channels: [4, 8, 16, 32],
                projector_dims: [8, 16, 32, 64],
                ..crate::model::EncoderConfig::default()
            },
            class_counts: data.config.class_counts(),
        };
        init_params(&cfg, 1).unwrap()
    }

    #[test]
    fn test_set_is_stratified_and_deduplicated() {
        let data = small_data();
        let joint = data.joint();
        let mut oracle = SyntheticOracle::exact(&data);
        let t = build_test_set(&joint, &data.config.class_counts(), 2, 9, &mut oracle).unwrap();
        assert!(t.len() <= 2 * 10 && t.len() >= 4);
        assert!(t.windows(2).all(|w| w[0].id < w[1].id));
        for (m, &k) in data.config.class_counts().iter().enumerate() {
            for c in 0..k as i32 {
                assert!(t.iter().filter(|x| x.labels[m] == c).count() >= 2);
            }
        }
        let again = build_test_set(&joint, &data.config.class_counts(), 2, 9, &mut oracle).unwrap();
        assert_eq!(t, again);
        assert!(matches!(
            build_test_set(&joint, &data.config.class_counts(), 0, 9, &mut oracle),
            Err(Error::Config(_))
        ));
        let err = build_test_set(&joint, &data.config.class_counts(), 1000, 9, &mut oracle).unwrap_err();
        assert!(err.to_string().contains("class"));
    }

    #[test]
    fn finetune_fits_single_example_and_respects_freeze() {
        let data = small_data();
        let mut model = small_model(&data);
        let before = model.clone();
        let id = data.subset(0, Split::Train)[0].id;
        let labeled = vec![LabeledItem {
            id,
            labels: vec![2, MISSING_LABEL, MISSING_LABEL],
        }];
        let cfg = CalConfig {
            epochs: 200,
            ..CalConfig::default()
        };
        let report = finetune_multitask(&mut model, &data, &labeled, &cfg, 1).unwrap();
        assert!(report.loss < 0.01, "loss {}", report.loss);
        let img = data.get(id).unwrap().image.as_slice();
        let pred = crate::model::predict_all(&[img], &model, Role::Student).unwrap();
        assert_eq!(pred.argmax(0), vec![2]);
        for name in cfg.freeze.names() {
            assert_eq!(model.student.get(name), before.student.get(name), "{name}");
        }
        assert_ne!(model.student.get("encoder.stage4.weight"), before.student.get("encoder.stage4.weight"));
        assert_eq!(model.teacher, before.teacher);
    }

    #[test]
    fn gamma_zero_matches_cross_entropy() {
        let data = small_data();
        let labeled: Vec<LabeledItem> = data
            .joint()
            .iter()
            .take(40)
            .map(|e| LabeledItem {
                id: e.id,
                labels: e.labels.iter().map(|&l| l as i32).collect(),
            })
            .collect();
        let focal = CalConfig {
            epochs: 2,
            weights: LossWeights {
                gamma: vec![0.0; 3],
                ..LossWeights::default()
            },
            ..CalConfig::default()
        };
        let ce = CalConfig {
            loss: MultitaskLoss::CrossEntropy,
            ..focal.clone()
        };
        let mut a = small_model(&data);
        let mut b = a.clone();
        finetune_multitask(&mut a, &data, &labeled, &focal, 1).unwrap();
        finetune_multitask(&mut b, &data, &labeled, &ce, 1).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.heads, b.heads);
    }

    #[test]
    fn all_missing_is_no_signal() {
        let data = small_data();
        let mut model = small_model(&data);
        let labeled = vec![LabeledItem {
            id: 0,
            labels: vec![MISSING_LABEL; 3],
        }];
        let err = finetune_multitask(&mut model, &data, &labeled, &CalConfig::default(), 1);
        assert!(matches!(err, Err(Error::NoSignal(_))));
    }

    fn cal_setup(data: &DatasetBundle) -> (ModelBundle<f32>, Pools) {
        let mut oracle = SyntheticOracle::exact(data);
        let pools = Pools::from_bundle(data, 3, 0, &mut oracle).unwrap();
        (small_model(data), pools)
    }

    #[test]
    fn zero_iterations_reports_only_the_starting_point() {
        let data = small_data();
        let (model, mut pools) = cal_setup(&data);
        let mut oracle = SyntheticOracle::exact(&data);
        let run = run_cal(&model, &data, &mut pools, &[], &mut oracle, &CalConfig::default()).unwrap();
        assert_eq!(run.history.records.len(), 1);
        assert_eq!(run.history.records[0].labeled_count, 0);
        assert_eq!(run.model.student, model.student);
    }

    #[test]
    fn budget_failure_keeps_completed_iterations() {
        let data = small_data();
        let (model, mut pools) = cal_setup(&data);
        let mut oracle = SyntheticOracle::exact(&data);
        let cfg = CalConfig {
            epochs: 2,
            ..CalConfig::default()
        };
        let abort = run_cal(&model, &data, &mut pools, &[4, 1000], &mut oracle, &cfg).unwrap_err();
        assert!(matches!(abort.error, Error::Context { .. }));
        assert!(abort.error.to_string().contains("budget"));
        assert_eq!(abort.partial.history.records.len(), 2);
        assert_eq!(pools.labeled().len(), 4);
        pools.check().unwrap();
    }

    #[test]
    fn cal_run_is_deterministic_and_keeps_frozen_stages() {
        let data = small_data();
        let (model, pools) = cal_setup(&data);
        for sampler in [Sampler::Cal, Sampler::Random, Sampler::Kcenter] {
            let cfg = CalConfig {
                epochs: 2,
                sampler,
                ..CalConfig::default()
            };
            let run = |mut p: Pools| {
                let mut oracle = SyntheticOracle::exact(&data);
                let r = run_cal(&model, &data, &mut p, &[3, 3], &mut oracle, &cfg).unwrap();
                (r, p)
            };
            let (a, pa) = run(pools.clone());
            let (b, _) = run(pools.clone());
            assert_eq!(a.history, b.history);
            assert_eq!(pa.labeled().len(), 6);
            for name in cfg.freeze.names() {
                assert_eq!(a.model.student.get(name), model.student.get(name), "{name}");
            }
        }
    }
}
