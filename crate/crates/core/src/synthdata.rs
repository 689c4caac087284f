//! Procedural multi-attribute scenes with ground-truth labels.
//!
//! Every image is `[3, h, w]` in CHW order with values in `[0, 1]`. The
//! bundle holds one single-label subset per attribute (train/val/test) and a
//! jointly labelled pool whose attribute combinations are correlated
//! differently from the subsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::MISSING_LABEL;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const BUNDLE_FORMAT: &str = "kaa-cal-synth";
pub const BUNDLE_VERSION: u32 = 1;

/// Streams at or above this offset seed label draws; lower streams are
/// per-image noise keyed by id.
const LABEL_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderRule {
    /// Base intensity level per class plus uniform jitter.
    Brightness,
    /// Smooth, vertical stripes or checkerboard of period 4.
    Texture,
    /// None, circle, square or triangle added at the image centre.
    Shape,
    /// Only the per-class channel tint.
    TintOnly,
}

/// In the joint pool, this attribute copies the class index of `source` with
/// the given probability and is uniform otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub source: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: Vec<String>,
    pub rule: RenderRule,
    #[serde(default)]
    pub coupling: Option<Coupling>,
}

impl AttributeSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn default_attributes() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec {
            name: "brightness".into(),
            classes: names(&["dark", "mid", "bright"]),
            rule: RenderRule::Brightness,
            coupling: None,
        },
        AttributeSpec {
            name: "texture".into(),
            classes: names(&["smooth", "stripes", "checker"]),
            rule: RenderRule::Texture,
            coupling: Some(Coupling {
                source: 0,
                probability: 0.6,
            }),
        },
        AttributeSpec {
            name: "shape".into(),
            classes: names(&["none", "circle", "square", "triangle"]),
            rule: RenderRule::Shape,
            coupling: None,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub attributes: Vec<AttributeSpec>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub joint_size: usize,
    pub noise_sigma: f64,
    /// Probability that an unlabelled attribute of a subset image is class 0.
    pub nuisance_skew: f64,
    /// Offset per class index added to channel `m mod 3` for attribute `m`.
    pub tint: f64,
    pub brightness_jitter: f64,
    pub texture_amplitude: f64,
    pub shape_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            attributes: default_attributes(),
            train_size: 600,
            val_size: 150,
            test_size: 300,
            joint_size: 300,
            noise_sigma: 0.02,
            nuisance_skew: 0.7,
            tint: 0.05,
            brightness_jitter: 0.05,
            texture_amplitude: 0.1,
            shape_amplitude: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn num_tasks(&self) -> usize {
        self.attributes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(AttributeSpec::num_classes).collect()
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        for (m, a) in self.attributes.iter().enumerate() {
            let k = a.num_classes();
            if k < 2 {
                return Err(Error::Config(format!("attribute {} needs at least two classes", a.name)));
            }
            let max = match a.rule {
                RenderRule::Texture => 3,
                RenderRule::Shape => 4,
                _ => usize::MAX,
            };
            if k > max {
                return Err(Error::Config(format!(
                    "attribute {} has {k} classes but its rule supports {max}",
                    a.name
                )));
            }
            if let Some(c) = a.coupling {
                if c.source >= m {
                    return Err(Error::Config(format!(
                        "attribute {} must couple to an earlier attribute, got {}",
                        a.name, c.source
                    )));
                }
                if !(0.0..=1.0).contains(&c.probability) {
                    return Err(Error::Config(format!("coupling probability {} outside [0, 1]", c.probability)));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.nuisance_skew) {
            return Err(Error::Config(format!("nuisance skew {} outside [0, 1]", self.nuisance_skew)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.brightness_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("subset splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where an example lives: a single-label subset (task index from 0) or the
/// jointly labelled pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Subset { task: usize, split: Split },
    Joint,
}

impl Partition {
    pub fn name(self) -> String {
        match self {
            Partition::Subset { task, split } => format!("subset{}_{}", task + 1, split.name()),
            Partition::Joint => "joint".into(),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Partition::Subset { task, split } => LABEL_STREAM_BASE + 1 + 4 * task as u64 + split as u64,
            Partition::Joint => LABEL_STREAM_BASE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub partition: Partition,
    /// Ground truth for every attribute.
    pub labels: Vec<usize>,
    pub image: Vec<f32>,
}

impl Example {
    /// The label vector an annotator of this example's subset provides:
    /// the subset's task is labelled, the rest are −1. Joint examples carry
    /// every label.
    pub fn visible_labels(&self) -> Vec<i32> {
        match self.partition {
            Partition::Subset { task, .. } => self
                .labels
                .iter()
                .enumerate()
                .map(|(m, &l)| if m == task { l as i32 } else { MISSING_LABEL })
                .collect(),
            Partition::Joint => self.labels.iter().map(|&l| l as i32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub config: SynthConfig,
    pub seed: u64,
    /// Ordered by id; `examples[i].id == i`.
    pub examples: Vec<Example>,
}

impl DatasetBundle {
    pub fn partitions(&self) -> Vec<Partition> {
        let mut out: Vec<Partition> = (0..self.config.num_tasks())
            .flat_map(|task| Split::ALL.map(|split| Partition::Subset { task, split }))
            .collect();
        out.push(Partition::Joint);
        out
    }

    pub fn partition(&self, p: Partition) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.partition == p).collect()
    }

    pub fn subset(&self, task: usize, split: Split) -> Vec<&Example> {
        self.partition(Partition::Subset { task, split })
    }

    pub fn joint(&self) -> Vec<&Example> {
        self.partition(Partition::Joint)
    }

    pub fn get(&self, id: u64) -> Result<&Example> {
        self.examples
            .get(id as usize)
            .filter(|e| e.id == id)
            .ok_or_else(|| Error::Lookup(format!("no example with id {id}")))
    }
}

fn image_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn label_rng(seed: u64, p: Partition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p.stream());
    rng
}

fn inside_shape(class: usize, x: f64, y: f64, cx: f64, cy: f64) -> bool {
    match class {
        1 => (x - cx).powi(2) + (y - cy).powi(2) <= 36.0,
        2 => (x - cx).abs() <= 5.0 && (y - cy).abs() <= 5.0,
        3 => {
            // equilateral, side 12, apex up
            let half_h = 12.0 * 3f64.sqrt() / 4.0;
            let (top, bottom) = (cy - half_h, cy + half_h);
            if y < top || y > bottom {
                return false;
            }
            let half_w = 6.0 * (y - top) / (bottom - top);
            (x - cx).abs() <= half_w
        }
        _ => false,
    }
}

/// Additive texture value at column `x`, row `y` for texture class `class`.
/// The pattern is offset by one pixel so 2x2 patches straddle its edges.
fn texture_sign(class: usize, x: usize, y: usize) -> f64 {
    let col = ((x + 1) / 2) % 2;
    let row = ((y + 1) / 2) % 2;
    match class {
        1 => {
            if col == 0 {
                1.0
            } else {
                -1.0
            }
        }
        2 => {
            if (col + row) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => 0.0,
    }
}

/// Renders one image for `labels`, drawing jitter and noise from `rng`.
pub fn render_scene(config: &SynthConfig, labels: &[usize], rng: &mut impl RngCore) -> Result<Vec<f32>> {
    if labels.len() != config.num_tasks() {
        return Err(Error::Dimension(format!(
            "{} labels for {} attributes",
            labels.len(),
            config.num_tasks()
        )));
    }
    for (a, &l) in config.attributes.iter().zip(labels) {
        if l >= a.num_classes() {
            return Err(Error::Contract(format!("class {l} out of range for {}", a.name)));
        }
    }
    let (h, w) = (config.height, config.width);
    let mut base = 0.5;
    let mut tint = [0.0f64; 3];
    let mut texture = 0usize;
    let mut shape = 0usize;
    for (m, (a, &l)) in config.attributes.iter().zip(labels).enumerate() {
        match a.rule {
            RenderRule::Brightness => {
                let k = a.num_classes();
                base = 0.2 + 0.6 * l as f64 / (k - 1) as f64;
            }
            RenderRule::Texture => texture = l,
            RenderRule::Shape => shape = l,
            RenderRule::TintOnly => {}
        }
        tint[m % 3] += config.tint * l as f64;
    }
    if config.brightness_jitter > 0.0 {
        base += rng.random_range(-config.brightness_jitter..=config.brightness_jitter);
    }
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut img = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = base + config.texture_amplitude * texture_sign(texture, x, y);
            if inside_shape(shape, x as f64 + 0.5, y as f64 + 0.5, cx, cy) {
                v += config.shape_amplitude;
            }
            for (c, t) in tint.iter().enumerate() {
                let mut p = v + t;
                if config.noise_sigma > 0.0 {
                    p += noise.sample(rng);
                }
                img[c * h * w + y * w + x] = p.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(img)
}

fn balanced_labels(n: usize, k: usize, rng: &mut impl RngCore) -> Vec<usize> {
    use rand::seq::SliceRandom;
    if n % k != 0 {
        log::warn!("split of {n} is not divisible by {k} classes; class sizes differ by one");
    }
    let mut v: Vec<usize> = (0..n).map(|i| i % k).collect();
    v.shuffle(rng);
    v
}

fn skewed(k: usize, skew: f64, rng: &mut impl RngCore) -> usize {
    let u: f64 = rng.random();
    if u < skew {
        0
    } else {
        1 + ((u - skew) / (1.0 - skew) * (k - 1) as f64).floor().min((k - 2) as f64) as usize
    }
}

fn partition_labels(config: &SynthConfig, p: Partition, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let counts = config.class_counts();
    match p {
        Partition::Subset { task, .. } => {
            let main = balanced_labels(n, counts[task], rng);
            main.into_iter()
                .map(|l| {
                    counts
                        .iter()
                        .enumerate()
                        .map(|(m, &k)| if m == task { l } else { skewed(k, config.nuisance_skew, rng) })
                        .collect()
                })
                .collect()
        }
        Partition::Joint => (0..n)
            .map(|_| {
                let mut row: Vec<usize> = Vec::with_capacity(counts.len());
                for (a, &k) in config.attributes.iter().zip(&counts) {
                    let l = match a.coupling {
                        Some(c) if row[c.source] < k && rng.random::<f64>() < c.probability => row[c.source],
                        _ => rng.random_range(0..k),
                    };
                    row.push(l);
                }
                row
            })
            .collect(),
    }
}

/// Generates the full bundle. Identical `(config, seed)` give identical
/// bytes; each image depends only on the seed and its id.
pub fn generate_bundle(config: &SynthConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let mut examples = Vec::new();
    let mut parts: Vec<(Partition, usize)> = Vec::new();
    for task in 0..config.num_tasks() {
        for (split, n) in [
            (Split::Train, config.train_size),
            (Split::Val, config.val_size),
            (Split::Test, config.test_size),
        ] {
            parts.push((Partition::Subset { task, split }, n));
        }
    }
    parts.push((Partition::Joint, config.joint_size));
    for (p, n) in parts {
        let mut rng = label_rng(seed, p);
        for labels in partition_labels(config, p, n, &mut rng) {
            let id = examples.len() as u64;
            let image = render_scene(config, &labels, &mut image_rng(seed, id))?;
            examples.push(Example {
                id,
                partition: p,
                labels,
                image,
            });
        }
    }
    Ok(DatasetBundle {
        config: config.clone(),
        seed,
        examples,
    })
}

/// Ground-truth label vector for `id`.
pub fn oracle_labels(bundle: &DatasetBundle, id: u64) -> Result<Vec<usize>> {
    Ok(bundle.get(id)?.labels.clone())
}

/// An annotator backed by ground truth that leaves each task unlabelled
/// with probability `decline_rate`. Answers depend only on `(seed, id)`.
#[derive(Clone, Debug)]
pub struct SimulatedAnnotator {
    pub decline_rate: f64,
    pub seed: u64,
}

impl SimulatedAnnotator {
    pub fn new(decline_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&decline_rate) {
            return Err(Error::Config(format!("decline rate {decline_rate} outside [0, 1)")));
        }
        Ok(Self { decline_rate, seed })
    }

    pub fn label(&self, bundle: &DatasetBundle, id: u64) -> Result<Vec<i32>> {
        let truth = oracle_labels(bundle, id)?;
        if self.decline_rate == 0.0 {
            return Ok(truth.into_iter().map(|l| l as i32).collect());
        }
        let mut rng = image_rng(self.seed, id);
        Ok(truth
            .into_iter()
            .map(|l| {
                if rng.random::<f64>() < self.decline_rate {
                    MISSING_LABEL
                } else {
                    l as i32
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub partition: Partition,
    pub file: String,
    pub first_id: u64,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub rng: String,
    pub config: SynthConfig,
    pub blobs: Vec<BlobEntry>,
    pub labels_file: String,
    pub labels_sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn labels_csv(bundle: &DatasetBundle) -> String {
    let mut s = String::from("id,partition");
    for a in &bundle.config.attributes {
        s.push(',');
        s.push_str(&a.name);
    }
    s.push('\n');
    for e in &bundle.examples {
        s.push_str(&format!("{},{}", e.id, e.partition.name()));
        for l in &e.labels {
            s.push_str(&format!(",{l}"));
        }
        s.push('\n');
    }
    s
}

/// Writes the manifest, one little-endian f32 blob per partition and the
/// label table into `dir`.
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs = Vec::new();
    for p in bundle.partitions() {
        let items = bundle.partition(p);
        let mut bytes = Vec::with_capacity(items.len() * bundle.config.image_len() * 4);
        for e in &items {
            for v in &e.image {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let file = format!("{}.f32", p.name());
        write_file(&dir.join(&file), &bytes)?;
        blobs.push(BlobEntry {
            partition: p,
            file,
            first_id: items.first().map_or(0, |e| e.id),
            count: items.len(),
            sha256: sha_hex(&bytes),
        });
    }
    let csv = labels_csv(bundle);
    write_file(&dir.join(LABELS_FILE), csv.as_bytes())?;
    let manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        seed: bundle.seed,
        rng: "chacha8, stream per image id".into(),
        config: bundle.config.clone(),
        blobs,
        labels_file: LABELS_FILE.into(),
        labels_sha256: sha_hex(csv.as_bytes()),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a bundle written by [`save_bundle`], verifying every hash.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Format(format!("not a dataset bundle: {}", manifest.format)));
    }
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: BUNDLE_VERSION,
        });
    }
    manifest.config.validate()?;
    let csv = read_file(&dir.join(&manifest.labels_file))?;
    if sha_hex(&csv) != manifest.labels_sha256 {
        return Err(Error::Format(format!("{} hash mismatch", manifest.labels_file)));
    }
    let csv = String::from_utf8(csv).map_err(|e| Error::Format(format!("labels: {e}")))?;
    let tasks = manifest.config.num_tasks();
    let mut labels: Vec<Vec<usize>> = Vec::new();
    for (n, line) in csv.lines().skip(1).enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + tasks || fields[0].parse::<usize>().ok() != Some(n) {
            return Err(Error::Format(format!("bad label row {}: {line}", n + 2)));
        }
        let row = fields[2..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|e| Error::Format(format!("label row {}: {e}", n + 2))))
            .collect::<Result<Vec<_>>>()?;
        labels.push(row);
    }
    let len = manifest.config.image_len();
    let mut examples: Vec<Option<Example>> = vec![None; labels.len()];
    for blob in &manifest.blobs {
        let bytes = read_file(&dir.join(&blob.file))?;
        if sha_hex(&bytes) != blob.sha256 {
            return Err(Error::Format(format!("{} hash mismatch", blob.file)));
        }
        if bytes.len() != blob.count * len * 4 {
            return Err(Error::Format(format!("{} has {} bytes", blob.file, bytes.len())));
        }
        for (k, chunk) in bytes.chunks_exact(len * 4).enumerate() {
            let id = blob.first_id + k as u64;
            let slot = examples
                .get_mut(id as usize)
                .ok_or_else(|| Error::Format(format!("id {id} missing from labels")))?;
            let image = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            *slot = Some(Example {
                id,
                partition: blob.partition,
                labels: labels[id as usize].clone(),
                image,
            });
        }
    }
    let examples = examples
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| Error::Format(format!("no image for id {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle {
        config: manifest.config,
        seed: manifest.seed,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::{AdamWConfig, ComputeGraph, OptimizerState, ParamUpdate, Tensor};

    fn small() -> SynthConfig {
        SynthConfig {
            train_size: 60,
            val_size: 30,
            test_size: 30,
            joint_size: 40,
            ..Default::default()
        }
    }

    #[test]
    fn split_sizes_and_balance() {
        let cfg = SynthConfig {
            val_size: 3,
            test_size: 3,
            joint_size: 3,
            ..Default::default()
        };
        let b = generate_bundle(&cfg, 0).unwrap();
        let train = b.subset(0, Split::Train);
        assert_eq!(train.len(), 600);
        for c in 0..3 {
            assert_eq!(train.iter().filter(|e| e.labels[0] == c).count(), 200);
        }
        let shapes = b.subset(2, Split::Train);
        for c in 0..4 {
            assert_eq!(shapes.iter().filter(|e| e.labels[2] == c).count(), 150);
        }
        for (i, e) in b.examples.iter().enumerate() {
            assert_eq!(e.id, i as u64);
        }
    }

    #[test]
    fn nuisance_attributes_are_skewed() {
        let cfg = SynthConfig {
            val_size: 3,
            test_size: 3,
            joint_size: 3,
            ..Default::default()
        };
        let b = generate_bundle(&cfg, 1).unwrap();
        let train = b.subset(0, Split::Train);
        let zeros = train.iter().filter(|e| e.labels[1] == 0).count() as f64 / train.len() as f64;
        assert!((zeros - 0.7).abs() < 0.06, "{zeros}");
        assert_eq!(train[0].visible_labels()[1], MISSING_LABEL);
    }

    #[test]
    fn joint_pool_coupling() {
        let cfg = SynthConfig {
            train_size: 3,
            val_size: 3,
            test_size: 3,
            joint_size: 3000,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let b = generate_bundle(&cfg, 2).unwrap();
        let joint = b.joint();
        let same = joint.iter().filter(|e| e.labels[1] == e.labels[0]).count() as f64 / joint.len() as f64;
        // 0.6 + 0.4 / 3
        assert!((same - 0.7333).abs() < 0.03, "{same}");
    }

    #[test]
    fn deterministic_and_id_local() {
        let cfg = small();
        let a = generate_bundle(&cfg, 5).unwrap();
        let b = generate_bundle(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let e = &a.examples[17];
        let again = render_scene(&cfg, &e.labels, &mut image_rng(5, 17)).unwrap();
        assert_eq!(again, e.image);
        let c = generate_bundle(&cfg, 6).unwrap();
        assert_ne!(a.examples[0].image, c.examples[0].image);
    }

    #[test]
    fn pixel_range_and_brightness_mean() {
        let cfg = SynthConfig {
            tint: 0.0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for level in 0..3 {
            let img = render_scene(&cfg, &[level, 0, 0], &mut rng).unwrap();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
            let target = [0.2, 0.5, 0.8][level];
            assert!((mean - target).abs() <= 0.05 + 0.005, "{mean} vs {target}");
        }
    }

    #[test]
    fn stripes_have_period_four() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            brightness_jitter: 0.0,
            ..small()
        };
        let img = render_scene(&cfg, &[1, 1, 0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = cfg.width;
        let profile: Vec<f64> = (0..w).map(|x| img[x] as f64).collect();
        let mean = profile.iter().sum::<f64>() / w as f64;
        let ac = |lag: usize| -> f64 { (0..w - lag).map(|x| (profile[x] - mean) * (profile[x + lag] - mean)).sum() };
        assert!(ac(4) > 0.0 && ac(2) < 0.0);
        assert!(ac(4) > ac(1) && ac(4) > ac(3));
    }

    #[test]
    fn render_rejects_bad_labels() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(render_scene(&cfg, &[3, 0, 0], &mut rng), Err(Error::Contract(_))));
        assert!(matches!(render_scene(&cfg, &[0, 0], &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn save_load_round_trip_and_tamper() {
        let b = generate_bundle(&small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, b);
        let blob = dir.path().join("joint.f32");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn annotator_declines_deterministically() {
        let b = generate_bundle(&small(), 4).unwrap();
        let full = SimulatedAnnotator::new(0.0, 9).unwrap();
        assert_eq!(full.label(&b, 3).unwrap(), b.examples[3].labels.iter().map(|&l| l as i32).collect::<Vec<_>>());
        assert!(matches!(SimulatedAnnotator::new(1.0, 9), Err(Error::Config(_))));
        let tenth = SimulatedAnnotator::new(0.1, 9).unwrap();
        let entries: Vec<i32> = b.examples.iter().flat_map(|e| tenth.label(&b, e.id).unwrap()).collect();
        let n = entries.len() as f64;
        let rate = entries.iter().filter(|&&l| l == MISSING_LABEL).count() as f64 / n;
        assert!((rate - 0.1).abs() <= 3.0 * (0.09 / n).sqrt(), "decline rate {rate} over {n}");
        let half = SimulatedAnnotator::new(0.5, 9).unwrap();
        assert_eq!(half.label(&b, 7).unwrap(), half.label(&b, 7).unwrap());
        assert!(matches!(full.label(&b, 1_000_000), Err(Error::Lookup(_))));
    }

    /// Softmax regression on raw pixels, one probe per attribute.
    #[test]
    fn linear_probe_separates_attributes() {
        let cfg = SynthConfig::default();
        let counts = cfg.class_counts();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Vec<usize>, Vec<f32>)> {
            (0..n)
                .map(|_| {
                    let labels: Vec<usize> = counts.iter().map(|&k| rng.random_range(0..k)).collect();
                    let img = render_scene(&cfg, &labels, rng).unwrap();
                    (labels, img)
                })
                .collect()
        };
        let train = draw(&mut rng, 480);
        let test = draw(&mut rng, 240);
        let d = cfg.image_len();
        let mut mean = vec![0f32; d];
        for (_, x) in &train {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / train.len() as f32;
            }
        }
        let centred = |set: &[(Vec<usize>, Vec<f32>)]| {
            let rows: Vec<Vec<f32>> = set.iter().map(|(_, x)| x.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
            Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap()
        };
        let x_train = centred(&train);
        let x_test = centred(&test);
        for (m, &k) in counts.iter().enumerate() {
            let mut w = Tensor::<f32>::zeros(&[d, k]);
            let mut bias = Tensor::<f32>::zeros(&[k]);
            let mut opt = OptimizerState::new(AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            });
            let y: Vec<usize> = train.iter().map(|(l, _)| l[m]).collect();
            for _ in 0..150 {
                let mut g = ComputeGraph::new();
                let xv = g.constant(x_train.clone());
                let wv = g.param(w.clone());
                let bv = g.param(bias.clone());
                let z = g.matmul(xv, wv).unwrap();
                let z = g.add_bias(z, bv).unwrap();
                let p = g.softmax_rows(z).unwrap();
                let loss = g.cross_entropy(p, &y).unwrap();
                let mut grads = g.backward(loss).unwrap();
                let (gw, gb) = (grads.take(wv).unwrap(), grads.take(bv).unwrap());
                opt.step(
                    &mut [
                        ParamUpdate {
                            name: "w",
                            param: &mut w,
                            grad: &gw,
                        },
                        ParamUpdate {
                            name: "b",
                            param: &mut bias,
                            grad: &gb,
                        },
                    ],
                    1e-2,
                )
                .unwrap();
            }
            let z = crate::tensorops::gemm(&x_test, &w).unwrap();
            let correct = (0..test.len())
                .filter(|&r| {
                    let row: Vec<f32> = z.row(r).iter().zip(bias.data()).map(|(a, b)| a + b).collect();
                    crate::model::argmax(&row) == test[r].0[m]
                })
                .count();
            let acc = correct as f64 / test.len() as f64;
            assert!(acc >= 0.99, "attribute {m}: probe accuracy {acc}");
        }
    }
}
