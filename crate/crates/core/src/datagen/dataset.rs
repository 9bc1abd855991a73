//! Whole-dataset generation with a fixed class mix and sequence-level splits.
//!
//! Seeds follow a counter scheme so any sequence can be regenerated alone:
//! with `root = RngStream::new(seed)`, the class order is shuffled by
//! `root.split(0)`, view choices come from `root.split(1)`, and sequence `i`
//! draws its scene from `root.split(2 + 2i)` and renders with the key of
//! `root.split(3 + 2i)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use blinknet_tensor::RngStream;

use super::io::{read_dataset, temp_path, write_dataset};
use super::render::{generate_sequence, SequenceSample};
use super::scene::{random_scene, SceneOptions};
use crate::error::{Error, Result};
use crate::semantics::{IntentState, ViewFace};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Relative frequency of each dataset class. The default is skewed towards
/// OFF with FLASHERS rarest; the proportions are our choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassMix {
    pub left_turn: f64,
    pub right_turn: f64,
    pub flashers: f64,
    pub off: f64,
    pub unknown: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix {
            left_turn: 0.20,
            right_turn: 0.20,
            flashers: 0.10,
            off: 0.36,
            unknown: 0.14,
        }
    }
}

impl ClassMix {
    pub fn balanced() -> Self {
        ClassMix {
            left_turn: 1.0,
            right_turn: 1.0,
            flashers: 1.0,
            off: 1.0,
            unknown: 1.0,
        }
    }

    /// Weights indexed by intent class.
    pub fn weights(&self) -> [f64; 5] {
        [self.left_turn, self.right_turn, self.flashers, self.off, self.unknown]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewMix {
    pub behind: f64,
    pub left: f64,
    pub front: f64,
    pub right: f64,
}

impl Default for ViewMix {
    fn default() -> Self {
        ViewMix {
            behind: 1.0,
            left: 1.0,
            front: 1.0,
            right: 1.0,
        }
    }
}

impl ViewMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.behind, self.left, self.front, self.right]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 600.0,
            val: 100.0,
            test: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub sequences: usize,
    /// Overrides `mix` with equal class weights.
    pub balanced: bool,
    pub mix: ClassMix,
    pub views: ViewMix,
    pub splits: SplitRatios,
    pub scene: SceneOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            sequences: 900,
            balanced: false,
            mix: ClassMix::default(),
            views: ViewMix::default(),
            splits: SplitRatios::default(),
            scene: SceneOptions::default(),
        }
    }
}

fn check_weights(field: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config(field, "weights must be finite, nonnegative and not all zero"));
    }
    Ok(())
}

impl DatasetConfig {
    pub fn class_weights(&self) -> [f64; 5] {
        if self.balanced {
            ClassMix::balanced().weights()
        } else {
            self.mix.weights()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::config("sequences", "must be positive"));
        }
        check_weights("mix", &self.class_weights())?;
        check_weights("views", &self.views.weights())?;
        let s = &self.splits;
        check_weights("splits", &[s.train, s.val, s.test])?;
        self.scene.validate()
    }

    /// Sequence count per intent class.
    pub fn class_counts(&self) -> Result<[usize; 5]> {
        self.validate()?;
        let weights = self.class_weights();
        let counts = largest_remainder(self.sequences, &weights);
        for (i, (&n, &w)) in counts.iter().zip(&weights).enumerate() {
            if w > 0.0 && n == 0 {
                let class = IntentState::ALL[i];
                return Err(Error::config(
                    "sequences",
                    format!("{} sequences leave class {class} empty", self.sequences),
                ));
            }
        }
        let mut out = [0; 5];
        out.copy_from_slice(&counts);
        Ok(out)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let s = &self.splits;
        let c = largest_remainder(self.sequences, &[s.train, s.val, s.test]);
        [c[0], c[1], c[2]]
    }
}

/// Apportions `total` by `weights`; ties in the remainders go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

fn weighted_pick(rng: &mut RngStream, weights: &[f64]) -> usize {
    let sum: f64 = weights.iter().sum();
    let mut u = rng.uniform() * sum;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Assigns sequences to splits with exact split totals while spreading every
/// class across splits in proportion.
fn assign_splits(classes: &[IntentState], targets: [usize; 3]) -> Vec<usize> {
    let n = classes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (classes[i].index(), i));
    let mut assigned = [0usize; 3];
    let mut split = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        let best = (0..3)
            .filter(|&s| assigned[s] < targets[s])
            .max_by(|&a, &b| {
                let da = targets[a] as f64 * (pos + 1) as f64 / n as f64 - assigned[a] as f64;
                let db = targets[b] as f64 * (pos + 1) as f64 / n as f64 - assigned[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("split targets sum to the sequence count");
        assigned[best] += 1;
        split[i] = best;
    }
    split
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub sequences: Vec<usize>,
    /// Sequence count per dataset class label.
    pub classes: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub canvas: u32,
    pub fps: f64,
    pub length: u32,
    pub train: SplitEntry,
    pub val: SplitEntry,
    pub test: SplitEntry,
    pub config: DatasetConfig,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::DatasetParse {
            path,
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: e.message().to_string(),
        })
    }

    pub fn split_path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let entry = self
            .split(name)
            .ok_or_else(|| Error::config("split", format!("unknown split `{name}`, expected train, val or test")))?;
        Ok(dir.join(&entry.file))
    }
}

/// One generated sequence with its dataset class (which differs from the
/// scene's displayed intent for unknown-class sequences).
pub fn generate_indexed(config: &DatasetConfig, seed: u64, index: usize, class: IntentState, view: ViewFace) -> Result<SequenceSample> {
    let root = RngStream::new(seed);
    let mut scene_rng = root.split(2 + 2 * index as u64);
    let spec = random_scene(&config.scene, class, view, &mut scene_rng)?;
    generate_sequence(&spec, root.split(3 + 2 * index as u64).key())
}

/// Dataset class and view of every sequence, in index order.
pub fn plan(config: &DatasetConfig, seed: u64) -> Result<Vec<(IntentState, ViewFace)>> {
    let counts = config.class_counts()?;
    let root = RngStream::new(seed);
    let mut classes: Vec<IntentState> = IntentState::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    root.split(0).shuffle(&mut classes);
    let mut view_rng = root.split(1);
    let weights = config.views.weights();
    Ok(classes
        .into_iter()
        .map(|c| (c, ViewFace::ALL[weighted_pick(&mut view_rng, &weights)]))
        .collect())
}

/// Generates all splits into `out_dir` and writes the manifest last, so a
/// directory without a manifest is never a complete dataset.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plan = plan(config, seed)?;
    let classes: Vec<IntentState> = plan.iter().map(|p| p.0).collect();
    let split_of = assign_splits(&classes, config.split_counts());

    let mut entries = Vec::new();
    for (s, name) in SPLIT_NAMES.iter().enumerate() {
        let ids: Vec<usize> = (0..plan.len()).filter(|&i| split_of[i] == s).collect();
        let mut samples = Vec::with_capacity(ids.len());
        let mut class_counts = BTreeMap::new();
        for &i in &ids {
            let (class, view) = plan[i];
            samples.push(generate_indexed(config, seed, i, class, view)?);
            *class_counts.entry(class.to_string()).or_insert(0) += 1;
        }
        let file = format!("{name}.blkd");
        write_dataset(&out_dir.join(&file), &samples)?;
        info!("wrote {} sequences to {}", samples.len(), out_dir.join(&file).display());
        entries.push(SplitEntry {
            file,
            sequences: ids,
            classes: class_counts,
        });
    }
    let [train, val, test]: [SplitEntry; 3] = entries.try_into().expect("three splits");
    let manifest = Manifest {
        format_version: super::io::VERSION,
        seed,
        canvas: config.scene.canvas,
        fps: config.scene.fps,
        length: config.scene.length,
        train,
        val,
        test,
        config: config.clone(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::config("manifest", e.to_string()))?;
    let tmp = temp_path(&path);
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads one split of a generated dataset.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SequenceSample>> {
    let manifest = Manifest::load(dir)?;
    let path = manifest.split_path(dir, split)?;
    let (_, samples) = read_dataset(&path)?;
    let expected = manifest.split(split).map_or(0, |e| e.sequences.len());
    if samples.len() != expected {
        return Err(Error::Incompatible(format!(
            "{} holds {} sequences but the manifest lists {expected}",
            path.display(),
            samples.len()
        )));
    }
    Ok(samples)
}
