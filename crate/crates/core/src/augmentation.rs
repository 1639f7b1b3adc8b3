//! Counterfactual data augmentation and before/after retraining.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{stack_pixels, DatasetManifest, DatasetSpec, FileEntry, ImageSample, Split, Subgroup};
use crate::ddpm::DenoiserCheckpoint;
use crate::error::{Error, Result};
use crate::guidance::{generate_counterfactuals, GuidanceConfig, GuidanceMode};
use crate::imageio;
use crate::predictors::{train, PredictorCheckpoint, Role, SubgroupAccuracyReport, TrainConfig};

pub const AUGMENTED_MANIFEST_FILE: &str = "augmented_manifest.json";
const AUGMENTED_VERSION: u32 = 1;

/// Which train-split factuals feed the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactualPool {
    /// Majority subgroups only, alternating maj_S / maj_H, so that flipped
    /// counterfactuals land in the minority cells.
    Majority,
    /// All four subgroups in turn.
    Stratified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub n: usize,
    pub pool: FactualPool,
    /// Keep records whose classifier decision did not flip.
    pub keep_unflipped: bool,
    pub selection_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            n: 200,
            pool: FactualPool::Majority,
            keep_unflipped: false,
            selection_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedEntry {
    pub sample_id: String,
    pub factual_id: String,
    pub subgroup: Subgroup,
    pub class_label: u8,
    pub artifact_label: u8,
    pub nuisance_attr: u8,
    /// Relative to the augmented manifest directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedSection {
    pub mode: GuidanceMode,
    pub requested: usize,
    pub generator_digest: String,
    pub counts: BTreeMap<Subgroup, usize>,
    pub samples: Vec<AugmentedEntry>,
    pub checksum: String,
}

/// Dataset manifest plus an `augmented` section. Base file paths resolve
/// against `base_root`, which is stored relative to this manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub counts: BTreeMap<Split, BTreeMap<Subgroup, usize>>,
    pub files: Vec<FileEntry>,
    pub checksum: String,
    pub base_root: PathBuf,
    pub augmented: AugmentedSection,
    #[serde(skip)]
    pub root: PathBuf,
}

fn relative_path(target: &Path, from: &Path) -> Result<PathBuf> {
    let t = target.canonicalize().map_err(|e| Error::io(target, e))?;
    let f = from.canonicalize().map_err(|e| Error::io(from, e))?;
    let tc: Vec<Component> = t.components().collect();
    let fc: Vec<Component> = f.components().collect();
    let common = tc.iter().zip(&fc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..fc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c.as_os_str());
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    Ok(out)
}

fn recount(samples: &[AugmentedEntry]) -> BTreeMap<Subgroup, usize> {
    let mut counts: BTreeMap<Subgroup, usize> = Subgroup::ALL.iter().map(|&g| (g, 0)).collect();
    for s in samples {
        *counts
            .entry(Subgroup::from_labels(s.class_label, s.artifact_label))
            .or_default() += 1;
    }
    counts
}

fn augmented_checksum(root: &Path, samples: &[AugmentedEntry]) -> Result<String> {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(s)?);
        let path = root.join(&s.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn candidate_order(base: &[ImageSample], config: &AugmentationConfig) -> Vec<ImageSample> {
    let groups: Vec<Subgroup> = match config.pool {
        FactualPool::Majority => vec![Subgroup::MajS, Subgroup::MajH],
        FactualPool::Stratified => Subgroup::ALL.to_vec(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.selection_seed);
    let mut lists: Vec<Vec<&ImageSample>> = groups
        .iter()
        .map(|&g| {
            let mut v: Vec<&ImageSample> = base.iter().filter(|s| s.subgroup == g).collect();
            v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            v.shuffle(&mut rng);
            v
        })
        .collect();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for l in &mut lists {
            if let Some(s) = l.get(i) {
                out.push((*s).clone());
            }
        }
    }
    out
}

/// Generate counterfactuals from train factuals, label each with its class
/// target and the factual's detector state, and write them next to a manifest
/// that references the untouched base dataset.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_augmentation_set(
    config: &AugmentationConfig,
    guidance: &GuidanceConfig,
    mode: GuidanceMode,
    base: &DatasetManifest,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    out_dir: &Path,
) -> Result<AugmentedManifest> {
    if config.n == 0 {
        return Err(Error::validation("augmentation count n must be at least 1"));
    }
    if mode == GuidanceMode::ExplainDetector {
        return Err(Error::validation("augmentation needs a class-flipping mode"));
    }
    let train_samples = base.load_samples(Split::Train)?;
    let candidates = candidate_order(&train_samples, config);
    let img_dir = out_dir.join("augmented");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut samples = Vec::new();
    let mut next = 0;
    while samples.len() < config.n && next < candidates.len() {
        let take = (config.n - samples.len()).min(candidates.len() - next);
        let window = &candidates[next..next + take];
        next += take;
        // Only factuals the classifier gets right, so the class target is the
        // flip of the true label.
        let probs = classifier.predict_prob(&stack_pixels(window)?)?;
        let chunk: Vec<ImageSample> = window
            .iter()
            .zip(probs)
            .filter(|(s, p)| ((*p > 0.5) as u8) == s.class_label)
            .map(|(s, _)| s.clone())
            .collect();
        if chunk.len() < window.len() {
            log::info!("skipping {} misclassified factuals", window.len() - chunk.len());
        }
        if chunk.is_empty() {
            continue;
        }
        let records = match generate_counterfactuals(&chunk, guidance, mode, ddpm, classifier, detector) {
            Ok(r) => r,
            Err(e) => {
                log::warn!(
                    "skipping {} factuals starting at {}: {e}",
                    chunk.len(),
                    chunk[0].sample_id
                );
                continue;
            }
        };
        for r in records {
            if !config.keep_unflipped && !r.classifier_flipped() {
                continue;
            }
            let sample_id = format!("aug_{}", r.factual_id);
            let rel = format!("augmented/{sample_id}.png");
            imageio::write_gray(&out_dir.join(&rel), r.side, &r.counterfactual)?;
            samples.push(AugmentedEntry {
                sample_id,
                factual_id: r.factual_id.clone(),
                subgroup: Subgroup::from_labels(r.targets.class, r.targets.artifact),
                class_label: r.targets.class,
                artifact_label: r.targets.artifact,
                nuisance_attr: r.nuisance_attr,
                path: rel,
            });
        }
    }
    if samples.len() < config.n {
        log::warn!("produced {} of {} requested augmented samples", samples.len(), config.n);
    }

    let mut h = Sha256::new();
    h.update(mode.as_str());
    h.update(serde_json::to_vec(&guidance.for_mode(mode))?);
    h.update(serde_json::to_vec(config)?);
    let manifest = AugmentedManifest {
        version: AUGMENTED_VERSION,
        spec: base.spec.clone(),
        counts: base.counts.clone(),
        files: base.files.clone(),
        checksum: base.checksum.clone(),
        base_root: relative_path(&base.root, out_dir)?,
        augmented: AugmentedSection {
            mode,
            requested: config.n,
            generator_digest: hex::encode(h.finalize()),
            counts: recount(&samples),
            checksum: augmented_checksum(out_dir, &samples)?,
            samples,
        },
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

impl AugmentedManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(AUGMENTED_MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(AUGMENTED_MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: AugmentedManifest = serde_json::from_str(&text)?;
        if m.version != AUGMENTED_VERSION {
            return Err(Error::validation(format!(
                "unsupported augmented manifest version {}",
                m.version
            )));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// The base dataset as a plain manifest rooted at its own directory.
    pub fn base(&self) -> DatasetManifest {
        DatasetManifest {
            version: crate::dataset::MANIFEST_VERSION,
            spec: self.spec.clone(),
            counts: self.counts.clone(),
            files: self.files.clone(),
            checksum: self.checksum.clone(),
            root: self.root.join(&self.base_root),
        }
    }

    /// Check the base dataset is unchanged and the augmented files match.
    pub fn verify(&self) -> Result<()> {
        self.base().verify()?;
        for s in &self.augmented.samples {
            if s.subgroup != Subgroup::from_labels(s.class_label, s.artifact_label) {
                return Err(Error::validation(format!(
                    "{}: subgroup disagrees with labels",
                    s.sample_id
                )));
            }
        }
        if recount(&self.augmented.samples) != self.augmented.counts {
            return Err(Error::validation("augmented counts disagree with samples"));
        }
        if augmented_checksum(&self.root, &self.augmented.samples)? != self.augmented.checksum {
            return Err(Error::validation("augmented checksum mismatch"));
        }
        Ok(())
    }

    pub fn load_augmented(&self) -> Result<Vec<ImageSample>> {
        let side = self.spec.side_length;
        self.augmented
            .samples
            .iter()
            .map(|s| {
                let (got, pixels) = imageio::read_gray(&self.root.join(&s.path)).map_err(|e| Error::Load {
                    sample_id: s.sample_id.clone(),
                    reason: e.to_string(),
                })?;
                if got != side {
                    return Err(Error::Load {
                        sample_id: s.sample_id.clone(),
                        reason: format!("expected side {side}, found {got}"),
                    });
                }
                Ok(ImageSample {
                    sample_id: s.sample_id.clone(),
                    side,
                    pixels,
                    class_label: s.class_label,
                    artifact_label: s.artifact_label,
                    nuisance_attr: s.nuisance_attr,
                    subgroup: s.subgroup,
                    split: Split::Train,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyComparison {
    pub before: SubgroupAccuracyReport,
    pub after: SubgroupAccuracyReport,
}

/// Retrain from scratch on base train plus augmented samples; evaluate the
/// supplied base checkpoint and the new one on the same test split.
pub fn retrain_with_augmentation(
    config: &TrainConfig,
    augmented: &AugmentedManifest,
    before: &PredictorCheckpoint,
) -> Result<(PredictorCheckpoint, AccuracyComparison)> {
    if before.role() != Role::Classifier {
        return Err(Error::validation("before checkpoint must be a classifier"));
    }
    let base = augmented.base();
    let mut train_set = base.load_samples(Split::Train)?;
    train_set.extend(augmented.load_augmented()?);
    let val = base.load_samples(Split::Val)?;
    let test = base.load_samples(Split::Test)?;
    let after = train(config, &train_set, &val, Role::Classifier)?;
    let cmp = AccuracyComparison {
        before: before.evaluate_subgroups(&test)?,
        after: after.evaluate_subgroups(&test)?,
    };
    Ok((after, cmp))
}

/// Subgroup accuracy table, one row per labelled report.
pub fn save_accuracy_table(path: &Path, rows: &[(&str, &SubgroupAccuracyReport)]) -> Result<()> {
    let err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["model".to_string()];
    header.extend(Subgroup::ALL.iter().map(|g| g.as_str().to_string()));
    header.extend(["worst_group".into(), "mean_minority".into(), "overall".into()]);
    w.write_record(&header).map_err(err)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, r) in rows {
        let mut row = vec![name.to_string()];
        row.extend(Subgroup::ALL.iter().map(|g| fmt(r.accuracy(*g))));
        row.extend([fmt(r.worst_group), fmt(r.mean_minority()), r.overall.to_string()]);
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
