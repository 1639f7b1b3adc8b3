use std::path::Path;

use anyhow::{bail, Context, Result};
use cfdiff_core::augmentation::AugmentationConfig;
use cfdiff_core::dataset::DatasetSpec;
use cfdiff_core::ddpm::DenoiserConfig;
use cfdiff_core::guidance::GuidanceConfig;
use cfdiff_core::predictors::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Write a factual | counterfactual | difference figure per record.
    pub figures: bool,
    /// Pixel magnification of the figures.
    pub figure_zoom: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            figures: true,
            figure_zoom: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section's seed.
    pub rng_seed: u64,
    pub dataset: DatasetSpec,
    pub classifier: TrainConfig,
    pub detector: TrainConfig,
    pub probe: TrainConfig,
    pub ddpm: DenoiserConfig,
    pub guidance: GuidanceConfig,
    pub augmentation: AugmentationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            rng_seed: 0,
            dataset: DatasetSpec::default(),
            classifier: TrainConfig::default(),
            detector: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            probe: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
            ddpm: DenoiserConfig::default(),
            guidance: GuidanceConfig::default(),
            augmentation: AugmentationConfig::default(),
            output: OutputConfig::default(),
        };
        c.propagate_seed();
        c
    }
}

const SEEDED_SECTIONS: [(&str, &str); 7] = [
    ("dataset", "rng_seed"),
    ("classifier", "rng_seed"),
    ("detector", "rng_seed"),
    ("probe", "rng_seed"),
    ("ddpm", "rng_seed"),
    ("guidance", "rng_seed"),
    ("augmentation", "selection_seed"),
];

impl RunConfig {
    fn propagate_seed(&mut self) {
        let s = self.rng_seed;
        self.dataset.rng_seed = s;
        self.classifier.rng_seed = s;
        self.detector.rng_seed = s;
        self.probe.rng_seed = s;
        self.ddpm.rng_seed = s;
        self.guidance.rng_seed = s;
        self.augmentation.selection_seed = s;
    }

    /// Defaults, then the config file, then `--seed`, then dotted overrides.
    pub fn materialize(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let user = read_document(path)?;
            check_seed_keys(&user)?;
            merge(&mut doc, user, "")?;
        }
        if let Some(s) = seed {
            doc["rng_seed"] = s.into();
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            if SEEDED_SECTIONS.iter().any(|(s, k)| key == format!("{s}.{k}")) {
                bail!("{key}: set the top-level rng_seed instead");
            }
            set_dotted(&mut doc, key, value)?;
        }
        let mut config: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        for (name, t) in [
            ("classifier", &self.classifier),
            ("detector", &self.detector),
            ("probe", &self.probe),
        ] {
            t.validate().with_context(|| format!("section {name}"))?;
        }
        self.guidance.validate(self.ddpm.schedule.steps)?;
        if self.output.figure_zoom == 0 {
            bail!("output.figure_zoom must be positive");
        }
        Ok(())
    }

    pub fn train_config(&self, section: &str, objective: Option<Objective>) -> TrainConfig {
        let mut t = match section {
            "detector" => self.detector.clone(),
            "probe" => self.probe.clone(),
            _ => self.classifier.clone(),
        };
        if let Some(o) = objective {
            t.objective = o;
        }
        t
    }

    /// Write the fully materialized config into an output directory.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}

fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        let v: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(v)?)
    }
}

fn check_seed_keys(user: &Value) -> Result<()> {
    for (section, key) in SEEDED_SECTIONS {
        if user.get(section).and_then(|s| s.get(key)).is_some() {
            bail!("{section}.{key}: set the top-level rng_seed instead");
        }
    }
    Ok(())
}

/// Merge `user` into `base`, rejecting keys `base` does not have. A tagged
/// object whose `kind` changes is replaced wholesale.
fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            if let (Some(bk), Some(uk)) = (b.get("kind"), u.get("kind")) {
                if bk != uk {
                    *b = u;
                    return Ok(());
                }
            }
            for (k, v) in u {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => bail!("unknown config key {sub:?}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .with_context(|| format!("{key}: {} is not a section", parts[..i].join(".")))?;
        let Some(next) = obj.get_mut(*part) else {
            bail!("unknown config key {key:?}");
        };
        cur = next;
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::materialize(None, None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_seed() {
        let c = RunConfig::materialize(
            None,
            Some(7),
            &["guidance.lambda_d=0".into(), "classifier.objective=group_dro".into()],
        )
        .unwrap();
        assert_eq!(c.guidance.lambda_d, 0.0);
        assert_eq!(c.classifier.objective, Objective::GroupDro);
        assert_eq!(
            (c.dataset.rng_seed, c.ddpm.rng_seed, c.augmentation.selection_seed),
            (7, 7, 7)
        );
        assert!(RunConfig::materialize(None, None, &["guidance.nope=1".into()]).is_err());
        assert!(RunConfig::materialize(None, None, &["ddpm.rng_seed=1".into()]).is_err());
        assert!(RunConfig::materialize(None, None, &["guidance.lambda_c=-1".into()]).is_err());
    }

    #[test]
    fn partial_files_merge() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.toml");
        std::fs::write(&p, "rng_seed = 3\n[guidance]\ntau = 50\n[dataset.artifact]\nkind = \"bars\"\nmin_count = 1\nmax_count = 2\nmin_len = 3\nmax_len = 5\nthickness = 1\nintensity = 1.0\n").unwrap();
        let c = RunConfig::materialize(Some(&p), None, &[]).unwrap();
        assert_eq!(c.guidance.tau, 50);
        assert_eq!(c.guidance.lambda_c, GuidanceConfig::default().lambda_c);
        assert_eq!(c.dataset.rng_seed, 3);
        std::fs::write(&p, "[guidance]\ntypo = 1\n").unwrap();
        assert!(RunConfig::materialize(Some(&p), None, &[]).is_err());
        let j = d.path().join("c.json");
        std::fs::write(&j, r#"{"detector": {"epochs": 3}}"#).unwrap();
        assert_eq!(RunConfig::materialize(Some(&j), None, &[]).unwrap().detector.epochs, 3);
    }
}
