//! Detector-constrained counterfactual generation by guided reverse diffusion.
//!
//! A factual image is noised to depth `tau` and denoised back while the
//! reverse mean is shifted by `-beta_t` times the gradient of
//! `lambda_c * BCE(C, y_c) + lambda_d * BCE(D, y_s) + lambda_p * mean|x_hat - x|`,
//! evaluated on the one-step clean estimate `x_hat`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{stack_pixels, ImageSample, Split, Subgroup};
use crate::ddpm::{forward_noise, image_rng, normal_batch, predict_x0, reverse_loop, reverse_one, DenoiserCheckpoint};
use crate::error::{Error, Result};
use crate::imageio;
use crate::nn::Tensor;
use crate::predictors::{bce_with_logit, PredictorCheckpoint};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const RUN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Flip the classifier, hold the detector at its factual decision.
    Decodex,
    /// Same as `Decodex` with the detector weight forced to zero.
    Baseline,
    /// Flip the detector, hold the classifier at its factual decision.
    ExplainDetector,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::Decodex => "decodex",
            GuidanceMode::Baseline => "baseline",
            GuidanceMode::ExplainDetector => "explain_detector",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decodex" => Ok(GuidanceMode::Decodex),
            "baseline" => Ok(GuidanceMode::Baseline),
            "explain_detector" => Ok(GuidanceMode::ExplainDetector),
            other => Err(Error::validation(format!("unknown guidance mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_c: f32,
    pub lambda_d: f32,
    pub lambda_p: f32,
    /// Noising depth the reverse pass starts from; 0 returns the factual.
    pub tau: usize,
    pub stochastic: bool,
    pub rng_seed: u64,
    /// Images denoised together per network call.
    pub batch_size: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_c: 8.0,
            lambda_d: 8.0,
            lambda_p: 30.0,
            tau: 200,
            stochastic: true,
            rng_seed: 0,
            batch_size: 100,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_d", self.lambda_d),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("{name} must be a finite nonnegative number")));
            }
        }
        if self.tau > steps {
            return Err(Error::validation(format!(
                "tau {} exceeds the schedule length {steps}",
                self.tau
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        Ok(())
    }

    /// Copy with the weights a mode actually uses.
    pub fn for_mode(&self, mode: GuidanceMode) -> Self {
        let mut c = self.clone();
        if mode == GuidanceMode::Baseline {
            c.lambda_d = 0.0;
        }
        c
    }
}

/// Target labels for one factual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub class: u8,
    pub artifact: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub class: f64,
    pub det: f64,
    pub perc: f64,
}

/// Unweighted per-image terms plus the weighted total.
pub fn guidance_loss(
    x_hat: &Tensor,
    x: &Tensor,
    targets: &[Targets],
    config: &GuidanceConfig,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
) -> Result<Vec<LossTerms>> {
    Ok(loss_and_gradient(x_hat, x, targets, config, classifier, detector, false)?.0)
}

/// Loss terms and, when `with_grad`, the gradient of the summed weighted loss
/// with respect to `x_hat`.
fn loss_and_gradient(
    x_hat: &Tensor,
    x: &Tensor,
    targets: &[Targets],
    config: &GuidanceConfig,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    with_grad: bool,
) -> Result<(Vec<LossTerms>, Tensor)> {
    if x_hat.shape() != x.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            got: x_hat.shape().to_vec(),
        });
    }
    let n = x.shape()[0];
    if targets.len() != n {
        return Err(Error::validation("one target pair per image is required"));
    }
    let per = x.len() / n.max(1);
    let mut grad = Tensor::zeros(x.shape());
    let mut terms = vec![LossTerms::default(); n];

    let predictor_term =
        |p: &PredictorCheckpoint, lambda: f32, target: fn(&Targets) -> u8| -> Result<(Vec<f64>, Option<Tensor>)> {
            let y: Vec<f32> = targets.iter().map(|t| target(t) as f32).collect();
            if with_grad && lambda > 0.0 {
                let (g, _, losses) = p.input_gradient(x_hat, &y, &vec![lambda; n])?;
                Ok((losses, Some(g)))
            } else {
                let logits = p.logits(x_hat)?;
                Ok((
                    logits.iter().zip(&y).map(|(&z, &t)| bce_with_logit(z, t)).collect(),
                    None,
                ))
            }
        };
    let (class_losses, class_grad) = predictor_term(classifier, config.lambda_c, |t| t.class)?;
    let (det_losses, det_grad) = predictor_term(detector, config.lambda_d, |t| t.artifact)?;
    for g in [class_grad, det_grad].into_iter().flatten() {
        grad.add_assign(&g);
    }
    if with_grad && config.lambda_p > 0.0 {
        let scale = config.lambda_p / per as f32;
        for ((g, &a), &b) in grad.data_mut().iter_mut().zip(x_hat.data()).zip(x.data()) {
            let d = a - b;
            if d > 0.0 {
                *g += scale;
            } else if d < 0.0 {
                *g -= scale;
            }
        }
    }
    for (i, t) in terms.iter_mut().enumerate() {
        let range = i * per..(i + 1) * per;
        t.class = class_losses[i];
        t.det = det_losses[i];
        t.perc = x_hat.data()[range.clone()]
            .iter()
            .zip(&x.data()[range])
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / per as f64;
        t.total = config.lambda_c as f64 * t.class + config.lambda_d as f64 * t.det + config.lambda_p as f64 * t.perc;
        for (name, v) in [("class", t.class), ("det", t.det), ("perc", t.perc)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss term for image {i}")));
            }
        }
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("guidance gradient".into()));
    }
    Ok((terms, grad))
}

/// Gradient of the guidance loss with respect to `z_t`, holding the noise
/// estimate fixed: `(1 / sqrt(abar_t)) * dL/dx_hat`.
#[allow(clippy::too_many_arguments)]
pub fn guided_gradient(
    z: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    x: &Tensor,
    targets: &[Targets],
    config: &GuidanceConfig,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
) -> Result<Tensor> {
    if config.lambda_c == 0.0 && config.lambda_d == 0.0 && config.lambda_p == 0.0 {
        return Ok(Tensor::zeros(z.shape()));
    }
    let schedule = ddpm.schedule();
    let x_hat = predict_x0(z, t, eps_hat, schedule)?;
    let (_, g) = loss_and_gradient(&x_hat, x, targets, config, classifier, detector, true)?;
    let scale = (1.0 / schedule.alpha_bar(t).sqrt()) as f32;
    Ok(g.scale(scale))
}

/// One guided reverse step for a batch; noise is drawn from `rngs` when
/// stochastic and `t > 1`.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    z: &Tensor,
    t: usize,
    x: &Tensor,
    targets: &[Targets],
    config: &GuidanceConfig,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    rngs: &mut [rand_chacha::ChaCha8Rng],
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::validation("guided step at t = 0"));
    }
    let mut shift =
        |z: &Tensor, t: usize, eps: &Tensor| guided_gradient(z, t, eps, x, targets, config, ddpm, classifier, detector);
    reverse_one(ddpm, z, t, rngs, config.stochastic, Some(&mut shift))
}

/// Guided reverse pass from an arbitrary starting state at `t_start`.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_from(
    z: Tensor,
    t_start: usize,
    x: &Tensor,
    targets: &[Targets],
    config: &GuidanceConfig,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    rngs: &mut [rand_chacha::ChaCha8Rng],
) -> Result<Tensor> {
    let mut shift =
        |z: &Tensor, t: usize, eps: &Tensor| guided_gradient(z, t, eps, x, targets, config, ddpm, classifier, detector);
    reverse_loop(ddpm, z, t_start, rngs, config.stochastic, Some(&mut shift))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub factual_id: String,
    pub split: Split,
    pub subgroup: Subgroup,
    pub class_label: u8,
    pub artifact_label: u8,
    pub nuisance_attr: u8,
    pub mode: GuidanceMode,
    pub targets: Targets,
    pub classifier_prob_factual: f32,
    pub classifier_prob_cf: f32,
    pub detector_prob_factual: f32,
    pub detector_prob_cf: f32,
    /// Loss terms evaluated on the final counterfactual.
    pub final_losses: LossTerms,
    pub config: GuidanceConfig,
    pub steps: usize,
    #[serde(skip)]
    pub side: usize,
    #[serde(skip)]
    pub factual: Vec<f32>,
    #[serde(skip)]
    pub counterfactual: Vec<f32>,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl CounterfactualRecord {
    pub fn classifier_flipped(&self) -> bool {
        (self.classifier_prob_factual > 0.5) != (self.classifier_prob_cf > 0.5)
    }

    pub fn detector_flipped(&self) -> bool {
        (self.detector_prob_factual > 0.5) != (self.detector_prob_cf > 0.5)
    }

    pub fn factual_sample(&self) -> ImageSample {
        ImageSample {
            sample_id: self.factual_id.clone(),
            side: self.side,
            pixels: self.factual.clone(),
            class_label: self.class_label,
            artifact_label: self.artifact_label,
            nuisance_attr: self.nuisance_attr,
            subgroup: self.subgroup,
            split: self.split,
        }
    }
}

/// Per-factual stream index, so each image's noise is independent of batch
/// composition and order.
fn stream_for(sample_id: &str) -> u64 {
    let d = Sha256::digest(sample_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

fn hard(p: f32) -> u8 {
    (p > 0.5) as u8
}

/// Up to `n` samples taken round-robin over `subgroups`, each subgroup in
/// sample-id order.
pub fn select_factuals(samples: &[ImageSample], n: usize, subgroups: &[Subgroup]) -> Vec<ImageSample> {
    let mut lists: Vec<Vec<&ImageSample>> = subgroups
        .iter()
        .map(|&g| {
            let mut v: Vec<&ImageSample> = samples.iter().filter(|s| s.subgroup == g).collect();
            v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            v
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while out.len() < n && lists.iter().any(|l| i < l.len()) {
        for l in &mut lists {
            if out.len() < n {
                if let Some(s) = l.get(i) {
                    out.push((*s).clone());
                }
            }
        }
        i += 1;
    }
    out
}

/// Targets for a mode given the factual hard decisions.
pub fn targets_for(mode: GuidanceMode, class_pred: u8, artifact_pred: u8) -> Targets {
    match mode {
        GuidanceMode::Decodex | GuidanceMode::Baseline => Targets {
            class: 1 - class_pred,
            artifact: artifact_pred,
        },
        GuidanceMode::ExplainDetector => Targets {
            class: class_pred,
            artifact: 1 - artifact_pred,
        },
    }
}

/// Generate one counterfactual per factual. Results are deterministic under
/// `config.rng_seed` and do not depend on batching.
pub fn generate_counterfactuals(
    factuals: &[ImageSample],
    config: &GuidanceConfig,
    mode: GuidanceMode,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
) -> Result<Vec<CounterfactualRecord>> {
    let config = config.for_mode(mode);
    config.validate(ddpm.schedule().steps())?;
    let side = ddpm.image_side();
    for p in [classifier, detector] {
        if p.image_side() != side {
            return Err(Error::Shape {
                expected: vec![side, side],
                got: vec![p.image_side(), p.image_side()],
            });
        }
    }
    let mut records = Vec::with_capacity(factuals.len());
    for chunk in factuals.chunks(config.batch_size) {
        let start = Instant::now();
        let x = stack_pixels(chunk)?;
        let c0 = classifier.predict_prob(&x)?;
        let d0 = detector.predict_prob(&x)?;
        let targets: Vec<Targets> = c0
            .iter()
            .zip(&d0)
            .map(|(&c, &d)| targets_for(mode, hard(c), hard(d)))
            .collect();

        let cf = if config.tau == 0 {
            x.clone()
        } else {
            let mut rngs: Vec<_> = chunk
                .iter()
                .map(|s| image_rng(config.rng_seed, stream_for(&s.sample_id)))
                .collect();
            let noise = normal_batch(&mut rngs, side);
            let z = forward_noise(&x, config.tau, ddpm.schedule(), &noise)?;
            let out = guided_sample_from(
                z, config.tau, &x, &targets, &config, ddpm, classifier, detector, &mut rngs,
            )
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (batch starting at {})", chunk[0].sample_id)),
                other => other,
            })?;
            let mut px = out.map(|v| v.clamp(0.0, 1.0));
            imageio::quantize(px.data_mut());
            px
        };
        let c1 = classifier.predict_prob(&cf)?;
        let d1 = detector.predict_prob(&cf)?;
        let losses = guidance_loss(&cf, &x, &targets, &config, classifier, detector)?;
        let per_image_ms = start.elapsed().as_secs_f64() * 1000.0 / chunk.len() as f64;
        let per = side * side;
        for (i, s) in chunk.iter().enumerate() {
            records.push(CounterfactualRecord {
                factual_id: s.sample_id.clone(),
                split: s.split,
                subgroup: s.subgroup,
                class_label: s.class_label,
                artifact_label: s.artifact_label,
                nuisance_attr: s.nuisance_attr,
                mode,
                targets: targets[i],
                classifier_prob_factual: c0[i],
                classifier_prob_cf: c1[i],
                detector_prob_factual: d0[i],
                detector_prob_cf: d1[i],
                final_losses: losses[i],
                config: config.clone(),
                steps: config.tau,
                side,
                factual: s.pixels.clone(),
                counterfactual: cf.data()[i * per..(i + 1) * per].to_vec(),
                wall_time_ms: per_image_ms,
            });
        }
        log::info!("{}: {} counterfactuals done", mode.as_str(), records.len());
    }
    Ok(records)
}

/// Single-factual convenience wrapper.
pub fn generate_counterfactual(
    factual: &ImageSample,
    config: &GuidanceConfig,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
) -> Result<CounterfactualRecord> {
    let mut v = generate_counterfactuals(
        std::slice::from_ref(factual),
        config,
        GuidanceMode::Decodex,
        ddpm,
        classifier,
        detector,
    )?;
    Ok(v.remove(0))
}

/// Detector explanation: flip the artifact decision, keep the class decision.
pub fn explain_detector(
    factuals: &[ImageSample],
    config: &GuidanceConfig,
    ddpm: &DenoiserCheckpoint,
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
) -> Result<Vec<CounterfactualRecord>> {
    generate_counterfactuals(
        factuals,
        config,
        GuidanceMode::ExplainDetector,
        ddpm,
        classifier,
        detector,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    #[serde(flatten)]
    pub record: CounterfactualRecord,
    pub factual_path: PathBuf,
    pub counterfactual_path: PathBuf,
    pub difference_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub mode: GuidanceMode,
    pub config: GuidanceConfig,
    pub side: usize,
    pub records: Vec<RunEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Persist records: per-record factual / counterfactual / difference PNGs and
/// metadata, a run manifest, and wall times in a separate `timing.json`.
pub fn save_run(
    dir: &Path,
    mode: GuidanceMode,
    config: &GuidanceConfig,
    records: &[CounterfactualRecord],
) -> Result<PathBuf> {
    let side = records.first().map(|r| r.side).unwrap_or(0);
    let mut entries = Vec::with_capacity(records.len());
    let mut timing = serde_json::Map::new();
    for r in records {
        let rel = PathBuf::from("records").join(&r.factual_id);
        let abs = dir.join(&rel);
        imageio::write_gray(&abs.join("factual.png"), r.side, &r.factual)?;
        imageio::write_gray(&abs.join("counterfactual.png"), r.side, &r.counterfactual)?;
        imageio::write_difference_map(&abs.join("difference.png"), r.side, &r.factual, &r.counterfactual)?;
        write_json(&abs.join("record.json"), r)?;
        timing.insert(r.factual_id.clone(), serde_json::json!(r.wall_time_ms));
        entries.push(RunEntry {
            record: r.clone(),
            factual_path: rel.join("factual.png"),
            counterfactual_path: rel.join("counterfactual.png"),
            difference_path: rel.join("difference.png"),
        });
    }
    let manifest = RunManifest {
        version: RUN_VERSION,
        mode,
        config: config.for_mode(mode),
        side,
        records: entries,
    };
    let path = dir.join(RUN_MANIFEST_FILE);
    write_json(&path, &manifest)?;
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(path)
}

/// Load a run manifest (directory or file) and its images.
pub fn load_run(path: &Path) -> Result<(RunManifest, Vec<CounterfactualRecord>)> {
    let file = if path.is_dir() {
        path.join(RUN_MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.version != RUN_VERSION {
        return Err(Error::validation(format!(
            "unsupported run manifest version {}",
            manifest.version
        )));
    }
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let load = |p: &Path| -> Result<Vec<f32>> {
            let (side, px) = imageio::read_gray(&dir.join(p)).map_err(|err| Error::Load {
                sample_id: e.record.factual_id.clone(),
                reason: err.to_string(),
            })?;
            if side != manifest.side {
                return Err(Error::Load {
                    sample_id: e.record.factual_id.clone(),
                    reason: format!("image side {side} does not match run side {}", manifest.side),
                });
            }
            Ok(px)
        };
        let mut r = e.record.clone();
        r.side = manifest.side;
        r.factual = load(&e.factual_path)?;
        r.counterfactual = load(&e.counterfactual_path)?;
        records.push(r);
    }
    Ok((manifest, records))
}
