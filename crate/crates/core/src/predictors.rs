//! Binary predictors (disease classifier, artifact detector, nuisance probe)
//! sharing one small CNN, trained with ERM or online Group-DRO.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_order, stack_pixels, Dataset, ImageSample, Subgroup};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ConvNet, ConvNetArch, Graph, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const META_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Classifier,
    Detector,
    AttributeProbe,
}

impl Role {
    /// The positive label this role predicts for a sample.
    pub fn label(self, s: &ImageSample) -> u8 {
        match self {
            Role::Classifier => s.class_label,
            Role::Detector => s.artifact_label,
            Role::AttributeProbe => s.nuisance_attr,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Classifier => "classifier",
            Role::Detector => "detector",
            Role::AttributeProbe => "attribute_probe",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Role::Classifier),
            "detector" => Ok(Role::Detector),
            "attribute_probe" | "probe" => Ok(Role::AttributeProbe),
            other => Err(Error::validation(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Erm,
    GroupDro,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Objective::Erm),
            "group_dro" | "dro" => Ok(Objective::GroupDro),
            other => Err(Error::validation(format!("unknown objective {other:?}"))),
        }
    }
}

/// Which epoch's parameters to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// Keep the final epoch.
    None,
    /// Best overall validation accuracy.
    ValAccuracy,
    /// Best worst-subgroup validation accuracy.
    WorstGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// Step size of the exponentiated-gradient group-weight update.
    pub dro_eta: f64,
    pub rng_seed: u64,
    pub early_stop: EarlyStop,
    pub arch: ConvNetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Erm,
            epochs: 12,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            dro_eta: 0.01,
            rng_seed: 0,
            early_stop: EarlyStop::None,
            arch: ConvNetArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::validation(
                "learning rate must be positive, weight decay nonnegative",
            ));
        }
        if self.objective == Objective::GroupDro && !(self.dro_eta > 0.0) {
            return Err(Error::validation("dro_eta must be positive for group_dro"));
        }
        self.arch.validate()
    }
}

/// Group-DRO mixture weights over the four subgroups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    weights: [f64; 4],
}

impl GroupWeights {
    pub fn uniform() -> Self {
        Self { weights: [0.25; 4] }
    }

    /// Weights proportional to `counts`; uniform when all are zero.
    pub fn from_counts(counts: [usize; 4]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Self::uniform();
        }
        Self {
            weights: counts.map(|c| c as f64 / total as f64),
        }
    }

    pub fn from_weights(weights: [f64; 4]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) {
            return Err(Error::validation("group weights must be nonnegative with positive sum"));
        }
        Ok(Self {
            weights: weights.map(|w| w / sum),
        })
    }

    pub fn weights(&self) -> &[f64; 4] {
        &self.weights
    }

    pub fn get(&self, g: Subgroup) -> f64 {
        self.weights[g.index()]
    }

    /// `q_g <- q_g * exp(eta * loss_g)` for every observed group, then renormalize.
    pub fn update(&mut self, group_losses: &[Option<f64>; 4], eta: f64) {
        // Shift by the largest observed loss; the common factor cancels in normalization.
        let shift = group_losses.iter().flatten().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
        if !shift.is_finite() {
            return;
        }
        for (w, loss) in self.weights.iter_mut().zip(group_losses) {
            if let Some(l) = loss {
                *w *= (eta * (l - shift)).exp();
            }
        }
        let sum: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= sum;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAccuracyReport {
    /// `None` when the subgroup has no samples.
    pub per_subgroup: BTreeMap<Subgroup, Option<f64>>,
    pub counts: BTreeMap<Subgroup, usize>,
    pub overall: f64,
    pub worst_group: Option<f64>,
}

impl SubgroupAccuracyReport {
    /// Build from per-sample `(subgroup, correct)` outcomes.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (Subgroup, bool)>) -> Self {
        let mut hits = [0usize; 4];
        let mut totals = [0usize; 4];
        for (g, ok) in outcomes {
            totals[g.index()] += 1;
            hits[g.index()] += ok as usize;
        }
        let mut per_subgroup = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for g in Subgroup::ALL {
            let t = totals[g.index()];
            counts.insert(g, t);
            per_subgroup.insert(g, (t > 0).then(|| hits[g.index()] as f64 / t as f64));
        }
        let n: usize = totals.iter().sum();
        let overall = if n == 0 {
            0.0
        } else {
            hits.iter().sum::<usize>() as f64 / n as f64
        };
        let worst_group = per_subgroup.values().flatten().copied().reduce(f64::min);
        Self {
            per_subgroup,
            counts,
            overall,
            worst_group,
        }
    }

    pub fn accuracy(&self, g: Subgroup) -> Option<f64> {
        self.per_subgroup.get(&g).copied().flatten()
    }

    /// Lowest accuracy among the two minority subgroups.
    pub fn worst_minority(&self) -> Option<f64> {
        [Subgroup::MinS, Subgroup::MinH]
            .iter()
            .filter_map(|&g| self.accuracy(g))
            .reduce(f64::min)
    }

    pub fn mean_minority(&self) -> Option<f64> {
        let v: Vec<f64> = [Subgroup::MinS, Subgroup::MinH]
            .iter()
            .filter_map(|&g| self.accuracy(g))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epoch_losses: Vec<f64>,
    pub val_report: Option<SubgroupAccuracyReport>,
    pub selected_epoch: usize,
    pub final_group_weights: Option<[f64; 4]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    role: Role,
    arch: ConvNetArch,
    config: TrainConfig,
    metrics: TrainMetrics,
}

#[derive(Clone, Debug)]
pub struct PredictorCheckpoint {
    role: Role,
    net: ConvNet,
    config: TrainConfig,
    metrics: TrainMetrics,
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, in a form stable for large `|z|`.
pub fn bce_with_logit(z: f32, y: f32) -> f64 {
    let z = z as f64;
    z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p()
}

impl PredictorCheckpoint {
    /// Wrap an (untrained or externally trained) network.
    pub fn from_net(role: Role, net: ConvNet, config: TrainConfig) -> Self {
        Self {
            role,
            net,
            config,
            metrics: TrainMetrics {
                epoch_losses: Vec::new(),
                val_report: None,
                selected_epoch: 0,
                final_group_weights: None,
            },
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn metrics(&self) -> &TrainMetrics {
        &self.metrics
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn image_side(&self) -> usize {
        self.net.arch().image_side
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.params().save(&dir.join(PARAMS_FILE))?;
        let meta = CheckpointMeta {
            version: CHECKPOINT_VERSION,
            role: self.role,
            arch: self.net.arch().clone(),
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        };
        let path = dir.join(META_FILE);
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                meta.version
            )));
        }
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        Ok(Self {
            role: meta.role,
            net: ConvNet::with_params(meta.arch, params)?,
            config: meta.config,
            metrics: meta.metrics,
        })
    }

    pub fn logits(&self, pixels: &Tensor) -> Result<Vec<f32>> {
        self.net.logits(pixels)
    }

    /// Positive-label probabilities for a batch `[n, 1, s, s]`.
    pub fn predict_prob(&self, pixels: &Tensor) -> Result<Vec<f32>> {
        Ok(self.logits(pixels)?.into_iter().map(sigmoid).collect())
    }

    pub fn predict_one(&self, pixels: &[f32]) -> Result<f32> {
        let s = self.image_side();
        if pixels.len() != s * s {
            return Err(Error::Shape {
                expected: vec![s, s],
                got: vec![pixels.len()],
            });
        }
        let t = Tensor::from_vec(&[1, 1, s, s], pixels.to_vec())?;
        Ok(self.predict_prob(&t)?[0])
    }

    /// Hard 0.5-threshold decisions (`logit > 0`).
    pub fn predict_label(&self, pixels: &Tensor) -> Result<Vec<u8>> {
        Ok(self.logits(pixels)?.into_iter().map(|z| (z > 0.0) as u8).collect())
    }

    /// Gradient with respect to the pixels of `Σ_i weights[i] · BCE(p_i, targets[i])`.
    /// Also returns the per-image probabilities and unweighted BCE values.
    pub fn input_gradient(
        &self,
        pixels: &Tensor,
        targets: &[f32],
        weights: &[f32],
    ) -> Result<(Tensor, Vec<f32>, Vec<f64>)> {
        self.net.check_input(pixels)?;
        let n = pixels.shape()[0];
        if targets.len() != n || weights.len() != n {
            return Err(Error::validation("targets and weights must match the batch size"));
        }
        let mut g = Graph::new();
        let p = self.net.params().attach(&mut g, false);
        let x = g.leaf(pixels.clone());
        let out = self.net.forward(&mut g, &p, x);
        let logits = g.value(out).data().to_vec();
        let probs: Vec<f32> = logits.iter().map(|&z| sigmoid(z)).collect();
        let losses: Vec<f64> = logits
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .collect();
        let seed: Vec<f32> = probs
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&p, &y), &w)| w * (p - y))
            .collect();
        let mut grads = g.backward(out, Tensor::from_vec(&[n, 1], seed)?);
        let grad = grads.take(x).unwrap_or_else(|| Tensor::zeros(pixels.shape()));
        if !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} input gradient (max |logit| {:.3e})",
                self.role.as_str(),
                logits.iter().fold(0.0f32, |m, z| m.max(z.abs()))
            )));
        }
        Ok((grad, probs, losses))
    }

    /// Per-subgroup accuracy of this predictor's role label at threshold 0.5.
    pub fn evaluate_subgroups(&self, samples: &[ImageSample]) -> Result<SubgroupAccuracyReport> {
        let mut outcomes = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let preds = self.predict_label(&stack_pixels(chunk)?)?;
            outcomes.extend(
                chunk
                    .iter()
                    .zip(preds)
                    .map(|(s, p)| (s.subgroup, p == self.role.label(s))),
            );
        }
        Ok(SubgroupAccuracyReport::from_outcomes(outcomes))
    }
}

/// Standard average-loss training.
pub fn train_erm(config: &TrainConfig, data: &Dataset, role: Role) -> Result<PredictorCheckpoint> {
    let config = TrainConfig {
        objective: Objective::Erm,
        ..config.clone()
    };
    train(&config, &data.train, &data.val, role)
}

/// Online Group-DRO over the four subgroups.
pub fn train_group_dro(config: &TrainConfig, data: &Dataset, role: Role) -> Result<PredictorCheckpoint> {
    let config = TrainConfig {
        objective: Objective::GroupDro,
        ..config.clone()
    };
    train(&config, &data.train, &data.val, role)
}

/// Shared training loop. For Group-DRO each sample's loss is weighted by
/// `q_g / pi_g`, where `pi_g` is the training frequency of its group and `q`
/// starts at `pi`; batch-averaging then estimates `Σ_g q_g L_g`, and with a
/// vanishing step size the loop reduces to ERM.
pub fn train(
    config: &TrainConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    role: Role,
) -> Result<PredictorCheckpoint> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let side = config.arch.image_side;
    if let Some(s) = train.iter().find(|s| s.side != side) {
        return Err(Error::Shape {
            expected: vec![side, side],
            got: vec![s.side, s.side],
        });
    }
    let mut counts = [0usize; 4];
    for s in train {
        counts[s.subgroup.index()] += 1;
    }
    for g in Subgroup::ALL {
        if counts[g.index()] == 0 {
            log::warn!("{} training: subgroup {g} has no samples", role.as_str());
        }
    }
    let prior = GroupWeights::from_counts(counts);
    let mut q = prior.clone();

    let mut net = ConvNet::new(config.arch.clone(), config.rng_seed)?;
    let mut opt = AdamW::new(net.params(), config.learning_rate, config.weight_decay);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore, Option<SubgroupAccuracyReport>)> = None;
    let mut missing_streak = [0usize; 4];

    for epoch in 0..config.epochs {
        let order = epoch_order(
            train.len(),
            Some(config.rng_seed.wrapping_mul(1000).wrapping_add(epoch as u64)),
        );
        let mut loss_sum = 0.0f64;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = idx.iter().map(|&i| &train[i]).collect();
            let x = stack_pixels(batch.iter().copied())?;
            let labels: Vec<f32> = batch.iter().map(|s| role.label(s) as f32).collect();

            let mut g = Graph::new();
            let p = net.params().attach(&mut g, true);
            let xv = g.constant(x);
            let out = net.forward(&mut g, &p, xv);
            let logits = g.value(out).data().to_vec();
            let losses: Vec<f64> = logits
                .iter()
                .zip(&labels)
                .map(|(&z, &y)| bce_with_logit(z, y))
                .collect();
            if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{} training loss at epoch {epoch}, step {step}, sample {}",
                    role.as_str(),
                    batch[i].sample_id
                )));
            }
            let bsz = batch.len() as f32;
            let sample_weights: Vec<f32> = match config.objective {
                Objective::Erm => vec![1.0; batch.len()],
                Objective::GroupDro => {
                    let mut sums = [0.0f64; 4];
                    let mut ns = [0usize; 4];
                    for (s, l) in batch.iter().zip(&losses) {
                        sums[s.subgroup.index()] += l;
                        ns[s.subgroup.index()] += 1;
                    }
                    let group_losses: [Option<f64>; 4] =
                        std::array::from_fn(|k| (ns[k] > 0).then(|| sums[k] / ns[k] as f64));
                    for k in 0..4 {
                        if ns[k] == 0 && counts[k] > 0 {
                            missing_streak[k] += 1;
                            if missing_streak[k] == 20 {
                                log::warn!("group {} absent from 20 consecutive batches", Subgroup::ALL[k]);
                            }
                        } else {
                            missing_streak[k] = 0;
                        }
                    }
                    q.update(&group_losses, config.dro_eta);
                    batch
                        .iter()
                        .map(|s| (q.get(s.subgroup) / prior.get(s.subgroup)) as f32)
                        .collect()
                }
            };
            loss_sum += losses
                .iter()
                .zip(&sample_weights)
                .map(|(l, &w)| l * w as f64)
                .sum::<f64>();
            let seed: Vec<f32> = logits
                .iter()
                .zip(&labels)
                .zip(&sample_weights)
                .map(|((&z, &y), &w)| w * (sigmoid(z) - y) / bsz)
                .collect();
            let grads = g.backward(out, Tensor::from_vec(&[batch.len(), 1], seed)?);
            opt.step(net.params_mut(), &p, &grads);
        }
        epoch_losses.push(loss_sum / train.len() as f64);

        if config.early_stop != EarlyStop::None && !val.is_empty() {
            let ckpt = PredictorCheckpoint::from_net(role, net.clone(), config.clone());
            let report = ckpt.evaluate_subgroups(val)?;
            let score = match config.early_stop {
                EarlyStop::WorstGroup => report.worst_group.unwrap_or(0.0),
                _ => report.overall,
            };
            if best.as_ref().is_none_or(|(b, ..)| score > *b) {
                best = Some((score, epoch, net.params().clone(), Some(report)));
            }
        }
    }

    let (selected_epoch, val_report) = match best {
        Some((_, epoch, params, report)) => {
            *net.params_mut() = params;
            (epoch, report)
        }
        None => {
            let ckpt = PredictorCheckpoint::from_net(role, net.clone(), config.clone());
            let report = (!val.is_empty()).then(|| ckpt.evaluate_subgroups(val)).transpose()?;
            (config.epochs - 1, report)
        }
    };
    Ok(PredictorCheckpoint {
        role,
        net,
        config: config.clone(),
        metrics: TrainMetrics {
            epoch_losses,
            val_report,
            selected_epoch,
            final_group_weights: (config.objective == Objective::GroupDro).then(|| *q.weights()),
        },
    })
}
