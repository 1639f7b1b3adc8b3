//! Synthetic confounded image dataset.
//!
//! Every image carries a class label (healthy/diseased, realized as a bright
//! blob in a lower corner), an artifact label (a black dot at the center, or
//! randomly placed bars) and a nuisance attribute (background brightness).
//! The artifact co-occurs with the diseased class at `majority_ratio`, which
//! makes it a shortcut a classifier can latch onto.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio;
use crate::nn::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One of the four class × artifact cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subgroup {
    /// diseased with artifact
    #[serde(rename = "maj_S")]
    MajS,
    /// diseased without artifact
    #[serde(rename = "min_S")]
    MinS,
    /// healthy with artifact
    #[serde(rename = "min_H")]
    MinH,
    /// healthy without artifact
    #[serde(rename = "maj_H")]
    MajH,
}

impl Subgroup {
    pub const ALL: [Subgroup; 4] = [Subgroup::MajS, Subgroup::MinS, Subgroup::MinH, Subgroup::MajH];

    pub fn from_labels(class_label: u8, artifact_label: u8) -> Self {
        match (class_label != 0, artifact_label != 0) {
            (true, true) => Subgroup::MajS,
            (true, false) => Subgroup::MinS,
            (false, true) => Subgroup::MinH,
            (false, false) => Subgroup::MajH,
        }
    }

    pub fn class_label(self) -> u8 {
        matches!(self, Subgroup::MajS | Subgroup::MinS) as u8
    }

    pub fn artifact_label(self) -> u8 {
        matches!(self, Subgroup::MajS | Subgroup::MinH) as u8
    }

    pub fn is_majority(self) -> bool {
        matches!(self, Subgroup::MajS | Subgroup::MajH)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::MajS => "maj_S",
            Subgroup::MinS => "min_S",
            Subgroup::MinH => "min_H",
            Subgroup::MajH => "maj_H",
        }
    }
}

impl std::str::FromStr for Subgroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subgroup::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s) || format!("{g:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown subgroup {s:?}")))
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub side: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub class_label: u8,
    pub artifact_label: u8,
    pub nuisance_attr: u8,
    pub subgroup: Subgroup,
    pub split: Split,
}

impl ImageSample {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.side, self.side], self.pixels.clone()).expect("square image")
    }
}

/// Stack sample pixels into an `[n, 1, s, s]` batch.
pub fn stack_pixels<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<Tensor> {
    let mut side = None;
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        match side {
            None => side = Some(s.side),
            Some(prev) if prev != s.side => {
                return Err(Error::Shape {
                    expected: vec![prev, prev],
                    got: vec![s.side, s.side],
                })
            }
            _ => {}
        }
        data.extend_from_slice(&s.pixels);
        n += 1;
    }
    let side = side.ok_or_else(|| Error::validation("cannot stack zero samples"))?;
    Tensor::from_vec(&[n, 1, side, side], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArtifactSpec {
    /// Filled disk; `center` is `(row, col)` and defaults to `(s/2, s/2)`.
    Dot {
        radius: f32,
        #[serde(default)]
        center: Option<[f32; 2]>,
        intensity: f32,
    },
    /// Between `min_count` and `max_count` axis-aligned bars of random
    /// position, orientation and length in the upper two thirds of the image.
    Bars {
        min_count: usize,
        max_count: usize,
        min_len: usize,
        max_len: usize,
        thickness: usize,
        intensity: f32,
    },
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        ArtifactSpec::Dot {
            radius: 4.0,
            center: None,
            intensity: 0.0,
        }
    }
}

/// A concrete artifact placed on one image.
#[derive(Clone, Debug, PartialEq)]
pub enum ArtifactShape {
    Disk {
        center: [f32; 2],
        radius: f32,
        intensity: f32,
    },
    Bar {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        intensity: f32,
    },
}

impl ArtifactShape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        match *self {
            ArtifactShape::Disk { center, radius, .. } => {
                let dy = row as f32 - center[0];
                let dx = col as f32 - center[1];
                radius > 0.0 && dy * dy + dx * dx <= radius * radius
            }
            ArtifactShape::Bar {
                row: r0,
                col: c0,
                height,
                width,
                ..
            } => row >= r0 && row < r0 + height && col >= c0 && col < c0 + width,
        }
    }

    fn intensity(&self) -> f32 {
        match *self {
            ArtifactShape::Disk { intensity, .. } | ArtifactShape::Bar { intensity, .. } => intensity,
        }
    }

    fn check_bounds(&self, side: usize) -> Result<()> {
        let s = side as f32;
        match *self {
            ArtifactShape::Disk { center, radius, .. } => {
                if radius < 0.0
                    || center[0] - radius < 0.0
                    || center[1] - radius < 0.0
                    || center[0] + radius > s - 1.0
                    || center[1] + radius > s - 1.0
                {
                    return Err(Error::validation(format!(
                        "dot of radius {radius} at {center:?} does not fit a {side}x{side} image"
                    )));
                }
            }
            ArtifactShape::Bar {
                row,
                col,
                height,
                width,
                ..
            } => {
                if row + height > side || col + width > side {
                    return Err(Error::validation("bar exceeds image bounds"));
                }
            }
        }
        Ok(())
    }
}

impl ArtifactSpec {
    pub fn validate(&self, side: usize) -> Result<()> {
        match self {
            ArtifactSpec::Dot { radius, intensity, .. } => {
                if !(*radius >= 0.0 && *radius < side as f32 / 2.0) {
                    return Err(Error::validation(format!(
                        "dot radius {radius} must be in [0, {})",
                        side / 2
                    )));
                }
                check_unit(*intensity, "artifact intensity")?;
                self.realize(side, &mut ChaCha8Rng::seed_from_u64(0))[0].check_bounds(side)
            }
            ArtifactSpec::Bars {
                min_count,
                max_count,
                min_len,
                max_len,
                thickness,
                intensity,
            } => {
                if *min_count == 0 || min_count > max_count {
                    return Err(Error::validation("bar counts must satisfy 1 <= min <= max"));
                }
                if *min_len == 0 || min_len > max_len || *max_len > side * 2 / 3 || *thickness == 0 {
                    return Err(Error::validation("bar lengths must satisfy 1 <= min <= max <= 2s/3"));
                }
                check_unit(*intensity, "artifact intensity")
            }
        }
    }

    /// Concrete shapes for one image; dots ignore `rng`.
    pub fn realize(&self, side: usize, rng: &mut ChaCha8Rng) -> Vec<ArtifactShape> {
        match *self {
            ArtifactSpec::Dot {
                radius,
                center,
                intensity,
            } => {
                let c = center.unwrap_or([(side / 2) as f32; 2]);
                vec![ArtifactShape::Disk {
                    center: c,
                    radius,
                    intensity,
                }]
            }
            ArtifactSpec::Bars {
                min_count,
                max_count,
                min_len,
                max_len,
                thickness,
                intensity,
            } => {
                let n = rng.random_range(min_count..=max_count);
                let band = side * 2 / 3;
                (0..n)
                    .map(|_| {
                        let len = rng.random_range(min_len..=max_len);
                        let (height, width) = if rng.random_bool(0.5) {
                            (thickness, len)
                        } else {
                            (len, thickness)
                        };
                        ArtifactShape::Bar {
                            row: rng.random_range(0..=band.saturating_sub(height)),
                            col: rng.random_range(0..=side - width),
                            height,
                            width,
                            intensity,
                        }
                    })
                    .collect()
            }
        }
    }
}

fn check_unit(v: f32, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} {v} outside [0, 1]")))
    }
}

/// Return a copy of `pixels` with the artifact region set to its intensity.
pub fn inject_artifact(pixels: &[f32], side: usize, shapes: &[ArtifactShape]) -> Result<Vec<f32>> {
    if pixels.len() != side * side {
        return Err(Error::Shape {
            expected: vec![side * side],
            got: vec![pixels.len()],
        });
    }
    for s in shapes {
        s.check_bounds(side)?;
    }
    let mut out = pixels.to_vec();
    for shape in shapes {
        for r in 0..side {
            for c in 0..side {
                if shape.contains(r, c) {
                    out[r * side + c] = shape.intensity();
                }
            }
        }
    }
    Ok(out)
}

/// Mean intensity inside the (fixed) dot region, used as a pixel-level
/// artifact oracle. `None` for bar artifacts, whose region varies.
pub fn dot_region_mean(pixels: &[f32], side: usize, spec: &ArtifactSpec) -> Option<f32> {
    let ArtifactSpec::Dot { .. } = spec else {
        return None;
    };
    let shape = &spec.realize(side, &mut ChaCha8Rng::seed_from_u64(0))[0];
    let (mut sum, mut n) = (0.0f32, 0usize);
    for r in 0..side {
        for c in 0..side {
            if shape.contains(r, c) {
                sum += pixels[r * side + c];
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f32)
}

/// Bright Gaussian blob in one of the two lower corners of the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologySpec {
    pub amplitude: [f32; 2],
    pub sigma: [f32; 2],
    /// Blob centers lie below this fraction of the image height.
    pub top_fraction: f32,
    /// Blob centers lie within this fraction of the width from either side.
    pub corner_fraction: f32,
}

impl Default for PathologySpec {
    fn default() -> Self {
        Self {
            amplitude: [0.2, 0.35],
            sigma: [1.5, 2.5],
            top_fraction: 0.7,
            corner_fraction: 0.34,
        }
    }
}

/// Two-level background brightness standing in for a patient attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpec {
    pub base_level: f32,
    pub offset: f32,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            base_level: 0.5,
            offset: 0.08,
        }
    }
}

/// Subject-level variation: smooth low-frequency bumps, bright distractor
/// specks in the upper part of the image, and per-pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub bumps: usize,
    pub bump_amplitude: f32,
    pub bump_sigma: [f32; 2],
    pub distractors: usize,
    pub distractor_amplitude: [f32; 2],
    pub pixel_noise: f32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            bumps: 3,
            bump_amplitude: 0.04,
            bump_sigma: [6.0, 10.0],
            distractors: 2,
            distractor_amplitude: [0.15, 0.3],
            pixel_noise: 0.015,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub side_length: usize,
    /// Samples per class summed over all splits.
    pub n_per_class: usize,
    pub majority_ratio: f64,
    pub split_fractions: [f64; 3],
    /// Equal subgroup counts per class in the test split.
    pub balanced_test: bool,
    pub artifact: ArtifactSpec,
    pub pathology: PathologySpec,
    pub nuisance: NuisanceSpec,
    pub texture: TextureSpec,
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            side_length: 32,
            n_per_class: 1000,
            majority_ratio: 0.9,
            split_fractions: [0.70, 0.15, 0.15],
            balanced_test: true,
            artifact: ArtifactSpec::default(),
            pathology: PathologySpec::default(),
            nuisance: NuisanceSpec::default(),
            texture: TextureSpec::default(),
            rng_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.side_length;
        if s < 8 {
            return Err(Error::validation("side length must be at least 8"));
        }
        if !(self.majority_ratio >= 0.5 && self.majority_ratio < 1.0) {
            return Err(Error::validation(format!(
                "majority ratio {} must be in [0.5, 1)",
                self.majority_ratio
            )));
        }
        if self.split_fractions.iter().any(|f| *f < 0.0)
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::validation("split fractions must be nonnegative and sum to 1"));
        }
        if self.n_per_class == 0 {
            return Err(Error::validation("n_per_class must be positive"));
        }
        self.artifact.validate(s)?;
        let p = &self.pathology;
        if !(p.amplitude[0] > 0.0 && p.amplitude[0] <= p.amplitude[1])
            || !(p.sigma[0] > 0.0 && p.sigma[0] <= p.sigma[1])
            || !(0.5..1.0).contains(&p.top_fraction)
            || !(p.corner_fraction > 0.0 && p.corner_fraction <= 0.5)
        {
            return Err(Error::validation("invalid pathology spec"));
        }
        let n = &self.nuisance;
        check_unit(n.base_level - n.offset, "nuisance low level")?;
        check_unit(n.base_level + n.offset, "nuisance high level")?;
        let t = &self.texture;
        if t.bump_sigma[0] <= 0.0 || t.bump_sigma[0] > t.bump_sigma[1] || t.pixel_noise < 0.0 {
            return Err(Error::validation("invalid texture spec"));
        }
        if t.distractor_amplitude[0] > t.distractor_amplitude[1] {
            return Err(Error::validation("invalid distractor amplitude range"));
        }
        Ok(())
    }

    /// Per-split, per-subgroup sample counts implied by the spec.
    pub fn planned_counts(&self) -> BTreeMap<Split, BTreeMap<Subgroup, usize>> {
        let n = self.n_per_class;
        let train = (n as f64 * self.split_fractions[0]).round() as usize;
        let val = ((n as f64 * self.split_fractions[1]).round() as usize).min(n - train);
        let test = n - train - val;
        let mut out = BTreeMap::new();
        for (split, per_class) in [(Split::Train, train), (Split::Val, val), (Split::Test, test)] {
            let major = if split == Split::Test && self.balanced_test {
                per_class.div_ceil(2)
            } else {
                (per_class as f64 * self.majority_ratio).round() as usize
            };
            let minor = per_class - major;
            let counts = BTreeMap::from([
                (Subgroup::MajS, major),
                (Subgroup::MinS, minor),
                (Subgroup::MinH, minor),
                (Subgroup::MajH, major),
            ]);
            out.insert(split, counts);
        }
        out
    }
}

fn gaussian_bump(img: &mut [f32], side: usize, cy: f32, cx: f32, sigma: f32, amp: f32) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..side {
        let dy = r as f32 - cy;
        for c in 0..side {
            let dx = c as f32 - cx;
            img[r * side + c] += amp * (-(dy * dy + dx * dx) * inv).exp();
        }
    }
}

/// Rows and columns whose pixels can carry the pathology blob.
pub fn pathology_region(spec: &PathologySpec, side: usize) -> (std::ops::Range<usize>, [std::ops::Range<usize>; 2]) {
    let top = (spec.top_fraction * side as f32).floor() as usize;
    let corner = (spec.corner_fraction * side as f32).ceil() as usize;
    (top..side, [0..corner, side - corner..side])
}

/// Render one image; the result is quantized to 8 bits so that in-memory and
/// on-disk samples are identical.
pub fn render_image(
    spec: &DatasetSpec,
    class_label: u8,
    artifact_label: u8,
    nuisance_attr: u8,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let s = spec.side_length;
    let sf = s as f32;
    let level = spec.nuisance.base_level
        + if nuisance_attr != 0 {
            spec.nuisance.offset
        } else {
            -spec.nuisance.offset
        };
    let mut img = vec![level; s * s];
    let t = &spec.texture;
    for _ in 0..t.bumps {
        let cy = rng.random_range(0.0..sf);
        let cx = rng.random_range(0.0..sf);
        let sigma = rng.random_range(t.bump_sigma[0]..=t.bump_sigma[1]);
        let amp = rng.random_range(-t.bump_amplitude..=t.bump_amplitude);
        gaussian_bump(&mut img, s, cy, cx, sigma, amp);
    }
    let p = &spec.pathology;
    let top = p.top_fraction * sf;
    for _ in 0..t.distractors {
        let cy = rng.random_range(2.0..(top - 4.0).max(2.5));
        let cx = rng.random_range(2.0..sf - 3.0);
        let amp = rng.random_range(t.distractor_amplitude[0]..=t.distractor_amplitude[1]);
        let sigma = rng.random_range(p.sigma[0]..=p.sigma[1]);
        gaussian_bump(&mut img, s, cy, cx, sigma, amp);
    }
    if class_label != 0 {
        let amp = rng.random_range(p.amplitude[0]..=p.amplitude[1]);
        let sigma = rng.random_range(p.sigma[0]..=p.sigma[1]);
        let cy = rng.random_range(top + 1.0..=sf - 3.0);
        let band = p.corner_fraction * sf;
        let cx = if rng.random_bool(0.5) {
            rng.random_range(2.0..=band - 1.0)
        } else {
            rng.random_range(sf - band..=sf - 3.0)
        };
        gaussian_bump(&mut img, s, cy, cx, sigma, amp);
    }
    if t.pixel_noise > 0.0 {
        for v in img.iter_mut() {
            let z: f32 = StandardNormal.sample(rng);
            *v += t.pixel_noise * z;
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    if artifact_label != 0 {
        let shapes = spec.artifact.realize(s, rng);
        img = inject_artifact(&img, s, &shapes)?;
    }
    imageio::quantize(&mut img);
    Ok(img)
}

/// Pixel-level pathology oracle: peak 3×3 mean in the blob region above the
/// median of the lower band.
pub fn pathology_response(pixels: &[f32], side: usize, spec: &PathologySpec) -> f32 {
    let (rows, cols) = pathology_region(spec, side);
    let mut band: Vec<f32> = rows
        .clone()
        .flat_map(|r| (0..side).map(move |c| pixels[r * side + c]))
        .collect();
    band.sort_by(f32::total_cmp);
    let median = band[band.len() / 2];
    let mut best = f32::NEG_INFINITY;
    for r in rows.start + 1..rows.end - 1 {
        for range in &cols {
            for c in range.start.max(1)..range.end.min(side - 1) {
                let mut acc = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        acc += pixels[(r + dr - 1) * side + c + dc - 1];
                    }
                }
                best = best.max(acc / 9.0 - median);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub sample_id: String,
    pub split: Split,
    pub subgroup: Subgroup,
    pub class_label: u8,
    pub artifact_label: u8,
    pub nuisance_attr: u8,
    /// Relative to the manifest directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub counts: BTreeMap<Split, BTreeMap<Subgroup, usize>>,
    pub files: Vec<FileEntry>,
    pub checksum: String,
    #[serde(skip)]
    pub root: PathBuf,
}

fn sample_seed(base: u64, split: Split, subgroup: Subgroup, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update([split as u8, subgroup as u8]);
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// Checksum over spec, entries and file contents.
fn compute_checksum(spec: &DatasetSpec, files: &[FileEntry], root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec)?);
    for f in files {
        h.update(serde_json::to_vec(f)?);
        let path = root.join(&f.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::Load {
            sample_id: f.sample_id.clone(),
            reason: format!("{}: {e}", path.display()),
        })?;
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

/// Generate every sample, write PNGs under `out_dir/<split>/<subgroup>/` and
/// `out_dir/manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let counts = spec.planned_counts();
    let mut files = Vec::new();
    for (&split, groups) in &counts {
        for (&subgroup, &count) in groups {
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.rng_seed, split, subgroup, i));
                let nuisance = rng.random_bool(0.5) as u8;
                let class_label = subgroup.class_label();
                let artifact_label = subgroup.artifact_label();
                let pixels = render_image(spec, class_label, artifact_label, nuisance, &mut rng)?;
                let sample_id = format!("{split}_{subgroup}_{i:05}");
                let rel = format!("{split}/{subgroup}/{sample_id}.png");
                imageio::write_gray(&out_dir.join(&rel), spec.side_length, &pixels)?;
                files.push(FileEntry {
                    sample_id,
                    split,
                    subgroup,
                    class_label,
                    artifact_label,
                    nuisance_attr: nuisance,
                    path: rel,
                });
            }
        }
    }
    let checksum = compute_checksum(spec, &files, out_dir)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        counts,
        files,
        checksum,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Load `manifest.json` from a dataset directory (or the file itself).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::validation(format!("unsupported manifest version {}", m.version)));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Recompute counts and checksum against the files on disk.
    pub fn verify(&self) -> Result<()> {
        let mut counts: BTreeMap<Split, BTreeMap<Subgroup, usize>> = BTreeMap::new();
        for f in &self.files {
            if Subgroup::from_labels(f.class_label, f.artifact_label) != f.subgroup {
                return Err(Error::validation(format!(
                    "{}: subgroup disagrees with labels",
                    f.sample_id
                )));
            }
            *counts.entry(f.split).or_default().entry(f.subgroup).or_default() += 1;
        }
        for (split, groups) in &self.counts {
            for (sg, &n) in groups {
                let got = counts.get(split).and_then(|g| g.get(sg)).copied().unwrap_or(0);
                if got != n {
                    return Err(Error::validation(format!(
                        "{split}/{sg}: manifest count {n}, files {got}"
                    )));
                }
            }
        }
        let checksum = compute_checksum(&self.spec, &self.files, &self.root)?;
        if checksum != self.checksum {
            return Err(Error::validation("dataset checksum mismatch"));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.spec.side_length
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &FileEntry> {
        self.files.iter().filter(move |f| f.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.entries(split).next().is_some()
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<ImageSample>> {
        load_entries(&self.root, self.entries(split), self.side())
    }

    pub fn load_all(&self) -> Result<Dataset> {
        Ok(Dataset {
            side: self.side(),
            train: self.load_samples(Split::Train)?,
            val: self.load_samples(Split::Val)?,
            test: self.load_samples(Split::Test)?,
        })
    }

    /// Batches over one split, shuffled deterministically when a seed is given.
    pub fn load_split(&self, split: Split, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
        if !self.has_split(split) {
            return Err(Error::validation(format!("split {split} is empty in manifest")));
        }
        let samples = self.load_samples(split)?;
        make_batches(&samples, batch_size, shuffle_seed)
    }
}

pub(crate) fn load_entries<'a>(
    root: &Path,
    entries: impl Iterator<Item = &'a FileEntry>,
    side: usize,
) -> Result<Vec<ImageSample>> {
    entries
        .map(|f| {
            let (s, pixels) = imageio::read_gray(&root.join(&f.path)).map_err(|e| Error::Load {
                sample_id: f.sample_id.clone(),
                reason: e.to_string(),
            })?;
            if s != side {
                return Err(Error::Load {
                    sample_id: f.sample_id.clone(),
                    reason: format!("expected side {side}, found {s}"),
                });
            }
            Ok(ImageSample {
                sample_id: f.sample_id.clone(),
                side,
                pixels,
                class_label: f.class_label,
                artifact_label: f.artifact_label,
                nuisance_attr: f.nuisance_attr,
                subgroup: f.subgroup,
                split: f.split,
            })
        })
        .collect()
}

/// All three splits in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub side: usize,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub pixels: Tensor,
    pub sample_ids: Vec<String>,
    pub class_labels: Vec<u8>,
    pub artifact_labels: Vec<u8>,
    pub nuisance_attrs: Vec<u8>,
    pub subgroups: Vec<Subgroup>,
}

/// Sample order for one epoch: identity, or a seeded Fisher-Yates shuffle.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

pub fn make_batches(samples: &[ImageSample], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let order = epoch_order(samples.len(), shuffle_seed);
    order
        .chunks(batch_size)
        .map(|idx| {
            let picked: Vec<&ImageSample> = idx.iter().map(|&i| &samples[i]).collect();
            Ok(Batch {
                pixels: stack_pixels(picked.iter().copied())?,
                sample_ids: picked.iter().map(|s| s.sample_id.clone()).collect(),
                class_labels: picked.iter().map(|s| s.class_label).collect(),
                artifact_labels: picked.iter().map(|s| s.artifact_label).collect(),
                nuisance_attrs: picked.iter().map(|s| s.nuisance_attr).collect(),
                subgroups: picked.iter().map(|s| s.subgroup).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_per_class: 60,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn subgroup_is_a_function_of_labels() {
        for sg in Subgroup::ALL {
            assert_eq!(Subgroup::from_labels(sg.class_label(), sg.artifact_label()), sg);
        }
        assert_eq!(Subgroup::from_labels(1, 1), Subgroup::MajS);
        assert_eq!(Subgroup::from_labels(1, 0), Subgroup::MinS);
        assert_eq!(Subgroup::from_labels(0, 1), Subgroup::MinH);
        assert_eq!(Subgroup::from_labels(0, 0), Subgroup::MajH);
    }

    #[test]
    fn zero_radius_dot_changes_nothing() {
        let px: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let spec = ArtifactSpec::Dot {
            radius: 0.0,
            center: None,
            intensity: 0.0,
        };
        let shapes = spec.realize(8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(inject_artifact(&px, 8, &shapes).unwrap(), px);
    }

    #[test]
    fn dot_matches_brute_force_distance_scan() {
        let side = 32;
        let white = vec![1.0; side * side];
        let spec = ArtifactSpec::Dot {
            radius: 4.0,
            center: None,
            intensity: 0.0,
        };
        let shapes = spec.realize(side, &mut ChaCha8Rng::seed_from_u64(0));
        let out = inject_artifact(&white, side, &shapes).unwrap();
        let mut expected = 0;
        for r in 0..side {
            for c in 0..side {
                let d2 = (r as i64 - 16).pow(2) + (c as i64 - 16).pow(2);
                let inside = d2 <= 16;
                expected += inside as usize;
                assert_eq!(out[r * side + c], if inside { 0.0 } else { 1.0 }, "pixel {r},{c}");
            }
        }
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), expected);
        assert_eq!(expected, 49);
        // idempotent
        assert_eq!(inject_artifact(&out, side, &shapes).unwrap(), out);
    }

    #[test]
    fn out_of_bounds_artifact_is_rejected() {
        let shape = ArtifactShape::Disk {
            center: [2.0, 16.0],
            radius: 4.0,
            intensity: 0.0,
        };
        assert!(matches!(
            inject_artifact(&vec![0.5; 1024], 32, &[shape]),
            Err(Error::Validation(_))
        ));
        let spec = DatasetSpec {
            artifact: ArtifactSpec::Dot {
                radius: 16.0,
                center: None,
                intensity: 0.0,
            },
            ..DatasetSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = DatasetSpec {
            majority_ratio: 1.0,
            ..DatasetSpec::default()
        };
        assert!(s.validate().is_err());
        s.majority_ratio = 0.9;
        s.split_fractions = [0.7, 0.2, 0.2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn planned_counts_follow_ratio_and_balance() {
        let spec = DatasetSpec::default();
        let c = spec.planned_counts();
        assert_eq!(c[&Split::Train][&Subgroup::MajS], 630);
        assert_eq!(c[&Split::Train][&Subgroup::MinS], 70);
        assert_eq!(c[&Split::Val][&Subgroup::MajH], 135);
        assert_eq!(c[&Split::Test][&Subgroup::MajS], 75);
        assert_eq!(c[&Split::Test][&Subgroup::MinS], 75);

        let even = DatasetSpec {
            majority_ratio: 0.5,
            balanced_test: false,
            ..DatasetSpec::default()
        };
        for groups in even.planned_counts().values() {
            let v: BTreeSet<usize> = groups.values().copied().collect();
            assert_eq!(v.len(), 1, "{groups:?}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_labels_match_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let a = generate_dataset(&spec, &dir.path().join("a")).unwrap();
        let b = generate_dataset(&spec, &dir.path().join("b")).unwrap();
        assert_eq!(a.checksum, b.checksum);
        let ja = std::fs::read(a.path()).unwrap();
        let jb = std::fs::read(b.path()).unwrap();
        assert_eq!(ja, jb);
        a.verify().unwrap();

        let reloaded = DatasetManifest::load(&dir.path().join("a")).unwrap();
        assert_eq!(reloaded.files, a.files);
        let data = reloaded.load_all().unwrap();
        let spec = &reloaded.spec;
        for s in data.train.iter().chain(&data.val).chain(&data.test) {
            assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let dot = dot_region_mean(&s.pixels, s.side, &spec.artifact).unwrap();
            assert_eq!(dot < 0.1, s.artifact_label == 1, "{} dot mean {dot}", s.sample_id);
            let blob = pathology_response(&s.pixels, s.side, &spec.pathology);
            assert_eq!(blob > 0.06, s.class_label == 1, "{} blob response {blob}", s.sample_id);
        }

        let other = DatasetSpec {
            rng_seed: 1,
            ..small_spec()
        };
        let c = generate_dataset(&other, &dir.path().join("c")).unwrap();
        assert_ne!(c.checksum, a.checksum);
    }

    #[test]
    fn splits_are_disjoint_and_cover_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_spec(), dir.path()).unwrap();
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for e in m.entries(split) {
                assert!(seen.insert(e.sample_id.clone()));
            }
        }
        assert_eq!(seen.len(), m.files.len());
    }

    #[test]
    fn batches_partition_the_split() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_per_class: 72,
            split_fractions: [0.70, 0.15, 0.15],
            ..DatasetSpec::default()
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();
        let n = m.entries(Split::Train).count();
        assert_eq!(n, 100);
        let batches = m.load_split(Split::Train, 32, Some(9)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.sample_ids.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let again = m.load_split(Split::Train, 32, Some(9)).unwrap();
        let ids = |bs: &[Batch]| bs.iter().flat_map(|b| b.sample_ids.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&batches), ids(&again));
        let yielded: BTreeSet<String> = ids(&batches).into_iter().collect();
        let expected: BTreeSet<String> = m.entries(Split::Train).map(|e| e.sample_id.clone()).collect();
        assert_eq!(yielded, expected);
        assert_ne!(ids(&batches), ids(&m.load_split(Split::Train, 32, None).unwrap()));
    }

    #[test]
    fn missing_file_error_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_spec(), dir.path()).unwrap();
        let victim = m.entries(Split::Val).next().unwrap().clone();
        std::fs::remove_file(dir.path().join(&victim.path)).unwrap();
        match m.load_samples(Split::Val) {
            Err(Error::Load { sample_id, .. }) => assert_eq!(sample_id, victim.sample_id),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn bars_artifact_varies_between_samples() {
        let spec = ArtifactSpec::Bars {
            min_count: 1,
            max_count: 3,
            min_len: 4,
            max_len: 12,
            thickness: 2,
            intensity: 1.0,
        };
        spec.validate(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = spec.realize(32, &mut rng);
        let b = spec.realize(32, &mut rng);
        assert_ne!(a, b);
        let img = inject_artifact(&vec![0.5; 1024], 32, &a).unwrap();
        assert!(img.contains(&1.0));
    }
}
