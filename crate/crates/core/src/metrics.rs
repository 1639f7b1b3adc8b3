//! Counterfactual quality metrics and their report formats.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Subgroup;
use crate::error::{Error, Result};
use crate::guidance::CounterfactualRecord;
use crate::nn::Tensor;
use crate::predictors::PredictorCheckpoint;

/// Mean absolute pixel difference.
pub fn l1_distance(factual: &[f32], counterfactual: &[f32]) -> Result<f64> {
    if factual.len() != counterfactual.len() {
        return Err(Error::Shape {
            expected: vec![factual.len()],
            got: vec![counterfactual.len()],
        });
    }
    if factual.is_empty() {
        return Err(Error::validation("empty images"));
    }
    Ok(factual
        .iter()
        .zip(counterfactual)
        .map(|(a, b)| (a - b).abs() as f64)
        .sum::<f64>()
        / factual.len() as f64)
}

fn prob_pair(p: &PredictorCheckpoint, factual: &[f32], counterfactual: &[f32]) -> Result<(f32, f32)> {
    Ok((p.predict_one(factual)?, p.predict_one(counterfactual)?))
}

/// Classifier probability change `|C(F) - C(CF)|`.
pub fn cpg(classifier: &PredictorCheckpoint, factual: &[f32], counterfactual: &[f32]) -> Result<f64> {
    let (a, b) = prob_pair(classifier, factual, counterfactual)?;
    Ok((a - b).abs() as f64)
}

/// Detector probability change `|D(F) - D(CF)|`; low means the artifact was kept.
pub fn scls(detector: &PredictorCheckpoint, factual: &[f32], counterfactual: &[f32]) -> Result<f64> {
    let (a, b) = prob_pair(detector, factual, counterfactual)?;
    Ok((a - b).abs() as f64)
}

/// Probabilities of every model on both images of each record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub factual_id: String,
    pub subgroup: Subgroup,
    pub l1: f64,
    pub classifier: (f32, f32),
    pub detector: (f32, f32),
    pub probe: Option<(f32, f32)>,
}

impl PairScores {
    pub fn classifier_flipped(&self) -> bool {
        (self.classifier.0 > 0.5) != (self.classifier.1 > 0.5)
    }

    pub fn detector_flipped(&self) -> bool {
        (self.detector.0 > 0.5) != (self.detector.1 > 0.5)
    }

    pub fn cpg(&self) -> f64 {
        (self.classifier.0 - self.classifier.1).abs() as f64
    }

    pub fn scls(&self) -> f64 {
        (self.detector.0 - self.detector.1).abs() as f64
    }

    pub fn attr_diff(&self) -> Option<f64> {
        self.probe.map(|(a, b)| (a - b).abs() as f64)
    }
}

fn probs(p: &PredictorCheckpoint, records: &[CounterfactualRecord], cf: bool) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let side = chunk[0].side;
        let data: Vec<f32> = chunk
            .iter()
            .flat_map(|r| if cf { r.counterfactual.iter() } else { r.factual.iter() }.copied())
            .collect();
        let t = Tensor::from_vec(&[chunk.len(), 1, side, side], data)?;
        out.extend(p.predict_prob(&t)?);
    }
    Ok(out)
}

/// Score every record with the given models.
pub fn score_records(
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    probe: Option<&PredictorCheckpoint>,
    records: &[CounterfactualRecord],
) -> Result<Vec<PairScores>> {
    if records.is_empty() {
        return Err(Error::validation("no counterfactual records"));
    }
    let both = |p: &PredictorCheckpoint| -> Result<(Vec<f32>, Vec<f32>)> {
        Ok((probs(p, records, false)?, probs(p, records, true)?))
    };
    let (cf, ccf) = both(classifier)?;
    let (df, dcf) = both(detector)?;
    let g = probe.map(both).transpose()?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let l1 = l1_distance(&r.factual, &r.counterfactual).map_err(|e| Error::Load {
                sample_id: r.factual_id.clone(),
                reason: e.to_string(),
            })?;
            Ok(PairScores {
                factual_id: r.factual_id.clone(),
                subgroup: r.subgroup,
                l1,
                classifier: (cf[i], ccf[i]),
                detector: (df[i], dcf[i]),
                probe: g.as_ref().map(|(a, b)| (a[i], b[i])),
            })
        })
        .collect()
}

/// Fraction of records whose thresholded classifier decision changed.
pub fn cfr(classifier: &PredictorCheckpoint, records: &[CounterfactualRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("no counterfactual records"));
    }
    let (a, b) = (probs(classifier, records, false)?, probs(classifier, records, true)?);
    Ok(flip_rate(&a, &b))
}

/// Fraction of records whose thresholded detector decision is unchanged.
pub fn drr(detector: &PredictorCheckpoint, records: &[CounterfactualRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("no counterfactual records"));
    }
    let (a, b) = (probs(detector, records, false)?, probs(detector, records, true)?);
    let kept = a.iter().zip(&b).filter(|(x, y)| (**x > 0.5) == (**y > 0.5)).count();
    Ok(kept as f64 / a.len() as f64)
}

fn flip_rate(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| (**x > 0.5) != (**y > 0.5)).count() as f64 / a.len() as f64
}

/// Mean `|G(F) - G(CF)|` of the attribute probe.
pub fn attribute_preservation(probe: &PredictorCheckpoint, records: &[CounterfactualRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("no counterfactual records"));
    }
    let (a, b) = (probs(probe, records, false)?, probs(probe, records, true)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub n: usize,
    pub cfr: f64,
    pub drr: f64,
    pub l1_mean: f64,
    pub cpg_mean: f64,
    pub scls_mean: f64,
    pub attr_pres_mean: Option<f64>,
}

/// Aggregate report; serialized with exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n: usize,
    pub cfr: f64,
    pub drr: f64,
    pub l1_mean: f64,
    pub cpg_mean: f64,
    pub scls_mean: f64,
    pub attr_pres_mean: Option<f64>,
    pub per_subgroup: BTreeMap<Subgroup, SliceMetrics>,
}

/// Aggregate scores. Records are ordered by id first, so the result does not
/// depend on input order.
pub fn aggregate(scores: &[PairScores]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::validation("no counterfactual records"));
    }
    let mut sorted: Vec<&PairScores> = scores.iter().collect();
    sorted.sort_by(|a, b| a.factual_id.cmp(&b.factual_id));
    let all = slice(&sorted);
    let mut per_subgroup = BTreeMap::new();
    for g in Subgroup::ALL {
        let part: Vec<&PairScores> = sorted.iter().copied().filter(|s| s.subgroup == g).collect();
        if !part.is_empty() {
            per_subgroup.insert(g, slice(&part));
        }
    }
    Ok(MetricsReport {
        n: all.n,
        cfr: all.cfr,
        drr: all.drr,
        l1_mean: all.l1_mean,
        cpg_mean: all.cpg_mean,
        scls_mean: all.scls_mean,
        attr_pres_mean: all.attr_pres_mean,
        per_subgroup,
    })
}

fn slice(scores: &[&PairScores]) -> SliceMetrics {
    let n = scores.len();
    let mean = |f: &dyn Fn(&PairScores) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n as f64;
    let attr: Option<Vec<f64>> = scores.iter().map(|s| s.attr_diff()).collect();
    SliceMetrics {
        n,
        cfr: scores.iter().filter(|s| s.classifier_flipped()).count() as f64 / n as f64,
        drr: scores.iter().filter(|s| !s.detector_flipped()).count() as f64 / n as f64,
        l1_mean: mean(&|s| s.l1),
        cpg_mean: mean(&|s| s.cpg()),
        scls_mean: mean(&|s| s.scls()),
        attr_pres_mean: attr.map(|v| v.iter().sum::<f64>() / n as f64),
    }
}

/// Score and aggregate in one call.
pub fn metrics_report(
    classifier: &PredictorCheckpoint,
    detector: &PredictorCheckpoint,
    probe: Option<&PredictorCheckpoint>,
    records: &[CounterfactualRecord],
) -> Result<MetricsReport> {
    aggregate(&score_records(classifier, detector, probe, records)?)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

impl MetricsReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Header plus one row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["n", "cfr", "drr", "l1_mean", "cpg_mean", "scls_mean", "attr_pres_mean"])
            .map_err(|e| csv_err(path, e))?;
        w.write_record([
            self.n.to_string(),
            self.cfr.to_string(),
            self.drr.to_string(),
            self.l1_mean.to_string(),
            self.cpg_mean.to_string(),
            self.scls_mean.to_string(),
            self.attr_pres_mean.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Side-by-side table, one row per labelled report, columns CFR, DRR, L1, CPG, SCLS.
pub fn save_comparison_csv(path: &Path, rows: &[(&str, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["method", "CFR", "DRR", "L1", "CPG", "SCLS"])
        .map_err(|e| csv_err(path, e))?;
    for (name, r) in rows {
        w.write_record([
            name.to_string(),
            r.cfr.to_string(),
            r.drr.to_string(),
            r.l1_mean.to_string(),
            r.cpg_mean.to_string(),
            r.scls_mean.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Area under the ROC curve of `scores` against binary `labels`, with tied
/// scores counted as half.
pub fn roc_auc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over ties (1-based).
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("AUC needs both classes"));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l != 0).map(|(r, _)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(id: &str, g: Subgroup, c: (f32, f32), d: (f32, f32), l1: f64) -> PairScores {
        PairScores {
            factual_id: id.into(),
            subgroup: g,
            l1,
            classifier: c,
            detector: d,
            probe: Some((0.5, 0.5)),
        }
    }

    #[test]
    fn l1_extremes() {
        assert_eq!(l1_distance(&[0.3; 9], &[0.3; 9]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[0.0; 9], &[1.0; 9]).unwrap(), 1.0);
        assert!(l1_distance(&[0.0; 9], &[1.0; 8]).is_err());
    }

    #[test]
    fn hand_counted_rates() {
        let s = vec![
            scores("a", Subgroup::MajS, (0.9, 0.1), (0.9, 0.8), 0.1),
            scores("b", Subgroup::MajS, (0.9, 0.2), (0.9, 0.1), 0.1),
            scores("c", Subgroup::MajH, (0.1, 0.4), (0.1, 0.2), 0.1),
            scores("d", Subgroup::MajH, (0.1, 0.4), (0.1, 0.3), 0.1),
        ];
        let r = aggregate(&s).unwrap();
        assert_eq!(r.cfr, 0.5);
        assert_eq!(r.drr, 0.75);
        let s2: Vec<PairScores> = s
            .iter()
            .map(|p| PairScores {
                classifier: (0.9, if p.factual_id == "d" { 0.95 } else { 0.1 }),
                ..p.clone()
            })
            .collect();
        assert_eq!(aggregate(&s2).unwrap().cfr, 0.75);
        let one = scores("x", Subgroup::MinS, (0.9, 0.2), (0.95, 0.10), 0.0);
        assert!((one.cpg() - 0.7).abs() < 1e-6);
        assert!((one.scls() - 0.85).abs() < 1e-6);
        let probe = [(0.9f32, 0.7f32), (0.2, 0.3)];
        let mean: f64 = probe.iter().map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 2.0;
        assert!((mean - 0.15).abs() < 1e-6);
    }

    #[test]
    fn identity_batch_is_exactly_trivial() {
        let s: Vec<PairScores> = (0..5)
            .map(|i| {
                scores(
                    &format!("r{i}"),
                    Subgroup::ALL[i % 4],
                    (0.3 + 0.1 * i as f32, 0.3 + 0.1 * i as f32),
                    (0.8, 0.8),
                    0.0,
                )
            })
            .collect();
        let r = aggregate(&s).unwrap();
        assert_eq!(
            (r.cfr, r.drr, r.l1_mean, r.cpg_mean, r.scls_mean),
            (0.0, 1.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(r.attr_pres_mean, Some(0.0));
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert!(roc_auc(&[0.1, 0.9], &[1, 1]).is_err());
    }

    fn arb_scores() -> impl Strategy<Value = Vec<PairScores>> {
        prop::collection::vec(
            (
                0usize..4,
                0.0f32..1.0,
                0.0f32..1.0,
                0.0f32..1.0,
                0.0f32..1.0,
                0.0f64..1.0,
                0.0f32..1.0,
                0.0f32..1.0,
            ),
            1..40,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (g, a, b, c, d, l1, e, f))| PairScores {
                    factual_id: format!("s{i:03}"),
                    subgroup: Subgroup::ALL[g],
                    l1,
                    classifier: (a, b),
                    detector: (c, d),
                    probe: Some((e, f)),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn aggregate_matches_recomputation(s in arb_scores(), rot in 0usize..40) {
            let r = aggregate(&s).unwrap();
            let n = s.len() as f64;
            let flips = s.iter().filter(|p| (p.classifier.0 > 0.5) != (p.classifier.1 > 0.5)).count() as f64;
            let det_flips = s.iter().filter(|p| (p.detector.0 > 0.5) != (p.detector.1 > 0.5)).count() as f64;
            prop_assert!((r.cfr - flips / n).abs() <= 1e-7);
            prop_assert!((r.drr - (1.0 - det_flips / n)).abs() <= 1e-7);
            prop_assert!((r.l1_mean - s.iter().map(|p| p.l1).sum::<f64>() / n).abs() <= 1e-7);
            prop_assert!((r.cpg_mean - s.iter().map(|p| (p.classifier.0 - p.classifier.1).abs() as f64).sum::<f64>() / n).abs() <= 1e-7);
            prop_assert!((r.scls_mean - s.iter().map(|p| (p.detector.0 - p.detector.1).abs() as f64).sum::<f64>() / n).abs() <= 1e-7);
            for v in [r.cfr, r.drr, r.cpg_mean, r.scls_mean, r.l1_mean] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let total: usize = r.per_subgroup.values().map(|m| m.n).sum();
            prop_assert_eq!(total, s.len());

            let mut shuffled = s.clone();
            shuffled.rotate_left(rot % s.len());
            shuffled.reverse();
            prop_assert_eq!(aggregate(&shuffled).unwrap(), r);
        }
    }

    #[test]
    fn report_files_have_fixed_layout() {
        let s = vec![scores("a", Subgroup::MajS, (0.9, 0.1), (0.9, 0.8), 0.1)];
        let r = aggregate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        r.save_json(&json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expect = vec![
            "n",
            "cfr",
            "drr",
            "l1_mean",
            "cpg_mean",
            "scls_mean",
            "attr_pres_mean",
            "per_subgroup",
        ];
        expect.sort();
        let mut got = keys.clone();
        got.sort();
        assert_eq!(got, expect);
        assert_eq!(MetricsReport::load_json(&json).unwrap(), r);

        let cmp = dir.path().join("c.csv");
        save_comparison_csv(&cmp, &[("baseline", &r), ("decodex", &r)]).unwrap();
        let text = std::fs::read_to_string(&cmp).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,CFR,DRR,L1,CPG,SCLS");
        assert_eq!(text.lines().count(), 3);
        let one = dir.path().join("o.csv");
        r.save_csv(&one).unwrap();
        assert_eq!(std::fs::read_to_string(&one).unwrap().lines().count(), 2);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(aggregate(&[]).is_err());
    }
}
