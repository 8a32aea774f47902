//! Captioning and detection metrics, and report writers.

mod caption;
mod detection;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use caption::{bleu4, cider_d, metric_tokens, rouge_l, BLEU_EPS, CIDER_SCALE, CIDER_SIGMA, ROUGE_BETA};
pub use detection::{
    average_precision, detection_pr, match_category, CategoryResult, Detection, DetectionEval, DetectionResult,
    GroundTruth, SceneDetections,
};

use crate::error::{Error, Result};
use crate::geometry::{box_iou_3d, Box3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMetric {
    Bleu4,
    RougeL,
    Cider,
}

impl CaptionMetric {
    pub const ALL: [CaptionMetric; 3] = [CaptionMetric::Cider, CaptionMetric::Bleu4, CaptionMetric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            CaptionMetric::Bleu4 => "bleu4",
            CaptionMetric::RougeL => "rouge_l",
            CaptionMetric::Cider => "cider",
        }
    }
}

impl fmt::Display for CaptionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown caption metric {s:?}")))
    }
}

/// Predicted and reference captions with their boxes, keyed by instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub predictions: BTreeMap<String, (String, Box3D)>,
    pub references: BTreeMap<String, (Vec<String>, Box3D)>,
}

impl CaptionEval {
    pub fn validate(&self) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Invalid("caption evaluation has no references".into()));
        }
        if let Some(k) = self.predictions.keys().find(|k| !self.references.contains_key(*k)) {
            return Err(Error::Invalid(format!("prediction {k:?} has no reference")));
        }
        Ok(())
    }

    /// Caption score per predicted key, ignoring boxes. CIDEr document
    /// frequencies come from every reference set.
    pub fn caption_scores(&self, metric: CaptionMetric) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        Ok(match metric {
            CaptionMetric::Bleu4 | CaptionMetric::RougeL => self
                .predictions
                .iter()
                .map(|(k, (c, _))| {
                    let refs = &self.references[k].0;
                    let s = if metric == CaptionMetric::Bleu4 { bleu4(c, refs) } else { rouge_l(c, refs) };
                    (k.clone(), s)
                })
                .collect(),
            CaptionMetric::Cider => {
                let items: Vec<(String, Vec<String>)> = self
                    .references
                    .iter()
                    .map(|(k, (refs, _))| {
                        let c = self.predictions.get(k).map(|p| p.0.clone()).unwrap_or_default();
                        (c, refs.clone())
                    })
                    .collect();
                let scores = cider_d(&items);
                self.references
                    .keys()
                    .zip(scores)
                    .filter(|(k, _)| self.predictions.contains_key(*k))
                    .map(|(k, s)| (k.clone(), s))
                    .collect()
            }
        })
    }

    /// Mean caption score over references, zeroed where the predicted box
    /// falls below IoU `k`.
    pub fn m_at_k_iou(&self, metric: CaptionMetric, k: f64) -> Result<f64> {
        let scores = self.caption_scores(metric)?;
        let total: f64 = scores
            .iter()
            .filter(|(key, _)| box_iou_3d(&self.predictions[*key].1, &self.references[*key].1) >= k)
            .map(|(_, s)| s)
            .sum();
        Ok(total / self.references.len() as f64)
    }

    /// Mean caption score over references with no box gate.
    pub fn corpus_score(&self, metric: CaptionMetric) -> Result<f64> {
        let scores = self.caption_scores(metric)?;
        Ok(scores.values().sum::<f64>() / self.references.len() as f64)
    }
}

pub fn m_at_k_iou(eval: &CaptionEval, metric: CaptionMetric, k: f64) -> Result<f64> {
    eval.m_at_k_iou(metric, k)
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub threshold: Option<f64>,
    pub value: f64,
    pub n_items: usize,
}

pub fn report_json(records: &[MetricRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn report_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("metric,threshold,value,n_items\n");
    for r in records {
        let thr = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.metric, thr, r.value, r.n_items));
    }
    out
}

/// Caption metrics at every threshold, plus ungated corpus scores.
pub fn caption_report(eval: &CaptionEval, thresholds: &[f64]) -> Result<Vec<MetricRecord>> {
    let n = eval.references.len();
    let mut out = Vec::new();
    for m in CaptionMetric::ALL {
        for &k in thresholds {
            out.push(MetricRecord {
                metric: m.name().into(),
                threshold: Some(k),
                value: eval.m_at_k_iou(m, k)?,
                n_items: n,
            });
        }
    }
    Ok(out)
}

pub fn detection_report(results: &[DetectionResult]) -> Vec<MetricRecord> {
    results
        .iter()
        .flat_map(|r| {
            [("map", r.map), ("ar", r.ar)].map(|(name, value)| MetricRecord {
                metric: name.into(),
                threshold: Some(r.threshold),
                value,
                n_items: r.n_gt,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap()
    }

    fn eval_with(items: &[(&str, &str, &str, Box3D)]) -> CaptionEval {
        let mut e = CaptionEval::default();
        for (k, pred, gt, b) in items {
            e.predictions.insert(k.to_string(), (pred.to_string(), *b));
            e.references.insert(k.to_string(), (vec![gt.to_string()], unit(0.0)));
        }
        e
    }

    #[test]
    fn gated_average() {
        // IoU of unit cubes offset by d along x is (1-d)/(1+d): d=0.25 → 0.6, d=7/13 → 0.3
        let e = eval_with(&[
            ("a", "the red chair is here", "the red chair is here", unit(0.25)),
            ("b", "a blue lamp on the desk", "a blue lamp on the desk", unit(7.0 / 13.0)),
        ]);
        assert!((e.m_at_k_iou(CaptionMetric::Bleu4, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((e.m_at_k_iou(CaptionMetric::Bleu4, 0.25).unwrap() - 1.0).abs() < 1e-12);
        let far = eval_with(&[("a", "x", "x", unit(5.0))]);
        assert_eq!(far.m_at_k_iou(CaptionMetric::RougeL, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn perfect_boxes_equal_corpus_score() {
        let e = eval_with(&[
            ("a", "the red chair is here", "the red chair is here", unit(0.0)),
            ("b", "a blue lamp on the desk", "a blue lamp on the desk", unit(0.0)),
        ]);
        for m in CaptionMetric::ALL {
            assert_eq!(e.m_at_k_iou(m, 0.5).unwrap(), e.corpus_score(m).unwrap());
        }
        assert!((e.corpus_score(CaptionMetric::Cider).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let mut e = eval_with(&[("a", "x", "x", unit(0.0))]);
        e.predictions.insert("ghost".into(), ("y".into(), unit(0.0)));
        assert!(e.m_at_k_iou(CaptionMetric::Bleu4, 0.5).is_err());
        assert!(CaptionEval::default().validate().is_err());
    }

    #[test]
    fn unmatched_reference_counts_as_zero() {
        let mut e = eval_with(&[("a", "the red chair is here", "the red chair is here", unit(0.0))]);
        e.references.insert("b".into(), (vec!["a blue lamp".into()], unit(0.0)));
        assert!((e.m_at_k_iou(CaptionMetric::Bleu4, 0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reports() {
        let recs = vec![MetricRecord {
            metric: "cider".into(),
            threshold: Some(0.5),
            value: 1.5,
            n_items: 3,
        }];
        assert_eq!(report_csv(&recs), "metric,threshold,value,n_items\ncider,0.5,1.5,3\n");
        let back: Vec<MetricRecord> = serde_json::from_str(&report_json(&recs).unwrap()).unwrap();
        assert_eq!(back, recs);
        assert_eq!("rouge_l".parse::<CaptionMetric>().unwrap(), CaptionMetric::RougeL);
    }

    proptest! {
        #[test]
        fn monotone_in_k_and_bounded(shifts in prop::collection::vec(0.0..1.5f64, 1..5), words in prop::collection::vec(0usize..4, 1..5)) {
            let vocab = ["red chair", "blue lamp", "the table", "a green sofa"];
            let mut e = CaptionEval::default();
            for (i, s) in shifts.iter().enumerate() {
                let w = vocab[words[i % words.len()]];
                e.predictions.insert(format!("k{i}"), (w.to_string(), unit(*s)));
                e.references.insert(format!("k{i}"), (vec![vocab[i % 4].to_string()], unit(0.0)));
            }
            for m in CaptionMetric::ALL {
                let lo = e.m_at_k_iou(m, 0.25).unwrap();
                let hi = e.m_at_k_iou(m, 0.5).unwrap();
                prop_assert!(hi <= lo + 1e-12);
                let cap = if m == CaptionMetric::Cider { 10.0 } else { 1.0 };
                prop_assert!((0.0..=cap + 1e-9).contains(&lo));
            }
        }
    }
}
