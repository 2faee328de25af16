//! ROC AUC, balanced accuracy and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryMask;
use crate::error::{Error, Result};
use crate::scorer::AnomalyMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Pixel,
    Image,
}

/// Scores paired with binary ground truth (1 = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f32>,
    labels: Vec<u8>,
    granularity: Granularity,
}

impl ScoredSet {
    pub fn new(scores: Vec<f32>, labels: Vec<u8>, granularity: Granularity) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Shape("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Shape("scores contain NaN".into()));
        }
        Ok(Self {
            scores,
            labels,
            granularity,
        })
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    fn class_counts(&self) -> Result<(u64, u64)> {
        let pos = self.labels.iter().filter(|&&l| l == 1).count() as u64;
        let neg = self.labels.len() as u64 - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::DegenerateLabels);
        }
        Ok((pos, neg))
    }

    /// `(score, label)` pairs sorted ascending by score.
    fn sorted(&self) -> Vec<(f32, u8)> {
        let mut pairs: Vec<(f32, u8)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        pairs
    }
}

/// Walk runs of equal scores in a sorted list: `(score, positives, negatives)`.
fn tie_groups(sorted: &[(f32, u8)]) -> impl Iterator<Item = (f32, u64, u64)> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= sorted.len() {
            return None;
        }
        let v = sorted[i].0;
        let (mut pos, mut neg) = (0u64, 0u64);
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        Some((v, pos, neg))
    })
}

/// Area under the ROC curve via the Mann–Whitney rank statistic with
/// midranks for ties.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.class_counts()?;
    let sorted = set.sorted();
    let mut rank_sum = 0f64;
    let mut seen = 0u64;
    for (_, p, n) in tie_groups(&sorted) {
        let size = p + n;
        // Ranks seen+1 ..= seen+size share their mean.
        let midrank = seen as f64 + (size as f64 + 1.0) / 2.0;
        rank_sum += midrank * p as f64;
        seen += size;
    }
    let u = rank_sum - (pos as f64) * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Confusion counts at a threshold (`score ≥ threshold` predicts anomalous).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn tnr(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.tpr() + self.tnr()) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Best threshold among midpoints of adjacent distinct scores (plus the
    /// lowest score itself); ties resolve to the lowest threshold.
    MaxBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    pub threshold: f64,
    pub counts: Counts,
}

pub fn balanced_accuracy(set: &ScoredSet, policy: ThresholdPolicy) -> Result<BalancedAccuracy> {
    let (pos, neg) = set.class_counts()?;
    match policy {
        ThresholdPolicy::Fixed(t) => {
            let mut c = Counts::default();
            for (&s, &l) in set.scores.iter().zip(&set.labels) {
                match (s as f64 >= t, l == 1) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            Ok(BalancedAccuracy {
                value: c.balanced_accuracy(),
                threshold: t,
                counts: c,
            })
        }
        ThresholdPolicy::MaxBalanced => {
            let sorted = set.sorted();
            let groups: Vec<_> = tie_groups(&sorted).collect();
            let mut c = Counts {
                tp: pos,
                fp: neg,
                tn: 0,
                fn_: 0,
            };
            let mut best = BalancedAccuracy {
                value: c.balanced_accuracy(),
                threshold: groups[0].0 as f64,
                counts: c,
            };
            for k in 0..groups.len() - 1 {
                let (v, p, n) = groups[k];
                c.tp -= p;
                c.fn_ += p;
                c.fp -= n;
                c.tn += n;
                let value = c.balanced_accuracy();
                if value > best.value {
                    best = BalancedAccuracy {
                        value,
                        threshold: (v as f64 + groups[k + 1].0 as f64) / 2.0,
                        counts: c,
                    };
                }
            }
            Ok(best)
        }
    }
}

/// AUC and balanced accuracy for one granularity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub auc: f64,
    pub acc: f64,
    /// `None` when metrics are averaged per image.
    pub threshold: Option<f64>,
    pub counts: Option<Counts>,
}

impl MetricBlock {
    pub fn from_set(set: &ScoredSet, policy: ThresholdPolicy) -> Result<Self> {
        let auc = roc_auc(set)?;
        let acc = balanced_accuracy(set, policy)?;
        Ok(Self {
            auc,
            acc: acc.value,
            threshold: Some(acc.threshold),
            counts: Some(acc.counts),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PixelPooling {
    /// Every test pixel in one set.
    #[default]
    Global,
    /// Mean of per-image metrics over images containing both classes.
    PerImage,
}

/// Pixel-level metrics. Pass all-zero masks for normal test images.
pub fn evaluate_pixel(
    maps: &[AnomalyMap],
    masks: &[BinaryMask],
    pooling: PixelPooling,
    policy: ThresholdPolicy,
) -> Result<MetricBlock> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.dim() != k.dim() {
            return Err(Error::Shape(format!(
                "image {i}: map {:?} vs mask {:?}",
                m.dim(),
                k.dim()
            )));
        }
    }
    let to_set = |pairs: &mut dyn Iterator<Item = (&AnomalyMap, &BinaryMask)>| {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (m, k) in pairs {
            scores.extend(m.data().iter().copied());
            labels.extend(k.data().iter().copied());
        }
        ScoredSet::new(scores, labels, Granularity::Pixel)
    };
    match pooling {
        PixelPooling::Global => MetricBlock::from_set(&to_set(&mut maps.iter().zip(masks))?, policy),
        PixelPooling::PerImage => {
            let mut aucs = Vec::new();
            let mut accs = Vec::new();
            for pair in maps.iter().zip(masks) {
                let set = to_set(&mut std::iter::once(pair))?;
                match MetricBlock::from_set(&set, policy) {
                    Ok(b) => {
                        aucs.push(b.auc);
                        accs.push(b.acc);
                    }
                    Err(Error::DegenerateLabels) => continue,
                    Err(e) => return Err(e),
                }
            }
            if aucs.is_empty() {
                return Err(Error::DegenerateLabels);
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            Ok(MetricBlock {
                auc: mean(&aucs),
                acc: mean(&accs),
                threshold: None,
                counts: None,
            })
        }
    }
}

/// Image-level metrics from image scores and labels (1 = abnormal).
pub fn evaluate_image(scores: &[f32], labels: &[u8], policy: ThresholdPolicy) -> Result<MetricBlock> {
    MetricBlock::from_set(
        &ScoredSet::new(scores.to_vec(), labels.to_vec(), Granularity::Image)?,
        policy,
    )
}

/// Metrics for one configuration plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel: Option<MetricBlock>,
    pub image: MetricBlock,
    pub test_images: usize,
    pub skipped: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn pixel_auc(&self) -> Option<f64> {
        self.pixel.map(|p| p.auc)
    }

    pub fn image_auc(&self) -> f64 {
        self.image.auc
    }
}

/// One named row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Aligned plain-text table: `I-AUC I-ACC P-AUC P-ACC` per row.
pub fn render_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}",
        "config", "I-AUC", "I-ACC", "P-AUC", "P-ACC"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 32));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.3}  {:>6.3}  {:>6}  {:>6}",
            r.name,
            r.report.image.auc,
            r.report.image.acc,
            fmt_opt(r.report.pixel.map(|p| p.auc)),
            fmt_opt(r.report.pixel.map(|p| p.acc)),
        );
    }
    out
}

pub fn render_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,image_auc,image_acc,image_threshold,pixel_auc,pixel_acc,pixel_threshold\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        let name = if r.name.contains(',') || r.name.contains('"') {
            format!("\"{}\"", r.name.replace('"', "\"\""))
        } else {
            r.name.clone()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            name,
            r.report.image.auc,
            r.report.image.acc,
            opt(r.report.image.threshold),
            opt(r.report.pixel.map(|p| p.auc)),
            opt(r.report.pixel.map(|p| p.acc)),
            opt(r.report.pixel.and_then(|p| p.threshold)),
        );
    }
    out
}
