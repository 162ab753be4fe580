//! Confusion metrics, ROC/AUC and subject-level majority voting.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard report thresholds for subject-level voting.
pub const VOTING_THRESHOLDS: [f64; 3] = [0.40, 0.50, 0.60];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Ratios that would divide by zero are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub threshold: f64,
    pub counts: Counts,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, got {l}")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scores must be finite, got {s}")));
    }
    Ok(())
}

pub fn counts_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Counts> {
    check_labels(scores, labels)?;
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl EvalReport {
    pub fn from_counts(counts: Counts, threshold: f64, auc: Option<f64>) -> Self {
        let Counts { tp, fp, tn, fn_ } = counts;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        EvalReport {
            precision,
            recall,
            specificity: ratio(tn, tn + fp),
            sensitivity: recall,
            f1,
            auc,
            accuracy: (tp + tn) as f64 / counts.total().max(1) as f64,
            threshold,
            counts,
        }
    }
}

/// Prediction is positive iff `score >= threshold`. The AUC is filled in when
/// both classes are present.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("confusion_metrics needs at least one score".into()));
    }
    let counts = counts_at(scores, labels, threshold)?;
    let auc = match roc_auc(scores, labels) {
        Ok((_, a)) => Some(a),
        Err(Error::AucUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport::from_counts(counts, threshold, auc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this are positive; `+inf` for the (0,0) anchor.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        s
    }
}

/// Twice the Mann-Whitney concordance count and the number of
/// positive/negative pairs: AUC is `twice / (2 * pairs)` exactly.
pub fn auc_fraction(scores: &[f64], labels: &[u8]) -> Result<(u128, u128)> {
    check_labels(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    // sweep tie groups from the highest score down
    let (mut tp, mut twice) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        twice += dfp * (2 * tp + dtp);
        tp += dtp;
    }
    Ok((twice, pos * neg))
}

/// ROC curve over unique score thresholds, anchored at (0,0) and (1,1), and
/// the trapezoidal area under it.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64)> {
    let (twice, pairs) = auc_fraction(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    uniq.dedup();
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    for t in uniq {
        let c = counts_at(scores, labels, t)?;
        points.push(RocPoint { fpr: c.fp as f64 / neg, tpr: c.tp as f64 / pos, threshold: t });
    }
    Ok((RocCurve { points }, twice as f64 / (2 * pairs) as f64))
}

/// Subject decision at threshold `tau`: a unit is positive iff its score is
/// `>= tau`; the subject is positive iff positives `>=` negatives.
pub fn vote(unit_scores: &[f64], tau: f64) -> Result<u8> {
    if unit_scores.is_empty() {
        return Err(Error::InvalidArgument("empty subject group".into()));
    }
    let pos = unit_scores.iter().filter(|&&s| s >= tau).count();
    Ok(u8::from(2 * pos >= unit_scores.len()))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0,1), got {tau}")));
    }
    Ok(())
}

pub fn aggregate_subject(groups: &BTreeMap<String, Vec<f64>>, tau: f64) -> Result<BTreeMap<String, u8>> {
    check_tau(tau)?;
    groups
        .iter()
        .map(|(s, units)| {
            vote(units, tau)
                .map(|v| (s.clone(), v))
                .map_err(|_| Error::InvalidArgument(format!("subject {s} has no scored units")))
        })
        .collect()
}

/// Subject-level evaluation at one voting threshold. The subject score used
/// for the AUC is the fraction of positive units, and the subject decision is
/// that fraction `>= 0.5`, which is the majority rule with ties positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingReport {
    pub tau: f64,
    pub subjects: usize,
    pub metrics: EvalReport,
}

pub fn subject_voting_report(
    groups: &BTreeMap<String, Vec<f64>>,
    labels: &BTreeMap<String, u8>,
    tau: f64,
) -> Result<VotingReport> {
    check_tau(tau)?;
    let decisions = aggregate_subject(groups, tau)?;
    let mut fractions = Vec::with_capacity(groups.len());
    let mut y = Vec::with_capacity(groups.len());
    for (s, units) in groups {
        let label = *labels.get(s).ok_or_else(|| Error::InvalidArgument(format!("no label for subject {s}")))?;
        let frac = units.iter().filter(|&&u| u >= tau).count() as f64 / units.len() as f64;
        debug_assert_eq!(u8::from(frac >= 0.5), decisions[s]);
        fractions.push(frac);
        y.push(label);
    }
    let counts = counts_at(&fractions, &y, 0.5)?;
    let auc = match roc_auc(&fractions, &y) {
        Ok((_, a)) => Some(a),
        Err(Error::AucUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(VotingReport { tau, subjects: groups.len(), metrics: EvalReport::from_counts(counts, 0.5, auc) })
}
