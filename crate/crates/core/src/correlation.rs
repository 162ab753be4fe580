//! Logistic-regression association of CE probabilities with outcome labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const GRADIENT_TOL: f64 = 1e-8;
/// Slopes beyond this magnitude are treated as complete separation.
pub const SEPARATION_SLOPE: f64 = 50.0;
/// Published R² values for the AHT and outcome analyses, kept for reference
/// only: they come from a private clinical cohort.
pub const REFERENCE_R2_AHT: f64 = 0.5;
pub const REFERENCE_R2_OUTCOME: f64 = 0.64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
    pub converged: bool,
    pub separable: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub mcfadden_r2: f64,
}

impl LogisticFit {
    pub fn predict(&self, x: f64) -> f64 {
        sigmoid(self.intercept + self.slope * x)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Bernoulli log-likelihood of `y` under `sigmoid(b0 + b1 x)`.
pub fn log_likelihood(x: &[f64], y: &[u8], b0: f64, b1: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = b0 + b1 * xi;
            if yi == 1 {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum()
}

fn gradient(x: &[f64], y: &[u8], b0: f64, b1: f64) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (&xi, &yi) in x.iter().zip(y) {
        let r = yi as f64 - sigmoid(b0 + b1 * xi);
        g[0] += r;
        g[1] += r * xi;
    }
    g
}

fn mcfadden(ll: f64, ll_null: f64) -> f64 {
    if ll_null < 0.0 {
        (1.0 - ll / ll_null).max(0.0)
    } else {
        0.0
    }
}

/// True when a threshold on `x` splits the classes (ties allowed), in which
/// case the likelihood has no finite maximizer.
pub fn separated(x: &[f64], y: &[u8]) -> bool {
    let range = |class: u8| {
        x.iter()
            .zip(y)
            .filter(|(_, &v)| v == class)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
    };
    let (lo0, hi0) = range(0);
    let (lo1, hi1) = range(1);
    hi0 <= lo1 || hi1 <= lo0
}

/// Maximum-likelihood fit of `p = sigmoid(b0 + b1 x)` by Newton-Raphson
/// (IRLS) with step halving. Iterates on standardized `x` and reports the
/// coefficients on the original scale.
pub fn fit_logistic(x: &[f64], y: &[u8]) -> Result<LogisticFit> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} predictors vs {} outcomes", x.len(), y.len())));
    }
    if x.len() < 4 {
        return Err(Error::InvalidArgument(format!("logistic fit needs at least 4 observations, got {}", x.len())));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("outcome {bad} is not 0 or 1")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("predictor contains non-finite values".into()));
    }
    let n = x.len() as f64;
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    if pos == 0.0 || pos == n {
        return Err(Error::InvalidArgument("logistic fit needs both outcome classes".into()));
    }
    let ybar = pos / n;
    let b0_null = (ybar / (1.0 - ybar)).ln();
    let ll_null = log_likelihood(x, y, b0_null, 0.0);

    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 || sd < 1e-12 * mean.abs() {
        let g = gradient(x, y, b0_null, 0.0);
        return Ok(LogisticFit {
            intercept: b0_null,
            slope: 0.0,
            converged: true,
            separable: false,
            iterations: 0,
            gradient_norm: g[0].hypot(g[1]),
            log_likelihood: ll_null,
            null_log_likelihood: ll_null,
            mcfadden_r2: 0.0,
        });
    }
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let to_original = |c: [f64; 2]| [c[0] - c[1] * mean / sd, c[1] / sd];

    let mut c = [b0_null, 0.0];
    let mut ll = ll_null;
    let mut iterations = 0;
    let mut converged = false;
    let mut separable = false;
    while iterations < MAX_ITERATIONS {
        let b = to_original(c);
        let g = gradient(x, y, b[0], b[1]);
        if g[0].hypot(g[1]) < GRADIENT_TOL {
            converged = true;
            break;
        }
        if b[1].abs() > SEPARATION_SLOPE {
            separable = true;
            break;
        }
        iterations += 1;
        let (mut gz, mut h) = ([0.0; 2], [0.0; 3]);
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(c[0] + c[1] * zi);
            let w = p * (1.0 - p);
            gz[0] += yi as f64 - p;
            gz[1] += (yi as f64 - p) * zi;
            h[0] += w;
            h[1] += w * zi;
            h[2] += w * zi * zi;
        }
        let det = h[0] * h[2] - h[1] * h[1];
        if !(det > 0.0) {
            separable = true;
            break;
        }
        let step = [(h[2] * gz[0] - h[1] * gz[1]) / det, (h[0] * gz[1] - h[1] * gz[0]) / det];
        let gnorm = g[0].hypot(g[1]);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = [c[0] + t * step[0], c[1] + t * step[1]];
            let b = to_original(trial);
            let lt = log_likelihood(x, y, b[0], b[1]);
            // close to the optimum the likelihood gain drops below rounding,
            // so a flat step that shrinks the gradient also counts
            let flat = lt >= ll - 1e-12 * ll.abs() && {
                let gt = gradient(x, y, b[0], b[1]);
                gt[0].hypot(gt[1]) < gnorm
            };
            if lt > ll || flat {
                moved = trial != c;
                c = trial;
                ll = lt;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // no representable ascent step left: the optimum is reached to
            // working precision
            let b = to_original(c);
            let g = gradient(x, y, b[0], b[1]);
            converged = g[0].hypot(g[1]) < GRADIENT_TOL;
            break;
        }
    }
    let b = to_original(c);
    if b[1].abs() > SEPARATION_SLOPE || separated(x, y) {
        separable = true;
        converged = false;
    }
    let g = gradient(x, y, b[0], b[1]);
    let ll = log_likelihood(x, y, b[0], b[1]);
    Ok(LogisticFit {
        intercept: b[0],
        slope: b[1],
        converged,
        separable,
        iterations,
        gradient_norm: g[0].hypot(g[1]),
        log_likelihood: ll,
        null_log_likelihood: ll_null,
        mcfadden_r2: mcfadden(ll, ll_null),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FssBin {
    Good,
    Mild,
    Moderate,
    Severe,
}

/// `<=6` Good, `7..=14` Mild, `15..=21` Moderate, `>=22` Severe.
pub fn bin_fss(score: i64) -> Result<FssBin> {
    match score {
        s if s < 0 => Err(Error::InvalidArgument(format!("FSS score must be non-negative, got {s}"))),
        0..=6 => Ok(FssBin::Good),
        7..=14 => Ok(FssBin::Mild),
        15..=21 => Ok(FssBin::Moderate),
        _ => Ok(FssBin::Severe),
    }
}

/// One subject's ensemble probability and (possibly missing) outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub subject_id: String,
    pub probability: f64,
    pub aht_label: Option<u8>,
    pub fss_score: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub outcome: String,
    pub n_used: usize,
    pub n_dropped: usize,
    pub n_positive: usize,
    pub fit: LogisticFit,
    pub reference_r2: f64,
    pub reference_reproducible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_subjects: usize,
    pub aht: Analysis,
    pub outcome: Analysis,
    pub fss_bins: BTreeMap<FssBin, usize>,
}

fn analysis(name: &str, pairs: Vec<(f64, u8)>, total: usize, reference: f64) -> Result<Analysis> {
    if pairs.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "{name} analysis has {} usable subjects, at least 4 are needed",
            pairs.len()
        )));
    }
    let (x, y): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
    Ok(Analysis {
        outcome: name.into(),
        n_used: x.len(),
        n_dropped: total - x.len(),
        n_positive: y.iter().filter(|&&v| v == 1).count(),
        fit: fit_logistic(&x, &y)?,
        reference_r2: reference,
        reference_reproducible: false,
    })
}

/// Fit A regresses AHT on the CE probability, fit B regresses `1{FSS > 6}`.
/// Subjects missing a label are dropped from that analysis only.
pub fn correlate_report(subjects: &[SubjectOutcome]) -> Result<CorrelationReport> {
    if let Some(s) = subjects.iter().find(|s| !(0.0..=1.0).contains(&s.probability)) {
        return Err(Error::InvalidArgument(format!("{}: probability {} outside [0,1]", s.subject_id, s.probability)));
    }
    let n = subjects.len();
    let aht = subjects.iter().filter_map(|s| s.aht_label.map(|l| (s.probability, l))).collect();
    let mut fss_bins = BTreeMap::new();
    let mut outcome = Vec::new();
    for s in subjects {
        if let Some(f) = s.fss_score {
            let bin = bin_fss(f as i64)?;
            *fss_bins.entry(bin).or_insert(0) += 1;
            outcome.push((s.probability, u8::from(bin != FssBin::Good)));
        }
    }
    Ok(CorrelationReport {
        n_subjects: n,
        aht: analysis("aht", aht, n, REFERENCE_R2_AHT)?,
        outcome: analysis("fss_disability", outcome, n, REFERENCE_R2_OUTCOME)?,
        fss_bins,
    })
}

/// `x,p` samples of the fitted curve on `points` evenly spaced x in [0,1].
pub fn curve_csv(fit: &LogisticFit, points: usize) -> String {
    let mut s = String::from("x,p\n");
    let steps = points.max(2) - 1;
    for i in 0..=steps {
        let x = i as f64 / steps as f64;
        let _ = writeln!(s, "{x},{}", fit.predict(x));
    }
    s
}
