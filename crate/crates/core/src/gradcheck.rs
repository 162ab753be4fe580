//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::ops::{self, Mode};
use crate::tensor::Tensor;

/// Scalar loss on a module output: returns `(loss, d loss / d output)`.
/// The loss tensor must hold exactly one element.
pub type LossFn<'a> = dyn Fn(&Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled across all parameters (all of them if fewer exist).
    pub min_coords: usize,
    pub seed: u64,
    pub include_input: bool,
    /// Coordinates with `|analytic| + |numeric|` at or below this are dead units.
    pub dead_threshold: f64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            min_coords: 64,
            seed: 0,
            include_input: false,
            dead_threshold: 1e-8,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WorstCoordinate {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded_dead: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - n| / max(|a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// BCE on the positive-class probability: column 1 of a `[N,2]` softmax
/// output, or the single column of a `[N]`/`[N,1]` probability output.
pub fn bce_on_positive(labels: Vec<f64>) -> impl Fn(&Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    move |out: &Tensor<f64>| {
        let n = labels.len();
        let (cols, pick) = match out.shape() {
            [m] if *m == n => (1, 0),
            [m, 1] if *m == n => (1, 0),
            [m, 2] if *m == n => (2, 1),
            s => return Err(Error::Shape(format!("bce_on_positive cannot read output {s:?}"))),
        };
        let p: Vec<f64> = out.data().chunks(cols).map(|r| r[pick]).collect();
        let (loss, dp) = ops::bce_loss(&Tensor::from_vec(&[n], p)?, &Tensor::from_vec(&[n], labels.clone())?)?;
        let mut grad = Tensor::zeros(out.shape());
        for (row, &g) in grad.data_mut().chunks_mut(cols).zip(dp.data()) {
            row[pick] = g;
        }
        Ok((Tensor::scalar(loss), grad))
    }
}

fn scalar_loss(loss: &LossFn<'_>, out: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    let (l, g) = loss(out)?;
    if l.len() != 1 {
        return Err(Error::InvalidArgument(format!("grad_check needs a scalar loss, got shape {:?}", l.shape())));
    }
    Ok((l.data()[0], g))
}

fn eval(module: &mut (impl Module<f64> + ?Sized), x: &Tensor<f64>, loss: &LossFn<'_>, mode: Mode) -> Result<f64> {
    let out = module.forward(x, mode)?;
    Ok(scalar_loss(loss, &out)?.0)
}

/// Compares reverse-mode gradients of `loss(module(input))` with central
/// differences on a seeded subset of parameter coordinates.
pub fn grad_check(
    module: &mut (impl Module<f64> + ?Sized),
    input: &Tensor<f64>,
    loss: &LossFn<'_>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    module.zero_grad();
    let out = module.forward(input, cfg.mode)?;
    let (_, dout) = scalar_loss(loss, &out)?;
    let dinput = module.backward(&dout)?;

    // (tensor slot, flat index, analytic); slot usize::MAX is the input
    let analytic: Vec<Tensor<f64>> = module.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = module.params().iter().map(|p| p.name.clone()).collect();
    let total: usize =
        analytic.iter().map(Tensor::len).sum::<usize>() + if cfg.include_input { input.len() } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut slots: Vec<(usize, usize)> = analytic.iter().enumerate().map(|(i, t)| (i, t.len())).collect();
    if cfg.include_input {
        slots.push((usize::MAX, input.len()));
    }
    if total <= cfg.min_coords {
        for &(slot, len) in &slots {
            coords.extend((0..len).map(|i| (slot, i)));
        }
    } else {
        // every tensor gets a share proportional to sqrt(size), at least two
        let weights: Vec<f64> = slots.iter().map(|&(_, len)| (len as f64).sqrt()).collect();
        let wsum: f64 = weights.iter().sum();
        for (&(slot, len), w) in slots.iter().zip(&weights) {
            let k = ((cfg.min_coords as f64 * w / wsum).ceil() as usize).max(2).min(len);
            let mut picked = sample(&mut rng, len, k).into_vec();
            picked.sort_unstable();
            coords.extend(picked.into_iter().map(|i| (slot, i)));
        }
    }

    let mut x = input.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded_dead: 0, worst: None };
    for (slot, idx) in coords {
        let (a, numeric) = if slot == usize::MAX {
            let orig = x.data()[idx];
            x.data_mut()[idx] = orig + cfg.eps;
            let lp = eval(module, &x, loss, cfg.mode)?;
            x.data_mut()[idx] = orig - cfg.eps;
            let lm = eval(module, &x, loss, cfg.mode)?;
            x.data_mut()[idx] = orig;
            (dinput.data()[idx], (lp - lm) / (2.0 * cfg.eps))
        } else {
            let orig = module.params()[slot].value.data()[idx];
            module.params_mut()[slot].value.data_mut()[idx] = orig + cfg.eps;
            let lp = eval(module, &x, loss, cfg.mode)?;
            module.params_mut()[slot].value.data_mut()[idx] = orig - cfg.eps;
            let lm = eval(module, &x, loss, cfg.mode)?;
            module.params_mut()[slot].value.data_mut()[idx] = orig;
            (analytic[slot].data()[idx], (lp - lm) / (2.0 * cfg.eps))
        };
        if a.abs() + numeric.abs() <= cfg.dead_threshold {
            report.excluded_dead += 1;
            continue;
        }
        report.checked += 1;
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            let name = if slot == usize::MAX { "input".to_string() } else { names[slot].clone() };
            report.worst = Some(WorstCoordinate { name, index: idx, analytic: a, numeric });
        }
    }
    // leave the module with clean caches and its own gradients
    module.zero_grad();
    Ok(report)
}
