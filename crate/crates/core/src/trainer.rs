//! Subject-grouped splits and the training loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mvol, save_checkpoint, Checkpoint, CheckpointMeta, CohortManifest, Modality};
use crate::models::Network;
use crate::nn::Module;
use crate::ops::{self, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{augment, channelize_adc, single_channel, AugmentId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.65, val: 0.15, test: 0.20, folds: 3, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must lie in [0,1] and sum to 1")));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Subject lists for one fold, each sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn partition_of(&self, subject: &str) -> Option<Partition> {
        if self.train.binary_search_by(|s| s.as_str().cmp(subject)).is_ok() {
            Some(Partition::Train)
        } else if self.val.binary_search_by(|s| s.as_str().cmp(subject)).is_ok() {
            Some(Partition::Val)
        } else if self.test.binary_search_by(|s| s.as_str().cmp(subject)).is_ok() {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn subjects(&self, part: Partition) -> &[String] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Partition of every record, in manifest order.
    pub fn assign(&self, manifest: &CohortManifest) -> Result<Vec<Partition>> {
        manifest
            .records
            .iter()
            .map(|r| {
                self.partition_of(&r.subject_id)
                    .ok_or_else(|| Error::InvalidArgument(format!("subject {} is not in the split", r.subject_id)))
            })
            .collect()
    }

    /// Errors if any subject sits in two partitions.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(s) {
                return Err(Error::InvalidArgument(format!("subject {s} appears in two partitions")));
            }
        }
        Ok(())
    }
}

/// Seeded subject permutation, then a contiguous window per fold: the test
/// block starts at `fold * ceil(n / folds)`, the validation block follows it
/// and the rest is training.
pub fn split_cohort(manifest: &CohortManifest, spec: &SplitSpec, fold: usize) -> Result<Split> {
    spec.validate()?;
    if fold >= spec.folds {
        return Err(Error::InvalidArgument(format!("fold {fold} out of range for {} folds", spec.folds)));
    }
    let mut subjects = manifest.subjects();
    let n = subjects.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!(
            "{n} subjects cannot realize the split fractions (need at least 5)"
        )));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_test = (spec.test * n as f64).round() as usize;
    let n_val = (spec.val * n as f64).round() as usize;
    let start = fold * n.div_ceil(spec.folds);
    let at = |i: usize| subjects[(start + i) % n].clone();
    let mut test: Vec<String> = (0..n_test).map(at).collect();
    let mut val: Vec<String> = (n_test..n_test + n_val).map(at).collect();
    let mut train: Vec<String> = (n_test + n_val..n).map(at).collect();
    test.sort();
    val.sort();
    train.sort();
    let split = Split { fold, seed: spec.seed, train, val, test };
    split.check_disjoint()?;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_every_steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: bool,
    pub deterministic: bool,
    /// Lifts the minimum epoch count for small development runs.
    pub dev: bool,
}

pub const EPOCHS_MIN: usize = 300;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: EPOCHS_MIN,
            batch_size: 4,
            val_every_steps: 100,
            seed: 0,
            adam: AdamConfig::default(),
            augment: true,
            deterministic: true,
            dev: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < EPOCHS_MIN && !self.dev {
            return Err(Error::Config(format!(
                "epochs = {} is below the minimum of {EPOCHS_MIN} (set dev for shorter runs)",
                self.epochs
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_every_steps == 0 {
            return Err(Error::Config("epochs, batch_size and val_every_steps must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// One preprocessed input volume with its label.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub subject_id: String,
    pub session_id: String,
    pub path: String,
    /// `[C, D, H, W]`.
    pub input: Tensor<T>,
    pub label: u8,
}

/// Reads the `modality` records of `subjects` from a manifest of
/// preprocessed volumes. ADC volumes become three channels.
pub fn load_samples(
    manifest: &CohortManifest,
    subjects: &[String],
    modality: Modality,
    need_labels: bool,
) -> Result<Vec<Sample<f32>>> {
    let wanted: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for r in manifest.records.iter().filter(|r| r.modality == modality && wanted.contains(r.subject_id.as_str())) {
        let label = match r.ce_label {
            Some(l) => l,
            None if !need_labels => 0,
            None => return Err(Error::InvalidArgument(format!("{} {} has no ce_label", r.subject_id, r.session_id))),
        };
        let vol = read_mvol(manifest.resolve(r))?;
        let input = match modality {
            Modality::Adc => channelize_adc(&vol),
            _ => single_channel(&vol),
        };
        out.push(Sample {
            subject_id: r.subject_id.clone(),
            session_id: r.session_id.clone(),
            path: r.path.clone(),
            input,
            label,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    /// Mean training-batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn push(&mut self, r: HistoryRecord) -> Result<()> {
        if self.records.last().is_some_and(|l| l.step >= r.step) {
            return Err(Error::InvalidArgument(format!("history step {} is not increasing", r.step)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("step,epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc)
            );
        }
        s
    }
}

/// Means of consecutive non-overlapping windows of `epoch_losses` and
/// whether each is at most `slack` times the one before it.
pub fn loss_windows(epoch_losses: &[f64], window: usize, slack: f64) -> (Vec<f64>, bool) {
    let means: Vec<f64> =
        epoch_losses.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let ok = means.windows(2).all(|w| w[1] <= slack * w[0]);
    (means, ok)
}

/// Counter-based augmentation draw: depends only on the seed, the epoch and
/// the sample index, never on batch composition or thread scheduling.
pub fn augment_draw(seed: u64, epoch: usize, index: usize) -> AugmentId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    AugmentId::new(rng.random_range(0..16)).expect("draw in range")
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn labels_tensor<T: Scalar>(labels: &[u8]) -> Result<Tensor<T>> {
    Tensor::from_vec(&[labels.len()], labels.iter().map(|&l| T::from_f64_lossy(l as f64)).collect())
}

fn positive_column<T: Scalar>(out: &Tensor<T>) -> Result<Tensor<T>> {
    if out.ndim() != 2 || out.shape()[1] != 2 {
        return Err(Error::Shape(format!("expected [N, 2] network output, got {:?}", out.shape())));
    }
    Tensor::from_vec(&[out.shape()[0]], out.data().chunks(2).map(|r| r[1]).collect())
}

/// Eval-mode pass: mean BCE, accuracy at 0.5 and per-sample probabilities.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    samples: &[Sample<T>],
    batch_size: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
    }
    let mut probs = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let p = positive_column(&net.forward(&x, Mode::Eval)?)?;
        let labels: Vec<u8> = chunk.iter().map(|s| s.label).collect();
        let (l, _) = ops::bce_loss(&p, &labels_tensor::<T>(&labels)?)?;
        loss += l.to_f64_lossy() * chunk.len() as f64;
        probs.extend(p.data().iter().map(|v| v.to_f64_lossy()));
    }
    let correct = probs.iter().zip(samples).filter(|(p, s)| u8::from(**p >= 0.5) == s.label).count();
    Ok((loss / samples.len() as f64, correct as f64 / samples.len() as f64, probs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    /// Eval-mode accuracy on the training set after the last epoch.
    pub final_train_acc: f64,
    pub steps: usize,
}

/// Trains `net` in place. `meta_config` is stored in every checkpoint.
/// When `out_dir` is given, the checkpoints and history are written there;
/// on divergence the last completed epoch is restored, written as
/// `last_good.ckpt`, and the error is returned.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    meta_config: serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes: BTreeSet<u8> = train_set.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training set needs both classes, found {:?} in {} samples",
            classes,
            train_set.len()
        )));
    }
    let ckpt = |net: &Network<T>, epoch: usize| {
        Checkpoint::from_module(net.kind, net, CheckpointMeta::new(cfg.seed, epoch, meta_config.clone()))
    };
    let mut adam = Adam::new(cfg.adam);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut last_good = ckpt(net, 0);
    let mut step = 0;
    let (mut win_loss, mut win_correct, mut win_n) = (0.0, 0usize, 0usize);

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs = batch
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i].input, augment_draw(cfg.seed, epoch, i))
                    } else {
                        Ok(train_set[i].input.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
            let labels: Vec<u8> = batch.iter().map(|&i| train_set[i].label).collect();

            net.zero_grad();
            let out = net.forward(&x, Mode::Train)?;
            let p = positive_column(&out)?;
            let (loss, dp) = ops::bce_loss(&p, &labels_tensor::<T>(&labels)?)?;
            let loss = loss.to_f64_lossy();
            let mut finite = loss.is_finite() && out.all_finite();
            if finite {
                let mut grad = Tensor::zeros(out.shape());
                for (row, &g) in grad.data_mut().chunks_mut(2).zip(dp.data()) {
                    row[1] = g;
                }
                net.backward(&grad)?;
                finite = net.params().iter().all(|p| p.grad.all_finite());
            }
            if !finite {
                last_good.load_into(net.kind, net, |_| false)?;
                if let Some(dir) = out_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    save_checkpoint(&last_good, dir.join("last_good.ckpt"))?;
                }
                return Err(Error::Diverged { step: step + 1 });
            }
            adam.step(net.params_mut())?;

            step += 1;
            epoch_loss += loss * batch.len() as f64;
            win_loss += loss * batch.len() as f64;
            win_n += batch.len();
            win_correct +=
                p.data().iter().zip(&labels).filter(|(p, &y)| u8::from(p.to_f64_lossy() >= 0.5) == y).count();

            if step % cfg.val_every_steps == 0 {
                let (val_loss, val_acc) = if val_set.is_empty() {
                    (None, None)
                } else {
                    let (l, a, _) = evaluate(net, val_set, cfg.batch_size)?;
                    (Some(l), Some(a))
                };
                history.push(HistoryRecord {
                    step,
                    epoch,
                    train_loss: win_loss / win_n as f64,
                    train_acc: win_correct as f64 / win_n as f64,
                    val_loss,
                    val_acc,
                })?;
                (win_loss, win_correct, win_n) = (0.0, 0, 0);
                if let (Some(l), Some(a)) = (val_loss, val_acc) {
                    let improves = match &best {
                        None => true,
                        Some((ba, bl, _)) => a > *ba || (a == *ba && l < *bl),
                    };
                    if improves {
                        best = Some((a, l, ckpt(net, epoch)));
                    }
                }
            }
        }
        history.epoch_losses.push(epoch_loss / train_set.len() as f64);
        last_good = ckpt(net, epoch + 1);
    }

    let final_checkpoint = last_good;
    let (_, final_train_acc, _) = evaluate(net, train_set, cfg.batch_size)?;
    let best_checkpoint = best.map(|b| b.2).unwrap_or_else(|| final_checkpoint.clone());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&final_checkpoint, dir.join("final.ckpt"))?;
        save_checkpoint(&best_checkpoint, dir.join("best.ckpt"))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("history.jsonl", history.to_jsonl()?)?;
        write("history.csv", history.to_csv())?;
        let mut epochs = String::from("epoch,train_loss\n");
        for (i, l) in history.epoch_losses.iter().enumerate() {
            let _ = writeln!(epochs, "{i},{l}");
        }
        write("epochs.csv", epochs)?;
    }
    Ok(TrainOutcome { history, final_checkpoint, best_checkpoint, final_train_acc, steps: step })
}
