//! Mini-batch SGD training, evaluation and subject-grouped cross-validation.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{load_volume, normalize, FoldAssignment, Manifest, VolumeRecord};
use crate::engine::{ops::softmax, sgd_step, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{EvalMetrics, MetricSummary};
use crate::model::{build, forward, loss_and_grad, MgNetConfig, MgNetParams};

/// Per-epoch learning-rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the initial rate towards zero over the run.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!(
                "unknown schedule `{s}` (expected constant or cosine)"
            )),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub learning_rate: f32,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seed of the per-epoch batch shuffle.
    pub seed: u64,
    /// Evaluate the monitor set every `log_every` epochs (0 disables it).
    /// The final epoch is always evaluated when enabled.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch_size: 2,
            epochs: 10,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Argument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (epoch - 1) as f64 / self.epochs as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

/// A scan loaded into memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject_id: String,
    pub scan_id: String,
    pub label: u8,
    pub volume: Tensor,
}

/// Loads (and optionally z-scores) the volumes behind `records`.
pub fn load_samples<'a>(
    records: impl IntoIterator<Item = &'a VolumeRecord>,
    normalize_volumes: bool,
) -> Result<Vec<Sample>> {
    let records: Vec<&VolumeRecord> = records.into_iter().collect();
    records
        .par_iter()
        .map(|r| {
            let raw = load_volume(&r.volume_path)?;
            let volume = if normalize_volumes {
                normalize(&raw)?
            } else {
                raw
            };
            Ok(Sample {
                subject_id: r.subject_id.clone(),
                scan_id: r.scan_id.clone(),
                label: r.label,
                volume,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub mean_loss: f32,
    pub metrics: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Vec<Duration>,
}

impl RunHistory {
    /// `epoch=<n> loss=<f> acc=<f> auc=<f>` lines; epochs without an
    /// evaluation print `nan`. With `timing`, each line is followed by a
    /// `time=` line.
    pub fn log(&self, timing: bool) -> String {
        let mut out = String::new();
        for (i, e) in self.epochs.iter().enumerate() {
            let (acc, auc) = e
                .metrics
                .map_or((f64::NAN, f64::NAN), |m| (m.accuracy, m.auc));
            let _ = writeln!(
                out,
                "epoch={} loss={:.6} acc={:.6} auc={:.6}",
                e.epoch, e.mean_loss, acc, auc
            );
            if timing {
                if let Some(t) = self.wall_clock.get(i) {
                    let _ = writeln!(out, "time=epoch{} seconds={:.3}", e.epoch, t.as_secs_f64());
                }
            }
        }
        out
    }
}

fn check_both_classes(samples: &[Sample]) -> Result<()> {
    let labels: BTreeSet<u8> = samples.iter().map(|s| s.label).collect();
    if labels.len() < 2 {
        return Err(Error::Argument(
            "training set must contain both classes".into(),
        ));
    }
    Ok(())
}

/// Trains from fresh initialisation, monitoring on the training set.
pub fn train(
    model: &MgNetConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(MgNetParams, RunHistory)> {
    train_monitored(model, samples, cfg, Some(samples))
}

pub fn train_monitored(
    model: &MgNetConfig,
    samples: &[Sample],
    cfg: &TrainConfig,
    monitor: Option<&[Sample]>,
) -> Result<(MgNetParams, RunHistory)> {
    let params = build(model)?;
    train_from(params, samples, cfg, monitor)
}

/// Continues training `params` in place of a fresh build.
pub fn train_from(
    mut params: MgNetParams,
    samples: &[Sample],
    cfg: &TrainConfig,
    monitor: Option<&[Sample]>,
) -> Result<(MgNetParams, RunHistory)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    check_both_classes(samples)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = RunHistory::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut loss_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(&Tensor, usize)> = batch
                .iter()
                .map(|&i| (&samples[i].volume, samples[i].label as usize))
                .collect();
            let (loss, grads) = loss_and_grad(&params, &items)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx + 1,
                    loss,
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            for (t, g) in params.tensors_mut().into_iter().zip(grads) {
                t.set_grad(g)?;
            }
            sgd_step(params.tensors_mut(), lr)?;
        }
        let mean_loss = (loss_sum / samples.len() as f64) as f32;

        let due = cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == cfg.epochs);
        let metrics = match monitor {
            Some(set) if due => Some(evaluate(&params, set)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            metrics,
        });
        history.wall_clock.push(started.elapsed());
    }
    Ok((params, history))
}

/// Positive-class probability and argmax prediction for every sample.
pub fn predict(params: &MgNetParams, samples: &[Sample]) -> Result<Vec<(f64, u8)>> {
    if params.config.num_classes != 2 {
        return Err(Error::Argument(format!(
            "binary evaluation needs a 2-class head, model has {}",
            params.config.num_classes
        )));
    }
    samples
        .par_iter()
        .map(|s| {
            let logits = forward(params, &s.volume)?;
            let z = logits.data();
            let p = softmax(z);
            Ok((p[1] as f64, (z[1] > z[0]) as u8))
        })
        .collect()
}

/// Per-scan metrics on `samples`.
pub fn evaluate(params: &MgNetParams, samples: &[Sample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let preds = predict(params, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let hard: Vec<u8> = preds.iter().map(|p| p.1).collect();
    EvalMetrics::compute(&labels, &hard, &scores)
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub train_scans: usize,
    pub test_scans: usize,
    pub metrics: EvalMetrics,
    pub history: RunHistory,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub summary: MetricSummary,
}

impl fmt::Display for CvReport {
    /// Per-fold metric blocks followed by the mean/std summary.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.folds {
            writeln!(f, "[fold {}]", r.fold)?;
            writeln!(f, "train_subjects={}", r.train_subjects)?;
            writeln!(f, "test_subjects={}", r.test_subjects)?;
            writeln!(f, "train_scans={}", r.train_scans)?;
            writeln!(f, "test_scans={}", r.test_scans)?;
            if let Some(last) = r.history.epochs.last() {
                writeln!(f, "final_loss={:.6}", last.mean_loss)?;
            }
            writeln!(f, "{}", r.metrics)?;
            writeln!(f)?;
        }
        writeln!(f, "[summary]")?;
        writeln!(f, "k={}", self.k)?;
        writeln!(f, "{}", self.summary)
    }
}

/// Runs one train/test round per fold of `folds`, each from fresh
/// initialisation, evaluating on the held-out subjects.
pub fn cross_validate(
    model: &MgNetConfig,
    manifest: &Manifest,
    folds: &FoldAssignment,
    cfg: &TrainConfig,
    normalize_volumes: bool,
) -> Result<CvReport> {
    model.validate()?;
    cfg.validate()?;
    if manifest.geometry[0] != model.input_channels {
        return Err(Error::Shape(format!(
            "model expects {} input channels, manifest geometry is {:?}",
            model.input_channels, manifest.geometry
        )));
    }
    let samples = load_samples(&manifest.records, normalize_volumes)?;

    let reports = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let mut train_set = Vec::new();
            let mut test_set = Vec::new();
            for s in &samples {
                let f = folds
                    .fold_of(&s.subject_id)
                    .ok_or_else(|| Error::Data(format!("subject {} has no fold", s.subject_id)))?;
                if f == fold {
                    test_set.push(s.clone());
                } else {
                    train_set.push(s.clone());
                }
            }
            let train_subjects: BTreeSet<&str> =
                train_set.iter().map(|s| s.subject_id.as_str()).collect();
            let test_subjects: BTreeSet<&str> =
                test_set.iter().map(|s| s.subject_id.as_str()).collect();
            if let Some(s) = train_subjects.intersection(&test_subjects).next() {
                return Err(Error::State(format!(
                    "subject {s} is on both sides of fold {fold}"
                )));
            }
            let (params, history) = train_monitored(model, &train_set, cfg, Some(&test_set))?;
            let metrics = evaluate(&params, &test_set)?;
            Ok(FoldReport {
                fold,
                train_subjects: train_subjects.len(),
                test_subjects: test_subjects.len(),
                train_scans: train_set.len(),
                test_scans: test_set.len(),
                metrics,
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics: Vec<EvalMetrics> = reports.iter().map(|r| r.metrics).collect();
    Ok(CvReport {
        k: folds.k,
        summary: MetricSummary::from_folds(&metrics),
        folds: reports,
    })
}
