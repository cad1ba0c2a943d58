//! SGD with Nesterov momentum, epoch-level validation, early stopping and repeated runs.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{batch_loss_and_grad, round_to_f32, build_model, ArchConfig, DetectError, DetectorModel, Detection, Gradients, Losses, Sample, Targets};
use crate::evaluate::{evaluate_split, EvalError, EvalOptions, EvalReport, RunMetrics};
use crate::fusion::VariantKind;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            batch_size: 4,
            patience_epochs: 10,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::ConfigInvalid(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

/// One SGD update of a flat parameter slice:
///
/// ```text
/// g' = grad + weight_decay * param
/// v  = momentum * v + g'
/// param -= lr * (g' + momentum * v)    (Nesterov)
/// param -= lr * v                      (classic momentum)
/// ```
pub fn sgd_nesterov_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &TrainConfig) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *v = cfg.momentum * *v + g;
        let step = if cfg.nesterov { g + cfg.momentum * *v } else { *v };
        *p -= cfg.learning_rate * step;
    }
    Ok(())
}

/// Velocity buffers for every model parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &DetectorModel) -> Self {
        Self { velocity: model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect() }
    }

    pub fn step(&mut self, model: &mut DetectorModel, grads: &Gradients, cfg: &TrainConfig) -> Result<(), TrainError> {
        if grads.tensors.len() != self.velocity.len() {
            return Err(TrainError::ShapeMismatch("gradient count does not match parameters".into()));
        }
        if grads.tensors.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient);
        }
        for ((p, g), v) in model.params_mut().iter_mut().zip(&grads.tensors).zip(&mut self.velocity) {
            sgd_nesterov_step(p.tensor.data_mut(), g.data(), v, cfg)?;
        }
        Ok(())
    }
}

/// Batch order of one epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("epoch-order", seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Scores a model after each epoch.
pub trait Evaluator {
    fn evaluate(&mut self, model: &DetectorModel, epoch: usize) -> Result<RunMetrics, TrainError>;
}

/// Inference settings used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_threshold: 0.5, max_detections: 100 }
    }
}

/// Runs [`DetectorModel::predict`] over every sample, in parallel, keeping sample order.
pub fn predict_all(model: &DetectorModel, samples: &[Sample], opts: &PredictOptions) -> Result<Vec<Vec<Detection>>, DetectError> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.input, opts.score_threshold, opts.nms_threshold, opts.max_detections))
        .collect()
}

pub fn evaluate_samples(
    model: &DetectorModel,
    samples: &[Sample],
    predict: &PredictOptions,
    eval: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    let preds = predict_all(model, samples, predict)?;
    let gts: Vec<Targets> = samples.iter().map(|s| s.targets.clone()).collect();
    Ok(evaluate_split(&preds, &gts, model.arch.num_classes, eval)?)
}

/// Evaluates on a fixed set of samples (normally the validation split).
pub struct SplitEvaluator<'a> {
    pub samples: &'a [Sample],
    pub predict: PredictOptions,
    pub eval: EvalOptions,
}

impl Evaluator for SplitEvaluator<'_> {
    fn evaluate(&mut self, model: &DetectorModel, _epoch: usize) -> Result<RunMetrics, TrainError> {
        Ok(evaluate_samples(model, self.samples, &self.predict, &self.eval)?.metrics())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub losses: Losses,
    pub val_map: f64,
    pub val_mean_precision: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the retained checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch && a.losses == b.losses && a.val_map == b.val_map && a.val_mean_precision == b.val_mean_precision
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,rpn_cls,rpn_reg,det_cls,det_reg,val_map,val_mean_precision,seconds\n");
        for e in &self.epochs {
            let l = &e.losses;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                e.epoch, l.rpn_cls, l.rpn_reg, l.det_cls, l.det_reg, e.val_map, e.val_mean_precision, e.seconds
            ));
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path, e: std::io::Error| TrainError::Io { path: path.display().to_string(), msg: e.to_string() };
        let csv = dir.join("history.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| io(&csv, e))?;
        let json = dir.join("history.json");
        fs::write(&json, serde_json::to_string_pretty(self).expect("history serializes")).map_err(|e| io(&json, e))
    }
}

/// Trains with early stopping on validation mAP.
///
/// After every epoch the evaluator scores the model; a strictly higher mAP
/// replaces the retained copy. Training stops after `patience_epochs`
/// consecutive epochs without improvement, or at `max_epochs`. Returns the
/// retained (best) model, not the last one.
pub fn train(
    mut model: DetectorModel,
    train_samples: &[Sample],
    evaluator: &mut dyn Evaluator,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut sgd = Sgd::new(&model);
    let mut best: Option<(DetectorModel, f64, usize)> = None;
    let mut epochs = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let order = epoch_order(train_samples.len(), cfg.seed, epoch);
        let mut epoch_losses = Losses::default();
        let n_batches = order.chunks(cfg.batch_size).len() as f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let (losses, grads) = match batch_loss_and_grad(&model, &batch) {
                Ok(v) => v,
                Err(DetectError::NonFinite) => return Err(TrainError::DivergedLoss { epoch }),
                Err(e) => return Err(e.into()),
            };
            if !losses.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            match sgd.step(&mut model, &grads, cfg) {
                Err(TrainError::NonFiniteGradient) => return Err(TrainError::DivergedLoss { epoch }),
                other => other?,
            }
            epoch_losses.rpn_cls += losses.rpn_cls / n_batches;
            epoch_losses.rpn_reg += losses.rpn_reg / n_batches;
            epoch_losses.det_cls += losses.det_cls / n_batches;
            epoch_losses.det_reg += losses.det_reg / n_batches;
        }
        let metrics = evaluator.evaluate(&model, epoch)?;
        let improved = best.as_ref().is_none_or(|(_, m, _)| metrics.map_50 > *m);
        if improved {
            best = Some((model.clone(), metrics.map_50, epoch));
            stale = 0;
        } else {
            stale += 1;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} (rpn {:.4}/{:.4}, det {:.4}/{:.4}) val mAP {:.4} MP {:.4}{}",
            epoch_losses.total(),
            epoch_losses.rpn_cls,
            epoch_losses.rpn_reg,
            epoch_losses.det_cls,
            epoch_losses.det_reg,
            metrics.map_50,
            metrics.mean_precision,
            if improved { " *" } else { "" }
        );
        epochs.push(EpochRecord {
            epoch,
            losses: epoch_losses,
            val_map: metrics.map_50,
            val_mean_precision: metrics.mean_precision,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stale >= cfg.patience_epochs {
            break;
        }
    }
    let (best_model, _, best_epoch) = best.expect("at least one epoch ran");
    Ok((best_model, TrainHistory { epochs, best_epoch }))
}

/// Samples of the three splits for one variant.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Result of one of the repeated runs.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_index: usize,
    pub seed: u64,
    pub model: DetectorModel,
    pub history: TrainHistory,
    pub test_report: EvalReport,
}

/// Trains `n_runs` independent models (seed `base + run_index`, used for both
/// weight init and batch order) and evaluates each retained model once on the
/// test split. Runs execute in parallel; results come back in run order.
pub fn run_repeated(
    variant: VariantKind,
    data: &PreparedSplits,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    predict: &PredictOptions,
    eval: &EvalOptions,
    n_runs: usize,
) -> Result<Vec<RunOutcome>, TrainError> {
    if n_runs == 0 {
        return Err(TrainError::ConfigInvalid("n_runs must be at least 1".into()));
    }
    (0..n_runs).into_par_iter().map(|i| run_single(variant, data, arch, cfg, predict, eval, i)).collect()
}

/// One run of [`run_repeated`].
pub fn run_single(
    variant: VariantKind,
    data: &PreparedSplits,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    predict: &PredictOptions,
    eval: &EvalOptions,
    run_index: usize,
) -> Result<RunOutcome, TrainError> {
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if data.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let seed = cfg.seed + run_index as u64;
    let run_cfg = TrainConfig { seed, ..cfg.clone() };
    let model = build_model(variant, arch, seed)?;
    let mut evaluator = SplitEvaluator { samples: &data.val, predict: *predict, eval: *eval };
    let (mut model, history) = train(model, &data.train, &mut evaluator, &run_cfg)?;
    // Score the weights exactly as a checkpoint stores them.
    round_to_f32(&mut model);
    let test_report = evaluate_samples(&model, &data.test, predict, eval)?;
    Ok(RunOutcome { run_index, seed, model, history, test_report })
}
