//! Mini-batch training with per-epoch test evaluation, early stopping and
//! best-checkpoint persistence.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::data::{Sample, SplitDataset};
use crate::layers::ConvParams;
use crate::loss::{bce_with_logits, dice_loss, Loss, LossError};
use crate::metrics::{self, MetricsRecord};
use crate::model::{ModelError, TriChannelNet};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite { what: &'static str, epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: Loss,
    /// Epochs without test-IoU improvement before stopping; 0 disables. The
    /// count only starts once the best test IoU reaches [`PATIENCE_ARM_IOU`].
    pub patience: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Worker threads for per-sample work; 0 uses the rayon default.
    pub threads: usize,
    pub threshold: f32,
}

/// Best test IoU at which early stopping becomes active. Below it the network
/// still predicts (almost) all background and the IoU curve is flat at zero
/// no matter how well the loss is falling.
pub const PATIENCE_ARM_IOU: f64 = 0.5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::ADAM,
            seed: 1,
            loss: Loss::Bce,
            patience: 10,
            checkpoint_path: None,
            threads: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    /// Everything that influences the trained parameters, one `key=value` per
    /// line. Output paths and thread counts are left out.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let _ = writeln!(s, "optimizer=adam\nbeta1={beta1}\nbeta2={beta2}\neps={eps}");
            }
            OptimizerKind::SgdMomentum { momentum } => {
                let _ = writeln!(s, "optimizer=sgd\nmomentum={momentum}");
            }
        }
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "loss={}", if self.loss == Loss::Bce { "bce" } else { "dice" });
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "threshold={}", self.threshold);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_iou: f64,
    pub seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,test_iou,seconds";

impl EpochReport {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.3}", self.epoch, self.train_loss, self.test_iou, self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test IoU.
    pub net: TriChannelNet<f32>,
    pub best_epoch: usize,
    pub best_iou: f64,
    pub reports: Vec<EpochReport>,
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    net: &TriChannelNet<f32>,
    sample: &Sample,
    loss: Loss,
) -> Result<(f64, Vec<ConvParams<f32>>), TrainError> {
    let (out, trace) = net.forward(&sample.image)?;
    let (value, grads) = match loss {
        Loss::Bce => {
            let (l, g) = bce_with_logits(trace.logits(), &sample.mask)?;
            (l, net.backward_from_logits(&trace, &g)?)
        }
        Loss::Dice => {
            let (l, g) = dice_loss(&out, &sample.mask)?;
            (l, net.backward(&trace, &g)?)
        }
    };
    Ok((value as f64, grads.params))
}

/// Thresholded prediction for one sample.
pub fn predict_mask(net: &TriChannelNet<f32>, sample: &Sample, threshold: f32) -> Result<MetricsRecord, TrainError> {
    let prob = net.predict(&sample.image)?;
    let pred = metrics::threshold(&prob, threshold);
    Ok(MetricsRecord::evaluate(sample.id.clone(), &pred, &sample.mask).expect("binary masks of equal shape"))
}

/// Per-sample metrics over `samples`, in input order.
pub fn evaluate(
    net: &TriChannelNet<f32>,
    samples: &[Sample],
    threshold: f32,
    pool: &rayon::ThreadPool,
) -> Result<Vec<MetricsRecord>, TrainError> {
    pool.install(|| samples.par_iter().map(|s| predict_mask(net, s, threshold)).collect())
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| TrainError::Pool(e.to_string()))
}

fn all_finite(grads: &[ConvParams<f32>]) -> bool {
    grads.iter().all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
}

/// Trains `net` on `data.train`, evaluating mean test IoU after each epoch.
///
/// Per-sample gradients within a batch may be computed on several workers,
/// but they are always summed in batch order, so results do not depend on
/// the thread count.
pub fn train(
    mut net: TriChannelNet<f32>,
    data: &SplitDataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let pool = thread_pool(cfg.threads)?;
    // an empty test partition falls back to scoring the training set
    let eval_set = if data.test.is_empty() { &data.train } else { &data.test };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(usize, f64, TriChannelNet<f32>)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<ConvParams<f32>>), TrainError>> = pool.install(|| {
                batch.par_iter().map(|&i| sample_gradients(&net, &data.train[i], cfg.loss)).collect()
            });
            let mut total: Vec<ConvParams<f32>> = net.params().iter().map(ConvParams::zeros_like).collect();
            for r in results {
                let (l, g) = r?;
                if !l.is_finite() {
                    return Err(TrainError::NonFinite { what: "loss", epoch, batch: b + 1 });
                }
                loss_sum += l;
                total.iter_mut().zip(&g).for_each(|(t, g)| t.accumulate(g));
            }
            let scale = 1.0 / batch.len() as f32;
            total.iter_mut().for_each(|t| t.scale(scale));
            if !all_finite(&total) {
                return Err(TrainError::NonFinite { what: "gradient", epoch, batch: b + 1 });
            }
            net.apply_update(&total, &mut optimizer)?;
        }
        if !all_finite(net.params()) {
            return Err(TrainError::NonFinite { what: "parameter", epoch, batch: order.len().div_ceil(cfg.batch_size) });
        }
        let records = evaluate(&net, eval_set, cfg.threshold, &pool)?;
        let test_iou = records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            test_iou,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&report);
        reports.push(report);

        if best.as_ref().map_or(true, |(_, b, _)| test_iou > *b) {
            if let Some(path) = &cfg.checkpoint_path {
                let meta = CheckpointMeta { epoch: epoch as u32, best_iou: test_iou, seed: cfg.seed, config: cfg.echo() };
                Checkpoint { net: net.clone(), meta }.save(path)?;
            }
            best = Some((epoch, test_iou, net.clone()));
            stale = 0;
        } else if best.as_ref().is_some_and(|(_, b, _)| *b >= PATIENCE_ARM_IOU) {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_iou, net) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { net, best_epoch, best_iou, reports })
}
