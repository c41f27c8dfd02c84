//! ANN training loop and bookkeeping shared with spike-based training.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::SliceSet;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{binarize, dice_2d};
use crate::optim::{AdamState, PlateauScheduler};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::segnet::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean 2D Dice over validation slices, in `[0, 1]`.
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch with the best validation loss (0 if no epoch ran).
    pub convergence_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    /// First epoch whose validation loss is at or below `level`.
    pub fn epochs_to_reach(&self, level: f64) -> Option<usize> {
        self.history.iter().find(|r| r.val_loss <= level).map(|r| r.epoch)
    }

    /// Epochs `self` and `other` each need to first reach the plateau both
    /// attain: the worse of their best validation losses, relaxed by `tol`.
    pub fn epochs_to_common_plateau(&self, other: &TrainReport, tol: f64) -> (usize, usize) {
        let level = self.best_val_loss.max(other.best_val_loss) * (1.0 + tol);
        let a = self.epochs_to_reach(level).unwrap_or(self.history.len());
        let b = other.epochs_to_reach(level).unwrap_or(other.history.len());
        (a, b)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingArtifact(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let bad = || Error::Config(format!("{}: malformed training history", path.display()));
        let mut r = TrainReport {
            best_val_loss: f64::INFINITY,
            ..Default::default()
        };
        for line in text.lines().skip(1) {
            if let Some(rest) = line.strip_prefix("# convergence_epoch,") {
                r.convergence_epoch = rest.trim().parse().map_err(|_| bad())?;
                continue;
            }
            let c: Vec<f64> = line.split(',').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            if c.len() != 5 {
                return Err(bad());
            }
            r.best_val_loss = r.best_val_loss.min(c[2]);
            r.history.push(EpochRecord {
                epoch: c[0] as usize,
                train_loss: c[1],
                val_loss: c[2],
                val_dice: c[3],
                lr: c[4],
            });
        }
        Ok(r)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_loss,val_dice,lr")?;
        for r in &self.history {
            writeln!(
                f,
                "{},{:.6},{:.6},{:.6},{:e}",
                r.epoch, r.train_loss, r.val_loss, r.val_dice, r.lr
            )?;
        }
        writeln!(f, "# convergence_epoch,{}", self.convergence_epoch)?;
        f.flush()?;
        Ok(())
    }
}

/// Hyperparameters common to ANN and SNN training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Stop after this many epochs without validation improvement.
    pub early_stop: Option<usize>,
    /// Use at most this many (shuffled) training slices per epoch.
    pub max_train_slices: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 26,
            lr: 1e-3,
            loss: LossConfig::default(),
            patience: 5,
            factor: 0.5,
            min_lr: 1e-6,
            early_stop: None,
            max_train_slices: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Shuffled slice order for `epoch`, truncated to `max_train_slices`.
    pub(crate) fn epoch_order(&self, n: usize, epoch: usize, stream_name: &str) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.seed, stream_name, epoch as u64));
        if let Some(m) = self.max_train_slices {
            order.truncate(m.max(1));
        }
        order
    }
}

/// Tracks the best validation loss and the weights that produced it.
pub(crate) struct BestTracker<S> {
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best_params: Option<Vec<(String, Tensor<S>)>>,
}

impl<S: Scalar> BestTracker<S> {
    pub fn new() -> Self {
        BestTracker {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
        }
    }

    /// Returns true if `loss` improved on the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64, params: &[(String, Tensor<S>)]) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best_params = Some(params.to_vec());
            true
        } else {
            false
        }
    }

    pub fn stale_for(&self, epoch: usize) -> usize {
        epoch - self.best_epoch
    }
}

/// Mean 2D Dice of thresholded predictions against masks.
pub(crate) fn mean_dice<S: Scalar>(pred: &Tensor<S>, masks: &Tensor<S>) -> Result<f64> {
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let mut total = 0.0;
    for i in 0..n {
        let p = binarize(&pred.data()[i * per..(i + 1) * per]);
        let r = binarize(&masks.data()[i * per..(i + 1) * per]);
        total += dice_2d(&p, &r)?;
    }
    Ok(total / n as f64)
}

/// Inference-mode ANN probabilities for a whole slice set, in chunks.
pub fn predict_ann<S: Scalar>(net: &Network<S>, images: &Tensor<S>, chunk: usize) -> Result<Tensor<S>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    let mut rng = stream(0, "unused", 0);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = SliceSet::gather(images, &idx)?;
        parts.extend(split_batch(&net.forward(&batch, false, &mut rng)?)?);
    }
    Tensor::stack_batch(&parts)
}

pub(crate) fn split_batch<S: Scalar>(t: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    (0..t.shape()[0]).map(|i| t.batch_item(i)).collect()
}

fn ann_epoch_loss<S: Scalar>(net: &Network<S>, set: &SliceSet<S>, loss: &LossConfig) -> Result<(f64, f64)> {
    let pred = predict_ann(net, &set.images, 32)?;
    let l = loss.evaluate(&pred, &set.masks)?.to_f64_lossy();
    Ok((l, mean_dice(&pred, &set.masks)?))
}

/// Trains the ANN with Adam and plateau scheduling on the training loss.
/// The returned network carries the weights of the best validation epoch.
pub fn train_ann<S: Scalar>(
    net: &mut Network<S>,
    train: &SliceSet<S>,
    val: &SliceSet<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = AdamState::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.patience, cfg.factor, cfg.min_lr);
    let mut best = BestTracker::new();
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let order = cfg.epoch_order(train.len(), epoch, "ann-shuffle");
        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = SliceSet::gather(&train.images, chunk)?;
            let y = SliceSet::gather(&train.masks, chunk)?;
            let mut tape = Tape::new();
            let params = net.param_leaves(&mut tape, true);
            let input = tape.leaf(x, false);
            let mut rng = stream(cfg.seed, "ann-dropout", ((epoch as u64) << 32) | bi as u64);
            let outs = net.forward_tape(&mut tape, input, &params, true, &mut rng)?;
            let prob = tape.sigmoid(*outs.last().expect("non-empty"))?;
            let loss = tape.loss(prob, &y, &cfg.loss)?;
            let lv = tape.value(loss).item()?.to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("ANN loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads: Vec<_> = params.iter().map(|&p| tape.take_grad(p)).collect();
            adam.step(&mut net.params, &grads)?;
            total += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = total / seen.max(1) as f64;
        adam.lr = sched.step(train_loss, adam.lr)?;
        let (val_loss, val_dice) = ann_epoch_loss(net, val, &cfg.loss)?;
        best.observe(epoch, val_loss, &net.params);
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice,
            lr: adam.lr,
        });
        log::info!("ann epoch {epoch}: train {train_loss:.4} val {val_loss:.4} dice {val_dice:.4}");
        if let Some(p) = cfg.early_stop {
            if best.stale_for(epoch) > p {
                break;
            }
        }
    }
    if let Some(p) = best.best_params.take() {
        net.params = p;
    }
    report.convergence_epoch = best.best_epoch;
    report.best_val_loss = best.best_loss;
    Ok(report)
}
