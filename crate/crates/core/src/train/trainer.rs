//! Epoch loop, evaluation and run bookkeeping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::augment::augment;
use super::data::{Dataset, Split};
use super::loss::{argmax, softmax_cross_entropy};
use super::schedule::LrSchedule;
use crate::error::{config_err, Error, Result};
use crate::model::{LayerGraph, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,loss,lr,top1";
pub const EPOCHS_HEADER: &str = "epoch,lr,train_loss,train_top1,test_loss,test_top1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub augment: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            schedule: LrSchedule::scaled(40),
            seed: 42,
            augment: true,
            checkpoint_every: 10,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        self.schedule.validate()
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.schedule.lr_at(epoch)
}

/// Optimizer state and the single random stream used for shuffling and
/// augmentation.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            adam: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Accuracy on the training batch.
    pub top1: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.step, self.loss, self.lr, self.top1
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub steps: usize,
}

/// Forward, backward and one optimizer step on a single batch. Returns the
/// batch loss and number of correct predictions.
pub fn train_step<T: Scalar>(
    graph: &mut LayerGraph<T>,
    x: Tensor<T>,
    labels: &[u8],
    lr: f64,
    state: &mut TrainState<T>,
    mode: &Mode,
) -> Result<(f64, usize)> {
    graph.zero_grad();
    let logits = graph.forward(x, mode)?;
    let out = softmax_cross_entropy(&logits, labels)?;
    let loss = out.loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: "loss".into(),
        });
    }
    graph.backward(out.grad)?;
    adam_step(graph, &mut state.adam, lr)?;
    state.step += 1;
    Ok((loss, out.correct))
}

/// One shuffled pass over `data`.
pub fn train_epoch<T: Scalar>(
    graph: &mut LayerGraph<T>,
    data: &Split,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    epoch: usize,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    let lr = lr_schedule(epoch, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mode = Mode::train();
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for idx in order.chunks(cfg.batch_size) {
        let (x, labels) = data.batch(idx);
        let x = augment(&x, cfg.augment, &mut state.rng);
        let (loss, ok) = train_step(graph, x.cast::<T>(), &labels, lr, state, &mode)?;
        loss_sum += loss * idx.len() as f64;
        correct += ok;
        steps += 1;
        sink(&StepRecord {
            epoch,
            step: state.step,
            loss,
            lr,
            top1: ok as f64 / idx.len() as f64,
        })?;
    }
    let n = data.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        loss: loss_sum / n,
        top1: correct as f64 / n,
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub loss: f64,
    pub count: usize,
}

/// Top-1 accuracy and mean loss with running BatchNorm statistics.
pub fn evaluate<T: Scalar>(
    graph: &mut LayerGraph<T>,
    data: &Split,
    batch_size: usize,
) -> Result<EvalResult> {
    let mode = Mode::eval();
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let logits = graph.forward(x.cast::<T>(), &mode)?;
        let k = logits.shape().c;
        for (n, &l) in labels.iter().enumerate() {
            if argmax(&logits.data()[n * k..(n + 1) * k]) == l as usize {
                correct += 1;
            }
        }
        loss += softmax_cross_entropy(&logits, &labels)?.loss.to_f64_lossy() * chunk.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        top1: correct as f64 / n,
        loss: loss / n,
        count: data.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunSummary {
    pub epochs: Vec<EpochSummary>,
}

impl RunSummary {
    pub fn final_test_top1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test.top1)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Full schedule. With `out_dir` set, writes `metrics.csv` (one row per
/// step), `epochs.csv`, `checkpoint_epoch<N>.elbn` every
/// `checkpoint_every` epochs and `final.elbn`.
pub fn run_training<T: Scalar>(
    graph: &mut LayerGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<RunSummary> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg.seed);
    let mut metrics = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let mut m = BufWriter::new(File::create(d.join("metrics.csv"))?);
            writeln!(m, "{METRICS_HEADER}")?;
            let mut e = BufWriter::new(File::create(d.join("epochs.csv"))?);
            writeln!(e, "{EPOCHS_HEADER}")?;
            Some((m, e))
        }
        None => None,
    };
    let mut summary = RunSummary::default();
    for epoch in 0..cfg.epochs {
        let m = train_epoch(graph, &data.train, cfg, &mut state, epoch, &mut |r| {
            if let Some((w, _)) = metrics.as_mut() {
                writeln!(w, "{}", r.csv_line())?;
            }
            Ok(())
        })?;
        let test = evaluate(graph, &data.test, cfg.eval_batch_size)?;
        let es = EpochSummary {
            epoch,
            lr: m.lr,
            train_loss: m.loss,
            train_top1: m.top1,
            test,
        };
        if let Some((mw, ew)) = metrics.as_mut() {
            writeln!(
                ew,
                "{},{},{},{},{},{}",
                epoch, m.lr, m.loss, m.top1, test.loss, test.top1
            )?;
            mw.flush()?;
            ew.flush()?;
        }
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                graph.save_checkpoint(&d.join(format!("checkpoint_epoch{}.elbn", epoch + 1)))?;
            }
        }
        progress(&es);
        summary.epochs.push(es);
    }
    if let Some((mut mw, mut ew)) = metrics {
        mw.flush()?;
        ew.flush()?;
    }
    if let Some(d) = out_dir {
        graph.save_checkpoint(&d.join("final.elbn"))?;
    }
    Ok(summary)
}
