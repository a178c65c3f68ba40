//! The epoch loop: shuffled mini-batches, Adam updates, per-epoch metrics,
//! CSV history and a best-IoU checkpoint.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{stack, SamplePair};
use crate::error::{Error, Result};
use crate::loss::{loss, LossKind};
use crate::metrics::{Averaging, MetricAccumulator, Scores, DEFAULT_THRESHOLD};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::param::Module;
use crate::tensor::Tensor;

pub const HISTORY_HEADER: [&str; 10] = [
    "epoch",
    "step",
    "lr",
    "loss",
    "precision",
    "f1",
    "iou",
    "val_precision",
    "val_f1",
    "val_iou",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub loss: LossKind,
    pub averaging: Averaging,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            threshold: DEFAULT_THRESHOLD,
            loss: LossKind::Bce,
            averaging: Averaging::Micro,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} is not in (0, 1)", self.threshold)));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Scores of the training-mode predictions made during the epoch.
    pub train: Scores,
    pub val: Option<Scores>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HISTORY_HEADER).expect("in-memory write");
        for r in &self.records {
            let val = |f: fn(&Scores) -> f64| r.val.as_ref().map(|s| f(s).to_string()).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.train.precision.to_string(),
                r.train.f1.to_string(),
                r.train.iou.to_string(),
                val(|s| s.precision),
                val(|s| s.f1),
                val(|s| s.iou),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if monitored(b) >= monitored(r) => Some(b),
            _ => Some(r),
        })
    }
}

/// Validation IoU when there is a validation set, training IoU otherwise.
fn monitored(r: &EpochRecord) -> f64 {
    r.val.map_or(r.train.iou, |v| v.iou)
}

/// One forward/backward/update on a batch. Returns the loss and the
/// training-mode predictions.
pub fn train_step(model: &Model, opt: &mut Adam, x: &Tensor, y: &Tensor, kind: LossKind) -> Result<(f64, Tensor)> {
    model.zero_grad();
    let pred = model.forward(x, true)?;
    let l = loss(kind, &pred, y)?;
    l.backward()?;
    let params = model.parameters();
    let refs: Vec<_> = params.iter().map(|(_, p)| *p).collect();
    opt.step(&refs)?;
    Ok((l.item()?, pred.detach()))
}

/// Inference-mode metrics over `samples`, through [`Model::predict`].
pub fn evaluate(
    model: &Model,
    samples: &[SamplePair],
    batch_size: usize,
    threshold: f64,
    averaging: Averaging,
) -> Result<(Scores, MetricAccumulator)> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut acc = MetricAccumulator::default();
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let pred = model.predict(&x)?;
        acc.add_batch(&pred, &y, threshold)?;
    }
    Ok((acc.scores(averaging), acc))
}

/// Trains `model` in place. Each epoch visits the training samples in a
/// fresh seeded order. When `checkpoint_path` is given, the model is saved
/// there whenever the monitored IoU improves.
pub fn train(
    model: &Model,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("the training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.optimizer.clone())?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = MetricAccumulator::default();
        let mut loss_sum = 0.0;
        let mut lr = opt.current_lr();
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&SamplePair> = batch.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = stack(&refs)?;
            lr = opt.current_lr();
            let (l, pred) = train_step(model, &mut opt, &x, &y, cfg.loss)?;
            loss_sum += l * batch.len() as f64;
            acc.add_batch(&pred, &y, cfg.threshold)?;
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(model, val_set, cfg.batch_size, cfg.threshold, cfg.averaging)?.0)
        };
        let record = EpochRecord {
            epoch,
            step: opt.t,
            lr,
            loss: loss_sum / train_set.len() as f64,
            train: acc.scores(cfg.averaging),
            val,
        };
        if let Some(path) = checkpoint_path {
            if monitored(&record) > best {
                best = monitored(&record);
                checkpoint::save(model, path)?;
            }
        }
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}
