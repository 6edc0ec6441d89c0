//! Training loop with inverse-frequency oversampling, shift augmentation,
//! validation-driven early stopping and one learning-rate drop.

mod checkpoint;
mod pipeline;
mod sweep;

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pipeline::{cache_dir_from_env, InitRecord, Pipeline, source_indices, TrainedModel, CACHE_ENV};
pub use sweep::{
    best_window, capacity_sweep, neighborhood_sweep, window_sweep, write_capacity_csv, write_neighborhood_csv, write_window_csv,
    CapacityRow, NeighborhoodRow, WindowRow,
};

use crate::data::{augment_shift, BatchSampler, Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, confusion, ConfusionMatrix};
use crate::model::{slice_first, Network};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    /// Epochs without validation improvement before the lr drop / stop.
    pub patience: usize,
    /// Learning-rate divisor at a drop.
    pub decay: f64,
    pub max_drops: usize,
    /// Hard cap on epochs regardless of the schedule.
    pub max_epochs: usize,
    pub seed: u64,
    /// Largest shift as a fraction of the neighborhood side.
    pub shift_frac: f64,
    /// Whether the reference source is shifted too.
    pub augment_reference: bool,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            l2: 1e-5,
            batch: 100,
            patience: 200,
            decay: 10.0,
            max_drops: 1,
            max_epochs: 100_000,
            seed: 0,
            shift_frac: 0.2,
            augment_reference: true,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.decay > 1.0) {
            return bad("lr decay factor must exceed 1");
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch cap must be positive");
        }
        if !(self.lr > 0.0) || !(self.l2 >= 0.0) {
            return bad("lr must be positive and l2 nonnegative");
        }
        if !(0.0..1.0).contains(&self.shift_frac) {
            return bad("shift fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Stable text form, part of cache keys.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "lr: {}", self.lr).unwrap();
        writeln!(s, "l2: {}", self.l2).unwrap();
        writeln!(s, "batch: {}", self.batch).unwrap();
        writeln!(s, "patience: {}", self.patience).unwrap();
        writeln!(s, "decay: {}", self.decay).unwrap();
        writeln!(s, "max_drops: {}", self.max_drops).unwrap();
        writeln!(s, "max_epochs: {}", self.max_epochs).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "shift_frac: {}", self.shift_frac).unwrap();
        writeln!(s, "augment_reference: {}", self.augment_reference).unwrap();
        s
    }
}

/// What the schedule asks for after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Improved,
    Stalled,
    /// Restore the best state and divide the learning rate.
    DropLr,
    Stop,
}

/// Patience-based schedule: the first stall drops the learning rate, the
/// stall after the last allowed drop stops training.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub max_drops: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub stalled: usize,
    pub drops: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, max_drops: usize) -> Self {
        Self {
            patience,
            max_drops,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stalled: 0,
            drops: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Event {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stalled = 0;
            return Event::Improved;
        }
        self.stalled += 1;
        if self.stalled < self.patience {
            return Event::Stalled;
        }
        self.stalled = 0;
        if self.drops < self.max_drops {
            self.drops += 1;
            Event::DropLr
        } else {
            Event::Stop
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub normalized_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "split", "loss", "normalized_accuracy", "lr"])?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.split.to_string(),
                format!("{:.8}", r.loss),
                format!("{:.8}", r.normalized_accuracy),
                format!("{:e}", r.lr),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn epochs(&self) -> usize {
        self.records.iter().map(|r| r.epoch).max().unwrap_or(0)
    }

    pub fn val(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.split == "val")
    }
}

/// Result of one training run; the store holds the best parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val: f64,
    pub optimizer: AdamState,
    pub lr_drops: usize,
}

/// Metrics over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub normalized_accuracy: f64,
    pub kappa: Option<f64>,
    pub loss: f64,
    pub probs: Tensor<f32>,
}

/// Evaluates `net` on `data`, reading the given dataset sources.
pub fn evaluate(net: &Network, store: &ParamStore<f32>, data: &Dataset, sources: &[usize]) -> Result<Evaluation> {
    let probs = net.predict_dataset(store, data, sources)?;
    let c = net.classes();
    let labels: Vec<usize> = data.labels.iter().map(|&l| l as usize).collect();
    let preds = argmax_rows(probs.data(), c);
    let cm = confusion(&preds, &labels, c)?;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs.data()[i * c + l].max(1e-30) as f64).ln())
        .sum::<f64>()
        / labels.len().max(1) as f64;
    Ok(Evaluation {
        normalized_accuracy: cm.normalized_accuracy()?,
        kappa: cm.kappa().ok(),
        confusion: cm,
        loss,
        probs,
    })
}

/// Stacks a batch from `data`, shifting each sample image independently.
fn make_batch(
    data: &Dataset,
    indices: &[usize],
    sources: &[usize],
    config: &TrainConfig,
    reference: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    let batch = data.batch(indices, sources);
    let mut inputs = Vec::with_capacity(sources.len());
    for (t, &s) in batch.inputs.into_iter().zip(sources) {
        if config.shift_frac == 0.0 || (!config.augment_reference && Some(s) == reference) {
            inputs.push(t);
            continue;
        }
        let shifted = (0..indices.len())
            .map(|i| augment_shift(&t.index_first(i), config.shift_frac, rng))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(Tensor::stack(&shifted)?);
    }
    Ok((inputs, batch.labels))
}

fn snapshot(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

fn restore(store: &mut ParamStore<f32>, snap: &[Vec<f32>]) {
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
}

/// Trains the trainable parameters of `net` in place. On return `store`
/// holds the parameters of the best validation epoch.
pub fn train(
    net: &Network,
    store: &mut ParamStore<f32>,
    data: &SplitDataset,
    sources: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let reference = data
        .sources()
        .iter()
        .position(|s| s.role == crate::data::Role::Reference);
    let train_set = &data.train;
    let sampler = BatchSampler::new(&train_set.labels, train_set.classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        store,
        AdamConfig {
            lr: config.lr,
            l2: config.l2,
            ..AdamConfig::default()
        },
    );
    let mut schedule = EarlyStopping::new(config.patience, config.max_drops);
    let mut history = History::default();
    let mut best = (snapshot(store), adam.clone());
    let classes = net.classes();

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut preds = Vec::new();
        let mut seen = Vec::new();
        let batches = sampler.epoch(config.batch, &mut rng);
        for (b, idx) in batches.iter().enumerate() {
            let (inputs, labels) = make_batch(train_set, idx, sources, config, reference, &mut rng)?;
            let dropout_seed: u64 = rng.random();
            let grads: Vec<(ParamId, Vec<f32>)> = {
                let mut g = Graph::new(store).training(dropout_seed);
                let vars: Vec<_> = inputs.into_iter().map(|t| g.input(t)).collect();
                let out = net.forward(&mut g, &vars)?;
                preds.extend(argmax_rows(g.value(out.scores), classes));
                seen.extend_from_slice(&labels);
                let loss = g.cross_entropy(out.scores, &labels)?;
                let lv = g.value(loss)[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b + 1,
                        what: "loss",
                        param: "<loss>".into(),
                    });
                }
                loss_sum += lv;
                g.backward(loss)?;
                g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect()
            };
            adam.step(store, &grads).map_err(|e| match e {
                Error::Divergence { what, param, .. } => Error::Divergence {
                    epoch,
                    batch: b + 1,
                    what,
                    param,
                },
                other => other,
            })?;
        }
        let train_acc = confusion(&preds, &seen, classes)?
            .per_class_report()
            .map(|r| r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64)
            .unwrap_or(f64::NAN);
        history.records.push(EpochRecord {
            epoch,
            split: "train",
            loss: loss_sum / batches.len() as f64,
            normalized_accuracy: train_acc,
            lr: adam.lr(),
        });
        let val = evaluate(net, store, &data.val, sources)?;
        history.records.push(EpochRecord {
            epoch,
            split: "val",
            loss: val.loss,
            normalized_accuracy: val.normalized_accuracy,
            lr: adam.lr(),
        });
        if config.verbose {
            eprintln!(
                "epoch {epoch:4}  train loss {:.4}  val loss {:.4}  val acc {:.4}  lr {:e}",
                loss_sum / batches.len() as f64,
                val.loss,
                val.normalized_accuracy,
                adam.lr()
            );
        }
        match schedule.observe(epoch, val.normalized_accuracy) {
            Event::Improved => best = (snapshot(store), adam.clone()),
            Event::Stalled => {}
            Event::DropLr => {
                restore(store, &best.0);
                let lr = adam.lr() / config.decay;
                adam = best.1.clone();
                adam.set_lr(lr);
            }
            Event::Stop => break,
        }
    }
    restore(store, &best.0);
    Ok(TrainOutcome {
        history,
        best_epoch: schedule.best_epoch,
        best_val: schedule.best,
        optimizer: best.1,
        lr_drops: schedule.drops,
    })
}

/// Training-mode minibatch view used by sweeps and tests: the first `n`
/// samples of every requested source.
pub fn head_inputs(data: &Dataset, sources: &[usize], n: usize) -> Result<Vec<Tensor<f32>>> {
    sources
        .iter()
        .map(|&s| slice_first(&data.images[s], 0, n.min(data.len())))
        .collect()
}
