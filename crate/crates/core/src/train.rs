//! Episodic meta-training with validation-based model selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::episode::{derive_seed, sample_episode, ClassIndex, Episode, Split, TaskSpec, ValidatedSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate, FeatureClassifier};
use crate::model::ProxyNet;
use crate::nn::{apply_stat_updates, Ctx, Sgd};

/// Stream tags mixed into the run seed.
const STREAM_EPISODE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_delta: 1e-3,
            min_lr: 1e-4,
        }
    }
}

/// Quantity the learning-rate scheduler watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Higher is better.
    ValAccuracy,
    /// Lower is better.
    TrainLoss,
}

/// How validation episodes are chosen across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMode {
    /// A fresh set every epoch, seeded by `(seed, epoch)`.
    Resample,
    /// The same set every epoch.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_tasks: usize,
    /// Queries per class in validation episodes.
    pub val_query: usize,
    pub plateau: PlateauConfig,
    pub monitor: Monitor,
    pub val_mode: ValMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 600,
            episodes_per_epoch: 100,
            val_tasks: 600,
            val_query: 15,
            plateau: PlateauConfig::default(),
            monitor: Monitor::ValAccuracy,
            val_mode: ValMode::Resample,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        let p = &self.plateau;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(p.factor > 0.0 && p.factor < 1.0) {
            return bad(format!("plateau factor {} must lie in (0, 1)", p.factor));
        }
        if p.patience == 0 {
            return bad("plateau patience must be at least 1".into());
        }
        if !(p.min_delta >= 0.0 && p.min_lr >= 0.0) {
            return bad("plateau min_delta and min_lr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if self.episodes_per_epoch == 0 || self.val_tasks < 2 || self.val_query == 0 {
            return bad("episodes_per_epoch and val_query must be positive and val_tasks at least 2".into());
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub monitor: Monitor,
    lr: f64,
    best: Option<f64>,
    num_bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: PlateauConfig, monitor: Monitor) -> Self {
        Self {
            config,
            monitor,
            lr,
            best: None,
            num_bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric. After `patience` consecutive epochs without an
    /// improvement of more than `min_delta`, the rate becomes `max(lr·factor, min_lr)`
    /// and the counter restarts.
    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match (self.best, self.monitor) {
            (None, _) => true,
            (Some(b), Monitor::ValAccuracy) => metric > b + self.config.min_delta,
            (Some(b), Monitor::TrainLoss) => metric < b - self.config.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.num_bad = 0;
        } else {
            self.num_bad += 1;
            if self.num_bad >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr).min(self.lr);
                self.num_bad = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_acc, r.lr));
    }
    out
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub spec: TaskSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub sgd: Sgd<f32>,
    pub scheduler: PlateauScheduler,
    pub history: Vec<HistoryRow>,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub struct TrainOutcome {
    /// Checkpoint of the epoch with the highest validation accuracy (earliest on ties).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<HistoryRow>,
}

pub struct Trainer<'a> {
    pub model: ProxyNet<f32>,
    dataset: &'a Dataset,
    split: ValidatedSplit,
    state: TrainState,
    best: Option<Checkpoint>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ProxyNet<f32>, dataset: &'a Dataset, spec: TaskSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState {
            sgd: Sgd::new(config.momentum, config.weight_decay),
            scheduler: PlateauScheduler::new(config.lr, config.plateau.clone(), config.monitor),
            config,
            spec,
            epoch: 0,
            history: Vec::new(),
            best_val_acc: None,
            best_epoch: None,
        };
        Self::with_state(model, dataset, state, None)
    }

    /// Continues from a checkpoint that carries training state.
    pub fn resume(checkpoint: &Checkpoint, dataset: &'a Dataset, best: Option<Checkpoint>) -> Result<Self> {
        let state = checkpoint
            .state
            .clone()
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no training state".into()))?;
        Self::with_state(checkpoint.restore()?, dataset, state, best)
    }

    fn with_state(model: ProxyNet<f32>, dataset: &'a Dataset, state: TrainState, best: Option<Checkpoint>) -> Result<Self> {
        state.spec.validate()?;
        crate::nn::alloc::retain_freed_memory();
        if dataset.image_size() != model.config.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![3, model.config.image_size, model.config.image_size],
                got: vec![3, dataset.image_size(), dataset.image_size()],
            });
        }
        let split = dataset.validated()?;
        let probe = |split_idx: Split, spec: TaskSpec| sample_episode(split.index(split_idx), spec, &mut ChaCha8Rng::seed_from_u64(0)).map(|_| ());
        probe(Split::Train, state.spec)?;
        probe(Split::Val, val_spec(&state))?;
        Ok(Self {
            model,
            dataset,
            split,
            state,
            best,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn lr(&self) -> f64 {
        self.state.scheduler.lr()
    }

    /// One optimizer step on one sampled episode; returns the episode loss.
    pub fn train_episode(&mut self, epoch: usize, episode: usize) -> Result<f64> {
        let seed = self.state.config.seed;
        let ep = training_episode(self.split.index(Split::Train), self.state.spec, seed, epoch, episode)?;
        let aug = derive_seed(seed, &[STREAM_AUGMENT, epoch as u64, episode as u64]);
        let mut ids = ep.support_ids();
        ids.extend(ep.query_ids());
        let images = self.dataset.batch(&ids, true, aug)?;
        let ns = ep.support.len();
        let support = images.select_rows(&(0..ns).collect::<Vec<_>>());
        let queries = images.select_rows(&(ns..ids.len()).collect::<Vec<_>>());

        let (grads, updates, loss) = {
            let mut ctx = Ctx::train(&self.model.params);
            let logits = self.model.episode_logits(&mut ctx, support, queries, ep.spec.n_way)?;
            let loss = ctx.tape.cross_entropy(logits, &ep.query_labels());
            let value = ctx.tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, episode });
            }
            (ctx.tape.backward(loss), std::mem::take(&mut ctx.stat_updates), value)
        };
        let lr = self.state.scheduler.lr();
        self.state.sgd.step(&mut self.model.params, &grads, lr);
        apply_stat_updates(&mut self.model.params, &updates);
        Ok(loss)
    }

    /// Mean accuracy over the validation tasks of `epoch`.
    pub fn validate(&self, epoch: usize) -> Result<f64> {
        let cfg = &self.state.config;
        let seed = validation_seed(cfg, epoch);
        let index = self.split.index(Split::Val);
        let classifier = FeatureClassifier::new(&self.model, self.dataset, index)?;
        Ok(evaluate(&classifier, index, val_spec(&self.state), cfg.val_tasks, seed)?.mean)
    }

    /// Trains one epoch, validates, and steps the scheduler.
    pub fn run_epoch(&mut self) -> Result<HistoryRow> {
        let epoch = self.state.epoch;
        let lr = self.lr();
        let mut total = 0.0;
        for episode in 0..self.state.config.episodes_per_epoch {
            total += self.train_episode(epoch, episode)?;
        }
        let train_loss = total / self.state.config.episodes_per_epoch as f64;
        let val_acc = self.validate(epoch)?;
        self.state.scheduler.step(match self.state.config.monitor {
            Monitor::ValAccuracy => val_acc,
            Monitor::TrainLoss => train_loss,
        });
        let row = HistoryRow {
            epoch,
            train_loss,
            val_acc,
            lr,
        };
        self.state.history.push(row.clone());
        self.state.epoch += 1;
        if self.state.best_val_acc.map_or(true, |b| val_acc > b) {
            self.state.best_val_acc = Some(val_acc);
            self.state.best_epoch = Some(epoch);
            self.best = Some(self.checkpoint());
        }
        Ok(row)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(mut self, mut on_epoch: impl FnMut(&HistoryRow, &Trainer<'_>) -> Result<()>) -> Result<TrainOutcome> {
        while self.state.epoch < self.state.config.epochs {
            let row = self.run_epoch()?;
            on_epoch(&row, &self)?;
        }
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best: self.best.unwrap_or_else(|| last.clone()),
            history: self.state.history,
            last,
        })
    }

    pub fn best(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, Some(self.state.clone()))
    }
}

/// The episode drawn for optimizer step `episode` of `epoch`.
pub fn training_episode(index: &ClassIndex, spec: TaskSpec, seed: u64, epoch: usize, episode: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_EPISODE, epoch as u64, episode as u64]));
    sample_episode(index, spec, &mut rng)
}

/// Seed of the validation tasks used after `epoch`.
pub fn validation_seed(config: &TrainConfig, epoch: usize) -> u64 {
    match config.val_mode {
        ValMode::Resample => derive_seed(config.seed, &[STREAM_VALIDATION, epoch as u64]),
        ValMode::Fixed => derive_seed(config.seed, &[STREAM_VALIDATION]),
    }
}

fn val_spec(state: &TrainState) -> TaskSpec {
    TaskSpec {
        t_query: state.config.val_query,
        ..state.spec
    }
}
