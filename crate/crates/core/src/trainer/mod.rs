//! Mini-batch Adam training with validation-based early stopping.

mod adam;
mod runlog;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use runlog::{EpochRecord, RunLog, StepRecord, STEP_LOG_HEADER};

use crate::conceptset::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, encode_tensors, loss_and_grad, params_from_file, read_tensor_file, save_params,
    write_atomic, ModelParams,
};
use crate::objective::{LossBreakdown, ObjectiveConfig};
use crate::rng::{derive_seed, derive_seed_str, rng_from_seed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub objective: ObjectiveConfig,
    /// Fraction of sequences used for training; the rest validate.
    pub train_split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-5,
            batch_size: 2,
            max_epochs: 5,
            early_stop_patience: 2,
            seed: 0,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            objective: ObjectiveConfig::default(),
            train_split: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be >= 1"));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience {} exceeds max_epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return Err(Error::config(format!(
                "train split {} outside (0, 1)",
                self.train_split
            )));
        }
        self.adam.validate()?;
        self.objective.validate()
    }
}

/// Deterministic train/validation partition of `n` items.
pub fn split_indices(n: usize, train_split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed_str(seed, "split")));
    let n_train = if n <= 1 {
        n
    } else {
        ((n as f64 * train_split).floor() as usize).clamp(1, n - 1)
    };
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Resumable training session.
pub struct Trainer<'a, F: Scalar> {
    cfg: TrainConfig,
    train: Vec<&'a AnnotatedSequence>,
    val: Vec<AnnotatedSequence>,
    params: ModelParams<F>,
    adam: Adam<F>,
    best: ModelParams<F>,
    best_val: f64,
    since_best: usize,
    epoch: usize,
    stopped: bool,
    log: RunLog,
    started: Instant,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(
        params: ModelParams<F>,
        dataset: &'a [AnnotatedSequence],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes()?;
        if dataset.is_empty() {
            return Err(Error::EmptySet("training dataset".into()));
        }
        let (tr, va) = split_indices(dataset.len(), cfg.train_split, cfg.seed);
        let train: Vec<&AnnotatedSequence> = tr.iter().map(|&i| &dataset[i]).collect();
        let val: Vec<AnnotatedSequence> = if va.is_empty() {
            log::warn!("dataset too small for a validation split; validating on training data");
            train.iter().map(|&d| d.clone()).collect()
        } else {
            va.iter().map(|&i| dataset[i].clone()).collect()
        };
        let adam = Adam::new(&params, cfg.adam);
        let mut t = Self {
            cfg: cfg.clone(),
            train,
            val,
            best: params.clone(),
            params,
            adam,
            best_val: f64::INFINITY,
            since_best: 0,
            epoch: 0,
            stopped: false,
            log: RunLog::default(),
            started: Instant::now(),
        };
        let v = t.validate()?;
        t.best_val = v.combined;
        t.log.epochs.push(EpochRecord::new(0, None, &v));
        Ok(t)
    }

    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn best(&self) -> &ModelParams<F> {
        &self.best
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.max_epochs
    }

    fn validate(&self) -> Result<LossBreakdown> {
        batch_loss(&self.params, &self.val, &self.cfg.objective)
    }

    /// Runs one epoch and the validation pass after it.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::config("training already finished"));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let shuffle_seed = derive_seed(derive_seed_str(self.cfg.seed, "shuffle"), epoch as u64);
        order.shuffle(&mut rng_from_seed(shuffle_seed));
        let lr = F::lit(self.cfg.learning_rate);
        let mut totals = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<AnnotatedSequence> =
                chunk.iter().map(|&i| self.train[i].clone()).collect();
            let step = self.log.steps.len() + 1;
            let (b, grads) = match loss_and_grad(&self.params, &batch, &self.cfg.objective) {
                Ok(r) => r,
                Err(Error::Numerical(m)) => return Err(Error::Diverged { step, message: m }),
                Err(e) => return Err(e),
            };
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: "non-finite gradient".into(),
                });
            }
            self.adam.step(&mut self.params, &grads, lr);
            if !self.params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    message: "non-finite parameters after update".into(),
                });
            }
            totals.combined += b.combined;
            totals.gated_count += b.gated_count;
            totals.active_count += b.active_count;
            steps += 1;
            self.log.steps.push(StepRecord::new(step, epoch, &b));
        }
        let v = self.validate().map_err(|e| match e {
            Error::Numerical(m) => Error::Diverged {
                step: self.log.steps.len(),
                message: format!("validation: {m}"),
            },
            e => e,
        })?;
        let train_mean = totals.combined / steps.max(1) as f64;
        let mut rec = EpochRecord::new(epoch, Some(train_mean), &v);
        rec.train_gated_fraction = totals.gated_fraction();
        if v.combined < self.best_val {
            self.best_val = v.combined;
            self.best = self.params.clone();
            self.since_best = 0;
            self.log.best_epoch = epoch;
        } else {
            self.since_best += 1;
        }
        self.epoch = epoch;
        if self.since_best >= self.cfg.early_stop_patience && self.cfg.early_stop_patience > 0 {
            self.stopped = true;
        }
        self.log.stopping_epoch = epoch;
        self.log.wall_time_secs = self.started.elapsed().as_secs_f64();
        self.log.epochs.push(rec);
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    /// Best-validation parameters and the log.
    pub fn finish(mut self) -> (ModelParams<F>, RunLog) {
        self.log.wall_time_secs = self.started.elapsed().as_secs_f64();
        (self.best, self.log)
    }

    /// Persists everything needed to continue: parameters, optimizer moments,
    /// best checkpoint, counters and the log.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "trainer_state",
            "epoch": self.epoch,
            "stopped": self.stopped,
            "best_val": self.best_val,
            "since_best": self.since_best,
            "adam_t": self.adam.t,
            "config": self.cfg,
            "log": self.log,
        });
        let mut tensors: Vec<(String, &Tensor<F>)> = Vec::new();
        for (prefix, p) in [
            ("params.", &self.params),
            ("best.", &self.best),
            ("adam_m.", &self.adam.m),
            ("adam_v.", &self.adam.v),
        ] {
            for (name, t) in p.tensors() {
                tensors.push((format!("{prefix}{name}"), t));
            }
        }
        let bytes = encode_tensors(&self.params.config, &meta, &tensors)?;
        write_atomic(path, &bytes)
    }

    /// Restores a session saved by [`save_state`](Self::save_state) for the same dataset.
    pub fn load_state(
        path: &Path,
        dataset: &'a [AnnotatedSequence],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut file = read_tensor_file::<F>(path)?;
        let meta = file.meta.clone();
        if meta["kind"] != "trainer_state" {
            return Err(Error::Checkpoint(format!(
                "{} is not a trainer state",
                path.display()
            )));
        }
        let stored: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        if &stored != cfg {
            return Err(Error::Checkpoint(
                "trainer state was written with a different config".into(),
            ));
        }
        let params = params_from_file(&mut file, "params.")?;
        let best = params_from_file(&mut file, "best.")?;
        let m = params_from_file(&mut file, "adam_m.")?;
        let v = params_from_file(&mut file, "adam_v.")?;
        let mut t = Self::new(params, dataset, cfg)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("trainer state missing {k}")))
        };
        t.best = best;
        t.adam.m = m;
        t.adam.v = v;
        t.adam.t = serde_json::from_value(field("adam_t")?)?;
        t.epoch = serde_json::from_value(field("epoch")?)?;
        t.stopped = serde_json::from_value(field("stopped")?)?;
        t.best_val = serde_json::from_value(field("best_val")?)?;
        t.since_best = serde_json::from_value(field("since_best")?)?;
        t.log = serde_json::from_value(field("log")?)?;
        Ok(t)
    }
}

/// Trains to completion in memory, returning the best-validation parameters.
pub fn train<F: Scalar>(
    params: ModelParams<F>,
    dataset: &[AnnotatedSequence],
    cfg: &TrainConfig,
) -> Result<(ModelParams<F>, RunLog)> {
    let mut t = Trainer::new(params, dataset, cfg)?;
    while !t.is_finished() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// File names inside a run directory.
pub mod files {
    pub const STATE: &str = "state.bin";
    pub const BEST: &str = "best.bin";
    pub const STEPS: &str = "steps.csv";
    pub const LOG: &str = "runlog.json";
}

/// Trains with per-epoch state and best checkpoints under `dir`, resuming from
/// `dir/state.bin` when present. On divergence the best checkpoint on disk is
/// the last good one and the error is returned.
pub fn train_in_dir<F: Scalar>(
    params: ModelParams<F>,
    dataset: &[AnnotatedSequence],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(ModelParams<F>, RunLog)> {
    std::fs::create_dir_all(dir)?;
    let state = dir.join(files::STATE);
    let mut t = if state.exists() {
        Trainer::load_state(&state, dataset, cfg)?
    } else {
        Trainer::new(params, dataset, cfg)?
    };
    if !dir.join(files::BEST).exists() {
        save_params(
            &dir.join(files::BEST),
            t.best(),
            &serde_json::json!({"epoch": 0}),
        )?;
    }
    while !t.is_finished() {
        let before = t.log().best_epoch;
        t.run_epoch()?;
        if t.log().best_epoch != before {
            save_params(
                &dir.join(files::BEST),
                t.best(),
                &serde_json::json!({"epoch": t.epoch()}),
            )?;
        }
        t.save_state(&state)?;
    }
    let (best, log) = t.finish();
    log.write_steps_csv(&dir.join(files::STEPS))?;
    write_atomic(
        &dir.join(files::LOG),
        serde_json::to_string_pretty(&log)?.as_bytes(),
    )?;
    Ok((best, log))
}
