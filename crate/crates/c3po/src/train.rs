//! Optimisation loop, per-epoch evaluation and checkpointing.
//!
//! Each epoch shuffles the training set with a seed derived from
//! `(seed, epoch)`, so a run resumed from `last.ckpt` replays exactly the
//! batches an uninterrupted run would have seen. Adam's moment buffers are
//! stored in the checkpoint next to the parameters.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Entry};
use crate::config::DataSource;
use crate::data::{augment, batch_tensors, class_counts, splitmix64, AugmentOp, ChangeSample};
use crate::error::{Error, Result};
use crate::head::predict_mask;
use crate::metrics::{evaluate_masks, weighted_ce_loss, BestLast, ClassWeights, MetricsReport};
use crate::model::{load_entries, to_entries, ModelConfig, Network};
use crate::mtf::BranchSet;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{NoGradGuard, Tensor};

pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate before cosine decay.
    pub lr: f64,
    /// Evaluate on the test split after every epoch (otherwise only after the last).
    pub eval_every_epoch: bool,
    /// Where `last.ckpt`, `best.ckpt` and the log go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
    /// Training data; the CLI's `--data` flag overrides it.
    pub data: DataSource,
    /// Seed of the batch order and augmentation.
    pub seed: u64,
    pub augment: Vec<AugmentOp>,
    /// Synthetic training/test sample counts when training on generated data.
    pub train_samples: usize,
    pub test_samples: usize,
    /// Seed of the generated dataset.
    pub data_seed: u64,
    /// Train share when a dataset directory has no `train/`/`test/` split.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            eval_every_epoch: true,
            checkpoint_dir: None,
            data: DataSource::Synth,
            seed: 0,
            augment: Vec::new(),
            train_samples: 320,
            test_samples: 96,
            data_seed: 1,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Change F1 (binary) or mIoU (multi-class); `None` when not evaluated.
    pub metric: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// JSON stored next to every checkpoint as `<file>.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub global_step: u64,
    pub class_weights: ClassWeights,
    /// Metrics of the parameters in this checkpoint, if evaluated.
    pub metrics: Option<MetricsReport>,
    pub best: Option<MetricsReport>,
    pub history: Vec<EpochRecord>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_sidecar(ckpt: &Path) -> Result<Sidecar> {
    let path = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the network from a checkpoint and its sidecar.
pub fn load_model(ckpt: &Path) -> Result<(Network, ParamStore, Sidecar)> {
    let sidecar = read_sidecar(ckpt)?;
    let (net, mut params) = Network::build(&sidecar.model)?;
    load_entries(&mut params, &checkpoint::read(ckpt)?, &[])?;
    Ok((net, params, sidecar))
}

/// Per-pixel class predictions, one mask per sample.
pub fn predict(
    net: &Network,
    params: &ParamStore,
    samples: &[ChangeSample],
    batch_size: usize,
    active: Option<BranchSet>,
) -> Result<Vec<Vec<u8>>> {
    let _guard = NoGradGuard::new();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ChangeSample> = chunk.iter().collect();
        let (t0, t1, _) = batch_tensors::<f32>(&refs)?;
        let logits = net.forward_active(params, &t0, &t1, active.unwrap_or(net.config.branches))?;
        let mask = predict_mask(&logits);
        let plane = chunk[0].pixels();
        out.extend(mask.chunks(plane).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Evaluates without touching parameters.
pub fn evaluate(net: &Network, params: &ParamStore, samples: &[ChangeSample], batch_size: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    for s in samples {
        s.validate(net.config.num_classes)?;
    }
    let preds = predict(net, params, samples, batch_size, None)?;
    evaluate_masks(preds.iter().map(Vec::as_slice).zip(samples.iter().map(|s| s.mask.as_slice())), net.config.num_classes)
}

/// Training state: network, parameters, optimizer and progress.
pub struct Trainer {
    pub net: Network,
    pub params: ParamStore,
    pub config: TrainConfig,
    pub weights: ClassWeights,
    adam: Adam,
    epochs_done: usize,
    global_step: u64,
    total_steps: u64,
    history: Vec<EpochRecord>,
    tracker: BestLast,
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best: MetricsReport,
    pub last: MetricsReport,
}

impl Trainer {
    /// Fresh network from `model.seed`; class weights from the training masks.
    pub fn new(model: &ModelConfig, config: &TrainConfig, train: &[ChangeSample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        for s in train {
            s.validate(model.num_classes)?;
        }
        let (net, params) = Network::build(model)?;
        let counts = class_counts(train.iter().map(|s| s.mask.as_slice()), model.num_classes)?;
        let weights = ClassWeights::from_counts(&counts)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &params,
        );
        let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
        Ok(Trainer {
            net,
            params,
            config: config.clone(),
            weights,
            adam,
            epochs_done: 0,
            global_step: 0,
            total_steps: steps_per_epoch * config.epochs as u64,
            history: Vec::new(),
            tracker: BestLast::default(),
        })
    }

    /// Continues from a checkpoint written by [`save`](Self::save).
    pub fn resume(ckpt: &Path, train: &[ChangeSample]) -> Result<Self> {
        let sidecar = read_sidecar(ckpt)?;
        let mut t = Trainer::new(&sidecar.model, &sidecar.train, train)?;
        let entries = checkpoint::read(ckpt)?;
        load_entries(&mut t.params, &entries, &[])?;
        let by_name: std::collections::HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        t.adam
            .restore(&t.params, sidecar.global_step, |k| by_name.get(k).map(|e| e.data.clone()))?;
        t.weights = sidecar.class_weights;
        t.epochs_done = sidecar.epoch;
        t.global_step = sidecar.global_step;
        t.history = sidecar.history;
        t.tracker.best = sidecar.best;
        t.tracker.last = sidecar.metrics;
        Ok(t)
    }

    /// Changes the run length, re-spanning the cosine schedule over the new
    /// total. Used to extend a finished run; the remaining steps then anneal
    /// from the schedule's value at the current step.
    pub fn set_epochs(&mut self, epochs: usize, train_len: usize) -> Result<()> {
        if epochs == 0 || epochs < self.epochs_done {
            return Err(Error::Config(format!(
                "epochs must be positive and at least the {} already trained",
                self.epochs_done
            )));
        }
        self.config.epochs = epochs;
        self.total_steps = train_len.div_ceil(self.config.batch_size) as u64 * epochs as u64;
        Ok(())
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Writes parameters plus optimizer state and the JSON sidecar.
    pub fn save(&self, path: &Path, metrics: Option<&MetricsReport>) -> Result<()> {
        let mut entries = to_entries(&self.params);
        entries.extend(self.adam.state(&self.params).into_iter().map(|(name, shape, data)| Entry { name, shape, data }));
        checkpoint::write(path, &entries)?;
        let sidecar = Sidecar {
            model: self.net.config.clone(),
            train: self.config.clone(),
            epoch: self.epochs_done,
            global_step: self.global_step,
            class_weights: self.weights.clone(),
            metrics: metrics.cloned(),
            best: self.tracker.best.clone(),
            history: self.history.clone(),
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let seed = splitmix64(self.config.seed ^ splitmix64(epoch as u64));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One optimisation step on a batch; returns `(loss, lr)`.
    pub fn step(&mut self, batch: &[&ChangeSample]) -> Result<(f64, f64)> {
        let (t0, t1, labels) = batch_tensors::<f32>(batch)?;
        let logits = self.net.forward(&self.params, &t0, &t1)?;
        let loss = weighted_ce_loss(&logits, &labels, &self.weights, self.net.config.use_weighted_loss)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epochs_done + 1,
                batch: 0,
            });
        }
        loss.backward()?;
        let position = self.global_step as f64 / self.total_steps.max(1) as f64;
        let lr = self.adam.step(&mut self.params, position)?;
        self.global_step += 1;
        Ok((value, lr))
    }

    /// Trains one epoch and, if configured, evaluates on `test`.
    pub fn run_epoch(&mut self, train: &[ChangeSample], test: &[ChangeSample]) -> Result<(EpochRecord, Option<MetricsReport>)> {
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(epoch, train.len());
        let augmented: Vec<ChangeSample>;
        let samples: Vec<&ChangeSample> = if self.config.augment.is_empty() {
            order.iter().map(|&i| &train[i]).collect()
        } else {
            augmented = order
                .iter()
                .map(|&i| {
                    let seed = splitmix64(self.config.seed ^ splitmix64((epoch as u64) << 32 | i as u64));
                    augment(&train[i], &self.config.augment, seed)
                })
                .collect();
            augmented.iter().collect()
        };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for (b, batch) in samples.chunks(self.config.batch_size).enumerate() {
            let (loss, step_lr) = self.step(batch).map_err(|e| match e {
                Error::NonFiniteLoss { epoch, .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
            lr = step_lr;
        }
        self.epochs_done = epoch;
        let evaluate_now = !test.is_empty() && (self.config.eval_every_epoch || epoch == self.config.epochs);
        let report = if evaluate_now {
            let mut r = evaluate(&self.net, &self.params, test, self.config.batch_size.max(16))?;
            r.epoch = Some(epoch);
            Some(r)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            metric: report.as_ref().map(MetricsReport::selection_metric),
            precision: report.as_ref().map(|r| r.precision),
            recall: report.as_ref().map(|r| r.recall),
            lr,
        };
        self.history.push(record.clone());
        Ok((record, report))
    }

    /// Runs the remaining epochs. With a checkpoint directory, writes
    /// `last.ckpt` every epoch, `best.ckpt` on improvement, and the CSV log.
    pub fn fit(
        &mut self,
        train: &[ChangeSample],
        test: &[ChangeSample],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        let dir = self.config.checkpoint_dir.clone();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        while self.epochs_done < self.config.epochs {
            let (record, report) = self.run_epoch(train, test)?;
            let improved = report.as_ref().is_some_and(|r| self.tracker.update(r.clone()));
            if let Some(d) = &dir {
                self.save(&d.join(LAST_CKPT), report.as_ref())?;
                if improved {
                    self.save(&d.join(BEST_CKPT), report.as_ref())?;
                }
                write_log(&d.join(LOG_FILE), &self.history, self.net.config.num_classes)?;
            }
            on_epoch(&record);
        }
        let best = self.tracker.best.clone().ok_or_else(|| Error::Data("no evaluation was run (empty test set?)".into()))?;
        let last = self.tracker.last.clone().expect("set with best");
        Ok(TrainOutcome {
            history: self.history.clone(),
            best,
            last,
        })
    }
}

/// Writes the per-epoch log as CSV: `epoch, loss, f1_change|miou, precision, recall, lr`.
pub fn write_log(path: &Path, history: &[EpochRecord], num_classes: usize) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let metric = if num_classes == 2 { "f1_change" } else { "miou" };
    w.write_record(["epoch", "loss", metric, "precision", "recall", "lr"]).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.loss),
            opt(r.metric),
            opt(r.precision),
            opt(r.recall),
            format!("{:?}", r.lr),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Convenience: train a fresh model and return the outcome.
pub fn train(model: &ModelConfig, config: &TrainConfig, train: &[ChangeSample], test: &[ChangeSample]) -> Result<TrainOutcome> {
    Trainer::new(model, config, train)?.fit(train, test, |_| {})
}

/// Logits for one batch, for tests and tools.
pub fn logits(net: &Network, params: &ParamStore, samples: &[&ChangeSample]) -> Result<Tensor<f32>> {
    let (t0, t1, _) = batch_tensors::<f32>(samples)?;
    net.forward(params, &t0, &t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::optim::cosine_lr;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            widths: [4, 4, 8, 8],
            msf_channels: 8,
            fused_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<ChangeSample> {
        generate(&SynthConfig::default(), seed, n).unwrap()
    }

    fn bits(p: &ParamStore) -> Vec<u32> {
        p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny_data(2, 1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&tiny_model(), &cfg, &data).unwrap();
        let before = bits(&t.params);
        t.run_epoch(&data, &[]).unwrap();
        assert_eq!(bits(&t.params), before);
        assert_eq!(t.global_step(), 1);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let data = tiny_data(4, 2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&tiny_model(), &cfg, &data).unwrap();
        let batch: Vec<&ChangeSample> = data.iter().collect();
        let losses: Vec<f64> = (0..50).map(|_| t.step(&batch).unwrap().0).collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean(&losses[45..]) < 0.7 * mean(&losses[..5]), "{losses:?}");
    }

    #[test]
    fn perfect_and_background_predictions() {
        let data = tiny_data(3, 5);
        let truth: Vec<&[u8]> = data.iter().map(|s| s.mask.as_slice()).collect();
        let perfect = evaluate_masks(truth.iter().map(|&m| (m, m)), 2).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let zeros: Vec<Vec<u8>> = data.iter().map(|s| vec![0; s.pixels()]).collect();
        let background = evaluate_masks(zeros.iter().map(Vec::as_slice).zip(truth.iter().copied()), 2).unwrap();
        assert_eq!(background.f1, 0.0);
        assert_eq!(background.recall, 0.0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(6, 2);
        let (train, test) = data.split_at(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            augment: vec![AugmentOp::Hflip],
            ..TrainConfig::default()
        };
        let mut full = Trainer::new(&tiny_model(), &TrainConfig { checkpoint_dir: None, ..cfg.clone() }, train).unwrap();
        full.fit(train, test, |_| {}).unwrap();

        let mut first = Trainer::new(&tiny_model(), &cfg, train).unwrap();
        first.run_epoch(train, test).unwrap();
        first.save(&dir.path().join(LAST_CKPT), None).unwrap();
        let mut resumed = Trainer::resume(&dir.path().join(LAST_CKPT), train).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        resumed.run_epoch(train, test).unwrap();
        assert_eq!(bits(&resumed.params), bits(&full.params));
        assert_eq!(resumed.history(), full.history());
    }

    #[test]
    fn extending_a_finished_run_keeps_learning() {
        let data = tiny_data(4, 4);
        let (train, test) = data.split_at(2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&tiny_model(), &cfg, train).unwrap();
        t.fit(train, test, |_| {}).unwrap();
        assert!(t.set_epochs(0, train.len()).is_err());
        t.set_epochs(3, train.len()).unwrap();
        let outcome = t.fit(train, test, |_| {}).unwrap();
        let lrs: Vec<f64> = outcome.history.iter().map(|r| r.lr).collect();
        assert_eq!(lrs.len(), 3);
        // One step per epoch over three steps: positions 1/3 and 2/3.
        assert!((lrs[1] - cosine_lr(cfg.lr, 1.0 / 3.0)).abs() < 1e-12, "{lrs:?}");
        assert!((lrs[2] - cosine_lr(cfg.lr, 2.0 / 3.0)).abs() < 1e-12, "{lrs:?}");
    }

    #[test]
    fn fit_writes_checkpoints_and_log() {
        let data = tiny_data(6, 3);
        let (train, test) = data.split_at(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let outcome = self::train(&tiny_model(), &cfg, train, test).unwrap();
        assert_eq!(outcome.history.len(), 2);
        for f in [LAST_CKPT, BEST_CKPT, "last.ckpt.json", "best.ckpt.json", LOG_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert!(log.starts_with("epoch,loss,f1_change,precision,recall,lr"));
        // The best checkpoint reproduces its recorded metrics.
        let (net, params, side) = load_model(&dir.path().join(BEST_CKPT)).unwrap();
        let mut again = evaluate(&net, &params, test, 16).unwrap();
        again.epoch = side.metrics.as_ref().unwrap().epoch;
        assert_eq!(Some(again), side.metrics);
    }

    #[test]
    fn evaluate_rejects_empty_and_mismatched_labels() {
        let (net, params) = Network::build(&tiny_model()).unwrap();
        assert!(evaluate(&net, &params, &[], 4).is_err());
        let mut s = tiny_data(1, 4);
        s[0].mask[0] = 3;
        assert!(evaluate(&net, &params, &s, 4).is_err());
    }
}
