use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::schedule::{clip_grad_norm, cosine_lr, sgd_step};
use crate::data::{gaze_input, normalize_image, split_dataset, DatasetManifest, Split};
use crate::error::{config_err, data_err, Error, Result};
use crate::model::{argmax, Forward, GazeClassifier, ModelConfig};
use crate::nd::{ParamStore, Tensor};

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Schedule length `T`; epochs `0..=T` run unless stopped early.
    pub epochs: usize,
    pub eta_min: f64,
    /// Dropout rate applied at every dropout site of the model.
    pub dropout: f64,
    pub patience: usize,
    /// Cap on the joint L2 norm of each batch gradient; `None` disables it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Train:validation ratio carved from the training split.
    pub val_split: [usize; 2],
    /// Train:test ratio used when the manifest carries no split tags.
    pub test_split: [usize; 2],
    /// Keep the image encoder fixed and train only the rest.
    pub freeze_image_encoder: bool,
    /// Record per-epoch wall-clock seconds; when off they are written as 0
    /// so metrics files compare byte for byte.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            momentum: 0.8,
            weight_decay: 5e-5,
            batch_size: 32,
            epochs: 10,
            eta_min: 0.01,
            dropout: 0.1,
            patience: 10,
            grad_clip: None,
            seed: 0,
            val_split: [9, 1],
            test_split: [5, 1],
            freeze_image_encoder: false,
            record_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(config_err!("batch_size and patience must be positive"));
        }
        if !(self.eta_min > 0.0 && self.eta_min < 1.0) {
            return Err(config_err!("eta_min must lie in (0, 1), got {}", self.eta_min));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(config_err!("grad_clip must be positive"));
        }
        if self.val_split[0] == 0 || self.test_split[0] == 0 {
            return Err(config_err!("split ratios need a positive train part"));
        }
        Ok(())
    }

    fn trainable(&self) -> impl Fn(&str) -> bool + Sync + '_ {
        move |name: &str| !(self.freeze_image_encoder && name.starts_with("vit."))
    }
}

/// A decoded, normalized sample ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub image: Tensor,
    pub gaze: Tensor,
    pub label: usize,
}

/// Decodes every sample of `manifest`: images to `3×H×W` in `[−1, 1]`, gaze
/// rescaled to the model frame and fitted to `seq_len` points.
pub fn prepare_samples(manifest: &DatasetManifest, seq_len: usize) -> Result<Vec<PreparedSample>> {
    manifest
        .samples
        .par_iter()
        .map(|entry| {
            let s = manifest.load_sample(entry)?;
            Ok(PreparedSample {
                image: normalize_image(&s.image),
                gaze: gaze_input(&s.gaze, seq_len)?,
                label: s.label,
            })
        })
        .collect()
}

/// Train, validation and test partitions of one dataset.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub classes: Vec<String>,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl DataSplits {
    /// Uses the manifest's split tags when every sample has one, otherwise a
    /// stratified `test_split` partition. Validation is then carved, also
    /// stratified, from the training part.
    pub fn from_manifest(manifest: &DatasetManifest, cfg: &TrainConfig, seq_len: usize) -> Result<Self> {
        let (train, test) = if manifest.has_split_tags() {
            (manifest.with_split(Split::Train), manifest.with_split(Split::Test))
        } else {
            let [a, b] = cfg.test_split;
            split_dataset(manifest, (a, b), cfg.seed)?
        };
        let [a, b] = cfg.val_split;
        let (train, val) = split_dataset(&train, (a, b), cfg.seed)?;
        let out = DataSplits {
            classes: manifest.classes.clone(),
            train: prepare_samples(&train, seq_len)?,
            val: prepare_samples(&val, seq_len)?,
            test: prepare_samples(&test, seq_len)?,
        };
        for (name, part) in [("train", &out.train), ("validation", &out.val), ("test", &out.test)] {
            if part.is_empty() {
                return Err(data_err!("{name} split is empty"));
            }
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Accuracy with its per-class breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
    /// `None` for classes with no samples.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode predictions; argmax ties go to the lowest class index.
pub fn evaluate(model: &GazeClassifier, store: &ParamStore, samples: &[PreparedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(data_err!("cannot evaluate on an empty sample set"));
    }
    let c = model.config().num_classes;
    let predictions = samples
        .par_iter()
        .map(|s| Ok(argmax(&model.predict(store, &s.image, &s.gaze)?)))
        .collect::<Result<Vec<usize>>>()?;
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (s, &p) in samples.iter().zip(&predictions) {
        if s.label >= c {
            return Err(data_err!("label {} outside the model's {c} classes", s.label));
        }
        counts[s.label] += 1;
        hits[s.label] += usize::from(p == s.label);
    }
    let correct: usize = hits.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        samples: samples.len(),
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
        class_counts: counts,
        predictions,
    })
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub lr_multiplier: f64,
    pub seconds: f64,
}

/// End-of-run results, computed with the best-validation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub num_params: usize,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub momentum: Vec<Tensor>,
    pub best_params: Vec<Tensor>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
    pub records: Vec<MetricsRecord>,
}

/// Drives training of one model on one dataset.
pub struct Trainer<'d> {
    model: GazeClassifier,
    cfg: TrainConfig,
    data: &'d DataSplits,
    state: TrainState,
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl<'d> Trainer<'d> {
    /// Fresh model initialized from `cfg.seed`. The model's dropout rate is
    /// overridden by `cfg.dropout`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &'d DataSplits) -> Result<Self> {
        cfg.validate()?;
        let mut model_cfg = model_cfg.clone();
        model_cfg.set_dropout(cfg.dropout);
        if model_cfg.num_classes != data.num_classes() {
            return Err(config_err!(
                "model has {} classes but the dataset has {}",
                model_cfg.num_classes,
                data.num_classes()
            ));
        }
        let (model, params) = GazeClassifier::new(&model_cfg, &mut init_rng(cfg.seed))?;
        let momentum = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let best_params = params.tensors().to_vec();
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            data,
            state: TrainState {
                params,
                momentum,
                best_params,
                epoch: 0,
                best_val_acc: None,
                best_epoch: None,
                stale_epochs: 0,
                stopped_early: false,
                rng_seed: cfg.seed,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                records: Vec::new(),
            },
        })
    }

    /// Continues a run from a checkpoint.
    pub fn resume(ckpt: Checkpoint, data: &'d DataSplits) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.model, &ckpt.train, data)?;
        ckpt.restore_into(&mut t.state)?;
        Ok(t)
    }

    pub fn model(&self) -> &GazeClassifier {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.config(), &self.cfg, &self.state)
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped_early || self.state.epoch > self.cfg.epochs
    }

    /// Mean loss and parameter gradients of one batch, summed in batch order.
    fn batch_gradients(&self, batch: &[usize], seeds: &[u64]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let trainable = self.cfg.trainable();
        let store = &self.state.params;
        let per_sample = batch
            .par_iter()
            .zip(seeds)
            .map(|(&i, &seed)| {
                let s = &self.data.train[i];
                let mut f = Forward::train(store, seed, &trainable);
                let z = self.model.logits(&mut f, &s.image, &s.gaze)?;
                let loss = f.graph.cross_entropy(z, &[s.label])?;
                let value = f.graph.value(loss).data()[0];
                let vars = f.param_vars().to_vec();
                let mut grads = f.graph.backward(loss)?;
                Ok((value, vars.into_iter().map(|v| grads.take(v)).collect::<Vec<_>>()))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total: Vec<Option<Tensor>> = vec![None; store.len()];
        let mut loss = 0.0;
        for (l, grads) in per_sample {
            loss += l;
            for (acc, g) in total.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.axpy(1.0, &g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        for g in total.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        Ok((loss * scale, total))
    }

    /// Runs the next epoch: shuffled mini-batch SGD, then validation and test
    /// accuracy, then the early-stopping bookkeeping.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(config_err!("training already finished after {} epochs", self.state.epoch));
        }
        let start = Instant::now();
        let x = self.state.epoch;
        let mult = cosine_lr(x, self.cfg.epochs, self.cfg.eta_min);
        let lr = self.cfg.base_lr * mult;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| self.state.rng.next_u64()).collect();
            let (loss, mut grads) = self.batch_gradients(batch, &seeds).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {x}, batch {b}: {msg}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss} at epoch {x}, batch {b}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            if let Some(c) = self.cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            sgd_step(
                self.state.params.tensors_mut(),
                &grads,
                &mut self.state.momentum,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            )?;
            if let Some((name, _)) = self.state.params.iter().find(|(_, t)| !t.data().iter().all(|v| v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "epoch {x}, batch {b}: update left non-finite values in {name}"
                )));
            }
        }
        let in_epoch = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("epoch {x}, evaluation: {msg}")),
            other => other,
        };
        let val_acc = evaluate(&self.model, &self.state.params, &self.data.val).map_err(in_epoch)?.accuracy;
        let test_acc = evaluate(&self.model, &self.state.params, &self.data.test).map_err(in_epoch)?.accuracy;

        let st = &mut self.state;
        if st.best_val_acc.is_none_or(|best| val_acc > best) {
            st.best_val_acc = Some(val_acc);
            st.best_epoch = Some(x);
            st.best_params = st.params.tensors().to_vec();
            st.stale_epochs = 0;
        } else {
            st.stale_epochs += 1;
            if st.stale_epochs >= self.cfg.patience {
                log::info!("early stop after epoch {x}: no validation gain for {} epochs", st.stale_epochs);
                st.stopped_early = true;
            }
        }
        st.epoch += 1;
        let record = MetricsRecord {
            epoch: x,
            train_loss: loss_sum / self.data.train.len() as f64,
            val_acc,
            test_acc,
            lr_multiplier: mult,
            seconds: if self.cfg.record_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {x}: loss {:.4} val {:.3} test {:.3} lr x{:.3}",
            record.train_loss,
            val_acc,
            test_acc,
            mult
        );
        st.records.push(record.clone());
        Ok(record)
    }

    /// Runs until the schedule ends or early stopping triggers.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Parameters with the best validation accuracy seen so far.
    pub fn best_store(&self) -> Result<ParamStore> {
        let mut store = self.state.params.clone();
        store.assign(self.state.best_params.clone())?;
        Ok(store)
    }

    /// Train and test accuracy of the best parameters.
    pub fn summary(&self) -> Result<TrainSummary> {
        let best = self.best_store()?;
        Ok(TrainSummary {
            variant: self.model.config().variant(),
            seed: self.cfg.seed,
            epochs_run: self.state.epoch,
            stopped_early: self.state.stopped_early,
            best_epoch: self.state.best_epoch.unwrap_or(0),
            best_val_acc: self.state.best_val_acc.unwrap_or(0.0),
            train_acc: evaluate(&self.model, &best, &self.data.train)?.accuracy,
            test_acc: evaluate(&self.model, &best, &self.data.test)?.accuracy,
            num_params: best.numel(),
        })
    }
}

/// Trains to completion and summarizes.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &DataSplits,
) -> Result<(TrainState, Vec<MetricsRecord>, TrainSummary)> {
    let mut t = Trainer::new(model_cfg, cfg, data)?;
    t.run()?;
    let summary = t.summary()?;
    let records = t.state.records.clone();
    Ok((t.state, records, summary))
}
