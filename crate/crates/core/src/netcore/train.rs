//! Mini-batch training with Adam and per-epoch validation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{Mode, Model, ModelConfig, Task};
use crate::dataio::{Fold, Sample};
use crate::error::{arg_err, Error, Result};
use crate::losses::{ctc_loss, greedy_decode, CharLoss, LossParams};
use crate::metrics;
use crate::preprocess::interpolate;
use crate::rng::{derive_seed, stream};

const SHUFFLE_STREAM: u64 = 0x5348;
const DROPOUT_STREAM: u64 = 0x4450;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Every sample is interpolated or zero-padded to this many timesteps.
    pub target_len: usize,
    /// Also decode the training split after each epoch.
    pub track_train_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 50,
            epochs: 1000,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            target_len: 800,
            track_train_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return arg_err("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        if self.target_len == 0 {
            return arg_err("target_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return arg_err("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return arg_err("adam_eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// CTC for sequence models, or one of the character losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LossSelector {
    Ctc,
    Char(CharLoss),
}

impl LossSelector {
    fn task(self) -> Task {
        match self {
            LossSelector::Ctc => Task::Sequence,
            LossSelector::Char(_) => Task::Character,
        }
    }
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSelector::Ctc => f.write_str("ctc"),
            LossSelector::Char(l) => l.fmt(f),
        }
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ctc" {
            return Ok(LossSelector::Ctc);
        }
        s.parse().map(LossSelector::Char)
    }
}

impl From<LossSelector> for String {
    fn from(l: LossSelector) -> String {
        l.to_string()
    }
}

impl TryFrom<String> for LossSelector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the samples that contributed a gradient.
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_crr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_cer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_crr: Option<f64>,
    /// Samples dropped because their CTC target could not fit the frames.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub loss: LossSelector,
    pub loss_params: LossParams,
    /// Completed epochs.
    pub epoch: usize,
}

struct Prepared {
    samples: Vec<Sample>,
    prior: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, loss: LossSelector, loss_params: LossParams) -> Result<Self> {
        let optimizer = AdamState::new(model.params());
        Trainer::resume(model, optimizer, config, loss, loss_params, 0)
    }

    pub fn resume(
        model: Model,
        optimizer: AdamState,
        config: TrainConfig,
        loss: LossSelector,
        loss_params: LossParams,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        loss_params.validate()?;
        if model.config().task != loss.task() {
            return arg_err(format!(
                "loss {loss} does not fit a model built for the {:?} task",
                model.config().task
            ));
        }
        if optimizer.m.len() != model.params().len() {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        Ok(Trainer {
            model,
            optimizer,
            config,
            loss,
            loss_params,
            epoch,
        })
    }

    fn prepare(&self, samples: &[Sample], fold: &Fold) -> Result<Prepared> {
        if fold.train.is_empty() {
            return arg_err("training split is empty");
        }
        if let Some(&bad) = fold.train.iter().chain(&fold.val).find(|&&i| i >= samples.len()) {
            return Err(Error::Range(format!("fold index {bad} beyond {} samples", samples.len())));
        }
        let k = self.model.config().num_classes;
        let task = self.model.config().task;
        for s in samples {
            if let Some(&l) = s.label().iter().find(|&&l| l >= k) {
                return Err(Error::Range(format!("label index {l} outside a {k}-class model")));
            }
            if task == Task::Character && s.label().len() != 1 {
                return arg_err("character training needs single-symbol labels");
            }
        }
        let samples = samples
            .iter()
            .map(|s| interpolate(s, self.config.target_len))
            .collect::<Result<Vec<_>>>()?;
        let mut prior = vec![0.0; k];
        if task == Task::Character {
            for &i in &fold.train {
                prior[samples[i].label()[0]] += 1.0 / fold.train.len() as f64;
            }
        }
        Ok(Prepared { samples, prior })
    }

    /// Trains until `config.epochs` epochs are complete and returns the
    /// records of the epochs run by this call.
    pub fn fit(&mut self, samples: &[Sample], fold: &Fold) -> Result<Vec<EpochRecord>> {
        self.fit_with(samples, fold, |_, _| Ok(()))
    }

    /// Like [`Trainer::fit`], calling `on_epoch` with the trainer and the new
    /// record after every epoch.
    pub fn fit_with(
        &mut self,
        samples: &[Sample],
        fold: &Fold,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let data = self.prepare(samples, fold)?;
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(&data, fold)?;
            log::info!(
                "epoch {} loss {:?} val_cer {:?} val_crr {:?}",
                record.epoch,
                record.train_loss,
                record.val_cer,
                record.val_crr
            );
            on_epoch(self, &record)?;
            history.push(record);
        }
        Ok(history)
    }

    fn run_epoch(&mut self, data: &Prepared, fold: &Fold) -> Result<EpochRecord> {
        let epoch = self.epoch as u64;
        let mut order = fold.train.clone();
        order.shuffle(&mut stream(self.config.seed, &[SHUFFLE_STREAM, epoch]));
        let adam = self.config.adam();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let mode = Mode::Train {
                seed: derive_seed(self.config.seed, &[DROPOUT_STREAM, epoch, bi as u64]),
            };
            let mut pass = self.model.forward(self.model.batch_input(&batch)?, mode)?;
            let (value, n, seed_var, seed) = match self.loss {
                LossSelector::Ctc => {
                    let out = pass.tape.value(pass.output);
                    let (frames, classes) = (out.shape()[1], out.shape()[2]);
                    let mut grad = vec![0.0; out.len()];
                    let mut total = 0.0;
                    let mut n = 0usize;
                    for (b, s) in batch.iter().enumerate() {
                        let block = b * frames * classes..(b + 1) * frames * classes;
                        let rows: Vec<Vec<f64>> =
                            out.data()[block.clone()].chunks(classes).map(<[f64]>::to_vec).collect();
                        match ctc_loss(&rows, s.label()) {
                            Ok(o) => {
                                total += o.value;
                                grad[block].copy_from_slice(&o.grad);
                                n += 1;
                            }
                            Err(Error::Infeasible(msg)) => {
                                log::warn!("skipping sample: {msg}");
                                skipped += 1;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    if n > 0 {
                        grad.iter_mut().for_each(|g| *g /= n as f64);
                    }
                    (total / n.max(1) as f64, n, pass.output, grad)
                }
                LossSelector::Char(loss) => {
                    let logits = pass.tape.value(pass.logits);
                    let k = logits.shape()[1];
                    let rows: Vec<Vec<f64>> = logits.data().chunks(k).map(<[f64]>::to_vec).collect();
                    let targets: Vec<usize> = batch.iter().map(|s| s.label()[0]).collect();
                    let out = loss.eval_batch(&rows, &targets, &self.loss_params, Some(&data.prior))?;
                    (out.value, batch.len(), pass.logits, out.grads.concat())
                }
            };
            if n == 0 {
                continue;
            }
            pass.tape.backward(seed_var, seed)?;
            let grads = pass.param_grads();
            self.model.update_running_stats(&pass);
            adam_step(self.model.params_mut(), &grads, &mut self.optimizer, &adam)?;
            loss_sum += value * n as f64;
            used += n;
        }
        self.epoch += 1;

        let mut record = EpochRecord {
            epoch: self.epoch,
            train_loss: (used > 0).then(|| loss_sum / used as f64),
            train_cer: None,
            train_crr: None,
            val_cer: None,
            val_wer: None,
            val_crr: None,
            skipped,
        };
        let ready = self.model.batchnorm_state().is_none_or(|s| s.initialized);
        if ready && !fold.val.is_empty() {
            let val = self.score(data, &fold.val)?;
            (record.val_cer, record.val_wer, record.val_crr) = val;
        }
        if ready && self.config.track_train_metrics {
            let (cer, _, crr) = self.score(data, &fold.train)?;
            record.train_cer = cer;
            record.train_crr = crr;
        }
        Ok(record)
    }

    fn score(&self, data: &Prepared, idx: &[usize]) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.label().to_vec()).collect();
        let hyps = predict(&self.model, &samples, self.config.batch_size)?;
        Ok(match self.model.config().task {
            Task::Sequence => {
                let cer = metrics::cer(&refs, &hyps)?;
                let rw: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| vec![r.clone()]).collect();
                let hw: Vec<Vec<Vec<usize>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
                (Some(cer), Some(metrics::wer(&rw, &hw)?), None)
            }
            Task::Character => (None, None, Some(metrics::crr(&refs, &hyps)?)),
        })
    }
}

/// Eval-mode log-probabilities, one entry per sample: `T' x (K+1)` frame
/// rows for sequence models, a single `K`-row for character models.
pub fn predict_log_probs(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let pass = model.forward(model.batch_input(chunk)?, Mode::Eval)?;
        let y = pass.tape.value(pass.output);
        let classes = *y.shape().last().expect("non-empty output");
        let per_sample = y.len() / chunk.len();
        for block in y.data().chunks(per_sample) {
            out.push(block.chunks(classes).map(<[f64]>::to_vec).collect());
        }
    }
    Ok(out)
}

/// Greedy predictions: decoded label sequences for sequence models, the
/// argmax class (as a one-element sequence) for character models.
pub fn predict(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let lp = predict_log_probs(model, samples, batch_size)?;
    Ok(match model.config().task {
        Task::Sequence => lp.iter().map(|m| greedy_decode(m)).collect(),
        Task::Character => lp
            .iter()
            .map(|m| {
                let row = &m[0];
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                vec![best]
            })
            .collect(),
    })
}

/// Builds a model from `model_cfg` (seeded by `train_cfg.seed`) and trains it.
pub fn train(
    samples: &[Sample],
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: LossSelector,
    loss_params: &LossParams,
) -> Result<TrainOutcome> {
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), loss, loss_params.clone())?;
    let history = trainer.fit(samples, fold)?;
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}
