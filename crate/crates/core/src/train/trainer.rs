use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::predict::predict_trial;
use super::schedule::{scheduler_step, ScheduleConfig, ScheduleEvent, SchedulerState, StopReason};
use super::{derive_seed, AdamW, TrainConfig, TrainError};
use crate::data::{
    augment_visual, make_windows, Augment, FeatureStats, NormStats, Trial, Window, WindowMode,
};
use crate::folds::FoldPlan;
use crate::metrics::{ccc, ccc_loss};
use crate::model::{Checkpoint, Mode, Model, ParamId, BASE_GROUP};
use crate::tensor::{Tape, Tensor};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ccc: f64,
    pub best_val_ccc: f64,
    pub improved: bool,
    pub trainable_groups: Vec<String>,
    pub events: Vec<ScheduleEvent>,
}

fn event_label(e: &ScheduleEvent) -> String {
    match e {
        ScheduleEvent::PlateauDecay { from, to } => format!("plateau_decay({from:e}->{to:e})"),
        ScheduleEvent::Unfreeze { stage } => format!("unfreeze({stage})"),
        ScheduleEvent::Stop(StopReason::EarlyStop) => "stop(early_stop)".into(),
        ScheduleEvent::Stop(StopReason::MaxEpochs) => "stop(max_epochs)".into(),
        ScheduleEvent::Stop(StopReason::LrExhausted) => "stop(lr_exhausted)".into(),
    }
}

/// Result of a fold run: the best weights (with normalisation statistics
/// as auxiliary records) and the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_val_ccc: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

impl TrainOutcome {
    /// CSV with one row per epoch. Contains no timings, so identical runs
    /// give identical files.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_ccc,best_val_ccc,improved,trainable,events\n");
        for l in &self.log {
            let events: Vec<String> = l.events.iter().map(event_label).collect();
            writeln!(
                out,
                "{},{:e},{},{},{},{},{},{}",
                l.epoch,
                l.lr,
                l.train_loss,
                l.val_ccc,
                l.best_val_ccc,
                l.improved,
                l.trainable_groups.join(";"),
                events.join(";")
            )
            .expect("write to string");
        }
        out
    }

    pub fn save_log(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.log_csv())
    }
}

/// Network inputs for one window. Frames past the trial end are zeros.
pub(crate) fn window_inputs(
    trial: &Trial,
    w: Window,
    augment: Augment,
) -> Result<(Tensor, Tensor, Tensor, usize), TrainError> {
    let valid = w.valid_len(trial.len());
    let len = w.len();
    let frames = augment_visual(&trial.visual.slice_padded(w.start, w.end), augment)?;
    let visual = frames.to_tensor(valid)?;
    let rows = |m: &crate::data::Matrix| -> Result<Tensor, TrainError> {
        let mut data = m.data[w.start * m.cols..(w.start + valid) * m.cols].to_vec();
        data.resize(len * m.cols, 0.0);
        Ok(Tensor::new(vec![len, m.cols], data)?)
    };
    Ok((visual, rows(&trial.audio)?, rows(&trial.text)?, valid))
}

/// Epoch-by-epoch trainer for one fold.
pub struct Trainer {
    cfg: TrainConfig,
    schedule: ScheduleConfig,
    model: Model,
    opt: AdamW,
    state: SchedulerState,
    train: Vec<Trial>,
    val: Vec<Trial>,
    stats: NormStats,
    best: Vec<Tensor>,
    log: Vec<EpochLog>,
    last_loss: f64,
}

impl Trainer {
    /// `train` and `val` are raw trials; statistics are fitted on `train`.
    pub fn new(cfg: TrainConfig, train: &[Trial], val: &[Trial]) -> Result<Self, TrainError> {
        cfg.validate()?;
        for t in train.iter().chain(val) {
            if t.labels.is_none() {
                return Err(TrainError::Unlabelled(t.trial_id.clone()));
            }
        }
        let stats = NormStats {
            audio: FeatureStats::fit(train.iter().map(|t| &t.audio))?,
            text: FeatureStats::fit(train.iter().map(|t| &t.text))?,
        };
        let norm = |ts: &[Trial]| ts.iter().map(|t| t.normalized(&stats)).collect::<Result<Vec<_>, _>>();
        let model = Model::new(cfg.model.clone())?;
        let best = model.params().iter().map(|p| p.value.clone()).collect();
        Ok(Trainer {
            schedule: cfg.schedule(),
            state: SchedulerState::new(&cfg.schedule()),
            opt: AdamW::new(model.params().len(), cfg.weight_decay),
            train: norm(train)?,
            val: norm(val)?,
            cfg,
            model,
            stats,
            best,
            log: Vec::new(),
            last_loss: f64::NAN,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.state.stopped.is_some()
    }

    /// Groups receiving gradients in the next epoch.
    pub fn trainable_groups(&self) -> Vec<String> {
        let mut g = vec![BASE_GROUP.to_string()];
        g.extend(self.cfg.unfreeze_stages[..self.state.unfreeze_stage_index].iter().cloned());
        g
    }

    /// Current weights in parameter order.
    pub fn weights(&self) -> Vec<Tensor> {
        self.model.params().iter().map(|p| p.value.clone()).collect()
    }

    /// Weights of the best epoch so far.
    pub fn best_weights(&self) -> &[Tensor] {
        &self.best
    }

    fn window_loss(&self, trial: &Trial, w: Window, seed: u64, grads: &mut [Option<Vec<f64>>]) -> Result<f64, TrainError> {
        let (visual, audio, text, valid) =
            window_inputs(trial, w, Augment::Train { seed: derive_seed(seed, &[0]) })?;
        let labels = trial.labels.as_ref().expect("checked at construction");
        let gold = &labels[w.start..w.start + valid];
        let gv: Vec<f64> = gold.iter().map(|p| p[0]).collect();
        let ga: Vec<f64> = gold.iter().map(|p| p[1]).collect();

        let groups = self.trainable_groups();
        let tape = Tape::new();
        let p = self.model.params().bind(&tape, |p| groups.contains(&p.group));
        let out = self.model.forward(
            &p,
            tape.constant(visual),
            tape.constant(audio),
            tape.constant(text),
            &mut Mode::train(derive_seed(seed, &[1])),
        )?;
        let lv = ccc_loss(out.valence.narrow(0, 0, valid)?, &gv)?;
        let la = ccc_loss(out.arousal.narrow(0, 0, valid)?, &ga)?;
        let loss = lv.add(la)?.scale(0.5)?;
        let value = loss.item().expect("scalar loss");
        if loss.requires_grad() {
            let g = tape.backward(loss)?;
            for (slot, var) in grads.iter_mut().zip(p.vars()) {
                if !var.requires_grad() {
                    continue;
                }
                let gi = g.get(*var).expect("gradient for every trainable leaf");
                match slot {
                    Some(acc) => acc.iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    None => *slot = Some(gi.data().to_vec()),
                }
            }
        }
        Ok(value)
    }

    /// One pass over the shuffled training windows. Returns the mean loss.
    pub fn train_pass(&mut self) -> Result<f64, TrainError> {
        let epoch = self.state.epoch as u64 + 1;
        let lr = self.state.current_lr;
        let wcfg = self.cfg.window();
        let mut order: Vec<(usize, Window)> = Vec::new();
        for (ti, t) in self.train.iter().enumerate() {
            for w in make_windows(t.len(), &wcfg, WindowMode::Train) {
                if w.valid_len(t.len()) >= 2 {
                    order.push((ti, w));
                }
            }
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[epoch])));

        let mut total = 0.0;
        let n_params = self.model.params().len();
        for (bi, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
            for (wi, &(ti, w)) in batch.iter().enumerate() {
                let seed = derive_seed(self.cfg.seed, &[epoch, bi as u64, wi as u64]);
                total += self.window_loss(&self.train[ti], w, seed, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            let ids: Vec<ParamId> = self.model.params().ids().collect();
            let mut update = Vec::new();
            for (id, g) in ids.into_iter().zip(grads) {
                if let Some(mut g) = g {
                    g.iter_mut().for_each(|v| *v *= scale);
                    let shape = self.model.params().get(id).value.shape().to_vec();
                    update.push((id, Tensor::new(shape, g)?));
                }
            }
            self.opt.step(self.model.params_mut(), &update, lr);
        }
        self.last_loss = total / order.len().max(1) as f64;
        Ok(self.last_loss)
    }

    /// Validation mean CCC: per-trial average, or over all trials
    /// concatenated when configured.
    pub fn validate(&self) -> Result<f64, TrainError> {
        let wcfg = self.cfg.window();
        let mut per_trial = Vec::new();
        let (mut pv, mut pa, mut gv, mut ga) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in &self.val {
            let pred = predict_trial(&self.model, t, &wcfg)?;
            let (v, a) = t.label_columns().expect("checked at construction");
            if self.cfg.global_validation_ccc {
                pv.extend(pred.valence);
                pa.extend(pred.arousal);
                gv.extend(v);
                ga.extend(a);
            } else {
                per_trial.push((ccc(&pred.valence, &v)? + ccc(&pred.arousal, &a)?) / 2.0);
            }
        }
        if self.cfg.global_validation_ccc {
            Ok((ccc(&pv, &gv)? + ccc(&pa, &ga)?) / 2.0)
        } else {
            Ok(per_trial.iter().sum::<f64>() / per_trial.len() as f64)
        }
    }

    /// Closes the current epoch given its validation score: keeps the
    /// weights as the new best or restores the previous best, then steps the
    /// schedule.
    pub fn conclude_epoch(&mut self, val_ccc: f64) -> EpochLog {
        let lr = self.state.current_lr;
        let trainable_groups = self.trainable_groups();
        let improved = self.state.record_score(val_ccc, self.cfg.improvement_threshold);
        if improved {
            self.best = self.weights();
        } else {
            for (p, w) in self.model.params_mut().iter_mut().zip(&self.best) {
                p.value = w.clone();
            }
        }
        let (state, events) = scheduler_step(&self.schedule, &self.state, improved);
        self.state = state;
        let entry = EpochLog {
            epoch: self.state.epoch,
            lr,
            train_loss: self.last_loss,
            val_ccc,
            best_val_ccc: self.state.best_val_ccc,
            improved,
            trainable_groups,
            events,
        };
        self.log.push(entry.clone());
        entry
    }

    /// Trains, validates and concludes one epoch.
    pub fn run_epoch(&mut self) -> Result<EpochLog, TrainError> {
        let start = Instant::now();
        self.train_pass()?;
        let val = self.validate()?;
        let entry = self.conclude_epoch(val);
        log::info!(
            "epoch {} lr {:e} loss {:.4} val {:.4} best {:.4} ({:.1}s){}",
            entry.epoch,
            entry.lr,
            entry.train_loss,
            entry.val_ccc,
            entry.best_val_ccc,
            start.elapsed().as_secs_f64(),
            entry.events.iter().map(|e| format!(" {}", event_label(e))).collect::<String>()
        );
        Ok(entry)
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint {
            tensors: self
                .model
                .params()
                .iter()
                .zip(&self.best)
                .map(|(p, w)| (p.name.clone(), w.clone()))
                .collect(),
        };
        ckpt.tensors.extend(self.stats.to_records());
        ckpt
    }

    /// Runs epochs until the schedule stops.
    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(self.outcome())
    }

    pub fn outcome(&self) -> TrainOutcome {
        TrainOutcome {
            best: self.best_checkpoint(),
            best_val_ccc: self.state.best_val_ccc,
            log: self.log.clone(),
            stop: self.state.stopped.unwrap_or(StopReason::MaxEpochs),
        }
    }
}

/// `(training, validation)` trials for `fold_idx`: the held-out fold
/// validates and every other fold trains.
pub fn split_fold(
    trials: &[Trial],
    plan: &FoldPlan,
    fold_idx: usize,
) -> Result<(Vec<Trial>, Vec<Trial>), TrainError> {
    if fold_idx >= plan.folds.len() {
        return Err(TrainError::Config(format!("fold {fold_idx} out of range")));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for t in trials {
        match plan.fold_of(&t.trial_id) {
            Some(f) if f == fold_idx => val.push(t.clone()),
            Some(_) => train.push(t.clone()),
            None => {}
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyFold(fold_idx, "training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyFold(fold_idx, "validation"));
    }
    Ok((train, val))
}

pub fn train_fold(
    trials: &[Trial],
    plan: &FoldPlan,
    fold_idx: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (train, val) = split_fold(trials, plan, fold_idx)?;
    Trainer::new(cfg.clone(), &train, &val)?.run()
}
