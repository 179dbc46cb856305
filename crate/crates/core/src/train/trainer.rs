//! Fold-wise training loop.
//!
//! Parameters live in `f64` during an epoch and are rounded to `f32` (with the
//! Adam moments) at every epoch boundary, so an epoch checkpoint holds the exact
//! training state and resuming from it reproduces an uninterrupted run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::augment::draw_pool_index;
use crate::data::folds::FoldAssignment;
use crate::data::manifest::WeakLabel;
use crate::dataset::{AugmentBank, Dataset};
use crate::error::{Error, Result};
use crate::model::backward::{backward, batch_loss, image_loss};
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::{forward, Dropout, ForwardTrace};
use crate::model::params::{init_params, Hyper, ModelParams, ParamSet};
use crate::seed::{derive_seed, rng_for, TAG_AUGMENT, TAG_BALANCE, TAG_DROPOUT, TAG_INIT, TAG_SHUFFLE, TAG_VALIDATION};
use crate::train::adam::{adam_step, AdamState};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,batch,loss,l2_term,wall_ms";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per batch.
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub balance: bool,
    pub hyper: Hyper,
    pub hidden_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Validation loss is computed every `eval_every` epochs.
    pub eval_every: usize,
    /// Fraction of training patients held out for best-epoch selection.
    pub val_fraction: f64,
    /// Largest shift (pixels per axis) drawn by augmentation.
    pub max_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            batch_size: 1,
            seed: 1,
            augment: true,
            balance: true,
            hyper: Hyper::default(),
            hidden_dim: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1,
            val_fraction: 0.1,
            max_shift: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Image indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Held-out images of this fold.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub l2_term: f64,
    pub wall_ms: u64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.batch, self.loss, self.l2_term, self.wall_ms)
    }
}

/// Everything needed to continue training a fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldState {
    pub fold: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Epoch of `best_params`; 0 before any epoch has run.
    pub best_epoch: usize,
    /// `None` until a validation loss has been computed; `best_params` then
    /// tracks the latest epoch.
    pub best_val_loss: Option<f64>,
    pub best_params: ModelParams,
}

impl FoldState {
    fn meta(&self, seed: u64) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("fold".into(), self.fold.to_string());
        meta.insert("seed".into(), seed.to_string());
        meta.insert("best_epoch".into(), self.best_epoch.to_string());
        meta.insert(
            "best_val_loss".into(),
            self.best_val_loss.map_or_else(|| "none".to_string(), |v| v.to_string()),
        );
        meta
    }

    /// Resumable checkpoint of the latest epoch (includes optimizer state).
    pub fn last_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
            meta: self.meta(seed),
        }
    }

    pub fn best_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut meta = self.meta(seed);
        meta.insert("epoch".into(), self.best_epoch.to_string());
        Checkpoint {
            params: self.best_params.clone(),
            optimizer: None,
            meta,
        }
    }

    /// Rebuilds a fold state from a resumable checkpoint and, optionally, the
    /// matching best checkpoint.
    pub fn from_checkpoints(last: &Checkpoint, best: Option<&Checkpoint>) -> Result<Self> {
        let adam = last
            .optimizer
            .clone()
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state; cannot resume".into()))?;
        let epoch: usize = last.meta_value("epoch")?;
        let fold: usize = last.meta_value("fold")?;
        let best_epoch: usize = last.meta_value("best_epoch")?;
        let best_val_loss = match last.meta.get("best_val_loss").map(String::as_str) {
            None | Some("none") => None,
            Some(_) => Some(last.meta_value::<f64>("best_val_loss")?),
        };
        let best_params = match best {
            Some(b) => {
                if b.params.weights.shapes() != last.params.weights.shapes() {
                    return Err(Error::Format("best checkpoint shape differs from last checkpoint".into()));
                }
                b.params.clone()
            }
            None if best_epoch == epoch => last.params.clone(),
            None => {
                return Err(Error::Format(format!(
                    "best epoch {best_epoch} differs from checkpoint epoch {epoch}; the best checkpoint is required"
                )))
            }
        };
        Ok(FoldState {
            fold,
            epoch,
            params: last.params.clone(),
            adam,
            best_epoch,
            best_val_loss,
            best_params,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub state: FoldState,
    pub log: Vec<LogRow>,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    bank: Option<&'a AugmentBank>,
}

enum Features<'a> {
    Base(ArrayView2<'a, f64>),
    Owned(Array2<f64>),
}

impl Features<'_> {
    fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            Features::Base(v) => v.view(),
            Features::Owned(a) => a.view(),
        }
    }
}

/// Checks the softmax normalization invariants of one trace.
pub fn check_normalization(trace: &ForwardTrace) -> Result<()> {
    for (i, row) in trace.p_cls.rows().into_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Numerical(format!("region {i} class probabilities sum to {s}")));
        }
    }
    if trace.mode.uses_detection() {
        for ct in &trace.classes {
            let s: f64 = ct.p_det.sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Numerical(format!("detection probabilities sum to {s}")));
            }
            if ct.p_det.iter().zip(&ct.selection).any(|(&p, &sel)| !sel && p != 0.0) {
                return Err(Error::Numerical("detection support leaves the selection mask".into()));
            }
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn append_log(dir: &Path, rows: &[LogRow], fresh: bool) -> Result<()> {
    let path = dir.join(LOG_FILE);
    let exists = path.exists();
    let mut file = if fresh {
        File::create(&path)
    } else {
        OpenOptions::new().append(true).create(true).open(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    if fresh || !exists {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

impl<'a> Trainer<'a> {
    /// `bank` is required when augmentation is enabled.
    pub fn new(dataset: &'a Dataset, config: TrainConfig, bank: Option<&'a AugmentBank>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if config.augment {
            let Some(b) = bank else {
                return Err(Error::InvalidArgument("augmentation requires precomputed augmented views".into()));
            };
            if b.n_images() != dataset.len() || b.max_shift != config.max_shift {
                return Err(Error::InvalidArgument(format!(
                    "augmented views cover {} images with max_shift {}, expected {} images with max_shift {}",
                    b.n_images(),
                    b.max_shift,
                    dataset.len(),
                    config.max_shift
                )));
            }
        }
        Ok(Trainer { dataset, config, bank })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Test/train/validation indices per fold. Validation patients are drawn
    /// from the fold's training patients.
    pub fn splits(&self, folds: &FoldAssignment) -> Result<Vec<FoldSplit>> {
        let n_folds = folds.n_folds;
        let mut fold_of = Vec::with_capacity(self.dataset.len());
        for r in &self.dataset.records {
            fold_of.push(folds.fold_of(&r.patient_id).ok_or_else(|| {
                Error::Data(format!("patient `{}` has no fold assignment", r.patient_id))
            })?);
        }
        (0..n_folds)
            .map(|fold| {
                let test: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] == fold).collect();
                let pool: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] != fold).collect();
                let patients: BTreeSet<&str> =
                    pool.iter().map(|&i| self.dataset.records[i].patient_id.as_str()).collect();
                let mut patients: Vec<&str> = patients.into_iter().collect();
                let mut rng = rng_for(self.config.seed, &[TAG_VALIDATION, fold as u64]);
                patients.shuffle(&mut rng);
                let n_val = ((patients.len() as f64 * self.config.val_fraction).ceil() as usize)
                    .min(patients.len().saturating_sub(1));
                let val: BTreeSet<&str> = patients[..n_val].iter().copied().collect();
                let (validation, train): (Vec<usize>, Vec<usize>) = pool
                    .iter()
                    .partition(|&&i| val.contains(self.dataset.records[i].patient_id.as_str()));
                if train.is_empty() {
                    return Err(Error::Data(format!("fold {fold} has no training images")));
                }
                Ok(FoldSplit {
                    fold,
                    train,
                    validation,
                    test,
                })
            })
            .collect()
    }

    pub fn init_state(&self, fold: usize) -> Result<FoldState> {
        let seed = derive_seed(self.config.seed, &[TAG_INIT, fold as u64]);
        let mut params = init_params(seed, self.dataset.feature_dim, self.config.hidden_dim, self.config.hyper)?;
        params.weights.round_to_f32();
        let adam = AdamState::new(&params.weights, self.config.lr).with_betas(
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
        );
        Ok(FoldState {
            fold,
            epoch: 0,
            best_params: params.clone(),
            params,
            adam,
            best_epoch: 0,
            best_val_loss: None,
        })
    }

    /// Training order for one epoch: optional oversampling of every weak-label
    /// group to the size of the largest, then a seeded shuffle.
    pub fn epoch_order(&self, split: &FoldSplit, epoch: usize) -> Vec<usize> {
        let usable: Vec<usize> = split
            .train
            .iter()
            .copied()
            .filter(|&i| self.dataset.records[i].n_regions() > 0)
            .collect();
        let tags = [split.fold as u64, epoch as u64];
        let mut order = usable.clone();
        if self.config.balance {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &usable {
                groups.entry(self.dataset.records[i].label.code()).or_default().push(i);
            }
            let target = groups.values().map(Vec::len).max().unwrap_or(0);
            let mut rng = rng_for(self.config.seed, &[TAG_BALANCE, tags[0], tags[1]]);
            for members in groups.values() {
                let mut extra = Vec::with_capacity(target - members.len());
                while extra.len() < target - members.len() {
                    let mut pass = members.clone();
                    pass.shuffle(&mut rng);
                    let need = target - members.len() - extra.len();
                    extra.extend(pass.into_iter().take(need));
                }
                order.extend(extra);
            }
        }
        let mut rng = rng_for(self.config.seed, &[TAG_SHUFFLE, tags[0], tags[1]]);
        order.shuffle(&mut rng);
        order
    }

    /// Pool view drawn for a position of the epoch order (0 is the identity).
    fn augmentation(&self, fold: usize, epoch: usize, position: usize) -> usize {
        if !self.config.augment {
            return 0;
        }
        let mut rng = rng_for(
            self.config.seed,
            &[TAG_AUGMENT, fold as u64, epoch as u64, position as u64],
        );
        draw_pool_index(&mut rng)
    }

    fn features(&self, index: usize, view: usize) -> Features<'_> {
        match self.bank.and_then(|b| b.view(index, view)) {
            Some(f) => Features::Owned(f.mapv(f64::from)),
            None => Features::Base(self.dataset.records[index].features.view()),
        }
    }

    /// Mean image loss (no regularizer, no dropout) over `indices`.
    pub fn mean_loss(&self, params: &ModelParams, indices: &[usize]) -> Result<f64> {
        let losses: Vec<Result<f64>> = indices
            .par_iter()
            .filter(|&&i| self.dataset.records[i].n_regions() > 0)
            .map(|&i| {
                let r = &self.dataset.records[i];
                let t = forward(params, r.features.view(), Dropout::Off)?;
                Ok(image_loss(&t.posteriors(), r.label))
            })
            .collect();
        let n = losses.len();
        if n == 0 {
            return Ok(f64::NAN);
        }
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / n as f64)
    }

    /// One optimizer step on the images at `positions` of `order`.
    fn step(
        &self,
        state: &mut FoldState,
        order: &[usize],
        positions: std::ops::Range<usize>,
        epoch: usize,
        batch: usize,
    ) -> Result<LogRow> {
        let start = Instant::now();
        let fold = state.fold;
        let params = &state.params;
        let rate = params.hyper.dropout_rate;
        let prepared: Vec<Result<(Features<'_>, ForwardTrace, WeakLabel)>> = positions
            .clone()
            .into_par_iter()
            .map(|pos| {
                let index = order[pos];
                let view = self.augmentation(fold, epoch, pos);
                let feats = self.features(index, view);
                let mut rng = rng_for(
                    self.config.seed,
                    &[TAG_DROPOUT, fold as u64, epoch as u64, pos as u64],
                );
                let trace = forward(params, feats.view(), Dropout::Sample { rng: &mut rng, rate })?;
                check_normalization(&trace)?;
                Ok((feats, trace, self.dataset.records[index].label))
            })
            .collect();
        let mut feats = Vec::with_capacity(prepared.len());
        let mut traces = Vec::with_capacity(prepared.len());
        let mut labels = Vec::with_capacity(prepared.len());
        for p in prepared {
            let (f, t, y) = p?;
            feats.push(f);
            traces.push(t);
            labels.push(y);
        }
        let loss = batch_loss(params, &traces, &labels);
        if !loss.total().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at fold {fold}, epoch {epoch}, batch {batch}",
                loss.total()
            )));
        }
        let views: Vec<ArrayView2<f64>> = feats.iter().map(Features::view).collect();
        let grads = backward(params, &views, &traces, &labels);
        check_frozen_heads(params, &grads)?;
        adam_step(&mut state.params.weights, &grads, &mut state.adam)?;
        if !state.params.weights.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after fold {fold}, epoch {epoch}, batch {batch}"
            )));
        }
        Ok(LogRow {
            epoch,
            batch,
            loss: loss.total(),
            l2_term: loss.l2_term,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Runs `epochs` further epochs on `state`. With `out_dir`, writes epoch,
    /// best and last checkpoints and appends to the CSV log after each epoch.
    pub fn run_epochs(
        &self,
        split: &FoldSplit,
        state: &mut FoldState,
        epochs: usize,
        out_dir: Option<&Path>,
    ) -> Result<Vec<LogRow>> {
        if state.params.input_dim() != self.dataset.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.dataset.feature_dim,
                actual: state.params.input_dim(),
            });
        }
        if let Some(dir) = out_dir {
            ensure_dir(dir)?;
            if state.epoch == 0 {
                append_log(dir, &[], true)?;
            }
        }
        let mut log = Vec::new();
        for _ in 0..epochs {
            let epoch = state.epoch + 1;
            let order = self.epoch_order(split, epoch);
            let mut rows = Vec::new();
            for (b, start) in (0..order.len()).step_by(self.config.batch_size).enumerate() {
                let end = (start + self.config.batch_size).min(order.len());
                rows.push(self.step(state, &order, start..end, epoch, b + 1)?);
            }
            state.params.weights.round_to_f32();
            state.adam.round_to_f32();
            state.epoch = epoch;

            let evaluate = !split.validation.is_empty() && epoch % self.config.eval_every == 0;
            if evaluate {
                let val = self.mean_loss(&state.params, &split.validation)?;
                if !val.is_finite() {
                    return Err(Error::Numerical(format!("validation loss is {val} after epoch {epoch}")));
                }
                if state.best_val_loss.is_none_or(|best| val < best) {
                    state.best_val_loss = Some(val);
                    state.best_epoch = epoch;
                    state.best_params = state.params.clone();
                }
                log::debug!("fold {} epoch {epoch}: validation loss {val:.6}", split.fold);
            } else if state.best_val_loss.is_none() {
                state.best_epoch = epoch;
                state.best_params = state.params.clone();
            }

            if let Some(dir) = out_dir {
                let last = state.last_checkpoint(self.config.seed);
                last.save(dir.join(epoch_checkpoint_name(epoch)))?;
                last.save(dir.join(LAST_CHECKPOINT))?;
                state.best_checkpoint(self.config.seed).save(dir.join(BEST_CHECKPOINT))?;
                append_log(dir, &rows, false)?;
            }
            log.extend(rows);
        }
        if !state.params.mode().uses_detection() && !log.is_empty() {
            log::info!(
                "fold {}: detection heads frozen (zero gradient verified on {} steps)",
                split.fold,
                log.len()
            );
        }
        Ok(log)
    }

    pub fn train_fold(&self, split: &FoldSplit, out_dir: Option<&Path>) -> Result<FoldOutcome> {
        let mut state = self.init_state(split.fold)?;
        let log = self.run_epochs(split, &mut state, self.config.epochs, out_dir)?;
        Ok(FoldOutcome {
            split: split.clone(),
            state,
            log,
        })
    }

    /// Trains every fold; fold `f` writes into `run_dir/fold{f}` when a run
    /// directory is given.
    pub fn train(&self, folds: &FoldAssignment, run_dir: Option<&Path>) -> Result<Vec<FoldOutcome>> {
        self.splits(folds)?
            .iter()
            .map(|split| {
                let dir = run_dir.map(|d| fold_dir(d, split.fold));
                let out = self.train_fold(split, dir.as_deref())?;
                log::info!(
                    "fold {}: {} epochs, best epoch {} (validation loss {})",
                    split.fold,
                    out.state.epoch,
                    out.state.best_epoch,
                    out.state.best_val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"))
                );
                Ok(out)
            })
            .collect()
    }

    /// Continues a fold from checkpoints for `epochs` more epochs.
    pub fn resume(
        &self,
        split: &FoldSplit,
        last: &Checkpoint,
        best: Option<&Checkpoint>,
        epochs: usize,
        out_dir: Option<&Path>,
    ) -> Result<FoldOutcome> {
        let mut state = FoldState::from_checkpoints(last, best)?;
        if state.fold != split.fold {
            return Err(Error::InvalidArgument(format!(
                "checkpoint belongs to fold {}, not fold {}",
                state.fold, split.fold
            )));
        }
        if state.params.hyper != self.config.hyper {
            return Err(Error::InvalidArgument(format!(
                "checkpoint hyperparameters {:?} differ from the configuration {:?}",
                state.params.hyper, self.config.hyper
            )));
        }
        if state.params.hidden_dim() != self.config.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.hidden_dim,
                actual: state.params.hidden_dim(),
            });
        }
        state.adam.lr = self.config.lr;
        let log = self.run_epochs(split, &mut state, epochs, out_dir)?;
        Ok(FoldOutcome {
            split: split.clone(),
            state,
            log,
        })
    }
}

fn check_frozen_heads(params: &ModelParams, grads: &ParamSet) -> Result<()> {
    let mode = params.mode();
    let mut frozen: Vec<(&str, &ndarray::Array1<f64>)> = Vec::new();
    if !mode.uses_detection() {
        frozen.push(("u_B", &grads.u_b));
        frozen.push(("u_M", &grads.u_m));
    }
    if !mode.has_normal_class() {
        frozen.push(("w_N", &grads.w_n));
    }
    for (name, g) in frozen {
        if g.iter().any(|&v| v != 0.0) {
            return Err(Error::Numerical(format!("unused head {name} received a gradient in {mode} mode")));
        }
    }
    Ok(())
}
