//! On-disk run directories and the end-to-end operations over them.
//!
//! A run directory holds `config.txt` (the resolved [`RunConfig`]), `folds.tsv`
//! (patient to fold) and one `fold{f}/` per fold with checkpoints and the
//! training log.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::RunConfig;
use crate::data::folds::{split_folds, FoldAssignment};
use crate::data::manifest::{load_manifest, DatasetManifest};
use crate::data::regions::extract_regions;
use crate::data::synth::SYNTH_MANIFEST;
use crate::dataset::{extract_store, load_pixels, AugmentBank, Dataset};
use crate::error::{Error, Result};
use crate::eval::overlay::{localization_csv, render_overlay, OVERLAY_TOP};
use crate::eval::report::{evaluate_run, predict_images, FoldModel, MeanStd, RunEvaluation};
use crate::eval::roc::roc_csv;
use crate::features::{ingest_features, FeatureStore, Featurizer};
use crate::image::RgbImage;
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::Task;
use crate::model::params::Mode;
use crate::train::{fold_dir, FoldOutcome, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const RUN_CONFIG: &str = "config.txt";
pub const FOLDS_FILE: &str = "folds.tsv";
pub const REPORT_FILE: &str = "report.json";
pub const FROC_FILE: &str = "froc.csv";
pub const ABLATION_MODES: [Mode; 3] = [Mode::Full, Mode::NoNormalClass, Mode::MaxRegion];

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn featurizer(cfg: &RunConfig) -> Featurizer {
    Featurizer::new(cfg.feature_seed, cfg.feature_dim)
}

/// The manifest of a dataset directory (or of a manifest file given directly).
pub fn load_data_manifest(data: &Path) -> Result<DatasetManifest> {
    if data.is_dir() {
        load_manifest(data.join(SYNTH_MANIFEST))
    } else {
        load_manifest(data)
    }
}

/// Feature store of a dataset directory with the configured built-in featurizer,
/// plus the per-image region counts.
pub fn extract_features(data: &Path, cfg: &RunConfig) -> Result<(FeatureStore, Vec<usize>)> {
    cfg.geometry.validate()?;
    let manifest = load_data_manifest(data)?;
    let mut cache = HashMap::new();
    let pixels = manifest
        .entries
        .iter()
        .map(|e| load_pixels(&manifest, e, &mut cache))
        .collect::<Result<Vec<_>>>()?;
    extract_store(&manifest, &pixels, &featurizer(cfg), &cfg.geometry)
}

/// Loads `cfg.data`, taking features from `cfg.features` when set and
/// extracting them otherwise. Pixels are kept when augmentation is on.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no dataset given (`data`)".into()))?;
    let manifest = load_data_manifest(data)?;
    let store = match &cfg.features {
        Some(path) => ingest_features(path)?,
        None => extract_features(data, cfg)?.0,
    };
    let dataset = Dataset::from_manifest(&manifest, &store, cfg.geometry, cfg.train.augment)?;
    if cfg.train.augment && cfg.features.is_some() {
        check_builtin_features(&dataset, cfg)?;
    }
    Ok(dataset)
}

/// Augmented views are re-featurized with the built-in featurizer, so stored
/// features must come from the same featurizer.
fn check_builtin_features(dataset: &Dataset, cfg: &RunConfig) -> Result<()> {
    let Some(index) = dataset.records.iter().position(|r| r.n_regions() > 0) else {
        return Ok(());
    };
    let (Some(px), record) = (dataset.pixels(index), &dataset.records[index]) else {
        return Ok(());
    };
    let grid = extract_regions(&record.image_id, &px.image, &px.mask, &dataset.geometry)?;
    let fresh = featurizer(cfg).featurize_grid(&px.image, &grid)?;
    let same = fresh.len() == record.n_regions()
        && fresh.iter().zip(record.features.rows()).all(|(f, row)| {
            f.dim() == row.len() && f.as_slice().iter().zip(row).all(|(&a, &b)| a as f64 == b)
        });
    if !same {
        return Err(Error::Data(
            "stored features differ from the built-in featurizer (feature_seed, feature_dim); \
             set augment = false for externally computed features"
                .into(),
        ));
    }
    Ok(())
}

pub fn build_bank(dataset: &Dataset, cfg: &RunConfig) -> Result<Option<AugmentBank>> {
    if !cfg.train.augment {
        return Ok(None);
    }
    AugmentBank::build(dataset, &featurizer(cfg), cfg.train.max_shift).map(Some)
}

pub struct TrainedRun {
    pub folds: FoldAssignment,
    pub outcomes: Vec<FoldOutcome>,
}

impl TrainedRun {
    /// Best-epoch parameters of each fold with its held-out images.
    pub fn fold_models(&self) -> Vec<FoldModel> {
        self.outcomes
            .iter()
            .map(|o| FoldModel {
                fold: o.split.fold,
                test: o.split.test.clone(),
                params: o.state.best_params.clone(),
            })
            .collect()
    }
}

/// Patient-wise folds keyed by the training seed.
pub fn assign_folds(dataset: &Dataset, cfg: &RunConfig) -> Result<FoldAssignment> {
    split_folds(&dataset.manifest_view(), cfg.folds, cfg.train.seed)
}

/// Cross-validated training. With a run directory, writes the resolved
/// configuration, the fold table and every fold's checkpoints and log.
pub fn train_run(
    dataset: &Dataset,
    cfg: &RunConfig,
    bank: Option<&AugmentBank>,
    run_dir: Option<&Path>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let folds = assign_folds(dataset, cfg)?;
    log::info!("fold assignment {} ({} folds)", folds.digest(), folds.n_folds);
    if let Some(dir) = run_dir {
        create_dir(dir)?;
        write(&dir.join(RUN_CONFIG), cfg.to_text())?;
        write(&dir.join(FOLDS_FILE), folds.to_tsv())?;
    }
    let trainer = Trainer::new(dataset, cfg.train.clone(), bank)?;
    let outcomes = trainer.train(&folds, run_dir)?;
    Ok(TrainedRun { folds, outcomes })
}

/// Continues every fold of an existing run from its `last.ckpt` until the fold
/// has trained `cfg.train.epochs` epochs in total.
pub fn resume_run(
    dataset: &Dataset,
    cfg: &RunConfig,
    bank: Option<&AugmentBank>,
    run_dir: &Path,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let (_, folds) = load_run(run_dir)?;
    let trainer = Trainer::new(dataset, cfg.train.clone(), bank)?;
    let mut outcomes = Vec::new();
    for split in trainer.splits(&folds)? {
        let dir = fold_dir(run_dir, split.fold);
        let last = Checkpoint::load(dir.join(LAST_CHECKPOINT))?;
        if last.params.input_dim() != dataset.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: last.params.input_dim(),
                actual: dataset.feature_dim,
            });
        }
        let best_path = dir.join(BEST_CHECKPOINT);
        let best = if best_path.exists() {
            Some(Checkpoint::load(&best_path)?)
        } else {
            None
        };
        let done: usize = last.meta_value("epoch")?;
        let remaining = cfg.train.epochs.saturating_sub(done);
        outcomes.push(trainer.resume(&split, &last, best.as_ref(), remaining, Some(&dir))?);
    }
    write(&run_dir.join(RUN_CONFIG), cfg.to_text())?;
    Ok(TrainedRun { folds, outcomes })
}

/// Configuration and fold table of an existing run directory.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, FoldAssignment)> {
    let cfg = RunConfig::load(run_dir.join(RUN_CONFIG))?;
    let folds = FoldAssignment::from_tsv(&read(&run_dir.join(FOLDS_FILE))?, cfg.folds)?;
    Ok((cfg, folds))
}

/// Best checkpoints of every fold of a run, each with its held-out images.
pub fn load_fold_models(run_dir: &Path, dataset: &Dataset, folds: &FoldAssignment) -> Result<Vec<FoldModel>> {
    let manifest = dataset.manifest_view();
    if let Some(e) = manifest.entries.iter().find(|e| folds.fold_of(&e.patient_id).is_none()) {
        return Err(Error::Data(format!(
            "patient `{}` of image `{}` is not in the run's fold table",
            e.patient_id, e.image_id
        )));
    }
    (0..folds.n_folds)
        .map(|fold| {
            let path = fold_dir(run_dir, fold).join(BEST_CHECKPOINT);
            if !path.exists() {
                return Err(Error::Data(format!("missing checkpoint for fold {fold}: {}", path.display())));
            }
            Ok(FoldModel {
                fold,
                test: folds.images_in(&manifest, fold),
                params: Checkpoint::load(&path)?.params,
            })
        })
        .collect()
}

pub fn eval_dir_name(task: Task, breast_level: bool) -> String {
    if breast_level {
        format!("eval-{}-breast", task.as_str())
    } else {
        format!("eval-{}", task.as_str())
    }
}

/// Writes `report.json`, `roc_fold{f}.csv` and `froc.csv` under `out_dir`.
pub fn write_evaluation(eval: &RunEvaluation, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    write(&out_dir.join(REPORT_FILE), eval.report.to_json())?;
    for (fm, curve) in eval.report.folds.iter().zip(&eval.roc_curves) {
        write(&out_dir.join(format!("roc_fold{}.csv", fm.fold)), roc_csv(curve))?;
    }
    write(&out_dir.join(FROC_FILE), eval.froc.to_csv())
}

/// Localization of one image by the fold model that held it out.
pub struct Localization {
    pub fold: usize,
    pub overlay: RgbImage,
    pub csv: String,
    pub scores: Array2<f64>,
}

pub fn localize(run_dir: &Path, cfg: &RunConfig, dataset: &Dataset, folds: &FoldAssignment, image_id: &str) -> Result<Localization> {
    let index = dataset
        .index_of(image_id)
        .ok_or_else(|| Error::Data(format!("unknown image id `{image_id}`")))?;
    let record = &dataset.records[index];
    let fold = folds
        .fold_of(&record.patient_id)
        .ok_or_else(|| Error::Data(format!("patient `{}` is not in the run's fold table", record.patient_id)))?;
    let path = fold_dir(run_dir, fold).join(BEST_CHECKPOINT);
    let params = Checkpoint::load(&path)?.params;
    let pred = predict_images(&params, dataset, &[index])?.remove(0);
    let image = match dataset.pixels(index) {
        Some(px) => px.image.clone(),
        None => {
            let data = cfg
                .data
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("no dataset given (`data`)".into()))?;
            let manifest = load_data_manifest(data)?;
            let entry = manifest
                .find(image_id)
                .ok_or_else(|| Error::Data(format!("unknown image id `{image_id}`")))?;
            load_pixels(&manifest, entry, &mut HashMap::new())?.image
        }
    };
    let overlay = render_overlay(&image, &record.regions, &pred.localization, OVERLAY_TOP)?;
    Ok(Localization {
        fold,
        overlay,
        csv: localization_csv(&record.regions, &pred.localization),
        scores: pred.localization,
    })
}

/// One mode under one seed: fold-mean metrics for both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub seed: u64,
    pub mode: Mode,
    pub fold_digest: String,
    /// Indexed like [`Task::ALL`].
    pub auroc: [MeanStd; 2],
    pub pauc_ratio: [MeanStd; 2],
    pub op_specificity: [MeanStd; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub modes: Vec<Mode>,
    pub cells: Vec<AblationCell>,
}

fn task_slot(task: Task) -> usize {
    Task::ALL.iter().position(|&t| t == task).expect("task listed")
}

impl AblationTable {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        s.dedup();
        s
    }

    pub fn cell(&self, seed: u64, mode: Mode) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.seed == seed && c.mode == mode)
    }

    /// Seeds where `mode`'s mean AUROC on `task` is at least every other mode's.
    pub fn wins(&self, mode: Mode, task: Task) -> usize {
        let t = task_slot(task);
        self.seeds()
            .into_iter()
            .filter(|&s| {
                let Some(own) = self.cell(s, mode) else { return false };
                self.modes
                    .iter()
                    .filter(|&&m| m != mode)
                    .all(|&m| self.cell(s, m).is_some_and(|c| own.auroc[t].mean >= c.auroc[t].mean))
            })
            .count()
    }

    /// One row per mode, one column block per task; values are mean ± std of
    /// the per-fold metrics pooled over seeds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode");
        for task in [Task::MbVsN, Task::MVsBn] {
            for metric in ["auroc", "pauc_ratio", "op_specificity"] {
                let name = task.as_str();
                out.push_str(&format!(",{name}_{metric}_mean,{name}_{metric}_std"));
            }
        }
        out.push('\n');
        for &mode in &self.modes {
            out.push_str(mode.as_str());
            for task in [Task::MbVsN, Task::MVsBn] {
                let t = task_slot(task);
                let cells: Vec<&AblationCell> = self.cells.iter().filter(|c| c.mode == mode).collect();
                for pick in [
                    (|c: &AblationCell, t: usize| c.auroc[t]) as fn(&AblationCell, usize) -> MeanStd,
                    |c, t| c.pauc_ratio[t],
                    |c, t| c.op_specificity[t],
                ] {
                    let ms = pool(&cells.iter().map(|c| pick(c, t)).collect::<Vec<_>>());
                    out.push_str(&format!(",{:.4},{:.4}", ms.mean, ms.std));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-seed mean AUROC of each mode on both tasks.
    pub fn seeds_csv(&self) -> String {
        let mut out = String::from("seed,mode,fold_digest,mb-vs-n_auroc,m-vs-bn_auroc\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.seed,
                c.mode,
                c.fold_digest,
                c.auroc[task_slot(Task::MbVsN)].mean,
                c.auroc[task_slot(Task::MVsBn)].mean
            ));
        }
        out
    }
}

/// Mean ± std over seeds of equal fold counts: the mean of means, and the
/// square root of the mean per-seed variance.
fn pool(values: &[MeanStd]) -> MeanStd {
    let n = values.len() as f64;
    MeanStd {
        mean: values.iter().map(|v| v.mean).sum::<f64>() / n,
        std: (values.iter().map(|v| v.std * v.std).sum::<f64>() / n).sqrt(),
    }
}

/// Evaluates a trained run on both tasks; with a run directory the
/// evaluations are written next to the checkpoints.
pub fn ablation_cell(dataset: &Dataset, run: &TrainedRun, seed: u64, mode: Mode, run_dir: Option<&Path>) -> Result<AblationCell> {
    let models = run.fold_models();
    let mut cell = AblationCell {
        seed,
        mode,
        fold_digest: run.folds.digest(),
        auroc: [MeanStd { mean: 0.0, std: 0.0 }; 2],
        pauc_ratio: [MeanStd { mean: 0.0, std: 0.0 }; 2],
        op_specificity: [MeanStd { mean: 0.0, std: 0.0 }; 2],
    };
    for task in Task::ALL {
        let ev = evaluate_run(dataset, &models, task, false)?;
        if let Some(rd) = run_dir {
            write_evaluation(&ev, &rd.join(eval_dir_name(task, false)))?;
        }
        let t = task_slot(task);
        cell.auroc[t] = ev.report.auroc;
        cell.pauc_ratio[t] = ev.report.pauc_ratio;
        cell.op_specificity[t] = ev.report.op_specificity;
    }
    Ok(cell)
}

/// Trains and evaluates every mode under each seed. Within a seed all modes
/// share the fold assignment. With a directory, runs go to
/// `dir/seed{s}/{mode}`.
pub fn ablate(
    dataset: &Dataset,
    cfg: &RunConfig,
    bank: Option<&AugmentBank>,
    modes: &[Mode],
    seeds: &[u64],
    dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for &seed in seeds {
        let mut digest = None;
        for &mode in modes {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = seed;
            run_cfg.train.hyper.mode = mode;
            let run_dir: Option<PathBuf> = dir.map(|d| d.join(format!("seed{seed}")).join(mode.as_str()));
            let run = train_run(dataset, &run_cfg, bank, run_dir.as_deref())?;
            let d = run.folds.digest();
            log::info!("ablation seed {seed} mode {mode}: fold hash {d}");
            if digest.get_or_insert_with(|| d.clone()) != &d {
                return Err(Error::Data(format!("fold assignment changed across modes under seed {seed}")));
            }
            cells.push(ablation_cell(dataset, &run, seed, mode, run_dir.as_deref())?);
        }
    }
    Ok(AblationTable {
        modes: modes.to_vec(),
        cells,
    })
}
