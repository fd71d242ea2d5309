//! The subcommands. Each returns a small summary for the caller to log.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use mimir_core::checkpoint::ModelCheckpoint;
use mimir_core::dataset::{make_folds, FoldAssignment, LabelMatrix, TargetKind, TargetRegistry};
use mimir_core::inference::{
    predict_tiles, prepare_tile, raw_predictions, read_predictions_csv, records_from_raw,
    write_predictions_csv, PredictionRecord,
};
use mimir_core::metrics::{MetricsReport, TargetMetrics};
use mimir_core::phantom::{generate_subject, labels_with_dropout, phantom_registry};
use mimir_core::projection::{project, resize_tile, ProjectionTile};
use mimir_core::training::{train, TrainedModel};
use mimir_core::uncertainty::{fit_calibration, CalibrationFactors};
use mimir_core::volume::VolumeGrid;
use mimir_core::MimirError;

use crate::config::Config;
use crate::data::{
    load_labels, load_tiles, require_dir, select_targets, subject_id_of, volume_files, write_key_values,
    DataDir, Dataset,
};
use crate::CliError;

pub const FOLDS_FILE: &str = "folds.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const PROVENANCE_FILE: &str = "provenance.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

pub fn fold_checkpoint_name(fold: usize) -> String {
    format!("fold_{fold}.mckp")
}

pub fn fold_training_list_name(fold: usize) -> String {
    format!("fold_{fold}_training.txt")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSummary {
    pub n_subjects: usize,
    pub unusable: usize,
}

/// Writes a phantom cohort into the existing directory `out`.
pub fn phantom(cfg: &Config, out: &Path) -> Result<PhantomSummary, CliError> {
    require_dir(out, "output")?;
    let spec = cfg.phantom_spec();
    let dir = DataDir { root: out.to_path_buf() };
    let volumes = dir.volumes();
    fs::create_dir_all(&volumes).map_err(|e| MimirError::io(&volumes, e))?;
    let registry = phantom_registry();
    let rows = (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| {
            let s = generate_subject(&spec, i)?;
            s.volume.save(dir.volume_path(&s.subject_id))?;
            let values = registry.targets().iter().map(|t| s.truth[&t.name]).collect();
            Ok((s.subject_id, values))
        })
        .collect::<mimir_core::Result<Vec<(String, Vec<f64>)>>>()?;
    let labels = labels_with_dropout(&registry, rows, spec.missing_rate, spec.seed)?;
    labels.write_csv(dir.labels())?;
    registry.save(dir.registry())?;
    let unusable = labels.unusable_rows().len();
    let [d, h, w] = spec.grid_dims;
    write_key_values(
        &dir.manifest(),
        &[
            ("n_subjects", spec.n_subjects.to_string()),
            ("seed", spec.seed.to_string()),
            ("grid_dims", format!("{d}x{h}x{w}")),
            ("voxel_size", spec.voxel_size.to_string()),
            ("missing_rate", spec.missing_rate.to_string()),
            ("noise_sigma", spec.noise_sigma.to_string()),
            ("n_targets", registry.len().to_string()),
            ("unusable_subjects", unusable.to_string()),
        ],
    )?;
    Ok(PhantomSummary {
        n_subjects: spec.n_subjects,
        unusable,
    })
}

/// Writes `<id>.mtil` per input volume (and `<id>_c<k>.pgm` per channel
/// with `pgm`). With `resize`, tiles are resampled to the configured
/// network input; otherwise they keep the projection's native size.
pub fn project_volumes(cfg: &Config, inputs: &[PathBuf], out: &Path, resize: bool, pgm: bool) -> Result<usize, CliError> {
    require_dir(out, "output")?;
    let files = volume_files(inputs)?;
    files.par_iter().try_for_each(|path| -> mimir_core::Result<()> {
        let id = subject_id_of(path);
        let volume = VolumeGrid::load(path)?;
        let mut tile = project(&volume)?;
        if resize {
            tile = resize_tile(&tile, cfg.input.1, cfg.input.2)?;
        }
        tile.save(out.join(format!("{id}.mtil")))?;
        if pgm {
            for c in 0..tile.channels {
                let p = out.join(format!("{id}_c{c}.pgm"));
                fs::write(&p, tile.to_pgm(c)).map_err(|e| MimirError::io(&p, e))?;
            }
        }
        Ok(())
    })?;
    Ok(files.len())
}

fn load_dataset(cfg: &Config, dir: &DataDir) -> Result<Dataset, CliError> {
    let (registry, labels) = load_labels(dir, cfg.group.as_deref())?;
    let network = cfg.network(registry.len());
    let tiles = load_tiles(dir, labels.subjects(), &network)?;
    Ok(Dataset {
        registry,
        labels,
        tiles,
    })
}

fn build_checkpoint(
    cfg: &Config,
    registry: &TargetRegistry,
    model: TrainedModel,
    calibration: CalibrationFactors,
    validation_fold: Option<usize>,
) -> ModelCheckpoint {
    ModelCheckpoint {
        registry: registry.clone(),
        norm_stats: model.norm_stats,
        input_norm: model.input_norm,
        calibration,
        network: cfg.network(registry.len()),
        params: model.params,
        training: cfg.training_config(),
        metadata: vec![
            ("created_by".into(), format!("mimir {}", env!("CARGO_PKG_VERSION"))),
            (
                "validation_fold".into(),
                validation_fold.map_or("none".into(), |f| f.to_string()),
            ),
            ("training_rows".into(), model.training_rows.len().to_string()),
        ],
    }
}

/// Fits calibration factors on `rows` of a dataset for a checkpoint's model.
/// Returns the factors and the raw (uncalibrated) means and sigmas.
fn calibrate_on_rows(
    ckpt: &ModelCheckpoint,
    tiles: &[ProjectionTile],
    labels: &LabelMatrix,
    rows: &[usize],
    source: &str,
) -> Result<(CalibrationFactors, Vec<f64>, Vec<f64>), CliError> {
    let subset: Vec<&ProjectionTile> = rows.iter().map(|&r| &tiles[r]).collect();
    let (means, sigmas) = raw_predictions(&ckpt.params, &ckpt.network, &ckpt.norm_stats, &ckpt.input_norm, &subset)?;
    let t = labels.n_targets();
    let mut y = Vec::with_capacity(rows.len() * t);
    let mut masks = Vec::with_capacity(rows.len() * t);
    for &r in rows {
        for k in 0..t {
            match labels.get(r, k) {
                Some(v) => {
                    y.push(v);
                    masks.push(1);
                }
                None => {
                    y.push(0.0);
                    masks.push(0);
                }
            }
        }
    }
    let factors = fit_calibration(&means, &sigmas, &y, &masks, t, source)?;
    Ok((factors, means, sigmas))
}

fn read_holdout(labels: &LabelMatrix, holdout: Option<(&Path, usize)>) -> Result<Option<(FoldAssignment, usize)>, CliError> {
    holdout
        .map(|(path, fold)| Ok((FoldAssignment::read_csv(labels.subjects(), path)?, fold)))
        .transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub training_rows: usize,
    pub final_loss: Option<f64>,
}

/// Trains one model on the data directory, leaving out the validation fold
/// of `holdout` when given. The checkpoint carries identity calibration.
pub fn train_model(
    cfg: &Config,
    data: &Path,
    out: &Path,
    holdout: Option<(&Path, usize)>,
    log: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    let dir = DataDir::open(data)?;
    let ds = load_dataset(cfg, &dir)?;
    let folds = read_holdout(&ds.labels, holdout)?;
    let network = cfg.network(ds.registry.len());
    let model = train(
        &ds.tiles,
        &ds.labels,
        folds.as_ref().map(|(f, k)| (f, *k)),
        &network,
        &cfg.training_config(),
    )?;
    if let Some(path) = log {
        model.log.write_csv(path)?;
    }
    let summary = TrainSummary {
        training_rows: model.training_rows.len(),
        final_loss: model.log.entries.last().map(|e| e.loss),
    };
    let ckpt = build_checkpoint(
        cfg,
        &ds.registry,
        model,
        CalibrationFactors::identity(ds.registry.len()),
        folds.map(|(_, k)| k),
    );
    ckpt.save(out)?;
    Ok(summary)
}

/// Fits calibration factors for `checkpoint` on the subjects of `data` (or
/// only the validation fold of `holdout`) and writes the updated checkpoint.
pub fn calibrate(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    holdout: Option<(&Path, usize)>,
    csv: Option<&Path>,
) -> Result<CalibrationFactors, CliError> {
    let mut ckpt = ModelCheckpoint::load(checkpoint)?;
    let dir = DataDir::open(data)?;
    let (registry, labels) = load_labels(&dir, None)?;
    let (_, labels) = select_targets(&registry, &labels, &ckpt.registry.names())?;
    let folds = read_holdout(&labels, holdout)?;
    let (rows, source) = match &folds {
        Some((f, k)) => (f.validation_rows(*k), format!("fold-{k}")),
        None => ((0..labels.n_subjects()).collect(), format!("data:{}", data.display())),
    };
    let subjects: Vec<String> = rows.iter().map(|&r| labels.subjects()[r].clone()).collect();
    let tiles = load_tiles(&dir, &subjects, &ckpt.network)?;
    let local: Vec<usize> = (0..rows.len()).collect();
    let sub_labels = subset_rows(&labels, &rows)?;
    let (factors, _, _) = calibrate_on_rows(&ckpt, &tiles, &sub_labels, &local, &source)?;
    ckpt.calibration = factors.clone();
    ckpt.save(out)?;
    if let Some(path) = csv {
        factors.write_csv(&ckpt.registry.names(), path)?;
    }
    Ok(factors)
}

fn subset_rows(labels: &LabelMatrix, rows: &[usize]) -> Result<LabelMatrix, CliError> {
    let t = labels.n_targets();
    let mut values = Vec::with_capacity(rows.len() * t);
    let mut masks = Vec::with_capacity(rows.len() * t);
    for &r in rows {
        values.extend_from_slice(&labels.values()[r * t..(r + 1) * t]);
        masks.extend_from_slice(&labels.masks()[r * t..(r + 1) * t]);
    }
    let subjects = rows.iter().map(|&r| labels.subjects()[r].clone()).collect();
    Ok(LabelMatrix::new(subjects, labels.targets().to_vec(), values, masks)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSummary {
    pub k: usize,
    pub fold_sizes: Vec<usize>,
    pub report: MetricsReport,
}

struct FoldOutcome {
    rows: Vec<usize>,
    records: Vec<PredictionRecord>,
}

/// Stratified k-fold cross-validation. For each fold: train on the other
/// folds, predict the held-out fold, calibrate on it, and save the fold's
/// checkpoint, training log, calibration factors and training-subject list.
/// Pooled predictions, provenance, fold assignment and the metrics report
/// are written to `out`.
pub fn cv(cfg: &Config, data: &Path, out: &Path) -> Result<CvSummary, CliError> {
    require_dir(out, "output")?;
    let dir = DataDir::open(data)?;
    let ds = load_dataset(cfg, &dir)?;
    let subjects = ds.labels.subjects().to_vec();
    let strata = cfg.strata_key.as_deref();
    let folds = make_folds(&ds.labels, cfg.k, strata, cfg.fold_seed())?;
    folds.write_csv(&subjects, out.join(FOLDS_FILE))?;
    fs::write(out.join(CONFIG_ECHO_FILE), cfg.to_text())
        .map_err(|e| MimirError::io(out.join(CONFIG_ECHO_FILE), e))?;
    let network = cfg.network(ds.registry.len());
    let training = cfg.training_config();
    let targets = ds.registry.names();

    let outcomes: Vec<Result<FoldOutcome, String>> = (0..cfg.k)
        .into_par_iter()
        .map(|fold| {
            let run = || -> Result<FoldOutcome, CliError> {
                let model = train(&ds.tiles, &ds.labels, Some((&folds, fold)), &network, &training)?;
                model.log.write_csv(out.join(format!("fold_{fold}_log.csv")))?;
                let trained: String = model
                    .training_rows
                    .iter()
                    .map(|&r| format!("{}\n", subjects[r]))
                    .collect();
                let list = out.join(fold_training_list_name(fold));
                fs::write(&list, trained).map_err(|e| MimirError::io(&list, e))?;
                let mut ckpt = build_checkpoint(
                    cfg,
                    &ds.registry,
                    model,
                    CalibrationFactors::identity(targets.len()),
                    Some(fold),
                );
                let rows = folds.validation_rows(fold);
                let (factors, means, sigmas) =
                    calibrate_on_rows(&ckpt, &ds.tiles, &ds.labels, &rows, &format!("fold-{fold}"))?;
                factors.write_csv(&targets, out.join(format!("fold_{fold}_calibration.csv")))?;
                let ids: Vec<String> = rows.iter().map(|&r| subjects[r].clone()).collect();
                let records = records_from_raw(&ids, &means, &sigmas, &factors, cfg.level)?;
                ckpt.calibration = factors;
                ckpt.save(out.join(fold_checkpoint_name(fold)))?;
                Ok(FoldOutcome { rows, records })
            };
            run().map_err(|e| format!("fold {fold}: {e}"))
        })
        .collect();

    let mut pooled: Vec<Option<(usize, PredictionRecord)>> = vec![None; subjects.len()];
    let mut failures = Vec::new();
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                for (r, rec) in o.rows.into_iter().zip(o.records) {
                    pooled[r] = Some((fold, rec));
                }
            }
            Err(msg) => failures.push(msg),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Failed(failures.join("; ")));
    }
    let pooled: Vec<(usize, PredictionRecord)> = pooled
        .into_iter()
        .map(|p| p.expect("every subject lies in exactly one validation fold"))
        .collect();
    let records: Vec<PredictionRecord> = pooled.iter().map(|(_, r)| r.clone()).collect();
    write_predictions_csv(out.join(PREDICTIONS_FILE), &targets, &records)?;

    let mut prov = csv::Writer::from_path(out.join(PROVENANCE_FILE)).map_err(MimirError::from)?;
    prov.write_record(["subject_id", "fold", "checkpoint"]).map_err(MimirError::from)?;
    for (fold, rec) in &pooled {
        prov.write_record([rec.subject_id.clone(), fold.to_string(), fold_checkpoint_name(*fold)])
            .map_err(MimirError::from)?;
    }
    prov.flush().map_err(|e| MimirError::io(out.join(PROVENANCE_FILE), e))?;

    let report = evaluate_records(&targets, &records, &ds.labels, &|name| binary_in_registry(&ds.registry, name), cfg.threshold)?;
    report.write_csv(out.join(REPORT_FILE))?;
    Ok(CvSummary {
        k: cfg.k,
        fold_sizes: folds.fold_sizes(),
        report,
    })
}

fn binary_in_registry(registry: &TargetRegistry, name: &str) -> bool {
    registry
        .index_of(name)
        .is_some_and(|i| registry.targets()[i].kind == TargetKind::Binary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSummary {
    pub predicted: usize,
    pub failed: Vec<(PathBuf, String)>,
    pub seconds: f64,
}

impl PredictSummary {
    pub fn throughput(&self) -> f64 {
        if self.seconds > 0.0 {
            self.predicted as f64 / self.seconds
        } else {
            0.0
        }
    }
}

/// Predicts every readable volume among `inputs` (files or directories of
/// `.mvol` files). Unreadable volumes are skipped and listed; the command
/// fails only when inputs were given and none could be read.
pub fn predict(checkpoint: &Path, inputs: &[PathBuf], out: &Path, level: f64) -> Result<PredictSummary, CliError> {
    let start = Instant::now();
    let ckpt = ModelCheckpoint::load(checkpoint)?;
    let files = volume_files(inputs)?;
    let loaded: Vec<(String, mimir_core::Result<ProjectionTile>)> = files
        .par_iter()
        .map(|path| {
            let tile = VolumeGrid::load(path).and_then(|v| prepare_tile(&v, &ckpt.network));
            (subject_id_of(path), tile)
        })
        .collect();
    let mut ids = Vec::new();
    let mut tiles = Vec::new();
    let mut failed = Vec::new();
    for ((id, tile), path) in loaded.into_iter().zip(&files) {
        match tile {
            Ok(t) => {
                ids.push(id);
                tiles.push(t);
            }
            Err(e) => failed.push((path.clone(), e.to_string())),
        }
    }
    if !files.is_empty() && ids.is_empty() {
        let list: Vec<String> = failed.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect();
        return Err(CliError::Failed(format!("no readable volumes ({})", list.join("; "))));
    }
    let refs: Vec<&ProjectionTile> = tiles.iter().collect();
    let records = predict_tiles(&ckpt, &ids, &refs, level)?;
    write_predictions_csv(out, &ckpt.registry.names(), &records)?;
    Ok(PredictSummary {
        predicted: records.len(),
        failed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Agreement metrics of prediction records against labels, one row per
/// prediction target, over subjects present in both with a known label.
pub fn evaluate_records(
    targets: &[String],
    records: &[PredictionRecord],
    labels: &LabelMatrix,
    is_binary: &dyn Fn(&str) -> bool,
    threshold: f64,
) -> Result<MetricsReport, CliError> {
    let row_of: HashMap<&str, usize> = labels
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let matched: Vec<(&PredictionRecord, usize)> = records
        .iter()
        .filter_map(|rec| row_of.get(rec.subject_id.as_str()).map(|&r| (rec, r)))
        .collect();
    if matched.is_empty() {
        return Err(CliError::Failed(
            "predictions and labels have no subject ids in common".into(),
        ));
    }
    let mut report = MetricsReport::default();
    for (k, name) in targets.iter().enumerate() {
        let col = labels.target_index(name)?;
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        let mut intervals = Vec::new();
        for (rec, r) in &matched {
            if let Some(y) = labels.get(*r, col) {
                let p = rec.targets[k];
                truth.push(y);
                pred.push(p.mean);
                intervals.push((p.ci_low, p.ci_high));
            }
        }
        report.rows.push(TargetMetrics::compute(
            name,
            &truth,
            &pred,
            Some(&intervals),
            is_binary(name),
            threshold,
        )?);
    }
    Ok(report)
}

/// Target kinds come from `registry` when given; otherwise a target is
/// treated as binary when every known label is 0 or 1.
pub fn evaluate(
    predictions: &Path,
    labels: &Path,
    registry: Option<&Path>,
    threshold: f64,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let (targets, records) = read_predictions_csv(predictions)?;
    let labels = LabelMatrix::read_csv(labels)?;
    let registry = registry.map(TargetRegistry::load).transpose()?;
    let inferred = |name: &str| -> bool {
        let Ok(col) = labels.target_index(name) else {
            return false;
        };
        let known: Vec<f64> = (0..labels.n_subjects()).filter_map(|r| labels.get(r, col)).collect();
        !known.is_empty() && known.iter().all(|&v| v == 0.0 || v == 1.0)
    };
    let is_binary = |name: &str| match &registry {
        Some(reg) => binary_in_registry(reg, name),
        None => inferred(name),
    };
    let report = evaluate_records(&targets, &records, &labels, &is_binary, threshold)?;
    report.write_csv(out)?;
    Ok(report)
}
