//! Batch prediction with calibrated intervals and the predictions CSV.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::ModelCheckpoint;
use crate::dataset::{InputNorm, NormStats};
use crate::error::{MimirError, Result};
use crate::model::{predict, NetworkConfig, ParameterSet};
use crate::projection::{project, resize_tile, ProjectionTile};
use crate::uncertainty::{z_for_level, CalibrationFactors};
use crate::volume::VolumeGrid;

const PREDICT_CHUNK: usize = 64;

/// Projects a volume and resamples the tile to the network input size.
pub fn prepare_tile(volume: &VolumeGrid, network: &NetworkConfig) -> Result<ProjectionTile> {
    let tile = project(volume)?;
    if tile.channels != network.input_channels {
        return Err(MimirError::shape(network.input_channels, tile.channels));
    }
    resize_tile(&tile, network.input_height, network.input_width)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPrediction {
    /// Denormalized, in target units.
    pub mean: f64,
    /// Calibrated standard deviation in target units.
    pub sigma: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub targets: Vec<TargetPrediction>,
}

/// Denormalized means and uncalibrated sigmas, `n × T` each.
pub fn raw_predictions(
    params: &ParameterSet<f32>,
    network: &NetworkConfig,
    norm: &NormStats,
    input_norm: &InputNorm,
    tiles: &[&ProjectionTile],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = network.n_targets;
    let len = network.input_len();
    let want = (network.input_channels, network.input_height, network.input_width);
    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = tiles
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * len);
            for tile in chunk {
                if tile.dims() != want {
                    return Err(MimirError::shape(format!("{want:?}"), format!("{:?}", tile.dims())));
                }
                inputs.extend_from_slice(&tile.pixels);
            }
            input_norm.apply(&mut inputs, network.input_height * network.input_width)?;
            let (mu, s) = predict(params, network, &inputs, chunk.len())?;
            let mut means = Vec::with_capacity(mu.len());
            let mut sigmas = Vec::with_capacity(mu.len());
            for (i, (&m, &lv)) in mu.iter().zip(&s).enumerate() {
                let target = i % t;
                means.push(norm.denormalize(target, m as f64));
                sigmas.push((0.5 * lv as f64).exp() * norm.std[target]);
            }
            Ok((means, sigmas))
        })
        .collect();
    let mut means = Vec::with_capacity(tiles.len() * t);
    let mut sigmas = Vec::with_capacity(tiles.len() * t);
    for c in chunks {
        let (m, s) = c?;
        means.extend(m);
        sigmas.extend(s);
    }
    Ok((means, sigmas))
}

/// Builds records from raw outputs, scaling sigmas by the calibration
/// factors and attaching central intervals at `level`.
pub fn records_from_raw(
    subject_ids: &[String],
    means: &[f64],
    sigmas: &[f64],
    calibration: &CalibrationFactors,
    level: f64,
) -> Result<Vec<PredictionRecord>> {
    let t = calibration.factors.len();
    if means.len() != subject_ids.len() * t || sigmas.len() != means.len() {
        return Err(MimirError::shape(subject_ids.len() * t, means.len()));
    }
    let z = z_for_level(level)?;
    Ok(subject_ids
        .iter()
        .enumerate()
        .map(|(r, id)| PredictionRecord {
            subject_id: id.clone(),
            targets: (0..t)
                .map(|k| {
                    let mean = means[r * t + k];
                    let sigma = sigmas[r * t + k] * calibration.factors[k];
                    let half = z * sigma;
                    TargetPrediction {
                        mean,
                        sigma,
                        ci_low: mean - half,
                        ci_high: mean + half,
                    }
                })
                .collect(),
        })
        .collect())
}

pub fn predict_tiles(
    checkpoint: &ModelCheckpoint,
    subject_ids: &[String],
    tiles: &[&ProjectionTile],
    level: f64,
) -> Result<Vec<PredictionRecord>> {
    if subject_ids.len() != tiles.len() {
        return Err(MimirError::shape(subject_ids.len(), tiles.len()));
    }
    let (means, sigmas) = raw_predictions(
        &checkpoint.params,
        &checkpoint.network,
        &checkpoint.norm_stats,
        &checkpoint.input_norm,
        tiles,
    )?;
    records_from_raw(subject_ids, &means, &sigmas, &checkpoint.calibration, level)
}

pub fn prediction_header(targets: &[String]) -> Vec<String> {
    let mut header = vec!["subject_id".to_string()];
    for t in targets {
        for suffix in ["mean", "sigma", "ci_low", "ci_high"] {
            header.push(format!("{t}_{suffix}"));
        }
    }
    header
}

/// Columns: `subject_id`, then `<t>_mean,<t>_sigma,<t>_ci_low,<t>_ci_high`
/// per target.
pub fn write_predictions_csv(
    path: impl AsRef<Path>,
    targets: &[String],
    records: &[PredictionRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(prediction_header(targets))?;
    for rec in records {
        if rec.targets.len() != targets.len() {
            return Err(MimirError::shape(targets.len(), rec.targets.len()));
        }
        let mut row = vec![rec.subject_id.clone()];
        for p in &rec.targets {
            row.extend([p.mean, p.sigma, p.ci_low, p.ci_high].map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<PredictionRecord>)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header = r.headers()?.clone();
    if header.is_empty() || &header[0] != "subject_id" || (header.len() - 1) % 4 != 0 {
        return Err(MimirError::format(
            "predictions CSV",
            "expected `subject_id` followed by four columns per target",
        ));
    }
    let mut targets = Vec::new();
    for k in 0..(header.len() - 1) / 4 {
        let col = &header[1 + 4 * k];
        let name = col.strip_suffix("_mean").ok_or_else(|| {
            MimirError::format("predictions CSV", format!("column `{col}` should end in `_mean`"))
        })?;
        let expected = prediction_header(&[name.to_string()]);
        if (1..4).any(|j| header[1 + 4 * k + j] != expected[1 + j]) {
            return Err(MimirError::format(
                "predictions CSV",
                format!("unexpected columns for target `{name}`"),
            ));
        }
        targets.push(name.to_string());
    }
    let mut records = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| MimirError::format("predictions CSV", format!("bad number `{}`", &rec[i])))
        };
        let mut preds = Vec::with_capacity(targets.len());
        for k in 0..targets.len() {
            let b = 1 + 4 * k;
            preds.push(TargetPrediction {
                mean: num(b)?,
                sigma: num(b + 1)?,
                ci_low: num(b + 2)?,
                ci_high: num(b + 3)?,
            });
        }
        records.push(PredictionRecord {
            subject_id: rec[0].to_string(),
            targets: preds,
        });
    }
    Ok((targets, records))
}
