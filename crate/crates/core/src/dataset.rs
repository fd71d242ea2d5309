//! Target registry, label matrices, fold assignment, label normalization
//! and mini-batch assembly.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MimirError, Result};
use crate::projection::ProjectionTile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Continuous,
    Binary,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Continuous => "continuous",
            TargetKind::Binary => "binary",
        })
    }
}

impl FromStr for TargetKind {
    type Err = MimirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(TargetKind::Continuous),
            "binary" => Ok(TargetKind::Binary),
            other => Err(MimirError::validation(
                "kind",
                format!("expected `continuous` or `binary`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSpec {
    pub name: String,
    pub unit: String,
    pub kind: TargetKind,
    pub group: String,
}

/// Ordered set of targets with unique names.
///
/// Text form: one target per line as `name, unit, kind, group`; blank lines
/// and lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetRegistry {
    targets: Vec<TargetSpec>,
}

impl TargetRegistry {
    pub fn new(targets: Vec<TargetSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &targets {
            if t.name.is_empty() || t.name.contains([',', '\n']) {
                return Err(MimirError::validation(
                    "target name",
                    format!("`{}` is empty or contains a separator", t.name),
                ));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(MimirError::validation(
                    "target name",
                    format!("duplicate `{}`", t.name),
                ));
            }
        }
        Ok(TargetRegistry { targets })
    }

    pub fn targets(&self) -> &[TargetSpec] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.targets.iter().map(|t| t.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.name == name)
    }

    /// Sub-registry of one group, for training per-group network instances.
    pub fn filter_group(&self, group: &str) -> TargetRegistry {
        TargetRegistry {
            targets: self
                .targets
                .iter()
                .filter(|t| t.group == group)
                .cloned()
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut targets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(MimirError::format(
                    "target registry",
                    format!("line {}: expected 4 fields, got {}", lineno + 1, fields.len()),
                ));
            }
            targets.push(TargetSpec {
                name: fields[0].to_string(),
                unit: fields[1].to_string(),
                kind: fields[2].parse()?,
                group: fields[3].to_string(),
            });
        }
        TargetRegistry::new(targets)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# name, unit, kind, group\n");
        for t in &self.targets {
            out.push_str(&format!("{}, {}, {}, {}\n", t.name, t.unit, t.kind, t.group));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MimirError::io(path, e))?;
        TargetRegistry::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| MimirError::io(path, e))
    }
}

/// Per-subject target values with availability masks, row-major
/// `n_subjects × n_targets`. Values under mask 0 are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    subjects: Vec<String>,
    targets: Vec<String>,
    values: Vec<f64>,
    masks: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(
        subjects: Vec<String>,
        targets: Vec<String>,
        values: Vec<f64>,
        masks: Vec<u8>,
    ) -> Result<Self> {
        let cells = subjects.len() * targets.len();
        if values.len() != cells || masks.len() != cells {
            return Err(MimirError::shape(
                format!("{cells} cells"),
                format!("{} values / {} masks", values.len(), masks.len()),
            ));
        }
        if let Some(&m) = masks.iter().find(|&&m| m > 1) {
            return Err(MimirError::validation("mask", format!("must be 0 or 1, got {m}")));
        }
        if let Some(i) = (0..cells).find(|&i| masks[i] == 1 && !values[i].is_finite()) {
            return Err(MimirError::validation(
                "label value",
                format!(
                    "non-finite known value for subject `{}`, target `{}`",
                    subjects[i / targets.len()],
                    targets[i % targets.len()]
                ),
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = subjects.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(MimirError::validation("subject_id", format!("duplicate `{dup}`")));
        }
        Ok(LabelMatrix {
            subjects,
            targets,
            values,
            masks,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    pub fn target_index(&self, name: &str) -> Result<usize> {
        self.targets
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| MimirError::UnknownTarget(name.to_string()))
    }

    #[inline]
    pub fn is_known(&self, row: usize, target: usize) -> bool {
        self.masks[row * self.targets.len() + target] == 1
    }

    /// The value if known.
    #[inline]
    pub fn get(&self, row: usize, target: usize) -> Option<f64> {
        let i = row * self.targets.len() + target;
        (self.masks[i] == 1).then(|| self.values[i])
    }

    /// Overwrites one cell; used to probe leak-freedom of downstream steps.
    pub fn set(&mut self, row: usize, target: usize, value: f64, known: bool) {
        let i = row * self.targets.len() + target;
        self.values[i] = value;
        self.masks[i] = u8::from(known);
    }

    pub fn row_has_label(&self, row: usize) -> bool {
        (0..self.targets.len()).any(|t| self.is_known(row, t))
    }

    /// Rows without any known value; such subjects cannot contribute to training.
    pub fn unusable_rows(&self) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&r| !self.row_has_label(r))
            .collect()
    }

    /// Checks binary targets hold only 0/1 where known.
    pub fn check_against(&self, registry: &TargetRegistry) -> Result<()> {
        if registry.names() != self.targets {
            return Err(MimirError::shape(
                format!("{:?}", registry.names()),
                format!("{:?}", self.targets),
            ));
        }
        for (t, spec) in registry.targets().iter().enumerate() {
            if spec.kind != TargetKind::Binary {
                continue;
            }
            for r in 0..self.n_subjects() {
                if let Some(v) = self.get(r, t) {
                    if v != 0.0 && v != 1.0 {
                        return Err(MimirError::validation(
                            "label value",
                            format!("binary target `{}` has value {v}", spec.name),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// CSV with `subject_id`, then `<name>,<name>_mask` per target. Masked
    /// values are written empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["subject_id".to_string()];
        for t in &self.targets {
            header.push(t.clone());
            header.push(format!("{t}_mask"));
        }
        w.write_record(&header)?;
        for (r, id) in self.subjects.iter().enumerate() {
            let mut rec = vec![id.clone()];
            for t in 0..self.targets.len() {
                match self.get(r, t) {
                    Some(v) => {
                        rec.push(v.to_string());
                        rec.push("1".into());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push("0".into());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let header = r.headers()?.clone();
        if header.is_empty() || &header[0] != "subject_id" || header.len() % 2 != 1 {
            return Err(MimirError::format(
                "labels CSV",
                "expected `subject_id` followed by value/mask column pairs",
            ));
        }
        let mut targets = Vec::new();
        for pair in 0..(header.len() - 1) / 2 {
            let name = &header[1 + 2 * pair];
            if header[2 + 2 * pair] != format!("{name}_mask") {
                return Err(MimirError::format(
                    "labels CSV",
                    format!("column after `{name}` must be `{name}_mask`"),
                ));
            }
            targets.push(name.to_string());
        }
        let mut subjects = Vec::new();
        let mut values = Vec::new();
        let mut masks = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            subjects.push(rec[0].to_string());
            for t in 0..targets.len() {
                let mask: u8 = rec[2 + 2 * t].trim().parse().map_err(|_| {
                    MimirError::format("labels CSV", format!("bad mask `{}`", &rec[2 + 2 * t]))
                })?;
                let raw = rec[1 + 2 * t].trim();
                let value = if mask == 1 {
                    raw.parse::<f64>().map_err(|_| {
                        MimirError::format("labels CSV", format!("bad value `{raw}`"))
                    })?
                } else {
                    f64::NAN
                };
                values.push(value);
                masks.push(mask);
            }
        }
        LabelMatrix::new(subjects, targets, values, masks)
    }
}

/// Per-target z-score statistics from known training entries.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    #[inline]
    pub fn normalize(&self, target: usize, value: f64) -> f64 {
        (value - self.mean[target]) / self.std[target]
    }

    #[inline]
    pub fn denormalize(&self, target: usize, z: f64) -> f64 {
        z * self.std[target] + self.mean[target]
    }
}

/// Mean and sample standard deviation (n − 1 denominator) over rows where
/// `train_rows` is true and the label is known. Rows outside the training
/// set are never read.
pub fn compute_norm_stats(labels: &LabelMatrix, train_rows: &[bool]) -> Result<NormStats> {
    if train_rows.len() != labels.n_subjects() {
        return Err(MimirError::shape(labels.n_subjects(), train_rows.len()));
    }
    let mut mean = Vec::with_capacity(labels.n_targets());
    let mut std = Vec::with_capacity(labels.n_targets());
    for t in 0..labels.n_targets() {
        let known: Vec<f64> = (0..labels.n_subjects())
            .filter(|&r| train_rows[r])
            .filter_map(|r| labels.get(r, t))
            .collect();
        let name = &labels.targets()[t];
        if known.len() < 2 {
            return Err(MimirError::TargetRejected {
                target: name.clone(),
                reason: format!("{} known training values, need at least 2", known.len()),
            });
        }
        let n = known.len() as f64;
        let m = known.iter().sum::<f64>() / n;
        let var = known.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        let s = var.sqrt();
        if !(s > 0.0 && s.is_finite()) {
            return Err(MimirError::TargetRejected {
                target: name.clone(),
                reason: "zero spread over known training values".into(),
            });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(NormStats { mean, std })
}

/// Per-channel standardization of network inputs, fitted on training tiles.
///
/// Tile pixels are max-normalized per subject, which leaves the two channels
/// on very different scales (the fat panel is mostly near zero). Centring and
/// scaling each channel lets the first layers respond to shape rather than
/// to a constant offset.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes `inputs` in place; the layout is `n × C × plane`.
    pub fn apply(&self, inputs: &mut [f32], plane: usize) -> Result<()> {
        let c = self.channels();
        if c == 0 || plane == 0 || inputs.len() % (c * plane) != 0 {
            return Err(MimirError::shape(
                format!("a multiple of {c} × {plane} values"),
                inputs.len(),
            ));
        }
        for (i, chunk) in inputs.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(())
    }
}

/// Pixel mean and population standard deviation per channel over the tiles
/// whose row is marked in `train_rows`. A channel without spread keeps unit
/// scale.
pub fn compute_input_norm(tiles: &[ProjectionTile], train_rows: &[bool]) -> Result<InputNorm> {
    if train_rows.len() != tiles.len() {
        return Err(MimirError::shape(tiles.len(), train_rows.len()));
    }
    let Some(first) = tiles.iter().zip(train_rows).find(|(_, &keep)| keep).map(|(t, _)| t) else {
        return Err(MimirError::NoTrainingRows { fold: None });
    };
    let (c, h, w) = first.dims();
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sum_sq = vec![0.0f64; c];
    let mut count = 0usize;
    for (tile, _) in tiles.iter().zip(train_rows).filter(|(_, &keep)| keep) {
        if tile.dims() != (c, h, w) {
            return Err(MimirError::shape(format!("{:?}", (c, h, w)), format!("{:?}", tile.dims())));
        }
        for ch in 0..c {
            for &v in &tile.pixels[ch * plane..(ch + 1) * plane] {
                let v = v as f64;
                sum[ch] += v;
                sum_sq[ch] += v * v;
            }
        }
        count += plane;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let s = (sq / n - m * m).max(0.0).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(InputNorm { mean, std })
}

/// Fold index per subject, in label-row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&r| self.folds[r] == fold).collect()
    }

    /// `true` for rows outside `fold`.
    pub fn training_mask(&self, fold: usize) -> Vec<bool> {
        self.folds.iter().map(|&f| f != fold).collect()
    }

    pub fn write_csv(&self, subjects: &[String], path: impl AsRef<Path>) -> Result<()> {
        if subjects.len() != self.folds.len() {
            return Err(MimirError::shape(self.folds.len(), subjects.len()));
        }
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["subject_id", "fold"])?;
        for (s, f) in subjects.iter().zip(&self.folds) {
            w.write_record([s.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|e| MimirError::io(path.as_ref(), e))
    }

    /// Reads `subject_id,fold` rows and orders them like `subjects`.
    pub fn read_csv(subjects: &[String], path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut by_id = std::collections::HashMap::new();
        for rec in r.records() {
            let rec = rec?;
            let fold: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| MimirError::format("fold CSV", format!("bad fold `{}`", &rec[1])))?;
            by_id.insert(rec[0].to_string(), fold);
        }
        let folds = subjects
            .iter()
            .map(|s| {
                by_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| MimirError::format("fold CSV", format!("no fold for `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = folds.iter().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, folds })
    }
}

/// Assigns subjects to `k` folds of near-equal size.
///
/// With a stratum key, subjects are grouped by the key (0/1 for binary
/// values, quartile bins for continuous values, one extra group for
/// unknown values), each group is shuffled, and groups are dealt round-robin
/// in sequence. Every fold then holds ⌊p/k⌋ or ⌈p/k⌉ members of a group of
/// size p, and overall sizes differ by at most one.
pub fn make_folds(
    labels: &LabelMatrix,
    k: usize,
    strata_key: Option<&str>,
    seed: u64,
) -> Result<FoldAssignment> {
    let n = labels.n_subjects();
    if k < 2 || k > n {
        return Err(MimirError::validation(
            "k",
            format!("need 2 <= k <= {n} subjects, got {k}"),
        ));
    }
    let strata = match strata_key {
        Some(name) => stratum_groups(labels, labels.target_index(name)?),
        None => vec![(0..n).collect()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; n];
    let mut position = 0;
    for mut group in strata {
        group.shuffle(&mut rng);
        for row in group {
            folds[row] = position % k;
            position += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

fn stratum_groups(labels: &LabelMatrix, target: usize) -> Vec<Vec<usize>> {
    let n = labels.n_subjects();
    let known: Vec<(usize, f64)> = (0..n)
        .filter_map(|r| labels.get(r, target).map(|v| (r, v)))
        .collect();
    let unknown: Vec<usize> = (0..n).filter(|&r| !labels.is_known(r, target)).collect();
    let binary = known.iter().all(|&(_, v)| v == 0.0 || v == 1.0);
    let mut groups = if binary {
        let mut g = vec![Vec::new(), Vec::new()];
        for &(r, v) in &known {
            g[v as usize].push(r);
        }
        g
    } else {
        let mut sorted = known.clone();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut g = vec![Vec::new(); 4];
        let m = sorted.len();
        for (rank, &(r, _)) in sorted.iter().enumerate() {
            g[rank * 4 / m].push(r);
        }
        g
    };
    groups.push(unknown);
    groups
}

/// Network inputs and normalized targets for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    /// `n × C × H × W`.
    pub inputs: Vec<f32>,
    /// `n × T`, z-normalized; 0 where masked.
    pub y_norm: Vec<f64>,
    pub masks: Vec<u8>,
}

/// Translates a tile by `(dx, dy)` pixels (columns, rows) with zero fill.
pub fn shift_tile(tile: &ProjectionTile, dx: isize, dy: isize) -> ProjectionTile {
    let (c, h, w) = (tile.channels, tile.height, tile.width);
    let mut out = vec![0.0f32; tile.pixels.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = tile.pixels[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    ProjectionTile {
        channels: c,
        height: h,
        width: w,
        pixels: out,
    }
}

/// Stacks tiles (indexed like label rows) and z-normalized labels for
/// `indices`. With `augment`, each tile is shifted by integer offsets drawn
/// uniformly from `[-max_shift, max_shift]` per axis.
pub fn make_batch(
    tiles: &[ProjectionTile],
    labels: &LabelMatrix,
    norm: &NormStats,
    indices: &[usize],
    augment: bool,
    max_shift: usize,
    seed: u64,
) -> Result<Batch> {
    if tiles.len() != labels.n_subjects() {
        return Err(MimirError::shape(
            format!("{} tiles", labels.n_subjects()),
            format!("{} tiles", tiles.len()),
        ));
    }
    let t = labels.n_targets();
    if norm.mean.len() != t {
        return Err(MimirError::shape(format!("{t} norm entries"), norm.mean.len()));
    }
    let Some(first) = indices.first() else {
        return Ok(Batch {
            n: 0,
            inputs: Vec::new(),
            y_norm: Vec::new(),
            masks: Vec::new(),
        });
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= tiles.len()) {
        return Err(MimirError::validation("batch index", format!("{bad} out of range")));
    }
    let dims = tiles[*first].dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(indices.len() * tiles[*first].pixels.len());
    let mut y_norm = Vec::with_capacity(indices.len() * t);
    let mut masks = Vec::with_capacity(indices.len() * t);
    let m = max_shift as isize;
    for &i in indices {
        let tile = &tiles[i];
        if tile.dims() != dims {
            return Err(MimirError::shape(format!("{dims:?}"), format!("{:?}", tile.dims())));
        }
        if augment && max_shift > 0 {
            let dx = rng.gen_range(-m..=m);
            let dy = rng.gen_range(-m..=m);
            inputs.extend_from_slice(&shift_tile(tile, dx, dy).pixels);
        } else {
            inputs.extend_from_slice(&tile.pixels);
        }
        for target in 0..t {
            match labels.get(i, target) {
                Some(v) => {
                    y_norm.push(norm.normalize(target, v));
                    masks.push(1);
                }
                None => {
                    y_norm.push(0.0);
                    masks.push(0);
                }
            }
        }
    }
    Ok(Batch {
        n: indices.len(),
        inputs,
        y_norm,
        masks,
    })
}
