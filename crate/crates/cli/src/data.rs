//! On-disk layout of a data directory:
//!
//! ```text
//! <dir>/volumes/<subject_id>.mvol
//! <dir>/labels.csv      subject_id, then <target>,<target>_mask pairs
//! <dir>/registry.txt    name, unit, kind, group per line
//! <dir>/manifest.txt    key = value summary written by `mimir phantom`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mimir_core::dataset::{LabelMatrix, TargetRegistry};
use mimir_core::inference::prepare_tile;
use mimir_core::model::NetworkConfig;
use mimir_core::projection::ProjectionTile;
use mimir_core::volume::VolumeGrid;
use mimir_core::MimirError;

use crate::CliError;

pub const VOLUMES_DIR: &str = "volumes";
pub const LABELS_FILE: &str = "labels.csv";
pub const REGISTRY_FILE: &str = "registry.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOLUME_EXT: &str = "mvol";

/// Fails with a usage error unless `path` is an existing directory.
pub fn require_dir(path: &Path, role: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{role} directory {} does not exist",
            path.display()
        )))
    }
}

#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        require_dir(root, "data")?;
        Ok(DataDir {
            root: root.to_path_buf(),
        })
    }

    pub fn volumes(&self) -> PathBuf {
        self.root.join(VOLUMES_DIR)
    }

    pub fn volume_path(&self, subject_id: &str) -> PathBuf {
        self.volumes().join(format!("{subject_id}.{VOLUME_EXT}"))
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join(LABELS_FILE)
    }

    pub fn registry(&self) -> PathBuf {
        self.root.join(REGISTRY_FILE)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

/// Labels and network-sized tiles, row-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub registry: TargetRegistry,
    pub labels: LabelMatrix,
    pub tiles: Vec<ProjectionTile>,
}

/// Keeps only the label columns of `targets`, in that order.
pub fn select_targets(
    registry: &TargetRegistry,
    labels: &LabelMatrix,
    targets: &[String],
) -> Result<(TargetRegistry, LabelMatrix), CliError> {
    let mut specs = Vec::with_capacity(targets.len());
    let mut cols = Vec::with_capacity(targets.len());
    for name in targets {
        let i = registry
            .index_of(name)
            .ok_or_else(|| MimirError::UnknownTarget(name.clone()))?;
        specs.push(registry.targets()[i].clone());
        cols.push(labels.target_index(name)?);
    }
    let n = labels.n_subjects();
    let t = labels.n_targets();
    let mut values = Vec::with_capacity(n * cols.len());
    let mut masks = Vec::with_capacity(n * cols.len());
    for r in 0..n {
        for &c in &cols {
            values.push(labels.values()[r * t + c]);
            masks.push(labels.masks()[r * t + c]);
        }
    }
    let labels = LabelMatrix::new(labels.subjects().to_vec(), targets.to_vec(), values, masks)?;
    Ok((TargetRegistry::new(specs)?, labels))
}

/// Reads registry and labels, optionally restricted to one target group.
pub fn load_labels(dir: &DataDir, group: Option<&str>) -> Result<(TargetRegistry, LabelMatrix), CliError> {
    let registry = TargetRegistry::load(dir.registry())?;
    let labels = LabelMatrix::read_csv(dir.labels())?;
    labels.check_against(&registry)?;
    match group {
        None => Ok((registry, labels)),
        Some(g) => {
            let names = registry.filter_group(g).names();
            if names.is_empty() {
                return Err(CliError::Usage(format!("group `{g}` has no targets in the registry")));
            }
            select_targets(&registry, &labels, &names)
        }
    }
}

/// Projects and resamples every labelled subject's volume to the network
/// input size.
pub fn load_tiles(dir: &DataDir, subjects: &[String], network: &NetworkConfig) -> Result<Vec<ProjectionTile>, CliError> {
    let tiles = subjects
        .par_iter()
        .map(|id| {
            let volume = VolumeGrid::load(dir.volume_path(id))?;
            prepare_tile(&volume, network)
        })
        .collect::<mimir_core::Result<Vec<_>>>()?;
    Ok(tiles)
}

/// Expands directories into their `.mvol` files (sorted by name); other
/// paths are kept as given.
pub fn volume_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| MimirError::io(input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == VOLUME_EXT))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

/// Subject id of a volume file: its name without the extension.
pub fn subject_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes `key = value` lines.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> Result<(), CliError> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(path, text).map_err(|e| MimirError::io(path, e).into())
}
