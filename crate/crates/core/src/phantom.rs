//! Synthetic two-channel subjects with analytically known targets.
//!
//! Each subject is a torso-like ellipsoid: a water-like core (channel 0)
//! wrapped in a fat-like subcutaneous shell (channel 1), one interior
//! ellipsoidal organ with its own intensities, and an optional shoulder
//! widening of the upper body that drives the binary `sex_analog` target.
//! Every target is a deterministic function of the noiseless image, so a
//! learner that reads the image correctly can recover it.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{LabelMatrix, TargetKind, TargetRegistry, TargetSpec};
use crate::error::{MimirError, Result};
use crate::volume::VolumeGrid;

pub const ORGAN_VOLUME: &str = "organ_volume";
pub const FAT_FRACTION: &str = "fat_fraction";
pub const HEIGHT_ANALOG: &str = "height_analog";
pub const WEIGHT_ANALOG: &str = "weight_analog";
pub const SEX_ANALOG: &str = "sex_analog";
pub const T2D_ANALOG: &str = "t2d_analog";

/// Channel intensities of the noiseless tissue classes, `[water, fat]`.
pub const CORE_SIGNAL: [f32; 2] = [1.0, 0.0];
pub const SHELL_SIGNAL: [f32; 2] = [0.0, 1.0];
/// The organ is a bright water-only region so its extent shows up in both
/// projection panels.
pub const ORGAN_SIGNAL: [f32; 2] = [3.0, 0.0];

/// Relative widening of the left-right half-axis at shoulder level.
const SHOULDER_GAIN: f64 = 0.8;
/// `t2d_analog = 1{fat_fraction + N(0, T2D_NOISE_SD) > T2D_THRESHOLD}`.
pub const T2D_THRESHOLD: f64 = 40.0;
pub const T2D_NOISE_SD: f64 = 4.0;

const LABEL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// `(D, H, W)` voxels.
    pub grid_dims: [usize; 3],
    /// Isotropic voxel edge in mm.
    pub voxel_size: f32,
    pub seed: u64,
    pub n_subjects: usize,
    /// Per-target probability that a label is withheld at export.
    pub missing_rate: f64,
    /// Standard deviation of additive voxel noise (noisy values clamp at 0).
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_dims: [64, 64, 32],
            voxel_size: 4.0,
            seed: 0,
            n_subjects: 100,
            missing_rate: 0.0,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.iter().any(|&d| d < 8) {
            return Err(MimirError::validation(
                "grid_dims",
                format!("every axis must be >= 8 voxels, got {:?}", self.grid_dims),
            ));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(MimirError::validation(
                "voxel_size",
                format!("must be positive and finite, got {}", self.voxel_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(MimirError::validation(
                "missing_rate",
                format!("must lie in [0, 1], got {}", self.missing_rate),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(MimirError::validation(
                "noise_sigma",
                format!("must be finite and >= 0, got {}", self.noise_sigma),
            ));
        }
        Ok(())
    }
}

/// Geometric parameters of one subject, in voxel units relative to the grid
/// centre. Axis order is `(D, H, W)`, i.e. (head-foot, left-right,
/// anterior-posterior).
#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub body_half_axes: [f64; 3],
    pub shoulders: bool,
    /// Shell thickness as a fraction of the normalized body radius.
    pub shell_fraction: f64,
    pub organ_offset: [f64; 3],
    pub organ_half_axes: [f64; 3],
    /// Noise draw added to the fat fraction before thresholding `t2d_analog`.
    pub t2d_noise: f64,
}

impl Anatomy {
    /// Left-right half-axis at slice coordinate `dz` (relative to centre,
    /// negative towards the head).
    fn lateral_half_axis(&self, dz: f64) -> f64 {
        let base = self.body_half_axes[1];
        if !self.shoulders {
            return base;
        }
        let u = -dz / self.body_half_axes[0];
        let t = ((u - 0.2) / 0.15).clamp(0.0, 1.0);
        base * (1.0 + SHOULDER_GAIN * t * t * (3.0 - 2.0 * t))
    }

    fn core_half_axes(&self) -> [f64; 3] {
        let k = 1.0 - self.shell_fraction;
        [
            self.body_half_axes[0] * k,
            self.body_half_axes[1] * k,
            self.body_half_axes[2] * k,
        ]
    }

    pub fn sample<R: Rng>(dims: [usize; 3], rng: &mut R) -> Self {
        let [d, h, w] = dims.map(|v| v as f64);
        let body_half_axes = [
            rng.gen_range(0.30..0.42) * d,
            rng.gen_range(0.20..0.25) * h,
            rng.gen_range(0.30..0.40) * w,
        ];
        let shoulders = rng.gen_bool(0.5);
        let shell_fraction = rng.gen_range(0.06..0.30);
        let core = {
            let k = 1.0 - shell_fraction;
            body_half_axes.map(|a| a * k)
        };
        // The organ is the core ellipsoid scaled per axis and shifted. With
        // offset o in core-normalized units and largest axis scale s_max, any
        // organ point has normalized radius <= |o| + s_max, so |o| <= 1 - s_max
        // keeps it inside the core.
        let scale = rng.gen_range(0.35..0.75);
        let axis_scale = [0; 3].map(|_| scale * rng.gen_range(0.9..1.1));
        let organ_half_axes = [0, 1, 2].map(|i| axis_scale[i] * core[i]);
        let s_max = axis_scale.iter().cloned().fold(0.0, f64::max);
        let direction = {
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let v = [0; 3].map(|_| normal.sample(rng));
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.map(|x| x / len)
        };
        let radius = rng.gen_range(0.0..=1.0) * (1.0 - s_max).max(0.0);
        let organ_offset = [0, 1, 2].map(|i| direction[i] * radius * core[i]);
        let t2d_noise = Normal::new(0.0, T2D_NOISE_SD)
            .expect("valid normal")
            .sample(rng);
        Anatomy {
            body_half_axes,
            shoulders,
            shell_fraction,
            organ_offset,
            organ_half_axes,
            t2d_noise,
        }
    }

    /// Analytic organ volume in mm³.
    pub fn organ_volume_mm3(&self, voxel_size: f64) -> f64 {
        4.0 / 3.0 * PI * self.organ_half_axes.iter().product::<f64>() * voxel_size.powi(3)
    }

    /// Rasterizes the noiseless two-channel volume, sampling at voxel centres.
    pub fn render(&self, dims: [usize; 3], voxel_size: f32) -> VolumeGrid {
        let mut vol = VolumeGrid::zeros(dims, 2, voxel_size);
        let centre = dims.map(|v| v as f64 / 2.0);
        let core = self.core_half_axes();
        let n = vol.voxels_per_channel();
        let [_, nh, nw] = dims;
        let (water, fat) = vol.data.split_at_mut(n);
        for z in 0..dims[0] {
            let dz = z as f64 + 0.5 - centre[0];
            let lateral = self.lateral_half_axis(dz);
            let core_lateral = lateral * (1.0 - self.shell_fraction);
            let qz = (dz / self.body_half_axes[0]).powi(2);
            if qz > 1.0 {
                continue;
            }
            let oz = ((dz - self.organ_offset[0]) / self.organ_half_axes[0]).powi(2);
            let cz = (dz / core[0]).powi(2);
            for y in 0..nh {
                let dy = y as f64 + 0.5 - centre[1];
                let qzy = qz + (dy / lateral).powi(2);
                if qzy > 1.0 {
                    continue;
                }
                let ozy = oz + ((dy - self.organ_offset[1]) / self.organ_half_axes[1]).powi(2);
                let czy = cz + (dy / core_lateral).powi(2);
                for x in 0..nw {
                    let dx = x as f64 + 0.5 - centre[2];
                    if qzy + (dx / self.body_half_axes[2]).powi(2) > 1.0 {
                        continue;
                    }
                    let signal = if ozy
                        + ((dx - self.organ_offset[2]) / self.organ_half_axes[2]).powi(2)
                        <= 1.0
                    {
                        ORGAN_SIGNAL
                    } else if czy + (dx / core[2]).powi(2) <= 1.0 {
                        CORE_SIGNAL
                    } else {
                        SHELL_SIGNAL
                    };
                    let i = (z * nh + y) * nw + x;
                    water[i] = signal[0];
                    fat[i] = signal[1];
                }
            }
        }
        vol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub subject_id: String,
    pub volume: VolumeGrid,
    pub truth: BTreeMap<String, f64>,
    pub anatomy: Anatomy,
}

/// The six phantom targets, in label-column order.
pub fn phantom_registry() -> TargetRegistry {
    let spec = |name: &str, unit: &str, kind, group: &str| TargetSpec {
        name: name.into(),
        unit: unit.into(),
        kind,
        group: group.into(),
    };
    TargetRegistry::new(vec![
        spec(ORGAN_VOLUME, "ml", TargetKind::Continuous, "organs"),
        spec(FAT_FRACTION, "%", TargetKind::Continuous, "body_composition"),
        spec(HEIGHT_ANALOG, "mm", TargetKind::Continuous, "anthropometric"),
        spec(WEIGHT_ANALOG, "au", TargetKind::Continuous, "anthropometric"),
        spec(SEX_ANALOG, "flag", TargetKind::Binary, "anthropometric"),
        spec(T2D_ANALOG, "flag", TargetKind::Binary, "experimental"),
    ])
    .expect("static registry is valid")
}

pub fn subject_id(index: usize) -> String {
    format!("sub{index:05}")
}

/// Targets computed from a noiseless volume and its anatomy.
pub fn truth_from_volume(anatomy: &Anatomy, noiseless: &VolumeGrid) -> BTreeMap<String, f64> {
    let vs = noiseless.voxel_size as f64;
    let water: f64 = noiseless.channel(0).iter().map(|&v| v as f64).sum();
    let fat: f64 = noiseless.channel(1).iter().map(|&v| v as f64).sum();
    let fat_fraction = if water + fat > 0.0 {
        fat / (water + fat) * 100.0
    } else {
        0.0
    };
    let [nd, nh, nw] = noiseless.dims;
    let plane = nh * nw;
    let occupied_slices = (0..nd)
        .filter(|&z| {
            (0..2).any(|c| {
                let ch = noiseless.channel(c);
                ch[z * plane..(z + 1) * plane].iter().any(|&v| v > 0.0)
            })
        })
        .count();
    let mut truth = BTreeMap::new();
    truth.insert(
        ORGAN_VOLUME.to_string(),
        anatomy.organ_volume_mm3(vs) / 1000.0,
    );
    truth.insert(FAT_FRACTION.to_string(), fat_fraction);
    truth.insert(HEIGHT_ANALOG.to_string(), occupied_slices as f64 * vs);
    truth.insert(WEIGHT_ANALOG.to_string(), (water + fat) * vs.powi(3));
    truth.insert(
        SEX_ANALOG.to_string(),
        if anatomy.shoulders { 1.0 } else { 0.0 },
    );
    truth.insert(
        T2D_ANALOG.to_string(),
        if fat_fraction + anatomy.t2d_noise > T2D_THRESHOLD {
            1.0
        } else {
            0.0
        },
    );
    truth
}

/// Builds one subject from explicit anatomy, adding noise from `rng`.
pub fn subject_from_anatomy<R: Rng>(
    subject_id: String,
    anatomy: Anatomy,
    dims: [usize; 3],
    voxel_size: f32,
    noise_sigma: f64,
    rng: &mut R,
) -> PhantomSubject {
    let mut volume = anatomy.render(dims, voxel_size);
    let truth = truth_from_volume(&anatomy, &volume);
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for v in volume.data.iter_mut() {
            *v = (*v as f64 + noise.sample(rng)).max(0.0) as f32;
        }
    }
    PhantomSubject {
        subject_id,
        volume,
        truth,
        anatomy,
    }
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates subject `index` of `spec`; independent of every other subject.
pub fn generate_subject(spec: &PhantomSpec, index: usize) -> Result<PhantomSubject> {
    spec.validate()?;
    let mut rng = subject_rng(spec.seed, index);
    let anatomy = Anatomy::sample(spec.grid_dims, &mut rng);
    Ok(subject_from_anatomy(
        subject_id(index),
        anatomy,
        spec.grid_dims,
        spec.voxel_size,
        spec.noise_sigma,
        &mut rng,
    ))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<PhantomSubject>> {
    spec.validate()?;
    (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, i))
        .collect()
}

/// Exports subject truths as labels, withholding each value independently
/// with probability `missing_rate`. Withheld entries keep their value in
/// memory but carry mask 0.
pub fn export_labels(
    subjects: &[PhantomSubject],
    missing_rate: f64,
    seed: u64,
) -> Result<LabelMatrix> {
    let registry = phantom_registry();
    let rows: Vec<(String, Vec<f64>)> = subjects
        .iter()
        .map(|s| {
            let values = registry
                .targets()
                .iter()
                .map(|t| {
                    s.truth
                        .get(&t.name)
                        .copied()
                        .ok_or_else(|| MimirError::UnknownTarget(t.name.clone()))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((s.subject_id.clone(), values))
        })
        .collect::<Result<_>>()?;
    labels_with_dropout(&registry, rows, missing_rate, seed)
}

/// Same as [`export_labels`] but over `(subject_id, values)` rows already
/// in registry order, so callers can stream subjects without keeping volumes.
pub fn labels_with_dropout(
    registry: &TargetRegistry,
    rows: Vec<(String, Vec<f64>)>,
    missing_rate: f64,
    seed: u64,
) -> Result<LabelMatrix> {
    if !(0.0..=1.0).contains(&missing_rate) {
        return Err(MimirError::validation(
            "missing_rate",
            format!("must lie in [0, 1], got {missing_rate}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LABEL_STREAM);
    let n_targets = registry.len();
    let mut subjects = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * n_targets);
    let mut masks = Vec::with_capacity(rows.len() * n_targets);
    for (id, row) in rows {
        if row.len() != n_targets {
            return Err(MimirError::shape(n_targets, row.len()));
        }
        subjects.push(id);
        for v in row {
            values.push(v);
            let keep = rng.gen::<f64>() >= missing_rate;
            masks.push(u8::from(keep));
        }
    }
    LabelMatrix::new(subjects, registry.names(), values, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> PhantomSpec {
        PhantomSpec {
            grid_dims: [24, 24, 12],
            n_subjects: n,
            seed: 7,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn empty_spec_gives_empty_sequence() {
        assert!(generate_phantom(&small_spec(0)).unwrap().is_empty());
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases = [
            (
                PhantomSpec {
                    grid_dims: [7, 16, 16],
                    ..small_spec(1)
                },
                "grid_dims",
            ),
            (
                PhantomSpec {
                    missing_rate: 1.5,
                    ..small_spec(1)
                },
                "missing_rate",
            ),
            (
                PhantomSpec {
                    noise_sigma: -0.1,
                    ..small_spec(1)
                },
                "noise_sigma",
            ),
        ];
        for (spec, field) in cases {
            match generate_phantom(&spec) {
                Err(MimirError::Validation { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected validation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn same_seed_same_subjects() {
        let a = generate_phantom(&small_spec(4)).unwrap();
        let b = generate_phantom(&small_spec(4)).unwrap();
        assert_eq!(a, b);
        let serial: Vec<_> = (0..4)
            .map(|i| generate_subject(&small_spec(4), i).unwrap())
            .collect();
        assert_eq!(a, serial);
    }

    #[test]
    fn truth_covers_registry() {
        let s = generate_subject(&small_spec(1), 0).unwrap();
        for t in phantom_registry().targets() {
            assert!(s.truth.contains_key(&t.name), "{}", t.name);
        }
    }

    #[test]
    fn organ_voxel_count_matches_analytic_volume() {
        let anatomy = Anatomy {
            body_half_axes: [28.0, 28.0, 28.0],
            shoulders: false,
            shell_fraction: 0.1,
            organ_offset: [0.0; 3],
            organ_half_axes: [10.0, 10.0, 10.0],
            t2d_noise: 0.0,
        };
        let vol = anatomy.render([64, 64, 64], 1.0);
        let organ_voxels = vol
            .channel(0)
            .iter()
            .zip(vol.channel(1))
            .filter(|(&w, &f)| [w, f] == ORGAN_SIGNAL)
            .count() as f64;
        let analytic = anatomy.organ_volume_mm3(1.0);
        assert!((analytic - 4188.790).abs() < 1e-3);
        assert!((organ_voxels - analytic).abs() / organ_voxels < 0.05);
    }

    #[test]
    fn fat_fraction_is_exact_channel_ratio_of_noiseless_volume() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..small_spec(3)
        };
        for s in generate_phantom(&spec).unwrap() {
            let water: f64 = s.volume.channel(0).iter().map(|&v| v as f64).sum();
            let fat: f64 = s.volume.channel(1).iter().map(|&v| v as f64).sum();
            assert_eq!(s.truth[FAT_FRACTION], fat / (water + fat) * 100.0);
        }
    }

    #[test]
    fn sampled_organ_voxel_counts_match_analytic_volume() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            n_subjects: 30,
            seed: 7,
            ..PhantomSpec::default()
        };
        for s in generate_phantom(&spec).unwrap() {
            let organ = s
                .volume
                .channel(0)
                .iter()
                .zip(s.volume.channel(1))
                .filter(|(&w, &f)| [w, f] == ORGAN_SIGNAL)
                .count() as f64;
            let analytic = s.anatomy.organ_volume_mm3(1.0);
            assert!((organ - analytic).abs() / analytic < 0.1, "{organ} vs {analytic}");
        }
    }

    #[test]
    fn organ_surface_lies_inside_the_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = Anatomy::sample([64, 64, 32], &mut rng);
            let core = a.core_half_axes();
            for k in 0..200 {
                // points on a Fibonacci sphere mapped onto the organ surface
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / 200.0;
                let r = (1.0 - z * z).sqrt();
                let phi = k as f64 * PI * (3.0 - 5f64.sqrt());
                let u = [z, r * phi.cos(), r * phi.sin()];
                let q: f64 = (0..3)
                    .map(|i| ((a.organ_offset[i] + a.organ_half_axes[i] * u[i]) / core[i]).powi(2))
                    .sum();
                assert!(q <= 1.0 + 1e-12, "{q}");
            }
        }
    }

    #[test]
    fn binary_targets_are_not_degenerate() {
        let spec = PhantomSpec {
            n_subjects: 200,
            ..PhantomSpec::default()
        };
        let subjects = generate_phantom(&spec).unwrap();
        for target in [SEX_ANALOG, T2D_ANALOG] {
            let rate = subjects.iter().map(|s| s.truth[target]).sum::<f64>() / 200.0;
            assert!((0.2..=0.8).contains(&rate), "{target} prevalence {rate}");
        }
    }

    #[test]
    fn dropout_extremes() {
        let subjects = generate_phantom(&small_spec(5)).unwrap();
        let all = export_labels(&subjects, 0.0, 1).unwrap();
        assert!(all.masks().iter().all(|&m| m == 1));
        assert!(all.unusable_rows().is_empty());
        let none = export_labels(&subjects, 1.0, 1).unwrap();
        assert!(none.masks().iter().all(|&m| m == 0));
        assert_eq!(none.unusable_rows(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mask_seed_changes_masks_not_values() {
        let subjects = generate_phantom(&small_spec(20)).unwrap();
        let a = export_labels(&subjects, 0.5, 1).unwrap();
        let b = export_labels(&subjects, 0.5, 2).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.masks(), b.masks());
    }
}
