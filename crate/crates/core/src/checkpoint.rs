//! `MCKP` model checkpoints.
//!
//! All integers and floats are little-endian; strings are a `u32` byte
//! length followed by UTF-8. Layout:
//!
//! ```text
//! b"MCKP"  version:u16
//! registry     n:u32 { name:str unit:str kind:u8(0 continuous, 1 binary) group:str }
//! norm stats   { mean:f64 std:f64 } × n
//! input norm   channels:u32 { mean:f64 std:f64 } × channels
//! calibration  source:str { factor:f64 n_points:u32 calibrated:u8 } × n
//! network      channels:u32 height:u32 width:u32 n_blocks:u32
//!              { out_channels:u32 pool:u8 } × n_blocks  n_targets:u32 init_seed:u64
//! training     batch_size:u32 total_iterations:u32 stage1_iterations:u32
//!              lr_stage1:f64 lr_stage2:f64 beta1:f64 beta2:f64 epsilon:f64
//!              seed:u64 augment:u8 max_shift:u32
//! metadata     n:u32 { key:str value:str }
//! parameters   n:u32 { rank:u32 dims:u32×rank data:f32×Πdims }
//! crc32:u32    over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::dataset::{InputNorm, NormStats, TargetKind, TargetRegistry, TargetSpec};
use crate::error::{MimirError, Result};
use crate::model::{ConvBlock, NetworkConfig, ParameterSet, Tensor};
use crate::training::TrainingConfig;
use crate::uncertainty::CalibrationFactors;

pub const MCKP_MAGIC: &[u8; 4] = b"MCKP";
pub const MCKP_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub registry: TargetRegistry,
    pub norm_stats: NormStats,
    pub input_norm: InputNorm,
    pub calibration: CalibrationFactors,
    pub network: NetworkConfig,
    pub params: ParameterSet<f32>,
    pub training: TrainingConfig,
    /// Free-form provenance, e.g. the validation fold. Kept deterministic.
    pub metadata: Vec<(String, String)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| MimirError::format("MCKP", "value exceeds u32"))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(MimirError::format(
                "MCKP",
                format!("{what}: length {n} runs past end of file"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(MimirError::format("MCKP", format!("{what}: flag byte {v}"))),
        }
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| MimirError::format("MCKP", format!("{what}: invalid UTF-8")))
    }
    /// A count whose elements need at least `min_elem_bytes` each.
    fn count(&mut self, what: &str, min_elem_bytes: usize) -> Result<usize> {
        let n = self.u32(what)?;
        if n.saturating_mul(min_elem_bytes) > self.bytes.len() - self.pos {
            return Err(MimirError::format(
                "MCKP",
                format!("{what}: count {n} exceeds remaining bytes"),
            ));
        }
        Ok(n)
    }
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        let t = self.registry.len();
        if self.network.n_targets != t
            || self.norm_stats.mean.len() != t
            || self.norm_stats.std.len() != t
            || self.calibration.factors.len() != t
            || self.calibration.n_points.len() != t
            || self.calibration.calibrated.len() != t
        {
            return Err(MimirError::format(
                "MCKP",
                format!("sections disagree on the number of targets ({t})"),
            ));
        }
        self.network.validate()?;
        if self.input_norm.channels() != self.network.input_channels
            || self.input_norm.std.len() != self.network.input_channels
            || !self.input_norm.std.iter().all(|s| *s > 0.0 && s.is_finite())
        {
            return Err(MimirError::format("MCKP", "input normalization does not fit the network"));
        }
        if !self.params.matches(&self.network) {
            return Err(MimirError::format("MCKP", "parameter shapes do not match network"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MCKP_MAGIC);
        w.u16(MCKP_VERSION);

        w.u32(self.registry.len())?;
        for t in self.registry.targets() {
            w.str(&t.name)?;
            w.str(&t.unit)?;
            w.u8(match t.kind {
                TargetKind::Continuous => 0,
                TargetKind::Binary => 1,
            });
            w.str(&t.group)?;
        }
        for (m, s) in self.norm_stats.mean.iter().zip(&self.norm_stats.std) {
            w.f64(*m);
            w.f64(*s);
        }
        w.u32(self.input_norm.channels())?;
        for (m, s) in self.input_norm.mean.iter().zip(&self.input_norm.std) {
            w.f64(*m);
            w.f64(*s);
        }
        let cal = &self.calibration;
        w.str(&cal.source)?;
        for i in 0..cal.factors.len() {
            w.f64(cal.factors[i]);
            w.u32(cal.n_points[i])?;
            w.u8(u8::from(cal.calibrated[i]));
        }

        let net = &self.network;
        w.u32(net.input_channels)?;
        w.u32(net.input_height)?;
        w.u32(net.input_width)?;
        w.u32(net.blocks.len())?;
        for b in &net.blocks {
            w.u32(b.out_channels)?;
            w.u8(u8::from(b.pool));
        }
        w.u32(net.n_targets)?;
        w.u64(net.init_seed);

        let tr = &self.training;
        w.u32(tr.batch_size)?;
        w.u32(tr.total_iterations)?;
        w.u32(tr.stage1_iterations)?;
        for v in [tr.lr_stage1, tr.lr_stage2, tr.beta1, tr.beta2, tr.epsilon] {
            w.f64(v);
        }
        w.u64(tr.seed);
        w.u8(u8::from(tr.augment));
        w.u32(tr.max_shift)?;

        w.u32(self.metadata.len())?;
        for (k, v) in &self.metadata {
            w.str(k)?;
            w.str(v)?;
        }

        w.u32(self.params.tensors.len())?;
        for t in &self.params.tensors {
            w.u32(t.shape.len())?;
            for &d in &t.shape {
                w.u32(d)?;
            }
            for &v in &t.data {
                w.f32(v);
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.buf.extend_from_slice(&crc.to_le_bytes());
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MCKP_MAGIC {
            return Err(MimirError::format("MCKP", "bad magic or truncated file"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MCKP_VERSION {
            return Err(MimirError::Version {
                what: "MCKP".into(),
                version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(MimirError::format("MCKP", "checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 6 };

        let n_targets = r.count("registry", 13)?;
        let mut targets = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            let name = r.str("target name")?;
            let unit = r.str("target unit")?;
            let kind = match r.u8("target kind")? {
                0 => TargetKind::Continuous,
                1 => TargetKind::Binary,
                v => return Err(MimirError::format("MCKP", format!("target kind {v}"))),
            };
            let group = r.str("target group")?;
            targets.push(TargetSpec {
                name,
                unit,
                kind,
                group,
            });
        }
        let registry = TargetRegistry::new(targets)?;
        let mut mean = Vec::with_capacity(n_targets);
        let mut std = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            mean.push(r.f64("norm mean")?);
            std.push(r.f64("norm std")?);
        }
        let n_channels = r.count("input norm", 16)?;
        let mut input_norm = InputNorm::identity(0);
        for _ in 0..n_channels {
            input_norm.mean.push(r.f64("input mean")?);
            input_norm.std.push(r.f64("input std")?);
        }
        let source = r.str("calibration source")?;
        let mut calibration = CalibrationFactors::identity(n_targets);
        calibration.source = source;
        for i in 0..n_targets {
            calibration.factors[i] = r.f64("calibration factor")?;
            calibration.n_points[i] = r.u32("calibration points")?;
            calibration.calibrated[i] = r.bool("calibration flag")?;
        }

        let input_channels = r.u32("input channels")?;
        let input_height = r.u32("input height")?;
        let input_width = r.u32("input width")?;
        let n_blocks = r.count("blocks", 5)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let out_channels = r.u32("block channels")?;
            let pool = r.bool("block pool")?;
            blocks.push(ConvBlock { out_channels, pool });
        }
        let network = NetworkConfig {
            input_channels,
            input_height,
            input_width,
            blocks,
            n_targets: r.u32("n_targets")?,
            init_seed: r.u64("init seed")?,
        };

        let batch_size = r.u32("batch size")?;
        let total_iterations = r.u32("total iterations")?;
        let stage1_iterations = r.u32("stage1 iterations")?;
        let training = TrainingConfig {
            batch_size,
            total_iterations,
            stage1_iterations,
            lr_stage1: r.f64("lr_stage1")?,
            lr_stage2: r.f64("lr_stage2")?,
            beta1: r.f64("beta1")?,
            beta2: r.f64("beta2")?,
            epsilon: r.f64("epsilon")?,
            seed: r.u64("seed")?,
            augment: r.bool("augment")?,
            max_shift: r.u32("max shift")?,
        };

        let n_meta = r.count("metadata", 8)?;
        let mut metadata = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            metadata.push((r.str("metadata key")?, r.str("metadata value")?));
        }

        let n_tensors = r.count("parameters", 4)?;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = r.count("tensor rank", 4)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| MimirError::format("MCKP", "tensor size overflows"))?;
            let raw = r.take(len.saturating_mul(4), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { shape, data });
        }
        if r.pos != body.len() {
            return Err(MimirError::format("MCKP", "trailing bytes before checksum"));
        }
        let ckpt = ModelCheckpoint {
            registry,
            norm_stats: NormStats { mean, std },
            input_norm,
            calibration,
            network,
            params: ParameterSet { tensors },
            training,
            metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| MimirError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MimirError::io(path, e))?;
        ModelCheckpoint::from_bytes(&bytes)
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}
