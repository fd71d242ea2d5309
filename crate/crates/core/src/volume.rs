//! Two-channel volumetric grids and the `MVOL` raw file format.
//!
//! Layout: axis 0 (`D`) runs head to foot, axis 1 (`H`) left to right,
//! axis 2 (`W`) anterior to posterior. Voxels are stored channel-major,
//! then row-major over `(D, H, W)`.
//!
//! File header (little-endian): `b"MVOL"`, version `u16`, `D`, `H`, `W` as
//! `u32`, channel count `u8`, voxel size `f32` (mm), followed by the `f32`
//! voxels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MimirError, Result};

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u16 = 1;
const MVOL_HEADER_LEN: usize = 4 + 2 + 3 * 4 + 1 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    /// `(D, H, W)` in voxels.
    pub dims: [usize; 3],
    pub channels: usize,
    /// Isotropic voxel edge length in mm.
    pub voxel_size: f32,
    pub data: Vec<f32>,
}

impl VolumeGrid {
    pub fn zeros(dims: [usize; 3], channels: usize, voxel_size: f32) -> Self {
        let len = dims.iter().product::<usize>() * channels;
        VolumeGrid {
            dims,
            channels,
            voxel_size,
            data: vec![0.0; len],
        }
    }

    pub fn from_data(
        dims: [usize; 3],
        channels: usize,
        voxel_size: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * channels;
        if data.len() != expected {
            return Err(MimirError::shape(
                format!("{expected} voxels"),
                format!("{} voxels", data.len()),
            ));
        }
        Ok(VolumeGrid {
            dims,
            channels,
            voxel_size,
            data,
        })
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn index(&self, channel: usize, d: usize, h: usize, w: usize) -> usize {
        ((channel * self.dims[0] + d) * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, channel: usize, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(channel, d, h, w)]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = Vec::with_capacity(MVOL_HEADER_LEN);
        header.extend_from_slice(MVOL_MAGIC);
        header.extend_from_slice(&MVOL_VERSION.to_le_bytes());
        for &d in &self.dims {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.push(self.channels as u8);
        header.extend_from_slice(&self.voxel_size.to_le_bytes());
        out.write_all(&header)?;
        let mut body = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&body)?;
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; MVOL_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|e| MimirError::format("MVOL header", e.to_string()))?;
        if &header[0..4] != MVOL_MAGIC {
            return Err(MimirError::format("MVOL header", "bad magic"));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != MVOL_VERSION {
            return Err(MimirError::Version {
                what: "MVOL".into(),
                version,
            });
        }
        let u32_at = |o: usize| {
            u32::from_le_bytes([header[o], header[o + 1], header[o + 2], header[o + 3]]) as usize
        };
        let dims = [u32_at(6), u32_at(10), u32_at(14)];
        let channels = header[18] as usize;
        let voxel_size = f32::from_le_bytes([header[19], header[20], header[21], header[22]]);
        let n = dims
            .iter()
            .try_fold(channels, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| MimirError::format("MVOL header", "implausible dimensions"))?;
        let mut body = vec![0u8; n * 4];
        input
            .read_exact(&mut body)
            .map_err(|e| MimirError::format("MVOL body", e.to_string()))?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| MimirError::format("MVOL body", e.to_string()))? != 0 {
            return Err(MimirError::format("MVOL body", "trailing bytes"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        VolumeGrid::from_data(dims, channels, voxel_size, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| MimirError::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| MimirError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| MimirError::io(path, e))?;
        VolumeGrid::read_from(BufReader::new(file))
    }
}
