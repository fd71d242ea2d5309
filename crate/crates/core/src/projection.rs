//! Volume-to-tile compression.
//!
//! A tile stacks, per channel, a coronal mean projection (averaged over the
//! anterior-posterior axis, `H` rows) above a sagittal mean projection
//! (averaged over the left-right axis, `W` rows). Columns run along the
//! head-foot axis `D`, so a `(D, H, W)` volume yields a `(2, H + W, D)` tile.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MimirError, Result};
use crate::volume::VolumeGrid;

pub const MTIL_MAGIC: &[u8; 4] = b"MTIL";
pub const MTIL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTile {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, then row-major.
    pub pixels: Vec<f32>,
}

impl ProjectionTile {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(0.0, f32::max)
    }

    /// Divides by the tile maximum; an all-zero tile stays zero.
    pub fn normalized(mut self) -> Self {
        let max = self.max();
        if max > 0.0 {
            self.pixels.iter_mut().for_each(|p| *p = (*p / max).min(1.0));
        }
        self
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(18 + self.pixels.len() * 4);
        buf.extend_from_slice(MTIL_MAGIC);
        buf.extend_from_slice(&MTIL_VERSION.to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in &self.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| MimirError::format("MTIL", e.to_string()))?;
        if bytes.len() < 18 || &bytes[0..4] != MTIL_MAGIC {
            return Err(MimirError::format("MTIL header", "bad magic or truncated"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MTIL_VERSION {
            return Err(MimirError::Version {
                what: "MTIL".into(),
                version,
            });
        }
        let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (channels, height, width) = (dim(6), dim(10), dim(14));
        let n = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| MimirError::format("MTIL header", "implausible dimensions"))?;
        if bytes.len() - 18 != n * 4 {
            return Err(MimirError::format(
                "MTIL body",
                format!("expected {} bytes, found {}", n * 4, bytes.len() - 18),
            ));
        }
        let pixels = bytes[18..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ProjectionTile {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| MimirError::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| MimirError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| MimirError::io(path, e))?;
        ProjectionTile::read_from(BufReader::new(f))
    }

    /// 8-bit binary PGM of one channel, values clamped to [0, 1].
    pub fn to_pgm(&self, channel: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let plane = self.height * self.width;
        out.extend(
            self.pixels[channel * plane..(channel + 1) * plane]
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

fn check_volume(volume: &VolumeGrid) -> Result<()> {
    if volume.channels != 2 {
        return Err(MimirError::validation(
            "channels",
            format!("expected 2 (water, fat), got {}", volume.channels),
        ));
    }
    if let Some(v) = volume.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(MimirError::validation(
            "voxels",
            format!("values must be finite and >= 0, found {v}"),
        ));
    }
    Ok(())
}

/// Mean projections before intensity normalization.
pub fn project_panels(volume: &VolumeGrid) -> Result<ProjectionTile> {
    check_volume(volume)?;
    let [nd, nh, nw] = volume.dims;
    let rows = nh + nw;
    let mut pixels = vec![0.0f32; 2 * rows * nd];
    let mut sagittal = vec![0.0f64; nw];
    for c in 0..2 {
        let ch = volume.channel(c);
        for z in 0..nd {
            sagittal.iter_mut().for_each(|s| *s = 0.0);
            for y in 0..nh {
                let line = &ch[(z * nh + y) * nw..(z * nh + y + 1) * nw];
                let mut coronal = 0.0f64;
                for (x, &v) in line.iter().enumerate() {
                    coronal += v as f64;
                    sagittal[x] += v as f64;
                }
                pixels[(c * rows + y) * nd + z] = (coronal / nw as f64) as f32;
            }
            for (x, s) in sagittal.iter().enumerate() {
                pixels[(c * rows + nh + x) * nd + z] = (s / nh as f64) as f32;
            }
        }
    }
    Ok(ProjectionTile {
        channels: 2,
        height: rows,
        width: nd,
        pixels,
    })
}

/// Compresses a two-channel volume into a max-normalized tile.
pub fn project(volume: &VolumeGrid) -> Result<ProjectionTile> {
    Ok(project_panels(volume)?.normalized())
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_tile(tile: &ProjectionTile, height: usize, width: usize) -> Result<ProjectionTile> {
    if height == 0 || width == 0 {
        return Err(MimirError::validation(
            "target dims",
            format!("{height}x{width} is degenerate"),
        ));
    }
    if (height, width) == (tile.height, tile.width) {
        return Ok(tile.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, tile.height);
    let xs = axis(width, tile.width);
    let mut pixels = Vec::with_capacity(tile.channels * height * width);
    for c in 0..tile.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = tile.get(c, y0, x0) * (1.0 - fx) + tile.get(c, y0, x1) * fx;
                let bottom = tile.get(c, y1, x0) * (1.0 - fx) + tile.get(c, y1, x1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ProjectionTile {
        channels: tile.channels,
        height,
        width,
        pixels,
    })
}
