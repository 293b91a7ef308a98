//! Dense multi-channel image grids and their on-disk encodings.
//!
//! A [`Grid`] is stored row-major with interleaved channels (`H × W × C`).
//! Two encodings are supported:
//!
//! * 8-bit PNG (1 or 3 channels, values clamped to `[0, 1]`),
//! * a raw little-endian `f32` cache with a 16-byte header:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"GRD1"
//! 4       2     dtype  (1 = f32)
//! 6       2     C
//! 8       4     H
//! 12      4     W
//! 16      ...   H*W*C f32 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const GRID_MAGIC: [u8; 4] = *b"GRD1";
pub const GRID_DTYPE_F32: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "grid {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        (y * self.w + x) * self.c
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> &[f32] {
        let i = self.idx(y, x);
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn px_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let i = self.idx(y, x);
        &mut self.data[i..i + self.c]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[self.idx(y, x) + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        let i = self.idx(y, x) + ch;
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `[0, 1]` image values to the model's `[-1, 1]` range.
    pub fn to_signed(&self) -> Grid {
        self.map(|v| v * 2.0 - 1.0)
    }

    /// Inverse of [`Grid::to_signed`].
    pub fn to_unit(&self) -> Grid {
        self.map(|v| (v + 1.0) * 0.5)
    }

    /// Concatenates grids of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero grids"))?;
        let (h, w) = (first.h, first.w);
        if parts.iter().any(|g| g.h != h || g.w != w) {
            return Err(Error::shape("concat_channels: spatial sizes differ"));
        }
        let c: usize = parts.iter().map(|g| g.c).sum();
        let mut out = Grid::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let mut off = out.idx(y, x);
                for g in parts {
                    let src = g.px(y, x);
                    out.data[off..off + g.c].copy_from_slice(src);
                    off += g.c;
                }
            }
        }
        Ok(out)
    }

    pub fn check_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let color = match self.c {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::shape(format!("png export needs 1 or 3 channels, got {c}"))),
        };
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.w as u32, self.h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::data(format!("png header: {e}")))?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::data(format!("png write: {e}")))?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Grid> {
        let path = path.as_ref();
        let file = BufReader::new(File::open(path)?);
        let decoder = png::Decoder::new(file);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::data(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::data(format!("{}: only 8-bit png supported", path.display())));
        }
        let c = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::data(format!(
                    "{}: unsupported color type {other:?}",
                    path.display()
                )))
            }
        };
        let (h, w) = (info.height as usize, info.width as usize);
        let data = buf[..h * w * c].iter().map(|&b| b as f32 / 255.0).collect();
        Grid::from_vec(h, w, c, data)
    }

    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.encode_raw())?;
        f.flush()?;
        Ok(())
    }

    pub fn encode_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(&GRID_MAGIC);
        out.extend_from_slice(&GRID_DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.c as u16).to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Grid> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Grid::decode_raw(&bytes)
    }

    pub fn decode_raw(bytes: &[u8]) -> Result<Grid> {
        if bytes.len() < 16 || bytes[0..4] != GRID_MAGIC {
            return Err(Error::data("raw grid: bad magic"));
        }
        let dtype = u16::from_le_bytes([bytes[4], bytes[5]]);
        if dtype != GRID_DTYPE_F32 {
            return Err(Error::data(format!("raw grid: unsupported dtype {dtype}")));
        }
        let c = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = h * w * c;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::data(format!(
                "raw grid: expected {} payload bytes, found {}",
                4 * n,
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Grid::from_vec(h, w, c, data)
    }
}

/// Rounds a `[0, 1]` value to the nearest 8-bit level.
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
