//! `.p4d` volumes and `.mask` files: a one-line JSON header followed by a
//! raw little-endian payload.

use std::fs;
use std::path::Path;

use aifopt_core::{BinaryMask3D, Dims3, ScalarMap3D, TimeAxis, Volume4D};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FormatError};

pub const MAGIC: &str = "P4D1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeFileHeader {
    pub magic: String,
    /// `[T, Z, Y, X]`.
    pub dims: [usize; 4],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub byte_order: String,
    /// Byte offset of the payload from the start of the file.
    pub offset: usize,
}

impl VolumeFileHeader {
    fn new(dims: [usize; 4], spacing: [f64; 3], dtype: Dtype) -> Self {
        Self {
            magic: MAGIC.into(),
            dims,
            spacing,
            dtype,
            byte_order: "le".into(),
            offset: 0,
        }
    }

    /// Header line including the trailing newline, with `offset` pointing
    /// just past it.
    fn encode(mut self) -> Vec<u8> {
        loop {
            let mut line = serde_json::to_vec(&self).expect("header serializes");
            line.push(b'\n');
            if line.len() == self.offset {
                return line;
            }
            self.offset = line.len();
        }
    }

    pub fn payload_len(&self) -> Result<usize, FormatError> {
        self.dims
            .iter()
            .try_fold(self.dtype.width(), |acc, &d| acc.checked_mul(d))
            .ok_or(FormatError::DimOverflow { dims: self.dims })
    }
}

fn parse(bytes: &[u8]) -> Result<(VolumeFileHeader, &[u8]), FormatError> {
    if !bytes.starts_with(b"{") {
        return Err(FormatError::BadMagic {
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(FormatError::Header {
            offset: bytes.len(),
            message: "no newline terminating the header".into(),
        })?;
    let header: VolumeFileHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| FormatError::Header {
        offset: e.column().saturating_sub(1),
        message: e.to_string(),
    })?;
    if header.magic != MAGIC {
        return Err(FormatError::BadMagic { found: header.magic });
    }
    if header.byte_order != "le" {
        return Err(FormatError::Header {
            offset: 0,
            message: format!("unsupported byte order {:?}", header.byte_order),
        });
    }
    if header.dims.contains(&0) {
        return Err(FormatError::Header {
            offset: 0,
            message: format!("dims {:?} contain a zero", header.dims),
        });
    }
    if header.offset < nl + 1 || header.offset > bytes.len() {
        return Err(FormatError::Header {
            offset: nl,
            message: format!("payload offset {} outside [{}, {}]", header.offset, nl + 1, bytes.len()),
        });
    }
    let need = header.payload_len()?;
    let payload = &bytes[header.offset..];
    if payload.len() != need {
        return Err(FormatError::PayloadLength {
            offset: header.offset,
            expected: need,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

fn expect_dtype(h: &VolumeFileHeader, want: Dtype) -> Result<(), FormatError> {
    if h.dtype == want {
        Ok(())
    } else {
        Err(FormatError::Dtype {
            expected: want,
            found: h.dtype,
        })
    }
}

fn dims3(h: &VolumeFileHeader) -> Dims3 {
    Dims3 {
        z: h.dims[1],
        y: h.dims[2],
        x: h.dims[3],
    }
}

pub fn encode_volume(vol: &Volume4D) -> Vec<u8> {
    let d = vol.dims();
    let header = VolumeFileHeader::new([vol.n_time(), d.z, d.y, d.x], vol.spacing(), Dtype::F32);
    encode_f32(header, vol.data())
}

fn encode_f32(header: VolumeFileHeader, values: &[f64]) -> Vec<u8> {
    let mut out = header.encode();
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Raw `f32` samples (time-major) together with the header.
pub fn decode_f32(bytes: &[u8]) -> Result<(VolumeFileHeader, Vec<f64>), FormatError> {
    let (header, payload) = parse(bytes)?;
    expect_dtype(&header, Dtype::F32)?;
    let mut values = Vec::with_capacity(payload.len() / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                offset: header.offset + 4 * i,
            });
        }
        values.push(v as f64);
    }
    Ok((header, values))
}

/// Volume with the given brain mask, or all voxels when `None`.
pub fn decode_volume(bytes: &[u8], brain: Option<BinaryMask3D>) -> Result<Volume4D, CliError> {
    let (header, values) = decode_f32(bytes)?;
    let axis = TimeAxis::new(header.dims[0])?;
    let d = dims3(&header);
    let brain = brain.unwrap_or_else(|| BinaryMask3D::full(d));
    Ok(Volume4D::new(axis, d, header.spacing, values, brain)?)
}

/// A scalar map stored as a single-frame volume.
pub fn encode_map(map: &ScalarMap3D, spacing: [f64; 3]) -> Vec<u8> {
    let d = map.dims();
    encode_f32(VolumeFileHeader::new([1, d.z, d.y, d.x], spacing, Dtype::F32), map.values())
}

pub fn decode_map(bytes: &[u8], valid: Option<BinaryMask3D>) -> Result<(ScalarMap3D, [f64; 3]), CliError> {
    let (header, values) = decode_f32(bytes)?;
    if header.dims[0] != 1 {
        return Err(FormatError::Header {
            offset: 0,
            message: format!("scalar map needs T = 1, got {}", header.dims[0]),
        }
        .into());
    }
    let d = dims3(&header);
    let valid = valid.unwrap_or_else(|| BinaryMask3D::full(d));
    Ok((ScalarMap3D::new(values, valid)?, header.spacing))
}

pub fn encode_mask(mask: &BinaryMask3D, spacing: [f64; 3]) -> Vec<u8> {
    let d = mask.dims();
    let mut out = VolumeFileHeader::new([1, d.z, d.y, d.x], spacing, Dtype::U8).encode();
    out.extend(mask.as_slice().iter().map(|&b| b as u8));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<(BinaryMask3D, [f64; 3]), CliError> {
    let (header, payload) = parse(bytes)?;
    expect_dtype(&header, Dtype::U8)?;
    if header.dims[0] != 1 {
        return Err(FormatError::Header {
            offset: 0,
            message: format!("mask needs T = 1, got {}", header.dims[0]),
        }
        .into());
    }
    let mut bits = Vec::with_capacity(payload.len());
    for (i, &b) in payload.iter().enumerate() {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            value => {
                return Err(FormatError::MaskValue {
                    offset: header.offset + i,
                    value,
                }
                .into())
            }
        }
    }
    Ok((BinaryMask3D::new(dims3(&header), bits)?, header.spacing))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_volume(path: &Path, brain: Option<BinaryMask3D>) -> Result<Volume4D, CliError> {
    decode_volume(&read_bytes(path)?, brain).map_err(|e| e.at(path))
}

pub fn write_volume(vol: &Volume4D, path: &Path) -> Result<(), CliError> {
    write_bytes(path, &encode_volume(vol))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask3D, CliError> {
    decode_mask(&read_bytes(path)?).map(|(m, _)| m).map_err(|e| e.at(path))
}

pub fn write_mask(mask: &BinaryMask3D, spacing: [f64; 3], path: &Path) -> Result<(), CliError> {
    write_bytes(path, &encode_mask(mask, spacing))
}
