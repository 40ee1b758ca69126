//! VVOL volume files: a JSON header next to a raw little-endian payload.
//!
//! Samples are stored x-fastest, then y, then z, with the channels of each
//! voxel stored together. A header looks like
//! `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"channels":3,"dtype":"f32","data":"u.raw"}`
//! where `data` is a path relative to the header's directory.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, ScalarVolume, VectorField};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VvolHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub dtype: Dtype,
    pub data: String,
}

/// Decoded file contents, values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Vvol {
    pub geometry: Geometry,
    pub channels: usize,
    pub dtype: Dtype,
    pub values: Vec<f64>,
}

impl Vvol {
    pub fn into_scalar(self) -> Result<ScalarVolume> {
        if self.channels != 1 {
            return Err(Error::Format(format!("expected 1 channel, found {}", self.channels)));
        }
        ScalarVolume::new(self.geometry, self.values)
    }

    pub fn into_vector(self) -> Result<VectorField> {
        if self.channels != 3 {
            return Err(Error::Format(format!("expected 3 channels, found {}", self.channels)));
        }
        let data = self.values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        VectorField::new(self.geometry, data)
    }
}

/// Payload path: the header path with its extension replaced by `raw`.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn check_relative(data: &str) -> Result<()> {
    let p = Path::new(data);
    if data.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(Error::Format(format!("payload path {data:?} must be relative and stay in the header directory")));
    }
    Ok(())
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Writes the header at `path` and the payload next to it. Returns the
/// payload path.
pub fn write_raw(path: &Path, geometry: &Geometry, channels: usize, values: &[f64], dtype: Dtype) -> Result<PathBuf> {
    if channels == 0 || values.len() != geometry.len() * channels {
        return Err(Error::ShapeMismatch { expected: geometry.len() * channels.max(1), found: values.len() });
    }
    let payload = payload_path(path);
    let name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("cannot derive a payload name from {}", path.display())))?
        .to_string();
    let header = VvolHeader { dims: geometry.dims(), spacing: geometry.spacing(), channels, dtype, data: name };
    fs::write(&payload, encode(values, dtype))?;
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(payload)
}

pub fn write_scalar(path: &Path, vol: &ScalarVolume, dtype: Dtype) -> Result<PathBuf> {
    write_raw(path, vol.geometry(), 1, vol.values(), dtype)
}

pub fn write_vector(path: &Path, field: &VectorField, dtype: Dtype) -> Result<PathBuf> {
    let flat: Vec<f64> = field.vectors().iter().flatten().copied().collect();
    write_raw(path, field.geometry(), 3, &flat, dtype)
}

pub fn read_header(path: &Path) -> Result<VvolHeader> {
    let text = fs::read_to_string(path)?;
    let header: VvolHeader = serde_json::from_str(&text)?;
    check_relative(&header.data)?;
    Ok(header)
}

pub fn read(path: &Path) -> Result<Vvol> {
    let header = read_header(path)?;
    let geometry = Geometry::new(header.dims, header.spacing)?;
    if header.channels == 0 {
        return Err(Error::Format("channels must be at least 1".into()));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&header.data))?;
    let count = geometry.len() * header.channels;
    let size = header.dtype.size();
    if bytes.len() != count * size {
        return Err(Error::Format(format!("payload has {} bytes, header implies {}", bytes.len(), count * size)));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite sample at index {i}")));
    }
    Ok(Vvol { geometry, channels: header.channels, dtype: header.dtype, values })
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    read(path)?.into_scalar()
}

pub fn read_vector(path: &Path) -> Result<VectorField> {
    read(path)?.into_vector()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::new([3, 4, 5], [1.875, 1.875, 6.0]).unwrap()
    }

    #[test]
    fn scalar_round_trip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vol = ScalarVolume::from_fn(geom(), |c| (c[0] as f64 * 0.1).sin() + c[2] as f64 / 3.0);
        let path = dir.path().join("a.json");
        write_scalar(&path, &vol, Dtype::F64).unwrap();
        assert_eq!(read_scalar(&path).unwrap(), vol);
    }

    #[test]
    fn f32_payload_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let field = VectorField::from_fn(geom(), |c| [c[0] as f64 / 7.0, -(c[1] as f64) / 3.0, 1e-3 * c[2] as f64]);
        let a = dir.path().join("a.json");
        let pa = write_vector(&a, &field, Dtype::F32).unwrap();
        let back = read_vector(&a).unwrap();
        let b = dir.path().join("b.json");
        let pb = write_vector(&b, &back, Dtype::F32).unwrap();
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        assert_eq!(read_vector(&b).unwrap(), back);
        for (x, y) in field.vectors().iter().flatten().zip(back.vectors().iter().flatten()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }

    #[test]
    fn layout_is_x_fastest_channels_together() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([2, 2, 2], [1.0; 3]).unwrap();
        let field = VectorField::from_fn(g, |c| {
            let i = (c[0] + 2 * c[1] + 4 * c[2]) as f64;
            [i, 10.0 + i, 20.0 + i]
        });
        let path = dir.path().join("f.json");
        let payload = write_vector(&path, &field, Dtype::F32).unwrap();
        let bytes = fs::read(payload).unwrap();
        let first: Vec<f32> =
            bytes.chunks_exact(4).take(6).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        assert_eq!(first, vec![0.0, 10.0, 20.0, 1.0, 11.0, 21.0]);
        let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["channels"], 3);
        assert_eq!(header["data"], "f.raw");
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        write_scalar(&path, &ScalarVolume::constant(geom(), 1.0), Dtype::F32).unwrap();
        // truncated payload
        let raw = payload_path(&path);
        let mut bytes = fs::read(&raw).unwrap();
        bytes.pop();
        fs::write(&raw, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
        // wrong channel count
        write_scalar(&path, &ScalarVolume::constant(geom(), 1.0), Dtype::F32).unwrap();
        assert!(read_vector(&path).is_err());
        // escaping payload path
        let text = fs::read_to_string(&path).unwrap().replace("v.raw", "../v.raw");
        fs::write(&path, text).unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
        // unknown key
        fs::write(&path, r#"{"dims":[1,1,1],"spacing":[1,1,1],"channels":1,"dtype":"f32","data":"v.raw","x":1}"#)
            .unwrap();
        assert!(matches!(read(&path), Err(Error::Json(_))));
        // non-finite sample
        write_scalar(&path, &ScalarVolume::constant(geom(), 1.0), Dtype::F32).unwrap();
        let mut bytes = fs::read(&raw).unwrap();
        bytes[0..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&raw, &bytes).unwrap();
        assert!(matches!(read(&path), Err(Error::Format(_))));
    }
}
