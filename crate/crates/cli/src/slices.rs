//! Grayscale slice export as binary PGM (P5, 8 bit).
//!
//! Values map linearly: `gray = round(255 * (v - lo) / (hi - lo))`, clamped
//! to [0, 255]. The default window is the [min, max] of the exported channel
//! over the whole volume, or [v - 1, v + 1] for a constant channel, so a
//! constant volume exports as uniform gray 128.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tagflow_core::vvol::Vvol;

use crate::error::{CliError, CliResult};

pub const MAPPING: &str = "gray = round(255 * (v - lo) / (hi - lo)), clamped to [0, 255]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        ["x", "y", "z"][self.index()]
    }

    /// In-plane axes as (columns, rows), ascending.
    fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub index: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

/// Sidecar written next to the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSidecar {
    pub source: String,
    pub axis: Axis,
    pub channel: usize,
    pub window: [f64; 2],
    pub mapping: String,
    pub images: Vec<SliceImage>,
}

pub fn default_window(values: impl Iterator<Item = f64>) -> [f64; 2] {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(lo < hi) {
        [lo - 1.0, lo + 1.0]
    } else {
        [lo, hi]
    }
}

pub fn to_gray(v: f64, window: [f64; 2]) -> u8 {
    let t = 255.0 * (v - window[0]) / (window[1] - window[0]);
    t.round().clamp(0.0, 255.0) as u8
}

/// Gray pixels of one slice, rows top to bottom in ascending row-axis order.
pub fn slice_pixels(
    vol: &Vvol,
    axis: Axis,
    index: usize,
    channel: usize,
    window: [f64; 2],
) -> CliResult<(usize, usize, Vec<u8>)> {
    let g = vol.geometry;
    let d = g.dims();
    if index >= d[axis.index()] {
        return Err(CliError::usage(format!(
            "slice index {index} is out of range for axis {} with {} voxels",
            axis.name(),
            d[axis.index()]
        )));
    }
    let (ca, ra) = axis.plane();
    let (w, h) = (d[ca], d[ra]);
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut p = [0usize; 3];
            p[axis.index()] = index;
            p[ca] = c;
            p[ra] = r;
            let i = g.index(p[0], p[1], p[2]);
            pixels.push(to_gray(vol.values[i * vol.channels + channel], window));
        }
    }
    Ok((w, h, pixels))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes one PGM per index plus `slices_<axis>.json` into `out_dir`.
pub fn export_slices(
    vol: &Vvol,
    source: &Path,
    axis: Axis,
    indices: &[usize],
    channel: usize,
    window: Option<[f64; 2]>,
    out_dir: &Path,
) -> CliResult<(SliceSidecar, Vec<PathBuf>)> {
    if channel >= vol.channels {
        return Err(CliError::usage(format!("channel {channel} is out of range for {} channels", vol.channels)));
    }
    if indices.is_empty() {
        return Err(CliError::usage("no slice indices given"));
    }
    let window = match window {
        Some(w) if w[0].is_finite() && w[1].is_finite() && w[0] < w[1] => w,
        Some(w) => return Err(CliError::usage(format!("window {w:?} must satisfy lo < hi"))),
        None => default_window(vol.values.iter().skip(channel).step_by(vol.channels).copied()),
    };
    // validate every index before writing anything
    let rendered = indices
        .iter()
        .map(|&i| slice_pixels(vol, axis, i, channel, window).map(|img| (i, img)))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let mut images = Vec::new();
    let mut paths = Vec::new();
    for (index, (w, h, pixels)) in rendered {
        let file = format!("{stem}_{}{index:03}.pgm", axis.name());
        let path = out_dir.join(&file);
        fs::write(&path, encode_pgm(w, h, &pixels))?;
        paths.push(path);
        images.push(SliceImage { index, file, width: w, height: h });
    }
    let sidecar = SliceSidecar {
        source: source.display().to_string(),
        axis,
        channel,
        window,
        mapping: MAPPING.to_string(),
        images,
    };
    let side = out_dir.join(format!("{stem}_slices_{}.json", axis.name()));
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?)?;
    paths.push(side);
    Ok((sidecar, paths))
}

/// Parses a binary PGM back into (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> CliResult<(usize, usize, Vec<u8>)> {
    let bad = || CliError { kind: "format", message: "not an 8-bit binary PGM".into(), field: None };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos..].to_vec()))
}
