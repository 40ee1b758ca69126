//! Harmonic-phase processing: isotropic resampling, spectral-peak
//! bandpass filtering, the (sin, cos) phase transform and magnitude fusion.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp_scalar, BoundaryPolicy, Geometry, ScalarVolume, Vec3, VectorField};

/// Bandpass half-width in cycles/voxel is `SIGMA_PER_FREQUENCY / wavelength`.
pub const SIGMA_PER_FREQUENCY: f64 = 0.5;
/// The harmonic peak must lie at least this many frequency bins from DC.
pub const MIN_PEAK_BINS: f64 = 3.0;
/// Phase is reported as 0 where the normalized magnitude is below this.
pub const PHASE_MAGNITUDE_FLOOR: f64 = 1e-6;
const MAGNITUDE_PERCENTILE: f64 = 0.99;

/// The three tagged acquisitions: axial with vertical tags, sagittal with
/// horizontal tags, sagittal with vertical tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagOrientation {
    Av,
    Sh,
    Sv,
}

impl TagOrientation {
    pub const ALL: [TagOrientation; 3] = [TagOrientation::Av, TagOrientation::Sh, TagOrientation::Sv];

    pub fn name(self) -> &'static str {
        match self {
            TagOrientation::Av => "av",
            TagOrientation::Sh => "sh",
            TagOrientation::Sv => "sv",
        }
    }

    /// Tag-normal direction used when none is configured: axial-vertical
    /// tags vary along x, sagittal-vertical along y, sagittal-horizontal
    /// along z.
    pub fn default_direction(self) -> Vec3 {
        match self {
            TagOrientation::Av => [1.0, 0.0, 0.0],
            TagOrientation::Sv => [0.0, 1.0, 0.0],
            TagOrientation::Sh => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarpImage {
    /// Normalized to [0, 1].
    pub magnitude: ScalarVolume,
    /// Wrapped to (-pi, pi].
    pub phase: ScalarVolume,
}

/// Six-channel representation: `sin[k]`, `cos[k]` for each
/// [`TagOrientation`] `k` in [`TagOrientation::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct SinCosTrio {
    sin: [ScalarVolume; 3],
    cos: [ScalarVolume; 3],
}

impl SinCosTrio {
    pub fn new(sin: [ScalarVolume; 3], cos: [ScalarVolume; 3]) -> Result<Self> {
        let g = *sin[0].geometry();
        for v in sin.iter().chain(cos.iter()) {
            g.ensure_same(v.geometry())?;
        }
        Ok(SinCosTrio { sin, cos })
    }

    pub fn from_phases(phases: [&ScalarVolume; 3]) -> Result<Self> {
        let [a, b, c] = phases.map(sincos_transform);
        SinCosTrio::new([a.0, b.0, c.0], [a.1, b.1, c.1])
    }

    pub fn geometry(&self) -> &Geometry {
        self.sin[0].geometry()
    }

    pub fn sin(&self, k: usize) -> &ScalarVolume {
        &self.sin[k]
    }

    pub fn cos(&self, k: usize) -> &ScalarVolume {
        &self.cos[k]
    }

    /// Channels in the order (Av sin, Av cos, Sh sin, Sh cos, Sv sin, Sv cos).
    pub fn channels(&self) -> impl Iterator<Item = &ScalarVolume> {
        (0..3).flat_map(move |k| [&self.sin[k], &self.cos[k]])
    }

    pub fn map_channels(&self, f: impl Fn(&ScalarVolume) -> Result<ScalarVolume>) -> Result<Self> {
        let sin = [f(&self.sin[0])?, f(&self.sin[1])?, f(&self.sin[2])?];
        let cos = [f(&self.cos[0])?, f(&self.cos[1])?, f(&self.cos[2])?];
        SinCosTrio::new(sin, cos)
    }

    pub fn warp(&self, disp: &VectorField, policy: BoundaryPolicy) -> Result<Self> {
        self.map_channels(|v| warp_scalar(v, disp, policy))
    }

    /// Largest `|sin^2 + cos^2 - 1|` over all voxels and orientations.
    pub fn unit_norm_deviation(&self) -> f64 {
        (0..3)
            .flat_map(|k| {
                self.sin[k].values().iter().zip(self.cos[k].values()).map(|(s, c)| (s * s + c * c - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Resamples onto an isotropic grid with `target_spacing` mm, covering the
/// same physical extent from the first voxel center.
pub fn resample_isotropic(vol: &ScalarVolume, target_spacing: f64) -> Result<ScalarVolume> {
    if !(target_spacing.is_finite() && target_spacing > 0.0) {
        return Err(Error::invalid("target_spacing", format!("{target_spacing} must be positive")));
    }
    let g = *vol.geometry();
    let sp = g.spacing();
    let min_sp = sp.iter().cloned().fold(f64::INFINITY, f64::min);
    if target_spacing > min_sp * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "target_spacing",
            format!("{target_spacing} exceeds the finest input spacing {min_sp}"),
        ));
    }
    let dims = [0, 1, 2].map(|a| {
        let extent = (g.dims()[a] - 1) as f64 * sp[a];
        (extent / target_spacing + 1e-9).floor() as usize + 1
    });
    let out = Geometry::new(dims, [target_spacing; 3])?;
    let ratio = sp.map(|s| target_spacing / s);
    Ok(ScalarVolume::from_fn(out, |c| {
        let p = [0, 1, 2].map(|a| c[a] as f64 * ratio[a]);
        sample_lerp(vol, p)
    }))
}

/// Trilinear sample with clamped coordinates as nested `a + t (b - a)`
/// steps, which reproduces constant data bit for bit.
fn sample_lerp(vol: &ScalarVolume, p: Vec3) -> f64 {
    let g = vol.geometry();
    let d = g.dims();
    let axis = |a: usize| {
        let pc = p[a].clamp(0.0, (d[a] - 1) as f64);
        let i0 = (pc.floor() as usize).min(d[a] - 2);
        (i0, pc - i0 as f64)
    };
    let ((x0, tx), (y0, ty), (z0, tz)) = (axis(0), axis(1), axis(2));
    let v = vol.values();
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let along_x = |y: usize, z: usize| lerp(v[g.index(x0, y, z)], v[g.index(x0 + 1, y, z)], tx);
    let along_y = |z: usize| lerp(along_x(y0, z), along_x(y0 + 1, z), ty);
    lerp(along_y(z0), along_y(z0 + 1), tz)
}

/// Signed frequency (cycles/voxel) of FFT bin `k` on an axis of length `n`.
fn bin_frequency(k: usize, n: usize) -> f64 {
    if 2 * k <= n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

/// In-place 3D FFT over an x-fastest complex buffer.
pub(crate) fn fft3(data: &mut [Complex64], geom: &Geometry, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let dims = geom.dims();
    let strides = geom.strides();
    for axis in 0..3 {
        let n = dims[axis];
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        if axis == 0 {
            fft.process(data);
            continue;
        }
        // gather every line along `axis` into a contiguous batch
        let lines = data.len() / n;
        let mut batch = vec![Complex64::default(); data.len()];
        let line_starts: Vec<usize> = (0..data.len()).filter(|&i| geom.coords(i)[axis] == 0).collect();
        debug_assert_eq!(line_starts.len(), lines);
        for (l, &start) in line_starts.iter().enumerate() {
            for k in 0..n {
                batch[l * n + k] = data[start + k * strides[axis]];
            }
        }
        fft.process(&mut batch);
        for (l, &start) in line_starts.iter().enumerate() {
            for k in 0..n {
                data[start + k * strides[axis]] = batch[l * n + k];
            }
        }
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

pub(crate) fn forward_spectrum(vol: &ScalarVolume) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = vol.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft3(&mut buf, vol.geometry(), false);
    buf
}

fn unit(direction: Vec3) -> Result<Vec3> {
    let n = crate::grid::norm(&direction);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid("tag_direction", "direction must be a non-zero finite vector"));
    }
    Ok(direction.map(|c| c / n))
}

fn percentile_sorted_index(len: usize, q: f64) -> usize {
    ((len - 1) as f64 * q).round() as usize
}

/// Isolates the first harmonic peak of a tagged volume.
///
/// The spectrum is multiplied by a Gaussian of per-axis standard deviation
/// `SIGMA_PER_FREQUENCY / wavelength` centered at `direction / wavelength`,
/// and by the complementary notch `1 - exp(-|f|^2 / 2 sigma^2)` so the
/// response at DC is exactly zero. The complex result is split into a
/// magnitude scaled so its 99th percentile is 1 (then clipped to [0, 1])
/// and a phase wrapped to (-pi, pi].
pub fn harp_filter(vol: &ScalarVolume, tag_direction: Vec3, wavelength: f64) -> Result<HarpImage> {
    if !(wavelength.is_finite() && wavelength >= 3.0) {
        return Err(Error::invalid("wavelength", format!("{wavelength} must be at least 3 voxels")));
    }
    let dir = unit(tag_direction)?;
    let g = *vol.geometry();
    let dims = g.dims();
    let f0 = dir.map(|d| d / wavelength);
    let tag_frequency = 1.0 / wavelength;
    let min_frequency = MIN_PEAK_BINS / *dims.iter().min().unwrap() as f64;
    if tag_frequency < min_frequency {
        return Err(Error::TagFrequencyTooLow { frequency: tag_frequency, minimum: min_frequency });
    }
    let sigma = SIGMA_PER_FREQUENCY / wavelength;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);

    let mut spectrum = forward_spectrum(vol);
    let freqs: Vec<Vec<f64>> = (0..3).map(|a| (0..dims[a]).map(|k| bin_frequency(k, dims[a])).collect()).collect();
    for (i, s) in spectrum.iter_mut().enumerate() {
        let c = g.coords(i);
        let f = [freqs[0][c[0]], freqs[1][c[1]], freqs[2][c[2]]];
        let d2: f64 = (0..3).map(|a| (f[a] - f0[a]).powi(2)).sum();
        let r2: f64 = f.iter().map(|v| v * v).sum();
        let w = (-d2 * inv_two_var).exp() * (1.0 - (-r2 * inv_two_var).exp());
        *s *= w;
    }
    fft3(&mut spectrum, &g, true);

    let raw: Vec<f64> = spectrum.iter().map(|z| z.norm()).collect();
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let mut scale = sorted[percentile_sorted_index(sorted.len(), MAGNITUDE_PERCENTILE)];
    if scale <= 0.0 {
        scale = *sorted.last().unwrap();
    }
    let magnitude: Vec<f64> =
        raw.iter().map(|&m| if scale > 0.0 { (m / scale).clamp(0.0, 1.0) } else { 0.0 }).collect();
    let phase: Vec<f64> = spectrum
        .iter()
        .zip(&raw)
        .map(
            |(z, &m)| {
                if scale <= 0.0 || m / scale < PHASE_MAGNITUDE_FLOOR {
                    0.0
                } else {
                    wrap_phase(z.im.atan2(z.re))
                }
            },
        )
        .collect();
    Ok(HarpImage {
        magnitude: ScalarVolume::from_vec_unchecked(g, magnitude),
        phase: ScalarVolume::from_vec_unchecked(g, phase),
    })
}

/// Maps an angle into (-pi, pi].
pub fn wrap_phase(a: f64) -> f64 {
    let mut w = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    if w <= -PI {
        w += 2.0 * PI;
    }
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn sincos_transform(phase: &ScalarVolume) -> (ScalarVolume, ScalarVolume) {
    (phase.map(f64::sin), phase.map(f64::cos))
}

/// Voxel-wise mean of the three HARP magnitudes, clipped to [0, 1].
pub fn combine_magnitude(d_av: &ScalarVolume, d_sh: &ScalarVolume, d_sv: &ScalarVolume) -> Result<ScalarVolume> {
    let g = *d_av.geometry();
    g.ensure_same(d_sh.geometry())?;
    g.ensure_same(d_sv.geometry())?;
    let data = d_av
        .values()
        .iter()
        .zip(d_sh.values())
        .zip(d_sv.values())
        .map(|((a, b), c)| ((a + b + c) / 3.0).clamp(0.0, 1.0))
        .collect();
    Ok(ScalarVolume::from_vec_unchecked(g, data))
}

/// Default floor for [`harp_trio`]. Well above the bandpassed noise of a
/// unit-contrast tagged volume, so background phase is not fitted.
pub const DEFAULT_PHASE_FLOOR: f64 = 0.05;

/// Phase of `image` with voxels whose magnitude is below `floor` set to 0.
pub fn floor_phase(image: &HarpImage, floor: f64) -> ScalarVolume {
    let data =
        image.phase.values().iter().zip(image.magnitude.values()).map(|(&p, &m)| if m < floor { 0.0 } else { p });
    ScalarVolume::from_vec_unchecked(*image.phase.geometry(), data.collect())
}

/// HARP output for the three orientations of one time frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HarpTrio {
    pub images: [HarpImage; 3],
    pub sincos: SinCosTrio,
    /// Fused magnitude, see [`combine_magnitude`].
    pub magnitude: ScalarVolume,
}

/// Filters three tagged volumes given in [`TagOrientation::ALL`] order.
///
/// Before the (sin, cos) transform the phase of each orientation is set to
/// 0 wherever its normalized magnitude is below `phase_floor`, so regions
/// without tag signal carry a constant (0, 1) pair.
pub fn harp_trio(
    volumes: [&ScalarVolume; 3],
    directions: [Vec3; 3],
    wavelength: f64,
    phase_floor: f64,
) -> Result<HarpTrio> {
    if !(0.0..1.0).contains(&phase_floor) {
        return Err(Error::invalid("phase_floor", format!("{phase_floor} is outside [0, 1)")));
    }
    let g = *volumes[0].geometry();
    for v in &volumes[1..] {
        g.ensure_same(v.geometry())?;
    }
    let images = [
        harp_filter(volumes[0], directions[0], wavelength)?,
        harp_filter(volumes[1], directions[1], wavelength)?,
        harp_filter(volumes[2], directions[2], wavelength)?,
    ];
    let floored = images.each_ref().map(|h| floor_phase(h, phase_floor));
    let sincos = SinCosTrio::from_phases([&floored[0], &floored[1], &floored[2]])?;
    let magnitude = combine_magnitude(&images[0].magnitude, &images[1].magnitude, &images[2].magnitude)?;
    Ok(HarpTrio { images, sincos, magnitude })
}
