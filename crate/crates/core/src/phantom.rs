//! Synthetic tagged phantoms with known volume-preserving motion.
//!
//! A stationary velocity is drawn as the curl of a random band-limited
//! trigonometric vector potential, so it is divergence free in closed form.
//! The potential of each Fourier mode is oriented so that the central
//! difference divergence used by [`crate::grid::displacement_jacobian`]
//! vanishes as well. The velocity is exponentiated to the ground-truth
//! displacement, and the moving tag volumes are obtained by evaluating the
//! analytic tag pattern through the inverse map.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::{integrate_velocity, VelocityParam, DEFAULT_SQUARING_STEPS};
use crate::error::{Error, Result};
use crate::grid::{norm, Geometry, Mat3, ScalarVolume, Vec3, VectorField};
use crate::harp::TagOrientation;

/// Intensity outside the tissue.
pub const BACKGROUND: f64 = 0.05;
/// Width in voxels of the smooth tissue boundary.
pub const EDGE_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
}

impl Ellipsoid {
    /// Soft indicator in [0, 1]: 1 inside, 0 outside, smoothstep across a
    /// band of [`EDGE_WIDTH`] voxels centered on the surface.
    pub fn soft_mask(&self, p: Vec3) -> f64 {
        let q = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.semi_axes[a]);
        let r = norm(&q);
        let grad = [0, 1, 2].map(|a| q[a] / (self.semi_axes[a] * r.max(1e-300)));
        let gn = norm(&grad);
        if r < 0.5 || gn == 0.0 {
            return 1.0;
        }
        // first-order signed distance to the surface
        let dist = (r - 1.0) / gn;
        let t = (0.5 - dist / EDGE_WIDTH).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    /// Approximate signed distance to the surface in voxels (negative inside).
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let q = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.semi_axes[a]);
        let r = norm(&q);
        let grad = [0, 1, 2].map(|a| q[a] / (self.semi_axes[a] * r.max(1e-300)));
        let gn = norm(&grad);
        if gn == 0.0 {
            return -self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        (r - 1.0) / gn
    }
}

/// Missing keys take the values of [`PhantomConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub geometry: Geometry,
    /// Voxels per tag period.
    pub tag_wavelength: f64,
    pub tissue_ellipsoid: Ellipsoid,
    /// Peak velocity magnitude in voxels.
    pub velocity_amplitude: f64,
    /// Largest integer wave number of the velocity potential per axis.
    pub velocity_bandlimit: u32,
    /// Fraction of tag contrast retained in the moving volumes.
    pub fading_factor: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub integration_steps: u32,
    /// Tag normals for (Av, Sh, Sv); coordinate axes when absent.
    pub tag_directions: Option<[Vec3; 3]>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let n = 32;
        let c = (n - 1) as f64 / 2.0;
        PhantomConfig {
            geometry: Geometry::new([n; 3], [1.875; 3]).expect("valid default geometry"),
            tag_wavelength: 8.0,
            tissue_ellipsoid: Ellipsoid { center: [c; 3], semi_axes: [11.0, 12.0, 10.0] },
            velocity_amplitude: 2.0,
            velocity_bandlimit: 1,
            fading_factor: 0.8,
            noise_sigma: 0.02,
            seed: 42,
            integration_steps: DEFAULT_SQUARING_STEPS,
            tag_directions: None,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tag_wavelength.is_finite() && self.tag_wavelength >= 3.0) {
            return Err(Error::invalid("tag_wavelength", format!("{} must be at least 3 voxels", self.tag_wavelength)));
        }
        if !(self.velocity_amplitude.is_finite() && self.velocity_amplitude >= 0.0) {
            return Err(Error::invalid("velocity_amplitude", "must be non-negative"));
        }
        if self.velocity_bandlimit < 1 {
            return Err(Error::invalid("velocity_bandlimit", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.fading_factor) {
            return Err(Error::invalid("fading_factor", format!("{} is outside [0, 1]", self.fading_factor)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        let e = &self.tissue_ellipsoid;
        if e.semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) || e.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("tissue_ellipsoid", "semi-axes must be positive and center finite"));
        }
        let dirs = self.directions();
        for d in &dirs {
            if !(norm(d).is_finite() && norm(d) > 0.0) {
                return Err(Error::invalid("tag_directions", "directions must be non-zero"));
            }
        }
        let det = crate::grid::det3(&dirs);
        if det.abs() < 1e-6 * norm(&dirs[0]) * norm(&dirs[1]) * norm(&dirs[2]) {
            return Err(Error::invalid("tag_directions", "directions must be linearly independent"));
        }
        Ok(())
    }

    pub fn directions(&self) -> [Vec3; 3] {
        self.tag_directions.unwrap_or(TagOrientation::ALL.map(TagOrientation::default_direction))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    /// Tag volumes in [`TagOrientation::ALL`] order.
    pub fixed: [ScalarVolume; 3],
    pub moving: [ScalarVolume; 3],
    pub truth_velocity: VectorField,
    pub truth_displacement: VectorField,
    pub tissue_mask: ScalarVolume,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mode {
    /// Angular wave vector (radians per voxel).
    omega: Vec3,
    cos_coef: Vec3,
    sin_coef: Vec3,
}

/// Closed-form divergence-free field `sum_m c_m cos(w_m.x) + s_m sin(w_m.x)`
/// with `c_m, s_m` orthogonal to `w_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceFreeField {
    modes: Vec<Mode>,
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl DivergenceFreeField {
    /// Random field with unit-scale coefficients, before amplitude scaling.
    pub fn random(geometry: &Geometry, bandlimit: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = geometry.dims();
        let b = bandlimit as i64;
        let mut modes = Vec::new();
        for kz in -b..=b {
            for ky in -b..=b {
                for kx in -b..=b {
                    let k = [kx, ky, kz];
                    // one representative of each +-k pair
                    if k.iter().find(|&&c| c != 0).is_none_or(|&c| c < 0) {
                        continue;
                    }
                    let omega = [0, 1, 2].map(|a| 2.0 * PI * k[a] as f64 / dims[a] as f64);
                    let k2 = (kx * kx + ky * ky + kz * kz) as f64;
                    let weight = 1.0 / (1.0 + k2);
                    // symbol of the central difference operator
                    let symbol = omega.map(f64::sin);
                    let n = cross(&omega, &symbol);
                    let nn = norm(&n);
                    let mut draw = || -> Vec3 { [0, 1, 2].map(|_| weight * rng.sample::<f64, _>(StandardNormal)) };
                    let (pc, ps) = if nn > 1e-9 * norm(&omega) * norm(&symbol) {
                        // potential along the symbol keeps curl orthogonal to it
                        let (a, b) = (draw()[0], draw()[0]);
                        (symbol.map(|s| a * s / nn), symbol.map(|s| b * s / nn))
                    } else {
                        (draw(), draw())
                    };
                    // curl of pc cos(wx) + ps sin(wx)
                    let cos_coef = cross(&omega, &ps);
                    let sin_coef = cross(&omega, &pc).map(|c| -c);
                    modes.push(Mode { omega, cos_coef, sin_coef });
                }
            }
        }
        DivergenceFreeField { modes }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for m in &mut self.modes {
            m.cos_coef = m.cos_coef.map(|c| c * s);
            m.sin_coef = m.sin_coef.map(|c| c * s);
        }
        self
    }

    pub fn eval(&self, p: Vec3) -> Vec3 {
        let mut v = [0.0; 3];
        for m in &self.modes {
            let (s, c) = dot(&m.omega, &p).sin_cos();
            for a in 0..3 {
                v[a] += m.cos_coef[a] * c + m.sin_coef[a] * s;
            }
        }
        v
    }

    /// Analytic `J[a][b] = d v_a / d x_b`.
    pub fn jacobian(&self, p: Vec3) -> Mat3 {
        let mut j = [[0.0; 3]; 3];
        for m in &self.modes {
            let (s, c) = dot(&m.omega, &p).sin_cos();
            for a in 0..3 {
                let d = -m.cos_coef[a] * s + m.sin_coef[a] * c;
                for b in 0..3 {
                    j[a][b] += d * m.omega[b];
                }
            }
        }
        j
    }

    pub fn sample(&self, geometry: Geometry) -> VectorField {
        VectorField::from_fn(geometry, |c| self.eval(c.map(|k| k as f64)))
    }
}

/// Random divergence-free velocity whose largest voxel norm equals `amplitude`.
pub fn make_divergence_free_velocity(
    geometry: Geometry,
    amplitude: f64,
    bandlimit: u32,
    seed: u64,
) -> Result<VectorField> {
    Ok(divergence_free_generator(geometry, amplitude, bandlimit, seed)?.sample(geometry))
}

/// The closed-form field behind [`make_divergence_free_velocity`].
pub fn divergence_free_generator(
    geometry: Geometry,
    amplitude: f64,
    bandlimit: u32,
    seed: u64,
) -> Result<DivergenceFreeField> {
    if bandlimit < 1 {
        return Err(Error::invalid("bandlimit", "must be at least 1"));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::invalid("amplitude", "must be non-negative"));
    }
    let field = DivergenceFreeField::random(&geometry, bandlimit, seed);
    let peak = field.sample(geometry).max_norm();
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    Ok(field.scaled(scale))
}

/// Tag intensity at a continuous point, with tag contrast scaled by `fading`.
pub fn tag_intensity(p: Vec3, direction: Vec3, wavelength: f64, tissue: &Ellipsoid, fading: f64) -> f64 {
    let m = tissue.soft_mask(p);
    let phase = 2.0 * PI * dot(&direction, &p) / wavelength;
    m * 0.5 * (1.0 + fading * phase.cos()) + (1.0 - m) * BACKGROUND
}

fn unit(direction: Vec3) -> Result<Vec3> {
    let n = norm(&direction);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid("direction", "tag direction must be non-zero"));
    }
    Ok(direction.map(|c| c / n))
}

pub fn make_tagged_volume(
    geometry: Geometry,
    direction: Vec3,
    wavelength: f64,
    tissue: &Ellipsoid,
) -> Result<ScalarVolume> {
    if !(wavelength.is_finite() && wavelength >= 3.0) {
        return Err(Error::invalid("wavelength", format!("{wavelength} must be at least 3 voxels")));
    }
    let dir = unit(direction)?;
    Ok(ScalarVolume::from_fn(geometry, |c| tag_intensity(c.map(|k| k as f64), dir, wavelength, tissue, 1.0)))
}

pub fn make_phantom_pair(config: &PhantomConfig) -> Result<PhantomPair> {
    config.validate()?;
    let g = config.geometry;
    let velocity = make_divergence_free_velocity(g, config.velocity_amplitude, config.velocity_bandlimit, config.seed)?;
    let steps = config.integration_steps;
    let truth_displacement = integrate_velocity(&VelocityParam::new(velocity.clone(), steps));
    let inverse = integrate_velocity(&VelocityParam::new(velocity.scaled(-1.0), steps));

    let dirs = config.directions().map(|d| unit(d).expect("validated"));
    let tissue = &config.tissue_ellipsoid;
    let lambda = config.tag_wavelength;
    let fixed = dirs.map(|d| ScalarVolume::from_fn(g, |c| tag_intensity(c.map(|k| k as f64), d, lambda, tissue, 1.0)));

    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
    let mut stream = 0u64;
    let moving = dirs.map(|d| {
        stream += 1;
        let clean = ScalarVolume::from_fn(g, |c| {
            let u = inverse.vectors()[g.index(c[0], c[1], c[2])];
            let p = [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]];
            tag_intensity(p, d, lambda, tissue, config.fading_factor)
        });
        if config.noise_sigma == 0.0 {
            return clean;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let data = clean.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
        ScalarVolume::new(g, data).expect("finite noisy volume")
    });
    let tissue_mask = ScalarVolume::from_fn(g, |c| tissue.soft_mask(c.map(|k| k as f64)));
    Ok(PhantomPair { fixed, moving, truth_velocity: velocity, truth_displacement, tissue_mask })
}
