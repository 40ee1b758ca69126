//! Volume and vector-field containers on a regular voxel grid, trilinear
//! sampling, finite-difference operators and Jacobian determinants.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`.
//! Displacements and velocities are expressed in voxel units along each
//! axis; physical spacing is carried as metadata only.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl TryFrom<RawGeometry> for Geometry {
    type Error = Error;

    fn try_from(raw: RawGeometry) -> Result<Self> {
        Geometry::new(raw.dims, raw.spacing)
    }
}

impl From<Geometry> for RawGeometry {
    fn from(g: Geometry) -> Self {
        RawGeometry { dims: g.dims, spacing: g.spacing }
    }
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&n| n < 2) {
            return Err(Error::InvalidGeometry(format!("axis {axis} has {} voxels, need at least 2", dims[axis])));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGeometry(format!("spacing {spacing:?} must be positive")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidGeometry("voxel count overflows".into()))?;
        Ok(Geometry { dims, spacing })
    }

    /// Cubic grid with unit spacing.
    pub fn cube(n: usize) -> Result<Self> {
        Geometry::new([n; 3], [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index stride along each axis.
    pub fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        Geometry::new(self.dims, spacing)
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::GeometryMismatch { expected: *self, found: *other })
        }
    }

    pub fn require_min_dim(&self, min: usize) -> Result<()> {
        match self.dims.iter().position(|&n| n < min) {
            Some(axis) => Err(Error::TooFewVoxels { axis, len: self.dims[axis], min }),
            None => Ok(()),
        }
    }

    /// True if the voxel lies at least `margin` voxels away from every face.
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        (0..3).all(|a| c[a] >= margin && c[a] + margin < self.dims[a])
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [nx, ny, nz] = self.dims;
        let [sx, sy, sz] = self.spacing;
        write!(f, "{nx}x{ny}x{nz} @ {sx}x{sy}x{sz} mm")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch { expected: geometry.len(), found: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "volume contains non-finite values"));
        }
        Ok(ScalarVolume { geometry, data })
    }

    pub(crate) fn from_vec_unchecked(geometry: Geometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        ScalarVolume { geometry, data }
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::constant(geometry, 0.0)
    }

    pub fn constant(geometry: Geometry, value: f64) -> Self {
        ScalarVolume { geometry, data: vec![value; geometry.len()] }
    }

    /// Builds a volume by evaluating `f` at every voxel coordinate.
    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> f64 + Sync) -> Self {
        let data = (0..geometry.len()).into_par_iter().map(|i| f(geometry.coords(i))).collect();
        ScalarVolume { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarVolume {
        ScalarVolume { geometry: self.geometry, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    geometry: Geometry,
    data: Vec<Vec3>,
}

impl VectorField {
    pub fn new(geometry: Geometry, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch { expected: geometry.len(), found: data.len() });
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vectors", "field contains non-finite components"));
        }
        Ok(VectorField { geometry, data })
    }

    pub(crate) fn from_vec_unchecked(geometry: Geometry, data: Vec<Vec3>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        VectorField { geometry, data }
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::constant(geometry, [0.0; 3])
    }

    pub fn constant(geometry: Geometry, v: Vec3) -> Self {
        VectorField { geometry, data: vec![v; geometry.len()] }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> Vec3 + Sync) -> Self {
        let data = (0..geometry.len()).into_par_iter().map(|i| f(geometry.coords(i))).collect();
        VectorField { geometry, data }
    }

    pub fn from_components(x: &ScalarVolume, y: &ScalarVolume, z: &ScalarVolume) -> Result<Self> {
        x.geometry.ensure_same(&y.geometry)?;
        x.geometry.ensure_same(&z.geometry)?;
        let data = (0..x.data.len()).map(|i| [x.data[i], y.data[i], z.data[i]]).collect();
        Ok(VectorField { geometry: x.geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.data
    }

    pub fn into_vectors(self) -> Vec<Vec3> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn component(&self, c: usize) -> ScalarVolume {
        ScalarVolume { geometry: self.geometry, data: self.data.iter().map(|v| v[c]).collect() }
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        let data = self.data.iter().map(|v| [v[0] * s, v[1] * s, v[2] * s]).collect();
        VectorField { geometry: self.geometry, data }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.geometry.ensure_same(&other.geometry)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]).collect();
        Ok(VectorField { geometry: self.geometry, data })
    }

    /// Largest Euclidean vector norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(norm).fold(0.0, f64::max)
    }

    /// Largest absolute component over all voxels.
    pub fn max_abs_component(&self) -> f64 {
        self.data.iter().flatten().map(|c| c.abs()).fold(0.0, f64::max)
    }

    pub(crate) fn as_flat(&self) -> &[f64] {
        self.data.as_flattened()
    }

    pub(crate) fn from_flat(geometry: Geometry, flat: &[f64]) -> VectorField {
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        VectorField { geometry, data }
    }
}

#[inline]
pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// How samples that fall outside the grid are resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    /// Coordinates are clipped to the valid range.
    #[default]
    Clamp,
    /// Voxels outside the grid contribute zero.
    Zero,
}

/// Interpolation weights along one axis: two corner indices, their weights
/// and the derivative of the weights with respect to the coordinate.
#[derive(Clone, Copy)]
struct AxisWeights {
    idx: [usize; 2],
    w: [f64; 2],
    dw: [f64; 2],
}

#[inline]
fn axis_weights(p: f64, n: usize, policy: BoundaryPolicy) -> AxisWeights {
    let hi = (n - 1) as f64;
    match policy {
        BoundaryPolicy::Clamp => {
            let inside = (0.0..=hi).contains(&p);
            let pc = p.clamp(0.0, hi);
            let i0 = (pc.floor() as usize).min(n - 2);
            let t = pc - i0 as f64;
            let dw = if inside { [-1.0, 1.0] } else { [0.0, 0.0] };
            AxisWeights { idx: [i0, i0 + 1], w: [1.0 - t, t], dw }
        }
        BoundaryPolicy::Zero => {
            let f = p.floor().clamp(-2.0, hi + 1.0);
            let t = (p - f).clamp(0.0, 1.0);
            let mut out = AxisWeights { idx: [0, 0], w: [0.0; 2], dw: [0.0; 2] };
            let base = [(1.0 - t, -1.0), (t, 1.0)];
            for (k, &(w, dw)) in base.iter().enumerate() {
                let i = f + k as f64;
                if (0.0..=hi).contains(&i) {
                    out.idx[k] = i as usize;
                    out.w[k] = w;
                    out.dw[k] = dw;
                }
            }
            out
        }
    }
}

/// The eight corner contributions of one trilinear sample.
#[derive(Clone, Copy)]
pub(crate) struct Corners {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// Corners plus the coordinate derivatives of each corner weight.
#[derive(Clone, Copy)]
pub(crate) struct CornersGrad {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

#[inline]
pub(crate) fn corners(geom: &Geometry, p: Vec3, policy: BoundaryPolicy) -> Corners {
    let [nx, ny, nz] = geom.dims;
    let ax = axis_weights(p[0], nx, policy);
    let ay = axis_weights(p[1], ny, policy);
    let az = axis_weights(p[2], nz, policy);
    let mut c = Corners { idx: [0; 8], w: [0.0; 8] };
    for k in 0..8 {
        let (a, b, d) = (k & 1, (k >> 1) & 1, k >> 2);
        c.idx[k] = ax.idx[a] + nx * (ay.idx[b] + ny * az.idx[d]);
        c.w[k] = ax.w[a] * ay.w[b] * az.w[d];
    }
    c
}

#[inline]
pub(crate) fn corners_grad(geom: &Geometry, p: Vec3, policy: BoundaryPolicy) -> CornersGrad {
    let [nx, ny, nz] = geom.dims;
    let ax = axis_weights(p[0], nx, policy);
    let ay = axis_weights(p[1], ny, policy);
    let az = axis_weights(p[2], nz, policy);
    let mut c = CornersGrad { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 8]; 3] };
    for k in 0..8 {
        let (a, b, d) = (k & 1, (k >> 1) & 1, k >> 2);
        c.idx[k] = ax.idx[a] + nx * (ay.idx[b] + ny * az.idx[d]);
        c.w[k] = ax.w[a] * ay.w[b] * az.w[d];
        c.dw[0][k] = ax.dw[a] * ay.w[b] * az.w[d];
        c.dw[1][k] = ax.w[a] * ay.dw[b] * az.w[d];
        c.dw[2][k] = ax.w[a] * ay.w[b] * az.dw[d];
    }
    c
}

impl Corners {
    #[inline]
    pub fn blend(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.w[k] * values[self.idx[k]];
        }
        acc
    }

    #[inline]
    pub fn blend3(&self, values: &[Vec3]) -> Vec3 {
        let mut acc = [0.0; 3];
        for k in 0..8 {
            let v = &values[self.idx[k]];
            for c in 0..3 {
                acc[c] += self.w[k] * v[c];
            }
        }
        acc
    }
}

impl CornersGrad {
    #[inline]
    pub fn blend_with_gradient(&self, values: &[f64]) -> (f64, Vec3) {
        let mut val = 0.0;
        let mut grad = [0.0; 3];
        for k in 0..8 {
            let f = values[self.idx[k]];
            val += self.w[k] * f;
            grad[0] += self.dw[0][k] * f;
            grad[1] += self.dw[1][k] * f;
            grad[2] += self.dw[2][k] * f;
        }
        (val, grad)
    }

    /// Value of each component and its coordinate Jacobian `d[c][b] = dU_c/dp_b`.
    #[inline]
    pub fn blend3_with_jacobian(&self, values: &[Vec3]) -> (Vec3, Mat3) {
        let mut val = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        for k in 0..8 {
            let f = &values[self.idx[k]];
            for c in 0..3 {
                val[c] += self.w[k] * f[c];
                for b in 0..3 {
                    jac[c][b] += self.dw[b][k] * f[c];
                }
            }
        }
        (val, jac)
    }
}

fn check_point(p: Vec3) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteCoordinate(p[0], p[1], p[2]))
    }
}

/// Trilinear sample of `vol` at a continuous voxel coordinate.
pub fn sample_trilinear(vol: &ScalarVolume, point: Vec3, policy: BoundaryPolicy) -> Result<f64> {
    check_point(point)?;
    Ok(corners(&vol.geometry, point, policy).blend(&vol.data))
}

/// Trilinear sample together with the exact derivative of the interpolant
/// with respect to the sample coordinate. On cell faces the derivative of
/// the upper cell is returned; outside a clamped axis it is zero.
pub fn sample_trilinear_with_gradient(vol: &ScalarVolume, point: Vec3, policy: BoundaryPolicy) -> Result<(f64, Vec3)> {
    check_point(point)?;
    Ok(corners_grad(&vol.geometry, point, policy).blend_with_gradient(&vol.data))
}

/// `out(x) = vol(x + disp(x))`.
pub fn warp_scalar(vol: &ScalarVolume, disp: &VectorField, policy: BoundaryPolicy) -> Result<ScalarVolume> {
    let geom = vol.geometry;
    geom.ensure_same(&disp.geometry)?;
    let data = disp
        .data
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let [x, y, z] = geom.coords(i);
            let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            corners(&geom, p, policy).blend(&vol.data)
        })
        .collect();
    Ok(ScalarVolume { geometry: geom, data })
}

/// Derivative of a vector array along `axis`: central differences in the
/// interior, first-order one-sided differences on the two boundary faces.
pub(crate) fn diff_axis(values: &[Vec3], geom: &Geometry, axis: usize) -> Vec<Vec3> {
    let n = geom.dims[axis];
    let s = geom.strides()[axis];
    let mut out = vec![[0.0; 3]; values.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let k = geom.coords(i)[axis];
        let (hi, lo, scale) = if k == 0 {
            (i + s, i, 1.0)
        } else if k == n - 1 {
            (i, i - s, 1.0)
        } else {
            (i + s, i - s, 0.5)
        };
        let (a, b) = (&values[hi], &values[lo]);
        *o = [scale * (a[0] - b[0]), scale * (a[1] - b[1]), scale * (a[2] - b[2])];
    }
    out
}

/// Accumulates the transpose of [`diff_axis`] applied to `grad` into `out`.
pub(crate) fn diff_axis_adjoint(grad: &[Vec3], geom: &Geometry, axis: usize, out: &mut [Vec3]) {
    let n = geom.dims[axis];
    let s = geom.strides()[axis];
    for (i, g) in grad.iter().enumerate() {
        let k = geom.coords(i)[axis];
        let (hi, lo, scale) = if k == 0 {
            (i + s, i, 1.0)
        } else if k == n - 1 {
            (i, i - s, 1.0)
        } else {
            (i + s, i - s, 0.5)
        };
        for c in 0..3 {
            out[hi][c] += scale * g[c];
            out[lo][c] -= scale * g[c];
        }
    }
}

/// Per-voxel 3x3 matrices on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    geometry: Geometry,
    data: Vec<Mat3>,
}

impl MatrixField {
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn matrices(&self) -> &[Mat3] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Mat3 {
        self.data[self.geometry.index(x, y, z)]
    }
}

/// Spatial gradient of a displacement field, `J[a][b] = d u_a / d x_b`,
/// with derivatives taken in voxel coordinates.
pub fn displacement_jacobian(disp: &VectorField) -> Result<MatrixField> {
    let geom = disp.geometry;
    geom.require_min_dim(3)?;
    let cols: Vec<Vec<Vec3>> = (0..3).map(|b| diff_axis(&disp.data, &geom, b)).collect();
    let data = (0..geom.len())
        .map(|i| {
            let mut m = [[0.0; 3]; 3];
            for (b, col) in cols.iter().enumerate() {
                for a in 0..3 {
                    m[a][b] = col[i][a];
                }
            }
            m
        })
        .collect();
    Ok(MatrixField { geometry: geom, data })
}

#[inline]
pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix: `cof[a][b] = d det(m) / d m[a][b]`.
#[inline]
pub fn cofactor3(m: &Mat3) -> Mat3 {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

#[inline]
pub(crate) fn identity_plus(j: &Mat3) -> Mat3 {
    let mut m = *j;
    for (a, row) in m.iter_mut().enumerate() {
        row[a] += 1.0;
    }
    m
}

/// Signed determinant of the deformation map `x + u(x)` at every voxel.
pub fn jacobian_determinant(disp: &VectorField) -> Result<ScalarVolume> {
    let jac = displacement_jacobian(disp)?;
    let data = jac.data.iter().map(|j| det3(&identity_plus(j))).collect();
    Ok(ScalarVolume { geometry: jac.geometry, data })
}
