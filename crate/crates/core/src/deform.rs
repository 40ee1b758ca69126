//! Stationary velocity fields exponentiated by scaling and squaring, field
//! composition, and the reverse-mode adjoint of the integrator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{corners, corners_grad, BoundaryPolicy, Geometry, Vec3, VectorField};

pub const DEFAULT_SQUARING_STEPS: u32 = 7;

/// Boundary handling inside every squaring step.
const SQUARING_POLICY: BoundaryPolicy = BoundaryPolicy::Clamp;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityParam {
    pub velocity: VectorField,
    /// Number of squaring iterations; the velocity is scaled by `2^-n_steps`.
    pub n_steps: u32,
}

impl VelocityParam {
    pub fn new(velocity: VectorField, n_steps: u32) -> Self {
        VelocityParam { velocity, n_steps }
    }

    pub fn zeros(geometry: Geometry, n_steps: u32) -> Self {
        VelocityParam { velocity: VectorField::zeros(geometry), n_steps }
    }
}

fn compose_raw(geom: &Geometry, outer: &[Vec3], inner: &[Vec3]) -> Vec<Vec3> {
    inner
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let [x, y, z] = geom.coords(i);
            let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            let s = corners(geom, p, SQUARING_POLICY).blend3(outer);
            [u[0] + s[0], u[1] + s[1], u[2] + s[2]]
        })
        .collect()
}

/// Displacement of `(id + u_outer) ∘ (id + u_inner)`:
/// `result(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(u_outer: &VectorField, u_inner: &VectorField) -> Result<VectorField> {
    let geom = *u_outer.geometry();
    geom.ensure_same(u_inner.geometry())?;
    let data = compose_raw(&geom, u_outer.vectors(), u_inner.vectors());
    Ok(VectorField::from_vec_unchecked(geom, data))
}

/// Displacement `u` of the flow `exp(v) = id + u` by scaling and squaring.
pub fn integrate_velocity(param: &VelocityParam) -> VectorField {
    Integrator::default().forward(param)
}

/// Scaling-and-squaring integrator that keeps every intermediate field so
/// that gradients can be pulled back to the velocity.
#[derive(Debug, Default, Clone)]
pub struct Integrator {
    geometry: Option<Geometry>,
    /// `u^0 ..= u^N`.
    cache: Vec<Vec<Vec3>>,
}

impl Integrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, param: &VelocityParam) -> VectorField {
        let geom = *param.velocity.geometry();
        let scale = 0.5f64.powi(param.n_steps as i32);
        let mut u: Vec<Vec3> =
            param.velocity.vectors().iter().map(|v| [v[0] * scale, v[1] * scale, v[2] * scale]).collect();
        self.cache.clear();
        for _ in 0..param.n_steps {
            let next = compose_raw(&geom, &u, &u);
            self.cache.push(std::mem::replace(&mut u, next));
        }
        self.cache.push(u.clone());
        self.geometry = Some(geom);
        VectorField::from_vec_unchecked(geom, u)
    }

    pub fn n_steps(&self) -> Option<u32> {
        self.geometry.map(|_| (self.cache.len() - 1) as u32)
    }

    /// Pulls a gradient with respect to the integrated displacement back to
    /// the velocity of the most recent [`Integrator::forward`] call.
    pub fn vjp(&self, grad_wrt_u: &VectorField) -> Result<VectorField> {
        let geom = self.geometry.ok_or(Error::MissingForwardCache)?;
        geom.ensure_same(grad_wrt_u.geometry())?;
        let n_steps = self.cache.len() - 1;
        let mut g: Vec<Vec3> = grad_wrt_u.vectors().to_vec();
        for u in self.cache[..n_steps].iter().rev() {
            g = squaring_adjoint(&geom, u, &g);
        }
        let scale = 0.5f64.powi(n_steps as i32);
        for v in g.iter_mut() {
            for c in v.iter_mut() {
                *c *= scale;
            }
        }
        Ok(VectorField::from_vec_unchecked(geom, g))
    }
}

/// Adjoint of `w(x) = u(x) + U(x + u(x))` where `U` interpolates `u`.
fn squaring_adjoint(geom: &Geometry, u: &[Vec3], gw: &[Vec3]) -> Vec<Vec3> {
    let mut gu = gw.to_vec();
    for (i, (ui, g)) in u.iter().zip(gw).enumerate() {
        let [x, y, z] = geom.coords(i);
        let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
        let cg = corners_grad(geom, p, SQUARING_POLICY);
        // coordinate path: d U_c(p) / d p_b
        let (_, jac) = cg.blend3_with_jacobian(u);
        for b in 0..3 {
            gu[i][b] += g[0] * jac[0][b] + g[1] * jac[1][b] + g[2] * jac[2][b];
        }
        // value path: scatter onto the interpolation corners
        for k in 0..8 {
            let w = cg.w[k];
            if w != 0.0 {
                let t = &mut gu[cg.idx[k]];
                t[0] += w * g[0];
                t[1] += w * g[1];
                t[2] += w * g[2];
            }
        }
    }
    gu
}

/// Convenience wrapper running the forward pass and its adjoint.
pub fn integrate_velocity_vjp(param: &VelocityParam, grad_wrt_u: &VectorField) -> Result<VectorField> {
    let mut integrator = Integrator::new();
    integrator.forward(param);
    integrator.vjp(grad_wrt_u)
}
