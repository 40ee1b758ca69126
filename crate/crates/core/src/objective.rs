//! Registration objective: sinusoidal-image similarity, displacement
//! smoothness and the Jacobian-determinant incompressibility penalty, each
//! with an analytic gradient with respect to the displacement, and the
//! weighted total pulled back to the velocity through the integrator.
//!
//! Every term is normalized by the voxel count so the default weights do
//! not depend on the volume size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{Integrator, VelocityParam};
use crate::error::{Error, Result};
use crate::grid::{
    cofactor3, corners_grad, det3, diff_axis, diff_axis_adjoint, displacement_jacobian, identity_plus, BoundaryPolicy,
    ScalarVolume, Vec3, VectorField,
};
use crate::harp::SinCosTrio;

/// Penalty applied to the determinant inside tissue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeterminantPenalty {
    /// `|log max(d, eps)|`, symmetric in expansion and contraction.
    #[default]
    Log,
    /// `|d - 1|`.
    L1,
    /// `(d - 1)^2`.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    pub beta_incompress: f64,
    pub epsilon: f64,
    pub penalty: DeterminantPenalty,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_smooth: 0.01, beta_incompress: 0.4, epsilon: 1e-5, penalty: DeterminantPenalty::Log }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth.is_finite() && self.lambda_smooth >= 0.0) {
            return Err(Error::invalid("lambda_smooth", "must be finite and non-negative"));
        }
        if !(self.beta_incompress.is_finite() && self.beta_incompress >= 0.0) {
            return Err(Error::invalid("beta_incompress", "must be finite and non-negative"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub smooth: f64,
    pub incompress: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("sim", self.sim), ("smooth", self.smooth), ("incompress", self.incompress), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Policy used to sample the moving images during warping.
pub const WARP_POLICY: BoundaryPolicy = BoundaryPolicy::Clamp;

/// Sum over the six channels of the mean squared difference between the
/// fixed image and the moving image warped by `disp`.
pub fn sim_loss(fixed: &SinCosTrio, moving: &SinCosTrio, disp: &VectorField) -> Result<(f64, VectorField)> {
    let geom = *disp.geometry();
    geom.ensure_same(fixed.geometry())?;
    geom.ensure_same(moving.geometry())?;
    let f: Vec<&[f64]> = fixed.channels().map(|v| v.values()).collect();
    let m: Vec<&[f64]> = moving.channels().map(|v| v.values()).collect();
    let n = geom.len() as f64;
    let per_voxel: Vec<(f64, Vec3)> = disp
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let [x, y, z] = geom.coords(i);
            let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            let cg = corners_grad(&geom, p, WARP_POLICY);
            let mut loss = 0.0;
            let mut g = [0.0; 3];
            for (fc, mc) in f.iter().zip(&m) {
                let (val, grad) = cg.blend_with_gradient(mc);
                let r = val - fc[i];
                loss += r * r;
                for b in 0..3 {
                    g[b] += 2.0 * r * grad[b] / n;
                }
            }
            (loss, g)
        })
        .collect();
    let loss = per_voxel.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grad = per_voxel.into_iter().map(|(_, g)| g).collect();
    Ok((loss, VectorField::from_vec_unchecked(geom, grad)))
}

/// Mean squared Frobenius norm of the displacement gradient.
pub fn smooth_loss(u: &VectorField) -> Result<(f64, VectorField)> {
    let geom = *u.geometry();
    geom.require_min_dim(3)?;
    let n = geom.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; geom.len()];
    for axis in 0..3 {
        let d = diff_axis(u.vectors(), &geom, axis);
        loss += d.iter().flatten().map(|c| c * c).sum::<f64>();
        let scaled: Vec<Vec3> = d.iter().map(|v| v.map(|c| 2.0 * c / n)).collect();
        diff_axis_adjoint(&scaled, &geom, axis, &mut grad);
    }
    Ok((loss / n, VectorField::from_vec_unchecked(geom, grad)))
}

/// Per-voxel incompressibility penalty and its derivative with respect to
/// the signed determinant `d`. Kinks take the zero subgradient.
pub fn determinant_penalty(d: f64, i_mag: f64, epsilon: f64, penalty: DeterminantPenalty) -> (f64, f64) {
    let (t1, dt1) = match penalty {
        DeterminantPenalty::Log => {
            if d > epsilon {
                let l = d.ln();
                let s = if l > 0.0 {
                    1.0
                } else if l < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (l.abs(), s / d)
            } else {
                (epsilon.ln().abs(), 0.0)
            }
        }
        DeterminantPenalty::L1 => {
            let e = d - 1.0;
            (
                e.abs(),
                if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                },
            )
        }
        DeterminantPenalty::L2 => ((d - 1.0).powi(2), 2.0 * (d - 1.0)),
    };
    let (t2, dt2) = if d < 0.0 { (-d, -1.0) } else { (0.0, 0.0) };
    (i_mag * t1 + t2, i_mag * dt1 + dt2)
}

/// Magnitude-weighted determinant penalty plus the negative-determinant
/// term, both averaged over voxels.
pub fn incompress_loss(
    disp: &VectorField,
    i_mag: &ScalarVolume,
    epsilon: f64,
    penalty: DeterminantPenalty,
) -> Result<(f64, VectorField)> {
    let geom = *disp.geometry();
    geom.ensure_same(i_mag.geometry())?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    let jac = displacement_jacobian(disp)?;
    let n = geom.len() as f64;
    let per_voxel: Vec<(f64, [Vec3; 3])> = jac
        .matrices()
        .par_iter()
        .zip(i_mag.values().par_iter())
        .map(|(j, &w)| {
            let f = identity_plus(j);
            let (val, dval) = determinant_penalty(det3(&f), w, epsilon, penalty);
            let cof = cofactor3(&f);
            // column b of dL/dJ, as a vector over components a
            let cols = [0, 1, 2].map(|b| [0, 1, 2].map(|a| dval * cof[a][b] / n));
            (val, cols)
        })
        .collect();
    let loss = per_voxel.iter().map(|(v, _)| v).sum::<f64>() / n;
    let mut grad = vec![[0.0; 3]; geom.len()];
    for axis in 0..3 {
        let col: Vec<Vec3> = per_voxel.iter().map(|(_, c)| c[axis]).collect();
        diff_axis_adjoint(&col, &geom, axis, &mut grad);
    }
    Ok((loss, VectorField::from_vec_unchecked(geom, grad)))
}

/// Loss terms and combined displacement gradient for a given displacement.
pub fn displacement_loss(
    fixed: &SinCosTrio,
    moving: &SinCosTrio,
    i_mag: &ScalarVolume,
    disp: &VectorField,
    weights: &LossWeights,
) -> Result<(LossBreakdown, VectorField)> {
    let (sim, g_sim) = sim_loss(fixed, moving, disp)?;
    let (smooth, g_smooth) = smooth_loss(disp)?;
    let (incompress, g_inc) = if weights.beta_incompress == 0.0 {
        // still reported, but its gradient is not needed
        (incompress_loss(disp, i_mag, weights.epsilon, weights.penalty)?.0, VectorField::zeros(*disp.geometry()))
    } else {
        incompress_loss(disp, i_mag, weights.epsilon, weights.penalty)?
    };
    let total = sim + weights.lambda_smooth * smooth + weights.beta_incompress * incompress;
    let grad: Vec<Vec3> = g_sim
        .vectors()
        .iter()
        .zip(g_smooth.vectors())
        .zip(g_inc.vectors())
        .map(|((a, b), c)| [0, 1, 2].map(|k| a[k] + weights.lambda_smooth * b[k] + weights.beta_incompress * c[k]))
        .collect();
    Ok((LossBreakdown { sim, smooth, incompress, total }, VectorField::from_vec_unchecked(*disp.geometry(), grad)))
}

/// Integrates the velocity, evaluates the weighted objective on the
/// displacement and returns the gradient with respect to the velocity.
pub fn total_loss(
    fixed: &SinCosTrio,
    moving: &SinCosTrio,
    i_mag: &ScalarVolume,
    param: &VelocityParam,
    weights: &LossWeights,
) -> Result<(LossBreakdown, VectorField)> {
    let mut integrator = Integrator::new();
    let (breakdown, grad, _) = total_loss_with(&mut integrator, fixed, moving, i_mag, param, weights)?;
    Ok((breakdown, grad))
}

/// [`total_loss`] reusing `integrator`, also returning the displacement.
pub fn total_loss_with(
    integrator: &mut Integrator,
    fixed: &SinCosTrio,
    moving: &SinCosTrio,
    i_mag: &ScalarVolume,
    param: &VelocityParam,
    weights: &LossWeights,
) -> Result<(LossBreakdown, VectorField, VectorField)> {
    weights.validate()?;
    let disp = integrator.forward(param);
    let (breakdown, g_disp) = displacement_loss(fixed, moving, i_mag, &disp, weights)?;
    let g_vel = integrator.vjp(&g_disp)?;
    Ok((breakdown, g_vel, disp))
}
