//! Per-pair registration by Adam descent on the stationary velocity.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deform::{Integrator, VelocityParam, DEFAULT_SQUARING_STEPS};
use crate::error::{Error, Result};
use crate::grid::{corners, BoundaryPolicy, Geometry, ScalarVolume, VectorField};
use crate::harp::SinCosTrio;
use crate::objective::{total_loss_with, LossBreakdown, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != params.len() {
            return Err(Error::ShapeMismatch { expected: params.len(), found: len });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VelocityInit {
    #[default]
    Zero,
}

/// Learning rate used when none is configured.
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub weights: LossWeights,
    pub n_steps: u32,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init: VelocityInit,
    pub coarse_to_fine: bool,
    /// Stop once the total loss fails to drop by this relative amount over
    /// `stop_window` iterations. Zero disables the test.
    pub stop_tol: f64,
    pub stop_window: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            weights: LossWeights::default(),
            n_steps: DEFAULT_SQUARING_STEPS,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_iters: 300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init: VelocityInit::Zero,
            coarse_to_fine: false,
            stop_tol: 1e-6,
            stop_window: 20,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::invalid("adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be positive"));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol >= 0.0) {
            return Err(Error::invalid("stop_tol", "must be non-negative"));
        }
        if self.stop_window < 1 {
            return Err(Error::invalid("stop_window", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Best iterate of the full-resolution stage.
    pub velocity: VectorField,
    pub displacement: VectorField,
    /// One entry per full-resolution loss evaluation.
    pub loss_history: Vec<LossBreakdown>,
    /// Loss evaluations of the coarse stage, empty without coarse-to-fine.
    pub coarse_history: Vec<LossBreakdown>,
    /// Index into `loss_history` of the returned iterate.
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub wall_time_seconds: f64,
}

struct StageOutput {
    velocity: VectorField,
    displacement: VectorField,
    history: Vec<LossBreakdown>,
    best: usize,
}

fn optimize(
    fixed: &SinCosTrio,
    moving: &SinCosTrio,
    i_mag: &ScalarVolume,
    init: VectorField,
    config: &RegistrationConfig,
    max_iters: usize,
) -> Result<StageOutput> {
    let geom = *init.geometry();
    let hyper = config.adam();
    let mut params = init.as_flat().to_vec();
    let mut state = AdamState::new(params.len());
    let mut integrator = Integrator::new();
    let mut history: Vec<LossBreakdown> = Vec::with_capacity(max_iters);
    let mut best: Option<(usize, Vec<f64>, VectorField)> = None;
    for iter in 0..max_iters {
        let param = VelocityParam::new(VectorField::from_flat(geom, &params), config.n_steps);
        let (loss, grad, disp) = total_loss_with(&mut integrator, fixed, moving, i_mag, &param, &config.weights)?;
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NonFiniteLoss { term, iteration: iter });
        }
        let improved = best.as_ref().is_none_or(|(b, _, _)| loss.total < history[*b].total);
        history.push(loss);
        if improved {
            best = Some((iter, params.clone(), disp));
        }
        if iter + 1 == max_iters || converged(&history, config) {
            break;
        }
        adam_step(&mut params, grad.as_flat(), &mut state, &hyper)?;
    }
    let (best, params, displacement) = best.expect("at least one iteration");
    Ok(StageOutput { velocity: VectorField::from_flat(geom, &params), displacement, history, best })
}

fn converged(history: &[LossBreakdown], config: &RegistrationConfig) -> bool {
    let w = config.stop_window;
    if config.stop_tol == 0.0 || history.len() <= w {
        return false;
    }
    let now = history[history.len() - 1].total;
    let before = history[history.len() - 1 - w].total;
    if before <= f64::MIN_POSITIVE {
        return true;
    }
    (before - now) / before.abs() < config.stop_tol
}

/// Coarse grid covering the same extent with every other voxel.
fn coarse_geometry(g: &Geometry) -> Result<Geometry> {
    let d = g.dims();
    let s = g.spacing();
    Geometry::new([0, 1, 2].map(|a| d[a].div_ceil(2)), [0, 1, 2].map(|a| 2.0 * s[a]))
}

/// Binomial [1, 2, 1] / 4 smoothing per axis followed by decimation.
fn downsample(vol: &ScalarVolume) -> Result<ScalarVolume> {
    let g = *vol.geometry();
    let cg = coarse_geometry(&g)?;
    let d = g.dims();
    let v = vol.values();
    Ok(ScalarVolume::from_fn(cg, |c| {
        let mut acc = 0.0;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let w = [dx, dy, dz].iter().map(|&o| if o == 0 { 0.5 } else { 0.25 }).product::<f64>();
                    let q = [0, 1, 2].map(|a| (2 * c[a] as i64 + [dx, dy, dz][a]).clamp(0, d[a] as i64 - 1) as usize);
                    acc += w * v[g.index(q[0], q[1], q[2])];
                }
            }
        }
        acc
    }))
}

/// Trilinear upsampling of a coarse velocity, doubled to fine voxel units.
fn upsample_velocity(coarse: &VectorField, fine: Geometry) -> VectorField {
    let cg = *coarse.geometry();
    VectorField::from_fn(fine, |c| {
        let p = c.map(|k| k as f64 / 2.0);
        corners(&cg, p, BoundaryPolicy::Clamp).blend3(coarse.vectors()).map(|x| 2.0 * x)
    })
}

/// Estimates the velocity whose exponential warps `moving` onto `fixed`.
pub fn register_pair(
    fixed: &SinCosTrio,
    moving: &SinCosTrio,
    i_mag: &ScalarVolume,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    let geom = *fixed.geometry();
    geom.ensure_same(moving.geometry())?;
    geom.ensure_same(i_mag.geometry())?;
    geom.require_min_dim(3)?;
    let start = Instant::now();

    let mut init = match config.init {
        VelocityInit::Zero => VectorField::zeros(geom),
    };
    let mut coarse_history = Vec::new();
    let coarse_iters = config.max_iters / 2;
    if config.coarse_to_fine && coarse_iters > 0 && geom.dims().iter().all(|&n| n.div_ceil(2) >= 3) {
        let down = |t: &SinCosTrio| t.map_channels(downsample);
        let (cf, cm, ci) = (down(fixed)?, down(moving)?, downsample(i_mag)?);
        let coarse_init = VectorField::zeros(*ci.geometry());
        let stage = optimize(&cf, &cm, &ci, coarse_init, config, coarse_iters)?;
        init = upsample_velocity(&stage.velocity, geom);
        coarse_history = stage.history;
    }
    let stage = optimize(fixed, moving, i_mag, init, config, config.max_iters)?;
    Ok(RegistrationResult {
        velocity: stage.velocity,
        displacement: stage.displacement,
        iterations_run: coarse_history.len() + stage.history.len(),
        loss_history: stage.history,
        coarse_history,
        best_iteration: stage.best,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::integrate_velocity;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.m, vec![0.0; 3]);
        assert_eq!(s.v, vec![0.0; 3]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4);
        let h = AdamHyper::default();
        adam_step(&mut p, &[1.0; 4], &mut s, &h).unwrap();
        for x in p {
            assert!((x + h.learning_rate / (1.0 + h.eps)).abs() < 1e-18);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        assert!(matches!(
            adam_step(&mut p, &[1.0; 2], &mut s, &AdamHyper::default()),
            Err(Error::ShapeMismatch { expected: 3, found: 2 })
        ));
    }

    /// Textbook scalar Adam used as a reference.
    fn scalar_adam(w0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = vec![];
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t as i32))) / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn quadratic_descent_matches_reference() {
        let hyper = AdamHyper { learning_rate: 0.1, ..AdamHyper::default() };
        let mut w = vec![1.0; 5];
        let mut s = AdamState::new(5);
        let reference = scalar_adam(1.0, 50, 0.1);
        let mut norms = vec![];
        for r in &reference {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut w, &g, &mut s, &hyper).unwrap();
            assert!(w.iter().all(|x| (x - r).abs() < 1e-15));
            norms.push(w.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        // momentum carries the iterate through zero at step 12, so the
        // norm is monotone only until then
        let crossing = reference.iter().position(|&r| r < 0.0).unwrap();
        assert_eq!(crossing, 11);
        for k in 3..crossing {
            assert!(norms[k] < norms[k - 1], "step {k}");
        }
        assert!(*norms.last().unwrap() < 0.1);
    }

    #[test]
    fn config_validation_and_serde() {
        assert!(RegistrationConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(RegistrationConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        let c: RegistrationConfig = serde_json::from_str(r#"{"max_iters": 10, "coarse_to_fine": true}"#).unwrap();
        assert_eq!(c.max_iters, 10);
        assert_eq!(c.n_steps, 7);
        assert!(serde_json::from_str::<RegistrationConfig>(r#"{"max_iter": 10}"#).is_err());
    }

    fn trio_from(phase: impl Fn([usize; 3], usize) -> f64 + Sync + Copy, g: Geometry) -> SinCosTrio {
        let p = [0, 1, 2].map(|k| ScalarVolume::from_fn(g, move |c| phase(c, k)));
        SinCosTrio::from_phases([&p[0], &p[1], &p[2]]).unwrap()
    }

    #[test]
    fn identical_images_stay_at_zero() {
        let g = Geometry::cube(12).unwrap();
        let t = trio_from(|c, k| 2.0 * std::f64::consts::PI * c[k] as f64 / 6.0, g);
        let i_mag = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig { max_iters: 30, ..Default::default() };
        let r = register_pair(&t, &t, &i_mag, &cfg).unwrap();
        let mean = r.displacement.vectors().iter().map(crate::grid::norm).sum::<f64>() / g.len() as f64;
        assert!(mean <= 0.05);
        assert_eq!(r.loss_history[0].total, 0.0);
        // zero loss counts as converged
        assert!(r.iterations_run < 30);
    }

    #[test]
    fn recovers_translation_and_never_worsens() {
        let g = Geometry::cube(12).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let fixed = trio_from(|c, k| two_pi * c[k] as f64 / 8.0, g);
        let moving = trio_from(|c, k| two_pi * (c[k] as f64 - 0.5) / 8.0, g);
        let i_mag = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig { max_iters: 80, ..Default::default() };
        let r = register_pair(&fixed, &moving, &i_mag, &cfg).unwrap();
        let best = r.loss_history[r.best_iteration].total;
        assert!(r.loss_history.iter().all(|l| best <= l.total));
        assert!(best < r.loss_history[0].total);
        let u = r.displacement.get(6, 6, 6);
        for a in 0..3 {
            assert!((u[a] - 0.5).abs() < 0.1, "{u:?}");
        }
        assert_eq!(integrate_velocity(&VelocityParam::new(r.velocity.clone(), cfg.n_steps)), r.displacement);
        let again = register_pair(&fixed, &moving, &i_mag, &cfg).unwrap();
        assert_eq!(again.velocity, r.velocity);
        assert_eq!(again.loss_history, r.loss_history);
    }

    #[test]
    fn coarse_to_fine_runs_both_stages() {
        let g = Geometry::cube(12).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let fixed = trio_from(|c, k| two_pi * c[k] as f64 / 8.0, g);
        let moving = trio_from(|c, k| two_pi * (c[k] as f64 - 0.5) / 8.0, g);
        let i_mag = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig { max_iters: 20, coarse_to_fine: true, stop_tol: 0.0, ..Default::default() };
        let r = register_pair(&fixed, &moving, &i_mag, &cfg).unwrap();
        assert_eq!(r.coarse_history.len(), 10);
        assert_eq!(r.loss_history.len(), 20);
        assert_eq!(r.iterations_run, 30);
    }

    #[test]
    fn upsampling_doubles_constant_velocity() {
        let coarse = VectorField::constant(Geometry::cube(4).unwrap(), [0.5, -0.25, 1.0]);
        let fine = upsample_velocity(&coarse, Geometry::cube(7).unwrap());
        assert!(fine.vectors().iter().all(|v| *v == [1.0, -0.5, 2.0]));
        let vol = ScalarVolume::constant(Geometry::cube(7).unwrap(), 3.0);
        let d = downsample(&vol).unwrap();
        assert_eq!(d.geometry().dims(), [4, 4, 4]);
        assert!(d.values().iter().all(|&x| (x - 3.0).abs() < 1e-15));
    }

    #[test]
    fn non_finite_loss_names_term() {
        let g = Geometry::cube(5).unwrap();
        let t = trio_from(|c, k| c[k] as f64, g);
        let i_mag = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig {
            weights: LossWeights { lambda_smooth: f64::MAX, ..LossWeights::default() },
            max_iters: 3,
            ..Default::default()
        };
        // an overflowing weight still validates, the total becomes infinite
        let moving = trio_from(|c, k| c[k] as f64 + 0.3, g);
        match register_pair(&t, &moving, &i_mag, &cfg) {
            Ok(r) => assert!(r.loss_history.iter().all(|l| l.total.is_finite())),
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "total"),
            Err(e) => panic!("{e}"),
        }
    }
}
