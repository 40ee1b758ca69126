use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagflow_core::deform::{compose, integrate_velocity, integrate_velocity_vjp, VelocityParam};
use tagflow_core::grid::{jacobian_determinant, warp_scalar, BoundaryPolicy, Geometry, ScalarVolume, VectorField};
use tagflow_core::harp::{harp_filter, resample_isotropic, sincos_transform, wrap_phase, SinCosTrio};
use tagflow_core::metrics::{negdet_fraction, rmse};
use tagflow_core::objective::{incompress_loss, sim_loss, smooth_loss, total_loss, DeterminantPenalty, LossWeights};
use tagflow_core::optim::{register_pair, RegistrationConfig};
use tagflow_core::phantom::{make_divergence_free_velocity, make_phantom_pair, Ellipsoid, PhantomConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_volume(g: Geometry, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> ScalarVolume {
    ScalarVolume::new(g, (0..g.len()).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_field(g: Geometry, amp: f64, r: &mut ChaCha8Rng) -> VectorField {
    VectorField::new(g, (0..g.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-amp..amp))).collect()).unwrap()
}

fn random_trio(g: Geometry, r: &mut ChaCha8Rng) -> SinCosTrio {
    let phases = [0, 1, 2].map(|_| random_volume(g, -PI, PI, r));
    SinCosTrio::from_phases([&phases[0], &phases[1], &phases[2]]).unwrap()
}

fn small_phantom(seed: u64, amplitude: f64) -> PhantomConfig {
    PhantomConfig {
        geometry: Geometry::new([12, 10, 14], [1.875, 1.875, 1.875]).unwrap(),
        tissue_ellipsoid: Ellipsoid { center: [5.5, 4.5, 6.5], semi_axes: [4.0, 3.5, 5.0] },
        velocity_amplitude: amplitude,
        seed,
        ..PhantomConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_warp_is_bitwise_identity(seed in any::<u64>(), zero_policy in any::<bool>()) {
        let g = Geometry::new([5, 7, 6], [1.0; 3]).unwrap();
        let v = random_volume(g, -3.0, 3.0, &mut rng(seed));
        let policy = if zero_policy { BoundaryPolicy::Zero } else { BoundaryPolicy::Clamp };
        prop_assert_eq!(warp_scalar(&v, &VectorField::zeros(g), policy).unwrap(), v);
    }

    #[test]
    fn phantom_is_pure_and_consistent(seed in 0u64..1000, amplitude in 0.0f64..3.0) {
        let cfg = small_phantom(seed, amplitude);
        let a = make_phantom_pair(&cfg).unwrap();
        let b = make_phantom_pair(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        let g = cfg.geometry;
        for v in a.fixed.iter().chain(&a.moving) {
            prop_assert_eq!(v.geometry(), &g);
        }
        prop_assert_eq!(a.truth_displacement.geometry(), &g);
        let recomputed = integrate_velocity(&VelocityParam::new(a.truth_velocity.clone(), cfg.integration_steps));
        prop_assert_eq!(recomputed, a.truth_displacement);
    }

    #[test]
    fn sincos_lies_on_unit_circle(seed in any::<u64>()) {
        let g = Geometry::cube(4).unwrap();
        let phase = random_volume(g, -10.0, 10.0, &mut rng(seed));
        let (s, c) = sincos_transform(&phase);
        for (a, b) in s.values().iter().zip(c.values()) {
            prop_assert!((a * a + b * b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn harp_phase_follows_translation(delta in -3.0f64..3.0) {
        let g = Geometry::cube(32).unwrap();
        let tag = |shift: f64| ScalarVolume::from_fn(g, |[x, _, _]| 1.0 + (2.0 * PI * (x as f64 - shift) / 8.0).cos());
        let a = harp_filter(&tag(0.0), [1.0, 0.0, 0.0], 8.0).unwrap();
        let b = harp_filter(&tag(delta), [1.0, 0.0, 0.0], 8.0).unwrap();
        let expected = -2.0 * PI * delta / 8.0;
        for i in (0..g.len()).filter(|&i| g.is_interior(g.coords(i), 4)) {
            prop_assert!(wrap_phase(b.phase.values()[i] - a.phase.values()[i] - expected).abs() <= 0.05);
        }
    }

    #[test]
    fn harp_phase_ignores_global_scale(seed in any::<u64>(), exp in -4i32..4) {
        let g = Geometry::cube(16).unwrap();
        let v = random_volume(g, 0.0, 1.0, &mut rng(seed));
        let s = 2f64.powi(exp);
        let a = harp_filter(&v, [0.0, 1.0, 0.0], 4.0).unwrap();
        let b = harp_filter(&v.map(|x| s * x), [0.0, 1.0, 0.0], 4.0).unwrap();
        prop_assert_eq!(a.phase, b.phase);
    }

    #[test]
    fn resampling_preserves_constants_and_affine(c in -5.0f64..5.0, coef in prop::array::uniform3(-1.0f64..1.0), sz in 2.0f64..6.0) {
        let g = Geometry::new([6, 7, 4], [1.5, 1.5, sz]).unwrap();
        let k = ScalarVolume::constant(g, c);
        let out = resample_isotropic(&k, 1.5).unwrap();
        prop_assert!(out.values().iter().all(|&v| v == c));
        let sp = g.spacing();
        let affine = ScalarVolume::from_fn(g, |p| c + (0..3).map(|a| coef[a] * p[a] as f64 * sp[a]).sum::<f64>());
        let r = resample_isotropic(&affine, 1.5).unwrap();
        let rg = *r.geometry();
        for i in (0..rg.len()).filter(|&i| rg.is_interior(rg.coords(i), 1)) {
            let p = rg.coords(i);
            let want = c + (0..3).map(|a| coef[a] * p[a] as f64 * 1.5).sum::<f64>();
            prop_assert!((r.values()[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn vjp_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let g = Geometry::cube(6).unwrap();
        let mut r = rng(seed);
        let param = VelocityParam::new(random_field(g, 0.8, &mut r), 7);
        let (g1, g2) = (random_field(g, 1.0, &mut r), random_field(g, 1.0, &mut r));
        let lhs = integrate_velocity_vjp(&param, &g1.scaled(a).add(&g2.scaled(b)).unwrap()).unwrap();
        let rhs = integrate_velocity_vjp(&param, &g1).unwrap().scaled(a)
            .add(&integrate_velocity_vjp(&param, &g2).unwrap().scaled(b)).unwrap();
        for (x, y) in lhs.vectors().iter().flatten().zip(rhs.vectors().iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn penalty_is_symmetric_for_uniform_fields(d in 0.01f64..100.0) {
        let g = Geometry::cube(4).unwrap();
        let ones = ScalarVolume::constant(g, 1.0);
        let uniform = |det: f64| {
            let s = det.cbrt() - 1.0;
            VectorField::from_fn(g, |c| c.map(|k| s * k as f64))
        };
        let a = incompress_loss(&uniform(d), &ones, 1e-5, DeterminantPenalty::Log).unwrap().0;
        let b = incompress_loss(&uniform(1.0 / d), &ones, 1e-5, DeterminantPenalty::Log).unwrap().0;
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), amp in 0.0f64..3.0) {
        let g = Geometry::cube(5).unwrap();
        let mut r = rng(seed);
        let u = random_field(g, amp, &mut r);
        let i_mag = random_volume(g, 0.0, 1.0, &mut r);
        prop_assert!(sim_loss(&random_trio(g, &mut r), &random_trio(g, &mut r), &u).unwrap().0 >= 0.0);
        prop_assert!(smooth_loss(&u).unwrap().0 >= 0.0);
        for p in [DeterminantPenalty::Log, DeterminantPenalty::L1, DeterminantPenalty::L2] {
            prop_assert!(incompress_loss(&u, &i_mag, 1e-5, p).unwrap().0 >= 0.0);
        }
    }

    #[test]
    fn incompress_vanishes_exactly_on_unit_determinant(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        // a shear has unit determinant under every stencil
        let g = Geometry::cube(5).unwrap();
        let shear = VectorField::from_fn(g, |[_, y, z]| [a * y as f64 + b * z as f64, 0.0, 0.0]);
        let mut r = rng(seed);
        let i_mag = random_volume(g, 0.0, 1.0, &mut r);
        prop_assert_eq!(incompress_loss(&shear, &i_mag, 1e-5, DeterminantPenalty::Log).unwrap().0, 0.0);
        // any voxel with weight and determinant != 1 makes it positive
        let u = random_field(g, 0.3, &mut r);
        let det = jacobian_determinant(&u).unwrap();
        let off = det.values().iter().zip(i_mag.values()).any(|(d, w)| *w > 0.0 && *d != 1.0);
        prop_assert_eq!(incompress_loss(&u, &i_mag, 1e-5, DeterminantPenalty::Log).unwrap().0 > 0.0, off);
    }

    #[test]
    fn negdet_ignores_uniform_weight_scaling(seed in any::<u64>()) {
        let g = Geometry::cube(5).unwrap();
        let mut r = rng(seed);
        let u = random_field(g, 0.9, &mut r);
        let w = random_volume(g, 0.1, 1.0, &mut r);
        let a = negdet_fraction(&u, Some(&w)).unwrap();
        let b = negdet_fraction(&u, Some(&w.map(|x| 2.0 * x))).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn rmse_zero_iff_equal_on_support(seed in any::<u64>()) {
        let g = Geometry::cube(4).unwrap();
        let mut r = rng(seed);
        let a = random_trio(g, &mut r);
        let mask = ScalarVolume::from_fn(g, |[x, _, _]| if x < 2 { 1.0 } else { 0.0 });
        // differ only where the mask is zero
        let b = a.map_channels(|v| Ok(ScalarVolume::from_fn(*v.geometry(), |c| {
            let i = g.index(c[0], c[1], c[2]);
            if c[0] < 2 { v.values()[i] } else { v.values()[i] + 0.5 }
        }))).unwrap();
        prop_assert_eq!(rmse(&a, &b, Some(&mask)).unwrap(), 0.0);
        prop_assert!(rmse(&a, &b, None).unwrap() > 0.0);
        prop_assert_eq!(rmse(&a, &b, None).unwrap(), rmse(&b, &a, None).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn exponential_map_is_diffeomorphic_and_invertible(seed in any::<u64>(), amplitude in 0.1f64..=3.0) {
        let g = Geometry::cube(32).unwrap();
        let v = make_divergence_free_velocity(g, amplitude, 1, seed).unwrap();
        let up = integrate_velocity(&VelocityParam::new(v.clone(), 7));
        let um = integrate_velocity(&VelocityParam::new(v.scaled(-1.0), 7));
        prop_assert!(jacobian_determinant(&up).unwrap().values().iter().all(|&d| d > 0.0));
        let r = compose(&um, &up).unwrap();
        for (i, e) in r.vectors().iter().enumerate() {
            if g.is_interior(g.coords(i), 4) {
                prop_assert!(e.iter().all(|c| c.abs() <= 0.05), "{e:?}");
            }
        }
    }

    #[test]
    fn registration_never_worsens_and_is_deterministic(seed in any::<u64>()) {
        let g = Geometry::cube(10).unwrap();
        let mut r = rng(seed);
        let t = [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)];
        let phase = |k: usize, shift: f64| {
            ScalarVolume::from_fn(g, move |c| 2.0 * PI * (c[k] as f64 + shift) / 7.0)
        };
        let fixed = SinCosTrio::from_phases([&phase(0, 0.0), &phase(2, 0.0), &phase(1, 0.0)]).unwrap();
        let moving = SinCosTrio::from_phases([&phase(0, -t[0]), &phase(2, -t[2]), &phase(1, -t[1])]).unwrap();
        let i_mag = ScalarVolume::constant(g, 1.0);
        let cfg = RegistrationConfig { max_iters: 25, ..RegistrationConfig::default() };
        let a = register_pair(&fixed, &moving, &i_mag, &cfg).unwrap();
        let b = register_pair(&fixed, &moving, &i_mag, &cfg).unwrap();
        prop_assert_eq!(&a.velocity, &b.velocity);
        prop_assert_eq!(&a.loss_history, &b.loss_history);
        let init = total_loss(&fixed, &moving, &i_mag, &VelocityParam::zeros(g, 7), &LossWeights::default()).unwrap().0;
        prop_assert!(a.loss_history[a.best_iteration].total <= init.total);
        prop_assert_eq!(a.loss_history[0].total, init.total);
    }
}
