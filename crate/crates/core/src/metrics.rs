//! Registration quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{jacobian_determinant, norm, ScalarVolume, VectorField};
use crate::harp::SinCosTrio;

pub const DEFAULT_BINS: usize = 100;
/// Determinant errors are clipped to `[0, ERROR_CLIP]` before binning.
pub const ERROR_CLIP: f64 = 1.0;

/// Root mean squared difference over all six channels, optionally weighted
/// per voxel by `mask`.
pub fn rmse(fixed: &SinCosTrio, warped: &SinCosTrio, mask: Option<&ScalarVolume>) -> Result<f64> {
    let g = *fixed.geometry();
    g.ensure_same(warped.geometry())?;
    if let Some(m) = mask {
        g.ensure_same(m.geometry())?;
    }
    let weight = |i: usize| mask.map_or(1.0, |m| m.values()[i]);
    let total_weight: f64 = (0..g.len()).map(weight).sum::<f64>() * 6.0;
    if total_weight <= 0.0 {
        return Err(Error::ZeroWeight("rmse mask"));
    }
    let mut acc = 0.0;
    for (a, b) in fixed.channels().zip(warped.channels()) {
        for (i, (x, y)) in a.values().iter().zip(b.values()).enumerate() {
            acc += weight(i) * (x - y) * (x - y);
        }
    }
    Ok((acc / total_weight).sqrt())
}

/// Weighted histogram on uniform bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Histogram {
    /// Cumulative distribution at each right bin edge.
    pub fn cdf(&self) -> Vec<f64> {
        let total: f64 = self.counts.iter().sum();
        let mut acc = 0.0;
        self.counts
            .iter()
            .map(|c| {
                acc += c;
                acc / total
            })
            .collect()
    }
}

/// Area under the weighted CDF of `|d - 1|` computed from a determinant map.
pub fn det_auc_from_determinant(det: &ScalarVolume, weights: &ScalarVolume, n_bins: usize) -> Result<(f64, Histogram)> {
    det.geometry().ensure_same(weights.geometry())?;
    if n_bins < 2 {
        return Err(Error::invalid("n_bins", "at least 2 bins are required"));
    }
    let mut counts = vec![0.0; n_bins];
    for (d, w) in det.values().iter().zip(weights.values()) {
        let e = (d - 1.0).abs().min(ERROR_CLIP) / ERROR_CLIP;
        let bin = ((e * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += w;
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight("det_auc weights"));
    }
    let edges = (0..=n_bins).map(|k| ERROR_CLIP * k as f64 / n_bins as f64).collect();
    let hist = Histogram { edges, counts };
    let width = 1.0 / n_bins as f64;
    let auc = hist.cdf().iter().map(|c| c * width).sum::<f64>().clamp(0.0, 1.0);
    Ok((auc, hist))
}

pub fn det_auc(disp: &VectorField, i_mag: &ScalarVolume, n_bins: usize) -> Result<(f64, Histogram)> {
    det_auc_from_determinant(&jacobian_determinant(disp)?, i_mag, n_bins)
}

/// Percentage of (weighted) voxels whose signed determinant is negative.
pub fn negdet_fraction(disp: &VectorField, mask: Option<&ScalarVolume>) -> Result<f64> {
    let det = jacobian_determinant(disp)?;
    if let Some(m) = mask {
        det.geometry().ensure_same(m.geometry())?;
    }
    let weight = |i: usize| mask.map_or(1.0, |m| m.values()[i]);
    let mut neg = 0.0;
    let mut total = 0.0;
    for (i, d) in det.values().iter().enumerate() {
        let w = weight(i);
        total += w;
        if *d < 0.0 {
            neg += w;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeight("negdet mask"));
    }
    Ok(100.0 * neg / total)
}

/// Weighted mean and weighted median of per-voxel endpoint distances.
///
/// The median is the smallest distance whose cumulative weight reaches half
/// of the total.
pub fn endpoint_error(est: &VectorField, truth: &VectorField, mask: &ScalarVolume) -> Result<(f64, f64)> {
    est.geometry().ensure_same(truth.geometry())?;
    est.geometry().ensure_same(mask.geometry())?;
    let mut pairs: Vec<(f64, f64)> = est
        .vectors()
        .iter()
        .zip(truth.vectors())
        .zip(mask.values())
        .filter(|(_, &w)| w > 0.0)
        .map(|((a, b), &w)| (norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]), w))
        .collect();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeight("endpoint mask"));
    }
    let mean = pairs.iter().map(|(e, w)| e * w).sum::<f64>() / total;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut median = pairs.last().map_or(0.0, |p| p.0);
    for (e, w) in &pairs {
        acc += w;
        if acc >= 0.5 * total {
            median = *e;
            break;
        }
    }
    Ok((mean, median))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_global: f64,
    /// Weighted by the fused HARP magnitude.
    pub rmse_masked: f64,
    pub det_auc: f64,
    pub negdet_percent: f64,
    pub endpoint_error_mean: Option<f64>,
    pub endpoint_error_median: Option<f64>,
    pub n_bins: usize,
    pub error_clip: f64,
    pub histogram: Histogram,
}

/// Ground truth available for synthetic data.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub displacement: &'a VectorField,
    pub mask: &'a ScalarVolume,
}

/// Scores a displacement that maps `moving` onto `fixed`.
pub fn evaluate(
    fixed: &SinCosTrio,
    warped: &SinCosTrio,
    disp: &VectorField,
    i_mag: &ScalarVolume,
    truth: Option<Truth<'_>>,
    n_bins: usize,
) -> Result<MetricsReport> {
    let (det_auc, histogram) = det_auc(disp, i_mag, n_bins)?;
    let (mean, median) = match truth {
        Some(t) => {
            let (a, b) = endpoint_error(disp, t.displacement, t.mask)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    Ok(MetricsReport {
        rmse_global: rmse(fixed, warped, None)?,
        rmse_masked: rmse(fixed, warped, Some(i_mag))?,
        det_auc,
        negdet_percent: negdet_fraction(disp, None)?,
        endpoint_error_mean: mean,
        endpoint_error_median: median,
        n_bins,
        error_clip: ERROR_CLIP,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trio_const(g: Geometry, values: [f64; 6]) -> SinCosTrio {
        let v = values.map(|x| ScalarVolume::constant(g, x));
        let [a, b, c, d, e, f] = v;
        SinCosTrio::new([a, c, e], [b, d, f]).unwrap()
    }

    #[test]
    fn rmse_fixtures() {
        let g = Geometry::cube(4).unwrap();
        let a = trio_const(g, [0.0; 6]);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let b = trio_const(g, [0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((rmse(&a, &b, None).unwrap() - (0.25f64 / 6.0).sqrt()).abs() < 1e-15);
        assert!((rmse(&a, &b, None).unwrap() - 0.2041).abs() < 1e-4);
        assert!(matches!(rmse(&a, &b, Some(&ScalarVolume::zeros(g))), Err(Error::ZeroWeight(_))));
    }

    fn scalar_field(g: Geometry, f: impl Fn([usize; 3]) -> f64 + Sync) -> VectorField {
        VectorField::from_fn(g, |c| [f(c), 0.0, 0.0])
    }

    #[test]
    fn det_auc_fixtures() {
        let g = Geometry::cube(5).unwrap();
        let ones = ScalarVolume::constant(g, 1.0);
        let (auc, h) = det_auc(&VectorField::zeros(g), &ones, 100).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(h.edges.len(), 101);

        let det2 = ScalarVolume::constant(g, 2.0);
        for n in [2, 10, 100] {
            let (auc, _) = det_auc_from_determinant(&det2, &ones, n).unwrap();
            assert_eq!(auc, 1.0 / n as f64);
        }
        // stretch along x doubles the determinant
        let (auc, _) = det_auc(&scalar_field(g, |c| c[0] as f64), &ones, 100).unwrap();
        assert_eq!(auc, 0.01);

        let half = ScalarVolume::from_fn(g, |c| if c[0] < 2 { 1.0 } else { 2.0 });
        let w = ScalarVolume::from_fn(g, |c| if c[0] < 2 { 3.0 } else { 2.0 });
        for n in [2, 8, 100] {
            let (auc, _) = det_auc_from_determinant(&half, &w, n).unwrap();
            assert!((auc - (0.5 + 0.5 / n as f64)).abs() < 1e-15, "{n}: {auc}");
        }
        assert!(det_auc(&VectorField::zeros(g), &ScalarVolume::zeros(g), 100).is_err());
        assert!(det_auc(&VectorField::zeros(g), &ones, 1).is_err());
    }

    #[test]
    fn negdet_fixtures() {
        let g = Geometry::cube(5).unwrap();
        assert_eq!(negdet_fraction(&VectorField::zeros(g), None).unwrap(), 0.0);
        let reflect = scalar_field(g, |c| -2.0 * c[0] as f64);
        assert_eq!(negdet_fraction(&reflect, None).unwrap(), 100.0);
        assert!(negdet_fraction(&reflect, Some(&ScalarVolume::zeros(g))).is_err());
    }

    #[test]
    fn endpoint_fixtures() {
        let g = Geometry::cube(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = VectorField::from_fn(g, |c| [c[0] as f64 * 0.1, c[2] as f64, -(c[1] as f64)]);
        let mask = ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        assert_eq!(endpoint_error(&truth, &truth, &mask).unwrap(), (0.0, 0.0));
        let shifted = truth.add(&VectorField::constant(g, [1.0, 0.0, 0.0])).unwrap();
        let (m, med) = endpoint_error(&shifted, &truth, &mask).unwrap();
        assert!((m - 1.0).abs() < 1e-15 && (med - 1.0).abs() < 1e-15);
        assert!(endpoint_error(&shifted, &truth, &ScalarVolume::zeros(g)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn auc_monotone_under_error_shrinking(
            dets in proptest::collection::vec(-1.0f64..3.0, 27),
            weights in proptest::collection::vec(0.01f64..1.0, 27),
            alpha in 0.0f64..1.0,
        ) {
            let g = Geometry::cube(3).unwrap();
            let w = ScalarVolume::new(g, weights).unwrap();
            let d = ScalarVolume::new(g, dets.clone()).unwrap();
            let shrunk = ScalarVolume::new(g, dets.iter().map(|x| 1.0 + alpha * (x - 1.0)).collect()).unwrap();
            let (a, _) = det_auc_from_determinant(&d, &w, 100).unwrap();
            let (b, _) = det_auc_from_determinant(&shrunk, &w, 100).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn rmse_symmetric(seed in 0u64..1000) {
            let g = Geometry::cube(3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = || {
                let v = [0; 6].map(|_| ScalarVolume::new(g, (0..27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
                let [a, b, c, d, e, f] = v;
                SinCosTrio::new([a, c, e], [b, d, f]).unwrap()
            };
            let (x, y) = (t(), t());
            prop_assert_eq!(rmse(&x, &y, None).unwrap(), rmse(&y, &x, None).unwrap());
            prop_assert_eq!(rmse(&x, &x, None).unwrap(), 0.0);
        }

        #[test]
        fn negdet_invariant_to_weight_scaling(seed in 0u64..1000, s in 0.1f64..10.0) {
            let g = Geometry::cube(4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = VectorField::new(g, (0..g.len()).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap();
            let m = ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
            let a = negdet_fraction(&u, Some(&m)).unwrap();
            let b = negdet_fraction(&u, Some(&m.map(|x| x * s))).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
        }
    }
}
