//! Masked elevation error metrics and the longitudinal error profile.

use serde::{Deserialize, Serialize};

use crate::elevation_grid::ElevationMap;
use crate::error::{Error, Result};

/// Errors above this many centimetres count as large.
pub const LARGE_ERROR_CM: f64 = 0.5;

/// Number of longitudinal segments in a [`DistanceProfile`].
pub const PROFILE_SEGMENTS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_err_cm: f64,
    pub rmse_cm: f64,
    /// Fraction of valid cells with error strictly above 0.5 cm.
    pub frac_gt_half: f64,
    pub n_valid: usize,
    /// Host wall-clock seconds per frame; zero when not measured.
    pub wall_s_per_frame: f64,
}

fn check_shapes(pred: &ElevationMap, gt: &ElevationMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Contract(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.ny, pred.nx, gt.ny, gt.nx
        )));
    }
    Ok(())
}

/// Errors over cells valid in `gt`; the prediction mask is ignored.
pub fn compute_metrics(pred: &ElevationMap, gt: &ElevationMap) -> Result<MetricReport> {
    compute_metrics_many(&[(pred, gt)])
}

/// Metrics pooled over the valid cells of several frames.
pub fn compute_metrics_many(pairs: &[(&ElevationMap, &ElevationMap)]) -> Result<MetricReport> {
    let (mut abs, mut sq, mut large, mut n) = (0.0, 0.0, 0usize, 0usize);
    for &(pred, gt) in pairs {
        check_shapes(pred, gt)?;
        for k in 0..gt.values.len() {
            if !gt.mask[k] {
                continue;
            }
            let e = (pred.values[k] - gt.values[k]).abs();
            abs += e;
            sq += e * e;
            large += usize::from(e > LARGE_ERROR_CM);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("ground truth has no valid cells".into()));
    }
    let nf = n as f64;
    Ok(MetricReport {
        abs_err_cm: abs / nf,
        rmse_cm: (sq / nf).sqrt(),
        frac_gt_half: large as f64 / nf,
        n_valid: n,
        wall_s_per_frame: 0.0,
    })
}

/// Mean absolute error per band of rows, nearest band first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    /// `[start, end)` row range of each segment.
    pub rows: Vec<(usize, usize)>,
    /// Mean |error| in cm; `None` when the segment has no valid cell.
    pub abs_err_cm: Vec<Option<f64>>,
    pub n_valid: Vec<usize>,
}

/// Row ranges of the 15 segments: front-aligned blocks of `ceil(ny / 15)`
/// rows, the last ones shorter or empty.
pub fn profile_segments(ny: usize) -> Vec<(usize, usize)> {
    let len = ny.div_ceil(PROFILE_SEGMENTS);
    (0..PROFILE_SEGMENTS)
        .map(|k| ((k * len).min(ny), ((k + 1) * len).min(ny)))
        .collect()
}

pub fn distance_profile(pred: &ElevationMap, gt: &ElevationMap) -> Result<DistanceProfile> {
    distance_profile_many(&[(pred, gt)])
}

/// Segment errors pooled over frames sharing one grid.
pub fn distance_profile_many(pairs: &[(&ElevationMap, &ElevationMap)]) -> Result<DistanceProfile> {
    let Some(&(_, first)) = pairs.first() else {
        return Err(Error::Evaluation("no frames to profile".into()));
    };
    let rows = profile_segments(first.ny);
    let mut sums = vec![0.0; rows.len()];
    let mut n_valid = vec![0usize; rows.len()];
    for &(pred, gt) in pairs {
        check_shapes(pred, gt)?;
        check_shapes(gt, first)?;
        for (s, &(r0, r1)) in rows.iter().enumerate() {
            for k in r0 * gt.nx..r1 * gt.nx {
                if gt.mask[k] {
                    sums[s] += (pred.values[k] - gt.values[k]).abs();
                    n_valid[s] += 1;
                }
            }
        }
    }
    let abs_err_cm = sums.iter().zip(&n_valid).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    Ok(DistanceProfile { rows, abs_err_cm, n_valid })
}

impl DistanceProfile {
    /// Valid-count-weighted mean of the segment errors.
    pub fn weighted_mean(&self) -> Option<f64> {
        let total: usize = self.n_valid.iter().sum();
        if total == 0 {
            return None;
        }
        let s: f64 = self
            .abs_err_cm
            .iter()
            .zip(&self.n_valid)
            .filter_map(|(e, &n)| e.map(|e| e * n as f64))
            .sum();
        Some(s / total as f64)
    }

    /// Inverse of [`DistanceProfile::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("segment,row_start,row_end,abs_err_cm,n_valid") {
            return Err(Error::Data("profile CSV header mismatch".into()));
        }
        let (mut rows, mut abs_err_cm, mut n_valid) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Data(format!("profile CSV line {}: `{line}`", n + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            rows.push((int(f[1])?, int(f[2])?));
            abs_err_cm.push(if f[3].is_empty() { None } else { Some(f[3].parse::<f64>().map_err(|_| bad())?) });
            n_valid.push(int(f[4])?);
        }
        Ok(Self { rows, abs_err_cm, n_valid })
    }

    /// CSV text with columns `segment, row_start, row_end, abs_err_cm, n_valid`;
    /// empty segments leave `abs_err_cm` blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,row_start,row_end,abs_err_cm,n_valid\n");
        for (k, ((&(r0, r1), e), n)) in self.rows.iter().zip(&self.abs_err_cm).zip(&self.n_valid).enumerate() {
            let e = e.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{k},{r0},{r1},{e},{n}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(ny: usize, nx: usize, values: Vec<f64>, mask: Vec<bool>) -> ElevationMap {
        ElevationMap { ny, nx, values, mask }
    }

    #[test]
    fn examples() {
        let gt = map(1, 3, vec![1.0, -2.0, 0.5], vec![true; 3]);
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!((r.abs_err_cm, r.rmse_cm, r.frac_gt_half), (0.0, 0.0, 0.0));
        let shifted = map(1, 3, gt.values.iter().map(|v| v + 1.0).collect(), vec![true; 3]);
        let r = compute_metrics(&shifted, &gt).unwrap();
        assert!((r.abs_err_cm - 1.0).abs() < 1e-15 && (r.rmse_cm - 1.0).abs() < 1e-15);
        assert_eq!(r.frac_gt_half, 1.0);
        let zero = map(1, 3, vec![0.0; 3], vec![true; 3]);
        let pred = map(1, 3, vec![0.2, -0.2, 1.0], vec![true; 3]);
        let r = compute_metrics(&pred, &zero).unwrap();
        assert!((r.abs_err_cm - 1.4 / 3.0).abs() < 1e-12);
        assert!((r.rmse_cm - (1.08f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.abs_err_cm - 0.4667).abs() < 1e-4 && (r.rmse_cm - 0.6).abs() < 1e-12);
        assert_eq!(r.frac_gt_half, 1.0 / 3.0);
    }

    #[test]
    fn errors_on_empty_or_mismatched_maps() {
        let empty = ElevationMap::empty(2, 2);
        assert!(matches!(compute_metrics(&empty, &empty), Err(Error::Evaluation(_))));
        let other = ElevationMap::empty(2, 3);
        assert!(matches!(compute_metrics(&empty, &other), Err(Error::Contract(_))));
    }

    #[test]
    fn default_grid_segments() {
        let rows = profile_segments(164);
        assert_eq!(rows.len(), 15);
        let counts: Vec<usize> = rows.iter().map(|(a, b)| b - a).collect();
        let mut expected = vec![11; 14];
        expected.push(10);
        assert_eq!(counts, expected);
        assert_eq!(rows[0], (0, 11));
    }

    #[test]
    fn profile_examples() {
        let gt = map(164, 2, vec![0.0; 328], vec![true; 328]);
        let pred = map(164, 2, vec![0.7; 328], vec![true; 328]);
        let p = distance_profile(&pred, &gt).unwrap();
        assert!(p.abs_err_cm.iter().all(|e| (e.unwrap() - 0.7).abs() < 1e-12));
        let mut near = vec![0.0; 328];
        near[..22].iter_mut().for_each(|v| *v = 1.5);
        let p = distance_profile(&map(164, 2, near, vec![true; 328]), &gt).unwrap();
        assert_eq!(p.abs_err_cm[0], Some(1.5));
        assert!(p.abs_err_cm[1..].iter().all(|e| *e == Some(0.0)));
    }

    #[test]
    fn short_grids_report_absent_segments() {
        let gt = map(64, 1, vec![0.0; 64], vec![true; 64]);
        let p = distance_profile(&gt, &gt).unwrap();
        assert_eq!(p.rows.len(), 15);
        assert_eq!(p.n_valid.iter().sum::<usize>(), 64);
        assert!(p.abs_err_cm.iter().any(Option::is_none));
        assert!(p.to_csv().lines().count() == 16);
        assert_eq!(DistanceProfile::from_csv(&p.to_csv()).unwrap(), p);
    }

    fn arb_pair() -> impl Strategy<Value = (ElevationMap, ElevationMap)> {
        (1usize..40, 1usize..6).prop_flat_map(|(ny, nx)| {
            let n = ny * nx;
            (
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(prop::bool::weighted(0.8), n),
            )
                .prop_map(move |(p, g, mut m)| {
                    m[0] = true;
                    (map(ny, nx, p, vec![true; n]), map(ny, nx, g, m))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rmse_dominates_abs_err((pred, gt) in arb_pair()) {
            let r = compute_metrics(&pred, &gt).unwrap();
            prop_assert!(r.rmse_cm >= r.abs_err_cm - 1e-12 && r.abs_err_cm >= 0.0);
            prop_assert!((0.0..=1.0).contains(&r.frac_gt_half));
        }
    }

    proptest! {
        #[test]
        fn masked_cells_never_contribute((pred, gt) in arb_pair(), junk in -1e3f64..1e3) {
            let mut perturbed = pred.clone();
            for k in 0..gt.values.len() {
                if !gt.mask[k] {
                    perturbed.values[k] = junk;
                }
            }
            prop_assert_eq!(compute_metrics(&pred, &gt).unwrap(), compute_metrics(&perturbed, &gt).unwrap());
            prop_assert_eq!(distance_profile(&pred, &gt).unwrap(), distance_profile(&perturbed, &gt).unwrap());
        }

        #[test]
        fn profile_mean_matches_global_abs_err((pred, gt) in arb_pair()) {
            let r = compute_metrics(&pred, &gt).unwrap();
            let p = distance_profile(&pred, &gt).unwrap();
            prop_assert_eq!(p.rows.len(), 15);
            prop_assert!((p.weighted_mean().unwrap() - r.abs_err_cm).abs() < 1e-9);
        }

        #[test]
        fn metrics_ignore_error_sign((pred, gt) in arb_pair()) {
            let mirrored = map(pred.ny, pred.nx,
                pred.values.iter().zip(&gt.values).map(|(p, g)| 2.0 * g - p).collect(), pred.mask.clone());
            let (a, b) = (compute_metrics(&pred, &gt).unwrap(), compute_metrics(&mirrored, &gt).unwrap());
            prop_assert!((a.abs_err_cm - b.abs_err_cm).abs() < 1e-9);
            prop_assert!((a.rmse_cm - b.rmse_cm).abs() < 1e-9);
        }
    }
}
