//! Certified two-sided bounds on the diameter of small balls.
//!
//! Both certificates follow the same pattern: flow a unit field through `q`
//! for time `r - delta` in each direction to get `q1, q2` in the ball, then
//! bound `d(q1, q2)` from below with an exact (or constant) 1-form. Curves
//! leaving the calibrated box are excluded by requiring `r < rbar`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_calibration_with, verify_calibration, CalibrationField, CalibrationOptions};
use crate::distance::{calibration_potential, distance_upper, UpperOptions};
use crate::error::{Error, Result};
use crate::hamiltonian::FlowStatus;
use crate::linalg;
use crate::quasicalib::{build_quasicalibration_with, quasicalibrated_flow, QuasiCalibration, QuasiOptions};
use crate::sampling::{box_sample, Halton};
use crate::structures::{ChartPoint, DomainBox, Frame, Regularity, SRStructure};

const SAFETY: f64 = 1.05;

/// `dist(q, boundary of w) / (2 C)` with `C` a padded bound on the chart speed
/// of unit controls over `w`; curves from `q` of length at most `2 rbar` stay in `w`.
pub fn safe_radius(s: &SRStructure, q: &[f64], w: &DomainBox) -> Result<f64> {
    if q.len() != s.n || w.dim() != s.n {
        return Err(Error::invalid("dimension mismatch"));
    }
    let gap = w.distance_to_boundary(q);
    if !(gap > 0.0) || !w.contains(q) {
        return Err(Error::DegenerateBox);
    }
    let c = SAFETY
        * box_sample(w, 256, 0)
            .iter()
            .map(|x| linalg::operator_norm(&s.frame_matrix(x)))
            .fold(0.0, f64::max);
    if !(c > 0.0) {
        return Err(Error::ZeroFrame);
    }
    Ok(gap / (2.0 * c))
}

/// Itemised error allowance of a certified lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ToleranceBudget {
    /// Path dependence of the numerical potential.
    pub path: f64,
    /// Quadrature error estimate.
    pub quadrature: f64,
    /// Endpoint integration error (step-halving estimate).
    pub integration: f64,
}

impl ToleranceBudget {
    pub fn total(&self) -> f64 {
        self.path + self.quadrature + self.integration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallDiameterReport {
    pub structure: String,
    pub regime: Regularity,
    pub q: ChartPoint,
    pub r: f64,
    pub delta: f64,
    pub q1: ChartPoint,
    pub q2: ChartPoint,
    /// Raw bound before the budget is subtracted.
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub budget: ToleranceBudget,
    /// `(lower_bound - budget) / (2 r)`.
    pub ratio: f64,
    /// Calibration margin (C11).
    pub margin: Option<f64>,
    /// Quasi-calibration slacks (C0).
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub safe_radius: f64,
    /// Optimizer upper bound on `d(q1, q2)` when cross-checked.
    pub cross_check: Option<f64>,
}

impl BallDiameterReport {
    pub fn certified_lower(&self) -> f64 {
        self.lower_bound - self.budget.total()
    }
}

/// Endpoints of the quasi-calibrated flow through `q` at times `-a` and `a`.
fn quasicalibrated_segment(
    qc: &QuasiCalibration,
    s: &SRStructure,
    q: &[f64],
    a: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (path, status) = quasicalibrated_flow(qc, s, q, a, steps)?;
    if status != FlowStatus::Completed {
        return Err(Error::outside(q));
    }
    let first = path.points[0].0.clone();
    let last = path.points[path.points.len() - 1].0.clone();
    Ok((first, last))
}

fn check_radii(r: f64, delta: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) || !(delta > 0.0) || delta >= r {
        return Err(Error::invalid(format!("need 0 < delta < r, got delta={delta}, r={r}")));
    }
    Ok(())
}

/// Certificate for smooth frames from a calibration with verified margin `margin`.
pub fn ball_diameter_certificate_c11(
    s: &SRStructure,
    cf: &CalibrationField,
    margin: f64,
    q: &[f64],
    r: f64,
    delta: f64,
) -> Result<BallDiameterReport> {
    check_radii(r, delta)?;
    if s.regularity != Regularity::C11 {
        return Err(Error::RegularityMismatch {
            structure: s.name.clone(),
        });
    }
    s.check_point(q)?;
    let rbar = safe_radius(s, q, &cf.w_box)?;
    if r >= rbar.min(cf.eps()) {
        return Err(Error::invalid(format!(
            "r = {r} is not below the safe radius {rbar} and the calibration time {}",
            cf.eps()
        )));
    }
    let pre = cf.invert(q)?;
    let a = r - delta;
    let q1 = cf.flow_point(pre.t - a, &pre.xprime)?.q.0;
    let q2 = cf.flow_point(pre.t + a, &pre.xprime)?.q.0;
    let phi1 = calibration_potential(cf, &q1)?;
    let phi2 = calibration_potential(cf, &q2)?;
    let sc = margin.max(1.0);
    let lower_bound = (phi2.value - phi1.value) / sc;
    let budget = ToleranceBudget {
        path: (phi1.path_error + phi2.path_error) / sc,
        quadrature: (phi1.quadrature_error + phi2.quadrature_error) / sc,
        // Newton residual of the base point moves both endpoints along the same leaf.
        integration: 2.0 * pre.residual / sc,
    };
    Ok(BallDiameterReport {
        structure: s.name.clone(),
        regime: Regularity::C11,
        q: ChartPoint(q.to_vec()),
        r,
        delta,
        q1: ChartPoint(q1),
        q2: ChartPoint(q2),
        lower_bound,
        upper_bound: 2.0 * r,
        ratio: (lower_bound - budget.total()) / (2.0 * r),
        budget,
        margin: Some(margin),
        eps1: None,
        eps2: None,
        safe_radius: rbar,
        cross_check: None,
    })
}

/// Certificate for continuous frames from a quasi-calibration.
pub fn ball_diameter_certificate_c0(
    s: &SRStructure,
    qc: &QuasiCalibration,
    q: &[f64],
    r: f64,
    delta: f64,
) -> Result<BallDiameterReport> {
    check_radii(r, delta)?;
    s.check_point(q)?;
    if !qc.u.contains(q) {
        return Err(Error::outside(q));
    }
    let rbar = safe_radius(s, q, &qc.u)?;
    if r >= rbar {
        return Err(Error::invalid(format!("r = {r} is not below the safe radius {rbar}")));
    }
    let a = r - delta;
    let steps = 64;
    let (q1, q2) = quasicalibrated_segment(qc, s, q, a, steps)?;
    let (f1, f2) = quasicalibrated_segment(qc, s, q, a, 2 * steps)?;
    let pair = |x: &[f64], y: &[f64]| -> f64 { linalg::dot(&qc.omega, x) - linalg::dot(&qc.omega, y) };
    let sc = 1.0 + qc.eps1;
    let lower_bound = pair(&q2, &q1) / sc;
    let wn = linalg::norm(&qc.omega);
    let budget = ToleranceBudget {
        integration: wn * (linalg::dist(&q1, &f1) + linalg::dist(&q2, &f2)) / sc,
        ..ToleranceBudget::default()
    };
    Ok(BallDiameterReport {
        structure: s.name.clone(),
        regime: Regularity::C0,
        q: ChartPoint(q.to_vec()),
        r,
        delta,
        q1: ChartPoint(q1),
        q2: ChartPoint(q2),
        lower_bound,
        upper_bound: 2.0 * r,
        ratio: (lower_bound - budget.total()) / (2.0 * r),
        budget,
        margin: None,
        eps1: Some(qc.eps1),
        eps2: Some(qc.eps2),
        safe_radius: rbar,
        cross_check: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// `delta = delta_fraction * r` unless `delta` is set.
    pub delta_fraction: f64,
    /// Fixed `delta` for every radius.
    pub delta: Option<f64>,
    /// Extra base points drawn in `V`, half the calibrated box.
    pub cloud: usize,
    pub seed: u64,
    pub verify_samples: usize,
    pub target_eps: f64,
    pub calibration: CalibrationOptions,
    pub quasi_samples: usize,
    /// Compare each lower bound with an optimizer upper bound on `d(q1, q2)`.
    pub cross_check: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            delta_fraction: 1e-3,
            delta: None,
            cloud: 5,
            seed: 0,
            verify_samples: 2000,
            target_eps: 0.05,
            calibration: CalibrationOptions::default(),
            quasi_samples: 2048,
            cross_check: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub structure: String,
    pub regime: Regularity,
    pub q: ChartPoint,
    pub r: f64,
    pub delta: f64,
    pub lower: f64,
    pub upper: f64,
    pub ratio: f64,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterSweep {
    pub structure: String,
    pub regime: Regularity,
    pub base: ChartPoint,
    pub cloud: Vec<ChartPoint>,
    pub radii: Vec<f64>,
    pub margin: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<BallDiameterReport>,
}

impl DiameterSweep {
    pub const CSV_HEADER: &'static str = "structure,regime,q,r,delta,lower,upper,ratio,budget";

    /// `q` is written as semicolon-separated coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for row in &self.rows {
            let q: Vec<String> = row.q.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:.17e},{:e},{:.17e},{:e}\n",
                row.structure,
                row.regime,
                q.join(";"),
                row.r,
                row.delta,
                row.lower,
                row.upper,
                row.ratio,
                row.budget
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First row (in order) with a ratio below `target`.
    pub fn first_below(&self, target: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| !(r.ratio >= target))
    }
}

/// Rows for every radius at `q` and at `opts.cloud` nearby points, all from
/// one construction built at `q`.
pub fn diameter_sweep(
    s: &SRStructure,
    q: &[f64],
    radii: &[f64],
    regime: Regularity,
    opts: &SweepOptions,
) -> Result<DiameterSweep> {
    if radii.is_empty() || radii.windows(2).any(|w| !(w[1] < w[0])) || !(radii[radii.len() - 1] > 0.0) {
        return Err(Error::invalid("radii must be positive and strictly decreasing"));
    }
    if !(opts.delta_fraction > 0.0 && opts.delta_fraction < 1.0) {
        return Err(Error::invalid("delta_fraction must lie in (0, 1)"));
    }
    if let Some(d) = opts.delta {
        check_radii(radii[radii.len() - 1], d)?;
    }
    if regime == Regularity::C11 && s.regularity != Regularity::C11 {
        return Err(Error::RegularityMismatch {
            structure: s.name.clone(),
        });
    }
    s.check_point(q)?;
    enum Built {
        Smooth(Box<CalibrationField>, f64),
        Quasi(Box<QuasiCalibration>),
    }
    let built = match regime {
        Regularity::C11 => {
            let cf = build_calibration_with(s, q, &opts.calibration)?;
            let margin = verify_calibration(&cf, opts.verify_samples, opts.seed).margin;
            Built::Smooth(Box::new(cf), margin)
        }
        Regularity::C0 => {
            let qo = QuasiOptions {
                sample_count: opts.quasi_samples,
                seed: opts.seed,
            };
            Built::Quasi(Box::new(build_quasicalibration_with(s, q, opts.target_eps, &qo)?))
        }
    };
    let w = match &built {
        Built::Smooth(cf, _) => cf.w_box.clone(),
        Built::Quasi(qc) => qc.u.clone(),
    };
    let v = w.scaled(0.5);
    let halton = Halton::new(s.n, opts.seed);
    let cloud: Vec<ChartPoint> = (0..opts.cloud as u64)
        .map(|i| ChartPoint(halton.in_box(i + 1, &v)))
        .collect();
    let mut points = vec![ChartPoint(q.to_vec())];
    points.extend(cloud.iter().cloned());
    let jobs: Vec<(&ChartPoint, f64)> = points.iter().flat_map(|p| radii.iter().map(move |&r| (p, r))).collect();
    let reports: Vec<BallDiameterReport> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let delta = opts.delta.unwrap_or(opts.delta_fraction * r);
            let mut rep = match &built {
                Built::Smooth(cf, margin) => ball_diameter_certificate_c11(s, cf, *margin, p, r, delta)?,
                Built::Quasi(qc) => ball_diameter_certificate_c0(s, qc, p, r, delta)?,
            };
            if opts.cross_check {
                let uo = UpperOptions {
                    segments: 16,
                    restarts: 2,
                    shooting_samples: 0,
                    seed: opts.seed,
                    ..UpperOptions::default()
                };
                rep.cross_check = distance_upper(s, &rep.q1, &rep.q2, &uo)?.upper;
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    let rows = reports
        .iter()
        .map(|rep| SweepRow {
            structure: rep.structure.clone(),
            regime: rep.regime,
            q: rep.q.clone(),
            r: rep.r,
            delta: rep.delta,
            lower: rep.lower_bound,
            upper: rep.upper_bound,
            ratio: rep.ratio,
            budget: rep.budget.total(),
        })
        .collect();
    let (margin, eps1, eps2) = match &built {
        Built::Smooth(_, m) => (Some(*m), None, None),
        Built::Quasi(qc) => (None, Some(qc.eps1), Some(qc.eps2)),
    };
    Ok(DiameterSweep {
        structure: s.name.clone(),
        regime,
        base: ChartPoint(q.to_vec()),
        cloud,
        radii: radii.to_vec(),
        margin,
        eps1,
        eps2,
        rows,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quasicalib::build_quasicalibration;
    use crate::structures::builtin;

    #[test]
    fn safe_radius_examples() {
        let e2 = builtin("euclidean2").unwrap();
        let w = DomainBox::centered(&[0.0, 0.0], 1.0);
        let rbar = safe_radius(&e2, &[0.0, 0.0], &w).unwrap();
        assert!((rbar - 1.0 / 2.1).abs() < 1e-12);
        let half = safe_radius(&e2, &[0.0, 0.0], &w.scaled(0.5)).unwrap();
        assert!((half - 0.5 * rbar).abs() < 1e-12);
        assert!(matches!(safe_radius(&e2, &[1.0, 0.0], &w), Err(Error::DegenerateBox)));

        // Heisenberg on [-1,1]^3: the norm is largest at corners, sqrt(1 + (x^2 + y^2)/4).
        let h = builtin("heisenberg").unwrap();
        let w = DomainBox::cube(3, 1.0);
        let rbar = safe_radius(&h, &[0.0; 3], &w).unwrap();
        assert!((rbar - 1.0 / (2.0 * 1.05 * 1.5f64.sqrt())).abs() < 1e-12, "{rbar}");
    }

    #[test]
    fn euclidean_c11_certificate() {
        let e2 = builtin("euclidean2").unwrap();
        let cf = build_calibration_with(&e2, &[0.0, 0.0], &CalibrationOptions::default()).unwrap();
        let rep = ball_diameter_certificate_c11(&e2, &cf, 1.0 + 1e-6, &[0.0, 0.0], 0.1, 1e-4).unwrap();
        assert!(rep.lower_bound >= 2.0 * (0.1 - 1e-4) * (1.0 - 1e-6));
        assert_eq!(rep.upper_bound, 0.2);
        assert!(rep.ratio >= 0.998);
        assert!(ball_diameter_certificate_c11(&e2, &cf, 1.0, &[0.0, 0.0], 0.1, 0.1).is_err());
    }

    #[test]
    fn heisenberg_c11_certificate_and_delta_monotone() {
        let h = builtin("heisenberg").unwrap();
        let cf = build_calibration_with(&h, &[0.0; 3], &CalibrationOptions::default()).unwrap();
        let margin = verify_calibration(&cf, 500, 0).margin;
        let mut last = f64::INFINITY;
        for delta in [1e-4, 1e-3, 1e-2] {
            let rep = ball_diameter_certificate_c11(&h, &cf, margin, &[0.0; 3], 0.1, delta).unwrap();
            assert!(rep.ratio >= 1.0 - delta / 0.1 - 1e-6, "{delta}: {}", rep.ratio);
            assert!(rep.lower_bound <= rep.upper_bound);
            assert!(rep.lower_bound <= last);
            last = rep.lower_bound;
        }
    }

    #[test]
    fn c11_certificate_refuses_c0() {
        let g = builtin("grushin").unwrap();
        let e2 = builtin("euclidean2").unwrap();
        let cf = build_calibration_with(&e2, &[0.0, 0.0], &CalibrationOptions::default()).unwrap();
        assert!(matches!(
            ball_diameter_certificate_c11(&g, &cf, 1.0, &[0.0, 0.0], 0.1, 1e-4),
            Err(Error::RegularityMismatch { .. })
        ));
    }

    #[test]
    fn c0_certificates() {
        let e2 = builtin("euclidean2").unwrap().with_regularity(Regularity::C0);
        let qc = build_quasicalibration(&e2, &[0.0, 0.0], 0.05).unwrap();
        let rep = ball_diameter_certificate_c0(&e2, &qc, &[0.0, 0.0], 0.1, 1e-4).unwrap();
        assert!((rep.lower_bound - 2.0 * (0.1 - 1e-4)).abs() < 1e-12);

        let g = builtin("grushin").unwrap();
        let qc = build_quasicalibration(&g, &[0.0, 0.0], 0.05).unwrap();
        let rep = ball_diameter_certificate_c0(&g, &qc, &[0.0, 0.0], 0.05, 1e-4).unwrap();
        let bound = (1.0 - 0.05f64.powi(2)) * (1.0 - 1e-4 / 0.05) / 1.05;
        assert!(rep.ratio >= bound, "{}", rep.ratio);

        // On the duplicated line the flow has chart speed sqrt 2 and d = |dx| / sqrt 2.
        let d = builtin("duplicated_line").unwrap();
        let qc = build_quasicalibration(&d, &[0.0], 0.05).unwrap();
        let rep = ball_diameter_certificate_c0(&d, &qc, &[0.0], 0.05, 5e-5).unwrap();
        let oracle = (rep.q2[0] - rep.q1[0]).abs() / 2f64.sqrt();
        assert!(rep.certified_lower() <= oracle + 1e-12);
        assert!((rep.lower_bound - oracle).abs() < 1e-12);
        assert!(rep.ratio >= 0.998);
    }

    #[test]
    fn euclidean_sweep_and_csv() {
        let e2 = builtin("euclidean2").unwrap();
        let opts = SweepOptions {
            verify_samples: 200,
            cross_check: true,
            ..SweepOptions::default()
        };
        let sw = diameter_sweep(&e2, &[0.0, 0.0], &[0.2, 0.1, 0.05], Regularity::C11, &opts).unwrap();
        assert_eq!(sw.rows.len(), 18);
        assert!(sw.first_below(0.998).is_none());
        for rep in &sw.reports {
            assert!(rep.certified_lower() <= rep.cross_check.unwrap() + 1e-6);
        }
        let csv = sw.to_csv();
        assert!(csv.starts_with("structure,regime,q,r,delta,lower,upper,ratio,budget\n"));
        assert_eq!(csv.lines().count(), 19);
        assert!(csv.lines().nth(1).unwrap().starts_with("euclidean2,C11,0e0;0e0,2e-1,"));
        let again = diameter_sweep(&e2, &[0.0, 0.0], &[0.2, 0.1, 0.05], Regularity::C11, &opts).unwrap();
        assert_eq!(again.to_csv(), csv);
        assert!(diameter_sweep(&e2, &[0.0, 0.0], &[0.1, 0.2], Regularity::C11, &opts).is_err());
    }

    #[test]
    fn flat_nonbracket_sweep() {
        let f = builtin("flat_nonbracket").unwrap();
        let opts = SweepOptions {
            verify_samples: 200,
            ..SweepOptions::default()
        };
        let sw = diameter_sweep(&f, &[0.0; 3], &[0.1, 0.05], Regularity::C11, &opts).unwrap();
        assert!(sw.first_below(0.99).is_none());
    }

    #[test]
    fn heisenberg_off_center_uniformity() {
        let h = builtin("heisenberg").unwrap();
        let opts = SweepOptions {
            verify_samples: 500,
            cross_check: true,
            ..SweepOptions::default()
        };
        let sw = diameter_sweep(&h, &[1.0, 2.0, 0.0], &[0.025, 0.0125, 0.00625], Regularity::C11, &opts).unwrap();
        assert!(sw.first_below(0.98).is_none());
        for (k, r) in sw.radii.iter().enumerate() {
            let base = &sw.rows[k];
            assert_eq!(base.r, *r);
            for row in sw.rows.iter().filter(|row| row.r == *r) {
                assert!((row.ratio - base.ratio).abs() <= 2.0 * (row.budget + base.budget) / (2.0 * r) + 1e-12);
            }
        }
        for rep in &sw.reports {
            assert!(rep.certified_lower() <= rep.cross_check.unwrap() + 1e-6);
        }
    }
}
