//! Quasi-calibrations of merely continuous frames.
//!
//! At `p` pick a field `X_i(p) != 0`, its minimal-norm control `hbar`, the
//! covector `lambda = hbar / |hbar|` on controls (zero on `hbar^perp`) and the
//! constant 1-form `omega` with `omega o A(p) = lambda`. On a small enough box
//! `U` around `p`:
//!
//! * `|<omega, sum h_j X_j(q)>| <= (1 + eps1) |h|`,
//! * `<omega, sum (hbar_j / |hbar|) X_j(q)> >= 1 - eps2`.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::AdmissibleCurvePath;
use crate::error::{Error, Result};
use crate::hamiltonian::FlowStatus;
use crate::linalg;
use crate::ode::Rk4;
use crate::sampling::{box_sample, stream_rng};
use crate::structures::{ChartPoint, DomainBox, Frame, SRStructure, StructureSource};

/// Residual tolerance (relative to `1 + |v|`) for horizontality.
pub const HORIZONTAL_TOL: f64 = 1e-8;
const MAX_ROUNDS: usize = 40;
const FILE_FORMAT: &str = "cclab-quasicalibration/1";

/// Least-norm `h` with `A(p) h = v`.
pub fn minimal_norm_preimage(s: &SRStructure, p: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    s.check_point(p)?;
    if v.len() != s.n {
        return Err(Error::invalid(format!(
            "vector has length {}, expected {}",
            v.len(),
            s.n
        )));
    }
    let a = s.frame_matrix(p);
    let (h, residual) = linalg::least_norm_solve(&a, &DVector::from_column_slice(v));
    if !(residual <= HORIZONTAL_TOL * (1.0 + linalg::norm(v))) {
        return Err(Error::NotHorizontal { residual });
    }
    Ok(h.as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiCalibration {
    pub structure: StructureSource,
    pub p: ChartPoint,
    /// One-based index of the pivot field.
    pub pivot: usize,
    pub hbar: Vec<f64>,
    /// `hbar / |hbar|`, the covector on controls.
    pub lambda: Vec<f64>,
    pub omega: Vec<f64>,
    pub u: DomainBox,
    pub eps1: f64,
    pub eps2: f64,
    pub target_eps: f64,
    pub seed: u64,
    pub sample_count: usize,
    /// Bisection rounds spent on `u`.
    pub rounds: usize,
    /// `max |<lambda, k>| / |k|` over sampled null-space vectors `k` of `A(p)`.
    pub null_defect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuasiOptions {
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for QuasiOptions {
    fn default() -> Self {
        QuasiOptions {
            sample_count: 2048,
            seed: 0,
        }
    }
}

/// Largest `|A(q)^T omega| - 1` and `1 - <omega, A(q) hbar / |hbar|>` at `q`.
fn slacks_at(s: &SRStructure, omega: &[f64], unit: &[f64], q: &[f64]) -> (f64, f64) {
    let a = s.frame_matrix(q);
    let g: Vec<f64> = (0..s.m).map(|j| linalg::dot(a.column(j).as_slice(), omega)).collect();
    (linalg::norm(&g) - 1.0, 1.0 - linalg::dot(&g, unit))
}

impl QuasiCalibration {
    pub fn unit_control(&self) -> Vec<f64> {
        let nh = linalg::norm(&self.hbar);
        self.hbar.iter().map(|v| v / nh).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        if self.structure == StructureSource::Derived {
            return Err(Error::Schema(
                "quasi-calibrations of derived structures cannot be exported".into(),
            ));
        }
        let mut v = serde_json::to_value(self)?;
        v["format"] = FILE_FORMAT.into();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Parses an exported quasi-calibration and re-creates its structure.
    pub fn from_json(text: &str) -> Result<(Self, SRStructure)> {
        let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        match v.as_object_mut().and_then(|o| o.remove("format")) {
            Some(serde_json::Value::String(f)) if f == FILE_FORMAT => {}
            _ => return Err(Error::Schema("missing or unsupported format tag".into())),
        }
        let qc: QuasiCalibration = serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))?;
        let s = qc.structure.instantiate()?;
        if qc.p.len() != s.n
            || qc.omega.len() != s.n
            || qc.hbar.len() != s.m
            || qc.u.dim() != s.n
            || qc.pivot == 0
            || qc.pivot > s.m
        {
            return Err(Error::Schema("quasi-calibration does not match its structure".into()));
        }
        Ok((qc, s))
    }
}

/// Measures `(eps1, eps2)` over `sample_count` points of `u_test` (centre and corners first).
pub fn measure_quasicalibration_bounds(
    qc: &QuasiCalibration,
    s: &SRStructure,
    u_test: &DomainBox,
    sample_count: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if u_test.dim() != s.n || !s.domain.contains_box(u_test) {
        return Err(Error::invalid("test box must lie inside the structure domain"));
    }
    let unit = qc.unit_control();
    let pts = box_sample(u_test, sample_count.max(1), seed);
    let vals: Vec<(f64, f64)> = pts.par_iter().map(|q| slacks_at(s, &qc.omega, &unit, q)).collect();
    let (e1, e2) = vals
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(*x), b.max(*y)));
    Ok((e1, e2))
}

/// The box of half-width `rho` around `p`, clipped to the domain.
fn neighbourhood(s: &SRStructure, p: &[f64], rho: f64) -> DomainBox {
    DomainBox::centered(p, rho)
        .intersect(&s.domain)
        .expect("p lies in the domain")
}

pub fn build_quasicalibration(s: &SRStructure, p: &[f64], target_eps: f64) -> Result<QuasiCalibration> {
    build_quasicalibration_with(s, p, target_eps, &QuasiOptions::default())
}

/// Pivot, `hbar`, `omega`, then a geometric bisection on the half-width of `U`
/// until `eps1 <= target` and `eps2 <= target^2`.
pub fn build_quasicalibration_with(
    s: &SRStructure,
    p: &[f64],
    target_eps: f64,
    opts: &QuasiOptions,
) -> Result<QuasiCalibration> {
    if !(target_eps > 0.0 && target_eps < 1.0) {
        return Err(Error::invalid("target_eps must lie in (0, 1)"));
    }
    s.check_point(p)?;
    let a = s.frame_matrix(p);
    let mut pivot = 0;
    let mut best = 0.0;
    for j in 0..s.m {
        let nj = a.column(j).norm();
        if nj > best {
            best = nj;
            pivot = j;
        }
    }
    if !(best > 0.0) {
        return Err(Error::ZeroFrame);
    }
    let hbar = minimal_norm_preimage(s, p, a.column(pivot).as_slice())?;
    let nh = linalg::norm(&hbar);
    let lambda: Vec<f64> = hbar.iter().map(|v| v / nh).collect();
    // omega^T = lambda^T A^+, i.e. omega = (A^+)^T lambda.
    let pinv = linalg::pseudo_inverse(&a, linalg::PINV_REL_TOL);
    let omega = (pinv.transpose() * DVector::from_column_slice(&lambda))
        .as_slice()
        .to_vec();

    let kernel = linalg::null_space(&a, linalg::PINV_REL_TOL);
    let mut null_defect: f64 = 0.0;
    if kernel.ncols() > 0 {
        let mut rng = stream_rng(opts.seed, 0);
        for _ in 0..100 {
            let coeffs = DVector::from_fn(kernel.ncols(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let k = &kernel * coeffs;
            let nk = k.norm();
            if nk > 0.0 {
                null_defect = null_defect.max(linalg::dot(&lambda, k.as_slice()).abs() / nk);
            }
        }
    }

    let mut qc = QuasiCalibration {
        structure: s.source.clone(),
        p: ChartPoint(p.to_vec()),
        pivot: pivot + 1,
        hbar,
        lambda,
        omega,
        u: s.domain.clone(),
        eps1: 0.0,
        eps2: 0.0,
        target_eps,
        seed: opts.seed,
        sample_count: opts.sample_count,
        rounds: 0,
        null_defect,
    };
    let ok = |e1: f64, e2: f64| e1 <= target_eps && e2 <= target_eps * target_eps;
    let measure =
        |qc: &QuasiCalibration, u: &DomainBox| measure_quasicalibration_bounds(qc, s, u, opts.sample_count, opts.seed);

    let rho_max = (0..s.n)
        .map(|d| (p[d] - s.domain.min[d]).max(s.domain.max[d] - p[d]))
        .fold(0.0, f64::max);
    let (e1, e2) = measure(&qc, &s.domain)?;
    if ok(e1, e2) {
        qc.eps1 = e1;
        qc.eps2 = e2;
        return Ok(qc);
    }
    // Halve until a good box is found, then bisect geometrically between good and bad.
    let mut bad = rho_max;
    let mut good: Option<(f64, f64, f64)> = None;
    let mut last = (e1, e2);
    let mut rounds = 0;
    while rounds < MAX_ROUNDS {
        rounds += 1;
        let rho = match good {
            None => bad * 0.5,
            Some((g, _, _)) => (g * bad).sqrt(),
        };
        let (e1, e2) = measure(&qc, &neighbourhood(s, p, rho))?;
        last = (e1, e2);
        if ok(e1, e2) {
            good = Some((rho, e1, e2));
        } else {
            bad = rho;
        }
        if let Some((g, _, _)) = good {
            if bad / g < 1.05 {
                break;
            }
        }
    }
    match good {
        Some((rho, e1, e2)) => {
            qc.u = neighbourhood(s, p, rho);
            qc.eps1 = e1;
            qc.eps2 = e2;
            qc.rounds = rounds;
            Ok(qc)
        }
        None => Err(Error::ShrinkExhausted {
            rounds,
            eps1: last.0,
            eps2: last.1,
        }),
    }
}

/// Integral curve of `sum_j (hbar_j / |hbar|) X_j` through `q` on `[-r, r]`
/// with `steps` RK4 steps per side, truncated at the domain boundary.
///
/// The control has unit Euclidean norm, but chart speed need not be one when
/// the frame is dependent (e.g. speed `sqrt 2` on `duplicated_line`).
pub fn quasicalibrated_flow(
    qc: &QuasiCalibration,
    s: &SRStructure,
    q: &[f64],
    r: f64,
    steps: usize,
) -> Result<(AdmissibleCurvePath, FlowStatus)> {
    s.check_point(q)?;
    if !(r > 0.0 && r.is_finite()) || steps == 0 {
        return Err(Error::invalid("r must be positive and steps at least 1"));
    }
    let n = s.n;
    let unit = qc.unit_control();
    let h = r / steps as f64;
    let mut rk = Rk4::new(n);
    let mut xi = vec![0.0; n];
    let mut f = |x: &[f64], dx: &mut [f64]| -> Result<()> {
        dx.fill(0.0);
        for (j, c) in unit.iter().enumerate() {
            s.field(j, x, &mut xi);
            for (d, v) in dx.iter_mut().zip(&xi) {
                *d += c * v;
            }
        }
        Ok(())
    };
    let mut status = FlowStatus::Completed;
    let mut sweep = |sign: f64| -> Result<Vec<Vec<f64>>> {
        let mut x = q.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            rk.step(&mut f, &mut x, sign * h)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t: sign * h });
            }
            if !s.domain.contains(&x) {
                status = FlowStatus::BoundaryHit;
                break;
            }
            out.push(x.clone());
        }
        Ok(out)
    };
    let back = sweep(-1.0)?;
    let fwd = sweep(1.0)?;
    let kb = back.len();
    let mut times = Vec::with_capacity(kb + fwd.len() + 1);
    let mut points = Vec::with_capacity(kb + fwd.len() + 1);
    for (i, x) in back.into_iter().enumerate().rev() {
        times.push(-((i + 1) as f64) * h);
        points.push(ChartPoint(x));
    }
    times.push(0.0);
    points.push(ChartPoint(q.to_vec()));
    for (i, x) in fwd.into_iter().enumerate() {
        times.push((i + 1) as f64 * h);
        points.push(ChartPoint(x));
    }
    let controls = vec![unit; points.len() - 1];
    Ok((
        AdmissibleCurvePath {
            times,
            points,
            controls,
        },
        status,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::{builtin, Regularity};
    use proptest::prelude::*;

    #[test]
    fn preimage_examples() {
        let d = builtin("duplicated_line").unwrap();
        let h = minimal_norm_preimage(&d, &[0.0], &[1.0]).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-12 && (h[1] - 0.5).abs() < 1e-12);
        assert!((linalg::norm(&h) - 0.5f64.sqrt()).abs() < 1e-12);

        let e2 = builtin("euclidean2").unwrap();
        assert_eq!(
            minimal_norm_preimage(&e2, &[0.1, 0.2], &[3.0, -4.0]).unwrap(),
            vec![3.0, -4.0]
        );

        let g = builtin("grushin").unwrap();
        let h = minimal_norm_preimage(&g, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(h, vec![1.0, 0.0]);
        assert!(matches!(
            minimal_norm_preimage(&g, &[0.0, 0.0], &[0.0, 1.0]),
            Err(Error::NotHorizontal { .. })
        ));
    }

    #[test]
    fn euclidean_is_exact() {
        let e2 = builtin("euclidean2").unwrap();
        let qc = build_quasicalibration(&e2, &[0.3, -0.2], 0.1).unwrap();
        assert_eq!(qc.pivot, 1);
        assert_eq!(qc.hbar, vec![1.0, 0.0]);
        assert!((qc.omega[0] - 1.0).abs() < 1e-15 && qc.omega[1].abs() < 1e-15);
        assert_eq!((qc.eps1, qc.eps2), (0.0, 0.0));
        assert_eq!(qc.u, e2.domain);
    }

    #[test]
    fn grushin_examples() {
        let g = builtin("grushin").unwrap();
        for p in [[1.0, 0.0], [0.0, 0.0]] {
            let qc = build_quasicalibration(&g, &p, 0.05).unwrap();
            assert_eq!(qc.pivot, 1);
            assert_eq!(qc.hbar, vec![1.0, 0.0]);
            assert!((qc.omega[0] - 1.0).abs() < 1e-15 && qc.omega[1].abs() < 1e-15);
            assert!(qc.eps1 <= 0.05 && qc.eps2 <= 0.0025);
        }
        let qc = build_quasicalibration(&g, &[1.0, 0.0], 0.05).unwrap();
        let strip = DomainBox::new(vec![0.9, -0.1], vec![1.0, 0.1]).unwrap();
        assert_eq!(
            measure_quasicalibration_bounds(&qc, &g, &strip, 200, 1).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn zero_frame_rejected() {
        let g = builtin("grushin").unwrap();
        // Grushin with X_1 removed vanishes on x = 0.
        let only_x2 =
            SRStructure::new("x-dy", vec![g.frame[1].field.clone()], g.domain.clone(), Regularity::C0).unwrap();
        assert!(matches!(
            build_quasicalibration(&only_x2, &[0.0, 0.3], 0.1),
            Err(Error::ZeroFrame)
        ));
    }

    #[test]
    fn heisenberg_off_center_shrinks() {
        let h = builtin("heisenberg").unwrap().with_regularity(Regularity::C0);
        let p = [1.0, 2.0, 0.0];
        let qc = build_quasicalibration(&h, &p, 0.05).unwrap();
        assert!(qc.u.half_widths().iter().all(|w| *w < 1.0));
        assert!(qc.eps1 <= 0.05 && qc.eps2 <= 0.0025);
        // omega o A(p) = lambda.
        let a = h.frame_matrix(&p);
        let g = a.transpose() * DVector::from_column_slice(&qc.omega);
        assert!((g[0] - qc.lambda[0]).abs() < 1e-10 && (g[1] - qc.lambda[1]).abs() < 1e-10);
        // Nested boxes: slacks shrink.
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 0..6 {
            let b = DomainBox::centered(&p, 1.0 / 2f64.powi(k));
            let (e1, e2) = measure_quasicalibration_bounds(&qc, &h, &b, 300, 2).unwrap();
            assert!(e1 <= prev.0 && e2 <= prev.1, "k={k}");
            prev = (e1, e2);
        }
        assert!(prev.0 < 0.05);
    }

    #[test]
    fn flows() {
        let g = builtin("grushin").unwrap();
        let qc = build_quasicalibration(&g, &[0.0, 0.0], 0.05).unwrap();
        let (path, st) = quasicalibrated_flow(&qc, &g, &[0.0, 0.0], 0.5, 50).unwrap();
        assert_eq!(st, FlowStatus::Completed);
        for (t, x) in path.times.iter().zip(&path.points) {
            assert!((x[0] - t).abs() < 1e-14 && x[1] == 0.0);
        }

        let d = builtin("duplicated_line").unwrap();
        let qc = build_quasicalibration(&d, &[0.0], 0.05).unwrap();
        let (path, _) = quasicalibrated_flow(&qc, &d, &[0.0], 0.5, 50).unwrap();
        let end = path.points.last().unwrap();
        assert!((end[0] - 0.5 * 2f64.sqrt()).abs() < 1e-14);
        // Recomputed minimal-norm controls have unit norm.
        for x in &path.points {
            let v = [2f64.sqrt()];
            let h = minimal_norm_preimage(&d, x, &v).unwrap();
            assert!(linalg::norm(&h) <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn export_round_trip() {
        let g = builtin("grushin").unwrap();
        let qc = build_quasicalibration(&g, &[0.0, 0.0], 0.05).unwrap();
        let (back, s) = QuasiCalibration::from_json(&qc.to_json().unwrap()).unwrap();
        assert_eq!(back, qc);
        assert_eq!(s.name, "grushin");
        assert!(QuasiCalibration::from_json("{\"format\": \"other\"}").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lambda_vanishes_on_kernel(x in -0.9f64..0.9, y in -0.9f64..0.9) {
            let d = builtin("duplicated_line").unwrap();
            let qc = build_quasicalibration(&d, &[x], 0.05).unwrap();
            prop_assert!(qc.null_defect <= 1e-10);
            let g = builtin("grushin").unwrap();
            let qc = build_quasicalibration(&g, &[x, y], 0.05).unwrap();
            prop_assert!(qc.null_defect <= 1e-10);
        }

        #[test]
        fn scale_covariance(c in 0.2f64..5.0) {
            let h = builtin("heisenberg").unwrap().with_regularity(Regularity::C0);
            let hs = h.scaled(c);
            let p = [1.0, 2.0, 0.0];
            let opts = QuasiOptions { sample_count: 200, seed: 4 };
            let a = build_quasicalibration_with(&h, &p, 0.05, &opts).unwrap();
            let b = build_quasicalibration_with(&hs, &p, 0.05, &opts).unwrap();
            for j in 0..2 {
                prop_assert!((b.hbar[j] - a.hbar[j]).abs() < 1e-10);
                prop_assert!((b.lambda[j] - a.lambda[j]).abs() < 1e-10);
            }
            for i in 0..3 {
                prop_assert!((b.omega[i] * c - a.omega[i]).abs() < 1e-10);
            }
            let u = DomainBox::centered(&p, 0.1);
            let ea = measure_quasicalibration_bounds(&a, &h, &u, 200, 4).unwrap();
            let eb = measure_quasicalibration_bounds(&b, &hs, &u, 200, 4).unwrap();
            prop_assert!((ea.0 - eb.0).abs() < 1e-10 && (ea.1 - eb.1).abs() < 1e-10);
        }

        #[test]
        fn omega_pulls_back_to_lambda(x in -0.9f64..0.9, y in -0.9f64..0.9) {
            let g = builtin("grushin").unwrap();
            let qc = build_quasicalibration(&g, &[x, y], 0.05).unwrap();
            let a = g.frame_matrix(&[x, y]);
            let pulled = a.transpose() * DVector::from_column_slice(&qc.omega);
            for j in 0..2 {
                prop_assert!((pulled[j] - qc.lambda[j]).abs() < 1e-10);
            }
            let back = a * DVector::from_column_slice(&qc.hbar);
            let piv = g.frame_matrix(&[x, y]).column(qc.pivot - 1).clone_owned();
            prop_assert!((back - piv).norm() < 1e-10);
        }
    }
}
