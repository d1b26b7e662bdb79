//! Carnot-Caratheodory distance estimates.
//!
//! Upper bounds minimise the discrete energy of piecewise-constant controls
//! over a fixed horizon; lower bounds come from calibration potentials; a
//! lattice Dijkstra search gives a rough independent oracle on small
//! instances.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    build_calibration_with, evaluate_calibration, verify_calibration, CalibrationField, CalibrationOptions,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{extremal_controls, integrate_extremal, normalize_to_unit_energy, CotangentState};
use crate::linalg;
use crate::ode::Rk4;
use crate::optim::lbfgs;
use crate::sampling::{box_sample, stream_rng};
use crate::structures::{ChartPoint, Frame, Regularity, SRStructure};

/// Allowed mismatch between consecutive path points and one RK4 step.
pub const ADMISSIBLE_TOL: f64 = 1e-8;
/// Endpoint residual below which an optimised curve counts as feasible.
pub const ENDPOINT_TOL: f64 = 1e-6;
/// Residual the penalty loop keeps pushing toward once feasible.
const ENDPOINT_TARGET: f64 = 1e-10;
const MAX_ESCALATIONS: usize = 8;
const MU0: f64 = 10.0;

/// Discretised admissible curve with piecewise-constant controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleCurvePath {
    pub times: Vec<f64>,
    pub points: Vec<ChartPoint>,
    /// `controls[k]` drives the curve on `[times[k], times[k+1]]`.
    pub controls: Vec<Vec<f64>>,
}

/// `out = sum_j u_j X_j(x)`.
fn control_field(s: &SRStructure, u: &[f64], x: &[f64], out: &mut [f64], xi: &mut [f64]) {
    out.fill(0.0);
    for (j, c) in u.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        s.field(j, x, xi);
        for (o, v) in out.iter_mut().zip(xi.iter()) {
            *o += c * v;
        }
    }
}

fn control_step(s: &SRStructure, rk: &mut Rk4, x: &mut [f64], u: &[f64], h: f64) {
    let mut xi = vec![0.0; s.n];
    let mut f = |y: &[f64], dy: &mut [f64]| {
        control_field(s, u, y, dy, &mut xi);
        Ok(())
    };
    rk.step(&mut f, x, h).expect("control field evaluation is infallible");
}

impl AdmissibleCurvePath {
    /// Integrates the controls from `start`, one RK4 step per segment of length `dt`.
    pub fn integrate(s: &SRStructure, start: &[f64], t0: f64, dt: f64, controls: Vec<Vec<f64>>) -> Self {
        let mut rk = Rk4::new(s.n);
        let mut x = start.to_vec();
        let mut times = vec![t0];
        let mut points = vec![ChartPoint(x.clone())];
        for (k, u) in controls.iter().enumerate() {
            control_step(s, &mut rk, &mut x, u, dt);
            times.push(t0 + (k + 1) as f64 * dt);
            points.push(ChartPoint(x.clone()));
        }
        AdmissibleCurvePath {
            times,
            points,
            controls,
        }
    }

    /// Largest step-consistency defect and the segment where it occurs.
    pub fn defect(&self, s: &SRStructure) -> (usize, f64) {
        let mut rk = Rk4::new(s.n);
        let mut worst = (0, 0.0);
        for k in 0..self.controls.len() {
            let mut x = self.points[k].0.clone();
            control_step(s, &mut rk, &mut x, &self.controls[k], self.times[k + 1] - self.times[k]);
            let d = linalg::dist(&x, &self.points[k + 1]) / (1.0 + linalg::norm(&x));
            if !(d <= worst.1) {
                worst = (k, d);
            }
        }
        worst
    }

    pub fn check(&self, s: &SRStructure) -> Result<()> {
        if self.points.len() != self.times.len() || self.controls.len() + 1 != self.points.len() {
            return Err(Error::invalid("path arrays have inconsistent lengths"));
        }
        if self.controls.iter().any(|u| u.len() != s.m) || self.points.iter().any(|p| p.len() != s.n) {
            return Err(Error::invalid("path dimensions do not match the structure"));
        }
        let (segment, defect) = self.defect(s);
        if !(defect <= ADMISSIBLE_TOL) {
            return Err(Error::NotAdmissible { segment, defect });
        }
        Ok(())
    }

    /// Splits every segment into `factor` pieces with the same control and re-integrates.
    pub fn refined(&self, s: &SRStructure, factor: usize) -> Self {
        let factor = factor.max(1);
        let t0 = self.times[0];
        let dt = (self.times[self.times.len() - 1] - t0) / (self.controls.len() * factor) as f64;
        let controls = self
            .controls
            .iter()
            .flat_map(|u| std::iter::repeat_n(u.clone(), factor))
            .collect();
        Self::integrate(s, &self.points[0], t0, dt, controls)
    }

    /// Columns `t, x1..xn, h1..hm`; the last row has no control.
    pub fn to_csv(&self) -> String {
        let n = self.points.first().map_or(0, |p| p.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for j in 1..=m {
            out.push_str(&format!(",h{j}"));
        }
        out.push('\n');
        for (k, (t, p)) in self.times.iter().zip(&self.points).enumerate() {
            out.push_str(&format!("{t:.16e}"));
            for v in p.iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            match self.controls.get(k) {
                Some(u) => u.iter().for_each(|v| out.push_str(&format!(",{v:.16e}"))),
                None => (0..m).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }
}

/// `sum_k |h_min(t_k)| dt_k` with `h_min` the minimal-norm control of the velocity at each node.
pub fn curve_length(s: &SRStructure, path: &AdmissibleCurvePath) -> Result<f64> {
    path.check(s)?;
    let mut total = 0.0;
    for k in 0..path.controls.len() {
        let a = s.frame_matrix(&path.points[k]);
        let u = DVector::from_column_slice(&path.controls[k]);
        let v = &a * &u;
        let h = linalg::pseudo_inverse(&a, linalg::PINV_REL_TOL) * v;
        total += h.norm() * (path.times[k + 1] - path.times[k]);
    }
    Ok(total)
}

/// Linear functionals `l` with `l(X_i) = 0` for every field at every sampled
/// point; `l . x` is then constant along admissible curves. Exact for
/// constant frames, sampled otherwise.
pub fn conserved_functionals(s: &SRStructure) -> DMatrix<f64> {
    let pts = box_sample(&s.domain, 64, 0);
    let mut stack = DMatrix::zeros(s.n, s.m * pts.len());
    for (k, x) in pts.iter().enumerate() {
        let a = s.frame_matrix(x);
        stack.view_mut((0, k * s.m), (s.n, s.m)).copy_from(&a);
    }
    linalg::null_space(&stack.transpose(), 1e-10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceStatus {
    Finite,
    InftySuspect,
    InftyCertified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub index: usize,
    /// `chord`, `random` or `shooting`.
    pub kind: String,
    pub energy: f64,
    pub endpoint_residual: f64,
    pub iterations: usize,
    pub penalty_rounds: usize,
    pub gradient_norm: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DistanceDiagnostics {
    pub restarts: Vec<RestartReport>,
    pub best_restart: Option<usize>,
    pub conserved_functional: Option<Vec<f64>>,
    /// `curve_length` of the witness, never above `upper`.
    pub witness_length: Option<f64>,
    /// Calibration bound behind `lower`, when one was computed.
    pub lower_detail: Option<LowerBound>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub p: ChartPoint,
    pub q: ChartPoint,
    /// `None` when no feasible curve was found.
    pub upper: Option<f64>,
    pub lower: f64,
    pub status: DistanceStatus,
    pub method: String,
    #[serde(skip)]
    pub witness: Option<AdmissibleCurvePath>,
    pub diagnostics: DistanceDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpperOptions {
    pub segments: usize,
    /// Restart 0 starts from least-norm controls along the chord, the others from random controls.
    pub restarts: usize,
    pub seed: u64,
    /// Covectors tried for the shooting seed (C11 only; 0 disables it).
    pub shooting_samples: usize,
    pub max_iter: usize,
    pub gtol: f64,
}

impl Default for UpperOptions {
    fn default() -> Self {
        UpperOptions {
            segments: 32,
            restarts: 4,
            seed: 0,
            shooting_samples: 32,
            max_iter: 400,
            gtol: 1e-8,
        }
    }
}

/// Discrete optimal-control problem on `[0, 1]` with `N` constant-control segments.
struct ControlProblem<'a> {
    s: &'a SRStructure,
    p: Vec<f64>,
    q: Vec<f64>,
    segments: usize,
    dt: f64,
}

impl ControlProblem<'_> {
    fn endpoint(&self, u: &[f64]) -> Vec<f64> {
        let m = self.s.m;
        let mut rk = Rk4::new(self.s.n);
        let mut x = self.p.clone();
        for k in 0..self.segments {
            control_step(self.s, &mut rk, &mut x, &u[k * m..(k + 1) * m], self.dt);
        }
        x
    }

    fn energy(&self, u: &[f64]) -> f64 {
        0.5 * self.dt * linalg::dot(u, u)
    }

    /// Augmented Lagrangian `E + nu.c + mu/2 |c|^2` with `c = x_N - q`, and its
    /// gradient by a reverse sweep through the RK4 stages.
    fn value_grad(&self, u: &[f64], nu: &[f64], mu: f64, grad: &mut [f64]) -> Result<f64> {
        let (n, m, h) = (self.s.n, self.s.m, self.dt);
        let s = self.s;
        let mut xi = vec![0.0; n];
        // Stage points x, z2, z3, z4 per step.
        let mut stages = vec![0.0; self.segments * 4 * n];
        let mut x = self.p.clone();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut z = vec![0.0; n];
        for k in 0..self.segments {
            let uk = &u[k * m..(k + 1) * m];
            let st = &mut stages[k * 4 * n..(k + 1) * 4 * n];
            st[..n].copy_from_slice(&x);
            control_field(s, uk, &x, &mut k1, &mut xi);
            for i in 0..n {
                z[i] = x[i] + 0.5 * h * k1[i];
            }
            st[n..2 * n].copy_from_slice(&z);
            control_field(s, uk, &z, &mut k2, &mut xi);
            for i in 0..n {
                z[i] = x[i] + 0.5 * h * k2[i];
            }
            st[2 * n..3 * n].copy_from_slice(&z);
            control_field(s, uk, &z, &mut k3, &mut xi);
            for i in 0..n {
                z[i] = x[i] + h * k3[i];
            }
            st[3 * n..].copy_from_slice(&z);
            control_field(s, uk, &z, &mut k4, &mut xi);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Ok(f64::INFINITY);
        }
        let c: Vec<f64> = x.iter().zip(&self.q).map(|(a, b)| a - b).collect();
        let value = self.energy(u) + linalg::dot(nu, &c) + 0.5 * mu * linalg::dot(&c, &c);

        let mut jac = vec![0.0; n * n];
        // (sum_j u_j DX_j(z))^T w into out; A(z)^T w accumulated into ubar.
        let mut pull = |zp: &[f64], uk: &[f64], w: &[f64], out: &mut [f64], ubar: &mut [f64]| -> Result<()> {
            out.fill(0.0);
            for j in 0..m {
                s.field(j, zp, &mut xi);
                ubar[j] += linalg::dot(&xi, w);
                if uk[j] == 0.0 {
                    continue;
                }
                s.field_jacobian(j, zp, &mut jac)?;
                for col in 0..n {
                    let mut acc = 0.0;
                    for r in 0..n {
                        acc += jac[r * n + col] * w[r];
                    }
                    out[col] += uk[j] * acc;
                }
            }
            Ok(())
        };
        let mut xbar: Vec<f64> = nu.iter().zip(&c).map(|(a, b)| a + mu * b).collect();
        let mut kb1 = vec![0.0; n];
        let mut kb2 = vec![0.0; n];
        let mut kb3 = vec![0.0; n];
        let mut kb4 = vec![0.0; n];
        let mut zb = vec![0.0; n];
        for k in (0..self.segments).rev() {
            let uk = &u[k * m..(k + 1) * m];
            let st = &stages[k * 4 * n..(k + 1) * 4 * n];
            let ubar = &mut grad[k * m..(k + 1) * m];
            ubar.fill(0.0);
            for i in 0..n {
                kb1[i] = h / 6.0 * xbar[i];
                kb2[i] = h / 3.0 * xbar[i];
                kb3[i] = h / 3.0 * xbar[i];
                kb4[i] = h / 6.0 * xbar[i];
            }
            pull(&st[3 * n..], uk, &kb4, &mut zb, ubar)?;
            for i in 0..n {
                xbar[i] += zb[i];
                kb3[i] += h * zb[i];
            }
            pull(&st[2 * n..3 * n], uk, &kb3, &mut zb, ubar)?;
            for i in 0..n {
                xbar[i] += zb[i];
                kb2[i] += 0.5 * h * zb[i];
            }
            pull(&st[n..2 * n], uk, &kb2, &mut zb, ubar)?;
            for i in 0..n {
                xbar[i] += zb[i];
                kb1[i] += 0.5 * h * zb[i];
            }
            pull(&st[..n], uk, &kb1, &mut zb, ubar)?;
            for i in 0..n {
                xbar[i] += zb[i];
            }
            for j in 0..m {
                ubar[j] += h * uk[j];
            }
        }
        Ok(value)
    }

    /// Augmented-Lagrangian loop from `u0`.
    fn solve(&self, u0: Vec<f64>, opts: &UpperOptions) -> Result<(Vec<f64>, RestartReport)> {
        let n = self.s.n;
        let mut nu = vec![0.0; n];
        let mut mu = MU0;
        let mut u = u0;
        let mut iterations = 0;
        let mut gradient_norm = f64::NAN;
        let mut residual = f64::INFINITY;
        let mut rounds = 0;
        for round in 0..=MAX_ESCALATIONS {
            rounds = round + 1;
            let r = lbfgs(|v, g| self.value_grad(v, &nu, mu, g), u, opts.gtol, opts.max_iter, 8)?;
            u = r.x;
            iterations += r.iterations;
            gradient_norm = r.grad_norm;
            let c: Vec<f64> = self.endpoint(&u).iter().zip(&self.q).map(|(a, b)| a - b).collect();
            residual = linalg::norm(&c);
            if residual <= ENDPOINT_TARGET || round == MAX_ESCALATIONS {
                break;
            }
            for (a, b) in nu.iter_mut().zip(&c) {
                *a += mu * b;
            }
            mu *= 10.0;
        }
        let energy = self.energy(&u);
        Ok((
            u,
            RestartReport {
                index: 0,
                kind: String::new(),
                energy,
                endpoint_residual: residual,
                iterations,
                penalty_rounds: rounds,
                gradient_norm,
                feasible: residual <= ENDPOINT_TOL && energy.is_finite(),
            },
        ))
    }

    fn chord_seed(&self) -> Vec<f64> {
        let m = self.s.m;
        let d: Vec<f64> = self.q.iter().zip(&self.p).map(|(a, b)| a - b).collect();
        let mut u = Vec::with_capacity(self.segments * m);
        for k in 0..self.segments {
            let s = (k as f64 + 0.5) / self.segments as f64;
            let x: Vec<f64> = self.p.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            let (h, _) = linalg::least_norm_solve(&self.s.frame_matrix(&x), &DVector::from_column_slice(&d));
            u.extend(h.iter());
        }
        u
    }

    /// Controls of the best unit-speed normal extremal over sampled covectors, rescaled to horizon 1.
    fn shooting_seed(&self, samples: usize, seed: u64) -> Option<Vec<f64>> {
        let (n, m) = (self.s.n, self.s.m);
        let chord = linalg::dist(&self.p, &self.q);
        let horizon = 2.0 * (chord + chord.sqrt()) + 1e-3;
        let mut best: Option<(f64, Vec<f64>, Vec<Vec<f64>>)> = None;
        for i in 0..samples {
            let mut rng = stream_rng(seed, 1_000_000 + i as u64);
            let lam: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let Ok(st) = normalize_to_unit_energy(self.s, &CotangentState::new(self.p.clone(), lam)) else {
                continue;
            };
            let Ok(traj) = integrate_extremal(self.s, &st, horizon, 200) else {
                continue;
            };
            let controls = extremal_controls(self.s, &traj);
            for (k, state) in traj.states.iter().enumerate().skip(1) {
                let d = linalg::dist(&state.q, &self.q);
                if best.as_ref().is_none_or(|b| d < b.0) {
                    best = Some((d, traj.times[..=k].to_vec(), controls[..=k].to_vec()));
                }
            }
        }
        let (_, times, controls) = best?;
        let tau = *times.last()?;
        let mut u = Vec::with_capacity(self.segments * m);
        for k in 0..self.segments {
            let t = tau * (k as f64 + 0.5) / self.segments as f64;
            let pos = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1);
            let (t0, t1) = (times[pos - 1], times[pos]);
            let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            for j in 0..m {
                u.push(tau * ((1.0 - w) * controls[pos - 1][j] + w * controls[pos][j]));
            }
        }
        Some(u)
    }
}

/// Upper bound on `d(p, q)` by direct energy minimisation with restarts.
pub fn distance_upper(s: &SRStructure, p: &[f64], q: &[f64], opts: &UpperOptions) -> Result<DistanceEstimate> {
    s.check_point(p)?;
    s.check_point(q)?;
    if opts.segments == 0 || opts.restarts == 0 {
        return Err(Error::invalid("segments and restarts must be positive"));
    }
    let mut diagnostics = DistanceDiagnostics::default();
    let chord: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let cons = conserved_functionals(s);
    for c in 0..cons.ncols() {
        let l = cons.column(c);
        let gap = linalg::dot(l.as_slice(), &chord);
        if gap.abs() > 1e-9 * (1.0 + linalg::norm(&chord)) {
            diagnostics.conserved_functional = Some(l.iter().copied().collect());
            diagnostics.note = Some(format!(
                "linear functional constant along every frame field differs by {gap:e} between the endpoints"
            ));
            return Ok(DistanceEstimate {
                p: ChartPoint(p.to_vec()),
                q: ChartPoint(q.to_vec()),
                upper: None,
                lower: 0.0,
                status: DistanceStatus::InftyCertified,
                method: "conserved-functional".into(),
                witness: None,
                diagnostics,
            });
        }
    }

    let problem = ControlProblem {
        s,
        p: p.to_vec(),
        q: q.to_vec(),
        segments: opts.segments,
        dt: 1.0 / opts.segments as f64,
    };
    let m = s.m;
    let scale = linalg::norm(&chord).max(0.1);
    let mut seeds: Vec<(&str, Vec<f64>)> = vec![("chord", problem.chord_seed())];
    for r in 1..opts.restarts {
        let mut rng = stream_rng(opts.seed, r as u64);
        let u = (0..opts.segments * m)
            .map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        seeds.push(("random", u));
    }
    if s.regularity == Regularity::C11 && opts.shooting_samples > 0 {
        if let Some(u) = problem.shooting_seed(opts.shooting_samples, opts.seed) {
            seeds.push(("shooting", u));
        }
    }
    let outcomes: Vec<Result<(Vec<f64>, RestartReport)>> = seeds
        .into_par_iter()
        .enumerate()
        .map(|(i, (kind, u0))| {
            let (u, mut rep) = problem.solve(u0, opts)?;
            rep.index = i;
            rep.kind = kind.to_string();
            Ok((u, rep))
        })
        .collect();
    let mut best: Option<(usize, Vec<f64>, f64)> = None;
    for o in outcomes {
        let (u, rep) = o?;
        if rep.feasible && best.as_ref().is_none_or(|b| rep.energy < b.2) {
            best = Some((rep.index, u, rep.energy));
        }
        diagnostics.restarts.push(rep);
    }
    let (upper, status, witness) = match best {
        Some((idx, u, energy)) => {
            diagnostics.best_restart = Some(idx);
            let controls: Vec<Vec<f64>> = u.chunks(m).map(|c| c.to_vec()).collect();
            let path = AdmissibleCurvePath::integrate(s, p, 0.0, problem.dt, controls);
            diagnostics.witness_length = curve_length(s, &path).ok();
            (Some((2.0 * energy).sqrt()), DistanceStatus::Finite, Some(path))
        }
        None => {
            diagnostics.note = Some("no restart reached the endpoint tolerance".into());
            (None, DistanceStatus::InftySuspect, None)
        }
    };
    Ok(DistanceEstimate {
        p: ChartPoint(p.to_vec()),
        q: ChartPoint(q.to_vec()),
        upper,
        lower: 0.0,
        status,
        method: "energy-lbfgs".into(),
        witness,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleOutcome {
    Reached { distance: f64, expanded: usize },
    Unreachable { expanded: usize },
}

#[derive(PartialEq)]
struct Item(f64, Vec<i64>);

impl Eq for Item {}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, ties broken by lattice key for determinism.
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Dijkstra over lattice points of spacing `step / 2` around `p`; edges are
/// single RK4 steps of `+-X_i` of parameter length `step`, snapped to the lattice.
pub fn distance_oracle_graph(
    s: &SRStructure,
    p: &[f64],
    q: &[f64],
    step: f64,
    radius_cap: f64,
) -> Result<OracleOutcome> {
    s.check_point(p)?;
    s.check_point(q)?;
    if !(step > 0.0 && step.is_finite()) || !(radius_cap > 0.0) {
        return Err(Error::invalid("step and radius_cap must be positive"));
    }
    if linalg::dist(p, q) > radius_cap {
        return Err(Error::CapExceeded { cap: radius_cap });
    }
    let n = s.n;
    let spacing = 0.5 * step;
    let snap = |x: &[f64]| -> Vec<i64> {
        x.iter()
            .zip(p)
            .map(|(a, b)| ((a - b) / spacing).round() as i64)
            .collect()
    };
    let position = |k: &[i64]| -> Vec<f64> { k.iter().zip(p).map(|(a, b)| b + *a as f64 * spacing).collect() };
    let target = snap(q);
    let origin = vec![0i64; n];
    let mut dist: HashMap<Vec<i64>, f64> = HashMap::new();
    dist.insert(origin.clone(), 0.0);
    let mut heap = BinaryHeap::new();
    heap.push(Item(0.0, origin));
    let mut rk = Rk4::new(n);
    let mut expanded = 0;
    while let Some(Item(d, key)) = heap.pop() {
        if dist.get(&key).is_some_and(|&best| d > best) {
            continue;
        }
        if key == target {
            return Ok(OracleOutcome::Reached { distance: d, expanded });
        }
        expanded += 1;
        let x = position(&key);
        let a = s.frame_matrix(&x);
        let pinv = linalg::pseudo_inverse(&a, linalg::PINV_REL_TOL);
        for j in 0..s.m {
            let cost = step * (&pinv * a.column(j)).norm();
            for sign in [1.0, -1.0] {
                let mut u = vec![0.0; s.m];
                u[j] = sign;
                let mut y = x.clone();
                control_step(s, &mut rk, &mut y, &u, step);
                let nk = snap(&y);
                if nk == key {
                    continue;
                }
                let npos = position(&nk);
                if !s.domain.contains(&npos) || linalg::dist(&npos, p) > radius_cap {
                    continue;
                }
                let nd = d + cost;
                if dist.get(&nk).is_none_or(|&old| nd < old) {
                    dist.insert(nk.clone(), nd);
                    heap.push(Item(nd, nk));
                }
            }
        }
    }
    Ok(OracleOutcome::Unreachable { expanded })
}

/// Value of the calibration potential with its error estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub value: f64,
    /// Disagreement with the integral along a second (L-shaped) path.
    pub path_error: f64,
    /// Adaptive Simpson error estimate along the main path.
    pub quadrature_error: f64,
    pub evaluations: usize,
}

impl Potential {
    pub fn error(&self) -> f64 {
        self.path_error + self.quadrature_error
    }
}

const SIMPSON_TOL: f64 = 1e-10;
const SIMPSON_DEPTH: usize = 20;

struct Simpson<'a> {
    cf: &'a CalibrationField,
    a: Vec<f64>,
    d: Vec<f64>,
    evals: usize,
}

impl Simpson<'_> {
    fn f(&mut self, s: f64) -> Result<f64> {
        self.evals += 1;
        let x: Vec<f64> = self.a.iter().zip(&self.d).map(|(u, v)| u + s * v).collect();
        Ok(linalg::dot(&evaluate_calibration(self.cf, &x)?, &self.d))
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &mut self,
        lo: f64,
        hi: f64,
        flo: f64,
        fmid: f64,
        fhi: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> Result<(f64, f64)> {
        let mid = 0.5 * (lo + hi);
        let (lm, rm) = (0.5 * (lo + mid), 0.5 * (mid + hi));
        let (flm, frm) = (self.f(lm)?, self.f(rm)?);
        let left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
        let right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return Ok((left + right + delta / 15.0, delta.abs() / 15.0));
        }
        let (a, ea) = self.recurse(lo, mid, flo, flm, fmid, left, 0.5 * tol, depth - 1)?;
        let (b, eb) = self.recurse(mid, hi, fmid, frm, fhi, right, 0.5 * tol, depth - 1)?;
        Ok((a + b, ea + eb))
    }
}

/// `int_a^b Lambda` along the straight segment, by adaptive Simpson.
fn segment_integral(cf: &CalibrationField, a: &[f64], b: &[f64]) -> Result<(f64, f64, usize)> {
    let d: Vec<f64> = b.iter().zip(a).map(|(u, v)| u - v).collect();
    if d.iter().all(|v| *v == 0.0) {
        return Ok((0.0, 0.0, 0));
    }
    let mut simp = Simpson {
        cf,
        a: a.to_vec(),
        d,
        evals: 0,
    };
    let (f0, fm, f1) = (simp.f(0.0)?, simp.f(0.5)?, simp.f(1.0)?);
    let whole = (f0 + 4.0 * fm + f1) / 6.0;
    let (v, e) = simp.recurse(0.0, 1.0, f0, fm, f1, whole, SIMPSON_TOL, SIMPSON_DEPTH)?;
    Ok((v, e, simp.evals))
}

/// Integral of `Lambda` along a polyline, with the summed quadrature error estimate.
pub fn polyline_integral(cf: &CalibrationField, vertices: &[Vec<f64>]) -> Result<(f64, f64, usize)> {
    let mut total = (0.0, 0.0, 0);
    for w in vertices.windows(2) {
        let (v, e, k) = segment_integral(cf, &w[0], &w[1])?;
        total = (total.0 + v, total.1 + e, total.2 + k);
    }
    Ok(total)
}

/// `phi(x)` with `d phi = Lambda`, `phi(base) = 0`, integrated along the segment from
/// the base; an L-shaped path (first coordinate first) estimates path dependence.
pub fn calibration_potential(cf: &CalibrationField, x: &[f64]) -> Result<Potential> {
    let base = cf.chart.base.0.clone();
    if x.len() != base.len() {
        return Err(Error::OutsideCalibratedSet { point: x.to_vec() });
    }
    let (value, qerr, evals) = polyline_integral(cf, &[base.clone(), x.to_vec()])?;
    let mut corner = base.clone();
    corner[0] = x[0];
    let second = match polyline_integral(cf, &[base.clone(), corner, x.to_vec()]) {
        Ok(r) => r,
        Err(Error::OutsideCalibratedSet { .. }) => {
            let mut other = x.to_vec();
            other[0] = base[0];
            polyline_integral(cf, &[base, other, x.to_vec()])?
        }
        Err(e) => return Err(e),
    };
    Ok(Potential {
        value,
        path_error: (value - second.0).abs(),
        quadrature_error: qerr,
        evaluations: evals + second.2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    /// `|phi(q) - phi(p)| / max(s, 1)`.
    pub value: f64,
    /// Potential error estimates, divided by the same margin.
    pub budget: f64,
    pub margin: f64,
    pub phi_p: Potential,
    pub phi_q: Potential,
}

/// Certified lower bound on the distance between `p, q in W` among curves staying in `W`.
///
/// The margin is clamped below by 1: along `Y` the pairing is exactly 1, so a
/// measured `s < 1` is round-off and must not inflate the bound.
pub fn distance_lower(cf: &CalibrationField, margin: f64, p: &[f64], q: &[f64]) -> Result<LowerBound> {
    let phi_p = calibration_potential(cf, p)?;
    let phi_q = calibration_potential(cf, q)?;
    let s = margin.max(1.0);
    Ok(LowerBound {
        value: (phi_q.value - phi_p.value).abs() / s,
        budget: (phi_p.error() + phi_q.error()) / s,
        margin,
        phi_p,
        phi_q,
    })
}

/// [`distance_upper`] plus, on smooth frames, a calibration lower bound from a
/// field built at the midpoint and aimed along the chord. The reported lower
/// value already has the potential error budget subtracted.
pub fn distance_sandwich(
    s: &SRStructure,
    p: &[f64],
    q: &[f64],
    opts: &UpperOptions,
    verify_samples: usize,
) -> Result<DistanceEstimate> {
    let mut est = distance_upper(s, p, q, opts)?;
    if est.status != DistanceStatus::Finite || s.regularity != Regularity::C11 {
        return Ok(est);
    }
    let chord: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let len = linalg::norm(&chord);
    if len == 0.0 {
        return Ok(est);
    }
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let (h, residual) = linalg::least_norm_solve(&s.frame_matrix(&mid), &DVector::from_column_slice(&chord));
    let direction = (residual <= 1e-9 * len && h.norm() > 0.0).then(|| (h.clone() / h.norm()).as_slice().to_vec());
    let default = 0.25 * s.domain.min_half_width();
    let copts = CalibrationOptions {
        eps: Some(default.max(0.55 * len)),
        uprime_half: Some(default.min(0.25 * len).max(1e-3)),
        direction,
        ..CalibrationOptions::default()
    };
    let bound = build_calibration_with(s, &mid, &copts).and_then(|cf| {
        let margin = verify_calibration(&cf, verify_samples, opts.seed).margin;
        distance_lower(&cf, margin, p, q)
    });
    match bound {
        Ok(lb) => {
            est.lower = (lb.value - lb.budget).max(0.0);
            est.method = "energy-lbfgs+calibration".into();
            est.diagnostics.lower_detail = Some(lb);
        }
        Err(e) => {
            est.diagnostics.note = Some(format!("no calibration lower bound: {e}"));
        }
    }
    Ok(est)
}
