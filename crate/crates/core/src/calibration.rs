//! Local calibrations of C11 structures built from the normal Hamiltonian flow.
//!
//! Around a base point `p` everything is set up in an adapted affine chart
//! `y = M (x - p)` in which the (possibly rotated) frame satisfies
//! `X_i(p) = e_i`. Seeds `(0, x')` on the hyperplane `{y_1 = 0}` carry the
//! covector `c(x') e_1^*` normalised to `H = 1/2`. Their normal extremals
//! sweep out `Q(t, x')` with covectors `Lambda(t, x')`, and on the image `W`
//! the 1-form `Lambda = Q_*(dt)` is exact with `<Lambda, v> <= |v|` for
//! horizontal `v` and equality along `Y = sum_i <Lambda, X_i> X_i`.
//!
//! Integration itself runs in the original chart: the adapted chart is
//! affine, so the Hamiltonian flow (and RK4) commute with it, and only seeds
//! and results have to be mapped.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{integrate_extremal, CotangentState, ExtremalTrajectory, HamiltonianRhs};
use crate::linalg;
use crate::ode::Rk4;
use crate::sampling::{stream_rng, Halton};
use crate::structures::{ChartPoint, DomainBox, Frame, Regularity, SRStructure, StructureSource, RANK_TOL};

/// A seed is degenerate when `sum_i (X_i^1(0, x'))^2` falls below this.
pub const SEED_TOL: f64 = 1e-8;
/// Allowed defect of `sum_i <Lambda, X_i>^2 = 1` at table nodes.
pub const UNIT_TOL: f64 = 1e-8;

const FILE_FORMAT: &str = "cclab-calibration/1";

fn mat_vec(rows: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| linalg::dot(r, v)).collect()
}

fn mat_t_vec(rows: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; n];
    for (r, &vi) in rows.iter().zip(v) {
        for (o, a) in out.iter_mut().zip(r) {
            *o += a * vi;
        }
    }
    out
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Affine chart `y = M (x - p)` normalising a rotated frame at `p`.
///
/// With `R` the orthogonal frame rotation, the columns of `A(p) R` map to
/// `e_1..e_m`. `R` is the identity unless a calibration direction was requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedChart {
    pub base: ChartPoint,
    /// Rows of `M`.
    pub matrix: Vec<Vec<f64>>,
    /// Rows of `M^{-1}`.
    pub inverse: Vec<Vec<f64>>,
    /// Rows of the `m x m` rotation `R`.
    pub frame_rotation: Vec<Vec<f64>>,
}

impl AdaptedChart {
    pub fn dim(&self) -> usize {
        self.base.len()
    }

    /// `M (x - p)`.
    pub fn to_adapted(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x.iter().zip(self.base.iter()).map(|(a, b)| a - b).collect();
        mat_vec(&self.matrix, &d)
    }

    /// `p + M^{-1} y`.
    pub fn to_chart(&self, y: &[f64]) -> Vec<f64> {
        mat_vec(&self.inverse, y)
            .iter()
            .zip(self.base.iter())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Tangent vectors: `M v`.
    pub fn vector_to_adapted(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.matrix, v)
    }

    /// Covectors given in adapted coordinates, expressed in the original chart: `M^T lam`.
    pub fn covector_to_chart(&self, lam: &[f64]) -> Vec<f64> {
        mat_t_vec(&self.matrix, lam)
    }

    /// `M^{-T} lam`.
    pub fn covector_to_adapted(&self, lam: &[f64]) -> Vec<f64> {
        mat_t_vec(&self.inverse, lam)
    }

    /// Frame matrix of the rotated frame in adapted coordinates at `y`: `M A(p + M^{-1} y) R`.
    pub fn adapted_frame(&self, s: &SRStructure, y: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.to_chart(y);
        s.check_point(&x)?;
        let a = s.frame_matrix(&x);
        Ok(self.matrix_m() * a * self.rotation())
    }

    /// Row-major jacobian of rotated field `i` in adapted coordinates: `M (sum_j R_ji DX_j) M^{-1}`.
    pub fn adapted_field_jacobian(&self, s: &SRStructure, i: usize, y: &[f64]) -> Result<DMatrix<f64>> {
        let x = self.to_chart(y);
        s.check_point(&x)?;
        let n = s.n;
        let mut total = DMatrix::zeros(n, n);
        let mut buf = vec![0.0; n * n];
        for j in 0..s.m {
            let r = self.frame_rotation[j][i];
            if r == 0.0 {
                continue;
            }
            s.field_jacobian(j, &x, &mut buf)?;
            total += DMatrix::from_row_slice(n, n, &buf) * r;
        }
        let binv = DMatrix::from_fn(n, n, |r, c| self.inverse[r][c]);
        Ok(self.matrix_m() * total * binv)
    }

    fn matrix_m(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |r, c| self.matrix[r][c])
    }

    fn rotation(&self) -> DMatrix<f64> {
        let m = self.frame_rotation.len();
        DMatrix::from_fn(m, m, |r, c| self.frame_rotation[r][c])
    }
}

/// Adapted chart at `p` for the frame as given.
pub fn adapt_chart(s: &SRStructure, p: &[f64]) -> Result<AdaptedChart> {
    adapt_chart_along(s, p, None)
}

/// Adapted chart whose first normalised field is `sum_j u_j X_j` for the unit control `u`.
pub fn adapt_chart_along(s: &SRStructure, p: &[f64], direction: Option<&[f64]>) -> Result<AdaptedChart> {
    if s.regularity != Regularity::C11 {
        return Err(Error::RegularityMismatch {
            structure: s.name.clone(),
        });
    }
    s.check_point(p)?;
    let (n, m) = (s.n, s.m);
    let a = s.frame_matrix(p);
    let rank = linalg::numerical_rank(&a, RANK_TOL);
    if rank < m {
        return Err(Error::RankDeficient { rank, expected: m });
    }
    let rot = match direction {
        None => DMatrix::identity(m, m),
        Some(u) => {
            let nu = linalg::norm(u);
            if u.len() != m || !(nu > 0.0) || !nu.is_finite() {
                return Err(Error::invalid("calibration direction must be a nonzero m-vector"));
            }
            let u = nalgebra::DVector::from_iterator(m, u.iter().map(|v| v / nu));
            let rest = linalg::null_space(&DMatrix::from_row_slice(1, m, u.as_slice()), 1e-12);
            let mut r = DMatrix::zeros(m, m);
            r.set_column(0, &u);
            for c in 0..rest.ncols().min(m - 1) {
                r.set_column(c + 1, &rest.column(c));
            }
            r
        }
    };
    let ar = &a * &rot;
    let comp = linalg::column_complement(&ar, RANK_TOL);
    let mut b = DMatrix::zeros(n, n);
    b.view_mut((0, 0), (n, m)).copy_from(&ar);
    for c in 0..comp.ncols().min(n - m) {
        b.set_column(m + c, &comp.column(c));
    }
    let mm = b
        .clone()
        .try_inverse()
        .ok_or(Error::RankDeficient { rank, expected: m })?;
    Ok(AdaptedChart {
        base: ChartPoint(p.to_vec()),
        matrix: rows_of(&mm),
        inverse: rows_of(&b),
        frame_rotation: rows_of(&rot),
    })
}

/// `c(x')` with `H((0, x'), c e_1^*) = 1/2`, and the seed point in the original chart.
fn seed_scale(s: &SRStructure, chart: &AdaptedChart, xprime: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut y = Vec::with_capacity(s.n);
    y.push(0.0);
    y.extend_from_slice(xprime);
    let x = chart.to_chart(&y);
    s.check_point(&x)?;
    let ell = &chart.matrix[0];
    let mut xi = vec![0.0; s.n];
    // The sum over a rotated orthonormal frame equals the sum over the original one.
    let mut sum = 0.0;
    for i in 0..s.m {
        s.field(i, &x, &mut xi);
        let c = linalg::dot(ell, &xi);
        sum += c * c;
    }
    if !(sum > SEED_TOL) {
        return Err(Error::SeedDegenerate {
            at: xprime.to_vec(),
            norm: sum.sqrt(),
        });
    }
    Ok((1.0 / sum.sqrt(), x))
}

/// Seed covector `c(x') e_1^*` at `(0, x')`, in adapted coordinates.
pub fn seed_covector(s: &SRStructure, chart: &AdaptedChart, xprime: &[f64]) -> Result<Vec<f64>> {
    if xprime.len() + 1 != s.n {
        return Err(Error::invalid("x' must have n - 1 coordinates"));
    }
    let (c, _) = seed_scale(s, chart, xprime)?;
    let mut xi = vec![0.0; s.n];
    xi[0] = c;
    Ok(xi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub eps: f64,
    pub uprime_half: f64,
    /// Grid points per axis of `U'`.
    pub resolution: usize,
    /// Grid points on `[-eps, eps]` (odd, so that `t = 0` is a node).
    pub time_samples: usize,
    /// RK4 steps between consecutive time nodes.
    pub substeps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub jac_lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    /// Defaults to a quarter of the smallest domain half-width.
    pub eps: Option<f64>,
    /// Half-width of the cube `U'`; same default as `eps`.
    pub uprime_half: Option<f64>,
    pub resolution: usize,
    pub time_samples: usize,
    pub substeps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub jac_lower_bound: f64,
    pub max_rounds: usize,
    /// Unit control at `p` giving the direction of `Y(p)`; `None` means `X_1(p)`.
    pub direction: Option<Vec<f64>>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            eps: None,
            uprime_half: None,
            resolution: 17,
            time_samples: 65,
            substeps: 4,
            newton_tol: 1e-12,
            newton_max_iter: 40,
            jac_lower_bound: 0.1,
            max_rounds: 8,
            direction: None,
        }
    }
}

/// The calibration `(W, Y, Lambda)` near a base point.
#[derive(Debug, Clone)]
pub struct CalibrationField {
    pub structure: SRStructure,
    pub chart: AdaptedChart,
    pub settings: CalibrationSettings,
    /// Shrink rounds used before the invariants held.
    pub shrink_rounds: usize,
    /// Box around the base point (original chart) whose boundary inverts; taken as inside `W`.
    pub w_box: DomainBox,
    /// Smallest `det DQ` over the grid.
    pub min_det: f64,
    /// Largest `|sum_i <Lambda, X_i>^2 - 1|` over the grid.
    pub max_unit_defect: f64,
    /// Node-major `Q` values (original chart), `n` per node.
    pub q_table: Vec<f64>,
    /// Node-major `Lambda` values (original chart), `n` per node.
    pub lam_table: Vec<f64>,
    qa: Vec<f64>,
    dq: Vec<f64>,
}

/// Solution of `Q(t, x') = x` together with `Lambda(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preimage {
    pub t: f64,
    pub xprime: Vec<f64>,
    /// `Q(t, x')` as re-integrated.
    pub q: Vec<f64>,
    pub lam: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDirection {
    /// `Y(x)` in the original chart.
    pub vector: Vec<f64>,
    /// `h_i = <Lambda(x), X_i(x)>`.
    pub controls: Vec<f64>,
    pub lam: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    format: String,
    structure: StructureSource,
    chart: AdaptedChart,
    settings: CalibrationSettings,
    shrink_rounds: usize,
    w_box: DomainBox,
    min_det: f64,
    max_unit_defect: f64,
    q_table: Vec<f64>,
    lam_table: Vec<f64>,
}

struct Marcher<'a> {
    rhs: HamiltonianRhs<'a, SRStructure>,
    rk: Rk4,
    s: &'a SRStructure,
}

impl<'a> Marcher<'a> {
    fn new(s: &'a SRStructure) -> Self {
        Marcher {
            rhs: HamiltonianRhs::new(s),
            rk: Rk4::new(2 * s.n),
            s,
        }
    }

    /// One step; false when the new point left the domain.
    fn step(&mut self, y: &mut [f64], h: f64) -> Result<bool> {
        let rhs = &mut self.rhs;
        self.rk.step(&mut |u: &[f64], du: &mut [f64]| rhs.eval(u, du), y, h)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: h });
        }
        Ok(self.s.domain.contains(&y[..self.s.n]))
    }
}

enum Attempt {
    Built(Box<CalibrationField>),
    Violation(String, Option<Error>),
}

impl CalibrationField {
    pub fn dim(&self) -> usize {
        self.structure.n
    }

    pub fn eps(&self) -> f64 {
        self.settings.eps
    }

    fn half(&self) -> usize {
        (self.settings.time_samples - 1) / 2
    }

    fn dt(&self) -> f64 {
        self.settings.eps / self.half() as f64
    }

    fn step_size(&self) -> f64 {
        self.dt() / self.settings.substeps as f64
    }

    fn dx(&self) -> f64 {
        if self.settings.resolution > 1 {
            2.0 * self.settings.uprime_half / (self.settings.resolution - 1) as f64
        } else {
            0.0
        }
    }

    fn seeds(&self) -> usize {
        self.settings.resolution.pow(self.dim() as u32 - 1)
    }

    fn node_count(&self) -> usize {
        self.settings.time_samples * self.seeds()
    }

    fn seed_digits(&self, j: usize) -> Vec<usize> {
        let res = self.settings.resolution;
        let mut digits = Vec::with_capacity(self.dim() - 1);
        let mut rest = j;
        for _ in 1..self.dim() {
            digits.push(rest % res);
            rest /= res;
        }
        digits
    }

    fn seed_index(&self, digits: &[usize]) -> usize {
        let res = self.settings.resolution;
        digits.iter().rev().fold(0, |acc, &d| acc * res + d)
    }

    fn node_xprime(&self, j: usize) -> Vec<f64> {
        let u = self.settings.uprime_half;
        let dx = self.dx();
        self.seed_digits(j).iter().map(|&d| -u + d as f64 * dx).collect()
    }

    fn node_time(&self, k: usize) -> f64 {
        (k as f64 - self.half() as f64) * self.dt()
    }

    /// Node `(k, j)` lives at `k * seeds + j`.
    fn node_params(&self, node: usize) -> Vec<f64> {
        let seeds = self.seeds();
        let mut z = vec![self.node_time(node / seeds)];
        z.extend(self.node_xprime(node % seeds));
        z
    }

    pub fn table_q(&self, node: usize) -> &[f64] {
        let n = self.dim();
        &self.q_table[node * n..(node + 1) * n]
    }

    pub fn table_lam(&self, node: usize) -> &[f64] {
        let n = self.dim();
        &self.lam_table[node * n..(node + 1) * n]
    }

    /// Parameters `(t, x')` of every table node, in node order.
    pub fn table_params(&self) -> Vec<Vec<f64>> {
        (0..self.node_count()).map(|k| self.node_params(k)).collect()
    }

    fn seed_state(&self, xprime: &[f64]) -> Result<Vec<f64>> {
        let (c, x) = seed_scale(&self.structure, &self.chart, xprime)?;
        let mut y = x;
        y.extend(self.chart.matrix[0].iter().map(|v| c * v));
        Ok(y)
    }

    /// `(Q, Lambda)(t, x')` packed, integrating with the table step; `None` on leaving the domain.
    fn flow_params(&self, z: &[f64], marcher: &mut Marcher<'_>) -> Result<Option<Vec<f64>>> {
        let t = z[0];
        let mut y = match self.seed_state(&z[1..]) {
            Ok(y) => y,
            Err(Error::PointOutsideDomain { .. }) | Err(Error::SeedDegenerate { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let h = self.step_size();
        let ratio = t.abs() / h;
        let full = (ratio + 1e-9).floor();
        let mut rem = t.abs() - full * h;
        if rem < 1e-12 * h {
            rem = 0.0;
        }
        let sign = if t < 0.0 { -1.0 } else { 1.0 };
        for _ in 0..full as usize {
            if !marcher.step(&mut y, sign * h)? {
                return Ok(None);
            }
        }
        if rem > 0.0 && !marcher.step(&mut y, sign * rem)? {
            return Ok(None);
        }
        Ok(Some(y))
    }

    fn in_hull(&self, z: &[f64], slack: f64) -> bool {
        let e = self.settings.eps * (1.0 + slack);
        let u = self.settings.uprime_half * (1.0 + slack);
        z[0].abs() <= e && z[1..].iter().all(|v| v.abs() <= u)
    }

    fn nearest_nodes(&self, y: &[f64], count: usize) -> Vec<usize> {
        let n = self.dim();
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(count + 1);
        for (node, qa) in self.qa.chunks_exact(n).enumerate() {
            let d: f64 = qa.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() < count || d < best[best.len() - 1].0 {
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, node));
                best.truncate(count);
            }
        }
        best.into_iter().map(|(_, k)| k).collect()
    }

    fn fd_params_jacobian(&self, z: &[f64], base: &[f64], marcher: &mut Marcher<'_>) -> Result<Option<DMatrix<f64>>> {
        let n = self.dim();
        let mut j = DMatrix::zeros(n, n);
        let mut zp = z.to_vec();
        for c in 0..n {
            let scale = if c == 0 {
                self.settings.eps
            } else {
                self.settings.uprime_half
            };
            let d = 1e-7 * scale.max(1e-3);
            zp[c] = z[c] + d;
            let Some(y) = self.flow_params(&zp, marcher)? else {
                return Ok(None);
            };
            let qa = self.chart.to_adapted(&y[..n]);
            for r in 0..n {
                j[(r, c)] = (qa[r] - base[r]) / d;
            }
            zp[c] = z[c];
        }
        Ok(Some(j))
    }

    fn newton_from(&self, node: usize, target: &[f64], marcher: &mut Marcher<'_>) -> Result<Option<Preimage>> {
        let n = self.dim();
        let tol = self.settings.newton_tol * (1.0 + linalg::norm(target));
        let mut jac = DMatrix::from_column_slice(n, n, &self.dq[node * n * n..(node + 1) * n * n]);
        let mut z = self.node_params(node);
        let f0: Vec<f64> = self.qa[node * n..(node + 1) * n]
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        if f0.iter().any(|v| *v != 0.0) {
            let Some(dz) = jac.clone().lu().solve(&nalgebra::DVector::from_vec(f0)) else {
                return Ok(None);
            };
            for (zi, d) in z.iter_mut().zip(dz.iter()) {
                *zi -= d;
            }
        }
        let mut prev = f64::INFINITY;
        for it in 1..=self.settings.newton_max_iter {
            if !self.in_hull(&z, 0.5) {
                return Ok(None);
            }
            let Some(y) = self.flow_params(&z, marcher)? else {
                return Ok(None);
            };
            let qa = self.chart.to_adapted(&y[..n]);
            let f: Vec<f64> = qa.iter().zip(target).map(|(a, b)| a - b).collect();
            let r = linalg::norm(&f);
            if r <= tol {
                if !self.in_hull(&z, 1e-9) {
                    return Ok(None);
                }
                return Ok(Some(Preimage {
                    t: z[0],
                    xprime: z[1..].to_vec(),
                    q: y[..n].to_vec(),
                    lam: y[n..].to_vec(),
                    residual: r,
                    iterations: it,
                }));
            }
            if r > 0.25 * prev {
                match self.fd_params_jacobian(&z, &qa, marcher)? {
                    Some(j) => jac = j,
                    None => return Ok(None),
                }
            }
            prev = r;
            let Some(dz) = jac.clone().lu().solve(&nalgebra::DVector::from_vec(f)) else {
                return Ok(None);
            };
            for (zi, d) in z.iter_mut().zip(dz.iter()) {
                *zi -= d;
            }
        }
        Ok(None)
    }

    /// Solves `Q(t, x') = x` from the four nearest table nodes.
    pub fn invert(&self, x: &[f64]) -> Result<Preimage> {
        let n = self.dim();
        let outside = || Error::OutsideCalibratedSet { point: x.to_vec() };
        if x.len() != n || !x.iter().all(|v| v.is_finite()) || !self.structure.domain.contains(x) {
            return Err(outside());
        }
        let y = self.chart.to_adapted(x);
        let mut marcher = Marcher::new(&self.structure);
        for node in self.nearest_nodes(&y, 4) {
            if let Some(pre) = self.newton_from(node, &y, &mut marcher)? {
                return Ok(pre);
            }
        }
        Err(outside())
    }

    /// `Q(t, x')` and `Lambda(t, x')` by direct integration (no inversion).
    pub fn flow_point(&self, t: f64, xprime: &[f64]) -> Result<CotangentState> {
        let n = self.dim();
        let mut z = vec![t];
        z.extend_from_slice(xprime);
        if xprime.len() + 1 != n || !self.in_hull(&z, 1e-9) {
            return Err(Error::invalid("(t, x') lies outside the parameter box"));
        }
        let mut marcher = Marcher::new(&self.structure);
        let y = self
            .flow_params(&z, &mut marcher)?
            .ok_or_else(|| Error::ConstructionFailed("flow left the domain".into()))?;
        Ok(CotangentState::new(y[..n].to_vec(), y[n..].to_vec()))
    }

    fn finish_tables(&mut self) {
        let n = self.dim();
        let nodes = self.node_count();
        self.qa = (0..nodes)
            .flat_map(|k| self.chart.to_adapted(self.table_q(k)))
            .collect();
        let mut dq = vec![0.0; nodes * n * n];
        let seeds = self.seeds();
        let nt = self.settings.time_samples;
        let res = self.settings.resolution;
        let (dt, dx) = (self.dt(), self.dx());
        for node in 0..nodes {
            let (k, j) = (node / seeds, node % seeds);
            let digits = self.seed_digits(j);
            for axis in 0..n {
                let (pos, len, spacing) = if axis == 0 {
                    (k, nt, dt)
                } else {
                    (digits[axis - 1], res, dx)
                };
                let at = |p: usize| -> usize {
                    if axis == 0 {
                        p * seeds + j
                    } else {
                        let mut d = digits.clone();
                        d[axis - 1] = p;
                        k * seeds + self.seed_index(&d)
                    }
                };
                let q = |p: usize| &self.qa[at(p) * n..at(p) * n + n];
                let col = &mut dq[node * n * n + axis * n..node * n * n + axis * n + n];
                if len < 3 {
                    col.fill(0.0);
                    col[axis] = 1.0;
                    continue;
                }
                for r in 0..n {
                    col[r] = if pos == 0 {
                        (-3.0 * q(0)[r] + 4.0 * q(1)[r] - q(2)[r]) / (2.0 * spacing)
                    } else if pos == len - 1 {
                        (3.0 * q(len - 1)[r] - 4.0 * q(len - 2)[r] + q(len - 3)[r]) / (2.0 * spacing)
                    } else {
                        (q(pos + 1)[r] - q(pos - 1)[r]) / (2.0 * spacing)
                    };
                }
            }
        }
        self.dq = dq;
    }

    fn min_table_det(&self) -> f64 {
        let n = self.dim();
        self.dq
            .chunks_exact(n * n)
            .map(|c| DMatrix::from_column_slice(n, n, c).determinant())
            .fold(f64::INFINITY, f64::min)
    }

    /// Pairs of grid nodes that are not grid neighbours but whose images nearly coincide.
    fn collision(&self) -> Option<(usize, usize)> {
        let n = self.dim();
        let mut spacing = self.dt();
        if n > 1 {
            spacing = spacing.min(self.dx());
        }
        let tau = 0.25 * spacing;
        let key = |p: &[f64]| -> Vec<i64> { p.iter().map(|v| (v / tau).floor() as i64).collect() };
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (node, qa) in self.qa.chunks_exact(n).enumerate() {
            cells.entry(key(qa)).or_default().push(node);
        }
        let seeds = self.seeds();
        let grid_pos = |node: usize| -> Vec<i64> {
            let mut v = vec![(node / seeds) as i64];
            v.extend(self.seed_digits(node % seeds).iter().map(|&d| d as i64));
            v
        };
        let offsets: Vec<Vec<i64>> = (0..3usize.pow(n as u32))
            .map(|mut c| {
                (0..n)
                    .map(|_| {
                        let d = (c % 3) as i64 - 1;
                        c /= 3;
                        d
                    })
                    .collect()
            })
            .collect();
        for (node, qa) in self.qa.chunks_exact(n).enumerate() {
            let base = key(qa);
            let gp = grid_pos(node);
            for off in &offsets {
                let cell: Vec<i64> = base.iter().zip(off).map(|(a, b)| a + b).collect();
                let Some(others) = cells.get(&cell) else {
                    continue;
                };
                for &o in others {
                    if o <= node {
                        continue;
                    }
                    let go = grid_pos(o);
                    let far = gp.iter().zip(&go).any(|(a, b)| (a - b).abs() >= 2);
                    if far && linalg::dist(qa, &self.qa[o * n..o * n + n]) < tau {
                        return Some((node, o));
                    }
                }
            }
        }
        None
    }

    /// Points on the boundary of the cube of half-width `rho` around the base.
    fn cube_boundary(&self, rho: f64, per_axis: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let p = &self.chart.base;
        let mut out = Vec::new();
        let face_pts = per_axis.pow(n as u32 - 1);
        for axis in 0..n {
            for side in [-1.0, 1.0] {
                for idx in 0..face_pts {
                    let mut rest = idx;
                    let mut x = p.to_vec();
                    for d in 0..n {
                        if d == axis {
                            x[d] += side * rho;
                        } else {
                            let k = rest % per_axis;
                            rest /= per_axis;
                            x[d] += rho * (-1.0 + 2.0 * k as f64 / (per_axis - 1) as f64);
                        }
                    }
                    out.push(x);
                }
            }
        }
        out
    }

    /// Largest tested cube around the base whose sampled boundary lies in `W`.
    fn find_w_box(&self) -> Option<DomainBox> {
        let n = self.dim();
        let p = &self.chart.base;
        let mut rho = f64::INFINITY;
        for (k, row) in self.chart.matrix.iter().enumerate() {
            let half = if k == 0 {
                self.settings.eps
            } else {
                self.settings.uprime_half
            };
            let l1: f64 = row.iter().map(|v| v.abs()).sum();
            rho = rho.min(0.95 * half / l1);
        }
        rho = rho.min(self.structure.domain.distance_to_boundary(p));
        let per_axis = if n <= 3 { 7 } else { 3 };
        for _ in 0..12 {
            if !(rho > 0.0) {
                return None;
            }
            let ok = self
                .cube_boundary(rho, per_axis)
                .par_iter()
                .all(|x| self.invert(x).is_ok());
            if ok {
                return Some(DomainBox::centered(p, rho));
            }
            rho *= 0.7;
        }
        None
    }

    fn attempt(s: &SRStructure, chart: &AdaptedChart, settings: CalibrationSettings, round: usize) -> Result<Attempt> {
        let n = s.n;
        let mut cf = CalibrationField {
            structure: s.clone(),
            chart: chart.clone(),
            settings,
            shrink_rounds: round,
            w_box: s.domain.clone(),
            min_det: 0.0,
            max_unit_defect: 0.0,
            q_table: Vec::new(),
            lam_table: Vec::new(),
            qa: Vec::new(),
            dq: Vec::new(),
        };
        let seeds = cf.seeds();
        let nt = cf.settings.time_samples;
        let half = cf.half();
        let h = cf.step_size();
        let substeps = cf.settings.substeps;

        // Column j holds the packed states at all time nodes for seed j.
        let columns: Vec<Result<std::result::Result<Vec<Vec<f64>>, String>>> = (0..seeds)
            .into_par_iter()
            .map(|j| {
                let xprime = cf.node_xprime(j);
                let y0 = match cf.seed_state(&xprime) {
                    Ok(y) => y,
                    Err(Error::PointOutsideDomain { .. }) => {
                        return Ok(Err(format!("seed at x' = {xprime:?} lies outside the domain")))
                    }
                    Err(e) => return Err(e),
                };
                let mut col = vec![Vec::new(); nt];
                col[half] = y0.clone();
                let mut marcher = Marcher::new(s);
                for sign in [1.0, -1.0] {
                    let mut y = y0.clone();
                    for k in 1..=half {
                        for _ in 0..substeps {
                            let inside = match marcher.step(&mut y, sign * h) {
                                Ok(b) => b,
                                Err(Error::NonFiniteState { .. }) => {
                                    return Ok(Err("non-finite state along a seed extremal".into()))
                                }
                                Err(e) => return Err(e),
                            };
                            if !inside {
                                return Ok(Err(format!(
                                    "extremal from x' = {xprime:?} reached the domain boundary"
                                )));
                            }
                        }
                        let idx = if sign > 0.0 { half + k } else { half - k };
                        col[idx] = y.clone();
                    }
                }
                Ok(Ok(col))
            })
            .collect();
        let mut cols = Vec::with_capacity(seeds);
        for c in columns {
            match c {
                Ok(Ok(col)) => cols.push(col),
                Ok(Err(msg)) => return Ok(Attempt::Violation(msg, None)),
                Err(e @ Error::SeedDegenerate { .. }) => return Ok(Attempt::Violation(e.to_string(), Some(e))),
                Err(e) => return Err(e),
            }
        }
        cf.q_table = Vec::with_capacity(nt * seeds * n);
        cf.lam_table = Vec::with_capacity(nt * seeds * n);
        for k in 0..nt {
            for col in &cols {
                cf.q_table.extend_from_slice(&col[k][..n]);
                cf.lam_table.extend_from_slice(&col[k][n..]);
            }
        }
        let mut defect: f64 = 0.0;
        for node in 0..cf.node_count() {
            let hsum = 2.0 * crate::hamiltonian::hamiltonian_on(s, cf.table_q(node), cf.table_lam(node));
            defect = defect.max((hsum - 1.0).abs());
        }
        cf.max_unit_defect = defect;
        if !(defect <= UNIT_TOL) {
            return Ok(Attempt::Violation(
                format!("unit defect {defect:e} exceeds {UNIT_TOL:e}"),
                None,
            ));
        }
        cf.finish_tables();
        cf.min_det = cf.min_table_det();
        if !(cf.min_det >= cf.settings.jac_lower_bound) {
            return Ok(Attempt::Violation(
                format!(
                    "det DQ = {:e} below the bound {:e}",
                    cf.min_det, cf.settings.jac_lower_bound
                ),
                None,
            ));
        }
        if let Some((a, b)) = cf.collision() {
            return Ok(Attempt::Violation(
                format!("grid images of nodes {a} and {b} collide"),
                None,
            ));
        }
        match cf.find_w_box() {
            Some(b) => cf.w_box = b,
            None => return Ok(Attempt::Violation("no box around the base point inverts".into(), None)),
        }
        Ok(Attempt::Built(Box::new(cf)))
    }

    pub fn to_json(&self) -> Result<String> {
        if self.structure.source == StructureSource::Derived {
            return Err(Error::Schema(
                "calibrations of derived structures cannot be exported".into(),
            ));
        }
        let file = CalibrationFile {
            format: FILE_FORMAT.into(),
            structure: self.structure.source.clone(),
            chart: self.chart.clone(),
            settings: self.settings.clone(),
            shrink_rounds: self.shrink_rounds,
            w_box: self.w_box.clone(),
            min_det: self.min_det,
            max_unit_defect: self.max_unit_defect,
            q_table: self.q_table.clone(),
            lam_table: self.lam_table.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.format != FILE_FORMAT {
            return Err(Error::Schema(format!("unsupported format `{}`", file.format)));
        }
        let structure = file.structure.instantiate()?;
        let n = structure.n;
        let st = &file.settings;
        if file.chart.dim() != n
            || file.chart.matrix.len() != n
            || file.chart.inverse.len() != n
            || file.chart.frame_rotation.len() != structure.m
            || st.time_samples < 3
            || st.time_samples.is_multiple_of(2)
            || st.substeps == 0
            || (n > 1 && st.resolution < 3)
        {
            return Err(Error::Schema("calibration settings do not match the structure".into()));
        }
        let mut cf = CalibrationField {
            structure,
            chart: file.chart,
            settings: file.settings,
            shrink_rounds: file.shrink_rounds,
            w_box: file.w_box,
            min_det: file.min_det,
            max_unit_defect: file.max_unit_defect,
            q_table: file.q_table,
            lam_table: file.lam_table,
            qa: Vec::new(),
            dq: Vec::new(),
        };
        let expected = cf.node_count() * n;
        if cf.q_table.len() != expected || cf.lam_table.len() != expected {
            return Err(Error::Schema(format!("flow tables must hold {expected} values each")));
        }
        cf.finish_tables();
        Ok(cf)
    }
}

/// Builds the calibration at `p` with the given time half-width and grid resolution.
pub fn build_calibration(s: &SRStructure, p: &[f64], eps: f64, grid_resolution: usize) -> Result<CalibrationField> {
    let opts = CalibrationOptions {
        eps: Some(eps),
        resolution: grid_resolution,
        ..CalibrationOptions::default()
    };
    build_calibration_with(s, p, &opts)
}

/// Builds the flow table, checks the invariants and shrinks `eps` and `U'`
/// alternately (at most `max_rounds` times) until they hold.
pub fn build_calibration_with(s: &SRStructure, p: &[f64], opts: &CalibrationOptions) -> Result<CalibrationField> {
    let chart = adapt_chart_along(s, p, opts.direction.as_deref())?;
    let n = s.n;
    if opts.time_samples < 3 || opts.time_samples.is_multiple_of(2) {
        return Err(Error::invalid("time_samples must be odd and at least 3"));
    }
    if n > 1 && opts.resolution < 3 {
        return Err(Error::invalid("grid resolution must be at least 3"));
    }
    if opts.substeps == 0 || opts.newton_max_iter == 0 {
        return Err(Error::invalid("substeps and newton_max_iter must be positive"));
    }
    let default = 0.25 * s.domain.min_half_width();
    let mut eps = opts.eps.unwrap_or(default);
    let mut uh = opts.uprime_half.unwrap_or(default);
    if !(eps > 0.0 && eps.is_finite() && uh > 0.0 && uh.is_finite()) {
        return Err(Error::invalid("eps and the U' half-width must be positive"));
    }
    let mut last = String::new();
    let mut last_err = None;
    for round in 0..=opts.max_rounds {
        let settings = CalibrationSettings {
            eps,
            uprime_half: uh,
            resolution: if n > 1 { opts.resolution } else { 1 },
            time_samples: opts.time_samples,
            substeps: opts.substeps,
            newton_tol: opts.newton_tol,
            newton_max_iter: opts.newton_max_iter,
            jac_lower_bound: opts.jac_lower_bound,
        };
        match CalibrationField::attempt(s, &chart, settings, round)? {
            Attempt::Built(cf) => return Ok(*cf),
            Attempt::Violation(msg, err) => {
                last = msg;
                last_err = err;
            }
        }
        if round % 2 == 0 {
            eps *= 0.5;
        } else {
            uh *= 0.5;
        }
    }
    if let Some(e) = last_err {
        return Err(e);
    }
    Err(Error::ConstructionFailed(format!(
        "invariants still violated after {} shrink rounds: {last}",
        opts.max_rounds
    )))
}

/// `Lambda(x)` in the original chart.
pub fn evaluate_calibration(cf: &CalibrationField, x: &[f64]) -> Result<Vec<f64>> {
    Ok(cf.invert(x)?.lam)
}

/// `Y(x) = sum_i h_i X_i(x)` with `h_i = <Lambda(x), X_i(x)>`.
pub fn calibrated_direction(cf: &CalibrationField, x: &[f64]) -> Result<CalibratedDirection> {
    let lam = evaluate_calibration(cf, x)?;
    Ok(direction_from(&cf.structure, x, lam))
}

fn direction_from(s: &SRStructure, x: &[f64], lam: Vec<f64>) -> CalibratedDirection {
    let a = s.frame_matrix(x);
    let controls: Vec<f64> = (0..s.m)
        .map(|i| a.column(i).iter().zip(&lam).map(|(u, v)| u * v).sum())
        .collect();
    let vector = (0..s.n)
        .map(|r| (0..s.m).map(|i| a[(r, i)] * controls[i]).sum())
        .collect();
    CalibratedDirection { vector, controls, lam }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopResidual {
    pub vertices: Vec<Vec<f64>>,
    pub perimeter: f64,
    /// Longest quadrature step per refinement level.
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub structure: String,
    pub samples: usize,
    pub seed: u64,
    /// Sample points where the inversion failed although they lie in the `W` box.
    pub failures: usize,
    /// `s = max <Lambda(x), v>` over unit horizontal `v`; exact per sample as `|h(x)|`.
    pub margin: f64,
    /// `max |<Lambda(x), Y(x)> - 1|`.
    pub unit_error: f64,
    pub loop_residuals: Vec<LoopResidual>,
    /// Fitted `C` in `residual <= C * perimeter * step^2`.
    pub loop_constant: f64,
}

/// Residuals at or below this (relative to the perimeter) count as quadrature floor.
pub const LOOP_FLOOR: f64 = 1e-12;

impl CalibrationReport {
    /// Every loop either sits at the round-off floor or shrinks by at least 3x per halving.
    pub fn loop_decay_ok(&self) -> bool {
        self.loop_residuals.iter().all(|l| {
            let floor = LOOP_FLOOR * l.perimeter.max(1.0);
            l.residuals.windows(2).all(|w| w[1] <= floor || w[1] <= w[0] / 3.0)
        })
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures == 0 && self.margin <= 1.0 + tol && self.unit_error <= tol && self.loop_decay_ok()
    }
}

const LOOPS: usize = 4;
const LOOP_LEVELS: usize = 4;

fn loop_integral(cf: &CalibrationField, vertices: &[Vec<f64>], per_edge: usize) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..vertices.len() {
        let a = &vertices[e];
        let b = &vertices[(e + 1) % vertices.len()];
        let d: Vec<f64> = b.iter().zip(a).map(|(u, v)| u - v).collect();
        let vals: Vec<f64> = (0..=per_edge)
            .into_par_iter()
            .map(|k| {
                let s = k as f64 / per_edge as f64;
                let x: Vec<f64> = a.iter().zip(&d).map(|(u, v)| u + s * v).collect();
                Ok(linalg::dot(&evaluate_calibration(cf, &x)?, &d))
            })
            .collect::<Result<_>>()?;
        let h = 1.0 / per_edge as f64;
        let inner: f64 = vals[1..per_edge].iter().sum();
        total += h * (0.5 * (vals[0] + vals[per_edge]) + inner);
    }
    Ok(total.abs())
}

/// Margin, unit error and loop exactness over `sample_count` points of the `W` box.
pub fn verify_calibration(cf: &CalibrationField, sample_count: usize, seed: u64) -> CalibrationReport {
    let halton = Halton::new(cf.dim(), seed);
    let results: Vec<Option<(f64, f64)>> = (0..sample_count as u64)
        .into_par_iter()
        .map(|i| {
            let x = halton.in_box(i, &cf.w_box);
            let lam = evaluate_calibration(cf, &x).ok()?;
            let d = direction_from(&cf.structure, &x, lam);
            let h2: f64 = d.controls.iter().map(|v| v * v).sum();
            Some((h2.sqrt(), (h2 - 1.0).abs()))
        })
        .collect();
    let mut margin: f64 = 0.0;
    let mut unit_error: f64 = 0.0;
    let mut failures = 0;
    for r in &results {
        match r {
            Some((s, u)) => {
                margin = margin.max(*s);
                unit_error = unit_error.max(*u);
            }
            None => failures += 1,
        }
    }

    let inner = cf.w_box.scaled(0.8);
    let mut loops = Vec::with_capacity(LOOPS);
    let mut constant: f64 = 0.0;
    for l in 0..LOOPS {
        let mut rng = stream_rng(seed, 1 + l as u64);
        let vertices: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                inner
                    .min
                    .iter()
                    .zip(&inner.max)
                    .map(|(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
                    .collect()
            })
            .collect();
        let edges: Vec<f64> = (0..3)
            .map(|e| linalg::dist(&vertices[e], &vertices[(e + 1) % 3]))
            .collect();
        let perimeter: f64 = edges.iter().sum();
        let longest = edges.iter().copied().fold(0.0, f64::max);
        let mut steps = Vec::new();
        let mut residuals = Vec::new();
        for level in 0..LOOP_LEVELS {
            let per_edge = 4usize << level;
            match loop_integral(cf, &vertices, per_edge) {
                Ok(r) => {
                    let eta = longest / per_edge as f64;
                    steps.push(eta);
                    residuals.push(r);
                    if perimeter > 0.0 && eta > 0.0 {
                        constant = constant.max(r / (perimeter * eta * eta));
                    }
                }
                Err(_) => {
                    failures += 1;
                    break;
                }
            }
        }
        loops.push(LoopResidual {
            vertices,
            perimeter,
            steps,
            residuals,
        });
    }
    CalibrationReport {
        structure: cf.structure.name.clone(),
        samples: sample_count,
        seed,
        failures,
        margin,
        unit_error,
        loop_residuals: loops,
        loop_constant: constant,
    }
}

/// The calibrated curve through `p` with what is needed for its minimality certificate.
#[derive(Debug, Clone)]
pub struct GeodesicThrough {
    /// Normal extremal on `[-r, r]`, `times[k]` running from `-r` to `r`.
    pub curve: ExtremalTrajectory,
    /// Sub-Riemannian length, `sum |h| dt` (trapezoidal).
    pub length: f64,
    /// Verified calibration margin.
    pub margin: f64,
    pub calibration: CalibrationField,
}

impl GeodesicThrough {
    pub fn start(&self) -> &[f64] {
        &self.curve.states[0].q
    }

    pub fn end(&self) -> &[f64] {
        &self.curve.final_state().q
    }
}

/// Builds the calibration at `p` (with `eps > r`) and returns the integral curve of `Y` through `p` on `[-r, r]`.
pub fn minimizing_geodesic_through(
    s: &SRStructure,
    p: &[f64],
    r: f64,
    opts: &CalibrationOptions,
    verify_samples: usize,
    seed: u64,
) -> Result<GeodesicThrough> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::invalid("r must be positive"));
    }
    let mut opts = opts.clone();
    let default = 0.25 * s.domain.min_half_width();
    opts.eps = Some(opts.eps.unwrap_or(default).max(1.25 * r));
    let cf = build_calibration_with(s, p, &opts)?;
    if cf.eps() <= r {
        return Err(Error::ConstructionFailed(format!(
            "calibration only reaches eps = {} <= r = {r}",
            cf.eps()
        )));
    }
    let lam0 = cf.table_lam(cf.half() * cf.seeds() + cf.seeds() / 2).to_vec();
    let st0 = CotangentState::new(p.to_vec(), lam0);
    let steps = ((r / 1e-3).ceil() as usize).max(64);
    let fwd = integrate_extremal(s, &st0, r, steps)?;
    let back = integrate_extremal(s, &st0, -r, steps)?;
    if fwd.status != crate::hamiltonian::FlowStatus::Completed
        || back.status != crate::hamiltonian::FlowStatus::Completed
    {
        return Err(Error::ConstructionFailed("calibrated curve left the domain".into()));
    }
    let mut times: Vec<f64> = back.times.iter().rev().copied().collect();
    let mut states: Vec<CotangentState> = back.states.iter().rev().cloned().collect();
    let mut h_values: Vec<f64> = back.h_values.iter().rev().copied().collect();
    times.extend(fwd.times.iter().skip(1));
    states.extend(fwd.states.iter().skip(1).cloned());
    h_values.extend(fwd.h_values.iter().skip(1));
    let h_drift = h_values.iter().map(|h| (h - 0.5).abs()).fold(0.0, f64::max);
    let curve = ExtremalTrajectory {
        times,
        states,
        h_values,
        step: fwd.step,
        status: fwd.status,
        h_drift,
        drift_bound: fwd.drift_bound,
    };
    let speeds: Vec<f64> = curve.h_values.iter().map(|h| (2.0 * h).sqrt()).collect();
    let length = curve
        .times
        .windows(2)
        .zip(speeds.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum();
    let margin = verify_calibration(&cf, verify_samples, seed).margin;
    Ok(GeodesicThrough {
        curve,
        length,
        margin,
        calibration: cf,
    })
}
