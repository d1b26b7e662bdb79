//! The sub-Riemannian Hamiltonian `H(q, lam) = 1/2 sum_i <lam, X_i(q)>^2` and
//! its normal extremals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::Rk4;
use crate::structures::{ChartPoint, Frame, Regularity, SRStructure};

/// Nominal drift bound for unit-energy extremals over unit time at step 1e-3.
pub const DRIFT_BOUND_ANALYTIC: f64 = 1e-9;
/// Same, when jacobians come from finite differences.
pub const DRIFT_BOUND_FD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotangentState {
    pub q: ChartPoint,
    pub lam: Vec<f64>,
}

impl CotangentState {
    pub fn new(q: Vec<f64>, lam: Vec<f64>) -> Self {
        CotangentState { q: ChartPoint(q), lam }
    }

    pub(crate) fn packed(&self) -> Vec<f64> {
        let mut y = self.q.0.clone();
        y.extend_from_slice(&self.lam);
        y
    }

    pub(crate) fn unpack(y: &[f64]) -> Self {
        let n = y.len() / 2;
        CotangentState::new(y[..n].to_vec(), y[n..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStatus {
    Completed,
    /// The trajectory left the domain box and was truncated at the last inside state.
    BoundaryHit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<CotangentState>,
    pub h_values: Vec<f64>,
    pub step: f64,
    pub status: FlowStatus,
    /// `max_k |H_k - H_0|`.
    pub h_drift: f64,
    pub drift_bound: f64,
}

impl ExtremalTrajectory {
    pub fn final_state(&self) -> &CotangentState {
        self.states
            .last()
            .expect("trajectories hold at least the initial state")
    }

    /// CSV with columns `t, q1..qn, lam1..lamn, H`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].q.len();
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",q{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",lam{i}"));
        }
        out.push_str(",H\n");
        for ((t, st), h) in self.times.iter().zip(&self.states).zip(&self.h_values) {
            out.push_str(&format!("{t:.16e}"));
            for v in st.q.iter().chain(&st.lam) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push_str(&format!(",{h:.16e}\n"));
        }
        out
    }
}

/// Scratch space for evaluating the Hamiltonian vector field of a frame.
pub(crate) struct HamiltonianRhs<'a, F: Frame + ?Sized> {
    frame: &'a F,
    xi: Vec<f64>,
    jac: Vec<f64>,
}

impl<'a, F: Frame + ?Sized> HamiltonianRhs<'a, F> {
    pub fn new(frame: &'a F) -> Self {
        let n = frame.dim();
        HamiltonianRhs {
            frame,
            xi: vec![0.0; n],
            jac: vec![0.0; n * n],
        }
    }

    /// `y = (q, lam)`, `dy = (dH/dlam, -dH/dq)`.
    pub fn eval(&mut self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.frame.dim();
        let (q, lam) = y.split_at(n);
        let (dq, dlam) = dy.split_at_mut(n);
        dq.fill(0.0);
        dlam.fill(0.0);
        for i in 0..self.frame.size() {
            self.frame.field(i, q, &mut self.xi);
            let h: f64 = lam.iter().zip(&self.xi).map(|(a, b)| a * b).sum();
            if h == 0.0 {
                continue;
            }
            for r in 0..n {
                dq[r] += h * self.xi[r];
            }
            self.frame.field_jacobian(i, q, &mut self.jac)?;
            // (DX_i)^T lam
            for c in 0..n {
                let mut s = 0.0;
                for r in 0..n {
                    s += self.jac[r * n + c] * lam[r];
                }
                dlam[c] -= h * s;
            }
        }
        Ok(())
    }
}

pub(crate) fn hamiltonian_on<F: Frame + ?Sized>(frame: &F, q: &[f64], lam: &[f64]) -> f64 {
    controls_on(frame, q, lam).iter().map(|h| h * h).sum::<f64>() * 0.5
}

/// `h_i = <lam, X_i(q)>`.
pub(crate) fn controls_on<F: Frame + ?Sized>(frame: &F, q: &[f64], lam: &[f64]) -> Vec<f64> {
    let mut xi = vec![0.0; frame.dim()];
    (0..frame.size())
        .map(|i| {
            frame.field(i, q, &mut xi);
            lam.iter().zip(&xi).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Raw fixed-step flow of the Hamiltonian system on any frame.
pub(crate) struct RawFlow {
    pub times: Vec<f64>,
    /// Packed `(q, lam)` states, one per recorded time.
    pub states: Vec<Vec<f64>>,
    pub status: FlowStatus,
}

/// Integrates from `y0` over `[0, total]` with `steps` equal steps, stopping at the domain boundary.
pub(crate) fn flow<F: Frame + ?Sized>(
    frame: &F,
    y0: &[f64],
    total: f64,
    steps: usize,
    record: bool,
) -> Result<RawFlow> {
    let n = frame.dim();
    let h = total / steps as f64;
    let mut rhs = HamiltonianRhs::new(frame);
    let mut f = |y: &[f64], dy: &mut [f64]| rhs.eval(y, dy);
    let mut rk = Rk4::new(2 * n);
    let mut y = y0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![y.clone()];
    let mut status = FlowStatus::Completed;
    for k in 1..=steps {
        rk.step(&mut f, &mut y, h)?;
        let t = if k == steps { total } else { k as f64 * h };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
        if !frame.contains(&y[..n]) {
            status = FlowStatus::BoundaryHit;
            break;
        }
        if record || k == steps {
            times.push(t);
            states.push(y.clone());
        }
    }
    Ok(RawFlow { times, states, status })
}

fn check_state(s: &SRStructure, st: &CotangentState) -> Result<()> {
    s.check_point(&st.q)?;
    if st.lam.len() != s.n {
        return Err(Error::invalid(format!(
            "covector has length {}, expected {}",
            st.lam.len(),
            s.n
        )));
    }
    Ok(())
}

pub fn hamiltonian(s: &SRStructure, st: &CotangentState) -> Result<f64> {
    check_state(s, st)?;
    Ok(hamiltonian_on(s, &st.q, &st.lam))
}

/// `(dq/dt, dlam/dt)` of the Hamiltonian system at `st`.
pub fn hamiltonian_vector_field(s: &SRStructure, st: &CotangentState) -> Result<(Vec<f64>, Vec<f64>)> {
    check_state(s, st)?;
    let y = st.packed();
    let mut dy = vec![0.0; 2 * s.n];
    HamiltonianRhs::new(s).eval(&y, &mut dy)?;
    let dlam = dy.split_off(s.n);
    Ok((dy, dlam))
}

/// Normal extremal from `st0` over `[0, total]` (`total` may be negative) with
/// fixed-step RK4. Refused on C0 structures, whose Hamiltonian flow need not be
/// well posed.
pub fn integrate_extremal(
    s: &SRStructure,
    st0: &CotangentState,
    total: f64,
    steps: usize,
) -> Result<ExtremalTrajectory> {
    if s.regularity != Regularity::C11 {
        return Err(Error::RegularityMismatch {
            structure: s.name.clone(),
        });
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if !total.is_finite() {
        return Err(Error::invalid("integration horizon must be finite"));
    }
    check_state(s, st0)?;
    let raw = flow(s, &st0.packed(), total, steps, true)?;
    let states: Vec<CotangentState> = raw.states.iter().map(|y| CotangentState::unpack(y)).collect();
    let h_values: Vec<f64> = states.iter().map(|st| hamiltonian_on(s, &st.q, &st.lam)).collect();
    let h_drift = h_values.iter().map(|h| (h - h_values[0]).abs()).fold(0.0, f64::max);
    Ok(ExtremalTrajectory {
        times: raw.times,
        states,
        h_values,
        step: total / steps as f64,
        status: raw.status,
        h_drift,
        drift_bound: if s.analytic_jacobians() {
            DRIFT_BOUND_ANALYTIC
        } else {
            DRIFT_BOUND_FD
        },
    })
}

/// Controls `h_i(t_k) = <lam(t_k), X_i(q(t_k))>` along a trajectory.
pub fn extremal_controls(s: &SRStructure, traj: &ExtremalTrajectory) -> Vec<Vec<f64>> {
    traj.states.iter().map(|st| controls_on(s, &st.q, &st.lam)).collect()
}

/// Rescales `lam` so that `H(q, lam) = 1/2`.
pub fn normalize_to_unit_energy(s: &SRStructure, st: &CotangentState) -> Result<CotangentState> {
    let h = hamiltonian(s, st)?;
    if h <= 0.0 {
        return Err(Error::invalid("covector annihilates the horizontal space"));
    }
    let c = 1.0 / (2.0 * h).sqrt();
    Ok(CotangentState::new(
        st.q.0.clone(),
        st.lam.iter().map(|v| v * c).collect(),
    ))
}
