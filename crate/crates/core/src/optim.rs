//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use crate::error::Result;
use crate::linalg::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `f` (which writes its gradient into the second argument) from `x0`.
///
/// Stops when `|grad| <= gtol`, after `max_iter` iterations, or when the line
/// search cannot decrease `f` any more.
pub fn lbfgs<F>(mut f: F, x0: Vec<f64>, gtol: f64, max_iter: usize, memory: usize) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= gtol {
            converged = true;
            break;
        }
        iterations += 1;

        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        match pairs.back() {
            Some((s, y, _)) => {
                let gamma = dot(s, y) / dot(y, y);
                d.iter_mut().for_each(|v| *v *= gamma);
            }
            None => {
                let scale = 1.0f64.min(1.0 / gnorm);
                d.iter_mut().for_each(|v| *v *= scale);
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) {
            pairs.clear();
            let scale = 1.0f64.min(1.0 / gnorm);
            d = g.iter().map(|v| -v * scale).collect();
            gd = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            let fnew = f(&xn, &mut gn)?;
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * gd {
                accepted = Some(fnew);
                break;
            }
            step *= 0.5;
        }
        let Some(fnew) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        let stalled = (fx - fnew).abs() <= 1e-16 * fx.abs().max(1e-300);
        fx = fnew;
        if stalled && pairs.is_empty() {
            break;
        }
    }
    let grad_norm = dot(&g, &g).sqrt();
    Ok(LbfgsResult {
        x,
        value: fx,
        grad_norm,
        iterations,
        converged: converged || grad_norm <= gtol,
    })
}
