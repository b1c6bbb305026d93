//! Explicit Runge–Kutta integrators for `dy/dt = f(t, y)` on `R^n`.
//!
//! [`Dopri5`] is the embedded 5(4) Dormand–Prince pair with step-size
//! control and the 4th-order continuous extension for dense output.
//! [`Rk4`] is classical fixed-step RK4, whose step sequence (and therefore
//! result) does not depend on tolerances.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64, state: DVector<f64> },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64, state: DVector<f64> },
    #[error("invalid integration interval or output times")]
    InvalidInterval,
}

/// Solution sampled at the requested output times.
#[derive(Debug, Clone)]
pub struct Solution {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Solution {
    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("solution always holds the initial state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            h0: None,
            h_min: 1e-14,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
            safety: 0.9,
        }
    }
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// 5th-order weights minus the embedded 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn check_outputs(t0: f64, outputs: &[f64]) -> Result<(), OdeError> {
    let mut prev = t0;
    for &t in outputs {
        if !(t >= prev) || !t.is_finite() {
            return Err(OdeError::InvalidInterval);
        }
        prev = t;
    }
    Ok(())
}

impl Dopri5 {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    fn error_norm(&self, y: &DVector<f64>, y_new: &DVector<f64>, err: &DVector<f64>) -> f64 {
        let n = y.len().max(1) as f64;
        let sum: f64 = err
            .iter()
            .zip(y.iter().zip(y_new.iter()))
            .map(|(e, (a, b))| {
                let sc = self.atol + self.rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }

    fn initial_step<F>(&self, f: &mut F, t0: f64, y0: &DVector<f64>, f0: &DVector<f64>, span: f64) -> f64
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    {
        if let Some(h) = self.h0 {
            return h.min(span);
        }
        let sc = y0.map(|y| self.atol + self.rtol * y.abs());
        let n = y0.len().max(1) as f64;
        let d0 = (y0.component_div(&sc).norm_squared() / n).sqrt();
        let d1 = (f0.component_div(&sc).norm_squared() / n).sqrt();
        let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h = h.min(span);
        let y1 = y0 + f0 * h;
        let f1 = f(t0 + h, &y1);
        let d2 = ((&f1 - f0).component_div(&sc).norm_squared() / n).sqrt() / h;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h).min(h1).min(span).min(self.h_max)
    }

    /// Integrates from `t0` and samples the solution at every entry of
    /// `outputs` (non-decreasing, all `≥ t0`). The initial state is always
    /// included as the first sample.
    pub fn solve<F>(&self, mut f: F, t0: f64, y0: DVector<f64>, outputs: &[f64]) -> Result<Solution, OdeError>
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    {
        check_outputs(t0, outputs)?;
        let mut sol = Solution {
            times: vec![t0],
            states: vec![y0.clone()],
            accepted_steps: 0,
            rejected_steps: 0,
        };
        let t_end = outputs.last().copied().unwrap_or(t0);
        let mut next_out = 0;
        while next_out < outputs.len() && outputs[next_out] <= t0 {
            sol.times.push(outputs[next_out]);
            sol.states.push(y0.clone());
            next_out += 1;
        }
        if t_end <= t0 {
            return Ok(sol);
        }

        let mut t = t0;
        let mut y = y0;
        let mut k1 = f(t, &y);
        let mut h = self.initial_step(&mut f, t, &y, &k1, t_end - t0);
        let mut steps = 0usize;
        let mut last_rejected = false;

        while t < t_end {
            if steps >= self.max_steps {
                return Err(OdeError::TooManySteps(self.max_steps));
            }
            steps += 1;
            if h < self.h_min * t.abs().max(1.0) {
                return Err(OdeError::StepSizeUnderflow { t, h, state: y });
            }
            let last = t + h >= t_end;
            if last {
                h = t_end - t;
            }

            let k2 = f(t + C2 * h, &(&y + &k1 * (A21 * h)));
            let k3 = f(t + C3 * h, &(&y + (&k1 * A31 + &k2 * A32) * h));
            let k4 = f(t + C4 * h, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
            let k5 = f(t + C5 * h, &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h));
            let k6 = f(t + h, &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h));
            let y_new = &y + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
            let k7 = f(t + h, &y_new);
            let err = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let en = self.error_norm(&y, &y_new, &err);

            if !en.is_finite() {
                if h <= self.h_min * t.abs().max(1.0) {
                    return Err(OdeError::NonFinite { t, state: y });
                }
                h *= 0.1;
                sol.rejected_steps += 1;
                last_rejected = true;
                continue;
            }

            if en <= 1.0 {
                let t_new = if last { t_end } else { t + h };
                while next_out < outputs.len() && outputs[next_out] <= t_new {
                    let theta = ((outputs[next_out] - t) / h).clamp(0.0, 1.0);
                    let dy = &y_new - &y;
                    let bspl = &k1 * h - &dy;
                    let c4 = &dy - &k7 * h - &bspl;
                    let c5 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
                    let th1 = 1.0 - theta;
                    let ys = &y + (dy + (bspl + (c4 + c5 * th1) * theta) * th1) * theta;
                    sol.times.push(outputs[next_out]);
                    sol.states.push(ys);
                    next_out += 1;
                }
                t = t_new;
                y = y_new;
                k1 = k7;
                sol.accepted_steps += 1;
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(OdeError::NonFinite { t, state: y });
                }
                let mut fac = if en == 0.0 { 5.0 } else { self.safety * en.powf(-0.2) };
                fac = fac.clamp(0.2, 5.0);
                if last_rejected {
                    fac = fac.min(1.0);
                }
                h = (h * fac).min(self.h_max);
                last_rejected = false;
            } else {
                let fac = (self.safety * en.powf(-0.2)).max(0.2);
                h *= fac;
                sol.rejected_steps += 1;
                last_rejected = true;
            }
        }
        Ok(sol)
    }
}

/// Classical fixed-step fourth-order Runge–Kutta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rk4 {
    pub dt: f64,
}

impl Rk4 {
    /// Steps of at most `dt`, shortened so that every output time is hit
    /// exactly.
    pub fn solve<F>(&self, mut f: F, t0: f64, y0: DVector<f64>, outputs: &[f64]) -> Result<Solution, OdeError>
    where
        F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    {
        check_outputs(t0, outputs)?;
        if !(self.dt > 0.0) {
            return Err(OdeError::InvalidInterval);
        }
        let mut sol = Solution {
            times: vec![t0],
            states: vec![y0.clone()],
            accepted_steps: 0,
            rejected_steps: 0,
        };
        let mut t = t0;
        let mut y = y0;
        for &target in outputs {
            let span = target - t;
            let n = (span / self.dt - 1e-9).ceil().max(0.0) as usize;
            for i in 0..n {
                let t_next = if i + 1 == n { target } else { t + self.dt };
                let h = t_next - t;
                let k1 = f(t, &y);
                let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
                let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
                let k4 = f(t + h, &(&y + &k3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                t = t_next;
                sol.accepted_steps += 1;
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(OdeError::NonFinite { t, state: y });
                }
            }
            t = target;
            sol.times.push(target);
            sol.states.push(y.clone());
        }
        Ok(sol)
    }
}
