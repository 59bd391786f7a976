//! Exponentially tilted attack distributions over the victim's utility
//! alphabet.
//!
//! For a base pmf `pi` on utilities `u_1 < ... < u_K` the family is
//!
//! ```text
//! tau_theta(u) = pi(u) exp(-theta u - b(theta)),   b(theta) = log sum_u pi(u) exp(-theta u)
//! ```
//!
//! with mean `u_theta = -b'(theta)` and divergence
//! `d(theta) = KL(tau_theta || pi) = theta b'(theta) - b(theta)`. As `theta`
//! grows the mean falls from `u_pi` to `u_min` and `d` rises from 0 to
//! `-log pi(u_min)`, both strictly monotone.
//!
//! Small tilts are evaluated around the base mean `c = u_pi`: with
//! `x_k = -theta (u_k - c)` the shifted log-partition is
//! `log sum_k pi_k e^{x_k}`, which keeps `d(theta) ~ theta^2 Var/2` accurate
//! near the identity tilt. Large tilts are evaluated around `u_min`, so
//! `u_theta - u_min` and `-log pi(u_min) - d(theta)` stay resolved as they
//! vanish.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::VictimView;

/// Bisection iteration cap for the two inverse problems.
pub const MAX_BISECTION_ITERS: usize = 200;
/// Absolute residual demanded from both solvers.
pub const SOLVE_TOLERANCE: f64 = 1e-10;
const MAX_BRACKET: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedFamily {
    view: VictimView,
    base_mean: f64,
    log_pmf: Vec<f64>,
    centered: Vec<f64>,
    /// `u_k - u_min`
    above_min: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaSolve {
    pub theta: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Quantities of a single tilt, computed together.
#[derive(Debug, Clone, Copy)]
struct Tilt {
    /// `log(tau_theta(u_k) / pi(u_k)) = offset_k - lp`, with `offset_k` the
    /// tilt exponent relative to `reference`.
    lp: f64,
    reference: Reference,
    mean: f64,
    /// `u_pi - u_theta`
    cost: f64,
    kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reference {
    BaseMean,
    MinUtility,
}

impl TiltedFamily {
    pub fn new(view: VictimView) -> Result<Self> {
        if view.is_empty() {
            return Err(Error::EmptyView);
        }
        let supported = view.base_pmf.iter().filter(|p| **p > 0.0).count();
        if supported != view.len() {
            return Err(Error::InvalidDistribution("family alphabet must not contain zero-mass symbols".into()));
        }
        if view.len() < 2 {
            return Err(Error::DegenerateFamily(view.len()));
        }
        let base_mean = view.mean();
        let log_pmf = view.base_pmf.iter().map(|p| p.ln()).collect();
        let centered = view.alphabet.iter().map(|u| u - base_mean).collect();
        let above_min = view.alphabet.iter().map(|u| u - view.alphabet[0]).collect();
        Ok(Self { view, base_mean, log_pmf, centered, above_min })
    }

    pub fn view(&self) -> &VictimView {
        &self.view
    }

    pub fn alphabet(&self) -> &[f64] {
        &self.view.alphabet
    }

    pub fn base_pmf(&self) -> &[f64] {
        &self.view.base_pmf
    }

    pub fn len(&self) -> usize {
        self.view.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `u_pi`
    pub fn base_mean(&self) -> f64 {
        self.base_mean
    }

    pub fn u_min(&self) -> f64 {
        self.view.alphabet[0]
    }

    /// Supremum of `d(theta)`: `-log pi(u_min)`.
    pub fn kl_max(&self) -> f64 {
        -self.log_pmf[0]
    }

    /// Largest feasible per-step attack cost `u_pi - u_min` (exclusive).
    pub fn max_epsilon(&self) -> f64 {
        self.base_mean - self.u_min()
    }

    fn offset(&self, theta: f64, k: usize, reference: Reference) -> f64 {
        match reference {
            Reference::BaseMean => -theta * self.centered[k],
            Reference::MinUtility => -theta * self.above_min[k],
        }
    }

    fn eval(&self, theta: f64) -> Tilt {
        let k_len = self.len();
        let pmf = &self.view.base_pmf;
        let top = (0..k_len).map(|k| self.offset(theta, k, Reference::BaseMean)).fold(f64::NEG_INFINITY, f64::max);
        if top <= 0.5 {
            let r = Reference::BaseMean;
            let s: f64 = (0..k_len).map(|k| pmf[k] * self.offset(theta, k, r).exp_m1()).sum();
            let lp = s.ln_1p();
            // sum pi (u - c) e^{x - lp}; the zeroth-order term sum pi (u - c)
            // vanishes analytically, so only the expm1 part is summed.
            let shift: f64 =
                (0..k_len).map(|k| pmf[k] * self.centered[k] * (self.offset(theta, k, r) - lp).exp_m1()).sum();
            Tilt { lp, reference: r, mean: self.base_mean + shift, cost: -shift, kl: (-theta * shift - lp).max(0.0) }
        } else {
            let r = Reference::MinUtility;
            // every offset is <= 0 with the u_min term exactly 0
            let s: f64 = (0..k_len).map(|k| pmf[k] * self.offset(theta, k, r).exp()).sum();
            let lp = s.ln();
            let excess: f64 =
                (0..k_len).map(|k| pmf[k] * self.above_min[k] * (self.offset(theta, k, r) - lp).exp()).sum();
            Tilt {
                lp,
                reference: r,
                mean: self.u_min() + excess,
                cost: self.max_epsilon() - excess,
                kl: (-lp - theta * excess).max(0.0),
            }
        }
    }

    /// `b(theta) = log sum_u pi(u) e^{-theta u}`.
    pub fn log_partition(&self, theta: f64) -> f64 {
        let t = self.eval(theta);
        match t.reference {
            Reference::BaseMean => t.lp - theta * self.base_mean,
            Reference::MinUtility => t.lp - theta * self.u_min(),
        }
    }

    /// `tau_theta` as a pmf over the alphabet.
    pub fn tilt(&self, theta: f64) -> Vec<f64> {
        let mut tau: Vec<f64> =
            self.log_likelihood_ratios(theta).iter().zip(&self.log_pmf).map(|(l, lp)| (lp + l).exp()).collect();
        let total: f64 = tau.iter().sum();
        tau.iter_mut().for_each(|p| *p /= total);
        tau
    }

    /// `log(tau_theta(u_k) / pi(u_k)) = -theta u_k - b(theta)`.
    pub fn log_likelihood_ratios(&self, theta: f64) -> Vec<f64> {
        let t = self.eval(theta);
        (0..self.len()).map(|k| self.offset(theta, k, t.reference) - t.lp).collect()
    }

    /// `u_theta = E_{tau_theta}[U] = -b'(theta)`.
    pub fn mean_utility(&self, theta: f64) -> f64 {
        self.eval(theta).mean
    }

    /// Expected per-step cost `u_pi - u_theta` of the tilted attack.
    pub fn expected_cost(&self, theta: f64) -> f64 {
        self.eval(theta).cost
    }

    /// `d(theta)` via the closed form `theta b'(theta) - b(theta)`.
    pub fn kl_from_base(&self, theta: f64) -> f64 {
        self.eval(theta).kl
    }

    /// `d(theta)` via the defining sum `sum tau log(tau / pi)`.
    pub fn kl_sum_form(&self, theta: f64) -> f64 {
        self.log_likelihood_ratios(theta)
            .into_iter()
            .enumerate()
            .map(|(k, llr)| {
                let tau = (self.log_pmf[k] + llr).exp();
                if tau > 0.0 {
                    tau * llr
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// `KL(tau || pi)` for an arbitrary pmf on the alphabet.
    pub fn kl_divergence(&self, tau: &[f64]) -> f64 {
        tau.iter().zip(&self.log_pmf).filter(|(t, _)| **t > 0.0).map(|(t, lp)| t * (t.ln() - lp)).sum()
    }

    pub fn mean_of(&self, tau: &[f64]) -> f64 {
        tau.iter().zip(&self.view.alphabet).map(|(t, u)| t * u).sum()
    }

    /// Attacker's asymptotic impact per unit of detectability,
    /// `g(theta) = (u_pi - u_theta) / d(theta)`. Undefined at `theta = 0`.
    pub fn impact_efficiency(&self, theta: f64) -> Result<f64> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::EfficiencyUndefined(theta));
        }
        let d = self.kl_from_base(theta);
        if d <= 0.0 {
            return Err(Error::EfficiencyUndefined(theta));
        }
        Ok(self.expected_cost(theta) / d)
    }

    /// Same ratio for an arbitrary pmf.
    pub fn efficiency_of(&self, tau: &[f64]) -> f64 {
        (self.base_mean - self.mean_of(tau)) / self.kl_divergence(tau)
    }

    /// Finds `theta >= 0` with `f(theta) = 0` for an increasing `f`
    /// starting at `f(0) <= 0`.
    fn bisect_increasing(&self, f: impl Fn(f64) -> f64) -> Result<ThetaSolve> {
        let f0 = f(0.0);
        if f0.abs() <= SOLVE_TOLERANCE {
            return Ok(ThetaSolve { theta: 0.0, residual: f0, iterations: 0 });
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut iterations = 0;
        let mut f_hi = f(hi);
        while f_hi < 0.0 {
            if f_hi.abs() <= SOLVE_TOLERANCE {
                return Ok(ThetaSolve { theta: hi, residual: f_hi, iterations });
            }
            if hi >= MAX_BRACKET {
                return Err(Error::NoConvergence { residual: f_hi, iterations });
            }
            lo = hi;
            hi *= 2.0;
            f_hi = f(hi);
            iterations += 1;
        }
        let mut best = (hi, f_hi);
        for _ in 0..MAX_BISECTION_ITERS {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if fm.abs() < best.1.abs() {
                best = (mid, fm);
            }
            if fm.abs() <= SOLVE_TOLERANCE {
                return Ok(ThetaSolve { theta: mid, residual: fm, iterations });
            }
            if fm < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        if best.1.abs() <= SOLVE_TOLERANCE {
            Ok(ThetaSolve { theta: best.0, residual: best.1, iterations })
        } else {
            Err(Error::NoConvergence { residual: best.1, iterations })
        }
    }

    /// `theta` with `u_theta = target`, for `u_min < target < u_pi`.
    pub fn solve_theta_for_mean(&self, target: f64) -> Result<ThetaSolve> {
        if !(target > self.u_min() && target < self.base_mean) {
            return Err(Error::MeanOutOfRange { target, u_min: self.u_min(), u_base: self.base_mean });
        }
        // u_theta - target is decreasing; negate it
        let shift = target - self.base_mean;
        self.bisect_increasing(|theta| shift + self.eval(theta).cost)
    }

    /// `theta_min`: the smallest tilt whose expected per-step cost is `epsilon`.
    pub fn theta_for_epsilon(&self, epsilon: f64) -> Result<ThetaSolve> {
        if !(epsilon > 0.0 && epsilon < self.max_epsilon()) {
            return Err(Error::InfeasibleEpsilon { epsilon, max_epsilon: self.max_epsilon() });
        }
        self.solve_theta_for_mean(self.base_mean - epsilon)
    }

    /// `theta` with `d(theta) = delta`, for `0 < delta < -log pi(u_min)`.
    pub fn solve_theta_for_kl(&self, delta: f64) -> Result<ThetaSolve> {
        if delta >= self.kl_max() {
            return Err(Error::KlBudgetUnreachable { delta, kl_max: self.kl_max() });
        }
        if !(delta >= 0.0) {
            return Err(Error::InvalidAttack(format!("negative KL budget {delta}")));
        }
        self.bisect_increasing(|theta| self.kl_from_base(theta) - delta)
    }

    /// Minimizer of `E_tau[U]` subject to `KL(tau || pi) <= delta`.
    pub fn optimal_attack(&self, delta: f64) -> Result<Vec<f64>> {
        let s = self.solve_theta_for_kl(delta)?;
        Ok(self.tilt(s.theta))
    }
}
