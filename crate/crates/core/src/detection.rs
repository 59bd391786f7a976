//! The defender: plain CUSUM, the one-sided generalized SPRT against the
//! tilted family `{tau_theta : theta >= theta_min}`, and the recursive
//! generalized CUSUM that restarts that test at every time step.
//!
//! The generalized test on a segment of length `n` with utility sum `S`
//! fires when `sup_{theta >= theta_min} (-theta S - n b(theta)) > mu`, which
//! is the same as `S < z(n)` with
//!
//! ```text
//! z(n) = -mu/theta_n - n b(theta_n)/theta_n
//! theta_n = theta_min                     if n d(theta_min) >= mu
//!         = root of d(theta) = mu/n       if mu/n < -log pi(u_min)
//! ```
//!
//! and can never fire when `mu/n >= -log pi(u_min)`. For `n > M =
//! floor(mu / d(theta_min))` the test reduces to the CUSUM against
//! `tau_{theta_min}`, so the recursive detector keeps one CUSUM statistic
//! plus `M` windowed sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tilted::TiltedFamily;

/// `mu_alpha = log(3 (d_min + 1)^2) - log(alpha |log alpha|)`.
pub fn mu_alpha(d_min: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok((3.0 * (d_min + 1.0).powi(2)).ln() - (alpha * alpha.ln().abs()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Cusum,
    /// Windowed sum of the last `k` observations fell below `z^(k)`.
    Window(usize),
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::Cusum => write!(f, "cusum"),
            StopReason::Window(k) => write!(f, "window_{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Values outside the alphabet are an error.
    #[default]
    Strict,
    /// Values are mapped to the nearest alphabet symbol.
    SnapToNearest,
}

/// Threshold of the generalized test for a segment of `n` observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SegmentThreshold {
    /// The segment sum can never drop below the infimum.
    Unreachable,
    Reachable {
        theta: f64,
        z: f64,
    },
}

impl SegmentThreshold {
    pub fn z(&self) -> Option<f64> {
        match self {
            SegmentThreshold::Unreachable => None,
            SegmentThreshold::Reachable { z, .. } => Some(*z),
        }
    }
}

/// Analytic infimum of `mu/theta + n b(theta)/theta` over
/// `theta >= theta_min`, as the threshold on the segment sum.
pub fn segment_threshold(
    family: &TiltedFamily,
    theta_min: f64,
    d_min: f64,
    mu: f64,
    n: usize,
) -> Result<SegmentThreshold> {
    let nf = n as f64;
    let theta = if nf * d_min >= mu {
        theta_min
    } else if mu / nf >= family.kl_max() {
        return Ok(SegmentThreshold::Unreachable);
    } else {
        family.solve_theta_for_kl(mu / nf)?.theta.max(theta_min)
    };
    let z = -mu / theta - nf * family.log_partition(theta) / theta;
    Ok(SegmentThreshold::Reachable { theta, z })
}

/// Precomputed thresholds and per-symbol statistics of the recursive
/// generalized CUSUM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    family: TiltedFamily,
    pub epsilon: f64,
    /// `None` when the threshold was given directly.
    pub alpha: Option<f64>,
    pub theta_min: f64,
    pub d_min: f64,
    pub mu: f64,
    /// `windows[k - 1]` belongs to window length `k = 1..=M`.
    pub windows: Vec<SegmentThreshold>,
    /// `log(tau_{theta_min}(u) / pi(u))` per alphabet symbol.
    llr: Vec<f64>,
    /// Smallest reachable window length (`M + 1` if none).
    first_reachable: usize,
    pub observation: ObservationMode,
}

impl DetectorConfig {
    /// Calibrates `theta_min` from `epsilon` and the threshold from `alpha`.
    pub fn build(family: &TiltedFamily, epsilon: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        let theta_min = family.theta_for_epsilon(epsilon)?.theta;
        let d_min = family.kl_from_base(theta_min);
        let mu = mu_alpha(d_min, alpha)?;
        Self::assemble(family, epsilon, Some(alpha), theta_min, d_min, mu)
    }

    /// Same detector with an explicit threshold `mu > 0`.
    pub fn with_threshold(family: &TiltedFamily, epsilon: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!("threshold must be positive, got {mu}")));
        }
        let theta_min = family.theta_for_epsilon(epsilon)?.theta;
        let d_min = family.kl_from_base(theta_min);
        Self::assemble(family, epsilon, None, theta_min, d_min, mu)
    }

    fn assemble(
        family: &TiltedFamily,
        epsilon: f64,
        alpha: Option<f64>,
        theta_min: f64,
        d_min: f64,
        mu: f64,
    ) -> Result<Self> {
        let m = (mu / d_min).floor() as usize;
        let windows =
            (1..=m).map(|k| segment_threshold(family, theta_min, d_min, mu, k)).collect::<Result<Vec<_>>>()?;
        let first_reachable =
            windows.iter().position(|w| matches!(w, SegmentThreshold::Reachable { .. })).map_or(m + 1, |i| i + 1);
        Ok(Self {
            family: family.clone(),
            epsilon,
            alpha,
            theta_min,
            d_min,
            mu,
            windows,
            llr: family.log_likelihood_ratios(theta_min),
            first_reachable,
            observation: ObservationMode::Strict,
        })
    }

    pub fn with_observation_mode(mut self, mode: ObservationMode) -> Self {
        self.observation = mode;
        self
    }

    pub fn family(&self) -> &TiltedFamily {
        &self.family
    }

    /// Number of windowed sums `M = floor(mu / d(theta_min))`.
    pub fn m(&self) -> usize {
        self.windows.len()
    }

    pub fn first_reachable_window(&self) -> usize {
        self.first_reachable
    }

    pub fn llr(&self) -> &[f64] {
        &self.llr
    }

    pub fn new_state(&self) -> DetectorState {
        DetectorState {
            r: 0.0,
            q: vec![0.0; self.m()],
            t: 0,
            t1: 0,
            stopped: false,
            stop_time: None,
            stop_reason: None,
        }
    }

    pub fn symbol_index(&self, u: f64) -> Result<usize> {
        let view = self.family.view();
        match (view.index_of(u), self.observation) {
            (Some(k), _) => Ok(k),
            (None, ObservationMode::SnapToNearest) => Ok(view.nearest_index(u)),
            (None, ObservationMode::Strict) => Err(Error::NotInAlphabet(u)),
        }
    }

    /// Feeds one observed utility.
    pub fn step(&self, state: &mut DetectorState, u: f64) -> Result<Verdict> {
        if state.stopped {
            return Err(Error::AlreadyStopped(state.t));
        }
        let k = self.symbol_index(u)?;
        Ok(self.step_index(state, k))
    }

    /// Feeds the alphabet symbol with index `sym`. The state must not have
    /// stopped yet.
    pub fn step_index(&self, state: &mut DetectorState, sym: usize) -> Verdict {
        debug_assert!(!state.stopped);
        let u = self.family.alphabet()[sym];
        state.t += 1;
        state.r = (state.r + self.llr[sym]).max(0.0);

        let verdict = if state.r > self.mu {
            Verdict::Stop(StopReason::Cusum)
        } else if state.r > 0.0 {
            let since_reset = (state.t - state.t1) as usize;
            let filled = since_reset.min(self.m());
            // high k first so q[k-2] is still the previous step's Q^(k-1)
            for k in (2..=filled).rev() {
                state.q[k - 1] = u + state.q[k - 2];
            }
            if filled >= 1 {
                state.q[0] = u;
            }
            let mut verdict = Verdict::Continue;
            for k in self.first_reachable..=filled {
                if let SegmentThreshold::Reachable { z, .. } = self.windows[k - 1] {
                    if state.q[k - 1] < z {
                        verdict = Verdict::Stop(StopReason::Window(k));
                        break;
                    }
                }
            }
            verdict
        } else {
            let filled = ((state.t - 1 - state.t1) as usize).min(self.m());
            state.q[..filled].iter_mut().for_each(|q| *q = 0.0);
            state.t1 = state.t;
            Verdict::Continue
        };

        if let Verdict::Stop(reason) = verdict {
            state.stopped = true;
            state.stop_time = Some(state.t);
            state.stop_reason = Some(reason);
        }
        verdict
    }

    /// Runs a fresh detector over `stream`; returns the stop time (1-based)
    /// and reason, if any.
    pub fn run(&self, stream: &[f64]) -> Result<Option<(u64, StopReason)>> {
        let mut state = self.new_state();
        for &u in stream {
            if let Verdict::Stop(reason) = self.step(&mut state, u)? {
                return Ok(Some((state.t, reason)));
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub r: f64,
    pub triggered: Option<StopReason>,
}

impl DetectorConfig {
    /// Per-step `(t, R_t, reason)` until the stop or the end of `stream`.
    pub fn trace(&self, stream: &[f64]) -> Result<Vec<TraceRow>> {
        let mut state = self.new_state();
        let mut rows = Vec::new();
        for &u in stream {
            let verdict = self.step(&mut state, u)?;
            let triggered = match verdict {
                Verdict::Stop(reason) => Some(reason),
                Verdict::Continue => None,
            };
            rows.push(TraceRow { t: state.t, r: state.r, triggered });
            if triggered.is_some() {
                break;
            }
        }
        Ok(rows)
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("t,r,triggered\n");
    for row in rows {
        let reason = row.triggered.map_or("none".to_string(), |r| r.to_string());
        out.push_str(&format!("{},{},{}\n", row.t, crate::fmt_f64(row.r), reason));
    }
    out
}

/// Running statistics of one detector instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    /// CUSUM statistic `R_t >= 0`.
    pub r: f64,
    /// `q[k - 1]` is the sum of the last `k` observations while
    /// `t - t1 >= k`, else 0.
    pub q: Vec<f64>,
    pub t: u64,
    /// Last time `R` was 0.
    pub t1: u64,
    pub stopped: bool,
    pub stop_time: Option<u64>,
    pub stop_reason: Option<StopReason>,
}

/// Page's CUSUM against a single known alternative `tau_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainCusum {
    pub theta: f64,
    pub mu: f64,
    llr: Vec<f64>,
    alphabet: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CusumState {
    pub r: f64,
    pub t: u64,
    pub stopped: bool,
}

impl PlainCusum {
    pub fn new(family: &TiltedFamily, theta: f64, mu: f64) -> Self {
        Self { theta, mu, llr: family.log_likelihood_ratios(theta), alphabet: family.alphabet().to_vec() }
    }

    pub fn llr(&self) -> &[f64] {
        &self.llr
    }

    pub fn step_index(&self, state: &mut CusumState, sym: usize) -> Verdict {
        state.t += 1;
        state.r = (state.r + self.llr[sym]).max(0.0);
        if state.r >= self.mu {
            state.stopped = true;
            Verdict::Stop(StopReason::Cusum)
        } else {
            Verdict::Continue
        }
    }

    pub fn step(&self, state: &mut CusumState, u: f64) -> Result<Verdict> {
        if state.stopped {
            return Err(Error::AlreadyStopped(state.t));
        }
        let sym = self.alphabet.binary_search_by(|v| v.total_cmp(&u)).map_err(|_| Error::NotInAlphabet(u))?;
        Ok(self.step_index(state, sym))
    }
}

/// One CUSUM update against `tau_theta`, stopping when `R >= mu`.
pub fn cusum_step(family: &TiltedFamily, theta: f64, mu: f64, state: &mut CusumState, u: f64) -> Result<Verdict> {
    PlainCusum::new(family, theta, mu).step(state, u)
}

/// The one-sided generalized SPRT with thresholds cached per segment length.
#[derive(Debug, Clone)]
pub struct GeneralizedSprt<'a> {
    family: &'a TiltedFamily,
    theta_min: f64,
    d_min: f64,
    mu: f64,
    thresholds: Vec<Option<f64>>,
}

impl<'a> GeneralizedSprt<'a> {
    pub fn new(family: &'a TiltedFamily, theta_min: f64, mu: f64) -> Self {
        Self { family, theta_min, d_min: family.kl_from_base(theta_min), mu, thresholds: Vec::new() }
    }

    pub fn threshold(&mut self, n: usize) -> Result<Option<f64>> {
        while self.thresholds.len() < n {
            let len = self.thresholds.len() + 1;
            let z = segment_threshold(self.family, self.theta_min, self.d_min, self.mu, len)?.z();
            self.thresholds.push(z);
        }
        Ok(self.thresholds[n - 1])
    }

    /// First `t` (1-based) at which the test applied to `stream` fires.
    pub fn stop(&mut self, stream: &[f64]) -> Result<Option<u64>> {
        let mut sum = 0.0;
        for (i, u) in stream.iter().enumerate() {
            sum += u;
            if let Some(z) = self.threshold(i + 1)? {
                if sum < z {
                    return Ok(Some(i as u64 + 1));
                }
            }
        }
        Ok(None)
    }
}

/// First `t` with `sup_{theta >= theta_min} sum_{k <= t} l^theta(U_k) > mu`.
pub fn gen_sprt_stop(family: &TiltedFamily, theta_min: f64, mu: f64, stream: &[f64]) -> Result<Option<u64>> {
    GeneralizedSprt::new(family, theta_min, mu).stop(stream)
}
