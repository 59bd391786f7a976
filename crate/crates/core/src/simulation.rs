//! Episode engine and Monte-Carlo estimators.
//!
//! Every episode owns an RNG seeded from `(master seed, scenario tag,
//! episode index)`, so results do not depend on how rayon schedules the
//! work. Scenario tags depend only on the attack label, which gives common
//! random numbers across detector thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{check_pmf, make_tilted_attack, next_change_decision, AdversaryCusum, AttackSpec, StartLaw};
use crate::detection::{mu_alpha, DetectorConfig, StopReason, Verdict};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::tilted::TiltedFamily;

pub const MAX_CENSORED_FRACTION: f64 = 0.05;
const NONE_LABEL: &str = "none";

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a, used to turn scenario labels into seed tags.
pub fn label_tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn episode_seed(master: u64, tag: u64, episode: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)).wrapping_add(episode))
}

/// Inverse-CDF sampler over alphabet indices.
#[derive(Debug, Clone)]
pub struct SymbolSampler {
    cdf: Vec<f64>,
}

impl SymbolSampler {
    pub fn new(pmf: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let x: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= x).min(self.cdf.len() - 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeConfig<'a> {
    pub detector: &'a DetectorConfig,
    pub attack: &'a AttackSpec,
    pub horizon: u64,
    pub false_alarm_cost: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Detected,
    FalseAlarm,
    CensoredNoStop,
    CensoredPreChange,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Detected => "detected",
            Outcome::FalseAlarm => "false_alarm",
            Outcome::CensoredNoStop => "censored_no_stop",
            Outcome::CensoredPreChange => "censored_pre_change",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub stop_time: Option<u64>,
    pub stop_reason: Option<StopReason>,
    /// `None` when the attack never started.
    pub change_time: Option<u64>,
    pub outcome: Outcome,
    /// `sum_{t = nu}^{min(T, horizon)} (u_pi - U_t)`.
    pub impact: f64,
    pub realized_cost: f64,
    /// `sum_{t < nu, t <= min(T, horizon)} U_t`.
    pub pre_change_utility_sum: f64,
    /// Observations fed to the detector, `min(T, horizon)`.
    pub steps: u64,
}

impl EpisodeResult {
    pub fn stopped(&self) -> bool {
        self.stop_time.is_some()
    }

    /// `T - nu + 1` for detected episodes.
    pub fn delay(&self) -> Option<u64> {
        match (self.outcome, self.stop_time, self.change_time) {
            (Outcome::Detected, Some(t), Some(nu)) => Some(t - nu + 1),
            _ => None,
        }
    }
}

/// Cost of an episode to the victim: `C - sum U` for a false alarm, the
/// impact minus the pre-change utility otherwise. Episodes without a stop
/// are evaluated at the horizon, and the false-alarm cost is only charged
/// when an alarm actually fired.
pub fn realized_cost(result: &EpisodeResult, false_alarm_cost: f64) -> f64 {
    match result.outcome {
        Outcome::FalseAlarm => false_alarm_cost - result.pre_change_utility_sum,
        Outcome::Detected | Outcome::CensoredNoStop => result.impact - result.pre_change_utility_sum,
        Outcome::CensoredPreChange => -result.pre_change_utility_sum,
    }
}

fn validate(cfg: &EpisodeConfig) -> Result<()> {
    if cfg.horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    check_pmf(cfg.detector.family(), &cfg.attack.distribution)?;
    cfg.attack.start.validate()
}

pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeResult> {
    validate(cfg)?;
    Ok(simulate(cfg, None))
}

/// Also returns the observed utilities.
pub fn run_episode_recorded(cfg: &EpisodeConfig) -> Result<(EpisodeResult, Vec<f64>)> {
    validate(cfg)?;
    let mut stream = Vec::new();
    let result = simulate(cfg, Some(&mut stream));
    Ok((result, stream))
}

fn simulate(cfg: &EpisodeConfig, mut record: Option<&mut Vec<f64>>) -> EpisodeResult {
    let det = cfg.detector;
    let family = det.family();
    let alphabet = family.alphabet();
    let u_pi = family.base_mean();
    let base = SymbolSampler::new(family.base_pmf());
    let attacked = SymbolSampler::new(&cfg.attack.distribution);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut nu = match cfg.attack.start {
        StartLaw::Fixed { t } => Some(t),
        StartLaw::Never | StartLaw::Adaptive { .. } => None,
    };
    let mut adversary = match cfg.attack.start {
        StartLaw::Adaptive { p } => Some((p, AdversaryCusum::new(family, det.theta_min))),
        _ => None,
    };

    let mut state = det.new_state();
    let mut impact = 0.0;
    let mut pre_sum = 0.0;
    let mut stop = None;
    for t in 1..=cfg.horizon {
        if let Some((p, adv)) = &adversary {
            if next_change_decision(*p, adv, &mut rng) {
                nu = Some(t);
                adversary = None;
            }
        }
        let active = nu.is_some_and(|n| t >= n);
        let sym = if active { attacked.sample(&mut rng) } else { base.sample(&mut rng) };
        let u = alphabet[sym];
        if let Some(stream) = record.as_deref_mut() {
            stream.push(u);
        }
        if active {
            impact += u_pi - u;
        } else {
            pre_sum += u;
        }
        if let Some((_, adv)) = &mut adversary {
            adv.observe(sym);
        }
        if let Verdict::Stop(reason) = det.step_index(&mut state, sym) {
            stop = Some((t, reason));
            break;
        }
    }

    let outcome = match (stop, nu) {
        (Some((t, _)), Some(n)) if t >= n => Outcome::Detected,
        (Some(_), _) => Outcome::FalseAlarm,
        (None, Some(n)) if n <= cfg.horizon => Outcome::CensoredNoStop,
        (None, _) => Outcome::CensoredPreChange,
    };
    let mut result = EpisodeResult {
        seed: cfg.seed,
        stop_time: stop.map(|s| s.0),
        stop_reason: stop.map(|s| s.1),
        change_time: nu,
        outcome,
        impact,
        realized_cost: 0.0,
        pre_change_utility_sum: pre_sum,
        steps: state.t,
    };
    result.realized_cost = realized_cost(&result, cfg.false_alarm_cost);
    result
}

/// Runs `episodes` independent episodes in parallel, in episode order.
pub fn run_episodes(
    detector: &DetectorConfig,
    attack: &AttackSpec,
    episodes: usize,
    horizon: u64,
    false_alarm_cost: f64,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    let tag = label_tag(&attack.label);
    let probe = EpisodeConfig { detector, attack, horizon, false_alarm_cost, seed };
    validate(&probe)?;
    Ok((0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = EpisodeConfig { seed: episode_seed(seed, tag, i), ..probe };
            simulate(&cfg, None)
        })
        .collect())
}

pub fn episodes_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from("episode,seed,nu,T,outcome,impact,cost\n");
    for (i, r) in results.iter().enumerate() {
        let nu = r.change_time.map_or(String::new(), |n| n.to_string());
        let t = r.stop_time.map_or(String::new(), |n| n.to_string());
        out.push_str(&format!(
            "{i},{},{nu},{t},{},{},{}\n",
            r.seed,
            r.outcome,
            fmt_f64(r.impact),
            fmt_f64(r.realized_cost)
        ));
    }
    out
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtbfaEstimate {
    /// Mean stop time with censored episodes counted at the horizon, so a
    /// lower bound when `censored_fraction > 0`.
    pub mean: f64,
    pub std_error: f64,
    pub censored_fraction: f64,
    pub episodes: usize,
}

pub fn estimate_mtbfa(detector: &DetectorConfig, episodes: usize, horizon: u64, seed: u64) -> Result<MtbfaEstimate> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let none = AttackSpec::none(detector.family());
    let results = run_episodes(detector, &none, episodes, horizon, 0.0, seed)?;
    Ok(mtbfa_from(&results, horizon))
}

fn mtbfa_from(results: &[EpisodeResult], horizon: u64) -> MtbfaEstimate {
    let times: Vec<f64> = results.iter().map(|r| r.stop_time.unwrap_or(horizon) as f64).collect();
    let censored = results.iter().filter(|r| !r.stopped()).count();
    let (mean, std_error) = mean_and_se(&times);
    MtbfaEstimate {
        mean,
        std_error,
        censored_fraction: censored as f64 / results.len() as f64,
        episodes: results.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayImpact {
    /// Mean of `T - nu + 1` over detected episodes; NaN if none.
    pub mean_delay: f64,
    pub delay_std_error: f64,
    /// Mean over all episodes (false alarms contribute 0, censored ones
    /// their impact up to the horizon).
    pub mean_impact: f64,
    pub impact_std_error: f64,
    pub detect_rate: f64,
    pub false_alarm_rate: f64,
    pub censored_fraction: f64,
    /// Mean of `min(T, horizon)` over all episodes.
    pub mean_steps: f64,
    pub steps_std_error: f64,
    pub episodes: usize,
}

fn delay_impact_from(results: &[EpisodeResult]) -> DelayImpact {
    let n = results.len() as f64;
    let delays: Vec<f64> = results.iter().filter_map(|r| r.delay()).map(|d| d as f64).collect();
    let impacts: Vec<f64> = results.iter().map(|r| r.impact).collect();
    let steps: Vec<f64> = results.iter().map(|r| r.steps as f64).collect();
    let count = |o: Outcome| results.iter().filter(|r| r.outcome == o).count() as f64 / n;
    let (mean_delay, delay_std_error) = mean_and_se(&delays);
    let (mean_impact, impact_std_error) = mean_and_se(&impacts);
    let (mean_steps, steps_std_error) = mean_and_se(&steps);
    DelayImpact {
        mean_delay,
        delay_std_error,
        mean_impact,
        impact_std_error,
        detect_rate: count(Outcome::Detected),
        false_alarm_rate: count(Outcome::FalseAlarm),
        censored_fraction: count(Outcome::CensoredNoStop) + count(Outcome::CensoredPreChange),
        mean_steps,
        steps_std_error,
        episodes: results.len(),
    }
}

/// Same as [`estimate_delay_and_impact`] but reports NaN delay instead of
/// failing when nothing is detected.
pub fn delay_and_impact_stats(
    detector: &DetectorConfig,
    attack: &AttackSpec,
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<DelayImpact> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    let results = run_episodes(detector, attack, episodes, horizon, 0.0, seed)?;
    Ok(delay_impact_from(&results))
}

pub fn estimate_delay_and_impact(
    detector: &DetectorConfig,
    attack: &AttackSpec,
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<DelayImpact> {
    let stats = delay_and_impact_stats(detector, attack, episodes, horizon, seed)?;
    if stats.detect_rate == 0.0 {
        return Err(Error::NoDetections(episodes));
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub alpha: f64,
    pub mu: f64,
    pub mtbfa: f64,
    pub mean_delay: f64,
    pub mean_impact: f64,
    pub detect_rate: f64,
    pub mtbfa_censored: f64,
    pub mtbfa_se: f64,
    pub delay_se: f64,
    pub impact_se: f64,
    pub episodes: usize,
}

pub const SWEEP_HEADER: &str =
    "label,alpha,mu,mtbfa,mean_delay,mean_impact,detect_rate,mtbfa_censored,mtbfa_se,delay_se,impact_se,episodes";

/// One detector per `alpha`; evaluates the no-attack scenario plus every
/// attack. Rows are ordered by alpha, then `none`, then `attacks`.
pub fn sweep(
    family: &TiltedFamily,
    epsilon: f64,
    alphas: &[f64],
    attacks: &[AttackSpec],
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if attacks.iter().any(|a| a.label == NONE_LABEL) {
        return Err(Error::Config("the no-attack scenario is added automatically".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len() * (attacks.len() + 1));
    for &alpha in alphas {
        let det = DetectorConfig::build(family, epsilon, alpha)?;
        let mt = estimate_mtbfa(&det, episodes, horizon, seed)?;
        let row = |label: &str, delay: f64, delay_se: f64, impact: f64, impact_se: f64, rate: f64| SweepRow {
            label: label.to_string(),
            alpha,
            mu: det.mu,
            mtbfa: mt.mean,
            mean_delay: delay,
            mean_impact: impact,
            detect_rate: rate,
            mtbfa_censored: mt.censored_fraction,
            mtbfa_se: mt.std_error,
            delay_se,
            impact_se,
            episodes,
        };
        rows.push(row(NONE_LABEL, f64::NAN, f64::NAN, 0.0, 0.0, 0.0));
        for attack in attacks {
            let s = delay_and_impact_stats(&det, attack, episodes, horizon, seed)?;
            rows.push(row(
                &attack.label,
                s.mean_delay,
                s.delay_std_error,
                s.mean_impact,
                s.impact_std_error,
                s.detect_rate,
            ));
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let floats = [
            r.alpha,
            r.mu,
            r.mtbfa,
            r.mean_delay,
            r.mean_impact,
            r.detect_rate,
            r.mtbfa_censored,
            r.mtbfa_se,
            r.delay_se,
            r.impact_se,
        ]
        .map(fmt_f64)
        .join(",");
        out.push_str(&format!("{},{floats},{}\n", r.label, r.episodes));
    }
    out
}

/// `u_pi E_inf[T] + eps E_{theta_min}[T]` at a given threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEvaluation {
    pub mu: f64,
    pub value: f64,
    pub std_error: f64,
    pub mtbfa: MtbfaEstimate,
    /// Mean `min(T, horizon)` under the `theta_min` attack from step 1.
    pub attack_steps: f64,
    pub attack_censored: f64,
}

impl CostEvaluation {
    pub fn censored_fraction(&self) -> f64 {
        self.mtbfa.censored_fraction.max(self.attack_censored)
    }
}

pub fn evaluate_cost(
    family: &TiltedFamily,
    epsilon: f64,
    mu: f64,
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<CostEvaluation> {
    let det = DetectorConfig::with_threshold(family, epsilon, mu)?;
    let attack = make_tilted_attack(family, det.theta_min, epsilon, StartLaw::Fixed { t: 1 })?.with_label("theta_min");
    let mtbfa = estimate_mtbfa(&det, episodes, horizon, seed)?;
    let s = delay_and_impact_stats(&det, &attack, episodes, horizon, seed)?;
    let u_pi = family.base_mean();
    Ok(CostEvaluation {
        mu,
        value: u_pi * mtbfa.mean + epsilon * s.mean_steps,
        std_error: ((u_pi * mtbfa.std_error).powi(2) + (epsilon * s.steps_std_error).powi(2)).sqrt(),
        mtbfa,
        attack_steps: s.mean_steps,
        attack_censored: s.censored_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCalibration {
    pub mu: f64,
    pub cost: f64,
    /// `F(mu) - C`.
    pub residual: f64,
    pub std_error: f64,
    pub evaluation: CostEvaluation,
    pub evaluations: usize,
}

const CALIBRATION_MU_FLOOR: f64 = 1e-6;
const CALIBRATION_MU_CAP: f64 = 1e4;
const CALIBRATION_ITERS: usize = 60;
/// Accepted `|F(mu) - C|` in Monte-Carlo standard errors.
const CALIBRATION_TOLERANCE_SE: f64 = 3.0;

/// Bisection on `mu` so that `u_pi E_inf[T] + eps E_{theta_min}[T] = C`,
/// with both expectations estimated on common random numbers. The estimate
/// is a step function of `mu`; a cost inside a step that no threshold
/// reaches within 3 standard errors is reported as unattainable.
pub fn calibrate_mu_for_cost(
    family: &TiltedFamily,
    epsilon: f64,
    cost: f64,
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<CostCalibration> {
    let u_pi = family.base_mean();
    if !(cost > u_pi) {
        return Err(Error::CostTooSmall { cost, minimum: u_pi });
    }
    let eval = |mu: f64| evaluate_cost(family, epsilon, mu, episodes, horizon, seed);
    let mut evaluations = 1;
    let low = eval(CALIBRATION_MU_FLOOR)?;
    if low.value > cost {
        return Err(Error::CostTooSmall { cost, minimum: low.value });
    }
    let mut lo = low;
    let mut hi = eval(1.0)?;
    evaluations += 1;
    while hi.value < cost {
        if hi.censored_fraction() > MAX_CENSORED_FRACTION {
            return Err(Error::ExcessiveCensoring { fraction: hi.censored_fraction(), mu: hi.mu });
        }
        if hi.mu >= CALIBRATION_MU_CAP {
            return Err(Error::NoConvergence { residual: hi.value - cost, iterations: evaluations });
        }
        lo = hi;
        hi = eval(2.0 * hi.mu)?;
        evaluations += 1;
    }
    // censoring only lowers the estimate, so a censored upper bracket is
    // still valid; only the returned point has to respect the limit
    for _ in 0..CALIBRATION_ITERS {
        if hi.mu - lo.mu <= 1e-9 * hi.mu {
            break;
        }
        let mid = eval(0.5 * (lo.mu + hi.mu))?;
        evaluations += 1;
        if (mid.value - cost).abs() <= 0.5 * mid.std_error && mid.censored_fraction() <= MAX_CENSORED_FRACTION {
            lo = mid;
            hi = mid;
            break;
        }
        if mid.value < cost {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = if (lo.value - cost).abs() <= (hi.value - cost).abs() { lo } else { hi };
    if best.censored_fraction() > MAX_CENSORED_FRACTION {
        return Err(Error::ExcessiveCensoring { fraction: best.censored_fraction(), mu: best.mu });
    }
    if (best.value - cost).abs() > CALIBRATION_TOLERANCE_SE * best.std_error {
        return Err(Error::CostUnattainable { cost, mu: hi.mu, below: lo.value, above: hi.value });
    }
    Ok(CostCalibration {
        mu: best.mu,
        cost,
        residual: best.value - cost,
        std_error: best.std_error,
        evaluation: best,
        evaluations,
    })
}

/// Closed-form shortcut for the cost calibration: solve
/// `C = u_pi gamma + eps log(gamma) / d_min` for `gamma` and return
/// `(gamma, mu_alpha(d_min, 1/gamma))`.
pub fn approximate_mu_for_cost(family: &TiltedFamily, epsilon: f64, cost: f64) -> Result<(f64, f64)> {
    let theta_min = family.theta_for_epsilon(epsilon)?.theta;
    let d_min = family.kl_from_base(theta_min);
    let u_pi = family.base_mean();
    let f = |g: f64| u_pi * g + epsilon * g.ln() / d_min - cost;
    if f(std::f64::consts::E) >= 0.0 {
        return Err(Error::CostTooSmall { cost, minimum: f(std::f64::consts::E) + cost });
    }
    let (mut lo, mut hi) = (std::f64::consts::E, cost / u_pi + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    Ok((gamma, mu_alpha(d_min, 1.0 / gamma)?))
}

/// `|mean(sum U) - u_pi mean(T)| / (u_pi mean(T))`.
pub fn wald_relative_error(utility_sums: &[f64], stop_times: &[f64], u_pi: f64) -> f64 {
    let n = stop_times.len() as f64;
    let mean_sum = utility_sums.iter().sum::<f64>() / n;
    let mean_t = stop_times.iter().sum::<f64>() / n;
    (mean_sum - u_pi * mean_t).abs() / (u_pi * mean_t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    pub relative_error: f64,
    pub uncensored: usize,
    pub censored_fraction: f64,
}

/// Checks `E[sum_{t <= T} U_t] = u_pi E[T]` on uncensored no-attack runs.
pub fn wald_check(detector: &DetectorConfig, episodes: usize, horizon: u64, seed: u64) -> Result<WaldReport> {
    let none = AttackSpec::none(detector.family());
    let results = run_episodes(detector, &none, episodes, horizon, 0.0, seed)?;
    let (sums, times): (Vec<f64>, Vec<f64>) =
        results.iter().filter_map(|r| r.stop_time.map(|t| (r.pre_change_utility_sum, t as f64))).unzip();
    let censored_fraction = 1.0 - times.len() as f64 / episodes as f64;
    if times.is_empty() {
        return Err(Error::ExcessiveCensoring { fraction: 1.0, mu: detector.mu });
    }
    Ok(WaldReport {
        relative_error: wald_relative_error(&sums, &times, detector.family().base_mean()),
        uncensored: times.len(),
        censored_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TolerableRow {
    pub epsilon: f64,
    pub target_mtbfa: f64,
    /// `ok`, `infeasible` (epsilon outside the feasible range) or
    /// `unreachable` (target not attainable within the horizon).
    pub status: String,
    pub alpha: f64,
    pub mu: f64,
    pub mtbfa: f64,
    pub impact: f64,
    pub impact_se: f64,
}

pub const TOLERABLE_HEADER: &str = "epsilon,mtbfa,status,alpha,mu,mtbfa_achieved,impact_at_theta_min,impact_se";

const LOG_ALPHA_LO: f64 = -34.538_776_394_910_684; // ln 1e-15
const LOG_ALPHA_HI: f64 = -1.0;
const ALPHA_BISECTION_ITERS: usize = 40;
const MTBFA_MATCH: f64 = 0.01;

/// For each `epsilon` and target MTBFA, finds `alpha` whose detector hits
/// the target and measures the impact of the `theta_min` attack.
pub fn tolerable_impact(
    family: &TiltedFamily,
    epsilons: &[f64],
    targets: &[f64],
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<Vec<TolerableRow>> {
    let mut rows = Vec::with_capacity(epsilons.len() * targets.len());
    for &epsilon in epsilons {
        let feasible = epsilon > 0.0 && epsilon < family.max_epsilon();
        for &target in targets {
            let mut row = TolerableRow {
                epsilon,
                target_mtbfa: target,
                status: "infeasible".into(),
                alpha: f64::NAN,
                mu: f64::NAN,
                mtbfa: f64::NAN,
                impact: f64::NAN,
                impact_se: f64::NAN,
            };
            if feasible {
                match calibrate_alpha(family, epsilon, target, episodes, horizon, seed)? {
                    None => row.status = "unreachable".into(),
                    Some((det, mt)) => {
                        let attack = make_tilted_attack(family, det.theta_min, epsilon, StartLaw::Fixed { t: 1 })?
                            .with_label("theta_min");
                        let s = delay_and_impact_stats(&det, &attack, episodes, horizon, seed)?;
                        row.status = "ok".into();
                        row.alpha = det.alpha.unwrap_or(f64::NAN);
                        row.mu = det.mu;
                        row.mtbfa = mt.mean;
                        row.impact = s.mean_impact;
                        row.impact_se = s.impact_std_error;
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Bisection on `log alpha`; `None` when even `alpha = 1e-15` falls short.
pub fn calibrate_alpha(
    family: &TiltedFamily,
    epsilon: f64,
    target: f64,
    episodes: usize,
    horizon: u64,
    seed: u64,
) -> Result<Option<(DetectorConfig, MtbfaEstimate)>> {
    if target >= horizon as f64 {
        return Ok(None);
    }
    let eval = |log_alpha: f64| -> Result<(DetectorConfig, MtbfaEstimate)> {
        let det = DetectorConfig::build(family, epsilon, log_alpha.exp())?;
        let mt = estimate_mtbfa(&det, episodes, horizon, seed)?;
        Ok((det, mt))
    };
    let strict = eval(LOG_ALPHA_LO)?;
    if strict.1.mean < target {
        return Ok(None);
    }
    let loose = eval(LOG_ALPHA_HI)?;
    if loose.1.mean >= target {
        return Ok(Some(loose));
    }
    let (mut lo, mut hi) = ((LOG_ALPHA_LO, strict), (LOG_ALPHA_HI, loose));
    for _ in 0..ALPHA_BISECTION_ITERS {
        let mid_log = 0.5 * (lo.0 + hi.0);
        let mid = eval(mid_log)?;
        if (mid.1.mean / target - 1.0).abs() < MTBFA_MATCH {
            return Ok(Some(mid));
        }
        if mid.1.mean >= target {
            lo = (mid_log, mid);
        } else {
            hi = (mid_log, mid);
        }
    }
    let best = if (lo.1 .1.mean - target).abs() <= (hi.1 .1.mean - target).abs() { lo.1 } else { hi.1 };
    Ok(Some(best))
}

pub fn tolerable_csv(rows: &[TolerableRow]) -> String {
    let mut out = format!("{TOLERABLE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_f64(r.epsilon),
            fmt_f64(r.target_mtbfa),
            r.status,
            fmt_f64(r.alpha),
            fmt_f64(r.mu),
            fmt_f64(r.mtbfa),
            fmt_f64(r.impact),
            fmt_f64(r.impact_se)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{build_chicken_game, chicken_ce, victim_view, VictimView};
    use approx::assert_abs_diff_eq;

    fn chicken() -> TiltedFamily {
        TiltedFamily::new(victim_view(&build_chicken_game(), &chicken_ce(), 0).unwrap()).unwrap()
    }

    #[test]
    fn seeding_is_stable_and_spread() {
        assert_eq!(episode_seed(1, 2, 3), episode_seed(1, 2, 3));
        assert_ne!(episode_seed(1, 2, 3), episode_seed(1, 2, 4));
        assert_ne!(episode_seed(1, 2, 3), episode_seed(1, 3, 3));
        assert_ne!(label_tag("none"), label_tag("theta_min"));
        assert_eq!(label_tag(""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn sampler_frequencies() {
        let pmf = [0.1, 0.0, 0.6, 0.3];
        let s = SymbolSampler::new(&pmf);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        let n = 200_000;
        for _ in 0..n {
            counts[s.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for (c, p) in counts.iter().zip(pmf) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * sd + 1e-12);
        }
    }

    #[test]
    fn outcome_classification() {
        let f = chicken();
        let det = DetectorConfig::build(&f, 0.5, 0.3).unwrap();
        let theta_min = det.theta_min;
        let never = AttackSpec::none(&f);
        let mut saw_false_alarm = false;
        for seed in 0..200 {
            let cfg = EpisodeConfig { detector: &det, attack: &never, horizon: 1000, false_alarm_cost: 50.0, seed };
            let r = run_episode(&cfg).unwrap();
            match r.outcome {
                Outcome::FalseAlarm => {
                    saw_false_alarm = true;
                    assert_eq!(r.impact, 0.0);
                    assert_abs_diff_eq!(r.realized_cost, 50.0 - r.pre_change_utility_sum);
                }
                Outcome::CensoredPreChange => assert_eq!(r.steps, 1000),
                o => panic!("unexpected {o}"),
            }
            assert_eq!(r.change_time, None);
        }
        assert!(saw_false_alarm);

        let late = make_tilted_attack(&f, theta_min, 0.5, StartLaw::Fixed { t: 5000 }).unwrap();
        let cfg = EpisodeConfig { detector: &det, attack: &late, horizon: 100, false_alarm_cost: 0.0, seed: 1 };
        let r = run_episode(&cfg).unwrap();
        assert!(matches!(r.outcome, Outcome::FalseAlarm | Outcome::CensoredPreChange));
    }

    #[test]
    fn worst_symbol_attack_is_caught_fast() {
        let f = chicken();
        let det = DetectorConfig::build(&f, 0.5, 1e-3).unwrap();
        let mut point = vec![0.0; f.len()];
        point[0] = 1.0;
        let attack = AttackSpec::explicit(&f, "u_min", point, StartLaw::Fixed { t: 1 }).unwrap();
        for seed in 0..20 {
            let cfg = EpisodeConfig { detector: &det, attack: &attack, horizon: 1000, false_alarm_cost: 0.0, seed };
            let r = run_episode(&cfg).unwrap();
            assert_eq!(r.outcome, Outcome::Detected);
            assert_eq!(r.stop_time, Some((det.mu / 36f64.ln()).floor() as u64 + 1));
            assert_eq!(r.delay(), r.stop_time);
            assert_abs_diff_eq!(r.impact, r.stop_time.unwrap() as f64 * (f.base_mean() - 1.0), epsilon = 1e-9);
            assert_abs_diff_eq!(r.realized_cost, r.impact);
        }
    }

    #[test]
    fn replay_matches_result() {
        let f = chicken();
        let det = DetectorConfig::build(&f, 0.5, 0.01).unwrap();
        let attack = make_tilted_attack(&f, 0.2, 0.5, StartLaw::Fixed { t: 30 }).unwrap();
        for seed in 0..100 {
            let cfg = EpisodeConfig { detector: &det, attack: &attack, horizon: 2000, false_alarm_cost: 100.0, seed };
            let (r, stream) = run_episode_recorded(&cfg).unwrap();
            assert_eq!(r, run_episode(&cfg).unwrap());
            assert_eq!(stream.len() as u64, r.steps);
            let nu = 30usize;
            let pre: f64 = stream.iter().take(nu - 1).sum();
            let post: f64 = stream.iter().skip(nu - 1).map(|u| f.base_mean() - u).sum();
            let want = match r.outcome {
                Outcome::FalseAlarm => 100.0 - pre,
                _ => post - pre,
            };
            assert_abs_diff_eq!(r.realized_cost, want, epsilon = 1e-9);
            assert_eq!(det.run(&stream).unwrap().map(|s| s.0), r.stop_time);
        }
    }

    #[test]
    fn adaptive_start_happens_at_resets() {
        let f = chicken();
        let det = DetectorConfig::build(&f, 0.5, 1e-3).unwrap();
        let attack = make_tilted_attack(&f, det.theta_min, 0.5, StartLaw::Adaptive { p: 0.5 }).unwrap();
        let mut started = 0;
        for seed in 0..200 {
            let cfg = EpisodeConfig { detector: &det, attack: &attack, horizon: 3000, false_alarm_cost: 0.0, seed };
            let (r, stream) = run_episode_recorded(&cfg).unwrap();
            if let Some(nu) = r.change_time {
                started += 1;
                // the adversary only starts right after its CUSUM reset
                if nu > 1 {
                    let mut adv = AdversaryCusum::new(&f, det.theta_min);
                    for &u in &stream[..nu as usize - 1] {
                        adv.observe(f.view().index_of(u).unwrap());
                    }
                    assert!(adv.start_probability(1.0) > 0.0);
                }
            }
        }
        assert!(started > 150);
    }

    #[test]
    fn mtbfa_limits() {
        let f = chicken();
        let det = DetectorConfig::with_threshold(&f, 0.5, 1e-9).unwrap();
        let est = estimate_mtbfa(&det, 400, 1000, 5).unwrap();
        assert_eq!(est.censored_fraction, 0.0);
        assert!(est.mean < 3.0);
        let det = DetectorConfig::with_threshold(&f, 0.5, 40.0).unwrap();
        let est = estimate_mtbfa(&det, 50, 1000, 5).unwrap();
        assert_eq!(est.censored_fraction, 1.0);
        assert_eq!(est.mean, 1000.0);
    }

    #[test]
    fn single_step_trip_on_coin() {
        // mu below l(0) means the first low symbol trips; from a fresh
        // state every step either trips or stays at R = 0
        let f = TiltedFamily::new(VictimView::from_pmf(&[0.0, 1.0], &[0.5, 0.5]).unwrap()).unwrap();
        let det = DetectorConfig::with_threshold(&f, 0.2, 0.3).unwrap();
        assert!(det.llr()[0] > 0.3 && det.llr()[1] < 0.0);
        let results = run_episodes(&det, &AttackSpec::none(&f), 2000, 10_000, 0.0, 11).unwrap();
        let times: Vec<f64> = results.iter().map(|r| r.stop_time.unwrap() as f64).collect();
        let (mean, se) = mean_and_se(&times);
        assert!((mean - 2.0).abs() < 4.0 * se, "{mean} +- {se}");

        let mut point = vec![0.0; 2];
        point[0] = 1.0;
        let low = AttackSpec::explicit(&f, "low", point, StartLaw::Fixed { t: 1 }).unwrap();
        let results = run_episodes(&det, &low, 100, 10, 0.0, 11).unwrap();
        assert!(results.iter().all(|r| r.stop_time == Some(1)));
    }

    #[test]
    fn wald_identity_helpers() {
        assert_abs_diff_eq!(wald_relative_error(&[10.0, 20.0], &[2.0, 4.0], 5.0), 0.0);
        let f = TiltedFamily::new(VictimView::from_pmf(&[2.0, 4.0], &[0.5, 0.5]).unwrap()).unwrap();
        let det = DetectorConfig::with_threshold(&f, 0.5, 3.0).unwrap();
        let rep = wald_check(&det, 500, 100_000, 2).unwrap();
        assert!(rep.relative_error < 0.05, "{rep:?}");
        assert_eq!(rep.uncensored, 500);
    }

    #[test]
    fn sweep_shape_and_csv() {
        let f = chicken();
        let a = make_tilted_attack(&f, 0.2, 0.5, StartLaw::Fixed { t: 1 }).unwrap().with_label("t02");
        let rows = sweep(&f, 0.5, &[0.1, 0.01], std::slice::from_ref(&a), 50, 2000, 3).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].label, "none");
        assert!(rows[0].mean_delay.is_nan());
        assert_eq!(rows[1].label, "t02");
        assert!(rows[2].mu > rows[0].mu);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
        assert!(sweep(&f, 0.5, &[], std::slice::from_ref(&a), 10, 10, 0).is_err());
        assert!(sweep(&f, 0.5, &[0.1], &[a.with_label("none")], 10, 10, 0).is_err());
    }

    #[test]
    fn approximate_cost_threshold() {
        let f = chicken();
        let (gamma, mu) = approximate_mu_for_cost(&f, 0.5, 1e4).unwrap();
        let theta_min = f.theta_for_epsilon(0.5).unwrap().theta;
        let d = f.kl_from_base(theta_min);
        assert_abs_diff_eq!(f.base_mean() * gamma + 0.5 * gamma.ln() / d, 1e4, epsilon = 1e-6);
        assert_abs_diff_eq!(mu, mu_alpha(d, 1.0 / gamma).unwrap(), epsilon = 1e-12);
        assert!(approximate_mu_for_cost(&f, 0.5, 1.0).is_err());
    }

    #[test]
    fn calibration_errors() {
        let f = chicken();
        assert!(matches!(calibrate_mu_for_cost(&f, 0.5, 5.0, 10, 100, 0), Err(Error::CostTooSmall { .. })));
        assert!(matches!(calibrate_mu_for_cost(&f, 0.5, 1e6, 20, 500, 0), Err(Error::ExcessiveCensoring { .. })));
    }

    #[test]
    fn tolerable_rows_report_status() {
        let f = chicken();
        let rows = tolerable_impact(&f, &[0.5, 10.0], &[200.0, 1e9], 1000, 5000, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].status, "ok");
        // integer utilities make MTBFA piecewise constant in mu, so the
        // target is only matched up to the nearest attainable step
        assert!(rows[0].mtbfa > 150.0 && rows[0].mtbfa < 270.0, "{:?}", rows[0]);
        assert_eq!(rows[1].status, "unreachable");
        assert_eq!(rows[2].status, "infeasible");
        assert_eq!(tolerable_csv(&rows).lines().count(), 5);
    }
}
