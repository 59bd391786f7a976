//! Attack strategies: tilted attacks, explicit and random members of
//! `D_eps`, and the start-time laws (fixed, never, adaptive).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tilted::TiltedFamily;

pub const PMF_TOLERANCE: f64 = 1e-12;
pub const MAX_REJECTION_DRAWS: usize = 100_000;
pub const DEFAULT_ADAPTIVE_P: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartLaw {
    /// The attack starts at step `t >= 1`.
    Fixed {
        t: u64,
    },
    Never,
    /// Starts with probability `p (1 - exp(R + l))^+` each step, where
    /// `R + l` is the unclipped CUSUM statistic (against `tau_{theta_min}`)
    /// after the previous observation.
    Adaptive {
        p: f64,
    },
}

impl StartLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StartLaw::Fixed { t: 0 } => Err(Error::InvalidAttack("fixed start time must be >= 1".into())),
            StartLaw::Adaptive { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::InvalidAttack(format!("adaptive start probability {p} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl Default for StartLaw {
    fn default() -> Self {
        StartLaw::Fixed { t: 1 }
    }
}

/// A stationary manipulation `tau` over the family's alphabet plus a start law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub label: String,
    /// Indexed like the family's alphabet.
    pub distribution: Vec<f64>,
    pub start: StartLaw,
    /// Tilt parameter for tilted attacks.
    pub theta: Option<f64>,
    /// Expected per-step cost `sum tau(u) (u_pi - u)`.
    pub expected_cost: f64,
    /// Whether the attack is known to satisfy the cost constraint.
    pub in_d_epsilon: Option<bool>,
}

impl AttackSpec {
    /// No manipulation; the stream stays `pi` for ever.
    pub fn none(family: &TiltedFamily) -> Self {
        Self {
            label: "none".into(),
            distribution: family.base_pmf().to_vec(),
            start: StartLaw::Never,
            theta: None,
            expected_cost: 0.0,
            in_d_epsilon: Some(false),
        }
    }

    /// An explicit pmf over the alphabet.
    pub fn explicit(family: &TiltedFamily, label: &str, tau: Vec<f64>, start: StartLaw) -> Result<Self> {
        check_pmf(family, &tau)?;
        start.validate()?;
        Ok(Self {
            label: label.into(),
            expected_cost: family.base_mean() - family.mean_of(&tau),
            distribution: tau,
            start,
            theta: None,
            in_d_epsilon: None,
        })
    }

    pub fn with_start(mut self, start: StartLaw) -> Result<Self> {
        start.validate()?;
        self.start = start;
        Ok(self)
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.into();
        self
    }

    /// Records membership in `D_eps`.
    pub fn flag_epsilon(mut self, epsilon: f64) -> Self {
        self.in_d_epsilon = Some(self.expected_cost >= epsilon - PMF_TOLERANCE);
        self
    }
}

/// Validates a pmf indexed by the family's alphabet.
pub fn check_pmf(family: &TiltedFamily, tau: &[f64]) -> Result<()> {
    if tau.len() != family.len() {
        return Err(Error::InvalidAttack(format!(
            "distribution has {} entries, alphabet has {}",
            tau.len(),
            family.len()
        )));
    }
    if tau.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidAttack("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = tau.iter().sum();
    if (total - 1.0).abs() > PMF_TOLERANCE {
        return Err(Error::InvalidAttack(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Maps `(utility, probability)` pairs onto the family's alphabet. Mass on
/// values outside the alphabet is an error.
pub fn pmf_on_alphabet(family: &TiltedFamily, values: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if values.len() != probs.len() {
        return Err(Error::InvalidAttack("values and probabilities differ in length".into()));
    }
    let mut tau = vec![0.0; family.len()];
    let mut off_support = 0.0;
    for (&u, &p) in values.iter().zip(probs) {
        match family.view().index_of(u) {
            Some(k) => tau[k] += p,
            None => off_support += p,
        }
    }
    if off_support > PMF_TOLERANCE {
        return Err(Error::InvalidAttack(format!("mass {off_support} on values outside the mediator's support")));
    }
    check_pmf(family, &tau)?;
    Ok(tau)
}

/// `tau_theta` as an attack. `theta = 0` is the base distribution.
pub fn make_tilted_attack(family: &TiltedFamily, theta: f64, epsilon: f64, start: StartLaw) -> Result<AttackSpec> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::InvalidAttack(format!("theta must be finite and >= 0, got {theta}")));
    }
    start.validate()?;
    Ok(AttackSpec {
        label: format!("tilted_{theta}"),
        distribution: family.tilt(theta),
        start,
        theta: Some(theta),
        expected_cost: family.expected_cost(theta),
        in_d_epsilon: None,
    }
    .flag_epsilon(epsilon))
}

/// True iff `sum tau(u) (u_pi - u) >= epsilon`.
pub fn in_d_epsilon(family: &TiltedFamily, tau: &[f64], epsilon: f64) -> Result<bool> {
    check_pmf(family, tau)?;
    Ok(family.base_mean() - family.mean_of(tau) >= epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomDraw {
    pub attack: AttackSpec,
    /// Dirichlet draws used, including the accepted one.
    pub draws: usize,
}

/// Uniform (Dirichlet(1)) draws on the support simplex, rejected until the
/// per-step cost reaches `epsilon`.
pub fn sample_random_attack(family: &TiltedFamily, epsilon: f64, seed: u64) -> Result<AttackSpec> {
    Ok(sample_random_attack_counted(family, epsilon, seed)?.attack)
}

pub fn sample_random_attack_counted(family: &TiltedFamily, epsilon: f64, seed: u64) -> Result<RandomDraw> {
    let max = family.max_epsilon();
    if !(epsilon > 0.0 && epsilon < max) {
        return Err(Error::InfeasibleEpsilon { epsilon, max_epsilon: max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tau = vec![0.0; family.len()];
    for draw in 1..=MAX_REJECTION_DRAWS {
        let mut total = 0.0;
        for p in tau.iter_mut() {
            *p = rng.sample::<f64, _>(Exp1);
            total += *p;
        }
        tau.iter_mut().for_each(|p| *p /= total);
        let cost = family.base_mean() - family.mean_of(&tau);
        if cost >= epsilon {
            let attack = AttackSpec {
                label: format!("random_{seed}"),
                distribution: tau,
                start: StartLaw::default(),
                theta: None,
                expected_cost: cost,
                in_d_epsilon: Some(true),
            };
            return Ok(RandomDraw { attack, draws: draw });
        }
    }
    Err(Error::RejectionCapExceeded { draws: MAX_REJECTION_DRAWS, acceptance_rate: 0.0 })
}

/// The CUSUM an adaptive adversary runs on the public pre-change stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryCusum {
    llr: Vec<f64>,
    /// Clipped statistic `R`.
    pub r: f64,
    /// `R_prev + l` for the latest observation; `-inf` before any.
    pub unclipped: f64,
}

impl AdversaryCusum {
    pub fn new(family: &TiltedFamily, theta_min: f64) -> Self {
        Self { llr: family.log_likelihood_ratios(theta_min), r: 0.0, unclipped: f64::NEG_INFINITY }
    }

    pub fn observe(&mut self, sym: usize) {
        self.unclipped = self.r + self.llr[sym];
        self.r = self.unclipped.max(0.0);
    }

    /// `p (1 - exp(R + l))^+`.
    pub fn start_probability(&self, p: f64) -> f64 {
        p * (-self.unclipped.exp_m1()).max(0.0)
    }
}

/// Whether an adaptive attack starts at the current step. Other start laws
/// never call this.
pub fn next_change_decision<R: Rng + ?Sized>(p: f64, state: &AdversaryCusum, rng: &mut R) -> bool {
    rng.random::<f64>() < state.start_probability(p)
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
    fn tilted_attack_costs() {
        let f = chicken();
        let theta_min = f.theta_for_epsilon(0.5).unwrap().theta;
        let a = make_tilted_attack(&f, theta_min, 0.5, StartLaw::default()).unwrap();
        assert_abs_diff_eq!(a.expected_cost, 0.5, epsilon = 1e-9);
        assert!(in_d_epsilon(&f, &a.distribution, 0.5 - 1e-9).unwrap());
        let a1 = make_tilted_attack(&f, 0.09, 0.5, StartLaw::default()).unwrap();
        let a2 = make_tilted_attack(&f, 0.1, 0.5, StartLaw::default()).unwrap();
        assert!(0.5 < a1.expected_cost && a1.expected_cost < a2.expected_cost);
        assert_eq!(a1.in_d_epsilon, Some(true));
        let below = make_tilted_attack(&f, 0.03, 0.5, StartLaw::default()).unwrap();
        assert_eq!(below.in_d_epsilon, Some(false));
        let zero = make_tilted_attack(&f, 0.0, 0.5, StartLaw::default()).unwrap();
        for (a, b) in zero.distribution.iter().zip(f.base_pmf()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(make_tilted_attack(&f, -1.0, 0.5, StartLaw::default()).is_err());
        assert!(make_tilted_attack(&f, 0.1, 0.5, StartLaw::Fixed { t: 0 }).is_err());
        assert!(make_tilted_attack(&f, 0.1, 0.5, StartLaw::Adaptive { p: 1.5 }).is_err());
    }

    #[test]
    fn membership() {
        let f = chicken();
        assert!(!in_d_epsilon(&f, f.base_pmf(), 1e-9).unwrap());
        let mut point = vec![0.0; 6];
        point[0] = 1.0;
        assert!(in_d_epsilon(&f, &point, f.max_epsilon()).unwrap());
        assert!(in_d_epsilon(&f, &[0.5, 0.5], 0.1).is_err());
        assert!(in_d_epsilon(&f, &[0.5, 0.5, 0.1, 0.0, 0.0, 0.0], 0.1).is_err());
    }

    #[test]
    fn value_pairs_map_to_alphabet() {
        let f = chicken();
        let tau = pmf_on_alphabet(&f, &[1.0, 9.0], &[0.25, 0.75]).unwrap();
        assert_eq!(tau, vec![0.25, 0.0, 0.0, 0.0, 0.0, 0.75]);
        assert!(pmf_on_alphabet(&f, &[2.0, 9.0], &[0.25, 0.75]).is_err());
        assert!(pmf_on_alphabet(&f, &[2.0, 9.0], &[1e-13, 1.0]).is_ok());
    }

    #[test]
    fn random_attacks() {
        let f = chicken();
        for seed in 0..50 {
            let a = sample_random_attack(&f, 0.5, seed).unwrap();
            assert!(in_d_epsilon(&f, &a.distribution, 0.5).unwrap());
            assert!(a.distribution.iter().all(|p| *p > 0.0));
            assert_eq!(a, sample_random_attack(&f, 0.5, seed).unwrap());
        }
        assert_ne!(sample_random_attack(&f, 0.5, 1).unwrap(), sample_random_attack(&f, 0.5, 2).unwrap());
        assert!(matches!(sample_random_attack(&f, 6.0, 0), Err(Error::InfeasibleEpsilon { .. })));
        let near = f.max_epsilon() - 1e-3;
        assert!(matches!(sample_random_attack(&f, near, 0), Err(Error::RejectionCapExceeded { .. })));
    }

    #[test]
    fn adaptive_start_probability() {
        let f = TiltedFamily::new(VictimView::from_pmf(&[0.0, 1.0], &[0.5, 0.5]).unwrap()).unwrap();
        let theta_min = f.theta_for_epsilon(0.2).unwrap().theta;
        let mut s = AdversaryCusum::new(&f, theta_min);
        assert_abs_diff_eq!(s.start_probability(0.3), 0.3);
        s.observe(1);
        let l1 = (2.0 * (-theta_min).exp() / (1.0 + (-theta_min).exp())).ln();
        assert!(l1 < 0.0);
        assert_abs_diff_eq!(s.start_probability(1.0), 1.0 - l1.exp(), epsilon = 1e-12);
        // a run of low utilities pushes R + l above 0
        for _ in 0..3 {
            s.observe(0);
        }
        assert!(s.unclipped > 0.0);
        assert_eq!(s.start_probability(1.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(!(0..1000).any(|_| next_change_decision(1.0, &s, &mut rng)));
    }

    #[test]
    fn start_laws_serialize() {
        let laws = [StartLaw::Fixed { t: 3 }, StartLaw::Never, StartLaw::Adaptive { p: 0.01 }];
        for law in laws {
            let text = serde_json::to_string(&law).unwrap();
            assert_eq!(serde_json::from_str::<StartLaw>(&text).unwrap(), law);
        }
        assert_eq!(serde_json::to_string(&StartLaw::Never).unwrap(), r#"{"kind":"never"}"#);
    }
}
