//! Independent oracles shared by the integration tests. Nothing here calls
//! into the tilted-family or detector code; only raw alphabets and pmfs.

#![allow(dead_code)]

use cesentry::game::{build_chicken_game, chicken_ce, victim_view, VictimView};
use cesentry::tilted::TiltedFamily;

pub const CHICKEN_ALPHABET: [f64; 6] = [1.0, 3.0, 5.0, 6.0, 7.0, 9.0];
pub const CHICKEN_PMF: [f64; 6] = [1.0 / 36.0, 1.0 / 3.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 4.0, 1.0 / 3.0];

pub fn chicken_family() -> TiltedFamily {
    TiltedFamily::new(victim_view(&build_chicken_game(), &chicken_ce(), 0).unwrap()).unwrap()
}

pub fn family_from(alphabet: &[f64], pmf: &[f64]) -> TiltedFamily {
    TiltedFamily::new(VictimView::from_pmf(alphabet, pmf).unwrap()).unwrap()
}

/// Raw pmf over a sorted alphabet, evaluated without the library.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub alphabet: Vec<f64>,
    pub pmf: Vec<f64>,
}

impl Oracle {
    pub fn new(alphabet: &[f64], pmf: &[f64]) -> Self {
        Self { alphabet: alphabet.to_vec(), pmf: pmf.to_vec() }
    }

    pub fn chicken() -> Self {
        Self::new(&CHICKEN_ALPHABET, &CHICKEN_PMF)
    }

    pub fn mean(&self) -> f64 {
        self.alphabet.iter().zip(&self.pmf).map(|(u, p)| u * p).sum()
    }

    /// `log sum pi(u) exp(-theta u)`, shifted by the smallest utility.
    pub fn b(&self, theta: f64) -> f64 {
        let u0 = self.alphabet[0];
        let s: f64 = self.alphabet.iter().zip(&self.pmf).map(|(u, p)| p * (-theta * (u - u0)).exp()).sum();
        -theta * u0 + s.ln()
    }

    pub fn tilt(&self, theta: f64) -> Vec<f64> {
        let u0 = self.alphabet[0];
        let w: Vec<f64> = self.alphabet.iter().zip(&self.pmf).map(|(u, p)| p * (-theta * (u - u0)).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    pub fn tilted_mean(&self, theta: f64) -> f64 {
        self.tilt(theta).iter().zip(&self.alphabet).map(|(p, u)| p * u).sum()
    }

    pub fn kl(&self, tau: &[f64]) -> f64 {
        tau.iter().zip(&self.pmf).filter(|(t, _)| **t > 0.0).map(|(t, p)| t * (t / p).ln()).sum()
    }

    /// `theta >= 0` with tilted mean equal to `target`, by bisection.
    pub fn theta_for_mean(&self, target: f64) -> f64 {
        let mut hi = 1.0;
        while self.tilted_mean(hi) > target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.tilted_mean(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `sup_{theta >= theta_min} (-theta s - n b(theta))` for a window of `n`
    /// observations summing to `s`. The objective is concave in theta, so
    /// the sup is at `theta_min`, at the stationary point, or (when every
    /// observation is the smallest symbol) the limit `n log(1 / pi(u_min))`.
    pub fn sup_llr(&self, theta_min: f64, n: usize, s: f64) -> f64 {
        let nf = n as f64;
        let f = |theta: f64| -theta * s - nf * self.b(theta);
        let avg = s / nf;
        if avg >= self.tilted_mean(theta_min) {
            return f(theta_min);
        }
        if avg <= self.alphabet[0] {
            return -nf * self.pmf[0].ln();
        }
        let mut hi = theta_min.max(1.0);
        while self.tilted_mean(hi) > avg {
            hi *= 2.0;
        }
        let mut lo = theta_min;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.tilted_mean(mid) > avg {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        f(0.5 * (lo + hi))
    }

    /// First `t` at which some window ending at `t` has generalized
    /// log-likelihood ratio above `mu`.
    pub fn generalized_cusum_stop(&self, theta_min: f64, mu: f64, stream: &[f64]) -> Option<u64> {
        for t in 0..stream.len() {
            let mut s = 0.0;
            for start in (0..=t).rev() {
                s += stream[start];
                if self.sup_llr(theta_min, t - start + 1, s) > mu {
                    return Some(t as u64 + 1);
                }
            }
        }
        None
    }
}

/// Coefficient of determination of a least-squares line through `(x, y)`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

/// Smallest mean over a simplex grid of step `1 / steps` on a 3-symbol
/// alphabet, restricted to `KL(tau || pi) <= delta`.
pub fn simplex_grid_min(oracle: &Oracle, delta: f64, steps: usize) -> f64 {
    assert_eq!(oracle.alphabet.len(), 3);
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let a = i as f64 / steps as f64;
            let b = j as f64 / steps as f64;
            let tau = [a, b, (1.0 - a - b).max(0.0)];
            if oracle.kl(&tau) <= delta {
                let m: f64 = tau.iter().zip(&oracle.alphabet).map(|(p, u)| p * u).sum();
                best = best.min(m);
            }
        }
    }
    best
}

/// Uniform draw on the probability simplex from the spacings of sorted
/// uniforms.
pub fn spacings_draw<R: rand::Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>()).collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Smallest mean among `n` uniform simplex draws with `KL <= delta`, and
/// how many draws passed the filter.
pub fn dirichlet_min(oracle: &Oracle, delta: f64, n: usize, seed: u64) -> (f64, usize) {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let mut kept = 0;
    for _ in 0..n {
        let tau = spacings_draw(oracle.alphabet.len(), &mut rng);
        if oracle.kl(&tau) <= delta {
            kept += 1;
            let m: f64 = tau.iter().zip(&oracle.alphabet).map(|(p, u)| p * u).sum();
            best = best.min(m);
        }
    }
    (best, kept)
}

/// Fraction of `n` uniform simplex draws with per-step cost at least `eps`.
pub fn cost_acceptance(oracle: &Oracle, eps: f64, n: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let u_pi = oracle.mean();
    let hits = (0..n)
        .filter(|_| {
            let tau = spacings_draw(oracle.alphabet.len(), &mut rng);
            let m: f64 = tau.iter().zip(&oracle.alphabet).map(|(p, u)| p * u).sum();
            u_pi - m >= eps
        })
        .count();
    hits as f64 / n as f64
}
