//! CE / CCE verification and regret-matching dynamics for learning an
//! approximate (coarse) correlated equilibrium.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::game::{JointDistribution, StrategicGame, MASS_TOLERANCE};

/// Default gap below which a distribution counts as an approximate
/// equilibrium, in utility units.
pub const DEFAULT_GAP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Deviation {
    /// `swap[r]` replaces recommendation `r`.
    Swap(Vec<usize>),
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstDeviation {
    pub player: usize,
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub per_player_gap: Vec<f64>,
    pub max_gap: f64,
    pub worst_deviation: WorstDeviation,
}

/// `gain[r][s]`: expected change for `player` from playing `s` whenever `r`
/// is recommended.
fn swap_gains(game: &StrategicGame, dist: &JointDistribution, player: usize) -> Vec<Vec<f64>> {
    let n = game.action_counts()[player];
    let mut gain = vec![vec![0.0; n]; n];
    for (a, p) in dist.support() {
        let r = game.action_of(a, player);
        let base = game.utility(player, a);
        for (s, g) in gain[r].iter_mut().enumerate() {
            *g += p * (game.utility(player, game.with_action(a, player, s)) - base);
        }
    }
    gain
}

/// Lowest-index argmax.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn best_swap(game: &StrategicGame, dist: &JointDistribution, player: usize) -> (f64, Vec<usize>) {
    let gains = swap_gains(game, dist, player);
    let swap: Vec<usize> = gains.iter().map(|row| argmax(row)).collect();
    let gap = gains.iter().zip(&swap).map(|(row, &s)| row[s]).sum();
    (gap, swap)
}

fn best_fixed(game: &StrategicGame, dist: &JointDistribution, player: usize) -> (f64, usize) {
    let n = game.action_counts()[player];
    let mut gain = vec![0.0; n];
    for (a, p) in dist.support() {
        let base = game.utility(player, a);
        for (s, g) in gain.iter_mut().enumerate() {
            *g += p * (game.utility(player, game.with_action(a, player, s)) - base);
        }
    }
    let s = argmax(&gain);
    (gain[s], s)
}

/// Largest expected gain of any swap map for `player`. Never negative (the
/// identity map gains zero); `dist` is a CE for the player iff this is 0.
pub fn ce_deviation_gap(game: &StrategicGame, dist: &JointDistribution, player: usize) -> Result<f64> {
    game.check_player(player)?;
    dist.check_game(game)?;
    Ok(best_swap(game, dist, player).0)
}

/// Largest expected gain of committing to a fixed action; `<= 0` iff `dist`
/// is a CCE for the player.
pub fn cce_deviation_gap(game: &StrategicGame, dist: &JointDistribution, player: usize) -> Result<f64> {
    game.check_player(player)?;
    dist.check_game(game)?;
    Ok(best_fixed(game, dist, player).0)
}

fn report(gaps: Vec<(f64, Deviation)>) -> DeviationReport {
    let worst = argmax(&gaps.iter().map(|g| g.0).collect::<Vec<_>>());
    DeviationReport {
        max_gap: gaps[worst].0,
        worst_deviation: WorstDeviation { player: worst, deviation: gaps[worst].1.clone() },
        per_player_gap: gaps.into_iter().map(|g| g.0).collect(),
    }
}

pub fn ce_report(game: &StrategicGame, dist: &JointDistribution) -> Result<DeviationReport> {
    dist.check_game(game)?;
    Ok(report(
        (0..game.num_players())
            .map(|i| {
                let (g, s) = best_swap(game, dist, i);
                (g, Deviation::Swap(s))
            })
            .collect(),
    ))
}

pub fn cce_report(game: &StrategicGame, dist: &JointDistribution) -> Result<DeviationReport> {
    dist.check_game(game)?;
    Ok(report(
        (0..game.num_players())
            .map(|i| {
                let (g, s) = best_fixed(game, dist, i);
                (g, Deviation::Fixed(s))
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegretMode {
    /// Bounds external regret; the empirical play approaches the CCE set.
    External,
    /// Bounds swap regret; the empirical play approaches the CE set.
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedEquilibrium {
    pub empirical: JointDistribution,
    pub rounds: usize,
    pub mode: RegretMode,
    /// `regret_trace[t][i]`: player `i`'s average regret after `t + 1`
    /// rounds, measured on realized play.
    pub regret_trace: Vec<Vec<f64>>,
}

impl LearnedEquilibrium {
    pub fn final_regret(&self) -> &[f64] {
        self.regret_trace.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// `round,player,avg_regret`, one row per player for every `stride`-th
    /// round plus the last one.
    pub fn regret_csv(&self, stride: usize) -> String {
        let stride = stride.max(1);
        let mut out = String::from("round,player,avg_regret\n");
        for (t, row) in self.regret_trace.iter().enumerate() {
            let round = t + 1;
            if round % stride != 0 && round != self.rounds {
                continue;
            }
            for (i, r) in row.iter().enumerate() {
                let _ = writeln!(out, "{round},{i},{}", crate::fmt_f64(*r));
            }
        }
        out
    }
}

struct Learner {
    n: usize,
    /// External: length n. Internal: n x n, row = action played.
    regret: Vec<f64>,
    strategy: Vec<f64>,
}

impl Learner {
    fn new(n: usize, mode: RegretMode) -> Self {
        let len = match mode {
            RegretMode::External => n,
            RegretMode::Internal => n * n,
        };
        Self { n, regret: vec![0.0; len], strategy: vec![1.0 / n as f64; n] }
    }

    fn refresh(&mut self, mode: RegretMode) {
        let n = self.n;
        match mode {
            RegretMode::External => {
                let total: f64 = self.regret.iter().map(|r| r.max(0.0)).sum();
                for (p, r) in self.strategy.iter_mut().zip(&self.regret) {
                    *p = if total > 0.0 { r.max(0.0) / total } else { 1.0 / n as f64 };
                }
            }
            RegretMode::Internal => {
                // Row-stochastic switching matrix from positive swap regrets;
                // play its stationary distribution.
                let mut q = vec![0.0; n * n];
                for j in 0..n {
                    let row = &self.regret[j * n..(j + 1) * n];
                    let total: f64 = row.iter().map(|r| r.max(0.0)).sum();
                    for k in 0..n {
                        q[j * n + k] = if total > 0.0 {
                            row[k].max(0.0) / total
                        } else if j == k {
                            1.0
                        } else {
                            0.0
                        };
                    }
                }
                let mut p = self.strategy.clone();
                let mut next = vec![0.0; n];
                for _ in 0..500 {
                    // lazy chain: same stationary set, guaranteed convergence
                    for (k, slot) in next.iter_mut().enumerate() {
                        *slot = 0.5 * p[k] + 0.5 * (0..n).map(|j| p[j] * q[j * n + k]).sum::<f64>();
                    }
                    let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
                    std::mem::swap(&mut p, &mut next);
                    if delta < 1e-13 {
                        break;
                    }
                }
                let total: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= total);
                self.strategy = p;
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.strategy.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.strategy.iter().rposition(|p| *p > 0.0).unwrap_or(self.n - 1)
    }

    /// Average regret after `t` rounds.
    fn average(&self, mode: RegretMode, t: usize) -> f64 {
        let n = self.n;
        let total = match mode {
            RegretMode::External => self.regret.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RegretMode::Internal => {
                (0..n).map(|j| self.regret[j * n..(j + 1) * n].iter().copied().fold(0.0, f64::max)).sum()
            }
        };
        total / t as f64
    }
}

/// Runs regret matching for every player simultaneously and returns the
/// time-averaged joint play.
///
/// Regrets are accumulated on realized play, so the final average regret of
/// each player equals the (mode-matched) deviation gap of the empirical
/// distribution.
pub fn regret_matching_learn(
    game: &StrategicGame,
    rounds: usize,
    mode: RegretMode,
    seed: u64,
) -> Result<LearnedEquilibrium> {
    let rounds = rounds.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let players = game.num_players();
    let mut learners: Vec<Learner> = game.action_counts().iter().map(|&n| Learner::new(n, mode)).collect();
    let mut counts = vec![0u64; game.num_profiles()];
    let mut trace = Vec::with_capacity(rounds);
    let mut actions = vec![0usize; players];

    for t in 1..=rounds {
        for (slot, l) in actions.iter_mut().zip(&learners) {
            *slot = l.sample(&mut rng);
        }
        let profile = game.profile_index(&actions);
        counts[profile] += 1;
        for (i, l) in learners.iter_mut().enumerate() {
            let played = actions[i];
            let base = game.utility(i, profile);
            let n = l.n;
            for s in 0..n {
                let gain = game.utility(i, game.with_action(profile, i, s)) - base;
                match mode {
                    RegretMode::External => l.regret[s] += gain,
                    RegretMode::Internal => l.regret[played * n + s] += gain,
                }
            }
            l.refresh(mode);
        }
        trace.push(learners.iter().map(|l| l.average(mode, t)).collect());
    }

    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / rounds as f64).collect();
    Ok(LearnedEquilibrium {
        empirical: JointDistribution::with_tolerance(probs, MASS_TOLERANCE)?,
        rounds,
        mode,
        regret_trace: trace,
    })
}
