//! Finite strategic games, joint distributions over action profiles and the
//! victim-side view of a mediator distribution.
//!
//! Action profiles are addressed by a flat index in row-major order: the
//! last player's action varies fastest. Players and actions are 0-indexed,
//! so "Player 1" in 1-indexed notation is player `0` here.

mod congestion;

pub use congestion::{build_congestion_game, routing_toy_spec, CongestionSpec, Edge, Trip};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of an in-memory distribution.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Tolerance on the total mass of a distribution read from a file.
pub const LOAD_MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategicGame {
    action_counts: Vec<usize>,
    /// `utilities[i][profile]` is `u^i(profile)`.
    utilities: Vec<Vec<f64>>,
}

impl StrategicGame {
    pub fn new(action_counts: Vec<usize>, utilities: Vec<Vec<f64>>) -> Result<Self> {
        if action_counts.is_empty() {
            return Err(Error::InvalidGame("a game needs at least one player".into()));
        }
        if let Some(i) = action_counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidGame(format!("player {i} has no actions")));
        }
        let profiles = action_counts
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidGame("profile space overflows usize".into()))?;
        if utilities.len() != action_counts.len() {
            return Err(Error::InvalidGame(format!(
                "{} utility tables for {} players",
                utilities.len(),
                action_counts.len()
            )));
        }
        for (i, table) in utilities.iter().enumerate() {
            if table.len() != profiles {
                return Err(Error::InvalidGame(format!(
                    "player {i}: {} utilities for {profiles} profiles",
                    table.len()
                )));
            }
            if let Some(v) = table.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidGame(format!("player {i}: utility {v} is not a finite nonnegative number")));
            }
        }
        Ok(Self { action_counts, utilities })
    }

    pub fn num_players(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn num_profiles(&self) -> usize {
        self.utilities[0].len()
    }

    pub fn utility_table(&self, player: usize) -> Result<&[f64]> {
        self.check_player(player)?;
        Ok(&self.utilities[player])
    }

    pub fn utility(&self, player: usize, profile: usize) -> f64 {
        self.utilities[player][profile]
    }

    pub fn check_player(&self, player: usize) -> Result<()> {
        if player >= self.num_players() {
            return Err(Error::PlayerOutOfRange { index: player, players: self.num_players() });
        }
        Ok(())
    }

    /// Distance between consecutive actions of `player` in the flat index.
    pub fn stride(&self, player: usize) -> usize {
        self.action_counts[player + 1..].iter().product()
    }

    pub fn action_of(&self, profile: usize, player: usize) -> usize {
        (profile / self.stride(player)) % self.action_counts[player]
    }

    /// Profile obtained from `profile` by switching `player` to `action`.
    pub fn with_action(&self, profile: usize, player: usize, action: usize) -> usize {
        let stride = self.stride(player);
        let current = (profile / stride) % self.action_counts[player];
        profile - current * stride + action * stride
    }

    pub fn profile_index(&self, actions: &[usize]) -> usize {
        actions.iter().zip(&self.action_counts).fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn profile_actions(&self, mut profile: usize) -> Vec<usize> {
        let mut actions = vec![0; self.num_players()];
        for (slot, &n) in actions.iter_mut().zip(&self.action_counts).rev() {
            *slot = profile % n;
            profile /= n;
        }
        actions
    }

    pub fn min_utility(&self) -> f64 {
        self.utilities.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Distribution over the action profiles of a game, stored densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, MASS_TOLERANCE)
    }

    /// Accepts a total mass within `tol` of one and renormalizes.
    pub fn with_tolerance(mut probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no profiles".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidDistribution(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}, not 1")));
        }
        if total != 1.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self { probs })
    }

    /// Builds a distribution from sparse `(profile, probability)` pairs.
    /// Repeated profiles accumulate.
    pub fn from_entries(num_profiles: usize, entries: &[(usize, f64)], tol: f64) -> Result<Self> {
        let mut probs = vec![0.0; num_profiles];
        for &(profile, p) in entries {
            let slot = probs.get_mut(profile).ok_or_else(|| {
                Error::InvalidDistribution(format!("profile {profile} outside a space of {num_profiles} profiles"))
            })?;
            *slot += p;
        }
        Self::with_tolerance(probs, tol)
    }

    pub fn point_mass(num_profiles: usize, profile: usize) -> Result<Self> {
        Self::from_entries(num_profiles, &[(profile, 1.0)], MASS_TOLERANCE)
    }

    pub fn uniform(num_profiles: usize) -> Self {
        Self { probs: vec![1.0 / num_profiles as f64; num_profiles] }
    }

    pub fn uniform_over(num_profiles: usize, support: &[usize]) -> Result<Self> {
        let w = 1.0 / support.len() as f64;
        let entries: Vec<_> = support.iter().map(|&s| (s, w)).collect();
        Self::from_entries(num_profiles, &entries, MASS_TOLERANCE)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, profile: usize) -> f64 {
        self.probs[profile]
    }

    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(i, p)| (i, *p))
    }

    pub fn entries(&self) -> Vec<(usize, f64)> {
        self.support().collect()
    }

    pub fn check_game(&self, game: &StrategicGame) -> Result<()> {
        if self.probs.len() != game.num_profiles() {
            return Err(Error::InvalidDistribution(format!(
                "distribution over {} profiles, game has {}",
                self.probs.len(),
                game.num_profiles()
            )));
        }
        Ok(())
    }
}

/// Extended Game of Chicken with three actions per player; player 0 picks
/// the row.
pub fn build_chicken_game() -> StrategicGame {
    #[rustfmt::skip]
    let row = vec![
        0.0, 6.0, 9.0,
        1.0, 5.0, 4.0,
        3.0, 2.0, 7.0,
    ];
    #[rustfmt::skip]
    let col = vec![
        0.0, 1.0, 3.0,
        6.0, 5.0, 2.0,
        9.0, 4.0, 7.0,
    ];
    StrategicGame::new(vec![3, 3], vec![row, col]).expect("static game is valid")
}

/// The correlated equilibrium of the chicken game used as mediator signal.
pub fn chicken_ce() -> JointDistribution {
    let g = build_chicken_game();
    let at = |a: usize, b: usize| g.profile_index(&[a, b]);
    let (a, b, c) = (0, 1, 2);
    let entries = [
        (at(a, b), 1.0 / 36.0),
        (at(b, a), 1.0 / 36.0),
        (at(b, b), 1.0 / 36.0),
        (at(a, c), 1.0 / 3.0),
        (at(c, a), 1.0 / 3.0),
        (at(c, c), 0.25),
    ];
    JointDistribution::from_entries(g.num_profiles(), &entries, MASS_TOLERANCE).expect("static distribution is valid")
}

pub fn expected_utility(game: &StrategicGame, dist: &JointDistribution, player: usize) -> Result<f64> {
    game.check_player(player)?;
    dist.check_game(game)?;
    Ok(dist.support().map(|(a, p)| p * game.utility(player, a)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

/// What the victim observes: its own utility. Profiles producing the same
/// utility are indistinguishable and grouped into one symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimView {
    pub victim: usize,
    /// Strictly increasing; `alphabet[0]` is `u_min`.
    pub alphabet: Vec<f64>,
    pub base_pmf: Vec<f64>,
    pub profile_groups: Vec<Vec<usize>>,
    /// Set when the alphabet came out of [`quantize_view`].
    pub grid: Option<QuantGrid>,
}

impl VictimView {
    pub fn len(&self) -> usize {
        self.alphabet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphabet.is_empty()
    }

    pub fn u_min(&self) -> f64 {
        self.alphabet[0]
    }

    pub fn mean(&self) -> f64 {
        self.alphabet.iter().zip(&self.base_pmf).map(|(u, p)| u * p).sum()
    }

    /// Exact lookup of an alphabet symbol.
    pub fn index_of(&self, u: f64) -> Option<usize> {
        self.alphabet.binary_search_by(|v| v.total_cmp(&u)).ok()
    }

    /// Index of the alphabet symbol closest to `u` (lower index on ties).
    pub fn nearest_index(&self, u: f64) -> usize {
        let i = self.alphabet.partition_point(|v| *v < u);
        if i == 0 {
            0
        } else if i == self.alphabet.len() || (u - self.alphabet[i - 1]) <= (self.alphabet[i] - u) {
            i - 1
        } else {
            i
        }
    }

    /// Builds a view directly from an alphabet and pmf, without a game.
    /// Symbols with zero mass are dropped.
    pub fn from_pmf(alphabet: &[f64], pmf: &[f64]) -> Result<Self> {
        if alphabet.len() != pmf.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} symbols but {} probabilities",
                alphabet.len(),
                pmf.len()
            )));
        }
        let mut pairs: Vec<(f64, f64)> =
            alphabet.iter().copied().zip(pmf.iter().copied()).filter(|(_, p)| *p > 0.0).collect();
        if pairs.is_empty() {
            return Err(Error::EmptyView);
        }
        if let Some((u, _)) = pairs.iter().find(|(u, _)| !u.is_finite()) {
            return Err(Error::InvalidDistribution(format!("non-finite utility {u}")));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidDistribution("repeated alphabet value".into()));
        }
        let probs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let dist = JointDistribution::new(probs)?;
        Ok(Self {
            victim: 0,
            alphabet: pairs.iter().map(|p| p.0).collect(),
            base_pmf: dist.probs,
            profile_groups: (0..pairs.len()).map(|k| vec![k]).collect(),
            grid: None,
        })
    }
}

/// Groups the supported profiles of `dist` by the victim's exact utility.
pub fn victim_view(game: &StrategicGame, dist: &JointDistribution, victim: usize) -> Result<VictimView> {
    game.check_player(victim)?;
    dist.check_game(game)?;
    let mut groups: BTreeMap<u64, (f64, f64, Vec<usize>)> = BTreeMap::new();
    for (a, p) in dist.support() {
        let u = game.utility(victim, a);
        // utilities are >= 0, so the bit pattern orders like the value
        let e = groups.entry(u.to_bits()).or_insert((u, 0.0, Vec::new()));
        e.1 += p;
        e.2.push(a);
    }
    if groups.is_empty() {
        return Err(Error::EmptyView);
    }
    let mut view = VictimView {
        victim,
        alphabet: Vec::with_capacity(groups.len()),
        base_pmf: Vec::with_capacity(groups.len()),
        profile_groups: Vec::with_capacity(groups.len()),
        grid: None,
    };
    for (_, (u, p, g)) in groups {
        view.alphabet.push(u);
        view.base_pmf.push(p);
        view.profile_groups.push(g);
    }
    Ok(view)
}

/// Snaps the alphabet onto `bins` equal-width intervals of
/// `[min, max]`, each occupied interval represented by its midpoint.
///
/// Re-quantizing a view with the bin count it was produced with returns it
/// unchanged.
pub fn quantize_view(view: &VictimView, bins: usize) -> Result<VictimView> {
    if view.is_empty() {
        return Err(Error::EmptyView);
    }
    if bins == 0 {
        return Err(Error::InvalidDistribution("bins must be >= 1".into()));
    }
    if matches!(view.grid, Some(g) if g.bins == bins) {
        return Ok(view.clone());
    }
    let lo = view.alphabet[0];
    let hi = *view.alphabet.last().unwrap();
    let width = (hi - lo) / bins as f64;
    let bin_of = |u: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((u - lo) / width).floor() as usize).min(bins - 1)
        }
    };
    let mut merged: BTreeMap<usize, (f64, Vec<usize>)> = BTreeMap::new();
    for ((u, p), g) in view.alphabet.iter().zip(&view.base_pmf).zip(&view.profile_groups) {
        let e = merged.entry(bin_of(*u)).or_insert((0.0, Vec::new()));
        e.0 += p;
        e.1.extend_from_slice(g);
    }
    let mut out = VictimView {
        victim: view.victim,
        alphabet: Vec::with_capacity(merged.len()),
        base_pmf: Vec::with_capacity(merged.len()),
        profile_groups: Vec::with_capacity(merged.len()),
        grid: Some(QuantGrid { lo, hi, bins }),
    };
    for (b, (p, mut g)) in merged {
        g.sort_unstable();
        out.alphabet.push(lo + (b as f64 + 0.5) * width);
        out.base_pmf.push(p);
        out.profile_groups.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn chicken_payoffs_match_table() {
        let g = build_chicken_game();
        let (a, b, c) = (0, 1, 2);
        let ac = g.profile_index(&[a, c]);
        assert_eq!(g.utility(0, ac), 9.0);
        assert_eq!(g.utility(1, ac), 3.0);
        let bb = g.profile_index(&[b, b]);
        assert_eq!(g.utility(0, bb), 5.0);
        assert_eq!(g.utility(1, bb), 5.0);
        assert_eq!(g.utility(0, g.profile_index(&[a, a])), 0.0);
        assert_eq!(g.utility(1, g.profile_index(&[c, a])), 9.0);
    }

    #[test]
    fn chicken_ce_masses() {
        let pi = chicken_ce();
        let total: f64 = pi.probs().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let g = build_chicken_game();
        assert_eq!(pi.prob(g.profile_index(&[2, 2])), 0.25);
        assert_eq!(pi.prob(g.profile_index(&[0, 0])), 0.0);
        assert_eq!(pi.support().count(), 6);
    }

    #[test]
    fn expected_utility_cases() {
        let g = build_chicken_game();
        let u = expected_utility(&g, &chicken_ce(), 0).unwrap();
        assert_abs_diff_eq!(u, 73.0 / 12.0, epsilon = 1e-12);

        let support: Vec<usize> = chicken_ce().support().map(|(a, _)| a).collect();
        let unif = JointDistribution::uniform_over(9, &support).unwrap();
        assert_abs_diff_eq!(expected_utility(&g, &unif, 0).unwrap(), 31.0 / 6.0, epsilon = 1e-12);

        for a in 0..9 {
            let pm = JointDistribution::point_mass(9, a).unwrap();
            assert_eq!(expected_utility(&g, &pm, 1).unwrap(), g.utility(1, a));
        }
        assert!(matches!(
            expected_utility(&g, &chicken_ce(), 2),
            Err(Error::PlayerOutOfRange { index: 2, players: 2 })
        ));
    }

    #[test]
    fn chicken_view() {
        let view = victim_view(&build_chicken_game(), &chicken_ce(), 0).unwrap();
        assert_eq!(view.alphabet, vec![1.0, 3.0, 5.0, 6.0, 7.0, 9.0]);
        let want = [1.0 / 36.0, 1.0 / 3.0, 1.0 / 36.0, 1.0 / 36.0, 0.25, 1.0 / 3.0];
        for (p, w) in view.base_pmf.iter().zip(want) {
            assert_abs_diff_eq!(*p, w, epsilon = 1e-15);
        }
        assert_eq!(view.u_min(), 1.0);
        assert_abs_diff_eq!(view.mean(), 73.0 / 12.0, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_view_and_grouping() {
        let g = build_chicken_game();
        let v = victim_view(&g, &JointDistribution::point_mass(9, 4).unwrap(), 0).unwrap();
        assert_eq!(v.alphabet, vec![5.0]);
        assert_eq!(v.base_pmf, vec![1.0]);

        // two profiles with identical victim utility end up in one group
        let game = StrategicGame::new(vec![2, 2], vec![vec![1.0, 2.0, 2.0, 3.0], vec![0.0; 4]]).unwrap();
        let d = JointDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let v = victim_view(&game, &d, 0).unwrap();
        assert_eq!(v.alphabet, vec![1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(v.base_pmf[1], 0.5, epsilon = 1e-15);
        assert_eq!(v.profile_groups[1], vec![1, 2]);
    }

    #[test]
    fn quantize_three_bins_against_grouping_oracle() {
        let view = victim_view(&build_chicken_game(), &chicken_ce(), 0).unwrap();
        let q = quantize_view(&view, 3).unwrap();
        // oracle: edges 1, 11/3, 19/3, 9 ; symbols {1,3} | {5,6} | {7,9}
        let edges = [1.0, 11.0 / 3.0, 19.0 / 3.0, 9.0];
        let mut mass = [0.0; 3];
        for (u, p) in view.alphabet.iter().zip(&view.base_pmf) {
            let b = (0..3).find(|&b| *u < edges[b + 1] || b == 2).unwrap();
            mass[b] += p;
        }
        assert_eq!(q.len(), 3);
        for b in 0..3 {
            assert_abs_diff_eq!(q.base_pmf[b], mass[b], epsilon = 1e-15);
            assert_abs_diff_eq!(q.alphabet[b], (edges[b] + edges[b + 1]) / 2.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(q.base_pmf[0], 13.0 / 36.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.base_pmf[1], 2.0 / 36.0, epsilon = 1e-15);
    }

    #[test]
    fn quantize_edge_cases() {
        let view = victim_view(&build_chicken_game(), &chicken_ce(), 0).unwrap();
        let one = quantize_view(&view, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_abs_diff_eq!(one.base_pmf[0], 1.0, epsilon = 1e-12);
        assert_eq!(one.profile_groups[0].len(), 6);

        let fine = quantize_view(&view, 8).unwrap();
        assert_eq!(fine.len(), view.len());
        assert_eq!(fine.base_pmf, view.base_pmf);

        let again = quantize_view(&fine, 8).unwrap();
        assert_eq!(again, fine);

        assert!(quantize_view(&view, 0).is_err());
    }

    #[test]
    fn profile_index_roundtrip() {
        let g = StrategicGame::new(vec![2, 3, 4], vec![vec![0.0; 24]; 3]).unwrap();
        for p in 0..24 {
            let a = g.profile_actions(p);
            assert_eq!(g.profile_index(&a), p);
            for i in 0..3 {
                assert_eq!(g.action_of(p, i), a[i]);
            }
        }
        assert_eq!(g.with_action(g.profile_index(&[1, 2, 3]), 1, 0), g.profile_index(&[1, 0, 3]));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(StrategicGame::new(vec![2], vec![vec![-1.0, 0.0]]).is_err());
        assert!(StrategicGame::new(vec![2], vec![vec![0.0]]).is_err());
        assert!(JointDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(JointDistribution::with_tolerance(vec![0.5, 0.5 + 1e-10], 1e-9).is_ok());
    }
}
