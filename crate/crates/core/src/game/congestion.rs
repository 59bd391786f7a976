//! Small atomic congestion (routing) games with BPR link latencies.

use serde::{Deserialize, Serialize};

use super::StrategicGame;
use crate::error::{Error, Result};

const BPR_ALPHA: f64 = 0.15;
const BPR_POWER: i32 = 4;
const MAX_ENUMERATED_PATHS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub capacity: f64,
    pub free_flow_time: f64,
}

impl Edge {
    pub fn new(from: usize, to: usize, capacity: f64, free_flow_time: f64) -> Self {
        Self { from, to, capacity, free_flow_time }
    }

    pub fn travel_time(&self, load: f64) -> f64 {
        self.free_flow_time * (1.0 + BPR_ALPHA * (load / self.capacity).powi(BPR_POWER))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub origin: usize,
    pub destination: usize,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionSpec {
    pub nodes: usize,
    pub edges: Vec<Edge>,
    pub players: Vec<Trip>,
    pub paths_per_player: usize,
    pub utility_scale: f64,
    /// Utilities are `scale * (offset - travel time)`. Defaults to the
    /// largest travel time over all players and profiles.
    #[serde(default)]
    pub offset: Option<f64>,
}

/// Desk-scale routing network: 6 nodes, 10 links, 4 unit-demand players
/// travelling 0 -> 5 with their 3 fastest free-flow routes (81 profiles).
pub fn routing_toy_spec() -> CongestionSpec {
    let e = Edge::new;
    let trip = Trip { origin: 0, destination: 5, demand: 1.0 };
    CongestionSpec {
        nodes: 6,
        edges: vec![
            e(0, 1, 1.0, 2.0),
            e(0, 2, 1.5, 3.0),
            e(1, 2, 1.0, 1.0),
            e(1, 3, 1.0, 4.0),
            e(2, 3, 2.0, 2.0),
            e(2, 4, 1.0, 4.0),
            e(3, 4, 1.5, 1.0),
            e(3, 5, 1.0, 3.0),
            e(4, 5, 2.0, 2.0),
            e(1, 4, 1.0, 6.0),
        ],
        players: vec![trip.clone(), trip.clone(), trip.clone(), trip],
        paths_per_player: 3,
        utility_scale: 0.25,
        offset: None,
    }
}

/// Simple paths from `origin` to `destination` as edge-index sequences,
/// ordered by free-flow time (ties by edge sequence).
fn ranked_paths(spec: &CongestionSpec, origin: usize, destination: usize) -> Vec<(f64, Vec<usize>)> {
    let mut out = Vec::new();
    let mut on_path = vec![false; spec.nodes];
    let mut stack = Vec::new();

    fn dfs(
        spec: &CongestionSpec,
        node: usize,
        destination: usize,
        on_path: &mut [bool],
        stack: &mut Vec<usize>,
        out: &mut Vec<(f64, Vec<usize>)>,
    ) {
        if out.len() >= MAX_ENUMERATED_PATHS {
            return;
        }
        if node == destination {
            let cost = stack.iter().map(|&e| spec.edges[e].free_flow_time).sum();
            out.push((cost, stack.clone()));
            return;
        }
        on_path[node] = true;
        for (idx, edge) in spec.edges.iter().enumerate() {
            if edge.from == node && !on_path[edge.to] {
                stack.push(idx);
                dfs(spec, edge.to, destination, on_path, stack, out);
                stack.pop();
            }
        }
        on_path[node] = false;
    }

    dfs(spec, origin, destination, &mut on_path, &mut stack, &mut out);
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    out
}

fn validate(spec: &CongestionSpec) -> Result<()> {
    if spec.nodes == 0 || spec.players.is_empty() || spec.paths_per_player == 0 {
        return Err(Error::Routing("nodes, players and paths_per_player must be positive".into()));
    }
    if !(spec.utility_scale > 0.0) {
        return Err(Error::Routing("utility_scale must be positive".into()));
    }
    for (i, e) in spec.edges.iter().enumerate() {
        if e.from >= spec.nodes || e.to >= spec.nodes {
            return Err(Error::Routing(format!("edge {i} references a missing node")));
        }
        if !(e.capacity > 0.0 && e.free_flow_time > 0.0) {
            return Err(Error::Routing(format!("edge {i}: capacity and time must be positive")));
        }
    }
    for (i, t) in spec.players.iter().enumerate() {
        if t.origin >= spec.nodes || t.destination >= spec.nodes || t.origin == t.destination {
            return Err(Error::Routing(format!("player {i}: bad origin/destination")));
        }
        if !(t.demand > 0.0) {
            return Err(Error::Routing(format!("player {i}: demand must be positive")));
        }
    }
    Ok(())
}

/// Per-player route sets (edge-index sequences) used as action sets.
pub fn player_routes(spec: &CongestionSpec) -> Result<Vec<Vec<Vec<usize>>>> {
    validate(spec)?;
    spec.players
        .iter()
        .enumerate()
        .map(|(i, trip)| {
            let paths = ranked_paths(spec, trip.origin, trip.destination);
            if paths.is_empty() {
                return Err(Error::Routing(format!(
                    "player {i}: node {} cannot reach node {}",
                    trip.origin, trip.destination
                )));
            }
            if paths.len() < spec.paths_per_player {
                return Err(Error::Routing(format!(
                    "player {i}: only {} simple paths, {} requested",
                    paths.len(),
                    spec.paths_per_player
                )));
            }
            Ok(paths.into_iter().take(spec.paths_per_player).map(|(_, p)| p).collect())
        })
        .collect()
}

pub fn build_congestion_game(spec: &CongestionSpec) -> Result<StrategicGame> {
    let routes = player_routes(spec)?;
    let n = spec.players.len();
    let k = spec.paths_per_player;
    let profiles = k.checked_pow(n as u32).ok_or_else(|| Error::Routing("profile space too large".into()))?;

    let mut times = vec![vec![0.0; profiles]; n];
    let mut load = vec![0.0; spec.edges.len()];
    let mut actions = vec![0usize; n];
    for profile in 0..profiles {
        let mut rest = profile;
        for slot in actions.iter_mut().rev() {
            *slot = rest % k;
            rest /= k;
        }
        load.iter_mut().for_each(|l| *l = 0.0);
        for (i, &a) in actions.iter().enumerate() {
            for &e in &routes[i][a] {
                load[e] += spec.players[i].demand;
            }
        }
        for (i, &a) in actions.iter().enumerate() {
            let route_time: f64 = routes[i][a].iter().map(|&e| spec.edges[e].travel_time(load[e])).sum();
            times[i][profile] = spec.players[i].demand * route_time;
        }
    }

    let worst = times.iter().flatten().copied().fold(0.0, f64::max);
    let offset = spec.offset.unwrap_or(worst);
    if offset < worst {
        return Err(Error::Routing(format!("offset {offset} below the largest travel time {worst}")));
    }
    let utilities =
        times.into_iter().map(|row| row.into_iter().map(|t| spec.utility_scale * (offset - t)).collect()).collect();
    StrategicGame::new(vec![k; n], utilities)
}
