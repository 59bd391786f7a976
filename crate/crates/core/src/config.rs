//! TOML run configuration shared by every CLI command.
//!
//! A config names a game, a mediator distribution, the victim, and the
//! parameters of whichever command consumes it. Distribution files are
//! inlined while loading, so the digest covers their content.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{make_tilted_attack, pmf_on_alphabet, sample_random_attack, AttackSpec, StartLaw};
use crate::detection::ObservationMode;
use crate::equilibrium::{regret_matching_learn, RegretMode};
use crate::error::{Error, Result};
use crate::game::{
    build_chicken_game, build_congestion_game, chicken_ce, quantize_view, routing_toy_spec, victim_view,
    CongestionSpec, JointDistribution, StrategicGame, LOAD_MASS_TOLERANCE,
};
use crate::tilted::TiltedFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub game: GameConfig,
    pub distribution: DistributionConfig,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub tilt: TiltSection,
    #[serde(default)]
    pub tolerable: TolerableSection,
    #[serde(default)]
    pub learn: LearnSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GameConfig {
    Chicken,
    Explicit {
        action_counts: Vec<usize>,
        /// One row-major table per player, last player's action fastest.
        utilities: Vec<Vec<f64>>,
    },
    Congestion {
        #[serde(default)]
        preset: Option<String>,
        #[serde(default)]
        network: Option<CongestionSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionConfig {
    ChickenCe,
    Uniform,
    Explicit {
        #[serde(default)]
        probs: Option<Vec<f64>>,
        /// Sparse `[profile, probability]` pairs.
        #[serde(default)]
        entries: Option<Vec<(usize, f64)>>,
    },
    /// Path to a distribution file, relative to the config file.
    File {
        path: PathBuf,
    },
    /// Empirical play of regret matching on the configured game.
    Learned {
        rounds: usize,
        #[serde(default = "default_mode")]
        mode: RegretMode,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    #[serde(default)]
    pub player: usize,
    /// Equal-width quantization of the victim's utilities.
    #[serde(default)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub observation: ObservationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    /// `tau_theta` with `theta` given directly or as a multiple of
    /// `theta_min`; `theta_min` itself when neither is set.
    Tilted {
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        theta: Option<f64>,
        #[serde(default)]
        theta_factor: Option<f64>,
        #[serde(default)]
        start: StartLaw,
    },
    Random {
        #[serde(default)]
        label: Option<String>,
        seed: u64,
        #[serde(default)]
        start: StartLaw,
    },
    Explicit {
        #[serde(default)]
        label: Option<String>,
        values: Vec<f64>,
        probs: Vec<f64>,
        #[serde(default)]
        start: StartLaw,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub false_alarm_cost: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { episodes: default_episodes(), horizon: default_horizon(), false_alarm_cost: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
    #[serde(default)]
    pub log: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiltSection {
    #[serde(default)]
    pub thetas: Vec<f64>,
    #[serde(default)]
    pub grid: Option<ThetaGrid>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerableSection {
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub target_mtbfa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSection {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_mode")]
    pub mode: RegretMode,
    #[serde(default)]
    pub seed: u64,
    /// Every `regret_stride`-th round goes to the regret CSV.
    #[serde(default = "default_stride")]
    pub regret_stride: usize,
}

impl Default for LearnSection {
    fn default() -> Self {
        Self { rounds: default_rounds(), mode: default_mode(), seed: 0, regret_stride: default_stride() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { tolerance: default_tolerance() }
    }
}

fn default_episodes() -> usize {
    500
}
fn default_horizon() -> u64 {
    100_000
}
fn default_rounds() -> usize {
    100_000
}
fn default_mode() -> RegretMode {
    RegretMode::Internal
}
fn default_stride() -> usize {
    100
}
fn default_tolerance() -> f64 {
    1e-9
}

/// Standalone distribution document, as written by `learn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    distribution: DistributionConfig,
}

pub fn distribution_document(dist: &JointDistribution) -> Result<String> {
    let doc =
        DistributionFile { distribution: DistributionConfig::Explicit { probs: None, entries: Some(dist.entries()) } };
    toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))
}

fn read_distribution_file(path: &Path) -> Result<DistributionConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read distribution file {}: {e}", path.display())))?;
    let doc: DistributionFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match doc.distribution {
        DistributionConfig::File { .. } => Err(Error::Config("distribution files cannot nest".into())),
        d => Ok(d),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a config; relative distribution-file paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let DistributionConfig::File { path } = &cfg.distribution {
            cfg.distribution = read_distribution_file(&base_dir.join(path))?;
        }
        Ok(cfg)
    }

    /// sha256 of the canonical JSON form; key order in the source file and
    /// spelled-out defaults do not matter.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }

    pub fn build_game(&self) -> Result<StrategicGame> {
        match &self.game {
            GameConfig::Chicken => Ok(build_chicken_game()),
            GameConfig::Explicit { action_counts, utilities } => {
                StrategicGame::new(action_counts.clone(), utilities.clone())
            }
            GameConfig::Congestion { preset, network } => match (preset.as_deref(), network) {
                (Some("routing_toy"), None) => build_congestion_game(&routing_toy_spec()),
                (None, Some(spec)) => build_congestion_game(spec),
                (Some(p), None) => Err(Error::Config(format!("unknown congestion preset {p:?}"))),
                _ => Err(Error::Config("congestion game needs exactly one of preset, network".into())),
            },
        }
    }

    pub fn build_distribution(&self, game: &StrategicGame) -> Result<JointDistribution> {
        let dist = match &self.distribution {
            DistributionConfig::ChickenCe => chicken_ce(),
            DistributionConfig::Uniform => JointDistribution::uniform(game.num_profiles()),
            DistributionConfig::Explicit { probs, entries } => match (probs, entries) {
                (Some(p), None) => JointDistribution::with_tolerance(p.clone(), LOAD_MASS_TOLERANCE)?,
                (None, Some(e)) => JointDistribution::from_entries(game.num_profiles(), e, LOAD_MASS_TOLERANCE)?,
                _ => return Err(Error::Config("explicit distribution needs exactly one of probs, entries".into())),
            },
            DistributionConfig::File { path } => {
                return Err(Error::Config(format!("unresolved distribution file {}", path.display())))
            }
            DistributionConfig::Learned { rounds, mode, seed } => {
                regret_matching_learn(game, *rounds, *mode, *seed)?.empirical
            }
        };
        dist.check_game(game)?;
        Ok(dist)
    }

    pub fn build_family(&self, game: &StrategicGame, dist: &JointDistribution) -> Result<TiltedFamily> {
        let mut view = victim_view(game, dist, self.victim.player)?;
        if let Some(bins) = self.victim.bins {
            view = quantize_view(&view, bins)?;
        }
        TiltedFamily::new(view)
    }

    /// Game, distribution and victim family in one go.
    pub fn resolve(&self) -> Result<(StrategicGame, JointDistribution, TiltedFamily)> {
        let game = self.build_game()?;
        let dist = self.build_distribution(&game)?;
        let family = self.build_family(&game, &dist)?;
        Ok((game, dist, family))
    }

    pub fn epsilon(&self) -> Result<f64> {
        self.detector.epsilon.ok_or_else(|| Error::Config("detector.epsilon is required".into()))
    }

    pub fn build_attacks(&self, family: &TiltedFamily) -> Result<Vec<AttackSpec>> {
        let epsilon = self.epsilon()?;
        let theta_min = family.theta_for_epsilon(epsilon)?.theta;
        let mut out: Vec<AttackSpec> = Vec::with_capacity(self.attacks.len());
        for (i, a) in self.attacks.iter().enumerate() {
            let spec = match a {
                AttackConfig::Tilted { label, theta, theta_factor, start } => {
                    let (theta, default_label) = match (theta, theta_factor) {
                        (None, None) => (theta_min, "theta_min".to_string()),
                        (Some(t), None) => (*t, format!("theta_{t}")),
                        (None, Some(k)) => (k * theta_min, format!("theta_min_x{k}")),
                        _ => return Err(Error::Config(format!("attack {i}: set theta or theta_factor, not both"))),
                    };
                    make_tilted_attack(family, theta, epsilon, *start)?
                        .with_label(label.as_deref().unwrap_or(&default_label))
                }
                AttackConfig::Random { label, seed, start } => sample_random_attack(family, epsilon, *seed)?
                    .with_start(*start)?
                    .with_label(label.as_deref().unwrap_or(&format!("random_{seed}"))),
                AttackConfig::Explicit { label, values, probs, start } => {
                    let tau = pmf_on_alphabet(family, values, probs)?;
                    AttackSpec::explicit(family, label.as_deref().unwrap_or(&format!("explicit_{i}")), tau, *start)?
                        .flag_epsilon(epsilon)
                }
            };
            if spec.label == "none" || out.iter().any(|o| o.label == spec.label) {
                return Err(Error::Config(format!("attack label {:?} is reserved or repeated", spec.label)));
            }
            out.push(spec);
        }
        Ok(out)
    }

    pub fn thetas(&self) -> Result<Vec<f64>> {
        let mut thetas = self.tilt.thetas.clone();
        if let Some(g) = &self.tilt.grid {
            if g.points < 2 || !(g.stop > g.start) || (g.log && !(g.start > 0.0)) {
                return Err(Error::Config("tilt.grid needs points >= 2, stop > start (> 0 when log)".into()));
            }
            let step = |i: usize| i as f64 / (g.points - 1) as f64;
            thetas.extend((0..g.points).map(|i| {
                if g.log {
                    (g.start.ln() + step(i) * (g.stop.ln() - g.start.ln())).exp()
                } else {
                    g.start + step(i) * (g.stop - g.start)
                }
            }));
        }
        if thetas.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Config("thetas must be finite and >= 0".into()));
        }
        Ok(thetas)
    }
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.into_iter().map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHICKEN: &str = r#"
seed = 3
[game]
kind = "chicken"
[distribution]
kind = "chicken_ce"
[detector]
epsilon = 0.5
alphas = [0.01, 0.001]
[[attacks]]
kind = "tilted"
[[attacks]]
kind = "tilted"
theta = 0.09
label = "theta_1"
[[attacks]]
kind = "random"
seed = 4
[[attacks]]
kind = "explicit"
values = [1.0, 9.0]
probs = [0.5, 0.5]
start = { kind = "adaptive", p = 0.1 }
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = RunConfig::parse(CHICKEN, Path::new(".")).unwrap();
        let (game, dist, family) = cfg.resolve().unwrap();
        assert_eq!(game.num_profiles(), 9);
        assert_eq!(dist, chicken_ce());
        assert_eq!(family.len(), 6);
        let attacks = cfg.build_attacks(&family).unwrap();
        let labels: Vec<&str> = attacks.iter().map(|a| a.label.as_str()).collect();
        assert_eq!(labels, ["theta_min", "theta_1", "random_4", "explicit_3"]);
        assert_eq!(attacks[3].start, StartLaw::Adaptive { p: 0.1 });
        assert_eq!(attacks[0].start, StartLaw::Fixed { t: 1 });
        assert_eq!(cfg.simulation.episodes, 500);
    }

    #[test]
    fn digest_ignores_key_order_and_defaults() {
        let a = RunConfig::parse(CHICKEN, Path::new(".")).unwrap();
        let reordered = r#"
[distribution]
kind = "chicken_ce"
[[attacks]]
kind = "tilted"
[[attacks]]
label = "theta_1"
theta = 0.09
kind = "tilted"
[[attacks]]
seed = 4
kind = "random"
[[attacks]]
kind = "explicit"
probs = [0.5, 0.5]
values = [1.0, 9.0]
start = { p = 0.1, kind = "adaptive" }
[detector]
alphas = [0.01, 0.001]
epsilon = 0.5
observation = "strict"
[game]
kind = "chicken"
[simulation]
episodes = 500
"#;
        let b = RunConfig::parse(&format!("seed = 3\n{reordered}"), Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.detector.alphas[1] = 0.002;
        assert_ne!(a.digest(), c.digest());
        let mut d = a.clone();
        d.seed = 4;
        assert_ne!(a.digest(), d.digest());
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v: serde_json::Value =
            serde_json::from_str(r#"{"b": {"y": 1, "x": [2, {"q": 0, "p": 1}]}, "a": 1.5}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":1.5,"b":{"x":[2,{"p":1,"q":0}],"y":1}}"#);
    }

    #[test]
    fn config_errors() {
        let bad = [
            "[game]\nkind = \"chicken\"",
            "[game]\nkind = \"chess\"\n[distribution]\nkind = \"uniform\"",
            "[game]\nkind = \"chicken\"\n[distribution]\nkind = \"uniform\"\n[detector]\nepsilon = 0.5\ntypo = 1",
            "[game]\nkind = \"chicken\"\n[distribution]\nkind = \"file\"\npath = \"/nonexistent/x.toml\"",
        ];
        for text in bad {
            let err = RunConfig::parse(text, Path::new(".")).unwrap_err();
            assert!(err.is_config_error(), "{text}: {err}");
        }
        let cfg = RunConfig::parse(
            "[game]\nkind = \"chicken\"\n[distribution]\nkind = \"explicit\"\nprobs = [0.5, 0.5]",
            Path::new("."),
        )
        .unwrap();
        assert!(cfg.resolve().unwrap_err().is_config_error());
        let cfg = RunConfig::parse(
            "[game]\nkind = \"congestion\"\npreset = \"sioux_falls\"\n[distribution]\nkind = \"uniform\"",
            Path::new("."),
        )
        .unwrap();
        assert!(cfg.build_game().unwrap_err().is_config_error());
    }

    #[test]
    fn distribution_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let doc = distribution_document(&chicken_ce()).unwrap();
        std::fs::write(dir.path().join("ce.toml"), doc).unwrap();
        let text = "[game]\nkind = \"chicken\"\n[distribution]\nkind = \"file\"\npath = \"ce.toml\"";
        let cfg = RunConfig::parse(text, dir.path()).unwrap();
        assert!(matches!(cfg.distribution, DistributionConfig::Explicit { .. }));
        let (_, dist, _) = cfg.resolve().unwrap();
        for (a, b) in dist.probs().iter().zip(chicken_ce().probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn theta_grids() {
        let text = "[game]\nkind = \"chicken\"\n[distribution]\nkind = \"chicken_ce\"\n[tilt]\nthetas = [0.5]\ngrid = { start = 0.01, stop = 1.0, points = 3, log = true }";
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        let t = cfg.thetas().unwrap();
        assert_eq!(t.len(), 4);
        assert!((t[2] - 0.1).abs() < 1e-12 && (t[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn congestion_and_learned_sources() {
        let text = r#"
[game]
kind = "congestion"
preset = "routing_toy"
[distribution]
kind = "learned"
rounds = 2000
mode = "external"
seed = 1
[victim]
player = 2
bins = 10
"#;
        let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
        let (game, _, family) = cfg.resolve().unwrap();
        assert_eq!(game.num_profiles(), 81);
        assert!(family.len() <= 10);
    }
}
