//! `cesentry` command line.
//!
//! Flags override the matching config keys; anything not given on the
//! command line comes from the config file, then from built-in defaults.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adversary::AttackSpec;
use crate::config::{distribution_document, RunConfig};
use crate::detection::{trace_csv, DetectorConfig};
use crate::equilibrium::{cce_report, ce_report, regret_matching_learn};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::simulation::{
    episodes_csv, run_episode_recorded, run_episodes, sweep, sweep_csv, tolerable_csv, tolerable_impact, EpisodeConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cesentry", version, about = "Detect manipulated correlated-equilibrium signals")]
pub struct Cli {
    /// Worker threads for Monte-Carlo runs (results do not depend on it).
    #[arg(long, global = true, env = "CESENTRY_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print CE and CCE deviation gaps of the configured distribution.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Tabulate the tilted family and solve for theta_min.
    Tilt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Comma-separated thetas, replacing the configured grid.
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
    /// Threshold sweep: MTBFA, delay and impact per alpha and attack.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimOverrides,
    },
    /// Impact of the theta_min attack at calibrated MTBFA targets.
    TolerableImpact {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimOverrides,
    },
    /// Learn an equilibrium with regret matching.
    Learn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Per-episode dumps at the first configured alpha.
    Episodes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimOverrides,
        /// Also write the detector trace of episode 0 per scenario.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "cesentry-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimOverrides {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub outputs: Vec<String>,
    pub wall_time: f64,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

struct Session {
    command: &'static str,
    out: PathBuf,
    cfg: RunConfig,
    started: Instant,
    outputs: Vec<String>,
}

impl Session {
    fn open(command: &'static str, common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(Self { command, out: common.out.clone(), cfg, started: Instant::now(), outputs: Vec::new() })
    }

    fn apply(&mut self, sim: &SimOverrides) {
        if let Some(e) = sim.episodes {
            self.cfg.simulation.episodes = e;
        }
        if let Some(h) = sim.horizon {
            self.cfg.simulation.horizon = h;
        }
        if let Some(eps) = sim.epsilon {
            self.cfg.detector.epsilon = Some(eps);
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        std::fs::write(&path, contents)?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_digest: self.cfg.digest(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: self.cfg.seed,
            outputs: self.outputs.clone(),
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let name = format!("manifest-{}.json", self.command);
        self.write(&name, &(text + "\n"))?;
        println!("wrote {}", self.out.join(name).display());
        Ok(())
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Verify { common, tolerance } => verify(&common, tolerance),
        Command::Tilt { common, epsilon, thetas } => tilt(&common, epsilon, thetas),
        Command::Sweep { common, sim } => run_sweep(&common, &sim),
        Command::TolerableImpact { common, sim } => run_tolerable(&common, &sim),
        Command::Learn { common, rounds } => learn(&common, rounds),
        Command::Episodes { common, sim, trace } => episodes(&common, &sim, trace),
    }
}

fn verify(common: &Common, tolerance: Option<f64>) -> Result<i32> {
    let mut s = Session::open("verify", common)?;
    if let Some(t) = tolerance {
        s.cfg.verify.tolerance = t;
    }
    let tol = s.cfg.verify.tolerance;
    let game = s.cfg.build_game()?;
    let dist = s.cfg.build_distribution(&game)?;
    let ce = ce_report(&game, &dist)?;
    let cce = cce_report(&game, &dist)?;
    println!("player  ce_gap                   cce_gap");
    for (i, (a, b)) in ce.per_player_gap.iter().zip(&cce.per_player_gap).enumerate() {
        println!("{i:<7} {:<24} {}", fmt_f64(*a), fmt_f64(*b));
    }
    let ce_pass = ce.max_gap <= tol;
    let cce_pass = cce.max_gap <= tol;
    println!("CE:  {} (max gap {}, tolerance {tol})", pass_fail(ce_pass), fmt_f64(ce.max_gap));
    println!("CCE: {} (max gap {}, tolerance {tol})", pass_fail(cce_pass), fmt_f64(cce.max_gap));
    #[derive(Serialize)]
    struct Report<'a> {
        tolerance: f64,
        ce: &'a crate::equilibrium::DeviationReport,
        cce: &'a crate::equilibrium::DeviationReport,
        ce_pass: bool,
        cce_pass: bool,
    }
    let report = Report { tolerance: tol, ce: &ce, cce: &cce, ce_pass, cce_pass };
    s.write("verify.json", &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    s.finish()?;
    Ok(if ce_pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn tilt(common: &Common, epsilon: Option<f64>, thetas: Option<Vec<f64>>) -> Result<i32> {
    let mut s = Session::open("tilt", common)?;
    if let Some(e) = epsilon {
        s.cfg.detector.epsilon = Some(e);
    }
    if let Some(t) = thetas {
        s.cfg.tilt.thetas = t;
        s.cfg.tilt.grid = None;
    }
    let (_, _, family) = s.cfg.resolve()?;
    println!("u_pi = {}", fmt_f64(family.base_mean()));
    println!("d_max = {}", fmt_f64(family.kl_max()));
    if let Some(eps) = s.cfg.detector.epsilon {
        let solve = family.theta_for_epsilon(eps)?;
        println!("theta_min = {} (epsilon {eps})", fmt_f64(solve.theta));
        println!("d(theta_min) = {}", fmt_f64(family.kl_from_base(solve.theta)));
    }
    let mut csv = String::from("theta,u_theta,d_theta,g_theta\n");
    for theta in s.cfg.thetas()? {
        let g = family.impact_efficiency(theta).unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(theta),
            fmt_f64(family.mean_utility(theta)),
            fmt_f64(family.kl_from_base(theta)),
            fmt_f64(g)
        ));
    }
    s.write("tilt.csv", &csv)?;
    s.finish()?;
    Ok(EXIT_OK)
}

fn attacks_json(attacks: &[AttackSpec]) -> String {
    serde_json::to_string_pretty(attacks).expect("attacks serialize") + "\n"
}

fn run_sweep(common: &Common, sim: &SimOverrides) -> Result<i32> {
    let mut s = Session::open("sweep", common)?;
    s.apply(sim);
    let (_, _, family) = s.cfg.resolve()?;
    let epsilon = s.cfg.epsilon()?;
    let attacks = s.cfg.build_attacks(&family)?;
    let sc = &s.cfg.simulation;
    let rows = sweep(&family, epsilon, &s.cfg.detector.alphas, &attacks, sc.episodes, sc.horizon, s.cfg.seed)?;
    println!("{} rows ({} alphas x {} scenarios)", rows.len(), s.cfg.detector.alphas.len(), attacks.len() + 1);
    s.write("sweep.csv", &sweep_csv(&rows))?;
    s.write("attacks.json", &attacks_json(&attacks))?;
    s.finish()?;
    Ok(EXIT_OK)
}

fn run_tolerable(common: &Common, sim: &SimOverrides) -> Result<i32> {
    let mut s = Session::open("tolerable-impact", common)?;
    s.apply(sim);
    let (_, _, family) = s.cfg.resolve()?;
    let t = &s.cfg.tolerable;
    if t.epsilons.is_empty() || t.target_mtbfa.is_empty() {
        return Err(Error::Config("tolerable.epsilons and tolerable.target_mtbfa must be non-empty".into()));
    }
    let sc = &s.cfg.simulation;
    let rows = tolerable_impact(&family, &t.epsilons, &t.target_mtbfa, sc.episodes, sc.horizon, s.cfg.seed)?;
    for r in rows.iter().filter(|r| r.status != "ok") {
        println!(
            "epsilon {} target {}: {} (feasible epsilon < {})",
            r.epsilon,
            r.target_mtbfa,
            r.status,
            fmt_f64(family.max_epsilon())
        );
    }
    s.write("tolerable.csv", &tolerable_csv(&rows))?;
    s.finish()?;
    Ok(EXIT_OK)
}

fn learn(common: &Common, rounds: Option<usize>) -> Result<i32> {
    let mut s = Session::open("learn", common)?;
    if let Some(r) = rounds {
        s.cfg.learn.rounds = r;
    }
    let game = s.cfg.build_game()?;
    let l = &s.cfg.learn;
    let learned = regret_matching_learn(&game, l.rounds, l.mode, l.seed)?;
    let ce = ce_report(&game, &learned.empirical)?;
    let cce = cce_report(&game, &learned.empirical)?;
    println!("rounds {} mode {:?}", learned.rounds, learned.mode);
    println!("max CE gap  {}", fmt_f64(ce.max_gap));
    println!("max CCE gap {}", fmt_f64(cce.max_gap));
    let stride = l.regret_stride;
    s.write("distribution.toml", &distribution_document(&learned.empirical)?)?;
    s.write("regret.csv", &learned.regret_csv(stride))?;
    s.finish()?;
    Ok(EXIT_OK)
}

fn episodes(common: &Common, sim: &SimOverrides, trace: bool) -> Result<i32> {
    let mut s = Session::open("episodes", common)?;
    s.apply(sim);
    let (_, _, family) = s.cfg.resolve()?;
    let epsilon = s.cfg.epsilon()?;
    let alpha = *s.cfg.detector.alphas.first().ok_or_else(|| Error::Config("detector.alphas is empty".into()))?;
    let det = DetectorConfig::build(&family, epsilon, alpha)?.with_observation_mode(s.cfg.detector.observation);
    let mut scenarios = vec![AttackSpec::none(&family)];
    scenarios.extend(s.cfg.build_attacks(&family)?);
    let sc = s.cfg.simulation.clone();
    for attack in &scenarios {
        let results = run_episodes(&det, attack, sc.episodes, sc.horizon, sc.false_alarm_cost, s.cfg.seed)?;
        s.write(&format!("episodes-{}.csv", attack.label), &episodes_csv(&results))?;
        if trace {
            if let Some(first) = results.first() {
                let cfg = EpisodeConfig {
                    detector: &det,
                    attack,
                    horizon: sc.horizon,
                    false_alarm_cost: sc.false_alarm_cost,
                    seed: first.seed,
                };
                let (_, stream) = run_episode_recorded(&cfg)?;
                s.write(&format!("trace-{}.csv", attack.label), &trace_csv(&det.trace(&stream)?))?;
            }
        }
    }
    s.finish()?;
    Ok(EXIT_OK)
}
