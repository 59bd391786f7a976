use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("player index {index} out of range for a {players}-player game")]
    PlayerOutOfRange { index: usize, players: usize },

    #[error("empty victim view")]
    EmptyView,

    #[error("degenerate family: need at least two distinct supported utilities, found {0}")]
    DegenerateFamily(usize),

    #[error("infeasible epsilon {epsilon}: must lie in (0, {max_epsilon})")]
    InfeasibleEpsilon { epsilon: f64, max_epsilon: f64 },

    #[error("target mean {target} outside ({u_min}, {u_base})")]
    MeanOutOfRange { target: f64, u_min: f64, u_base: f64 },

    #[error("KL budget {delta} >= {kl_max}: the minimum is only approached as theta -> infinity")]
    KlBudgetUnreachable { delta: f64, kl_max: f64 },

    #[error("root finding did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaOutOfRange(f64),

    #[error("impact efficiency undefined at theta = {0}")]
    EfficiencyUndefined(f64),

    #[error("observation {0} is not in the alphabet")]
    NotInAlphabet(f64),

    #[error("detector already stopped at t = {0}")]
    AlreadyStopped(u64),

    #[error("invalid attack: {0}")]
    InvalidAttack(String),

    #[error("random attack rejection cap of {draws} draws exceeded (acceptance rate {acceptance_rate:e})")]
    RejectionCapExceeded { draws: usize, acceptance_rate: f64 },

    #[error("no detected episodes out of {0}")]
    NoDetections(usize),

    #[error("false-alarm cost {cost} too small (minimum achievable {minimum})")]
    CostTooSmall { cost: f64, minimum: f64 },

    #[error("cost {cost} falls in a jump of the cost curve at mu = {mu}: values {below} and {above} on either side")]
    CostUnattainable { cost: f64, mu: f64, below: f64, above: f64 },

    #[error("horizon censoring {fraction:.3} exceeds the 5% limit at mu = {mu}")]
    ExcessiveCensoring { fraction: f64, mu: f64 },

    #[error("target MTBFA {target} unreachable within horizon {horizon}")]
    MtbfaUnreachable { target: f64, horizon: u64 },

    #[error("routing: {0}")]
    Routing(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed input documents rather than
    /// infeasible numerical requests.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidGame(_) | Error::InvalidDistribution(_) | Error::Io(_))
    }
}
