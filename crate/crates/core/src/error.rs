use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("kernel row not stochastic at (s={state}, a={action}): sum = {sum}")]
    KernelRowNotStochastic { state: usize, action: usize, sum: f64 },

    #[error("negative transition probability P({next}|{state},{action}) = {value}")]
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("discount must be < 1 (and >= 0), got {0}")]
    Discount(f64),

    #[error("initial distribution is not a probability vector: {0}")]
    InitialDistribution(String),

    #[error("non-finite reward at (s={state}, a={action})")]
    NonFiniteReward { state: usize, action: usize },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("linear system is singular")]
    SingularSystem,

    #[error("divergence infinite: support mismatch at (s={state}, a={action})")]
    InfiniteDivergence { state: usize, action: usize },

    #[error("empty face in state {0}")]
    EmptyFace(usize),

    #[error("reference vanishes on face in state {0}")]
    ReferenceVanishesOnFace(usize),

    #[error("max iterations exceeded ({iterations}), final residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },

    #[error("state exploration violated: d(s={0}) = 0 under the uniform policy")]
    StateExploration(usize),

    #[error("stepsize {eta} exceeds the admissible maximum {max}")]
    StepsizeTooLarge { eta: f64, max: f64 },

    #[error("every action is optimal in every state; the suboptimality gap is infinite")]
    InfiniteGap,

    #[error("bound not applicable: {0}")]
    NotApplicable(String),

    #[error("fit window too small: {0} points (need at least 10)")]
    WindowTooSmall(usize),

    #[error("degenerate design matrix in least-squares fit")]
    DegenerateDesign,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
