use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("wheelbase must be positive, got {0}")]
    InvalidWheelbase(f64),
    #[error("input contains a non-finite component")]
    NonFiniteInput,
    #[error("invalid speed loop (kp={kp}, ki={ki}, v_target={v_target}, v_max={v_max})")]
    InvalidSpeedLoop { kp: f64, ki: f64, v_target: f64, v_max: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MppiError {
    #[error("invalid MPPI configuration: {0}")]
    InvalidConfig(String),
    #[error("control sequence has length {got}, expected {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("cost function returned a non-finite value for sample {sample}")]
    NonFiniteCost { sample: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("dimension mismatch: theta has {theta}, eta has {eta}, marker has {marker}")]
    Dimension { theta: usize, eta: usize, marker: usize },
    #[error("marker component {0} is outside {{-1, 0, +1}}")]
    InvalidMarker(i64),
    #[error("multiplicative update needs positive theta, component {index} is {value}")]
    NonPositiveTheta { index: usize, value: f64 },
    #[error("invalid update-size state: {0}")]
    InvalidEta(String),
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding service transport failure: {0}")]
    Transport(String),
    #[error("embedding service returned an unusable vector: {0}")]
    BadResponse(String),
}

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("prompt is empty after trimming")]
    EmptyPrompt,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("classifier corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus markers have inconsistent lengths ({first} vs {other} at line {line})")]
    MixedDimensions { first: usize, other: usize, line: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario id `{0}`")]
    UnknownScenario(String),
    #[error("marker {0:?} is not a single spatial class")]
    InvalidSpatialMarker(Vec<i8>),
    #[error("invalid scenario parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum UserError {
    #[error("no template class matches marker {0:?}")]
    NoTemplateClass(Vec<i8>),
    #[error("dimension mismatch: user has {user}, theta has {theta}")]
    Dimension { user: usize, theta: usize },
    #[error("invalid user parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    User(#[from] UserError),
    #[error(transparent)]
    Update(#[from] UpdateError),
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message} (last valid record: {})", last_valid.as_deref().unwrap_or("none"))]
    Parse { line: usize, message: String, last_valid: Option<String> },
    #[error("log has no header record")]
    MissingHeader,
    #[error("log replay mismatch at prompt tau={tau}: {message}")]
    Replay { tau: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
