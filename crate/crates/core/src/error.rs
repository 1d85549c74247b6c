use thiserror::Error;

/// Errors produced by circuit construction, operations and analyses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("variable space supports at most 64 variables")]
    TooManyVariables,
    #[error("unknown vtree node {0}")]
    UnknownNode(usize),
    #[error("invalid vtree: {0}")]
    InvalidVtree(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("empty requirement set is not allowed")]
    EmptyRequirement,
    #[error("enumeration bound exceeded: {0} variables (bound {1})")]
    EnumerationBound(usize, usize),
    #[error("nodes {0} and {1} are not in a parent/child relation")]
    NotParentChild(usize, usize),
    #[error("label-expansion precondition violated at node {0}")]
    ExpandPrecondition(usize),
    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),
    #[error("incomplete assignment: variable `{0}` missing")]
    IncompleteAssignment(String),
    #[error("state {state} out of range for variable `{var}` (cardinality {card})")]
    StateOutOfRange { var: String, state: usize, card: usize },
    #[error("marginalization set is not contained in the circuit scope")]
    NotInScope,
    #[error("vtrees are not compatible")]
    Incompatible,
    #[error("determinism requirement not certified for {0}")]
    DeterminismNotCertified(&'static str),
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error("pipeline analysis failed: {0}")]
    AnalysisFailure(String),
    #[error("overlapping variable sets in causal query")]
    OverlappingSets,
    #[error("missing instantiation for causal query: {0}")]
    MissingInstantiation(String),
    #[error("non-regular md-vtree: {0}")]
    NotRegular(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset does not match circuit scope: {0}")]
    DatasetMismatch(String),
    #[error("table is not factorizable at vtree node {node} (residual {residual:e})")]
    NotFactorizable { node: usize, residual: f64 },
    #[error("zero-mass table cannot be compiled")]
    ZeroMassTable,
    #[error("compilation bound exceeded ({0} nodes)")]
    CompilationBound(usize),
    #[error("cyclic Bayesian network")]
    CyclicNetwork,
    #[error("CPT row for `{0}` does not sum to 1")]
    UnnormalizedCpt(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
