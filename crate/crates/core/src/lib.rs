//! Measurement, aggregation, curation and decoding-constraint machinery for
//! confidence-calibrated reasoning with language models.
//!
//! The crate is organised around a small record model ([`record`]) that every
//! other module consumes:
//!
//! - [`confidence`]: verbalized yes/no confidence from two token logprobs.
//! - [`metrics`]: ECE, Brier score, AUROC and reliability-diagram bins.
//! - [`temperature`]: single-scalar temperature scaling fitted by NLL.
//! - [`ensemble`]: self-consistency and confidence-informed self-consistency.
//! - [`extract`]: boxed-answer and code extraction plus answer normalization.
//! - [`curation`]: dual-objective (reasoning + self-evaluation) dataset builder.
//! - [`aid`]: the adaptive injection decoding state machine.
//! - [`merge`]: linear weight interpolation, the `.tmap` container and
//!   Pareto-zone classification.
//! - [`backend`]: synthetic oracle and OpenAI-compatible HTTP generation.

pub mod aid;
pub mod backend;
pub mod confidence;
pub mod curation;
pub mod ensemble;
pub mod extract;
pub mod merge;
pub mod metrics;
pub mod record;
pub mod temperature;

mod numeric;

pub use aid::{AidAction, AidConfig, AidError, AidState};
pub use backend::{
    BackendConfig, BackendError, GenerationBackend, GenerationRequest, GenerationResponse,
    HttpBackend, HttpConfig, OracleBackend, OracleConfig,
};
pub use confidence::{verbalized_confidence, ConfidenceError, ConfidenceQuery};
pub use curation::{
    CodeChecker, CurationConfig, CurationError, CurationReport, EvalLabel, SftExample, SftTask,
};
pub use ensemble::{
    AggregationMode, EnsembleDecision, EnsembleError, EnsembleInput, PathVote, SweepRow,
};
pub use extract::{ExtractionMethod, ExtractionResult};
pub use merge::{MergeError, ParetoRow, ParetoZone, Tensor, TensorMap};
pub use metrics::{CalibrationReport, MetricsError, ReliabilityBin, ScoredOutcome};
pub use numeric::sigmoid;
pub use record::{
    DomainTag, GenerationRecord, Problem, RecordError, RunFile, RunMetadata, Violation,
    ViolationRule,
};
pub use temperature::{TemperatureError, TemperatureFit};
