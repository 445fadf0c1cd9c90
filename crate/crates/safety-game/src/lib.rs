//! Inference-time answer selection under a per-prompt risk cap.
//!
//! Candidate answers to a prompt are scored for helpfulness and safety risk
//! with Yes/No probe prompts against a black-box completion backend. The
//! margins of those scores relative to a fixed safe fallback define a small
//! constrained selection problem (the safety game), solved per prompt by one
//! of three penalty formulations: an exact hard-cap LP, a bounded-multiplier
//! linear penalty, or a smooth sigmoid penalty. A benchmark harness runs the
//! game and six reference selectors over MCQ and free-form QA corpora and
//! reports accuracy, BLEU accuracy, and solver diagnostics.
//!
//! Modules:
//! - [`probe`] — probe templates, rendering, log-prob normalization, scoring
//! - [`margin`] — fallback injection and lift/risk margin construction
//! - [`solver`] — the three game solvers plus boundary diagnostics
//! - [`baselines`] — generative/discriminative/equilibrium reference selectors
//! - [`backend`] — HTTP and fixture backends, score cache, bounded parallelism
//! - [`dataset`] — corpus loading, filtering, candidate assembly
//! - [`metrics`] — BLEU, BLEU accuracy, aggregate reports, reward summaries
//! - [`harness`] — run configuration, subcommand drivers, report emission

pub mod backend;
pub mod baselines;
pub mod dataset;
pub mod harness;
pub mod margin;
pub mod metrics;
pub mod probe;
pub mod solver;

pub use backend::{BackendConfig, BackendError, BackendKind, GenParams, ScoringService};
pub use dataset::{Corpus, Dataset, QAItem};
pub use margin::{CandidateSet, MarginSet};
pub use metrics::{BleuConfig, EvalReport};
pub use probe::{ProbeScore, ProbeTemplate, TemplateSet};
pub use solver::{GameConfig, GameSolution, PenaltyKind};
