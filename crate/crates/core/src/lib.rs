//! Standard and corrective in-context learning (ICL / CICL) for text
//! classification: prompt construction, label scoring, stratified few-shot
//! selection, sweep execution and statistical reporting.

pub mod analysis;
pub mod datamodel;
pub mod modelclient;
pub mod parallel;
pub mod prompting;
pub mod runner;
pub mod selection;

pub use datamodel::{Dataset, DatasetPair, Example, LabelSet, Mode, RunConfig};
pub use modelclient::{BackendDescriptor, BackendKind, LabelScorer, LabelScores};
pub use prompting::PromptSpec;
pub use runner::{run_sweep, RunRecord, SweepOptions};
pub use selection::{ClassifiedPool, FewShotSet};
