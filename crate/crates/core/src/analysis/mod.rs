//! Metrics, hypothesis tests and report emitters.

pub mod metrics;
pub mod report;
pub mod special;
pub mod stats;

pub use metrics::{macro_f1, mean, std_dev, ClassCounts, ConfusionCounts, MetricError};
pub use report::{emit_reports, ReportError, ReportFormat};
pub use stats::{
    kruskal_wallis, shapiro_wilk, wilcoxon_signed_rank, wilcoxon_signed_rank_with, StatResult, StatsError, TestKind,
    WilcoxonMethod,
};
