//! Metrics and the QA, top-k and correlation harnesses.

pub mod correlation;
pub mod harness;
pub mod metrics;

pub use correlation::{run_correlation_harness, CorrelationPlan, CorrelationReport};
pub use harness::{run_qa_harness, run_topk_sweep, ContextMode, EvalRecord, HarnessConfig, MetricsReport, Rankers, WeightStrategy};
pub use metrics::{exact_match_accuracy, macro_f1, option_f1, pearson, relative_improvement, spearman, MetricError};
