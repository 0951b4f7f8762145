//! Dialogue-turn evaluation: geometric accuracies for point and trajectory
//! turns, BLEU-4 and CIDEr-D for language turns.

pub mod bleu;
pub mod cider;
pub mod geometric;
pub mod report;
pub mod text;

pub use bleu::{bleu4, BleuSmoothing, NGramStats};
pub use cider::{cider, cider_scores};
pub use geometric::{accuracy_metrics, geometric_errors, Accuracies, GeometricEntry, GeometricKind, Thresholds, TurnErrors};
pub use report::{aggregate_report, LanguagePair, MetricsReport, MetricsRow, QuestionType, ReportConfig, TurnCounts, TurnResult};
pub use text::tokenize;
