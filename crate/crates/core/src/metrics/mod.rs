//! Evaluation metrics, rank tests and report assembly.

pub mod auc;
pub mod report;

pub use auc::{accuracy, auprc, auroc, midranks, one_vs_rest, Averaging, ScoredExamples};
pub use rank_test::{
    mann_whitney_u, significance_matrix, Alternative, Method, PairwiseTest, RankTestOptions,
    RankTestResult, Verdict, SIGNIFICANCE_LEVEL,
};
pub use report::{
    assemble_report, mean_std, DistanceRow, ReportBundle, SeedRecord, SignificanceSpec, SummaryRow,
};
