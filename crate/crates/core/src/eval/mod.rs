//! Evaluation: exposure-bias tables, prediction-error statistics, normality
//! tests and two-sample distances.

pub mod distance;
pub mod measure;
pub mod normality;

pub use distance::{
    energy_distance, energy_test, fit_gaussian_stats, frechet_gaussian_distance, knn_precision_recall, EnergyTest,
    GaussianStats,
};
pub use measure::{
    empirical_lipschitz, exposure_bias_deterministic, exposure_bias_stochastic, prediction_error_stats, quantile,
    sample_distance, spearman, write_metric_reports, BiasEntry, BiasMode, BiasTable, ErrorEntry, ErrorMode, ErrorStats,
    ErrorStatsConfig, LipschitzEstimate, MeasureConfig, MetricReport,
};
pub use normality::{anderson_darling, shapiro_wilk, NormalityTest, NormalityVerdict};
