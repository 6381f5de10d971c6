//! Synthetic protocols: model generators, replicated regularization-path
//! sweeps and path classification.

mod classify;
mod generate;
mod sweep;

pub use classify::{
    classify_paths, histogram, write_histogram_csv, ClassifiedPath, Classification, HistogramBin, PathClass, GOOD_ERROR,
};
pub use generate::{
    gen_finite_model, gen_finite_model_conditioned, gen_nonparametric_model, population_window, sample_dataset,
    sample_moments, ConditionedModel, FiniteModel, NonparametricModel, Scenario, TargetVerdict, DEFAULT_ATTEMPT_CAP,
    NONPARAMETRIC_TERMS,
};
pub use sweep::{best_frequency, run_sweep, write_cells_csv, write_results, Cell, ExperimentConfig, ExperimentResult};
