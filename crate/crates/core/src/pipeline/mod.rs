//! The three-stage probabilistic load model, its rolling evaluation and
//! scenario analysis.

pub mod bridge;
pub mod config;
pub mod features;
pub mod scenario;
pub mod stages;
pub mod store;
pub mod study;
pub mod synthetic;

pub use bridge::{aggregate_peak_residuals, interpolate_state, WeeklyPanel};
pub use config::{PipelineConfig, StateModelKind};
pub use scenario::{
    decompose_paths, decompose_scenario, select_extreme_trajectories, ScenarioChoice, ScenarioDecomposition,
    ScenarioSelection, StochasticStage,
};
pub use stages::{
    compose_load, fit_system, fit_systems, stage_load, stage_state, stage_temperature, Dataset, FittedSystem,
    ForecastProduct, LoadEvaluator, LoadInputs, LoadStage, PointForecast, StageSeeds, StateModel, StateStage,
    TemperatureStage,
};
pub use study::{rolling_study, run_experiment, run_experiment_seeded, score_product, Experiment, StudyReport};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticTruth};
