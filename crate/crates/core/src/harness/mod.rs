//! Reference paths, closed-loop tracking, the prediction benchmark and
//! report output.

pub mod ik;
pub mod path;
pub mod prediction;
pub mod report;
pub mod tracking;

pub use ik::inverse_kinematics;
pub use path::{path_margin, reference_path, workspace_margin, PathKind, PathSpec};
pub use prediction::{run_prediction_benchmark, PredictionBenchmarkConfig, PredictionReport};
pub use report::{sha256_json, write_prediction_report, write_tracking_report};
pub use tracking::{
    run_tracking, run_tracking_scenarios, scenario_grid, DisturbanceChoice, TrackingConfig, TrackingReport, TrackingRow,
    TrackingRun, TrackingSummary,
};
