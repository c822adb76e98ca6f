//! Experiment harness: configuration, dataset generation, training modes,
//! evaluation reports, and ablation grids.

pub mod commands;
pub mod config;
pub mod jobs;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, train_one, train_one_resumable, TrainMode,
    MODE_USAGE,
};
pub use config::ExperimentConfig;

/// Exit code contract: 0 success, 2 configuration errors, 3 data errors,
/// 1 anything else.
pub fn exit_code_for(err: &hygen_core::Error) -> i32 {
    match err {
        hygen_core::Error::Config(_) => 2,
        hygen_core::Error::Data(_) => 3,
        _ => 1,
    }
}
