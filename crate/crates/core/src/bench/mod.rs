//! Campaign harness: configuration, seeded trial execution, and file outputs.

pub mod campaign;
pub mod config;
pub mod output;

pub use campaign::{
    generate_history, plant_for_gains, run_campaign, run_trial, sweep_truth, AggregateRow,
    BoundRow, CampaignResult, OperatorHistory, TrialOutcome,
};
pub use config::ExperimentConfig;
pub use output::emit_outputs;
