//! Experiment harness: datasets, run configuration, training loops with
//! probes, and the width-ladder analyses built on them.

mod catalog;
mod config;
mod coord;
mod lemmas;
mod router;
mod run;
mod selftest;
mod sweep;
mod task;

pub use catalog::{Prediction, PredictionCatalog};
pub use coord::{analyze, run_cells, run_coord_check, write_step_fits_csv, write_verdicts_csv, CellSummary, CoordReport, StepFit, Verdict};
pub use config::{GeometricGrid, MultiplierKnobs, RunConfig, TuneGrid, DEFAULT_PROBE_STEPS};
pub use run::{probe_terms, run_training, run_training_with, ProbeRecord, RunOptions, RunRecord, TimeClass};
pub use task::{Dataset, TaskKind, TaskSpec};
pub use sweep::{
    check_geometric, grid_points, run_lr_sweep, tune_multipliers, write_sweep_csv, write_tune_csv, SweepCell, SweepResult, TuneResult,
    TuneRow, WidthOptimum,
};
pub use lemmas::{cross_layer_sum, cross_layer_sum_check, gram_concentration_check, CrossLayerPoint, CrossLayerReport, GramReport, GramStats};
pub use router::{router_collapse_check, PsiStepFit, RouterCollapseReport, COLLAPSE_SLOPE};
pub use selftest::{
    adam_faithfulness_check, finite_difference_check, identity_check, rank_one_update_check, run_selftest, CheckOutcome, SelftestReport, ADAM_TOLERANCE,
    FD_TOLERANCE, RANK_ONE_TOLERANCE,
};
