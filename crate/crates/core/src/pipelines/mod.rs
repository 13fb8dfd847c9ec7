//! End-to-end change detection runs, synthetic scenes and dataset ingestion.

mod acd;
mod report;
mod supervised;
mod synthetic;
mod unsupervised;

pub use acd::{ingest_acd, load_truth, AcdDataset, AcdRegion, AcdSample, AcdSplit, ACD_TEST_COLS, ACD_TEST_ROWS};
pub use report::Report;
pub use supervised::{
    load_model, model_config_path, run_supervised_infer, run_supervised_train, save_model, SupervisedInference,
    SupervisedRunConfig,
};
pub use synthetic::{generate_synthetic, SyntheticSceneSpec};
pub use unsupervised::{run_unsupervised, UnsupervisedOutput, UnsupervisedRunConfig};
