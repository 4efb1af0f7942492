//! Longitudinal dataset schema, file formats, and preprocessing.

mod dataset;
mod preprocess;
mod record;

pub use dataset::{
    csv_header, load_dataset, read_trajectory_csv, save_dataset, write_atomic, write_trajectory_csv, Dataset,
    Manifest, NormStats, FORMAT_VERSION, MANIFEST_FILE, TRAJECTORY_FILE,
};
pub use preprocess::{
    arm_label, impute_dataset, impute_locf_nocb, positivity_check, rolling_origin_windows, split_indices,
    split_patients, truncate_record, zscore_apply, zscore_fit, zscore_invert, ArmSupport, HistoryWindow,
    PositivityReport, SplitAssignment,
};
pub use record::{arm_index, Feature, OneHotGroup, Schema, TrajectoryRecord};
