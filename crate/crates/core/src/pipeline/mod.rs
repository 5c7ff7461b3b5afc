//! Ingestion, equity-volatility estimation, quarterly orchestration of both
//! models and emission of report tables and plots.

mod config;
mod inputs;
mod report;
mod study;

pub use config::{Estimator, FitScope, MissingPolicy, RunConfig};
pub use inputs::{
    as_of_date, default_point, estimate_equity_vol, fill_missing, Filled, FundamentalRow,
    RawInputs, VOL_WINDOW,
};
pub use report::{
    emit_reports, fig1_data, fig2_data, fig3_data, load_bundle, model_slug, save_bundle,
    write_study, Fig1, BUNDLE_FILE, TABLE_HEADER, TEST_HEADER,
};
pub use study::{
    run_study, usable_distance, Exclusion, ExclusionReason, FillRecord, FitRecord, GroupSummary,
    ModelReport, ObservationRecord, StudyBundle, EXCLUSION_LIMIT,
};
