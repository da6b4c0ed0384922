//! Canonical templates, synthetic cohorts, pipeline configuration and the
//! artifact-level commands behind the CLI.

mod canonical;
mod cohort;
mod config;
mod pipeline;

pub use canonical::{euler_characteristic, make_canonical, vessel_directions, CanonicalKind, BODY_RADIUS};
pub use cohort::{
    dataset_ids, load_dataset_mesh, mesh_path, polyline_path, shape_id, synth_cohort, token_std, tokens_path, write_cohort,
    Cohort, CohortShape, SynthConfig,
};
pub use config::{CanonicalConfig, CenterlineConfig, ConditionsConfig, GenerateConfig, GhdConfig, PathsConfig, PipelineConfig};
pub use pipeline::{
    load_cohort, vessel_mesh, worker_pool, FitRow, GenerateArgs, GeneratedShape, MorphArgs, MorphStep, Pipeline, VesselMesh, WORKERS_ENV,
};
