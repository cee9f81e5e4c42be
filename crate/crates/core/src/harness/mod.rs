//! Experiment plumbing: dataset manifests, configuration, protocols and reports.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;
pub mod views;

use std::path::{Path, PathBuf};

pub use config::{BaselineArm, BenchmarkConfig, ExperimentConfig, LocalizationConfig, OrbitSampler, SceneSource, Seeds};
pub use experiments::{
    distill_field, distillation_poses, held_out_poses, run_gff_experiment, run_inversion_benchmark,
    run_localization_experiment, BenchmarkResults, BenchmarkRow, BenchmarkSummary, GffResults, LocalizationResults,
    SPINE_ARM,
};
pub use manifest::{load_manifest, save_manifest, Convention, DatasetManifest, Frame};
pub use report::{emit_plot_data, PlotData, PlotSeries};
pub use views::{load_view, save_view, CameraRecord, StoredView, ViewPaths};

/// Environment variable holding the directory relative output paths are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "SPINE_OUTPUT_ROOT";

/// Resolves `path` against the output root; absolute paths pass through.
pub fn resolve_output(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
