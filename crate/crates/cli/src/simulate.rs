use std::path::Path;

use wmconf_core::io::{read_input, write_file, RunManifest};
use wmconf_core::report::{cells_csv, plot_csv, report_json, summary_csv};
use wmconf_core::{run_scenario, Error, ExperimentConfig, MetricsReport, Result};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CONFORMAL_WM_THREADS";

/// Output files written by [`run_simulate`], in write order.
pub const SIMULATE_OUTPUTS: [&str; 4] = ["metrics.csv", "summary.csv", "plot.csv", "metrics.json"];

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub config: ExperimentConfig,
    pub report: MetricsReport,
    pub manifest: RunManifest,
}

/// Thread cap: the explicit value, else `CONFORMAL_WM_THREADS`, else rayon's default.
pub fn thread_cap(explicit: Option<usize>) -> Result<Option<usize>> {
    let invalid = |value: String| Error::InvalidConfig {
        field: THREADS_ENV.into(),
        message: format!("`{value}` is not a positive integer"),
    };
    match explicit {
        Some(0) => Err(invalid("0".into())),
        Some(n) => Ok(Some(n)),
        None => match std::env::var(THREADS_ENV) {
            Err(_) => Ok(None),
            Ok(text) => match text.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(invalid(text)),
            },
        },
    }
}

/// Runs the configured experiment (the default config when `config_path` is
/// `None`) and writes the metric tables and manifest under `out`.
pub fn run_simulate(config_path: Option<&Path>, out: &Path, threads: Option<usize>) -> Result<SimulateOutcome> {
    let (config, input) = match config_path {
        Some(path) => {
            let bytes = read_input(path)?;
            let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            let config = ExperimentConfig::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
            (config, Some((path, bytes)))
        }
        None => (ExperimentConfig::default(), None),
    };
    config.validate()?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap(threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Io {
        path: "<thread pool>".into(),
        message: e.to_string(),
    })?;
    let report = pool.install(|| run_scenario(&config))?;

    let files: [(&str, Vec<u8>); 4] = [
        (SIMULATE_OUTPUTS[0], cells_csv(&report, config.scenario).into_bytes()),
        (SIMULATE_OUTPUTS[1], summary_csv(&report, config.scenario).into_bytes()),
        (SIMULATE_OUTPUTS[2], plot_csv(&report, config.scenario).into_bytes()),
        (SIMULATE_OUTPUTS[3], report_json(&report).into_bytes()),
    ];
    let mut manifest = RunManifest::new("simulate", &config, config.seeds.clone());
    if let Some((path, bytes)) = &input {
        manifest.add_input(path, bytes);
    }
    for (name, bytes) in &files {
        write_file(&out.join(name), bytes)?;
        manifest.add_output(name, bytes);
    }
    manifest.details = serde_json::json!({
        "scenario": config.scenario,
        "n_cells": report.cells.len(),
        "n_summaries": report.summaries.len(),
        "n_omitted": report.omitted.len(),
    });
    write_file(&out.join("manifest.json"), &manifest.to_json())?;
    Ok(SimulateOutcome {
        config,
        report,
        manifest,
    })
}
