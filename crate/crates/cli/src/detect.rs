use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use wmconf_core::conformal::{hierarchical_p_value, standard_p_value, Method};
use wmconf_core::density::{fit_kde, fit_shift, ImportanceWeighter, ScoreScale, ShiftMethod};
use wmconf_core::io::{parse_csv, parse_json, read_input, write_file, Format, Role, RunManifest, ScoreRow, ScoreTable};
use wmconf_core::sim::Population;
use wmconf_core::{Decision, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectArgs {
    pub cal: PathBuf,
    pub test: PathBuf,
    pub method: Method,
    pub alpha: f64,
    pub shift: ShiftMethod,
    pub bandwidth: f64,
    pub log_scale: bool,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl DetectArgs {
    pub fn new(cal: impl Into<PathBuf>, test: impl Into<PathBuf>, method: Method, out: impl Into<PathBuf>) -> Self {
        Self {
            cal: cal.into(),
            test: test.into(),
            method,
            alpha: 0.05,
            shift: ShiftMethod::Quantile,
            bandwidth: 0.5,
            log_scale: true,
            seed: None,
            out: out.into(),
        }
    }
}

/// Settings hashed into the manifest.
#[derive(Serialize)]
struct DetectSettings<'a> {
    method: &'a str,
    alpha: f64,
    shift: Option<ShiftMethod>,
    bandwidth: f64,
    log_scale: bool,
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub essay_id: String,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub decisions: Vec<DecisionRow>,
    pub manifest: RunManifest,
}

fn load(path: &Path, expected: Role) -> Result<(Vec<u8>, ScoreTable)> {
    let bytes = read_input(path)?;
    let parsed = match Format::from_path(path) {
        Format::Csv => parse_csv(bytes.as_slice()),
        Format::Json => parse_json(&bytes),
    };
    let table = parsed.map_err(|e| e.context(path.display().to_string()))?;
    if let Some((i, row)) = table.rows.iter().enumerate().find(|(_, r)| r.role != expected) {
        return Err(Error::Schema {
            row: i + 1,
            field: "role",
            message: format!("`{}` has role {:?} in the {:?} file", row.essay_id, row.role, expected).to_lowercase(),
        }
        .context(path.display().to_string()));
    }
    Ok((bytes, table))
}

fn groups_of(rows: &[ScoreRow]) -> Result<Vec<Vec<f64>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let Some(g) = row.group_id.as_deref() else {
            return Err(Error::Schema {
                row: i + 1,
                field: "group_id",
                message: format!("calibration essay `{}` has no group_id", row.essay_id),
            });
        };
        match order.iter().position(|&o| o == g) {
            Some(k) => groups[k].push(row.score),
            None => {
                order.push(g);
                groups.push(vec![row.score]);
            }
        }
    }
    Ok(groups)
}

fn populations_of(rows: &[ScoreRow]) -> Result<Vec<Population>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            row.population.ok_or_else(|| Error::Schema {
                row: i + 1,
                field: "population",
                message: format!("calibration essay `{}` has no population", row.essay_id),
            })
        })
        .collect()
}

fn check_flags(args: &DetectArgs) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidAlpha(args.alpha, "(0, 1)"));
    }
    if !(args.bandwidth > 0.0 && args.bandwidth.is_finite()) {
        return Err(Error::InvalidBandwidth(args.bandwidth));
    }
    Ok(())
}

/// Scores every test essay against the calibration file and writes
/// `decisions.csv` and `manifest.json` under `args.out`.
pub fn run_detect(args: &DetectArgs) -> Result<DetectOutcome> {
    check_flags(args)?;
    let (cal_bytes, cal) = load(&args.cal, Role::Calibration)?;
    let (test_bytes, test) = load(&args.test, Role::Test)?;
    if cal.rows.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let cal_values: Vec<f64> = cal.rows.iter().map(|r| r.score).collect();
    let mut details = serde_json::Map::new();
    details.insert("n_calibration".into(), json!(cal.rows.len()));
    details.insert("n_test".into(), json!(test.rows.len()));

    let p_values: Vec<f64> = match args.method {
        Method::Standard => test
            .rows
            .iter()
            .map(|r| standard_p_value(&cal_values, r.score))
            .collect::<Result<_>>()?,
        Method::Hierarchical => {
            let groups = groups_of(&cal.rows).map_err(|e| e.context(args.cal.display().to_string()))?;
            details.insert("n_groups".into(), json!(groups.len()));
            test.rows
                .iter()
                .map(|r| hierarchical_p_value(&groups, r.score))
                .collect::<Result<_>>()?
        }
        Method::Weighted => {
            let populations = populations_of(&cal.rows).map_err(|e| e.context(args.cal.display().to_string()))?;
            let scale = if args.log_scale {
                ScoreScale::Log10
            } else {
                ScoreScale::Raw
            };
            let pool_t = scale.apply_all(&cal_values);
            let minority_t: Vec<f64> = cal_values
                .iter()
                .zip(&populations)
                .filter(|(_, &p)| p == Population::Minority)
                .map(|(&v, _)| scale.apply(v))
                .collect();
            if minority_t.is_empty() {
                return Err(Error::EmptyInput("minority calibration rows").context(args.cal.display().to_string()));
            }
            let model_p = fit_kde(&pool_t, args.bandwidth)?;
            let model_q = fit_shift(args.shift, &pool_t, &minority_t, args.bandwidth, args.alpha)?;
            if let Some(shift) = model_q.shift() {
                details.insert("minority_size".into(), json!(minority_t.len()));
                details.insert("shift".into(), serde_json::to_value(shift).expect("shift serializes"));
                if let Some(branch) = shift.branch {
                    details.insert("branch".into(), json!(branch.as_str()));
                }
            }
            let weighter = ImportanceWeighter::new(&model_p, &model_q, &pool_t)?;
            test.rows
                .iter()
                .map(|r| {
                    let w = weighter.weights_for(scale.apply(r.score))?;
                    wmconf_core::conformal::weighted_p_value(
                        &cal_values,
                        r.score,
                        w.calibration_weights(),
                        w.test_weight(),
                    )
                })
                .collect::<Result<_>>()?
        }
    };

    let decisions: Vec<DecisionRow> = test
        .rows
        .iter()
        .zip(p_values)
        .map(|(row, p)| DecisionRow {
            essay_id: row.essay_id.clone(),
            decision: Decision::from_p(p, args.alpha, args.method),
        })
        .collect();

    let csv = decisions_csv(&decisions)?;
    let settings = DetectSettings {
        method: args.method.as_str(),
        alpha: args.alpha,
        shift: (args.method == Method::Weighted).then_some(args.shift),
        bandwidth: args.bandwidth,
        log_scale: args.log_scale,
        seed: args.seed,
    };
    let mut manifest = RunManifest::new("detect", &settings, args.seed.into_iter().collect());
    manifest.add_input(&args.cal, &cal_bytes);
    manifest.add_input(&args.test, &test_bytes);
    manifest.add_output("decisions.csv", &csv);
    manifest.details = serde_json::Value::Object(details);

    write_file(&args.out.join("decisions.csv"), &csv)?;
    write_file(&args.out.join("manifest.json"), &manifest.to_json())?;
    Ok(DetectOutcome { decisions, manifest })
}

fn decisions_csv(rows: &[DecisionRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Io {
        path: "decisions.csv".into(),
        message: e.to_string(),
    };
    w.write_record(["essay_id", "conformal_p", "flagged"]).map_err(io_err)?;
    for row in rows {
        w.write_record([
            row.essay_id.as_str(),
            &row.decision.conformal_p.to_string(),
            if row.decision.flagged { "true" } else { "false" },
        ])
        .map_err(io_err)?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: "decisions.csv".into(),
        message: e.to_string(),
    })
}
