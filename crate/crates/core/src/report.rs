//! CSV and JSON renderings of a [`MetricsReport`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::evaluation::{CellResult, MetricsReport};
use crate::sim::Scenario;

fn scenario_name(scenario: Scenario) -> &'static str {
    match scenario {
        Scenario::Standard => "standard",
        Scenario::Hierarchical => "hierarchical",
        Scenario::Weighted => "weighted",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per cell.
pub fn cells_csv(report: &MetricsReport, scenario: Scenario) -> String {
    let mut out = String::from(
        "scenario,method,null,alt,cal_size,writing_prompt,seed,fpr,power,n_outliers,outlier_proportion,\
         excluded,suspect_flag_rate,n_null,n_null_flagged,n_alt,n_outliers_flagged,n_suspects,n_suspects_flagged\n",
    );
    for c in &report.cells {
        let k = &c.counts;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            scenario_name(scenario),
            c.method,
            c.null_prompt,
            c.alt_prompt,
            c.cal_size,
            c.writing_prompt,
            c.seed,
            c.fpr,
            opt(c.power),
            c.n_outliers,
            c.outlier_proportion,
            c.excluded,
            opt(c.suspect_flag_rate),
            k.n_null,
            k.n_null_flagged,
            k.n_alt,
            k.n_outliers_flagged,
            k.n_suspects,
            k.n_suspects_flagged,
        )
        .unwrap();
    }
    out
}

/// One row per `(method, null, alt, cal_size)`, including omitted pairs.
pub fn summary_csv(report: &MetricsReport, scenario: Scenario) -> String {
    let mut rows: BTreeMap<(String, u8, u8, usize), String> = BTreeMap::new();
    let name = scenario_name(scenario);
    for s in &report.summaries {
        rows.insert(
            (s.method.clone(), s.null_prompt, s.alt_prompt, s.cal_size),
            format!(
                "{name},{},{},{},{},ok,{},{},{},{},{},{},{},{}",
                s.method,
                s.null_prompt,
                s.alt_prompt,
                s.cal_size,
                s.fpr,
                s.power,
                s.fpr_seed_sd,
                s.power_seed_sd,
                s.n_seeds,
                s.n_cells,
                s.outlier_proportion,
                opt(s.suspect_flag_rate),
            ),
        );
    }
    for o in &report.omitted {
        rows.insert(
            (o.method.clone(), o.null_prompt, o.alt_prompt, o.cal_size),
            format!(
                "{name},{},{},{},{},{},,,,,0,0,,",
                o.method, o.null_prompt, o.alt_prompt, o.cal_size, o.reason
            ),
        );
    }
    let mut out = String::from(
        "scenario,method,null,alt,cal_size,status,fpr,power,fpr_seed_sd,power_seed_sd,n_seeds,n_cells,\
         outlier_proportion,suspect_flag_rate\n",
    );
    for row in rows.values() {
        out.push_str(row);
        out.push('\n');
    }
    out
}

/// Long format: per-seed means over included writing prompts.
pub fn plot_csv(report: &MetricsReport, scenario: Scenario) -> String {
    let mut groups: BTreeMap<(String, u8, u8, usize, u64), Vec<&CellResult>> = BTreeMap::new();
    for c in report.cells.iter().filter(|c| !c.excluded) {
        groups
            .entry((c.method.clone(), c.null_prompt, c.alt_prompt, c.cal_size, c.seed))
            .or_default()
            .push(c);
    }
    let mut out = String::from("scenario,method,null,alt,cal_size,seed,metric,value\n");
    let name = scenario_name(scenario);
    for ((method, null, alt, size, seed), cells) in groups {
        let n = cells.len() as f64;
        let fpr = cells.iter().map(|c| c.fpr).sum::<f64>() / n;
        let power = cells.iter().map(|c| c.power.unwrap_or(0.0)).sum::<f64>() / n;
        let prop = cells.iter().map(|c| c.outlier_proportion).sum::<f64>() / n;
        for (metric, value) in [("fpr", fpr), ("power", power), ("outlier_proportion", prop)] {
            writeln!(out, "{name},{method},{null},{alt},{size},{seed},{metric},{value}").unwrap();
        }
    }
    out
}

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
