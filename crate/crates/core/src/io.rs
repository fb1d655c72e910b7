//! Score tables, run manifests, and file helpers.
//!
//! CSV is the canonical interchange format: UTF-8, header row required,
//! `.` decimal point. JSON mirrors it as an array of row objects.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::Population;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub essay_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<Population>,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_intensity: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `.json` is JSON; anything else is CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl ScoreTable {
    /// Checks per-row ranges and essay id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, row) in self.rows.iter().enumerate() {
            if row.essay_id.is_empty() {
                return Err(schema(i, "essay_id", "must not be empty"));
            }
            if !seen.insert(row.essay_id.as_str()) {
                return Err(schema(i, "essay_id", format!("duplicate id `{}`", row.essay_id)));
            }
            if !(row.score > 0.0 && row.score <= 1.0) {
                return Err(Error::ScoreOutOfRange {
                    essay_id: row.essay_id.clone(),
                    value: row.score,
                }
                .context(format!("row {}", i + 1)));
            }
            if let Some(k) = row.edit_intensity {
                if !(1..=7).contains(&k) {
                    return Err(schema(i, "edit_intensity", format!("{k} outside 1..=7")));
                }
            }
        }
        Ok(())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = (usize, &ScoreRow)> {
        self.rows.iter().enumerate().filter(move |(_, r)| r.role == role)
    }
}

/// `index` is the 0-based position among data rows; errors report it 1-based.
fn schema(index: usize, field: &'static str, message: impl Into<String>) -> Error {
    Error::Schema {
        row: index + 1,
        field,
        message: message.into(),
    }
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn ingest(path: &Path, format: Format) -> Result<ScoreTable> {
    let bytes = read_input(path)?;
    match format {
        Format::Csv => parse_csv(bytes.as_slice()),
        Format::Json => parse_json(&bytes),
    }
}

const REQUIRED: [&str; 3] = ["essay_id", "score", "role"];

pub fn parse_csv(reader: impl Read) -> Result<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    for name in REQUIRED {
        if col(name).is_none() {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing required column `{name}`"),
            });
        }
    }
    let (id_col, score_col, role_col) = (col("essay_id").unwrap(), col("score").unwrap(), col("role").unwrap());
    let (group_col, pop_col, intensity_col) = (col("group_id"), col("population"), col("edit_intensity"));

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let optional = |c: Option<usize>| c.map(field).filter(|s| !s.is_empty());
        let parse_err = |message: String| Error::Parse { line, message };

        let score_text = field(score_col);
        let score: f64 = score_text
            .parse()
            .map_err(|_| parse_err(format!("score `{score_text}` is not a number")))?;
        let role = match field(role_col) {
            "calibration" => Role::Calibration,
            "test" => Role::Test,
            other => return Err(schema(i, "role", format!("`{other}` is not calibration|test"))),
        };
        let population = match optional(pop_col) {
            None => None,
            Some("majority") => Some(Population::Majority),
            Some("minority") => Some(Population::Minority),
            Some(other) => return Err(schema(i, "population", format!("`{other}` is not majority|minority"))),
        };
        let edit_intensity = match optional(intensity_col) {
            None => None,
            Some(text) => Some(
                text.parse::<u8>()
                    .map_err(|_| schema(i, "edit_intensity", format!("`{text}` is not an integer")))?,
            ),
        };
        rows.push(ScoreRow {
            essay_id: field(id_col).to_string(),
            score,
            group_id: optional(group_col).map(str::to_string),
            population,
            role,
            edit_intensity,
        });
    }
    let table = ScoreTable { rows };
    table.validate()?;
    Ok(table)
}

pub fn parse_json(bytes: &[u8]) -> Result<ScoreTable> {
    let table: ScoreTable = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    table.validate()?;
    Ok(table)
}

pub fn write_csv(table: &ScoreTable, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| Error::Io {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    w.write_record(["essay_id", "score", "group_id", "population", "role", "edit_intensity"])
        .map_err(io_err)?;
    for row in &table.rows {
        let population = match row.population {
            Some(Population::Majority) => "majority",
            Some(Population::Minority) => "minority",
            None => "",
        };
        let role = match row.role {
            Role::Calibration => "calibration",
            Role::Test => "test",
        };
        w.write_record([
            row.essay_id.clone(),
            row.score.to_string(),
            row.group_id.clone().unwrap_or_default(),
            population.to_string(),
            role.to_string(),
            row.edit_intensity.map(|k| k.to_string()).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        message: e.to_string(),
    })
}

pub fn write_json(table: &ScoreTable, writer: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(writer, table).map_err(|e| Error::Io {
        path: "<json>".into(),
        message: e.to_string(),
    })
}

pub fn emit(table: &ScoreTable, path: &Path, format: Format) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => write_csv(table, &mut buf)?,
        Format::Json => write_json(table, &mut buf)?,
    }
    write_file(path, &buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            message: e.to_string(),
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Taken from `SOURCE_DATE_EPOCH` when set. Never read from the clock,
    /// so identical runs write identical manifests.
    pub created_unix: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serializes");
        Self {
            tool: "wmconf".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: sha256_hex(&canonical),
            seeds,
            created_unix: creation_time(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn add_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.push(FileDigest {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

fn creation_time() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}
