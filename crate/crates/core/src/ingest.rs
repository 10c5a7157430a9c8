//! Loading a cycle-structured sensor dataset into the store.
//!
//! The expected layout is one text file per signal (one row per cycle,
//! tab-separated samples) plus a profile file with one row of condition values
//! per cycle. Which profile values count as nominal is configuration
//! ([`DatasetConfig`]), not code.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FailureIncident, Id, IncidentStatus, Signal};
use crate::spec::ModelSpec;
use crate::store::{parse_row, Entity, Store, StoreError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("inconsistent cycle counts: {0}")]
    InconsistentCycles(String),
    #[error("{path}: row {row} has {actual} samples, expected {expected} ({rate} Hz x {duration} s)")]
    RowLength {
        path: PathBuf,
        row: usize,
        expected: usize,
        actual: usize,
        rate: f64,
        duration: f64,
    },
    #[error("cycle {cycle}: value {value} in condition column {column} is not declared nominal or degraded")]
    UnknownCondition { cycle: usize, column: String, value: f64 },
    #[error("profile row {row}: expected at least {expected} columns, got {actual}")]
    ProfileWidth { row: usize, expected: usize, actual: usize },
    #[error("model has no dataset section")]
    NoDatasetConfig,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Health of one cycle derived from the condition profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Health {
    Healthy,
    /// All conditions nominal but the rig had not settled.
    Unstable,
    /// Non-nominal conditions; `modes` in profile column order, the first
    /// one being the primary mode.
    Degraded { modes: Vec<Id> },
}

impl Health {
    pub fn failure_modes(&self) -> &[Id] {
        match self {
            Health::Degraded { modes } => modes,
            _ => &[],
        }
    }

    pub fn is_degraded(&self) -> bool {
        matches!(self, Health::Degraded { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleLabel {
    pub id: Id,
    pub asset_id: Id,
    pub cycle_index: usize,
    /// Raw profile value per named condition column.
    pub conditions: BTreeMap<String, f64>,
    pub stable: bool,
    pub health: Health,
}

impl CycleLabel {
    pub fn id_for(asset: &Id, cycle: usize) -> Id {
        Id::new(format!("{asset}:{cycle}"))
    }
}

/// One profile column describing the condition of a subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionColumn {
    pub name: String,
    /// Zero-based column in the profile file.
    pub column: usize,
    pub failure_mode: Id,
    pub nominal: Vec<f64>,
    pub degraded: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityColumn {
    pub column: usize,
    pub stable_values: Vec<f64>,
}

/// How to read a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub asset_id: Id,
    pub profile_file: String,
    pub conditions: Vec<ConditionColumn>,
    #[serde(default)]
    pub stability: Option<StabilityColumn>,
    /// File name per signal id; defaults to `<signal id>.txt`.
    #[serde(default)]
    pub signal_files: BTreeMap<Id, String>,
}

impl DatasetConfig {
    pub fn file_for(&self, signal: &Id) -> String {
        self.signal_files
            .get(signal)
            .cloned()
            .unwrap_or_else(|| format!("{signal}.txt"))
    }
}

fn matches_any(v: f64, set: &[f64]) -> bool {
    set.iter().any(|x| (x - v).abs() <= 1e-9)
}

/// Classifies every profile row. A cycle is healthy iff all condition columns
/// are nominal and the stability column (if configured) reads stable.
pub fn derive_labels(profile_rows: &[Vec<f64>], config: &DatasetConfig) -> Result<Vec<CycleLabel>, IngestError> {
    let width = config
        .conditions
        .iter()
        .map(|c| c.column)
        .chain(config.stability.iter().map(|s| s.column))
        .max()
        .map_or(0, |m| m + 1);
    profile_rows
        .iter()
        .enumerate()
        .map(|(cycle, row)| {
            if row.len() < width {
                return Err(IngestError::ProfileWidth {
                    row: cycle,
                    expected: width,
                    actual: row.len(),
                });
            }
            let mut conditions = BTreeMap::new();
            let mut modes = Vec::new();
            for col in &config.conditions {
                let v = row[col.column];
                conditions.insert(col.name.clone(), v);
                if matches_any(v, &col.nominal) {
                    continue;
                }
                if !matches_any(v, &col.degraded) {
                    return Err(IngestError::UnknownCondition {
                        cycle,
                        column: col.name.clone(),
                        value: v,
                    });
                }
                if !modes.contains(&col.failure_mode) {
                    modes.push(col.failure_mode.clone());
                }
            }
            let stable = match &config.stability {
                Some(s) => {
                    let v = row[s.column];
                    conditions.insert("stable_flag".to_string(), v);
                    matches_any(v, &s.stable_values)
                }
                None => true,
            };
            let health = if !modes.is_empty() {
                Health::Degraded { modes }
            } else if stable {
                Health::Healthy
            } else {
                Health::Unstable
            };
            Ok(CycleLabel {
                id: CycleLabel::id_for(&config.asset_id, cycle),
                asset_id: config.asset_id.clone(),
                cycle_index: cycle,
                conditions,
                stable,
                health,
            })
        })
        .collect()
}

/// Maximal runs of consecutive degraded cycles, per failure mode.
pub fn labels_to_incidents(labels: &[CycleLabel]) -> Vec<FailureIncident> {
    let mut open: BTreeMap<Id, (Id, usize, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    let close = |mode: &Id, (asset, first, last): (Id, usize, usize), out: &mut Vec<FailureIncident>| {
        out.push(FailureIncident {
            id: Id::new(format!("incident:{asset}:{mode}:{first}")),
            asset_id: asset,
            failure_mode_id: mode.clone(),
            cycle_range: [first, last],
            status: IncidentStatus::Unreconciled,
        });
    };
    for label in labels {
        let active: BTreeSet<&Id> = label.health.failure_modes().iter().collect();
        let ended: Vec<Id> = open
            .iter()
            .filter(|(mode, (_, _, last))| !active.contains(mode) || *last + 1 != label.cycle_index)
            .map(|(mode, _)| mode.clone())
            .collect();
        for mode in ended {
            let run = open.remove(&mode).expect("listed as open");
            close(&mode, run, &mut out);
        }
        for mode in active {
            open.entry(mode.clone())
                .and_modify(|run| run.2 = label.cycle_index)
                .or_insert((label.asset_id.clone(), label.cycle_index, label.cycle_index));
        }
    }
    for (mode, run) in open {
        close(&mode, run, &mut out);
    }
    out.sort_by(|a, b| (a.first(), &a.failure_mode_id).cmp(&(b.first(), &b.failure_mode_id)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestCounts {
    pub cycles: usize,
    pub signals: usize,
    pub measurements: usize,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, IngestError> {
    let file = fs::File::open(path).map_err(|_| IngestError::MissingFile(path.to_path_buf()))?;
    Ok(BufReader::new(file).lines())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>, IngestError> {
    let mut rows = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(crate::store::io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(line.trim(), path, i + 1)?);
    }
    Ok(rows)
}

/// Parses the whole file to validate it; keeps only the row count.
fn check_signal_file(path: &Path, signal: &Signal, duration: f64) -> Result<usize, IngestError> {
    let expected = signal.samples_for(duration);
    let mut rows = 0;
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(crate::store::io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let values = parse_row(line.trim(), path, i + 1)?;
        if values.len() != expected {
            return Err(IngestError::RowLength {
                path: path.to_path_buf(),
                row: rows,
                expected,
                actual: values.len(),
                rate: signal.sampling_rate_hz,
                duration,
            });
        }
        rows += 1;
    }
    Ok(rows)
}

/// Reads the profile file of `dataset_dir`.
pub fn read_profile(dataset_dir: &Path, config: &DatasetConfig) -> Result<Vec<Vec<f64>>, IngestError> {
    let path = dataset_dir.join(&config.profile_file);
    let mut rows = Vec::new();
    for (i, line) in open_lines(&path)?.enumerate() {
        let line = line.map_err(crate::store::io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| StoreError::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads every signal of `spec` plus the profile labels from `dataset_dir`.
/// All files are validated before the store is touched; re-loading the same
/// directory leaves the store byte-identical.
pub fn load_dataset(dataset_dir: &Path, spec: &ModelSpec, store: &mut Store) -> Result<IngestCounts, IngestError> {
    let config = spec.dataset.as_ref().ok_or(IngestError::NoDatasetConfig)?;
    let duration = spec.cycle_duration_s;

    let checked: Vec<(Id, usize)> = spec
        .signals
        .par_iter()
        .map(|s| {
            let path = dataset_dir.join(config.file_for(&s.id));
            check_signal_file(&path, s, duration).map(|n| (s.id.clone(), n))
        })
        .collect::<Result<_, _>>()?;

    let profile = read_profile(dataset_dir, config)?;
    let cycles = profile.len();
    let mismatched: Vec<String> = checked
        .iter()
        .filter(|(_, n)| *n != cycles)
        .map(|(id, n)| format!("{id} has {n} rows"))
        .collect();
    if !mismatched.is_empty() {
        return Err(IngestError::InconsistentCycles(format!(
            "profile has {cycles} rows; {}",
            mismatched.join(", ")
        )));
    }

    let labels = derive_labels(&profile, config)?;
    let incidents = labels_to_incidents(&labels);

    let mut records: Vec<Entity> = labels.into_iter().map(Entity::CycleLabel).collect();
    records.extend(incidents.into_iter().map(Entity::FailureIncident));
    store.ensure_all(records)?;

    for signal in &spec.signals {
        let path = dataset_dir.join(config.file_for(&signal.id));
        let rows = read_rows(&path)?;
        store.put_measurement_matrix(&signal.id, &config.asset_id, duration, &rows)?;
        log::info!("ingested {} ({} cycles)", signal.id, rows.len());
    }

    Ok(IngestCounts {
        cycles,
        signals: spec.signals.len(),
        measurements: cycles * spec.signals.len(),
    })
}
