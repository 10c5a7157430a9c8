use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::graph::{Catalog, CycleData, CycleEvaluator, EvalError};
use super::ops::{Series, Value};
use crate::model::Id;
use crate::store::{Store, StoreError};

/// Cycles read from the matrix files per batch.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("virtual sensor {0} is not scalar-valued")]
    VectorValued(Id),
    #[error("unknown virtual sensor {0}")]
    UnknownSensor(Id),
    #[error("virtual sensor {0} produced no finite value on any cycle")]
    AllNonFinite(Id),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing feature csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A cell that could not be computed; its value is NaN.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellError {
    pub cycle: usize,
    pub sensor: Id,
    pub message: String,
}

/// Scalar virtual-sensor values, one row per cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub cycles: Vec<usize>,
    pub sensor_ids: Vec<Id>,
    pub sensor_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Hash of the model definition the features were computed from.
    pub provenance: String,
    pub errors: Vec<CellError>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.cycles.len()
    }

    pub fn n_cols(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn row_of(&self, cycle: usize) -> Option<&[f64]> {
        let pos = self.cycles.binary_search(&cycle).ok()?;
        Some(&self.values[pos])
    }

    /// Rows of the listed cycles in ascending cycle order. Unknown cycles are skipped.
    pub fn select(&self, cycles: &[usize]) -> FeatureMatrix {
        let index: BTreeMap<usize, usize> = self.cycles.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let wanted: std::collections::BTreeSet<usize> = cycles.iter().copied().collect();
        let picked: Vec<(usize, usize)> = wanted
            .iter()
            .filter_map(|c| index.get(c).map(|i| (*c, *i)))
            .collect();
        FeatureMatrix {
            cycles: picked.iter().map(|(c, _)| *c).collect(),
            values: picked.iter().map(|(_, i)| self.values[*i].clone()).collect(),
            errors: self
                .errors
                .iter()
                .filter(|e| wanted.contains(&e.cycle))
                .cloned()
                .collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> FeatureMatrix {
        FeatureMatrix {
            cycles: Vec::new(),
            sensor_ids: self.sensor_ids.clone(),
            sensor_names: self.sensor_names.clone(),
            values: Vec::new(),
            provenance: self.provenance.clone(),
            errors: Vec::new(),
        }
    }

    /// CSV with a `cycle` column followed by one column per sensor name.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["cycle".to_string()];
        header.extend(self.sensor_names.iter().cloned());
        w.write_record(&header)?;
        for (cycle, row) in self.cycles.iter().zip(&self.values) {
            let mut rec = vec![cycle.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn check_sensors(catalog: &Catalog, sensor_ids: &[Id]) -> Result<(), FeatureError> {
    for id in sensor_ids {
        if !catalog.sensors.contains_key(id) {
            return Err(FeatureError::UnknownSensor(id.clone()));
        }
        if !catalog.is_scalar_valued(id)? {
            return Err(FeatureError::VectorValued(id.clone()));
        }
    }
    Ok(())
}

fn evaluate_row(catalog: &Catalog, sensor_ids: &[Id], data: &CycleData) -> (Vec<f64>, Vec<CellError>) {
    let mut eval = CycleEvaluator::new(catalog, data);
    let mut errors = Vec::new();
    let row = sensor_ids
        .iter()
        .map(|id| match eval.evaluate(id) {
            Ok(Value::Scalar(v)) => v,
            Ok(Value::Series(_)) => unreachable!("shape checked up front"),
            Err(e) => {
                errors.push(CellError {
                    cycle: data.cycle_index,
                    sensor: id.clone(),
                    message: e.to_string(),
                });
                f64::NAN
            }
        })
        .collect();
    (row, errors)
}

/// Feature matrix from in-memory cycle data.
pub fn compute_from_cycles(
    catalog: &Catalog,
    sensor_ids: &[Id],
    cycles: &[CycleData],
    provenance: &str,
) -> Result<FeatureMatrix, FeatureError> {
    check_sensors(catalog, sensor_ids)?;
    let rows: Vec<(Vec<f64>, Vec<CellError>)> = cycles
        .par_iter()
        .map(|d| evaluate_row(catalog, sensor_ids, d))
        .collect();
    finish(catalog, sensor_ids, cycles.iter().map(|c| c.cycle_index).collect(), rows, provenance)
}

fn finish(
    catalog: &Catalog,
    sensor_ids: &[Id],
    cycles: Vec<usize>,
    rows: Vec<(Vec<f64>, Vec<CellError>)>,
    provenance: &str,
) -> Result<FeatureMatrix, FeatureError> {
    let mut values = Vec::with_capacity(rows.len());
    let mut errors = Vec::new();
    for (row, errs) in rows {
        values.push(row);
        errors.extend(errs);
    }
    for e in &errors {
        log::warn!("cycle {}: {}", e.cycle, e.message);
    }
    if !values.is_empty() {
        for (j, id) in sensor_ids.iter().enumerate() {
            if values.iter().all(|r: &Vec<f64>| !r[j].is_finite()) {
                return Err(FeatureError::AllNonFinite(id.clone()));
            }
        }
    }
    Ok(FeatureMatrix {
        cycles,
        sensor_ids: sensor_ids.to_vec(),
        sensor_names: sensor_ids.iter().map(|id| catalog.sensors[id].name.clone()).collect(),
        values,
        provenance: provenance.to_string(),
        errors,
    })
}

/// Evaluates `sensor_ids` on the stored measurements of `cycles`. Rows come
/// out in ascending cycle order; duplicate cycles are dropped. Cycles beyond
/// a signal's stored matrix surface as missing-measurement cell errors.
pub fn compute_feature_matrix(
    store: &Store,
    sensor_ids: &[Id],
    cycles: &[usize],
) -> Result<FeatureMatrix, FeatureError> {
    let snap = store.snapshot();
    let catalog = Catalog::from_snapshot(&snap);
    check_sensors(&catalog, sensor_ids)?;
    let provenance = snap.meta("model_spec_hash").unwrap_or("").to_string();

    let mut signals = std::collections::BTreeSet::new();
    for id in sensor_ids {
        signals.extend(catalog.signals_used(id));
    }
    let mut readers = Vec::new();
    for sig in &signals {
        if let Some(info) = snap.matrix_info(sig) {
            let rate = catalog.signals[sig].sampling_rate_hz;
            readers.push((sig.clone(), rate, info.cycles, store.matrix(sig)?));
        }
    }

    let mut cycles: Vec<usize> = cycles.to_vec();
    cycles.sort_unstable();
    cycles.dedup();

    let mut rows = Vec::with_capacity(cycles.len());
    for chunk in cycles.chunks(CHUNK) {
        let (lo, hi) = (chunk[0], chunk[chunk.len() - 1] + 1);
        let mut data: Vec<CycleData> = chunk
            .iter()
            .map(|c| CycleData {
                cycle_index: *c,
                signals: BTreeMap::new(),
            })
            .collect();
        for (sig, rate, n_rows, reader) in &readers {
            if lo >= *n_rows {
                continue;
            }
            let block = reader.read_rows(lo, hi)?;
            for d in data.iter_mut() {
                if let Some(values) = block.get(d.cycle_index - lo) {
                    d.signals.insert(sig.clone(), Series::new(0.0, *rate, values.clone()));
                }
            }
        }
        rows.par_extend(data.par_iter().map(|d| evaluate_row(&catalog, sensor_ids, d)));
    }
    finish(&catalog, sensor_ids, cycles, rows, &provenance)
}
