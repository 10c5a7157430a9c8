//! The declarative model file: one TOML document holding the element tree,
//! signals, segments, virtual sensors, failure modes, interventions,
//! detection methods and the dataset mapping. See `configs/hydraulic.toml`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::DatasetConfig;
use crate::model::*;
use crate::store::{Entity, Store, StoreError};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("model spec line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("model spec is inconsistent:\n  {}", .0.join("\n  "))]
    Integrity(Vec<String>),
    #[error("reading {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub cycle_duration_s: f64,
    #[serde(default, rename = "element")]
    pub elements: Vec<SystemElement>,
    #[serde(default, rename = "asset")]
    pub assets: Vec<Asset>,
    #[serde(default, rename = "signal")]
    pub signals: Vec<Signal>,
    #[serde(default, rename = "segment")]
    pub segments: Vec<Segment>,
    #[serde(default, rename = "virtual_sensor")]
    pub virtual_sensors: Vec<VirtualSensor>,
    #[serde(default, rename = "failure_mode")]
    pub failure_modes: Vec<FailureMode>,
    #[serde(default, rename = "intervention")]
    pub interventions: Vec<Intervention>,
    #[serde(default, rename = "detection_method")]
    pub detection_methods: Vec<DetectionMethod>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<ModelSpec, SpecError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            SpecError::Parse {
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<ModelSpec, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ModelSpec::parse(&text)
    }

    /// SHA-256 over the canonical JSON form, so formatting and comments in
    /// the source file do not change it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Virtual sensor id to its element references.
    pub fn sensor_elements(&self) -> BTreeMap<Id, Vec<Id>> {
        self.virtual_sensors
            .iter()
            .map(|vs| (vs.id.clone(), vs.element_ids.clone()))
            .collect()
    }

    /// Entities in an order where every reference points backwards.
    pub fn entities(&self) -> Result<Vec<Entity>, SpecError> {
        let hierarchy = Hierarchy::new(&self.elements)
            .map_err(|r| SpecError::Integrity(vec![format!("element tree: {r}")]))?;
        let mut out = Vec::new();
        let mut stack = vec![hierarchy.root().clone()];
        while let Some(id) = stack.pop() {
            out.push(Entity::Element(hierarchy.get(&id).expect("tree member").clone()));
            stack.extend(hierarchy.children(&id).iter().rev().cloned());
        }
        out.extend(self.assets.iter().cloned().map(Entity::Asset));
        out.extend(self.signals.iter().cloned().map(Entity::Signal));
        out.extend(self.segments.iter().cloned().map(Entity::Segment));
        out.extend(self.sensors_in_dependency_order()?.into_iter().map(Entity::VirtualSensor));
        out.extend(self.failure_modes.iter().cloned().map(Entity::FailureMode));
        out.extend(self.interventions.iter().cloned().map(Entity::Intervention));
        out.extend(self.detection_methods.iter().cloned().map(Entity::DetectionMethod));
        Ok(out)
    }

    fn sensors_in_dependency_order(&self) -> Result<Vec<VirtualSensor>, SpecError> {
        let ids: BTreeSet<&Id> = self.virtual_sensors.iter().map(|v| &v.id).collect();
        let deps = |vs: &VirtualSensor| -> BTreeSet<Id> {
            let local: BTreeSet<&Id> = vs.nodes.iter().map(|n| &n.id).collect();
            vs.nodes
                .iter()
                .flat_map(|n| &n.inputs)
                .filter(|i| !local.contains(&i.source) && ids.contains(&i.source))
                .map(|i| i.source.clone())
                .collect()
        };
        let mut placed: BTreeSet<Id> = BTreeSet::new();
        let mut out = Vec::new();
        let mut pending: Vec<&VirtualSensor> = self.virtual_sensors.iter().collect();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|vs| {
                if deps(vs).iter().all(|d| placed.contains(d)) {
                    placed.insert(vs.id.clone());
                    out.push((*vs).clone());
                    false
                } else {
                    true
                }
            });
            if pending.len() == before {
                return Err(SpecError::Integrity(
                    pending
                        .iter()
                        .map(|vs| format!("virtual sensor {} is part of a reference cycle", vs.id))
                        .collect(),
                ));
            }
        }
        Ok(out)
    }

    /// Every problem found without touching a store.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let report = validate_hierarchy(&self.elements);
        if !report.is_ok() {
            out.push(format!("element tree: {report}"));
        }
        let entities = match self.entities() {
            Ok(e) => e,
            Err(SpecError::Integrity(v)) => {
                out.extend(v);
                return out;
            }
            Err(e) => {
                out.push(e.to_string());
                return out;
            }
        };
        let mut seen: BTreeSet<Id> = BTreeSet::new();
        for e in &entities {
            if !seen.insert(e.id().clone()) {
                out.push(format!("duplicate id {}", e.id()));
            }
        }
        for e in &entities {
            let local: BTreeSet<Id> = match e {
                Entity::VirtualSensor(vs) => vs.nodes.iter().map(|n| n.id.clone()).collect(),
                _ => BTreeSet::new(),
            };
            for r in e.references() {
                if !local.contains(&r) && !seen.contains(&r) {
                    out.push(format!("{} references unknown id {r}", e.id()));
                }
            }
        }
        for s in &self.segments {
            if let Err(e) = s.check_within(self.cycle_duration_s) {
                out.push(e.to_string());
            }
        }
        if let Some(ds) = &self.dataset {
            for c in &ds.conditions {
                if !self.failure_modes.iter().any(|f| f.id == c.failure_mode) {
                    out.push(format!(
                        "dataset condition {} maps to unknown failure mode {}",
                        c.name, c.failure_mode
                    ));
                }
            }
            if !self.assets.iter().any(|a| a.id == ds.asset_id) {
                out.push(format!("dataset asset {} is not declared", ds.asset_id));
            }
        }
        out
    }
}

/// Validates `spec` and writes all of its entities to `store` in one batch.
/// Re-applying an identical spec changes nothing.
pub fn apply_model_spec(store: &mut Store, spec: &ModelSpec) -> Result<(), SpecError> {
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(SpecError::Integrity(violations));
    }
    store.ensure_all(spec.entities()?)?;
    store.set_meta("model_spec_hash", spec.hash())?;
    store.set_meta("cycle_duration_s", spec.cycle_duration_s.to_string())?;
    Ok(())
}
