//! File-backed entity store.
//!
//! Layout under the store root:
//!
//! ```text
//! entities/<kind>.records     one JSON object per line, with "type" and "id"
//! measurements/<signal>.mat   one cycle per line, tab-separated samples
//! models/                     fitted monitor models (see `detect`)
//! meta.json                   model-spec hash and cycle duration
//! ```
//!
//! Every write is validated against the full current state before anything
//! touches disk. Readers take a [`Snapshot`], which is immutable and cheap to
//! clone across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::graph::topological_order;
use crate::ingest::CycleLabel;
use crate::model::*;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{entity} {id} references missing id {missing}")]
    DanglingReference { entity: Id, id: Id, missing: Id },
    #[error("duplicate id {0}")]
    DuplicateId(Id),
    #[error("cannot delete {id}: referenced by {}", join(dependents))]
    DependentExists { id: Id, dependents: Vec<Id> },
    #[error("unknown id {0}")]
    UnknownId(Id),
    #[error("signal {signal}: row {row} has {actual} samples, expected {expected}")]
    ShapeMismatch {
        signal: Id,
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("hierarchy violation: {0}")]
    Hierarchy(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn join(ids: &[Id]) -> String {
    ids.iter().map(Id::as_str).collect::<Vec<_>>().join(", ")
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Index record of a stored measurement matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixInfo {
    pub id: Id,
    pub signal_id: Id,
    pub asset_id: Id,
    pub cycle_duration_s: f64,
    pub cycles: usize,
    pub samples: usize,
}

impl MatrixInfo {
    pub fn id_for(signal_id: &Id) -> Id {
        Id::new(format!("{signal_id}.mat"))
    }
}

/// Any storable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entity {
    Element(SystemElement),
    Asset(Asset),
    Signal(Signal),
    Segment(Segment),
    VirtualSensor(VirtualSensor),
    FailureMode(FailureMode),
    Intervention(Intervention),
    FailureIncident(FailureIncident),
    DetectionMethod(DetectionMethod),
    CycleLabel(CycleLabel),
    MeasurementMatrix(MatrixInfo),
}

/// Entity type tag; also names the records file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Element,
    Asset,
    Signal,
    Segment,
    VirtualSensor,
    FailureMode,
    Intervention,
    FailureIncident,
    DetectionMethod,
    CycleLabel,
    MeasurementMatrix,
}

impl EntityKind {
    pub const ALL: [EntityKind; 11] = [
        EntityKind::Element,
        EntityKind::Asset,
        EntityKind::Signal,
        EntityKind::Segment,
        EntityKind::VirtualSensor,
        EntityKind::FailureMode,
        EntityKind::Intervention,
        EntityKind::FailureIncident,
        EntityKind::DetectionMethod,
        EntityKind::CycleLabel,
        EntityKind::MeasurementMatrix,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            EntityKind::Element => "element",
            EntityKind::Asset => "asset",
            EntityKind::Signal => "signal",
            EntityKind::Segment => "segment",
            EntityKind::VirtualSensor => "virtual_sensor",
            EntityKind::FailureMode => "failure_mode",
            EntityKind::Intervention => "intervention",
            EntityKind::FailureIncident => "failure_incident",
            EntityKind::DetectionMethod => "detection_method",
            EntityKind::CycleLabel => "cycle_label",
            EntityKind::MeasurementMatrix => "measurement_matrix",
        }
    }
}

impl Entity {
    pub fn id(&self) -> &Id {
        match self {
            Entity::Element(e) => &e.id,
            Entity::Asset(e) => &e.id,
            Entity::Signal(e) => &e.id,
            Entity::Segment(e) => &e.id,
            Entity::VirtualSensor(e) => &e.id,
            Entity::FailureMode(e) => &e.id,
            Entity::Intervention(e) => &e.id,
            Entity::FailureIncident(e) => &e.id,
            Entity::DetectionMethod(e) => &e.id,
            Entity::CycleLabel(e) => &e.id,
            Entity::MeasurementMatrix(e) => &e.id,
        }
    }

    pub fn kind(&self) -> EntityKind {
        match self {
            Entity::Element(_) => EntityKind::Element,
            Entity::Asset(_) => EntityKind::Asset,
            Entity::Signal(_) => EntityKind::Signal,
            Entity::Segment(_) => EntityKind::Segment,
            Entity::VirtualSensor(_) => EntityKind::VirtualSensor,
            Entity::FailureMode(_) => EntityKind::FailureMode,
            Entity::Intervention(_) => EntityKind::Intervention,
            Entity::FailureIncident(_) => EntityKind::FailureIncident,
            Entity::DetectionMethod(_) => EntityKind::DetectionMethod,
            Entity::CycleLabel(_) => EntityKind::CycleLabel,
            Entity::MeasurementMatrix(_) => EntityKind::MeasurementMatrix,
        }
    }

    fn check(&self) -> Result<(), InvariantError> {
        match self {
            Entity::Element(e) => e.check(),
            Entity::Asset(e) => e.check(),
            Entity::Signal(e) => e.check(),
            Entity::Segment(e) => e.check(),
            Entity::VirtualSensor(e) => e.check(),
            Entity::FailureMode(e) => e.check(),
            Entity::Intervention(e) => e.check(),
            Entity::FailureIncident(e) => e.check(),
            Entity::DetectionMethod(e) => e.check(),
            Entity::CycleLabel(_) | Entity::MeasurementMatrix(_) => Ok(()),
        }
    }

    /// Every id this record points at.
    pub fn references(&self) -> Vec<Id> {
        match self {
            Entity::Element(e) => e.parent_id.iter().cloned().collect(),
            Entity::Asset(a) => vec![a.root_element_id.clone()],
            Entity::Signal(s) => s.element_ids.clone(),
            Entity::Segment(_) => Vec::new(),
            Entity::VirtualSensor(vs) => {
                let local: BTreeSet<&Id> = vs.nodes.iter().map(|n| &n.id).collect();
                let mut out = vs.element_ids.clone();
                for input in vs.nodes.iter().flat_map(|n| &n.inputs) {
                    if !local.contains(&input.source) {
                        out.push(input.source.clone());
                    }
                    out.extend(input.segment.iter().cloned());
                }
                dedup(out)
            }
            Entity::FailureMode(fm) => vec![fm.element_id.clone()],
            Entity::Intervention(i) => vec![i.failure_mode_id.clone()],
            Entity::FailureIncident(i) => vec![i.asset_id.clone(), i.failure_mode_id.clone()],
            Entity::DetectionMethod(m) => dedup(
                m.input_signal_ids
                    .iter()
                    .chain(&m.input_virtual_sensor_ids)
                    .chain(&m.scope_element_ids)
                    .chain(&m.scope_failure_mode_ids)
                    .cloned()
                    .collect(),
            ),
            Entity::CycleLabel(l) => {
                let mut out = vec![l.asset_id.clone()];
                out.extend(l.health.failure_modes().iter().cloned());
                dedup(out)
            }
            Entity::MeasurementMatrix(m) => vec![m.signal_id.clone(), m.asset_id.clone()],
        }
    }
}

fn dedup(mut ids: Vec<Id>) -> Vec<Id> {
    let mut seen = BTreeSet::new();
    ids.retain(|i| seen.insert(i.clone()));
    ids
}

macro_rules! typed_access {
    ($($fn_name:ident => $variant:ident($ty:ty)),* $(,)?) => {
        $(
            pub fn $fn_name(&self) -> impl Iterator<Item = &$ty> + '_ {
                self.of_kind(EntityKind::$variant).filter_map(|e| match e {
                    Entity::$variant(x) => Some(x),
                    _ => None,
                })
            }
        )*
    };
}

/// Immutable view of every collection at one point in time.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    inner: Arc<Collections>,
}

#[derive(Debug, Clone, Default)]
struct Collections {
    by_kind: BTreeMap<EntityKind, BTreeMap<Id, Entity>>,
    kind_of: BTreeMap<Id, EntityKind>,
    meta: BTreeMap<String, String>,
}

impl Collections {
    fn get(&self, id: &Id) -> Option<&Entity> {
        let kind = self.kind_of.get(id)?;
        self.by_kind.get(kind)?.get(id)
    }

    fn insert(&mut self, e: Entity) {
        self.kind_of.insert(e.id().clone(), e.kind());
        self.by_kind.entry(e.kind()).or_default().insert(e.id().clone(), e);
    }

    fn remove(&mut self, id: &Id) -> Option<Entity> {
        let kind = self.kind_of.remove(id)?;
        self.by_kind.get_mut(&kind)?.remove(id)
    }

    fn root_element(&self) -> Option<&Id> {
        self.by_kind.get(&EntityKind::Element)?.values().find_map(|e| match e {
            Entity::Element(el) if el.parent_id.is_none() => Some(&el.id),
            _ => None,
        })
    }

    fn kind_is(&self, id: &Id, kind: EntityKind) -> bool {
        self.kind_of.get(id) == Some(&kind)
    }

    /// Foreign-key and cross-record checks for one entity against this state.
    fn check_links(&self, e: &Entity) -> Result<(), StoreError> {
        let dangling = |missing: &Id| StoreError::DanglingReference {
            entity: Id::new(e.kind().file_stem()),
            id: e.id().clone(),
            missing: missing.clone(),
        };
        let expect = |id: &Id, kinds: &[EntityKind]| -> Result<(), StoreError> {
            if kinds.iter().any(|k| self.kind_is(id, *k)) {
                Ok(())
            } else {
                Err(dangling(id))
            }
        };
        use EntityKind as K;
        match e {
            Entity::Element(el) => match &el.parent_id {
                Some(p) => {
                    expect(p, &[K::Element])?;
                    let sibling_clash = self
                        .by_kind
                        .get(&K::Element)
                        .into_iter()
                        .flat_map(|m| m.values())
                        .any(|other| match other {
                            Entity::Element(o) => o.parent_id.as_ref() == Some(p) && o.name == el.name,
                            _ => false,
                        });
                    if sibling_clash {
                        return Err(StoreError::Hierarchy(format!(
                            "element {}: name {:?} already used under {p}",
                            el.id, el.name
                        )));
                    }
                }
                None => {
                    if let Some(root) = self.root_element() {
                        return Err(StoreError::Hierarchy(format!(
                            "element {} would be a second root next to {root}",
                            el.id
                        )));
                    }
                }
            },
            Entity::Asset(a) => {
                expect(&a.root_element_id, &[K::Element])?;
                if self.root_element() != Some(&a.root_element_id) {
                    return Err(StoreError::Hierarchy(format!(
                        "asset {} must reference the root element",
                        a.id
                    )));
                }
            }
            Entity::Signal(s) => {
                for id in &s.element_ids {
                    expect(id, &[K::Element])?;
                }
            }
            Entity::Segment(_) => {}
            Entity::VirtualSensor(vs) => {
                for id in &vs.element_ids {
                    expect(id, &[K::Element])?;
                }
                let local: BTreeSet<&Id> = vs.nodes.iter().map(|n| &n.id).collect();
                for node in &vs.nodes {
                    for input in &node.inputs {
                        if let Some(seg) = &input.segment {
                            expect(seg, &[K::Segment])?;
                        }
                        if local.contains(&input.source) {
                            continue;
                        }
                        expect(&input.source, &[K::Signal, K::VirtualSensor])?;
                        if self.kind_is(&input.source, K::Signal) && input.segment.is_none() {
                            return Err(InvariantError::Violated {
                                entity: "virtual sensor",
                                id: vs.id.clone(),
                                message: format!(
                                    "node {}: signal {} needs a segment",
                                    node.id, input.source
                                ),
                            }
                            .into());
                        }
                    }
                }
                topological_order(vs).map_err(|err| InvariantError::Violated {
                    entity: "virtual sensor",
                    id: vs.id.clone(),
                    message: err.to_string(),
                })?;
            }
            Entity::FailureMode(fm) => expect(&fm.element_id, &[K::Element])?,
            Entity::Intervention(i) => expect(&i.failure_mode_id, &[K::FailureMode])?,
            Entity::FailureIncident(i) => {
                expect(&i.asset_id, &[K::Asset])?;
                expect(&i.failure_mode_id, &[K::FailureMode])?;
            }
            Entity::DetectionMethod(m) => {
                for id in &m.input_signal_ids {
                    expect(id, &[K::Signal])?;
                }
                for id in &m.input_virtual_sensor_ids {
                    expect(id, &[K::VirtualSensor])?;
                }
                for id in &m.scope_element_ids {
                    expect(id, &[K::Element])?;
                }
                for id in &m.scope_failure_mode_ids {
                    expect(id, &[K::FailureMode])?;
                }
            }
            Entity::CycleLabel(l) => {
                expect(&l.asset_id, &[K::Asset])?;
                for fm in l.health.failure_modes() {
                    expect(fm, &[K::FailureMode])?;
                }
            }
            Entity::MeasurementMatrix(m) => {
                expect(&m.signal_id, &[K::Signal])?;
                expect(&m.asset_id, &[K::Asset])?;
            }
        }
        Ok(())
    }

    fn dependents_of(&self, id: &Id) -> Vec<Id> {
        self.by_kind
            .values()
            .flat_map(|m| m.values())
            .filter(|e| e.id() != id && e.references().contains(id))
            .map(|e| e.id().clone())
            .collect()
    }
}

impl Snapshot {
    pub fn get(&self, id: &Id) -> Option<&Entity> {
        self.inner.get(id)
    }

    pub fn len(&self) -> usize {
        self.inner.kind_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.kind_of.is_empty()
    }

    pub fn of_kind(&self, kind: EntityKind) -> impl Iterator<Item = &Entity> + '_ {
        self.inner.by_kind.get(&kind).into_iter().flat_map(|m| m.values())
    }

    pub fn all(&self) -> impl Iterator<Item = &Entity> + '_ {
        self.inner.by_kind.values().flat_map(|m| m.values())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.inner.meta.get(key).map(String::as_str)
    }

    typed_access! {
        elements => Element(SystemElement),
        assets => Asset(Asset),
        signals => Signal(Signal),
        segments => Segment(Segment),
        virtual_sensors => VirtualSensor(VirtualSensor),
        failure_modes => FailureMode(FailureMode),
        interventions => Intervention(Intervention),
        incidents => FailureIncident(FailureIncident),
        detection_methods => DetectionMethod(DetectionMethod),
        cycle_labels => CycleLabel(CycleLabel),
        matrices => MeasurementMatrix(MatrixInfo),
    }

    pub fn signal(&self, id: &Id) -> Option<&Signal> {
        match self.get(id)? {
            Entity::Signal(s) => Some(s),
            _ => None,
        }
    }

    pub fn segment(&self, id: &Id) -> Option<&Segment> {
        match self.get(id)? {
            Entity::Segment(s) => Some(s),
            _ => None,
        }
    }

    pub fn virtual_sensor(&self, id: &Id) -> Option<&VirtualSensor> {
        match self.get(id)? {
            Entity::VirtualSensor(s) => Some(s),
            _ => None,
        }
    }

    pub fn detection_method(&self, id: &Id) -> Option<&DetectionMethod> {
        match self.get(id)? {
            Entity::DetectionMethod(m) => Some(m),
            _ => None,
        }
    }

    pub fn matrix_info(&self, signal_id: &Id) -> Option<&MatrixInfo> {
        match self.get(&MatrixInfo::id_for(signal_id))? {
            Entity::MeasurementMatrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn hierarchy(&self) -> Result<Hierarchy, HierarchyReport> {
        let elements: Vec<SystemElement> = self.elements().cloned().collect();
        Hierarchy::new(&elements)
    }

    /// Ids that are referenced but not stored. Empty for any snapshot taken
    /// from a [`Store`].
    pub fn dangling_references(&self) -> Vec<(Id, Id)> {
        let mut out = Vec::new();
        for e in self.all() {
            let local: BTreeSet<Id> = match e {
                Entity::VirtualSensor(vs) => vs.nodes.iter().map(|n| n.id.clone()).collect(),
                _ => BTreeSet::new(),
            };
            for r in e.references() {
                if !local.contains(&r) && self.get(&r).is_none() {
                    out.push((e.id().clone(), r));
                }
            }
        }
        out
    }
}

/// Single-writer handle on a store directory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    state: Arc<Collections>,
}

impl Store {
    /// Opens (creating if needed) the store at `root` and loads all records.
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        for sub in ["entities", "measurements", "models"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let mut state = Collections::default();
        for kind in EntityKind::ALL {
            let path = Self::records_path(&root, kind);
            if !path.exists() {
                continue;
            }
            let file = fs::File::open(&path).map_err(io_err(&path))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entity: Entity = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                state.insert(entity);
            }
        }
        let meta_path = root.join("meta.json");
        if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            state.meta = serde_json::from_str(&text).map_err(|e| StoreError::Parse {
                path: meta_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
        }
        Ok(Store {
            root,
            state: Arc::new(state),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn records_path(root: &Path, kind: EntityKind) -> PathBuf {
        root.join("entities").join(format!("{}.records", kind.file_stem()))
    }

    pub fn matrix_path(&self, signal_id: &Id) -> PathBuf {
        self.root.join("measurements").join(format!("{signal_id}.mat"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            inner: Arc::clone(&self.state),
        }
    }

    pub fn get(&self, id: &Id) -> Option<&Entity> {
        self.state.get(id)
    }

    /// Stores one entity.
    pub fn put(&mut self, entity: Entity) -> Result<Id, StoreError> {
        let id = entity.id().clone();
        self.put_all(vec![entity])?;
        Ok(id)
    }

    /// Stores a batch atomically: either every entity is accepted or none is.
    /// Later entities may reference earlier ones in the same batch.
    pub fn put_all(&mut self, entities: Vec<Entity>) -> Result<(), StoreError> {
        self.commit(entities, false)
    }

    /// Like [`Store::put_all`], but entities identical to a stored record are
    /// skipped instead of rejected as duplicates.
    pub fn ensure_all(&mut self, entities: Vec<Entity>) -> Result<(), StoreError> {
        self.commit(entities, true)
    }

    fn commit(&mut self, entities: Vec<Entity>, skip_identical: bool) -> Result<(), StoreError> {
        let mut next = (*self.state).clone();
        let mut touched = BTreeSet::new();
        for e in entities {
            e.check()?;
            if let Some(existing) = next.get(e.id()) {
                if skip_identical && *existing == e {
                    continue;
                }
                return Err(StoreError::DuplicateId(e.id().clone()));
            }
            next.check_links(&e)?;
            touched.insert(e.kind());
            next.insert(e);
        }
        if touched.is_empty() {
            return Ok(());
        }
        for kind in &touched {
            write_records(&self.root, &next, *kind)?;
        }
        self.state = Arc::new(next);
        Ok(())
    }

    /// Removes `id` if nothing references it.
    pub fn delete(&mut self, id: &Id) -> Result<(), StoreError> {
        let entity = self.state.get(id).ok_or_else(|| StoreError::UnknownId(id.clone()))?;
        let kind = entity.kind();
        let dependents = self.state.dependents_of(id);
        if !dependents.is_empty() {
            return Err(StoreError::DependentExists {
                id: id.clone(),
                dependents,
            });
        }
        let signal_of_matrix = match entity {
            Entity::MeasurementMatrix(m) => Some(m.signal_id.clone()),
            _ => None,
        };
        let mut next = (*self.state).clone();
        next.remove(id);
        write_records(&self.root, &next, kind)?;
        if let Some(signal) = signal_of_matrix {
            let path = self.matrix_path(&signal);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        self.state = Arc::new(next);
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) -> Result<(), StoreError> {
        let value = value.into();
        if self.state.meta.get(key) == Some(&value) {
            return Ok(());
        }
        let mut next = (*self.state).clone();
        next.meta.insert(key.to_string(), value);
        let path = self.root.join("meta.json");
        let text = serde_json::to_string_pretty(&next.meta).expect("string map serializes");
        write_atomic(&path, format!("{text}\n").as_bytes())?;
        self.state = Arc::new(next);
        Ok(())
    }

    /// Stores the per-cycle matrix of one signal, replacing any previous one.
    pub fn put_measurement_matrix(
        &mut self,
        signal_id: &Id,
        asset_id: &Id,
        cycle_duration_s: f64,
        rows: &[Vec<f64>],
    ) -> Result<(), StoreError> {
        let signal = match self.state.get(signal_id) {
            Some(Entity::Signal(s)) => s.clone(),
            _ => {
                return Err(StoreError::DanglingReference {
                    entity: Id::new("measurement_matrix"),
                    id: MatrixInfo::id_for(signal_id),
                    missing: signal_id.clone(),
                })
            }
        };
        let expected = signal.samples_for(cycle_duration_s);
        for (row, values) in rows.iter().enumerate() {
            if values.len() != expected {
                return Err(StoreError::ShapeMismatch {
                    signal: signal_id.clone(),
                    row,
                    expected,
                    actual: values.len(),
                });
            }
        }
        let info = MatrixInfo {
            id: MatrixInfo::id_for(signal_id),
            signal_id: signal_id.clone(),
            asset_id: asset_id.clone(),
            cycle_duration_s,
            cycles: rows.len(),
            samples: expected,
        };
        let entity = Entity::MeasurementMatrix(info);
        let mut next = (*self.state).clone();
        next.remove(entity.id());
        next.check_links(&entity)?;
        next.insert(entity);

        let path = self.matrix_path(signal_id);
        write_matrix(&path, rows)?;
        write_records(&self.root, &next, EntityKind::MeasurementMatrix)?;
        self.state = Arc::new(next);
        Ok(())
    }

    /// Opens the stored matrix of `signal_id` for row access.
    pub fn matrix(&self, signal_id: &Id) -> Result<MatrixReader, StoreError> {
        MatrixReader::open(self.matrix_path(signal_id))
    }
}

fn write_records(root: &Path, state: &Collections, kind: EntityKind) -> Result<(), StoreError> {
    let path = Store::records_path(root, kind);
    let mut buf = Vec::new();
    if let Some(map) = state.by_kind.get(&kind) {
        for e in map.values() {
            serde_json::to_writer(&mut buf, e).expect("entities serialize");
            buf.push(b'\n');
        }
    }
    write_atomic(&path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Writes rows as tab-separated text, one row per line.
pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<(), StoreError> {
    let tmp = path.with_extension("mat.tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for row in rows {
        line.clear();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push('\t');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(&tmp))?;
    }
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parses one tab-separated line into numbers.
pub fn parse_row(line: &str, path: &Path, line_no: usize) -> Result<Vec<f64>, StoreError> {
    line.trim_end_matches(['\r', '\n'])
        .split('\t')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|e| StoreError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("{tok:?}: {e}"),
            })
        })
        .collect()
}

/// Random access to the rows of a matrix file via a line-offset index, so
/// callers can stream cycles without loading the whole file.
#[derive(Debug)]
pub struct MatrixReader {
    path: PathBuf,
    offsets: Vec<u64>,
}

impl MatrixReader {
    pub fn open(path: PathBuf) -> Result<Self, StoreError> {
        let mut file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut offsets = vec![0u64];
        let mut buf = vec![0u8; 1 << 16];
        let mut pos = 0u64;
        loop {
            let n = file.read(&mut buf).map_err(io_err(&path))?;
            if n == 0 {
                break;
            }
            for (i, b) in buf[..n].iter().enumerate() {
                if *b == b'\n' {
                    offsets.push(pos + i as u64 + 1);
                }
            }
            pos += n as u64;
        }
        if *offsets.last().unwrap() != pos {
            // final line without a trailing newline
            offsets.push(pos);
        }
        Ok(MatrixReader { path, offsets })
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Reads rows `start..end`.
    pub fn read_rows(&self, start: usize, end: usize) -> Result<Vec<Vec<f64>>, StoreError> {
        let end = end.min(self.rows());
        if start >= end {
            return Ok(Vec::new());
        }
        let mut file = fs::File::open(&self.path).map_err(io_err(&self.path))?;
        let from = self.offsets[start];
        let to = self.offsets[end];
        file.seek(SeekFrom::Start(from)).map_err(io_err(&self.path))?;
        let mut bytes = vec![0u8; (to - from) as usize];
        file.read_exact(&mut bytes).map_err(io_err(&self.path))?;
        let text = String::from_utf8(bytes).map_err(|e| StoreError::Parse {
            path: self.path.clone(),
            line: start + 1,
            message: e.to_string(),
        })?;
        text.lines()
            .enumerate()
            .map(|(i, line)| parse_row(line, &self.path, start + i + 1))
            .collect()
    }

    pub fn read_all(&self) -> Result<Vec<Vec<f64>>, StoreError> {
        self.read_rows(0, self.rows())
    }
}
