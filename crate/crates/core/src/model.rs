//! Entity types of the FMEA-structured system model.
//!
//! The physical system is a tree of [`SystemElement`]s. Data sources
//! ([`Signal`], [`VirtualSensor`]) and risk records ([`FailureMode`]) hang off
//! elements by id. Every type is a plain value object; [`Validate::check`]
//! enforces the per-record invariants, while cross-record rules (tree shape,
//! foreign keys) live in [`validate_hierarchy`] and in the store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier shared by all entity kinds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Id(String);

impl Id {
    pub fn new(s: impl Into<String>) -> Self {
        Id(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Id {
    fn from(s: &str) -> Self {
        Id(s.to_string())
    }
}

impl From<String> for Id {
    fn from(s: String) -> Self {
        Id(s)
    }
}

impl std::borrow::Borrow<str> for Id {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantError {
    #[error("{entity} {id}: {message}")]
    Violated {
        entity: &'static str,
        id: Id,
        message: String,
    },
    #[error("unknown element id {0}")]
    UnknownElement(Id),
}

fn violated(entity: &'static str, id: &Id, message: impl Into<String>) -> InvariantError {
    InvariantError::Violated {
        entity,
        id: id.clone(),
        message: message.into(),
    }
}

/// Per-record invariants that can be checked without looking at other records.
pub trait Validate {
    fn check(&self) -> Result<(), InvariantError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemElement {
    pub id: Id,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<Id>,
}

impl Validate for SystemElement {
    fn check(&self) -> Result<(), InvariantError> {
        if self.parent_id.as_ref() == Some(&self.id) {
            return Err(violated("element", &self.id, "element is its own parent"));
        }
        Ok(())
    }
}

/// One physical machine instance of the modelled system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub id: Id,
    pub root_element_id: Id,
    pub label: String,
}

impl Validate for Asset {
    fn check(&self) -> Result<(), InvariantError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalSource {
    Intrinsic,
    Control,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub id: Id,
    pub name: String,
    pub element_ids: Vec<Id>,
    pub sampling_rate_hz: f64,
    pub unit: String,
    pub source: SignalSource,
}

impl Signal {
    /// Number of samples a measurement of `duration_s` seconds must hold.
    pub fn samples_for(&self, duration_s: f64) -> usize {
        (self.sampling_rate_hz * duration_s).round() as usize
    }
}

impl Validate for Signal {
    fn check(&self) -> Result<(), InvariantError> {
        if self.element_ids.is_empty() {
            return Err(violated("signal", &self.id, "element_ids is empty"));
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(violated(
                "signal",
                &self.id,
                format!("sampling_rate_hz must be positive, got {}", self.sampling_rate_hz),
            ));
        }
        Ok(())
    }
}

/// Time series of one signal for one asset over one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub id: Id,
    pub asset_id: Id,
    pub signal_id: Id,
    pub cycle_index: usize,
    pub start_offset_s: f64,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    pub values: Vec<f64>,
}

impl Measurement {
    /// Offset of sample `i` from the start of the cycle, in seconds.
    pub fn offset_of(&self, i: usize) -> f64 {
        i as f64 / self.sampling_rate_hz
    }
}

impl Validate for Measurement {
    fn check(&self) -> Result<(), InvariantError> {
        if !(self.duration_s > 0.0) {
            return Err(violated("measurement", &self.id, "duration_s must be positive"));
        }
        let expected = (self.sampling_rate_hz * self.duration_s).round() as usize;
        if self.values.len() != expected {
            return Err(violated(
                "measurement",
                &self.id,
                format!("expected {expected} samples, got {}", self.values.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMethod {
    FixedInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub start_s: f64,
    pub end_s: f64,
}

/// A recurring window inside every cycle. Bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: Id,
    pub name: String,
    pub method: SegmentMethod,
    pub params: SegmentParams,
}

impl Segment {
    pub fn fixed(id: impl Into<Id>, start_s: f64, end_s: f64) -> Self {
        let id = id.into();
        Segment {
            name: id.to_string(),
            id,
            method: SegmentMethod::FixedInterval,
            params: SegmentParams { start_s, end_s },
        }
    }

    /// Checks the window against the cycle duration.
    pub fn check_within(&self, cycle_duration_s: f64) -> Result<(), InvariantError> {
        self.check()?;
        if self.params.end_s > cycle_duration_s {
            return Err(violated(
                "segment",
                &self.id,
                format!(
                    "end {} exceeds cycle duration {cycle_duration_s}",
                    self.params.end_s
                ),
            ));
        }
        Ok(())
    }
}

impl Validate for Segment {
    fn check(&self) -> Result<(), InvariantError> {
        let SegmentParams { start_s, end_s } = self.params;
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(violated(
                "segment",
                &self.id,
                format!("require 0 <= start < end, got [{start_s}, {end_s}]"),
            ));
        }
        Ok(())
    }
}

/// Atomic operator of a virtual-sensor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Operator {
    Diff,
    Div,
    /// Median.
    Me,
    Mean,
    Std,
    Min,
    Max,
    Sum,
    Slope,
    Abs,
}

impl Operator {
    pub const ALL: [Operator; 10] = [
        Operator::Diff,
        Operator::Div,
        Operator::Me,
        Operator::Mean,
        Operator::Std,
        Operator::Min,
        Operator::Max,
        Operator::Sum,
        Operator::Slope,
        Operator::Abs,
    ];

    pub fn arity(self) -> usize {
        match self {
            Operator::Diff | Operator::Div => 2,
            _ => 1,
        }
    }

    /// True for operators that collapse a series to a scalar.
    pub fn is_reduction(self) -> bool {
        !matches!(self, Operator::Diff | Operator::Div | Operator::Abs)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Operator::Diff => "DIFF",
            Operator::Div => "DIV",
            Operator::Me => "ME",
            Operator::Mean => "MEAN",
            Operator::Std => "STD",
            Operator::Min => "MIN",
            Operator::Max => "MAX",
            Operator::Sum => "SUM",
            Operator::Slope => "SLOPE",
            Operator::Abs => "ABS",
        };
        f.write_str(s)
    }
}

/// Input of an operation node: a signal, a node of the same graph, or another
/// virtual sensor, optionally restricted to a segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    #[serde(rename = "ref")]
    pub source: Id,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<Id>,
}

impl InputRef {
    pub fn node(id: impl Into<Id>) -> Self {
        InputRef {
            source: id.into(),
            segment: None,
        }
    }

    pub fn segmented(id: impl Into<Id>, segment: impl Into<Id>) -> Self {
        InputRef {
            source: id.into(),
            segment: Some(segment.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationNode {
    pub id: Id,
    pub operator: Operator,
    pub inputs: Vec<InputRef>,
}

impl OperationNode {
    pub fn new(id: impl Into<Id>, operator: Operator, inputs: Vec<InputRef>) -> Self {
        OperationNode {
            id: id.into(),
            operator,
            inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualSensor {
    pub id: Id,
    pub name: String,
    pub element_ids: Vec<Id>,
    pub output_node_id: Id,
    pub nodes: Vec<OperationNode>,
}

impl VirtualSensor {
    pub fn node(&self, id: &Id) -> Option<&OperationNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }
}

impl Validate for VirtualSensor {
    fn check(&self) -> Result<(), InvariantError> {
        if self.element_ids.is_empty() {
            return Err(violated("virtual sensor", &self.id, "element_ids is empty"));
        }
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if !seen.insert(&node.id) {
                return Err(violated(
                    "virtual sensor",
                    &self.id,
                    format!("duplicate node id {}", node.id),
                ));
            }
            if node.inputs.len() != node.operator.arity() {
                return Err(violated(
                    "virtual sensor",
                    &self.id,
                    format!(
                        "node {}: {} takes {} input(s), got {}",
                        node.id,
                        node.operator,
                        node.operator.arity(),
                        node.inputs.len()
                    ),
                ));
            }
        }
        if !seen.contains(&self.output_node_id) {
            return Err(violated(
                "virtual sensor",
                &self.id,
                format!("output node {} is not defined", self.output_node_id),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureMode {
    pub id: Id,
    pub name: String,
    pub element_id: Id,
    /// Probability of occurrence per reference interval.
    pub prob_per_interval: f64,
    pub severity: f64,
    /// Probability of detection without the monitoring tool.
    pub baseline_detection: f64,
    pub cost_detected: f64,
    pub cost_undetected: f64,
    pub reference_interval: String,
}

impl Validate for FailureMode {
    fn check(&self) -> Result<(), InvariantError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.prob_per_interval) {
            return Err(violated("failure mode", &self.id, "P must lie in [0, 1]"));
        }
        if !unit(self.baseline_detection) {
            return Err(violated("failure mode", &self.id, "D must lie in [0, 1]"));
        }
        if !(self.severity >= 0.0) {
            return Err(violated("failure mode", &self.id, "S must be non-negative"));
        }
        if !(self.cost_detected >= 0.0 && self.cost_undetected >= 0.0) {
            return Err(violated("failure mode", &self.id, "costs must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    Diagnostic,
    Proactive,
    Reactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub id: Id,
    pub failure_mode_id: Id,
    pub kind: InterventionKind,
    pub cost: f64,
    pub description: String,
}

impl Validate for Intervention {
    fn check(&self) -> Result<(), InvariantError> {
        if !(self.cost >= 0.0) {
            return Err(violated("intervention", &self.id, "cost must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentStatus {
    DetectedPrior,
    Undetected,
    FalseAlarm,
    Unreconciled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureIncident {
    pub id: Id,
    pub asset_id: Id,
    pub failure_mode_id: Id,
    /// Inclusive `[first, last]` cycle range.
    pub cycle_range: [usize; 2],
    pub status: IncidentStatus,
}

impl FailureIncident {
    pub fn first(&self) -> usize {
        self.cycle_range[0]
    }

    pub fn last(&self) -> usize {
        self.cycle_range[1]
    }

    pub fn len(&self) -> usize {
        self.last() - self.first() + 1
    }
}

impl Validate for FailureIncident {
    fn check(&self) -> Result<(), InvariantError> {
        if self.cycle_range[0] > self.cycle_range[1] {
            return Err(violated("incident", &self.id, "first cycle after last cycle"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionKind {
    Monitoring,
    Diagnostic,
    Prognostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMethod {
    pub id: Id,
    pub kind: DetectionKind,
    #[serde(default)]
    pub input_signal_ids: Vec<Id>,
    #[serde(default)]
    pub input_virtual_sensor_ids: Vec<Id>,
    #[serde(default)]
    pub scope_element_ids: Vec<Id>,
    #[serde(default)]
    pub scope_failure_mode_ids: Vec<Id>,
    pub threshold: f64,
    /// Operating cost per reference interval.
    pub operating_cost: f64,
}

impl Validate for DetectionMethod {
    fn check(&self) -> Result<(), InvariantError> {
        let by_elements = !self.scope_element_ids.is_empty();
        let by_modes = !self.scope_failure_mode_ids.is_empty();
        match (self.kind, by_elements, by_modes) {
            (DetectionKind::Monitoring, true, false) => {}
            (DetectionKind::Monitoring, _, _) => {
                return Err(violated(
                    "detection method",
                    &self.id,
                    "monitoring scope must list elements only",
                ))
            }
            (_, false, true) => {}
            (_, _, _) => {
                return Err(violated(
                    "detection method",
                    &self.id,
                    "diagnostic/prognostic scope must list failure modes only",
                ))
            }
        }
        if !(self.operating_cost >= 0.0) {
            return Err(violated(
                "detection method",
                &self.id,
                "operating cost must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Rule broken by an element list that is not a single tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyRule {
    DuplicateId,
    DuplicateSiblingName,
    NoRoot,
    MultipleRoots,
    UnknownParent,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub element_id: Id,
    pub rule: HierarchyRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct HierarchyReport {
    pub violations: Vec<Violation>,
}

impl HierarchyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for HierarchyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {:?}", v.element_id, v.rule)?;
        }
        Ok(())
    }
}

/// Checks that `elements` form exactly one tree. Violations are reported, not
/// raised; an empty element list has no root and is reported as such.
pub fn validate_hierarchy(elements: &[SystemElement]) -> HierarchyReport {
    let mut violations = Vec::new();
    let mut by_id: BTreeMap<&Id, &SystemElement> = BTreeMap::new();
    for e in elements {
        if by_id.insert(&e.id, e).is_some() {
            violations.push(Violation {
                element_id: e.id.clone(),
                rule: HierarchyRule::DuplicateId,
            });
        }
    }

    let roots: Vec<&SystemElement> = elements.iter().filter(|e| e.parent_id.is_none()).collect();
    match roots.len() {
        0 => violations.push(Violation {
            element_id: elements.first().map(|e| e.id.clone()).unwrap_or_else(|| Id::new("")),
            rule: HierarchyRule::NoRoot,
        }),
        1 => {}
        _ => {
            for r in &roots {
                violations.push(Violation {
                    element_id: r.id.clone(),
                    rule: HierarchyRule::MultipleRoots,
                });
            }
        }
    }

    let mut sibling_names: BTreeSet<(&Id, &str)> = BTreeSet::new();
    for e in elements {
        if let Some(parent) = &e.parent_id {
            if !by_id.contains_key(parent) {
                violations.push(Violation {
                    element_id: e.id.clone(),
                    rule: HierarchyRule::UnknownParent,
                });
            }
            if !sibling_names.insert((parent, e.name.as_str())) {
                violations.push(Violation {
                    element_id: e.id.clone(),
                    rule: HierarchyRule::DuplicateSiblingName,
                });
            }
        }
    }

    // Walk up from every element; revisiting an id on the same walk is a cycle.
    let mut on_cycle: BTreeSet<&Id> = BTreeSet::new();
    for e in elements {
        let mut seen: Vec<&Id> = vec![&e.id];
        let mut cur = e;
        while let Some(p) = &cur.parent_id {
            if let Some(pos) = seen.iter().position(|s| *s == p) {
                on_cycle.extend(seen[pos..].iter().copied());
                break;
            }
            match by_id.get(p) {
                Some(next) => {
                    seen.push(p);
                    cur = next;
                }
                None => break,
            }
        }
    }
    for id in on_cycle {
        violations.push(Violation {
            element_id: id.clone(),
            rule: HierarchyRule::Cycle,
        });
    }

    violations.sort_by(|a, b| (&a.element_id, a.rule).cmp(&(&b.element_id, b.rule)));
    HierarchyReport { violations }
}

/// A validated element tree with parent/child navigation.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    elements: BTreeMap<Id, SystemElement>,
    children: BTreeMap<Id, Vec<Id>>,
    root: Id,
}

impl Hierarchy {
    pub fn new(elements: &[SystemElement]) -> Result<Self, HierarchyReport> {
        let report = validate_hierarchy(elements);
        if !report.is_ok() {
            return Err(report);
        }
        let mut children: BTreeMap<Id, Vec<Id>> = BTreeMap::new();
        let mut root = None;
        for e in elements {
            children.entry(e.id.clone()).or_default();
            match &e.parent_id {
                Some(p) => children.entry(p.clone()).or_default().push(e.id.clone()),
                None => root = Some(e.id.clone()),
            }
        }
        Ok(Hierarchy {
            elements: elements.iter().map(|e| (e.id.clone(), e.clone())).collect(),
            children,
            root: root.expect("validated tree has a root"),
        })
    }

    pub fn root(&self) -> &Id {
        &self.root
    }

    pub fn contains(&self, id: &Id) -> bool {
        self.elements.contains_key(id)
    }

    pub fn get(&self, id: &Id) -> Option<&SystemElement> {
        self.elements.get(id)
    }

    pub fn elements(&self) -> impl Iterator<Item = &SystemElement> {
        self.elements.values()
    }

    pub fn children(&self, id: &Id) -> &[Id] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_leaf(&self, id: &Id) -> bool {
        self.children(id).is_empty()
    }

    /// The element and all of its descendants.
    pub fn resolve_subtree(&self, id: &Id) -> Result<BTreeSet<Id>, InvariantError> {
        if !self.contains(id) {
            return Err(InvariantError::UnknownElement(id.clone()));
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![id.clone()];
        while let Some(cur) = stack.pop() {
            stack.extend(self.children(&cur).iter().cloned());
            out.insert(cur);
        }
        Ok(out)
    }

    /// Ancestors from the parent up to the root, nearest first.
    pub fn ancestors(&self, id: &Id) -> Vec<Id> {
        let mut out = Vec::new();
        let mut cur = self.elements.get(id).and_then(|e| e.parent_id.clone());
        while let Some(p) = cur {
            cur = self.elements.get(&p).and_then(|e| e.parent_id.clone());
            out.push(p);
        }
        out
    }

    pub fn is_ancestor_or_self(&self, ancestor: &Id, id: &Id) -> bool {
        ancestor == id || self.ancestors(id).contains(ancestor)
    }

    /// Root-to-element path of names, e.g. `Hydraulic-System/Working-Circuit/Pump`.
    pub fn path(&self, id: &Id) -> String {
        let mut names: Vec<&str> = self
            .ancestors(id)
            .iter()
            .rev()
            .filter_map(|a| self.elements.get(a).map(|e| e.name.as_str()))
            .collect();
        if let Some(e) = self.elements.get(id) {
            names.push(&e.name);
        }
        names.join("/")
    }
}

/// Signals with at least one element reference inside the subtree closure of
/// `scope`.
pub fn signals_for_scope<'a>(
    hierarchy: &Hierarchy,
    signals: impl IntoIterator<Item = &'a Signal>,
    scope: &BTreeSet<Id>,
) -> Result<BTreeSet<Id>, InvariantError> {
    let mut closure = BTreeSet::new();
    for id in scope {
        closure.extend(hierarchy.resolve_subtree(id)?);
    }
    Ok(signals
        .into_iter()
        .filter(|s| s.element_ids.iter().any(|e| closure.contains(e)))
        .map(|s| s.id.clone())
        .collect())
}
