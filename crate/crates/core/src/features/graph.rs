//! Ordering and evaluation of virtual-sensor operation graphs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::ops::{apply_operator, OpError, Series, Value};
use crate::model::{Id, InputRef, Segment, Signal, VirtualSensor};
use crate::store::Snapshot;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("cycle through nodes {}", fmt_ids(.0))]
    Cycle(Vec<Id>),
}

fn fmt_ids(ids: &[Id]) -> String {
    ids.iter().map(Id::as_str).collect::<Vec<_>>().join(" -> ")
}

fn local_deps(vs: &VirtualSensor, node: usize, index: &HashMap<&Id, usize>) -> Vec<usize> {
    vs.nodes[node]
        .inputs
        .iter()
        .filter_map(|i| index.get(&i.source).copied())
        .collect()
}

/// Node ids ordered so every node follows the nodes it reads. Among ready
/// nodes, declaration order wins, so the order is deterministic.
pub fn topological_order(vs: &VirtualSensor) -> Result<Vec<Id>, GraphError> {
    let index: HashMap<&Id, usize> = vs.nodes.iter().enumerate().map(|(i, n)| (&n.id, i)).collect();
    let deps: Vec<Vec<usize>> = (0..vs.nodes.len()).map(|i| local_deps(vs, i, &index)).collect();
    let mut done = vec![false; vs.nodes.len()];
    let mut order = Vec::with_capacity(vs.nodes.len());
    while order.len() < vs.nodes.len() {
        let ready = (0..vs.nodes.len()).find(|&i| !done[i] && deps[i].iter().all(|&d| done[d]));
        match ready {
            Some(i) => {
                done[i] = true;
                order.push(vs.nodes[i].id.clone());
            }
            None => return Err(GraphError::Cycle(find_cycle(vs, &deps, &done))),
        }
    }
    Ok(order)
}

/// Every unfinished node has an unfinished dependency, so walking those edges
/// must revisit a node.
fn find_cycle(vs: &VirtualSensor, deps: &[Vec<usize>], done: &[bool]) -> Vec<Id> {
    let start = done.iter().position(|d| !d).expect("some node unfinished");
    let mut path = vec![start];
    let mut cur = start;
    loop {
        let next = *deps[cur].iter().find(|&&d| !done[d]).expect("blocked node has open dep");
        if let Some(pos) = path.iter().position(|&p| p == next) {
            let mut cycle: Vec<Id> = path[pos..].iter().map(|&i| vs.nodes[i].id.clone()).collect();
            cycle.push(vs.nodes[next].id.clone());
            return cycle;
        }
        path.push(next);
        cur = next;
    }
}

/// Definitions needed to evaluate virtual sensors.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub signals: BTreeMap<Id, Signal>,
    pub segments: BTreeMap<Id, Segment>,
    pub sensors: BTreeMap<Id, VirtualSensor>,
}

impl Catalog {
    pub fn new(
        signals: impl IntoIterator<Item = Signal>,
        segments: impl IntoIterator<Item = Segment>,
        sensors: impl IntoIterator<Item = VirtualSensor>,
    ) -> Self {
        Catalog {
            signals: signals.into_iter().map(|s| (s.id.clone(), s)).collect(),
            segments: segments.into_iter().map(|s| (s.id.clone(), s)).collect(),
            sensors: sensors.into_iter().map(|s| (s.id.clone(), s)).collect(),
        }
    }

    pub fn from_snapshot(snap: &Snapshot) -> Self {
        Catalog::new(
            snap.signals().cloned(),
            snap.segments().cloned(),
            snap.virtual_sensors().cloned(),
        )
    }

    /// Signals read by `sensor`, following references into other sensors.
    pub fn signals_used(&self, sensor: &Id) -> BTreeSet<Id> {
        let mut out = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut stack = vec![sensor.clone()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            let Some(vs) = self.sensors.get(&id) else { continue };
            let local: BTreeSet<&Id> = vs.nodes.iter().map(|n| &n.id).collect();
            for input in vs.nodes.iter().flat_map(|n| &n.inputs) {
                if local.contains(&input.source) {
                    continue;
                }
                if self.signals.contains_key(&input.source) {
                    out.insert(input.source.clone());
                } else {
                    stack.push(input.source.clone());
                }
            }
        }
        out
    }

    /// Whether `sensor` always yields a scalar, decided from operator shapes.
    pub fn is_scalar_valued(&self, sensor: &Id) -> Result<bool, EvalError> {
        self.scalar_shape(sensor, &mut Vec::new())
    }

    fn scalar_shape(&self, sensor: &Id, stack: &mut Vec<Id>) -> Result<bool, EvalError> {
        let vs = self.sensors.get(sensor).ok_or_else(|| EvalError {
            sensor: sensor.clone(),
            node: sensor.clone(),
            cause: EvalCause::UnknownReference(sensor.clone()),
        })?;
        if stack.contains(sensor) {
            let mut chain = stack.clone();
            chain.push(sensor.clone());
            return Err(EvalError {
                sensor: sensor.clone(),
                node: vs.output_node_id.clone(),
                cause: EvalCause::RecursiveSensor(chain),
            });
        }
        stack.push(sensor.clone());
        let order = topological_order(vs).map_err(|e| EvalError {
            sensor: sensor.clone(),
            node: vs.output_node_id.clone(),
            cause: EvalCause::Graph(e),
        })?;
        let mut scalar: HashMap<Id, bool> = HashMap::new();
        for node_id in order {
            let node = vs.node(&node_id).expect("ordered node exists");
            let mut inputs = Vec::new();
            for input in &node.inputs {
                let s = if let Some(v) = scalar.get(&input.source) {
                    *v
                } else if self.signals.contains_key(&input.source) {
                    false
                } else {
                    self.scalar_shape(&input.source, stack)?
                };
                inputs.push(s);
            }
            let out = node.operator.is_reduction() || inputs.iter().all(|s| *s);
            scalar.insert(node_id, out);
        }
        stack.pop();
        Ok(scalar[&vs.output_node_id])
    }
}

/// Full-cycle series of every available signal for one cycle.
#[derive(Debug, Clone, Default)]
pub struct CycleData {
    pub cycle_index: usize,
    pub signals: BTreeMap<Id, Series>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalCause {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no measurement of signal {0} for this cycle")]
    MissingMeasurement(Id),
    #[error("unknown reference {0}")]
    UnknownReference(Id),
    #[error("unknown segment {0}")]
    UnknownSegment(Id),
    #[error("segment applied to a scalar input {0}")]
    SegmentOnScalar(Id),
    #[error("virtual sensors reference each other: {}", fmt_ids(.0))]
    RecursiveSensor(Vec<Id>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("virtual sensor {sensor}, node {node}: {cause}")]
pub struct EvalError {
    pub sensor: Id,
    pub node: Id,
    pub cause: EvalCause,
}

/// Evaluates virtual sensors for one cycle. Node values are computed once per
/// sensor and sensor outputs once per cycle, so shared subgraphs are reused.
pub struct CycleEvaluator<'a> {
    catalog: &'a Catalog,
    data: &'a CycleData,
    outputs: HashMap<Id, Result<Value, EvalError>>,
    stack: Vec<Id>,
}

impl<'a> CycleEvaluator<'a> {
    pub fn new(catalog: &'a Catalog, data: &'a CycleData) -> Self {
        CycleEvaluator {
            catalog,
            data,
            outputs: HashMap::new(),
            stack: Vec::new(),
        }
    }

    pub fn evaluate(&mut self, sensor: &Id) -> Result<Value, EvalError> {
        if let Some(done) = self.outputs.get(sensor) {
            return done.clone();
        }
        let vs = self.catalog.sensors.get(sensor).ok_or_else(|| EvalError {
            sensor: sensor.clone(),
            node: sensor.clone(),
            cause: EvalCause::UnknownReference(sensor.clone()),
        })?;
        if self.stack.contains(sensor) {
            let mut chain = self.stack.clone();
            chain.push(sensor.clone());
            return Err(EvalError {
                sensor: sensor.clone(),
                node: vs.output_node_id.clone(),
                cause: EvalCause::RecursiveSensor(chain),
            });
        }
        self.stack.push(sensor.clone());
        let result = self.evaluate_graph(vs);
        self.stack.pop();
        self.outputs.insert(sensor.clone(), result.clone());
        result
    }

    fn evaluate_graph(&mut self, vs: &VirtualSensor) -> Result<Value, EvalError> {
        let err = |node: &Id, cause: EvalCause| EvalError {
            sensor: vs.id.clone(),
            node: node.clone(),
            cause,
        };
        let order = topological_order(vs).map_err(|e| err(&vs.output_node_id, e.into()))?;
        let needed = needed_nodes(vs);
        let mut values: HashMap<Id, Value> = HashMap::with_capacity(needed.len());
        for node_id in order.into_iter().filter(|id| needed.contains(id)) {
            let node = vs.node(&node_id).expect("ordered node exists");
            let mut inputs = Vec::with_capacity(node.inputs.len());
            for input in &node.inputs {
                let v = self.resolve_input(input, &values).map_err(|cause| match cause {
                    Resolve::Cause(c) => err(&node_id, c),
                    Resolve::Nested(e) => e,
                })?;
                inputs.push(v);
            }
            let out = apply_operator(node.operator, &inputs).map_err(|e| err(&node_id, e.into()))?;
            values.insert(node_id, out);
        }
        Ok(values.remove(&vs.output_node_id).expect("output node evaluated"))
    }

    fn resolve_input(&mut self, input: &InputRef, local: &HashMap<Id, Value>) -> Result<Value, Resolve> {
        let value = if let Some(v) = local.get(&input.source) {
            v.clone()
        } else if self.catalog.signals.contains_key(&input.source) {
            match self.data.signals.get(&input.source) {
                Some(s) => Value::Series(s.clone()),
                None => return Err(Resolve::Cause(EvalCause::MissingMeasurement(input.source.clone()))),
            }
        } else if self.catalog.sensors.contains_key(&input.source) {
            self.evaluate(&input.source).map_err(Resolve::Nested)?
        } else {
            return Err(Resolve::Cause(EvalCause::UnknownReference(input.source.clone())));
        };
        let Some(seg_id) = &input.segment else {
            return Ok(value);
        };
        let segment = self
            .catalog
            .segments
            .get(seg_id)
            .ok_or_else(|| Resolve::Cause(EvalCause::UnknownSegment(seg_id.clone())))?;
        match value {
            Value::Series(s) => s
                .restrict(segment)
                .map(Value::Series)
                .map_err(|e| Resolve::Cause(e.into())),
            Value::Scalar(_) => Err(Resolve::Cause(EvalCause::SegmentOnScalar(input.source.clone()))),
        }
    }
}

/// Nodes the output reads, directly or through other nodes.
fn needed_nodes(vs: &VirtualSensor) -> BTreeSet<Id> {
    let mut needed = BTreeSet::new();
    let mut stack = vec![vs.output_node_id.clone()];
    while let Some(id) = stack.pop() {
        let Some(node) = vs.node(&id) else { continue };
        if needed.insert(id) {
            stack.extend(node.inputs.iter().map(|i| i.source.clone()));
        }
    }
    needed
}

enum Resolve {
    Cause(EvalCause),
    Nested(EvalError),
}

/// Output value of `vs` on one cycle.
pub fn evaluate_virtual_sensor(
    vs: &VirtualSensor,
    catalog: &Catalog,
    data: &CycleData,
) -> Result<Value, EvalError> {
    let mut catalog = catalog.clone();
    catalog.sensors.entry(vs.id.clone()).or_insert_with(|| vs.clone());
    CycleEvaluator::new(&catalog, data).evaluate(&vs.id)
}
