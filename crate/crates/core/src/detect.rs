//! Unsupervised monitoring: a k-nearest-neighbour attention index over
//! z-scored healthy reference cycles, with exact per-feature attribution.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::ingest::{CycleLabel, Health};
use crate::model::{FailureIncident, Hierarchy, Id, IncidentStatus};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.7;
pub const DEFAULT_TOP_N: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("need at least {needed} healthy cycles, have {available}")]
    TooFewHealthy { needed: usize, available: usize },
    #[error("train ratio {0} is outside (0, 1)")]
    BadRatio(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {rows} usable training rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("every feature has zero variance on the training set")]
    NoVariance,
    #[error("row has {actual} features, model expects {expected}")]
    Width { expected: usize, actual: usize },
    #[error("feature columns differ from those the model was fitted on")]
    ColumnMismatch,
}

/// Cycle indices for fitting and for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the healthy stable cycles with a seeded ChaCha stream and takes
/// `round(ratio * n)` of them for training. Everything else except unstable
/// nominal cycles goes to the test set.
pub fn split_cycles(labels: &[CycleLabel], ratio: f64, seed: u64, k: usize) -> Result<Split, DetectError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DetectError::BadRatio(ratio));
    }
    if k == 0 {
        return Err(DetectError::ZeroK);
    }
    let mut healthy: Vec<usize> = labels
        .iter()
        .filter(|l| l.health == Health::Healthy)
        .map(|l| l.cycle_index)
        .collect();
    healthy.sort_unstable();
    let n_train = (ratio * healthy.len() as f64).round() as usize;
    if healthy.len() < k + 1 || n_train < k {
        return Err(DetectError::TooFewHealthy {
            needed: (k + 1).max((k as f64 / ratio).ceil() as usize),
            available: healthy.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    healthy.shuffle(&mut rng);
    let mut train = healthy[..n_train].to_vec();
    train.sort_unstable();
    let train_set: BTreeSet<usize> = train.iter().copied().collect();
    let mut test: Vec<usize> = labels
        .iter()
        .filter(|l| l.health != Health::Unstable && !train_set.contains(&l.cycle_index))
        .map(|l| l.cycle_index)
        .collect();
    test.sort_unstable();
    Ok(Split { seed, ratio, train, test })
}

/// A fitted detector: standardisation parameters plus the z-scored
/// reference rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorModel {
    pub k: usize,
    /// All feature columns the model consumes, in input order.
    pub feature_ids: Vec<Id>,
    /// Training means for every input column; used to impute missing cells.
    pub means: Vec<f64>,
    /// Indices into `feature_ids` that survived the zero-variance filter.
    pub retained: Vec<usize>,
    /// Population standard deviation per retained feature.
    pub stds: Vec<f64>,
    /// Z-scored training rows over the retained features.
    pub reference: Vec<Vec<f64>>,
    pub reference_cycles: Vec<usize>,
    pub dropped: Vec<Id>,
    pub warnings: Vec<String>,
}

impl MonitorModel {
    pub fn retained_ids(&self) -> Vec<Id> {
        self.retained.iter().map(|&j| self.feature_ids[j].clone()).collect()
    }

    /// Standardised retained features of `row`; non-finite cells become the
    /// training mean (z = 0).
    pub fn standardise(&self, row: &[f64]) -> Result<(Vec<f64>, bool), DetectError> {
        if row.len() != self.feature_ids.len() {
            return Err(DetectError::Width {
                expected: self.feature_ids.len(),
                actual: row.len(),
            });
        }
        let mut imputed = false;
        let z = self
            .retained
            .iter()
            .zip(&self.stds)
            .map(|(&j, &sd)| {
                let x = row[j];
                if x.is_finite() {
                    (x - self.means[j]) / sd
                } else {
                    imputed = true;
                    0.0
                }
            })
            .collect();
        Ok((z, imputed))
    }
}

/// Fits a detector on the rows of `train`. Rows with any non-finite cell are
/// left out of the reference set.
pub fn fit_monitor(train: &FeatureMatrix, k: usize) -> Result<MonitorModel, DetectError> {
    if k == 0 {
        return Err(DetectError::ZeroK);
    }
    let mut warnings = Vec::new();
    let rows: Vec<(usize, &Vec<f64>)> = train
        .cycles
        .iter()
        .copied()
        .zip(&train.values)
        .filter(|(_, r)| r.iter().all(|v| v.is_finite()))
        .collect();
    let excluded = train.n_rows() - rows.len();
    if excluded > 0 {
        warnings.push(format!("{excluded} training rows with missing features excluded"));
    }
    if k > rows.len() {
        return Err(DetectError::KTooLarge { k, rows: rows.len() });
    }
    let n = rows.len() as f64;
    let p = train.n_cols();
    let means: Vec<f64> = (0..p).map(|j| rows.iter().map(|(_, r)| r[j]).sum::<f64>() / n).collect();
    let sds: Vec<f64> = (0..p)
        .map(|j| (rows.iter().map(|(_, r)| (r[j] - means[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();

    let mut retained = Vec::new();
    let mut stds = Vec::new();
    let mut dropped = Vec::new();
    if rows.len() < 2 {
        warnings.push("fewer than two training rows; standard deviations set to 1".to_string());
        retained.extend(0..p);
        stds.resize(p, 1.0);
    } else {
        for (j, &sd) in sds.iter().enumerate() {
            if sd > 0.0 && sd.is_finite() {
                retained.push(j);
                stds.push(sd);
            } else {
                dropped.push(train.sensor_ids[j].clone());
            }
        }
    }
    if !dropped.is_empty() {
        warnings.push(format!(
            "zero-variance features dropped: {}",
            dropped.iter().map(Id::as_str).collect::<Vec<_>>().join(", ")
        ));
    }
    if retained.is_empty() {
        return Err(DetectError::NoVariance);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let reference = rows
        .iter()
        .map(|(_, r)| retained.iter().zip(&stds).map(|(&j, sd)| (r[j] - means[j]) / sd).collect())
        .collect();
    Ok(MonitorModel {
        k,
        feature_ids: train.sensor_ids.clone(),
        means,
        retained,
        stds,
        reference,
        reference_cycles: rows.iter().map(|(c, _)| *c).collect(),
        dropped,
        warnings,
    })
}

/// Attention index of one cycle together with its decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cycle: usize,
    pub attention_index: f64,
    /// One entry per retained feature; sums to `attention_index`.
    pub contributions: Vec<f64>,
    /// Reference row indices of the k nearest neighbours, nearest first.
    pub neighbours: Vec<usize>,
    pub imputed: bool,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the k reference rows nearest to `z`; ties go to the lower index.
pub fn nearest(reference: &[Vec<f64>], z: &[f64], k: usize) -> Vec<usize> {
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (i, r) in reference.iter().enumerate() {
        let c = Candidate(squared_distance(z, r), i);
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("k >= 1") {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| c.1).collect()
}

/// Mean squared distance to the k nearest healthy reference rows.
pub fn attention_index(model: &MonitorModel, cycle: usize, row: &[f64]) -> Result<ScoreRecord, DetectError> {
    let (z, imputed) = model.standardise(row)?;
    let neighbours = nearest(&model.reference, &z, model.k);
    let k = neighbours.len() as f64;
    let contributions: Vec<f64> = (0..z.len())
        .map(|j| neighbours.iter().map(|&i| (z[j] - model.reference[i][j]).powi(2)).sum::<f64>() / k)
        .collect();
    Ok(ScoreRecord {
        cycle,
        attention_index: contributions.iter().sum(),
        contributions,
        neighbours,
        imputed,
    })
}

/// Scores every row of `fm` in parallel.
pub fn score(model: &MonitorModel, fm: &FeatureMatrix) -> Result<Vec<ScoreRecord>, DetectError> {
    if fm.sensor_ids != model.feature_ids {
        return Err(DetectError::ColumnMismatch);
    }
    fm.cycles
        .par_iter()
        .zip(fm.values.par_iter())
        .map(|(c, r)| attention_index(model, *c, r))
        .collect()
}

/// Per-element share of one cycle's attention index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub cycle: usize,
    pub attention_index: f64,
    /// Absolute contribution per directly referenced element.
    pub element_contributions: BTreeMap<Id, f64>,
    /// Top elements with their share of the index, largest first.
    pub top: Vec<(Id, f64)>,
}

impl AttributionReport {
    pub fn share(&self, element: &Id) -> f64 {
        if self.attention_index > 0.0 {
            self.element_contributions.get(element).copied().unwrap_or(0.0) / self.attention_index
        } else {
            0.0
        }
    }

    /// Contribution of `element` and everything below it.
    pub fn rolled_up(&self, hierarchy: &Hierarchy, element: &Id) -> f64 {
        self.element_contributions
            .iter()
            .filter(|(e, _)| hierarchy.is_ancestor_or_self(element, e))
            .map(|(_, c)| c)
            .sum()
    }
}

/// Splits each feature's contribution equally across the elements of the
/// virtual sensor that produced it, then ranks elements.
pub fn attribute(
    model: &MonitorModel,
    record: &ScoreRecord,
    sensor_elements: &BTreeMap<Id, Vec<Id>>,
    top_n: usize,
) -> AttributionReport {
    let mut per_element: BTreeMap<Id, f64> = BTreeMap::new();
    for (pos, &j) in model.retained.iter().enumerate() {
        let elements = sensor_elements
            .get(&model.feature_ids[j])
            .map(Vec::as_slice)
            .unwrap_or_default();
        if elements.is_empty() {
            continue;
        }
        let part = record.contributions[pos] / elements.len() as f64;
        for e in elements {
            *per_element.entry(e.clone()).or_default() += part;
        }
    }
    let mut ranked: Vec<(Id, f64)> = per_element.iter().map(|(e, c)| (e.clone(), *c)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let ai = record.attention_index;
    let top = ranked
        .into_iter()
        .take(top_n)
        .map(|(e, c)| (e, if ai > 0.0 { c / ai } else { 0.0 }))
        .collect();
    AttributionReport {
        cycle: record.cycle,
        attention_index: ai,
        element_contributions: per_element,
        top,
    }
}

/// True where the attention index strictly exceeds `threshold`.
pub fn detect_cycles(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|s| *s > threshold).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_flags(detected: &[bool], degraded: &[bool]) -> Confusion {
        let mut c = Confusion::default();
        for (&d, &y) in detected.iter().zip(degraded) {
            match (d, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub incidents: Vec<FailureIncident>,
    /// Detected cycles not within any incident's lead window.
    pub false_alarm_cycles: Vec<usize>,
    pub counts: Confusion,
}

/// Matches per-cycle detections against incidents. An incident is
/// detected-prior if any detection falls in `[first - lead_window, last]`.
/// Per-cycle counts treat a cycle as degraded iff it lies inside an incident.
pub fn reconcile(detections: &[(usize, bool)], incidents: &[FailureIncident], lead_window: usize) -> Reconciliation {
    let flagged: BTreeSet<usize> = detections.iter().filter(|(_, d)| *d).map(|(c, _)| *c).collect();
    let inside = |c: usize| incidents.iter().any(|i| i.first() <= c && c <= i.last());
    let reconciled = incidents
        .iter()
        .map(|i| {
            let lo = i.first().saturating_sub(lead_window);
            let hit = flagged.range(lo..=i.last()).next().is_some();
            FailureIncident {
                status: if hit {
                    IncidentStatus::DetectedPrior
                } else {
                    IncidentStatus::Undetected
                },
                ..i.clone()
            }
        })
        .collect();
    let false_alarm_cycles = flagged
        .iter()
        .copied()
        .filter(|&c| {
            !incidents
                .iter()
                .any(|i| i.first().saturating_sub(lead_window) <= c && c <= i.last())
        })
        .collect();
    let (detected, degraded): (Vec<bool>, Vec<bool>) = detections.iter().map(|(c, d)| (*d, inside(*c))).unzip();
    Reconciliation {
        incidents: reconciled,
        false_alarm_cycles,
        counts: Confusion::from_flags(&detected, &degraded),
    }
}

/// Two-dimensional principal-component view of standardised rows, for
/// plotting. Components are oriented so their largest loading is positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub components: [Vec<f64>; 2],
    pub points: Vec<[f64; 2]>,
}

pub fn project2d(model: &MonitorModel, rows: &[Vec<f64>]) -> Result<Projection, DetectError> {
    let p = model.retained.len();
    let n = model.reference.len() as f64;
    let mut cov = nalgebra::DMatrix::<f64>::zeros(p, p);
    for r in &model.reference {
        let v = nalgebra::DVector::from_column_slice(r);
        cov += &v * v.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |rank: usize| -> Vec<f64> {
        let Some(&col) = order.get(rank) else {
            return vec![0.0; p];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let components = [component(0), component(1)];
    let points = rows
        .iter()
        .map(|row| {
            let (z, _) = model.standardise(row)?;
            let dot = |c: &[f64]| z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            Ok([dot(&components[0]), dot(&components[1])])
        })
        .collect::<Result<_, DetectError>>()?;
    Ok(Projection { components, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let p = rows.first().map_or(0, Vec::len);
        FeatureMatrix {
            cycles: (0..rows.len()).collect(),
            sensor_ids: (0..p).map(|j| Id::new(format!("f{j}"))).collect(),
            sensor_names: (0..p).map(|j| format!("f{j}")).collect(),
            values: rows,
            provenance: String::new(),
            errors: Vec::new(),
        }
    }

    fn label(cycle: usize, health: Health) -> CycleLabel {
        CycleLabel {
            id: CycleLabel::id_for(&"a".into(), cycle),
            asset_id: "a".into(),
            cycle_index: cycle,
            conditions: BTreeMap::new(),
            stable: health != Health::Unstable,
            health,
        }
    }

    #[test]
    fn split_sizes_and_exclusions() {
        let mut labels: Vec<_> = (0..10).map(|c| label(c, Health::Healthy)).collect();
        labels.push(label(10, Health::Unstable));
        labels.push(label(
            11,
            Health::Degraded {
                modes: vec!["fm".into()],
            },
        ));
        let s = split_cycles(&labels, 0.7, 1, 3).unwrap();
        assert_eq!(s.train.len(), 7);
        assert_eq!(s.test.len(), 4);
        assert!(s.test.contains(&11) && !s.test.contains(&10));
        assert_eq!(s, split_cycles(&labels, 0.7, 1, 3).unwrap());
        assert_eq!(split_cycles(&labels, 1.0, 1, 3), Err(DetectError::BadRatio(1.0)));
        assert!(matches!(
            split_cycles(&labels, 0.7, 1, 10),
            Err(DetectError::TooFewHealthy { .. })
        ));
    }

    #[test]
    fn fit_single_row_forces_unit_std() {
        let m = fit_monitor(&matrix(vec![vec![1.0, 2.0]]), 1).unwrap();
        assert_eq!(m.stds, vec![1.0, 1.0]);
        assert!(!m.warnings.is_empty());
    }

    #[test]
    fn fit_drops_constant_feature() {
        let m = fit_monitor(&matrix(vec![vec![1.0, 5.0], vec![3.0, 5.0]]), 1).unwrap();
        assert_eq!(m.retained, vec![0]);
        assert_eq!(m.dropped, vec![Id::from("f1")]);
        assert_eq!(m.means, vec![2.0, 5.0]);
        assert_eq!(m.stds, vec![1.0]);
        assert_eq!(
            fit_monitor(&matrix(vec![vec![1.0], vec![1.0]]), 1),
            Err(DetectError::NoVariance)
        );
    }

    #[test]
    fn nan_rows_are_not_references() {
        let m = fit_monitor(&matrix(vec![vec![0.0], vec![f64::NAN], vec![2.0]]), 1).unwrap();
        assert_eq!(m.reference_cycles, vec![0, 2]);
        assert_eq!(
            fit_monitor(&matrix(vec![vec![0.0], vec![f64::NAN]]), 2),
            Err(DetectError::KTooLarge { k: 2, rows: 1 })
        );
    }

    #[test]
    fn hand_computed_index() {
        // means 0, population std 1 on both axes
        let train = matrix(vec![vec![-1.0, -1.0], vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0]]);
        let m = fit_monitor(&train, 2).unwrap();
        let r = attention_index(&m, 0, &[3.0, 1.0]).unwrap();
        // neighbours (1,1) at 4 and (1,-1) at 8
        assert_eq!(r.neighbours, vec![1, 3]);
        assert_eq!(r.attention_index, 6.0);
        assert_eq!(r.contributions, vec![4.0, 2.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let reference = vec![vec![1.0], vec![-1.0], vec![1.0]];
        assert_eq!(nearest(&reference, &[0.0], 2), vec![0, 1]);
    }

    #[test]
    fn imputation() {
        let m = fit_monitor(&matrix(vec![vec![0.0, 0.0], vec![2.0, 2.0]]), 1).unwrap();
        let r = attention_index(&m, 0, &[f64::NAN, 1.0]).unwrap();
        assert!(r.imputed);
        assert!(r.attention_index.is_finite());
        assert!(matches!(attention_index(&m, 0, &[1.0]), Err(DetectError::Width { .. })));
    }

    #[test]
    fn attribution_splits_evenly() {
        let train = matrix(vec![vec![-1.0, -1.0], vec![1.0, 1.0]]);
        let m = fit_monitor(&train, 1).unwrap();
        let rec = ScoreRecord {
            cycle: 7,
            attention_index: 6.0,
            contributions: vec![4.0, 2.0],
            neighbours: vec![0],
            imputed: false,
        };
        let map: BTreeMap<Id, Vec<Id>> = [
            ("f0".into(), vec!["pump".into(), "motor".into()]),
            ("f1".into(), vec!["cooler".into()]),
        ]
        .into_iter()
        .collect();
        let a = attribute(&m, &rec, &map, 2);
        assert_eq!(a.element_contributions[&Id::from("pump")], 2.0);
        assert_eq!(a.top, vec![(Id::from("cooler"), 2.0 / 6.0), (Id::from("motor"), 2.0 / 6.0)]);
        let total: f64 = a.element_contributions.values().sum();
        assert_eq!(total, 6.0);
    }

    fn incident(first: usize, last: usize) -> FailureIncident {
        FailureIncident {
            id: Id::new(format!("i{first}")),
            asset_id: "a".into(),
            failure_mode_id: "fm".into(),
            cycle_range: [first, last],
            status: IncidentStatus::Unreconciled,
        }
    }

    #[test]
    fn reconcile_window() {
        let det: Vec<(usize, bool)> = (0..10).map(|c| (c, c == 3 || c == 8)).collect();
        let incidents = [incident(5, 6), incident(8, 8)];
        let r = reconcile(&det, &incidents, 0);
        assert_eq!(r.incidents[0].status, IncidentStatus::Undetected);
        assert_eq!(r.incidents[1].status, IncidentStatus::DetectedPrior);
        assert_eq!(r.false_alarm_cycles, vec![3]);
        assert_eq!(r.counts, Confusion { tp: 1, fp: 1, fn_: 2, tn: 6 });

        let r = reconcile(&det, &incidents, 2);
        assert_eq!(r.incidents[0].status, IncidentStatus::DetectedPrior);
        assert!(r.false_alarm_cycles.is_empty());
        assert_eq!(r.counts, Confusion { tp: 1, fp: 1, fn_: 2, tn: 6 });
    }

    #[test]
    fn projection_axes() {
        let train = matrix(vec![vec![-2.0, 0.0], vec![2.0, 0.1], vec![0.0, -0.1], vec![1.0, 0.05]]);
        let m = fit_monitor(&train, 1).unwrap();
        let p = project2d(&m, &train.values).unwrap();
        assert_eq!(p.points.len(), 4);
        let c = &p.components[0];
        assert!((c[0] * c[0] + c[1] * c[1] - 1.0).abs() < 1e-9);
    }
}
