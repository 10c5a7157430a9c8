//! Classical and cost-based risk figures, and how a detector's operating
//! point changes the expected cost of a failure mode.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect_cycles, Confusion};

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("evaluation set needs at least one degraded and one healthy cycle")]
    OneClass,
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("no scenarios defined")]
    NoScenarios,
    #[error("parsing cost file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub tpr: f64,
    pub fpr: f64,
    pub fnr: f64,
}

impl ConfusionRates {
    pub fn from_counts(c: &Confusion) -> ConfusionRates {
        let pos = (c.tp + c.fn_) as f64;
        let neg = (c.fp + c.tn) as f64;
        let tpr = if pos > 0.0 { c.tp as f64 / pos } else { 0.0 };
        let fpr = if neg > 0.0 { c.fp as f64 / neg } else { 0.0 };
        ConfusionRates { tpr, fpr, fnr: 1.0 - tpr }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostFlags {
    /// Treat the baseline detection probability as zero.
    #[serde(default)]
    pub assume_run_to_failure: bool,
    /// Treat the operating cost of the detector as zero.
    #[serde(default)]
    pub assume_free_operation: bool,
    /// Charge false alarms per interval rather than per failure occurrence.
    #[serde(default)]
    pub fp_cost_unscaled_by_p: bool,
}

/// Probability, detection and cost parameters of one failure mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSet {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "S", default)]
    pub s: f64,
    #[serde(rename = "D", default)]
    pub d: f64,
    #[serde(rename = "CD")]
    pub cd: f64,
    #[serde(rename = "CU")]
    pub cu: f64,
    #[serde(rename = "CDI")]
    pub cdi: f64,
    #[serde(rename = "C_PHM", default)]
    pub c_phm: f64,
    #[serde(flatten)]
    pub flags: CostFlags,
}

impl CostSet {
    pub fn effective_d(&self) -> f64 {
        if self.flags.assume_run_to_failure {
            0.0
        } else {
            self.d
        }
    }

    pub fn effective_c_phm(&self) -> f64 {
        if self.flags.assume_free_operation {
            0.0
        } else {
            self.c_phm
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskFigures {
    pub rpn: f64,
    pub qcpn: f64,
    pub qcpn_star: f64,
    pub delta_qcpn: f64,
}

pub fn rpn(p: f64, s: f64, d: f64) -> f64 {
    p * s * d
}

/// Expected cost per interval without condition monitoring.
pub fn qcpn(p: f64, d: f64, cd: f64, cu: f64) -> f64 {
    p * (d * cd + (1.0 - d) * cu)
}

/// Expected cost per interval with a detector operating at `rates`.
pub fn qcpn_star(p: f64, rates: &ConfusionRates, cd: f64, cu: f64, cdi: f64, c_phm: f64) -> f64 {
    p * (rates.tpr * cd + rates.fnr * cu + rates.fpr * cdi) + c_phm
}

/// As [`qcpn_star`], with the false-alarm term outside the occurrence probability.
pub fn qcpn_star_unscaled_fp(p: f64, rates: &ConfusionRates, cd: f64, cu: f64, cdi: f64, c_phm: f64) -> f64 {
    p * (rates.tpr * cd + rates.fnr * cu) + rates.fpr * cdi + c_phm
}

/// All figures for one cost set; `delta_qcpn > 0` means monitoring pays off.
pub fn delta_qcpn(costs: &CostSet, rates: &ConfusionRates) -> RiskFigures {
    let d = costs.effective_d();
    let c_phm = costs.effective_c_phm();
    let before = qcpn(costs.p, d, costs.cd, costs.cu);
    let after = if costs.flags.fp_cost_unscaled_by_p {
        qcpn_star_unscaled_fp(costs.p, rates, costs.cd, costs.cu, costs.cdi, c_phm)
    } else {
        qcpn_star(costs.p, rates, costs.cd, costs.cu, costs.cdi, c_phm)
    };
    RiskFigures {
        rpn: rpn(costs.p, costs.s, d),
        qcpn: before,
        qcpn_star: after,
        delta_qcpn: before - after,
    }
}

fn check(scores: &[f64], degraded: &[bool]) -> Result<(), RiskError> {
    if scores.len() != degraded.len() {
        return Err(RiskError::Length {
            scores: scores.len(),
            labels: degraded.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(RiskError::NonFinite(*s));
    }
    if !degraded.iter().any(|d| *d) || degraded.iter().all(|d| *d) {
        return Err(RiskError::OneClass);
    }
    Ok(())
}

/// Counts and rates of flagging `score > threshold` against per-cycle truth.
pub fn confusion_rates(scores: &[f64], degraded: &[bool], threshold: f64) -> Result<(ConfusionRates, Confusion), RiskError> {
    check(scores, degraded)?;
    let c = Confusion::from_flags(&detect_cycles(scores, threshold), degraded);
    Ok((ConfusionRates::from_counts(&c), c))
}

/// Candidate thresholds: -inf, midpoints between consecutive distinct
/// scores, +inf. Every distinct operating point appears exactly once.
pub fn threshold_grid(scores: &[f64]) -> Vec<f64> {
    let distinct = distinct_sorted(scores);
    let mut grid = Vec::with_capacity(distinct.len() + 1);
    grid.push(f64::NEG_INFINITY);
    for w in distinct.windows(2) {
        grid.push(midpoint(w[0], w[1]));
    }
    grid.push(f64::INFINITY);
    grid
}

fn distinct_sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // adjacent floats: rounding may land on b, which would not separate them
    if m >= b {
        a
    } else {
        m
    }
}

/// Confusion counts at every grid threshold, in ascending threshold order.
fn sweep(scores: &[f64], degraded: &[bool]) -> Vec<(f64, Confusion)> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(degraded.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos = degraded.iter().filter(|d| **d).count();
    let total_neg = degraded.len() - total_pos;
    let grid = threshold_grid(scores);
    let mut out = Vec::with_capacity(grid.len());
    // everything below position `i` in `pairs` is not flagged
    let (mut i, mut below_pos, mut below_neg) = (0, 0, 0);
    for t in grid {
        while i < pairs.len() && pairs[i].0 <= t {
            if pairs[i].1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
        out.push((
            t,
            Confusion {
                tp: total_pos - below_pos,
                fp: total_neg - below_neg,
                fn_: below_pos,
                tn: below_neg,
            },
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall over the threshold grid; points with nothing flagged
/// are omitted.
pub fn pr_curve(scores: &[f64], degraded: &[bool]) -> Result<Vec<PrPoint>, RiskError> {
    check(scores, degraded)?;
    Ok(sweep(scores, degraded)
        .into_iter()
        .filter(|(_, c)| c.tp + c.fp > 0)
        .map(|(t, c)| PrPoint {
            threshold: t,
            precision: c.tp as f64 / (c.tp + c.fp) as f64,
            recall: c.tp as f64 / (c.tp + c.fn_) as f64,
        })
        .collect())
}

/// Area under the precision-recall curve as average precision: precision at
/// each operating point weighted by the recall gained there.
pub fn average_precision(scores: &[f64], degraded: &[bool]) -> Result<f64, RiskError> {
    let curve = pr_curve(scores, degraded)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in curve.iter().rev() {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub rates: ConfusionRates,
    pub counts: Confusion,
    pub figures: RiskFigures,
}

/// Cost figures at every grid threshold, ascending.
pub fn delta_qcpn_curve(scores: &[f64], degraded: &[bool], costs: &CostSet) -> Result<Vec<CurvePoint>, RiskError> {
    check(scores, degraded)?;
    Ok(sweep(scores, degraded)
        .into_iter()
        .map(|(threshold, counts)| {
            let rates = ConfusionRates::from_counts(&counts);
            CurvePoint {
                threshold,
                rates,
                counts,
                figures: delta_qcpn(costs, &rates),
            }
        })
        .collect())
}

/// The point with the largest saving; ties go to the largest threshold.
pub fn optimal_threshold(curve: &[CurvePoint]) -> Option<CurvePoint> {
    curve.iter().fold(None, |best: Option<CurvePoint>, p| match best {
        Some(b) if b.figures.delta_qcpn > p.figures.delta_qcpn => Some(b),
        _ => Some(*p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(flatten)]
    pub costs: CostSet,
}

/// A cost file: several scenarios plus the one that drives detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    #[serde(default)]
    pub operating_scenario: Option<String>,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<Scenario>,
}

impl CostFile {
    pub fn parse(text: &str) -> Result<CostFile, RiskError> {
        let f: CostFile = toml::from_str(text).map_err(|e| RiskError::Parse(e.to_string()))?;
        if f.scenarios.is_empty() {
            return Err(RiskError::NoScenarios);
        }
        f.operating()?;
        Ok(f)
    }

    pub fn operating(&self) -> Result<&Scenario, RiskError> {
        match &self.operating_scenario {
            Some(name) => self
                .scenarios
                .iter()
                .find(|s| &s.name == name)
                .ok_or_else(|| RiskError::UnknownScenario(name.clone())),
            None => self.scenarios.first().ok_or(RiskError::NoScenarios),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub name: String,
    pub optimum: CurvePoint,
    /// Whether any threshold gives a positive saving.
    pub cost_effective: bool,
}

pub fn scenario_table(scores: &[f64], degraded: &[bool], scenarios: &[Scenario]) -> Result<Vec<ScenarioResult>, RiskError> {
    scenarios
        .iter()
        .map(|s| {
            let curve = delta_qcpn_curve(scores, degraded, &s.costs)?;
            let optimum = optimal_threshold(&curve).expect("grid is never empty");
            Ok(ScenarioResult {
                name: s.name.clone(),
                cost_effective: optimum.figures.delta_qcpn > 0.0,
                optimum,
            })
        })
        .collect()
}
