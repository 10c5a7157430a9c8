//! Turning an attributed detection into something an operator can act on.

use serde::Serialize;

use crate::detect::AttributionReport;
use crate::model::{FailureMode, Hierarchy, Id, Intervention};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElementShare {
    pub element_id: Id,
    pub path: String,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub failure_mode_id: Id,
    pub name: String,
    pub element_id: Id,
    /// Share of the attributed element whose subtree contains the mode.
    pub share: f64,
    pub interventions: Vec<Intervention>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnrichedDetection {
    pub cycle: usize,
    pub attention_index: f64,
    pub top_elements: Vec<ElementShare>,
    pub candidates: Vec<Candidate>,
}

/// Lists the failure modes located at or below the top attributed elements,
/// most strongly attributed first, each with its interventions (diagnostic
/// ones first).
pub fn enrich_detection(
    report: &AttributionReport,
    hierarchy: &Hierarchy,
    failure_modes: &[FailureMode],
    interventions: &[Intervention],
    top_n: usize,
) -> EnrichedDetection {
    let top: Vec<&(Id, f64)> = report.top.iter().take(top_n).collect();
    let top_elements = top
        .iter()
        .map(|(e, share)| ElementShare {
            element_id: e.clone(),
            path: hierarchy.path(e),
            share: *share,
        })
        .collect();

    let mut candidates: Vec<Candidate> = failure_modes
        .iter()
        .filter_map(|fm| {
            let share = top
                .iter()
                .filter(|(e, _)| hierarchy.is_ancestor_or_self(e, &fm.element_id))
                .map(|(_, s)| *s)
                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))?;
            let mut attached: Vec<Intervention> = interventions
                .iter()
                .filter(|i| i.failure_mode_id == fm.id)
                .cloned()
                .collect();
            attached.sort_by(|a, b| (a.kind, &a.id).cmp(&(b.kind, &b.id)));
            Some(Candidate {
                failure_mode_id: fm.id.clone(),
                name: fm.name.clone(),
                element_id: fm.element_id.clone(),
                share,
                interventions: attached,
            })
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.share
            .total_cmp(&a.share)
            .then_with(|| a.failure_mode_id.cmp(&b.failure_mode_id))
    });

    EnrichedDetection {
        cycle: report.cycle,
        attention_index: report.attention_index,
        top_elements,
        candidates,
    }
}
