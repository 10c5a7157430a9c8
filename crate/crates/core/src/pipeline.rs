//! Stage functions shared by the command-line tool, and the full
//! ingest → features → fit → score → evaluate → enrich run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{
    attribute, detect_cycles, fit_monitor, reconcile, score, split_cycles, AttributionReport, MonitorModel,
    ScoreRecord, Split,
};
use crate::enrich::{enrich_detection, EnrichedDetection};
use crate::features::{compute_feature_matrix, FeatureMatrix};
use crate::ingest::{load_dataset, CycleLabel};
use crate::model::{DetectionKind, Id};
use crate::report::{bar_chart, line_chart};
use crate::risk::{average_precision, delta_qcpn_curve, pr_curve, scenario_table, CostFile, CurvePoint, PrPoint, ScenarioResult};
use crate::spec::{apply_model_spec, ModelSpec};
use crate::store::{Snapshot, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Model,
    Ingest,
    Features,
    Fit,
    Score,
    Evaluate,
    Enrich,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Model => "model",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Fit => "fit",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
            Stage::Enrich => "enrich",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<BoxError>) -> Self {
        PipelineError {
            stage,
            source: source.into(),
        }
    }
}

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<BoxError>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// The monitoring method used when none is named: the first by id.
pub fn default_method(snap: &Snapshot) -> Option<Id> {
    snap.detection_methods()
        .filter(|m| m.kind == DetectionKind::Monitoring)
        .map(|m| m.id.clone())
        .min()
}

/// Virtual sensors a method consumes.
pub fn method_sensors(snap: &Snapshot, method: &Id) -> Result<Vec<Id>, BoxError> {
    let m = snap
        .detection_method(method)
        .ok_or_else(|| format!("unknown detection method {method}"))?;
    if m.input_virtual_sensor_ids.is_empty() {
        return Err(format!("detection method {method} lists no virtual sensors").into());
    }
    Ok(m.input_virtual_sensor_ids.clone())
}

/// Cycle labels by cycle index.
pub fn labels_by_cycle(snap: &Snapshot) -> BTreeMap<usize, CycleLabel> {
    snap.cycle_labels().map(|l| (l.cycle_index, l.clone())).collect()
}

/// A detector together with the data split it was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMethod {
    pub method_id: Id,
    pub model_spec_hash: String,
    pub split: Split,
    pub model: MonitorModel,
}

fn fitted_path(store: &Store, method: &Id) -> PathBuf {
    store.models_dir().join(format!("{method}.json"))
}

pub fn save_fitted(store: &Store, fitted: &FittedMethod) -> Result<(), BoxError> {
    let path = fitted_path(store, &fitted.method_id);
    let text = serde_json::to_string(fitted)?;
    crate::store::write_atomic(&path, text.as_bytes())?;
    Ok(())
}

pub fn load_fitted(store: &Store, method: &Id) -> Result<FittedMethod, BoxError> {
    let path = fitted_path(store, method);
    let text = fs::read_to_string(&path).map_err(|e| format!("no fitted model for {method} ({}): {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Splits the labelled cycles and fits on the training part of `features`.
pub fn fit_from_features(
    snap: &Snapshot,
    method: &Id,
    features: &FeatureMatrix,
    k: usize,
    ratio: f64,
    seed: u64,
) -> Result<FittedMethod, BoxError> {
    let labels: Vec<CycleLabel> = labels_by_cycle(snap).into_values().collect();
    let split = split_cycles(&labels, ratio, seed, k)?;
    let model = fit_monitor(&features.select(&split.train), k)?;
    Ok(FittedMethod {
        method_id: method.clone(),
        model_spec_hash: features.provenance.clone(),
        split,
        model,
    })
}

/// Computes training features, fits and stores the model.
pub fn fit_method(store: &Store, method: &Id, k: usize, ratio: f64, seed: u64) -> Result<FittedMethod, BoxError> {
    let snap = store.snapshot();
    let sensors = method_sensors(&snap, method)?;
    let labels: Vec<CycleLabel> = labels_by_cycle(&snap).into_values().collect();
    let split = split_cycles(&labels, ratio, seed, k)?;
    let features = compute_feature_matrix(store, &sensors, &split.train)?;
    let fitted = fit_from_features(&snap, method, &features, k, ratio, seed)?;
    save_fitted(store, &fitted)?;
    Ok(fitted)
}

pub fn score_cycles(store: &Store, fitted: &FittedMethod, cycles: &[usize]) -> Result<(FeatureMatrix, Vec<ScoreRecord>), BoxError> {
    let features = compute_feature_matrix(store, &fitted.model.feature_ids, cycles)?;
    let records = score(&fitted.model, &features)?;
    Ok((features, records))
}

/// Attribution of one scored cycle using the element links in the store.
pub fn attribute_record(snap: &Snapshot, fitted: &FittedMethod, record: &ScoreRecord, top_n: usize) -> AttributionReport {
    let sensor_elements: BTreeMap<Id, Vec<Id>> = snap
        .virtual_sensors()
        .map(|vs| (vs.id.clone(), vs.element_ids.clone()))
        .collect();
    attribute(&fitted.model, record, &sensor_elements, top_n)
}

/// Everything computed from the test-set scores and a cost file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub auprc: f64,
    pub pr: Vec<PrPoint>,
    pub curves: Vec<(String, Vec<CurvePoint>)>,
    pub scenarios: Vec<ScenarioResult>,
    pub operating: ScenarioResult,
}

pub fn evaluate_scores(scores: &[f64], degraded: &[bool], costs: &CostFile) -> Result<Evaluation, BoxError> {
    let pr = pr_curve(scores, degraded)?;
    let auprc = average_precision(scores, degraded)?;
    let curves = costs
        .scenarios
        .iter()
        .map(|s| Ok((s.name.clone(), delta_qcpn_curve(scores, degraded, &s.costs)?)))
        .collect::<Result<Vec<_>, BoxError>>()?;
    let scenarios = scenario_table(scores, degraded, &costs.scenarios)?;
    let name = &costs.operating()?.name;
    let operating = scenarios
        .iter()
        .find(|s| &s.name == name)
        .cloned()
        .expect("operating scenario is in the table");
    Ok(Evaluation {
        auprc,
        pr,
        curves,
        scenarios,
        operating,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, BoxError> {
    Ok(csv::Writer::from_path(path)?)
}

/// Writes pr_curve.csv, delta_qcpn_curve.csv, scenario_summary.csv and their
/// charts. Returns the file names written.
pub fn write_evaluation(out: &Path, eval: &Evaluation) -> Result<Vec<String>, BoxError> {
    fs::create_dir_all(out)?;
    let mut w = csv_writer(&out.join("pr_curve.csv"))?;
    w.write_record(["threshold", "precision", "recall"])?;
    for p in &eval.pr {
        w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("delta_qcpn_curve.csv"))?;
    let mut header = vec!["threshold".to_string(), "tpr".to_string(), "fpr".to_string()];
    header.extend(eval.curves.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    if let Some((_, first)) = eval.curves.first() {
        for (i, p) in first.iter().enumerate() {
            let mut rec = vec![p.threshold.to_string(), p.rates.tpr.to_string(), p.rates.fpr.to_string()];
            rec.extend(eval.curves.iter().map(|(_, c)| c[i].figures.delta_qcpn.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("scenario_summary.csv"))?;
    w.write_record([
        "scenario",
        "threshold",
        "delta_qcpn",
        "qcpn",
        "qcpn_star",
        "rpn",
        "tpr",
        "fpr",
        "fnr",
        "tp",
        "fp",
        "fn",
        "tn",
        "cost_effective",
    ])?;
    for s in &eval.scenarios {
        let o = &s.optimum;
        w.write_record([
            s.name.clone(),
            o.threshold.to_string(),
            o.figures.delta_qcpn.to_string(),
            o.figures.qcpn.to_string(),
            o.figures.qcpn_star.to_string(),
            o.figures.rpn.to_string(),
            o.rates.tpr.to_string(),
            o.rates.fpr.to_string(),
            o.rates.fnr.to_string(),
            o.counts.tp.to_string(),
            o.counts.fp.to_string(),
            o.counts.fn_.to_string(),
            o.counts.tn.to_string(),
            s.cost_effective.to_string(),
        ])?;
    }
    w.flush()?;

    let pr_svg = line_chart(
        "Precision-recall of the attention index",
        "recall",
        "precision",
        &[("test set".to_string(), eval.pr.iter().map(|p| (p.recall, p.precision)).collect())],
    );
    fs::write(out.join("pr_curve.svg"), pr_svg)?;
    let delta_svg = line_chart(
        "Expected cost reduction by threshold",
        "threshold",
        "delta QCPN",
        &eval
            .curves
            .iter()
            .map(|(n, c)| (n.clone(), c.iter().map(|p| (p.threshold, p.figures.delta_qcpn)).collect()))
            .collect::<Vec<_>>(),
    );
    fs::write(out.join("delta_qcpn_curve.svg"), delta_svg)?;
    Ok(["pr_curve.csv", "delta_qcpn_curve.csv", "scenario_summary.csv", "pr_curve.svg", "delta_qcpn_curve.svg"]
        .map(String::from)
        .to_vec())
}

/// Writes detections.csv, attributions.csv and a bar chart of the strongest
/// detection. Returns the file names written.
pub fn write_detections(
    out: &Path,
    enriched: &[EnrichedDetection],
    labels: &BTreeMap<usize, CycleLabel>,
    threshold: f64,
) -> Result<Vec<String>, BoxError> {
    fs::create_dir_all(out)?;
    let mut w = csv_writer(&out.join("detections.csv"))?;
    w.write_record([
        "cycle",
        "attention_index",
        "threshold",
        "degraded",
        "labelled_modes",
        "top_element",
        "candidate_modes",
        "first_intervention",
    ])?;
    for e in enriched {
        let label = labels.get(&e.cycle);
        let modes = label
            .map(|l| l.health.failure_modes().iter().map(Id::as_str).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        w.write_record([
            e.cycle.to_string(),
            e.attention_index.to_string(),
            threshold.to_string(),
            label.is_some_and(|l| l.health.is_degraded()).to_string(),
            modes,
            e.top_elements.first().map(|t| t.path.clone()).unwrap_or_default(),
            e.candidates.iter().map(|c| c.failure_mode_id.as_str()).collect::<Vec<_>>().join(";"),
            e.candidates
                .first()
                .and_then(|c| c.interventions.first())
                .map(|i| i.id.to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("attributions.csv"))?;
    w.write_record(["cycle", "rank", "element_id", "path", "share"])?;
    for e in enriched {
        for (rank, t) in e.top_elements.iter().enumerate() {
            w.write_record([
                e.cycle.to_string(),
                (rank + 1).to_string(),
                t.element_id.to_string(),
                t.path.clone(),
                t.share.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let strongest = enriched
        .iter()
        .max_by(|a, b| a.attention_index.total_cmp(&b.attention_index).then(b.cycle.cmp(&a.cycle)));
    let (title, bars) = match strongest {
        Some(e) => (
            format!("Top element contributions, cycle {}", e.cycle),
            e.top_elements.iter().map(|t| (t.path.clone(), t.share)).collect(),
        ),
        None => ("No detections".to_string(), Vec::new()),
    };
    fs::write(out.join("top_elements.svg"), bar_chart(&title, "share of attention index", &bars))?;
    Ok(["detections.csv", "attributions.csv", "top_elements.svg"].map(String::from).to_vec())
}

/// Settings of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub model_spec: PathBuf,
    pub costs: PathBuf,
    pub out_dir: PathBuf,
    /// Store to ingest into; a temporary one when absent.
    pub store: Option<PathBuf>,
    pub method: Option<Id>,
    pub seed: u64,
    pub k: usize,
    pub ratio: f64,
    pub lead_window: usize,
    pub top_n: usize,
}

impl RunConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, model_spec: impl Into<PathBuf>, costs: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_dir: dataset_dir.into(),
            model_spec: model_spec.into(),
            costs: costs.into(),
            out_dir: out_dir.into(),
            store: None,
            method: None,
            seed: 0,
            k: crate::detect::DEFAULT_K,
            ratio: crate::detect::DEFAULT_TRAIN_RATIO,
            lead_window: 0,
            top_n: crate::detect::DEFAULT_TOP_N,
        }
    }
}

/// Run parameters and a digest of every output file; contains nothing that
/// varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_spec_hash: String,
    pub method: Id,
    pub seed: u64,
    pub k: usize,
    pub ratio: f64,
    pub lead_window: usize,
    pub top_n: usize,
    pub operating_scenario: String,
    /// Written as text because it may be infinite.
    pub threshold: String,
    pub auprc: f64,
    pub train_cycles: usize,
    pub test_cycles: usize,
    pub detections: usize,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub evaluation: Evaluation,
    /// Test-set scores with their degradation labels, ascending by cycle.
    pub scores: Vec<(ScoreRecord, bool)>,
    /// Attribution of every test cycle, same order as `scores`.
    pub attributions: Vec<AttributionReport>,
    pub enriched: Vec<EnrichedDetection>,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn partial_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!(".{name}.partial"))
}

/// Runs every stage and writes the report directory. Outputs are assembled
/// next to `out_dir` and moved into place only when every stage succeeded.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    let partial = partial_dir(&config.out_dir);
    if partial.exists() {
        fs::remove_dir_all(&partial).stage(Stage::Report)?;
    }
    fs::create_dir_all(&partial).stage(Stage::Report)?;
    let result = run_into(config, &partial);
    match result {
        Ok(summary) => {
            if config.out_dir.exists() {
                fs::remove_dir_all(&config.out_dir).stage(Stage::Report)?;
            }
            fs::rename(&partial, &config.out_dir).stage(Stage::Report)?;
            Ok(summary)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&partial);
            Err(e)
        }
    }
}

fn run_into(config: &RunConfig, out: &Path) -> Result<RunSummary, PipelineError> {
    let spec = ModelSpec::load(&config.model_spec).stage(Stage::Model)?;
    let temp_store;
    let store_dir = match &config.store {
        Some(dir) => dir.clone(),
        None => {
            temp_store = tempfile::tempdir().stage(Stage::Model)?;
            temp_store.path().to_path_buf()
        }
    };
    let mut store = Store::open(&store_dir).stage(Stage::Model)?;
    apply_model_spec(&mut store, &spec).stage(Stage::Model)?;
    log::info!("model {} applied ({})", spec.name, spec.hash());

    let counts = load_dataset(&config.dataset_dir, &spec, &mut store).stage(Stage::Ingest)?;
    log::info!("ingested {} cycles x {} signals", counts.cycles, counts.signals);

    let snap = store.snapshot();
    let method = match &config.method {
        Some(m) => m.clone(),
        None => default_method(&snap).ok_or("model defines no monitoring method").stage(Stage::Features)?,
    };
    let sensors = method_sensors(&snap, &method).map_err(|e| PipelineError::new(Stage::Features, e))?;
    let labels = labels_by_cycle(&snap);
    let split = split_cycles(&labels.values().cloned().collect::<Vec<_>>(), config.ratio, config.seed, config.k)
        .stage(Stage::Fit)?;
    let mut cycles = split.train.clone();
    cycles.extend(&split.test);
    let features = compute_feature_matrix(&store, &sensors, &cycles).stage(Stage::Features)?;
    log::info!("features: {} cycles x {} sensors, {} failed cells", features.n_rows(), features.n_cols(), features.errors.len());

    let fitted = fit_from_features(&snap, &method, &features, config.k, config.ratio, config.seed)
        .map_err(|e| PipelineError::new(Stage::Fit, e))?;
    save_fitted(&store, &fitted).map_err(|e| PipelineError::new(Stage::Fit, e))?;

    let test = features.select(&fitted.split.test);
    let records = score(&fitted.model, &test).stage(Stage::Score)?;
    let degraded: Vec<bool> = records
        .iter()
        .map(|r| labels.get(&r.cycle).is_some_and(|l| l.health.is_degraded()))
        .collect();
    let ai: Vec<f64> = records.iter().map(|r| r.attention_index).collect();

    let cost_text = fs::read_to_string(&config.costs)
        .map_err(|e| format!("reading {}: {e}", config.costs.display()))
        .stage(Stage::Evaluate)?;
    let costs = CostFile::parse(&cost_text).stage(Stage::Evaluate)?;
    let evaluation = evaluate_scores(&ai, &degraded, &costs).map_err(|e| PipelineError::new(Stage::Evaluate, e))?;
    let threshold = evaluation.operating.optimum.threshold;

    let flags = detect_cycles(&ai, threshold);
    let hierarchy = snap
        .hierarchy()
        .map_err(|r| r.to_string())
        .stage(Stage::Enrich)?;
    let failure_modes: Vec<_> = snap.failure_modes().cloned().collect();
    let interventions: Vec<_> = snap.interventions().cloned().collect();
    let attributions: Vec<AttributionReport> = records
        .iter()
        .map(|r| attribute_record(&snap, &fitted, r, config.top_n))
        .collect();
    let enriched: Vec<EnrichedDetection> = attributions
        .iter()
        .zip(&flags)
        .filter(|(_, f)| **f)
        .map(|(a, _)| enrich_detection(a, &hierarchy, &failure_modes, &interventions, config.top_n))
        .collect();

    let mut files: Vec<String> = Vec::new();
    files.extend(write_evaluation(out, &evaluation).map_err(|e| PipelineError::new(Stage::Report, e))?);
    files.extend(write_detections(out, &enriched, &labels, threshold).map_err(|e| PipelineError::new(Stage::Report, e))?);
    write_scores(out, &records, &degraded).map_err(|e| PipelineError::new(Stage::Report, e))?;
    files.push("scores.csv".into());
    let incidents: Vec<_> = snap.incidents().cloned().collect();
    let detections: Vec<(usize, bool)> = records.iter().map(|r| r.cycle).zip(flags.iter().copied()).collect();
    let rec = reconcile(&detections, &incidents, config.lead_window);
    write_incidents(out, &rec.incidents).map_err(|e| PipelineError::new(Stage::Report, e))?;
    files.push("incidents.csv".into());
    let enriched_json = serde_json::to_string_pretty(&enriched).stage(Stage::Report)?;
    fs::write(out.join("enriched_detections.json"), enriched_json + "\n").stage(Stage::Report)?;
    files.push("enriched_detections.json".into());

    let mut digests = BTreeMap::new();
    for f in &files {
        digests.insert(f.clone(), sha256_file(&out.join(f)).stage(Stage::Report)?);
    }
    let manifest = Manifest {
        model_spec_hash: spec.hash(),
        method,
        seed: config.seed,
        k: config.k,
        ratio: config.ratio,
        lead_window: config.lead_window,
        top_n: config.top_n,
        operating_scenario: evaluation.operating.name.clone(),
        threshold: threshold.to_string(),
        auprc: evaluation.auprc,
        train_cycles: fitted.split.train.len(),
        test_cycles: fitted.split.test.len(),
        detections: enriched.len(),
        files: digests,
    };
    let text = serde_json::to_string_pretty(&manifest).stage(Stage::Report)?;
    fs::write(out.join("manifest.json"), text + "\n").stage(Stage::Report)?;

    Ok(RunSummary {
        manifest,
        evaluation,
        scores: records.into_iter().zip(degraded).collect(),
        attributions,
        enriched,
    })
}

pub fn write_scores(out: &Path, records: &[ScoreRecord], degraded: &[bool]) -> Result<(), BoxError> {
    let mut w = csv_writer(&out.join("scores.csv"))?;
    w.write_record(["cycle", "attention_index", "imputed", "degraded"])?;
    for (r, d) in records.iter().zip(degraded) {
        w.write_record([
            r.cycle.to_string(),
            r.attention_index.to_string(),
            r.imputed.to_string(),
            d.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_incidents(out: &Path, incidents: &[crate::model::FailureIncident]) -> Result<(), BoxError> {
    let mut f = fs::File::create(out.join("incidents.csv"))?;
    writeln!(f, "id,failure_mode,first,last,status")?;
    for i in incidents {
        let status = serde_json::to_value(i.status)?;
        writeln!(
            f,
            "{},{},{},{},{}",
            i.id,
            i.failure_mode_id,
            i.first(),
            i.last(),
            status.as_str().unwrap_or_default()
        )?;
    }
    Ok(())
}
