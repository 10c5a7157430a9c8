use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepfmea::detect::{project2d, detect_cycles, DEFAULT_K, DEFAULT_TOP_N, DEFAULT_TRAIN_RATIO};
use deepfmea::enrich::{enrich_detection, EnrichedDetection};
use deepfmea::features::compute_feature_matrix;
use deepfmea::ingest::load_dataset;
use deepfmea::model::Id;
use deepfmea::pipeline::{
    attribute_record, default_method, evaluate_scores, fit_method, labels_by_cycle, load_fitted, method_sensors,
    run_pipeline, score_cycles, write_detections, write_evaluation, Evaluation, FittedMethod, PipelineError,
    RunConfig, Stage, StageContext,
};
use deepfmea::risk::CostFile;
use deepfmea::sim::{write_dataset, SimConfig};
use deepfmea::spec::{apply_model_spec, ModelSpec};
use deepfmea::store::Store;

#[derive(Parser)]
#[command(name = "deepfmea", version, about = "FMEA-structured condition monitoring and cost-aware alarm thresholds")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "DEEPFMEA_STORE")]
    store: Option<PathBuf>,
    /// Seed for the train/test split and the simulator.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model definition commands.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Load a dataset directory into the store.
    Ingest {
        #[arg(long)]
        dataset_dir: PathBuf,
        /// Model spec whose dataset section describes the files.
        #[arg(long)]
        model: PathBuf,
    },
    /// Feature matrix commands.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Split the labelled cycles and fit a detection method.
    Fit {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
        ratio: f64,
    },
    /// Attention index per cycle as CSV.
    Score {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        output: OutputArg,
    },
    /// Elements ranked by their share of one cycle's attention index.
    Attribute {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long)]
        cycle: usize,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top: usize,
    },
    /// PR and cost curves over the test split.
    Evaluate {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long)]
        costs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enriched detections at the operating scenario's optimal threshold.
    Report {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long)]
        costs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top: usize,
    },
    /// Full pipeline from dataset to report directory.
    Run {
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        costs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
        ratio: f64,
        /// Cycles before an incident in which a detection still counts.
        #[arg(long, default_value_t = 0)]
        lead_window: usize,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top: usize,
    },
    /// Two principal components of the standardised features as CSV.
    Project2d {
        #[command(flatten)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[command(flatten)]
        output: OutputArg,
    },
    /// Write a synthetic hydraulic-rig dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SimConfig::default().cycles)]
        cycles: usize,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Validate a model spec and store its entities.
    Apply {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Check a model spec without touching a store.
    Check {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Write the bundled hydraulic model spec and cost file.
    Example {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Evaluate virtual sensors on every labelled cycle.
    Compute {
        /// Comma-separated sensor ids; defaults to the monitoring method's inputs.
        #[arg(long, value_delimiter = ',')]
        sensors: Vec<String>,
        #[command(flatten)]
        output: OutputArg,
    },
}

#[derive(Args)]
struct MethodArg {
    /// Detection method id; defaults to the first monitoring method.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct OutputArg {
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

type Result<T> = std::result::Result<T, PipelineError>;

fn open_store(path: &Option<PathBuf>, stage: Stage) -> Result<Store> {
    let path = path.as_ref().ok_or("no store given (use --store or DEEPFMEA_STORE)").stage(stage)?;
    Store::open(path).stage(stage)
}

fn resolve_method(store: &Store, method: &MethodArg, stage: Stage) -> Result<Id> {
    match &method.method {
        Some(m) => Ok(Id::new(m.as_str())),
        None => default_method(&store.snapshot()).ok_or("store defines no monitoring method").stage(stage),
    }
}

fn fitted(store: &Store, method: &MethodArg, stage: Stage) -> Result<FittedMethod> {
    let id = resolve_method(store, method, stage)?;
    load_fitted(store, &id).map_err(|e| PipelineError::new(stage, e))
}

fn split_cycles(store: &Store, fitted: &FittedMethod, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => fitted.split.train.clone(),
        SplitArg::Test => fitted.split.test.clone(),
        SplitArg::All => labels_by_cycle(&store.snapshot()).into_keys().collect(),
    }
}

fn sink(output: &OutputArg) -> io::Result<Box<dyn Write>> {
    Ok(match &output.out {
        Some(path) => Box::new(io::BufWriter::new(fs::File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_costs(path: &Path) -> Result<CostFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("reading {}: {e}", path.display()))
        .stage(Stage::Evaluate)?;
    CostFile::parse(&text).stage(Stage::Evaluate)
}

/// Scores the test split and evaluates it against `costs`.
fn evaluate_test(store: &Store, fitted: &FittedMethod, costs: &CostFile) -> Result<(Vec<deepfmea::detect::ScoreRecord>, Evaluation)> {
    let (_, records) = score_cycles(store, fitted, &fitted.split.test).map_err(|e| PipelineError::new(Stage::Score, e))?;
    let labels = labels_by_cycle(&store.snapshot());
    let degraded: Vec<bool> = records
        .iter()
        .map(|r| labels.get(&r.cycle).is_some_and(|l| l.health.is_degraded()))
        .collect();
    let ai: Vec<f64> = records.iter().map(|r| r.attention_index).collect();
    let eval = evaluate_scores(&ai, &degraded, costs).map_err(|e| PipelineError::new(Stage::Evaluate, e))?;
    Ok((records, eval))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Model(ModelCommand::Apply { spec }) => {
            let spec = ModelSpec::load(&spec).stage(Stage::Model)?;
            let mut store = open_store(&cli.store, Stage::Model)?;
            apply_model_spec(&mut store, &spec).stage(Stage::Model)?;
            println!("applied model {} ({})", spec.name, spec.hash());
        }
        Command::Model(ModelCommand::Check { spec }) => {
            let spec = ModelSpec::load(&spec).stage(Stage::Model)?;
            spec.entities().stage(Stage::Model)?;
            println!(
                "model {} ok: {} elements, {} signals, {} virtual sensors, {} failure modes ({})",
                spec.name,
                spec.elements.len(),
                spec.signals.len(),
                spec.virtual_sensors.len(),
                spec.failure_modes.len(),
                spec.hash()
            );
        }
        Command::Model(ModelCommand::Example { out }) => {
            fs::create_dir_all(&out).stage(Stage::Model)?;
            fs::write(out.join("hydraulic.toml"), deepfmea::HYDRAULIC_SPEC).stage(Stage::Model)?;
            fs::write(out.join("costs.toml"), deepfmea::HYDRAULIC_COSTS).stage(Stage::Model)?;
            println!("wrote {}", out.display());
        }
        Command::Ingest { dataset_dir, model } => {
            let spec = ModelSpec::load(&model).stage(Stage::Model)?;
            let mut store = open_store(&cli.store, Stage::Ingest)?;
            apply_model_spec(&mut store, &spec).stage(Stage::Model)?;
            let counts = load_dataset(&dataset_dir, &spec, &mut store).stage(Stage::Ingest)?;
            println!(
                "ingested {} cycles, {} signals, {} measurements",
                counts.cycles, counts.signals, counts.measurements
            );
        }
        Command::Features(FeaturesCommand::Compute { sensors, output }) => {
            let store = open_store(&cli.store, Stage::Features)?;
            let snap = store.snapshot();
            let sensors: Vec<Id> = if sensors.is_empty() {
                let method = resolve_method(&store, &MethodArg { method: None }, Stage::Features)?;
                method_sensors(&snap, &method).map_err(|e| PipelineError::new(Stage::Features, e))?
            } else {
                sensors.iter().map(|s| Id::new(s.as_str())).collect()
            };
            let cycles: Vec<usize> = labels_by_cycle(&snap).into_keys().collect();
            let fm = compute_feature_matrix(&store, &sensors, &cycles).stage(Stage::Features)?;
            for e in &fm.errors {
                log::warn!("cycle {} sensor {}: {}", e.cycle, e.sensor, e.message);
            }
            fm.write_csv(sink(&output).stage(Stage::Features)?).stage(Stage::Features)?;
        }
        Command::Fit { method, k, ratio } => {
            let store = open_store(&cli.store, Stage::Fit)?;
            let id = resolve_method(&store, &method, Stage::Fit)?;
            let f = fit_method(&store, &id, k, ratio, cli.seed).map_err(|e| PipelineError::new(Stage::Fit, e))?;
            for w in &f.model.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "fitted {} on {} cycles ({} test), {} features retained",
                f.method_id,
                f.model.reference.len(),
                f.split.test.len(),
                f.model.retained.len()
            );
        }
        Command::Score { method, split, output } => {
            let store = open_store(&cli.store, Stage::Score)?;
            let f = fitted(&store, &method, Stage::Score)?;
            let cycles = split_cycles(&store, &f, split);
            let (_, records) = score_cycles(&store, &f, &cycles).map_err(|e| PipelineError::new(Stage::Score, e))?;
            let mut w = csv::Writer::from_writer(sink(&output).stage(Stage::Score)?);
            w.write_record(["cycle", "attention_index", "imputed"]).stage(Stage::Score)?;
            for r in &records {
                w.write_record([r.cycle.to_string(), r.attention_index.to_string(), r.imputed.to_string()])
                    .stage(Stage::Score)?;
            }
            w.flush().stage(Stage::Score)?;
        }
        Command::Attribute { method, cycle, top } => {
            let store = open_store(&cli.store, Stage::Score)?;
            let f = fitted(&store, &method, Stage::Score)?;
            let (_, records) = score_cycles(&store, &f, &[cycle]).map_err(|e| PipelineError::new(Stage::Score, e))?;
            let record = records.first().ok_or(format!("cycle {cycle} not found")).stage(Stage::Score)?;
            let snap = store.snapshot();
            let report = attribute_record(&snap, &f, record, top);
            let hierarchy = snap.hierarchy().map_err(|r| r.to_string()).stage(Stage::Enrich)?;
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["rank", "element_id", "path", "share"]).stage(Stage::Enrich)?;
            for (i, (e, share)) in report.top.iter().enumerate() {
                w.write_record([(i + 1).to_string(), e.to_string(), hierarchy.path(e), share.to_string()])
                    .stage(Stage::Enrich)?;
            }
            w.flush().stage(Stage::Enrich)?;
        }
        Command::Evaluate { method, costs, out } => {
            let costs = load_costs(&costs)?;
            let store = open_store(&cli.store, Stage::Evaluate)?;
            let f = fitted(&store, &method, Stage::Evaluate)?;
            let (_, eval) = evaluate_test(&store, &f, &costs)?;
            write_evaluation(&out, &eval).map_err(|e| PipelineError::new(Stage::Report, e))?;
            println!("AUPRC {:.4}", eval.auprc);
            for s in &eval.scenarios {
                println!(
                    "scenario {}: optimal delta QCPN {:.4} at threshold {}",
                    s.name, s.optimum.figures.delta_qcpn, s.optimum.threshold
                );
            }
        }
        Command::Report { method, costs, out, top } => {
            let costs = load_costs(&costs)?;
            let store = open_store(&cli.store, Stage::Evaluate)?;
            let f = fitted(&store, &method, Stage::Evaluate)?;
            let (records, eval) = evaluate_test(&store, &f, &costs)?;
            let threshold = eval.operating.optimum.threshold;
            let snap = store.snapshot();
            let hierarchy = snap.hierarchy().map_err(|r| r.to_string()).stage(Stage::Enrich)?;
            let failure_modes: Vec<_> = snap.failure_modes().cloned().collect();
            let interventions: Vec<_> = snap.interventions().cloned().collect();
            let ai: Vec<f64> = records.iter().map(|r| r.attention_index).collect();
            let enriched: Vec<EnrichedDetection> = records
                .iter()
                .zip(detect_cycles(&ai, threshold))
                .filter(|(_, flagged)| *flagged)
                .map(|(r, _)| {
                    let report = attribute_record(&snap, &f, r, top);
                    enrich_detection(&report, &hierarchy, &failure_modes, &interventions, top)
                })
                .collect();
            write_evaluation(&out, &eval).map_err(|e| PipelineError::new(Stage::Report, e))?;
            write_detections(&out, &enriched, &labels_by_cycle(&snap), threshold)
                .map_err(|e| PipelineError::new(Stage::Report, e))?;
            let json = serde_json::to_string_pretty(&enriched).stage(Stage::Report)?;
            fs::write(out.join("enriched_detections.json"), json + "\n").stage(Stage::Report)?;
            println!(
                "{} detections at threshold {} (scenario {})",
                enriched.len(),
                threshold,
                eval.operating.name
            );
        }
        Command::Run {
            dataset_dir,
            model,
            costs,
            out,
            method,
            k,
            ratio,
            lead_window,
            top,
        } => {
            let mut config = RunConfig::new(dataset_dir, model, costs, out);
            config.store = cli.store;
            config.method = method.map(Id::new);
            config.seed = cli.seed;
            config.k = k;
            config.ratio = ratio;
            config.lead_window = lead_window;
            config.top_n = top;
            let summary = run_pipeline(&config)?;
            let m = &summary.manifest;
            println!(
                "AUPRC {:.4}; {} detections at threshold {} (scenario {}); {} train / {} test cycles",
                m.auprc, m.detections, m.threshold, m.operating_scenario, m.train_cycles, m.test_cycles
            );
            println!("report written to {}", config.out_dir.display());
        }
        Command::Project2d { method, split, output } => {
            let store = open_store(&cli.store, Stage::Score)?;
            let f = fitted(&store, &method, Stage::Score)?;
            let cycles = split_cycles(&store, &f, split);
            let (fm, _) = score_cycles(&store, &f, &cycles).map_err(|e| PipelineError::new(Stage::Score, e))?;
            let projection = project2d(&f.model, &fm.values).stage(Stage::Report)?;
            let labels = labels_by_cycle(&store.snapshot());
            let mut w = csv::Writer::from_writer(sink(&output).stage(Stage::Report)?);
            w.write_record(["cycle", "pc1", "pc2", "degraded"]).stage(Stage::Report)?;
            for (c, p) in fm.cycles.iter().zip(&projection.points) {
                let degraded = labels.get(c).is_some_and(|l| l.health.is_degraded());
                w.write_record([c.to_string(), p[0].to_string(), p[1].to_string(), degraded.to_string()])
                    .stage(Stage::Report)?;
            }
            w.flush().stage(Stage::Report)?;
        }
        Command::Simulate { out, cycles } => {
            let config = SimConfig {
                cycles,
                seed: cli.seed,
                ..SimConfig::default()
            };
            write_dataset(&out, &config).stage(Stage::Ingest)?;
            println!("wrote {cycles} simulated cycles to {}", out.display());
        }
    }
    Ok(())
}

/// True when output went to a reader that has gone away, as with `| head`.
fn closed_pipe(e: &PipelineError) -> bool {
    let mut source: Option<&(dyn std::error::Error + 'static)> = Some(e.source.as_ref());
    while let Some(s) = source {
        if s.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) {
            return true;
        }
        source = s.source();
    }
    false
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if closed_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e).and_then(std::error::Error::source);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
