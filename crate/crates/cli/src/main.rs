//! Single binary with subcommands for dataset synthesis, training,
//! evaluation, verification suites, and scene-graph generation.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 runtime/training failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use drnet_core::data::{
    load_dataset, save_dataset, synth_generate, SyntheticSpec, DATASET_FORMAT_VERSION,
};
use drnet_core::drnet::{
    load_checkpoint, save_checkpoint, train, DrNetConfig, FullModel, LossMode, ModelDims,
    TrainHyper,
};
use drnet_core::error::Error;
use drnet_core::eval::{
    generate_scene_graph, gt_instances, gt_scene_graph, predicate_entropy_stats, recall_at_k,
    scene_graph_similarity, TaskSetting,
};
use drnet_core::pipeline::recognize_dataset;
use drnet_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "drnet", version, about = "Triplet recognition with unrolled CRF inference")]
struct Cli {
    /// Seed for anything stochastic in the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-image stages; 1 keeps runs bit-reproducible
    /// (results are identical for any value, given the ordered reduction).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// File format version to emit/accept.
    #[arg(long, global = true, default_value_t = 1)]
    format_version: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (plus its generating potentials).
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model under the task settings.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
    /// Generate scene graphs from model predictions.
    Sg(SgArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of object categories.
    #[arg(long)]
    n: usize,
    /// Number of predicates.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    images: usize,
    #[arg(long, default_value_t = 3.0)]
    potential_scale: f64,
    #[arg(long, default_value_t = 2.0)]
    class_separation: f64,
    #[arg(long, default_value_t = 16)]
    d_a: usize,
    #[arg(long, default_value_t = 16)]
    d_e: usize,
    /// Objects per image as "lo-hi".
    #[arg(long, default_value = "4-6")]
    objects: String,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the generating potentials (JSON).
    #[arg(long)]
    potentials_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of inference units (T).
    #[arg(long, default_value_t = 8)]
    units: usize,
    /// Share one weight set across units.
    #[arg(long)]
    share: bool,
    /// Enforce the transpose symmetry constraints.
    #[arg(long)]
    symmetry: bool,
    #[arg(long, value_parser = parse_loss_mode, default_value = "final")]
    loss_mode: LossMode,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    /// Keep relational tables at zero: the unary-only baseline.
    #[arg(long)]
    freeze_relational: bool,
    /// Unary/feature pretraining epochs before joint training.
    #[arg(long, default_value_t = 3)]
    unary_pretrain: usize,
    #[arg(long, default_value_t = 32)]
    d_r: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSONL trace file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// predicate, union_box, two_boxes, or all.
    #[arg(long, default_value = "all")]
    setting: String,
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// IoU threshold, or a comma list for a sweep.
    #[arg(long, default_value = "0.5")]
    iou: String,
    /// Metric report JSON path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Prediction file (JSONL, one ranked array per image).
    #[arg(long)]
    predictions_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// oracle, gradient, metrics, or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Deliberately corrupt one comparison per suite (test hook).
    #[arg(long, hide = true)]
    inject_perturbation: bool,
}

#[derive(Args)]
struct SgArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Minimum prediction score for an edge.
    #[arg(long, default_value_t = 0.05)]
    score_floor: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also score each graph against the ground truth.
    #[arg(long)]
    truth: bool,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    match s {
        "final" | "final_unit" => Ok(LossMode::FinalUnit),
        "all" | "all_units" => Ok(LossMode::AllUnits),
        other => Err(format!("unknown loss mode {other:?} (use final|all)")),
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure { code: 2, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

/// Errors from core keep their natural class: training failures are
/// runtime (3), everything else is a config/usage problem (2).
fn classify(e: Error) -> Failure {
    match e {
        Error::Training { .. } => Failure::runtime(e),
        _ => Failure::usage(e),
    }
}

fn parse_objects(text: &str) -> Result<(usize, usize), Failure> {
    let (lo, hi) = text
        .split_once('-')
        .ok_or_else(|| Failure::usage(format!("--objects expects \"lo-hi\", got {text:?}")))?;
    let lo = lo.parse().map_err(|e| Failure::usage(format!("--objects: {e}")))?;
    let hi = hi.parse().map_err(|e| Failure::usage(format!("--objects: {e}")))?;
    Ok((lo, hi))
}

fn check_format_version(v: u32) -> Result<(), Failure> {
    if v != DATASET_FORMAT_VERSION {
        return Err(Failure::usage(format!(
            "this build reads/writes format version {DATASET_FORMAT_VERSION}, got {v}"
        )));
    }
    Ok(())
}

fn cmd_synth(global: &Globals, args: &SynthArgs) -> Result<(), Failure> {
    let objects = parse_objects(&args.objects)?;
    let spec = SyntheticSpec {
        n_categories: args.n,
        n_predicates: args.k,
        d_a: args.d_a,
        d_e: args.d_e,
        class_separation: args.class_separation,
        potential_scale: args.potential_scale,
        images: args.images,
        objects_per_image: objects,
        seed: global.seed,
    };
    let config = json!({
        "command": "synth",
        "seed": global.seed,
        "threads": global.threads,
        "format_version": global.format_version,
        "spec": spec,
        "out": args.out,
    });
    let dataset = synth_generate(&spec).map_err(classify)?;
    let mut header = dataset.header(&spec);
    header.config = config.clone();
    save_dataset(&header, &dataset.records, &args.out).map_err(Failure::runtime)?;
    if let Some(path) = &args.potentials_out {
        let text = serde_json::to_string(&json!({
            "format_version": DATASET_FORMAT_VERSION,
            "kind": "potentials",
            "label_space": dataset.label_space,
            "potentials": dataset.potentials,
        }))
        .map_err(Failure::runtime)?;
        std::fs::write(path, text).map_err(Failure::runtime)?;
    }
    let stats = predicate_entropy_stats(&dataset.records).map_err(classify)?;
    println!(
        "{}",
        json!({
            "config": config,
            "images": dataset.records.len(),
            "instances": dataset.instance_count(),
            "marginal_entropy": stats.marginal_entropy,
            "conditional_entropy": stats.conditional_entropy,
        })
    );
    Ok(())
}

fn cmd_train(global: &Globals, args: &TrainArgs) -> Result<(), Failure> {
    let (header, records) = load_dataset(&args.data).map_err(classify)?;
    let config = DrNetConfig {
        units: args.units,
        share_weights: args.share,
        enforce_symmetry: args.symmetry,
        loss_mode: args.loss_mode,
    };
    let dims = ModelDims {
        d_a: header.d_a,
        d_e: header.d_e,
        d_r: args.d_r,
        hidden: args.hidden,
        mask_resolution: 32,
    };
    let hyper = TrainHyper {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: global.seed,
        momentum: args.momentum,
        freeze_relational: args.freeze_relational,
        unary_pretrain_epochs: args.unary_pretrain,
    };
    let run_config = json!({
        "command": "train",
        "seed": global.seed,
        "threads": global.threads,
        "format_version": global.format_version,
        "data": args.data,
        "net": config,
        "dims": dims,
        "hyper": hyper,
        "out": args.out,
    });
    let mut model =
        FullModel::new(header.label_space.clone(), dims, config, global.seed).map_err(classify)?;
    let stats = train(&mut model, &records, &hyper).map_err(classify)?;
    save_checkpoint(&model, &args.out).map_err(Failure::runtime)?;
    if let Some(path) = &args.trace {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(Failure::runtime)?);
        writeln!(out, "{}", json!({"kind": "training_trace", "config": run_config}))
            .map_err(Failure::runtime)?;
        for s in &stats {
            writeln!(out, "{}", serde_json::to_string(s).map_err(Failure::runtime)?)
                .map_err(Failure::runtime)?;
        }
    }
    println!(
        "{}",
        json!({
            "config": run_config,
            "epochs_run": stats.len(),
            "final": stats.last(),
        })
    );
    Ok(())
}

fn cmd_eval(global: &Globals, args: &EvalArgs) -> Result<(), Failure> {
    let (header, records) = load_dataset(&args.data).map_err(classify)?;
    let model = load_checkpoint(&args.model).map_err(classify)?;
    if model.label_space != header.label_space {
        return Err(Failure::usage("model and dataset label spaces differ"));
    }
    let thresholds: Vec<f64> = args
        .iou
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Failure::usage(format!("--iou: {e}"))))
        .collect::<Result<_, _>>()?;
    let settings: Vec<TaskSetting> = if args.setting == "all" {
        vec![
            TaskSetting::PredicateRecognition,
            TaskSetting::UnionBoxDetection,
            TaskSetting::TwoBoxesDetection,
        ]
    } else {
        vec![TaskSetting::parse(&args.setting).map_err(classify)?]
    };
    let run_config = json!({
        "command": "eval",
        "seed": global.seed,
        "threads": global.threads,
        "format_version": global.format_version,
        "data": args.data,
        "model": args.model,
        "setting": args.setting,
        "k": args.k,
        "iou": thresholds,
    });

    let gts: Vec<_> = records.iter().map(gt_instances).collect();
    // Predicate recognition runs on the given pairs; the detection settings
    // rank predictions over all enumerated pairs.
    let mut gt_pair_predictions = None;
    let mut all_pair_predictions = None;
    let mut results = Vec::new();
    for setting in &settings {
        let preds = match setting {
            TaskSetting::PredicateRecognition => {
                if gt_pair_predictions.is_none() {
                    gt_pair_predictions = Some(
                        recognize_dataset(&records, &model, None, args.k, true, global.threads)
                            .map_err(classify)?,
                    );
                }
                gt_pair_predictions.as_ref().unwrap()
            }
            _ => {
                if all_pair_predictions.is_none() {
                    all_pair_predictions = Some(
                        recognize_dataset(&records, &model, None, args.k, false, global.threads)
                            .map_err(classify)?,
                    );
                }
                all_pair_predictions.as_ref().unwrap()
            }
        };
        for thr in &thresholds {
            let mut report = recall_at_k(preds, &gts, args.k, *setting, *thr).map_err(classify)?;
            report.per_image.clear(); // keep the report compact
            results.push(report);
        }
    }
    if let Some(path) = &args.predictions_out {
        use std::io::Write;
        let preds = match all_pair_predictions.as_ref() {
            Some(p) => p,
            None => gt_pair_predictions.as_ref().unwrap(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(Failure::runtime)?);
        writeln!(out, "{}", json!({"kind": "predictions", "config": run_config}))
            .map_err(Failure::runtime)?;
        for (record, preds) in records.iter().zip(preds) {
            writeln!(
                out,
                "{}",
                json!({"image_id": record.image_id, "predictions": preds})
            )
            .map_err(Failure::runtime)?;
        }
    }
    let report_json = json!({ "config": run_config, "results": results });
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report_json).map_err(Failure::runtime)?)
            .map_err(Failure::runtime)?;
    }
    println!("{report_json}");
    Ok(())
}

fn cmd_verify(global: &Globals, args: &VerifyArgs) -> Result<(), Failure> {
    let suite = Suite::parse(&args.suite).map_err(classify)?;
    let summary = run_suite(suite, args.inject_perturbation);
    let run_config = json!({
        "command": "verify",
        "seed": global.seed,
        "threads": global.threads,
        "format_version": global.format_version,
        "suite": suite,
    });
    println!("{}", json!({ "config": run_config, "summary": summary }));
    if summary.all_passed {
        Ok(())
    } else {
        let failed: Vec<&str> = summary
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::runtime(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_sg(global: &Globals, args: &SgArgs) -> Result<(), Failure> {
    let (header, records) = load_dataset(&args.data).map_err(classify)?;
    let model = load_checkpoint(&args.model).map_err(classify)?;
    if model.label_space != header.label_space {
        return Err(Failure::usage("model and dataset label spaces differ"));
    }
    let run_config = json!({
        "command": "sg",
        "seed": global.seed,
        "threads": global.threads,
        "format_version": global.format_version,
        "data": args.data,
        "model": args.model,
        "score_floor": args.score_floor,
        "truth": args.truth,
    });
    let predictions =
        recognize_dataset(&records, &model, None, args.top_k, false, global.threads)
            .map_err(classify)?;
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(Failure::runtime)?);
    writeln!(out, "{}", json!({"kind": "scene_graphs", "config": run_config}))
        .map_err(Failure::runtime)?;
    let mut similarity_sum = 0.0;
    for (record, preds) in records.iter().zip(&predictions) {
        let graph = generate_scene_graph(preds, args.score_floor);
        let mut line = json!({"image_id": record.image_id, "graph": graph});
        if args.truth {
            let sim = scene_graph_similarity(&graph, &gt_scene_graph(record), 0.5);
            similarity_sum += sim;
            line["similarity"] = json!(sim);
        }
        writeln!(out, "{line}").map_err(Failure::runtime)?;
    }
    let mut summary = json!({ "config": run_config, "images": records.len() });
    if args.truth && !records.is_empty() {
        summary["average_similarity"] = json!(similarity_sum / records.len() as f64);
    }
    println!("{summary}");
    Ok(())
}

struct Globals {
    seed: u64,
    threads: usize,
    format_version: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let global =
        Globals { seed: cli.seed, threads: cli.threads, format_version: cli.format_version };
    let result = check_format_version(global.format_version).and_then(|()| match &cli.command {
        Command::Synth(args) => cmd_synth(&global, args),
        Command::Train(args) => cmd_train(&global, args),
        Command::Eval(args) => cmd_eval(&global, args),
        Command::Verify(args) => cmd_verify(&global, args),
        Command::Sg(args) => cmd_sg(&global, args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
