use std::fs;
use std::path::{Path, PathBuf};

use obbstack::clustering::cluster_runs;
use obbstack::eval::{evaluate, format_table};
use obbstack::fusion::{to_run, FusedDetection};
use obbstack::ingest::{
    load_ground_truth, load_run, write_dota_detections, write_ground_truth, write_gt_json, write_run_json,
    DetectionRun, GroundTruth,
};
use obbstack::metalearner::{decompose_weights, score_correlation, CorrelationMatrix, MetaLearner};
use obbstack::pipeline::{self, member_temperatures, prepare_runs, TrainReport};
use obbstack::synth::{outcome_table, run_benchmark, summarize, BenchmarkOutcome, Scenario};
use obbstack::{Method, PipelineConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::provenance::Provenance;
use crate::{AnalyzeArgs, EvalArgs, FuseArgs, OutputFormat, SimulateArgs, TrainMetaArgs};

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_text(path, &text)
}

/// `meta.json` -> `meta.provenance.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("provenance.json")
}

/// Loads member runs in command-line order as models `1..=M`.
fn load_runs(paths: &[PathBuf], cfg: &PipelineConfig) -> CliResult<Vec<DetectionRun>> {
    for p in paths {
        require(p, "run")?;
    }
    Ok(paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_run(p, i + 1, cfg.min_score))
        .collect::<obbstack::Result<Vec<_>>>()?)
}

fn load_gt(path: &Path) -> CliResult<GroundTruth> {
    require(path, "ground truth")?;
    Ok(load_ground_truth(path)?)
}

pub fn train_meta(args: &TrainMetaArgs) -> CliResult<()> {
    let cfg = args.pipeline.resolve()?;
    let runs = load_runs(&args.runs, &cfg)?;
    let gt = load_gt(&args.gt)?;
    let learner = pipeline::train_meta(&runs, &gt, &cfg)?;
    learner.write(&args.out, None)?;

    let report = TrainReport::from_learner(&learner);
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    let mut inputs: Vec<&Path> = args.runs.iter().map(PathBuf::as_path).collect();
    inputs.push(&args.gt);
    Provenance::new("train-meta", &cfg, &inputs)?.write(&sidecar(&args.out))
}

fn cluster_stats(fused: &[FusedDetection], num_models: usize) -> String {
    let mut sizes = vec![0usize; num_models + 1];
    for f in fused {
        sizes[f.provenance.len().min(num_models)] += 1;
    }
    let mut out = format!("fused detections: {}\n", fused.len());
    for (k, n) in sizes.iter().enumerate().skip(1) {
        out.push_str(&format!("  from {k} model(s): {n}\n"));
    }
    out
}

pub fn fuse(args: &FuseArgs) -> CliResult<()> {
    let cfg = args.pipeline.resolve()?;
    let runs = load_runs(&args.runs, &cfg)?;
    let learner = match (cfg.method, &args.meta) {
        (Method::Stacking, Some(path)) => {
            require(path, "meta-learner")?;
            Some(MetaLearner::read(path)?)
        }
        (Method::Stacking, None) => return Err(CliError::Usage("stacking needs --meta".into())),
        (method, Some(_)) => {
            log::warn!("--meta is ignored by the {} method", method.name());
            None
        }
        (_, None) => None,
    };
    let fused = pipeline::fuse(&runs, learner.as_ref(), &cfg)?;
    let run = to_run(&fused, cfg.method.name())?;

    create_dir(&args.out)?;
    if args.format.json() {
        write_run_json(&run, &args.out.join("fused.json"), None)?;
    }
    if args.format.dota() {
        write_dota_detections(&run, &args.out)?;
    }
    print!("{}", cluster_stats(&fused, runs.len()));

    let mut inputs: Vec<&Path> = args.runs.iter().map(PathBuf::as_path).collect();
    if learner.is_some() {
        inputs.extend(args.meta.as_deref());
    }
    Provenance::new("fuse", &cfg, &inputs)?.write(&args.out.join("provenance.json"))
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = args.pipeline.resolve()?;
    require(&args.run, "run")?;
    let run = load_run(&args.run, 1, cfg.min_score)?;
    let gt = load_gt(&args.gt)?;
    let result = evaluate(&run, &gt, &cfg.eval_config())?;
    let name = args.name.clone().unwrap_or_else(|| run.model_name.clone());
    print!("{}", format_table(&[(name.clone(), &result)]));

    if let Some(path) = &args.out {
        #[derive(Serialize)]
        struct Report<'a> {
            name: &'a str,
            #[serde(flatten)]
            result: &'a obbstack::EvalResult,
        }
        write_json(path, &Report { name: &name, result: &result })?;
        Provenance::new("eval", &cfg, &[&args.run, &args.gt])?.write(&sidecar(path))?;
    }
    Ok(())
}

const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];

fn shade(r: f64) -> char {
    SHADES[((r.abs() * 4.0).round() as usize).min(4)]
}

/// Correlation matrix as an aligned text table; undefined entries read "–".
fn heat_table(names: &[String], corr: &CorrelationMatrix) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:width$}", "");
    for n in names {
        out.push_str(&format!(" {n:>width$}"));
    }
    out.push('\n');
    for (name, row) in names.iter().zip(&corr.values) {
        out.push_str(&format!("{name:width$}"));
        for v in row {
            let cell = match v {
                Some(r) => format!("{r:.3} {}", shade(*r)),
                None => "–".to_string(),
            };
            out.push_str(&format!(" {cell:>width$}"));
        }
        out.push('\n');
    }
    out
}

fn correlation_csv(names: &[String], corr: &CorrelationMatrix) -> String {
    let mut out = String::from("model");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(&corr.values) {
        out.push_str(name);
        for v in row {
            out.push(',');
            if let Some(r) = v {
                out.push_str(&r.to_string());
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
struct Decomposition {
    w: Vec<f64>,
    p: Vec<f64>,
    r: Vec<f64>,
    g: Vec<f64>,
}

fn decomposition_table(names: &[String], d: &Decomposition) -> String {
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<6}", "");
    for n in names {
        out.push_str(&format!(" {n:>width$}"));
    }
    out.push('\n');
    for (label, row) in [("w", &d.w), ("r", &d.r), ("p", &d.p), ("g", &d.g)] {
        out.push_str(&format!("{label:<6}"));
        for v in row {
            out.push_str(&format!(" {v:>width$.4}"));
        }
        out.push('\n');
    }
    out
}

fn per_model(values: &Option<Vec<f64>>, m: usize, what: &str) -> CliResult<Option<Vec<f64>>> {
    match values {
        None => Ok(None),
        Some(v) if v.len() != m => Err(CliError::Usage(format!("--{what} needs {m} values, got {}", v.len()))),
        Some(v) if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) => {
            Err(CliError::Usage(format!("--{what} values must be positive")))
        }
        Some(v) => Ok(Some(v.clone())),
    }
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let cfg = args.pipeline.resolve()?;
    let runs = load_runs(&args.runs, &cfg)?;
    let m = runs.len();
    let names: Vec<String> = runs.iter().map(|r| r.model_name.clone()).collect();
    let clusters = cluster_runs(&prepare_runs(&runs, &cfg)?, cfg.iou_thresh)?;
    let corr = score_correlation(&clusters, m);
    println!("Pearson correlation of member scores ({} clusters)", clusters.len());
    print!("{}", heat_table(&names, &corr));

    let temperatures = per_model(&args.temperatures, m, "temperatures")?;
    let redundancy = per_model(&args.redundancy, m, "redundancy")?.unwrap_or_else(|| vec![1.0; m]);
    let mut inputs: Vec<&Path> = args.runs.iter().map(PathBuf::as_path).collect();
    let decomposition = match &args.meta {
        None => None,
        Some(meta) => {
            require(meta, "meta-learner")?;
            inputs.push(meta);
            let learner = MetaLearner::read(meta)?;
            if learner.num_models() != m {
                return Err(CliError::Usage(format!(
                    "meta-learner has {} models but {m} runs were given",
                    learner.num_models()
                )));
            }
            let temps = match (temperatures, &args.gt) {
                (Some(t), _) => t,
                (None, Some(gt_path)) => {
                    let gt = load_gt(gt_path)?;
                    inputs.push(gt_path);
                    member_temperatures(&runs, &gt, &cfg)?.iter().map(|c| c.temperature).collect()
                }
                (None, None) => {
                    return Err(CliError::Usage("decomposition needs --temperatures or --gt".into()));
                }
            };
            let p: Vec<f64> = temps.iter().map(|t| 1.0 / t).collect();
            let g = decompose_weights(&learner.weights, &p, &redundancy)?;
            Some(Decomposition { w: learner.weights.clone(), p, r: redundancy, g })
        }
    };
    if let Some(d) = &decomposition {
        println!("\nweight decomposition w = p ⊙ r ⊙ g");
        print!("{}", decomposition_table(&names, d));
    }

    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_text(&dir.join("correlation.csv"), &correlation_csv(&names, &corr))?;
        #[derive(Serialize)]
        struct Analysis<'a> {
            models: &'a [String],
            correlation: &'a [Vec<Option<f64>>],
            common_clusters: &'a [Vec<usize>],
            #[serde(skip_serializing_if = "Option::is_none")]
            decomposition: Option<&'a Decomposition>,
        }
        write_json(
            &dir.join("analysis.json"),
            &Analysis {
                models: &names,
                correlation: &corr.values,
                common_clusters: &corr.counts,
                decomposition: decomposition.as_ref(),
            },
        )?;
        Provenance::new("analyze", &cfg, &inputs)?.write(&dir.join("provenance.json"))?;
    }
    Ok(())
}

fn write_runs(runs: &[DetectionRun], dir: &Path, format: OutputFormat, dota_dir: &Path) -> CliResult<()> {
    for run in runs {
        if format.json() {
            create_dir(dir)?;
            write_run_json(run, &dir.join(format!("{}.json", run.model_name)), None)?;
        }
        if format.dota() {
            write_dota_detections(run, &dota_dir.join(&run.model_name))?;
        }
    }
    Ok(())
}

fn write_gt(gt: &GroundTruth, stem: &str, dir: &Path, format: OutputFormat) -> CliResult<()> {
    if format.json() {
        write_gt_json(gt, &dir.join(format!("{stem}.json")))?;
    }
    if format.dota() {
        write_ground_truth(gt, &dir.join(format!("{stem}_dota")))?;
    }
    Ok(())
}

fn write_outcome(outcome: &BenchmarkOutcome, dir: &Path, format: OutputFormat) -> CliResult<()> {
    create_dir(dir)?;
    write_runs(&outcome.val_runs, &dir.join("val"), format, &dir.join("val_dota"))?;
    write_runs(&outcome.test_runs, &dir.join("test"), format, &dir.join("test_dota"))?;
    write_gt(&outcome.val_gt, "val_gt", dir, format)?;
    write_gt(&outcome.test_gt, "test_gt", dir, format)?;
    outcome.learner.write(&dir.join("meta.json"), None)?;
    for (name, fused) in &outcome.fused {
        let run = to_run(fused, name)?;
        if format.json() {
            write_run_json(&run, &dir.join(format!("fused_{name}.json")), None)?;
        }
        if format.dota() {
            write_dota_detections(&run, &dir.join(format!("fused_{name}_dota")))?;
        }
    }
    write_text(&dir.join("eval.txt"), &outcome_table(outcome))?;
    write_json(&dir.join("report.json"), &outcome.report)
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    require(&args.scenario, "scenario")?;
    let scenario = Scenario::load(&args.scenario)?;
    scenario.validate()?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => scenario.seeds.clone(),
    };
    create_dir(&args.out)?;
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        log::info!("simulating seed {seed}");
        let outcome = run_benchmark(&scenario, seed)?;
        write_outcome(&outcome, &args.out.join(format!("seed_{seed}")), args.format)?;
        reports.push(outcome.report);
    }
    let summary = summarize(&reports);
    print!("{summary}");
    write_text(&args.out.join("summary.txt"), &summary)?;
    write_json(&args.out.join("summary.json"), &reports)?;
    write_json(&args.out.join("pipeline.json"), &scenario.pipeline)?;

    let mut prov = Provenance::new("simulate", &scenario.pipeline, &[&args.scenario])?;
    if let Some(s) = args.seed {
        prov = prov.with_seed(s);
    }
    prov.write(&args.out.join("provenance.json"))
}
