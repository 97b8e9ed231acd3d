//! `pillarmamba` command-line tool. Every successful run prints a JSON
//! report on stdout; failures print a JSON error on stderr and exit 1, and
//! usage errors exit 2.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use pillarmamba::config::{load_config, RunConfig};
use pillarmamba::data_io::{generate_scene, load_cloud, load_labels, load_manifest, save_weights};
use pillarmamba::model::PillarMamba;
use pillarmamba::pillar::GridSpec;
use pillarmamba::pipeline::{self, ScanForm};
use pillarmamba::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pillarmamba", version, about = "Pillar BEV detection with selective state-space scans")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scene work; results keep manifest order.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Also write the run report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Run configuration JSON; the built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormArg {
    Recurrent,
    Parallel,
    Conv,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes: clouds, labels and a manifest.
    Gen {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
    },
    /// Run the detector on every manifest scene and write detections.
    Forward {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Trained weights; seeded initialization when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every block.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Random shapes per operator.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Overfit one scene with plain gradient descent and save the weights.
    TrainToy {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Dataset manifest holding the scene; a scene is generated from
        /// the seed when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Scene name inside the manifest; the first scene by default.
        #[arg(long)]
        scene_name: Option<String>,
        /// Defaults to `train.steps` of the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP_R40 per class of a detections directory.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics JSON path; `<dets>/metrics.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the scan forms and the backbone with and without CSG.
    Bench {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum, default_value_t = FormArg::All)]
        form: FormArg,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Directory for `bench.json` and `bench.csv`.
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
    /// Scan-order neighbor distances and empty runs on an occupancy grid.
    DiagnoseScan {
        /// Grid extent as `XxY`, for example `64x64`.
        #[arg(long)]
        grid: String,
        /// Occupancy text file; every cell occupied when omitted.
        #[arg(long)]
        occupancy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    Defaults,
}

#[derive(Serialize)]
struct RunReport {
    command: &'static str,
    config_digest: Option<String>,
    seed: Option<u64>,
    wall_time_s: f64,
    outputs: Vec<PathBuf>,
    metrics: Value,
}

struct Outcome {
    config: Option<RunConfig>,
    outputs: Vec<PathBuf>,
    metrics: Value,
    /// Runs whose checks fail still report, then exit 1.
    failed: Option<String>,
}

fn resolve_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => load_config(p)?,
        None => RunConfig::with_grid(GridSpec::default()),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("grid must look like 64x64, got {s:?}"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let x = a.trim().parse().map_err(|_| bad())?;
    let y = b.trim().parse().map_err(|_| bad())?;
    Ok((x, y))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let g = &cli.global;
    let ok = |config, outputs, metrics| Outcome {
        config: Some(config),
        outputs,
        metrics,
        failed: None,
    };
    match &cli.command {
        Command::Gen { cfg, out, scenes } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let (manifest, files) = pipeline::generate_dataset(&cfg, out, *scenes, cfg.seed)?;
            info!("wrote {} scenes to {}", scenes, manifest.display());
            Ok(ok(cfg, files, json!({ "scenes": scenes })))
        }
        Command::Forward {
            cfg,
            manifest,
            weights,
            out,
        } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let files = pipeline::run_forward(&cfg, manifest, weights.as_deref(), out, cfg.seed, g.workers)?;
            Ok(ok(cfg, files.clone(), json!({ "scenes": files.len() })))
        }
        Command::Gradcheck { cfg, cases } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let summary = pipeline::gradcheck_suite(&cfg, *cases, cfg.seed)?;
            let per_op: Vec<Value> = summary
                .worst_by_op()
                .into_iter()
                .map(|(op, worst, n)| json!({ "op": op, "cases": n, "max_rel_error": worst }))
                .collect();
            let failed = summary.entries.iter().filter(|e| !e.passed).count();
            let metrics = json!({
                "tolerance": summary.tolerance,
                "passed": summary.passed,
                "failed_cases": failed,
                "ops": per_op,
            });
            Ok(Outcome {
                config: Some(cfg),
                outputs: vec![],
                metrics,
                failed: (!summary.passed).then(|| format!("{failed} gradient-check cases exceed the tolerance")),
            })
        }
        Command::TrainToy {
            cfg,
            scene,
            scene_name,
            steps,
            out,
        } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let (cloud, boxes) = match scene {
                Some(m) => {
                    let ds = load_manifest(m)?;
                    let entry = match scene_name {
                        Some(n) => ds.manifest.scenes.iter().find(|s| &s.name == n),
                        None => ds.manifest.scenes.first(),
                    }
                    .ok_or_else(|| Error::Config(format!("scene not found in {}", m.display())))?;
                    (load_cloud(&ds.cloud_path(entry))?, load_labels(&ds.labels_path(entry))?)
                }
                None => generate_scene(&cfg.scene, &cfg.grid, pipeline::scene_seed(cfg.seed, 0))?,
            };
            let steps = steps.unwrap_or(cfg.train.steps);
            let (model, store) = PillarMamba::init::<f32>(&cfg, cfg.seed)?;
            let mut log = String::from("step,loss,heatmap,regression,grad_norm,learning_rate\n");
            let outcome = pipeline::train_toy(&model, store, &cloud, &boxes, &cfg.train, steps, |r| {
                let lr = pipeline::learning_rate(&cfg.train, r.step, steps);
                log.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.step,
                    r.loss,
                    r.heatmap,
                    r.regression,
                    r.grad_norm.map_or(String::new(), |n| n.to_string()),
                    if r.step < steps { lr.to_string() } else { String::new() }
                ));
            })?;
            save_weights(out, &outcome.store)?;
            let loss_path = out.with_extension("losses.csv");
            write_text(&loss_path, &log)?;
            let metrics = json!({
                "steps": steps,
                "initial_loss": outcome.initial_loss(),
                "final_loss": outcome.final_loss(),
                "loss_ratio": outcome.final_loss() / outcome.initial_loss(),
                "top_bev_iou": outcome.top_iou,
                "detections": outcome.detections.len(),
                "train_seconds": outcome.seconds,
            });
            Ok(ok(cfg, vec![out.clone(), loss_path], metrics))
        }
        Command::Eval {
            cfg,
            dets,
            manifest,
            out,
        } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let metrics = pipeline::run_eval(&cfg, manifest, dets, g.workers)?;
            let path = out.clone().unwrap_or_else(|| dets.join("metrics.json"));
            write_json(&path, &metrics)?;
            let summary = json!({
                "mean_ap_r40": metrics.mean_ap_r40,
                "ap_r40": metrics.classes.iter().map(|(c, m)| (c.name(), m.ap_r40)).collect::<std::collections::BTreeMap<_, _>>(),
            });
            Ok(ok(cfg, vec![path], summary))
        }
        Command::Bench { cfg, form, repeat, out } => {
            let cfg = resolve_config(cfg, g.seed)?;
            let forms: Vec<ScanForm> = match form {
                FormArg::Recurrent => vec![ScanForm::Recurrent],
                FormArg::Parallel => vec![ScanForm::Parallel],
                FormArg::Conv => vec![ScanForm::Conv],
                FormArg::All => ScanForm::ALL.to_vec(),
            };
            let report = pipeline::bench(&cfg, &forms, *repeat, cfg.seed)?;
            let json_path = out.join("bench.json");
            let csv_path = out.join("bench.csv");
            write_json(&json_path, &report)?;
            write_text(&csv_path, &report.to_csv()?)?;
            let mean = |n: &str| report.timing(n).map(|t| t.mean_ms);
            let metrics = json!({
                "digest_stable": report.digest_stable,
                "scan_max_deviation": report.scan_max_deviation,
                "scan_mean_ms": forms.iter().map(|f| (f.name(), mean(f.name()))).collect::<std::collections::BTreeMap<_, _>>(),
                "backbone_csg_mean_ms": mean("backbone_csg"),
                "backbone_no_csg_mean_ms": mean("backbone_no_csg"),
                "flops": to_value(&report.flops),
            });
            let failed = (!report.digest_stable).then(|| "timed outputs changed between runs".to_string());
            Ok(Outcome {
                config: Some(cfg),
                outputs: vec![json_path, csv_path],
                metrics,
                failed,
            })
        }
        Command::DiagnoseScan { grid, occupancy, out } => {
            let (x, y) = parse_grid(grid)?;
            let occ = match occupancy {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    Some(pipeline::parse_occupancy(p, &text, x, y)?)
                }
                None => None,
            };
            let report = pipeline::diagnose(x, y, occ.as_deref())?;
            let mut outputs = vec![];
            if let Some(p) = out {
                write_json(p, &report)?;
                outputs.push(p.clone());
            }
            Ok(Outcome {
                config: None,
                outputs,
                metrics: to_value(&report),
                failed: None,
            })
        }
        Command::Defaults => {
            let cfg = resolve_config(&ConfigArg { config: None }, g.seed)?;
            let metrics = to_value(&cfg);
            Ok(ok(cfg, vec![], metrics))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen { .. } => "gen",
        Command::Forward { .. } => "forward",
        Command::Gradcheck { .. } => "gradcheck",
        Command::TrainToy { .. } => "train-toy",
        Command::Eval { .. } => "eval",
        Command::Bench { .. } => "bench",
        Command::DiagnoseScan { .. } => "diagnose-scan",
        Command::Defaults => "defaults",
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Contract { .. } => "contract",
        Error::Config(_) => "config",
        Error::Format { .. } => "format",
        Error::UnknownClass { .. } => "unknown_class",
        Error::Scene(_) => "scene",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn fail(command: &str, kind: &str, message: &str) -> ExitCode {
    let body = json!({ "error": { "command": command, "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PILLARMAMBA_LOG", "info")).init();
    let name = command_name(&cli.command);
    let start = Instant::now();
    match run(&cli) {
        Ok(outcome) => {
            let report = RunReport {
                command: name,
                config_digest: outcome.config.as_ref().map(RunConfig::digest),
                seed: outcome.config.as_ref().map(|c| c.seed),
                wall_time_s: start.elapsed().as_secs_f64(),
                outputs: outcome.outputs,
                metrics: outcome.metrics,
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            // a closed stdout (for example `| head`) is not a failure
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            if let Some(p) = &cli.global.report {
                if let Err(e) = write_text(p, &format!("{text}\n")) {
                    return fail(name, error_kind(&e), &e.to_string());
                }
            }
            match outcome.failed {
                Some(msg) => fail(name, "check", &msg),
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => fail(name, error_kind(&e), &e.to_string()),
    }
}
