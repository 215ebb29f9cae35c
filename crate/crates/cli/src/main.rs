//! `bicon`: gradient checks, training runs and sweeps, checkpoint evaluation.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 configuration or usage
//! error, 3 numerical abort. Log verbosity on stderr follows `BICON_LOG`
//! (`error`, `info` or `debug`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bicon::config::{expand_sweep, fnv1a, parse_sweep_axis, RunConfig, SweepPoint};
use bicon::data::{self, emit_report_csv, emit_scatter_svg, MetricRow};
use bicon::evaluation::{self, argmax_rows};
use bicon::gradcheck::{self, Scope};
use bicon::model::Model;
use bicon::trainers::{run_cluster, run_sne, run_supcon, Task, TrainReport};
use bicon::{Error, Matrix, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

const EXIT_GRADCHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

const METRICS: [&str; 4] = ["hungarian", "knn", "probe", "silhouette"];

#[derive(Parser)]
#[command(name = "bicon", version, about = "Divergence-based neighborhood losses: training, evaluation, gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every analytic gradient in a scope against central finite differences.
    Gradcheck {
        /// divergences, kernels, model or end2end
        #[arg(value_parser = parse_scope)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient of components whose name contains this string.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train one configuration, or every point of a sweep grid.
    Run {
        /// sne, cluster or supcon; overrides the task in the config file
        #[arg(value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid axis `key=v1,v2,...`; repeat for a cartesian product.
        #[arg(long)]
        sweep: Vec<String>,
        /// Sweep points trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Matrix file (CSV or binary) or a run config JSON describing the dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated: hungarian, knn, probe, silhouette.
        #[arg(long, value_delimiter = ',', default_value = "knn")]
        metrics: Vec<String>,
        /// Metrics CSV to append to; defaults to eval_metrics.csv beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Neighbors for the knn metric.
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_CONFIG
    }
}

fn fail(e: &Error) -> ExitCode {
    let code = exit_code(e);
    if code == EXIT_NUMERICAL {
        eprintln!("numerical abort: {e}");
    } else {
        eprintln!("error: {e}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BICON_LOG", "error")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Gradcheck {
            scope,
            seed,
            corrupt,
        } => cmd_gradcheck(scope, seed, corrupt.as_deref()),
        Command::Run {
            task,
            config,
            out,
            sweep,
            jobs,
            seed,
        } => cmd_run(task, &config, &out, &sweep, jobs, seed),
        Command::Eval {
            checkpoint,
            dataset,
            metrics,
            out,
            k,
            seed,
        } => cmd_eval(&checkpoint, &dataset, &metrics, out.as_deref(), k, seed),
    }
}

fn cmd_gradcheck(scope: Scope, seed: u64, corrupt: Option<&str>) -> ExitCode {
    let report = match gradcheck::run(scope, seed, corrupt) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    println!("{report}");
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        for c in report.failures() {
            eprintln!(
                "gradient mismatch in {}: relative error {:.3e} at {}",
                c.component, c.worst, c.location
            );
        }
        ExitCode::from(EXIT_GRADCHECK)
    }
}

fn cmd_run(
    task: Option<Task>,
    config: &Path,
    out: &Path,
    sweep: &[String],
    jobs: usize,
    seed: Option<u64>,
) -> ExitCode {
    let points = match plan_runs(task, config, sweep, seed) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    if sweep.is_empty() {
        let point = &points[0];
        return match run_one(&point.config, out) {
            Ok(rows) => {
                print_rows("", &rows);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        };
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => return fail(&Error::Config(format!("cannot start {jobs} workers: {e}"))),
    };
    let results: Vec<Result<Vec<MetricRow>>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| run_one(&p.config, &out.join(&p.name)))
            .collect()
    });
    let mut aggregate = String::from("run,");
    aggregate.push_str(data::METRICS_HEADER);
    aggregate.push('\n');
    let mut code = ExitCode::SUCCESS;
    let mut first_error = None;
    for (point, result) in points.iter().zip(results) {
        match result {
            Ok(rows) => {
                print_rows(&format!("[{}] ", point.name), &rows);
                for r in &rows {
                    aggregate.push_str(&format!("{},{}\n", point.name, data::render_metric_row(r)));
                }
            }
            Err(e) => {
                eprintln!("[{}] failed", point.name);
                if first_error.is_none() {
                    code = fail(&e);
                    first_error = Some(());
                }
            }
        }
    }
    let path = out.join("sweep_metrics.csv");
    if let Err(e) = fs::write(&path, aggregate) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    code
}

fn plan_runs(
    task: Option<Task>,
    config: &Path,
    sweep: &[String],
    seed: Option<u64>,
) -> Result<Vec<SweepPoint>> {
    let mut base = RunConfig::load(config)?;
    if task.is_some() {
        base.task = task;
    }
    if seed.is_some() {
        base.seed = seed;
    }
    base.loss_config()?;
    let axes = sweep
        .iter()
        .map(|s| parse_sweep_axis(s))
        .collect::<Result<Vec<_>>>()?;
    let points = expand_sweep(&base, &axes)?;
    for p in &points {
        p.config.loss_config()?;
        p.config.dataset_spec()?;
    }
    Ok(points)
}

fn print_rows(prefix: &str, rows: &[MetricRow]) {
    for r in rows {
        println!("{prefix}{} {:?}", r.metric, r.value);
    }
}

fn final_rows(report: &TrainReport, hash: u64, seed: u64) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64| MetricRow {
        metric: metric.to_string(),
        value,
        config_hash: hash,
        seed,
    };
    let mut rows = Vec::new();
    if let Some(last) = report.steps.last() {
        rows.push(row("final_loss", last.loss));
    }
    if let Some(snap) = report.snapshots.last() {
        rows.extend(snap.values.iter().map(|(n, v)| row(n, *v)));
    }
    if report.task == Task::Supcon {
        rows.push(row("collapsed", if report.collapsed { 1.0 } else { 0.0 }));
    }
    rows
}

/// Trains one configuration and writes `report.csv`, `metrics.csv`,
/// `model.ckpt`, `config.json` and, for two-dimensional outputs,
/// `scatter.svg` into `out`.
fn run_one(config: &RunConfig, out: &Path) -> Result<Vec<MetricRow>> {
    let lc = config.loss_config()?;
    let data = data::generate(&config.dataset_spec()?)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let x = &data.features;
    let (report, model, points) = match lc.task {
        Task::Sne => {
            let o = run_sne(&lc, x, data.labels.as_deref(), None)?;
            (o.report, o.model, Some(o.embedding))
        }
        Task::Cluster => {
            let o = run_cluster(&lc, x, data.labels.as_deref(), None)?;
            (o.report, Model::ClusterHead(o.head), None)
        }
        Task::Supcon => {
            let o = run_supcon(&lc, x, data.labels()?)?;
            let z = o.encoder.forward(x)?;
            (o.report, Model::Encoder(o.encoder), Some(z))
        }
    };
    log::info!("{} finished after {} steps", lc.task, report.steps.len());
    emit_report_csv(&report, out.join("report.csv"))?;
    model.save(out.join("model.ckpt"))?;
    fs::write(out.join("config.json"), config.canonical()).map_err(|e| io_error(out, e))?;
    if let Some(z) = points.filter(|z| z.ncols() == 2) {
        let labels = data.labels.clone().unwrap_or_else(|| vec![0; z.nrows()]);
        emit_scatter_svg(&z, &labels, out.join("scatter.svg"))?;
    }
    let rows = final_rows(&report, config.hash(), lc.seed);
    let metrics = out.join("metrics.csv");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| io_error(&metrics, e))?;
    }
    data::append_metrics_csv(&metrics, &rows)?;
    Ok(rows)
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    metrics: &[String],
    out: Option<&Path>,
    k: usize,
    seed: u64,
) -> ExitCode {
    if let Some(bad) = metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
        eprintln!(
            "error: unknown metric {bad:?}; valid metrics: {}",
            METRICS.join(", ")
        );
        return ExitCode::from(EXIT_CONFIG);
    }
    let default_out;
    let out = match out {
        Some(p) => p,
        None => {
            default_out = checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("eval_metrics.csv");
            &default_out
        }
    };
    match evaluate(checkpoint, dataset, metrics, k, seed) {
        Ok(rows) => {
            print_rows("", &rows);
            match data::append_metrics_csv(out, &rows) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            }
        }
        Err(e) => fail(&e),
    }
}

/// Features the checkpoint produces for the dataset, plus hard cluster
/// predictions when the checkpoint is a cluster head.
fn represent(model: &Model, x: &Matrix) -> Result<(Matrix, Option<Vec<usize>>)> {
    match model {
        Model::Free(e) => {
            if e.table.nrows() != x.nrows() {
                return Err(Error::Dimension(format!(
                    "embedding table has {} rows, dataset has {}",
                    e.table.nrows(),
                    x.nrows()
                )));
            }
            Ok((e.table.clone(), None))
        }
        Model::Encoder(enc) => Ok((enc.forward(x)?, None)),
        Model::ClusterHead(h) => {
            let phi = h.forward(x)?;
            let pred = argmax_rows(&phi);
            Ok((phi, Some(pred)))
        }
    }
}

fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    metrics: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let ckpt_bytes = fs::read(checkpoint).map_err(|e| io_error(checkpoint, e))?;
    let model = Model::from_bytes(&ckpt_bytes)?;
    let is_config = dataset.extension().is_some_and(|e| e == "json");
    let (data, hash) = if is_config {
        let cfg = RunConfig::load(dataset)?;
        (data::generate(&cfg.dataset_spec()?)?, cfg.hash())
    } else {
        (data::load_matrix(dataset)?, fnv1a(&ckpt_bytes))
    };
    let labels = data.labels()?;
    let (z, pred) = represent(&model, &data.features)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    metrics
        .iter()
        .map(|m| {
            let value = match m.as_str() {
                "hungarian" => {
                    let pred = match &pred {
                        Some(p) => p.clone(),
                        None => evaluation::kmeans(&z, classes, 10, seed)?,
                    };
                    evaluation::hungarian_accuracy(&pred, labels)?
                }
                "knn" => evaluation::holdout_knn_accuracy(&z, labels, k)?,
                "probe" => evaluation::holdout_linear_probe(&z, labels, seed)?,
                "silhouette" => evaluation::silhouette(&z, labels)?,
                _ => unreachable!("metric names validated"),
            };
            Ok(MetricRow {
                metric: m.clone(),
                value,
                config_hash: hash,
                seed,
            })
        })
        .collect()
}
