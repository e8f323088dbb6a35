//! The operations behind each subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adgcrnn_core::cell::Variant;
use adgcrnn_core::dataset::{PreparedData, WindowSample};
use adgcrnn_core::graph::StaticGraph;
use adgcrnn_core::seq2seq::{Adgcrnn, ModelConfig};
use adgcrnn_core::synth::synth_generate;
use adgcrnn_core::train::{
    evaluate_batch, train, EpochRecord, ErrorAccumulator, MetricReport, TrainOutcome, TrainStatus,
};
use adgcrnn_core::{ParamStore, Tensor};

use crate::bundle::{split_anchors, write_bundle, Bundle, Manifest};
use crate::checkpoint;
use crate::config::{thread_count, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{format_value, read_edges, read_values, write_matrix_csv, write_text};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";

pub fn cmd_ingest(cfg: &RunConfig, values: &Path, graph: &Path, out_dir: &Path) -> Result<Manifest> {
    let mut raw = read_values(values)?;
    raw.step_minutes = cfg.resolution.step_minutes;
    let graph = StaticGraph::from_edges(raw.n_nodes(), &read_edges(graph)?)?;
    write_bundle(out_dir, &raw, &graph, &cfg.resolution.to_core(), "ingest", false)
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    let s = &cfg.synth;
    let graph = match &cfg.data.graph {
        Some(path) => StaticGraph::from_edges(s.n_nodes, &read_edges(path)?)?,
        None => StaticGraph::path(s.n_nodes)?,
    };
    let resolution = cfg.resolution.to_core();
    let mut raw = synth_generate(&graph, s.n_steps, &s.to_core(resolution.steps_per_day, cfg.seed))?;
    raw.step_minutes = cfg.resolution.step_minutes;
    write_bundle(out_dir, &raw, &graph, &resolution, "synth", s.regime_switch)
}

fn check_resolution(cfg: &RunConfig, manifest: &Manifest) -> Result<()> {
    let fields = [
        ("steps_per_day", cfg.resolution.steps_per_day, manifest.steps_per_day),
        ("history", cfg.resolution.history, manifest.history),
        ("horizon", cfg.resolution.horizon, manifest.horizon),
    ];
    for (name, want, have) in fields {
        if want != have {
            return Err(CliError::Invalid(format!(
                "config resolution.{name} = {want} but the bundle was built with {have}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,val_rmse,epsilon,iterations\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            format_value(r.train_loss),
            format_value(r.val_mae),
            format_value(r.val_rmse),
            format_value(r.epsilon),
            r.iterations
        );
    }
    out
}

/// Trains from scratch and writes the best checkpoint and the epoch history.
/// A diverged run still writes both before reporting the failure.
pub fn cmd_train(cfg: &RunConfig, bundle_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let bundle = Bundle::load(bundle_dir)?;
    check_resolution(cfg, &bundle.manifest)?;
    let data = bundle.prepare()?;
    let model_cfg = cfg
        .model
        .to_core(bundle.manifest.n_nodes, cfg.resolution.history, cfg.resolution.horizon);
    let (model, mut params) = Adgcrnn::init(model_cfg, &bundle.graph, cfg.seed)?;
    log::info!(
        "training variant {} on {} nodes, {} training windows",
        model_cfg.variant,
        model_cfg.n_nodes,
        data.anchors.train.len()
    );
    let outcome = train(&model, &mut params, &data, &cfg.train.to_core(cfg.seed), |r| {
        log::info!(
            "epoch {:>4}  loss {:.5}  val MAE {:.4}  RMSE {:.4}  eps {:.4}",
            r.epoch,
            r.train_loss,
            r.val_mae,
            r.val_rmse,
            r.epsilon
        );
    })?;
    fs::create_dir_all(out_dir).map_err(CliError::write(out_dir))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let history = out_dir.join(HISTORY_FILE);
    checkpoint::save(&checkpoint, &model_cfg, &params)?;
    write_text(&history, &history_csv(&outcome.history))?;
    if let TrainStatus::Diverged { epoch, .. } = outcome.status {
        return Err(CliError::Diverged { epoch });
    }
    Ok(TrainSummary {
        variant: model_cfg.variant,
        outcome,
        checkpoint,
        history,
    })
}

/// A checkpoint bound to the bundle it is evaluated on.
pub struct Loaded {
    pub bundle: Bundle,
    pub data: PreparedData,
    pub model: Adgcrnn,
    pub params: ParamStore,
}

pub fn load_model(cfg: Option<&RunConfig>, bundle_dir: &Path, checkpoint_path: &Path) -> Result<Loaded> {
    let (stored, params) = checkpoint::load(checkpoint_path)?;
    let bundle = Bundle::load(bundle_dir)?;
    let m = &bundle.manifest;
    let expected = match cfg {
        Some(cfg) => {
            check_resolution(cfg, m)?;
            cfg.model.to_core(m.n_nodes, m.history, m.horizon)
        }
        None => ModelConfig {
            n_nodes: m.n_nodes,
            history: m.history,
            horizon: m.horizon,
            ..stored
        },
    };
    checkpoint::check_compatible(&stored, &expected)?;
    let data = bundle.prepare()?;
    let model = Adgcrnn::from_params(stored, &bundle.graph, &params)?;
    Ok(Loaded {
        bundle,
        data,
        model,
        params,
    })
}

/// `[T, N]` forecasts keyed by anchor.
pub type Forecasts = Vec<(usize, Tensor)>;

/// Evaluates `anchors` in batches spread over `threads` workers. Per-batch
/// sums are merged in anchor order, so the result does not depend on the
/// thread count.
pub fn evaluate_parallel(
    loaded: &Loaded,
    anchors: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<(MetricReport, Forecasts)> {
    let batches: Vec<&[usize]> = anchors.chunks(batch_size.max(1)).collect();
    let per_worker = batches.len().div_ceil(threads.max(1)).max(1);
    let run = |group: &[&[usize]]| -> Result<Vec<(ErrorAccumulator, Forecasts)>> {
        group
            .iter()
            .map(|batch| {
                let mut forecasts = Vec::with_capacity(batch.len());
                let acc = evaluate_batch(&loaded.model, &loaded.params, &loaded.data, batch, &mut |a, f| {
                    forecasts.push((a, f.clone()))
                })?;
                Ok((acc, forecasts))
            })
            .collect::<adgcrnn_core::Result<_>>()
            .map_err(CliError::from)
    };
    let results: Vec<Result<Vec<(ErrorAccumulator, Forecasts)>>> = if threads <= 1 {
        vec![run(&batches)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batches
                .chunks(per_worker)
                .map(|group| scope.spawn(move || run(group)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut total = ErrorAccumulator::new(loaded.model.config.horizon);
    let mut forecasts = Vec::with_capacity(anchors.len());
    for group in results {
        for (acc, f) in group? {
            total.merge(&acc);
            forecasts.extend(f);
        }
    }
    Ok((total.report(), forecasts))
}

pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("horizon,mae,rmse\n");
    for (h, (mae, rmse)) in report.horizon_mae.iter().zip(&report.horizon_rmse).enumerate() {
        let _ = writeln!(out, "{},{},{}", h + 1, format_value(*mae), format_value(*rmse));
    }
    let _ = writeln!(out, "all,{},{}", format_value(report.mae), format_value(report.rmse));
    out
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub metrics: PathBuf,
    pub predictions: Option<PathBuf>,
}

pub struct EvalRequest<'a> {
    pub config: Option<&'a RunConfig>,
    pub bundle: &'a Path,
    pub checkpoint: &'a Path,
    pub split: &'a str,
    pub out_dir: &'a Path,
    pub write_predictions: bool,
}

/// Autoregressive evaluation of one split; writes `metrics_<split>.csv` and
/// optionally `predictions_<split>.csv`.
pub fn cmd_eval(req: &EvalRequest) -> Result<EvalSummary> {
    let loaded = load_model(req.config, req.bundle, req.checkpoint)?;
    let anchors = split_anchors(&loaded.data, req.split)?;
    let batch_size = req.config.map_or(64, |c| c.train.eval_batch_size);
    let (report, forecasts) = evaluate_parallel(&loaded, &anchors, batch_size, thread_count()?)?;
    fs::create_dir_all(req.out_dir).map_err(CliError::write(req.out_dir))?;
    let metrics = req.out_dir.join(format!("metrics_{}.csv", req.split));
    write_text(&metrics, &metrics_csv(&report))?;
    let predictions = if req.write_predictions {
        let path = req.out_dir.join(format!("predictions_{}.csv", req.split));
        write_text(&path, &predictions_csv(&forecasts, loaded.model.config.n_nodes))?;
        Some(path)
    } else {
        None
    };
    Ok(EvalSummary {
        report,
        metrics,
        predictions,
    })
}

fn node_header(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("node_{i}")).collect()
}

/// One row per (anchor, horizon step) with one column per node.
pub fn predictions_csv(forecasts: &[(usize, Tensor)], n_nodes: usize) -> String {
    let mut out = format!("anchor,horizon,{}\n", node_header(n_nodes).join(","));
    for (anchor, f) in forecasts {
        for (h, row) in f.data().chunks(n_nodes).enumerate() {
            let values: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
            let _ = writeln!(out, "{anchor},{},{}", h + 1, values.join(","));
        }
    }
    out
}

/// Inputs of the window anchored at `t`; unlike a training window the
/// future need not exist, so `t` may be the last step of the series.
pub fn input_window(data: &PreparedData, t: usize) -> Result<WindowSample> {
    let r = &data.resolution;
    let n_steps = data.series.n_steps();
    if t < r.first_anchor() {
        return Err(CliError::Invalid(format!(
            "anchor {t} has insufficient history: the earliest valid anchor is {} (7 x {} - 1)",
            r.first_anchor(),
            r.steps_per_day
        )));
    }
    if t >= n_steps {
        return Err(CliError::Invalid(format!(
            "anchor {t} is beyond the last step {}",
            n_steps - 1
        )));
    }
    let n = data.n_nodes();
    let rows = |start: usize| {
        let values = data.series.values.data()[start * n..(start + r.history) * n].to_vec();
        Tensor::new(vec![r.history, n], values)
    };
    Ok(WindowSample {
        x_current: rows(t + 1 - r.history)?,
        x_day: rows(t + 1 - r.steps_per_day)?,
        x_week: rows(t + 1 - r.week_stride())?,
        y: Tensor::zeros(&[r.horizon, n]),
        y_mask: Tensor::zeros(&[r.horizon, n]),
        anchor: t,
    })
}

/// De-normalized `[T, N]` forecast from anchor `t`, written to
/// `forecast_<t>.csv`.
pub fn cmd_predict(
    config: Option<&RunConfig>,
    bundle: &Path,
    checkpoint_path: &Path,
    anchor: usize,
    out_dir: &Path,
) -> Result<(Tensor, PathBuf)> {
    let loaded = load_model(config, bundle, checkpoint_path)?;
    let sample = input_window(&loaded.data, anchor)?;
    let forecast = loaded
        .data
        .stats
        .invert(&loaded.model.predict(&loaded.params, &sample)?);
    fs::create_dir_all(out_dir).map_err(CliError::write(out_dir))?;
    let path = out_dir.join(format!("forecast_{anchor}.csv"));
    write_matrix_csv(&path, Some(&node_header(loaded.model.config.n_nodes)), &forecast)?;
    Ok((forecast, path))
}

/// One metrics file reduced to its summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub horizons: usize,
    pub mae: f64,
    pub rmse: f64,
}

/// `label=path`, or a bare path labelled by its parent directory.
fn split_input(input: &str) -> (String, PathBuf) {
    if let Some((label, path)) = input.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(input);
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map_or_else(|| input.to_string(), |s| s.to_string_lossy().into_owned());
    (label, path)
}

pub fn read_metrics(label: String, path: &Path) -> Result<ReportRow> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| CliError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["horizon", "mae", "rmse"] {
        return Err(CliError::Format {
            path: path.into(),
            message: "expected the header horizon,mae,rmse".into(),
        });
    }
    let mut horizons = 0;
    let mut summary = None;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| CliError::Parse {
                    path: path.into(),
                    line,
                    message: "expected a number".into(),
                })
        };
        if &record[0] == "all" {
            summary = Some((number(1)?, number(2)?));
        } else {
            horizons += 1;
        }
    }
    let (mae, rmse) = summary.ok_or_else(|| CliError::Format {
        path: path.into(),
        message: "missing the `all` summary row".into(),
    })?;
    Ok(ReportRow {
        label,
        horizons,
        mae,
        rmse,
    })
}

/// Collects the summary rows of several metrics files into one
/// `variant,mae,rmse` table, in input order.
pub fn cmd_report(inputs: &[String], out: Option<&Path>) -> Result<String> {
    if inputs.is_empty() {
        return Err(CliError::Invalid("report needs at least one metrics file".into()));
    }
    let rows = inputs
        .iter()
        .map(|i| {
            let (label, path) = split_input(i);
            read_metrics(label, &path)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(odd) = rows.iter().find(|r| r.horizons != rows[0].horizons) {
        return Err(CliError::Invalid(format!(
            "incompatible horizons: {} has {}, {} has {}",
            rows[0].label, rows[0].horizons, odd.label, odd.horizons
        )));
    }
    let mut text = String::from("variant,mae,rmse\n");
    for r in &rows {
        let _ = writeln!(text, "{},{},{}", r.label, format_value(r.mae), format_value(r.rmse));
    }
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(CliError::write(dir))?;
        }
        write_text(path, &text)?;
    }
    Ok(text)
}
