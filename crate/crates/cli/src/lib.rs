//! Command implementations behind the `rcdgcn` binary.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use ndarray::Array3;
use rcdgcn::analysis::{self, factor_layout, significant_links};
use rcdgcn::checkpoint::Checkpoint;
use rcdgcn::dataset::{ingest, split_and_normalize, Splits, StateWindow, TrafficData};
use rcdgcn::graph::RoadGraph;
use rcdgcn::model::{GraphContext, Hyper, ModelParams, Variant};
use rcdgcn::rng::sub_seed;
use rcdgcn::synth::{self, IncidentEvent};
use rcdgcn::train::{self, EvalReport, Forecasts};
use rcdgcn::TrainOutcome;
use rcdgcn::Error;

pub use config::RunConfig;

/// Exit status for configuration, usage and input-data problems.
pub const EXIT_INPUT: i32 = 2;
/// Exit status for runtime and training failures.
pub const EXIT_RUNTIME: i32 = 3;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if !e.is_input_error() => EXIT_RUNTIME,
        _ => EXIT_INPUT,
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Graph, raw series and normalized splits loaded from a dataset directory.
pub struct Prepared {
    pub graph: RoadGraph,
    pub raw: TrafficData,
    pub splits: Splits,
    pub incidents: Vec<IncidentEvent>,
}

pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let dir = &cfg.data_dir;
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())).into());
    }
    let graph = RoadGraph::load(dir)?;
    let raw = ingest(dir, &graph)?;
    let splits = split_and_normalize(&raw, cfg.split, cfg.hyper.q, cfg.hyper.horizon)?;
    let inc_path = dir.join("incidents.csv");
    let incidents = if inc_path.exists() {
        synth::read_incidents(&inc_path, &graph)?
    } else {
        Vec::new()
    };
    Ok(Prepared {
        graph,
        raw,
        splits,
        incidents,
    })
}

/// Generates the configured scenario and writes the dataset directory.
pub fn cmd_simulate(cfg: &RunConfig, out: &mut impl Write) -> anyhow::Result<PathBuf> {
    let scenario = cfg.scenario.build(None, sub_seed(cfg.seed, "data"))?;
    let data = synth::generate(&scenario)?;
    let dir = &cfg.data_dir;
    scenario.graph.write(dir)?;
    synth::export_dataset(&data, dir)?;
    synth::write_incidents(&dir.join("incidents.csv"), &scenario.graph, &scenario.incidents)?;
    writeln!(
        out,
        "simulated {} nodes, {} steps, {} incidents, features [{}] -> {}",
        scenario.graph.n(),
        data.steps(),
        scenario.incidents.len(),
        data.feature_names.join(", "),
        dir.display()
    )?;
    Ok(dir.clone())
}

/// Model hyper-parameters completed with dataset shapes and the run seed.
pub fn full_hyper(cfg: &RunConfig, p: &Prepared) -> Hyper {
    Hyper {
        n_nodes: p.graph.n(),
        state_channels: 1,
        feature_width: p.splits.norm.feature_width(),
        seed: cfg.seed,
        ..cfg.hyper.clone()
    }
}

/// Initializes and trains the configured variant.
pub fn train_model(cfg: &RunConfig, p: &Prepared, log: &mut impl Write) -> anyhow::Result<TrainOutcome> {
    let hyper = full_hyper(cfg, p);
    let ctx = GraphContext::new(&p.graph, hyper.hops);
    let init = ModelParams::<f64>::init(cfg.variant, hyper, sub_seed(cfg.seed, "init"))?;
    let tcfg = train::TrainConfig {
        seed: sub_seed(cfg.seed, "shuffle"),
        ..cfg.train.clone()
    };
    let variant = cfg.variant;
    let outcome = train::train(init, &ctx, &p.splits, &tcfg, |r| {
        let _ = writeln!(
            log,
            "{variant} epoch {:>3}  train_mse {:.6}  val_mse {:.6}",
            r.epoch, r.train_mse, r.val_mse
        );
    })?;
    Ok(outcome)
}

pub fn checkpoint_of(outcome: &TrainOutcome) -> Checkpoint<f64> {
    Checkpoint {
        params: outcome.params.clone(),
        meta: vec![
            ("best_epoch".into(), outcome.best_epoch.to_string()),
            ("best_val_mse".into(), format!("{:?}", outcome.best_val_mse)),
        ],
    }
}

/// Trains and writes the checkpoint and `loss_curve.csv`.
pub fn cmd_train(cfg: &RunConfig, checkpoint: &Path, out: &mut impl Write) -> anyhow::Result<TrainOutcome> {
    let p = prepare(cfg)?;
    let outcome = train_model(cfg, &p, out)?;
    checkpoint_of(&outcome).save(checkpoint)?;
    train::write_curve(&cfg.out.join("loss_curve.csv"), &outcome.curve)?;
    writeln!(
        out,
        "trained {} ({} parameters): best epoch {} val_mse {:.6} -> {}",
        cfg.variant,
        outcome.params.param_count(),
        outcome.best_epoch,
        outcome.best_val_mse,
        checkpoint.display()
    )?;
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path, p: &Prepared) -> anyhow::Result<Checkpoint<f64>> {
    let ck = Checkpoint::<f64>::load(path)?;
    let h = &ck.params.hyper;
    if h.n_nodes != p.graph.n() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on {} nodes, dataset has {}",
            path.display(),
            h.n_nodes,
            p.graph.n()
        ))
        .into());
    }
    if ck.params.variant == Variant::Rcdgcn && h.feature_width != p.splits.norm.feature_width() {
        return Err(Error::Config(format!(
            "checkpoint expects {} feature columns, dataset provides {}",
            h.feature_width,
            p.splits.norm.feature_width()
        ))
        .into());
    }
    Ok(ck)
}

/// Test metrics plus the validation MSE on the same windows training used.
pub fn evaluate_checkpoint(cfg: &RunConfig, p: &Prepared, ck: &Checkpoint<f64>) -> anyhow::Result<(EvalReport, f64)> {
    let params = &ck.params;
    let ctx = GraphContext::new(&p.graph, params.hyper.hops);
    let resplit;
    let splits = if params.hyper.q == cfg.hyper.q && params.hyper.horizon == cfg.hyper.horizon {
        &p.splits
    } else {
        resplit = split_and_normalize(&p.raw, cfg.split, params.hyper.q, params.hyper.horizon)?;
        &resplit
    };
    let report = train::evaluate(params, &ctx, &splits.test, &splits.norm, cfg.eval_stride)?;
    let val = train::mean_loss(params, &ctx, &splits.val, cfg.train.val_stride)?;
    Ok((report, val))
}

/// Evaluates each checkpoint, prints a table and writes `eval_<stem>.csv`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], out: &mut impl Write) -> anyhow::Result<Vec<EvalReport>> {
    let p = prepare(cfg)?;
    let mut reports = Vec::new();
    writeln!(out, "{:<14} {:<9} {:>10} {:>10} {:>10} {:>12}", "checkpoint", "variant", "mae_mph", "rmse_norm", "rmse_mph", "val_mse")?;
    for path in checkpoints {
        let ck = load_checkpoint(path, &p)?;
        let (report, val) = evaluate_checkpoint(cfg, &p, &ck)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        let mut rows = report.rows();
        rows.push(("mse_norm".into(), "val".into(), val));
        train::write_metrics(&cfg.out.join(format!("eval_{stem}.csv")), &rows)?;
        writeln!(
            out,
            "{:<14} {:<9} {:>10.4} {:>10.4} {:>10.4} {:>12.6e}",
            stem,
            ck.params.variant.as_str(),
            report.overall.mae_mph,
            report.overall.rmse_norm,
            report.overall.rmse_mph,
            val
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Incidents lying inside the forecastable part of the test split.
pub fn test_incidents(p: &Prepared, fc: &Forecasts, horizon_step: usize) -> Vec<IncidentEvent> {
    let h = horizon_step - 1;
    let (Some(first), Some(last)) = (fc.t0.first(), fc.t0.last()) else {
        return Vec::new();
    };
    let lo = first + fc.q + h;
    let hi = last + fc.q + h;
    p.incidents
        .iter()
        .filter(|e| e.start >= lo && e.end >= 1 && e.end - 1 <= hi)
        .cloned()
        .collect()
}

pub struct AnalysisOutput {
    pub norms: Option<analysis::NormReport>,
    pub links: Option<analysis::SignificantLinks>,
    pub cases: Vec<analysis::CaseRecord>,
}

/// Factor norms, significant links and incident cases for one checkpoint.
pub fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, out: &mut impl Write) -> anyhow::Result<AnalysisOutput> {
    let p = prepare(cfg)?;
    let ck = load_checkpoint(checkpoint, &p)?;
    let params = &ck.params;
    let (q, t) = (params.hyper.q, params.hyper.horizon);
    let ctx = GraphContext::new(&p.graph, params.hyper.hops);
    let ids = p.graph.node_ids();
    let dir = &cfg.out;

    let norms = match params.tab() {
        Some(tab) => {
            let layout = factor_layout(&p.splits.norm);
            let inputs = analysis::attention_inputs(&p.splits.test, q, t, cfg.eval_stride);
            let r = analysis::factor_norms(tab, &layout, &inputs)?;
            analysis::write_norms_matrix(&dir.join("norms_matrix.csv"), &r)?;
            analysis::write_norms_link(&dir.join("norms_link.csv"), &r, ids)?;
            for (f, v) in &r.matrix {
                writeln!(out, "factor {f:<6} squared norm {v:.6}")?;
            }
            Some(r)
        }
        None => {
            writeln!(out, "warning: {} checkpoint has no attention weights; factor norms skipped", params.variant)?;
            None
        }
    };

    let links = if params.variant == Variant::Fcn {
        writeln!(out, "warning: fcn checkpoint has no propagation matrix; significant links skipped")?;
        None
    } else {
        let att = analysis::mean_attention(params, &ctx, &p.splits.test, cfg.eval_stride, cfg.analysis.ring)?;
        let s = significant_links(att.view(), cfg.analysis.percentile)?;
        analysis::write_significant_links(&dir.join("significant_links.csv"), &s, ids)?;
        let names: Vec<&str> = s.flagged.iter().map(|&k| ids[k].as_str()).collect();
        writeln!(out, "significant links (threshold {:.6}): {}", s.threshold, names.join(" "))?;
        Some(s)
    };

    let fc = train::forecast(params, &ctx, &p.splits.test, 1, |_| {})?;
    let h = cfg.analysis.horizon_step - 1;
    let mut cases = Vec::new();
    for inc in test_incidents(&p, &fc, cfg.analysis.horizon_step) {
        let series = analysis::horizon_series(&fc, inc.node, h, &p.splits.norm, p.raw.speeds.view())?;
        let case = analysis::extract_case(&series, &inc, cfg.analysis.margin)?;
        analysis::write_case(&dir.join("cases").join(format!("case_{}_{}.csv", ids[inc.node], inc.start)), &case)?;
        cases.push(case);
    }
    analysis::write_case_summary(&dir.join("cases_summary.csv"), &cases, ids)?;
    writeln!(out, "{} incident cases in the test split -> {}", cases.len(), dir.display())?;
    Ok(AnalysisOutput { norms, links, cases })
}

/// Forecasts the `T` steps after the end of the dataset and writes
/// `predictions.csv` (`step,node_id,speed_mph`).
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, out: &mut impl Write) -> anyhow::Result<Array3<f64>> {
    let p = prepare(cfg)?;
    let ck = load_checkpoint(checkpoint, &p)?;
    let params = &ck.params;
    let (q, t) = (params.hyper.q, params.hyper.horizon);
    let test = &p.splits.test;
    let len = test.len();
    if len < q {
        return Err(Error::InsufficientData(format!("test split has {len} steps, need {q}")).into());
    }
    let n = p.graph.n();
    let w = StateWindow {
        x: test.x.slice(ndarray::s![len - q.., .., ..]).to_owned(),
        z: test.z.slice(ndarray::s![len - q.., .., ..]).to_owned(),
        y: Array3::zeros((t, n, 1)),
        t0: test.start + len - q,
    };
    let ctx = GraphContext::new(&p.graph, params.hyper.hops);
    let pred = params.predict(&ctx, &w)?;
    let speed = &p.splits.norm.state[0];
    let mph = pred.mapv(|u| speed.denormalize(u));
    let first = test.start + len;
    let mut text = String::from("step,node_id,speed_mph\n");
    for h in 0..t {
        for k in 0..n {
            text.push_str(&format!("{},{},{:?}\n", first + h, p.graph.node_ids()[k], mph[[h, k, 0]]));
        }
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join("predictions.csv");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "predicted steps {}..{} for {n} nodes -> {}", first, first + t, path.display())?;
    Ok(mph)
}
