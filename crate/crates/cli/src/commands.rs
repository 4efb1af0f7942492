//! Subcommand implementations. Each reads its inputs, writes its outputs into
//! `--out` with write-then-rename, and records the resolved configuration.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use tracing::{info, warn};

use counterfact_core::dataio::{
    impute_dataset, load_dataset, positivity_check, save_dataset, split_patients, write_atomic, zscore_apply,
    zscore_fit, Dataset,
};
use counterfact_core::evalkit::{
    evaluate, export_representations, reconstruction_probe, summarize_seeds, write_horizon_csv, write_summary_csv,
    EvalReport, OracleData, ProbeReport, ProbeRun,
};
use counterfact_core::inference::default_plans;
use counterfact_core::numkit::{streams, RngStream};
use counterfact_core::seqmodel::{read_checkpoint, write_checkpoint};
use counterfact_core::training::{train, write_metrics_csv};
use counterfact_core::tumorsim::{
    confounding_correlation, load_truth, save_truth, simulate_cohort, SimCohortConfig, SimTruth, TRUTH_FILE,
};
use counterfact_service::api::{AttributeRequest, HistoryInput, PlanSpec, PredictRequest};
use counterfact_service::{router, serve_until, AppState, LoadedModel};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{Cli, Command};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POSITIVITY_FILE: &str = "positivity.json";
pub const SPLITS_DIR: &str = "splits";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const HORIZON_CSV: &str = "horizon_rmse.csv";
pub const COUNTERFACTUAL_CSV: &str = "counterfactual_rmse.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const ATTRIBUTION_FILE: &str = "attribution.json";
pub const PROBE_REPORT_FILE: &str = "probe_report.json";
pub const PROBE_CURVES_FILE: &str = "probe_curves.csv";
pub const REPRESENTATIONS_FILE: &str = "representations.csv";

pub fn dispatch(cli: &Cli, cfg: RunConfig) -> Result<()> {
    match &cli.command {
        Command::Simulate { gammas } => simulate(cli, cfg, gammas),
        Command::Train { data } => train_cmd(cli, cfg, data.as_deref()),
        Command::Evaluate {
            checkpoints,
            data,
            labels,
        } => evaluate_cmd(cli, cfg, checkpoints, data.as_deref(), labels),
        Command::Predict {
            checkpoint,
            data,
            patient,
            origin,
            plan,
        } => {
            let sel = Selection::resolve(&cfg, checkpoint, data, patient, origin, plan)?;
            predict_cmd(cli, cfg, sel)
        }
        Command::Attribute {
            checkpoint,
            data,
            patient,
            origin,
            plan,
        } => {
            let sel = Selection::resolve(&cfg, checkpoint, data, patient, origin, plan)?;
            attribute_cmd(cli, cfg, sel)
        }
        Command::Probe {
            unbalanced,
            balanced,
            data,
        } => probe_cmd(cli, cfg, unbalanced.as_deref(), balanced.as_deref(), data.as_deref()),
        Command::ExportRepr { checkpoint, data } => export_cmd(cli, cfg, checkpoint.as_deref(), data.as_deref()),
        Command::Serve {
            checkpoint,
            models_dir,
            host,
            port,
            cors,
        } => serve_cmd(cli, cfg, checkpoint.as_deref(), models_dir.as_deref(), host.as_deref(), *port, cors),
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{}` needs --out DIR", cli.command.name())))
}

fn pick_path(flag: Option<&Path>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or [run] config key)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Absolute form of `p`, resolving symlinks of its longest existing prefix.
fn resolve_path(p: &Path) -> Result<PathBuf> {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map_err(|e| CliError::io(".", e))?.join(p)
    };
    let mut existing = abs.as_path();
    let mut rest = Vec::new();
    while !existing.exists() {
        match (existing.parent(), existing.file_name()) {
            (Some(parent), Some(name)) => {
                rest.push(name.to_os_string());
                existing = parent;
            }
            _ => break,
        }
    }
    let mut out = fs::canonicalize(existing).map_err(|e| CliError::io(existing, e))?;
    out.extend(rest.iter().rev());
    Ok(out)
}

/// Refuse to write into (or below) an input directory, then create `out`.
fn ensure_separate(out: &Path, input: &Path) -> Result<()> {
    let o = resolve_path(out)?;
    let i = fs::canonicalize(input).map_err(|e| CliError::io(input, e))?;
    if o.starts_with(&i) {
        return Err(CliError::Usage(format!(
            "output directory {} lies inside input directory {}",
            out.display(),
            input.display()
        )));
    }
    create_dir(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(counterfact_core::Error::from)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> counterfact_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

/// Load a raw (unnormalized) dataset and fill missing covariates.
fn load_raw(dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(dir)?;
    if ds.normalization.is_some() {
        return Err(CliError::Usage(format!(
            "{} holds a normalized dataset; pass the raw split instead",
            dir.display()
        )));
    }
    Ok(impute_dataset(&ds)?)
}

/// Ground truth and simulator settings when `dir` holds a simulated dataset.
fn oracle_inputs(dir: &Path, ds: &Dataset) -> Result<Option<(Vec<SimTruth>, SimCohortConfig)>> {
    if !dir.join(TRUTH_FILE).exists() {
        return Ok(None);
    }
    let p = &ds.provenance;
    if p.get("generator").and_then(|g| g.as_str()) != Some("tumorsim") {
        warn!(dir = %dir.display(), "truth file present but dataset provenance is not the simulator; skipping oracle");
        return Ok(None);
    }
    let sim: SimCohortConfig = serde_json::from_value(p["config"].clone()).map_err(counterfact_core::Error::from)?;
    Ok(Some((load_truth(dir)?, sim)))
}

fn truth_subset(truth: &[SimTruth], ds: &Dataset) -> Vec<SimTruth> {
    let ids: HashSet<&str> = ds.records.iter().map(|r| r.patient_id.as_str()).collect();
    truth.iter().filter(|t| ids.contains(t.patient_id.as_str())).cloned().collect()
}

fn flag_or<T: Clone>(flag: &[T], configured: &[T]) -> Vec<T> {
    if flag.is_empty() {
        configured.to_vec()
    } else {
        flag.to_vec()
    }
}

// ---------------------------------------------------------------------------
// simulate

fn simulate(cli: &Cli, mut cfg: RunConfig, gammas: &[f64]) -> Result<()> {
    let base = cfg.simulate()?.clone();
    let out = out_dir(cli)?.to_path_buf();
    let gammas = flag_or(gammas, &cfg.run.gammas);
    let seeds = flag_or(&cli.seeds, &cfg.run.seeds);
    cfg.run.gammas = gammas.clone();
    cfg.run.seeds = seeds.clone();
    let gamma_list: Vec<Option<f64>> = if gammas.is_empty() {
        vec![None]
    } else {
        gammas.iter().copied().map(Some).collect()
    };
    let seed_list: Vec<Option<u64>> = if seeds.is_empty() {
        vec![None]
    } else {
        seeds.iter().copied().map(Some).collect()
    };
    for g in &gamma_list {
        for s in &seed_list {
            let mut sc = base.clone();
            let mut dir = out.clone();
            if let Some(g) = g {
                sc.gamma = *g;
                dir.push(format!("gamma_{g}"));
            }
            if let Some(s) = s {
                sc.seed = *s;
                dir.push(format!("seed_{s}"));
            }
            simulate_one(&cfg, sc, &dir)?;
        }
    }
    if gamma_list[0].is_some() || seed_list[0].is_some() {
        cfg.write_resolved(&out)?;
    }
    Ok(())
}

fn simulate_one(cfg: &RunConfig, sc: SimCohortConfig, dir: &Path) -> Result<()> {
    let cohort = simulate_cohort(&sc)?;
    save_dataset(&cohort.dataset, dir)?;
    save_truth(&cohort.truth, dir)?;
    info!(
        dir = %dir.display(),
        patients = sc.n_patients,
        gamma = sc.gamma,
        confounding = confounding_correlation(&cohort.dataset, sc.window),
        "simulated cohort"
    );
    let mut resolved = cfg.clone();
    resolved.simulate = Some(sc);
    resolved.run.gammas.clear();
    resolved.run.seeds.clear();
    resolved.write_resolved(dir)
}

// ---------------------------------------------------------------------------
// train

fn train_cmd(cli: &Cli, mut cfg: RunConfig, data: Option<&Path>) -> Result<()> {
    let base = cfg.train()?.clone();
    base.validate()?;
    let pre = cfg.preprocess.clone().unwrap_or_default();
    let data = pick_path(data, &cfg.run.data, "--data")?;
    let out = out_dir(cli)?.to_path_buf();
    ensure_separate(&out, &data)?;
    let seeds = flag_or(&cli.seeds, &cfg.run.seeds);
    cfg.run.data = Some(data.clone());
    cfg.run.seeds = seeds.clone();
    cfg.preprocess = Some(pre.clone());

    let raw = load_raw(&data)?;
    let mut split_stream = RngStream::new(pre.split_seed, streams::SPLIT);
    let (tr, va, te) = split_patients(&raw, pre.split, &mut split_stream)?;
    let positivity = positivity_check(&tr, pre.min_positivity);
    for arm in positivity.flagged() {
        warn!(arm = %arm.arm, fraction = arm.fraction, "treatment arm has weak support in the training split");
    }
    write_json(&out.join(POSITIVITY_FILE), &positivity)?;

    let truth = if data.join(TRUTH_FILE).exists() {
        Some(load_truth(&data)?)
    } else {
        None
    };
    let splits = out.join(SPLITS_DIR);
    for (name, ds) in [("train", &tr), ("val", &va), ("test", &te)] {
        let dir = splits.join(name);
        save_dataset(ds, &dir)?;
        if let Some(t) = &truth {
            save_truth(&truth_subset(t, ds), &dir)?;
        }
    }

    let stats = zscore_fit(&tr)?;
    let train_ds = zscore_apply(&tr, &stats)?;
    let val_ds = zscore_apply(&va, &stats)?;

    let runs: Vec<Option<u64>> = if seeds.is_empty() {
        vec![None]
    } else {
        seeds.iter().copied().map(Some).collect()
    };
    for s in &runs {
        let mut tc = base.clone();
        let mut dir = out.clone();
        if let Some(s) = s {
            tc.seed = *s;
            dir.push(format!("seed_{s}"));
        }
        create_dir(&dir)?;
        info!(mode = tc.mode.label(), seed = tc.seed, epochs = tc.epochs, "training");
        let (ckpt, report) = train(&train_ds, &val_ds, &tc)?;
        for e in &report.epochs {
            info!(
                epoch = e.epoch,
                lambda = e.lambda,
                train_loss = e.train_loss,
                val_rmse = e.val_rmse,
                seconds = e.seconds,
                "epoch"
            );
        }
        info!(
            best_epoch = report.best_epoch,
            best_val_rmse = report.best_val_rmse,
            params = report.param_count,
            "trained"
        );
        write_checkpoint(&ckpt, &dir.join(CHECKPOINT_FILE))?;
        write_json(&dir.join(TRAIN_REPORT_FILE), &report)?;
        write_with(&dir.join(METRICS_FILE), |w| write_metrics_csv(&report, w))?;
        let mut resolved = cfg.clone();
        resolved.train = Some(tc);
        resolved.run.seeds.clear();
        resolved.write_resolved(&dir)?;
    }
    if runs[0].is_some() {
        cfg.write_resolved(&out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

/// Row label for a checkpoint: its directory name for `model.ckpt`, else its stem.
fn checkpoint_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    if path.file_name().and_then(|s| s.to_str()) == Some(CHECKPOINT_FILE) {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return parent.to_string();
        }
    }
    stem.to_string()
}

fn unique_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let l = checkpoint_label(p);
            if seen.insert(l.clone()) {
                l
            } else {
                format!("{l}_{i}")
            }
        })
        .collect()
}

fn evaluate_cmd(
    cli: &Cli,
    mut cfg: RunConfig,
    checkpoints: &[PathBuf],
    data: Option<&Path>,
    labels: &[String],
) -> Result<()> {
    let ec = cfg.evaluate.clone().unwrap_or_default();
    ec.validate()?;
    let checkpoints = flag_or(checkpoints, &cfg.run.checkpoints);
    if checkpoints.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one --checkpoint".into()));
    }
    let data = pick_path(data, &cfg.run.data, "--data")?;
    let out = out_dir(cli)?.to_path_buf();
    ensure_separate(&out, &data)?;
    let mut labels = flag_or(labels, &cfg.run.labels);
    if labels.is_empty() {
        labels = unique_labels(&checkpoints);
    }
    if labels.len() != checkpoints.len() {
        return Err(CliError::Usage(format!(
            "{} labels for {} checkpoints",
            labels.len(),
            checkpoints.len()
        )));
    }
    cfg.run.checkpoints = checkpoints.clone();
    cfg.run.labels = labels.clone();
    cfg.run.data = Some(data.clone());
    cfg.evaluate = Some(ec.clone());

    let raw = load_raw(&data)?;
    let oracle = oracle_inputs(&data, &raw)?;
    let seed = cli.seed.unwrap_or(0);
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (path, label) in checkpoints.iter().zip(&labels) {
        let ckpt = read_checkpoint(path)?;
        let ds = zscore_apply(&raw, &ckpt.normalization)?;
        let od = oracle.as_ref().map(|(truth, sim)| OracleData {
            raw: &raw,
            truth,
            sim,
        });
        let report = evaluate(&ckpt, &ds, od, &ec, seed)?;
        info!(
            model = %label,
            windows = report.windows,
            rmse = ?report.horizon_rmse,
            counterfactual = ?report.counterfactual.as_ref().map(|c| &c.pooled),
            "evaluated"
        );
        reports.push((label.clone(), report));
    }

    if let [(_, r)] = reports.as_slice() {
        write_json(&out.join(EVAL_REPORT_FILE), r)?;
    } else {
        for (label, r) in &reports {
            write_json(&out.join(format!("eval_report_{label}.json")), r)?;
        }
    }
    let factual: Vec<(String, Vec<f64>)> = reports.iter().map(|(l, r)| (l.clone(), r.horizon_rmse.clone())).collect();
    write_with(&out.join(HORIZON_CSV), |w| write_horizon_csv(&factual, w))?;
    let counterfactual: Option<Vec<(String, Vec<f64>)>> = reports
        .iter()
        .map(|(l, r)| r.counterfactual.as_ref().map(|c| (l.clone(), c.pooled.clone())))
        .collect();
    if let Some(cf) = &counterfactual {
        write_with(&out.join(COUNTERFACTUAL_CSV), |w| write_horizon_csv(cf, w))?;
    }
    if reports.len() > 1 {
        let mut rows = vec![summarize_seeds(
            "factual",
            &factual.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
        )?];
        if let Some(cf) = &counterfactual {
            rows.push(summarize_seeds(
                "counterfactual",
                &cf.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
            )?);
        }
        write_with(&out.join(SUMMARY_CSV), |w| write_summary_csv(&rows, w))?;
    }
    cfg.write_resolved(&out)
}

// ---------------------------------------------------------------------------
// predict / attribute

/// Checkpoint, patient and history window shared by `predict` and `attribute`.
struct Selection {
    checkpoint: PathBuf,
    data: PathBuf,
    patient: Option<String>,
    origin: Option<usize>,
    plan: Option<String>,
}

impl Selection {
    fn resolve(
        cfg: &RunConfig,
        checkpoint: &Option<PathBuf>,
        data: &Option<PathBuf>,
        patient: &Option<String>,
        origin: &Option<usize>,
        plan: &Option<String>,
    ) -> Result<Self> {
        let checkpoint = pick_path(checkpoint.as_deref(), &cfg.run.checkpoints.first().cloned(), "--checkpoint")?;
        let data = pick_path(data.as_deref(), &cfg.run.data, "--data")?;
        Ok(Self {
            checkpoint,
            data,
            patient: patient.clone().or_else(|| cfg.run.patient.clone()),
            origin: origin.or(cfg.run.origin),
            plan: plan.clone().or_else(|| cfg.run.plan.clone()),
        })
    }

    fn record_into(&self, cfg: &mut RunConfig) {
        cfg.run.checkpoints = vec![self.checkpoint.clone()];
        cfg.run.data = Some(self.data.clone());
        cfg.run.patient = self.patient.clone();
        cfg.run.origin = self.origin;
        cfg.run.plan = self.plan.clone();
    }

    /// The selected patient's first `origin` steps, in raw units.
    fn history(&self) -> Result<HistoryInput> {
        let ds = load_dataset(&self.data)?;
        if ds.normalization.is_some() {
            return Err(CliError::Usage(format!(
                "{} holds a normalized dataset; pass the raw split instead",
                self.data.display()
            )));
        }
        let r = match &self.patient {
            Some(id) => ds
                .records
                .iter()
                .find(|r| &r.patient_id == id)
                .ok_or_else(|| CliError::Usage(format!("patient `{id}` not found in {}", self.data.display())))?,
            None => ds
                .records
                .first()
                .ok_or_else(|| CliError::Usage(format!("{} has no records", self.data.display())))?,
        };
        let len = self.origin.unwrap_or(r.len);
        if len < 1 || len > r.len {
            return Err(CliError::Usage(format!(
                "origin {len} outside 1..={} for patient `{}`",
                r.len, r.patient_id
            )));
        }
        let s = &ds.schema;
        let (dx, da, dy) = (s.d_x(), s.d_a(), s.d_y());
        let x = (0..len)
            .map(|t| {
                (0..dx)
                    .map(|i| r.mask[t * dx + i].then_some(r.x[t * dx + i]))
                    .collect()
            })
            .collect();
        Ok(HistoryInput {
            patient_id: Some(r.patient_id.clone()),
            v: r.v.clone(),
            x,
            a: (0..len).map(|t| r.a_row(t, da).to_vec()).collect(),
            y: (0..len).map(|t| r.y_row(t, dy).to_vec()).collect(),
        })
    }
}

/// Write `value` to `out/file`, or print it when no output directory is given.
fn emit<T: Serialize>(cli: &Cli, cfg: &RunConfig, file: &str, value: &T) -> Result<()> {
    match &cli.out {
        Some(out) => {
            create_dir(out)?;
            write_json(&out.join(file), value)?;
            cfg.write_resolved(out)
        }
        None => {
            let text = serde_json::to_string_pretty(value).map_err(counterfact_core::Error::from)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

fn predict_cmd(cli: &Cli, mut cfg: RunConfig, sel: Selection) -> Result<()> {
    let opts = cfg.predict()?.clone();
    if let Some(out) = &cli.out {
        ensure_separate(out, &sel.data)?;
    }
    sel.record_into(&mut cfg);
    let model = LoadedModel::load(&sel.checkpoint)?;
    let req = PredictRequest {
        history: sel.history()?,
        plans: None,
        horizon: opts.horizon,
        top_k: opts.top_k,
        target_range: opts.target_range,
        target_channel: opts.target_channel,
        attribute_plan: sel.plan.clone(),
        ig_steps: opts.ig_steps,
        include_phi: opts.include_phi,
    };
    let resp = counterfact_service::predict(&model, &req)?;
    emit(cli, &cfg, PREDICTION_FILE, &resp)
}

fn attribute_cmd(cli: &Cli, mut cfg: RunConfig, sel: Selection) -> Result<()> {
    let opts = cfg.predict()?.clone();
    if let Some(out) = &cli.out {
        ensure_separate(out, &sel.data)?;
    }
    sel.record_into(&mut cfg);
    let model = LoadedModel::load(&sel.checkpoint)?;
    let plans = default_plans(&model.ckpt.schema, opts.horizon);
    let plan = match &sel.plan {
        None => plans.into_iter().next().expect("at least one default plan"),
        Some(label) => {
            let labels: Vec<String> = plans.iter().map(|p| p.label.clone()).collect();
            plans.into_iter().find(|p| &p.label == label).ok_or_else(|| {
                CliError::Usage(format!("unknown plan `{label}`; choose one of {}", labels.join(", ")))
            })?
        }
    };
    let req = AttributeRequest {
        history: sel.history()?,
        plan: PlanSpec {
            label: plan.label,
            steps: Some(plan.steps),
            constant: None,
        },
        horizon: opts.horizon,
        target_channel: opts.target_channel,
        ig_steps: opts.ig_steps,
        top_k: opts.top_k,
        include_phi: opts.include_phi,
    };
    let resp = counterfact_service::attribute(&model, &req)?;
    emit(cli, &cfg, ATTRIBUTION_FILE, &resp)
}

// ---------------------------------------------------------------------------
// probe

fn probe_cmd(
    cli: &Cli,
    mut cfg: RunConfig,
    unbalanced: Option<&Path>,
    balanced: Option<&Path>,
    data: Option<&Path>,
) -> Result<()> {
    let pc = cfg.probe.clone().unwrap_or_default();
    pc.validate()?;
    let unbalanced = pick_path(unbalanced, &cfg.run.unbalanced, "--unbalanced")?;
    let balanced = pick_path(balanced, &cfg.run.balanced, "--balanced")?;
    let data = pick_path(data, &cfg.run.data, "--data")?;
    let out = out_dir(cli)?.to_path_buf();
    ensure_separate(&out, &data)?;
    cfg.run.unbalanced = Some(unbalanced.clone());
    cfg.run.balanced = Some(balanced.clone());
    cfg.run.data = Some(data.clone());
    cfg.probe = Some(pc.clone());

    let train_raw = load_raw(&data.join("train"))?;
    let val_raw = load_raw(&data.join("val"))?;
    let run_one = |path: &Path| -> Result<ProbeRun> {
        let ckpt = read_checkpoint(path)?;
        let tr = zscore_apply(&train_raw, &ckpt.normalization)?;
        let va = zscore_apply(&val_raw, &ckpt.normalization)?;
        let run = reconstruction_probe(&ckpt, &tr, &va, &pc)?;
        info!(
            checkpoint = %path.display(),
            final_val = run.val_loss.last().copied().unwrap_or(f64::NAN),
            "probe finished"
        );
        Ok(run)
    };
    let report = ProbeReport::new(run_one(&unbalanced)?, run_one(&balanced)?)?;
    write_json(&out.join(PROBE_REPORT_FILE), &report)?;
    write_with(&out.join(PROBE_CURVES_FILE), |w| write_probe_curves(&report, w))?;
    cfg.write_resolved(&out)
}

fn write_probe_curves(report: &ProbeReport, out: &mut Vec<u8>) -> counterfact_core::Result<()> {
    let (u, b) = (&report.unbalanced, &report.balanced);
    let cell = |v: &[f64], e: usize| v.get(e).map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("epoch,unbalanced_train,unbalanced_val,balanced_train,balanced_val\n");
    for e in 0..u.train_loss.len().max(b.train_loss.len()) {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            e + 1,
            cell(&u.train_loss, e),
            cell(&u.val_loss, e),
            cell(&b.train_loss, e),
            cell(&b.val_loss, e)
        ));
    }
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-repr

fn export_cmd(cli: &Cli, mut cfg: RunConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let checkpoint = pick_path(checkpoint, &cfg.run.checkpoints.first().cloned(), "--checkpoint")?;
    let data = pick_path(data, &cfg.run.data, "--data")?;
    let out = out_dir(cli)?.to_path_buf();
    ensure_separate(&out, &data)?;
    cfg.run.checkpoints = vec![checkpoint.clone()];
    cfg.run.data = Some(data.clone());
    let ckpt = read_checkpoint(&checkpoint)?;
    let ds = zscore_apply(&load_raw(&data)?, &ckpt.normalization)?;
    let mut rows = 0;
    write_with(&out.join(REPRESENTATIONS_FILE), |w| {
        rows = export_representations(&ckpt, &ds, w)?;
        Ok(())
    })?;
    info!(rows, "exported representations");
    cfg.write_resolved(&out)
}

// ---------------------------------------------------------------------------
// serve

fn serve_cmd(
    cli: &Cli,
    mut cfg: RunConfig,
    checkpoint: Option<&Path>,
    models_dir: Option<&Path>,
    host: Option<&str>,
    port: Option<u16>,
    cors: &[String],
) -> Result<()> {
    let mut opts = cfg.serve.clone().unwrap_or_default();
    if let Some(h) = host {
        opts.host = h.to_string();
    }
    if let Some(p) = port {
        opts.port = p;
    }
    if !cors.is_empty() {
        opts.cors_origins = cors.to_vec();
    }
    if let Some(d) = models_dir {
        opts.models_dir = Some(d.to_path_buf());
    }
    let checkpoint = checkpoint.map(Path::to_path_buf).or_else(|| cfg.run.checkpoints.first().cloned());
    cfg.run.checkpoints = checkpoint.iter().cloned().collect();
    cfg.serve = Some(opts.clone());

    let model = checkpoint.as_deref().map(LoadedModel::load).transpose()?;
    if let Some(m) = &model {
        info!(digest = %m.digest, "model loaded");
    }
    let state = AppState {
        model: model.map(Arc::new),
        models_dir: opts.models_dir.clone(),
    };
    let app = router(state, &opts.cors_origins)?;
    if let Some(out) = &cli.out {
        cfg.write_resolved(out)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(async move {
        let bind = format!("{}:{}", opts.host, opts.port);
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| CliError::io(&bind, e))?;
        let addr = listener.local_addr().map_err(|e| CliError::io(&bind, e))?;
        {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "listening on http://{addr}").map_err(|e| CliError::io("<stdout>", e))?;
            stdout.flush().map_err(|e| CliError::io("<stdout>", e))?;
        }
        info!(%addr, "serving");
        serve_until(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::io(&bind, e))
    })
}
