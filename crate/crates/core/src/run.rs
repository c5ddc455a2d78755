//! Training, evaluation, matched comparison and report rendering.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{RunConfig, SelectBy};
use crate::data::{self, Corpus, TokenWindow};
use crate::diagnostics::{DiagRecorder, JsonlWriter};
use crate::error::{Error, Result};
use crate::mceval::{evaluate, EvalConfig, MetricsReport};
use crate::model::{FfnMode, Model, ModelConfig};
use crate::objective::Trainer;
use crate::plot;
use crate::rng::{streams, Rng};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const STEP_LOG: &str = "train_log.jsonl";
pub const DIAG_LOG: &str = "diagnostics.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<TokenWindow>,
    pub val: Vec<TokenWindow>,
    pub train_examples: usize,
    pub val_examples: usize,
    pub skipped_examples: usize,
    pub malformed: Vec<(usize, String)>,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data.path {
        Some(p) => data::ingest(p, cfg.data.format),
        None => Ok(data::toy_corpus(cfg.data.toy_docs, cfg.seed()?)),
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let corpus = load_corpus(cfg)?;
    let (train, val) = data::split(&corpus, &cfg.split_spec()?)?;
    let spec = cfg.window_spec();
    let tw = data::make_windows(&train, &spec)?;
    let vw = data::make_windows(&val, &spec)?;
    if tw.windows.is_empty() {
        return Err(Error::Input("no training windows".into()));
    }
    if vw.windows.is_empty() {
        return Err(Error::Input(
            "no validation windows (corpus too small for val_frac?)".into(),
        ));
    }
    Ok(PreparedData {
        train: tw.windows,
        val: vw.windows,
        train_examples: train.len(),
        val_examples: val.len(),
        skipped_examples: tw.skipped + vw.skipped,
        malformed: corpus.malformed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub loss: f64,
    pub ce: f64,
    pub ppl: f64,
    pub acc: f64,
    pub nll: f64,
    pub mutual_information: f64,
    pub top1_flip_rate_mc: f64,
    pub skipped_batches: usize,
}

impl EpochRecord {
    pub fn metric(&self, by: SelectBy) -> f64 {
        match by {
            SelectBy::Ce => self.ce,
            SelectBy::Loss => self.loss,
            SelectBy::Nll => self.nll,
        }
    }
}

/// 1-based index of the first minimum among finite values.
pub fn select_epoch(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub report: MetricsReport,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub out_dir: PathBuf,
    pub model: Model,
}

fn eval_rng(seed: u64) -> Rng {
    Rng::new(seed).split(streams::EVAL_NOISE)
}

/// Trains per `cfg`, writing logs, the best checkpoint and the final report
/// (evaluated from that checkpoint) into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let seed = cfg.seed()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    let data = prepare_data(&cfg)?;

    let mut model = Model::new(cfg.model.clone(), seed)?;
    let batch = cfg.train.batch_size;
    let spe = cfg
        .train
        .steps_per_epoch
        .unwrap_or_else(|| data.train.len().div_ceil(batch));
    let mut trainer = Trainer::new(
        &model,
        cfg.objective,
        cfg.train.adam(),
        spe * cfg.train.epochs,
        cfg.train.homeostat_window,
    );
    let mut noise = Rng::new(seed).split(streams::TRAIN_NOISE);
    let mut shuffle = Rng::new(seed).split(streams::SHUFFLE);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut step_log = JsonlWriter::create(&out.join(STEP_LOG))?;
    let mut diag_log = JsonlWriter::create(&out.join(DIAG_LOG))?;
    let mut epoch_log = JsonlWriter::create(&out.join(EPOCH_LOG))?;
    let mut recorder = DiagRecorder::default();
    let run_json = serde_json::to_value(&cfg)?;

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=cfg.train.epochs {
        let mut loss_sum = 0.0;
        let mut counted = 0;
        for _ in 0..spe {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch.min(data.train.len()) {
                if cursor == order.len() {
                    order = (0..data.train.len()).collect();
                    shuffle.shuffle(&mut order);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let windows: Vec<&TokenWindow> = idx.iter().map(|&i| &data.train[i]).collect();
            let outcome = trainer.train_step(&mut model, &windows, &mut noise)?;
            step_log.write(&outcome.record)?;
            if !outcome.record.loss.skipped {
                loss_sum += outcome.record.loss.total;
                counted += 1;
            }
            if let Some(diag) = &outcome.diagnostics {
                if cfg.train.diag_every > 0 && trainer.step % cfg.train.diag_every == 0 {
                    let tokens = windows.iter().map(|w| w.len()).sum();
                    for r in recorder.record(trainer.step, diag, &model.controls, tokens) {
                        diag_log.write(r)?;
                    }
                }
            }
        }
        step_log.flush()?;
        diag_log.flush()?;
        if counted == 0 {
            return Err(Error::NumericGuard(
                "every batch of the epoch was non-finite",
            ));
        }
        let report = evaluate(
            &model,
            &data.val,
            &cfg.objective,
            &cfg.eval,
            &mut eval_rng(seed),
        )?;
        let rec = EpochRecord {
            epoch,
            step: trainer.step,
            train_loss: loss_sum / counted as f64,
            loss: report.final_validation.loss,
            ce: report.final_validation.ce,
            ppl: report.final_validation.ppl,
            acc: report.final_validation.acc,
            nll: report.extended.nll,
            mutual_information: report.extended.mutual_information,
            top1_flip_rate_mc: report.extended.top1_flip_rate_mc,
            skipped_batches: trainer.skipped_batches,
        };
        epoch_log.write(&rec)?;
        epoch_log.flush()?;
        let metric = rec.metric(cfg.train.select_by);
        if metric.is_finite() && best.is_none_or(|(_, b)| metric < b) {
            best = Some((epoch, metric));
            checkpoint::save(
                &out.join(BEST_CKPT),
                &model,
                &CheckpointMeta {
                    run_config: Some(run_json.clone()),
                    rng: noise.state(),
                    epoch,
                    select_by: cfg.train.select_by.name().into(),
                    metric,
                    skipped_batches: trainer.skipped_batches,
                },
            )?;
        }
        epochs.push(rec);
    }
    let Some((selected, _)) = best else {
        return Err(Error::NumericGuard(
            "no epoch produced a finite selection metric",
        ));
    };
    let mut report = evaluate_checkpoint(&out.join(BEST_CKPT), None, None)?;
    report.run.skipped_batches = trainer.skipped_batches;
    write_report(out, &report)?;
    let model = checkpoint::load(&out.join(BEST_CKPT))?.model;
    Ok(TrainSummary {
        report,
        epochs,
        selected_epoch: selected,
        out_dir: out.to_path_buf(),
        model,
    })
}

pub fn write_report(out: &Path, report: &MetricsReport) -> Result<()> {
    fs::write(out.join(REPORT_JSON), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join(REPORT_CSV), report.to_csv())?;
    Ok(())
}

/// Re-evaluates a checkpoint on the validation split of its own run
/// configuration. `data_path` replaces the corpus; `eval` replaces the
/// evaluation settings.
pub fn evaluate_checkpoint(
    path: &Path,
    data_path: Option<&Path>,
    eval: Option<EvalConfig>,
) -> Result<MetricsReport> {
    let ckpt = checkpoint::load(path)?;
    let run_json = ckpt
        .header
        .run_config
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no run configuration".into()))?;
    let mut cfg: RunConfig = serde_json::from_value(run_json)
        .map_err(|e| Error::Checkpoint(format!("run configuration unreadable: {e}")))?;
    if cfg.model != ckpt.header.model {
        return Err(Error::Checkpoint(
            "run configuration and model record disagree".into(),
        ));
    }
    if let Some(p) = data_path {
        cfg.data.path = Some(p.to_path_buf());
    }
    if let Some(e) = eval {
        cfg.eval = e;
    }
    let data = prepare_data(&cfg)?;
    let mut report = evaluate(
        &ckpt.model,
        &data.val,
        &cfg.objective,
        &cfg.eval,
        &mut eval_rng(cfg.seed()?),
    )?;
    report.run.selected_epoch = ckpt.header.epoch;
    report.run.skipped_batches = ckpt.header.skipped_batches;
    Ok(report)
}

pub fn ffn_params(cfg: &ModelConfig) -> usize {
    match cfg.ffn_mode {
        FfnMode::Variational => cfg.variational_ffn_params(),
        FfnMode::Deterministic => cfg.deterministic_ffn_params(cfg.det_hidden()),
    }
}

/// Refuses pairs that differ in anything but the FFN path, or whose FFN
/// parameter counts differ by more than 5%.
pub fn check_matched(a: &RunConfig, b: &RunConfig) -> Result<()> {
    if a.model.backbone() != b.model.backbone() {
        return Err(Error::Config("backbone configurations differ".into()));
    }
    if a.seed()? != b.seed()? {
        return Err(Error::Config("seeds differ".into()));
    }
    if a.data != b.data || a.train != b.train {
        return Err(Error::Config("data or training budgets differ".into()));
    }
    let (pa, pb) = (ffn_params(&a.model) as f64, ffn_params(&b.model) as f64);
    if (pa - pb).abs() / pa.max(pb) > 0.05 {
        return Err(Error::Config(format!(
            "FFN parameter counts {pa} and {pb} differ by more than 5%"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub ce: f64,
    pub ppl: f64,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub mutual_information: f64,
    pub top1_flip_rate_mc: f64,
    pub cvar_nll: f64,
    pub conditional_variance_mc: f64,
    pub selected_epoch: usize,
}

impl CompareRow {
    pub fn from_report(run: &str, r: &MetricsReport) -> Self {
        CompareRow {
            run: run.to_string(),
            ce: r.final_validation.ce,
            ppl: r.final_validation.ppl,
            acc: r.final_validation.acc,
            nll: r.extended.nll,
            ece: r.extended.ece,
            mutual_information: r.extended.mutual_information,
            top1_flip_rate_mc: r.extended.top1_flip_rate_mc,
            cvar_nll: r.extended.cvar_nll,
            conditional_variance_mc: r.extended.conditional_variance_mc,
            selected_epoch: r.run.selected_epoch,
        }
    }
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut s = String::from(
        "| run | CE | PPL | Acc | NLL | ECE | MI | Flip | CVaR | CondVar | epoch |\n|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.2} | {:.4} | {:.4} | {:.4} | {:.4e} | {:.4} | {:.4} | {:.4e} | {} |\n",
            r.run,
            r.ce,
            r.ppl,
            r.acc,
            r.nll,
            r.ece,
            r.mutual_information,
            r.top1_flip_rate_mc,
            r.cvar_nll,
            r.conditional_variance_mc,
            r.selected_epoch
        ));
    }
    s
}

pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub runs: Vec<TrainSummary>,
}

/// Trains both configurations into `out/<name>` and writes the side-by-side
/// table, the per-epoch CE plot and the epistemic bar chart.
pub fn compare(a: &RunConfig, b: &RunConfig, out: &Path) -> Result<CompareSummary> {
    a.validate()?;
    b.validate()?;
    check_matched(a, b)?;
    let names = if a.name == b.name {
        vec![format!("{}_a", a.name), format!("{}_b", b.name)]
    } else {
        vec![a.name.clone(), b.name.clone()]
    };
    fs::create_dir_all(out)?;
    let runs = vec![
        train(a, &out.join(&names[0]))?,
        train(b, &out.join(&names[1]))?,
    ];
    let rows: Vec<CompareRow> = names
        .iter()
        .zip(&runs)
        .map(|(n, r)| CompareRow::from_report(n, &r.report))
        .collect();
    fs::write(out.join("compare.md"), compare_table(&rows))?;
    let mut csv = String::from("run,ce,ppl,acc,nll,ece,mutual_information,top1_flip_rate_mc,cvar_nll,conditional_variance_mc,selected_epoch\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.ce,
            r.ppl,
            r.acc,
            r.nll,
            r.ece,
            r.mutual_information,
            r.top1_flip_rate_mc,
            r.cvar_nll,
            r.conditional_variance_mc,
            r.selected_epoch
        ));
    }
    fs::write(out.join("compare.csv"), csv)?;
    write_plots(out, &names, &runs)?;
    Ok(CompareSummary { rows, runs })
}

fn write_plots(out: &Path, names: &[String], runs: &[TrainSummary]) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = names
        .iter()
        .zip(runs)
        .map(|(n, r)| {
            (
                n.clone(),
                r.epochs.iter().map(|e| (e.epoch as f64, e.ce)).collect(),
            )
        })
        .collect();
    fs::write(
        out.join("val_ce.svg"),
        plot::line_chart(
            "Validation CE across epochs",
            "epoch",
            "CE (nats/token)",
            &series,
        ),
    )?;
    let mut csv = String::from("run,epoch,ce\n");
    for (n, pts) in &series {
        for (e, ce) in pts {
            csv.push_str(&format!("{n},{e},{ce}\n"));
        }
    }
    fs::write(out.join("val_ce.csv"), csv)?;

    let groups: Vec<String> = ["MI", "cond. var.", "flip rate", "epistemic %"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let bars: Vec<(String, Vec<f64>)> = names
        .iter()
        .zip(runs)
        .map(|(n, r)| {
            let e = &r.report.extended;
            (
                n.clone(),
                vec![
                    e.mutual_information,
                    e.conditional_variance_mc,
                    e.top1_flip_rate_mc,
                    e.epistemic_ratio,
                ],
            )
        })
        .collect();
    fs::write(
        out.join("epistemic.svg"),
        plot::log_bar_chart(
            "Sampling-based epistemic metrics",
            &groups,
            &bars,
            plot::LOG_FLOOR,
        ),
    )?;
    let mut csv = String::from(
        "run,mutual_information,conditional_variance_mc,top1_flip_rate_mc,epistemic_ratio\n",
    );
    for (n, v) in &bars {
        csv.push_str(&format!("{n},{},{},{},{}\n", v[0], v[1], v[2], v[3]));
    }
    fs::write(out.join("epistemic.csv"), csv)?;
    Ok(())
}

/// Run directories under `dir` (or `dir` itself) that hold a report, sorted by name.
pub fn find_runs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        )));
    }
    if dir.join(REPORT_JSON).is_file() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        return Ok(vec![(name, dir.to_path_buf())]);
    }
    let mut runs: Vec<(String, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(REPORT_JSON).is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Input(format!(
            "no run logs found under {}",
            dir.display()
        )));
    }
    Ok(runs)
}

/// Markdown tables rendered from the logs of every run under `dir`.
pub fn render_report(dir: &Path) -> Result<String> {
    let runs = find_runs(dir)?;
    let mut reports = Vec::new();
    for (name, path) in &runs {
        let r: MetricsReport = serde_json::from_str(&fs::read_to_string(path.join(REPORT_JSON))?)?;
        let epochs: Vec<EpochRecord> = if path.join(EPOCH_LOG).is_file() {
            crate::diagnostics::read_jsonl(&path.join(EPOCH_LOG))?
        } else {
            Vec::new()
        };
        reports.push((name.clone(), r, epochs));
    }
    let mut s = String::new();
    s.push_str("## Final validation\n\n| run | loss | CE | PPL | Acc | selected epoch |\n|---|---|---|---|---|---|\n");
    for (n, r, _) in &reports {
        let f = &r.final_validation;
        s.push_str(&format!(
            "| {n} | {:.4} | {:.4} | {:.2} | {:.4} | {} |\n",
            f.loss, f.ce, f.ppl, f.acc, r.run.selected_epoch
        ));
    }
    s.push_str("\n## Extended validation\n\n| run | M | NLL | ECE | MI | CondVar | Flip | CVaR | epistemic % |\n|---|---|---|---|---|---|---|---|---|\n");
    for (n, r, _) in &reports {
        let e = &r.extended;
        s.push_str(&format!(
            "| {n} | {} | {:.4} | {:.4} | {:.4e} | {:.4e} | {:.4} | {:.4} | {:.2} |\n",
            e.mc_samples,
            e.nll,
            e.ece,
            e.mutual_information,
            e.conditional_variance_mc,
            e.top1_flip_rate_mc,
            e.cvar_nll,
            e.epistemic_ratio
        ));
    }
    s.push_str("\n## Layer diagnostics\n\n| run | layer | weight | KL | mu2 | mu2 std | inside band | too low | too high | gain | active | status |\n|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for (n, r, _) in &reports {
        for l in &r.internal {
            s.push_str(&format!(
                "| {n} | {} | {:.4} | {:.4e} | {:.4} | {:.4} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:?} |\n",
                l.layer + 1,
                l.weight,
                l.kl,
                l.mu2,
                l.mu2_std,
                l.band.inside_band_fraction,
                l.band.frac_too_low,
                l.band.frac_too_high,
                l.control_gain,
                l.active_fraction,
                l.status
            ));
        }
    }
    s.push_str("\n## Latent usage and stability\n\n| run | sigma mean | active unit fraction | effective active dims | finite_ok | skipped batches |\n|---|---|---|---|---|---|\n");
    for (n, r, _) in &reports {
        let e = &r.extended;
        s.push_str(&format!(
            "| {n} | {:.4} | {:.3} | {} | {} | {} |\n",
            e.sigma_mean,
            e.active_unit_fraction,
            e.effective_active_dims,
            r.run.finite_ok,
            r.run.skipped_batches
        ));
    }
    s.push_str("\n## Validation CE by epoch\n\n| run | epoch | train loss | CE | Acc |\n|---|---|---|---|---|\n");
    for (n, _, epochs) in &reports {
        for e in epochs {
            s.push_str(&format!(
                "| {n} | {} | {:.4} | {:.4} | {:.4} |\n",
                e.epoch, e.train_loss, e.ce, e.acc
            ));
        }
    }
    Ok(s)
}
