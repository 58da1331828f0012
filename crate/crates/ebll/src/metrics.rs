//! Metrics CSV emission. One header row, then one row per training epoch,
//! per autoencoder epoch, and per (evaluation, task) pair. All values are
//! formatted with Rust's shortest-roundtrip float formatting, so re-running
//! an identical configuration yields byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::lifelong::{EvalRecord, RunResult};

pub const METRICS_HEADER: &str = "run_id,strategy,seed,phase,task,epoch,eval_task,loss_total,loss_ce,loss_distill,loss_code,lr,drift,accuracy,forgetting,mean_loss,ae_code_loss,ae_cls_loss";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the full metrics table of one run, rows grouped per task in
/// training order: train epochs, autoencoder epochs, then evaluation rows.
pub fn render_run(run: &RunResult, run_id: &str, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    let strategy = run.strategy.name();

    let mut eval_iter = run.evals.iter();
    let max_index = run
        .epoch_stats
        .iter()
        .map(|s| s.task_index)
        .max()
        .unwrap_or(0);
    for index in 0..=max_index {
        for s in run.epoch_stats.iter().filter(|s| s.task_index == index) {
            let task_label = s.task.map(|t| t.to_string()).unwrap_or_else(|| "joint".into());
            let _ = writeln!(
                out,
                "{run_id},{strategy},{seed},train_epoch,{task_label},{epoch},,{lt},{lc},{ld},{lcode},{lr},,,,,,",
                epoch = s.epoch,
                lt = s.loss_total,
                lc = s.loss_ce,
                ld = s.loss_distill,
                lcode = s.loss_code,
                lr = s.lr,
            );
        }
        for (task, trace) in run.drift_traces.iter().filter(|(t, _)| t.0 as usize == index) {
            for (epoch, v) in trace.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{run_id},{strategy},{seed},drift,{task},{epoch},,,,,,,{v},,,,,",
                );
            }
        }
        for (task, curve) in run.ae_curves.iter().filter(|(t, _)| t.0 as usize == index) {
            for r in curve {
                let _ = writeln!(
                    out,
                    "{run_id},{strategy},{seed},ae_epoch,{task},{epoch},,,,,,,,,,,{code},{cls}",
                    epoch = r.epoch,
                    code = r.code_loss,
                    cls = r.classification_loss,
                );
            }
        }
        for eval in eval_iter.by_ref() {
            render_eval(&mut out, run_id, strategy, seed, eval);
            break;
        }
    }
    out
}

fn render_eval(out: &mut String, run_id: &str, strategy: &str, seed: u64, eval: &EvalRecord) {
    for te in &eval.per_task {
        let _ = writeln!(
            out,
            "{run_id},{strategy},{seed},eval,{after},,{eval_task},,,,,,,{acc},{forget},{loss},,",
            after = eval.after_task_index,
            eval_task = te.task,
            acc = te.accuracy,
            forget = fmt_opt(te.forgetting),
            loss = te.mean_loss,
        );
    }
}

pub fn write_metrics(run: &RunResult, run_id: &str, seed: u64, path: &Path) -> Result<String> {
    let rendered = render_run(run, run_id, seed);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, rendered.as_bytes())?;
    Ok(rendered)
}

/// Deterministic run log: footprint lines and the final evaluation summary.
pub fn render_run_log(run: &RunResult, run_id: &str, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {run_id} strategy={} seed={seed}", run.strategy.name());
    for f in &run.footprints {
        let _ = writeln!(
            out,
            "memory footprint after {}: autoencoder {} of {} model parameters ({:.2}%)",
            f.task,
            f.autoencoder_params,
            f.model_params,
            100.0 * f.ratio()
        );
    }
    for eval in &run.evals {
        let _ = write!(out, "eval after task index {}:", eval.after_task_index);
        for te in &eval.per_task {
            let _ = write!(
                out,
                " {}: acc {:.4} (forget {})",
                te.task,
                te.accuracy,
                te.forgetting.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into()),
            );
        }
        let _ = writeln!(out, " | avg acc {:.4}", eval.avg_accuracy);
    }
    out
}

// ---------------------------------------------------------------------------
// Comparison summaries
// ---------------------------------------------------------------------------

pub const SUMMARY_HEADER: &str =
    "strategy,task,runs,acc_mean,acc_std,forget_mean,forget_std,loss_mean";

#[derive(Debug, Clone)]
pub struct StrategyTaskSummary {
    pub strategy: &'static str,
    pub task_label: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub forget_mean: f64,
    pub forget_std: f64,
    pub loss_mean: f64,
}

/// Aggregates the final evaluations of several same-strategy runs into
/// per-task mean/std rows plus one `average` row.
pub fn summarize_strategy(runs: &[&RunResult]) -> Vec<StrategyTaskSummary> {
    assert!(!runs.is_empty());
    let strategy = runs[0].strategy.name();
    let per_task_count = runs[0].final_eval().per_task.len();
    let mut rows = Vec::with_capacity(per_task_count + 1);
    let mut all_acc: Vec<f64> = Vec::new();
    let mut all_forget: Vec<f64> = Vec::new();
    for ti in 0..per_task_count {
        let accs: Vec<f64> = runs
            .iter()
            .map(|r| r.final_eval().per_task[ti].accuracy)
            .collect();
        let forgets: Vec<f64> = runs
            .iter()
            .map(|r| r.final_eval().per_task[ti].forgetting.unwrap_or(0.0))
            .collect();
        let losses: Vec<f64> = runs
            .iter()
            .map(|r| r.final_eval().per_task[ti].mean_loss)
            .collect();
        let (am, asd) = mean_std(&accs);
        let (fm, fsd) = mean_std(&forgets);
        let (lm, _) = mean_std(&losses);
        all_acc.push(am);
        all_forget.push(fm);
        rows.push(StrategyTaskSummary {
            strategy,
            task_label: runs[0].final_eval().per_task[ti].task.to_string(),
            runs: runs.len(),
            acc_mean: am,
            acc_std: asd,
            forget_mean: fm,
            forget_std: fsd,
            loss_mean: lm,
        });
    }
    let (avg_acc, _) = mean_std(&all_acc);
    let (avg_forget, _) = mean_std(&all_forget);
    rows.push(StrategyTaskSummary {
        strategy,
        task_label: "average".into(),
        runs: runs.len(),
        acc_mean: avg_acc,
        acc_std: 0.0,
        forget_mean: avg_forget,
        forget_std: 0.0,
        loss_mean: 0.0,
    });
    rows
}

pub fn render_summary(rows: &[StrategyTaskSummary]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.task_label,
            r.runs,
            r.acc_mean,
            r.acc_std,
            r.forget_mean,
            r.forget_std,
            r.loss_mean
        );
    }
    out
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
