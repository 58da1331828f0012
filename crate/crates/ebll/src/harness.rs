//! Experiment orchestration: run execution, cross-strategy comparison
//! sweeps, and post-hoc analyses over saved checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{bound_decomposition, contractiveness_experiment, SpreadRegime};
use crate::checkpoint::{load_memory, load_model, save_memory, save_model, write_archive};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lifelong::{run_sequence, RunResult, Strategy};
use crate::metrics::{render_run_log, summarize_strategy, write_metrics, render_summary};
use crate::parallel;
use crate::seeds;

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub run_id: String,
    pub metrics: String,
    pub result: RunResult,
}

fn run_dir_for(cfg: &RunConfig, out_root: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    out_root.join(format!("{}_{}_s{}", cfg.name, strategy.name(), seed))
}

/// Executes one full sequence run and writes its artifacts: metrics CSV, run
/// log, per-task model checkpoints, the final model, and the memory archive.
pub fn execute_run(
    cfg: &RunConfig,
    strategy: Strategy,
    seed: u64,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    let tasks = cfg.build_tasks(seed)?;
    let settings = cfg.sequence_settings(seed);
    let result = run_sequence(&tasks, strategy, &settings, &mut ())?;

    fs::create_dir_all(out_dir)?;
    let run_id = format!("{}_{}_s{}", cfg.name, strategy.name(), seed);
    let metrics = write_metrics(&result, &run_id, seed, &out_dir.join("metrics.csv"))?;
    fs::write(
        out_dir.join("run.log"),
        render_run_log(&result, &run_id, seed),
    )?;

    let ckpt = out_dir.join("checkpoints");
    save_model(&result.model, &ckpt.join("model.ebll"))?;
    save_memory(&result.memory, &ckpt.join("memory.ebll"))?;
    for (i, (_, snap)) in result.snapshots.iter().enumerate() {
        write_archive(
            &ckpt.join(format!("model_after_task{i}.ebll")),
            &snap.export_arrays(),
        )?;
    }

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        run_id,
        metrics,
        result,
    })
}

/// `run` command: executes the config's strategy at its seed (subject to CLI
/// overrides) and reports where the artifacts went.
pub fn cmd_run(
    config_path: &Path,
    out_override: Option<&str>,
    seed_override: Option<u64>,
) -> Result<RunArtifacts> {
    let cfg = RunConfig::from_path(config_path)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let out_root = PathBuf::from(out_override.unwrap_or(&cfg.out_dir));
    let out_dir = run_dir_for(&cfg, &out_root, cfg.strategy, seed);
    execute_run(&cfg, cfg.strategy, seed, &out_dir)
}

pub struct CompareArtifacts {
    pub out_root: PathBuf,
    pub summary_path: PathBuf,
    pub summary: String,
    pub runs: Vec<RunArtifacts>,
}

/// `compare` command: the cross-product of strategies and seeds, one run
/// directory each, aggregated into a per-strategy per-task summary table.
pub fn cmd_compare(
    config_path: &Path,
    strategies: &[Strategy],
    seeds: &[u64],
    out_override: Option<&str>,
) -> Result<CompareArtifacts> {
    let cfg = RunConfig::from_path(config_path)?;
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "compare needs at least one strategy and one seed".into(),
        ));
    }
    let out_root = PathBuf::from(out_override.unwrap_or(&cfg.out_dir));
    let specs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<Result<RunArtifacts>> = parallel::map_collect(&specs, |&(strategy, seed)| {
        let dir = run_dir_for(&cfg, &out_root, strategy, seed);
        execute_run(&cfg, strategy, seed, &dir)
    });
    let mut runs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        runs.push(o?);
    }

    let mut rows = Vec::new();
    for &strategy in strategies {
        let group: Vec<&RunResult> = runs
            .iter()
            .filter(|r| r.result.strategy == strategy)
            .map(|r| &r.result)
            .collect();
        rows.extend(summarize_strategy(&group));
    }
    let summary = render_summary(&rows);
    let summary_path = out_root.join("summary.csv");
    fs::create_dir_all(&out_root)?;
    fs::write(&summary_path, summary.as_bytes())?;
    Ok(CompareArtifacts {
        out_root,
        summary_path,
        summary,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    Contractiveness,
    Drift,
    Bounds,
}

impl std::str::FromStr for AnalysisKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contractiveness" => Ok(AnalysisKind::Contractiveness),
            "drift" => Ok(AnalysisKind::Drift),
            "bounds" => Ok(AnalysisKind::Bounds),
            other => Err(Error::Config(format!(
                "unknown analysis '{other}'; expected contractiveness, drift, or bounds"
            ))),
        }
    }
}

/// `analyze` command: reads the checkpoints of the run the config describes
/// and writes the requested report CSV next to them.
pub fn cmd_analyze(
    config_path: &Path,
    which: AnalysisKind,
    out_override: Option<&str>,
) -> Result<PathBuf> {
    let cfg = RunConfig::from_path(config_path)?;
    let out_root = PathBuf::from(out_override.unwrap_or(&cfg.out_dir));
    let run_dir = run_dir_for(&cfg, &out_root, cfg.strategy, cfg.seed);
    match which {
        AnalysisKind::Contractiveness => analyze_contractiveness(&cfg, &run_dir),
        AnalysisKind::Drift => analyze_drift(&run_dir),
        AnalysisKind::Bounds => analyze_bounds(&cfg, &run_dir),
    }
}

fn first_encoder(
    memory: &crate::lifelong::TaskMemory,
) -> Result<&crate::autoencoder::Autoencoder> {
    memory
        .entries()
        .iter()
        .find_map(|e| e.encoder.as_ref())
        .ok_or_else(|| {
            Error::MissingCheckpoint(
                "memory archive holds no trained autoencoder (strategy without encoders?)".into(),
            )
        })
}

fn analyze_contractiveness(cfg: &RunConfig, run_dir: &Path) -> Result<PathBuf> {
    let model = load_model(&run_dir.join("checkpoints/model_after_task0.ebll"))?;
    let memory = load_memory(&run_dir.join("checkpoints/memory.ebll"))?;
    let ae = first_encoder(&memory)?;
    let snapshot = model.snapshot();
    let seed = seeds::derive(cfg.seed, &[seeds::tag::ANALYSIS_TRIAL]);
    let mut out = String::from(
        "regime,trials,mean_mse_samples,se_samples,mean_mse_features,se_features,mean_mse_reconstructions,se_reconstructions\n",
    );
    for regime in [SpreadRegime::Near, SpreadRegime::Far] {
        let r = contractiveness_experiment(
            &snapshot,
            ae,
            cfg.analysis.contractiveness_trials,
            cfg.analysis.samples_per_trial,
            regime,
            seed,
        )?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.regime.name(),
            r.trials,
            r.mean_mse_samples,
            r.se_samples,
            r.mean_mse_features,
            r.se_features,
            r.mean_mse_reconstructions,
            r.se_reconstructions
        );
    }
    let path = run_dir.join("contractiveness.csv");
    fs::write(&path, out.as_bytes())?;
    Ok(path)
}

fn analyze_drift(run_dir: &Path) -> Result<PathBuf> {
    let metrics_path = run_dir.join("metrics.csv");
    if !metrics_path.is_file() {
        return Err(Error::MissingCheckpoint(metrics_path.display().to_string()));
    }
    let text = fs::read_to_string(&metrics_path)?;
    let mut out = String::from("task,epoch,drift\n");
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        // columns: run_id,strategy,seed,phase,task,epoch,...,drift at 12
        if cols.len() > 12 && cols[3] == "drift" && !cols[12].is_empty() {
            let _ = writeln!(out, "{},{},{}", cols[4], cols[5], cols[12]);
        }
    }
    let path = run_dir.join("drift.csv");
    fs::write(&path, out.as_bytes())?;
    Ok(path)
}

fn analyze_bounds(cfg: &RunConfig, run_dir: &Path) -> Result<PathBuf> {
    let model = load_model(&run_dir.join("checkpoints/model.ebll"))?;
    let reference = load_model(&run_dir.join("checkpoints/model_after_task0.ebll"))?;
    let memory = load_memory(&run_dir.join("checkpoints/memory.ebll"))?;
    let ae = first_encoder(&memory)?;
    let tasks = cfg.build_tasks(cfg.seed)?;
    if tasks.len() < 2 {
        return Err(Error::Config(
            "bounds analysis needs at least two tasks".into(),
        ));
    }
    let terms = bound_decomposition(
        &model,
        &reference.snapshot(),
        ae,
        &tasks[0].test,
        &tasks[1].test,
    )?;
    let named = terms.named();
    let mut out = String::new();
    out.push_str(
        &named
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    out.push_str(
        &named
            .iter()
            .map(|(_, v)| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    let path = run_dir.join("bounds.csv");
    fs::write(&path, out.as_bytes())?;
    Ok(path)
}
