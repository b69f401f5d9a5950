//! Runs several strategies from one shared general stage and tabulates them.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use selfreeze_core::training::Strategy;

use crate::config::{write_normalized, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRecord, MetricsSink, METRICS_CSV, METRICS_JSONL};
use crate::pipeline::{
    needs_general_path, prepare, run_general, run_strategy, write_json, write_text, GeneralOutcome, Prepared,
    RunCtx, StrategyOutcome, GENERAL_CKPT,
};

pub const MATRIX_JSON: &str = "matrix.json";
pub const MATRIX_TXT: &str = "matrix.txt";
pub const GENERAL_DIR: &str = "general";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub run_id: String,
    pub init_sha256: String,
    pub data_sha256: String,
    /// SHA-256 of the general model every strategy started from.
    pub general_sha256: String,
    pub general_interrupted: bool,
    pub rows: Vec<StrategyOutcome>,
}

/// One config per strategy. A single config expands over `matrix.strategies`.
pub fn expand(configs: Vec<ExperimentConfig>) -> Result<Vec<ExperimentConfig>> {
    let configs = match configs.as_slice() {
        [] => return Err(CliError::config("matrix needs at least one config")),
        [one] => {
            let mut out = Vec::new();
            for name in &one.matrix.strategies {
                let s: Strategy = name.parse().map_err(|e: selfreeze_core::Error| CliError::config(e.to_string()))?;
                out.push(one.with_strategy(s));
            }
            out
        }
        _ => configs,
    };
    let mut errors = Vec::new();
    let shared = configs[0].shared_fingerprint();
    for (i, c) in configs.iter().enumerate().skip(1) {
        for ((key, a), (_, b)) in shared.iter().zip(c.shared_fingerprint()) {
            if *a != b {
                errors.push(format!("config {} differs from config 0 in [{key}]", i));
            }
        }
        if c.run_id != configs[0].run_id || c.out_dir() != configs[0].out_dir() {
            errors.push(format!("config {i} must share run_id and output.dir with config 0"));
        }
    }
    for (i, c) in configs.iter().enumerate() {
        if configs[..i].iter().any(|p| p.strategy() == c.strategy()) {
            errors.push(format!("strategy {} appears more than once", c.strategy()));
        }
    }
    if errors.is_empty() {
        Ok(configs)
    } else {
        Err(CliError::Config(errors))
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    general: &GeneralOutcome,
    root: &Path,
) -> Result<(StrategyOutcome, Vec<MetricsRecord>)> {
    let strategy = cfg.strategy();
    let dir = root.join(strategy.as_str());
    write_normalized(cfg, &dir)?;
    let mut sink = MetricsSink::create(&dir)?;
    let mut ctx = RunCtx::new(cfg, strategy.as_str(), &dir, &mut sink);
    let outcome = run_strategy(cfg, prep, general, &mut ctx)?;
    write_json(&dir.join(crate::pipeline::REPORT_JSON), &outcome)?;
    write_text(&dir.join(crate::pipeline::REPORT_TXT), &crate::pipeline::render_outcome(&outcome))?;
    Ok((outcome, sink.rows().to_vec()))
}

/// Runs every strategy into `<output.dir>/<strategy>/` after one shared
/// general stage in `<output.dir>/general/`.
pub fn run_matrix(configs: Vec<ExperimentConfig>) -> Result<MatrixReport> {
    let configs = expand(configs)?;
    let first = &configs[0];
    let root = first.out_dir();
    fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
    for name in [METRICS_CSV, METRICS_JSONL] {
        let p = root.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }

    let prep = prepare(first)?;
    let general_dir = root.join(GENERAL_DIR);
    // path scores are recorded whenever any strategy will read them
    let path_cfg = configs.iter().find(|c| needs_general_path(c)).unwrap_or(first);
    write_normalized(path_cfg, &general_dir)?;
    let mut general_sink = MetricsSink::create(&general_dir)?;
    let general = {
        let mut ctx = RunCtx::new(path_cfg, GENERAL_DIR, &general_dir, &mut general_sink);
        run_general(path_cfg, &prep, &mut ctx, configs.iter().any(needs_general_path))?
    };
    let general_bytes = fs::read(general_dir.join(GENERAL_CKPT)).ok();
    let general_sha256 = general_bytes.as_deref().map(crate::data::sha256_hex).unwrap_or_default();

    let mut combined = MetricsSink::create(&root)?;
    for r in general_sink.rows() {
        combined.append(r.clone())?;
    }
    let mut report = MatrixReport {
        run_id: first.run_id.clone(),
        init_sha256: prep.init_sha256.clone(),
        data_sha256: prep.data_sha256.clone(),
        general_sha256,
        general_interrupted: general.interrupted,
        rows: Vec::new(),
    };
    if !general.interrupted {
        let results: Vec<Result<(StrategyOutcome, Vec<MetricsRecord>)>> = if first.matrix.parallel {
            configs.par_iter().map(|c| run_one(c, &prep, &general, &root)).collect()
        } else {
            configs.iter().map(|c| run_one(c, &prep, &general, &root)).collect()
        };
        for r in results {
            let (outcome, rows) = r?;
            for row in rows {
                combined.append(row)?;
            }
            report.rows.push(outcome);
        }
        check_fairness(&report)?;
    }
    write_json(&root.join(MATRIX_JSON), &report)?;
    write_text(&root.join(MATRIX_TXT), &render_matrix(&report))?;
    Ok(report)
}

/// Every strategy must start from the same model and data.
pub fn check_fairness(report: &MatrixReport) -> Result<()> {
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.start_sha256 != report.rows[0].start_sha256 || r.data_sha256 != report.data_sha256)
        .map(|r| format!("strategy {} did not start from the shared general model", r.strategy))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(bad))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn render_matrix(report: &MatrixReport) -> String {
    let mut s = format!("run {}\n", report.run_id);
    if report.general_interrupted {
        s.push_str("general stage interrupted; no strategies ran\n");
        return s;
    }
    s.push_str(&format!(
        "{:<12} {:>12} {:>12} {:>12} {:>12} {:>16} {:>10}\n",
        "strategy", "general_ppl", "general_acc", "domain_ppl", "domain_acc", "delta_gen_ppl", "core_frac"
    ));
    for r in &report.rows {
        s.push_str(&format!(
            "{:<12} {:>12.4} {:>12} {:>12.4} {:>12} {:>16.4} {:>10}\n",
            r.strategy.as_str(),
            r.post.general.ppl,
            opt(r.post.general.accuracy),
            r.post.domain.ppl,
            opt(r.post.domain.accuracy),
            r.delta_general_ppl,
            opt(r.core_fraction),
        ));
    }
    s
}

/// Looks up a strategy's row.
pub fn row(report: &MatrixReport, strategy: Strategy) -> Option<&StrategyOutcome> {
    report.rows.iter().find(|r| r.strategy == strategy)
}
