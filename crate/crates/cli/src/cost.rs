//! Wall time of the gradient and Fisher estimators, and importance storage.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use selfreeze_core::data::samples;
use selfreeze_core::importance::{fisher_diag, grad_importance, ImportanceMap};
use selfreeze_core::model::{encode_checkpoint, importance_section_len, TinyLm, IMPT_ENTRY_OVERHEAD, IMPT_FIXED_HEADER};
use selfreeze_core::Error;

use crate::data::DataBundle;
use crate::error::{Result, StageExt};
use crate::pipeline::{write_json, write_text};

pub const COST_JSON: &str = "cost.json";
pub const COST_TXT: &str = "cost.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub samples: usize,
    pub scalars: usize,
    pub grad_ms: f64,
    pub fisher_ms: f64,
    /// Bytes the IMPT section adds to a checkpoint, measured by encoding.
    pub importance_bytes: usize,
    /// `8N` plus the fixed header and per-entry framing.
    pub predicted_bytes: usize,
    pub header_bytes: usize,
}

/// Bytes `imap` adds to an encoded checkpoint of `model`.
pub fn measured_importance_bytes(model: &TinyLm, imap: &ImportanceMap) -> selfreeze_core::Result<usize> {
    let without = encode_checkpoint(model, None, None)?.len();
    let with = encode_checkpoint(model, Some(imap), None)?.len();
    Ok(with - without)
}

pub fn header_bytes(imap: &ImportanceMap) -> usize {
    IMPT_FIXED_HEADER + imap.iter().map(|(id, _)| IMPT_ENTRY_OVERHEAD + id.len()).sum::<usize>()
}

/// Times both estimators over the first `n` general training samples.
pub fn measure(model: &TinyLm, data: &DataBundle, n: usize) -> Result<CostReport> {
    if n == 0 {
        return Err(Error::Data("cost needs at least one sample".into())).stage("cost");
    }
    let all = samples(&data.general.train, model.config().context).stage("cost")?;
    if all.len() < n {
        return Err(Error::Data(format!("asked for {n} samples, general corpus has {}", all.len()))).stage("cost");
    }
    let subset = &all[..n];
    let t = Instant::now();
    let grad = grad_importance(model, subset, n).stage("cost")?;
    let grad_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    fisher_diag(model, subset, n).stage("cost")?;
    let fisher_ms = t.elapsed().as_secs_f64() * 1e3;
    let importance_bytes = measured_importance_bytes(model, &grad).stage("cost")?;
    Ok(CostReport {
        samples: n,
        scalars: grad.total_scalars(),
        grad_ms,
        fisher_ms,
        importance_bytes,
        predicted_bytes: importance_section_len(&grad),
        header_bytes: header_bytes(&grad),
    })
}

pub fn render(r: &CostReport) -> String {
    format!(
        "samples {}\nscalars {}\ngrad_ms {:.3}\nfisher_ms {:.3}\nimportance_bytes {} (8N = {}, header {})\n",
        r.samples,
        r.scalars,
        r.grad_ms,
        r.fisher_ms,
        r.importance_bytes,
        8 * r.scalars,
        r.header_bytes
    )
}

pub fn write(dir: &Path, r: &CostReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::CliError::io(dir, e))?;
    write_json(&dir.join(COST_JSON), r)?;
    write_text(&dir.join(COST_TXT), &render(r))
}
