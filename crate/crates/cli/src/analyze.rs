//! `analyze-c4`: accuracy of each trained cell on the untransformed test set
//! turned by each quarter turn.

use std::path::{Path, PathBuf};

use rotens::model::ModeKind;
use rotens::train::evaluate_chunked;
use rotens::QuarterTurn;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::grid::{
    cell_dirs, inference_mode, load_model, read_summary, TestCache, CHECKPOINT_FILE, CONFIG_FILE,
};
use crate::{CliError, Result};

pub const C4_FILE: &str = "c4.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct C4Row {
    pub run: String,
    pub label: String,
    pub mode: ModeKind,
    pub seed: u64,
    pub angle: u32,
    pub accuracy: f64,
}

/// Evaluates every run under `dir` and writes `<dir>/c4.csv`.
pub fn analyze_c4(dir: &Path) -> Result<(Vec<C4Row>, PathBuf)> {
    let runs = cell_dirs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Data(format!(
            "no run directories under {}",
            dir.display()
        )));
    }
    let mut cache = TestCache::new();
    let mut rows = Vec::new();
    for run in &runs {
        let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
        let cell = *cfg.cells.first().expect("frozen configs hold one cell");
        let model = load_model(&run.join(CHECKPOINT_FILE))?;
        let mode = inference_mode(&cfg, cell.mode)?;
        let label = read_summary(run).map_or_else(|_| cell.label(), |s| s.label);
        let test = cache.original(&cfg)?;
        for turn in QuarterTurn::ALL {
            let rotated = test.rotated(turn)?;
            let accuracy = evaluate_chunked(&model, &rotated, &mode, cfg.eval_chunk)?;
            rows.push(C4Row {
                run: run
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                label: label.clone(),
                mode: cell.mode,
                seed: cfg.seed,
                angle: turn.degrees(),
                accuracy,
            });
        }
    }
    let path = dir.join(C4_FILE);
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok((rows, path))
}
