//! `generate`: transformed copies of the configured train and test sets in
//! the split store format, with one sidecar row of drawn parameters per
//! image.

use std::path::{Path, PathBuf};

use rotens::data::{generate_transformed, write_sidecar, write_split, TransformRegime};

use crate::config::ExperimentConfig;
use crate::datasets::load_raw;
use crate::grid::CONFIG_FILE;
use crate::{write_file, CliError, Result};

pub fn sidecar_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.draws.csv"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dir: PathBuf,
    pub train: usize,
    pub test: usize,
}

/// Writes `train`/`test` splits, their sidecars and the resolved config into
/// `out`. Pixels stay in `[0, 1]` with black outside the frame; a training
/// config reading the store applies its own normalization.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Generated> {
    let (train, test) = load_raw(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut counts = [0; 2];
    for (i, (split, data, seed)) in [
        ("train", &train, cfg.train_regime_seed),
        ("test", &test, cfg.test_regime_seed),
    ]
    .into_iter()
    .enumerate()
    {
        let t = generate_transformed(data, &TransformRegime::new(cfg.regime, seed))?;
        write_split(out, split, &t)?;
        write_sidecar(&sidecar_path(out, split), &t.meta().draws)?;
        counts[i] = t.len();
    }
    write_file(&out.join(CONFIG_FILE), cfg.canonical())?;
    Ok(Generated {
        dir: out.to_path_buf(),
        train: counts[0],
        test: counts[1],
    })
}
