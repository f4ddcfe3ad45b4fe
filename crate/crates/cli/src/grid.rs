//! `train`: one run directory per grid cell, named by the hash of the cell's
//! frozen config. Cells whose training is identical (the plain and
//! score-averaging modes on the same data) share one fit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rotens::data::Dataset;
use rotens::model::{build_small_cnn, ModeKind, ModelGraph};
use rotens::tensor::{read_checkpoint, write_checkpoint};
use rotens::train::{evaluate_chunked, fit_observed, RunRecord, TrainConfig, TrainError, TrainSet};
use rotens::InferenceMode;
use serde::{Deserialize, Serialize};

use crate::config::{content_hash, Cell, ExperimentConfig, TrainData};
use crate::datasets::{prepare, Prepared, CLASSES};
use crate::{write_file, CliError, Result};

pub const CELL_FILE: &str = "cell.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const GRID_FILE: &str = "grid.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub label: String,
    pub mode: ModeKind,
    pub train_data: String,
    pub dataset_key: String,
    pub regime: String,
    pub seed: u64,
    pub transforms: Vec<u32>,
    /// Test accuracy in the cell's own mode after the last epoch.
    pub test_accuracy: f64,
    pub model_warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub dir: PathBuf,
    pub summary: CellSummary,
    pub record: RunRecord,
}

pub fn cell_dir_name(cfg: &ExperimentConfig, cell: Cell) -> String {
    format!(
        "{}-{}-{}",
        cell.mode,
        cell.train_data.as_str(),
        content_hash(&cfg.cell_text(cell))
    )
}

pub fn inference_mode(cfg: &ExperimentConfig, mode: ModeKind) -> Result<InferenceMode> {
    Ok(InferenceMode::new(mode, cfg.transforms.clone())?)
}

/// The mode a cell is trained in: score averaging only acts at test time.
fn training_mode(cfg: &ExperimentConfig, mode: ModeKind) -> Result<InferenceMode> {
    if mode.is_feature_ensemble() {
        inference_mode(cfg, mode)
    } else {
        Ok(InferenceMode::plain())
    }
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<ModelGraph> {
    let m = build_small_cnn(CLASSES, [1, 28, 28], cfg.widths, cfg.model_seed)?;
    match cfg.split_index {
        None => Ok(m),
        Some(s) => Ok(ModelGraph::new(m.layers().to_vec(), s, m.input_shape())?),
    }
}

pub fn train_config(cfg: &ExperimentConfig, mode: InferenceMode) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed: cfg.shuffle_seed,
        mode,
        schedule: cfg.schedule,
        eval_every: cfg.eval_every,
        eval_chunk: cfg.eval_chunk,
    }
}

/// Identifies the data a config reads, so analyses can share loaded sets.
pub fn dataset_key(cfg: &ExperimentConfig) -> String {
    cfg.canonical()
        .lines()
        .filter(|l| {
            [
                "dataset",
                "data_dir",
                "store_dir",
                "train_",
                "test_",
                "norm_",
                "regime",
            ]
            .iter()
            .any(|k| l.starts_with(k))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model.to_checkpoint())
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_file(path, bytes)
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let f = std::fs::File::open(path)
        .map_err(|e| CliError::Data(format!("missing checkpoint {}: {e}", path.display())))?;
    let entries = read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(ModelGraph::from_checkpoint(&entries)?)
}

struct Group {
    train_data: TrainData,
    mode: InferenceMode,
    cells: Vec<Cell>,
}

fn groups(cfg: &ExperimentConfig) -> Result<Vec<Group>> {
    let mut out: Vec<Group> = Vec::new();
    for &cell in &cfg.cells {
        let mode = training_mode(cfg, cell.mode)?;
        match out
            .iter_mut()
            .find(|g| g.train_data == cell.train_data && g.mode == mode)
        {
            Some(g) => g.cells.push(cell),
            None => out.push(Group {
                train_data: cell.train_data,
                mode,
                cells: vec![cell],
            }),
        }
    }
    Ok(out)
}

fn train_set<'a>(prep: &'a Prepared, data: TrainData) -> Result<TrainSet<'a>> {
    match (data, &prep.resample, &prep.train_transformed) {
        (TrainData::Original, _, _) => Ok(TrainSet::Fixed(&prep.train_original)),
        (TrainData::Transformed, Some(regime), _) => Ok(TrainSet::Resampled {
            source: &prep.train_original,
            regime: *regime,
        }),
        (TrainData::Transformed, None, Some(d)) => Ok(TrainSet::Fixed(d)),
        // regime none: the original data is the transformed data
        (TrainData::Transformed, None, None) => Ok(TrainSet::Fixed(&prep.train_original)),
    }
}

fn write_cell(
    cfg: &ExperimentConfig,
    out: &Path,
    cell: Cell,
    model: &ModelGraph,
    record: &RunRecord,
    test_accuracy: f64,
) -> Result<CellOutcome> {
    let dir = out.join(cell_dir_name(cfg, cell));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_file(&dir.join(CONFIG_FILE), cfg.cell_text(cell))?;
    save_model(&dir.join(CHECKPOINT_FILE), model)?;
    let mut record = record.clone();
    record.checkpoint = Some(CHECKPOINT_FILE.to_string());
    record.write_to(&dir)?;
    let summary = CellSummary {
        cell: cell.key(),
        label: cell.label(),
        mode: cell.mode,
        train_data: cell.train_data.as_str().into(),
        dataset_key: dataset_key(cfg),
        regime: cfg.regime.to_string(),
        seed: cfg.seed,
        transforms: cfg.transforms.iter().map(|t| t.degrees()).collect(),
        test_accuracy,
        model_warnings: model.warnings().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    write_file(&dir.join(CELL_FILE), text)?;
    Ok(CellOutcome {
        cell,
        dir,
        summary,
        record,
    })
}

/// Adds this config's cells to `<out>/grid.json` (dir name → cell key).
fn register(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join(GRID_FILE);
    let mut index: BTreeMap<String, String> = match std::fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        Err(_) => BTreeMap::new(),
    };
    for &cell in &cfg.cells {
        index.insert(cell_dir_name(cfg, cell), cell.key());
    }
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    write_file(&path, text)
}

fn run_group(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    out: &Path,
    group: &Group,
    progress: bool,
) -> Result<Vec<CellOutcome>> {
    let mut model = build_model(cfg)?;
    let tcfg = train_config(cfg, group.mode.clone());
    let names: Vec<String> = group.cells.iter().map(Cell::label).collect();
    let tag = format!("[seed {} {}]", cfg.seed, names.join(" "));
    let fitted = fit_observed(
        &mut model,
        train_set(prep, group.train_data)?,
        Some(&prep.test),
        &tcfg,
        |e| {
            if progress {
                let test = e
                    .test_accuracy
                    .map_or(String::from("-"), |a| format!("{a:.4}"));
                eprintln!(
                    "{tag} epoch {}/{} lr {:.2e} loss {:.4} train {:.4} test {test}",
                    e.epoch + 1,
                    tcfg.epochs,
                    e.lr,
                    e.train_loss,
                    e.train_accuracy
                );
            }
        },
    );
    let record = match fitted {
        Ok(r) => r,
        Err(TrainError::Divergence {
            epoch,
            batch,
            loss,
            record,
        }) => {
            for &cell in &group.cells {
                let dir = out.join(cell_dir_name(cfg, cell));
                write_file(&dir.join(CONFIG_FILE), cfg.cell_text(cell))?;
                record.write_to(&dir)?;
            }
            return Err(CliError::Divergence(format!(
                "{tag}: loss {loss} at epoch {epoch}, batch {batch}; partial records written"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    group
        .cells
        .iter()
        .map(|&cell| {
            let mode = inference_mode(cfg, cell.mode)?;
            let acc = match record.final_test_accuracy {
                Some(a) if cell.mode == tcfg.mode.kind() => a,
                _ => evaluate_chunked(&model, &prep.test, &mode, cfg.eval_chunk)?,
            };
            write_cell(cfg, out, cell, &model, &record, acc)
        })
        .collect()
}

/// Trains every cell of `cfg` into `out`, running up to `jobs` fits at once.
pub fn run_train(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    progress: bool,
) -> Result<Vec<CellOutcome>> {
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    register(cfg, out)?;
    let groups = groups(cfg)?;
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(usize, Result<Vec<CellOutcome>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, groups.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(g) = groups.get(i) else { break };
                let r = run_group(cfg, &prep, out, g, progress);
                results.lock().expect("lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("lock");
    results.sort_by_key(|r| r.0);
    let mut outcomes = Vec::new();
    for (_, r) in results {
        outcomes.extend(r?);
    }
    // report cells in config order
    outcomes.sort_by_key(|o| cfg.cells.iter().position(|&c| c == o.cell));
    Ok(outcomes)
}

/// Run directories under `dir`: `dir` itself when it holds a frozen
/// config, otherwise its immediate subdirectories that do, sorted by name.
pub fn cell_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(CONFIG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_summary(dir: &Path) -> Result<CellSummary> {
    let p = dir.join(CELL_FILE);
    let text =
        std::fs::read_to_string(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// Test set of the untransformed data, shared across cells with the same
/// data settings.
pub(crate) struct TestCache {
    sets: BTreeMap<String, Dataset>,
}

impl TestCache {
    pub(crate) fn new() -> Self {
        Self {
            sets: BTreeMap::new(),
        }
    }

    pub(crate) fn original(&mut self, cfg: &ExperimentConfig) -> Result<&Dataset> {
        let key = dataset_key(cfg);
        if !self.sets.contains_key(&key) {
            let set = crate::datasets::prepare_test_original(cfg)?;
            self.sets.insert(key.clone(), set);
        }
        Ok(&self.sets[&key])
    }
}
