//! `key = value` experiment files.
//!
//! Blank lines and `#` comments are ignored, keys may appear once, and
//! unknown keys are errors. Resolution fills defaults and derives the
//! per-purpose seeds from `seed`; the resolved form is written back out in a
//! fixed key order and hashed to name run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rotens::data::RegimeKind;
use rotens::model::{Arch, ModeKind, DEFAULT_WIDTHS};
use rotens::train::Schedule;
use rotens::QuarterTurn;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "ROTENS_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX files under `<data_dir>/mnist`.
    Mnist,
    /// `.amat` files under `<data_dir>/mnist_rot`.
    MnistRot,
    /// `train`/`test` splits written by `generate`, under `store_dir`.
    Store,
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::MnistRot => "mnist_rot",
            DatasetKind::Store => "store",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "mnist_rot" => Ok(DatasetKind::MnistRot),
            "store" => Ok(DatasetKind::Store),
            other => Err(format!(
                "unknown dataset '{other}' (expected mnist, mnist_rot or store)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainData {
    Original,
    Transformed,
}

impl TrainData {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainData::Original => "original",
            TrainData::Transformed => "transformed",
        }
    }
}

impl FromStr for TrainData {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "original" => Ok(TrainData::Original),
            "transformed" => Ok(TrainData::Transformed),
            other => Err(format!(
                "unknown training data '{other}' (expected original or transformed)"
            )),
        }
    }
}

/// One grid entry: an inference mode paired with the data it trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub mode: ModeKind,
    pub train_data: TrainData,
}

impl Cell {
    /// Row label in reports: BS/DA for the training data, `+max`/`+mean`
    /// for score averaging, `Ours(..)` for the feature-map ensembles.
    pub fn label(&self) -> String {
        let base = match self.train_data {
            TrainData::Original => "BS",
            TrainData::Transformed => "DA",
        };
        match (self.mode, self.train_data) {
            (ModeKind::Plain, _) => base.to_string(),
            (ModeKind::TtaMax, _) => format!("{base}+max"),
            (ModeKind::TtaMean, _) => format!("{base}+mean"),
            (ModeKind::OursMax, TrainData::Transformed) => "Ours(max)".into(),
            (ModeKind::OursMean, TrainData::Transformed) => "Ours(mean)".into(),
            (ModeKind::OursMax, TrainData::Original) => "BS+Ours(max)".into(),
            (ModeKind::OursMean, TrainData::Original) => "BS+Ours(mean)".into(),
        }
    }

    pub fn key(&self) -> String {
        format!("{}:{}", self.mode, self.train_data.as_str())
    }
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (mode, data) = s.split_once(':').ok_or_else(|| {
            format!("cell '{s}' must look like mode:original or mode:transformed")
        })?;
        Ok(Cell {
            mode: mode.trim().parse()?,
            train_data: data.trim().parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
    pub train_offset: usize,
    pub train_count: Option<usize>,
    pub test_offset: usize,
    pub test_count: Option<usize>,
    pub norm_mean: f64,
    pub norm_std: f64,

    pub regime: RegimeKind,
    pub train_regime_seed: u64,
    pub test_regime_seed: u64,
    pub resample: bool,

    pub arch: Arch,
    pub widths: [usize; 4],
    pub split_index: Option<usize>,
    pub model_seed: u64,

    pub cells: Vec<Cell>,
    pub transforms: Vec<QuarterTurn>,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub shuffle_seed: u64,
    pub eval_every: usize,
    pub eval_chunk: usize,

    pub seed: u64,
    /// Where `train` and `generate` write when `--out` is not given. Not
    /// part of the canonical form, so moving a grid keeps its run names.
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "store_dir",
    "train_offset",
    "train_count",
    "test_offset",
    "test_count",
    "norm_mean",
    "norm_std",
    "regime",
    "train_regime_seed",
    "test_regime_seed",
    "resample",
    "arch",
    "widths",
    "split_index",
    "model_seed",
    "modes",
    "train_data",
    "cells",
    "transforms",
    "epochs",
    "batch_size",
    "lr_start",
    "lr_end",
    "momentum",
    "weight_decay",
    "schedule",
    "shuffle_seed",
    "eval_every",
    "eval_chunk",
    "seed",
    "out_dir",
];

/// Mixes `seed` with a purpose tag so derived seeds are unrelated streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

struct Raw {
    map: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("line {line}: {key}: {e}"))),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    /// Like `take`, with `none_word` standing for "not set".
    fn take_opt<T: FromStr>(&mut self, key: &str, none_word: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.map.get(key).is_some_and(|(_, v)| v == none_word) {
            self.map.remove(key);
            return Ok(None);
        }
        self.take(key)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {n}: expected 'key = value'")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(CliError::Config(format!("line {n}: unknown key '{k}'")));
            }
            if map
                .insert(k.to_string(), (n, v.trim().to_string()))
                .is_some()
            {
                return Err(CliError::Config(format!("line {n}: key '{k}' given twice")));
            }
        }
        Self::resolve(Raw { map })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(mut raw: Raw) -> Result<Self, CliError> {
        let seed: u64 = raw.take("seed")?.unwrap_or(0);
        let dataset: DatasetKind = raw.take("dataset")?.unwrap_or(DatasetKind::Mnist);
        let bad = |m: String| CliError::Config(m);

        let widths = match raw.take_raw("widths") {
            None => DEFAULT_WIDTHS,
            Some((line, v)) => {
                let w: Vec<usize> = list(&v)
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(format!("line {line}: widths: {e}")))?;
                w.try_into()
                    .map_err(|_| bad(format!("line {line}: widths needs exactly four values")))?
            }
        };

        let transforms = match raw.take_raw("transforms") {
            None => QuarterTurn::ALL.to_vec(),
            Some((line, v)) => list(&v)
                .map(|s| {
                    s.parse::<u32>()
                        .ok()
                        .and_then(QuarterTurn::from_degrees)
                        .ok_or_else(|| {
                            bad(format!(
                                "line {line}: transforms: '{s}' is not 0, 90, 180 or 270"
                            ))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        if transforms.is_empty() {
            return Err(bad("transforms must list at least one angle".into()));
        }

        let explicit_cells = raw.take_raw("cells");
        let modes = raw.take_raw("modes");
        let train_data = raw.take_raw("train_data");
        let cells = match explicit_cells {
            Some((line, v)) => {
                if modes.is_some() || train_data.is_some() {
                    return Err(bad(format!(
                        "line {line}: cells cannot be combined with modes or train_data"
                    )));
                }
                list(&v)
                    .map(|s| {
                        s.parse::<Cell>()
                            .map_err(|e| bad(format!("line {line}: cells: {e}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => {
                let modes: Vec<ModeKind> = match modes {
                    None => vec![ModeKind::Plain],
                    Some((line, v)) => list(&v)
                        .map(|s| {
                            s.parse()
                                .map_err(|e| bad(format!("line {line}: modes: {e}")))
                        })
                        .collect::<Result<_, _>>()?,
                };
                let data: Vec<TrainData> = match train_data {
                    None => vec![TrainData::Transformed],
                    Some((_, v)) if v == "both" => {
                        vec![TrainData::Original, TrainData::Transformed]
                    }
                    Some((line, v)) => vec![v
                        .parse()
                        .map_err(|e| bad(format!("line {line}: train_data: {e}")))?],
                };
                let both = data.len() == 2;
                let mut cells = Vec::new();
                for &train_data in &data {
                    for &mode in &modes {
                        // In a full grid the feature-map ensembles train on
                        // transformed data only.
                        if both && mode.is_feature_ensemble() && train_data == TrainData::Original {
                            continue;
                        }
                        cells.push(Cell { mode, train_data });
                    }
                }
                cells
            }
        };
        if cells.is_empty() {
            return Err(bad("no grid cells selected".into()));
        }
        let mut seen = cells.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != cells.len() {
            return Err(bad("grid lists the same cell twice".into()));
        }

        let cfg = ExperimentConfig {
            dataset,
            data_dir: raw.take_opt::<PathBuf>("data_dir", "-")?,
            store_dir: raw.take_opt::<PathBuf>("store_dir", "-")?,
            train_offset: raw.take("train_offset")?.unwrap_or(0),
            train_count: raw.take_opt("train_count", "all")?,
            test_offset: raw.take("test_offset")?.unwrap_or(0),
            test_count: raw.take_opt("test_count", "all")?,
            norm_mean: raw.take("norm_mean")?.unwrap_or(0.1307),
            norm_std: raw.take("norm_std")?.unwrap_or(0.3081),
            regime: raw.take("regime")?.unwrap_or(match dataset {
                DatasetKind::Mnist => RegimeKind::A,
                DatasetKind::MnistRot | DatasetKind::Store => RegimeKind::None,
            }),
            train_regime_seed: raw
                .take("train_regime_seed")?
                .unwrap_or(derive_seed(seed, "train-regime")),
            test_regime_seed: raw
                .take("test_regime_seed")?
                .unwrap_or(derive_seed(seed, "test-regime")),
            resample: raw.take("resample")?.unwrap_or(false),
            arch: raw.take("arch")?.unwrap_or(Arch::SmallCnn),
            widths,
            split_index: raw.take_opt("split_index", "default")?,
            model_seed: raw
                .take("model_seed")?
                .unwrap_or(derive_seed(seed, "model")),
            cells,
            transforms,
            epochs: raw.take("epochs")?.unwrap_or(30),
            batch_size: raw.take("batch_size")?.unwrap_or(128),
            lr_start: raw.take("lr_start")?.unwrap_or(0.02),
            lr_end: raw.take("lr_end")?.unwrap_or(2e-5),
            momentum: raw.take("momentum")?.unwrap_or(0.9),
            weight_decay: raw.take("weight_decay")?.unwrap_or(5e-4),
            schedule: raw.take("schedule")?.unwrap_or(Schedule::Step),
            shuffle_seed: raw
                .take("shuffle_seed")?
                .unwrap_or(derive_seed(seed, "shuffle")),
            eval_every: raw.take("eval_every")?.unwrap_or(1),
            eval_chunk: raw.take("eval_chunk")?.unwrap_or(256),
            seed,
            out_dir: raw.take_opt::<PathBuf>("out_dir", "-")?,
        };
        debug_assert!(raw.map.is_empty(), "unconsumed keys: {:?}", raw.map.keys());
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.dataset == DatasetKind::Store {
            if self.store_dir.is_none() {
                return bad("dataset = store needs store_dir");
            }
            if self.regime != RegimeKind::None {
                return bad("stored splits are used as written; set regime = none");
            }
        }
        if self.dataset == DatasetKind::MnistRot && self.regime != RegimeKind::None {
            return bad("mnist_rot images are already rotated; set regime = none");
        }
        if self.resample && self.regime == RegimeKind::None {
            return bad("resample needs a transform regime");
        }
        if self.norm_std.is_nan() || self.norm_std <= 0.0 {
            return bad("norm_std must be positive");
        }
        if self.regime == RegimeKind::None
            && self
                .cells
                .iter()
                .any(|c| c.train_data == TrainData::Original)
            && self
                .cells
                .iter()
                .any(|c| c.train_data == TrainData::Transformed)
        {
            return bad(
                "with regime = none original and transformed training data coincide; pick one",
            );
        }
        Ok(())
    }

    /// Rewrites the `seed` and everything derived from it (explicit
    /// overrides of derived seeds are dropped).
    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            train_regime_seed: derive_seed(seed, "train-regime"),
            test_regime_seed: derive_seed(seed, "test-regime"),
            model_seed: derive_seed(seed, "model"),
            shuffle_seed: derive_seed(seed, "shuffle"),
            ..self.clone()
        }
    }

    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                CliError::Config(format!("no data_dir in config and {DATA_DIR_ENV} is unset"))
            })
    }

    /// Every key with its resolved value, one per line in a fixed order.
    /// `cells` replaces `modes`/`train_data`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::from("-"), |p| p.display().to_string())
        };
        let optn = |n: Option<usize>| n.map_or(String::from("all"), |n| n.to_string());
        let join = |v: Vec<String>| v.join(", ");
        let _ = writeln!(s, "dataset = {}", self.dataset.as_str());
        let _ = writeln!(s, "data_dir = {}", opt(&self.data_dir));
        let _ = writeln!(s, "store_dir = {}", opt(&self.store_dir));
        let _ = writeln!(s, "train_offset = {}", self.train_offset);
        let _ = writeln!(s, "train_count = {}", optn(self.train_count));
        let _ = writeln!(s, "test_offset = {}", self.test_offset);
        let _ = writeln!(s, "test_count = {}", optn(self.test_count));
        let _ = writeln!(s, "norm_mean = {:?}", self.norm_mean);
        let _ = writeln!(s, "norm_std = {:?}", self.norm_std);
        let _ = writeln!(s, "regime = {}", self.regime);
        let _ = writeln!(s, "train_regime_seed = {}", self.train_regime_seed);
        let _ = writeln!(s, "test_regime_seed = {}", self.test_regime_seed);
        let _ = writeln!(s, "resample = {}", self.resample);
        let _ = writeln!(s, "arch = small_cnn");
        let _ = writeln!(
            s,
            "widths = {}",
            join(self.widths.iter().map(|w| w.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "split_index = {}",
            self.split_index
                .map_or(String::from("default"), |v| v.to_string())
        );
        let _ = writeln!(s, "model_seed = {}", self.model_seed);
        let _ = writeln!(
            s,
            "cells = {}",
            join(self.cells.iter().map(Cell::key).collect())
        );
        let _ = writeln!(
            s,
            "transforms = {}",
            join(
                self.transforms
                    .iter()
                    .map(|t| t.degrees().to_string())
                    .collect()
            )
        );
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr_start = {:?}", self.lr_start);
        let _ = writeln!(s, "lr_end = {:?}", self.lr_end);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "schedule = {}", self.schedule);
        let _ = writeln!(s, "shuffle_seed = {}", self.shuffle_seed);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_chunk = {}", self.eval_chunk);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// The resolved config narrowed to one cell, as frozen into its run
    /// directory. Parsing it back yields a single-cell config.
    pub fn cell_text(&self, cell: Cell) -> String {
        let single = ExperimentConfig {
            cells: vec![cell],
            ..self.clone()
        };
        single.canonical()
    }
}

/// Hex SHA-256 prefix naming a run directory.
pub fn content_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}
