use std::path::{Path, PathBuf};

use rotens::data::{
    self, generate_transformed, Dataset, Normalization, RegimeKind, TransformRegime,
};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::{CliError, Result};

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const MNIST_ROT_TRAIN: &str = "mnist_all_rotation_normalized_float_train_valid.amat";
pub const MNIST_ROT_TEST: &str = "mnist_all_rotation_normalized_float_test.amat";
pub const CLASSES: usize = 10;

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Data(format!(
            "missing {}: {hint}",
            path.display()
        )))
    }
}

fn window(d: Dataset, offset: usize, count: Option<usize>, what: &str) -> Result<Dataset> {
    let end = match count {
        Some(c) => offset + c,
        None => d.len(),
    };
    if end > d.len() || offset > end {
        return Err(CliError::Data(format!(
            "{what}: asked for items [{offset}, {end}) but the source has {}",
            d.len()
        )));
    }
    Ok(d.subset(offset, end)?)
}

fn mnist_paths(dir: &Path) -> Result<[PathBuf; 4]> {
    let hint = "place the uncompressed MNIST IDX files in <data_dir>/mnist";
    let p = |i: usize| require(dir.join("mnist").join(MNIST_FILES[i]), hint);
    Ok([p(0)?, p(1)?, p(2)?, p(3)?])
}

pub fn read_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [ti, tl, si, sl] = mnist_paths(dir)?;
    Ok((data::read_idx(&ti, &tl)?, data::read_idx(&si, &sl)?))
}

/// Training and test sources in `[0, 1]`, before any transform.
pub fn load_raw(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => read_mnist(&cfg.data_dir()?)?,
        DatasetKind::MnistRot => {
            let dir = cfg.data_dir()?.join("mnist_rot");
            let hint = "place the mnist-rot .amat files in <data_dir>/mnist_rot (or build a stand-in with make-mnist-rot)";
            (
                data::read_amat(&require(dir.join(MNIST_ROT_TRAIN), hint)?)?,
                data::read_amat(&require(dir.join(MNIST_ROT_TEST), hint)?)?,
            )
        }
        DatasetKind::Store => {
            let dir = cfg.store_dir.as_ref().expect("validated");
            let hint = "run `rotens generate` first and point store_dir at its output";
            require(data::split_paths(dir, "train").0, hint)?;
            require(data::split_paths(dir, "test").0, hint)?;
            (
                data::read_split(dir, "train")?,
                data::read_split(dir, "test")?,
            )
        }
    };
    let train = window(
        train.with_classes(CLASSES)?,
        cfg.train_offset,
        cfg.train_count,
        "train",
    )?;
    let test = window(
        test.with_classes(CLASSES)?,
        cfg.test_offset,
        cfg.test_count,
        "test",
    )?;
    Ok((train, test))
}

pub fn normalization(cfg: &ExperimentConfig) -> Normalization {
    Normalization {
        mean: cfg.norm_mean,
        std: cfg.norm_std,
    }
}

/// Regime for standardized images: out-of-frame pixels get the
/// standardized value of black.
fn standardized_regime(cfg: &ExperimentConfig, seed: u64) -> TransformRegime {
    TransformRegime {
        fill: (0.0 - cfg.norm_mean) / cfg.norm_std,
        ..TransformRegime::new(cfg.regime, seed)
    }
}

/// Standardized datasets for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train_original: Dataset,
    /// `None` when the regime is `none`.
    pub train_transformed: Option<Dataset>,
    /// Test set under the regime (the original one for `none`).
    pub test: Dataset,
    pub test_original: Dataset,
    /// Set when training data is resampled every epoch.
    pub resample: Option<TransformRegime>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (mut train, mut test) = load_raw(cfg)?;
    let norm = normalization(cfg);
    train.standardize(norm)?;
    test.standardize(norm)?;
    if cfg.regime == RegimeKind::None {
        return Ok(Prepared {
            train_original: train,
            train_transformed: None,
            test: test.clone(),
            test_original: test,
            resample: None,
        });
    }
    let train_regime = standardized_regime(cfg, cfg.train_regime_seed);
    let test_t = generate_transformed(&test, &standardized_regime(cfg, cfg.test_regime_seed))?;
    Ok(Prepared {
        train_transformed: Some(generate_transformed(&train, &train_regime)?),
        train_original: train,
        test: test_t,
        test_original: test,
        resample: cfg.resample.then_some(train_regime),
    })
}

/// Only the untransformed, standardized test set.
pub fn prepare_test_original(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (_, mut test) = load_raw(cfg)?;
    test.standardize(normalization(cfg))?;
    Ok(test)
}
