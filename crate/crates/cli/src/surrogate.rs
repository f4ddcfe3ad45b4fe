//! `make-mnist-rot`: a stand-in for the mnist-rot benchmark built from MNIST,
//! written as `.amat` files under the official names. Digits are rotated by
//! angles drawn uniformly from `[0, 360)`; the split sizes match the
//! benchmark (12 000 training rows, 50 000 test rows).

use std::path::{Path, PathBuf};

use rotens::data::{generate_transformed, write_amat, Dataset, RegimeKind, TransformRegime};

use crate::datasets::{read_mnist, MNIST_ROT_TEST, MNIST_ROT_TRAIN};
use crate::{CliError, Result};

pub const TRAIN_ROWS: usize = 12_000;
pub const TEST_ROWS: usize = 50_000;

/// Pixels kept to six decimals, like the text files of the benchmark.
fn quantize(d: &mut Dataset) {
    let images = d.images().clone();
    let q: Vec<f64> = images
        .data()
        .iter()
        .map(|v| (v * 1e6).round() / 1e6)
        .collect();
    let rebuilt = Dataset::new(
        rotens::Tensor4::from_vec(images.shape(), q).expect("same shape"),
        d.labels().to_vec(),
        Some(d.classes()),
        d.meta().source.clone(),
    )
    .expect("same labels");
    *d = rebuilt;
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let [c, h, w] = a.image_shape();
    let mut data = a.images().data().to_vec();
    data.extend_from_slice(b.images().data());
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let images = rotens::Tensor4::from_vec([labels.len(), c, h, w], data)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Dataset::new(
        images,
        labels,
        Some(a.classes().max(b.classes())),
        "mnist",
    )?)
}

/// Training rows come from MNIST train `[0, 12000)`, test rows from train
/// `[12000, 60000)` followed by t10k `[0, 2000)`. Returns the two paths.
pub fn make_mnist_rot(data_dir: &Path, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let (train_all, t10k) = read_mnist(data_dir)?;
    let extra = TEST_ROWS - (train_all.len() - TRAIN_ROWS);
    if train_all.len() < TRAIN_ROWS || t10k.len() < extra {
        return Err(CliError::Data(format!(
            "need at least {TRAIN_ROWS} MNIST training images and {extra} test images"
        )));
    }
    let train = train_all.subset(0, TRAIN_ROWS)?;
    let test = concat(
        &train_all.subset(TRAIN_ROWS, train_all.len())?,
        &t10k.subset(0, extra)?,
    )?;
    let out = data_dir.join("mnist_rot");
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut paths = Vec::new();
    for (name, d, s) in [
        (MNIST_ROT_TRAIN, &train, seed),
        (MNIST_ROT_TEST, &test, seed.wrapping_add(1)),
    ] {
        let mut rotated = generate_transformed(d, &TransformRegime::new(RegimeKind::B, s))?;
        quantize(&mut rotated);
        let path = out.join(name);
        write_amat(&path, &rotated)?;
        paths.push(path);
    }
    let test_path = paths.pop().expect("two files");
    Ok((paths.pop().expect("two files"), test_path))
}
