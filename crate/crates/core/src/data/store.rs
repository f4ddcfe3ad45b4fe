// Binary split store. Per split `<name>`:
//   <name>.images: "RTDS", u32 count, u32 channels, u32 side (LE), f32 LE pixels
//   <name>.labels: "RTDL", u32 count, u32 classes (LE), u32 LE labels

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{read_file, DataError, Dataset, Result};
use crate::tensor::Tensor4;

pub const IMAGES_MAGIC: &[u8; 4] = b"RTDS";
pub const LABELS_MAGIC: &[u8; 4] = b"RTDL";

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}.images")),
        dir.join(format!("{split}.labels")),
    )
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(bytes).map_err(io)?;
    f.flush().map_err(io)
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| DataError::Invalid(format!("{what} {v} exceeds u32")))
}

pub fn write_split(dir: &Path, split: &str, data: &Dataset) -> Result<()> {
    let [c, h, w] = data.image_shape();
    if h != w {
        return Err(DataError::Invalid(format!(
            "store holds square images, got {h}x{w}"
        )));
    }
    let (img_path, lab_path) = split_paths(dir, split);

    let mut img = Vec::with_capacity(16 + data.images().len() * 4);
    img.extend_from_slice(IMAGES_MAGIC);
    img.extend_from_slice(&u32_field(data.len(), "count")?);
    img.extend_from_slice(&u32_field(c, "channels")?);
    img.extend_from_slice(&u32_field(h, "side")?);
    for &v in data.images().data() {
        img.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_all(&img_path, &img)?;

    let mut lab = Vec::with_capacity(12 + data.len() * 4);
    lab.extend_from_slice(LABELS_MAGIC);
    lab.extend_from_slice(&u32_field(data.len(), "count")?);
    lab.extend_from_slice(&u32_field(data.classes(), "classes")?);
    for &l in data.labels() {
        lab.extend_from_slice(&u32_field(l, "label")?);
    }
    write_all(&lab_path, &lab)
}

fn header(bytes: &[u8], path: &Path, magic: &[u8; 4], fields: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * fields;
    if bytes.len() < need {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            msg: format!("truncated header, need {need} bytes"),
        });
    }
    if &bytes[..4] != magic {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!(
                "bad magic, expected {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        });
    }
    Ok(bytes[4..need]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect())
}

pub fn read_split(dir: &Path, split: &str) -> Result<Dataset> {
    let (img_path, lab_path) = split_paths(dir, split);
    let img = read_file(&img_path)?;
    let lab = read_file(&lab_path)?;

    let h = header(&img, &img_path, IMAGES_MAGIC, 3)?;
    let (count, c, side) = (h[0], h[1], h[2]);
    let expect = 16 + count * c * side * side * 4;
    if img.len() != expect {
        return Err(DataError::Parse {
            path: img_path,
            offset: img.len(),
            msg: format!("expected {expect} bytes for {count}x{c}x{side}x{side} f32 pixels"),
        });
    }
    let pixels = img[16..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();

    let l = header(&lab, &lab_path, LABELS_MAGIC, 2)?;
    let (label_count, classes) = (l[0], l[1]);
    if label_count != count {
        return Err(DataError::Invalid(format!(
            "{} has {count} images but {} has {label_count} labels",
            img_path.display(),
            lab_path.display()
        )));
    }
    if lab.len() != 12 + 4 * count {
        return Err(DataError::Parse {
            path: lab_path,
            offset: lab.len(),
            msg: format!("expected {} bytes of labels", 4 * count),
        });
    }
    let labels = lab[12..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let images = Tensor4::from_vec([count, c, side, side], pixels)?;
    Dataset::new(images, labels, Some(classes), split)
}
