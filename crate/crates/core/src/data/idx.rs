// Big-endian IDX container: u32 magic, u32 dims, then u8 payload.
// Images: magic 0x00000803 with (count, rows, cols); labels: 0x00000801.

use std::path::Path;

use super::{read_file, DataError, Dataset, Result};
use crate::tensor::Tensor4;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> DataError {
        DataError::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err(format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DataError::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                msg: format!(
                    "truncated payload: expected {len} bytes from offset {}, file ends early",
                    self.pos
                ),
            }),
        }
    }
}

/// Parses in-memory IDX image and label files; `names` are only used in
/// error messages.
pub fn parse_idx(images: &[u8], labels: &[u8], names: (&Path, &Path)) -> Result<Dataset> {
    let mut r = Reader {
        path: names.0,
        bytes: images,
        pos: 0,
    };
    let magic = r.u32("magic")?;
    if magic != IMAGES_MAGIC {
        r.pos = 0;
        return Err(r.err(format!(
            "bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"
        )));
    }
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.payload(count * rows * cols)?;

    let mut l = Reader {
        path: names.1,
        bytes: labels,
        pos: 0,
    };
    let magic = l.u32("magic")?;
    if magic != LABELS_MAGIC {
        l.pos = 0;
        return Err(l.err(format!(
            "bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"
        )));
    }
    let label_count = l.u32("label count")? as usize;
    if label_count != count {
        return Err(DataError::Invalid(format!(
            "{} has {count} images but {} has {label_count} labels",
            names.0.display(),
            names.1.display()
        )));
    }
    let raw_labels = l.payload(label_count)?;

    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor4::from_vec([count, 1, rows, cols], data)?;
    let labels = raw_labels.iter().map(|&b| b as usize).collect();
    let source = names
        .0
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(images, labels, None, source)
}

pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, &labels, (images_path, labels_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(count: u32, side: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IMAGES_MAGIC, count, side, side] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        for v in [LABELS_MAGIC, labels.len() as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        (img, lab)
    }

    fn names() -> (&'static Path, &'static Path) {
        (Path::new("img"), Path::new("lab"))
    }

    #[test]
    fn parses_and_scales_pixels() {
        let (img, lab) = encode(2, 2, &[0, 255, 51, 0, 1, 2, 3, 4], &[3, 9]);
        let d = parse_idx(&img, &lab, names()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.images().shape(), [2, 1, 2, 2]);
        assert_eq!(d.images().data()[1], 1.0);
        assert_eq!(d.images().data()[2], 0.2);
        assert_eq!(d.labels(), &[3, 9]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let (mut img, lab) = encode(2, 2, &[0; 8], &[1, 2]);
        img.truncate(20);
        let err = parse_idx(&img, &lab, names()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset 20"), "{msg}");
    }

    #[test]
    fn truncated_header_reports_offset() {
        let (img, lab) = encode(2, 2, &[0; 8], &[1, 2]);
        let err = parse_idx(&img[..6], &lab, names()).unwrap_err();
        assert!(err.to_string().contains("byte offset 4"));
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let (mut img, lab) = encode(1, 2, &[0; 4], &[1]);
        img[3] = 0x01;
        assert!(parse_idx(&img, &lab, names())
            .unwrap_err()
            .to_string()
            .contains("bad image magic"));

        let (img, lab) = encode(1, 2, &[0; 4], &[1, 2]);
        assert!(matches!(
            parse_idx(&img, &lab, names()),
            Err(DataError::Invalid(_))
        ));
    }
}
