// `.amat` text rows: 784 pixels (row-major 28×28, already in [0, 1]) then the
// label written as a float.

use std::io::Write;
use std::path::Path;

use super::{read_file, DataError, Dataset, Result};
use crate::tensor::Tensor4;

const SIDE: usize = 28;
const ROW_LEN: usize = SIDE * SIDE + 1;

pub fn read_amat(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
        msg: "file is not UTF-8 text".into(),
    })?;
    let err = |line: usize, msg: String| DataError::Text {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut row = Vec::with_capacity(ROW_LEN);
    for (i, line) in text.lines().enumerate() {
        row.clear();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(i + 1, format!("non-numeric token '{tok}'")))?;
            row.push(v);
        }
        if row.is_empty() {
            continue;
        }
        if row.len() != ROW_LEN {
            return Err(err(
                i + 1,
                format!("expected {ROW_LEN} values, found {}", row.len()),
            ));
        }
        let label = row[ROW_LEN - 1];
        if !(label >= 0.0 && label.fract() == 0.0) {
            return Err(err(
                i + 1,
                format!("label {label} is not a non-negative integer"),
            ));
        }
        labels.push(label as usize);
        pixels.extend_from_slice(&row[..ROW_LEN - 1]);
    }
    let images = Tensor4::from_vec([labels.len(), 1, SIDE, SIDE], pixels)?;
    let source = path
        .file_name()
        .map_or_else(|| "amat".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(images, labels, None, source)
}

/// Writes a 1×28×28 dataset in the same layout (values with `{}` formatting,
/// which round-trips f64 exactly).
pub fn write_amat(path: &Path, data: &Dataset) -> Result<()> {
    if data.image_shape() != [1, SIDE, SIDE] {
        return Err(DataError::Invalid(format!(
            "amat rows hold 1x28x28 images, got {:?}",
            data.image_shape()
        )));
    }
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    let px = SIDE * SIDE;
    for (i, &label) in data.labels().iter().enumerate() {
        let mut line = String::with_capacity(px * 4);
        for v in &data.images().data()[i * px..(i + 1) * px] {
            line.push_str(&format!("{v} "));
        }
        line.push_str(&format!("{label}.0\n"));
        out.write_all(line.as_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, fill: &str) -> String {
        let mut s = vec![fill; SIDE * SIDE].join(" ");
        s.push(' ');
        s.push_str(label);
        s.push('\n');
        s
    }

    #[test]
    fn reads_rows_and_casts_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.amat");
        std::fs::write(
            &p,
            format!(
                "{}{}",
                row("7.0000", "0.5"),
                row("3.0000000000000000e+00", "0")
            ),
        )
        .unwrap();
        let d = read_amat(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[7, 3]);
        assert_eq!(d.images().at(0, 0, 27, 27), 0.5);
    }

    #[test]
    fn rejects_short_rows_and_bad_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.amat");
        std::fs::write(&p, "0.1 0.2 3\n").unwrap();
        let msg = read_amat(&p).unwrap_err().to_string();
        assert!(
            msg.contains("line 1") && msg.contains("expected 785"),
            "{msg}"
        );

        std::fs::write(&p, row("x", "0")).unwrap();
        assert!(read_amat(&p)
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));

        std::fs::write(&p, row("2.5", "0")).unwrap();
        assert!(read_amat(&p).is_err());
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.amat");
        let px: Vec<f64> = (0..2 * SIDE * SIDE)
            .map(|i| (i as f64 * 0.37).sin().abs())
            .collect();
        let d = Dataset::new(
            Tensor4::from_vec([2, 1, SIDE, SIDE], px).unwrap(),
            vec![4, 9],
            None,
            "rt",
        )
        .unwrap();
        write_amat(&p, &d).unwrap();
        let back = read_amat(&p).unwrap();
        assert_eq!(back.images(), d.images());
        assert_eq!(back.labels(), d.labels());
    }
}
