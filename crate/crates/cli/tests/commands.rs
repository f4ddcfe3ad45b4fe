//! The `rotens` binary end to end on a small synthetic MNIST-format data
//! directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN: usize = 120;
const TEST: usize = 60;

fn write_idx(dir: &Path, prefix: &str, count: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0, 0, 8, 3];
    for v in [count as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(count as u32).to_be_bytes());
    for _ in 0..count {
        let label: u8 = rng.gen_range(0..10);
        labels.push(label);
        // a bar whose row depends on the label, plus noise
        for y in 0..28 {
            for x in 0..28 {
                let on = y / 2 == label as usize + 2 && (4..24).contains(&x);
                images.push(if on { 230 } else { rng.gen_range(0..30) });
            }
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn data_dir(root: &Path) -> PathBuf {
    let d = root.join("data");
    std::fs::create_dir_all(d.join("mnist")).unwrap();
    write_idx(&d.join("mnist"), "train", TRAIN, 1);
    write_idx(&d.join("mnist"), "t10k", TEST, 2);
    d
}

fn rotens(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rotens"))
        .args(args)
        .env("ROTENS_DATA_DIR", root.join("data"))
        .output()
        .expect("binary runs")
}

fn config(root: &Path, name: &str, text: &str) -> String {
    let p = root.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn run_dirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("config.txt").is_file())
        .collect();
    v.sort();
    v
}

const SMALL: &str = "widths = 2, 3, 3, 4\nepochs = 1\nbatch_size = 32\n";

#[test]
fn generate_regime_a_writes_one_output_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let cfg = config(
        tmp.path(),
        "gen.txt",
        "regime = A\ntrain_count = 100\ntest_count = 40\nseed = 4\n",
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = rotens(
            tmp.path(),
            &["generate", "--config", &cfg, "--out", out.to_str().unwrap()],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let draws = rotens::data::read_sidecar(&a.join("train.draws.csv")).unwrap();
    assert_eq!(draws.len(), 100);
    assert!(draws
        .iter()
        .all(|d| [0.0, 90.0, 180.0, 270.0].contains(&d.angle_deg)));
    assert_eq!(rotens::data::read_split(&a, "train").unwrap().len(), 100);
    for f in [
        "train.images",
        "train.labels",
        "test.images",
        "train.draws.csv",
        "test.draws.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn generate_regime_c_scales_stay_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let cfg = config(
        tmp.path(),
        "gen.txt",
        "regime = C\ntrain_count = 50\ntest_count = 10\n",
    );
    let out = tmp.path().join("c");
    let o = rotens(
        tmp.path(),
        &["generate", "--config", &cfg, "--out", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let draws = rotens::data::read_sidecar(&out.join("train.draws.csv")).unwrap();
    assert!(draws
        .iter()
        .all(|d| (0.5..=1.5).contains(&d.scale) && (0.0..360.0).contains(&d.angle_deg)));
}

#[test]
fn generated_store_trains() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let gen = config(tmp.path(), "gen.txt", "regime = B\n");
    let store = tmp.path().join("store");
    assert!(rotens(
        tmp.path(),
        &[
            "generate",
            "--config",
            &gen,
            "--out",
            store.to_str().unwrap()
        ]
    )
    .status
    .success());
    let train = config(
        tmp.path(),
        "train.txt",
        &format!("dataset = store\nstore_dir = {}\n{SMALL}", store.display()),
    );
    let out = tmp.path().join("runs");
    let o = rotens(
        tmp.path(),
        &[
            "train",
            "--quiet",
            "--config",
            &train,
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(run_dirs(&out).len(), 1);
}

#[test]
fn single_mode_gives_one_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let cfg = config(tmp.path(), "t.txt", &format!("modes = plain\n{SMALL}"));
    let out = tmp.path().join("runs");
    let o = rotens(
        tmp.path(),
        &[
            "train",
            "--quiet",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 1);
    for f in [
        "config.txt",
        "model.ckpt",
        "summary.json",
        "epochs.jsonl",
        "timing.log",
        "cell.json",
    ] {
        assert!(dirs[0].join(f).is_file(), "{f}");
    }
}

#[test]
fn full_grid_gives_eight_cells_and_reruns_match() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let cfg = config(
        tmp.path(),
        "grid.txt",
        &format!(
            "modes = plain, tta_max, tta_mean, ours_max, ours_mean\ntrain_data = both\n{SMALL}"
        ),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "2")] {
        let o = rotens(
            tmp.path(),
            &[
                "train",
                "--quiet",
                "--config",
                &cfg,
                "--seed",
                "9",
                "--jobs",
                jobs,
                "--out",
                out.to_str().unwrap(),
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (da, db) = (run_dirs(&a), run_dirs(&b));
    assert_eq!(da.len(), 8);
    let names = |v: &[PathBuf]| {
        v.iter()
            .map(|p| p.file_name().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    assert_eq!(names(&da), names(&db));
    for (x, y) in da.iter().zip(&db) {
        for f in [
            "summary.json",
            "cell.json",
            "epochs.jsonl",
            "model.ckpt",
            "config.txt",
        ] {
            assert_eq!(
                std::fs::read(x.join(f)).unwrap(),
                std::fs::read(y.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    let o = rotens(tmp.path(), &["report", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    let rows = report["tables"][0]["rows"].as_array().unwrap();
    let labels: BTreeSet<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    let want: BTreeSet<&str> = [
        "BS",
        "BS+max",
        "BS+mean",
        "DA",
        "DA+max",
        "DA+mean",
        "Ours(max)",
        "Ours(mean)",
    ]
    .into();
    assert_eq!(labels, want);
    for c in 0..2 {
        assert_eq!(
            rows.iter()
                .filter(|r| r["best"][c].as_bool().unwrap())
                .count(),
            1
        );
    }
}

#[test]
fn analyze_c4_gives_four_rows_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    data_dir(tmp.path());
    let cfg = config(
        tmp.path(),
        "t.txt",
        &format!("modes = plain, ours_max\n{SMALL}"),
    );
    let out = tmp.path().join("runs");
    assert!(rotens(
        tmp.path(),
        &[
            "train",
            "--quiet",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap()
        ]
    )
    .status
    .success());
    let o = rotens(tmp.path(), &["analyze-c4", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(out.join("c4.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    let ours: BTreeSet<String> = rows
        .iter()
        .filter(|r| &r[2] == "ours_max")
        .map(|r| r[5].to_string())
        .collect();
    assert_eq!(
        ours.len(),
        1,
        "ours_max accuracy differs across angles: {ours:?}"
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let bad = config(tmp.path(), "bad.txt", "colour = blue\n");
    assert_eq!(
        rotens(tmp.path(), &["train", "--config", &bad, "--out", out])
            .status
            .code(),
        Some(2)
    );
    let ok = config(tmp.path(), "ok.txt", SMALL);
    // no data directory written yet
    assert_eq!(
        rotens(tmp.path(), &["train", "--config", &ok, "--out", out])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(rotens(tmp.path(), &["report", out]).status.code(), Some(3));
    let diverge = config(
        tmp.path(),
        "lr.txt",
        &format!("{SMALL}lr_start = 1e200\nlr_end = 1e200\n"),
    );
    data_dir(tmp.path());
    assert_eq!(
        rotens(
            tmp.path(),
            &["train", "--quiet", "--config", &diverge, "--out", out]
        )
        .status
        .code(),
        Some(4)
    );
}
