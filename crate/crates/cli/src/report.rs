//! `report`: one table per dataset/regime with a column per seed plus the
//! mean, marking the best and second-best row of every column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::grid::{cell_dirs, read_summary, CellSummary, CELL_FILE, GRID_FILE};
use crate::{write_file, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    /// One value per column; `None` where the seed has no such cell.
    pub values: Vec<Option<f64>>,
    pub best: Vec<bool>,
    pub second: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub dataset: String,
    pub regime: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub tables: Vec<Table>,
}

impl Table {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Column index of the per-row mean.
    pub fn mean_column(&self) -> usize {
        self.columns.len() - 1
    }
}

const ROW_ORDER: [&str; 8] = [
    "BS",
    "BS+max",
    "BS+mean",
    "DA",
    "DA+max",
    "DA+mean",
    "Ours(mean)",
    "Ours(max)",
];

fn row_rank(label: &str) -> usize {
    ROW_ORDER
        .iter()
        .position(|l| *l == label)
        .unwrap_or(ROW_ORDER.len())
}

/// Flags the largest and second-largest value per column; ties go to the
/// earlier row.
fn flag(rows: &mut [Row], columns: usize) {
    for c in 0..columns {
        let mut order: Vec<usize> = (0..rows.len())
            .filter(|&r| rows[r].values[c].is_some())
            .collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (rows[a].values[c].unwrap(), rows[b].values[c].unwrap());
            vb.total_cmp(&va).then(a.cmp(&b))
        });
        if let Some(&r) = order.first() {
            rows[r].best[c] = true;
        }
        if let Some(&r) = order.get(1) {
            rows[r].second[c] = true;
        }
    }
}

pub fn build_report(cells: &[CellSummary]) -> Report {
    let mut by_table: BTreeMap<(String, String), Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        let dataset = c
            .dataset_key
            .split("; ")
            .next()
            .unwrap_or("")
            .trim_start_matches("dataset = ")
            .to_string();
        by_table
            .entry((dataset, c.regime.clone()))
            .or_default()
            .push(c);
    }
    let tables = by_table
        .into_iter()
        .map(|((dataset, regime), cells)| {
            let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let mut labels: Vec<String> = cells.iter().map(|c| c.label.clone()).collect();
            labels.sort_by_key(|l| (row_rank(l), l.clone()));
            labels.dedup();
            let mut columns: Vec<String> = seeds.iter().map(|s| format!("seed {s}")).collect();
            columns.push("mean".into());
            let mut rows: Vec<Row> = labels
                .into_iter()
                .map(|label| {
                    let mut values: Vec<Option<f64>> = seeds
                        .iter()
                        .map(|&s| {
                            cells
                                .iter()
                                .find(|c| c.seed == s && c.label == label)
                                .map(|c| c.test_accuracy)
                        })
                        .collect();
                    let present: Vec<f64> = values.iter().flatten().copied().collect();
                    let mean = (present.len() == seeds.len())
                        .then(|| present.iter().sum::<f64>() / present.len() as f64);
                    values.push(mean);
                    Row {
                        label,
                        best: vec![false; values.len()],
                        second: vec![false; values.len()],
                        values,
                    }
                })
                .collect();
            flag(&mut rows, columns.len());
            Table {
                dataset,
                regime,
                columns,
                rows,
            }
        })
        .collect();
    Report { tables }
}

pub fn render(report: &Report) -> String {
    let mut s = String::new();
    for t in &report.tables {
        let _ = writeln!(s, "{} / regime {}", t.dataset, t.regime);
        let _ = write!(s, "{:<14}", "method");
        for c in &t.columns {
            let _ = write!(s, "{c:>13}");
        }
        s.push('\n');
        for r in &t.rows {
            let _ = write!(s, "{:<14}", r.label);
            for (i, v) in r.values.iter().enumerate() {
                let mark = if r.best[i] {
                    "**"
                } else if r.second[i] {
                    "* "
                } else {
                    "  "
                };
                match v {
                    Some(v) => {
                        let _ = write!(s, "{:>11.2}{mark}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, "{:>11}  ", "-");
                    }
                }
            }
            s.push('\n');
        }
        s.push_str("accuracy in %; ** best, * second best per column\n\n");
    }
    s
}

/// Reads every run under `dir`, failing with the list of registered runs
/// that have no results yet.
pub fn collect(dir: &Path) -> Result<Vec<CellSummary>> {
    let mut missing = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join(GRID_FILE)) {
        let index: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{GRID_FILE}: {e}")))?;
        for (run, cell) in index {
            if !dir.join(&run).join(CELL_FILE).is_file() {
                missing.push(format!("{run} ({cell})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "incomplete grid, no results for: {}",
            missing.join(", ")
        )));
    }
    let runs = cell_dirs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Data(format!(
            "no run directories under {}",
            dir.display()
        )));
    }
    runs.iter().map(|r| read_summary(r)).collect()
}

/// Writes `report.txt` and `report.json` into `dir`.
pub fn run_report(dir: &Path) -> Result<(Report, String)> {
    let report = build_report(&collect(dir)?);
    let text = render(&report);
    write_file(&dir.join("report.txt"), &text)?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&dir.join("report.json"), json)?;
    Ok((report, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rotens::model::ModeKind;

    fn cell(label: &str, seed: u64, acc: f64) -> CellSummary {
        CellSummary {
            cell: String::new(),
            label: label.into(),
            mode: ModeKind::Plain,
            train_data: "original".into(),
            dataset_key: "dataset = mnist; data_dir = -".into(),
            regime: "A".into(),
            seed,
            transforms: vec![0, 90, 180, 270],
            test_accuracy: acc,
            model_warnings: vec![],
        }
    }

    #[test]
    fn single_cell_gives_one_row() {
        let r = build_report(&[cell("BS", 0, 0.5)]);
        assert_eq!(r.tables.len(), 1);
        assert_eq!(r.tables[0].rows.len(), 1);
        assert_eq!(r.tables[0].columns, vec!["seed 0", "mean"]);
        assert!(r.tables[0].rows[0].best.iter().all(|&b| b));
    }

    #[test]
    fn one_best_per_column_with_ties() {
        let cells = vec![
            cell("Ours(max)", 0, 0.9),
            cell("DA", 0, 0.9),
            cell("BS", 0, 0.3),
            cell("Ours(max)", 1, 0.8),
            cell("DA", 1, 0.85),
            cell("BS", 1, 0.2),
        ];
        let r = build_report(&cells);
        let t = &r.tables[0];
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["BS", "DA", "Ours(max)"]);
        for c in 0..t.columns.len() {
            assert_eq!(t.rows.iter().filter(|r| r.best[c]).count(), 1);
            assert_eq!(t.rows.iter().filter(|r| r.second[c]).count(), 1);
        }
        // tie in seed 0 goes to the earlier row
        assert!(t.row("DA").unwrap().best[0]);
        assert!(t.row("DA").unwrap().best[2]);
        let text = render(&r);
        assert!(text.contains("regime A"));
    }
}
