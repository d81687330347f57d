//! Per-setting mean and spread of backtest metrics across seeds.

use std::fmt::Write as _;
use std::path::Path;

use crate::runner::RunRecord;
use crate::RunError;

/// Columns of every comparison table, in order.
pub const METRICS: [&str; 4] = ["annualized_return", "max_drawdown", "sharpe", "calmar"];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub setting: String,
    pub config_hash: String,
    pub runs: usize,
    /// (mean, sample std) per entry of [`METRICS`].
    pub stats: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub split: String,
    pub rows: Vec<SummaryRow>,
}

/// Mean and sample standard deviation; the spread of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups records by setting. Settings named in `order` come first, in that
/// order; any others follow by name. Records are sorted by seed within a
/// setting so results do not depend on discovery order.
pub fn aggregate(records: &[RunRecord], order: &[String], split: &str) -> Result<Summary, RunError> {
    let mut names: Vec<String> = order.iter().filter(|n| records.iter().any(|r| &r.setting == *n)).cloned().collect();
    let mut rest: Vec<String> = records.iter().map(|r| r.setting.clone()).filter(|n| !order.contains(n)).collect();
    rest.sort();
    rest.dedup();
    names.extend(rest);

    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let mut group: Vec<&RunRecord> = records.iter().filter(|r| r.setting == name).collect();
        group.sort_by_key(|r| r.seed);
        let hash = &group[0].config_hash;
        if let Some(other) = group.iter().find(|r| &r.config_hash != hash) {
            return Err(RunError::Aggregate(format!(
                "setting `{name}` mixes config hashes {} (seed {}) and {} (seed {})",
                &hash[..12],
                group[0].seed,
                &other.config_hash[..12],
                other.seed
            )));
        }
        let mut stats = Vec::with_capacity(METRICS.len());
        for metric in METRICS {
            let mut values = Vec::with_capacity(group.len());
            for r in &group {
                let m = r.metrics.get(split).ok_or_else(|| {
                    RunError::Aggregate(format!("run `{name}` seed {} has no `{split}` metrics", r.seed))
                })?;
                values.push(m.get(metric).expect("known metric"));
            }
            stats.push(mean_std(&values));
        }
        rows.push(SummaryRow {
            setting: name,
            config_hash: hash.clone(),
            runs: group.len(),
            stats,
        });
    }
    Ok(Summary {
        split: split.to_string(),
        rows,
    })
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Artifact(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| RunError::Artifact(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| RunError::Io(path.to_path_buf(), e))
}

impl Summary {
    /// `setting` plus one mean column per metric.
    pub fn write_means(&self, path: &Path) -> Result<(), RunError> {
        let mut header = vec!["setting".to_string()];
        header.extend(METRICS.iter().map(|m| m.to_string()));
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.setting.clone()];
                row.extend(r.stats.iter().map(|(m, _)| m.to_string()));
                row
            })
            .collect();
        write_csv(path, header, rows)
    }

    /// Means and standard deviations with run counts and config hashes.
    pub fn write_full(&self, path: &Path) -> Result<(), RunError> {
        let mut header = vec!["setting".to_string(), "config_hash".into(), "runs".into()];
        for m in METRICS {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.setting.clone(), r.config_hash.clone(), r.runs.to_string()];
                for (m, s) in &r.stats {
                    row.push(m.to_string());
                    row.push(s.to_string());
                }
                row
            })
            .collect();
        write_csv(path, header, rows)
    }

    /// Aligned text table of `mean ± std` cells.
    pub fn render(&self) -> String {
        let mut header = vec!["setting".to_string(), "runs".into()];
        header.extend(METRICS.iter().map(|m| m.to_string()));
        let mut cells = vec![header];
        for r in &self.rows {
            let mut row = vec![r.setting.clone(), r.runs.to_string()];
            row.extend(r.stats.iter().map(|(m, s)| format!("{m:.4} ± {s:.4}")));
            cells.push(row);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("string write");
            if k == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                writeln!(out, "{}", "-".repeat(total)).expect("string write");
            }
        }
        out
    }

    /// Writes `table.csv`, `summary.csv` and `table.txt` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<(), RunError> {
        std::fs::create_dir_all(dir).map_err(|e| RunError::Io(dir.to_path_buf(), e))?;
        self.write_means(&dir.join("table.csv"))?;
        self.write_full(&dir.join("summary.csv"))?;
        let txt = dir.join("table.txt");
        std::fs::write(&txt, self.render()).map_err(|e| RunError::Io(txt, e))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use glab_core::backtest::compute_metrics;

    use super::*;
    use crate::config::Regime;

    fn record(setting: &str, seed: u64, hash: &str, shift: f64) -> RunRecord {
        let r: Vec<f64> = (0..30).map(|t| 0.001 * ((t % 7) as f64 - 3.0) + shift).collect();
        RunRecord {
            setting: setting.into(),
            regime: Regime::EndToEnd,
            config_hash: hash.repeat(64 / hash.len()),
            seed,
            metrics: BTreeMap::from([("test".to_string(), compute_metrics(&r).unwrap())]),
            artifacts: vec![],
            wall_time_s: 1.0,
        }
    }

    #[test]
    fn sample_std_examples() {
        assert_eq!(mean_std(&[3.5]), (3.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-15);
    }

    #[test]
    fn rows_follow_declared_order() {
        let recs = vec![
            record("b", 1, "bb", 0.001),
            record("z", 0, "cc", 0.0),
            record("a", 0, "aa", 0.0),
            record("b", 0, "bb", 0.002),
        ];
        let s = aggregate(&recs, &["b".into(), "a".into()], "test").unwrap();
        let names: Vec<&str> = s.rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(names, ["b", "a", "z"]);
        assert_eq!(s.rows[0].runs, 2);
        let single = &s.rows[1];
        assert_eq!(single.stats[2].1, 0.0);
        assert_eq!(single.stats[2].0, recs[2].metrics["test"].sharpe);
    }

    #[test]
    fn mixed_hashes_are_rejected() {
        let recs = vec![record("a", 0, "aa", 0.0), record("a", 1, "ab", 0.0)];
        assert!(matches!(aggregate(&recs, &[], "test"), Err(RunError::Aggregate(_))));
        assert!(matches!(aggregate(&recs[..1], &[], "valid"), Err(RunError::Aggregate(_))));
    }

    #[test]
    fn empty_summary_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = aggregate(&[], &["x".into()], "test").unwrap();
        s.emit(dir.path()).unwrap();
        let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(table, "setting,annualized_return,max_drawdown,sharpe,calmar\n");
        let text = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
