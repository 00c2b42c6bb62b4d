//! Cross-experiment aggregation: mean ± stddev of every metric grouped by
//! mode, rendered as a delimited text table. Plot rendering lives in the
//! CLI.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;
use crate::pipeline::{read_results, ResultRecord};

/// One aggregated row: a (mode, split, metric) group over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub split: String,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two seeds.
    pub stddev: Option<f64>,
}

/// Aggregate result records grouped by (mode, split, metric), averaging
/// over seeds. Rows come out sorted by the group key.
pub fn aggregate(records: &[ResultRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.mode.clone(), r.split.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((mode, split, metric), values)| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stddev = (n >= 2).then(|| {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            });
            ReportRow {
                mode,
                split,
                metric,
                seeds: n,
                mean,
                stddev,
            }
        })
        .collect()
}

/// Load and pool the `results.jsonl` of several experiment directories.
/// Directories without results are skipped but reported back.
pub fn collect_results(experiment_dirs: &[&Path]) -> Result<(Vec<ResultRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut incomplete = Vec::new();
    for dir in experiment_dirs {
        match read_results(dir) {
            Ok(mut r) => records.append(&mut r),
            Err(_) => incomplete.push(dir.display().to_string()),
        }
    }
    Ok((records, incomplete))
}

/// Tab-separated table with a header line.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("mode\tsplit\tmetric\tseeds\tmean\tstddev\n");
    for r in rows {
        let stddev = r
            .stddev
            .map(|s| format!("{s:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{}\n",
            r.mode, r.split, r.metric, r.seeds, r.mean, stddev
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(mode: &str, seed: u64, metric: &str, value: f64) -> ResultRecord {
        ResultRecord {
            experiment_id: format!("{mode}-s{seed}"),
            mode: mode.into(),
            seed,
            split: "domain_A/val".into(),
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn aggregation_means_match_recomputation() {
        let records = vec![
            rec("baseline", 0, "best_val_miou", 0.50),
            rec("baseline", 1, "best_val_miou", 0.54),
            rec("paired", 0, "best_val_miou", 0.60),
            rec("paired", 1, "best_val_miou", 0.58),
            rec("paired", 2, "best_val_miou", 0.62),
        ];
        let rows = aggregate(&records);
        assert_eq!(rows.len(), 2);
        let base = &rows[0];
        assert_eq!(base.mode, "baseline");
        assert_eq!(base.seeds, 2);
        assert!((base.mean - 0.52).abs() < 1e-12);
        let paired = &rows[1];
        assert_eq!(paired.seeds, 3);
        // Recomputation oracle on the raw records.
        let expect = (0.60 + 0.58 + 0.62) / 3.0;
        assert!((paired.mean - expect).abs() < 1e-12);
        assert!(paired.stddev.unwrap() > 0.0);
    }

    #[test]
    fn single_seed_has_empty_stddev_column() {
        let rows = aggregate(&[rec("baseline", 0, "best_val_miou", 0.5)]);
        assert_eq!(rows[0].seeds, 1);
        assert!(rows[0].stddev.is_none());
        let table = render_table(&rows);
        let line = table.lines().nth(1).unwrap();
        assert!(line.ends_with('\t'));
    }
}
