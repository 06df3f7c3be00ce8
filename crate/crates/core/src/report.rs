//! Aggregation of per-run metrics into result tables.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trainer::{MetricsFile, RunMode};

/// One table row: a single run, or the mean over seeds of one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// Seed of the run, or `mean`.
    pub seed: String,
    pub mode: RunMode,
    pub runs: usize,
    pub metrics: Vec<f64>,
    pub delta_m_percent: Option<f64>,
    pub trainable_params: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    /// `task_metric` column names.
    pub metric_columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn mode_order(m: RunMode) -> usize {
    match m {
        RunMode::Reference => 0,
        RunMode::Individual => 1,
        RunMode::Shared => 2,
        RunMode::Progressive => 3,
        RunMode::AblateSwap => 4,
    }
}

impl Report {
    /// Per-run rows sorted by mode then seed, followed by one mean row per
    /// mode. All runs must report the same tasks and metrics.
    pub fn build(runs: &[MetricsFile]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::Config("no runs to report".into()))?;
        let metric_columns: Vec<String> = first
            .per_task
            .iter()
            .map(|m| format!("{}_{}", m.task, m.metric))
            .collect();
        let mut by_mode: BTreeMap<usize, Vec<&MetricsFile>> = BTreeMap::new();
        for r in runs {
            let cols: Vec<String> = r.per_task.iter().map(|m| format!("{}_{}", m.task, m.metric)).collect();
            if cols != metric_columns {
                return Err(Error::format(
                    "metrics.json",
                    format!("seed {} mode {} reports {cols:?}, expected {metric_columns:?}", r.seed, r.mode),
                ));
            }
            by_mode.entry(mode_order(r.mode)).or_default().push(r);
        }
        let mut rows = Vec::new();
        let mut means = Vec::new();
        for (_, mut group) in by_mode {
            let mode = group[0].mode;
            group.sort_by_key(|r| r.seed);
            for r in &group {
                rows.push(ReportRow {
                    seed: r.seed.to_string(),
                    mode,
                    runs: 1,
                    metrics: r.per_task.iter().map(|m| m.value).collect(),
                    delta_m_percent: r.delta_m_percent,
                    trainable_params: r.trainable_params as f64,
                });
            }
            let n = group.len() as f64;
            let metrics = (0..metric_columns.len())
                .map(|i| group.iter().map(|r| r.per_task[i].value).sum::<f64>() / n)
                .collect();
            let dms: Option<Vec<f64>> = group.iter().map(|r| r.delta_m_percent).collect();
            means.push(ReportRow {
                seed: "mean".into(),
                mode,
                runs: group.len(),
                metrics,
                delta_m_percent: dms.map(|d| d.iter().sum::<f64>() / n),
                trainable_params: group.iter().map(|r| r.trainable_params as f64).sum::<f64>() / n,
            });
        }
        rows.extend(means);
        Ok(Self { metric_columns, rows })
    }

    pub fn mean(&self, mode: RunMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.mode == mode && r.seed == "mean")
    }

    /// `seed,mode,runs,<metrics…>,delta_m_percent,trainable_params`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["seed".to_string(), "mode".into(), "runs".into()];
        header.extend(self.metric_columns.iter().cloned());
        header.extend(["delta_m_percent".to_string(), "trainable_params".into()]);
        w.write_record(&header).map_err(|e| Error::format("report csv", e))?;
        for r in &self.rows {
            let mut rec = vec![r.seed.clone(), r.mode.to_string(), r.runs.to_string()];
            rec.extend(r.metrics.iter().map(|v| format!("{v:.6}")));
            rec.push(r.delta_m_percent.map_or(String::new(), |v| format!("{v:.4}")));
            rec.push(format!("{}", r.trainable_params));
            w.write_record(&rec).map_err(|e| Error::format("report csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("report csv", e))?;
        String::from_utf8(bytes).map_err(|e| Error::format("report csv", e))
    }

    /// Plot-ready `mode,trainable_params,delta_m_percent` over mean rows.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("mode,trainable_params,delta_m_percent\n");
        for r in self.rows.iter().filter(|r| r.seed == "mean") {
            if let Some(dm) = r.delta_m_percent {
                s.push_str(&format!("{},{},{dm:.4}\n", r.mode, r.trainable_params));
            }
        }
        s
    }
}
