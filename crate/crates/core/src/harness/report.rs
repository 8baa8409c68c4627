//! Tabular summaries of run records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Metric, RunConfig};
use super::train::{GridAxes, Provenance, RunRecord};
use crate::error::{Error, Result};

/// One CSV row per run. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub n_train: usize,
    pub width_factor: f64,
    pub lambda_base: f64,
    pub replicate: u32,
    pub eta: f64,
    pub lambda: f64,
    pub tau_iter: Option<f64>,
    pub tau_epoch: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub diverged: bool,
    pub is_argmin: bool,
}

/// One point of a series, averaged over replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n_train: usize,
    pub width_factor: f64,
    pub lambda_base: f64,
    pub eta: f64,
    pub lambda: f64,
    pub tau_iter: Option<f64>,
    pub tau_epoch: Option<f64>,
    pub runs: usize,
    pub diverged_runs: usize,
    /// Mean selected metric; absent if any replicate diverged.
    pub mean_metric: Option<f64>,
    pub is_argmin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub select_on: Metric,
    pub rows: Vec<ReportRow>,
    pub series: Vec<SeriesPoint>,
}

impl Report {
    /// The argmin point of the series at (`n_train`, `width_factor`).
    pub fn argmin(&self, n_train: usize, width_factor: f64) -> Option<&SeriesPoint> {
        self.series
            .iter()
            .find(|p| p.is_argmin && p.n_train == n_train && p.width_factor == width_factor)
    }
}

fn axes_of(r: &RunRecord) -> GridAxes {
    r.axes.clone().unwrap_or(GridAxes {
        n_train: r.config.data.n_train,
        width_factor: 1.0,
        lambda_base: r.config.hp.lambda,
        replicate: 0,
    })
}

fn metric_of(r: &RunRecord, metric: Metric) -> Option<f64> {
    let m = r.final_metrics.as_ref()?;
    Some(match metric {
        Metric::TestLoss => m.test_loss,
        Metric::TrainLoss => m.train_loss,
    })
}

/// Per-run rows plus per-series means with the argmin marked.
pub fn report(records: &[RunRecord], select_on: Metric) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no run records to report".into()));
    }
    let mut series: Vec<SeriesPoint> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for r in records {
        let a = axes_of(r);
        let key = |p: &SeriesPoint| {
            p.n_train == a.n_train && p.width_factor == a.width_factor && p.lambda_base == a.lambda_base
        };
        let idx = match series.iter().position(key) {
            Some(i) => i,
            None => {
                series.push(SeriesPoint {
                    n_train: a.n_train,
                    width_factor: a.width_factor,
                    lambda_base: a.lambda_base,
                    eta: r.config.hp.eta0,
                    lambda: r.config.hp.lambda,
                    tau_iter: r.timescale.as_ref().map(|t| t.tau_iter),
                    tau_epoch: r.timescale.as_ref().map(|t| t.tau_epoch),
                    runs: 0,
                    diverged_runs: 0,
                    mean_metric: None,
                    is_argmin: false,
                });
                sums.push(0.0);
                series.len() - 1
            }
        };
        let p = &mut series[idx];
        p.runs += 1;
        match metric_of(r, select_on) {
            Some(v) if !r.diverged => sums[idx] += v,
            _ => p.diverged_runs += 1,
        }
    }
    for (p, sum) in series.iter_mut().zip(&sums) {
        if p.diverged_runs == 0 {
            p.mean_metric = Some(sum / p.runs as f64);
        }
    }
    let mut seen: Vec<(usize, f64)> = Vec::new();
    for p in &series {
        if !seen.contains(&(p.n_train, p.width_factor)) {
            seen.push((p.n_train, p.width_factor));
        }
    }
    for (n, s) in seen {
        let best = series
            .iter()
            .enumerate()
            .filter(|(_, p)| p.n_train == n && p.width_factor == s)
            .filter_map(|(i, p)| p.mean_metric.map(|m| (i, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            series[i].is_argmin = true;
        }
    }
    let rows = records
        .iter()
        .map(|r| {
            let a = axes_of(r);
            let is_argmin = series.iter().any(|p| {
                p.is_argmin
                    && p.n_train == a.n_train
                    && p.width_factor == a.width_factor
                    && p.lambda_base == a.lambda_base
            });
            let m = r.final_metrics.as_ref();
            ReportRow {
                run_id: r.run_id.clone(),
                n_train: a.n_train,
                width_factor: a.width_factor,
                lambda_base: a.lambda_base,
                replicate: a.replicate,
                eta: r.config.hp.eta0,
                lambda: r.config.hp.lambda,
                tau_iter: r.timescale.as_ref().map(|t| t.tau_iter),
                tau_epoch: r.timescale.as_ref().map(|t| t.tau_epoch),
                final_train_loss: m.map(|m| m.train_loss),
                final_test_loss: m.map(|m| m.test_loss),
                train_accuracy: m.and_then(|m| m.train_accuracy),
                test_accuracy: m.and_then(|m| m.test_accuracy),
                diverged: r.diverged,
                is_argmin,
            }
        })
        .collect();
    Ok(Report {
        select_on,
        rows,
        series,
    })
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub run_id: String,
    pub provenance: Provenance,
    pub config: RunConfig,
}

/// JSON mirror of the CSV with full provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonSummary {
    pub report: Report,
    pub runs: Vec<RunProvenance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `runs/<run_id>.json` per record, `summary.csv`, and with
/// `Format::Json` also `summary.json`. Returns the written paths.
pub fn write_outputs(dir: &Path, records: &[RunRecord], report: &Report, format: Format) -> Result<Vec<PathBuf>> {
    let runs = dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut written = Vec::new();
    for r in records {
        let path = runs.join(format!("{}.json", r.run_id));
        write(&path, &serde_json::to_vec_pretty(r)?)?;
        written.push(path);
    }
    let csv_path = dir.join("summary.csv");
    write(&csv_path, rows_to_csv(&report.rows)?.as_bytes())?;
    written.push(csv_path);
    if format == Format::Json {
        let summary = JsonSummary {
            report: report.clone(),
            runs: records
                .iter()
                .map(|r| RunProvenance {
                    run_id: r.run_id.clone(),
                    provenance: r.provenance.clone(),
                    config: r.config.clone(),
                })
                .collect(),
        };
        let path = dir.join("summary.json");
        write(&path, &serde_json::to_vec_pretty(&summary)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Records under `dir/runs` (or `dir`), ordered by grid axes.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let runs = if dir.join("runs").is_dir() {
        dir.join("runs")
    } else {
        dir.to_path_buf()
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| Error::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<RunRecord>>>()?;
    records.sort_by(|a, b| {
        let (x, y) = (axes_of(a), axes_of(b));
        (x.n_train, x.width_factor, x.lambda_base, x.replicate)
            .partial_cmp(&(y.n_train, y.width_factor, y.lambda_base, y.replicate))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ConfigFile;
    use crate::harness::sweep::{sweep, SweepSpec};
    use crate::harness::train::train;

    fn template() -> RunConfig {
        ConfigFile::parse("n_train = 100\nn_test = 50\nbatch_size = 25\ninput_dim = 4\nclasses = 3\nwidths = [6, 3]\nepochs = 1\neta0 = 1e-2\n")
            .unwrap()
            .run_config()
            .unwrap()
    }

    #[test]
    fn single_record_single_row() {
        let r = train(&template()).unwrap();
        let rep = report(&[r], Metric::TestLoss).unwrap();
        let csv = rows_to_csv(&rep.rows).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("run_id,n_train,width_factor,lambda_base,replicate,eta,lambda,tau_iter,tau_epoch,"));
        assert!(rep.rows[0].is_argmin);
    }

    #[test]
    fn csv_round_trips_exactly() {
        let mut spec = SweepSpec::single(template());
        spec.lambdas = vec![0.1, 0.3, 1.0];
        spec.n_train = vec![50, 100];
        spec.replicates = 2;
        let res = sweep(&spec, 2).unwrap();
        assert_eq!(res.report.rows.len(), 12);
        let parsed = rows_from_csv(&rows_to_csv(&res.report.rows).unwrap()).unwrap();
        assert_eq!(parsed, res.report.rows);
        for n in [50, 100] {
            let best = res.report.argmin(n, 1.0).unwrap();
            let marked: Vec<_> = parsed.iter().filter(|r| r.n_train == n && r.is_argmin).collect();
            assert_eq!(marked.len(), 2);
            assert!(marked.iter().all(|r| r.lambda_base == best.lambda_base));
        }
    }

    #[test]
    fn writes_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let r = train(&template()).unwrap();
        let rep = report(std::slice::from_ref(&r), Metric::TestLoss).unwrap();
        let paths = write_outputs(dir.path(), std::slice::from_ref(&r), &rep, Format::Json).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(load_records(dir.path()).unwrap(), vec![r]);
        let bad = write_outputs(&dir.path().join("summary.csv"), &[], &rep, Format::Csv).unwrap_err();
        assert!(bad.to_string().contains("summary.csv"), "{bad}");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(report(&[], Metric::TestLoss).is_err());
    }
}
