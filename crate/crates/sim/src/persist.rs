//! Output files: summary tables, per-stage records, config echo, audit and
//! median-run trajectories. All numbers are written with 17 significant
//! digits so reloads are exact and reruns byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use drekf_core::filter::CertificateAudit;
use serde::Serialize;

use crate::config::{to_toml_string, EstimatorKind, RawConfig};
use crate::engine::{Experiment, RunRecord, StageRow};
use crate::error::{SimError, SimResult};
use crate::metrics::{median_run, EstimatorSummary, MetricsSummary, StageSummary};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TOTALS_FILE: &str = "totals.csv";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const RUNS_FILE: &str = "runs.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const AUDIT_FILE: &str = "audit.csv";
pub const TRAJECTORY_FILE: &str = "trajectory_median.csv";
pub const SDP_DUMP_FILE: &str = "sdp_dump.json";

pub const SUMMARY_COLUMNS: [&str; 8] =
    ["stage", "estimator", "mse_mean", "mse_std", "vbar_sq", "gamma_sq", "delta_mean", "delta_std"];
const TOTALS_COLUMNS: [&str; 9] = [
    "estimator",
    "runs",
    "failed_runs",
    "mse_mean",
    "mse_std",
    "collision_rate",
    "goal_rate",
    "certificate_violations",
    "audit_label",
];
const SWEEP_COLUMNS: [&str; 2] = ["sweep_key", "sweep_value"];

/// Fixed 17-significant-digit representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_writer(path: &Path) -> SimResult<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| SimError::format(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> SimError + '_ {
    move |e| SimError::format(path, e)
}

fn summary_rows(summary: &MetricsSummary) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for e in &summary.estimators {
        for s in &e.stages {
            out.push(vec![
                s.stage.to_string(),
                e.estimator.as_str().to_string(),
                fmt_f64(s.mse_mean),
                fmt_f64(s.mse_std),
                fmt_opt(s.vbar_sq),
                fmt_opt(s.gamma_sq),
                fmt_opt(s.delta_mean),
                fmt_opt(s.delta_std),
            ]);
        }
    }
    out
}

fn totals_rows(summary: &MetricsSummary) -> Vec<Vec<String>> {
    summary
        .estimators
        .iter()
        .map(|e| {
            vec![
                e.estimator.as_str().to_string(),
                e.runs.to_string(),
                e.failed_runs.to_string(),
                fmt_f64(e.mse_mean),
                fmt_f64(e.mse_std),
                fmt_opt(e.collision_rate),
                fmt_opt(e.goal_rate),
                e.certificate_violations.map(|v| v.to_string()).unwrap_or_default(),
                e.audit_label.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

fn write_table<'a>(
    path: &Path,
    header: impl IntoIterator<Item = &'a str>,
    rows: impl IntoIterator<Item = Vec<String>>,
) -> SimResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

pub fn write_summary(dir: &Path, summary: &MetricsSummary) -> SimResult<()> {
    write_table(&dir.join(SUMMARY_FILE), SUMMARY_COLUMNS, summary_rows(summary))?;
    write_table(&dir.join(TOTALS_FILE), TOTALS_COLUMNS, totals_rows(summary))
}

/// Merged tables for a sweep: each row is prefixed with the swept key and value.
pub fn write_sweep_summary(dir: &Path, key: &str, points: &[(String, &MetricsSummary)]) -> SimResult<()> {
    let prefix = |rows: &mut Vec<Vec<String>>, v: &str, inner: Vec<Vec<String>>| {
        for r in inner {
            let mut full = vec![key.to_string(), v.to_string()];
            full.extend(r);
            rows.push(full);
        }
    };
    let (mut summary, mut totals) = (Vec::new(), Vec::new());
    for (v, s) in points {
        prefix(&mut summary, v, summary_rows(s));
        prefix(&mut totals, v, totals_rows(s));
    }
    write_table(
        &dir.join(SUMMARY_FILE),
        SWEEP_COLUMNS.into_iter().chain(SUMMARY_COLUMNS),
        summary,
    )?;
    write_table(
        &dir.join(TOTALS_FILE),
        SWEEP_COLUMNS.into_iter().chain(TOTALS_COLUMNS),
        totals,
    )
}

fn parse_f64(path: &Path, s: &str) -> SimResult<f64> {
    s.parse().map_err(|_| SimError::format(path, format!("bad number `{s}`")))
}

fn parse_opt(path: &Path, s: &str) -> SimResult<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(path, s).map(Some)
    }
}

fn parse_usize(path: &Path, s: &str) -> SimResult<usize> {
    s.parse().map_err(|_| SimError::format(path, format!("bad integer `{s}`")))
}

fn parse_kind(path: &Path, s: &str) -> SimResult<EstimatorKind> {
    EstimatorKind::parse(s).ok_or_else(|| SimError::format(path, format!("unknown estimator `{s}`")))
}

fn read_rows(path: &Path, header: &[&str]) -> SimResult<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let found = r.headers().map_err(csv_err(path))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(SimError::format(path, format!("unexpected header {:?}", found)));
    }
    r.records().collect::<Result<Vec<_>, _>>().map_err(csv_err(path))
}

type Keyed<T> = Vec<(Option<String>, T)>;

fn read_tables(dir: &Path, sweep: bool) -> SimResult<Keyed<MetricsSummary>> {
    let off = if sweep { 2 } else { 0 };
    let header = |cols: &[&'static str]| -> Vec<&'static str> {
        if sweep { SWEEP_COLUMNS.iter().chain(cols).copied().collect() } else { cols.to_vec() }
    };
    let key_of = |r: &csv::StringRecord| sweep.then(|| r[1].to_string());

    let totals_path = dir.join(TOTALS_FILE);
    let mut points: Keyed<MetricsSummary> = Vec::new();
    for r in read_rows(&totals_path, &header(&TOTALS_COLUMNS))? {
        let p = &totals_path;
        let key = key_of(&r);
        let summary = EstimatorSummary {
            estimator: parse_kind(p, &r[off])?,
            runs: parse_usize(p, &r[off + 1])?,
            failed_runs: parse_usize(p, &r[off + 2])?,
            mse_mean: parse_f64(p, &r[off + 3])?,
            mse_std: parse_f64(p, &r[off + 4])?,
            collision_rate: parse_opt(p, &r[off + 5])?,
            goal_rate: parse_opt(p, &r[off + 6])?,
            certificate_violations: if r[off + 7].is_empty() { None } else { Some(parse_usize(p, &r[off + 7])?) },
            audit_label: (!r[off + 8].is_empty()).then(|| r[off + 8].to_string()),
            stages: Vec::new(),
        };
        match points.iter_mut().find(|(k, _)| *k == key) {
            Some((_, m)) => m.estimators.push(summary),
            None => points.push((key, MetricsSummary { estimators: vec![summary] })),
        }
    }

    let summary_path = dir.join(SUMMARY_FILE);
    for r in read_rows(&summary_path, &header(&SUMMARY_COLUMNS))? {
        let p = &summary_path;
        let key = key_of(&r);
        let kind = parse_kind(p, &r[off + 1])?;
        let stage = StageSummary {
            stage: parse_usize(p, &r[off])?,
            mse_mean: parse_f64(p, &r[off + 2])?,
            mse_std: parse_f64(p, &r[off + 3])?,
            vbar_sq: parse_opt(p, &r[off + 4])?,
            gamma_sq: parse_opt(p, &r[off + 5])?,
            delta_mean: parse_opt(p, &r[off + 6])?,
            delta_std: parse_opt(p, &r[off + 7])?,
        };
        let est = points
            .iter_mut()
            .find(|(k, _)| *k == key)
            .and_then(|(_, m)| m.estimators.iter_mut().find(|e| e.estimator == kind))
            .ok_or_else(|| SimError::format(p, format!("estimator {kind} missing from {TOTALS_FILE}")))?;
        est.stages.push(stage);
    }
    Ok(points)
}

/// Reload a summary written by [`write_summary`].
pub fn read_summary(dir: &Path) -> SimResult<MetricsSummary> {
    Ok(read_tables(dir, false)?.into_iter().next().map(|(_, m)| m).unwrap_or_default())
}

/// Reload a sweep written by [`write_sweep_summary`], in file order.
pub fn read_sweep_summary(dir: &Path) -> SimResult<Vec<(String, MetricsSummary)>> {
    Ok(read_tables(dir, true)?.into_iter().map(|(k, m)| (k.unwrap_or_default(), m)).collect())
}

#[derive(Serialize)]
struct RecordLine<'a> {
    run: usize,
    estimator: &'a str,
    #[serde(flatten)]
    row: &'a StageRow,
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> SimResult<()> {
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        for e in &r.estimators {
            for row in &e.stages {
                let line = RecordLine { run: r.run, estimator: e.estimator.as_str(), row };
                serde_json::to_writer(&mut w, &line).map_err(|e| SimError::format(path, e))?;
                w.write_all(b"\n").map_err(|e| SimError::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

pub fn write_runs(path: &Path, records: &[RunRecord]) -> SimResult<()> {
    let flag = |b: Option<bool>| b.map(|b| b.to_string()).unwrap_or_default();
    let rows = records.iter().flat_map(|r| {
        r.estimators.iter().map(move |e| {
            vec![
                r.run.to_string(),
                e.estimator.as_str().to_string(),
                e.stages.len().to_string(),
                fmt_f64(e.time_averaged_mse()),
                flag(e.collision),
                flag(e.goal_reached),
                e.failure.as_ref().map(|f| f.stage.to_string()).unwrap_or_default(),
                e.failure.as_ref().map(|f| f.message.clone()).unwrap_or_default(),
            ]
        })
    });
    write_table(
        path,
        ["run", "estimator", "stages", "time_avg_mse", "collision", "goal_reached", "failed_stage", "failure"],
        rows,
    )
}

pub fn write_audit(path: &Path, audit: &CertificateAudit) -> SimResult<()> {
    let rows = audit.stages.iter().map(|s| {
        vec![
            s.stage.to_string(),
            fmt_f64(s.empirical_prior_mse),
            fmt_f64(s.gamma_sq),
            fmt_f64(s.empirical_posterior_mse),
            fmt_f64(s.vbar_sq),
            s.prior_ok.to_string(),
            s.posterior_ok.to_string(),
            audit.label.clone(),
        ]
    });
    write_table(
        path,
        ["stage", "empirical_prior_mse", "gamma_sq", "empirical_posterior_mse", "vbar_sq", "prior_ok", "posterior_ok", "mode"],
        rows,
    )
}

/// Trajectories of the run whose `ekf_nominal` time-averaged MSE is the
/// lower median (first configured estimator if the nominal EKF is absent).
pub fn write_median_trajectory(path: &Path, records: &[RunRecord], estimators: &[EstimatorKind]) -> SimResult<Option<usize>> {
    let reference = if estimators.contains(&EstimatorKind::EkfNominal) { EstimatorKind::EkfNominal } else { estimators[0] };
    let Some(idx) = median_run(records, reference) else { return Ok(None) };
    let rec = &records[idx];
    let nx = rec.estimators.iter().flat_map(|e| e.stages.first()).map(|s| s.truth.len()).next().unwrap_or(0);
    let mut header = vec![String::from("run"), String::from("stage"), String::from("estimator")];
    header.extend((0..nx).map(|i| format!("truth_{i}")));
    header.extend((0..nx).map(|i| format!("estimate_{i}")));
    let rows = rec.estimators.iter().flat_map(|e| {
        e.stages.iter().map(move |s| {
            let mut row = vec![rec.run.to_string(), s.stage.to_string(), e.estimator.as_str().to_string()];
            row.extend(s.truth.iter().map(|v| fmt_f64(*v)));
            row.extend(s.posterior_mean.iter().map(|v| fmt_f64(*v)));
            row
        })
    });
    write_table(path, header.iter().map(String::as_str), rows)?;
    Ok(Some(rec.run))
}

pub fn write_config_echo(path: &Path, raw: &RawConfig) -> SimResult<()> {
    std::fs::write(path, to_toml_string(raw)?).map_err(|e| SimError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> SimResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))
}

/// Everything for a single scenario run. Returns the written paths.
pub fn persist_experiment(dir: &Path, raw: &RawConfig, exp: &Experiment, estimators: &[EstimatorKind]) -> SimResult<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    write_summary(dir, &exp.summary)?;
    written.extend([dir.join(SUMMARY_FILE), dir.join(TOTALS_FILE)]);
    for (name, f) in [
        (RECORDS_FILE, write_records as fn(&Path, &[RunRecord]) -> SimResult<()>),
        (RUNS_FILE, write_runs),
    ] {
        f(&dir.join(name), &exp.records)?;
        written.push(dir.join(name));
    }
    write_config_echo(&dir.join(CONFIG_FILE), raw)?;
    written.push(dir.join(CONFIG_FILE));
    if let Some(audit) = crate::metrics::audit(&exp.records)? {
        write_audit(&dir.join(AUDIT_FILE), &audit)?;
        written.push(dir.join(AUDIT_FILE));
    }
    if write_median_trajectory(&dir.join(TRAJECTORY_FILE), &exp.records, estimators)?.is_some() {
        written.push(dir.join(TRAJECTORY_FILE));
    }
    if !exp.sdp.is_empty() {
        crate::sdp_dump::write_dump(&dir.join(SDP_DUMP_FILE), &exp.sdp)?;
        written.push(dir.join(SDP_DUMP_FILE));
    }
    Ok(written)
}

/// Per-value subdirectories plus merged summary tables at the top level.
pub fn persist_sweep(dir: &Path, key: &str, points: &[(String, Experiment, RawConfig)], estimators: &[EstimatorKind]) -> SimResult<()> {
    ensure_dir(dir)?;
    let mut names = BTreeMap::new();
    for (value, exp, raw) in points {
        let base: String = value
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        let n = names.entry(base.clone()).or_insert(0usize);
        let sub = if *n == 0 { base.clone() } else { format!("{base}_{n}") };
        *n += 1;
        persist_experiment(&dir.join(format!("{key}={sub}")), raw, exp, estimators)?;
    }
    let merged: Vec<(String, &MetricsSummary)> = points.iter().map(|(v, e, _)| (v.clone(), &e.summary)).collect();
    write_sweep_summary(dir, key, &merged)
}
