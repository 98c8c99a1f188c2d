//! Aggregate statistics over Monte Carlo runs.

use drekf_core::filter::{certificate_audit, CertificateAudit, StageErrors, StageRecord};
use serde::{Deserialize, Serialize};

use crate::config::EstimatorKind;
use crate::engine::{EstimatorRun, RunRecord};
use crate::error::SimResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub vbar_sq: Option<f64>,
    pub gamma_sq: Option<f64>,
    pub delta_mean: Option<f64>,
    pub delta_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub runs: usize,
    pub failed_runs: usize,
    /// Mean and sample standard deviation over completed runs of the
    /// time-averaged squared posterior error.
    pub mse_mean: f64,
    pub mse_std: f64,
    pub collision_rate: Option<f64>,
    pub goal_rate: Option<f64>,
    pub certificate_violations: Option<usize>,
    pub audit_label: Option<String>,
    pub stages: Vec<StageSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub estimators: Vec<EstimatorSummary>,
}

impl MetricsSummary {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn runs_of(records: &[RunRecord], kind: EstimatorKind) -> Vec<&EstimatorRun> {
    records.iter().filter_map(|r| r.get(kind)).collect()
}

/// Certificate audit of the completed DR-EKF runs.
pub fn audit(records: &[RunRecord]) -> SimResult<Option<CertificateAudit>> {
    let done: Vec<&EstimatorRun> = runs_of(records, EstimatorKind::Drekf)
        .into_iter()
        .filter(|e| e.completed() && !e.trace.is_empty())
        .collect();
    if done.is_empty() {
        return Ok(None);
    }
    let traces: Vec<&[StageRecord]> = done.iter().map(|e| e.trace.as_slice()).collect();
    let errors: Vec<Vec<StageErrors>> = done
        .iter()
        .map(|e| {
            e.stages
                .iter()
                .map(|s| StageErrors { prior_sq: s.prior_sq, posterior_sq: s.posterior_sq })
                .collect()
        })
        .collect();
    Ok(Some(certificate_audit(&traces, &errors)?))
}

pub fn summarize(records: &[RunRecord], estimators: &[EstimatorKind]) -> SimResult<MetricsSummary> {
    let audit = audit(records)?;
    let mut out = Vec::with_capacity(estimators.len());
    for &kind in estimators {
        let all = runs_of(records, kind);
        let done: Vec<&EstimatorRun> = all.iter().copied().filter(|e| e.completed()).collect();
        let averages: Vec<f64> = done.iter().map(|e| e.time_averaged_mse()).collect();
        let (mse_mean, mse_std) = mean_std(&averages);
        let n_stages = done.iter().map(|e| e.stages.len()).min().unwrap_or(0);
        let stages = (0..n_stages)
            .map(|t| {
                let rows: Vec<_> = done.iter().map(|e| &e.stages[t]).collect();
                let (mse_mean, mse_std) = mean_std(&rows.iter().map(|r| r.posterior_sq).collect::<Vec<_>>());
                let certs: Vec<_> = rows.iter().filter_map(|r| r.certificate.as_ref()).collect();
                let cert_mean = |f: &dyn Fn(&crate::engine::CertificateRow) -> f64| {
                    (certs.len() == rows.len() && !certs.is_empty())
                        .then(|| certs.iter().map(|c| f(c)).sum::<f64>() / certs.len() as f64)
                };
                let deltas: Vec<f64> = rows.iter().filter_map(|r| r.delta).collect();
                let delta = (deltas.len() == rows.len() && !deltas.is_empty()).then(|| mean_std(&deltas));
                StageSummary {
                    stage: rows[0].stage,
                    mse_mean,
                    mse_std,
                    vbar_sq: cert_mean(&|c| c.vbar * c.vbar),
                    gamma_sq: cert_mean(&|c| c.gamma * c.gamma),
                    delta_mean: delta.map(|d| d.0),
                    delta_std: delta.map(|d| d.1),
                }
            })
            .collect();
        let rate = |f: &dyn Fn(&EstimatorRun) -> Option<bool>| {
            let flags: Vec<bool> = all.iter().filter_map(|e| f(e)).collect();
            (!flags.is_empty() && flags.len() == all.len())
                .then(|| flags.iter().filter(|b| **b).count() as f64 / all.len() as f64)
        };
        let (certificate_violations, audit_label) = match (&audit, kind) {
            (Some(a), EstimatorKind::Drekf) => (Some(a.violation_count()), Some(a.label.clone())),
            _ => (None, None),
        };
        out.push(EstimatorSummary {
            estimator: kind,
            runs: all.len(),
            failed_runs: all.len() - done.len(),
            mse_mean,
            mse_std,
            collision_rate: rate(&|e| e.collision),
            goal_rate: rate(&|e| e.goal_reached.map(|g| g && e.completed())),
            certificate_violations,
            audit_label,
            stages,
        });
    }
    Ok(MetricsSummary { estimators: out })
}

/// Index into `records` of the run whose time-averaged MSE for `kind` is the
/// median over completed runs (lower median for even counts).
pub fn median_run(records: &[RunRecord], kind: EstimatorKind) -> Option<usize> {
    let mut scored: Vec<(f64, usize)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.get(kind).filter(|e| e.completed()).map(|e| (e.time_averaged_mse(), i)))
        .collect();
    if scored.is_empty() {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Some(scored[(scored.len() - 1) / 2].1)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
