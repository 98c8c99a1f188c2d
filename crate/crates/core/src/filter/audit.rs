use alloc::string::String;
use alloc::vec::Vec;

use super::StageRecord;
use crate::error::{Error, Result};

/// Squared prior and posterior errors of one run at one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageErrors {
    pub prior_sq: f64,
    pub posterior_sq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditStage {
    pub stage: usize,
    pub empirical_prior_mse: f64,
    pub gamma_sq: f64,
    pub empirical_posterior_mse: f64,
    pub vbar_sq: f64,
    pub prior_ok: bool,
    pub posterior_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertificateAudit {
    pub label: String,
    pub stages: Vec<AuditStage>,
}

impl CertificateAudit {
    pub fn violations(&self) -> impl Iterator<Item = &AuditStage> {
        self.stages.iter().filter(|s| !(s.prior_ok && s.posterior_ok))
    }

    pub fn violation_count(&self) -> usize {
        self.violations().count()
    }
}

/// Compare Monte Carlo mean squared errors against γ_t² and V̄_t².
///
/// `traces[r]` and `errors[r]` belong to run `r`. With strict envelopes the
/// bounds are identical across runs; in pathwise mode they vary and the
/// run-average of the squared bounds is used.
pub fn certificate_audit(traces: &[&[StageRecord]], errors: &[Vec<StageErrors>]) -> Result<CertificateAudit> {
    if traces.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            context: "certificate audit runs",
            expected: traces.len(),
            found: errors.len(),
        });
    }
    if traces.is_empty() {
        return Ok(CertificateAudit {
            label: String::new(),
            stages: Vec::new(),
        });
    }
    let n_stages = traces[0].len();
    for (tr, er) in traces.iter().zip(errors) {
        if tr.len() != n_stages || er.len() != n_stages {
            return Err(Error::DimensionMismatch {
                context: "certificate audit stages",
                expected: n_stages,
                found: tr.len().min(er.len()),
            });
        }
    }
    let strict = traces.iter().all(|tr| tr.iter().all(|r| r.certificate.strict));
    let label = if strict {
        String::from("strict envelopes")
    } else {
        String::from("pathwise surrogate; certificate guarantee not formally claimed")
    };
    let runs = traces.len() as f64;
    let mut stages = Vec::with_capacity(n_stages);
    for t in 0..n_stages {
        let mut prior = 0.0;
        let mut post = 0.0;
        let mut gamma_sq = 0.0;
        let mut vbar_sq = 0.0;
        for (tr, er) in traces.iter().zip(errors) {
            prior += er[t].prior_sq;
            post += er[t].posterior_sq;
            let c = &tr[t].certificate;
            gamma_sq += c.gamma * c.gamma;
            vbar_sq += c.vbar * c.vbar;
        }
        let (prior, post, gamma_sq, vbar_sq) = (prior / runs, post / runs, gamma_sq / runs, vbar_sq / runs);
        stages.push(AuditStage {
            stage: t,
            empirical_prior_mse: prior,
            gamma_sq,
            empirical_posterior_mse: post,
            vbar_sq,
            prior_ok: prior <= gamma_sq,
            posterior_ok: post <= vbar_sq,
        });
    }
    Ok(CertificateAudit { label, stages })
}
