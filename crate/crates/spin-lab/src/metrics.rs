//! Divergences between exact categorical distributions and the trajectory
//! record persisted as `metrics.csv`.
//!
//! All divergences are in nats and averaged over prompts under q, matching
//! the expectation structure of the training objective. KL uses the
//! 0 log 0 = 0 convention; a zero in the second argument where the first is
//! positive is an error, not a clamped value.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{spin_objective_exact, LossKind};
use crate::policy::TabularPolicy;
use crate::task::{CategoricalOverResponses, TargetTask};

/// KL(p || q) over one probability vector pair.
///
/// Errors with the offending index if q is zero where p is positive.
/// Rounding can leave a tiny negative sum when p ~ q; that is floored at 0
/// since the true value cannot be negative on probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> std::result::Result<f64, usize> {
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(i);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Jensen-Shannon divergence in nats; always finite, in [0, ln 2].
pub fn jsd_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    total.max(0.0)
}

/// Total variation distance: half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Divergences for a single prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDivergence {
    pub prompt: usize,
    pub kl_data_model: f64,
    pub kl_model_data: f64,
    pub jsd: f64,
    pub tv: f64,
}

/// Prompt-averaged divergences between a data distribution `a` and a model
/// distribution `b`, with the per-prompt breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub kl_data_model: f64,
    pub kl_model_data: f64,
    pub jsd: f64,
    pub tv: f64,
    pub per_prompt: Vec<PromptDivergence>,
}

/// Computes KL(a||b), KL(b||a), JSD, and TV per prompt, averaged under `q`.
pub fn divergences(
    a: &CategoricalOverResponses,
    b: &CategoricalOverResponses,
    q: &[f64],
) -> Result<DivergenceReport> {
    if a.spec() != b.spec() {
        return Err(Error::shape("divergence arguments have different specs"));
    }
    if q.len() != a.spec().num_prompts() {
        return Err(Error::shape("prompt distribution length mismatch"));
    }
    let mut per_prompt = Vec::with_capacity(q.len());
    let (mut kl_ab, mut kl_ba, mut jsd, mut tv) = (0.0, 0.0, 0.0, 0.0);
    for (x, &qx) in q.iter().enumerate() {
        let (pa, pb) = (a.row(x), b.row(x));
        let d_ab = kl_divergence(pa, pb).map_err(|response| Error::SupportViolation {
            prompt: x,
            response,
        })?;
        let d_ba = kl_divergence(pb, pa).map_err(|response| Error::SupportViolation {
            prompt: x,
            response,
        })?;
        let d_js = jsd_divergence(pa, pb);
        let d_tv = tv_distance(pa, pb);
        kl_ab += qx * d_ab;
        kl_ba += qx * d_ba;
        jsd += qx * d_js;
        tv += qx * d_tv;
        per_prompt.push(PromptDivergence {
            prompt: x,
            kl_data_model: d_ab,
            kl_model_data: d_ba,
            jsd: d_js,
            tv: d_tv,
        });
    }
    Ok(DivergenceReport {
        kl_data_model: kl_ab,
        kl_model_data: kl_ba,
        jsd,
        tv,
        per_prompt,
    })
}

// ---------------------------------------------------------------------------
// Trajectory rows and metrics.csv
// ---------------------------------------------------------------------------

/// One `metrics.csv` row. Columns are fixed:
/// `iteration, step, loss_exact, loss_batch, kl_data_model, kl_model_data,
/// jsd, tv, grad_norm, lambda, wall_ms`.
///
/// The iteration-0 row has no loss/grad/lambda fields (there is no previous
/// opponent). `wall_ms` is persisted as 0 so reruns of the same experiment
/// are byte-identical; measured timings are reported on stdout only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub step: usize,
    pub loss_exact: Option<f64>,
    pub loss_batch: Option<f64>,
    pub kl_data_model: f64,
    pub kl_model_data: f64,
    pub jsd: f64,
    pub tv: f64,
    pub grad_norm: Option<f64>,
    pub lambda: Option<f64>,
    pub wall_ms: u64,
}

/// Extra per-iteration facts that `record_iteration` cannot derive from the
/// checkpoints alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct IterationStats {
    pub step: usize,
    pub loss_batch: Option<f64>,
    pub grad_norm: Option<f64>,
}

/// Builds the row for iteration `t`: divergences of the current policy
/// against p_data, plus the exact objective L(theta_t, theta_{t-1}) when a
/// previous opponent exists.
pub fn record_iteration(
    t: usize,
    policy: &TabularPolicy,
    previous: Option<(&TabularPolicy, f64)>,
    task: &TargetTask,
    loss: LossKind,
    stats: IterationStats,
) -> Result<MetricsRow> {
    let report = divergences(
        task.data_dist(),
        &policy.induced_distribution(),
        task.prompt_dist(),
    )?;
    let (loss_exact, lambda) = match previous {
        Some((prev, lambda)) => (
            Some(spin_objective_exact(policy, prev, lambda, task, loss)?),
            Some(lambda),
        ),
        None => (None, None),
    };
    Ok(MetricsRow {
        iteration: t,
        step: stats.step,
        loss_exact,
        loss_batch: stats.loss_batch,
        kl_data_model: report.kl_data_model,
        kl_model_data: report.kl_model_data,
        jsd: report.jsd,
        tv: report.tv,
        grad_norm: stats.grad_norm,
        lambda,
        wall_ms: 0,
    })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(Error::Csv)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}
