//! Loss functions and training objectives.
//!
//! The admissible losses are monotonically decreasing convex functions with
//! a strictly negative derivative at zero. The self-play objective feeds them
//! the reference-relative log-ratio margin between a data response and a
//! model response; its exact form is a triple sum over the enumerated
//! universe, and its batch form is the mean over sampled pairs.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::pairwise_sum;
use crate::policy::{PolicyGradient, TabularPolicy};
use crate::task::{Prompt, Response, SequenceSpec, SftExample, SyntheticPair, TargetTask};

/// Exponent guard for the exponential loss; keeps values finite at extreme
/// margins (documented saturation when training with this loss).
const EXP_ARG_MAX: f64 = 700.0;

/// The loss family: `logistic` log(1+e^-t), `hinge` max(0, 1-t),
/// `exponential` e^-t, `correlation` 1-t, `linear` -t.
///
/// `linear` is unbounded below and kept for research probes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Logistic,
    Hinge,
    Exponential,
    Correlation,
    Linear,
}

pub const ALL_LOSSES: [LossKind; 5] = [
    LossKind::Logistic,
    LossKind::Hinge,
    LossKind::Exponential,
    LossKind::Correlation,
    LossKind::Linear,
];

impl LossKind {
    pub fn value(self, t: f64) -> f64 {
        match self {
            // Branch-stable log1p form: exact down to e^-745 and never overflows.
            LossKind::Logistic => {
                if t >= 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::Hinge => (1.0 - t).max(0.0),
            LossKind::Exponential => (-t).min(EXP_ARG_MAX).exp(),
            LossKind::Correlation => 1.0 - t,
            LossKind::Linear => -t,
        }
    }

    pub fn deriv(self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if t >= 0.0 {
                    let e = (-t).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + t.exp())
                }
            }
            // Right derivative 0 at the kink t = 1, so descent is well-defined.
            LossKind::Hinge => {
                if t < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::Exponential => -(-t).min(EXP_ARG_MAX).exp(),
            LossKind::Correlation | LossKind::Linear => -1.0,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossKind::Logistic => "logistic",
            LossKind::Hinge => "hinge",
            LossKind::Exponential => "exponential",
            LossKind::Correlation => "correlation",
            LossKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(LossKind::Logistic),
            "hinge" => Ok(LossKind::Hinge),
            "exponential" => Ok(LossKind::Exponential),
            "correlation" => Ok(LossKind::Correlation),
            "linear" => Ok(LossKind::Linear),
            other => Err(Error::invalid(format!(
                "unknown loss '{other}', expected logistic|hinge|exponential|correlation|linear"
            ))),
        }
    }
}

pub fn loss_value(kind: LossKind, t: f64) -> f64 {
    kind.value(t)
}

pub fn loss_deriv(kind: LossKind, t: f64) -> f64 {
    kind.deriv(t)
}

// ---------------------------------------------------------------------------
// SpinBatch
// ---------------------------------------------------------------------------

/// A non-empty batch of (prompt, data response, model response) triples.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinBatch {
    spec: SequenceSpec,
    items: Vec<(Prompt, Response, Response)>,
}

impl SpinBatch {
    pub fn new(spec: SequenceSpec, items: Vec<(Prompt, Response, Response)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("spin batch must be non-empty"));
        }
        for (x, y, y2) in &items {
            Prompt::new(x.tokens().to_vec(), &spec)?;
            Response::new(y.tokens().to_vec(), &spec)?;
            Response::new(y2.tokens().to_vec(), &spec)?;
        }
        Ok(SpinBatch { spec, items })
    }

    pub fn from_pairs(spec: SequenceSpec, pairs: &[SyntheticPair]) -> Result<Self> {
        Self::new(
            spec,
            pairs
                .iter()
                .map(|p| {
                    (
                        p.prompt.clone(),
                        p.real_response.clone(),
                        p.synthetic_response.clone(),
                    )
                })
                .collect(),
        )
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn items(&self) -> &[(Prompt, Response, Response)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Margin and objectives
// ---------------------------------------------------------------------------

fn check_same_shape(a: &TabularPolicy, b: &TabularPolicy) -> Result<()> {
    if a.spec() != b.spec() {
        return Err(Error::shape("policy and reference specs differ"));
    }
    Ok(())
}

/// The reference-relative log-ratio margin
/// `lambda * [(log p(y|x) - log p_ref(y|x)) - (log p(y'|x) - log p_ref(y'|x))]`.
pub fn spin_margin(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    x: &Prompt,
    y: &Response,
    y_model: &Response,
) -> Result<f64> {
    check_same_shape(policy, reference)?;
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::invalid("lambda must be positive"));
    }
    let real = policy.log_prob(x, y)? - reference.log_prob(x, y)?;
    let model = policy.log_prob(x, y_model)? - reference.log_prob(x, y_model)?;
    Ok(lambda * (real - model))
}

/// The DPO pair loss `-log sigma(beta * margin)`, which for the logistic loss
/// is exactly `loss_value(Logistic, spin_margin(..))`; the shared arithmetic
/// path makes the identity hold bit for bit.
pub fn dpo_pair_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    x: &Prompt,
    y_chosen: &Response,
    y_rejected: &Response,
) -> Result<f64> {
    Ok(loss_value(
        LossKind::Logistic,
        spin_margin(policy, reference, beta, x, y_chosen, y_rejected)?,
    ))
}

/// The exact population objective with the frozen-reference tables
/// precomputed once, for optimizer loops that evaluate it repeatedly.
///
/// Both evaluation and gradient cost O(num_prompts * num_responses^2).
pub struct ExactSpinProblem<'a> {
    task: &'a TargetTask,
    lambda: f64,
    loss: LossKind,
    ref_log: Vec<Vec<f64>>,
    ref_prob: Vec<Vec<f64>>,
}

impl<'a> ExactSpinProblem<'a> {
    pub fn new(
        reference: &TabularPolicy,
        lambda: f64,
        task: &'a TargetTask,
        loss: LossKind,
    ) -> Result<Self> {
        if reference.spec() != task.spec() {
            return Err(Error::shape("reference spec does not match task spec"));
        }
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::invalid("lambda must be positive"));
        }
        let ref_log = reference.log_prob_table();
        let ref_prob = ref_log
            .iter()
            .map(|row| row.iter().map(|l| l.exp()).collect())
            .collect();
        Ok(ExactSpinProblem {
            task,
            lambda,
            loss,
            ref_log,
            ref_prob,
        })
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.spec() != self.task.spec() {
            return Err(Error::shape("policy spec does not match task spec"));
        }
        Ok(())
    }

    /// `sum_x q(x) sum_y p_data(y|x) sum_y' p_ref(y'|x) loss(margin)`.
    pub fn objective(&self, policy: &TabularPolicy) -> Result<f64> {
        self.check_policy(policy)?;
        let spec = self.task.spec();
        let lp = policy.log_prob_table();
        let r = spec.num_responses();
        let mut per_prompt = Vec::with_capacity(spec.num_prompts());
        let mut terms = vec![0.0; r * r];
        for x in 0..spec.num_prompts() {
            let pd = self.task.data_dist().row(x);
            let pr = &self.ref_prob[x];
            let d: Vec<f64> = lp[x]
                .iter()
                .zip(&self.ref_log[x])
                .map(|(a, b)| a - b)
                .collect();
            for y in 0..r {
                for y2 in 0..r {
                    let margin = self.lambda * (d[y] - d[y2]);
                    terms[y * r + y2] = pd[y] * pr[y2] * self.loss.value(margin);
                }
            }
            per_prompt.push(self.task.prompt_dist()[x] * pairwise_sum(&terms));
        }
        Ok(pairwise_sum(&per_prompt))
    }

    /// Analytic gradient with respect to the policy logits.
    pub fn gradient(&self, policy: &TabularPolicy) -> Result<PolicyGradient> {
        self.check_policy(policy)?;
        let spec = *self.task.spec();
        let lp = policy.log_prob_table();
        let r = spec.num_responses();
        let mut grad = PolicyGradient::zeros(&spec);
        let mut scratch = vec![0.0; spec.vocab_size()];
        // grad = sum_{x,y} alpha(x,y) * d log p(y|x), where alpha collects
        // the weight of y as the data response (row sum) minus as the model
        // response (column sum) in the loss-derivative-weighted triple sum.
        let mut row_sum = vec![0.0; r];
        let mut col_sum = vec![0.0; r];
        for x in 0..spec.num_prompts() {
            let q = self.task.prompt_dist()[x];
            if q == 0.0 {
                continue;
            }
            let pd = self.task.data_dist().row(x);
            let pr = &self.ref_prob[x];
            let d: Vec<f64> = lp[x]
                .iter()
                .zip(&self.ref_log[x])
                .map(|(a, b)| a - b)
                .collect();
            row_sum.iter_mut().for_each(|v| *v = 0.0);
            col_sum.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..r {
                for y2 in 0..r {
                    let w = q
                        * pd[y]
                        * pr[y2]
                        * self.lambda
                        * self.loss.deriv(self.lambda * (d[y] - d[y2]));
                    row_sum[y] += w;
                    col_sum[y2] += w;
                }
            }
            for y in 0..r {
                let alpha = row_sum[y] - col_sum[y];
                if alpha != 0.0 {
                    policy.accumulate_log_prob_grad(
                        x,
                        &Response::from_index(y, &spec),
                        alpha,
                        grad.values_mut(),
                        &mut scratch,
                    );
                }
            }
        }
        Ok(grad)
    }
}

/// Exact population objective: the full triple sum
/// `sum_x q(x) sum_y p_data(y|x) sum_y' p_ref(y'|x) loss(margin)`.
pub fn spin_objective_exact(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    task: &TargetTask,
    loss: LossKind,
) -> Result<f64> {
    check_same_shape(policy, reference)?;
    ExactSpinProblem::new(reference, lambda, task, loss)?.objective(policy)
}

/// Analytic gradient of `spin_objective_exact` with respect to the policy
/// logits. The reference is frozen.
pub fn spin_gradient_exact(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    task: &TargetTask,
    loss: LossKind,
) -> Result<PolicyGradient> {
    check_same_shape(policy, reference)?;
    ExactSpinProblem::new(reference, lambda, task, loss)?.gradient(policy)
}

/// Mean loss over a batch of (x, y, y') triples.
pub fn spin_objective_batch(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    batch: &SpinBatch,
    loss: LossKind,
) -> Result<f64> {
    check_same_shape(policy, reference)?;
    if policy.spec() != batch.spec() {
        return Err(Error::shape("policy spec does not match batch spec"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (x, y, y2) in batch.items() {
        terms.push(loss.value(spin_margin(policy, reference, lambda, x, y, y2)?));
    }
    Ok(pairwise_sum(&terms) / batch.len() as f64)
}

/// Mean-gradient of `spin_objective_batch`:
/// `1/N sum_i loss'(margin_i) * lambda * [grad log p(y_i) - grad log p(y'_i)]`.
pub fn spin_gradient_batch(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    batch: &SpinBatch,
    loss: LossKind,
) -> Result<PolicyGradient> {
    check_same_shape(policy, reference)?;
    if policy.spec() != batch.spec() {
        return Err(Error::shape("policy spec does not match batch spec"));
    }
    let spec = *policy.spec();
    let n = batch.len() as f64;
    let mut grad = PolicyGradient::zeros(&spec);
    let mut scratch = vec![0.0; spec.vocab_size()];
    for (x, y, y2) in batch.items() {
        let margin = spin_margin(policy, reference, lambda, x, y, y2)?;
        let coeff = loss.deriv(margin) * lambda / n;
        let xi = x.index(&spec);
        policy.accumulate_log_prob_grad(xi, y, coeff, grad.values_mut(), &mut scratch);
        policy.accumulate_log_prob_grad(xi, y2, -coeff, grad.values_mut(), &mut scratch);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// SFT negative log-likelihood
// ---------------------------------------------------------------------------

/// `-mean_i log p(y_i|x_i)` over a non-empty dataset.
pub fn sft_nll(policy: &TabularPolicy, dataset: &[SftExample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("sft dataset must be non-empty"));
    }
    let mut terms = Vec::with_capacity(dataset.len());
    for e in dataset {
        terms.push(-policy.log_prob(&e.prompt, &e.response)?);
    }
    Ok(pairwise_sum(&terms) / dataset.len() as f64)
}

/// Gradient of `sft_nll`.
pub fn sft_nll_grad(policy: &TabularPolicy, dataset: &[SftExample]) -> Result<PolicyGradient> {
    if dataset.is_empty() {
        return Err(Error::invalid("sft dataset must be non-empty"));
    }
    let spec = *policy.spec();
    let mut grad = PolicyGradient::zeros(&spec);
    let mut scratch = vec![0.0; spec.vocab_size()];
    let coeff = -1.0 / dataset.len() as f64;
    for e in dataset {
        policy.log_prob(&e.prompt, &e.response)?; // shape check
        policy.accumulate_log_prob_grad(
            e.prompt.index(&spec),
            &e.response,
            coeff,
            grad.values_mut(),
            &mut scratch,
        );
    }
    Ok(grad)
}

/// Population (infinite-data) NLL: `-sum_x q(x) sum_y p_data(y|x) log p(y|x)`.
pub fn sft_nll_exact(policy: &TabularPolicy, task: &TargetTask) -> Result<f64> {
    if policy.spec() != task.spec() {
        return Err(Error::shape("policy spec does not match task spec"));
    }
    let lp = policy.log_prob_table();
    let spec = task.spec();
    let mut per_prompt = Vec::with_capacity(spec.num_prompts());
    for x in 0..spec.num_prompts() {
        let pd = task.data_dist().row(x);
        let terms: Vec<f64> = (0..spec.num_responses())
            .map(|y| -pd[y] * lp[x][y])
            .collect();
        per_prompt.push(task.prompt_dist()[x] * pairwise_sum(&terms));
    }
    Ok(pairwise_sum(&per_prompt))
}

/// Gradient of `sft_nll_exact`.
pub fn sft_nll_exact_grad(policy: &TabularPolicy, task: &TargetTask) -> Result<PolicyGradient> {
    if policy.spec() != task.spec() {
        return Err(Error::shape("policy spec does not match task spec"));
    }
    let spec = *task.spec();
    let mut grad = PolicyGradient::zeros(&spec);
    let mut scratch = vec![0.0; spec.vocab_size()];
    for x in 0..spec.num_prompts() {
        let q = task.prompt_dist()[x];
        if q == 0.0 {
            continue;
        }
        for y in 0..spec.num_responses() {
            let coeff = -q * task.data_dist().prob(x, y);
            policy.accumulate_log_prob_grad(
                x,
                &Response::from_index(y, &spec),
                coeff,
                grad.values_mut(),
                &mut scratch,
            );
        }
    }
    Ok(grad)
}
