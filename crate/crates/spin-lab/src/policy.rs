//! Tabular softmax autoregressive policies.
//!
//! A policy keeps an independent logit vector for every context
//! `(prompt, position j, response prefix y_<j)`, so the model space is the
//! full set of strictly positive conditional distributions: any such
//! distribution is realized exactly by `from_distribution`. Log-probabilities,
//! sampling, induced distributions, and parameter gradients are all exact up
//! to floating point.
//!
//! Parameter layout is a single flat vector. For a prompt `x` the block of
//! position `j` holds `vocab_size^j` contexts of `vocab_size` logits each, in
//! lexicographic prefix order:
//!
//! ```text
//! offset(x, j, prefix) = x * B + sum_{k<j} V^{k+1} + prefix * V
//! B = sum_{j<m} V^{j+1}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, softmax_into};
use crate::task::{CategoricalOverResponses, Prompt, Response, SequenceSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Number of logits per prompt: `sum_{j<m} V^{j+1}`.
pub fn params_per_prompt(spec: &SequenceSpec) -> usize {
    let v = spec.vocab_size();
    let mut width = v;
    let mut total = 0;
    for _ in 0..spec.resp_len() {
        total += width;
        width *= v;
    }
    total
}

/// Total parameter count: `num_prompts * params_per_prompt`.
pub fn param_len(spec: &SequenceSpec) -> usize {
    spec.num_prompts() * params_per_prompt(spec)
}

/// The tabular policy p_theta. Immutable through its read API; optimizers
/// mutate the flat parameter slice they own exclusively.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    spec: SequenceSpec,
    logits: Vec<f64>,
}

/// Gradient with respect to every logit; same flat layout as the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    spec: SequenceSpec,
    values: Vec<f64>,
}

impl PolicyGradient {
    pub fn zeros(spec: &SequenceSpec) -> Self {
        PolicyGradient {
            spec: *spec,
            values: vec![0.0; param_len(spec)],
        }
    }

    pub fn from_values(spec: &SequenceSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != param_len(spec) {
            return Err(Error::shape(format!(
                "gradient has {} entries, expected {}",
                values.len(),
                param_len(spec)
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gradient contains non-finite entries"));
        }
        Ok(PolicyGradient {
            spec: *spec,
            values,
        })
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn l2_norm(&self) -> f64 {
        crate::numerics::l2_norm(&self.values)
    }

    /// In-place `self += coeff * other`.
    pub fn axpy(&mut self, coeff: f64, other: &PolicyGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += coeff * b;
        }
    }

    pub fn scale(&mut self, coeff: f64) {
        for a in self.values.iter_mut() {
            *a *= coeff;
        }
    }
}

/// Context walker: yields the flat offset of each position's logit block
/// along a fixed response, advancing the prefix as tokens are consumed.
struct ContextWalk {
    vocab: usize,
    base: usize,
    width: usize,
    prefix: usize,
}

impl ContextWalk {
    fn new(spec: &SequenceSpec, prompt_index: usize) -> Self {
        ContextWalk {
            vocab: spec.vocab_size(),
            base: prompt_index * params_per_prompt(spec),
            width: spec.vocab_size(),
            prefix: 0,
        }
    }

    /// Offset of the current context's logit vector (length `vocab`).
    fn offset(&self) -> usize {
        self.base + self.prefix * self.vocab
    }

    /// Consume one token and move to the next position's block.
    fn advance(&mut self, token: u32) {
        self.base += self.width;
        self.prefix = self.prefix * self.vocab + token as usize;
        self.width *= self.vocab;
    }
}

impl TabularPolicy {
    /// All-zero logits: the uniform policy.
    pub fn uniform(spec: &SequenceSpec) -> Self {
        TabularPolicy {
            spec: *spec,
            logits: vec![0.0; param_len(spec)],
        }
    }

    /// Wraps a flat logit vector, validating shape and finiteness.
    pub fn from_logits(spec: &SequenceSpec, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != param_len(spec) {
            return Err(Error::shape(format!(
                "logit table has {} entries, expected {}",
                logits.len(),
                param_len(spec)
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("logits must all be finite"));
        }
        Ok(TabularPolicy {
            spec: *spec,
            logits,
        })
    }

    /// Independent uniform logits in `[-scale, scale)`; used for probe points.
    pub fn random(spec: &SequenceSpec, seed: u64, scale: f64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let logits = (0..param_len(spec))
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            .collect();
        TabularPolicy {
            spec: *spec,
            logits,
        }
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn check_pair(&self, x: &Prompt, y: &Response) -> Result<(usize, usize)> {
        // Re-validated here so a Prompt/Response built against another spec
        // cannot index out of shape.
        let xp = Prompt::new(x.tokens().to_vec(), &self.spec)
            .map_err(|e| Error::shape(format!("prompt does not match policy spec: {e}")))?;
        let yr = Response::new(y.tokens().to_vec(), &self.spec)
            .map_err(|e| Error::shape(format!("response does not match policy spec: {e}")))?;
        Ok((xp.index(&self.spec), yr.index(&self.spec)))
    }

    /// log p_theta(y|x) in nats: the sum over positions of the log-softmax
    /// at each visited context.
    pub fn log_prob(&self, x: &Prompt, y: &Response) -> Result<f64> {
        let (_, _) = self.check_pair(x, y)?;
        Ok(self.log_prob_by_index(x.index(&self.spec), y))
    }

    pub(crate) fn log_prob_by_index(&self, prompt_index: usize, y: &Response) -> f64 {
        let v = self.spec.vocab_size();
        let mut walk = ContextWalk::new(&self.spec, prompt_index);
        let mut total = 0.0;
        for &tok in y.tokens() {
            let off = walk.offset();
            let block = &self.logits[off..off + v];
            total += block[tok as usize] - log_sum_exp(block);
            walk.advance(tok);
        }
        total
    }

    /// Ancestral sampling at temperature 1: one categorical draw per position.
    pub fn sample(&self, x: &Prompt, rng: &mut impl Rng) -> Response {
        let v = self.spec.vocab_size();
        let mut walk = ContextWalk::new(&self.spec, x.index(&self.spec));
        let mut probs = vec![0.0; v];
        let mut tokens = Vec::with_capacity(self.spec.resp_len());
        for _ in 0..self.spec.resp_len() {
            let off = walk.offset();
            softmax_into(&self.logits[off..off + v], &mut probs);
            let tok = crate::numerics::categorical_draw(&probs, rng.random()) as u32;
            tokens.push(tok);
            walk.advance(tok);
        }
        Response::new(tokens, &self.spec).expect("sampled tokens are in range")
    }

    /// The exact distribution this policy induces over all responses.
    pub fn induced_distribution(&self) -> CategoricalOverResponses {
        let rows = (0..self.spec.num_prompts())
            .map(|x| {
                (0..self.spec.num_responses())
                    .map(|y| {
                        self.log_prob_by_index(x, &Response::from_index(y, &self.spec))
                            .exp()
                    })
                    .collect()
            })
            .collect();
        CategoricalOverResponses::new(self.spec, rows)
            .expect("softmax chain rows are normalized by construction")
    }

    /// Log-probability table `[prompt][response]`, the workhorse behind the
    /// exact objectives.
    pub(crate) fn log_prob_table(&self) -> Vec<Vec<f64>> {
        (0..self.spec.num_prompts())
            .map(|x| {
                (0..self.spec.num_responses())
                    .map(|y| self.log_prob_by_index(x, &Response::from_index(y, &self.spec)))
                    .collect()
            })
            .collect()
    }

    /// Inverts `induced_distribution`: logits are the raw log chain-rule
    /// conditionals of `dist` (no per-context shift applied).
    pub fn from_distribution(dist: &CategoricalOverResponses) -> Result<TabularPolicy> {
        let spec = *dist.spec();
        if !dist.is_strictly_positive() {
            return Err(Error::invalid(
                "from_distribution requires strictly positive probabilities",
            ));
        }
        let v = spec.vocab_size();
        let m = spec.resp_len();
        let r = spec.num_responses();
        let mut logits = vec![0.0; param_len(&spec)];
        let per_prompt = params_per_prompt(&spec);
        for x in 0..spec.num_prompts() {
            let row = dist.row(x);
            let mut pos_base = x * per_prompt;
            let mut tail = r / v; // V^{m-1-j}, responses sharing (prefix, token)
            for j in 0..m {
                let contexts = v.pow(j as u32);
                let mut mass = vec![0.0; contexts * v];
                for (y_idx, &p) in row.iter().enumerate() {
                    let prefix = y_idx / (tail * v);
                    let tok = (y_idx / tail) % v;
                    mass[prefix * v + tok] += p;
                }
                for prefix in 0..contexts {
                    let cell = &mass[prefix * v..(prefix + 1) * v];
                    let total: f64 = cell.iter().sum();
                    for (k, &m_tok) in cell.iter().enumerate() {
                        logits[pos_base + prefix * v + k] = (m_tok / total).ln();
                    }
                }
                pos_base += contexts * v;
                tail /= v;
            }
        }
        TabularPolicy::from_logits(&spec, logits)
    }

    /// d log p_theta(y|x) / d logit: `1{k = y_j} - softmax_k` at each visited
    /// context, zero everywhere else.
    pub fn log_prob_grad(&self, x: &Prompt, y: &Response) -> Result<PolicyGradient> {
        self.check_pair(x, y)?;
        let mut grad = PolicyGradient::zeros(&self.spec);
        let mut scratch = vec![0.0; self.spec.vocab_size()];
        self.accumulate_log_prob_grad(x.index(&self.spec), y, 1.0, grad.values_mut(), &mut scratch);
        Ok(grad)
    }

    /// Adds `coeff * d log p(y|x) / d logit` into `out`. `scratch` must have
    /// `vocab_size` slots.
    pub(crate) fn accumulate_log_prob_grad(
        &self,
        prompt_index: usize,
        y: &Response,
        coeff: f64,
        out: &mut [f64],
        scratch: &mut [f64],
    ) {
        let v = self.spec.vocab_size();
        let mut walk = ContextWalk::new(&self.spec, prompt_index);
        for &tok in y.tokens() {
            let off = walk.offset();
            softmax_into(&self.logits[off..off + v], scratch);
            for k in 0..v {
                out[off + k] -= coeff * scratch[k];
            }
            out[off + tok as usize] += coeff;
            walk.advance(tok);
        }
    }

    // -- checkpoint io ------------------------------------------------------

    /// Writes `{format_version, spec, iteration, logits}` with logits nested
    /// in (prompt, position, prefix) enumeration order.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, iteration: usize) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: self.spec,
            iteration,
            logits: self.nested_logits(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint, validating version, shape, and finiteness.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TabularPolicy, usize)> {
        let bytes = std::fs::read(path)?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {}",
                file.format_version
            )));
        }
        let policy = TabularPolicy::from_nested(&file.spec, &file.logits)?;
        Ok((policy, file.iteration))
    }

    fn nested_logits(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let v = self.spec.vocab_size();
        let per_prompt = params_per_prompt(&self.spec);
        (0..self.spec.num_prompts())
            .map(|x| {
                let mut pos_base = x * per_prompt;
                (0..self.spec.resp_len())
                    .map(|j| {
                        let contexts = v.pow(j as u32);
                        let block: Vec<Vec<f64>> = (0..contexts)
                            .map(|prefix| {
                                let off = pos_base + prefix * v;
                                self.logits[off..off + v].to_vec()
                            })
                            .collect();
                        pos_base += contexts * v;
                        block
                    })
                    .collect()
            })
            .collect()
    }

    fn from_nested(spec: &SequenceSpec, nested: &[Vec<Vec<Vec<f64>>>]) -> Result<TabularPolicy> {
        let v = spec.vocab_size();
        if nested.len() != spec.num_prompts() {
            return Err(Error::shape("checkpoint prompt count mismatch"));
        }
        let mut logits = Vec::with_capacity(param_len(spec));
        for prompt_block in nested {
            if prompt_block.len() != spec.resp_len() {
                return Err(Error::shape("checkpoint position count mismatch"));
            }
            for (j, pos_block) in prompt_block.iter().enumerate() {
                if pos_block.len() != v.pow(j as u32) {
                    return Err(Error::shape("checkpoint prefix count mismatch"));
                }
                for ctx in pos_block {
                    if ctx.len() != v {
                        return Err(Error::shape("checkpoint vocab width mismatch"));
                    }
                    logits.extend_from_slice(ctx);
                }
            }
        }
        TabularPolicy::from_logits(spec, logits)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    spec: SequenceSpec,
    iteration: usize,
    logits: Vec<Vec<Vec<Vec<f64>>>>,
}
