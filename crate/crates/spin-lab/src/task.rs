//! The toy sequence universe: fixed-length token sequences over a small
//! vocabulary, exact categorical distributions over all of them, and the
//! synthetic tasks / datasets every other module consumes.
//!
//! Everything here is exactly enumerable. Prompts and responses are ordered
//! lexicographically by token indices (pure integer arithmetic, so the order
//! is identical on every platform), and a `SequenceSpec` refuses to construct
//! universes whose joint (prompt, response) enumeration exceeds a cap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Default cap on `num_prompts * num_responses`. Keeps every exact
/// triple-sum oracle comfortably under a second.
pub const DEFAULT_PAIR_CAP: u64 = 1_000_000;

/// Probabilities below this floor are rejected when a strictly positive
/// distribution is required.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Row-normalization tolerance used by every distribution constructor.
pub const ROW_SUM_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// SequenceSpec
// ---------------------------------------------------------------------------

/// Shape of the toy universe: `vocab_size` tokens, prompts of length
/// `prompt_len`, responses of fixed length `resp_len` (no end-of-sequence
/// token; the response set stays finite and exactly enumerable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct SequenceSpec {
    vocab_size: usize,
    prompt_len: usize,
    resp_len: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    vocab_size: usize,
    prompt_len: usize,
    resp_len: usize,
}

impl From<SequenceSpec> for RawSpec {
    fn from(s: SequenceSpec) -> Self {
        RawSpec {
            vocab_size: s.vocab_size,
            prompt_len: s.prompt_len,
            resp_len: s.resp_len,
        }
    }
}

impl TryFrom<RawSpec> for SequenceSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        SequenceSpec::new(raw.vocab_size, raw.prompt_len, raw.resp_len)
    }
}

impl SequenceSpec {
    /// Builds a spec with the default enumeration cap.
    pub fn new(vocab_size: usize, prompt_len: usize, resp_len: usize) -> Result<Self> {
        Self::with_cap(vocab_size, prompt_len, resp_len, DEFAULT_PAIR_CAP)
    }

    /// Builds a spec, rejecting universes with more than `cap` joint
    /// (prompt, response) pairs.
    pub fn with_cap(
        vocab_size: usize,
        prompt_len: usize,
        resp_len: usize,
        cap: u64,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        if resp_len < 1 {
            return Err(Error::invalid("resp_len must be >= 1"));
        }
        let v = vocab_size as u128;
        let prompts = v
            .checked_pow(prompt_len as u32)
            .ok_or(Error::EnumerationTooLarge {
                pairs: u128::MAX,
                cap,
            })?;
        let responses = v
            .checked_pow(resp_len as u32)
            .ok_or(Error::EnumerationTooLarge {
                pairs: u128::MAX,
                cap,
            })?;
        let pairs = prompts
            .checked_mul(responses)
            .ok_or(Error::EnumerationTooLarge {
                pairs: u128::MAX,
                cap,
            })?;
        if pairs > cap as u128 {
            return Err(Error::EnumerationTooLarge { pairs, cap });
        }
        Ok(SequenceSpec {
            vocab_size,
            prompt_len,
            resp_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn resp_len(&self) -> usize {
        self.resp_len
    }

    pub fn num_prompts(&self) -> usize {
        self.vocab_size.pow(self.prompt_len as u32)
    }

    pub fn num_responses(&self) -> usize {
        self.vocab_size.pow(self.resp_len as u32)
    }
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

fn index_of_tokens(tokens: &[u32], vocab: usize) -> usize {
    tokens
        .iter()
        .fold(0usize, |acc, &t| acc * vocab + t as usize)
}

fn tokens_of_index(mut index: usize, len: usize, vocab: usize) -> Vec<u32> {
    let mut tokens = vec![0u32; len];
    for slot in tokens.iter_mut().rev() {
        *slot = (index % vocab) as u32;
        index /= vocab;
    }
    tokens
}

fn check_tokens(tokens: &[u32], len: usize, vocab: usize, what: &str) -> Result<()> {
    if tokens.len() != len {
        return Err(Error::invalid(format!(
            "{what} must have {len} tokens, got {}",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!(
            "{what} token {t} out of range for vocab_size {vocab}"
        )));
    }
    Ok(())
}

/// A prompt: `prompt_len` tokens, each in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt {
    tokens: Vec<u32>,
}

impl Prompt {
    pub fn new(tokens: Vec<u32>, spec: &SequenceSpec) -> Result<Self> {
        check_tokens(&tokens, spec.prompt_len(), spec.vocab_size(), "prompt")?;
        Ok(Prompt { tokens })
    }

    pub fn from_index(index: usize, spec: &SequenceSpec) -> Self {
        Prompt {
            tokens: tokens_of_index(index, spec.prompt_len(), spec.vocab_size()),
        }
    }

    pub fn index(&self, spec: &SequenceSpec) -> usize {
        index_of_tokens(&self.tokens, spec.vocab_size())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// A response: `resp_len` tokens, each in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Response {
    tokens: Vec<u32>,
}

impl Response {
    pub fn new(tokens: Vec<u32>, spec: &SequenceSpec) -> Result<Self> {
        check_tokens(&tokens, spec.resp_len(), spec.vocab_size(), "response")?;
        Ok(Response { tokens })
    }

    pub fn from_index(index: usize, spec: &SequenceSpec) -> Self {
        Response {
            tokens: tokens_of_index(index, spec.resp_len(), spec.vocab_size()),
        }
    }

    pub fn index(&self, spec: &SequenceSpec) -> usize {
        index_of_tokens(&self.tokens, spec.vocab_size())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

/// All prompts in lexicographic token order.
pub fn enumerate_prompts(spec: &SequenceSpec) -> Vec<Prompt> {
    (0..spec.num_prompts())
        .map(|i| Prompt::from_index(i, spec))
        .collect()
}

/// All responses in lexicographic token order.
pub fn enumerate_responses(spec: &SequenceSpec) -> Vec<Response> {
    (0..spec.num_responses())
        .map(|i| Response::from_index(i, spec))
        .collect()
}

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

fn check_prob_row(row: &[f64], expected_len: usize, what: &str) -> Result<()> {
    if row.len() != expected_len {
        return Err(Error::shape(format!(
            "{what} has {} entries, expected {expected_len}",
            row.len()
        )));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!(
            "{what} contains a negative or non-finite probability"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::invalid(format!(
            "{what} sums to {sum:.17}, expected 1 within {ROW_SUM_TOL:e}"
        )));
    }
    Ok(())
}

/// One probability vector over all enumerated responses per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalOverResponses {
    spec: SequenceSpec,
    rows: Vec<Vec<f64>>,
}

impl CategoricalOverResponses {
    /// Validates shape, non-negativity, and row sums (1 within 1e-12).
    pub fn new(spec: SequenceSpec, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != spec.num_prompts() {
            return Err(Error::shape(format!(
                "expected {} rows, got {}",
                spec.num_prompts(),
                rows.len()
            )));
        }
        for (x, row) in rows.iter().enumerate() {
            check_prob_row(row, spec.num_responses(), &format!("row {x}"))?;
        }
        Ok(CategoricalOverResponses { spec, rows })
    }

    /// Normalizes each row of non-negative weights, then validates.
    pub fn from_unnormalized(spec: SequenceSpec, mut rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in rows.iter_mut() {
            let sum: f64 = row.iter().sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(Error::invalid("row weights must have positive finite sum"));
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Self::new(spec, rows)
    }

    pub fn uniform(spec: SequenceSpec) -> Self {
        let r = spec.num_responses();
        let rows = vec![vec![1.0 / r as f64; r]; spec.num_prompts()];
        CategoricalOverResponses { spec, rows }
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn row(&self, prompt_index: usize) -> &[f64] {
        &self.rows[prompt_index]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn prob(&self, prompt_index: usize, response_index: usize) -> f64 {
        self.rows[prompt_index][response_index]
    }

    pub fn min_prob(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.min_prob() > 0.0
    }
}

// ---------------------------------------------------------------------------
// TargetTask
// ---------------------------------------------------------------------------

/// A concrete task: prompt distribution `q(x)` plus the target conditional
/// `p_data(y|x)`, strictly positive everywhere so log ratios stay finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask", into = "RawTask")]
pub struct TargetTask {
    spec: SequenceSpec,
    seed: u64,
    floor: f64,
    prompt_dist: Vec<f64>,
    data_dist: CategoricalOverResponses,
}

/// On-disk form: arrays in enumeration order, probabilities round-trip
/// bit-faithfully through serde_json's shortest-exact float encoding.
#[derive(Serialize, Deserialize)]
struct RawTask {
    spec: SequenceSpec,
    seed: u64,
    floor: f64,
    prompt_dist: Vec<f64>,
    data_dist: Vec<Vec<f64>>,
}

impl From<TargetTask> for RawTask {
    fn from(t: TargetTask) -> Self {
        RawTask {
            spec: t.spec,
            seed: t.seed,
            floor: t.floor,
            prompt_dist: t.prompt_dist,
            data_dist: t.data_dist.rows,
        }
    }
}

impl TryFrom<RawTask> for TargetTask {
    type Error = Error;
    fn try_from(raw: RawTask) -> Result<Self> {
        let data_dist = CategoricalOverResponses::new(raw.spec, raw.data_dist)?;
        TargetTask::new(raw.spec, raw.seed, raw.floor, raw.prompt_dist, data_dist)
    }
}

impl TargetTask {
    pub fn new(
        spec: SequenceSpec,
        seed: u64,
        floor: f64,
        prompt_dist: Vec<f64>,
        data_dist: CategoricalOverResponses,
    ) -> Result<Self> {
        check_prob_row(&prompt_dist, spec.num_prompts(), "prompt_dist")?;
        if *data_dist.spec() != spec {
            return Err(Error::shape("data_dist spec differs from task spec"));
        }
        if !data_dist.is_strictly_positive() {
            return Err(Error::invalid(
                "data_dist must be strictly positive on every (prompt, response)",
            ));
        }
        Ok(TargetTask {
            spec,
            seed,
            floor,
            prompt_dist,
            data_dist,
        })
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// q(x) over all enumerated prompts.
    pub fn prompt_dist(&self) -> &[f64] {
        &self.prompt_dist
    }

    /// p_data(y|x).
    pub fn data_dist(&self) -> &CategoricalOverResponses {
        &self.data_dist
    }

    /// Mean entropy of p_data(.|x) under q, in nats.
    pub fn data_entropy(&self) -> f64 {
        self.prompt_dist
            .iter()
            .zip(self.data_dist.rows())
            .map(|(&q, row)| {
                let h: f64 = row
                    .iter()
                    .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                    .sum();
                q * h
            })
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One supervised example: (x, y) with y drawn from p_data(.|x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: Prompt,
    pub response: Response,
}

/// One self-play pair: the dataset response y and a model-generated y'
/// for the same prompt, tagged with the iteration that generated y'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub prompt: Prompt,
    pub real_response: Response,
    pub synthetic_response: Response,
    pub source_iteration: usize,
}

/// Strictly positive exponential variate from one uniform draw.
fn exponential_draw(rng: &mut ChaCha12Rng) -> f64 {
    // random::<f64>() is in [0, 1); 1 - u is in (0, 1], so the log is finite.
    let u: f64 = rng.random();
    (-(1.0 - u).ln()).max(f64::MIN_POSITIVE)
}

/// A Dirichlet(1) draw: independent exponentials normalized to sum 1.
fn dirichlet_row(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| exponential_draw(rng)).collect();
    let sum: f64 = row.iter().sum();
    for p in row.iter_mut() {
        *p /= sum;
    }
    row
}

/// Synthesizes a random task: q(x) is a Dirichlet(1) draw over prompts, and
/// each p_data(.|x) row is a Dirichlet(1) draw mixed with the uniform floor,
/// `p = floor + (1 - R*floor) * dirichlet`, so every entry is at least
/// `floor` and each row still sums to 1 exactly.
///
/// Deterministic given (spec, seed, floor).
pub fn random_task(spec: &SequenceSpec, seed: u64, floor: f64) -> Result<TargetTask> {
    let r = spec.num_responses();
    if !(floor > 0.0 && floor * (r as f64) < 1.0) {
        return Err(Error::invalid(format!(
            "floor {floor} infeasible: need 0 < floor * {r} < 1"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let prompt_dist = dirichlet_row(&mut rng, spec.num_prompts());
    let slack = 1.0 - floor * r as f64;
    let rows: Vec<Vec<f64>> = (0..spec.num_prompts())
        .map(|_| {
            dirichlet_row(&mut rng, r)
                .into_iter()
                .map(|p| floor + slack * p)
                .collect()
        })
        .collect();
    let data_dist = CategoricalOverResponses::new(*spec, rows)?;
    TargetTask::new(*spec, seed, floor, prompt_dist, data_dist)
}

/// I.i.d. draws x ~ q, y ~ p_data(.|x). Deterministic given the seed.
pub fn sample_sft_dataset(task: &TargetTask, count: usize, seed: u64) -> Result<Vec<SftExample>> {
    if count == 0 {
        return Err(Error::invalid("sft dataset must be non-empty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let spec = task.spec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = crate::numerics::categorical_draw(task.prompt_dist(), rng.random());
        let y = crate::numerics::categorical_draw(task.data_dist().row(x), rng.random());
        out.push(SftExample {
            prompt: Prompt::from_index(x, spec),
            response: Response::from_index(y, spec),
        });
    }
    Ok(out)
}
