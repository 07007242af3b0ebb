//! The iterative self-play loop: generate responses from the frozen previous
//! model, then minimize the pair loss against it, either over sampled pairs
//! (mini-batch, faithful to the sampled algorithm) or over the exact
//! population objective (triple sum, used to verify the theory).
//!
//! Determinism: every random choice flows from `SpinConfig::seed` through
//! `derive_seed`, so identical configs produce bit-identical trajectories.
//! Synthetic generation derives one seed per (iteration, dataset index), so
//! output is order-stable and independent of any worker layout.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::{
    sft_nll, sft_nll_exact, sft_nll_exact_grad, sft_nll_grad, spin_gradient_batch,
    spin_objective_batch, LossKind, SpinBatch,
};
use crate::metrics::{record_iteration, IterationStats, MetricsRow};
use crate::policy::{param_len, TabularPolicy};
use crate::task::{Prompt, Response, SftExample, SyntheticPair, TargetTask};

// ---------------------------------------------------------------------------
// Seeding
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable per-(stream, index) seed derivation from a root seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(index)))
}

/// Shuffle seed the pair-training loop uses for a given (iteration, epoch);
/// lives in a stream disjoint from the per-entry synthetic-generation seeds.
/// Exposed so baselines can reproduce the self-play batch order exactly.
pub fn shuffle_seed_for(seed: u64, iteration: usize, epoch: usize) -> u64 {
    derive_seed(seed, (1u64 << 32) | iteration as u64, epoch as u64)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    PlainGd,
    RmspropLike,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_gd" | "gd" => Ok(OptimizerKind::PlainGd),
            "rmsprop_like" | "rmsprop" => Ok(OptimizerKind::RmspropLike),
            other => Err(Error::invalid(format!(
                "unknown optimizer '{other}', expected plain_gd|rmsprop_like"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Squared-gradient moving-average decay (rmsprop_like only).
    pub decay: f64,
    pub epsilon: f64,
    /// Per-iteration learning-rate multiplier applied at iteration t as
    /// `lr * multiplier^t`.
    pub lr_decay_per_iteration: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        // The squared-gradient average warms up from zero, so the first few
        // steps move close to learning_rate / sqrt(1 - decay) per coordinate;
        // the default rate is sized for that.
        OptimizerConfig {
            kind: OptimizerKind::RmspropLike,
            learning_rate: 0.01,
            decay: 0.99,
            epsilon: 1e-8,
            lr_decay_per_iteration: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn plain_gd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::PlainGd,
            learning_rate,
            decay: 0.0,
            epsilon: 0.0,
            lr_decay_per_iteration: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.kind == OptimizerKind::RmspropLike {
            if !(0.0..1.0).contains(&self.decay) {
                return Err(Error::invalid("decay must be in [0, 1)"));
            }
            if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
                return Err(Error::invalid("epsilon must be positive"));
            }
        }
        if self.lr_decay_per_iteration <= 0.0 || !self.lr_decay_per_iteration.is_finite() {
            return Err(Error::invalid("lr_decay_per_iteration must be positive"));
        }
        Ok(())
    }
}

/// Stateful first-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    decay: f64,
    epsilon: f64,
    sq_avg: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, param_count: usize) -> Self {
        Optimizer {
            kind: cfg.kind,
            learning_rate: cfg.learning_rate,
            decay: cfg.decay,
            epsilon: cfg.epsilon,
            sq_avg: vec![0.0; param_count],
        }
    }

    /// Same settings with the learning rate scaled; used for per-iteration decay.
    pub fn with_lr_scale(cfg: &OptimizerConfig, param_count: usize, scale: f64) -> Self {
        let mut opt = Self::new(cfg, param_count);
        opt.learning_rate *= scale;
        opt
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::PlainGd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::RmspropLike => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.sq_avg.iter_mut()) {
                    *v = self.decay * *v + (1.0 - self.decay) * g * g;
                    *p -= self.learning_rate * g / (v.sqrt() + self.epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    /// Keep pairs from every earlier iteration in the training set.
    Accumulate,
    /// Train only on this iteration's fresh pairs.
    Replace,
}

impl FromStr for Accumulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accumulate" => Ok(Accumulation::Accumulate),
            "replace" => Ok(Accumulation::Replace),
            other => Err(Error::invalid(format!(
                "unknown accumulation mode '{other}', expected accumulate|replace"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectationMode {
    /// Full-gradient descent on the exact population objective.
    Exact,
    /// Mini-batch descent on sampled pairs.
    Stochastic,
}

impl FromStr for ExpectationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ExpectationMode::Exact),
            "stochastic" => Ok(ExpectationMode::Stochastic),
            other => Err(Error::invalid(format!(
                "unknown mode '{other}', expected exact|stochastic"
            ))),
        }
    }
}

/// All knobs of the self-play run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinConfig {
    pub iterations: usize,
    /// One lambda per iteration.
    pub lambda_schedule: Vec<f64>,
    pub loss: LossKind,
    pub epochs_per_iteration: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Pairs generated per iteration (stochastic mode).
    pub pairs_per_iteration: usize,
    pub accumulation: Accumulation,
    pub mode: ExpectationMode,
    /// Exit an iteration early once the full gradient norm drops this low.
    pub stop_grad_norm: f64,
    pub max_steps_per_iteration: usize,
    pub seed: u64,
}

/// All-0.1 schedule with the final iteration raised to 5.0 once the run is
/// long enough to be near convergence (four or more iterations).
pub fn default_lambda_schedule(iterations: usize) -> Vec<f64> {
    let mut schedule = vec![0.1; iterations];
    if iterations >= 4 {
        *schedule.last_mut().expect("non-empty") = 5.0;
    }
    schedule
}

impl SpinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_schedule.len() != self.iterations {
            return Err(Error::invalid(format!(
                "lambda schedule has {} entries but iterations = {}",
                self.lambda_schedule.len(),
                self.iterations
            )));
        }
        if self
            .lambda_schedule
            .iter()
            .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err(Error::invalid("all lambda values must be positive"));
        }
        if self.epochs_per_iteration == 0 {
            return Err(Error::invalid("epochs_per_iteration must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.pairs_per_iteration == 0 {
            return Err(Error::invalid("pairs_per_iteration must be positive"));
        }
        if self.max_steps_per_iteration == 0 {
            return Err(Error::invalid("max_steps_per_iteration must be positive"));
        }
        if !(self.stop_grad_norm.is_finite() && self.stop_grad_norm >= 0.0) {
            return Err(Error::invalid("stop_grad_norm must be non-negative"));
        }
        self.optimizer.validate()
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// One model response per dataset prompt, order-preserving; entry `i` at
/// iteration `t` uses the independent seed `derive_seed(seed, t, i)`.
pub fn generate_synthetic(
    policy: &TabularPolicy,
    dataset: &[SftExample],
    iteration: usize,
    seed: u64,
) -> Result<Vec<SyntheticPair>> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset must be non-empty"));
    }
    dataset
        .iter()
        .enumerate()
        .map(|(i, example)| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, iteration as u64, i as u64));
            let synthetic = policy.sample(&example.prompt, &mut rng);
            Ok(SyntheticPair {
                prompt: example.prompt.clone(),
                real_response: example.response.clone(),
                synthetic_response: synthetic,
                source_iteration: iteration,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

pub(crate) fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    // Fisher-Yates with a seeded stream.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Knobs of the shared mini-batch pair-training loop.
pub struct PairTrainOptions<'a> {
    pub lambda: f64,
    pub loss: LossKind,
    /// None runs epochs indefinitely until `max_steps` or `stop_grad_norm`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub stop_grad_norm: f64,
    pub max_steps: usize,
    /// Label used in non-finite-loss diagnostics.
    pub iteration: usize,
    /// Seed for the shuffle of a given epoch index.
    pub shuffle_seed: &'a dyn Fn(usize) -> u64,
    /// Ascending local step counts at which to snapshot the policy.
    pub snapshot_steps: &'a [usize],
}

pub struct PairTrainOutcome {
    pub policy: TabularPolicy,
    pub steps: usize,
    pub exit_grad_norm: f64,
    pub last_batch_loss: Option<f64>,
    /// Batch loss at the pre-step point, one entry per optimizer step.
    pub step_losses: Vec<f64>,
    pub snapshots: Vec<TabularPolicy>,
}

fn check_params_finite(policy: &TabularPolicy, iteration: usize, step: usize) -> Result<()> {
    if policy.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration,
            step,
            detail: "parameters became non-finite after the optimizer step".to_string(),
        });
    }
    Ok(())
}

fn non_finite_diagnostics(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    loss: LossKind,
    items: &[(Prompt, Response, Response)],
    iteration: usize,
    step: usize,
) -> Error {
    for (x, y, y2) in items {
        let value = crate::losses::spin_margin(policy, reference, lambda, x, y, y2)
            .map(|m| loss.value(m))
            .unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Error::NonFiniteLoss {
                iteration,
                step,
                detail: format!(
                    "pair prompt={:?} real={:?} synthetic={:?} produced {value}",
                    x.tokens(),
                    y.tokens(),
                    y2.tokens()
                ),
            };
        }
    }
    Error::NonFiniteLoss {
        iteration,
        step,
        detail: "batch loss non-finite but every pair term is finite".to_string(),
    }
}

/// Mini-batch descent of the pair loss against a frozen reference.
///
/// The stop criterion is checked on the full training set at epoch
/// boundaries, so meeting it guarantees a fresh full-batch gradient of at
/// most the same norm.
pub fn train_on_pairs(
    initial: TabularPolicy,
    reference: &TabularPolicy,
    items: &[(Prompt, Response, Response)],
    opts: &PairTrainOptions,
    optimizer: &mut Optimizer,
) -> Result<PairTrainOutcome> {
    let spec = *initial.spec();
    let full = SpinBatch::new(spec, items.to_vec())?;
    let mut policy = initial;
    let mut steps = 0usize;
    let mut step_losses = Vec::new();
    let mut last_batch_loss = None;
    let mut snapshots = Vec::new();
    let mut snapshot_cursor = 0usize;
    let mut exit_grad_norm =
        spin_gradient_batch(&policy, reference, opts.lambda, &full, opts.loss)?.l2_norm();

    // step 0 snapshots (budget points before any training)
    while snapshot_cursor < opts.snapshot_steps.len() && opts.snapshot_steps[snapshot_cursor] == 0 {
        snapshots.push(policy.clone());
        snapshot_cursor += 1;
    }

    let mut epoch = 0usize;
    'outer: while opts.epochs.is_none_or(|e| epoch < e) {
        if exit_grad_norm <= opts.stop_grad_norm || steps >= opts.max_steps {
            break;
        }
        let order = shuffled_indices(items.len(), (opts.shuffle_seed)(epoch));
        for chunk in order.chunks(opts.batch_size) {
            if steps >= opts.max_steps {
                break 'outer;
            }
            let batch_items: Vec<_> = chunk.iter().map(|&i| items[i].clone()).collect();
            let batch = SpinBatch::new(spec, batch_items)?;
            let loss_value =
                spin_objective_batch(&policy, reference, opts.lambda, &batch, opts.loss)?;
            if !loss_value.is_finite() {
                return Err(non_finite_diagnostics(
                    &policy,
                    reference,
                    opts.lambda,
                    opts.loss,
                    batch.items(),
                    opts.iteration,
                    steps,
                ));
            }
            let grad = spin_gradient_batch(&policy, reference, opts.lambda, &batch, opts.loss)?;
            optimizer.step(policy.params_mut(), grad.values());
            steps += 1;
            check_params_finite(&policy, opts.iteration, steps)?;
            step_losses.push(loss_value);
            last_batch_loss = Some(loss_value);
            while snapshot_cursor < opts.snapshot_steps.len()
                && opts.snapshot_steps[snapshot_cursor] == steps
            {
                snapshots.push(policy.clone());
                snapshot_cursor += 1;
            }
        }
        exit_grad_norm =
            spin_gradient_batch(&policy, reference, opts.lambda, &full, opts.loss)?.l2_norm();
        epoch += 1;
    }

    Ok(PairTrainOutcome {
        policy,
        steps,
        exit_grad_norm,
        last_batch_loss,
        step_losses,
        snapshots,
    })
}

pub struct ExactTrainOutcome {
    pub policy: TabularPolicy,
    pub steps: usize,
    pub exit_grad_norm: f64,
    pub final_objective: f64,
}

/// Full-gradient descent on the exact population objective against a frozen
/// reference. Exits as soon as the gradient norm, evaluated at the current
/// point before stepping, reaches `stop_grad_norm`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_exact(
    initial: TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    task: &TargetTask,
    loss: LossKind,
    stop_grad_norm: f64,
    max_steps: usize,
    optimizer: &mut Optimizer,
    iteration: usize,
) -> Result<ExactTrainOutcome> {
    let problem = crate::losses::ExactSpinProblem::new(reference, lambda, task, loss)?;
    let mut policy = initial;
    let mut steps = 0usize;
    let mut exit_grad_norm;
    loop {
        let grad = problem.gradient(&policy)?;
        exit_grad_norm = grad.l2_norm();
        if !exit_grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                step: steps,
                detail: "exact gradient is non-finite".to_string(),
            });
        }
        if exit_grad_norm <= stop_grad_norm || steps >= max_steps {
            break;
        }
        optimizer.step(policy.params_mut(), grad.values());
        steps += 1;
        check_params_finite(&policy, iteration, steps)?;
    }
    let final_objective = problem.objective(&policy)?;
    if !final_objective.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            step: steps,
            detail: "exact objective is non-finite".to_string(),
        });
    }
    Ok(ExactTrainOutcome {
        policy,
        steps,
        exit_grad_norm,
        final_objective,
    })
}

/// `optimize_exact` with plain gradient descent and an automatic step-size
/// fallback: a diverging run (non-finite values) restarts with the rate cut
/// to a quarter. Used by the theorem-verification paths, which only care
/// about reaching `stop_grad_norm`, not about a particular optimizer.
#[allow(clippy::too_many_arguments)]
pub fn optimize_exact_auto(
    initial: &TabularPolicy,
    reference: &TabularPolicy,
    lambda: f64,
    task: &TargetTask,
    loss: LossKind,
    stop_grad_norm: f64,
    max_steps: usize,
    base_learning_rate: f64,
) -> Result<ExactTrainOutcome> {
    let mut lr = base_learning_rate;
    let mut last_err = None;
    for _ in 0..5 {
        let mut optimizer =
            Optimizer::new(&OptimizerConfig::plain_gd(lr), param_len(initial.spec()));
        match optimize_exact(
            initial.clone(),
            reference,
            lambda,
            task,
            loss,
            stop_grad_norm,
            max_steps,
            &mut optimizer,
            0,
        ) {
            Ok(out) => {
                if out.exit_grad_norm <= stop_grad_norm {
                    return Ok(out);
                }
                // ran out of steps: a smaller rate will not help, report as is
                return Ok(out);
            }
            Err(err @ Error::NonFiniteLoss { .. }) => {
                lr *= 0.25;
                last_err = Some(err);
            }
            Err(other) => return Err(other),
        }
    }
    Err(last_err.expect("loop exits early unless every retry diverged"))
}

// ---------------------------------------------------------------------------
// One self-play iteration and the outer loop
// ---------------------------------------------------------------------------

pub struct SpinIterationOutcome {
    pub next: TabularPolicy,
    pub steps: usize,
    pub exit_grad_norm: f64,
    pub last_batch_loss: Option<f64>,
    pub step_losses: Vec<f64>,
    /// Pairs generated this iteration (empty in exact mode).
    pub new_pairs: Vec<SyntheticPair>,
}

/// Runs iteration `t`: freezes the current policy as the reference, builds
/// the training set (fresh pairs plus `accumulated` in accumulate mode), and
/// optimizes the pair objective. `accumulated` is updated in place.
pub fn spin_iteration(
    current: &TabularPolicy,
    task: &TargetTask,
    dataset: Option<&[SftExample]>,
    cfg: &SpinConfig,
    t: usize,
    accumulated: &mut Vec<SyntheticPair>,
) -> Result<SpinIterationOutcome> {
    cfg.validate()?;
    let lambda = cfg.lambda_schedule[t];
    let lr_scale = cfg.optimizer.lr_decay_per_iteration.powi(t as i32);
    let mut optimizer =
        Optimizer::with_lr_scale(&cfg.optimizer, param_len(current.spec()), lr_scale);

    match cfg.mode {
        ExpectationMode::Exact => {
            let outcome = optimize_exact(
                current.clone(),
                current,
                lambda,
                task,
                cfg.loss,
                cfg.stop_grad_norm,
                cfg.max_steps_per_iteration,
                &mut optimizer,
                t,
            )?;
            Ok(SpinIterationOutcome {
                next: outcome.policy,
                steps: outcome.steps,
                exit_grad_norm: outcome.exit_grad_norm,
                last_batch_loss: None,
                step_losses: Vec::new(),
                new_pairs: Vec::new(),
            })
        }
        ExpectationMode::Stochastic => {
            let dataset =
                dataset.ok_or_else(|| Error::invalid("stochastic mode requires an SFT dataset"))?;
            let base: Vec<SftExample> = if dataset.len() >= cfg.pairs_per_iteration {
                dataset[..cfg.pairs_per_iteration].to_vec()
            } else {
                return Err(Error::invalid(format!(
                    "dataset has {} examples, need pairs_per_iteration = {}",
                    dataset.len(),
                    cfg.pairs_per_iteration
                )));
            };
            let new_pairs = generate_synthetic(current, &base, t, cfg.seed)?;
            let training: Vec<SyntheticPair> = match cfg.accumulation {
                Accumulation::Accumulate => accumulated
                    .iter()
                    .chain(new_pairs.iter())
                    .cloned()
                    .collect(),
                Accumulation::Replace => new_pairs.clone(),
            };
            let items: Vec<(Prompt, Response, Response)> = training
                .iter()
                .map(|p| {
                    (
                        p.prompt.clone(),
                        p.real_response.clone(),
                        p.synthetic_response.clone(),
                    )
                })
                .collect();
            let seed = cfg.seed;
            let shuffle = move |epoch: usize| shuffle_seed_for(seed, t, epoch);
            let opts = PairTrainOptions {
                lambda,
                loss: cfg.loss,
                epochs: Some(cfg.epochs_per_iteration),
                batch_size: cfg.batch_size,
                stop_grad_norm: cfg.stop_grad_norm,
                max_steps: cfg.max_steps_per_iteration,
                iteration: t,
                shuffle_seed: &shuffle,
                snapshot_steps: &[],
            };
            let outcome = train_on_pairs(current.clone(), current, &items, &opts, &mut optimizer)?;
            if cfg.accumulation == Accumulation::Accumulate {
                accumulated.extend(new_pairs.iter().cloned());
            }
            Ok(SpinIterationOutcome {
                next: outcome.policy,
                steps: outcome.steps,
                exit_grad_norm: outcome.exit_grad_norm,
                last_batch_loss: outcome.last_batch_loss,
                step_losses: outcome.step_losses,
                new_pairs,
            })
        }
    }
}

/// The full multi-iteration record: T+1 checkpoints, one metrics row per
/// checkpoint, per-iteration pair sets and step-loss curves, and measured
/// wall times (reported on stdout only; the persisted record stays
/// deterministic).
pub struct SpinTrajectory {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<TabularPolicy>,
    pub pairs_by_iteration: Vec<Vec<SyntheticPair>>,
    pub step_losses_by_iteration: Vec<Vec<f64>>,
    pub wall_ms_by_iteration: Vec<u64>,
}

/// Chains `spin_iteration` for `cfg.iterations` rounds from `initial`.
pub fn run_spin(
    initial: &TabularPolicy,
    task: &TargetTask,
    dataset: Option<&[SftExample]>,
    cfg: &SpinConfig,
) -> Result<SpinTrajectory> {
    cfg.validate()?;
    if initial.spec() != task.spec() {
        return Err(Error::shape("initial policy spec does not match task"));
    }
    let mut checkpoints = vec![initial.clone()];
    let mut rows = vec![record_iteration(
        0,
        initial,
        None,
        task,
        cfg.loss,
        IterationStats::default(),
    )?];
    let mut pairs_by_iteration = Vec::new();
    let mut step_losses_by_iteration = Vec::new();
    let mut wall_ms_by_iteration = Vec::new();
    let mut accumulated = Vec::new();

    for t in 0..cfg.iterations {
        let start = Instant::now();
        let current = checkpoints.last().expect("at least the initial checkpoint");
        let outcome = spin_iteration(current, task, dataset, cfg, t, &mut accumulated)?;
        let wall = start.elapsed().as_millis() as u64;
        let row = record_iteration(
            t + 1,
            &outcome.next,
            Some((&checkpoints[t], cfg.lambda_schedule[t])),
            task,
            cfg.loss,
            IterationStats {
                step: outcome.steps,
                loss_batch: outcome.last_batch_loss,
                grad_norm: Some(outcome.exit_grad_norm),
            },
        )?;
        rows.push(row);
        checkpoints.push(outcome.next);
        pairs_by_iteration.push(outcome.new_pairs);
        step_losses_by_iteration.push(outcome.step_losses);
        wall_ms_by_iteration.push(wall);
    }

    Ok(SpinTrajectory {
        rows,
        checkpoints,
        pairs_by_iteration,
        step_losses_by_iteration,
        wall_ms_by_iteration,
    })
}

// ---------------------------------------------------------------------------
// SFT and DPO baselines
// ---------------------------------------------------------------------------

/// Training data for supervised fine-tuning: the exact population objective
/// or a finite sample.
pub enum SftData<'a> {
    Population(&'a TargetTask),
    Samples(&'a [SftExample]),
}

pub struct SftOutcome {
    pub policy: TabularPolicy,
    /// Objective value before each step (exact NLL in population mode,
    /// batch NLL in sample mode).
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub exit_grad_norm: f64,
}

/// Gradient descent on the negative log-likelihood. `epochs = 0` returns the
/// initial policy untouched. Population mode runs full-gradient steps until
/// `stop_grad_norm` or `max_steps`.
#[allow(clippy::too_many_arguments)]
pub fn run_sft(
    initial: &TabularPolicy,
    data: SftData,
    epochs: usize,
    optimizer_cfg: &OptimizerConfig,
    batch_size: usize,
    stop_grad_norm: f64,
    max_steps: usize,
    seed: u64,
) -> Result<SftOutcome> {
    optimizer_cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut policy = initial.clone();
    let mut optimizer = Optimizer::new(optimizer_cfg, param_len(initial.spec()));
    let mut loss_curve = Vec::new();
    let mut steps = 0usize;

    match data {
        SftData::Population(task) => {
            let mut exit_grad_norm = sft_nll_exact_grad(&policy, task)?.l2_norm();
            if epochs > 0 {
                loop {
                    let grad = sft_nll_exact_grad(&policy, task)?;
                    exit_grad_norm = grad.l2_norm();
                    if exit_grad_norm <= stop_grad_norm || steps >= max_steps {
                        break;
                    }
                    loss_curve.push(sft_nll_exact(&policy, task)?);
                    optimizer.step(policy.params_mut(), grad.values());
                    steps += 1;
                    check_params_finite(&policy, 0, steps)?;
                }
            }
            Ok(SftOutcome {
                policy,
                loss_curve,
                steps,
                exit_grad_norm,
            })
        }
        SftData::Samples(dataset) => {
            if dataset.is_empty() {
                return Err(Error::invalid("sft dataset must be non-empty"));
            }
            let mut exit_grad_norm = sft_nll_grad(&policy, dataset)?.l2_norm();
            'outer: for epoch in 0..epochs {
                if exit_grad_norm <= stop_grad_norm || steps >= max_steps {
                    break;
                }
                let order = shuffled_indices(dataset.len(), derive_seed(seed, 0x5f7, epoch as u64));
                for chunk in order.chunks(batch_size) {
                    if steps >= max_steps {
                        break 'outer;
                    }
                    let batch: Vec<SftExample> =
                        chunk.iter().map(|&i| dataset[i].clone()).collect();
                    let loss = sft_nll(&policy, &batch)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            iteration: epoch,
                            step: steps,
                            detail: "sft batch loss non-finite".to_string(),
                        });
                    }
                    loss_curve.push(loss);
                    let grad = sft_nll_grad(&policy, &batch)?;
                    optimizer.step(policy.params_mut(), grad.values());
                    steps += 1;
                    check_params_finite(&policy, epoch, steps)?;
                }
                exit_grad_norm = sft_nll_grad(&policy, dataset)?.l2_norm();
            }
            Ok(SftOutcome {
                policy,
                loss_curve,
                steps,
                exit_grad_norm,
            })
        }
    }
}

/// DPO baseline: minimizes the mean logistic pair loss on fixed
/// (chosen, rejected) preference pairs against the frozen reference, starting
/// from the reference itself.
///
/// Epoch `e` shuffles with the same derived seed the self-play loop uses for
/// iteration `e / epochs_per_block`, epoch `e % epochs_per_block`; pass the
/// self-play epoch count to reproduce its batch order exactly.
#[allow(clippy::too_many_arguments)]
pub fn run_dpo_baseline(
    reference: &TabularPolicy,
    pairs: &[(Prompt, Response, Response)],
    beta: f64,
    epochs: usize,
    epochs_per_block: usize,
    optimizer_cfg: &OptimizerConfig,
    batch_size: usize,
    stop_grad_norm: f64,
    max_steps: usize,
    seed: u64,
) -> Result<PairTrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("preference pairs must be non-empty"));
    }
    if epochs_per_block == 0 {
        return Err(Error::invalid("epochs_per_block must be positive"));
    }
    optimizer_cfg.validate()?;
    let mut optimizer = Optimizer::new(optimizer_cfg, param_len(reference.spec()));
    let shuffle = move |epoch: usize| {
        shuffle_seed_for(seed, epoch / epochs_per_block, epoch % epochs_per_block)
    };
    let opts = PairTrainOptions {
        lambda: beta,
        loss: LossKind::Logistic,
        epochs: Some(epochs),
        batch_size,
        stop_grad_norm,
        max_steps,
        iteration: 0,
        shuffle_seed: &shuffle,
        snapshot_steps: &[],
    };
    train_on_pairs(reference.clone(), reference, pairs, &opts, &mut optimizer)
}

// ---------------------------------------------------------------------------
// Experiment directory layout
// ---------------------------------------------------------------------------

/// Writes `config.json`, `task.json`, `checkpoints/iter_{t}.json`,
/// `metrics.csv`, and (when pairs exist) `pairs/iter_{t}.jsonl`.
pub fn write_experiment_dir(
    dir: impl AsRef<Path>,
    cfg: &SpinConfig,
    task: &TargetTask,
    trajectory: &SpinTrajectory,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    task.save(dir.join("task.json"))?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for (t, policy) in trajectory.checkpoints.iter().enumerate() {
        policy.save_checkpoint(ckpt_dir.join(format!("iter_{t}.json")), t)?;
    }
    crate::metrics::write_metrics_csv(dir.join("metrics.csv"), &trajectory.rows)?;
    if trajectory.pairs_by_iteration.iter().any(|p| !p.is_empty()) {
        let pairs_dir = dir.join("pairs");
        std::fs::create_dir_all(&pairs_dir)?;
        for (t, pairs) in trajectory.pairs_by_iteration.iter().enumerate() {
            let mut lines = String::new();
            for pair in pairs {
                lines.push_str(&serde_json::to_string(pair)?);
                lines.push('\n');
            }
            std::fs::write(pairs_dir.join(format!("iter_{t}.jsonl")), lines)?;
        }
    }
    Ok(())
}
