//! Command-line surface: task synthesis, SFT warm start, self-play runs,
//! baselines, theorem verification, evaluation, and plot-data export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/validation,
//! 3 numerical abort, 4 inconclusive verification. Every command validates
//! its inputs fully before touching the filesystem, and all randomness flows
//! from the required `--seed` flag. `SPIN_LAB_CAP` overrides the enumeration
//! cap.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::divergences;
use crate::policy::TabularPolicy;
use crate::selfplay::{
    default_lambda_schedule, run_sft, run_spin, write_experiment_dir, Accumulation,
    ExpectationMode, OptimizerConfig, OptimizerKind, SftData, SpinConfig,
};
use crate::task::{random_task, sample_sft_dataset, SequenceSpec, TargetTask, DEFAULT_PAIR_CAP};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_INCONCLUSIVE: i32 = 4;

#[derive(Parser)]
#[command(
    name = "spin-lab",
    version,
    about = "Self-play fine-tuning on exactly enumerable tabular policies"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a random task file (prompt distribution + target data distribution)
    InitTask(InitTaskArgs),
    /// Supervised warm start: sample a dataset and minimize its NLL
    Sft(SftArgs),
    /// Run the iterative self-play loop and write an experiment directory
    Run(RunArgs),
    /// Run the executable theorem checks and write report.json
    Verify(VerifyArgs),
    /// Print divergences between a checkpoint and a task
    Eval(EvalArgs),
    /// Compare self-play against extended SFT and DPO at matched step budgets
    Compare(CompareArgs),
}

#[derive(Args)]
struct InitTaskArgs {
    /// Vocabulary size (>= 2)
    #[arg(long)]
    vocab: usize,
    /// Prompt length (>= 0)
    #[arg(long = "prompt-len")]
    prompt_len: usize,
    /// Response length (>= 1)
    #[arg(long = "resp-len")]
    resp_len: usize,
    #[arg(long)]
    seed: u64,
    /// Minimum probability of any (prompt, response) in the target
    #[arg(long, default_value_t = 1e-4)]
    floor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    task: PathBuf,
    /// Dataset size to sample
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV path (defaults to <out>.curve.csv)
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// plain_gd | rmsprop_like
    #[arg(long, default_value = "rmsprop_like")]
    optimizer: String,
    /// Optimize the exact population NLL instead of mini-batches
    #[arg(long)]
    exact: bool,
    #[arg(long = "stop-grad-norm", default_value_t = 0.0)]
    stop_grad_norm: f64,
    #[arg(long = "max-steps", default_value_t = 200_000)]
    max_steps: usize,
}

/// Optional config-file form of the run flags; explicit flags win.
/// Unknown keys are rejected.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunFileConfig {
    iters: Option<usize>,
    lambda: Option<Vec<f64>>,
    loss: Option<String>,
    mode: Option<String>,
    expectation: Option<String>,
    pairs: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    optimizer: Option<String>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    stop_grad_norm: Option<f64>,
    max_steps: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Task file; alternatively pass an inline spec via --vocab/--prompt-len/--resp-len
    #[arg(long)]
    task: Option<PathBuf>,
    /// Inline task spec: vocabulary size (with --prompt-len and --resp-len)
    #[arg(long, requires_all = ["prompt_len", "resp_len"], conflicts_with = "task")]
    vocab: Option<usize>,
    #[arg(long = "prompt-len")]
    prompt_len: Option<usize>,
    #[arg(long = "resp-len")]
    resp_len: Option<usize>,
    /// Seed for the inline task (defaults to --seed)
    #[arg(long = "task-seed")]
    task_seed: Option<u64>,
    /// Probability floor for the inline task
    #[arg(long, default_value_t = 1e-4)]
    floor: f64,
    /// Initial checkpoint (e.g. from `sft`)
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON config merged under the explicit flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated lambda per iteration, e.g. 0.1,0.1,0.1,5.0
    #[arg(long)]
    lambda: Option<String>,
    /// logistic | hinge | exponential | correlation | linear
    #[arg(long)]
    loss: Option<String>,
    /// accumulate | replace
    #[arg(long)]
    mode: Option<String>,
    /// exact | stochastic
    #[arg(long)]
    expectation: Option<String>,
    /// Pairs generated per iteration
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Per-iteration learning-rate multiplier
    #[arg(long = "lr-decay")]
    lr_decay: Option<f64>,
    #[arg(long = "stop-grad-norm")]
    stop_grad_norm: Option<f64>,
    #[arg(long = "max-steps")]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// all | thm5.1 | thm5.2 | lemmaA.1 | lemmaA.2 | necessity | dpo-equiv | gradients
    /// (repeatable or comma-separated)
    #[arg(long, required = true)]
    suite: Vec<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Worker threads for independent fixtures within a suite
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    /// Comma-separated lambda per iteration
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// DPO temperature; defaults to the first lambda
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
}

/// Entry point returning the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::InitTask(args) => cmd_init_task(args),
        Command::Sft(args) => cmd_sft(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn enumeration_cap() -> u64 {
    std::env::var("SPIN_LAB_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_PAIR_CAP)
}

fn parse_lambda_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad lambda value '{s}'")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// init-task
// ---------------------------------------------------------------------------

fn cmd_init_task(args: InitTaskArgs) -> Result<i32> {
    let spec = SequenceSpec::with_cap(
        args.vocab,
        args.prompt_len,
        args.resp_len,
        enumeration_cap(),
    )?;
    let task = random_task(&spec, args.seed, args.floor)?;
    task.save(&args.out)?;
    println!(
        "task written to {} ({} prompts x {} responses, floor {:e})",
        args.out.display(),
        spec.num_prompts(),
        spec.num_responses(),
        args.floor
    );
    println!(
        "mean entropy of target distribution: {:.6} nats",
        task.data_entropy()
    );
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// sft
// ---------------------------------------------------------------------------

fn load_task_checked(path: &Path) -> Result<TargetTask> {
    let task = TargetTask::load(path)?;
    let spec = task.spec();
    SequenceSpec::with_cap(
        spec.vocab_size(),
        spec.prompt_len(),
        spec.resp_len(),
        enumeration_cap(),
    )?;
    Ok(task)
}

fn cmd_sft(args: SftArgs) -> Result<i32> {
    let task = load_task_checked(&args.task)?;
    let optimizer = OptimizerConfig {
        kind: args.optimizer.parse()?,
        learning_rate: args.lr,
        ..OptimizerConfig::default()
    };
    let dataset = sample_sft_dataset(&task, args.samples, args.seed)?;
    let initial = TabularPolicy::uniform(task.spec());
    let data = if args.exact {
        SftData::Population(&task)
    } else {
        SftData::Samples(&dataset)
    };
    let out = run_sft(
        &initial,
        data,
        args.epochs,
        &optimizer,
        args.batch,
        args.stop_grad_norm,
        args.max_steps,
        args.seed,
    )?;
    out.policy.save_checkpoint(&args.out, 0)?;
    let curve_path = args
        .curve
        .unwrap_or_else(|| args.out.with_extension("curve.csv"));
    let mut writer = csv::Writer::from_path(&curve_path).map_err(Error::Csv)?;
    writer.write_record(["step", "nll"])?;
    for (i, v) in out.loss_curve.iter().enumerate() {
        writer.write_record([i.to_string(), v.to_string()])?;
    }
    writer.flush()?;
    println!(
        "sft finished: {} steps, exit gradient norm {:.3e}",
        out.steps, out.exit_grad_norm
    );
    println!("checkpoint: {}", args.out.display());
    println!("loss curve: {}", curve_path.display());
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn build_spin_config(args: &RunArgs) -> Result<SpinConfig> {
    let file: RunFileConfig = match &args.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => RunFileConfig::default(),
    };
    let iters = args.iters.or(file.iters).unwrap_or(4);
    let lambda_schedule = match (&args.lambda, &file.lambda) {
        (Some(raw), _) => parse_lambda_list(raw)?,
        (None, Some(list)) => list.clone(),
        (None, None) => default_lambda_schedule(iters),
    };
    let loss: LossKind = args
        .loss
        .as_deref()
        .or(file.loss.as_deref())
        .unwrap_or("logistic")
        .parse()?;
    let accumulation: Accumulation = args
        .mode
        .as_deref()
        .or(file.mode.as_deref())
        .unwrap_or("accumulate")
        .parse()?;
    let mode: ExpectationMode = args
        .expectation
        .as_deref()
        .or(file.expectation.as_deref())
        .unwrap_or("stochastic")
        .parse()?;
    let optimizer_kind: OptimizerKind = args
        .optimizer
        .as_deref()
        .or(file.optimizer.as_deref())
        .unwrap_or("rmsprop_like")
        .parse()?;
    let defaults = OptimizerConfig::default();
    let cfg = SpinConfig {
        iterations: iters,
        lambda_schedule,
        loss,
        epochs_per_iteration: args.epochs.or(file.epochs).unwrap_or(2),
        batch_size: args.batch.or(file.batch).unwrap_or(64),
        optimizer: OptimizerConfig {
            kind: optimizer_kind,
            learning_rate: args.lr.or(file.lr).unwrap_or(defaults.learning_rate),
            decay: defaults.decay,
            epsilon: defaults.epsilon,
            lr_decay_per_iteration: args.lr_decay.or(file.lr_decay).unwrap_or(1.0),
        },
        pairs_per_iteration: args.pairs.or(file.pairs).unwrap_or(50),
        accumulation,
        mode,
        stop_grad_norm: args.stop_grad_norm.or(file.stop_grad_norm).unwrap_or(0.0),
        max_steps_per_iteration: args.max_steps.or(file.max_steps).unwrap_or(200_000),
        seed: args.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_kl_table(rows: &[crate::metrics::MetricsRow], wall_ms: &[u64]) {
    println!("iter  steps  kl(data||model)  kl(model||data)        jsd         tv    wall_ms");
    for row in rows {
        let wall = if row.iteration == 0 {
            0
        } else {
            wall_ms.get(row.iteration - 1).copied().unwrap_or(0)
        };
        println!(
            "{:>4}  {:>5}  {:>15.9} {:>16.9} {:>10.6} {:>10.6} {:>10}",
            row.iteration, row.step, row.kl_data_model, row.kl_model_data, row.jsd, row.tv, wall
        );
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let cfg = build_spin_config(&args)?;
    let task = match (&args.task, args.vocab) {
        (Some(path), None) => load_task_checked(path)?,
        (None, Some(vocab)) => {
            let spec = SequenceSpec::with_cap(
                vocab,
                args.prompt_len.expect("enforced by clap"),
                args.resp_len.expect("enforced by clap"),
                enumeration_cap(),
            )?;
            random_task(&spec, args.task_seed.unwrap_or(args.seed), args.floor)?
        }
        _ => {
            return Err(Error::invalid(
                "provide either --task or an inline --vocab/--prompt-len/--resp-len spec",
            ))
        }
    };
    let (initial, _) = TabularPolicy::load_checkpoint(&args.init)?;
    if initial.spec() != task.spec() {
        return Err(Error::shape(
            "checkpoint spec does not match task spec".to_string(),
        ));
    }
    if args.out.exists() && args.out.read_dir()?.next().is_some() {
        return Err(Error::invalid(format!(
            "output directory {} is not empty",
            args.out.display()
        )));
    }
    let dataset = match cfg.mode {
        ExpectationMode::Stochastic => Some(sample_sft_dataset(
            &task,
            cfg.pairs_per_iteration,
            crate::selfplay::derive_seed(cfg.seed, 0xda7a, 0),
        )?),
        ExpectationMode::Exact => None,
    };
    let trajectory = match run_spin(&initial, &task, dataset.as_deref(), &cfg) {
        Ok(t) => t,
        Err(Error::NonFiniteLoss {
            iteration,
            step,
            detail,
        }) => {
            std::fs::create_dir_all(&args.out)?;
            let diag_path = args.out.join("abort.json");
            std::fs::write(
                &diag_path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "error": "non-finite loss",
                    "iteration": iteration,
                    "step": step,
                    "detail": detail,
                }))?,
            )?;
            eprintln!(
                "numerical abort at iteration {iteration}, step {step}: {detail} \
                 (diagnostics: {})",
                diag_path.display()
            );
            return Ok(EXIT_NUMERICAL);
        }
        Err(other) => return Err(other),
    };
    write_experiment_dir(&args.out, &cfg, &task, &trajectory)?;
    print_kl_table(&trajectory.rows, &trajectory.wall_ms_by_iteration);
    println!("experiment written to {}", args.out.display());
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let task = load_task_checked(&args.task)?;
    let (policy, iteration) = TabularPolicy::load_checkpoint(&args.ckpt)?;
    if policy.spec() != task.spec() {
        eprintln!("error: checkpoint spec does not match task spec");
        return Ok(EXIT_USAGE);
    }
    let report = divergences(
        task.data_dist(),
        &policy.induced_distribution(),
        task.prompt_dist(),
    )?;
    println!("checkpoint iteration: {iteration}");
    println!("kl(data||model) = {:.12}", report.kl_data_model);
    println!("kl(model||data) = {:.12}", report.kl_model_data);
    println!("jsd             = {:.12}", report.jsd);
    println!("tv              = {:.12}", report.tv);
    if let Some(path) = args.csv {
        let mut writer = csv::Writer::from_path(&path).map_err(Error::Csv)?;
        writer.write_record(["prompt", "kl_data_model", "kl_model_data", "jsd", "tv"])?;
        writer.write_record([
            "all".to_string(),
            report.kl_data_model.to_string(),
            report.kl_model_data.to_string(),
            report.jsd.to_string(),
            report.tv.to_string(),
        ])?;
        for p in &report.per_prompt {
            writer.write_record([
                p.prompt.to_string(),
                p.kl_data_model.to_string(),
                p.kl_model_data.to_string(),
                p.jsd.to_string(),
                p.tv.to_string(),
            ])?;
        }
        writer.flush()?;
        println!("csv: {}", path.display());
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let task = load_task_checked(&args.task)?;
    let (initial, _) = TabularPolicy::load_checkpoint(&args.init)?;
    if initial.spec() != task.spec() {
        return Err(Error::shape("checkpoint spec does not match task spec"));
    }
    let lambda_schedule = match &args.lambda {
        Some(raw) => parse_lambda_list(raw)?,
        None => default_lambda_schedule(args.iters),
    };
    let cfg = SpinConfig {
        iterations: args.iters,
        lambda_schedule: lambda_schedule.clone(),
        loss: LossKind::Logistic,
        epochs_per_iteration: args.epochs,
        batch_size: args.batch,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::RmspropLike,
            learning_rate: args.lr,
            ..OptimizerConfig::default()
        },
        pairs_per_iteration: args.pairs,
        accumulation: Accumulation::Accumulate,
        mode: ExpectationMode::Stochastic,
        stop_grad_norm: 0.0,
        max_steps_per_iteration: usize::MAX / 2,
        seed: args.seed,
    };
    cfg.validate()?;
    let beta = args.beta.unwrap_or(lambda_schedule[0]);

    let dataset = sample_sft_dataset(
        &task,
        cfg.pairs_per_iteration,
        crate::selfplay::derive_seed(cfg.seed, 0xda7a, 0),
    )?;
    let spin = run_spin(&initial, &task, Some(&dataset), &cfg)?;

    // budget points: cumulative optimizer steps at each iteration boundary
    let mut budgets = Vec::new();
    let mut cum = 0usize;
    for row in &spin.rows[1..] {
        cum += row.step;
        budgets.push(cum);
    }

    let kl_of = |policy: &TabularPolicy| -> Result<f64> {
        Ok(divergences(
            task.data_dist(),
            &policy.induced_distribution(),
            task.prompt_dist(),
        )?
        .kl_data_model)
    };

    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    rows.push(("spin".to_string(), 0, spin.rows[0].kl_data_model));
    for (i, row) in spin.rows[1..].iter().enumerate() {
        rows.push(("spin".to_string(), budgets[i], row.kl_data_model));
    }

    // extended SFT at the same total step budget, snapshotted at each point
    let sft_policies = train_sft_with_snapshots(&initial, &dataset, &cfg, &budgets)?;
    rows.push(("sft_extended".to_string(), 0, kl_of(&initial)?));
    for (b, p) in budgets.iter().zip(&sft_policies) {
        rows.push(("sft_extended".to_string(), *b, kl_of(p)?));
    }

    // DPO on the iteration-0 pairs, snapshotted at the same budgets
    let pairs0 = crate::selfplay::generate_synthetic(&initial, &dataset, 0, cfg.seed)?;
    let items: Vec<_> = pairs0
        .iter()
        .map(|p| {
            (
                p.prompt.clone(),
                p.real_response.clone(),
                p.synthetic_response.clone(),
            )
        })
        .collect();
    let mut optimizer =
        crate::selfplay::Optimizer::new(&cfg.optimizer, crate::policy::param_len(task.spec()));
    let shuffle = |epoch: usize| {
        crate::selfplay::shuffle_seed_for(
            cfg.seed,
            epoch / cfg.epochs_per_iteration,
            epoch % cfg.epochs_per_iteration,
        )
    };
    let opts = crate::selfplay::PairTrainOptions {
        lambda: beta,
        loss: LossKind::Logistic,
        epochs: None,
        batch_size: cfg.batch_size,
        stop_grad_norm: 0.0,
        max_steps: *budgets.last().unwrap_or(&0),
        iteration: 0,
        shuffle_seed: &shuffle,
        snapshot_steps: &budgets,
    };
    let dpo =
        crate::selfplay::train_on_pairs(initial.clone(), &initial, &items, &opts, &mut optimizer)?;
    rows.push(("dpo".to_string(), 0, kl_of(&initial)?));
    for (b, p) in budgets.iter().zip(&dpo.snapshots) {
        rows.push(("dpo".to_string(), *b, kl_of(p)?));
    }

    let mut writer = csv::Writer::from_path(&args.out).map_err(Error::Csv)?;
    writer.write_record(["method", "budget_steps", "kl_data_model"])?;
    for (method, budget, kl) in &rows {
        writer.write_record([method.clone(), budget.to_string(), kl.to_string()])?;
    }
    writer.flush()?;
    println!("comparison written to {}", args.out.display());
    for (method, budget, kl) in &rows {
        println!("{method:>12} @ {budget:>6} steps: kl(data||model) = {kl:.9}");
    }
    Ok(EXIT_OK)
}

/// Mini-batch SFT over the dataset, snapshotting at the given cumulative
/// step counts; epochs stream indefinitely until the last budget point.
fn train_sft_with_snapshots(
    initial: &TabularPolicy,
    dataset: &[crate::task::SftExample],
    cfg: &SpinConfig,
    budgets: &[usize],
) -> Result<Vec<TabularPolicy>> {
    let last = *budgets.last().unwrap_or(&0);
    let mut policy = initial.clone();
    let mut optimizer =
        crate::selfplay::Optimizer::new(&cfg.optimizer, crate::policy::param_len(initial.spec()));
    let mut snapshots = Vec::new();
    let mut cursor = 0usize;
    let mut steps = 0usize;
    let mut epoch = 0usize;
    while cursor < budgets.len() && steps < last {
        let order = crate::selfplay::shuffled_indices(
            dataset.len(),
            crate::selfplay::derive_seed(cfg.seed, 0x5f7, epoch as u64),
        );
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= last {
                break;
            }
            let batch: Vec<_> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let grad = crate::losses::sft_nll_grad(&policy, &batch)?;
            optimizer.step(policy.params_mut(), grad.values());
            steps += 1;
            if policy.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    iteration: epoch,
                    step: steps,
                    detail: "sft parameters became non-finite".to_string(),
                });
            }
            while cursor < budgets.len() && budgets[cursor] == steps {
                snapshots.push(policy.clone());
                cursor += 1;
            }
        }
        epoch += 1;
    }
    while cursor < budgets.len() {
        snapshots.push(policy.clone());
        cursor += 1;
    }
    Ok(snapshots)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check_name: String,
    pub status: CheckStatus,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

mod verify;

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let mut suites = Vec::new();
    for raw in &args.suite {
        for name in raw.split(',') {
            suites.push(name.trim().to_string());
        }
    }
    let known = [
        "all",
        "thm5.1",
        "thm5.2",
        "lemmaA.1",
        "lemmaA.2",
        "necessity",
        "dpo-equiv",
        "gradients",
    ];
    for s in &suites {
        if !known.contains(&s.as_str()) {
            return Err(Error::invalid(format!(
                "unknown suite '{s}'; expected one of {}",
                known.join("|")
            )));
        }
    }
    if suites.iter().any(|s| s == "all") {
        suites = known[1..].iter().map(|s| s.to_string()).collect();
    }
    let jobs = args.jobs.max(1);

    let mut results = Vec::new();
    for suite in &suites {
        let mut batch = match suite.as_str() {
            "thm5.1" => verify::suite_stationarity(args.seed)?,
            "thm5.2" => verify::suite_tilt(args.seed, jobs)?,
            "lemmaA.1" => verify::suite_scalar_min(args.seed)?,
            "lemmaA.2" => verify::suite_jsd_bound(args.seed, jobs)?,
            "necessity" => verify::suite_necessity(args.seed)?,
            "dpo-equiv" => verify::suite_dpo_equivalence(args.seed)?,
            "gradients" => verify::suite_gradients(args.seed)?,
            _ => unreachable!("suite names validated above"),
        };
        results.append(&mut batch);
    }

    for r in &results {
        let status = match r.status {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Inconclusive => "inconclusive",
        };
        println!(
            "{status:>12}  {}  measured {:+.6e}  bound {:+.6e}  tol {:.1e}",
            r.check_name, r.measured, r.bound, r.tolerance
        );
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&results)?)?;
    println!("report: {}", args.out.display());

    if results.iter().any(|r| r.status == CheckStatus::Fail) {
        Ok(EXIT_VERIFY_FAIL)
    } else if results
        .iter()
        .any(|r| r.status == CheckStatus::Inconclusive)
    {
        Ok(EXIT_INCONCLUSIVE)
    } else {
        Ok(EXIT_OK)
    }
}
