//! The named check suites behind `spin-lab verify`. Each suite builds its
//! fixtures from the root seed, runs the corresponding oracle, and emits
//! one `CheckResult` per assertion so the JSON report is self-describing.

use super::{CheckResult, CheckStatus};
use crate::error::Result;
use crate::losses::{
    dpo_pair_loss, loss_value, sft_nll, sft_nll_grad, spin_gradient_batch, spin_gradient_exact,
    spin_margin, spin_objective_batch, spin_objective_exact, LossKind, SpinBatch, ALL_LOSSES,
};
use crate::metrics::tv_distance;
use crate::numerics::max_abs;
use crate::policy::{param_len, TabularPolicy};
use crate::selfplay::{
    derive_seed, generate_synthetic, optimize_exact_auto, run_dpo_baseline, spin_iteration,
    Accumulation, ExpectationMode, OptimizerConfig, SpinConfig,
};
use crate::task::{
    random_task, sample_sft_dataset, CategoricalOverResponses, Prompt, Response, SequenceSpec,
    TargetTask,
};
use crate::theory::{
    check_necessity, check_stationarity, default_lambda_grid, scalar_min_lemma, tilted_opponent,
    unconstrained_min_check, verify_spin_iteration_against_tilt,
};

fn pass_if(name: &str, measured: f64, bound: f64, tolerance: f64, ok: bool) -> CheckResult {
    CheckResult {
        check_name: name.to_string(),
        status: if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured,
        bound,
        tolerance,
    }
}

/// Runs `f` over `items` on up to `jobs` threads, preserving input order.
fn run_parallel<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = items.iter().map(|_| None).collect();
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let item = queue.lock().expect("queue lock").pop();
                match item {
                    Some((i, t)) => {
                        let r = f(t);
                        results.lock().expect("result lock")[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every index filled"))
        .collect()
}

fn fixture_task(seed: u64, index: u64) -> Result<TargetTask> {
    let shapes = [(2, 1, 2), (3, 1, 1), (4, 1, 2), (2, 2, 2), (3, 2, 1)];
    let (v, n, m) = shapes[(index as usize) % shapes.len()];
    let spec = SequenceSpec::new(v, n, m)?;
    random_task(&spec, derive_seed(seed, 0xf1c, index), 0.05)
}

fn fixture_start_policy(task: &TargetTask, seed: u64, index: u64) -> Result<TabularPolicy> {
    let other = random_task(task.spec(), derive_seed(seed, 0xf2c, index), 0.05)?;
    TabularPolicy::from_distribution(other.data_dist())
}

// ---------------------------------------------------------------------------
// thm5.1 — stationarity at the data distribution
// ---------------------------------------------------------------------------

pub fn suite_stationarity(seed: u64) -> Result<Vec<CheckResult>> {
    let task = fixture_task(seed, 0)?;
    let mut out = Vec::new();
    for loss in ALL_LOSSES {
        let report = check_stationarity(&task, 1.5, loss, 100, derive_seed(seed, 0x51, 0))?;
        out.push(pass_if(
            &format!("thm5.1/{loss}/gradient-norm"),
            report.gradient_norm,
            1e-8,
            1e-8,
            report.gradient_norm <= 1e-8,
        ));
        out.push(pass_if(
            &format!("thm5.1/{loss}/probe-excess"),
            report.min_probe_excess,
            -1e-12,
            1e-12,
            report.min_probe_excess >= -1e-12,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// thm5.2 — the optimized iterate matches the tilted opponent
// ---------------------------------------------------------------------------

pub fn suite_tilt(seed: u64, jobs: usize) -> Result<Vec<CheckResult>> {
    let fixtures: Vec<(u64, f64)> = (0..2)
        .flat_map(|i| [1.0, 2.0, 5.0].map(|l| (i, l)))
        .collect();
    let results = run_parallel(jobs, fixtures, |(i, lambda)| -> Result<Vec<CheckResult>> {
        let task = fixture_task(seed, i)?;
        let start = fixture_start_policy(&task, seed, i)?;
        let out = optimize_exact_auto(
            &start,
            &start,
            lambda,
            &task,
            LossKind::Logistic,
            1e-10,
            400_000,
            8.0 / (lambda * lambda),
        )?;
        let mut checks = Vec::new();
        if out.exit_grad_norm > 1e-10 {
            checks.push(CheckResult {
                check_name: format!("thm5.2/task{i}/lambda{lambda}/optimizer"),
                status: CheckStatus::Inconclusive,
                measured: out.exit_grad_norm,
                bound: 1e-10,
                tolerance: 0.0,
            });
            return Ok(checks);
        }
        let report = verify_spin_iteration_against_tilt(&task, &start, lambda, &out.policy)?;
        checks.push(pass_if(
            &format!("thm5.2/task{i}/lambda{lambda}/tv-vs-tilt"),
            report.max_tv,
            1e-3,
            1e-3,
            report.max_tv <= 1e-3,
        ));
        if lambda == 1.0 {
            let induced = out.policy.induced_distribution();
            let max_tv_data = (0..task.spec().num_prompts())
                .map(|x| tv_distance(induced.row(x), task.data_dist().row(x)))
                .fold(0.0f64, f64::max);
            checks.push(pass_if(
                &format!("thm5.2/task{i}/lambda1/tv-vs-data"),
                max_tv_data,
                1e-4,
                1e-4,
                max_tv_data <= 1e-4,
            ));
        }
        Ok(checks)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    // larger lambda moves the oracle distribution less
    let task = fixture_task(seed, 0)?;
    let p_t = fixture_start_policy(&task, seed, 0)?.induced_distribution();
    let step = |lambda: f64| -> Result<f64> {
        let tilt = tilted_opponent(&p_t, task.data_dist(), lambda)?;
        Ok((0..task.spec().num_prompts())
            .map(|x| tv_distance(tilt.row(x), p_t.row(x)))
            .fold(0.0f64, f64::max))
    };
    let (d2, d5) = (step(2.0)?, step(5.0)?);
    out.push(pass_if(
        "thm5.2/step-size-monotone-in-lambda",
        d5 - d2,
        0.0,
        0.0,
        d5 < d2,
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// lemmaA.1 — scalar two-point minimization
// ---------------------------------------------------------------------------

pub fn suite_scalar_min(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let symmetric = scalar_min_lemma(1.0, 1.0)?;
    out.push(pass_if(
        "lemmaA.1/symmetric-argmin",
        symmetric.argmin,
        0.0,
        1e-12,
        symmetric.argmin.abs() <= 1e-12 && symmetric.numeric_argmin.abs() <= 1e-8,
    ));
    let two_one = scalar_min_lemma(2.0, 1.0)?;
    out.push(pass_if(
        "lemmaA.1/two-one-argmin",
        two_one.argmin,
        std::f64::consts::LN_2,
        1e-12,
        (two_one.argmin - std::f64::consts::LN_2).abs() <= 1e-12,
    ));
    out.push(pass_if(
        "lemmaA.1/two-one-value",
        two_one.min_value,
        1.909_542_504_884_438_6,
        1e-12,
        (two_one.min_value - 1.909_542_504_884_438_6).abs() <= 1e-12,
    ));

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xa1, 0));
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = 10f64.powf(rng.random::<f64>() * 6.0 - 3.0);
        let b = 10f64.powf(rng.random::<f64>() * 6.0 - 3.0);
        let r = scalar_min_lemma(a, b)?;
        worst = worst.max((r.argmin - r.numeric_argmin).abs());
    }
    out.push(pass_if(
        "lemmaA.1/random-search-agreement",
        worst,
        1e-8,
        1e-8,
        worst <= 1e-8,
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// lemmaA.2 — the JSD lower bound is achieved by a free discriminator
// ---------------------------------------------------------------------------

pub fn suite_jsd_bound(seed: u64, jobs: usize) -> Result<Vec<CheckResult>> {
    let fixtures: Vec<u64> = (0..3).collect();
    let results = run_parallel(jobs, fixtures, |i| -> Result<Vec<CheckResult>> {
        let task = fixture_task(seed, i)?;
        let p_t = fixture_start_policy(&task, seed, i)?.induced_distribution();
        let report = unconstrained_min_check(&task, &p_t)?;
        let mut checks = Vec::new();
        if !report.converged {
            checks.push(CheckResult {
                check_name: format!("lemmaA.2/fixture{i}/optimizer"),
                status: CheckStatus::Inconclusive,
                measured: report.gradient_norm,
                bound: 1e-8,
                tolerance: 0.0,
            });
            return Ok(checks);
        }
        checks.push(pass_if(
            &format!("lemmaA.2/fixture{i}/achieves-bound"),
            report.achieved_min - report.bound,
            0.0,
            1e-4,
            (report.achieved_min - report.bound).abs() <= 1e-4,
        ));
        checks.push(pass_if(
            &format!("lemmaA.2/fixture{i}/gauge-residual"),
            report.gauge_residual,
            0.0,
            1e-4,
            report.gauge_residual <= 1e-4,
        ));
        Ok(checks)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    // degenerate case: p_t = p_data gives JSD 0 and bound ln 2
    let task = fixture_task(seed, 0)?;
    let report = unconstrained_min_check(&task, task.data_dist())?;
    out.push(pass_if(
        "lemmaA.2/identical-joints",
        report.achieved_min,
        std::f64::consts::LN_2,
        1e-6,
        report.jsd.abs() <= 1e-12 && (report.achieved_min - std::f64::consts::LN_2).abs() <= 1e-6,
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// necessity — a better-than-stationary lambda exists when p_t != p_data
// ---------------------------------------------------------------------------

pub fn suite_necessity(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    // canonical Bernoulli fixture: p_data (0.5, 0.5) vs p_t (0.8, 0.2)
    let s = SequenceSpec::new(2, 0, 1)?;
    let data = CategoricalOverResponses::new(s, vec![vec![0.5, 0.5]])?;
    let task = TargetTask::new(s, 0, 0.2, vec![1.0], data)?;
    let p_t = CategoricalOverResponses::new(s, vec![vec![0.8, 0.2]])?;
    let report = check_necessity(&task, &p_t, LossKind::Logistic, &default_lambda_grid())?;
    let expected = -0.207_944_154_167_983_65;
    out.push(pass_if(
        "necessity/bernoulli/analytic-derivative",
        report.g_prime_0_analytic,
        expected,
        1e-12,
        (report.g_prime_0_analytic - expected).abs() <= 1e-12,
    ));
    let rel =
        ((report.g_prime_0_numeric - report.g_prime_0_analytic) / report.g_prime_0_analytic).abs();
    out.push(pass_if(
        "necessity/bernoulli/numeric-derivative",
        rel,
        1e-4,
        1e-4,
        rel <= 1e-4,
    ));
    let witness_gap = report
        .witness_lambda
        .and_then(|w| {
            report
                .lambda_grid
                .iter()
                .position(|&l| l == w)
                .map(|i| report.g_values[i] - report.g_at_zero)
        })
        .unwrap_or(f64::INFINITY);
    out.push(pass_if(
        "necessity/bernoulli/witness",
        witness_gap,
        -1e-9,
        1e-9,
        witness_gap < -1e-9,
    ));

    // a random task fixture with a random opponent
    let task2 = fixture_task(seed, 1)?;
    let p_t2 = fixture_start_policy(&task2, seed, 7)?.induced_distribution();
    let report2 = check_necessity(&task2, &p_t2, LossKind::Logistic, &default_lambda_grid())?;
    out.push(pass_if(
        "necessity/random-task/witness",
        report2.witness_lambda.unwrap_or(f64::NAN),
        0.0,
        0.0,
        report2.witness_lambda.is_some(),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// dpo-equiv — logistic pair loss identity, pointwise and through training
// ---------------------------------------------------------------------------

pub fn suite_dpo_equivalence(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let s = SequenceSpec::new(3, 1, 2)?;
    let policy = TabularPolicy::random(&s, derive_seed(seed, 0xd0, 0), 1.2);
    let reference = TabularPolicy::random(&s, derive_seed(seed, 0xd0, 1), 1.2);
    let mut max_diff = 0.0f64;
    for i in 0..200u64 {
        let x = Prompt::from_index((i % 3) as usize, &s);
        let y_w = Response::from_index((i % 9) as usize, &s);
        let y_l = Response::from_index(((i * 5 + 3) % 9) as usize, &s);
        let beta = 0.05 + (i as f64) * 0.01;
        let dpo = dpo_pair_loss(&policy, &reference, beta, &x, &y_w, &y_l)?;
        let spin = loss_value(
            LossKind::Logistic,
            spin_margin(&policy, &reference, beta, &x, &y_w, &y_l)?,
        );
        if dpo.to_bits() != spin.to_bits() {
            max_diff = max_diff.max((dpo - spin).abs().max(f64::MIN_POSITIVE));
        }
    }
    out.push(pass_if(
        "dpo-equiv/pointwise-bitwise",
        max_diff,
        0.0,
        0.0,
        max_diff == 0.0,
    ));

    // iteration-0 training curves coincide step for step
    let task = fixture_task(seed, 2)?;
    let dataset = sample_sft_dataset(&task, 40, derive_seed(seed, 0xd0, 2))?;
    let start = fixture_start_policy(&task, seed, 3)?;
    let lambda = 0.7;
    let cfg = SpinConfig {
        iterations: 1,
        lambda_schedule: vec![lambda],
        loss: LossKind::Logistic,
        epochs_per_iteration: 2,
        batch_size: 8,
        optimizer: OptimizerConfig::default(),
        pairs_per_iteration: 40,
        accumulation: Accumulation::Replace,
        mode: ExpectationMode::Stochastic,
        stop_grad_norm: 0.0,
        max_steps_per_iteration: 100_000,
        seed: derive_seed(seed, 0xd0, 4),
    };
    let mut acc = Vec::new();
    let spin_out = spin_iteration(&start, &task, Some(&dataset), &cfg, 0, &mut acc)?;
    let pairs = generate_synthetic(&start, &dataset, 0, cfg.seed)?;
    let items: Vec<_> = pairs
        .iter()
        .map(|p| {
            (
                p.prompt.clone(),
                p.real_response.clone(),
                p.synthetic_response.clone(),
            )
        })
        .collect();
    let dpo_out = run_dpo_baseline(
        &start,
        &items,
        lambda,
        cfg.epochs_per_iteration,
        cfg.epochs_per_iteration,
        &cfg.optimizer,
        cfg.batch_size,
        0.0,
        100_000,
        cfg.seed,
    )?;
    let curves_equal = spin_out.step_losses.len() == dpo_out.step_losses.len()
        && spin_out
            .step_losses
            .iter()
            .zip(&dpo_out.step_losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let params_equal = spin_out.next.params() == dpo_out.policy.params();
    out.push(pass_if(
        "dpo-equiv/iteration0-curve-bitwise",
        if curves_equal && params_equal {
            0.0
        } else {
            1.0
        },
        0.0,
        0.0,
        curves_equal && params_equal,
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// gradients — analytic vs central finite differences
// ---------------------------------------------------------------------------

fn fd_vector_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(fd).map(|(a, b)| a - b).collect();
    max_abs(&diff) / max_abs(fd).max(1e-12)
}

pub fn suite_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let h = 1e-5;
    let s = SequenceSpec::new(2, 1, 2)?;
    let n_probes = 100;
    let mut worst_batch = 0.0f64;
    let mut worst_exact = 0.0f64;
    let mut worst_sft = 0.0f64;
    let mut worst_dpo = 0.0f64;

    for i in 0..n_probes {
        let probe_seed = derive_seed(seed, 0x9d, i as u64);
        let task = random_task(&s, derive_seed(probe_seed, 1, 0), 0.05)?;
        let policy = TabularPolicy::random(&s, derive_seed(probe_seed, 2, 0), 1.0);
        let reference = TabularPolicy::random(&s, derive_seed(probe_seed, 3, 0), 1.0);
        let lambda = 0.5 + (i as f64 % 5.0) * 0.5;
        let dataset = sample_sft_dataset(&task, 12, derive_seed(probe_seed, 4, 0))?;
        let pairs = generate_synthetic(&reference, &dataset, 0, derive_seed(probe_seed, 5, 0))?;
        let batch = SpinBatch::from_pairs(s, &pairs)?;

        // batch objective
        let g = spin_gradient_batch(&policy, &reference, lambda, &batch, LossKind::Logistic)?;
        let fd = fd_gradient(&policy, h, |p| {
            spin_objective_batch(p, &reference, lambda, &batch, LossKind::Logistic)
        })?;
        worst_batch = worst_batch.max(fd_vector_error(g.values(), &fd));

        // exact objective
        let ge = spin_gradient_exact(&policy, &reference, lambda, &task, LossKind::Logistic)?;
        let fde = fd_gradient(&policy, h, |p| {
            spin_objective_exact(p, &reference, lambda, &task, LossKind::Logistic)
        })?;
        worst_exact = worst_exact.max(fd_vector_error(ge.values(), &fde));

        // sft nll
        let gs = sft_nll_grad(&policy, &dataset)?;
        let fds = fd_gradient(&policy, h, |p| sft_nll(p, &dataset))?;
        worst_sft = worst_sft.max(fd_vector_error(gs.values(), &fds));

        // dpo pair loss (mean over the batch, logistic by definition)
        let gd = spin_gradient_batch(&policy, &reference, lambda, &batch, LossKind::Logistic)?;
        let fdd = fd_gradient(&policy, h, |p| {
            let mut acc = Vec::with_capacity(batch.len());
            for (x, y_w, y_l) in batch.items() {
                acc.push(dpo_pair_loss(p, &reference, lambda, x, y_w, y_l)?);
            }
            Ok(crate::numerics::pairwise_sum(&acc) / acc.len() as f64)
        })?;
        worst_dpo = worst_dpo.max(fd_vector_error(gd.values(), &fdd));
    }

    Ok(vec![
        pass_if(
            "gradients/spin-batch",
            worst_batch,
            1e-5,
            1e-5,
            worst_batch <= 1e-5,
        ),
        pass_if(
            "gradients/spin-exact",
            worst_exact,
            1e-5,
            1e-5,
            worst_exact <= 1e-5,
        ),
        pass_if(
            "gradients/sft-nll",
            worst_sft,
            1e-5,
            1e-5,
            worst_sft <= 1e-5,
        ),
        pass_if("gradients/dpo", worst_dpo, 1e-5, 1e-5, worst_dpo <= 1e-5),
    ])
}

fn fd_gradient(
    policy: &TabularPolicy,
    h: f64,
    f: impl Fn(&TabularPolicy) -> Result<f64>,
) -> Result<Vec<f64>> {
    let n = param_len(policy.spec());
    let mut fd = vec![0.0; n];
    for i in 0..n {
        let mut plus = policy.clone();
        plus.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.params_mut()[i] -= h;
        fd[i] = (f(&plus)? - f(&minus)?) / (2.0 * h);
    }
    Ok(fd)
}
