//! Figure-1 reproduction, Gaussian order study and score-error scaling runs.

use anyhow::{Context, Result};
use diffbench_core::metrics::linear_fit;
use diffbench_core::targets::default_theta_star;
use diffbench_core::{
    corrupt_oracle, fit_order, gaussian_pushforward_exact, generate_dataset,
    mala_reference_sampler, run_batch, sliced_w2, theorem_bound, w2_1d, w2_1d_vs_gaussian,
    w2_gaussian, BoundInputs, CorruptionSpec, GaussianLaw, GaussianOracle, GaussianTarget,
    LogisticPosterior, MalaConfig, McOracle, McOracleConfig, RegularityConstants, SchemeKind,
    ScoreOracle, SeedSpec, TimeGrid, VecD,
};

use crate::config::{Experiment, ExperimentConfig};
use crate::output::{sort_rows, Diagnostic, ResultRow, RunOutput, SlopeRow};

// Purpose tags for SeedSpec::derive; each stream of randomness gets its own.
const TAG_DATASET: u64 = 1;
const TAG_REFERENCE: u64 = 2;
const TAG_POOL: u64 = 3;
const TAG_ORACLE: u64 = 4;
const TAG_CHAINS: u64 = 5;
const TAG_SLICED: u64 = 6;
const TAG_CORRUPTION: u64 = 7;

pub const SLICED_PROJECTIONS: usize = 64;
pub const MALA_BURN_IN: usize = 2000;
pub const MALA_THINNING: usize = 5;

fn seed(cfg: &ExperimentConfig, tag: u64, stream: u64) -> SeedSpec {
    SeedSpec::new(cfg.master_seed, stream).derive(tag)
}

fn progress(on: bool, msg: impl FnOnce() -> String) {
    if on {
        eprintln!("{}", msg());
    }
}

/// Target of the order study: `N(2·1, 0.25 I)` in dimension `d`.
pub fn order_study_target(d: usize) -> GaussianTarget {
    GaussianTarget::isotropic(VecD::from_element(d, 2.0), 0.25).expect("valid isotropic target")
}

fn error_row(
    cfg: &ExperimentConfig,
    scheme: SchemeKind,
    lambda: Option<f64>,
    grid: &TimeGrid,
) -> ResultRow {
    ResultRow {
        experiment: cfg.experiment.as_str().to_string(),
        scheme,
        lambda,
        h: grid.step(),
        steps: grid.steps(),
        n_traj: cfg.n_traj,
        seed: cfg.master_seed,
        w2_dim1: None,
        w2_sliced: None,
        w2_gauss: None,
        wall_ms: None,
        oracle_calls: 0,
    }
}

fn diagnostic(
    cfg: &ExperimentConfig,
    scheme: SchemeKind,
    lambda: Option<f64>,
    h: Option<f64>,
    kind: &str,
    detail: String,
) -> Diagnostic {
    Diagnostic {
        experiment: cfg.experiment.as_str().to_string(),
        scheme,
        lambda,
        h,
        kind: kind.to_string(),
        detail,
    }
}

/// Slope rows for every (scheme, λ) whose cells all produced `metric`.
fn fit_slopes(
    cfg: &ExperimentConfig,
    out: &mut RunOutput,
    lambda: Option<f64>,
    floor: f64,
    metric: impl Fn(&ResultRow) -> Option<(f64, &'static str)>,
) {
    for &scheme in &cfg.schemes {
        let cells: Vec<(f64, f64, &'static str)> = out
            .rows
            .iter()
            .filter(|r| r.scheme == scheme && r.lambda == lambda)
            .filter_map(|r| metric(r).map(|(e, name)| (r.h, e, name)))
            .collect();
        if cells.len() != cfg.h_list.len() {
            continue;
        }
        let h: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let e: Vec<f64> = cells.iter().map(|c| c.1).collect();
        match fit_order(&h, &e, floor) {
            Ok(fit) => out.slopes.push(SlopeRow {
                experiment: cfg.experiment.as_str().to_string(),
                scheme,
                lambda,
                metric: cells[0].2.to_string(),
                slope: fit.slope,
                intercept: fit.intercept,
                r2: fit.r2,
                points_used: fit.used.len(),
                floor,
            }),
            Err(e) => out.diagnostics.push(diagnostic(
                cfg,
                scheme,
                lambda,
                None,
                "slope",
                e.to_string(),
            )),
        }
    }
}

/// Logistic-posterior experiment: every scheme and step size against a MALA
/// reference sample, per λ.
pub fn run_figure1(cfg: &ExperimentConfig, verbose: bool) -> Result<RunOutput> {
    let mut out = RunOutput::default();
    let dataset = generate_dataset(
        cfg.n_data,
        cfg.d,
        cfg.sigma2,
        &default_theta_star(cfg.d),
        seed(cfg, TAG_DATASET, 0),
    )
    .context("generating the dataset")?;
    for (li, &lambda) in cfg.lambda_list.iter().enumerate() {
        let li = li as u64;
        let posterior = LogisticPosterior::new(dataset.clone(), lambda)?;
        let (_, l0) = posterior.regularity();
        let mala = MalaConfig {
            step: 1.0 / l0,
            burn_in: MALA_BURN_IN,
            thinning: MALA_THINNING,
            n_samples: cfg.n_reference,
        };
        let reference = mala_reference_sampler(&posterior, &mala, seed(cfg, TAG_REFERENCE, li))
            .with_context(|| format!("reference sample for λ = {lambda}"))?;
        let pool_cfg = MalaConfig {
            n_samples: cfg.mc_particles,
            ..mala
        };
        let pool = mala_reference_sampler(&posterior, &pool_cfg, seed(cfg, TAG_POOL, li))
            .with_context(|| format!("particle pool for λ = {lambda}"))?;
        progress(verbose, || {
            format!(
                "λ = {lambda}: MALA acceptance {:.3} (reference), {:.3} (particles)",
                reference.acceptance_rate, pool.acceptance_rate
            )
        });
        let ref_dim1: Vec<f64> = reference.samples.iter().map(|x| x[0]).collect();

        let mc = McOracle::new(
            &pool.samples,
            McOracleConfig::new(cfg.mc_particles, seed(cfg, TAG_ORACLE, li)).accepting_low_ess(),
        )?;
        let corrupted;
        let oracle: &dyn ScoreOracle = if cfg.corruption.is_clean() {
            &mc
        } else {
            corrupted = corrupt_oracle(&mc, cfg.corruption, seed(cfg, TAG_CORRUPTION, li))?;
            &corrupted
        };

        for &scheme in &cfg.schemes {
            for &h in &cfg.h_list {
                let grid = TimeGrid::new(cfg.horizon, h)?;
                mc.reset_low_ess_count();
                let mut row = error_row(cfg, scheme, Some(lambda), &grid);
                // Same chain seed for every scheme and h: common random numbers.
                match run_batch(scheme, oracle, &grid, cfg.n_traj, seed(cfg, TAG_CHAINS, li)) {
                    Ok(res) => {
                        row.w2_dim1 = Some(w2_1d(&res.coordinate(0), &ref_dim1)?);
                        row.w2_sliced = Some(sliced_w2(
                            &res.finals,
                            &reference.samples,
                            SLICED_PROJECTIONS,
                            seed(cfg, TAG_SLICED, li),
                        )?);
                        row.wall_ms = cfg.record_timings.then_some(res.wall_ms);
                        row.oracle_calls = res.oracle_calls;
                        let low = mc.low_ess_count();
                        if low > 0 {
                            out.diagnostics.push(diagnostic(
                                cfg,
                                scheme,
                                Some(lambda),
                                Some(h),
                                "low_ess",
                                format!(
                                    "{low} of {} estimates had effective sample size below 10",
                                    res.oracle_calls
                                ),
                            ));
                        }
                    }
                    Err(e) => out.diagnostics.push(diagnostic(
                        cfg,
                        scheme,
                        Some(lambda),
                        Some(h),
                        "error",
                        e.to_string(),
                    )),
                }
                progress(verbose, || {
                    format!(
                        "  {scheme:>3} h = {h:<6} w2_dim1 = {}",
                        row.w2_dim1
                            .map_or("failed".to_string(), |v| format!("{v:.4}"))
                    )
                });
                out.rows.push(row);
            }
        }
        fit_slopes(cfg, &mut out, Some(lambda), 0.0, |r| {
            r.w2_dim1.map(|e| (e, "w2_dim1"))
        });
    }
    sort_rows(&mut out.rows);
    Ok(out)
}

/// `e^{−m_min T}‖X₀‖` for the order-study target: the error no step size can remove.
pub fn initialization_floor(target: &GaussianTarget, horizon: f64) -> Result<f64> {
    let (m0, l0) = target.regularity();
    let rc = RegularityConstants::new(m0, l0)?;
    let d = target.mean().len();
    let mut inp = BoundInputs::new(d, 0.1_f64.min(horizon), horizon);
    inp.x0_norm = (target.mean().norm_squared() + target.cov().trace()).sqrt();
    Ok(theorem_bound(SchemeKind::Em, &rc, &inp)?.init_term)
}

/// Exact W2 between the first-coordinate marginals of two Gaussian laws.
pub fn w2_gaussian_dim1(a: &GaussianLaw, b: &GaussianLaw) -> f64 {
    let dm = a.mean[0] - b.mean[0];
    let ds = a.cov[(0, 0)].sqrt() - b.cov[(0, 0)].sqrt();
    (dm * dm + ds * ds).sqrt()
}

/// Empirical convergence orders on `N(2·1, 0.25 I)` with the analytic oracle.
///
/// EM, EI and SO use their exact Gaussian output laws (no sampling noise,
/// `n_traj` recorded as 0). REM and REI, and every scheme when corruption is
/// configured, run `n_traj` chains and are scored on the first coordinate.
pub fn run_order_study(cfg: &ExperimentConfig, verbose: bool) -> Result<RunOutput> {
    let target = order_study_target(cfg.d);
    let truth = GaussianLaw::new(target.mean().clone(), target.cov().clone());
    let (mean0, sd0) = (target.mean()[0], target.cov()[(0, 0)].sqrt());
    let analytic = GaussianOracle::new(target.clone());
    let corrupted;
    let oracle: &dyn ScoreOracle = if cfg.corruption.is_clean() {
        &analytic
    } else {
        corrupted = corrupt_oracle(&analytic, cfg.corruption, seed(cfg, TAG_CORRUPTION, 0))?;
        &corrupted
    };
    let mut out = RunOutput::default();
    for &scheme in &cfg.schemes {
        for &h in &cfg.h_list {
            let grid = TimeGrid::new(cfg.horizon, h)?;
            let mut row = error_row(cfg, scheme, None, &grid);
            let exact =
                cfg.corruption.is_clean() && !matches!(scheme, SchemeKind::Rem | SchemeKind::Rei);
            if exact {
                let law = gaussian_pushforward_exact(scheme, &target, &grid)?;
                row.n_traj = 0;
                row.w2_dim1 = Some(w2_gaussian_dim1(&law, &truth));
                row.w2_gauss = Some(w2_gaussian(&law, &truth)?);
            } else {
                match run_batch(scheme, oracle, &grid, cfg.n_traj, seed(cfg, TAG_CHAINS, 0)) {
                    Ok(res) => {
                        row.w2_dim1 = Some(w2_1d_vs_gaussian(&res.coordinate(0), mean0, sd0)?);
                        row.wall_ms = cfg.record_timings.then_some(res.wall_ms);
                        row.oracle_calls = res.oracle_calls;
                    }
                    Err(e) => out.diagnostics.push(diagnostic(
                        cfg,
                        scheme,
                        None,
                        Some(h),
                        "error",
                        e.to_string(),
                    )),
                }
            }
            progress(verbose, || {
                format!(
                    "{scheme:>3} h = {h:<6} w2 = {}",
                    row.w2_gauss
                        .or(row.w2_dim1)
                        .map_or("failed".to_string(), |v| format!("{v:.4e}"))
                )
            });
            out.rows.push(row);
        }
    }
    let floor = initialization_floor(&target, cfg.horizon)?;
    fit_slopes(cfg, &mut out, None, floor, |r| match r.w2_gauss {
        Some(e) => Some((e, "w2_gauss")),
        None => r.w2_dim1.map(|e| (e, "w2_dim1")),
    });
    sort_rows(&mut out.rows);
    Ok(out)
}

/// Final error of one scheme across score-error radii, with an affine fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub scheme: SchemeKind,
    pub eps: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Runs `scheme` on `target` at step `h` with the analytic oracle corrupted
/// by `base` rescaled to each `eps_sc` in `eps_list`. The error is
/// `√(Σ_k W2²)` over the coordinate marginals against the exact target.
/// Chains share one seed across radii.
#[allow(clippy::too_many_arguments)]
pub fn score_error_scaling(
    scheme: SchemeKind,
    target: &GaussianTarget,
    horizon: f64,
    h: f64,
    eps_list: &[f64],
    base: CorruptionSpec,
    n_traj: usize,
    master_seed: u64,
) -> Result<ScalingResult> {
    let grid = TimeGrid::new(horizon, h)?;
    let analytic = GaussianOracle::new(target.clone());
    let d = target.mean().len();
    let mut errors = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let spec = CorruptionSpec {
            eps_sc: eps,
            ..base
        };
        let oracle = corrupt_oracle(
            &analytic,
            spec,
            SeedSpec::new(master_seed, 0).derive(TAG_CORRUPTION),
        )?;
        let res = run_batch(
            scheme,
            &oracle,
            &grid,
            n_traj,
            SeedSpec::new(master_seed, 0).derive(TAG_CHAINS),
        )?;
        let mut sq = 0.0;
        for k in 0..d {
            let sd = target.cov()[(k, k)].sqrt();
            sq += w2_1d_vs_gaussian(&res.coordinate(k), target.mean()[k], sd)?.powi(2);
        }
        errors.push(sq.sqrt());
    }
    let fit = linear_fit(eps_list, &errors)?;
    Ok(ScalingResult {
        scheme,
        eps: eps_list.to_vec(),
        errors,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
    })
}

/// Runs the experiment named in `cfg` (figure1 or order_study).
pub fn run_experiment(cfg: &ExperimentConfig, verbose: bool) -> Result<RunOutput> {
    match cfg.experiment {
        Experiment::Figure1 => run_figure1(cfg, verbose),
        Experiment::OrderStudy => run_order_study(cfg, verbose),
        Experiment::SelfTest => {
            anyhow::bail!("self_test is not a sampling experiment; use self_test::run")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_order_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(Experiment::OrderStudy);
        cfg.n_traj = 2000;
        cfg
    }

    #[test]
    fn order_study_grid_and_exact_rows() {
        let cfg = small_order_cfg();
        let out = run_order_study(&cfg, false).unwrap();
        assert_eq!(out.rows.len(), 25);
        for r in &out.rows {
            assert_eq!(r.steps, (10.0 / r.h).floor() as usize);
            assert!(r.w2_dim1.unwrap() >= 0.0);
            match r.scheme {
                SchemeKind::Rem | SchemeKind::Rei => {
                    assert_eq!(r.n_traj, 2000);
                    assert!(r.w2_gauss.is_none());
                    assert_eq!(r.oracle_calls, 2000 * r.steps as u64 * 2);
                }
                _ => {
                    assert_eq!(r.n_traj, 0);
                    assert!(r.w2_gauss.unwrap() >= r.w2_dim1.unwrap() - 1e-12);
                }
            }
        }
        assert_eq!(out.slopes.len(), 5);
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn initialization_floor_is_tiny_at_t10() {
        let target = order_study_target(2);
        let floor = initialization_floor(&target, 10.0).unwrap();
        // m_min = 1, ‖X₀‖ = √(8 + 0.5)
        assert!((floor - (-10f64).exp() * 8.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn doubling_the_horizon_barely_moves_the_exact_error() {
        let target = order_study_target(2);
        let truth = GaussianLaw::new(target.mean().clone(), target.cov().clone());
        for scheme in [SchemeKind::Em, SchemeKind::Ei, SchemeKind::So] {
            let e10 = w2_gaussian(
                &gaussian_pushforward_exact(scheme, &target, &TimeGrid::new(10.0, 0.05).unwrap())
                    .unwrap(),
                &truth,
            )
            .unwrap();
            let e20 = w2_gaussian(
                &gaussian_pushforward_exact(scheme, &target, &TimeGrid::new(20.0, 0.05).unwrap())
                    .unwrap(),
                &truth,
            )
            .unwrap();
            assert!((e10 - e20).abs() < 1e-4, "{scheme}: {e10} vs {e20}");
        }
    }

    #[test]
    fn corrupted_order_study_samples_every_scheme() {
        let mut cfg = small_order_cfg();
        cfg.n_traj = 200;
        cfg.h_list = vec![0.4, 0.2, 0.1];
        cfg.corruption = CorruptionSpec::score_only(0.1);
        let out = run_order_study(&cfg, false).unwrap();
        assert!(out
            .rows
            .iter()
            .all(|r| r.n_traj == 200 && r.w2_gauss.is_none()));
    }

    #[test]
    fn small_figure1_run_is_complete_and_sorted() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Figure1);
        cfg.lambda_list = vec![100.0];
        cfg.h_list = vec![0.4, 0.2];
        cfg.horizon = 2.0;
        cfg.n_traj = 50;
        cfg.n_reference = 300;
        cfg.mc_particles = 200;
        let out = run_figure1(&cfg, false).unwrap();
        assert_eq!(out.rows.len(), 10);
        for (i, s) in SchemeKind::ALL.iter().enumerate() {
            assert_eq!(out.rows[2 * i].scheme, *s);
            assert_eq!((out.rows[2 * i].h, out.rows[2 * i + 1].h), (0.2, 0.4));
        }
        for r in &out.rows {
            assert_eq!(r.lambda, Some(100.0));
            assert!(r.w2_dim1.is_some() && r.w2_sliced.is_some(), "{r:?}");
            assert!(r.wall_ms.is_none());
        }
        let again = run_figure1(&cfg, false).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn scaling_grows_with_persistent_bias() {
        let target = order_study_target(2);
        let res = score_error_scaling(
            SchemeKind::Ei,
            &target,
            5.0,
            0.1,
            &[0.0, 0.2, 0.4],
            CorruptionSpec::none().persistent(),
            4000,
            1,
        )
        .unwrap();
        assert!(res.errors[2] > res.errors[0]);
        assert!(res.slope > 0.0);
    }
}
