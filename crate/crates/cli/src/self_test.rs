//! Invariant checks across all modules, run by `diffusion-bench selftest`.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{ensure, Result};
use diffbench_core::metrics::linear_fit;
use diffbench_core::oracles::{gaussian_marginal_derivatives, ParticleSet};
use diffbench_core::samplers::{rei_coupling, REI_U_MIN};
use diffbench_core::targets::default_theta_star;
use diffbench_core::{
    convexity_m, corrupt_oracle, fit_order, gaussian_pushforward_exact, generate_dataset,
    linearization_terms, lipschitz_l, mala_reference_sampler, phi_functions, run_batch, sliced_w2,
    theorem_bound, w2_1d, w2_1d_vs_gaussian, w2_gaussian, BoundInputs, CorruptionSpec, Error,
    EvalContext, GaussianLaw, GaussianOracle, GaussianTarget, LogDensity, LogisticPosterior,
    MalaConfig, MatD, RegularityConstants, SchemeKind, ScoreOracle, SeedSpec, TimeGrid, VecD,
};
use rand::Rng;

pub type PhiFn = fn(f64) -> (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self) -> String {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("{:<width$}  result  {:>8}  detail\n", "check", "ms");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<width$}  {:<6}  {:>8.1}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.millis,
                c.detail
            );
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(s, "{passed}/{} checks passed", self.checks.len());
        s
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(e) => (false, format!("{e:#}")),
    };
    Check {
        name,
        passed,
        detail,
        millis: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn z_grid() -> impl Iterator<Item = f64> {
    // [−50, 50] in steps of 0.01, plus points near the series cutoffs
    (-5000..=5000).map(|k| k as f64 / 100.0).chain([
        1e-12, -1e-12, 9.99e-5, -1.001e-4, 0.4999, -0.5001, 1e-7, -3e-6,
    ])
}

/// `z φ₁(z) = e^z − 1`, relative to `max(1, |e^z − 1|)`.
pub fn phi1_identity_check(phi: PhiFn) -> Check {
    check("phi1_identity", || {
        let mut worst: f64 = 0.0;
        for z in z_grid() {
            let lhs = z * phi(z).0;
            let rhs = z.exp_m1();
            worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }
        ensure!(worst <= 1e-10, "max scaled residual {worst:.3e} > 1e-10");
        Ok(format!("max scaled residual {worst:.1e}"))
    })
}

/// `z φ₂(z) = φ₁(z) − 1`, relative to `max(1, |φ₁(z)|)`.
pub fn phi2_identity_check(phi: PhiFn) -> Check {
    check("phi2_identity", || {
        let mut worst: f64 = 0.0;
        for z in z_grid() {
            let (p1, p2) = phi(z);
            worst = worst.max((z * p2 - (p1 - 1.0)).abs() / p1.abs().max(1.0));
        }
        ensure!(worst <= 1e-10, "max scaled residual {worst:.3e} > 1e-10");
        Ok(format!("max scaled residual {worst:.1e}"))
    })
}

pub fn phi_limit_check(phi: PhiFn) -> Check {
    check("phi_limits", || {
        let (a, b) = phi(0.0);
        ensure!(a == 1.0 && b == 0.5, "phi(0) = ({a}, {b})");
        for z in [1e-9, -1e-9, 1e-5, -1e-5] {
            let (a, b) = phi(z);
            ensure!(
                (a - 1.0 - z / 2.0).abs() < 1e-9 && (b - 0.5 - z / 6.0).abs() < 1e-9,
                "phi({z}) = ({a}, {b})"
            );
        }
        Ok("phi(0) = (1, 1/2), first-order behaviour near 0".into())
    })
}

fn rho_checks(out: &mut Vec<Check>) {
    let hs = [1e-4, 0.025, 0.05, 0.1, 0.2, 0.4, 1.0, 5.0];
    out.push(check("rho_in_unit_interval", || {
        let mut n = 0;
        for h in hs {
            for k in 0..=200 {
                let u = (k as f64 / 200.0).max(REI_U_MIN);
                let (rho, _) = rei_coupling(h, u);
                ensure!((0.0..=1.0).contains(&rho), "rho(h = {h}, U = {u}) = {rho}");
                n += 1;
            }
        }
        Ok(format!("{n} (h, U) pairs"))
    }));
    out.push(check("rho_at_u_one", || {
        for h in hs {
            let (rho, _) = rei_coupling(h, 1.0);
            ensure!((rho - 1.0).abs() <= 1e-12, "rho(h = {h}, 1) = {rho}");
        }
        Ok("rho(h, 1) = 1".into())
    }));
    out.push(check("rho_unit_mix", || {
        let mut worst: f64 = 0.0;
        for h in hs {
            for k in 0..=200 {
                let u = (k as f64 / 200.0).max(REI_U_MIN);
                let (rho, comp) = rei_coupling(h, u);
                worst = worst.max((rho * rho + comp * comp - 1.0).abs());
            }
        }
        ensure!(worst <= 1e-12, "max |rho² + (1 − rho²) − 1| = {worst:.3e}");
        Ok(format!("max residual {worst:.1e}"))
    }));
}

fn oracle_checks(out: &mut Vec<Check>, seed: u64) {
    out.push(check("m_term_identity", || {
        let sigma = MatD::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 2.0]);
        let g = GaussianTarget::new(VecD::from_vec(vec![1.0, -0.5]), sigma)?;
        let oracle = GaussianOracle::new(g.clone());
        let mut worst: f64 = 0.0;
        for t in [0.01, 0.1, 0.5, 1.0, 3.0] {
            for x in [[0.0, 0.0], [1.5, -0.5], [-2.0, 3.0]] {
                let x = VecD::from_vec(x.to_vec());
                let (_, m) = linearization_terms(&oracle, t, &x, &mut EvalContext::default())?;
                let direct = -gaussian_marginal_derivatives(&g, t, &x)?.dt_score;
                worst = worst.max((m - direct).amax());
            }
        }
        ensure!(worst <= 1e-8, "max |M + ∂ₜ∇log p| = {worst:.3e}");
        Ok(format!("max deviation {worst:.1e}"))
    }));
    out.push(check("l_matrix", || {
        let g = GaussianTarget::new(
            VecD::zeros(2),
            MatD::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.4]),
        )?;
        let oracle = GaussianOracle::new(g.clone());
        let x = VecD::from_vec(vec![0.7, -1.1]);
        let (l, _) = linearization_terms(&oracle, 0.8, &x, &mut EvalContext::default())?;
        let h = gaussian_marginal_derivatives(&g, 0.8, &x)?.hessian;
        let want = h + MatD::identity(2, 2) * 0.5;
        ensure!((&l - &want).amax() < 1e-12, "L = {l}, expected {want}");
        ensure!((&l - l.transpose()).amax() == 0.0, "L is not symmetric");
        Ok("L = ∇²log p + I/2, symmetric".into())
    }));
    out.push(check("mc_vs_analytic_score", || {
        let g = GaussianTarget::new(
            VecD::from_vec(vec![0.5, -1.0]),
            MatD::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.3]),
        )?;
        let mut rng = SeedSpec::new(seed, 11).rng();
        let pool: Vec<VecD> = (0..100_000).map(|_| g.sample(&mut rng)).collect();
        let set = ParticleSet::new(&pool)?;
        let mut worst: f64 = 0.0;
        for t in [0.1, 0.5, 2.0] {
            for x in [[0.3, -0.8], [1.0, 0.0]] {
                let x = VecD::from_vec(x.to_vec());
                let mc = set.estimate(t, &x, false)?.score;
                let exact = gaussian_marginal_derivatives(&g, t, &x)?.score;
                worst = worst.max((mc - exact).norm());
            }
        }
        ensure!(worst <= 0.05, "L2 error {worst:.4} > 0.05");
        Ok(format!("max L2 error {worst:.4} at 1e5 particles"))
    }));
    out.push(check("clean_corruption_transparent", || {
        let oracle = GaussianOracle::new(GaussianTarget::isotropic(
            VecD::from_vec(vec![1.0, 2.0]),
            0.5,
        )?);
        let wrapped = corrupt_oracle(
            oracle.clone(),
            CorruptionSpec::none(),
            SeedSpec::new(seed, 0),
        )?;
        let grid = TimeGrid::new(2.0, 0.1)?;
        let a = run_batch(SchemeKind::So, &oracle, &grid, 64, SeedSpec::new(seed, 0))?;
        let b = run_batch(SchemeKind::So, &wrapped, &grid, 64, SeedSpec::new(seed, 0))?;
        ensure!(a.finals == b.finals, "zero radii changed the output");
        Ok("bit-identical SO output".into())
    }));
    out.push(check("corruption_radius", || {
        let oracle = GaussianOracle::new(GaussianTarget::standard(3));
        let x = VecD::from_vec(vec![0.1, 0.2, -0.3]);
        for spec in [
            CorruptionSpec::score_only(0.25),
            CorruptionSpec::score_only(0.25).persistent(),
        ] {
            let wrapped = corrupt_oracle(&oracle, spec, SeedSpec::new(seed, 3))?;
            for stream in 0..5 {
                let mut ctx = EvalContext::new(stream);
                let delta = wrapped.score(0.7, &x, &mut ctx)?
                    - oracle.score(0.7, &x, &mut EvalContext::default())?;
                ensure!(
                    (delta.norm() - 0.25).abs() < 1e-12,
                    "|δ| = {}",
                    delta.norm()
                );
            }
        }
        Ok("perturbation norm equals eps_sc".into())
    }));
}

fn metric_checks(out: &mut Vec<Check>, seed: u64) {
    out.push(check("w2_bruteforce", || {
        let mut rng = SeedSpec::new(seed, 21).rng();
        let mut cases = 0;
        for n in 1..=6usize {
            for _ in 0..40 {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let brute = brute_force_w2(&a, &b);
                let fast = w2_1d(&a, &b)?;
                ensure!(
                    (brute - fast).abs() <= 1e-12 * brute.max(1.0),
                    "n = {n}: {fast} vs {brute}"
                );
                cases += 1;
            }
        }
        Ok(format!("{cases} random instances"))
    }));
    out.push(check("w2_gaussian_closed_form", || {
        let a = GaussianLaw::new(
            VecD::from_vec(vec![1.0, 0.0]),
            MatD::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        );
        ensure!(w2_gaussian(&a, &a)?.abs() < 1e-7, "W2(a, a) != 0");
        let b = GaussianLaw::new(VecD::from_vec(vec![4.0, 4.0]), a.cov.clone());
        ensure!(
            (w2_gaussian(&a, &b)? - 5.0).abs() < 1e-7,
            "pure shift should give 5"
        );
        let c = GaussianLaw::new(a.mean.clone(), MatD::identity(2, 2) * 4.0);
        let i = GaussianLaw::new(a.mean.clone(), MatD::identity(2, 2));
        ensure!(
            (w2_gaussian(&c, &i)? - 2f64.sqrt()).abs() < 1e-7,
            "N(0,4I) vs N(0,I) should give √2"
        );
        Ok("self-distance, shift and scale".into())
    }));
    out.push(check("w2_vs_gaussian_sample", || {
        let mut rng = SeedSpec::new(seed, 22).rng();
        let g = GaussianTarget::isotropic(VecD::from_element(1, 1.5), 0.25)?;
        let xs: Vec<f64> = (0..100_000).map(|_| g.sample(&mut rng)[0]).collect();
        let own = w2_1d_vs_gaussian(&xs, 1.5, 0.5)?;
        let shifted = w2_1d_vs_gaussian(&xs, 1.8, 0.5)?;
        ensure!(own < 0.01, "own-law distance {own}");
        ensure!((shifted - 0.3).abs() < 0.01, "shifted distance {shifted}");
        Ok(format!("own {own:.4}, shifted {shifted:.4}"))
    }));
    out.push(check("sliced_w2_shift", || {
        let mut rng = SeedSpec::new(seed, 23).rng();
        let a: Vec<VecD> = (0..4000)
            .map(|_| VecD::from_vec(vec![rng.random(), rng.random()]))
            .collect();
        let b: Vec<VecD> = a
            .iter()
            .map(|x| x + VecD::from_vec(vec![0.8, 0.0]))
            .collect();
        let s = sliced_w2(&a, &b, 2000, SeedSpec::new(seed, 24))?;
        let want = 0.8 / 2f64.sqrt();
        ensure!((s - want).abs() < 0.01, "sliced W2 {s}, expected {want}");
        Ok(format!("{s:.4} vs c/√2 = {want:.4}"))
    }));
    out.push(check("fit_order_recovers_power", || {
        let h = [0.4_f64, 0.2, 0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|h| 3.0 * h.powf(1.5) + 1e-9).collect();
        let fit = fit_order(&h, &e, 1e-9)?;
        ensure!((fit.slope - 1.5).abs() < 1e-3, "slope {}", fit.slope);
        let lf = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0])?;
        ensure!(
            (lf.slope - 2.0).abs() < 1e-12 && (lf.r2 - 1.0).abs() < 1e-12,
            "{lf:?}"
        );
        Ok(format!("slope {:.4}", fit.slope))
    }));
}

fn brute_force_w2(a: &[f64], b: &[f64]) -> f64 {
    fn permute(k: usize, p: &mut Vec<usize>, a: &[f64], b: &[f64], best: &mut f64) {
        if k == p.len() {
            let c: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| (a[i] - b[j]).powi(2))
                .sum();
            *best = best.min(c);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(k + 1, p, a, b, best);
            p.swap(k, i);
        }
    }
    let mut p: Vec<usize> = (0..a.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut p, a, b, &mut best);
    (best / a.len() as f64).sqrt()
}

fn sampler_checks(out: &mut Vec<Check>, seed: u64) {
    let oracle = GaussianOracle::new(GaussianTarget::standard(2));
    for (name, scheme) in [
        ("stationary_em", SchemeKind::Em),
        ("stationary_ei", SchemeKind::Ei),
        ("stationary_rem", SchemeKind::Rem),
        ("stationary_rei", SchemeKind::Rei),
        ("stationary_so", SchemeKind::So),
    ] {
        out.push(check(name, || {
            let grid = TimeGrid::new(5.0, 0.05)?;
            let n = 20_000;
            let res = run_batch(scheme, &oracle, &grid, n, SeedSpec::new(seed, 31))?;
            let mut worst_mean: f64 = 0.0;
            let mut worst_var: f64 = 0.0;
            for k in 0..2 {
                let xs = res.coordinate(k);
                let m = xs.iter().sum::<f64>() / n as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                worst_mean = worst_mean.max(m.abs());
                worst_var = worst_var.max((v - 1.0).abs());
            }
            ensure!(worst_mean <= 0.05, "|mean| {worst_mean:.4} > 0.05");
            ensure!(worst_var <= 0.06, "|var − 1| {worst_var:.4} > 0.06");
            Ok(format!(
                "|mean| ≤ {worst_mean:.4}, |var − 1| ≤ {worst_var:.4}"
            ))
        }));
    }
    out.push(check("pushforward_matches_chains", || {
        let target = GaussianTarget::isotropic(VecD::from_element(2, 2.0), 0.25)?;
        let oracle = GaussianOracle::new(target.clone());
        let grid = TimeGrid::new(3.0, 0.2)?;
        for scheme in [SchemeKind::Em, SchemeKind::Ei, SchemeKind::So] {
            let law = gaussian_pushforward_exact(scheme, &target, &grid)?;
            let res = run_batch(scheme, &oracle, &grid, 20_000, SeedSpec::new(seed, 32))?;
            let xs = res.coordinate(0);
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = law.cov[(0, 0)].sqrt();
            ensure!(
                (m - law.mean[0]).abs() < 5.0 * sd / (xs.len() as f64).sqrt(),
                "{scheme}: mean {m} vs {}",
                law.mean[0]
            );
            let w2 = w2_1d_vs_gaussian(&xs, law.mean[0], sd)?;
            ensure!(w2 < 0.02, "{scheme}: W2 to exact law {w2}");
        }
        Ok("EM, EI, SO chain output matches the exact law".into())
    }));
    out.push(check("determinism", || {
        let grid = TimeGrid::new(2.0, 0.1)?;
        for scheme in SchemeKind::ALL {
            let a = run_batch(scheme, &oracle, &grid, 100, SeedSpec::new(seed, 33))?;
            let b = run_batch(scheme, &oracle, &grid, 100, SeedSpec::new(seed, 33))?;
            ensure!(
                a.finals == b.finals,
                "{scheme} differs between identical runs"
            );
        }
        Ok("identical seeds, identical output".into())
    }));
    out.push(check("time_grid_floor", || {
        for (t, h, n) in [
            (10.0, 0.4, 25),
            (10.0, 0.025, 400),
            (10.0, 0.3, 33),
            (1.0, 0.7, 1),
        ] {
            let g = TimeGrid::new(t, h)?;
            ensure!(
                g.steps() == n,
                "T = {t}, h = {h}: N = {}, expected {n}",
                g.steps()
            );
        }
        Ok("N = floor(T/h)".into())
    }));
}

fn bound_checks(out: &mut Vec<Check>) {
    out.push(check("bound_constants", || {
        let rc = RegularityConstants::new(1.0, 1.0)?;
        let inp = BoundInputs::new(2, 0.1, 10.0);
        let em = theorem_bound(SchemeKind::Em, &rc, &inp)?;
        let ei = theorem_bound(SchemeKind::Ei, &rc, &inp)?;
        ensure!(
            (em.c1 - 5.0).abs() < 1e-12 && (em.c2 - 2.0).abs() < 1e-12,
            "EM: C1 = {}, C2 = {}",
            em.c1,
            em.c2
        );
        ensure!((ei.c1 - 4.0).abs() < 1e-12, "EI: C1 = {}", ei.c1);
        Ok("EM (5, 2), EI C1 = 4".into())
    }));
    out.push(check("vacuous_bound_rejected", || {
        let rc = RegularityConstants::new(0.4, 1.0)?;
        match theorem_bound(SchemeKind::Em, &rc, &BoundInputs::new(2, 0.1, 10.0)) {
            Err(Error::VacuousBound { .. }) => Ok("m0 = 0.4 rejected".into()),
            other => anyhow::bail!("expected a vacuous-bound error, got {other:?}"),
        }
    }));
    out.push(check("regularity_lemmas", || {
        for (m0, l0) in [(0.3, 0.5), (1.0, 1.0), (4.0, 10.0)] {
            for k in 0..=200 {
                let t = k as f64 * 0.05;
                let m = convexity_m(t, m0)?;
                let l = lipschitz_l(t, l0)?;
                ensure!(
                    m >= m0.min(1.0) - 1e-12 && m <= m0.max(1.0) + 1e-12,
                    "m({t}) = {m}"
                );
                ensure!(l <= 1.0 + l0 + 1e-12 && l >= 0.0, "L({t}) = {l}");
            }
        }
        Ok("m(t) between m0 and 1, L(t) ≤ 1 + L0".into())
    }));
}

fn target_checks(out: &mut Vec<Check>, seed: u64) {
    out.push(check("logistic_gradient", || {
        let ds = generate_dataset(
            100,
            2,
            100.0,
            &default_theta_star(2),
            SeedSpec::new(seed, 41),
        )?;
        let post = LogisticPosterior::new(ds, 10.0)?;
        let theta = VecD::from_vec(vec![0.3, -0.2]);
        let g = post.grad_log_density(&theta);
        let hess = post.hess_log_density(&theta);
        let eps = 1e-6;
        for k in 0..2 {
            let mut e = VecD::zeros(2);
            e[k] = eps;
            let fd =
                (post.log_density(&(&theta + &e)) - post.log_density(&(&theta - &e))) / (2.0 * eps);
            ensure!(
                (fd - g[k]).abs() < 1e-5 * g[k].abs().max(1.0),
                "∂{k}: {fd} vs {}",
                g[k]
            );
            let fd_h = (post.grad_log_density(&(&theta + &e))
                - post.grad_log_density(&(&theta - &e)))
                / (2.0 * eps);
            ensure!(
                (fd_h - hess.column(k)).amax() < 1e-4 * hess.amax(),
                "Hessian column {k}"
            );
        }
        Ok("gradient and Hessian match finite differences".into())
    }));
    out.push(check("mala_gaussian_moments", || {
        let g = GaussianTarget::isotropic(VecD::from_vec(vec![1.0, -1.0]), 0.5)?;
        let cfg = MalaConfig {
            step: 0.1,
            burn_in: 2000,
            thinning: 5,
            n_samples: 20_000,
        };
        let out = mala_reference_sampler(&g, &cfg, SeedSpec::new(seed, 42))?;
        ensure!(
            (0.3..0.8).contains(&out.acceptance_rate),
            "acceptance {}",
            out.acceptance_rate
        );
        for k in 0..2 {
            let xs: Vec<f64> = out.samples.iter().map(|x| x[k]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            ensure!((m - g.mean()[k]).abs() < 0.04, "mean {m}");
            ensure!((v - 0.5).abs() < 0.05, "variance {v}");
        }
        Ok(format!("acceptance {:.3}", out.acceptance_rate))
    }));
}

/// φ, ρ, oracle and Wasserstein checks only: the fast identity suites.
pub fn identity_suites(seed: u64) -> SelfTestReport {
    SelfTestReport {
        checks: identity_checks(seed, phi_functions),
    }
}

fn identity_checks(seed: u64, phi: PhiFn) -> Vec<Check> {
    let mut checks = vec![
        phi1_identity_check(phi),
        phi2_identity_check(phi),
        phi_limit_check(phi),
    ];
    rho_checks(&mut checks);
    oracle_checks(&mut checks, seed);
    metric_checks(&mut checks, seed);
    checks
}

/// Runs every check with the library φ-functions.
pub fn run(seed: u64) -> SelfTestReport {
    run_with_phi(seed, phi_functions)
}

/// As [`run`], with the φ-identity checks applied to `phi`.
pub fn run_with_phi(seed: u64, phi: PhiFn) -> SelfTestReport {
    let mut checks = identity_checks(seed, phi);
    sampler_checks(&mut checks, seed);
    bound_checks(&mut checks);
    target_checks(&mut checks, seed);
    SelfTestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi2_without_minus_z(z: f64) -> (f64, f64) {
        let (p1, p2) = phi_functions(z);
        if z.abs() < 1e-4 {
            (p1, p2)
        } else {
            (p1, z.exp_m1() / (z * z))
        }
    }

    #[test]
    fn phi_checks_pass_for_library_functions() {
        assert!(phi1_identity_check(phi_functions).passed);
        assert!(phi2_identity_check(phi_functions).passed);
        assert!(phi_limit_check(phi_functions).passed);
    }

    #[test]
    fn dropping_minus_z_from_phi2_fails_its_identity() {
        let c = phi2_identity_check(phi2_without_minus_z);
        assert!(!c.passed, "{c:?}");
        assert!(phi1_identity_check(phi2_without_minus_z).passed);
    }

    #[test]
    fn brute_force_oracle_examples() {
        assert_eq!(brute_force_w2(&[0.0, 1.0], &[1.0, 0.0]), 0.0);
        assert!((brute_force_w2(&[0.0, 2.0], &[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_table_lists_every_check() {
        let r = SelfTestReport {
            checks: vec![
                check("ok", || Ok("fine".into())),
                check("bad", || anyhow::bail!("broken")),
            ],
        };
        assert!(!r.all_passed());
        assert_eq!(r.failures().count(), 1);
        let t = r.table();
        assert!(t.contains("PASS") && t.contains("FAIL") && t.contains("broken"));
        assert!(t.contains("1/2 checks passed"));
    }
}
