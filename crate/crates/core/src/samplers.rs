//! Backward-process step kernels and the batch chain runner.
//!
//! Every kernel advances `ϑ_n → ϑ_{n+1}` for the backward SDE
//! `dX = (X/2 + ∇log p_{T−t}(X)) dt + dW`, started from
//! `p̂_T = N(0, (1 − e^{−T}) I)`. The `*_update` functions are the pure
//! update formulas with all randomness passed in; the `step_*` functions
//! draw that randomness from the trajectory stream in a fixed order and call
//! the oracle.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    add_scaled_normals, phi1, phi_functions, standard_normal_vec, MatD, SeedSpec, SimRng,
    SymmetricSpectrum, TimeGrid, VecD,
};
use crate::oracles::{EvalContext, Linearization, ScoreOracle};
use crate::targets::GaussianTarget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    /// Euler–Maruyama.
    Em,
    /// Exponential integrator.
    Ei,
    /// Randomized midpoint.
    Rem,
    /// Randomized midpoint with exponential integrator.
    Rei,
    /// Second-order local linearization.
    So,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [Self::Em, Self::Ei, Self::Rem, Self::Rei, Self::So];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Em => "EM",
            Self::Ei => "EI",
            Self::Rem => "REM",
            Self::Rei => "REI",
            Self::So => "SO",
        }
    }

    pub fn needs_linearization(&self) -> bool {
        matches!(self, Self::So)
    }

    /// Oracle evaluations per step.
    pub fn evals_per_step(&self) -> u64 {
        match self {
            Self::Rem | Self::Rei => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EM" => Ok(Self::Em),
            "EI" => Ok(Self::Ei),
            "REM" => Ok(Self::Rem),
            "REI" => Ok(Self::Rei),
            "SO" => Ok(Self::So),
            other => Err(Error::InvalidArgument(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Random stream and oracle context owned by one trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub rng: SimRng,
    pub ctx: EvalContext,
}

impl Trajectory {
    /// Trajectory `index` of a batch seeded with `master_seed`.
    pub fn new(master_seed: u64, index: u64) -> Self {
        Self {
            rng: SeedSpec::new(master_seed, index).rng(),
            ctx: EvalContext::new(index),
        }
    }
}

/// Smallest midpoint fraction used by the REI kernel; its noise coupling is 0/0 at `U = 0`.
pub const REI_U_MIN: f64 = 1e-8;

/// Draw from `p̂_T = N(0, (1 − e^{−T}) I)`.
pub fn init_from_hat_pt<R: Rng + ?Sized>(horizon: f64, d: usize, rng: &mut R) -> VecD {
    standard_normal_vec(d, rng) * (-(-horizon).exp_m1()).sqrt()
}

/// `ϑ' = (1 + h/2) ϑ + h s + √h ξ`.
pub fn em_update(theta: &VecD, score: &VecD, h: f64, xi: &VecD) -> VecD {
    combine(theta, 1.0 + 0.5 * h, score, h, xi, h.sqrt())
}

/// `a·x + b·y + c·z` with one allocation.
fn combine(x: &VecD, a: f64, y: &VecD, b: f64, z: &VecD, c: f64) -> VecD {
    let mut out = x * a;
    out.axpy(b, y, 1.0);
    out.axpy(c, z, 1.0);
    out
}

/// `ϑ' = e^{h/2} ϑ + 2(e^{h/2} − 1) s + √(e^h − 1) ξ`.
pub fn ei_update(theta: &VecD, score: &VecD, h: f64, xi: &VecD) -> VecD {
    combine(
        theta,
        (0.5 * h).exp(),
        score,
        2.0 * (0.5 * h).exp_m1(),
        xi,
        h.exp_m1().sqrt(),
    )
}

/// Randomized-midpoint intermediate state `ϑ + hU(ϑ/2 + s) + √(hU) ξ'`.
pub fn rem_midpoint(theta: &VecD, score: &VecD, h: f64, u: f64, xi_mid: &VecD) -> VecD {
    let hu = h * u;
    combine(theta, 1.0 + 0.5 * hu, score, hu, xi_mid, hu.sqrt())
}

/// Randomized-midpoint full step `ϑ + h(ϑ_mid/2 + s_mid) + √h ξ` with the
/// coupled noise `ξ = √U ξ' + √(1 − U) ξ''`.
pub fn rem_update(
    theta: &VecD,
    midpoint: &VecD,
    score_mid: &VecD,
    h: f64,
    u: f64,
    xi_mid: &VecD,
    xi_indep: &VecD,
) -> VecD {
    let mut out = combine(midpoint, 0.5 * h, score_mid, h, xi_mid, (h * u).sqrt());
    out.axpy(1.0, theta, 1.0);
    out.axpy((h * (1.0 - u)).sqrt(), xi_indep, 1.0);
    out
}

pub fn rem_noise(u: f64, xi_mid: &VecD, xi_indep: &VecD) -> VecD {
    let mut out = xi_mid * u.sqrt();
    out.axpy((1.0 - u).sqrt(), xi_indep, 1.0);
    out
}

/// Correlation `ρ` between the REI midpoint noise and the full-step noise,
/// together with the complementary coefficient `√(1 − ρ²)`.
///
/// `ρ² = 1 − expm1(h(1 − U)) / expm1(h)`, evaluated without cancellation.
pub fn rei_coupling(h: f64, u: f64) -> (f64, f64) {
    let c = ReiCoefficients::new(h, u);
    (c.rho, c.comp)
}

/// Step coefficients of the REI kernel. Full-interval exponentials come
/// from half-interval ones via `e^{2x} − 1 = e (e + 2)` with `e = expm1(x)`.
struct ReiCoefficients {
    rho: f64,
    comp: f64,
    /// `expm1((1 − U) h / 2)`
    rest: f64,
    em1_h: f64,
}

impl ReiCoefficients {
    fn new(h: f64, u: f64) -> Self {
        let em1_h = h.exp_m1();
        let mid = (0.5 * h * u).exp_m1();
        let rest = (0.5 * h * (1.0 - u)).exp_m1();
        Self {
            rho: (1.0 + rest) * (mid * (mid + 2.0) / em1_h).sqrt(),
            comp: (rest * (rest + 2.0) / em1_h).sqrt(),
            rest,
            em1_h,
        }
    }
}

pub fn rei_rho(h: f64, u: f64) -> f64 {
    rei_coupling(h, u).0
}

/// `e^{hU/2} ϑ + 2(e^{hU/2} − 1) s + √(e^{hU} − 1) ξ'`.
pub fn rei_midpoint(theta: &VecD, score: &VecD, h: f64, u: f64, xi_mid: &VecD) -> VecD {
    let hu = h * u;
    combine(
        theta,
        (0.5 * hu).exp(),
        score,
        2.0 * (0.5 * hu).exp_m1(),
        xi_mid,
        hu.exp_m1().sqrt(),
    )
}

/// `e^{h/2} ϑ + h e^{(1−U)h/2} s_mid + √(e^h − 1) (ρ ξ' + √(1 − ρ²) ξ'')`.
pub fn rei_update(
    theta: &VecD,
    score_mid: &VecD,
    h: f64,
    u: f64,
    xi_mid: &VecD,
    xi_indep: &VecD,
) -> VecD {
    let c = ReiCoefficients::new(h, u);
    let scale = c.em1_h.sqrt();
    let mut out = combine(
        theta,
        (0.5 * h).exp(),
        score_mid,
        h * (1.0 + c.rest),
        xi_mid,
        scale * c.rho,
    );
    out.axpy(scale * c.comp, xi_indep, 1.0);
    out
}

/// Deterministic part of the second-order step,
/// `ϑ + h φ₁(Lh)(ϑ/2 + s) + h² φ₂(Lh) M`.
pub fn so_drift(theta: &VecD, lin: &Linearization, h: f64) -> Result<VecD> {
    so_step_eigen(theta, lin, h, None)
}

/// Full second-order step with standard normal input `z`; the noise is
/// `C^{1/2} z` for `C = ∫₀ʰ e^{2Lr} dr = h φ₁(2Lh)`.
pub fn so_update(theta: &VecD, lin: &Linearization, h: f64, z: &VecD) -> Result<VecD> {
    so_step_eigen(theta, lin, h, Some(z))
}

/// Both matrix functions of `L` and the symmetric square root of the noise
/// covariance share one eigendecomposition `L = Q Λ Qᵀ`; the update is
/// accumulated in that basis and mapped back once.
fn so_step_eigen(theta: &VecD, lin: &Linearization, h: f64, z: Option<&VecD>) -> Result<VecD> {
    let spectrum = SymmetricSpectrum::new(&lin.l)?;
    let q = &spectrum.eigenvectors;
    let mut coeffs = VecD::zeros(theta.len());
    for (i, c) in coeffs.iter_mut().enumerate() {
        let qi = q.column(i);
        let lambda = spectrum.eigenvalues[i];
        let (f1, f2) = phi_functions(lambda * h);
        let drift = 0.5 * qi.dot(theta) + qi.dot(&lin.score);
        *c = h * f1 * drift + h * h * f2 * qi.dot(&lin.m);
        if let Some(z) = z {
            *c += (h * phi1(2.0 * lambda * h)).sqrt() * qi.dot(z);
        }
    }
    let mut out = theta.clone();
    out.gemv(1.0, q, &coeffs, 1.0);
    Ok(out)
}

pub fn step_em<O: ScoreOracle + ?Sized>(
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    let h = grid.step();
    let s = oracle.score(grid.forward_time(n, 0.0), theta, &mut traj.ctx)?;
    let mut out = theta * (1.0 + 0.5 * h);
    out.axpy(h, &s, 1.0);
    add_scaled_normals(&mut out, h.sqrt(), &mut traj.rng);
    Ok(out)
}

pub fn step_ei<O: ScoreOracle + ?Sized>(
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    let h = grid.step();
    let s = oracle.score(grid.forward_time(n, 0.0), theta, &mut traj.ctx)?;
    let mut out = theta * (0.5 * h).exp();
    out.axpy(2.0 * (0.5 * h).exp_m1(), &s, 1.0);
    add_scaled_normals(&mut out, h.exp_m1().sqrt(), &mut traj.rng);
    Ok(out)
}

/// Draw order: `U`, then `ξ'`, then `ξ''`.
fn midpoint_draws(d: usize, rng: &mut SimRng) -> (f64, VecD, VecD) {
    let u: f64 = rng.random();
    let xi_mid = standard_normal_vec(d, rng);
    let xi_indep = standard_normal_vec(d, rng);
    (u, xi_mid, xi_indep)
}

pub fn step_rem<O: ScoreOracle + ?Sized>(
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    let h = grid.step();
    let (u, xi_mid, xi_indep) = midpoint_draws(theta.len(), &mut traj.rng);
    let s = oracle.score(grid.forward_time(n, 0.0), theta, &mut traj.ctx)?;
    let mid = rem_midpoint(theta, &s, h, u, &xi_mid);
    let s_mid = oracle.score(grid.forward_time(n, u), &mid, &mut traj.ctx)?;
    Ok(rem_update(theta, &mid, &s_mid, h, u, &xi_mid, &xi_indep))
}

pub fn step_rei<O: ScoreOracle + ?Sized>(
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    let h = grid.step();
    let (u, xi_mid, xi_indep) = midpoint_draws(theta.len(), &mut traj.rng);
    let u = u.max(REI_U_MIN);
    let s = oracle.score(grid.forward_time(n, 0.0), theta, &mut traj.ctx)?;
    let mid = rei_midpoint(theta, &s, h, u, &xi_mid);
    let s_mid = oracle.score(grid.forward_time(n, u), &mid, &mut traj.ctx)?;
    Ok(rei_update(theta, &s_mid, h, u, &xi_mid, &xi_indep))
}

pub fn step_so<O: ScoreOracle + ?Sized>(
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    if !oracle.capabilities().has_m_term {
        return Err(Error::MissingCapability("linearization"));
    }
    let lin = oracle.linearization(grid.forward_time(n, 0.0), theta, &mut traj.ctx)?;
    let z = standard_normal_vec(theta.len(), &mut traj.rng);
    so_update(theta, &lin, grid.step(), &z)
}

pub fn step<O: ScoreOracle + ?Sized>(
    scheme: SchemeKind,
    theta: &VecD,
    n: usize,
    grid: &TimeGrid,
    oracle: &O,
    traj: &mut Trajectory,
) -> Result<VecD> {
    match scheme {
        SchemeKind::Em => step_em(theta, n, grid, oracle, traj),
        SchemeKind::Ei => step_ei(theta, n, grid, oracle, traj),
        SchemeKind::Rem => step_rem(theta, n, grid, oracle, traj),
        SchemeKind::Rei => step_rei(theta, n, grid, oracle, traj),
        SchemeKind::So => step_so(theta, n, grid, oracle, traj),
    }
}

/// Final states of a batch of independent chains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub finals: Vec<VecD>,
    pub scheme: SchemeKind,
    pub grid: TimeGrid,
    pub seed: SeedSpec,
    pub steps_run: usize,
    pub wall_ms: f64,
    pub oracle_calls: u64,
}

impl ChainResult {
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.finals.iter().map(|x| x[j]).collect()
    }
}

/// Runs one chain for the first `steps` steps of `grid`.
pub fn run_chain<O: ScoreOracle + ?Sized>(
    scheme: SchemeKind,
    oracle: &O,
    grid: &TimeGrid,
    steps: usize,
    traj: &mut Trajectory,
) -> Result<VecD> {
    let mut theta = init_from_hat_pt(grid.horizon(), oracle.dim(), &mut traj.rng);
    for n in 0..steps {
        theta = step(scheme, &theta, n, grid, oracle, traj)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{scheme} state at step {} of trajectory {}",
                n + 1,
                traj.ctx.stream
            )));
        }
    }
    Ok(theta)
}

/// `n_traj` independent chains through all `N` steps of `grid`. Trajectory
/// `j` draws from stream `j` of `seed.master_seed`; output order is by
/// trajectory index and does not depend on the rayon thread count.
pub fn run_batch<O: ScoreOracle + ?Sized>(
    scheme: SchemeKind,
    oracle: &O,
    grid: &TimeGrid,
    n_traj: usize,
    seed: SeedSpec,
) -> Result<ChainResult> {
    run_batch_steps(scheme, oracle, grid, grid.steps(), n_traj, seed)
}

/// [`run_batch`] truncated after `steps` steps (`0 ≤ steps ≤ N`).
pub fn run_batch_steps<O: ScoreOracle + ?Sized>(
    scheme: SchemeKind,
    oracle: &O,
    grid: &TimeGrid,
    steps: usize,
    n_traj: usize,
    seed: SeedSpec,
) -> Result<ChainResult> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be at least 1".into()));
    }
    if steps > grid.steps() {
        return Err(Error::InvalidArgument(format!(
            "asked for {steps} steps on a {}-step grid",
            grid.steps()
        )));
    }
    if scheme.needs_linearization() && !oracle.capabilities().has_m_term {
        return Err(Error::MissingCapability("linearization"));
    }
    let start = Instant::now();
    let outcomes: Vec<(Result<VecD>, u64)> = (0..n_traj as u64)
        .into_par_iter()
        .map(|j| {
            let mut traj = Trajectory::new(seed.master_seed, j);
            let out = run_chain(scheme, oracle, grid, steps, &mut traj);
            (out, traj.ctx.calls)
        })
        .collect();

    let mut finals = Vec::with_capacity(n_traj);
    let mut oracle_calls = 0;
    let mut failed = 0;
    let mut first = None;
    for (out, calls) in outcomes {
        oracle_calls += calls;
        match out {
            Ok(x) => finals.push(x),
            Err(e) => {
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    if let Some(first) = first {
        return Err(Error::BatchFailed {
            failed,
            total: n_traj,
            first: Box::new(first),
        });
    }
    Ok(ChainResult {
        finals,
        scheme,
        grid: *grid,
        seed,
        steps_run: steps,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        oracle_calls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: VecD,
    pub cov: MatD,
}

impl GaussianLaw {
    pub fn new(mean: VecD, cov: MatD) -> Self {
        Self { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Exact law of `ϑ_N` for EM, EI and SO run with the analytic oracle of a
/// Gaussian target. Every score is affine in the state, so each step maps a
/// Gaussian to a Gaussian; the recursion runs coordinatewise in the
/// eigenbasis of the target covariance, where all step matrices are diagonal.
pub fn gaussian_pushforward_exact(
    scheme: SchemeKind,
    target: &GaussianTarget,
    grid: &TimeGrid,
) -> Result<GaussianLaw> {
    gaussian_pushforward_steps(scheme, target, grid, grid.steps())
}

/// [`gaussian_pushforward_exact`] after only the first `steps` steps.
pub fn gaussian_pushforward_steps(
    scheme: SchemeKind,
    target: &GaussianTarget,
    grid: &TimeGrid,
    steps: usize,
) -> Result<GaussianLaw> {
    if matches!(scheme, SchemeKind::Rem | SchemeKind::Rei) {
        return Err(Error::InvalidArgument(format!(
            "{scheme} output is a Gaussian mixture; no closed-form law"
        )));
    }
    if steps > grid.steps() {
        return Err(Error::InvalidArgument(
            "more steps than the grid holds".into(),
        ));
    }
    let h = grid.step();
    let spectrum = target.spectrum();
    let q = &spectrum.eigenvectors;
    let mean_eig = q.tr_mul(target.mean());
    let d = mean_eig.len();

    let mut mean = vec![0.0; d];
    let mut var = vec![-(-grid.horizon()).exp_m1(); d];
    for n in 0..steps {
        let t = grid.forward_time(n, 0.0);
        let decay = (-t).exp();
        let fill = -(-t).exp_m1();
        for i in 0..d {
            let p = 1.0 / (decay * spectrum.eigenvalues[i] + fill);
            let mu_t = (-0.5 * t).exp() * mean_eig[i];
            // ϑ' = a ϑ + b + √q ξ
            let (a, b, q_noise) = match scheme {
                SchemeKind::Em => (1.0 + 0.5 * h - h * p, h * p * mu_t, h),
                SchemeKind::Ei => {
                    let c = 2.0 * (0.5 * h).exp_m1();
                    ((0.5 * h).exp() - c * p, c * p * mu_t, h.exp_m1())
                }
                SchemeKind::So => {
                    let ell = 0.5 - p;
                    let (f1, f2) = phi_functions(ell * h);
                    let lin = h * f1;
                    let quad = h * h * f2;
                    (
                        1.0 + lin * (0.5 - p) + quad * (p - p * p),
                        lin * p * mu_t + quad * (p * p - 0.5 * p) * mu_t,
                        h * phi_functions(2.0 * ell * h).0,
                    )
                }
                SchemeKind::Rem | SchemeKind::Rei => unreachable!(),
            };
            mean[i] = a * mean[i] + b;
            var[i] = a * a * var[i] + q_noise;
        }
    }
    let mean = q * VecD::from_vec(mean);
    let mut scaled = q.clone();
    for (j, v) in var.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*v);
    }
    let cov = scaled * q.transpose();
    Ok(GaussianLaw {
        mean,
        cov: 0.5 * (&cov + cov.transpose()),
    })
}
