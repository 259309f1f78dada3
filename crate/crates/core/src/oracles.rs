//! Score oracles for the forward Ornstein–Uhlenbeck marginals `p_t`.
//!
//! The forward process `dX = −X/2 dt + dW` has transition kernel
//! `N(e^{−t/2} x₀, (1 − e^{−t}) I)`. Gaussian targets therefore have Gaussian
//! marginals with closed-form derivatives ([`GaussianOracle`]); any other
//! target is handled by self-normalized importance weighting of reference
//! particles drawn from `p₀` ([`McOracle`]). [`CorruptedOracle`] adds
//! perturbations of prescribed norm to model score-estimation error.
//!
//! Times passed to an oracle are forward-process times: the backward chain at
//! step `n` queries `t = T − n h`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    exp_nonpositive, random_unit_vec, standard_normal_vec, MatD, SeedSpec, VecD,
};
use crate::targets::GaussianTarget;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub has_hessian: bool,
    pub has_m_term: bool,
}

/// Per-trajectory evaluation context. Leaf oracles bump `calls` once per
/// evaluation; `(stream, calls)` keys any randomness an oracle needs, so
/// concurrent trajectories must use distinct streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalContext {
    pub stream: u64,
    pub calls: u64,
}

impl EvalContext {
    pub fn new(stream: u64) -> Self {
        Self { stream, calls: 0 }
    }
}

/// Score plus the local-linearization terms `L = I/2 + ∇² log p` and
/// `M = ½ Σ_j ∂²_j ∇log p − ∂_t ∇log p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub score: VecD,
    pub l: MatD,
    pub m: VecD,
}

impl Linearization {
    /// Builds `L` and `M` from the score `s` and Hessian `H` at `x`.
    ///
    /// Along the OU flow, `∂_t ∇log p = s/2 + Hx/2 + ½∇tr H + Hs`, and
    /// `∇tr H = Σ_j ∂²_j ∇log p`, so the third-derivative terms cancel in
    /// `M` and leave `M = −s/2 − Hx/2 − Hs`.
    pub fn from_score_hessian(x: &VecD, score: VecD, hessian: MatD) -> Self {
        let mut half_x_plus_s = x * 0.5;
        half_x_plus_s += &score;
        let mut m = &hessian * half_x_plus_s;
        m.neg_mut();
        m.axpy(-0.5, &score, 1.0);
        let mut l = hessian;
        for i in 0..x.len() {
            l[(i, i)] += 0.5;
        }
        Self { score, l, m }
    }
}

/// Evaluator of `∇log p_t` and optionally its Hessian and the `M` term.
pub trait ScoreOracle: Send + Sync {
    fn dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD>;

    fn score_hessian(&self, _t: f64, _x: &VecD, _ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        Err(Error::MissingCapability("hessian"))
    }

    fn linearization(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<Linearization> {
        if !self.capabilities().has_m_term {
            return Err(Error::MissingCapability("linearization"));
        }
        let (s, h) = self.score_hessian(t, x, ctx)?;
        Ok(Linearization::from_score_hessian(x, s, h))
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD> {
        (**self).score(t, x, ctx)
    }
    fn score_hessian(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        (**self).score_hessian(t, x, ctx)
    }
    fn linearization(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<Linearization> {
        (**self).linearization(t, x, ctx)
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for Arc<O> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD> {
        (**self).score(t, x, ctx)
    }
    fn score_hessian(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        (**self).score_hessian(t, x, ctx)
    }
    fn linearization(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<Linearization> {
        (**self).linearization(t, x, ctx)
    }
}

/// `(L, M)` at `(t, x)` from the oracle's score and Hessian.
pub fn linearization_terms<O: ScoreOracle + ?Sized>(
    oracle: &O,
    t: f64,
    x: &VecD,
    ctx: &mut EvalContext,
) -> Result<(MatD, VecD)> {
    if !oracle.capabilities().has_hessian {
        return Err(Error::MissingCapability("hessian"));
    }
    let (s, h) = oracle.score_hessian(t, x, ctx)?;
    let lin = Linearization::from_score_hessian(x, s, h);
    Ok((lin.l, lin.m))
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and non-negative, got {t}"
        )));
    }
    Ok(())
}

/// Law of `X_t` when `X_0 ~ target`: `N(e^{−t/2} μ, e^{−t} Σ + (1 − e^{−t}) I)`.
pub fn ou_marginal_gaussian(target: &GaussianTarget, t: f64) -> Result<GaussianTarget> {
    check_time(t)?;
    let d = target.mean().len();
    let decay = (-t).exp();
    let mean = target.mean() * (-0.5 * t).exp();
    let cov = target.cov() * decay + MatD::identity(d, d) * (-(-t).exp_m1());
    GaussianTarget::new(mean, cov)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDerivatives {
    pub score: VecD,
    pub hessian: MatD,
    pub dt_score: VecD,
}

/// Analytic oracle for a Gaussian target, evaluated in the eigenbasis of `Σ`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    target: GaussianTarget,
    mean_eig: VecD,
    /// Set when `Σ` is diagonal; the score is then evaluated coordinatewise.
    diagonal: Option<VecD>,
}

impl GaussianOracle {
    pub fn new(target: GaussianTarget) -> Self {
        let mean_eig = target.spectrum().eigenvectors.tr_mul(target.mean());
        let cov = target.cov();
        let is_diagonal =
            (0..cov.nrows()).all(|i| (0..cov.ncols()).all(|j| i == j || cov[(i, j)] == 0.0));
        let diagonal = is_diagonal.then(|| cov.diagonal());
        Self {
            target,
            mean_eig,
            diagonal,
        }
    }

    pub fn target(&self) -> &GaussianTarget {
        &self.target
    }

    fn marginal_variances(&self, t: f64) -> VecD {
        let decay = (-t).exp();
        let fill = -(-t).exp_m1();
        self.target.spectrum().eigenvalues.map(|l| decay * l + fill)
    }

    /// Centered state `Qᵀx − e^{−t/2} Qᵀμ`.
    fn centered(&self, t: f64, x: &VecD) -> VecD {
        let q = &self.target.spectrum().eigenvectors;
        q.tr_mul(x) - &self.mean_eig * (-0.5 * t).exp()
    }

    pub fn derivatives(&self, t: f64, x: &VecD) -> Result<MarginalDerivatives> {
        check_time(t)?;
        let q = &self.target.spectrum().eigenvectors;
        let lambdas = &self.target.spectrum().eigenvalues;
        let v = self.marginal_variances(t);
        let y = self.centered(t, x);
        let decay = (-t).exp();
        let a = (-0.5 * t).exp();

        let score_eig =
            VecD::from_iterator(v.len(), y.iter().zip(v.iter()).map(|(yi, vi)| -yi / vi));
        let dt_eig = VecD::from_iterator(
            v.len(),
            (0..v.len()).map(|i| {
                let dv = decay * (1.0 - lambdas[i]);
                -0.5 * a * self.mean_eig[i] / v[i] + y[i] * dv / (v[i] * v[i])
            }),
        );
        let mut scaled = q.clone();
        for (j, vj) in v.iter().enumerate() {
            scaled.column_mut(j).scale_mut(-1.0 / vj);
        }
        let hessian = scaled * q.transpose();
        Ok(MarginalDerivatives {
            score: q * score_eig,
            hessian: 0.5 * (&hessian + hessian.transpose()),
            dt_score: q * dt_eig,
        })
    }
}

/// Score, Hessian and time derivative of the score of `p_t` for a Gaussian `p₀`.
pub fn gaussian_marginal_derivatives(
    target: &GaussianTarget,
    t: f64,
    x: &VecD,
) -> Result<MarginalDerivatives> {
    GaussianOracle::new(target.clone()).derivatives(t, x)
}

impl ScoreOracle for GaussianOracle {
    fn dim(&self) -> usize {
        self.target.mean().len()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_hessian: true,
            has_m_term: true,
        }
    }

    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD> {
        check_time(t)?;
        ctx.calls += 1;
        Ok(self.score_at(MarginalScale::new(t), x))
    }

    fn score_hessian(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        check_time(t)?;
        ctx.calls += 1;
        let sc = MarginalScale::new(t);
        let hessian = self
            .target
            .spectrum()
            .map(|l| -1.0 / (sc.decay * l + sc.fill));
        Ok((self.score_at(sc, x), hessian))
    }
}

/// `e^{−t/2}`, `e^{−t}` and `1 − e^{−t}` at one forward time.
#[derive(Debug, Clone, Copy)]
struct MarginalScale {
    a: f64,
    decay: f64,
    fill: f64,
}

impl MarginalScale {
    fn new(t: f64) -> Self {
        let e = (-0.5 * t).exp_m1();
        let a = 1.0 + e;
        Self {
            a,
            decay: a * a,
            fill: -e * (e + 2.0),
        }
    }
}

impl GaussianOracle {
    fn score_at(&self, sc: MarginalScale, x: &VecD) -> VecD {
        let MarginalScale { a, decay, fill } = sc;
        if let Some(var) = &self.diagonal {
            let mu = self.target.mean();
            return VecD::from_fn(x.len(), |i, _| (a * mu[i] - x[i]) / (decay * var[i] + fill));
        }
        let spectrum = self.target.spectrum();
        let q = &spectrum.eigenvectors;
        let mut y = q.tr_mul(x);
        for i in 0..y.len() {
            let v = decay * spectrum.eigenvalues[i] + fill;
            y[i] = (a * self.mean_eig[i] - y[i]) / v;
        }
        q * y
    }
}

/// Smallest forward time the Monte-Carlo estimator accepts.
pub const MC_T_MIN: f64 = 1e-3;
/// Effective sample size below which Monte-Carlo estimates are rejected.
pub const MIN_EFFECTIVE_SAMPLE_SIZE: f64 = 10.0;

/// Reference draws `θ₀⁽ʲ⁾ ~ p₀`, stored coordinate-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    coords: Vec<f64>,
    dim: usize,
    len: usize,
}

/// Self-normalized Monte-Carlo estimate of the marginal score and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub score: VecD,
    pub hessian: Option<MatD>,
    pub ess: f64,
}

/// Softmax of log-weights via a single log-sum-exp shift.
pub fn normalized_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|wi| wi / total).collect()
}

const LANES: usize = 4;

#[inline(always)]
fn fold_lanes(acc: [f64; LANES], tail: f64) -> f64 {
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `Σ_j w_j (x − a p_j)`.
#[inline(always)]
fn lane_moment(w: &[f64], x: f64, a: f64, p: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (wc, pc) = (w.chunks_exact(LANES), p.chunks_exact(LANES));
    let (wr, pr) = (wc.remainder(), pc.remainder());
    for (wl, pl) in wc.zip(pc) {
        for l in 0..LANES {
            acc[l] = wl[l].mul_add((-a).mul_add(pl[l], x), acc[l]);
        }
    }
    let tail: f64 = wr
        .iter()
        .zip(pr)
        .map(|(w, p)| w * (-a).mul_add(*p, x))
        .sum();
    fold_lanes(acc, tail)
}

/// `Σ_j w_j (x − a p_j)(y − a q_j)`.
#[inline(always)]
fn lane_cross(w: &[f64], x: f64, y: f64, a: f64, p: &[f64], q: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (wc, pc, qc) = (
        w.chunks_exact(LANES),
        p.chunks_exact(LANES),
        q.chunks_exact(LANES),
    );
    let (wr, pr, qr) = (wc.remainder(), pc.remainder(), qc.remainder());
    for ((wl, pl), ql) in wc.zip(pc).zip(qc) {
        for l in 0..LANES {
            acc[l] = (wl[l] * (-a).mul_add(pl[l], x)).mul_add((-a).mul_add(ql[l], y), acc[l]);
        }
    }
    let tail: f64 = wr
        .iter()
        .zip(pr)
        .zip(qr)
        .map(|((w, p), q)| w * (-a).mul_add(*p, x) * (-a).mul_add(*q, y))
        .sum();
    fold_lanes(acc, tail)
}

/// `min_j v_j` of non-negative values; `+∞` for an empty slice. Non-negative
/// doubles order like their bit patterns, and integer minima vectorize.
#[inline(always)]
fn lane_min(v: &[f64]) -> f64 {
    let mut acc = [f64::INFINITY.to_bits(); LANES];
    let vc = v.chunks_exact(LANES);
    let tail = vc
        .remainder()
        .iter()
        .map(|x| x.to_bits())
        .fold(f64::INFINITY.to_bits(), u64::min);
    for vl in vc {
        for l in 0..LANES {
            acc[l] = acc[l].min(vl[l].to_bits());
        }
    }
    f64::from_bits(acc.into_iter().fold(tail, u64::min))
}

/// Kernel sums of one estimate: `Σw`, `Σw²`, `Σw r_k` and, on request,
/// `Σw r_i r_k` for `i ≤ k` (row-major upper triangle), with `r = x − a θ₀`.
#[derive(Debug, Clone, PartialEq)]
struct WeightedSums {
    sum_w: f64,
    sum_w2: f64,
    moment: Vec<f64>,
    cross: Vec<f64>,
}

/// `(Σ w, Σ w²)`.
#[inline(always)]
fn lane_mass(w: &[f64]) -> (f64, f64) {
    let mut s1 = [0.0; LANES];
    let mut s2 = [0.0; LANES];
    let wc = w.chunks_exact(LANES);
    let wr = wc.remainder();
    for wl in wc {
        for l in 0..LANES {
            s1[l] += wl[l];
            s2[l] = wl[l].mul_add(wl[l], s2[l]);
        }
    }
    (
        fold_lanes(s1, wr.iter().sum()),
        fold_lanes(s2, wr.iter().map(|v| v * v).sum()),
    )
}

impl ParticleSet {
    pub fn new(particles: &[VecD]) -> Result<Self> {
        let first = particles.first().ok_or(Error::EmptySample)?;
        let dim = first.len();
        let len = particles.len();
        let mut coords = vec![0.0; dim * len];
        for (j, p) in particles.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::InvalidArgument(
                    "particles of mixed dimension".into(),
                ));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("particle coordinates".into()));
            }
            for (k, v) in p.iter().enumerate() {
                coords[k * len + j] = *v;
            }
        }
        Ok(Self { coords, dim, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All particles' `k`-th coordinate.
    pub fn coordinate(&self, k: usize) -> &[f64] {
        &self.coords[k * self.len..(k + 1) * self.len]
    }

    pub fn particle(&self, j: usize) -> VecD {
        VecD::from_iterator(
            self.dim,
            (0..self.dim).map(|k| self.coords[k * self.len + j]),
        )
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for k in 0..self.dim {
            let c = self.coordinate(k);
            coords.extend(indices.iter().map(|&j| c[j]));
        }
        Self {
            coords,
            dim: self.dim,
            len: indices.len(),
        }
    }

    /// Estimates `∇log p_t(x)` (and `∇² log p_t(x)` when asked) by weighting
    /// each particle with the transition density `N(x; e^{−t/2}θ₀, (1 − e^{−t})I)`.
    pub fn estimate(&self, t: f64, x: &VecD, want_hessian: bool) -> Result<McEstimate> {
        if !(t >= MC_T_MIN && t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Monte-Carlo score needs t >= {MC_T_MIN}, got {t}"
            )));
        }
        let d = self.dim;
        if x.len() != d {
            return Err(Error::InvalidArgument(
                "query point has the wrong dimension".into(),
            ));
        }
        let a = (-0.5 * t).exp();
        let var = -(-t).exp_m1();
        let inv_two_var = 0.5 / var;

        let sums = self.weighted_sums(x.as_slice(), a, inv_two_var, want_hessian);
        let sum_w = sums.sum_w;
        let score = VecD::from_iterator(d, sums.moment.iter().map(|m| -m / (sum_w * var)));
        let hessian = want_hessian.then(|| {
            let mut h = MatD::zeros(d, d);
            let inv_var2 = 1.0 / (var * var);
            let mut cross = sums.cross.iter();
            for i in 0..d {
                for k in i..d {
                    let second = cross.next().expect("upper triangle") / sum_w * inv_var2;
                    let diag = if i == k { 1.0 / var } else { 0.0 };
                    let v = second - diag - score[i] * score[k];
                    h[(i, k)] = v;
                    h[(k, i)] = v;
                }
            }
            h
        });
        Ok(McEstimate {
            score,
            hessian,
            ess: sum_w * sum_w / sums.sum_w2,
        })
    }

    fn weighted_sums(&self, x: &[f64], a: f64, inv_two_var: f64, want_cross: bool) -> WeightedSums {
        #[cfg(target_arch = "x86_64")]
        {
            let fma = std::arch::is_x86_feature_detected!("fma");
            if fma && std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: AVX-512F and FMA support were just checked.
                return unsafe { self.weighted_sums_avx512(x, a, inv_two_var, want_cross) };
            }
            if fma && std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 and FMA support were just checked.
                return unsafe { self.weighted_sums_avx2(x, a, inv_two_var, want_cross) };
            }
        }
        self.weighted_sums_portable(x, a, inv_two_var, want_cross)
    }

    // Same operations in the same order as the portable path, only wider
    // registers and hardware FMA (the code uses explicit `mul_add`), so all
    // paths give bit-identical sums.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx512f,fma")]
    unsafe fn weighted_sums_avx512(
        &self,
        x: &[f64],
        a: f64,
        inv_two_var: f64,
        want_cross: bool,
    ) -> WeightedSums {
        self.weighted_sums_portable(x, a, inv_two_var, want_cross)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn weighted_sums_avx2(
        &self,
        x: &[f64],
        a: f64,
        inv_two_var: f64,
        want_cross: bool,
    ) -> WeightedSums {
        self.weighted_sums_portable(x, a, inv_two_var, want_cross)
    }

    #[inline(always)]
    fn weighted_sums_portable(
        &self,
        x: &[f64],
        a: f64,
        inv_two_var: f64,
        want_cross: bool,
    ) -> WeightedSums {
        let d = self.dim;
        let mut w = vec![0.0; self.len];
        for (k, &xk) in x.iter().enumerate() {
            for (wj, p) in w.iter_mut().zip(self.coordinate(k)) {
                let r = (-a).mul_add(*p, xk);
                *wj = r.mul_add(r, *wj);
            }
        }
        let min_sq = lane_min(&w);
        for wj in w.iter_mut() {
            *wj = exp_nonpositive((min_sq - *wj) * inv_two_var);
        }
        let (sum_w, sum_w2) = lane_mass(&w);
        // plain loops: closures would not inherit the caller's target features
        let mut moment = Vec::with_capacity(d);
        for (k, &xk) in x.iter().enumerate() {
            moment.push(lane_moment(&w, xk, a, self.coordinate(k)));
        }
        let mut cross = Vec::new();
        if want_cross {
            for i in 0..d {
                for k in i..d {
                    cross.push(lane_cross(
                        &w,
                        x[i],
                        x[k],
                        a,
                        self.coordinate(i),
                        self.coordinate(k),
                    ));
                }
            }
        }
        WeightedSums {
            sum_w,
            sum_w2,
            moment,
            cross,
        }
    }
}

/// Handling of estimates whose effective sample size is below
/// [`MIN_EFFECTIVE_SAMPLE_SIZE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowEssPolicy {
    #[default]
    Reject,
    /// Keep the estimate and count it; see [`McOracle::low_ess_count`].
    Accept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McOracleConfig {
    pub n_particles: usize,
    pub seed: SeedSpec,
    /// Bootstrap a fresh particle subset on every call instead of fixing one per run.
    pub resample_each_call: bool,
    pub low_ess: LowEssPolicy,
}

impl McOracleConfig {
    pub fn new(n_particles: usize, seed: SeedSpec) -> Self {
        Self {
            n_particles,
            seed,
            resample_each_call: false,
            low_ess: LowEssPolicy::Reject,
        }
    }

    pub fn accepting_low_ess(mut self) -> Self {
        self.low_ess = LowEssPolicy::Accept;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles < 100 {
            return Err(Error::InvalidArgument(format!(
                "need at least 100 particles, got {}",
                self.n_particles
            )));
        }
        Ok(())
    }
}

fn ess_checked(est: McEstimate, t: f64) -> Result<McEstimate> {
    if est.ess < MIN_EFFECTIVE_SAMPLE_SIZE || !est.ess.is_finite() {
        return Err(Error::LowEffectiveSampleSize {
            ess: est.ess,
            min_ess: MIN_EFFECTIVE_SAMPLE_SIZE,
            t,
        });
    }
    Ok(est)
}

/// Monte-Carlo score and Hessian of `p_t` at `x`, rejecting estimates whose
/// effective sample size falls below [`MIN_EFFECTIVE_SAMPLE_SIZE`].
pub fn mc_marginal_derivatives(
    particles: &ParticleSet,
    t: f64,
    x: &VecD,
    cfg: &McOracleConfig,
) -> Result<(VecD, MatD)> {
    cfg.validate()?;
    let est = ess_checked(particles.estimate(t, x, true)?, t)?;
    Ok((est.score, est.hessian.expect("hessian requested")))
}

/// Monte-Carlo oracle over a reference sample of `p₀`. Queries below
/// [`MC_T_MIN`] are evaluated at `MC_T_MIN`.
#[derive(Debug, Clone)]
pub struct McOracle {
    particles: ParticleSet,
    cfg: McOracleConfig,
    low_ess: Arc<AtomicU64>,
}

impl McOracle {
    /// Keeps a seed-determined subset of `n_particles` from `pool` (all of
    /// it when sizes match). With `resample_each_call` the whole pool is kept.
    pub fn new(pool: &[VecD], cfg: McOracleConfig) -> Result<Self> {
        cfg.validate()?;
        let all = ParticleSet::new(pool)?;
        let particles = if cfg.resample_each_call || all.len() == cfg.n_particles {
            all
        } else if all.len() < cfg.n_particles {
            return Err(Error::InvalidArgument(format!(
                "pool has {} particles, config asks for {}",
                all.len(),
                cfg.n_particles
            )));
        } else {
            let mut idx: Vec<usize> = (0..all.len()).collect();
            let mut rng = cfg.seed.rng();
            for i in 0..cfg.n_particles {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(cfg.n_particles);
            all.select(&idx)
        };
        Ok(Self {
            particles,
            cfg,
            low_ess: Arc::default(),
        })
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    /// Estimates kept under [`LowEssPolicy::Accept`] since construction or the
    /// last reset. Clones share the counter.
    pub fn low_ess_count(&self) -> u64 {
        self.low_ess.load(Ordering::Relaxed)
    }

    pub fn reset_low_ess_count(&self) {
        self.low_ess.store(0, Ordering::Relaxed);
    }

    fn estimate(
        &self,
        t: f64,
        x: &VecD,
        want_hessian: bool,
        ctx: &mut EvalContext,
    ) -> Result<McEstimate> {
        ctx.calls += 1;
        let t = t.max(MC_T_MIN);
        let est = if self.cfg.resample_each_call {
            let mut rng = self.cfg.seed.derive(ctx.stream).rng_at(ctx.calls);
            let n = self.particles.len();
            let idx: Vec<usize> = (0..self.cfg.n_particles)
                .map(|_| rng.random_range(0..n))
                .collect();
            self.particles.select(&idx).estimate(t, x, want_hessian)?
        } else {
            self.particles.estimate(t, x, want_hessian)?
        };
        match self.cfg.low_ess {
            LowEssPolicy::Reject => ess_checked(est, t),
            LowEssPolicy::Accept => {
                if !(est.ess >= MIN_EFFECTIVE_SAMPLE_SIZE) {
                    self.low_ess.fetch_add(1, Ordering::Relaxed);
                }
                Ok(est)
            }
        }
    }
}

impl ScoreOracle for McOracle {
    fn dim(&self) -> usize {
        self.particles.dim()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_hessian: true,
            has_m_term: true,
        }
    }

    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD> {
        Ok(self.estimate(t, x, false, ctx)?.score)
    }

    fn score_hessian(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        let est = self.estimate(t, x, true, ctx)?;
        Ok((est.score, est.hessian.expect("hessian requested")))
    }
}

/// How perturbation directions are chosen across calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorruptionDirection {
    /// Fresh uniformly random directions on every call, keyed by
    /// `(seed, stream, call)`. The error has zero mean.
    #[default]
    PerCall,
    /// One set of directions drawn from the seed and reused on every call:
    /// a systematic bias of the prescribed norm.
    Persistent,
}

/// L2 perturbation radii for the score, the `L` matrix and the `M` vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorruptionSpec {
    pub eps_sc: f64,
    pub eps_l: f64,
    pub eps_m: f64,
    pub direction: CorruptionDirection,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn score_only(eps_sc: f64) -> Self {
        Self {
            eps_sc,
            ..Self::default()
        }
    }

    pub fn persistent(self) -> Self {
        Self {
            direction: CorruptionDirection::Persistent,
            ..self
        }
    }

    pub fn is_clean(&self) -> bool {
        self.eps_sc == 0.0 && self.eps_l == 0.0 && self.eps_m == 0.0
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !(ok(self.eps_sc) && ok(self.eps_l) && ok(self.eps_m)) {
            return Err(Error::InvalidArgument(format!(
                "corruption radii must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scaled perturbations, drawn in the order score direction, symmetric
/// matrix, `M` direction. Zero radii draw nothing.
#[derive(Debug, Clone, PartialEq)]
struct Perturbation {
    score: Option<VecD>,
    l: Option<MatD>,
    m: Option<VecD>,
}

impl Perturbation {
    fn draw<R: Rng + ?Sized>(d: usize, spec: &CorruptionSpec, rng: &mut R) -> Self {
        let score = (spec.eps_sc > 0.0).then(|| random_unit_vec(d, rng) * spec.eps_sc);
        let l = (spec.eps_l > 0.0).then(|| {
            let g = MatD::from_column_slice(d, d, standard_normal_vec(d * d, rng).as_slice());
            let e = &g + g.transpose();
            let norm = e.norm();
            e * (spec.eps_l / norm)
        });
        let m = (spec.eps_m > 0.0).then(|| random_unit_vec(d, rng) * spec.eps_m);
        Self { score, l, m }
    }
}

/// Wraps an oracle and adds perturbations of exactly the configured norms:
/// `eps_sc` to the score, `eps_l` (Frobenius, symmetric) to `L` and the
/// Hessian, `eps_m` to `M`.
#[derive(Debug, Clone)]
pub struct CorruptedOracle<O> {
    inner: O,
    spec: CorruptionSpec,
    seed: SeedSpec,
    fixed: Option<Perturbation>,
}

pub fn corrupt_oracle<O: ScoreOracle>(
    oracle: O,
    spec: CorruptionSpec,
    seed: SeedSpec,
) -> Result<CorruptedOracle<O>> {
    spec.validate()?;
    let fixed = match spec.direction {
        CorruptionDirection::Persistent => {
            Some(Perturbation::draw(oracle.dim(), &spec, &mut seed.rng()))
        }
        CorruptionDirection::PerCall => None,
    };
    Ok(CorruptedOracle {
        inner: oracle,
        spec,
        seed,
        fixed,
    })
}

impl<O: ScoreOracle> CorruptedOracle<O> {
    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn spec(&self) -> CorruptionSpec {
        self.spec
    }

    fn perturbation(&self, d: usize, ctx: &EvalContext) -> Perturbation {
        match &self.fixed {
            Some(p) => p.clone(),
            None => {
                let mut rng = self.seed.derive(ctx.stream).rng_at(ctx.calls);
                Perturbation::draw(d, &self.spec, &mut rng)
            }
        }
    }
}

impl<O: ScoreOracle> ScoreOracle for CorruptedOracle<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn score(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<VecD> {
        let mut s = self.inner.score(t, x, ctx)?;
        if self.spec.eps_sc > 0.0 {
            let spec = CorruptionSpec {
                eps_l: 0.0,
                eps_m: 0.0,
                ..self.spec
            };
            let delta = match &self.fixed {
                Some(p) => p.score.clone(),
                None => {
                    let mut rng = self.seed.derive(ctx.stream).rng_at(ctx.calls);
                    Perturbation::draw(x.len(), &spec, &mut rng).score
                }
            };
            s += delta.expect("positive score radius");
        }
        Ok(s)
    }

    fn score_hessian(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<(VecD, MatD)> {
        let (mut s, mut h) = self.inner.score_hessian(t, x, ctx)?;
        if !self.spec.is_clean() {
            let p = self.perturbation(x.len(), ctx);
            if let Some(ds) = p.score {
                s += ds;
            }
            if let Some(dl) = p.l {
                h += dl;
            }
        }
        Ok((s, h))
    }

    fn linearization(&self, t: f64, x: &VecD, ctx: &mut EvalContext) -> Result<Linearization> {
        let mut lin = self.inner.linearization(t, x, ctx)?;
        if !self.spec.is_clean() {
            let p = self.perturbation(x.len(), ctx);
            if let Some(ds) = p.score {
                lin.score += ds;
            }
            if let Some(dl) = p.l {
                lin.l += dl;
            }
            if let Some(dm) = p.m {
                lin.m += dm;
            }
        }
        Ok(lin)
    }
}

/// Empirical `L2` norm `(mean ‖∇log p_t(X)‖²)^{1/2}` over samples of `p_t`.
pub fn score_norm_diagnostic<O: ScoreOracle + ?Sized>(
    oracle: &O,
    t: f64,
    samples_from_pt: &[VecD],
    ctx: &mut EvalContext,
) -> Result<f64> {
    if samples_from_pt.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut acc = 0.0;
    for x in samples_from_pt {
        acc += oracle.score(t, x, ctx)?.norm_squared();
    }
    Ok((acc / samples_from_pt.len() as f64).sqrt())
}
