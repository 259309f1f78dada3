//! Data distributions `p₀`: Gaussian targets with closed-form marginals and
//! the penalized logistic-regression posterior, plus a MALA reference sampler.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{standard_normal_vec, MatD, SeedSpec, SymmetricSpectrum, VecD};

/// Unnormalized log-density with first and second derivatives.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &VecD) -> f64;
    fn grad_log_density(&self, theta: &VecD) -> VecD;
    fn hess_log_density(&self, theta: &VecD) -> MatD;
}

/// `N(mu, sigma)` with `sigma` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mu: VecD,
    sigma: MatD,
    precision: MatD,
    spectrum: SymmetricSpectrum,
}

impl GaussianTarget {
    pub fn new(mu: VecD, sigma: MatD) -> Result<Self> {
        if sigma.nrows() != mu.len() {
            return Err(Error::InvalidArgument(format!(
                "mean has dimension {} but covariance is {}x{}",
                mu.len(),
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let spectrum = SymmetricSpectrum::new(&sigma)?;
        if spectrum.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "covariance must be positive definite (min eigenvalue {})",
                spectrum.min_eigenvalue()
            )));
        }
        let precision = spectrum.map(|l| 1.0 / l);
        Ok(Self {
            mu,
            sigma,
            precision,
            spectrum,
        })
    }

    /// `N(mu, var · I)`.
    pub fn isotropic(mu: VecD, var: f64) -> Result<Self> {
        let d = mu.len();
        Self::new(mu, MatD::identity(d, d) * var)
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(VecD::zeros(d), 1.0).expect("identity covariance is valid")
    }

    pub fn mean(&self) -> &VecD {
        &self.mu
    }

    pub fn cov(&self) -> &MatD {
        &self.sigma
    }

    pub fn precision(&self) -> &MatD {
        &self.precision
    }

    pub fn spectrum(&self) -> &SymmetricSpectrum {
        &self.spectrum
    }

    /// Strong log-concavity and gradient-Lipschitz constants `(1/λ_max, 1/λ_min)`.
    pub fn regularity(&self) -> (f64, f64) {
        (
            1.0 / self.spectrum.max_eigenvalue(),
            1.0 / self.spectrum.min_eigenvalue(),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> VecD {
        let z = standard_normal_vec(self.dim(), rng);
        &self.mu + self.spectrum.apply(|l| l.sqrt(), &z)
    }
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn log_density(&self, theta: &VecD) -> f64 {
        let r = theta - &self.mu;
        -0.5 * r.dot(&(&self.precision * &r))
    }

    fn grad_log_density(&self, theta: &VecD) -> VecD {
        -(&self.precision * (theta - &self.mu))
    }

    fn hess_log_density(&self, _theta: &VecD) -> MatD {
        -self.precision.clone()
    }
}

/// Binary-label regression data. Row `i` of `features` is `x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: MatD,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: MatD, labels: Vec<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not ±1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn n_data(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// CSV with header `y,x_1,...,x_d`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y");
        for j in 1..=self.dim() {
            let _ = write!(out, ",x_{j}");
        }
        out.push('\n');
        for (i, y) in self.labels.iter().enumerate() {
            let _ = write!(out, "{y}");
            for j in 0..self.dim() {
                let _ = write!(out, ",{}", self.features[(i, j)]);
            }
            out.push('\n');
        }
        out
    }
}

/// Default planted coefficient: all ones, unit norm.
pub fn default_theta_star(d: usize) -> VecD {
    VecD::from_element(d, 1.0 / (d as f64).sqrt())
}

/// Features `x_ij ~ N(0, sigma2)` i.i.d., labels `y_i = +1` with
/// probability `σ(x_iᵀ θ*)`. Per row: `d` normals, then one uniform.
pub fn generate_dataset(
    n_data: usize,
    d: usize,
    sigma2: f64,
    theta_star: &VecD,
    seed: SeedSpec,
) -> Result<Dataset> {
    if n_data == 0 || d == 0 {
        return Err(Error::InvalidArgument(
            "n_data and d must be positive".into(),
        ));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    if theta_star.len() != d {
        return Err(Error::InvalidArgument(
            "theta_star has the wrong dimension".into(),
        ));
    }
    let mut rng = seed.rng();
    let sd = sigma2.sqrt();
    let mut features = MatD::zeros(n_data, d);
    let mut labels = Vec::with_capacity(n_data);
    for i in 0..n_data {
        let mut dot = 0.0;
        for j in 0..d {
            let x = sd * rng.sample::<f64, _>(StandardNormal);
            features[(i, j)] = x;
            dot += x * theta_star[j];
        }
        let u: f64 = rng.random();
        labels.push(if u < sigmoid(dot) { 1.0 } else { -1.0 });
    }
    Dataset::new(features, labels)
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^{-u})` without overflow.
pub fn softplus_neg(u: f64) -> f64 {
    (-u.abs()).exp().ln_1p() + (-u).max(0.0)
}

/// Posterior `p₀(θ) ∝ exp(−f(θ))` with
/// `f(θ) = λ/2 ‖θ‖² + (1/n) Σ log(1 + exp(−y_i x_iᵀθ))`.
#[derive(Debug, Clone)]
pub struct LogisticPosterior {
    dataset: Dataset,
    lambda: f64,
}

/// Potential value together with the score and Hessian of `log p₀`.
#[derive(Debug, Clone)]
pub struct LogisticEval {
    pub f: f64,
    pub grad_logp0: VecD,
    pub hess_logp0: MatD,
}

impl LogisticPosterior {
    pub fn new(dataset: Dataset, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self { dataset, lambda })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn margins(&self, theta: &VecD) -> VecD {
        let xt = &self.dataset.features * theta;
        VecD::from_iterator(
            xt.len(),
            xt.iter().zip(&self.dataset.labels).map(|(v, y)| y * v),
        )
    }

    pub fn potential(&self, theta: &VecD) -> f64 {
        let n = self.dataset.n_data() as f64;
        let loss: f64 = self.margins(theta).iter().map(|&u| softplus_neg(u)).sum();
        0.5 * self.lambda * theta.norm_squared() + loss / n
    }

    pub fn derivatives(&self, theta: &VecD) -> LogisticEval {
        let d = theta.len();
        let n = self.dataset.n_data() as f64;
        let margins = self.margins(theta);
        let mut f = 0.5 * self.lambda * theta.norm_squared();
        let mut grad_f = theta * self.lambda;
        let mut hess_f = MatD::identity(d, d) * self.lambda;
        for (i, &u) in margins.iter().enumerate() {
            f += softplus_neg(u) / n;
            let s = sigmoid(-u);
            let x = self.dataset.features.row(i).transpose();
            grad_f.axpy(-self.dataset.labels[i] * s / n, &x, 1.0);
            hess_f.ger(s * (1.0 - s) / n, &x, &x, 1.0);
        }
        LogisticEval {
            f,
            grad_logp0: -grad_f,
            hess_logp0: -hess_f,
        }
    }

    /// `(m₀, L₀) = (λ, λ + λ_max(Σ x_i x_iᵀ)/n)`.
    pub fn regularity(&self) -> (f64, f64) {
        let x = &self.dataset.features;
        let gram = x.transpose() * x;
        let top = SymmetricSpectrum::new(&gram)
            .map(|s| s.max_eigenvalue())
            .unwrap_or(0.0)
            .max(0.0);
        (
            self.lambda,
            self.lambda + top / self.dataset.n_data() as f64,
        )
    }
}

impl LogDensity for LogisticPosterior {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn log_density(&self, theta: &VecD) -> f64 {
        -self.potential(theta)
    }

    fn grad_log_density(&self, theta: &VecD) -> VecD {
        let n = self.dataset.n_data() as f64;
        let margins = self.margins(theta);
        let mut grad = theta * (-self.lambda);
        for (i, &u) in margins.iter().enumerate() {
            let x = self.dataset.features.row(i).transpose();
            grad.axpy(self.dataset.labels[i] * sigmoid(-u) / n, &x, 1.0);
        }
        grad
    }

    fn hess_log_density(&self, theta: &VecD) -> MatD {
        self.derivatives(theta).hess_logp0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MalaConfig {
    /// Initial step size; adapted during burn-in.
    pub step: f64,
    pub burn_in: usize,
    pub thinning: usize,
    pub n_samples: usize,
}

impl MalaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.thinning == 0 || self.n_samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid MALA config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MalaOutput {
    pub samples: Vec<VecD>,
    /// Acceptance rate over the retained (post burn-in) iterations.
    pub acceptance_rate: f64,
    pub final_step: f64,
}

const MALA_TARGET_ACCEPT: f64 = 0.574;
const MALA_ADAPT_WINDOW: usize = 50;

/// Metropolis-adjusted Langevin chain started at the origin.
///
/// The step size is rescaled every 50 burn-in iterations toward an
/// acceptance rate of 0.574 and frozen afterwards.
pub fn mala_reference_sampler<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &MalaConfig,
    seed: SeedSpec,
) -> Result<MalaOutput> {
    cfg.validate()?;
    let d = target.dim();
    let mut rng = seed.rng();
    let mut step = cfg.step;

    let mut theta = VecD::zeros(d);
    let mut logp = target.log_density(&theta);
    let mut grad = target.grad_log_density(&theta);
    if !logp.is_finite() {
        return Err(Error::NonFinite("log-density at the initial point".into()));
    }

    let total = cfg.burn_in + cfg.n_samples * cfg.thinning;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut window_accepts = 0usize;
    let mut kept_accepts = 0usize;

    for it in 0..total {
        let z = standard_normal_vec(d, &mut rng);
        let mean_fwd = &theta + &grad * step;
        let proposal = &mean_fwd + z * (2.0 * step).sqrt();
        let logp_new = target.log_density(&proposal);
        if !logp_new.is_finite() {
            return Err(Error::NonFinite(format!(
                "log-density at MALA iteration {it}"
            )));
        }
        let grad_new = target.grad_log_density(&proposal);
        let mean_bwd = &proposal + &grad_new * step;
        let log_q_fwd = -(&proposal - &mean_fwd).norm_squared() / (4.0 * step);
        let log_q_bwd = -(&theta - &mean_bwd).norm_squared() / (4.0 * step);
        let log_alpha = logp_new - logp + log_q_bwd - log_q_fwd;
        let u: f64 = rng.random();
        let accepted = u.ln() < log_alpha;
        if accepted {
            theta = proposal;
            logp = logp_new;
            grad = grad_new;
        }

        if it < cfg.burn_in {
            window_accepts += accepted as usize;
            if (it + 1) % MALA_ADAPT_WINDOW == 0 {
                let rate = window_accepts as f64 / MALA_ADAPT_WINDOW as f64;
                step *= ((rate - MALA_TARGET_ACCEPT) * 2.0).exp();
                window_accepts = 0;
            }
        } else {
            kept_accepts += accepted as usize;
            if (it - cfg.burn_in + 1) % cfg.thinning == 0 {
                samples.push(theta.clone());
            }
        }
    }

    let kept = total - cfg.burn_in;
    Ok(MalaOutput {
        samples,
        acceptance_rate: kept_accepts as f64 / kept as f64,
        final_step: step,
    })
}
