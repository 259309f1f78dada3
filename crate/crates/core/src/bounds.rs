//! Regularity functions of the forward marginals and the W2 upper-bound
//! calculators for each scheme.
//!
//! The bounds hold up to omitted absolute constants, so the reported terms
//! are order-level predictions rather than guaranteed dominators of the
//! measured error.

use crate::error::{Error, Result};
use crate::samplers::SchemeKind;

/// Lipschitz constant of `∇log p_t`: `min{(1 − e^{−t})⁻¹, e^t L₀}`.
///
/// Returns `L₀` at `t = 0`.
pub fn lipschitz_l(t: f64, l0: f64) -> Result<f64> {
    if !(t >= 0.0) || !(l0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need t ≥ 0 and L0 > 0, got t={t}, L0={l0}"
        )));
    }
    if t == 0.0 {
        return Ok(l0);
    }
    Ok((1.0 / -(-t).exp_m1()).min(t.exp() * l0))
}

/// Strong log-concavity constant of `p_t`: `1 / (e^{−t}/m₀ + 1 − e^{−t})`.
pub fn convexity_m(t: f64, m0: f64) -> Result<f64> {
    if !(t >= 0.0) || !(m0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need t ≥ 0 and m0 > 0, got t={t}, m0={m0}"
        )));
    }
    Ok(1.0 / ((-t).exp() / m0 - (-t).exp_m1()))
}

/// Regularity of `p₀`. `m1` and `m2` are time-Lipschitz constants with no
/// constructive formula; they are carried for reporting only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityConstants {
    pub m0: f64,
    pub l0: f64,
    pub m1: f64,
    pub m2: f64,
    pub l_f: f64,
}

impl RegularityConstants {
    pub fn new(m0: f64, l0: f64) -> Result<Self> {
        if !(m0 > 0.0) || !(l0 >= m0) || !l0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need 0 < m0 ≤ L0 < ∞, got m0={m0}, L0={l0}"
            )));
        }
        Ok(Self {
            m0,
            l0,
            m1: 0.0,
            m2: 0.0,
            l_f: 0.0,
        })
    }

    pub fn with_hessian_lipschitz(mut self, l_f: f64) -> Result<Self> {
        if !(l_f >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "L_F must be non-negative, got {l_f}"
            )));
        }
        self.l_f = l_f;
        Ok(self)
    }

    pub fn with_time_lipschitz(mut self, m1: f64, m2: f64) -> Result<Self> {
        if !(m1 >= 0.0) || !(m2 >= 0.0) {
            return Err(Error::InvalidArgument(
                "M1 and M2 must be non-negative".into(),
            ));
        }
        self.m1 = m1;
        self.m2 = m2;
        Ok(self)
    }

    pub fn m_min(&self) -> f64 {
        self.m0.min(1.0)
    }

    pub fn l_max(&self) -> f64 {
        1.0 + self.l0
    }
}

/// Problem and accuracy parameters entering a bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub d: usize,
    pub h: f64,
    pub horizon: f64,
    pub eps_sc: f64,
    pub eps_l: f64,
    pub eps_m: f64,
    /// `‖X₀‖_{L2}` of the data distribution.
    pub x0_norm: f64,
    /// Accuracy for which to size `N`; `None` skips the inversion.
    pub target_eps: Option<f64>,
}

impl BoundInputs {
    pub fn new(d: usize, h: f64, horizon: f64) -> Self {
        Self {
            d,
            h,
            horizon,
            eps_sc: 0.0,
            eps_l: 0.0,
            eps_m: 0.0,
            x0_norm: 0.0,
            target_eps: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("d must be at least 1".into()));
        }
        let non_neg = [self.eps_sc, self.eps_l, self.eps_m, self.x0_norm];
        if !(self.h > 0.0) || !(self.horizon > 0.0) || non_neg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "h and T must be positive, error radii and ‖X0‖ non-negative".into(),
            ));
        }
        if let Some(eps) = self.target_eps {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "target accuracy must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub scheme: SchemeKind,
    pub c1: f64,
    pub c2: f64,
    pub init_term: f64,
    pub disc_term: f64,
    pub score_term: f64,
    /// Steps needed for `target_eps`; `None` when not requested or when the
    /// score error alone already exceeds the budget.
    pub n_for_eps: Option<u64>,
}

impl BoundReport {
    pub fn total(&self) -> f64 {
        self.init_term + self.disc_term + self.score_term
    }
}

/// `(C1, C2, discretization term, score term)` at step size `h`.
fn scheme_terms(
    scheme: SchemeKind,
    rc: &RegularityConstants,
    inp: &BoundInputs,
    h: f64,
) -> (f64, f64, f64, f64) {
    let gap = rc.m_min() - 0.5;
    let l_max = rc.l_max();
    let d = inp.d as f64;
    let sqrt3 = 3f64.sqrt();
    match scheme {
        SchemeKind::Em => {
            let (c1, c2) = ((l_max + 0.5) / gap, 1.0 / gap);
            (c1, c2, c1 * (d * h).sqrt(), c2 * inp.eps_sc)
        }
        SchemeKind::Ei => {
            let (c1, c2) = (l_max / gap, 1.0 / gap);
            (c1, c2, c1 * (d * h).sqrt(), c2 * inp.eps_sc)
        }
        SchemeKind::Rem => {
            let c1 = ((d / 3.0).sqrt() * l_max + 1.0 / (2.0 * sqrt3)) / gap;
            let c2 = 3.0 / gap;
            (c1, c2, c1 * h.sqrt(), c2 * inp.eps_sc)
        }
        SchemeKind::Rei => {
            let (c1, c2) = (l_max / (sqrt3 * gap), 3.0 / gap);
            (c1, c2, c1 * (d * h).sqrt(), c2 * inp.eps_sc)
        }
        SchemeKind::So => {
            let growth = ((l_max - 0.5) * h).exp();
            let c1 = growth * (d.sqrt() * l_max.powf(1.5) + 1.5 * d * rc.l_f) / gap;
            let c2 = growth / gap;
            let score = inp.eps_sc + (2.0 / 3.0) * h.sqrt() * inp.eps_l + 0.5 * h * inp.eps_m;
            (c1, c2, c1 * h, c2 * score)
        }
    }
}

/// Evaluates the W2 upper bound of `scheme`:
/// `e^{−m_min T}‖X₀‖ + discretization term + score term`.
///
/// With `target_eps` set, `N` is sized by giving each of the three terms a
/// third of the budget: `T` from the initialization term, then the largest
/// `h` whose discretization and score terms fit (found by bisection, since
/// both are increasing in `h`).
pub fn theorem_bound(
    scheme: SchemeKind,
    rc: &RegularityConstants,
    inp: &BoundInputs,
) -> Result<BoundReport> {
    if rc.m_min() <= 0.5 {
        return Err(Error::VacuousBound { m_min: rc.m_min() });
    }
    inp.validate()?;
    let (c1, c2, disc_term, score_term) = scheme_terms(scheme, rc, inp, inp.h);
    let init_term = (-rc.m_min() * inp.horizon).exp() * inp.x0_norm;
    let n_for_eps = inp
        .target_eps
        .and_then(|eps| steps_for_accuracy(scheme, rc, inp, eps));
    Ok(BoundReport {
        scheme,
        c1,
        c2,
        init_term,
        disc_term,
        score_term,
        n_for_eps,
    })
}

fn steps_for_accuracy(
    scheme: SchemeKind,
    rc: &RegularityConstants,
    inp: &BoundInputs,
    eps: f64,
) -> Option<u64> {
    let budget = eps / 3.0;
    let horizon = if inp.x0_norm > budget {
        (inp.x0_norm / budget).ln() / rc.m_min()
    } else {
        // the initialization term is already within budget at any T
        inp.horizon.min(1.0)
    };
    let fits = |h: f64| {
        let (_, _, disc, score) = scheme_terms(scheme, rc, inp, h);
        disc <= budget && score <= budget
    };
    if !fits(f64::MIN_POSITIVE) {
        return None;
    }
    if fits(horizon) {
        return Some(1);
    }
    let (mut lo, mut hi) = (f64::MIN_POSITIVE.ln(), horizon.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fits(mid.exp()) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((horizon / lo.exp()).ceil() as u64)
}
