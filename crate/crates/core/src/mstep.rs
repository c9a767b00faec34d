//! M-step: maximize the expected complete log-likelihood over `(a, b, c, d)`.
//!
//! The objective separates into a gamma block for `(a, b)` and a gamma
//! (continuous) or beta (discrete) block for `(c, d)`; each block depends on
//! the data only through two averaged conditional moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::{MarkMoments, StratumMoments};
use crate::model::{Kind, Theta};
use crate::specfun::{lgamma, log_minus_digamma, psi, psi1};

const GAMMA_TOL: f64 = 1e-12;
const GAMMA_MAX_ITER: usize = 200;
const MAX_SHAPE: f64 = 1e8;
const BETA_TOL: f64 = 1e-10;
const BETA_MAX_ITER: usize = 500;

/// Stratum-averaged conditional moments.
///
/// `mark` holds averages of the same quantities as [`MarkMoments`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepInput {
    pub n_strata: usize,
    pub mean_e_mu: f64,
    pub mean_e_ln_mu: f64,
    pub mark: MarkMoments,
}

impl MStepInput {
    pub fn from_moments(moments: &[StratumMoments]) -> Result<Self> {
        let s = moments.len();
        if s == 0 {
            return Err(Error::Domain("M-step needs at least one stratum".into()));
        }
        let avg = |f: &dyn Fn(&StratumMoments) -> f64| moments.iter().map(f).sum::<f64>() / s as f64;
        let mark = match moments[0].mark {
            MarkMoments::Rate { .. } => MarkMoments::Rate {
                e_rho: avg(&|m| m.mark.pair().0),
                e_ln_rho: avg(&|m| m.mark.pair().1),
            },
            MarkMoments::Probability { .. } => MarkMoments::Probability {
                e_ln_p: avg(&|m| m.mark.pair().0),
                e_ln_1mp: avg(&|m| m.mark.pair().1),
            },
        };
        if moments.iter().any(|m| std::mem::discriminant(&m.mark) != std::mem::discriminant(&mark)) {
            return Err(Error::Domain("strata disagree on the model kind".into()));
        }
        Ok(Self { n_strata: s, mean_e_mu: avg(&|m| m.e_mu), mean_e_ln_mu: avg(&|m| m.e_ln_mu), mark })
    }

    pub fn kind(&self) -> Kind {
        match self.mark {
            MarkMoments::Rate { .. } => Kind::Continuous,
            MarkMoments::Probability { .. } => Kind::Discrete,
        }
    }
}

/// Shape solving `ln a - psi(a) = c` with the number of Newton steps taken.
pub fn gamma_shape_newton(c: f64) -> Result<(f64, usize)> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Infeasible(format!("ln(mean) - mean(ln) = {c} must be positive")));
    }
    // h(x) = ln x - psi(x) - c is strictly decreasing
    let h = |x: f64| log_minus_digamma(x) - c;
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut x = 1.0 / (2.0 * c);
    if x > MAX_SHAPE {
        return Err(Error::NonConvergence(format!("gamma shape diverged above {MAX_SHAPE:e} (C = {c:e})")));
    }
    for iter in 1..=GAMMA_MAX_ITER {
        let r = h(x);
        if r.abs() <= GAMMA_TOL * c.max(1.0) {
            return Ok((x, iter - 1));
        }
        if r > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = 1.0 / x - psi1(x);
        let mut next = x - r / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(lo) };
        }
        if next > MAX_SHAPE {
            return Err(Error::NonConvergence(format!("gamma shape diverged above {MAX_SHAPE:e} (C = {c:e})")));
        }
        if next == x {
            return Ok((x, iter));
        }
        x = next;
    }
    Err(Error::NonConvergence(format!("gamma shape solver did not converge for C = {c:e}")))
}

/// `(shape, rate)` of the gamma law whose mean and mean log match the inputs.
pub fn solve_gamma_pair(mean_e: f64, mean_e_ln: f64) -> Result<(f64, f64)> {
    if !(mean_e > 0.0) {
        return Err(Error::Domain(format!("mean must be positive, got {mean_e}")));
    }
    let (shape, _) = gamma_shape_newton(mean_e.ln() - mean_e_ln)?;
    Ok((shape, shape / mean_e))
}

/// `(c, d)` of the beta law with `E ln p = mean_e_ln_p` and
/// `E ln(1 - p) = mean_e_ln_1mp`.
pub fn solve_beta_pair(mean_e_ln_p: f64, mean_e_ln_1mp: f64) -> Result<(f64, f64)> {
    let (l1, l2) = (mean_e_ln_p, mean_e_ln_1mp);
    if !(l1 < 0.0 && l2 < 0.0) {
        return Err(Error::Domain(format!("log-moments must be negative, got ({l1}, {l2})")));
    }
    if l1.exp() + l2.exp() >= 1.0 {
        return Err(Error::Infeasible(format!("log-moments ({l1}, {l2}) violate Jensen's bound")));
    }
    let objective = |c: f64, d: f64| lgamma(c + d) - lgamma(c) - lgamma(d) + (c - 1.0) * l1 + (d - 1.0) * l2;
    let m1 = l1.exp();
    let (mut c, mut d) = (5.0 * m1, 5.0 * (1.0 - m1));
    let mut f = objective(c, d);
    for _ in 0..BETA_MAX_ITER {
        let ps = psi(c + d);
        let g1 = ps - psi(c) + l1;
        let g2 = ps - psi(d) + l2;
        if g1.abs().max(g2.abs()) <= BETA_TOL {
            return Ok((c, d));
        }
        let t = psi1(c + d);
        let (h11, h12, h22) = (t - psi1(c), t, t - psi1(d));
        let det = h11 * h22 - h12 * h12;
        let dc = -(h22 * g1 - h12 * g2) / det;
        let dd = -(h11 * g2 - h12 * g1) / det;
        let mut step = 1.0;
        loop {
            let (nc, nd) = (c + step * dc, d + step * dd);
            if nc > 0.0 && nd > 0.0 {
                let nf = objective(nc, nd);
                if nf >= f - 1e-14 * f.abs().max(1.0) {
                    c = nc;
                    d = nd;
                    f = nf;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(Error::NonConvergence("beta solver line search stalled".into()));
            }
        }
        if c + d > 1e12 {
            return Err(Error::NonConvergence("beta parameters diverged".into()));
        }
    }
    Err(Error::NonConvergence("beta solver did not converge".into()))
}

/// θ-dependent part of the expected complete log-likelihood.
pub fn q_value(theta: &Theta, input: &MStepInput) -> f64 {
    let s = input.n_strata as f64;
    let Theta { a, b, c, d } = *theta;
    let mu_part = s * ((a - 1.0) * input.mean_e_ln_mu + a * b.ln() - b * input.mean_e_mu - lgamma(a));
    let mark_part = match input.mark {
        MarkMoments::Rate { e_rho, e_ln_rho } => s * ((c - 1.0) * e_ln_rho + c * d.ln() - d * e_rho - lgamma(c)),
        MarkMoments::Probability { e_ln_p, e_ln_1mp } => {
            s * (lgamma(c + d) - lgamma(c) - lgamma(d) + (c - 1.0) * e_ln_p + (d - 1.0) * e_ln_1mp)
        }
    };
    mu_part + mark_part
}

/// Gradient of [`q_value`] in θ; the conditional expectation of the
/// complete-data score.
pub fn q_gradient(theta: &Theta, input: &MStepInput) -> [f64; 4] {
    let s = input.n_strata as f64;
    let Theta { a, b, c, d } = *theta;
    let ga = s * (b.ln() - psi(a) + input.mean_e_ln_mu);
    let gb = s * (a / b - input.mean_e_mu);
    match input.mark {
        MarkMoments::Rate { e_rho, e_ln_rho } => {
            [ga, gb, s * (d.ln() - psi(c) + e_ln_rho), s * (c / d - e_rho)]
        }
        MarkMoments::Probability { e_ln_p, e_ln_1mp } => {
            let ps = psi(c + d);
            [ga, gb, s * (ps - psi(c) + e_ln_p), s * (ps - psi(d) + e_ln_1mp)]
        }
    }
}

/// Events that made the M-step keep part of the previous θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepFlag {
    /// `(a, b)` kept because the moments admitted no solution.
    KeptMuPair,
    /// `(c, d)` kept because the moments admitted no solution.
    KeptMarkPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepOutcome {
    pub theta: Theta,
    pub flags: Vec<MStepFlag>,
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::Infeasible(_) | Error::NonConvergence(_) | Error::Domain(_))
}

/// Maximizes [`q_value`] in θ. A block whose moments admit no solution keeps
/// its value from `previous` and is flagged.
pub fn m_step(input: &MStepInput, previous: &Theta) -> Result<MStepOutcome> {
    let mut flags = Vec::new();
    let (a, b) = match solve_gamma_pair(input.mean_e_mu, input.mean_e_ln_mu) {
        Ok(pair) => pair,
        Err(e) if recoverable(&e) => {
            flags.push(MStepFlag::KeptMuPair);
            (previous.a, previous.b)
        }
        Err(e) => return Err(e),
    };
    let mark = match input.mark {
        MarkMoments::Rate { e_rho, e_ln_rho } => solve_gamma_pair(e_rho, e_ln_rho),
        MarkMoments::Probability { e_ln_p, e_ln_1mp } => solve_beta_pair(e_ln_p, e_ln_1mp),
    };
    let (c, d) = match mark {
        Ok(pair) => pair,
        Err(e) if recoverable(&e) => {
            flags.push(MStepFlag::KeptMarkPair);
            (previous.c, previous.d)
        }
        Err(e) => return Err(e),
    };
    Ok(MStepOutcome { theta: Theta::new(a, b, c, d)?, flags })
}
