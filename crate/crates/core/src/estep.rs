//! Importance-sampling E-step.
//!
//! Given the clump counts of a stratum, the random effects are conjugate
//! (`mu | N ~ Gamma(a + N+, b + D+)`, `rho | N ~ Gamma(c + N+, d + Y+)` or
//! `p | N ~ Beta(c + N+, d + Y+ - N+)`), so every conditional expectation the
//! M-step needs is an expectation over the posterior of the total `N+`. That
//! posterior is only known up to a constant and is approximated by weighted
//! particles:
//!
//! * continuous data: `N+` is drawn from a one-dimensional proposal on a
//!   truncated support, the individual counts from a multinomial split of the
//!   clumps in excess of one per positive record, and the weight corrects the
//!   split;
//! * discrete data: each particle first draws `(mu, p)` from a mixture of the
//!   conditionals given reference values of `N+`, then every `N_i` from its
//!   exact conditional given `(mu, p, y_i)`; the weight is the joint target
//!   over the joint proposal.
//!
//! All estimators are self-normalized. [`enumerate_posterior`] gives the exact
//! posterior on small strata and serves as the oracle for the samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Kind, Stratum, Theta};
use crate::rng::RngStream;
use crate::specfun::{
    lgamma, log_sum_exp, multinomial_into, psi, sample_beta, sample_gamma, FiniteSampler, LnFactorial,
};

/// Relative pmf level below which the continuous `N+` support is cut.
const SUPPORT_CUTOFF: f64 = 1e-15;

/// Sufficient summaries of one stratum.
///
/// Positive records are kept in a canonical order (sorted by `(y, effort)`) so
/// that the statistics, and every computation built on them, do not depend on
/// the order of observations in the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub y_plus: f64,
    pub d_plus: f64,
    pub n_obs: usize,
    pub n_nonzero: usize,
    pub nonzero_y: Vec<f64>,
    pub nonzero_d: Vec<f64>,
}

impl StratumStats {
    pub fn is_all_zero(&self) -> bool {
        self.n_nonzero == 0
    }
}

pub fn stratum_stats(stratum: &Stratum) -> StratumStats {
    let mut efforts: Vec<f64> = stratum.observations.iter().map(|o| o.effort).collect();
    efforts.sort_by(f64::total_cmp);
    let mut nonzero: Vec<(f64, f64)> =
        stratum.observations.iter().filter(|o| o.y > 0.0).map(|o| (o.y, o.effort)).collect();
    nonzero.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.total_cmp(&r.1)));
    let nonzero_y: Vec<f64> = nonzero.iter().map(|p| p.0).collect();
    let nonzero_d: Vec<f64> = nonzero.iter().map(|p| p.1).collect();
    StratumStats {
        y_plus: nonzero_y.iter().sum(),
        d_plus: efforts.iter().sum(),
        n_obs: stratum.observations.len(),
        n_nonzero: nonzero.len(),
        nonzero_y,
        nonzero_d,
    }
}

/// One latent clump-count vector with its importance weight.
///
/// `counts` has one entry per observation in canonical order: the positive
/// records in [`StratumStats`] order first, then the zero records.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub counts: Vec<u64>,
    pub n_plus: u64,
    pub weight: f64,
}

/// Weighted sample of `N+`, aggregated over distinct values.
///
/// Weights are normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NPlusSample {
    pub values: Vec<u64>,
    pub weights: Vec<f64>,
    /// Per value, the sum of squared particle weights on the same scale.
    pub sq_weights: Vec<f64>,
    /// `(Σw)² / Σw²` over the raw particles.
    pub ess: f64,
    pub n_particles: usize,
    /// Normalized proposal mass at the last support point kept (0 when the
    /// support is exact).
    pub truncation_mass: f64,
}

impl NPlusSample {
    /// Point mass, used for strata without positive records.
    pub fn degenerate(value: u64, n_particles: usize) -> Self {
        let n = n_particles.max(1) as f64;
        Self {
            values: vec![value],
            weights: vec![1.0],
            sq_weights: vec![1.0 / n],
            ess: n,
            n_particles,
            truncation_mass: 0.0,
        }
    }

    /// Aggregates raw `(N+, log-weight)` pairs.
    pub fn from_log_weighted(pairs: &[(u64, f64)], truncation_mass: f64) -> Result<Self> {
        let max = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::ZeroWeight);
        }
        let mut sorted: Vec<(u64, f64)> = pairs.iter().map(|&(n, lw)| (n, (lw - max).exp())).collect();
        sorted.sort_by_key(|p| p.0);
        let sum: f64 = sorted.iter().map(|p| p.1).sum();
        let mut values = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut sq_weights: Vec<f64> = Vec::new();
        for (n, w) in sorted {
            let w = w / sum;
            if values.last() == Some(&n) {
                *weights.last_mut().expect("paired with values") += w;
                *sq_weights.last_mut().expect("paired with values") += w * w;
            } else {
                values.push(n);
                weights.push(w);
                sq_weights.push(w * w);
            }
        }
        let ess = 1.0 / sq_weights.iter().sum::<f64>();
        Ok(Self { values, weights, sq_weights, ess, n_particles: pairs.len(), truncation_mass })
    }

    pub fn from_particles(particles: &[Particle]) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::ZeroWeight);
        }
        let pairs: Vec<(u64, f64)> = particles.iter().map(|p| (p.n_plus, p.weight.ln())).collect();
        Self::from_log_weighted(&pairs, 0.0)
    }

    /// Same particles with every weight multiplied by `exp(log_factor(N+))`.
    ///
    /// Since the E-step targets depend on θ only through `N+`, this moves a
    /// sample drawn under one θ to another without redrawing.
    pub fn reweighted(&self, log_factor: impl Fn(u64) -> f64) -> Result<Self> {
        let logs: Vec<f64> = self.values.iter().map(|&n| log_factor(n)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::ZeroWeight);
        }
        let r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = self.weights.iter().zip(&r).map(|(w, r)| w * r).sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::ZeroWeight);
        }
        let weights: Vec<f64> = self.weights.iter().zip(&r).map(|(w, r)| w * r / z).collect();
        let sq_weights: Vec<f64> = self.sq_weights.iter().zip(&r).map(|(q, r)| q * (r / z) * (r / z)).collect();
        let ess = 1.0 / sq_weights.iter().sum::<f64>();
        Ok(Self { values: self.values.clone(), weights, sq_weights, ess, ..*self })
    }

    /// Self-normalized expectation of `f(N+)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values.iter().zip(&self.weights).map(|(&n, &w)| w * f(n as f64)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|n| n)
    }
}

/// Conditional moments of the mark random effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkMoments {
    /// Continuous model: `E[rho | y]`, `E[ln rho | y]`.
    Rate { e_rho: f64, e_ln_rho: f64 },
    /// Discrete model: `E[ln p | y]`, `E[ln(1 - p) | y]`.
    Probability { e_ln_p: f64, e_ln_1mp: f64 },
}

impl MarkMoments {
    pub fn pair(&self) -> (f64, f64) {
        match *self {
            MarkMoments::Rate { e_rho, e_ln_rho } => (e_rho, e_ln_rho),
            MarkMoments::Probability { e_ln_p, e_ln_1mp } => (e_ln_p, e_ln_1mp),
        }
    }
}

/// The conditional expectations one stratum contributes to the M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumMoments {
    pub e_mu: f64,
    pub e_ln_mu: f64,
    pub mark: MarkMoments,
    pub e_n_plus: f64,
    pub ess: f64,
}

// ---------------------------------------------------------------------------
// continuous model

/// Proposal for `N+` in the continuous model, on `{I+, ..., cap}`.
///
/// The split probabilities are `pi_i = y_i D_i / Σ y_j D_j`, which reduce to
/// `y_i / Y+` under equal efforts.
#[derive(Debug, Clone)]
pub struct ContinuousProposal {
    offset: u64,
    sampler: FiniteSampler,
    split: Vec<f64>,
    // Σ_i ln Γ(pi_i n + 1) at each support point
    log_split_norm: Vec<f64>,
    truncation_mass: f64,
}

impl ContinuousProposal {
    pub fn new(stats: &StratumStats, theta: &Theta) -> Result<Self> {
        let ip = stats.n_nonzero as u64;
        if ip == 0 {
            return Err(Error::Domain("continuous proposal needs at least one positive record".into()));
        }
        let w_total: f64 = stats.nonzero_y.iter().zip(&stats.nonzero_d).map(|(y, d)| y * d).sum();
        let split: Vec<f64> =
            stats.nonzero_y.iter().zip(&stats.nonzero_d).map(|(y, d)| y * d / w_total).collect();
        let log_ratio = w_total.ln() - (theta.b + stats.d_plus).ln() - (theta.d + stats.y_plus).ln();

        let rho_scale = (theta.c / theta.d).max(ip as f64 / stats.y_plus).max(1.0);
        let hard_cap = ip + (10.0 * (stats.y_plus * rho_scale).ceil()).max(100.0) as u64;

        let mut log_pmf = Vec::new();
        let mut log_split_norm = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut n = ip;
        loop {
            let nf = n as f64;
            let norm: f64 = split.iter().map(|p| lgamma(p * nf + 1.0)).sum();
            let lf = nf * log_ratio + lgamma(theta.a + nf) + lgamma(theta.c + nf) - norm - lgamma((n - ip) as f64 + 1.0);
            if lf.is_nan() {
                return Err(Error::Underflow(format!("proposal log-mass is NaN at N+={n}")));
            }
            let declining = log_pmf.last().is_some_and(|&prev| lf < prev);
            log_pmf.push(lf);
            log_split_norm.push(norm);
            best = best.max(lf);
            if (declining && lf < best + SUPPORT_CUTOFF.ln()) || n >= hard_cap {
                break;
            }
            n += 1;
        }
        if !best.is_finite() {
            return Err(Error::Underflow("proposal normalization is not finite".into()));
        }
        let log_total = log_sum_exp(&log_pmf);
        let truncation_mass = (log_pmf[log_pmf.len() - 1] - log_total).exp();
        let sampler = FiniteSampler::from_log_weights(&log_pmf)
            .map_err(|_| Error::Underflow("proposal normalization underflowed".into()))?;
        Ok(Self { offset: ip, sampler, split, log_split_norm, truncation_mass })
    }

    pub fn support(&self) -> std::ops::RangeInclusive<u64> {
        self.offset..=self.offset + self.sampler.len() as u64 - 1
    }

    pub fn truncation_mass(&self) -> f64 {
        self.truncation_mass
    }

    /// Draws one particle into `counts` (positive records only) and returns
    /// `(N+, log-weight)`.
    fn draw(&self, rng: &mut RngStream, lnfact: &LnFactorial, counts: &mut [u64]) -> (u64, f64) {
        let idx = self.sampler.sample(rng);
        let n_plus = self.offset + idx as u64;
        multinomial_into(n_plus - self.offset, &self.split, rng, counts);
        let mut log_w = self.log_split_norm[idx];
        for c in counts.iter_mut() {
            *c += 1;
            log_w -= lnfact.get(*c);
        }
        (n_plus, log_w)
    }
}

fn generate_continuous(
    stats: &StratumStats,
    theta: &Theta,
    g: usize,
    rng: &mut RngStream,
    mut sink: impl FnMut(&[u64], u64, f64),
) -> Result<f64> {
    let proposal = ContinuousProposal::new(stats, theta)?;
    let lnfact = LnFactorial::new(*proposal.support().end() as usize + 1);
    let mut counts = vec![0u64; stats.n_nonzero];
    for _ in 0..g {
        let (n_plus, log_w) = proposal.draw(rng, &lnfact, &mut counts);
        sink(&counts, n_plus, log_w);
    }
    Ok(proposal.truncation_mass())
}

fn check_g(g: usize) -> Result<()> {
    if g == 0 {
        Err(Error::Domain("particle count G must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn zero_particles(stats: &StratumStats, g: usize) -> Vec<Particle> {
    vec![Particle { counts: vec![0; stats.n_obs], n_plus: 0, weight: 1.0 }; g]
}

fn finish_particles(stats: &StratumStats, raw: Vec<(Vec<u64>, u64, f64)>) -> Result<Vec<Particle>> {
    let max = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroWeight);
    }
    Ok(raw
        .into_iter()
        .map(|(mut counts, n_plus, lw)| {
            counts.resize(stats.n_obs, 0);
            Particle { counts, n_plus, weight: (lw - max).exp() }
        })
        .collect())
}

/// `G` weighted particles for a continuous stratum, weights scaled so the
/// largest is one.
pub fn sample_particles_continuous(
    stats: &StratumStats,
    theta_prime: &Theta,
    g: usize,
    rng: &mut RngStream,
) -> Result<Vec<Particle>> {
    check_g(g)?;
    if stats.is_all_zero() {
        return Ok(zero_particles(stats, g));
    }
    let mut raw = Vec::with_capacity(g);
    generate_continuous(stats, theta_prime, g, rng, |c, n, lw| raw.push((c.to_vec(), n, lw)))?;
    finish_particles(stats, raw)
}

/// Same sampler as [`sample_particles_continuous`], keeping only `N+`.
pub fn nplus_sample_continuous(
    stats: &StratumStats,
    theta_prime: &Theta,
    g: usize,
    rng: &mut RngStream,
) -> Result<NPlusSample> {
    check_g(g)?;
    if stats.is_all_zero() {
        return Ok(NPlusSample::degenerate(0, g));
    }
    let mut pairs = Vec::with_capacity(g);
    let trunc = generate_continuous(stats, theta_prime, g, rng, |_, n, lw| pairs.push((n, lw)))?;
    NPlusSample::from_log_weighted(&pairs, trunc)
}

pub fn moments_continuous(particles: &[Particle], stats: &StratumStats, theta_prime: &Theta) -> Result<StratumMoments> {
    moments_from_sample(&NPlusSample::from_particles(particles)?, stats, theta_prime, Kind::Continuous)
}

// ---------------------------------------------------------------------------
// discrete model

fn require_positive_total(stats: &StratumStats) -> Result<u64> {
    if stats.y_plus < 1.0 {
        return Err(Error::Domain("discrete reference distribution needs Y+ >= 1".into()));
    }
    Ok(stats.y_plus.round() as u64)
}

/// Exact pmf of `N+` given the pooled stratum total, on `{I+, ..., Y+}`.
///
/// Returns `(offset, probabilities)`.
pub fn reference_pmf_discrete(stats: &StratumStats, theta: &Theta) -> Result<(u64, Vec<f64>)> {
    let y_plus = require_positive_total(stats)?;
    let ip = stats.n_nonzero as u64;
    if ip > y_plus {
        return Err(Error::Domain("empty reference support".into()));
    }
    let yf = y_plus as f64;
    let log_rate = stats.d_plus.ln() - (theta.b + stats.d_plus).ln();
    let log_g: Vec<f64> = (ip..=y_plus)
        .map(|n| {
            let nf = n as f64;
            lgamma(theta.a + nf) + lgamma(theta.c + nf) + lgamma(theta.d + yf - nf) + nf * log_rate
                - lgamma(nf + 1.0)
                - lgamma(nf)
                - lgamma(yf - nf + 1.0)
        })
        .collect();
    let z = log_sum_exp(&log_g);
    if !z.is_finite() {
        return Err(Error::Underflow("reference pmf normalization".into()));
    }
    Ok((ip, log_g.iter().map(|l| (l - z).exp()).collect()))
}

/// `L` draws from the pooled-total pmf; they locate the proposal for `(mu, p)`.
pub fn reference_draws_discrete(
    stats: &StratumStats,
    theta_prime: &Theta,
    l: usize,
    rng: &mut RngStream,
) -> Result<Vec<u64>> {
    if l == 0 {
        return Err(Error::Domain("reference sample size L must be at least 1".into()));
    }
    let (offset, probs) = reference_pmf_discrete(stats, theta_prime)?;
    let sampler = FiniteSampler::from_weights(&probs)?;
    Ok((0..l).map(|_| offset + sampler.sample(rng) as u64).collect())
}

// share of the mixture spread evenly over its components
const DEFENSIVE: f64 = 0.1;

struct DiscreteProposal {
    y: Vec<u64>,
    log_d: Vec<f64>,
    // -lnΓ(k) - lnΓ(y-k+1) - lnΓ(k+1) for k = 1..=y, per positive record
    base: Vec<Vec<f64>>,
    mu_rate: f64,
    // mixture components: N+ value, its probability and the log of its
    // density constant, so the component density at (mu, p) is
    // exp(coef + n (ln mu + logit p)) times factors shared by all components
    nodes: Vec<u64>,
    picker: FiniteSampler,
    coef: Vec<f64>,
    a: f64,
    c: f64,
    d_y: f64,
}

impl DiscreteProposal {
    fn new(stats: &StratumStats, theta: &Theta, reference: &[u64]) -> Result<Self> {
        let y_plus = require_positive_total(stats)?;
        let ip = stats.n_nonzero as u64;
        if reference.is_empty() {
            return Err(Error::Domain("at least one reference draw is needed".into()));
        }
        if let Some(bad) = reference.iter().find(|&&n| n < ip || n > y_plus) {
            return Err(Error::Domain(format!("reference N+ {bad} outside [{ip}, {y_plus}]")));
        }
        let mut nodes: Vec<u64> = reference.iter().copied().chain([ip, y_plus]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let k = nodes.len() as f64;
        let l = reference.len() as f64;
        let probs: Vec<f64> = nodes
            .iter()
            .map(|n| {
                let hits = reference.iter().filter(|&&r| r == *n).count() as f64;
                (1.0 - DEFENSIVE) * hits / l + DEFENSIVE / k
            })
            .collect();
        let mu_rate = theta.b + stats.d_plus;
        let yf = y_plus as f64;
        let coef = nodes
            .iter()
            .zip(&probs)
            .map(|(&n, q)| {
                let n = n as f64;
                let (alpha, beta) = (theta.c + n, theta.d + yf - n);
                q.ln() + (theta.a + n) * mu_rate.ln() - lgamma(theta.a + n) - lgamma(alpha) - lgamma(beta)
                    + lgamma(alpha + beta)
            })
            .collect();
        let y: Vec<u64> = stats.nonzero_y.iter().map(|v| v.round() as u64).collect();
        let base = y
            .iter()
            .map(|&yi| {
                (1..=yi)
                    .map(|k| {
                        let k = k as f64;
                        -lgamma(k) - lgamma(yi as f64 - k + 1.0) - lgamma(k + 1.0)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            log_d: stats.nonzero_d.iter().map(|d| d.ln()).collect(),
            y,
            base,
            mu_rate,
            picker: FiniteSampler::from_weights(&probs)?,
            nodes,
            coef,
            a: theta.a,
            c: theta.c,
            d_y: theta.d + yf,
        })
    }

    /// Draws `(mu, p)` from the mixture, then every count from its
    /// conditional, and returns `(N+, log-weight)`.
    ///
    /// The weight is the joint posterior of `(N, mu, p)` over the joint
    /// proposal. The count factors cancel, leaving `Σ_i ln K_i` (`K_i` the
    /// normalizer of record `i`'s conditional) minus the log mixture density
    /// up to factors shared with the target.
    fn draw(&self, rng: &mut RngStream, counts: &mut [u64], scratch: &mut Vec<f64>) -> (u64, f64) {
        let n0 = self.nodes[self.picker.sample(rng)] as f64;
        let mu = sample_gamma(self.a + n0, self.mu_rate, rng).max(f64::MIN_POSITIVE);
        let p = sample_beta(self.c + n0, self.d_y - n0, rng).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let log_odds_mu = mu.ln() + p.ln() - (-p).ln_1p();
        let mut log_w = 0.0;
        let mut n_plus = 0u64;
        for (i, base) in self.base.iter().enumerate() {
            let lam = log_odds_mu + self.log_d[i];
            scratch.clear();
            scratch.extend(base.iter().enumerate().map(|(j, b)| (j + 1) as f64 * lam + b));
            let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            for t in scratch.iter_mut() {
                acc += (*t - max).exp();
                *t = acc;
            }
            let u = rng.uniform_open() * acc;
            let j = scratch.partition_point(|&c| c < u).min(scratch.len() - 1);
            let k = j as u64 + 1;
            debug_assert!(k <= self.y[i]);
            counts[i] = k;
            n_plus += k;
            log_w += max + acc.ln();
        }
        scratch.clear();
        scratch.extend(self.nodes.iter().zip(&self.coef).map(|(&n, c)| c + n as f64 * log_odds_mu));
        log_w -= log_sum_exp(scratch);
        (n_plus, log_w)
    }
}

fn generate_discrete(
    stats: &StratumStats,
    theta: &Theta,
    reference: &[u64],
    g: usize,
    rng: &mut RngStream,
    mut sink: impl FnMut(&[u64], u64, f64),
) -> Result<()> {
    let proposal = DiscreteProposal::new(stats, theta, reference)?;
    let mut counts = vec![0u64; stats.n_nonzero];
    let mut scratch = Vec::new();
    for _ in 0..g {
        let (n_plus, log_w) = proposal.draw(rng, &mut counts, &mut scratch);
        sink(&counts, n_plus, log_w);
    }
    Ok(())
}

/// `G` weighted particles for a discrete stratum from the mixture proposal
/// built on the reference draws.
pub fn sample_particles_discrete(
    stats: &StratumStats,
    theta_prime: &Theta,
    reference: &[u64],
    g: usize,
    rng: &mut RngStream,
) -> Result<Vec<Particle>> {
    check_g(g)?;
    if stats.is_all_zero() {
        return Ok(zero_particles(stats, g));
    }
    let mut raw = Vec::with_capacity(g);
    generate_discrete(stats, theta_prime, reference, g, rng, |c, n, lw| raw.push((c.to_vec(), n, lw)))?;
    finish_particles(stats, raw)
}

pub fn nplus_sample_discrete(
    stats: &StratumStats,
    theta_prime: &Theta,
    reference: &[u64],
    g: usize,
    rng: &mut RngStream,
) -> Result<NPlusSample> {
    check_g(g)?;
    if stats.is_all_zero() {
        return Ok(NPlusSample::degenerate(0, g));
    }
    let mut pairs = Vec::with_capacity(g);
    generate_discrete(stats, theta_prime, reference, g, rng, |_, n, lw| pairs.push((n, lw)))?;
    NPlusSample::from_log_weighted(&pairs, 0.0)
}

pub fn moments_discrete(particles: &[Particle], stats: &StratumStats, theta_prime: &Theta) -> Result<StratumMoments> {
    moments_from_sample(&NPlusSample::from_particles(particles)?, stats, theta_prime, Kind::Discrete)
}

// ---------------------------------------------------------------------------
// shared

/// θ-dependent part of the log posterior of the clump counts, which depends on
/// the counts only through `N+`.
pub fn log_target_nplus(stats: &StratumStats, theta: &Theta, kind: Kind, n_plus: u64) -> f64 {
    let n = n_plus as f64;
    match kind {
        Kind::Continuous => {
            lgamma(theta.a + n) + lgamma(theta.c + n)
                - n * ((theta.b + stats.d_plus).ln() + (theta.d + stats.y_plus).ln())
        }
        Kind::Discrete => {
            lgamma(theta.a + n) + lgamma(theta.c + n) + lgamma(theta.d + stats.y_plus - n)
                - n * (theta.b + stats.d_plus).ln()
        }
    }
}

/// Moves a sample drawn under `from` to target the posterior under `to`.
pub fn reweight_sample(
    sample: &NPlusSample,
    stats: &StratumStats,
    from: &Theta,
    to: &Theta,
    kind: Kind,
) -> Result<NPlusSample> {
    if from == to || stats.is_all_zero() {
        return Ok(sample.clone());
    }
    sample.reweighted(|n| log_target_nplus(stats, to, kind, n) - log_target_nplus(stats, from, kind, n))
}

/// Conditional moments from a weighted `N+` sample.
pub fn moments_from_sample(
    sample: &NPlusSample,
    stats: &StratumStats,
    theta: &Theta,
    kind: Kind,
) -> Result<StratumMoments> {
    let total: f64 = sample.weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroWeight);
    }
    let e_n = sample.mean();
    let rate_mu = theta.b + stats.d_plus;
    let e_mu = (theta.a + e_n) / rate_mu;
    let e_ln_mu = sample.expect(|n| psi(theta.a + n)) - rate_mu.ln();
    let mark = match kind {
        Kind::Continuous => {
            let rate_rho = theta.d + stats.y_plus;
            MarkMoments::Rate {
                e_rho: (theta.c + e_n) / rate_rho,
                e_ln_rho: sample.expect(|n| psi(theta.c + n)) - rate_rho.ln(),
            }
        }
        Kind::Discrete => {
            let psi_total = psi(theta.c + theta.d + stats.y_plus);
            MarkMoments::Probability {
                e_ln_p: sample.expect(|n| psi(theta.c + n)) - psi_total,
                e_ln_1mp: sample.expect(|n| psi(theta.d + stats.y_plus - n)) - psi_total,
            }
        }
    };
    Ok(StratumMoments { e_mu, e_ln_mu, mark, e_n_plus: e_n, ess: sample.ess })
}

/// Runs the E-step sampler for one stratum and returns the `N+` sample.
///
/// For discrete data the proposal location is drawn with `l_ref` reference
/// draws from the same stream.
pub fn nplus_sample(
    stats: &StratumStats,
    theta: &Theta,
    kind: Kind,
    g: usize,
    l_ref: usize,
    rng: &mut RngStream,
) -> Result<NPlusSample> {
    match kind {
        Kind::Continuous => nplus_sample_continuous(stats, theta, g, rng),
        Kind::Discrete => {
            if stats.is_all_zero() {
                check_g(g)?;
                return Ok(NPlusSample::degenerate(0, g));
            }
            let reference = reference_draws_discrete(stats, theta, l_ref, rng)?;
            nplus_sample_discrete(stats, theta, &reference, g, rng)
        }
    }
}

// ---------------------------------------------------------------------------
// exact enumeration

/// Exact posterior over clump-count vectors on a (possibly truncated) lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// `(counts, probability)`; counts in the same layout as [`Particle::counts`].
    pub states: Vec<(Vec<u64>, f64)>,
}

impl ExactPosterior {
    pub fn n_plus_pmf(&self) -> NPlusSample {
        let mut agg: std::collections::BTreeMap<u64, f64> = Default::default();
        for (c, p) in &self.states {
            *agg.entry(c.iter().sum()).or_default() += p;
        }
        NPlusSample {
            values: agg.keys().copied().collect(),
            sq_weights: vec![0.0; agg.len()],
            weights: agg.values().copied().collect(),
            ess: f64::INFINITY,
            n_particles: self.states.len(),
            truncation_mass: 0.0,
        }
    }
}

/// Upper bounds on the lattice [`enumerate_posterior`] agrees to visit.
pub const MAX_CONTINUOUS_NONZERO: usize = 3;
pub const MAX_CONTINUOUS_CAP: u64 = 80;
pub const MAX_DISCRETE_STATES: u64 = 1_000_000;

/// Exact posterior of the clump counts given the stratum data.
///
/// Continuous strata enumerate `N_i ∈ {1, ..., cap}` on each positive record
/// (at most three of them, `cap <= 80`); discrete strata enumerate the finite
/// support `1 <= N_i <= y_i` and ignore `cap`.
pub fn enumerate_posterior(stats: &StratumStats, theta_prime: &Theta, kind: Kind, cap: u64) -> Result<ExactPosterior> {
    if stats.is_all_zero() {
        return Ok(ExactPosterior { states: vec![(vec![0; stats.n_obs], 1.0)] });
    }
    let (ranges, per_record): (Vec<u64>, Box<dyn Fn(usize, u64) -> f64>) = match kind {
        Kind::Continuous => {
            if stats.n_nonzero > MAX_CONTINUOUS_NONZERO || cap > MAX_CONTINUOUS_CAP || cap == 0 {
                return Err(Error::Guard(format!(
                    "continuous enumeration needs I+ <= {MAX_CONTINUOUS_NONZERO} and 1 <= cap <= {MAX_CONTINUOUS_CAP}"
                )));
            }
            let log_yd: Vec<f64> = stats.nonzero_y.iter().zip(&stats.nonzero_d).map(|(y, d)| (y * d).ln()).collect();
            (
                vec![cap; stats.n_nonzero],
                Box::new(move |i, k| {
                    let k = k as f64;
                    k * log_yd[i] - lgamma(k) - lgamma(k + 1.0)
                }),
            )
        }
        Kind::Discrete => {
            let ys: Vec<u64> = stats.nonzero_y.iter().map(|y| y.round() as u64).collect();
            let states = ys.iter().try_fold(1u64, |acc, &y| acc.checked_mul(y));
            if states.is_none_or(|s| s > MAX_DISCRETE_STATES) {
                return Err(Error::Guard(format!("discrete enumeration needs Π y_i <= {MAX_DISCRETE_STATES}")));
            }
            let log_d: Vec<f64> = stats.nonzero_d.iter().map(|d| d.ln()).collect();
            let ys_f: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
            (
                ys,
                Box::new(move |i, k| {
                    let k = k as f64;
                    k * log_d[i] - lgamma(k) - lgamma(ys_f[i] - k + 1.0) - lgamma(k + 1.0)
                }),
            )
        }
    };
    let per_total = |n: u64| log_target_nplus(stats, theta_prime, kind, n);

    let mut states = Vec::new();
    let mut logs = Vec::new();
    let mut current = vec![1u64; ranges.len()];
    loop {
        let n_plus: u64 = current.iter().sum();
        let lp: f64 =
            current.iter().enumerate().map(|(i, &k)| per_record(i, k)).sum::<f64>() + per_total(n_plus);
        let mut counts = current.clone();
        counts.resize(stats.n_obs, 0);
        states.push(counts);
        logs.push(lp);
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == current.len() {
                let z = log_sum_exp(&logs);
                return Ok(ExactPosterior {
                    states: states.into_iter().zip(logs).map(|(c, l)| (c, (l - z).exp())).collect(),
                });
            }
            if current[pos] < ranges[pos] {
                current[pos] += 1;
                break;
            }
            current[pos] = 1;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;

    fn stratum(ys: &[f64], ds: &[f64]) -> Stratum {
        let obs = ys.iter().zip(ds).map(|(&y, &effort)| Observation { y, effort }).collect();
        Stratum::new("t", obs).unwrap()
    }

    #[test]
    fn stats_arithmetic() {
        let s = stratum_stats(&stratum(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]));
        assert_eq!((s.y_plus, s.d_plus, s.n_nonzero, s.n_obs), (0.0, 3.0, 0, 3));
        let s = stratum_stats(&stratum(&[2.5, 0.0, 5.2], &[1.0, 2.0, 1.0]));
        assert!((s.y_plus - 7.7).abs() < 1e-12);
        assert_eq!((s.d_plus, s.n_nonzero), (4.0, 2));
    }

    #[test]
    fn stats_permutation_invariant() {
        let a = stratum_stats(&stratum(&[0.1, 0.0, 3.3, 7.25, 0.2], &[1.0, 0.7, 1.3, 0.9, 1.1]));
        let b = stratum_stats(&stratum(&[7.25, 0.2, 0.0, 0.1, 3.3], &[0.9, 1.1, 0.7, 1.0, 1.3]));
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_stratum_particles() {
        let s = stratum_stats(&stratum(&[0.0, 0.0], &[1.0, 1.0]));
        let theta = Theta::new(1.0, 1.0, 5.0, 13.0).unwrap();
        let mut rng = RngStream::new(0, 0);
        for ps in [
            sample_particles_continuous(&s, &theta, 10, &mut rng).unwrap(),
            sample_particles_discrete(&s, &theta, &[1], 10, &mut rng).unwrap(),
        ] {
            assert_eq!(ps.len(), 10);
            assert!(ps.iter().all(|p| p.n_plus == 0 && p.weight == 1.0 && p.counts == vec![0, 0]));
        }
        let m = moments_continuous(&sample_particles_continuous(&s, &theta, 5, &mut rng).unwrap(), &s, &theta).unwrap();
        assert!((m.e_mu - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.mark, MarkMoments::Rate { e_rho: 5.0 / 13.0, e_ln_rho: psi(5.0) - 13f64.ln() });
        let md = moments_discrete(&sample_particles_discrete(&s, &theta, &[1], 5, &mut rng).unwrap(), &s, &theta).unwrap();
        match md.mark {
            MarkMoments::Probability { e_ln_p, e_ln_1mp } => {
                assert!((e_ln_p - (psi(5.0) - psi(18.0))).abs() < 1e-14);
                assert!((e_ln_1mp - (psi(13.0) - psi(18.0))).abs() < 1e-14);
            }
            _ => panic!("wrong mark kind"),
        }
    }

    #[test]
    fn single_positive_record_has_unit_weights() {
        let s = stratum_stats(&stratum(&[3.7, 0.0], &[1.0, 1.0]));
        let theta = Theta::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let ps = sample_particles_continuous(&s, &theta, 500, &mut RngStream::new(1, 1)).unwrap();
        for p in &ps {
            assert_eq!(p.counts[0], p.n_plus);
            assert_eq!(p.counts[1], 0);
            assert!((p.weight - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn particle_invariants_hold() {
        let s = stratum_stats(&stratum(&[1.5, 0.0, 4.0, 0.3], &[1.0, 1.0, 2.0, 0.5]));
        let theta = Theta::new(2.0, 1.0, 2.0, 1.0).unwrap();
        for p in sample_particles_continuous(&s, &theta, 2000, &mut RngStream::new(4, 4)).unwrap() {
            assert_eq!(p.counts.iter().sum::<u64>(), p.n_plus);
            assert!(p.counts[..3].iter().all(|&c| c >= 1));
            assert_eq!(p.counts[3], 0);
            assert!(p.weight.is_finite() && p.weight >= 0.0);
        }
        let s = stratum_stats(&stratum(&[3.0, 0.0, 2.0, 7.0], &[1.0, 1.0, 1.0, 2.0]));
        for p in sample_particles_discrete(&s, &theta, &[5], 2000, &mut RngStream::new(5, 5)).unwrap() {
            assert_eq!(p.counts.iter().sum::<u64>(), p.n_plus);
            for (c, y) in p.counts[..3].iter().zip(&s.nonzero_y) {
                assert!(*c >= 1 && *c as f64 <= *y);
            }
            assert_eq!(p.counts[3], 0);
            assert!(p.weight.is_finite() && p.weight >= 0.0);
        }
    }

    #[test]
    fn forced_discrete_counts() {
        let s = stratum_stats(&stratum(&[1.0, 1.0], &[1.0, 1.0]));
        let theta = Theta::new(2.0, 2.0, 2.0, 2.0).unwrap();
        let ps = sample_particles_discrete(&s, &theta, &[2], 100, &mut RngStream::new(6, 6)).unwrap();
        assert!(ps.iter().all(|p| p.counts == vec![1, 1]));
        let m = moments_discrete(&ps, &s, &theta).unwrap();
        assert!((m.e_n_plus - 2.0).abs() < 1e-12);
        match m.mark {
            MarkMoments::Probability { e_ln_p, .. } => assert!((e_ln_p - (psi(4.0) - psi(6.0))).abs() < 1e-12),
            _ => unreachable!(),
        }
    }

    #[test]
    fn reference_degenerate_support() {
        let s = stratum_stats(&stratum(&[1.0, 1.0, 0.0], &[1.0, 1.0, 1.0]));
        let theta = Theta::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(reference_draws_discrete(&s, &theta, 50, &mut RngStream::new(0, 1)).unwrap(), vec![2; 50]);
        let zero = stratum_stats(&stratum(&[0.0], &[1.0]));
        assert!(reference_draws_discrete(&zero, &theta, 50, &mut RngStream::new(0, 1)).is_err());
    }

    #[test]
    fn degenerate_sample_reduces_to_plug_in() {
        let s = stratum_stats(&stratum(&[2.0, 3.0], &[1.0, 1.0]));
        let theta = Theta::new(1.5, 0.5, 2.5, 3.0).unwrap();
        let sample = NPlusSample::degenerate(4, 1);
        let m = moments_from_sample(&sample, &s, &theta, Kind::Continuous).unwrap();
        assert!((m.e_mu - 5.5 / 2.5).abs() < 1e-15);
        assert!((m.e_ln_mu - (psi(5.5) - 2.5f64.ln())).abs() < 1e-15);
        assert_eq!(m.mark, MarkMoments::Rate { e_rho: 6.5 / 8.0, e_ln_rho: psi(6.5) - 8f64.ln() });
        let m = moments_from_sample(&sample, &s, &theta, Kind::Discrete).unwrap();
        assert_eq!(
            m.mark,
            MarkMoments::Probability { e_ln_p: psi(6.5) - psi(10.5), e_ln_1mp: psi(4.0) - psi(10.5) }
        );
    }

    #[test]
    fn enumeration_guards_and_normalization() {
        let theta = Theta::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let big = stratum_stats(&stratum(&[1.0, 2.0, 3.0, 4.0], &[1.0; 4]));
        assert!(matches!(enumerate_posterior(&big, &theta, Kind::Continuous, 10), Err(Error::Guard(_))));
        let s = stratum_stats(&stratum(&[1.0, 2.0], &[1.0; 2]));
        assert!(matches!(enumerate_posterior(&s, &theta, Kind::Continuous, 81), Err(Error::Guard(_))));
        let huge = stratum_stats(&stratum(&[1000.0, 1001.0, 2.0], &[1.0; 3]));
        assert!(matches!(enumerate_posterior(&huge, &theta, Kind::Discrete, 0), Err(Error::Guard(_))));
        let post = enumerate_posterior(&s, &theta, Kind::Continuous, 30).unwrap();
        let total: f64 = post.states.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let zero = stratum_stats(&stratum(&[0.0, 0.0], &[1.0; 2]));
        let post = enumerate_posterior(&zero, &theta, Kind::Continuous, 30).unwrap();
        assert_eq!(post.states, vec![(vec![0, 0], 1.0)]);
    }

    #[test]
    fn g_must_be_positive() {
        let s = stratum_stats(&stratum(&[1.0], &[1.0]));
        let theta = Theta::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(sample_particles_continuous(&s, &theta, 0, &mut RngStream::new(0, 0)).is_err());
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn continuous_sampler_matches_enumeration() {
        let s = stratum_stats(&stratum(&[2.5, 0.0, 5.2], &[1.0, 2.0, 1.0]));
        let theta = Theta::new(1.0, 1.0, 5.0, 13.0).unwrap();
        let exact = enumerate_posterior(&s, &theta, Kind::Continuous, 60).unwrap().n_plus_pmf();
        let est = nplus_sample_continuous(&s, &theta, 100_000, &mut RngStream::new(11, 0)).unwrap();
        assert!(rel(est.mean(), exact.mean()) < 0.005, "{} vs {}", est.mean(), exact.mean());
        let me = moments_from_sample(&exact, &s, &theta, Kind::Continuous).unwrap();
        let mi = moments_from_sample(&est, &s, &theta, Kind::Continuous).unwrap();
        assert!(rel(mi.e_mu, me.e_mu) < 0.005);
    }

    #[test]
    fn reweighting_matches_fresh_target() {
        let s = stratum_stats(&stratum(&[2.5, 0.0, 5.2], &[1.0, 2.0, 1.0]));
        let from = Theta::new(1.0, 1.0, 5.0, 13.0).unwrap();
        let to = Theta::new(1.3, 0.8, 4.0, 10.0).unwrap();
        for kind in [Kind::Continuous] {
            let exact_from = enumerate_posterior(&s, &from, kind, 60).unwrap().n_plus_pmf();
            let exact_to = enumerate_posterior(&s, &to, kind, 60).unwrap().n_plus_pmf();
            let moved = reweight_sample(&exact_from, &s, &from, &to, kind).unwrap();
            assert!(rel(moved.mean(), exact_to.mean()) < 1e-9);
        }
        let est = nplus_sample_continuous(&s, &from, 5000, &mut RngStream::new(3, 3)).unwrap();
        let moved = reweight_sample(&est, &s, &from, &to, Kind::Continuous).unwrap();
        assert!(moved.ess < est.ess && moved.ess > 0.0);
        let back = reweight_sample(&moved, &s, &to, &from, Kind::Continuous).unwrap();
        assert!((back.ess - est.ess).abs() < 1e-6 * est.ess);
    }

    #[test]
    fn discrete_sampler_matches_enumeration() {
        let s = stratum_stats(&stratum(&[3.0, 0.0, 5.0, 2.0], &[1.0, 1.0, 1.5, 1.0]));
        let theta = Theta::new(1.0, 1.0, 5.0, 13.0).unwrap();
        let exact = enumerate_posterior(&s, &theta, Kind::Discrete, 0).unwrap().n_plus_pmf();
        let mut rng = RngStream::new(12, 0);
        let est = nplus_sample(&s, &theta, Kind::Discrete, 100_000, 200, &mut rng).unwrap();
        assert!(rel(est.mean(), exact.mean()) < 0.005, "{} vs {}", est.mean(), exact.mean());
    }

    #[test]
    fn discrete_sampler_mean_and_variance_across_seeds() {
        let s = stratum_stats(&stratum(&[1.0, 5.0], &[1.0, 1.0]));
        let theta = Theta::new(1.5, 1.2, 2.0, 3.0).unwrap();
        let exact = enumerate_posterior(&s, &theta, Kind::Discrete, 0).unwrap().n_plus_pmf();
        let var = |x: &NPlusSample| {
            let m = x.mean();
            x.expect(|n| (n - m) * (n - m))
        };
        let (mut mean_sum, mut var_sum) = (0.0, 0.0);
        for seed in 0..4 {
            let est = nplus_sample(&s, &theta, Kind::Discrete, 100_000, 200, &mut RngStream::new(seed, 1)).unwrap();
            mean_sum += est.mean();
            var_sum += var(&est);
        }
        assert!(rel(mean_sum / 4.0, exact.mean()) < 0.002, "{} vs {}", mean_sum / 4.0, exact.mean());
        assert!(rel(var_sum / 4.0, var(&exact)) < 0.01, "{} vs {}", var_sum / 4.0, var(&exact));
    }
}
