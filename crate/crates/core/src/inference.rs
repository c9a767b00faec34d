//! Monte-Carlo EM driver and the quantities derived from a fit: score,
//! empirical information matrix, Wald regions, random-effect predictors, and
//! the exact marginal likelihood used to check them.
//!
//! Each E-step draws importance samples of `N+` per stratum. Within a stage of
//! constant particle count the same particles are reweighted to the current θ
//! (the targets depend on θ only through `N+`), so iterations inside a stage
//! follow a deterministic EM map and the stopping rule can be met at any
//! precision. Particles are redrawn at every ramp iteration, when the
//! schedule reaches its final count, and whenever reweighting has lost too
//! much effective sample size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estep::{
    moments_from_sample, nplus_sample, reweight_sample, stratum_stats, NPlusSample, StratumMoments, StratumStats,
};
use crate::model::{Dataset, Kind, Theta};
use crate::mstep::{m_step, q_gradient, q_value, MStepInput};
use crate::rng::RngStream;
use crate::specfun::{lgamma, psi, psi1, LnFactorial};

pub type Matrix4 = [[f64; 4]; 4];

/// Settings of [`mcem_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McemConfig {
    /// Particle count per iteration; the last entry applies to all later
    /// iterations.
    pub g_schedule: Vec<usize>,
    pub max_iter: usize,
    /// Stop once three consecutive iterations at the final particle count
    /// change no component of θ by more than `10^-stop_decimals`.
    pub stop_decimals: u32,
    /// Reference draws locating the discrete proposal.
    pub l_ref: usize,
    pub seed: u64,
    pub kind: Kind,
    /// Particle count for the evaluation at the estimate.
    pub g_final: usize,
    /// Levels of the confidence regions reported with the fit.
    pub levels: Vec<f64>,
    /// Redraw when some stratum's ESS falls below this fraction of its value
    /// at the start of the stage.
    pub min_ess_ratio: f64,
    /// Consecutive M-steps allowed to keep a block of θ before giving up.
    pub max_infeasible: usize,
}

impl Default for McemConfig {
    fn default() -> Self {
        let mut g_schedule = vec![200; 5];
        g_schedule.extend([1000; 3]);
        g_schedule.push(4000);
        Self {
            g_schedule,
            max_iter: 2000,
            stop_decimals: 6,
            l_ref: 100,
            seed: 0,
            kind: Kind::Continuous,
            g_final: 10_000,
            levels: vec![0.90, 0.95],
            min_ess_ratio: 0.5,
            max_infeasible: 10,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.g_schedule.is_empty() || self.g_schedule.contains(&0) {
            return bad("g_schedule must be non-empty with positive entries");
        }
        if self.g_schedule.windows(2).any(|w| w[1] < w[0]) {
            return bad("g_schedule must be non-decreasing");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if self.l_ref == 0 || self.g_final == 0 {
            return bad("l_ref and g_final must be positive");
        }
        if self.stop_decimals > 15 {
            return bad("stop_decimals must be at most 15");
        }
        if self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return bad("levels must lie in (0, 1)");
        }
        if !(self.min_ess_ratio > 0.0 && self.min_ess_ratio <= 1.0) {
            return bad("min_ess_ratio must lie in (0, 1]");
        }
        Ok(())
    }

    /// Particle count at iteration `t` (0-based).
    pub fn g_at(&self, t: usize) -> usize {
        self.g_schedule[t.min(self.g_schedule.len() - 1)]
    }
}

/// Per-component Wald intervals and the Wald ellipsoid
/// `{θ : (θ - center)' shape (θ - center) <= radius_sq}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub level: f64,
    pub center: Theta,
    /// `(lower, upper)` for a, b, c, d.
    pub intervals: [(f64, f64); 4],
    /// Inverse covariance.
    pub shape: Matrix4,
    pub radius_sq: f64,
}

impl ConfidenceRegion {
    pub fn ellipsoid_contains(&self, theta: &Theta) -> bool {
        let d: Vec<f64> = theta.as_array().iter().zip(self.center.as_array()).map(|(x, c)| x - c).collect();
        let mut q = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                q += d[i] * self.shape[i][j] * d[j];
            }
        }
        q <= self.radius_sq
    }

    pub fn interval_contains(&self, k: usize, value: f64) -> bool {
        let (lo, hi) = self.intervals[k];
        lo <= value && value <= hi
    }
}

/// Conditional-mean predictors of one stratum's random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub stratum: String,
    pub mu: f64,
    /// `rho` for continuous data, `p` for discrete data.
    pub mark: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDiagnostics {
    pub stratum: String,
    pub ess: f64,
    pub n_particles: usize,
    pub truncation_mass: f64,
    pub e_n_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub strata: Vec<StratumDiagnostics>,
    /// Human-readable notes on anything unusual during the fit.
    pub flags: Vec<String>,
    /// Number of times fresh particles were drawn during the iterations.
    pub draws: usize,
    /// Smallest increase of the EM objective over one M-step.
    pub min_q_gain: f64,
    /// Largest absolute score component at the estimate, divided by S, from
    /// the fresh evaluation sample.
    pub score_norm_per_stratum: f64,
    /// Per iteration, the same norm at the current θ from that iteration's
    /// sample.
    pub score_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: Kind,
    pub config: McemConfig,
    pub initial_theta: Theta,
    pub theta_hat: Theta,
    pub converged: bool,
    pub iterations: usize,
    /// θ before the first and after every iteration.
    pub trajectory: Vec<Theta>,
    pub score_at_hat: [f64; 4],
    pub fisher: Matrix4,
    /// Inverse of `fisher`; absent when `fisher` is not positive definite.
    pub covariance: Option<Matrix4>,
    pub regions: Vec<ConfidenceRegion>,
    pub predictors: Vec<Predictor>,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// initialization

fn mean_var(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    Some((m, v))
}

// (mu, mark) matching the first two moments of per-effort data
fn stratum_moment_estimate(z: &[f64], kind: Kind) -> Option<(f64, f64)> {
    let (m, v) = mean_var(z)?;
    if !(m > 0.0 && v > 0.0) {
        return None;
    }
    Some(match kind {
        Kind::Continuous => {
            let rho = 2.0 * m / v;
            (m * rho, rho)
        }
        Kind::Discrete => {
            let p = (2.0 / (v / m + 1.0)).clamp(0.02, 0.98);
            (m * p, p)
        }
    })
}

fn gamma_match(xs: &[f64]) -> (f64, f64) {
    match mean_var(xs) {
        Some((m, v)) if m > 0.0 && v > 0.0 => (m * m / v, m / v),
        _ => {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (1.0, 1.0 / m)
        }
    }
}

fn beta_match(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    match mean_var(xs) {
        Some((_, v)) if v > 0.0 && v < m * (1.0 - m) => {
            let k = m * (1.0 - m) / v - 1.0;
            (m * k, (1.0 - m) * k)
        }
        _ => (2.0 * m, 2.0 * (1.0 - m)),
    }
}

/// Starting point of the EM iterations: per-stratum moment estimates of the
/// random effects, then moment matching of their across-strata spread.
pub fn initial_theta(dataset: &Dataset) -> Result<Theta> {
    let kind = dataset.kind;
    let per_effort = |s: &crate::model::Stratum| -> Vec<f64> { s.observations.iter().map(|o| o.y / o.effort).collect() };
    let mut mus = Vec::new();
    let mut marks = Vec::new();
    for s in &dataset.strata {
        if let Some((mu, mark)) = stratum_moment_estimate(&per_effort(s), kind) {
            mus.push(mu);
            marks.push(mark);
        }
    }
    if mus.is_empty() {
        let pooled: Vec<f64> = dataset.strata.iter().flat_map(per_effort).collect();
        if let Some((mu, mark)) = stratum_moment_estimate(&pooled, kind) {
            mus.push(mu);
            marks.push(mark);
        }
    }
    let clamp = |x: f64| if x.is_finite() { x.clamp(1e-2, 1e3) } else { 1.0 };
    if mus.is_empty() {
        return Theta::new(1.0, 1.0, 1.0, 1.0);
    }
    let (a, b) = gamma_match(&mus);
    let (c, d) = match kind {
        Kind::Continuous => gamma_match(&marks),
        Kind::Discrete => beta_match(&marks),
    };
    Theta::new(clamp(a), clamp(b), clamp(c), clamp(d))
}

// ---------------------------------------------------------------------------
// driver

/// Importance samples of `N+` for every stratum, one independent stream per
/// `(stratum, draw)`.
pub fn draw_samples(
    stats: &[StratumStats],
    theta: &Theta,
    kind: Kind,
    g: usize,
    l_ref: usize,
    seed: u64,
    draw: u64,
) -> Result<Vec<NPlusSample>> {
    stats
        .par_iter()
        .enumerate()
        .map(|(s, st)| {
            let mut rng = RngStream::derive(seed, &[s as u64, draw]);
            nplus_sample(st, theta, kind, g, l_ref, &mut rng)
        })
        .collect()
}

fn all_moments(
    stats: &[StratumStats],
    samples: &[NPlusSample],
    theta: &Theta,
    kind: Kind,
) -> Result<Vec<StratumMoments>> {
    stats.iter().zip(samples).map(|(st, sm)| moments_from_sample(sm, st, theta, kind)).collect()
}

fn check_identifiable(dataset: &Dataset) -> Result<()> {
    if dataset.strata.iter().any(|s| s.has_nonzero()) {
        Ok(())
    } else {
        Err(Error::Unidentifiable(format!(
            "every observation is zero; the {} parameters (c, d) are not identifiable",
            if dataset.kind == Kind::Continuous { "mark-rate" } else { "mark-probability" }
        )))
    }
}

fn max_abs(v: &[f64; 4]) -> f64 {
    v.iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

/// Fits `(a, b, c, d)` by Monte-Carlo EM.
pub fn mcem_fit(dataset: &Dataset, config: &McemConfig) -> Result<FitResult> {
    config.validate()?;
    dataset.validate()?;
    if dataset.kind != config.kind {
        return Err(Error::Config(format!(
            "dataset is {} but the configuration asks for {}",
            dataset.kind.name(),
            config.kind.name()
        )));
    }
    check_identifiable(dataset)?;
    let kind = dataset.kind;
    let stats: Vec<StratumStats> = dataset.strata.iter().map(stratum_stats).collect();
    let initial = initial_theta(dataset)?;
    let tol = 10f64.powi(-(config.stop_decimals as i32));
    let last_ramp = config.g_schedule.len() - 1;

    let mut theta = initial;
    let mut trajectory = vec![theta];
    let mut flags = Vec::new();
    if dataset.n_strata() == 1 {
        flags.push("single stratum: the random-effect spread is not identifiable; covariance is unreliable".into());
    }
    // (θ at draw time, samples at draw time, ESS at draw time)
    let mut stage: Option<(Theta, Vec<NPlusSample>)> = None;
    let mut draws = 0usize;
    let mut small_steps = 0usize;
    let mut infeasible_run = 0usize;
    let mut min_q_gain = f64::INFINITY;
    let mut score_trajectory = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..config.max_iter {
        iterations = t + 1;
        let mut current = None;
        if t > last_ramp {
            if let Some((from, base)) = &stage {
                let moved: Vec<NPlusSample> = stats
                    .iter()
                    .zip(base)
                    .map(|(st, sm)| reweight_sample(sm, st, from, &theta, kind))
                    .collect::<Result<_>>()?;
                let degraded = moved.iter().zip(base).any(|(m, b)| m.ess < config.min_ess_ratio * b.ess);
                if !degraded {
                    current = Some(moved);
                }
            }
        }
        let samples = match current {
            Some(s) => s,
            None => {
                let fresh = draw_samples(&stats, &theta, kind, config.g_at(t), config.l_ref, config.seed, draws as u64)?;
                draws += 1;
                stage = Some((theta, fresh.clone()));
                fresh
            }
        };

        let score = score_monitor(&stats, &theta, &samples, kind)?;
        score_trajectory.push(max_abs(&score) / stats.len() as f64);
        let input = MStepInput::from_moments(&all_moments(&stats, &samples, &theta, kind)?)?;
        let outcome = m_step(&input, &theta)?;
        if outcome.flags.is_empty() {
            infeasible_run = 0;
        } else {
            infeasible_run += 1;
            flags.push(format!("iteration {}: M-step kept {:?}", t + 1, outcome.flags));
            if infeasible_run > config.max_infeasible {
                return Err(Error::Infeasible(format!(
                    "M-step found no solution in {infeasible_run} consecutive iterations"
                )));
            }
        }
        min_q_gain = min_q_gain.min(q_value(&outcome.theta, &input) - q_value(&theta, &input));
        let change = outcome.theta.max_abs_diff(&theta);
        theta = outcome.theta;
        trajectory.push(theta);

        if t >= last_ramp && change < tol {
            small_steps += 1;
            if small_steps >= 3 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }
    if !converged {
        flags.push(format!("no convergence within {} iterations", config.max_iter));
    }

    let eval_draw = 1u64 << 40;
    let samples = draw_samples(&stats, &theta, kind, config.g_final, config.l_ref, config.seed, eval_draw)?;
    let score_at_hat = score_monitor(&stats, &theta, &samples, kind)?;
    let fisher = fisher_information(&stats, &theta, &samples, kind)?;
    let covariance = match spd_inverse(&fisher) {
        Ok(c) => Some(c),
        Err(_) => {
            flags.push("information matrix is not positive definite; no covariance reported".into());
            None
        }
    };
    let regions = match &covariance {
        Some(cov) => config.levels.iter().map(|&l| confidence_region(&theta, cov, l)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let predictors = predict_random_effects(dataset, &stats, &theta, &samples, kind);
    let strata = dataset
        .strata
        .iter()
        .zip(&samples)
        .map(|(s, sm)| StratumDiagnostics {
            stratum: s.id.clone(),
            ess: sm.ess,
            n_particles: sm.n_particles,
            truncation_mass: sm.truncation_mass,
            e_n_plus: sm.mean(),
        })
        .collect();
    let s = stats.len() as f64;
    let diagnostics = Diagnostics {
        strata,
        flags,
        draws,
        min_q_gain,
        score_norm_per_stratum: max_abs(&score_at_hat) / s,
        score_trajectory,
    };
    Ok(FitResult {
        kind,
        config: config.clone(),
        initial_theta: initial,
        theta_hat: theta,
        converged,
        iterations,
        trajectory,
        score_at_hat,
        fisher,
        covariance,
        regions,
        predictors,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// score, information, predictors

/// Conditional expectation of the complete-data score at θ.
pub fn score_monitor(stats: &[StratumStats], theta: &Theta, samples: &[NPlusSample], kind: Kind) -> Result<[f64; 4]> {
    let input = MStepInput::from_moments(&all_moments(stats, samples, theta, kind)?)?;
    Ok(q_gradient(theta, &input))
}

// E[complete score | N+] up to terms that do not depend on N+, and the
// conditional covariance of the complete score given N+.
fn conditional_score(st: &StratumStats, theta: &Theta, kind: Kind, n: f64) -> ([f64; 4], Matrix4) {
    let (a_s, b_s) = (theta.a + n, theta.b + st.d_plus);
    let mut mean = [psi(a_s) - b_s.ln(), -a_s / b_s, 0.0, 0.0];
    let mut cov = [[0.0; 4]; 4];
    cov[0][0] = psi1(a_s);
    cov[0][1] = -1.0 / b_s;
    cov[1][0] = -1.0 / b_s;
    cov[1][1] = a_s / (b_s * b_s);
    match kind {
        Kind::Continuous => {
            let (c_s, d_s) = (theta.c + n, theta.d + st.y_plus);
            mean[2] = psi(c_s) - d_s.ln();
            mean[3] = -c_s / d_s;
            cov[2][2] = psi1(c_s);
            cov[2][3] = -1.0 / d_s;
            cov[3][2] = -1.0 / d_s;
            cov[3][3] = c_s / (d_s * d_s);
        }
        Kind::Discrete => {
            let (c_s, d_s) = (theta.c + n, theta.d + st.y_plus - n);
            let total = psi(c_s + d_s);
            let t1 = psi1(c_s + d_s);
            mean[2] = psi(c_s) - total;
            mean[3] = psi(d_s) - total;
            cov[2][2] = psi1(c_s) - t1;
            cov[2][3] = -t1;
            cov[3][2] = -t1;
            cov[3][3] = psi1(d_s) - t1;
        }
    }
    (mean, cov)
}

/// Observed information `-∇² ln L(θ)` estimated from the importance samples:
/// the expected complete-data information minus the conditional covariance of
/// the complete-data score, split per stratum into the expected conditional
/// covariance given `N+` and the covariance over `N+` of the conditional mean.
pub fn fisher_information(stats: &[StratumStats], theta: &Theta, samples: &[NPlusSample], kind: Kind) -> Result<Matrix4> {
    let s = stats.len() as f64;
    let mut info = [[0.0; 4]; 4];
    info[0][0] = s * psi1(theta.a);
    info[0][1] = -s / theta.b;
    info[1][0] = -s / theta.b;
    info[1][1] = s * theta.a / (theta.b * theta.b);
    match kind {
        Kind::Continuous => {
            info[2][2] = s * psi1(theta.c);
            info[2][3] = -s / theta.d;
            info[3][2] = -s / theta.d;
            info[3][3] = s * theta.c / (theta.d * theta.d);
        }
        Kind::Discrete => {
            let t = psi1(theta.c + theta.d);
            info[2][2] = s * (psi1(theta.c) - t);
            info[2][3] = -s * t;
            info[3][2] = -s * t;
            info[3][3] = s * (psi1(theta.d) - t);
        }
    }
    for (st, sm) in stats.iter().zip(samples) {
        let mut e_cov = [[0.0; 4]; 4];
        let mut e_mean = [0.0; 4];
        let mut e_outer = [[0.0; 4]; 4];
        for (&n, &w) in sm.values.iter().zip(&sm.weights) {
            let (m, c) = conditional_score(st, theta, kind, n as f64);
            for i in 0..4 {
                e_mean[i] += w * m[i];
                for j in 0..4 {
                    e_cov[i][j] += w * c[i][j];
                    e_outer[i][j] += w * m[i] * m[j];
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let between = e_outer[i][j] - e_mean[i] * e_mean[j];
                info[i][j] -= e_cov[i][j] + between;
            }
        }
    }
    for i in 0..4 {
        for j in 0..i {
            let avg = 0.5 * (info[i][j] + info[j][i]);
            if (info[i][j] - info[j][i]).abs() > 1e-10 * avg.abs().max(1.0) {
                return Err(Error::Domain("information matrix assembly lost symmetry".into()));
            }
            info[i][j] = avg;
            info[j][i] = avg;
        }
    }
    Ok(info)
}

pub fn predict_random_effects(
    dataset: &Dataset,
    stats: &[StratumStats],
    theta: &Theta,
    samples: &[NPlusSample],
    kind: Kind,
) -> Vec<Predictor> {
    dataset
        .strata
        .iter()
        .zip(stats)
        .zip(samples)
        .map(|((s, st), sm)| {
            let e_n = sm.mean();
            let mark = match kind {
                Kind::Continuous => (theta.c + e_n) / (theta.d + st.y_plus),
                Kind::Discrete => (theta.c + e_n) / (theta.c + theta.d + st.y_plus),
            };
            Predictor { stratum: s.id.clone(), mu: (theta.a + e_n) / (theta.b + st.d_plus), mark }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// regions

/// Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(m: &Matrix4) -> Result<Matrix4> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut sum = m[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite 4×4 matrix.
pub fn spd_inverse(m: &Matrix4) -> Result<Matrix4> {
    let l = cholesky(m)?;
    // invert the lower triangle, then inv = L^-T L^-1
    let mut li = [[0.0; 4]; 4];
    for i in 0..4 {
        li[i][i] = 1.0 / l[i][i];
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum -= l[i][k] * li[k][j];
            }
            li[i][j] = sum / l[i][i];
        }
    }
    let mut inv = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            inv[i][j] = (i.max(j)..4).map(|k| li[k][i] * li[k][j]).sum();
        }
    }
    Ok(inv)
}

/// Upper `(1 + level)/2` quantile of the standard normal.
pub fn normal_two_sided_quantile(level: f64) -> f64 {
    std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(level)
}

/// Quantile of the chi-square law with four degrees of freedom.
pub fn chi2_4_quantile(level: f64) -> f64 {
    if level <= 0.0 {
        return 0.0;
    }
    let cdf = |x: f64| 1.0 - (-x / 2.0).exp() * (1.0 + x / 2.0);
    let mut hi = 8.0;
    while cdf(hi) < level {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn confidence_region(theta_hat: &Theta, covariance: &Matrix4, level: f64) -> Result<ConfidenceRegion> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} outside (0, 1)")));
    }
    let shape = spd_inverse(covariance)?;
    let z = normal_two_sided_quantile(level);
    let x = theta_hat.as_array();
    let mut intervals = [(0.0, 0.0); 4];
    for k in 0..4 {
        let h = z * covariance[k][k].sqrt();
        intervals[k] = (x[k] - h, x[k] + h);
    }
    Ok(ConfidenceRegion { level, center: *theta_hat, intervals, shape, radius_sq: chi2_4_quantile(level) })
}

// ---------------------------------------------------------------------------
// exact marginal likelihood

const MAX_CAP: usize = 1 << 14;
const TAIL_TOL: f64 = 1e-12;

// Sequence on {offset, offset+1, ...} stored as exp(log_scale) * values.
struct Scaled {
    offset: usize,
    log_scale: f64,
    values: Vec<f64>,
}

impl Scaled {
    fn from_logs(offset: usize, logs: &[f64]) -> Self {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Scaled { offset, log_scale: max, values: logs.iter().map(|l| (l - max).exp()).collect() }
    }

    fn convolve(&self, other: &Scaled, max_index: usize) -> Scaled {
        let offset = self.offset + other.offset;
        let len = (self.values.len() + other.values.len() - 1).min(max_index + 1 - offset.min(max_index + 1));
        let mut out = vec![0.0; len];
        for (i, &x) in self.values.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, &y) in other.values.iter().enumerate().take(len.saturating_sub(i)) {
                out[i + j] += x * y;
            }
        }
        let max = out.iter().copied().fold(0.0f64, f64::max);
        Scaled { offset, log_scale: self.log_scale + other.log_scale + max.ln(), values: out.iter().map(|v| v / max).collect() }
    }
}

// log of Σ_{N+} [Σ_{N : ΣN = N+} Π_i t_i(N_i)] exp(h(N+)) over N+ ≤ cap, and
// the share of the last tenth of the support.
fn stratum_sum(
    stats: &StratumStats,
    cap: usize,
    per_record: &dyn Fn(usize, usize) -> f64,
    record_len: &dyn Fn(usize) -> usize,
    h: &dyn Fn(usize) -> f64,
) -> (f64, f64) {
    let mut acc = Scaled { offset: 0, log_scale: 0.0, values: vec![1.0] };
    for i in 0..stats.n_nonzero {
        let len = record_len(i).min(cap);
        let logs: Vec<f64> = (1..=len).map(|k| per_record(i, k)).collect();
        acc = acc.convolve(&Scaled::from_logs(1, &logs), cap);
    }
    let terms: Vec<f64> = acc
        .values
        .iter()
        .enumerate()
        .map(|(j, &v)| if v > 0.0 { acc.log_scale + v.ln() + h(acc.offset + j) } else { f64::NEG_INFINITY })
        .collect();
    let total = crate::specfun::log_sum_exp(&terms);
    let tail_from = terms.len() - terms.len().div_ceil(10);
    let tail = crate::specfun::log_sum_exp(&terms[tail_from..]);
    (total, (tail - total).exp())
}

/// Exact log marginal density of one stratum's data.
pub fn stratum_marginal_loglik(stats: &StratumStats, theta: &Theta, kind: Kind) -> Result<f64> {
    let Theta { a, b, c, d } = *theta;
    let mu_norm = a * b.ln() - lgamma(a);
    let rate_mu = (b + stats.d_plus).ln();
    match kind {
        Kind::Continuous => {
            let ln_y: Vec<f64> = stats.nonzero_y.iter().map(|y| y.ln()).collect();
            let ln_d: Vec<f64> = stats.nonzero_d.iter().map(|d| d.ln()).collect();
            let rate_rho = (d + stats.y_plus).ln();
            let h = |n: usize| {
                let n = n as f64;
                mu_norm + lgamma(a + n) - (a + n) * rate_mu + c * d.ln() - lgamma(c) + lgamma(c + n)
                    - (c + n) * rate_rho
            };
            if stats.is_all_zero() {
                return Ok(a * (b / (b + stats.d_plus)).ln());
            }
            let mut cap = (stats.n_nonzero + 64).max(4 * stats.n_nonzero);
            loop {
                let lnf = LnFactorial::new(cap + 1);
                let per = |i: usize, k: usize| {
                    k as f64 * ln_d[i] + (k - 1) as f64 * ln_y[i] - lnf.get(k as u64) - lnf.get(k as u64 - 1)
                };
                let (total, tail) = stratum_sum(stats, cap, &per, &|_| usize::MAX, &h);
                if tail < TAIL_TOL {
                    return Ok(total);
                }
                if cap >= MAX_CAP {
                    return Err(Error::Guard(format!("marginal likelihood needs more than {MAX_CAP} clumps")));
                }
                cap *= 2;
            }
        }
        Kind::Discrete => {
            let y: Vec<usize> = stats.nonzero_y.iter().map(|y| y.round() as usize).collect();
            let y_plus = y.iter().sum::<usize>();
            if y_plus > MAX_CAP {
                return Err(Error::Guard(format!("marginal likelihood limited to Y+ <= {MAX_CAP}")));
            }
            let lnf = LnFactorial::new(y_plus + 1);
            let ln_d: Vec<f64> = stats.nonzero_d.iter().map(|d| d.ln()).collect();
            let yf = y_plus as f64;
            let ln_beta = |p: f64, q: f64| lgamma(p) + lgamma(q) - lgamma(p + q);
            let h = |n: usize| {
                let n = n as f64;
                mu_norm + lgamma(a + n) - (a + n) * rate_mu + ln_beta(c + n, d + yf - n) - ln_beta(c, d)
            };
            let per = |i: usize, k: usize| {
                let (yi, k) = (y[i] as u64, k as u64);
                lnf.get(yi - 1) - lnf.get(k - 1) - lnf.get(yi - k) + k as f64 * ln_d[i] - lnf.get(k)
            };
            let (total, _) = stratum_sum(stats, y_plus.max(1), &per, &|i| y[i], &h);
            Ok(total)
        }
    }
}

/// Exact log marginal likelihood `ln p(y | θ)`, summing clump counts out
/// analytically stratum by stratum.
pub fn marginal_loglik(dataset: &Dataset, theta: &Theta) -> Result<f64> {
    dataset.strata.iter().map(|s| stratum_marginal_loglik(&stratum_stats(s), theta, dataset.kind)).sum()
}
