//! Simulation studies and plot-ready summaries: bias and coverage grids,
//! goodness-of-fit histograms, and pp-plot data for the random-effect laws.

use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};
use crate::inference::{mcem_fit, McemConfig};
use crate::model::{simulate_hierarchy, Dataset, Design, Kind, Theta};
use crate::rng::RngStream;

/// A grid of designs `S × M` with uniform effort, simulated at `theta_true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyGrid {
    pub s_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub replicates: usize,
    pub theta_true: Theta,
    /// Confidence levels checked by the coverage study.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kind: Kind,
    #[serde(default = "default_effort")]
    pub effort: f64,
    /// Fit settings; `kind`, `seed` and `levels` are overridden per replicate.
    #[serde(default)]
    pub mcem: McemConfig,
}

fn default_levels() -> Vec<f64> {
    vec![0.90]
}

fn default_effort() -> f64 {
    1.0
}

impl StudyGrid {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.s_values.is_empty() || self.m_values.is_empty() || self.levels.is_empty() {
            return Err(Error::Config("s_values, m_values and levels must be non-empty".into()));
        }
        if self.s_values.contains(&0) || self.m_values.contains(&0) {
            return Err(Error::Config("strata counts and sizes must be positive".into()));
        }
        if !(self.effort > 0.0 && self.effort.is_finite()) {
            return Err(Error::Config("effort must be positive".into()));
        }
        self.theta_true.validate()?;
        self.fit_config(0).validate()
    }

    fn fit_config(&self, seed: u64) -> McemConfig {
        McemConfig { kind: self.kind, seed, levels: self.levels.clone(), ..self.mcem.clone() }
    }

    /// The simulated dataset of one replicate; shared by every study run on
    /// the same grid seed.
    pub fn replicate_dataset(&self, s: usize, m: usize, rep: usize) -> Result<Dataset> {
        let mut rng = RngStream::derive(self.seed, &[s as u64, m as u64, rep as u64]);
        Ok(simulate_hierarchy(&self.theta_true, &Design::uniform(s, m, self.effort), self.kind, &mut rng)?.0)
    }
}

/// What one simulated-and-fitted replicate produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub s: usize,
    pub m: usize,
    pub replicate: usize,
    pub theta_hat: Option<Theta>,
    pub converged: bool,
    /// Per level: ellipsoid membership of the true θ, absent without a
    /// covariance.
    pub ellipsoid_covered: Vec<Option<bool>>,
    /// Per level and component: interval membership of the true value.
    pub interval_covered: Vec<Option<[bool; 4]>>,
    pub error: Option<String>,
}

impl ReplicateOutcome {
    pub fn usable(&self) -> bool {
        self.converged && self.theta_hat.is_some()
    }
}

fn run_one(grid: &StudyGrid, s: usize, m: usize, rep: usize) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        s,
        m,
        replicate: rep,
        theta_hat: None,
        converged: false,
        ellipsoid_covered: vec![None; grid.levels.len()],
        interval_covered: vec![None; grid.levels.len()],
        error: None,
    };
    let fit_seed = RngStream::derive(grid.seed, &[s as u64, m as u64, rep as u64, 1]).next_u64();
    let fit = grid.replicate_dataset(s, m, rep).and_then(|ds| mcem_fit(&ds, &grid.fit_config(fit_seed)));
    match fit {
        Ok(fit) => {
            out.theta_hat = Some(fit.theta_hat);
            out.converged = fit.converged;
            let truth = grid.theta_true.as_array();
            for (k, region) in fit.regions.iter().enumerate() {
                out.ellipsoid_covered[k] = Some(region.ellipsoid_contains(&grid.theta_true));
                out.interval_covered[k] = Some(std::array::from_fn(|c| region.interval_contains(c, truth[c])));
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Simulates and fits every replicate of every cell, in parallel.
pub fn run_replicates(grid: &StudyGrid) -> Result<Vec<ReplicateOutcome>> {
    grid.validate()?;
    let jobs: Vec<(usize, usize, usize)> = grid
        .s_values
        .iter()
        .flat_map(|&s| grid.m_values.iter().flat_map(move |&m| (0..grid.replicates).map(move |r| (s, m, r))))
        .collect();
    Ok(jobs.into_par_iter().map(|(s, m, r)| run_one(grid, s, m, r)).collect())
}

fn cell_outcomes(outcomes: &[ReplicateOutcome], s: usize, m: usize) -> impl Iterator<Item = &ReplicateOutcome> {
    outcomes.iter().filter(move |o| o.s == s && o.m == m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCell {
    pub s: usize,
    pub m: usize,
    pub replicates: usize,
    pub n_converged: usize,
    /// Mean of `(θ̂ - θ)/θ` over converged replicates.
    pub relative_bias: [f64; 4],
    /// Mean of `ln(θ̂/θ)` over converged replicates.
    pub log_bias: [f64; 4],
}

pub fn bias_table(grid: &StudyGrid, outcomes: &[ReplicateOutcome]) -> Vec<BiasCell> {
    let truth = grid.theta_true.as_array();
    let mut cells = Vec::new();
    for &s in &grid.s_values {
        for &m in &grid.m_values {
            let fits: Vec<[f64; 4]> =
                cell_outcomes(outcomes, s, m).filter(|o| o.usable()).filter_map(|o| o.theta_hat).map(|t| t.as_array()).collect();
            let n = fits.len();
            let avg = |f: &dyn Fn(f64, f64) -> f64| -> [f64; 4] {
                std::array::from_fn(|k| {
                    if n == 0 {
                        f64::NAN
                    } else {
                        fits.iter().map(|x| f(x[k], truth[k])).sum::<f64>() / n as f64
                    }
                })
            };
            cells.push(BiasCell {
                s,
                m,
                replicates: cell_outcomes(outcomes, s, m).count(),
                n_converged: n,
                relative_bias: avg(&|x, t| (x - t) / t),
                log_bias: avg(&|x, t| (x / t).ln()),
            });
        }
    }
    cells
}

pub fn bias_study(grid: &StudyGrid) -> Result<Vec<BiasCell>> {
    Ok(bias_table(grid, &run_replicates(grid)?))
}

/// Coverage of one confidence level on one design.
///
/// Replicates that did not converge or had no covariance are excluded from
/// both counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub s: usize,
    pub m: usize,
    pub level: f64,
    pub replicates: usize,
    pub n_converged: usize,
    /// Converged replicates whose ellipsoid contains the true θ.
    pub n_covered: usize,
    /// Per component, converged replicates whose interval contains the truth.
    pub interval_covered: [usize; 4],
}

impl CoverageCell {
    pub fn coverage(&self) -> f64 {
        self.n_covered as f64 / self.n_converged as f64
    }

    /// Binomial standard error of [`Self::coverage`].
    pub fn std_error(&self) -> f64 {
        let p = self.coverage();
        (p * (1.0 - p) / self.n_converged as f64).sqrt()
    }
}

pub fn coverage_table(grid: &StudyGrid, outcomes: &[ReplicateOutcome]) -> Vec<CoverageCell> {
    let mut cells = Vec::new();
    for &s in &grid.s_values {
        for &m in &grid.m_values {
            for (k, &level) in grid.levels.iter().enumerate() {
                let mut cell = CoverageCell {
                    s,
                    m,
                    level,
                    replicates: 0,
                    n_converged: 0,
                    n_covered: 0,
                    interval_covered: [0; 4],
                };
                for o in cell_outcomes(outcomes, s, m) {
                    cell.replicates += 1;
                    if !o.usable() {
                        continue;
                    }
                    let (Some(inside), Some(per)) = (o.ellipsoid_covered[k], o.interval_covered[k]) else {
                        continue;
                    };
                    cell.n_converged += 1;
                    cell.n_covered += usize::from(inside);
                    for c in 0..4 {
                        cell.interval_covered[c] += usize::from(per[c]);
                    }
                }
                cells.push(cell);
            }
        }
    }
    cells
}

pub fn coverage_study(grid: &StudyGrid) -> Result<Vec<CoverageCell>> {
    Ok(coverage_table(grid, &run_replicates(grid)?))
}

pub fn write_bias_csv<W: Write>(cells: &[BiasCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "S", "M", "replicates", "n_converged", "relbias_a", "relbias_b", "relbias_c", "relbias_d", "logbias_a",
        "logbias_b", "logbias_c", "logbias_d",
    ])?;
    for c in cells {
        let mut row = vec![c.s.to_string(), c.m.to_string(), c.replicates.to_string(), c.n_converged.to_string()];
        row.extend(c.relative_bias.iter().chain(&c.log_bias).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(cells: &[CoverageCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "S", "M", "level", "replicates", "n_converged", "n_covered", "coverage", "std_error", "covered_a",
        "covered_b", "covered_c", "covered_d",
    ])?;
    for c in cells {
        let mut row = vec![
            c.s.to_string(),
            c.m.to_string(),
            c.level.to_string(),
            c.replicates.to_string(),
            c.n_converged.to_string(),
            c.n_covered.to_string(),
            c.coverage().to_string(),
            c.std_error().to_string(),
        ];
        row.extend(c.interval_covered.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// goodness of fit

/// Observed and simulated histograms of the pooled observations.
///
/// Bin 0 holds the zeros, then `bins` equal-width bins on `(0, max y]` of the
/// observed data, then an overflow bin for simulated values above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofHistogram {
    /// `(lower, upper)` per bin; the zero bin is `(0, 0)`, overflow ends at
    /// infinity.
    pub bins: Vec<(f64, f64)>,
    pub observed: Vec<u64>,
    pub simulated_mean: Vec<f64>,
    pub simulated_q05: Vec<f64>,
    pub simulated_q95: Vec<f64>,
    pub replicates: usize,
}

impl GofHistogram {
    /// 5%–95% envelope of the simulated zero count.
    pub fn zero_envelope(&self) -> (f64, f64) {
        (self.simulated_q05[0], self.simulated_q95[0])
    }

    pub fn zero_inside_envelope(&self) -> bool {
        let (lo, hi) = self.zero_envelope();
        let z = self.observed[0] as f64;
        lo <= z && z <= hi
    }
}

fn bin_counts(dataset: &Dataset, upper: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins + 2];
    for o in dataset.strata.iter().flat_map(|s| &s.observations) {
        let idx = if o.y <= 0.0 {
            0
        } else if o.y > upper {
            bins + 1
        } else {
            ((o.y / upper * bins as f64).ceil() as usize).clamp(1, bins)
        };
        counts[idx] += 1;
    }
    counts
}

// nearest-rank quantile of sorted data
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Simulates `replicates` datasets at `theta` on the design of `dataset` and
/// compares their histograms with the observed one.
pub fn gof_histogram(dataset: &Dataset, theta: &Theta, replicates: usize, bins: usize, seed: u64) -> Result<GofHistogram> {
    if replicates == 0 || bins == 0 {
        return Err(Error::Domain("replicates and bins must be positive".into()));
    }
    dataset.validate()?;
    let max_y = dataset.strata.iter().flat_map(|s| &s.observations).map(|o| o.y).fold(0.0f64, f64::max);
    let upper = if max_y > 0.0 { max_y } else { 1.0 };
    let design = dataset.design();
    let sims: Vec<Vec<u64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::derive(seed, &[r as u64]);
            simulate_hierarchy(theta, &design, dataset.kind, &mut rng).map(|(d, _)| bin_counts(&d, upper, bins))
        })
        .collect::<Result<_>>()?;
    let n_bins = bins + 2;
    let mut simulated_mean = vec![0.0; n_bins];
    let mut simulated_q05 = vec![0.0; n_bins];
    let mut simulated_q95 = vec![0.0; n_bins];
    for b in 0..n_bins {
        let mut col: Vec<f64> = sims.iter().map(|s| s[b] as f64).collect();
        col.sort_by(f64::total_cmp);
        simulated_mean[b] = col.iter().sum::<f64>() / replicates as f64;
        simulated_q05[b] = quantile(&col, 0.05);
        simulated_q95[b] = quantile(&col, 0.95);
    }
    let width = upper / bins as f64;
    let mut edges = vec![(0.0, 0.0)];
    edges.extend((0..bins).map(|k| (k as f64 * width, (k + 1) as f64 * width)));
    edges.push((upper, f64::INFINITY));
    Ok(GofHistogram {
        bins: edges,
        observed: bin_counts(dataset, upper, bins),
        simulated_mean,
        simulated_q05,
        simulated_q95,
        replicates,
    })
}

pub fn write_gof_csv<W: Write>(h: &GofHistogram, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin", "lower", "upper", "observed", "simulated_mean", "simulated_q05", "simulated_q95"])?;
    for k in 0..h.bins.len() {
        w.write_record([
            k.to_string(),
            h.bins[k].0.to_string(),
            h.bins[k].1.to_string(),
            h.observed[k].to_string(),
            h.simulated_mean[k].to_string(),
            h.simulated_q05[k].to_string(),
            h.simulated_q95[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pp-plots

/// Share of zeros from which a stratum is flagged in pp-plot output.
pub const MANY_ZEROS: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpStratum {
    pub stratum: String,
    pub n_obs: usize,
    pub n_nonzero: usize,
    pub zero_fraction: f64,
    pub many_zeros: bool,
    /// Moment estimates; absent for strata with fewer than two positive
    /// records.
    pub mu_hat: Option<f64>,
    pub rho_hat: Option<f64>,
}

/// One point of a pp-plot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpPoint {
    pub estimate: f64,
    pub empirical: f64,
    pub fitted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpPlot {
    pub strata: Vec<PpStratum>,
    pub excluded: usize,
    /// Gamma `(shape, rate)` matched to the estimates.
    pub mu_fit: (f64, f64),
    pub rho_fit: (f64, f64),
    pub mu_points: Vec<PpPoint>,
    pub rho_points: Vec<PpPoint>,
}

impl PpPlot {
    /// Largest `|empirical - fitted|` over both plots.
    pub fn max_deviation(&self) -> f64 {
        self.mu_points.iter().chain(&self.rho_points).map(|p| (p.empirical - p.fitted).abs()).fold(0.0, f64::max)
    }
}

fn gamma_moment_fit(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m * m / v, m / v)
}

fn pp_points(xs: &[f64], (shape, rate): (f64, f64)) -> Result<Vec<PpPoint>> {
    let law = Gamma::new(shape, rate).map_err(|e| Error::Domain(format!("gamma fit: {e}")))?;
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| PpPoint { estimate: x, empirical: (k as f64 + 0.5) / n, fitted: law.cdf(x) })
        .collect())
}

/// Per-stratum moment estimates of `(mu, rho)` from effort-standardized
/// continuous data, with gamma laws matched to them.
pub fn ppplot_data(dataset: &Dataset) -> Result<PpPlot> {
    if dataset.kind != Kind::Continuous {
        return Err(Error::Domain("pp-plot data needs a continuous dataset".into()));
    }
    let mut strata = Vec::new();
    let (mut mus, mut rhos) = (Vec::new(), Vec::new());
    for s in &dataset.strata {
        let z: Vec<f64> = s.observations.iter().map(|o| o.y / o.effort).collect();
        let n = z.len() as f64;
        let n_nonzero = z.iter().filter(|&&v| v > 0.0).count();
        let zero_fraction = 1.0 - n_nonzero as f64 / n;
        let mut entry = PpStratum {
            stratum: s.id.clone(),
            n_obs: z.len(),
            n_nonzero,
            zero_fraction,
            many_zeros: zero_fraction >= MANY_ZEROS,
            mu_hat: None,
            rho_hat: None,
        };
        if n_nonzero >= 2 {
            let m = z.iter().sum::<f64>() / n;
            let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
            if v > 0.0 {
                entry.mu_hat = Some(2.0 * m * m / v);
                entry.rho_hat = Some(2.0 * m / v);
                mus.push(2.0 * m * m / v);
                rhos.push(2.0 * m / v);
            }
        }
        strata.push(entry);
    }
    if mus.len() < 3 {
        return Err(Error::Domain(format!("pp-plot needs at least 3 usable strata, found {}", mus.len())));
    }
    let mu_fit = gamma_moment_fit(&mus);
    let rho_fit = gamma_moment_fit(&rhos);
    Ok(PpPlot {
        excluded: strata.len() - mus.len(),
        mu_points: pp_points(&mus, mu_fit)?,
        rho_points: pp_points(&rhos, rho_fit)?,
        strata,
        mu_fit,
        rho_fit,
    })
}

/// Writes `effect,stratum,estimate,empirical,fitted,zero_fraction,many_zeros`;
/// excluded strata appear with effect `excluded` and empty numbers.
pub fn write_ppplot_csv<W: Write>(pp: &PpPlot, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["effect", "stratum", "estimate", "empirical", "fitted", "zero_fraction", "many_zeros"])?;
    let lookup = |x: f64, pick: fn(&PpStratum) -> Option<f64>| {
        pp.strata.iter().find(|s| pick(s) == Some(x)).expect("point comes from a stratum")
    };
    for (effect, points, pick) in [
        ("mu", &pp.mu_points, (|s: &PpStratum| s.mu_hat) as fn(&PpStratum) -> Option<f64>),
        ("rho", &pp.rho_points, |s: &PpStratum| s.rho_hat),
    ] {
        for p in points {
            let s = lookup(p.estimate, pick);
            w.write_record([
                effect,
                &s.stratum,
                &p.estimate.to_string(),
                &p.empirical.to_string(),
                &p.fitted.to_string(),
                &s.zero_fraction.to_string(),
                &s.many_zeros.to_string(),
            ])?;
        }
    }
    for s in pp.strata.iter().filter(|s| s.mu_hat.is_none()) {
        w.write_record(["excluded", &s.stratum, "", "", "", &s.zero_fraction.to_string(), &s.many_zeros.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
