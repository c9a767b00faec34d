//! Data and parameter types, closed-form moments and forward simulators for the
//! compound Poisson models with and without random effects.

use std::collections::HashMap;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::RngStream;
use crate::specfun::{sample_beta, sample_exponential, sample_gamma, sample_geometric_positive, sample_poisson};

/// Hyperparameters of the random-effects layer.
///
/// `mu_s ~ Gamma(a, b)` (shape, rate) in both models. In the continuous model
/// `rho_s ~ Gamma(c, d)`; in the discrete model `p_s ~ Beta(c, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Theta {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let t = Self { a, b, c, d };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            domain(format!("theta components must be positive and finite: {self:?}"))
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self { a: v[0], b: v[1], c: v[2], d: v[3] }
    }

    pub fn max_abs_diff(&self, other: &Theta) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

impl std::str::FromStr for Theta {
    type Err = Error;

    /// Parses `a,b,c,d`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Domain(format!("theta '{s}': {e}")))?;
        if parts.len() != 4 {
            return domain(format!("theta '{s}' must have four components"));
        }
        Theta::new(parts[0], parts[1], parts[2], parts[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Biomass with exponential marks.
    #[default]
    Continuous,
    /// Counts with positive geometric marks.
    Discrete,
}

impl Kind {
    pub fn name(&self) -> &'static str {
        match self {
            Kind::Continuous => "continuous",
            Kind::Discrete => "discrete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub effort: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    pub observations: Vec<Observation>,
}

impl Stratum {
    pub fn new(id: impl Into<String>, observations: Vec<Observation>) -> Result<Self> {
        let s = Self { id: id.into(), observations };
        if s.observations.is_empty() {
            return domain(format!("stratum '{}' has no observations", s.id));
        }
        Ok(s)
    }

    pub fn has_nonzero(&self) -> bool {
        self.observations.iter().any(|o| o.y > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: Kind,
    pub strata: Vec<Stratum>,
}

impl Dataset {
    pub fn new(kind: Kind, strata: Vec<Stratum>) -> Result<Self> {
        let ds = Self { kind, strata };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strata.is_empty() {
            return domain("dataset has no strata");
        }
        for s in &self.strata {
            if s.observations.is_empty() {
                return domain(format!("stratum '{}' has no observations", s.id));
            }
            for o in &s.observations {
                if !(o.y >= 0.0) || !o.y.is_finite() {
                    return domain(format!("stratum '{}': y must be >= 0, got {}", s.id, o.y));
                }
                if !(o.effort > 0.0) || !o.effort.is_finite() {
                    return domain(format!("stratum '{}': effort must be > 0, got {}", s.id, o.effort));
                }
                if self.kind == Kind::Discrete && o.y.fract() != 0.0 {
                    return domain(format!("stratum '{}': discrete y must be an integer, got {}", s.id, o.y));
                }
            }
        }
        Ok(())
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn n_observations(&self) -> usize {
        self.strata.iter().map(|s| s.observations.len()).sum()
    }

    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.strata.iter().flat_map(|s| &s.observations).filter(|o| o.y == 0.0).count();
        zeros as f64 / self.n_observations() as f64
    }

    /// Efforts per stratum, the design a simulator needs to reproduce this dataset.
    pub fn design(&self) -> Design {
        Design { efforts: self.strata.iter().map(|s| s.observations.iter().map(|o| o.effort).collect()).collect() }
    }

    /// Writes the `stratum,effort,y` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stratum", "effort", "y"])?;
        for s in &self.strata {
            for o in &s.observations {
                w.write_record([s.id.as_str(), &o.effort.to_string(), &format_y(o.y, self.kind)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `stratum,effort,y` CSV. The `effort` column may be omitted, in
    /// which case every effort is 1. Strata keep their order of first appearance.
    pub fn read_csv<R: Read>(reader: R, kind: Kind) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let stratum_col = col("stratum").ok_or(Error::Parse { row: 1, message: "missing 'stratum' column".into() })?;
        let y_col = col("y").ok_or(Error::Parse { row: 1, message: "missing 'y' column".into() })?;
        let effort_col = col("effort");

        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<Observation>> = HashMap::new();
        for (i, rec) in r.records().enumerate() {
            // header is row 1
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
            let field = |c: usize| rec.get(c).ok_or(Error::Parse { row, message: format!("missing field {}", c + 1) });
            let id = field(stratum_col)?.to_string();
            let y: f64 = field(y_col)?
                .parse()
                .map_err(|e| Error::Parse { row, message: format!("y: {e}") })?;
            let effort: f64 = match effort_col {
                Some(c) => field(c)?.parse().map_err(|e| Error::Parse { row, message: format!("effort: {e}") })?,
                None => 1.0,
            };
            if !(y >= 0.0) || !y.is_finite() {
                return Err(Error::Parse { row, message: format!("y must be a finite non-negative number, got {y}") });
            }
            if !(effort > 0.0) || !effort.is_finite() {
                return Err(Error::Parse { row, message: format!("effort must be positive, got {effort}") });
            }
            if kind == Kind::Discrete && y.fract() != 0.0 {
                return Err(Error::Parse { row, message: format!("discrete y must be an integer, got {y}") });
            }
            if !groups.contains_key(&id) {
                order.push(id.clone());
            }
            groups.entry(id).or_default().push(Observation { y, effort });
        }
        if order.is_empty() {
            return Err(Error::Parse { row: 1, message: "no data rows".into() });
        }
        let strata = order
            .into_iter()
            .map(|id| {
                let obs = groups.remove(&id).unwrap_or_default();
                Stratum { id, observations: obs }
            })
            .collect();
        Dataset::new(kind, strata)
    }
}

fn format_y(y: f64, kind: Kind) -> String {
    match kind {
        Kind::Discrete => format!("{}", y as u64),
        Kind::Continuous => y.to_string(),
    }
}

/// Stratum sizes and per-tow catching efforts.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub efforts: Vec<Vec<f64>>,
}

impl Design {
    pub fn uniform(strata: usize, per_stratum: usize, effort: f64) -> Self {
        Self { efforts: vec![vec![effort; per_stratum]; strata] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.efforts.is_empty() || self.efforts.iter().any(|s| s.is_empty()) {
            return domain("design needs at least one stratum and one tow per stratum");
        }
        if self.efforts.iter().flatten().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return domain("design efforts must be positive");
        }
        Ok(())
    }
}

/// Latent variables behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStratum {
    pub mu: f64,
    /// `rho_s` (continuous) or `p_s` (discrete).
    pub mark: f64,
    /// Clump counts per observation, in dataset order.
    pub clumps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub strata: Vec<LatentStratum>,
}

impl LatentTruth {
    /// Writes `stratum,effort,y,clumps,mu,mark`, one row per tow.
    pub fn write_csv<W: Write>(&self, dataset: &Dataset, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stratum", "effort", "y", "clumps", "mu", "mark"])?;
        for (s, lat) in dataset.strata.iter().zip(&self.strata) {
            for (o, n) in s.observations.iter().zip(&lat.clumps) {
                w.write_record([
                    s.id.as_str(),
                    &o.effort.to_string(),
                    &format_y(o.y, dataset.kind),
                    &n.to_string(),
                    &lat.mu.to_string(),
                    &lat.mark.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub p_zero: f64,
}

/// Mean, variance and zero mass of `LOL(mu * effort, rho)`.
pub fn lol_moments(mu: f64, effort: f64, rho: f64) -> Result<Moments> {
    if !(mu > 0.0 && effort > 0.0 && rho > 0.0) {
        return domain(format!("lol_moments needs positive inputs, got mu={mu} effort={effort} rho={rho}"));
    }
    let m = mu * effort;
    Ok(Moments { mean: m / rho, variance: 2.0 * m / (rho * rho), p_zero: (-m).exp() })
}

/// Mean, variance and zero mass of `DLOL(mu * effort, p)` with marks on `{1, 2, ...}`.
pub fn dlol_moments(mu: f64, effort: f64, p: f64) -> Result<Moments> {
    if !(mu > 0.0 && effort > 0.0 && p > 0.0 && p <= 1.0) {
        return domain(format!("dlol_moments needs mu, effort > 0 and p in (0, 1], got {mu}, {effort}, {p}"));
    }
    let m = mu * effort;
    Ok(Moments { mean: m / p, variance: m * (2.0 - p) / (p * p), p_zero: (-m).exp() })
}

/// One compound Poisson draw with exponential marks; also returns the clump count.
pub fn sample_lol_with_clumps(mu_effort: f64, rho: f64, rng: &mut RngStream) -> (f64, u64) {
    let n = sample_poisson(mu_effort, rng);
    // fold from +0 so that an empty sum is +0, not -0
    let y = (0..n).fold(0.0, |acc, _| acc + sample_exponential(rho, rng));
    (y, n)
}

pub fn sample_lol(mu_effort: f64, rho: f64, rng: &mut RngStream) -> Result<f64> {
    if !(mu_effort >= 0.0 && rho > 0.0) {
        return domain(format!("sample_lol needs mu_effort >= 0 and rho > 0, got {mu_effort}, {rho}"));
    }
    Ok(sample_lol_with_clumps(mu_effort, rho, rng).0)
}

pub fn sample_dlol_with_clumps(mu_effort: f64, p: f64, rng: &mut RngStream) -> (u64, u64) {
    let n = sample_poisson(mu_effort, rng);
    let y = (0..n).map(|_| sample_geometric_positive(p, rng)).sum();
    (y, n)
}

pub fn sample_dlol(mu_effort: f64, p: f64, rng: &mut RngStream) -> Result<u64> {
    if !(mu_effort >= 0.0 && p > 0.0 && p <= 1.0) {
        return domain(format!("sample_dlol needs mu_effort >= 0 and p in (0, 1], got {mu_effort}, {p}"));
    }
    Ok(sample_dlol_with_clumps(mu_effort, p, rng).0)
}

/// Draws a dataset from the random-effects hierarchy along with its latent truth.
pub fn simulate_hierarchy(
    theta: &Theta,
    design: &Design,
    kind: Kind,
    rng: &mut RngStream,
) -> Result<(Dataset, LatentTruth)> {
    theta.validate()?;
    design.validate()?;
    let mut strata = Vec::with_capacity(design.efforts.len());
    let mut latent = Vec::with_capacity(design.efforts.len());
    for (s, efforts) in design.efforts.iter().enumerate() {
        let mu = sample_gamma(theta.a, theta.b, rng);
        let mark = match kind {
            Kind::Continuous => sample_gamma(theta.c, theta.d, rng),
            Kind::Discrete => {
                // p = 0 would make the geometric marks degenerate
                sample_beta(theta.c, theta.d, rng).max(f64::MIN_POSITIVE)
            }
        };
        let mut observations = Vec::with_capacity(efforts.len());
        let mut clumps = Vec::with_capacity(efforts.len());
        for &effort in efforts {
            let (y, n) = match kind {
                Kind::Continuous => sample_lol_with_clumps(mu * effort, mark, rng),
                Kind::Discrete => {
                    let (y, n) = sample_dlol_with_clumps(mu * effort, mark, rng);
                    (y as f64, n)
                }
            };
            observations.push(Observation { y, effort });
            clumps.push(n);
        }
        strata.push(Stratum { id: format!("s{}", s + 1), observations });
        latent.push(LatentStratum { mu, mark, clumps });
    }
    Ok((Dataset { kind, strata }, LatentTruth { strata: latent }))
}

/// Characteristic function `E[exp(i omega Y)]` of `LOL(mu, rho)`.
pub fn lol_char_fn(omega: f64, mu: f64, rho: f64) -> Complex64 {
    let iw = Complex64::new(0.0, omega);
    (mu * iw / (rho - iw)).exp()
}
