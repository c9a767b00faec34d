#![allow(dead_code)]

use zicp::inference::{marginal_loglik, Matrix4};
use zicp::{Dataset, Kind, Observation, Stratum, Theta};

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn dataset(kind: Kind, strata: &[(&[f64], &[f64])]) -> Dataset {
    let strata = strata
        .iter()
        .enumerate()
        .map(|(i, (ys, ds))| {
            let obs = ys.iter().zip(ds.iter()).map(|(&y, &effort)| Observation { y, effort }).collect();
            Stratum::new(format!("s{}", i + 1), obs).unwrap()
        })
        .collect();
    Dataset::new(kind, strata).unwrap()
}

pub fn unit_effort(kind: Kind, strata: &[&[f64]]) -> Dataset {
    let ones = vec![1.0; 64];
    let pairs: Vec<(&[f64], &[f64])> = strata.iter().map(|ys| (*ys, &ones[..ys.len()])).collect();
    dataset(kind, &pairs)
}

/// Central-difference Hessian of the marginal log-likelihood with steps
/// proportional to each component.
pub fn fd_hessian(data: &Dataset, theta: &Theta) -> Matrix4 {
    let x = theta.as_array();
    let f = |v: [f64; 4]| marginal_loglik(data, &Theta::from_array(v)).unwrap();
    let mut h = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let (hi, hj) = (1e-4 * x[i], 1e-4 * x[j]);
            let at = |si: f64, sj: f64| {
                let mut v = x;
                v[i] += si * hi;
                v[j] += sj * hj;
                f(v)
            };
            h[i][j] = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * hi * hj);
        }
    }
    h
}

pub fn theta(v: [f64; 4]) -> Theta {
    Theta::new(v[0], v[1], v[2], v[3]).unwrap()
}

pub const SUNSTAR: [f64; 4] = [1.9, 1.8, 1.9, 0.9];
pub const URCHIN: [f64; 4] = [1.0, 1.0, 5.0, 13.0];

/// `(y, effort, θ)` strata with exactly enumerable posteriors.
pub type Instance = (&'static [f64], &'static [f64], [f64; 4]);

pub const CONTINUOUS_INSTANCES: &[Instance] = &[
    (&[2.5, 0.0, 5.2], &[1.0, 2.0, 1.0], URCHIN),
    (&[0.7, 0.0, 0.0], &[1.0, 1.0, 1.0], SUNSTAR),
    (&[1.0, 1.3, 0.8], &[1.0, 1.0, 1.0], [6.0, 2.0, 8.0, 2.0]),
    (&[2.0, 0.0, 3.1, 0.0], &[1.0, 1.0, 0.5, 1.0], [4.0, 1.0, 0.5, 2.0]),
    (&[0.2, 0.0, 0.0], &[2.0, 1.0, 1.0], [0.8, 3.0, 6.0, 1.0]),
    (&[5.0, 3.0], &[1.0, 1.0], [2.0, 0.5, 3.0, 9.0]),
];

pub const DISCRETE_INSTANCES: &[Instance] = &[
    (&[20.0], &[1.0], [0.8, 0.5, 1.0, 4.0]),
    (&[4.0, 6.0, 0.0, 9.0, 2.0], &[1.0, 1.0, 1.0, 1.0, 1.0], [1.2, 0.8, 3.0, 2.0]),
    (&[1.0, 5.0], &[1.0, 1.0], [4.0, 1.0, 2.0, 3.0]),
    (&[12.0, 0.0, 7.0], &[1.0, 1.0, 1.0], [6.0, 1.5, 1.9, 0.9]),
    (&[2.0, 2.0, 0.0, 0.0], &[1.0, 2.0, 1.0, 1.0], [5.0, 1.0, 1.0, 1.0]),
];

/// Largest relative error over all conditional moments of one stratum, IS
/// with `g` particles against exact enumeration.
pub fn oracle_error(kind: Kind, inst: &Instance, g: usize, seed: u64) -> f64 {
    use zicp::estep::{enumerate_posterior, moments_from_sample, nplus_sample, stratum_stats};
    let (ys, ds, th) = inst;
    let data = dataset(kind, &[(ys, ds)]);
    let st = stratum_stats(&data.strata[0]);
    let th = theta(*th);
    let flat = |m: zicp::estep::StratumMoments| {
        let (x, y) = m.mark.pair();
        [m.e_mu, m.e_ln_mu, x, y, m.e_n_plus]
    };
    let exact = enumerate_posterior(&st, &th, kind, 80).unwrap().n_plus_pmf();
    let est = nplus_sample(&st, &th, kind, g, 200, &mut zicp::RngStream::new(seed, 7)).unwrap();
    let me = flat(moments_from_sample(&exact, &st, &th, kind).unwrap());
    let mi = flat(moments_from_sample(&est, &st, &th, kind).unwrap());
    me.iter().zip(mi).map(|(e, i)| rel(i, *e)).fold(0.0, f64::max)
}

/// Small datasets whose marginal likelihood is computed exactly, with the θ
/// at which their information matrix is checked.
pub fn fisher_cases() -> Vec<(Dataset, Theta)> {
    vec![
        (unit_effort(Kind::Continuous, &[&[1.2, 0.0], &[0.4, 2.5]]), theta([1.5, 1.2, 2.0, 1.1])),
        (unit_effort(Kind::Discrete, &[&[3.0, 0.0], &[1.0, 5.0]]), theta([1.5, 1.2, 2.0, 3.0])),
        (unit_effort(Kind::Discrete, &[&[2.0, 0.0, 4.0], &[1.0, 3.0], &[6.0, 0.0]]), theta([1.2, 0.8, 3.0, 2.0])),
    ]
}

/// Largest componentwise relative gap between `info` and the negated `hessian`.
pub fn worst_relative_gap(info: &Matrix4, hessian: &Matrix4) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            worst = worst.max((info[i][j] + hessian[i][j]).abs() / hessian[i][j].abs());
        }
    }
    worst
}

pub fn is_samples(data: &Dataset, th: &Theta, g: usize, seed: u64) -> Vec<zicp::estep::NPlusSample> {
    use zicp::estep::{nplus_sample, stratum_stats};
    data.strata
        .iter()
        .enumerate()
        .map(|(i, s)| {
            nplus_sample(&stratum_stats(s), th, data.kind, g, 200, &mut zicp::RngStream::new(seed, i as u64)).unwrap()
        })
        .collect()
}
