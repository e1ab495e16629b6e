//! Seeded random instances and the oracle suite behind the `verify`
//! command.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::capacity::{rate_of, szego_rate_check};
use crate::channel_model::{ArmaNoiseSpec, StateSpaceChannel};
use crate::error::Result;
use crate::kalman::{PosteriorState, SourcePolicy};
use crate::rng::GaussianStream;
use crate::simulator::{
    batch_conditioning_oracle, channel_equivalence_deviation, filter_posterior, markovization_check, LagTwoSource,
};

/// Largest root modulus used when drawing random noise polynomials.
pub const RANDOM_ROOT_RADIUS: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Szego,
    BatchConditioning,
    Markovization,
    ChannelEquivalence,
}

impl Oracle {
    pub const ALL: [Oracle; 4] = [
        Oracle::Szego,
        Oracle::BatchConditioning,
        Oracle::Markovization,
        Oracle::ChannelEquivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Oracle::Szego => "szego",
            Oracle::BatchConditioning => "batch_conditioning",
            Oracle::Markovization => "markovization",
            Oracle::ChannelEquivalence => "channel_equivalence",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Oracle::Szego => 1e-8,
            Oracle::BatchConditioning | Oracle::Markovization | Oracle::ChannelEquivalence => 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub oracle: Oracle,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform_in(rng: &mut GaussianStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Coefficients `p_1..p_k` of `prod (1 - r_i z^-1)` for `k` random roots
/// inside the disc of radius `radius`, real or in conjugate pairs.
pub fn random_stable_polynomial(rng: &mut GaussianStream, k: usize, radius: f64) -> Vec<f64> {
    let mut poly = vec![1.0];
    let mut left = k;
    while left > 0 {
        let r = radius * rng.uniform();
        if left >= 2 && rng.uniform() < 0.5 {
            // (1 - 2 r cos(th) z^-1 + r^2 z^-2)
            let th = std::f64::consts::PI * rng.uniform();
            poly = convolve(&poly, &[1.0, -2.0 * r * th.cos(), r * r]);
            left -= 2;
        } else {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            poly = convolve(&poly, &[1.0, -sign * r]);
            left -= 1;
        }
    }
    poly[1..].to_vec()
}

fn convolve(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// Random minimum-phase spec with MA order `<= max_ma`, AR order
/// `<= max_ar`, and `1 <= nu <= max_nu`.
pub fn random_spec(rng: &mut GaussianStream, max_ma: usize, max_ar: usize, max_nu: usize) -> ArmaNoiseSpec {
    let ma_order = (rng.uniform() * (max_ma + 1) as f64) as usize;
    let ar_order = (rng.uniform() * (max_ar + 1) as f64) as usize;
    let nu = 1 + (rng.uniform() * max_nu.max(1) as f64) as usize;
    let a = random_stable_polynomial(rng, ma_order, RANDOM_ROOT_RADIUS)
        .into_iter()
        .map(|p| -p)
        .collect();
    let c_ar = random_stable_polynomial(rng, ar_order, RANDOM_ROOT_RADIUS);
    let sigma_w2 = uniform_in(rng, 0.5, 2.0);
    let power = uniform_in(rng, 0.25, 4.0);
    ArmaNoiseSpec::new(a, c_ar, sigma_w2, nu, power)
}

/// Policy with `|d_i| <= d_max` and `e` in `[0.3, 1.5]`.
pub fn random_policy(rng: &mut GaussianStream, dim: usize, d_max: f64) -> SourcePolicy {
    let d = DVector::from_fn(dim, |_, _| uniform_in(rng, -d_max, d_max));
    let e = uniform_in(rng, 0.3, 1.5);
    SourcePolicy::new(d, e).expect("finite gains and positive e")
}

/// Random positive definite prior on the initial state.
pub fn random_prior(rng: &mut GaussianStream, dim: usize) -> PosteriorState {
    let mean = DVector::from_fn(dim, |_, _| rng.standard_normal());
    let f = DMatrix::from_fn(dim, dim, |_, _| 0.5 * rng.standard_normal());
    PosteriorState::new(mean, &f * f.transpose() + DMatrix::identity(dim, dim) * 0.1)
}

fn normals(rng: &mut GaussianStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

/// `|rate_of(d = 0, e = sqrt(P)) - szego_rate_check|`.
pub fn szego_deviation(spec: &ArmaNoiseSpec) -> Result<f64> {
    let channel = StateSpaceChannel::from_spec(spec)?;
    let policy = SourcePolicy::open_loop(channel.dim(), spec.power.sqrt())?;
    Ok((rate_of(&channel, &policy)? - szego_rate_check(spec, spec.power)?).abs())
}

/// Batch oracle against the filter recursion for a random policy, prior,
/// and observation record of length `n`.
pub fn batch_conditioning_deviation(channel: &StateSpaceChannel, rng: &mut GaussianStream, n: usize) -> Result<f64> {
    let policy = random_policy(rng, channel.dim(), 0.5);
    let prior = if rng.uniform() < 0.5 {
        PosteriorState::at_rest(channel.dim())
    } else {
        random_prior(rng, channel.dim())
    };
    let y = normals(rng, n);
    let exact = batch_conditioning_oracle(channel, &policy, &prior, &y)?;
    let recursive = filter_posterior(channel, &policy, &prior, &y)?;
    Ok((&exact.mean - &recursive.mean)
        .amax()
        .max((&exact.cov - &recursive.cov).amax()))
}

/// Markovization deviation for a random lag-two source.
pub fn markovization_deviation(channel: &StateSpaceChannel, rng: &mut GaussianStream, horizon: usize) -> Result<f64> {
    let dim = channel.dim();
    let source = LagTwoSource {
        d1: DVector::from_fn(dim, |_, _| uniform_in(rng, -0.5, 0.5)),
        d2: DVector::from_fn(dim, |_, _| uniform_in(rng, -0.5, 0.5)),
        e: uniform_in(rng, 0.3, 1.5),
    };
    Ok(markovization_check(channel, &source, horizon)?.max_deviation)
}

/// Original versus state-space output for random input and noise of
/// length `n`.
pub fn equivalence_deviation(spec: &ArmaNoiseSpec, rng: &mut GaussianStream, n: usize) -> Result<f64> {
    let channel = StateSpaceChannel::from_spec(spec)?;
    let x = normals(rng, n);
    let sd = spec.sigma_w2.sqrt();
    let v: Vec<f64> = (0..n).map(|_| sd * rng.standard_normal()).collect();
    Ok(channel_equivalence_deviation(spec, &channel, &x, &v))
}

/// Trials per randomized oracle in [`run_oracles`].
pub const SUITE_TRIALS: usize = 10;

/// Runs the selected oracles on `spec`, drawing every random quantity from
/// `seed`.
pub fn run_oracles(spec: &ArmaNoiseSpec, seed: u64, selection: &[Oracle]) -> Result<Vec<OracleReport>> {
    let channel = StateSpaceChannel::from_spec(spec)?;
    let mut rng = GaussianStream::new(seed);
    let mut reports = Vec::with_capacity(selection.len());
    for &oracle in selection {
        let (trials, max_deviation) = match oracle {
            Oracle::Szego => (1, szego_deviation(spec)?),
            Oracle::BatchConditioning => {
                let mut worst: f64 = 0.0;
                for trial in 0..SUITE_TRIALS {
                    let n = 1 + trial % 6;
                    worst = worst.max(batch_conditioning_deviation(&channel, &mut rng, n)?);
                }
                (SUITE_TRIALS, worst)
            }
            Oracle::Markovization => {
                let mut worst: f64 = 0.0;
                for trial in 0..SUITE_TRIALS {
                    let horizon = 1 + trial % 5;
                    worst = worst.max(markovization_deviation(&channel, &mut rng, horizon)?);
                }
                (SUITE_TRIALS, worst)
            }
            Oracle::ChannelEquivalence => {
                let mut worst: f64 = 0.0;
                for _ in 0..SUITE_TRIALS {
                    worst = worst.max(equivalence_deviation(spec, &mut rng, 1000)?);
                }
                (SUITE_TRIALS, worst)
            }
        };
        let tolerance = oracle.tolerance();
        reports.push(OracleReport {
            oracle,
            trials,
            max_deviation,
            tolerance,
            passed: max_deviation < tolerance,
        });
    }
    Ok(reports)
}
