//! Monte Carlo and exact-Gaussian checks of the channel model and the
//! feedback filter.
//!
//! - [`simulate_closed_loop`] runs transmitter, filter, and channel together.
//! - [`simulate_original_channel`] passes an input through the ARMA noise
//!   channel and the whitening filter, independently of the state-space
//!   realization.
//! - [`batch_conditioning_oracle`] computes the filter posterior by building
//!   the full joint Gaussian and conditioning on it in one shot.
//! - [`markovization_check`] compares a lag-two source with its
//!   Markovized counterpart through their induced joint distributions.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::channel_model::{pad_orders, ArmaNoiseSpec, StateSpaceChannel};
use crate::error::{Error, Result};
use crate::gaussian::{condition_on, psd_factor, regress, Affine, GaussianJoint};
use crate::kalman::{kalman_step, PosteriorState, SourcePolicy};
use crate::rng::GaussianStream;

/// Inputs, outputs, states, and noise of one run of the derived channel.
///
/// Index `t - 1` of `x`, `y`, `w` holds time `t`; `states` holds
/// `s_0, ..., s_n` row by row, with `s_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    states: Vec<f64>,
    dim: usize,
    pub seed: Option<u64>,
}

impl Trajectory {
    fn new(dim: usize, n: usize, seed: Option<u64>) -> Self {
        let mut states = Vec::with_capacity((n + 1) * dim);
        states.resize(dim, 0.0);
        Self {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
            states,
            dim,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `s_t` for `t = 0..=n`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    /// Advances `s_t = A s_{t-1} + b x_t` and records `y_t = c^T s_{t-1} + w_t`.
    fn push(&mut self, channel: &StateSpaceChannel, x: f64, w: f64) {
        let t = self.len();
        let prev = DVector::from_column_slice(self.state(t));
        let y = channel.c().dot(&prev) + w;
        let next = channel.a() * &prev + channel.b() * x;
        self.states.extend(next.iter());
        self.x.push(x);
        self.y.push(y);
        self.w.push(w);
    }

    /// CSV with a `# spec_hash=...,seed=...` line, a header, and one row
    /// per time step: `t, x, y, s1..sM` (the state after step `t`).
    pub fn write_csv<W: Write>(&self, spec_hash: &str, mut out: W) -> io::Result<()> {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        writeln!(out, "# spec_hash={spec_hash},seed={seed}")?;
        write!(out, "t,x,y")?;
        for i in 1..=self.dim {
            write!(out, ",s{i}")?;
        }
        writeln!(out)?;
        for t in 1..=self.len() {
            write!(out, "{},{:?},{:?}", t, self.x[t - 1], self.y[t - 1])?;
            for v in self.state(t) {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Drives the derived channel open-loop with given inputs and noise.
pub fn run_open_loop(channel: &StateSpaceChannel, x: &[f64], w: &[f64]) -> Trajectory {
    assert_eq!(x.len(), w.len(), "input and noise lengths differ");
    let mut traj = Trajectory::new(channel.dim(), x.len(), None);
    for (&xt, &wt) in x.iter().zip(w) {
        traj.push(channel, xt, wt);
    }
    traj
}

/// Sample statistics of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimulationStats {
    pub steps: usize,
    /// Mean of `x_t^2`.
    pub empirical_power: f64,
    /// Mean of `x_t`.
    pub empirical_mean_x: f64,
    /// Mean of the squared innovations `y_t - c^T m_{t-1}`.
    pub empirical_innovation_variance: f64,
    /// Mean of `ln N(w_t; 0, sigma_w2) - ln N(i_t; 0, v_t)`, an unbiased
    /// per-step estimate of the information rate in nats.
    pub empirical_rate_nats: f64,
    /// Innovation variance predicted by the filter at the last step.
    pub final_innovation_variance: f64,
}

/// Closed-loop run of `n` steps.
///
/// The transmitter knows its own channel state and tracks the receiver's
/// posterior with [`kalman_step`]; it sends
/// `x_t = d^T (s_{t-1} - m_{t-1}) + e z_t`. Each step draws `z_t` then `w_t`
/// from one seeded stream.
pub fn simulate_closed_loop(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    n: usize,
    seed: u64,
) -> Result<(Trajectory, SimulationStats)> {
    if policy.d().len() != channel.dim() {
        return Err(Error::DimensionMismatch {
            op: "simulate_closed_loop",
            detail: format!("policy d has {}, channel state has {}", policy.d().len(), channel.dim()),
        });
    }
    let sigma_w = channel.sigma_w2().sqrt();
    let mut rng = GaussianStream::new(seed);
    let mut traj = Trajectory::new(channel.dim(), n, Some(seed));
    let mut post = PosteriorState::at_rest(channel.dim());

    let (mut sum_x, mut sum_x2, mut sum_i2, mut sum_rate) = (0.0, 0.0, 0.0, 0.0);
    let mut last_v = channel.sigma_w2();
    for t in 0..n {
        let z = rng.standard_normal();
        let w = rng.normal(sigma_w);
        let s_prev = DVector::from_column_slice(traj.state(t));
        let x = policy.d().dot(&s_prev) + policy.offset(&post.mean) + policy.e() * z;
        traj.push(channel, x, w);
        let y = traj.y[t];

        let v = channel.c().dot(&(&post.cov * channel.c())) + channel.sigma_w2();
        let innovation = y - channel.c().dot(&post.mean);
        sum_x += x;
        sum_x2 += x * x;
        sum_i2 += innovation * innovation;
        sum_rate += 0.5 * (v / channel.sigma_w2()).ln() - innovation * innovation / (2.0 * v)
            + w * w / (2.0 * channel.sigma_w2());
        last_v = v;

        post = kalman_step(channel, policy, &post, y)?;
    }
    let nf = n.max(1) as f64;
    let stats = SimulationStats {
        steps: n,
        empirical_power: sum_x2 / nf,
        empirical_mean_x: sum_x / nf,
        empirical_innovation_variance: sum_i2 / nf,
        empirical_rate_nats: sum_rate / nf,
        final_innovation_variance: last_v,
    };
    Ok((traj, stats))
}

/// Signals of the original channel for one input record.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalChannelRecord {
    /// ARMA noise `N = H(z) V`.
    pub noise: Vec<f64>,
    /// Received signal `R = X + N`.
    pub r: Vec<f64>,
    /// Whitened output `U = H^-1(z) R`.
    pub u: Vec<f64>,
    /// `Y_t = U_{t - nu}`.
    pub y_delayed: Vec<f64>,
}

/// Filters `x` and `v` through the original channel with all signals at rest
/// before `t = 1`. Index `t - 1` holds time `t`.
pub fn simulate_original_channel(spec: &ArmaNoiseSpec, x: &[f64], v: &[f64]) -> OriginalChannelRecord {
    assert_eq!(x.len(), v.len(), "input and noise lengths differ");
    let n = x.len();
    let at = |s: &[f64], t: usize, lag: usize| if t >= lag { s[t - lag] } else { 0.0 };

    // N_t + sum c_k N_{t-k} = V_t - sum a_m V_{t-m}
    let mut noise = vec![0.0; n];
    for t in 0..n {
        let ma: f64 = spec.a.iter().enumerate().map(|(m, am)| am * at(v, t, m + 1)).sum();
        let ar: f64 = spec.c_ar.iter().enumerate().map(|(k, ck)| ck * at(&noise, t, k + 1)).sum();
        noise[t] = v[t] - ma - ar;
    }
    let r: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();

    // U_t - sum a_m U_{t-m} = R_t + sum c_k R_{t-k}
    let mut u = vec![0.0; n];
    for t in 0..n {
        let fir: f64 = spec.c_ar.iter().enumerate().map(|(k, ck)| ck * at(&r, t, k + 1)).sum();
        let iir: f64 = spec.a.iter().enumerate().map(|(m, am)| am * at(&u, t, m + 1)).sum();
        u[t] = r[t] + fir + iir;
    }
    let y_delayed = (0..n).map(|t| at(&u, t, spec.nu)).collect();
    OriginalChannelRecord { noise, r, u, y_delayed }
}

/// Posterior of `S_n` given `y_1..y_n` by direct conditioning of the joint
/// Gaussian of states and outputs, starting from the prior `prior` on `S_0`.
///
/// The centering offsets `g_t = -d^T m_{t-1}` depend on the observed
/// prefix; each `m_{t-1}` is itself obtained by conditioning the joint on
/// `y_1..y_{t-1}`, so no filter recursion is involved.
pub fn batch_conditioning_oracle(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    prior: &PosteriorState,
    y: &[f64],
) -> Result<PosteriorState> {
    let dim = channel.dim();
    let n = y.len();
    if policy.d().len() != dim {
        return Err(Error::DimensionMismatch {
            op: "batch_conditioning_oracle",
            detail: format!("policy d has {}, channel state has {}", policy.d().len(), dim),
        });
    }
    // Basis: S_0 deviation (dim), then z_1..z_n, then w_1..w_n.
    let basis = dim + 2 * n;
    let z_at = |t: usize| dim + t - 1;
    let w_at = |t: usize| dim + n + t - 1;

    let mut state = Affine::constant(prior.mean.clone(), basis).with_noise(0, &psd_factor(&prior.cov));
    let mut outputs: Vec<Affine> = Vec::with_capacity(n);
    let sigma_w = DMatrix::from_element(1, 1, channel.sigma_w2().sqrt());
    let e = DMatrix::from_element(1, 1, policy.e());

    for t in 1..=n {
        let prev_mean = if t == 1 {
            prior.mean.clone()
        } else {
            let observed = Affine::stack(&outputs.iter().collect::<Vec<_>>());
            condition_on(&state, &observed, &DVector::from_column_slice(&y[..t - 1]))?.0
        };
        let g = policy.offset(&prev_mean);

        let y_t = state.project(channel.c()).with_noise(w_at(t), &sigma_w);
        let x_t = state
            .project(policy.d())
            .with_noise(z_at(t), &e)
            .shift(&DVector::from_element(1, g));
        state = state
            .transform(channel.a())
            .add(&x_t.transform(&DMatrix::from_column_slice(dim, 1, channel.b().as_slice())));
        outputs.push(y_t);
    }

    if n == 0 {
        return Ok(prior.clone());
    }
    let observed = Affine::stack(&outputs.iter().collect::<Vec<_>>());
    let (mean, cov) = condition_on(&state, &observed, &DVector::from_column_slice(y))?;
    Ok(PosteriorState { mean, cov })
}

/// Iterates [`kalman_step`] over `y` from `prior`.
pub fn filter_posterior(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    prior: &PosteriorState,
    y: &[f64],
) -> Result<PosteriorState> {
    y.iter()
        .try_fold(prior.clone(), |post, &yt| kalman_step(channel, policy, &post, yt))
}

/// Linear-Gaussian source whose input depends on the last two states:
/// `x_t = d1^T s_{t-1} + d2^T s_{t-2} + e z_t`, with `s_{-1} = s_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTwoSource {
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub e: f64,
}

fn joint_labels(dim: usize, t: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(2 * dim + t);
    for (tag, time) in [("S", t - 1), ("S", t)] {
        for i in 1..=dim {
            labels.push(format!("{tag}_{time}({i})"));
        }
    }
    labels.extend((1..=t).map(|k| format!("Y_{k}")));
    labels
}

fn window_joint(prev: &Affine, cur: &Affine, outputs: &[Affine], t: usize) -> GaussianJoint {
    let mut parts = vec![prev, cur];
    parts.extend(outputs.iter());
    Affine::stack(&parts).joint(joint_labels(prev.rows(), t))
}

/// Outcome of [`markovization_check`].
#[derive(Debug, Clone)]
pub struct MarkovizationReport {
    /// Joints of `(S_{t-1}, S_t, Y_1..Y_t)` under the lag-two source.
    pub original: Vec<GaussianJoint>,
    /// The same joints under the Markovized source.
    pub markovized: Vec<GaussianJoint>,
    pub max_deviation: f64,
}

/// Builds the Markov source whose transition `s_{t-1}, y_1^{t-1} -> s_t` is
/// the conditional law of the lag-two source, and measures how far the two
/// joint laws of `(S_{t-1}, S_t, Y_1^t)` are apart for `t = 1..=horizon`.
pub fn markovization_check(
    channel: &StateSpaceChannel,
    source: &LagTwoSource,
    horizon: usize,
) -> Result<MarkovizationReport> {
    let dim = channel.dim();
    if source.d1.len() != dim || source.d2.len() != dim {
        return Err(Error::DimensionMismatch {
            op: "markovization_check",
            detail: format!(
                "source gains have {} and {}, channel state has {}",
                source.d1.len(),
                source.d2.len(),
                dim
            ),
        });
    }
    let n = horizon;
    let b_col = DMatrix::from_column_slice(dim, 1, channel.b().as_slice());
    let sigma_w = DMatrix::from_element(1, 1, channel.sigma_w2().sqrt());

    // Lag-two source. Basis: z_1..z_n, w_1..w_n.
    let basis1 = 2 * n;
    let e = DMatrix::from_element(1, 1, source.e);
    let mut states1 = vec![Affine::zeros(dim, basis1), Affine::zeros(dim, basis1)];
    let mut outputs1: Vec<Affine> = Vec::with_capacity(n);
    // states1[k] holds s_{k-1}.
    for t in 1..=n {
        let (s2, s1) = (&states1[t - 1], &states1[t]);
        outputs1.push(s1.project(channel.c()).with_noise(n + t - 1, &sigma_w));
        let x = s1
            .project(&source.d1)
            .add(&s2.project(&source.d2))
            .with_noise(t - 1, &e);
        let next = s1.transform(channel.a()).add(&x.transform(&b_col));
        states1.push(next);
    }

    // Markovized source. Basis: one dim-block per step for the transition
    // noise, then w_1..w_n.
    let basis2 = dim * n + n;
    let mut states2 = vec![Affine::zeros(dim, basis2)];
    let mut outputs2: Vec<Affine> = Vec::with_capacity(n);
    for t in 1..=n {
        // Conditional law of S_t given (S_{t-1}, Y_1^{t-1}) under the lag-two source.
        let mut given1: Vec<&Affine> = vec![&states1[t]];
        given1.extend(outputs1[..t - 1].iter());
        let reg = regress(&states1[t + 1], &Affine::stack(&given1));

        let prev = &states2[t - 1];
        outputs2.push(prev.project(channel.c()).with_noise(dim * n + t - 1, &sigma_w));
        let mut given2: Vec<&Affine> = vec![prev];
        given2.extend(outputs2[..t - 1].iter());
        let next = Affine::stack(&given2)
            .transform(&reg.coef)
            .shift(&reg.intercept)
            .with_noise(dim * (t - 1), &psd_factor(&reg.residual_cov));
        states2.push(next);
    }

    let mut original = Vec::with_capacity(n);
    let mut markovized = Vec::with_capacity(n);
    let mut max_deviation: f64 = 0.0;
    for t in 1..=n {
        let j1 = window_joint(&states1[t], &states1[t + 1], &outputs1[..t], t);
        let j2 = window_joint(&states2[t - 1], &states2[t], &outputs2[..t], t);
        max_deviation = max_deviation.max(j1.max_deviation(&j2));
        original.push(j1);
        markovized.push(j2);
    }
    Ok(MarkovizationReport {
        original,
        markovized,
        max_deviation,
    })
}

/// Maximum `|y_orig - y_state_space|` when the same input and noise drive
/// the original channel and its state-space realization (`w_t = v_{t-nu}`).
pub fn channel_equivalence_deviation(spec: &ArmaNoiseSpec, channel: &StateSpaceChannel, x: &[f64], v: &[f64]) -> f64 {
    let original = simulate_original_channel(spec, x, v);
    let w: Vec<f64> = (0..v.len())
        .map(|t| if t >= spec.nu { v[t - spec.nu] } else { 0.0 })
        .collect();
    let traj = run_open_loop(channel, x, &w);
    debug_assert_eq!(pad_orders(spec).order, channel.dim());
    original
        .y_delayed
        .iter()
        .zip(&traj.y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
