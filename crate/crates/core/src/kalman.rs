//! Posterior tracking of the channel state under a stationary
//! feedback-dependent Gauss-Markov source.
//!
//! The source sends `x_t = d^T s_{t-1} + e z_t + g_t` with the centering
//! offset `g_t = -d^T m_{t-1}`, so the closed loop evolves as
//! `s_t = Q s_{t-1} + b (e z_t + g_t)` with `Q = A + b d^T`. The transmitter
//! only ever sees the feedback through the posterior `(m, K)`.

use nalgebra::{DMatrix, DVector};

use crate::channel_model::StateSpaceChannel;
use crate::error::{Error, Result};

/// Relative step size below which the Riccati iteration is converged.
pub const RICCATI_TOL: f64 = 1e-12;
/// Iteration cap for [`solve_riccati`].
pub const RICCATI_MAX_ITER: usize = 1_000_000;
/// Any covariance entry above this is treated as divergence.
pub const RICCATI_BLOWUP: f64 = 1e12;

/// Gaussian posterior of the channel state given the fed-back outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PosteriorState {
    /// Known initial state `s_0 = 0`.
    pub fn at_rest(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
        }
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
}

/// Stationary source coefficients. The offset `g` is never stored; it is
/// derived from the posterior mean by [`SourcePolicy::offset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePolicy {
    d: DVector<f64>,
    e: f64,
}

impl SourcePolicy {
    pub fn new(d: DVector<f64>, e: f64) -> Result<Self> {
        if !(e.is_finite() && e >= 0.0) {
            return Err(Error::InvalidScalar {
                field: "e",
                reason: format!("innovation gain must be finite and >= 0, got {e}"),
            });
        }
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidScalar {
                field: "d",
                reason: format!("feedback gain {bad} is not finite"),
            });
        }
        Ok(Self { d, e })
    }

    /// No state feedback, white input with standard deviation `e`.
    pub fn open_loop(dim: usize, e: f64) -> Result<Self> {
        Self::new(DVector::zeros(dim), e)
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn e(&self) -> f64 {
        self.e
    }

    /// Centering offset `g = -d^T m`.
    pub fn offset(&self, mean: &DVector<f64>) -> f64 {
        -self.d.dot(mean)
    }

    fn check_dim(&self, channel: &StateSpaceChannel, op: &'static str) -> Result<()> {
        if self.d.len() != channel.dim() {
            return Err(Error::DimensionMismatch {
                op,
                detail: format!("policy d has {}, channel state has {}", self.d.len(), channel.dim()),
            });
        }
        Ok(())
    }
}

/// Closed-loop quantities reused across Riccati iterations.
pub(crate) struct ClosedLoop<'a> {
    q: DMatrix<f64>,
    b: &'a DVector<f64>,
    c: &'a DVector<f64>,
    e2: f64,
    sigma_w2: f64,
}

impl<'a> ClosedLoop<'a> {
    pub(crate) fn new(channel: &'a StateSpaceChannel, policy: &SourcePolicy) -> Self {
        let q = channel.a() + channel.b() * policy.d().transpose();
        Self {
            q,
            b: channel.b(),
            c: channel.c(),
            e2: policy.e() * policy.e(),
            sigma_w2: channel.sigma_w2(),
        }
    }

    /// Returns `(Q K c, c^T K c + sigma_w2)`.
    fn gain_terms(&self, k: &DMatrix<f64>) -> (DVector<f64>, f64) {
        let kc = k * self.c;
        let v = self.c.dot(&kc) + self.sigma_w2;
        (&self.q * kc, v)
    }

    pub(crate) fn map(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let (qkc, v) = self.gain_terms(k);
        let mut r = &self.q * k * self.q.transpose();
        r += self.b * self.b.transpose() * self.e2;
        r -= &qkc * qkc.transpose() / v;
        symmetrize(r)
    }
}

fn symmetrize(r: DMatrix<f64>) -> DMatrix<f64> {
    (&r + r.transpose()) * 0.5
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// One filter update: from the posterior of `S_{t-1}` given `y_1^{t-1}` to
/// the posterior of `S_t` given `y_1^t`.
///
/// With innovation `i = y - c^T m` and variance `v = c^T K c + sigma_w2`:
/// `m+ = A m + (Q K c / v) i` and `K+ = Q K Q^T + e^2 b b^T - (QKc)(QKc)^T / v`.
/// The `A m` term (rather than `Q m`) is what the centering offset leaves
/// behind: `Q m + b g = A m`.
pub fn kalman_step(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    post: &PosteriorState,
    y: f64,
) -> Result<PosteriorState> {
    policy.check_dim(channel, "kalman_step")?;
    let lp = ClosedLoop::new(channel, policy);
    let (qkc, v) = lp.gain_terms(&post.cov);
    if v.is_nan() || v <= 0.0 {
        return Err(Error::NumericalDegeneracy { variance: v });
    }
    let innovation = y - channel.c().dot(&post.mean);
    let mean = channel.a() * &post.mean + &qkc * (innovation / v);
    let mut cov = &lp.q * &post.cov * lp.q.transpose();
    cov += channel.b() * channel.b().transpose() * lp.e2;
    cov -= &qkc * qkc.transpose() / v;
    Ok(PosteriorState {
        mean,
        cov: symmetrize(cov),
    })
}

/// One application of the Riccati map, symmetrized.
pub fn riccati_map(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    ClosedLoop::new(channel, policy).map(k)
}

/// Fixed point of the Riccati map together with the work spent finding it.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub cov: DMatrix<f64>,
    pub iterations: usize,
}

/// Iterates the Riccati map from `K = 0` to its limit, the minimal PSD
/// fixed point.
pub fn solve_riccati(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
) -> Result<RiccatiSolution> {
    let n = channel.dim();
    solve_riccati_from(channel, policy, DMatrix::zeros(n, n))
}

/// Same iteration started from `start`. The limit is unchanged as long as
/// `0 <= start <= K*` in the PSD order (the map is monotone).
pub(crate) fn solve_riccati_from(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    start: DMatrix<f64>,
) -> Result<RiccatiSolution> {
    policy.check_dim(channel, "solve_riccati")?;
    let lp = ClosedLoop::new(channel, policy);
    let mut k = start;
    for it in 1..=RICCATI_MAX_ITER {
        let next = lp.map(&k);
        let scale = max_abs(&next);
        if !scale.is_finite() || scale > RICCATI_BLOWUP {
            return Err(Error::Divergence {
                iterations: it,
                max_entry: scale,
            });
        }
        // The step is exactly riccati_residual(k), so returning `k` rather
        // than `next` certifies the residual of the returned matrix.
        let step = max_abs(&(&next - &k));
        if step < RICCATI_TOL * (1.0 + max_abs(&k)) {
            return Ok(RiccatiSolution {
                cov: k,
                iterations: it,
            });
        }
        k = next;
    }
    Err(Error::Divergence {
        iterations: RICCATI_MAX_ITER,
        max_entry: max_abs(&k),
    })
}

/// `max |K - riccati_map(K)|`.
pub fn riccati_residual(
    channel: &StateSpaceChannel,
    policy: &SourcePolicy,
    k: &DMatrix<f64>,
) -> f64 {
    max_abs(&(k - riccati_map(channel, policy, k)))
}

/// Output prediction statistics for a given state covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnovationStats {
    /// `c^T K c + sigma_w2`.
    pub variance: f64,
    /// `0.5 ln(1 + c^T K c / sigma_w2)` in nats.
    pub rate_increment: f64,
}

pub fn innovation_stats(channel: &StateSpaceChannel, k: &DMatrix<f64>) -> InnovationStats {
    let signal = channel.c().dot(&(k * channel.c()));
    InnovationStats {
        variance: signal + channel.sigma_w2(),
        rate_increment: 0.5 * (signal / channel.sigma_w2()).ln_1p(),
    }
}

/// Stationary input power `d^T K d + e^2`.
pub fn stationary_power(policy: &SourcePolicy, k: &DMatrix<f64>) -> f64 {
    policy.d().dot(&(k * policy.d())) + policy.e() * policy.e()
}
