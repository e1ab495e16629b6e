//! ARMA noise channels and their companion-form state-space realization.
//!
//! The noise is `N = H(z) V` with
//!
//! ```text
//!          1 - sum_m a_m z^-m
//! H(z) = ----------------------
//!          1 + sum_k c_k z^-k
//! ```
//!
//! and `V` white with variance `sigma_w2`. Whitening the output by `H^-1(z)`
//! and delaying it by `nu` samples yields an ISI channel with white noise
//! whose state is the content of the `1 / (1 - sum a_m z^-m)` delay line.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Roots with modulus at or above `1 - ROOT_MARGIN` are treated as lying on
/// or outside the unit circle.
pub const ROOT_MARGIN: f64 = 1e-9;

/// User-facing description of a power-constrained channel with ARMA noise.
///
/// Signs follow `H(z)` above: `a` enters the numerator as `1 - sum a_m z^-m`,
/// `c_ar` enters the denominator as `1 + sum c_k z^-k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaNoiseSpec {
    /// MA coefficients `a_1..a_M`.
    pub a: Vec<f64>,
    /// AR coefficients `c_1..c_K`.
    pub c_ar: Vec<f64>,
    /// Innovation variance of the noise.
    pub sigma_w2: f64,
    /// Feedback delay in samples.
    pub nu: usize,
    /// Average input power.
    pub power: f64,
}

impl ArmaNoiseSpec {
    pub fn new(a: Vec<f64>, c_ar: Vec<f64>, sigma_w2: f64, nu: usize, power: f64) -> Self {
        Self {
            a,
            c_ar,
            sigma_w2,
            nu,
            power,
        }
    }

    /// White noise of variance `sigma_w2`.
    pub fn white(sigma_w2: f64, nu: usize, power: f64) -> Self {
        Self::new(Vec::new(), Vec::new(), sigma_w2, nu, power)
    }

    pub fn validate(&self) -> Result<()> {
        validate_arma_spec(self).map(|_| ())
    }
}

/// Checks scalar ranges and that both noise polynomials are minimum-phase.
pub fn validate_arma_spec(spec: &ArmaNoiseSpec) -> Result<&ArmaNoiseSpec> {
    if !(spec.sigma_w2.is_finite() && spec.sigma_w2 > 0.0) {
        return Err(Error::InvalidScalar {
            field: "sigma_w2",
            reason: format!("must be finite and > 0, got {}", spec.sigma_w2),
        });
    }
    if spec.nu < 1 {
        return Err(Error::InvalidScalar {
            field: "nu",
            reason: format!("feedback delay must be >= 1, got {}", spec.nu),
        });
    }
    if !(spec.power.is_finite() && spec.power >= 0.0) {
        return Err(Error::InvalidScalar {
            field: "power",
            reason: format!("must be finite and >= 0, got {}", spec.power),
        });
    }
    if let Some(bad) = spec.a.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidScalar {
            field: "a",
            reason: format!("coefficient {bad} is not finite"),
        });
    }
    if let Some(bad) = spec.c_ar.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidScalar {
            field: "c_ar",
            reason: format!("coefficient {bad} is not finite"),
        });
    }

    let ma = max_root_modulus(&spec.a);
    if ma >= 1.0 - ROOT_MARGIN {
        return Err(Error::NonMinimumPhase {
            polynomial: "MA (a)",
            modulus: ma,
        });
    }
    let ar_top: Vec<f64> = spec.c_ar.iter().map(|c| -c).collect();
    let ar = max_root_modulus(&ar_top);
    if ar >= 1.0 - ROOT_MARGIN {
        return Err(Error::NonMinimumPhase {
            polynomial: "AR (c_ar)",
            modulus: ar,
        });
    }
    Ok(spec)
}

/// Iteration cap for the Schur decomposition. The unbounded variant can
/// cycle forever on matrices such as the nilpotent shift.
const SCHUR_MAX_ITER: usize = 10_000;

fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex64>> {
    Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER).map(|s| s.complex_eigenvalues().iter().copied().collect())
}

/// Roots of `z^n - r_1 z^(n-1) - ... - r_n`, i.e. eigenvalues of the
/// companion matrix whose top row is `top_row`.
///
/// Trailing zero coefficients contribute exact zero roots and are deflated
/// first; Durand-Kerner iteration backs up the eigenvalue route.
pub fn companion_roots(top_row: &[f64]) -> Vec<Complex64> {
    let degree = top_row.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
    let mut roots = vec![Complex64::new(0.0, 0.0); top_row.len() - degree];
    let top = &top_row[..degree];
    if !top.is_empty() {
        roots.extend(eigenvalues(&companion(top)).unwrap_or_else(|| durand_kerner(top)));
    }
    roots
}

fn durand_kerner(top_row: &[f64]) -> Vec<Complex64> {
    let n = top_row.len();
    let eval = |z: Complex64| top_row.iter().fold(Complex64::new(1.0, 0.0), |acc, &r| acc * z - r);
    // Cauchy bound on the root moduli.
    let bound = 1.0 + top_row.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..n).map(|i| seed.powu(i as u32) * (bound / seed.norm().powi(i as i32))).collect();
    for _ in 0..2000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let denom = (0..n)
                .filter(|&j| j != i)
                .fold(Complex64::new(1.0, 0.0), |acc, j| acc * (z[i] - z[j]));
            if denom.norm() == 0.0 {
                continue;
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            moved = moved.max(step.norm());
        }
        if moved <= 4.0 * f64::EPSILON * bound {
            break;
        }
    }
    z
}

/// Top row of `m` if it is a companion matrix (ones on the subdiagonal,
/// zeros elsewhere below the first row).
fn companion_top_row(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    for i in 1..n {
        for j in 0..n {
            let want = if j + 1 == i { 1.0 } else { 0.0 };
            if m[(i, j)] != want {
                return None;
            }
        }
    }
    Some(m.row(0).iter().copied().collect())
}

/// Spectral radius via `||M^(2^k)||^(1/2^k)`, with rescaling to avoid
/// overflow.
fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut p = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..40 {
        let norm = p.norm();
        if norm == 0.0 {
            return 0.0;
        }
        p /= norm;
        log_scale += norm.ln() / power;
        p = &p * &p;
        power *= 2.0;
    }
    (log_scale + p.norm().ln() / power).exp()
}

/// Largest root modulus of `z^n - r_1 z^(n-1) - ... - r_n` (0 for `n = 0`).
pub fn max_root_modulus(top_row: &[f64]) -> f64 {
    companion_roots(top_row)
        .iter()
        .map(|r| r.norm())
        .fold(0.0, f64::max)
}

fn companion(top_row: &[f64]) -> DMatrix<f64> {
    let n = top_row.len();
    let mut m = DMatrix::zeros(n, n);
    for (j, &v) in top_row.iter().enumerate() {
        m[(0, j)] = v;
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    m
}

/// Coefficients after zero-padding so that `order = K + nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedOrders {
    /// MA coefficients, length `order`.
    pub a: Vec<f64>,
    /// AR coefficients, length `order - nu`.
    pub c_ar: Vec<f64>,
    /// State dimension.
    pub order: usize,
}

/// Zero-pads `a` or `c_ar` so that the state dimension is
/// `max(len(a), len(c_ar) + nu)`.
pub fn pad_orders(spec: &ArmaNoiseSpec) -> PaddedOrders {
    let order = spec.a.len().max(spec.c_ar.len() + spec.nu);
    let mut a = spec.a.clone();
    a.resize(order, 0.0);
    let mut c_ar = spec.c_ar.clone();
    c_ar.resize(order - spec.nu, 0.0);
    PaddedOrders { a, c_ar, order }
}

/// Linear state-space channel `s_t = A s_{t-1} + b x_t`,
/// `y_t = c^T s_{t-1} + w_t`, `w_t ~ N(0, sigma_w2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceChannel {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    sigma_w2: f64,
}

impl StateSpaceChannel {
    /// Builds the companion realization of a validated spec.
    pub fn from_spec(spec: &ArmaNoiseSpec) -> Result<Self> {
        validate_arma_spec(spec)?;
        Ok(build_state_space(spec))
    }

    /// Arbitrary realization. Only dimensions and `sigma_w2 > 0` are checked,
    /// so the result need not come from any ARMA spec.
    pub fn from_parts(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        sigma_w2: f64,
    ) -> Result<Self> {
        let m = a.nrows();
        if a.ncols() != m || b.len() != m || c.len() != m || m == 0 {
            return Err(Error::DimensionMismatch {
                op: "StateSpaceChannel::from_parts",
                detail: format!(
                    "A is {}x{}, b has {}, c has {}",
                    a.nrows(),
                    a.ncols(),
                    b.len(),
                    c.len()
                ),
            });
        }
        if !(sigma_w2.is_finite() && sigma_w2 > 0.0) {
            return Err(Error::InvalidScalar {
                field: "sigma_w2",
                reason: format!("must be finite and > 0, got {sigma_w2}"),
            });
        }
        Ok(Self { a, b, c, sigma_w2 })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    /// State dimension `M`.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Largest eigenvalue modulus of `A`.
    pub fn spectral_radius(&self) -> f64 {
        if let Some(top) = companion_top_row(&self.a) {
            return max_root_modulus(&top);
        }
        match eigenvalues(&self.a) {
            Some(ev) => ev.iter().map(|z| z.norm()).fold(0.0, f64::max),
            None => gelfand_radius(&self.a),
        }
    }
}

/// Assembles `A`, `b`, `c` from an already validated [`ArmaNoiseSpec`].
pub fn build_state_space(spec: &ArmaNoiseSpec) -> StateSpaceChannel {
    let padded = pad_orders(spec);
    let m = padded.order;
    let a = companion(&padded.a);
    let mut b = DVector::zeros(m);
    b[0] = 1.0;
    let mut c = DVector::zeros(m);
    c[spec.nu - 1] = 1.0;
    for (k, &ck) in padded.c_ar.iter().enumerate() {
        c[spec.nu + k] = ck;
    }
    StateSpaceChannel {
        a,
        b,
        c,
        sigma_w2: spec.sigma_w2,
    }
}

/// `1 - sum_m a_m e^{-j m omega}`.
pub(crate) fn ma_poly(a: &[f64], omega: f64) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for (m, &am) in a.iter().enumerate() {
        acc -= am * Complex64::from_polar(1.0, -((m + 1) as f64) * omega);
    }
    acc
}

/// `1 + sum_k c_k e^{-j k omega}`.
pub(crate) fn ar_poly(c_ar: &[f64], omega: f64) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for (k, &ck) in c_ar.iter().enumerate() {
        acc += ck * Complex64::from_polar(1.0, -((k + 1) as f64) * omega);
    }
    acc
}

/// Noise power spectral density `S_N(omega)`.
pub fn noise_psd(spec: &ArmaNoiseSpec, omega: f64) -> f64 {
    spec.sigma_w2 * ma_poly(&spec.a, omega).norm_sqr() / ar_poly(&spec.c_ar, omega).norm_sqr()
}

/// Frequency response of the derived channel, `e^{-j nu omega} H^-1(e^{j omega})`.
pub fn equivalent_channel_response(spec: &ArmaNoiseSpec, omega: f64) -> Complex64 {
    let delay = Complex64::from_polar(1.0, -(spec.nu as f64) * omega);
    delay * ar_poly(&spec.c_ar, omega) / ma_poly(&spec.a, omega)
}
