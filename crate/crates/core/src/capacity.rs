//! Stationary information rate of a source policy and its maximization
//! under the average power constraint.
//!
//! For a stationary policy `(d, e)` the rate is `0.5 ln(1 + c^T K c / sigma_w2)`
//! and the input power is `d^T K d + e^2`, where `K` is the Riccati fixed
//! point. The optimizer fixes the power by solving for `e` given `d`, then
//! searches over `d` alone.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_model::{equivalent_channel_response, ArmaNoiseSpec, StateSpaceChannel};
use crate::error::{Error, Result};
use crate::kalman::{
    innovation_stats, riccati_map, riccati_residual, solve_riccati, solve_riccati_from,
    stationary_power, SourcePolicy,
};
use crate::optimizer::{self, NelderMeadOptions};
use crate::quadrature;

/// Relative power error [`calibrate_e`] must reach to report success.
pub const POWER_TOL: f64 = 1e-10;
/// Relative power error at which [`calibrate_e`] stops refining.
const CALIBRATION_STOP: f64 = 1e-13;
const CALIBRATION_MAX_STEPS: usize = 400;
/// Absolute tolerance of the entropy-rate quadrature.
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Riccati fixed point of a policy with the derived rate and power.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub rate_nats: f64,
    pub power: f64,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
}

/// Solves the Riccati fixed point for `policy` and reports rate and power.
pub fn evaluate_policy(channel: &StateSpaceChannel, policy: &SourcePolicy) -> Result<PolicyEvaluation> {
    let sol = solve_riccati(channel, policy)?;
    Ok(PolicyEvaluation {
        rate_nats: innovation_stats(channel, &sol.cov).rate_increment,
        power: stationary_power(policy, &sol.cov),
        cov: sol.cov,
        iterations: sol.iterations,
    })
}

/// Stationary information rate in nats per channel use.
pub fn rate_of(channel: &StateSpaceChannel, policy: &SourcePolicy) -> Result<f64> {
    evaluate_policy(channel, policy).map(|ev| ev.rate_nats)
}

/// Innovation gain that meets the power target for a fixed feedback vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub e: f64,
    pub power: f64,
    pub cov: DMatrix<f64>,
}

/// Finds `e` in `(0, sqrt(P)]` with `d^T K(d, e) d + e^2 = P`.
///
/// The power is nondecreasing in `e`, so the root is bracketed by `0` and
/// `sqrt(P)` and the bracket only ever shrinks. Steps are Illinois
/// (modified regula falsi) with a bisection fallback whenever an
/// interpolated step would leave the bracket or the bracket fails to halve.
/// A point whose Riccati iteration diverges counts as lying above the
/// target. If the power stays above `P` as `e -> 0`, the feedback vector
/// admits no operating point.
pub fn calibrate_e(channel: &StateSpaceChannel, d: &DVector<f64>, power: f64) -> Result<Calibration> {
    if !(power.is_finite() && power > 0.0) {
        return Err(Error::InvalidScalar {
            field: "power",
            reason: format!("calibration needs a positive target, got {power}"),
        });
    }
    let e_max = power.sqrt();
    if d.iter().all(|&v| v == 0.0) {
        let policy = SourcePolicy::new(d.clone(), e_max)?;
        let sol = solve_riccati(channel, &policy)?;
        return Ok(Calibration {
            e: e_max,
            power: stationary_power(&policy, &sol.cov),
            cov: sol.cov,
        });
    }

    let n = channel.dim();
    let accept = POWER_TOL * power;
    let stop = CALIBRATION_STOP * power;
    // lo: power below target; its K bounds every fixed point further up
    // and warm-starts the next solve.
    let (mut lo, mut g_lo) = (0.0, -power);
    let mut lo_cov = DMatrix::zeros(n, n);
    let (mut hi, mut g_hi) = (e_max, f64::INFINITY);
    let mut best: Option<Calibration> = None;
    let mut probe = e_max;
    // Illinois bookkeeping: which end was retained last, and the bracket
    // width two steps ago.
    let mut retained: i8 = 0;
    let mut width_before = f64::INFINITY;

    for step in 0..CALIBRATION_MAX_STEPS {
        let policy = SourcePolicy::new(d.clone(), probe)?;
        let gap = match solve_riccati_from(channel, &policy, lo_cov.clone()) {
            Ok(sol) => {
                let p = stationary_power(&policy, &sol.cov);
                let gap = p - power;
                if best.as_ref().is_none_or(|b| gap.abs() < (b.power - power).abs()) {
                    best = Some(Calibration {
                        e: probe,
                        power: p,
                        cov: sol.cov.clone(),
                    });
                }
                if gap.abs() <= stop {
                    break;
                }
                if gap < 0.0 {
                    lo_cov = sol.cov;
                }
                gap
            }
            Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(other) => return Err(other),
        };
        if gap < 0.0 {
            lo = probe;
            g_lo = gap;
            if retained == 1 {
                g_hi *= 0.5;
            }
            retained = 1;
        } else {
            hi = probe;
            g_hi = gap;
            if retained == -1 {
                g_lo *= 0.5;
            }
            retained = -1;
        }

        let width = hi - lo;
        if width <= f64::EPSILON * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let secant = if g_hi.is_finite() {
            hi - g_hi * (hi - lo) / (g_hi - g_lo)
        } else {
            f64::NAN
        };
        let stalled = step % 2 == 1 && width > 0.5 * width_before;
        if step % 2 == 1 {
            width_before = width;
        }
        probe = if secant > lo && secant < hi && !stalled {
            secant
        } else {
            mid
        };
    }
    match best {
        Some(b) if (b.power - power).abs() <= accept => Ok(b),
        _ => Err(Error::Infeasible { power }),
    }
}

/// Options for [`optimize_capacity`].
#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Total number of local searches, including the `d = 0` anchor.
    pub restarts: usize,
    /// Random starts are drawn uniformly from `|d_i| <= start_box`.
    pub start_box: f64,
    /// Seed of the random start generator.
    pub seed: u64,
    pub local: NelderMeadOptions,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            start_box: 5.0,
            seed: 0,
            local: NelderMeadOptions::default(),
        }
    }
}

/// Best stationary policy found and its certificate quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub rate_nats: f64,
    pub d_opt: Vec<f64>,
    pub e_opt: f64,
    /// Row-major Riccati fixed point at the optimum.
    pub k_opt: Vec<Vec<f64>>,
    pub achieved_power: f64,
    pub riccati_residual: f64,
    pub optimizer_evaluations: usize,
    pub restarts_used: usize,
}

impl CapacityResult {
    pub fn k_matrix(&self) -> DMatrix<f64> {
        let n = self.k_opt.len();
        DMatrix::from_fn(n, n, |i, j| self.k_opt[i][j])
    }

    pub fn policy(&self) -> Result<SourcePolicy> {
        SourcePolicy::new(DVector::from_column_slice(&self.d_opt), self.e_opt)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Rate at the calibrated operating point of `d`, or `None` if infeasible.
fn calibrated_point(channel: &StateSpaceChannel, d: &[f64], power: f64) -> Option<(f64, Calibration)> {
    let d = DVector::from_column_slice(d);
    let cal = calibrate_e(channel, &d, power).ok()?;
    let rate = innovation_stats(channel, &cal.cov).rate_increment;
    Some((rate, cal))
}

/// Starting points: `d = 0`, then `+-` unit vectors, then uniform draws.
fn start_points(dim: usize, opts: &OptimizeOptions) -> Vec<Vec<f64>> {
    let total = opts.restarts.max(1);
    let mut starts = vec![vec![0.0; dim]];
    'axes: for i in 0..dim {
        for sign in [1.0, -1.0] {
            if starts.len() >= total {
                break 'axes;
            }
            let mut d = vec![0.0; dim];
            d[i] = sign;
            starts.push(d);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    while starts.len() < total {
        let d = (0..dim)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                opts.start_box * (2.0 * u - 1.0)
            })
            .collect();
        starts.push(d);
    }
    starts
}

/// Maximizes the stationary rate over `d` with `e` eliminated by the power
/// constraint.
///
/// Restarts run in parallel; the winner is the highest rate, ties going to
/// the lexicographically smallest `d`, so the result does not depend on
/// scheduling.
pub fn optimize_capacity(channel: &StateSpaceChannel, power: f64, opts: &OptimizeOptions) -> CapacityResult {
    let dim = channel.dim();
    if power <= 0.0 {
        let zero = DMatrix::zeros(dim, dim);
        return CapacityResult {
            rate_nats: 0.0,
            d_opt: vec![0.0; dim],
            e_opt: 0.0,
            k_opt: matrix_rows(&zero),
            achieved_power: 0.0,
            riccati_residual: 0.0,
            optimizer_evaluations: 0,
            restarts_used: 0,
        };
    }

    let starts = start_points(dim, opts);
    let runs: Vec<_> = starts
        .par_iter()
        .map(|x0| {
            let objective = |d: &[f64]| match calibrated_point(channel, d, power) {
                Some((rate, _)) => -rate,
                None => f64::INFINITY,
            };
            optimizer::minimize(objective, x0, opts.local)
        })
        .collect();

    let evaluations = runs.iter().map(|r| r.evaluations).sum();
    let mut candidates: Vec<(f64, Vec<f64>)> = runs
        .into_iter()
        .filter(|r| r.value.is_finite())
        .map(|r| (-r.value, r.x))
        .collect();
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let zero = vec![0.0; dim];
    let (d_opt, (rate, cal)) = candidates
        .iter()
        .find_map(|(_, d)| calibrated_point(channel, d, power).map(|p| (d.clone(), p)))
        .unwrap_or_else(|| {
            let p = calibrated_point(channel, &zero, power).expect("d = 0 is always feasible");
            (zero.clone(), p)
        });

    let policy = SourcePolicy::new(DVector::from_column_slice(&d_opt), cal.e)
        .expect("calibrated e is nonnegative");
    CapacityResult {
        rate_nats: rate,
        d_opt,
        e_opt: cal.e,
        k_opt: matrix_rows(&cal.cov),
        achieved_power: cal.power,
        riccati_residual: riccati_residual(channel, &policy, &cal.cov),
        optimizer_evaluations: evaluations,
        restarts_used: starts.len(),
    }
}

/// Average of the per-step rate increments over `n` steps of the
/// deterministic covariance recursion started at `K_0 = 0`.
pub fn finite_horizon_rate(channel: &StateSpaceChannel, policy: &SourcePolicy, n: usize) -> f64 {
    assert!(n >= 1, "finite_horizon_rate needs n >= 1");
    let dim = channel.dim();
    let mut k = DMatrix::zeros(dim, dim);
    let mut total = 0.0;
    for _ in 0..n {
        total += innovation_stats(channel, &k).rate_increment;
        k = riccati_map(channel, policy, &k);
    }
    total / n as f64
}

fn white_input_log_ratio(spec: &ArmaNoiseSpec, power: f64, omega: f64) -> f64 {
    let g = equivalent_channel_response(spec, omega).norm_sqr();
    (power * g / spec.sigma_w2).ln_1p()
}

/// No-feedback rate with white input of power `P`, from the entropy rate
/// of the stationary output spectrum:
/// `(1/4pi) int_{-pi}^{pi} ln(1 + P |G|^2 / sigma_w2) dw`.
pub fn szego_rate_check(spec: &ArmaNoiseSpec, power: f64) -> Result<f64> {
    // The integrand is even in omega.
    let q = quadrature::integrate(
        |w| white_input_log_ratio(spec, power, w),
        0.0,
        PI,
        2.0 * PI * QUADRATURE_TOL,
        4096,
    );
    if !q.converged {
        return Err(Error::QuadratureFailure {
            estimate: q.error / (2.0 * PI),
        });
    }
    Ok(q.value / (2.0 * PI))
}

/// Same integral by the uniform trapezoid rule with `panels` panels over a
/// full period.
pub fn szego_rate_trapezoid(spec: &ArmaNoiseSpec, power: f64, panels: usize) -> f64 {
    quadrature::trapezoid(|w| white_input_log_ratio(spec, power, w), -PI, PI, panels) / (4.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Nu,
    Power,
}

/// One row of a [`sweep`]. A failed row carries its error message and NaN
/// numeric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub rate_nats: f64,
    pub achieved_power: f64,
    pub riccati_residual: f64,
    pub error: Option<String>,
}

fn sweep_point(template: &ArmaNoiseSpec, axis: SweepAxis, value: f64, opts: &OptimizeOptions) -> Result<CapacityResult> {
    let mut spec = template.clone();
    match axis {
        SweepAxis::Nu => {
            if !(value >= 1.0 && value.fract() == 0.0 && value < u32::MAX as f64) {
                return Err(Error::InvalidScalar {
                    field: "nu",
                    reason: format!("sweep value {value} is not a positive integer"),
                });
            }
            spec.nu = value as usize;
        }
        SweepAxis::Power => spec.power = value,
    }
    let channel = StateSpaceChannel::from_spec(&spec)?;
    Ok(optimize_capacity(&channel, spec.power, opts))
}

/// Runs [`optimize_capacity`] once per axis value. Per-row failures are
/// recorded and the sweep continues.
pub fn sweep(template: &ArmaNoiseSpec, axis: SweepAxis, values: &[f64], opts: &OptimizeOptions) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::EmptySweep);
    }
    Ok(values
        .iter()
        .map(|&value| match sweep_point(template, axis, value, opts) {
            Ok(r) => SweepRow {
                value,
                rate_nats: r.rate_nats,
                achieved_power: r.achieved_power,
                riccati_residual: r.riccati_residual,
                error: None,
            },
            Err(e) => SweepRow {
                value,
                rate_nats: f64::NAN,
                achieved_power: f64::NAN,
                riccati_residual: f64::NAN,
                error: Some(e.to_string()),
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::build_state_space;
    use approx::assert_abs_diff_eq;

    const HALF_LN2: f64 = 0.346_573_590_279_972_6;

    fn ma1(nu: usize) -> (ArmaNoiseSpec, StateSpaceChannel) {
        let spec = ArmaNoiseSpec::new(vec![0.5], vec![], 1.0, nu, 1.0);
        let ch = build_state_space(&spec);
        (spec, ch)
    }

    fn scalar_fixed_point(q: f64, e: f64, s: f64) -> f64 {
        let bq = s * (1.0 - q * q) - e * e;
        (-bq + (bq * bq + 4.0 * e * e * s).sqrt()) / 2.0
    }

    #[test]
    fn rate_examples() {
        let white = build_state_space(&ArmaNoiseSpec::white(1.0, 1, 1.0));
        let r = rate_of(&white, &SourcePolicy::open_loop(1, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(r, HALF_LN2, epsilon = 1e-14);

        let (_, ch) = ma1(1);
        let r = rate_of(&ch, &SourcePolicy::open_loop(1, 1.0).unwrap()).unwrap();
        let oracle = 0.5 * (1.0 + scalar_fixed_point(0.5, 1.0, 1.0)).ln();
        assert_abs_diff_eq!(r, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.37870, epsilon = 1e-4);

        let r = rate_of(&ch, &SourcePolicy::open_loop(1, 0.0).unwrap()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn calibrate_open_loop_is_exact() {
        let (_, ch) = ma1(1);
        let cal = calibrate_e(&ch, &DVector::zeros(1), 1.0).unwrap();
        assert_eq!(cal.e, 1.0);
    }

    #[test]
    fn calibrate_matches_nested_scalar_bisection() {
        let (_, ch) = ma1(1);
        let d = -0.3;
        // Oracle: bisection on e with the closed-form scalar fixed point.
        let power = |e: f64| d * d * scalar_fixed_point(0.5 + d, e, 1.0) + e * e;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if power(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let cal = calibrate_e(&ch, &DVector::from_element(1, d), 1.0).unwrap();
        assert_abs_diff_eq!(cal.e, 0.5 * (lo + hi), epsilon = 1e-9);
        assert!((cal.power - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn calibrate_reports_infeasible_for_divergent_loop() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]);
        let ch = StateSpaceChannel::from_parts(
            a,
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            1.0,
        )
        .unwrap();
        let d = DVector::from_vec(vec![2.0, 0.0]);
        assert!(matches!(calibrate_e(&ch, &d, 1.0), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn calibrate_reports_infeasible_when_residual_power_too_high() {
        // White noise, nu = 1, |d| > 1: as e -> 0 the power tends to
        // d^2 sigma^2 (d^2 - 1), which exceeds P = 1 for d = 3.
        let ch = build_state_space(&ArmaNoiseSpec::white(1.0, 1, 1.0));
        let d = DVector::from_element(1, 3.0);
        assert!(matches!(calibrate_e(&ch, &d, 1.0), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn finite_horizon_examples() {
        let (_, ch) = ma1(1);
        let pol = SourcePolicy::open_loop(1, 1.0).unwrap();
        assert_eq!(finite_horizon_rate(&ch, &pol, 1), 0.0);

        let white = build_state_space(&ArmaNoiseSpec::white(1.0, 1, 1.0));
        assert_abs_diff_eq!(finite_horizon_rate(&white, &pol, 2), HALF_LN2 / 2.0, epsilon = 1e-15);

        let r = finite_horizon_rate(&ch, &pol, 10_000);
        assert!((r - 0.37870).abs() < 1e-3, "{r}");
    }

    #[test]
    fn szego_examples() {
        let white = ArmaNoiseSpec::white(1.0, 1, 1.0);
        assert_abs_diff_eq!(szego_rate_check(&white, 1.0).unwrap(), HALF_LN2, epsilon = 1e-12);

        let (spec, ch) = ma1(1);
        let s = szego_rate_check(&spec, 1.0).unwrap();
        let r = rate_of(&ch, &SourcePolicy::open_loop(1, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(s, r, epsilon = 1e-9);
        assert_abs_diff_eq!(szego_rate_trapezoid(&spec, 1.0, 4096), s, epsilon = 1e-9);

        let (spec5, _) = ma1(5);
        assert_abs_diff_eq!(szego_rate_check(&spec5, 1.0).unwrap(), s, epsilon = 1e-13);
    }

    #[test]
    fn start_points_layout() {
        let opts = OptimizeOptions::default();
        let s = start_points(2, &opts);
        assert_eq!(s.len(), 16);
        assert_eq!(s[0], vec![0.0, 0.0]);
        assert_eq!(s[1], vec![1.0, 0.0]);
        assert_eq!(s[4], vec![0.0, -1.0]);
        assert!(s[5..].iter().flatten().all(|v| v.abs() <= 5.0));
        assert_eq!(s, start_points(2, &opts));
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let spec = ArmaNoiseSpec::white(1.0, 1, 1.0);
        assert_eq!(
            sweep(&spec, SweepAxis::Nu, &[], &OptimizeOptions::default()),
            Err(Error::EmptySweep)
        );
    }

    #[test]
    fn bad_sweep_row_does_not_stop_sweep() {
        let spec = ArmaNoiseSpec::white(1.0, 1, 1.0);
        let rows = sweep(&spec, SweepAxis::Nu, &[1.5, 1.0], &OptimizeOptions::default()).unwrap();
        assert!(rows[0].error.is_some());
        assert!(rows[1].error.is_none());
        assert_abs_diff_eq!(rows[1].rate_nats, HALF_LN2, epsilon = 1e-9);
    }
}
