//! Derivative-free Nelder-Mead simplex minimizer.
//!
//! Non-finite objective values are treated as `+inf`, which lets callers
//! reject infeasible points without failing the search.

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Edge length of the initial axis-aligned simplex.
    pub initial_step: f64,
    /// Stop once every vertex is within this distance of the best one.
    pub diameter_tol: f64,
    pub max_iterations: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.25,
            diameter_tol: 1e-9,
            max_iterations: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn affine(base: &[f64], toward: &[f64], t: f64) -> Vec<f64> {
    base.iter().zip(toward).map(|(b, p)| b + t * (p - b)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimizes `f` starting from `x0`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: NelderMeadOptions) -> NelderMeadResult {
    let n = x0.len();
    let mut obj = Counted { f, evaluations: 0 };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), obj.eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let v = obj.eval(&x);
        simplex.push((x, v));
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| distance(x, &simplex[0].0))
            .fold(0.0, f64::max);
        if diameter < opts.diameter_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let worst = simplex[n].clone();
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();

        // Reflection through the centroid: centroid + REFLECT (centroid - worst).
        let reflected = affine(&centroid, &worst.0, -REFLECT);
        let fr = obj.eval(&reflected);

        if fr < simplex[0].1 {
            let expanded = affine(&centroid, &worst.0, -EXPAND);
            let fe = obj.eval(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }

        let (contracted, fc) = if fr < worst.1 {
            let p = affine(&centroid, &reflected, CONTRACT);
            let v = obj.eval(&p);
            (p, v)
        } else {
            let p = affine(&centroid, &worst.0, CONTRACT);
            let v = obj.eval(&p);
            (p, v)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (contracted, fc);
            continue;
        }

        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x = affine(&best, &vertex.0, SHRINK);
            let v = obj.eval(&x);
            *vertex = (x, v);
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    NelderMeadResult {
        x,
        value,
        evaluations: obj.evaluations,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            NelderMeadOptions {
                initial_step: 0.5,
                diameter_tol: 1e-10,
                max_iterations: 10_000,
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn one_dimensional_quadratic() {
        let r = minimize(|x| (x[0] - 0.3).powi(2), &[2.0], NelderMeadOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 0.3).abs() < 1e-8);
    }

    #[test]
    fn rejected_region_is_avoided() {
        // Minimum of the smooth part lies in the forbidden half-plane.
        let r = minimize(
            |x| if x[0] < 0.5 { f64::INFINITY } else { x[0] * x[0] + x[1] * x[1] },
            &[2.0, 1.0],
            NelderMeadOptions::default(),
        );
        assert!(r.value.is_finite());
        assert!(r.x[0] >= 0.5 && (r.x[0] - 0.5).abs() < 1e-6);
    }
}
