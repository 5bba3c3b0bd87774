//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("objective or gradient is not finite at iteration {iteration}")]
    NonFinite { iteration: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iterations: usize,
    /// Stop when `|f_prev - f| / max(|f_prev|, |f|, 1)` drops below this.
    pub rel_tol: f64,
    /// Stop when the gradient norm drops below this.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            max_iterations: 500,
            rel_tol: 1e-6,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Objective before the first step and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

impl Report {
    pub fn final_value(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// `(step, value, slope)` along the search direction.
type Point = (f64, f64, f64);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

struct Objective<'f, F> {
    f: &'f mut F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective<'_, F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        g.iter_mut().for_each(|v| *v = 0.0);
        (self.f)(x, g)
    }

    fn probe(&mut self, x: &[f64], d: &[f64], step: f64, out: &mut Vec<f64>) -> Probe {
        out.clear();
        out.extend(x.iter().zip(d).map(|(xi, di)| xi + step * di));
        let mut g = vec![0.0; x.len()];
        let f = self.eval(out, &mut g);
        let slope = dot(&g, d);
        Probe { f, g, slope }
    }
}

/// Minimiser of the cubic through two points with known values and slopes,
/// falling back to bisection when it is not well defined or not inside the
/// safeguarded interval.
fn interpolate(a: Point, b: Point) -> f64 {
    let (xa, fa, ga) = a;
    let (xb, fb, gb) = b;
    let (lo, hi) = (xa.min(xb), xa.max(xb));
    let d1 = ga + gb - 3.0 * (fa - fb) / (xa - xb);
    let disc = d1 * d1 - ga * gb;
    let mid = 0.5 * (xa + xb);
    if disc < 0.0 || !disc.is_finite() {
        return mid;
    }
    let d2 = (xb - xa).signum() * disc.sqrt();
    let denom = gb - ga + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let x = xb - (xb - xa) * (gb + d2 - d1) / denom;
    let margin = 0.1 * (hi - lo);
    if x.is_finite() && x > lo + margin && x < hi - margin {
        x
    } else {
        mid
    }
}

/// Strong-Wolfe line search. Returns the accepted step, the new point and
/// its probe, or `None` if no acceptable step was found.
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Objective<'_, F>,
    cfg: &LbfgsConfig,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    initial: f64,
) -> Option<(Vec<f64>, Probe)> {
    let mut point = Vec::with_capacity(x.len());
    let mut prev = (0.0, f0, slope0);
    let mut step = initial;
    let mut zoom: Option<(Point, Point)> = None;
    for i in 0..cfg.max_line_search {
        let probe = obj.probe(x, d, step, &mut point);
        if !probe.f.is_finite() {
            // Overshot into a region where the objective blows up.
            step = 0.5 * (prev.0 + step);
            continue;
        }
        if probe.f > f0 + cfg.c1 * step * slope0 || (i > 0 && probe.f >= prev.1) {
            zoom = Some((prev, (step, probe.f, probe.slope)));
            break;
        }
        if probe.slope.abs() <= -cfg.c2 * slope0 {
            return Some((point, probe));
        }
        if probe.slope >= 0.0 {
            zoom = Some(((step, probe.f, probe.slope), prev));
            break;
        }
        prev = (step, probe.f, probe.slope);
        step *= 2.0;
    }
    let (mut lo, mut hi) = zoom?;
    for _ in 0..cfg.max_line_search {
        let step = interpolate(lo, hi);
        let probe = obj.probe(x, d, step, &mut point);
        if !probe.f.is_finite() || probe.f > f0 + cfg.c1 * step * slope0 || probe.f >= lo.1 {
            hi = (step, probe.f, probe.slope);
        } else {
            if probe.slope.abs() <= -cfg.c2 * slope0 {
                return Some((point, probe));
            }
            if probe.slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (step, probe.f, probe.slope);
        }
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
    }
    // Fall back to the best sufficient-decrease point seen.
    if lo.0 > 0.0 && lo.1 < f0 {
        let probe = obj.probe(x, d, lo.0, &mut point);
        return Some((point, probe));
    }
    None
}

/// Minimises `f` starting from `x`, which is updated in place. `f` fills
/// the (zeroed) gradient buffer and returns the objective.
pub fn minimize<F>(mut f: F, x: &mut [f64], cfg: &LbfgsConfig) -> Result<Report, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut obj = Objective {
        f: &mut f,
        evaluations: 0,
    };
    let mut g = vec![0.0; x.len()];
    let mut fx = obj.eval(x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite { iteration: 0 });
    }
    let mut trace = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if norm(&g) <= cfg.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 || !slope.is_finite() {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let initial = if history.is_empty() { 1.0 / norm(&g).max(1.0) } else { 1.0 };
        let mut found = line_search(&mut obj, cfg, x, fx, slope, &d, initial);
        if found.is_none() && !history.is_empty() {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
            found = line_search(&mut obj, cfg, x, fx, slope, &d, 1.0 / norm(&g).max(1.0));
        }
        let Some((next, probe)) = found else {
            log::debug!("line search failed at iteration {iterations}");
            break;
        };
        iterations += 1;
        if !probe.f.is_finite() || probe.g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFinite { iteration: iterations });
        }
        let s: Vec<f64> = next.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == cfg.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&next);
        let prev = fx;
        fx = probe.f;
        g = probe.g;
        trace.push(fx);
        log::debug!("iteration {iterations}: objective {fx:.6}");
        if (prev - fx).abs() / prev.abs().max(fx.abs()).max(1.0) < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(Report {
        trace,
        iterations,
        evaluations: obj.evaluations,
        converged,
        grad_norm: norm(&g),
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alpha = vec![0.0; history.len()];
    for (i, (s, y, rho)) in history.iter().enumerate().rev() {
        alpha[i] = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= alpha[i] * yi);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, rho)) in history.iter().enumerate() {
        let beta = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (alpha[i] - beta) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
