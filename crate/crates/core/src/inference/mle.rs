//! Projected gradient ascent on a log-likelihood over a coordinate box.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::fisher::{confidence_intervals, fisher_information};
use super::Likelihood;
use crate::error::{IrcError, Result};
use crate::params::{sample_params, ParamPoint, ParamSpace};

/// A differentiable objective to maximize over a box.
pub trait Objective {
    /// Box in the optimization coordinates, one `(lo, hi)` per dim.
    fn bounds(&self) -> Vec<(f64, f64)>;

    /// Dims that are optimized; the rest stay where they start.
    fn active(&self) -> Vec<usize> {
        (0..self.bounds().len()).collect()
    }

    fn value(&self, u: &[f64]) -> Result<f64>;

    fn gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Per-observation gradients whose sum is the gradient, when the objective is a sum of
    /// independent terms. Enables the outer-product step.
    fn scores(&self, _u: &[f64]) -> Result<Option<(f64, Vec<f64>, Vec<Vec<f64>>)>> {
        Ok(None)
    }

    /// Number of terms, used to scale the convergence tolerance.
    fn n_terms(&self) -> usize {
        1
    }
}

impl Objective for Likelihood<'_> {
    fn bounds(&self) -> Vec<(f64, f64)> {
        self.space().dims.iter().map(|d| d.coord_bounds()).collect()
    }

    fn active(&self) -> Vec<usize> {
        self.space().inferable_indices()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        Likelihood::value(self, u)
    }

    fn gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        Likelihood::gradient(self, u)
    }

    fn scores(&self, u: &[f64]) -> Result<Option<(f64, Vec<f64>, Vec<Vec<f64>>)>> {
        self.value_and_scores(u).map(Some)
    }

    fn n_terms(&self) -> usize {
        self.data().n_steps()
    }
}

/// How the ascent direction is formed from the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Plain gradient: `u += alpha * g`.
    Identity,
    /// Outer product of per-trajectory scores (BHHH): `u += alpha * (sum s s^T)^-1 g`.
    #[default]
    OuterProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleOptions {
    /// Initial step length of every line search.
    pub step: f64,
    pub backtrack: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Convergence tolerance on `|delta L|` per likelihood term (per observed step).
    pub tol_per_term: f64,
    pub preconditioner: Preconditioner,
    /// Skip the information matrix (half-widths come back empty).
    pub skip_fisher: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            step: 1.0,
            backtrack: 0.5,
            max_iters: 500,
            restarts: 4,
            tol_per_term: 1e-6,
            preconditioner: Preconditioner::OuterProduct,
            skip_fisher: false,
        }
    }
}

impl MleOptions {
    /// Plain gradient ascent with the fixed step size `0.05`.
    pub fn gradient_ascent() -> Self {
        MleOptions {
            step: 0.05,
            preconditioner: Preconditioner::Identity,
            ..MleOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IrcError::Config(format!("inference: {m}")));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack must lie in (0, 1)");
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return bad("max_iters and restarts must be at least 1");
        }
        if !(self.tol_per_term >= 0.0) {
            return bad("tol_per_term must be non-negative");
        }
        Ok(())
    }
}

/// One fitted optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta_hat: ParamPoint,
    /// `theta_hat` in inference coordinates.
    pub coords: Vec<f64>,
    pub log_likelihood: f64,
    /// Dims the half-widths and information refer to.
    pub active: Vec<usize>,
    /// 95% half-widths in inference coordinates, per active dim.
    pub half_widths: Vec<f64>,
    /// Observed information over the active dims, row-major.
    pub information: Vec<Vec<f64>>,
    pub information_indefinite: bool,
    /// Log-likelihood before the first and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
    pub start: Vec<f64>,
    /// Final log-likelihood of every restart (`None` when it failed).
    pub restart_values: Vec<Option<f64>>,
}

fn project(u: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, &(lo, hi)) in u.iter_mut().zip(bounds) {
        *x = x.clamp(lo, hi);
    }
}

/// Active dims not pinned against a bound by the gradient.
fn free_dims(u: &[f64], g: &[f64], bounds: &[(f64, f64)], active: &[usize]) -> Vec<usize> {
    active
        .iter()
        .copied()
        .filter(|&i| {
            let (lo, hi) = bounds[i];
            !((u[i] <= lo && g[i] < 0.0) || (u[i] >= hi && g[i] > 0.0))
        })
        .collect()
}

fn outer_product_direction(g: &[f64], scores: &[Vec<f64>], free: &[usize]) -> Option<Vec<f64>> {
    let k = free.len();
    // Centred, so that far from the optimum the shared mean score does not swamp the spread
    // and shrink the step. At a stationary point this is the plain outer product.
    let n = scores.len().max(1) as f64;
    let mean: Vec<f64> = free.iter().map(|&i| scores.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let mut b = DMatrix::<f64>::zeros(k, k);
    for s in scores {
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                b[(r, c)] += (s[i] - mean[r]) * (s[j] - mean[c]);
            }
        }
    }
    let scale = b.trace() / k as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for r in 0..k {
        b[(r, r)] += 1e-9 * scale;
    }
    let rhs = DVector::from_iterator(k, free.iter().map(|&i| g[i]));
    let x = b.cholesky()?.solve(&rhs);
    let mut d = vec![0.0; g.len()];
    for (r, &i) in free.iter().enumerate() {
        d[i] = x[r];
    }
    Some(d)
}

const MAX_EXPANSION: f64 = 1024.0;

/// Projected ascent from `u0` with backtracking. Steps that lower the objective (or make it
/// non-finite) are shrunk until they do not, and full steps that raise it are tried at double
/// length while that keeps paying off; the run stops once an accepted step changes the
/// objective by less than the tolerance.
pub fn ascend<O: Objective + ?Sized>(obj: &O, u0: &[f64], opts: &MleOptions) -> Result<(Vec<f64>, f64, Vec<f64>, bool)> {
    opts.validate()?;
    let bounds = obj.bounds();
    let active = obj.active();
    let tol = opts.tol_per_term * obj.n_terms().max(1) as f64;
    let mut u = u0.to_vec();
    project(&mut u, &bounds);
    let mut value = obj.value(&u)?;
    let mut trace = vec![value];
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let (g, scores) = match opts.preconditioner {
            Preconditioner::OuterProduct => match obj.scores(&u)? {
                Some((_, g, s)) => (g, Some(s)),
                None => (obj.gradient(&u)?.1, None),
            },
            Preconditioner::Identity => (obj.gradient(&u)?.1, None),
        };
        let free = free_dims(&u, &g, &bounds, &active);
        if free.is_empty() {
            converged = true;
            break;
        }
        let mut d = scores
            .as_deref()
            .and_then(|s| outer_product_direction(&g, s, &free))
            .unwrap_or_else(|| {
                let mut d = vec![0.0; g.len()];
                free.iter().for_each(|&i| d[i] = g[i]);
                d
            });
        // Keep the direction uphill even if the curvature model is poor.
        let slope: f64 = free.iter().map(|&i| d[i] * g[i]).sum();
        if slope <= 0.0 {
            d = vec![0.0; g.len()];
            free.iter().for_each(|&i| d[i] = g[i]);
        }
        let mut step = opts.step;
        let mut accepted = None;
        while step > 1e-12 {
            let mut cand: Vec<f64> = u.iter().zip(&d).map(|(x, dx)| x + step * dx).collect();
            project(&mut cand, &bounds);
            if let Ok(v) = obj.value(&cand) {
                if v >= value {
                    accepted = Some((cand, v));
                    break;
                }
            }
            step *= opts.backtrack;
        }
        // A full step that already helps may be too short; keep doubling while it pays.
        if step == opts.step {
            while let Some((best, bv)) = accepted.as_ref() {
                if step >= opts.step * MAX_EXPANSION {
                    break;
                }
                let mut cand: Vec<f64> = u.iter().zip(&d).map(|(x, dx)| x + 2.0 * step * dx).collect();
                project(&mut cand, &bounds);
                if &cand == best {
                    break;
                }
                match obj.value(&cand) {
                    Ok(v) if v > *bv => {
                        step *= 2.0;
                        accepted = Some((cand, v));
                    }
                    _ => break,
                }
            }
        }
        match accepted {
            Some((cand, v)) => {
                let delta = v - value;
                log::trace!("ascent: L {v:.6} step {step:.3e} u {cand:?} g {g:?}");
                u = cand;
                value = v;
                trace.push(v);
                if delta.abs() < tol {
                    converged = true;
                    break;
                }
            }
            None => {
                // No uphill point along the direction at any representable step: a stationary
                // point up to round-off.
                let slope: f64 = free.iter().map(|&i| d[i] * g[i]).sum();
                converged = slope.abs() * 1e-6 < tol.max(f64::EPSILON * value.abs());
                break;
            }
        }
    }
    Ok((u, value, trace, converged))
}

/// Maximize the likelihood from `theta0`, then attach the information matrix and intervals.
pub fn mle_fit(lik: &Likelihood<'_>, theta0: &ParamPoint, opts: &MleOptions) -> Result<MleResult> {
    let space = lik.space();
    space.check(theta0)?;
    let start = space.to_coords(theta0);
    let (coords, value, trace, converged) = ascend(lik, &start, opts)?;
    let active = space.inferable_indices();
    let (half_widths, information, indefinite) = if opts.skip_fisher {
        (Vec::new(), Vec::new(), false)
    } else {
        let info = fisher_information(lik, &coords)?;
        (confidence_intervals(&info), info.rows(), info.indefinite)
    };
    Ok(MleResult {
        theta_hat: space.from_coords(&coords),
        coords,
        log_likelihood: value,
        active,
        half_widths,
        information,
        information_indefinite: indefinite,
        iterations: trace.len() - 1,
        trace,
        converged,
        restart: 0,
        start,
        restart_values: Vec::new(),
    })
}

/// Starting points for [`multi_restart`]: uniform draws on the inferable dims, midpoint on the
/// rest.
pub fn restart_points(space: &ParamSpace, n: usize, seed: u64) -> Vec<ParamPoint> {
    let mid = space.midpoint();
    let active = space.inferable_indices();
    sample_params(space, n, seed)
        .into_iter()
        .map(|mut p| {
            for i in 0..p.0.len() {
                if !active.contains(&i) {
                    p.0[i] = mid.0[i];
                }
            }
            p
        })
        .collect()
}

/// Fit from `opts.restarts` random starts and keep the best. Information and intervals are
/// computed for the winner only.
pub fn multi_restart(lik: &Likelihood<'_>, opts: &MleOptions, seed: u64) -> Result<MleResult> {
    opts.validate()?;
    let starts = restart_points(lik.space(), opts.restarts, seed);
    let quick = MleOptions { skip_fisher: true, ..opts.clone() };
    let mut best: Option<MleResult> = None;
    let mut values = Vec::with_capacity(starts.len());
    let mut last_err = String::new();
    for (i, s) in starts.iter().enumerate() {
        match mle_fit(lik, s, &quick) {
            Ok(mut r) => {
                log::debug!("restart {i}: L = {:.6} after {} iterations", r.log_likelihood, r.iterations);
                values.push(Some(r.log_likelihood));
                if best.as_ref().is_none_or(|b| r.log_likelihood > b.log_likelihood) {
                    r.restart = i;
                    best = Some(r);
                }
            }
            Err(e) => {
                log::warn!("restart {i} failed: {e}");
                values.push(None);
                last_err = e.to_string();
            }
        }
    }
    let mut best = best.ok_or(IrcError::AllRestartsFailed { restarts: starts.len(), last: last_err })?;
    best.restart_values = values;
    if !opts.skip_fisher {
        let info = fisher_information(lik, &best.coords)?;
        best.half_widths = confidence_intervals(&info);
        best.information = info.rows();
        best.information_indefinite = info.indefinite;
    }
    Ok(best)
}
