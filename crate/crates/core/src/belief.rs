//! Gaussian beliefs over the world state.
//!
//! The 1D agent receives no observations, so its belief is pure prediction:
//! `mu' = mu + g_a * a` and `var' = var + sigma0^2`. The 2D agent runs an extended Kalman filter
//! over `(x, y, phi, v, omega)` with noisy readings of `(v, omega)`.
//!
//! Everything here is generic over [`Real`] so the inference code can push derivatives with
//! respect to the internal-model parameters through the whole recursion.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::task::{drift_1d, drift_2d, Action, ContinuousAction, DiscreteAction, ModelParams, State2d, TaskConfig, TaskId};

/// Eigenvalue floor applied after every predict/update.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Variances below this are floored before taking logs in [`belief_features`].
pub const LOG_VAR_FLOOR: f64 = 1e-8;
/// Measurement rows of the 2D state observed by the agent.
pub const OBSERVED_ROWS: [usize; 2] = [3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief<T = f64> {
    pub mean: Vec<T>,
    /// Row-major `n x n` covariance.
    pub cov: Vec<T>,
}

impl<T: Real> GaussianBelief<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> T {
        self.cov[i * self.dim() + j]
    }

    /// Belief right after the initial target reading.
    pub fn initial(cfg: &TaskConfig, reading: &[f64]) -> Self {
        let n = cfg.task.state_dim();
        let mut mean = vec![T::cst(0.0); n];
        for (m, r) in mean.iter_mut().zip(reading) {
            *m = T::cst(*r);
        }
        let mut cov = vec![T::cst(0.0); n * n];
        for (i, v) in cfg.initial_var.iter().enumerate() {
            cov[i * n + i] = T::cst(*v);
        }
        GaussianBelief { mean, cov }
    }

    pub fn values(&self) -> GaussianBelief<f64> {
        GaussianBelief {
            mean: self.mean.iter().map(|m| m.val()).collect(),
            cov: self.cov.iter().map(|c| c.val()).collect(),
        }
    }
}

/// Symmetrise and clamp eigenvalues at [`EIGEN_FLOOR`].
///
/// With dual numbers the clamp only shifts values; derivatives pass through unchanged.
pub fn condition<T: Real>(cov: &mut [T], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (cov[i * n + j] + cov[j * n + i]).scale(0.5);
            cov[i * n + j] = s;
            cov[j * n + i] = s;
        }
    }
    if n == 1 {
        if cov[0].val() < EIGEN_FLOOR {
            cov[0] = cov[0].with_value(EIGEN_FLOOR);
        }
        return;
    }
    let m = DMatrix::from_fn(n, n, |i, j| cov[i * n + j].val());
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= EIGEN_FLOOR) {
        return;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let u = &eig.eigenvectors;
    let fixed = u * DMatrix::from_diagonal(&clamped) * u.transpose();
    for i in 0..n {
        for j in 0..n {
            // Exact symmetry survives the reconstruction.
            let v = 0.5 * (fixed[(i, j)] + fixed[(j, i)]);
            cov[i * n + j] = cov[i * n + j].with_value(v);
        }
    }
}

pub fn predict_1d<T: Real>(b: &GaussianBelief<T>, a: DiscreteAction, p: &ModelParams<T>) -> GaussianBelief<T> {
    let mut cov = vec![b.cov[0] + p.sigma0 * p.sigma0];
    condition(&mut cov, 1);
    GaussianBelief {
        mean: vec![drift_1d(b.mean[0], a, p.gains[0])],
        cov,
    }
}

/// Generic EKF time update: `cov' = F cov F^T + diag(q)` around a precomputed mean.
pub fn ekf_propagate<T: Real>(b: &GaussianBelief<T>, mean_next: Vec<T>, jac: &[T], q_diag: &[T]) -> GaussianBelief<T> {
    let n = b.dim();
    let zero = T::cst(0.0);
    let mut fp = vec![zero; n * n];
    for i in 0..n {
        for k in 0..n {
            let f = jac[i * n + k];
            if f.val() == 0.0 && !T::TRACKS_GRADIENT {
                continue;
            }
            for j in 0..n {
                fp[i * n + j] += f * b.cov[k * n + j];
            }
        }
    }
    let mut cov = vec![zero; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = zero;
            for k in 0..n {
                acc += fp[i * n + k] * jac[j * n + k];
            }
            cov[i * n + j] = acc;
        }
        cov[i * n + i] += q_diag[i];
    }
    condition(&mut cov, n);
    GaussianBelief { mean: mean_next, cov }
}

/// Jacobian of [`drift_2d`] with respect to the state, evaluated at `s`.
pub fn drift_2d_jacobian<T: Real>(s: &[T], a: ContinuousAction, gains: [T; 2], dt: f64) -> Vec<T> {
    let next = drift_2d(s, a, gains, dt);
    let (phi, v) = (next[2], next[3]);
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let mut f = vec![zero; 25];
    // Velocities are set by the controls, so their rows vanish.
    f[0] = one;
    f[2] = (v * phi.sin()).scale(dt);
    f[5 + 1] = one;
    f[5 + 2] = -(v * phi.cos()).scale(dt);
    f[10 + 2] = one;
    f
}

pub fn ekf_predict<T: Real>(b: &GaussianBelief<T>, a: ContinuousAction, p: &ModelParams<T>, dt: f64) -> GaussianBelief<T> {
    let mean = drift_2d(&b.mean, a, p.gains, dt).to_vec();
    let jac = drift_2d_jacobian(&b.mean, a, p.gains, dt);
    let q = p.sigma0 * p.sigma0;
    let zero = T::cst(0.0);
    ekf_propagate(b, mean, &jac, &[q, q, zero, zero, zero])
}

/// Kalman measurement update for a measurement that selects `rows` of the state, with
/// independent noise variances `r_diag`. Uses the Joseph form.
pub fn kalman_update<T: Real>(b: &GaussianBelief<T>, rows: &[usize], obs: &[f64], r_diag: &[f64]) -> GaussianBelief<T> {
    let n = b.dim();
    let m = rows.len();
    // S = H P H^T + R
    let mut s = vec![T::cst(0.0); m * m];
    for (a, &ra) in rows.iter().enumerate() {
        for (c, &rc) in rows.iter().enumerate() {
            s[a * m + c] = b.cov[ra * n + rc];
        }
        s[a * m + a] += T::cst(r_diag[a]);
    }
    let Some(s_inv) = invert_small(&s, m) else {
        // No information can be fused through a singular innovation covariance.
        return b.clone();
    };
    // K = P H^T S^-1  (n x m)
    let mut k = vec![T::cst(0.0); n * m];
    for i in 0..n {
        for c in 0..m {
            let mut acc = T::cst(0.0);
            for (a, &ra) in rows.iter().enumerate() {
                acc += b.cov[i * n + ra] * s_inv[a * m + c];
            }
            k[i * m + c] = acc;
        }
    }
    let mut mean = b.mean.clone();
    for (i, mi) in mean.iter_mut().enumerate() {
        for (c, &rc) in rows.iter().enumerate() {
            *mi += k[i * m + c] * (T::cst(obs[c]) - b.mean[rc]);
        }
    }
    // A = I - K H
    let mut a_mat = vec![T::cst(0.0); n * n];
    for i in 0..n {
        a_mat[i * n + i] = T::cst(1.0);
        for (c, &rc) in rows.iter().enumerate() {
            a_mat[i * n + rc] = a_mat[i * n + rc] - k[i * m + c];
        }
    }
    let ap = matmul(&a_mat, &b.cov, n);
    let mut cov = vec![T::cst(0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::cst(0.0);
            for l in 0..n {
                acc += ap[i * n + l] * a_mat[j * n + l];
            }
            for c in 0..m {
                acc += (k[i * m + c] * k[j * m + c]).scale(r_diag[c]);
            }
            cov[i * n + j] = acc;
        }
    }
    condition(&mut cov, n);
    GaussianBelief { mean, cov }
}

pub fn ekf_update<T: Real>(b: &GaussianBelief<T>, obs: &[f64], obs_noise_std: f64) -> GaussianBelief<T> {
    let r = obs_noise_std * obs_noise_std;
    kalman_update(b, &OBSERVED_ROWS, obs, &[r, r])
}

/// Most probable reading given the state. The observation density is Gaussian around the
/// true `(v, omega)`, so its mode is the noiseless measurement whatever the noise level.
pub fn map_observation(s: &State2d, _obs_noise_std: f64) -> [f64; 2] {
    [s.v, s.omega]
}

/// One belief transition: predict under `action`, then fuse `obs` when the task has readings.
pub fn advance<T: Real>(b: &GaussianBelief<T>, action: &Action, obs: Option<&[f64]>, p: &ModelParams<T>, cfg: &TaskConfig) -> GaussianBelief<T> {
    match (cfg.task, action) {
        (TaskId::Firefly1d, Action::Discrete(a)) => predict_1d(b, *a, p),
        (TaskId::Firefly2d, Action::Continuous(a)) => {
            let pred = ekf_predict(b, *a, p, cfg.dt);
            match obs {
                Some(o) => ekf_update(&pred, o, cfg.obs_noise_std),
                None => pred,
            }
        }
        _ => panic!("action {action:?} does not belong to task {}", cfg.task),
    }
}

/// Number of features produced by [`belief_features`] for a state dimension `n`.
pub fn feature_len(n: usize) -> usize {
    n + n * (n + 1) / 2
}

/// Mean followed by the row-major upper triangle of the covariance, with log-variances on the
/// diagonal.
pub fn belief_features<T: Real>(b: &GaussianBelief<T>) -> Vec<T> {
    let n = b.dim();
    let mut out = Vec::with_capacity(feature_len(n));
    out.extend_from_slice(&b.mean);
    for i in 0..n {
        for j in i..n {
            let c = b.cov[i * n + j];
            if i == j {
                if c.val() < LOG_VAR_FLOOR {
                    out.push(T::cst(LOG_VAR_FLOOR.ln()));
                } else {
                    out.push(c.ln());
                }
            } else {
                out.push(c);
            }
        }
    }
    out
}

/// Ordered beliefs `b_0..b_T` for a trajectory of `T` steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrajectory(pub Vec<GaussianBelief<f64>>);

fn matmul<T: Real>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::cst(0.0); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Gauss-Jordan inverse of a small dense matrix. `None` when (numerically) singular.
fn invert_small<T: Real>(a: &[T], m: usize) -> Option<Vec<T>> {
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.val().abs()));
    if scale == 0.0 {
        return None;
    }
    let mut w = a.to_vec();
    let mut inv = vec![T::cst(0.0); m * m];
    for i in 0..m {
        inv[i * m + i] = T::cst(1.0);
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| w[x * m + col].val().abs().total_cmp(&w[y * m + col].val().abs()))?;
        if w[piv * m + col].val().abs() <= 1e-300_f64.max(scale * 1e-300) {
            return None;
        }
        if piv != col {
            for j in 0..m {
                w.swap(piv * m + j, col * m + j);
                inv.swap(piv * m + j, col * m + j);
            }
        }
        let d = w[col * m + col];
        for j in 0..m {
            w[col * m + j] = w[col * m + j] / d;
            inv[col * m + j] = inv[col * m + j] / d;
        }
        for r in 0..m {
            if r != col {
                let f = w[r * m + col];
                for j in 0..m {
                    w[r * m + j] = w[r * m + j] - f * w[col * m + j];
                    inv[r * m + j] = inv[r * m + j] - f * inv[col * m + j];
                }
            }
        }
    }
    Some(inv)
}
