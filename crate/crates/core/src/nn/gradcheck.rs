//! Central-difference gradient checks.

/// Relative step: `h_i = REL_STEP * max(1, |x_i|)`.
pub const REL_STEP: f64 = 1e-5;
/// Denominator floor, so that tiny components are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-2;

pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    numeric_gradient_with_step(f, x, REL_STEP)
}

pub fn numeric_gradient_with_step<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut z = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            z[i] = x[i] + h;
            let fp = f(&z);
            z[i] = x[i] - h;
            let fm = f(&z);
            z[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Worst componentwise `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compare an analytic gradient of `f` at `x` against central differences.
pub fn check_gradient<F: Fn(&[f64]) -> f64>(f: F, analytic: &[f64], x: &[f64]) -> f64 {
    assert_eq!(analytic.len(), x.len(), "gradient length");
    relative_error(analytic, &numeric_gradient(f, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x = [0.3, -2.0, 1.2, -0.7];
        let f = |z: &[f64]| 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        assert!(check_gradient(f, &x, &x) < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = [1.0, 2.0];
        let num = numeric_gradient(|_: &[f64]| 4.2, &x);
        assert_eq!(num, vec![0.0, 0.0]);
        assert_eq!(check_gradient(|_: &[f64]| 4.2, &[0.0, 0.0], &x), 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |z: &[f64]| z[0].sin();
        assert!(check_gradient(f, &[1.0], &[0.5]) > 0.1);
    }
}
