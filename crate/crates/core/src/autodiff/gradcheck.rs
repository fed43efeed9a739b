//! Finite-difference oracle for checking analytic gradients.
//!
//! Only evaluates the forward function, so it stays independent of the
//! backward pass it validates.

use rand::Rng;
use rand_distr::StandardNormal;

/// Relative error with an absolute floor for near-zero derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central difference `(f(x + h d) - f(x - h d)) / 2h`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Random unit-norm direction.
pub fn unit_direction(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    d.iter_mut().for_each(|v| *v /= norm);
    d
}

/// Compares `<grad, d>` with the central difference along `directions`
/// random unit directions; returns the worst relative error.
pub fn directional(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    directions: usize,
    h: f64,
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let d = unit_direction(x.len(), rng);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        let numeric = central_difference(&mut f, x, &d, h);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// Per-coordinate central differences; returns the worst relative error.
pub fn coordinatewise(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut worst = 0.0f64;
    let mut e = vec![0.0; x.len()];
    for i in 0..x.len() {
        e[i] = 1.0;
        let numeric = central_difference(&mut f, x, &e, h);
        e[i] = 0.0;
        worst = worst.max(rel_err(grad[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let x = [0.7, -1.3];
        let good = [2.0 * 0.7 * -1.3, 0.49 + (-1.3f64).cos()];
        let bad = [good[0] * 1.01, good[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(directional(f, &x, &good, 8, 1e-5, &mut rng) < 1e-8);
        assert!(coordinatewise(f, &x, &good, 1e-5) < 1e-8);
        assert!(coordinatewise(f, &x, &bad, 1e-5) > 1e-3);
    }
}
