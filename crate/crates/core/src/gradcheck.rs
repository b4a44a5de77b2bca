//! Finite-difference gradient checking.
//!
//! Everything here evaluates functions forward only; it never touches the
//! backward rules of [`crate::autograd`], so it can serve as an independent
//! reference for them.

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a vector-valued `f`, one row per input coordinate.
pub fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect()
        })
        .collect()
}

/// Largest relative error between two gradient vectors, measured against the
/// larger of the vector norms (floored at `floor`) so near-zero components do
/// not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric)).max(floor);
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / scale
}

/// Smallest distance from zero over `values`, used to skip evaluation points
/// that sit on a kink of relu, abs or max.
pub fn min_abs(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
}
