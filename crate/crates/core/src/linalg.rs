use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage};

/// Power-iteration settings for [`spectral_norm`].
pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOLERANCE: f64 = 1e-10;

/// Largest singular value by power iteration on `A^T A`.
///
/// Stops after [`POWER_ITERATIONS`] steps or once the estimate changes by
/// less than [`POWER_TOLERANCE`] relative.
pub fn spectral_norm<R, C, S>(a: &Matrix<f64, R, C, S>) -> f64
where
    R: Dim,
    C: Dim,
    S: RawStorage<f64, R, C>,
{
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let a = DMatrix::from_fn(rows, cols, |r, c| a[(r, c)]);
    if a.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    // deterministic start with no special alignment to coordinate axes
    let mut x = DVector::from_fn(cols, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    x.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let ax = &a * &x;
        let mut next = a.tr_mul(&ax);
        let norm = next.norm();
        if norm == 0.0 {
            // start vector in the null space; fall back to a column
            let (idx, _) = a.column_iter().enumerate().fold((0, 0.0), |best, (i, c)| {
                if c.norm() > best.1 {
                    (i, c.norm())
                } else {
                    best
                }
            });
            x = DVector::zeros(cols);
            x[idx] = 1.0;
            continue;
        }
        next /= norm;
        let new_estimate = (&a * &next).norm();
        x = next;
        let converged = (new_estimate - estimate).abs() <= POWER_TOLERANCE * new_estimate;
        estimate = new_estimate;
        if converged {
            break;
        }
    }
    estimate
}
