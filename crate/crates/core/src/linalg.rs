//! Dense linear solves for the policy-evaluation and occupancy systems.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solves `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &Array2<f64>, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let n = m.nrows();
    if m.ncols() != n || rhs.len() != n {
        return Err(Error::Dimension(format!(
            "solve: matrix {}x{}, rhs {}",
            m.nrows(),
            m.ncols(),
            rhs.len()
        )));
    }
    let a = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let b = DVector::from_iterator(n, rhs.iter().copied());
    let x = a.lu().solve(&b).ok_or(Error::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Solves `m^T x = rhs`.
pub fn solve_transposed(m: &Array2<f64>, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    solve(&m.t().to_owned(), rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_system() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let x = solve(&m, &array![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        let y = solve_transposed(&array![[1.0, 2.0], [0.0, 1.0]], &array![1.0, 4.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-14 && (y[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_is_reported() {
        let m = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(solve(&m, &array![1.0, 1.0]), Err(Error::SingularSystem)));
    }
}
