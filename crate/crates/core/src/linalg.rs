//! SVD-based rank helpers shared by the Jacobian and `M2` analyses.

use nalgebra::{DMatrix, DVector};

/// Singular values (descending) and right singular vectors of a matrix with
/// `cols` columns. Short matrices are padded with zero rows so that exactly
/// `cols` singular values and a full right basis are returned.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub singular_values: DVector<f64>,
    /// Columns are right singular vectors, ordered like `singular_values`.
    pub right_vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let cols = m.ncols();
        let padded;
        let m = if m.nrows() < cols {
            padded = m.clone().resize_vertically(cols, 0.0);
            &padded
        } else {
            m
        };
        let svd = m.clone().svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let singular_values = DVector::from_iterator(cols, order.iter().map(|&i| svd.singular_values[i]));
        let right_vectors = DMatrix::from_fn(cols, cols, |r, c| v_t[(order[c], r)]);
        Self { singular_values, right_vectors }
    }

    pub fn max(&self) -> f64 {
        self.singular_values.get(0).copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.singular_values.as_slice().last().copied().unwrap_or(0.0)
    }

    /// `σ_min / σ_max`, zero for a zero matrix.
    pub fn ratio(&self) -> f64 {
        if self.max() > 0.0 {
            self.min() / self.max()
        } else {
            0.0
        }
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        numerical_rank(self.singular_values.as_slice(), rel_tol)
    }

    /// Unit right singular vector of the smallest singular value.
    pub fn null_direction(&self) -> DVector<f64> {
        let n = self.right_vectors.ncols();
        self.right_vectors.column(n - 1).into_owned()
    }
}

pub fn numerical_rank(singular_values: &[f64], rel_tol: f64) -> usize {
    let max = singular_values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rel_tol * max).count()
}
