use super::{Layout, SparseError, SparseMatrix};
use crate::Scalar;

/// Reference SpGEMM: row-wise (Gustavson) product with a dense accumulator.
///
/// Every output element is accumulated left to right over `k` ascending.
/// Any coordinate reached by at least one partial product is kept in the
/// structure, even if the contributions cancel to zero. The result is CSR.
pub fn oracle_spgemm<T: Scalar>(a: &SparseMatrix<T>, b: &SparseMatrix<T>) -> Result<SparseMatrix<T>, SparseError> {
    if a.n_cols() != b.n_rows() {
        return Err(SparseError::DimensionMismatch {
            left_cols: a.n_cols(),
            right_rows: b.n_rows(),
        });
    }
    let a = a.to_csr();
    let b = b.to_csr();
    let n_cols = b.n_cols();

    let mut acc = vec![T::zero(); n_cols];
    let mut touched = vec![false; n_cols];
    let mut row_cols: Vec<usize> = Vec::new();

    let mut offsets = Vec::with_capacity(a.n_rows() + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    offsets.push(0);
    for r in 0..a.n_rows() {
        let (a_idx, a_val) = a.slice(r);
        for (&k, &av) in a_idx.iter().zip(a_val) {
            let (b_idx, b_val) = b.slice(k);
            for (&c, &bv) in b_idx.iter().zip(b_val) {
                if !touched[c] {
                    touched[c] = true;
                    row_cols.push(c);
                }
                acc[c] = acc[c] + av * bv;
            }
        }
        row_cols.sort_unstable();
        for &c in &row_cols {
            indices.push(c);
            values.push(acc[c]);
            acc[c] = T::zero();
            touched[c] = false;
        }
        row_cols.clear();
        offsets.push(indices.len());
    }
    SparseMatrix::new(a.n_rows(), n_cols, Layout::Csr, offsets, indices, values)
}

/// Number of structurally nonzero outputs of `a x b`, without computing
/// values. Equal to `oracle_spgemm(a, b)?.nnz()`.
pub fn symbolic_nnz<T: Scalar>(a: &SparseMatrix<T>, b: &SparseMatrix<T>) -> Result<u64, SparseError> {
    if a.n_cols() != b.n_rows() {
        return Err(SparseError::DimensionMismatch {
            left_cols: a.n_cols(),
            right_rows: b.n_rows(),
        });
    }
    let a = a.to_csr();
    let b = b.to_csr();
    // Marker holds the last row that touched each column.
    let mut marker = vec![usize::MAX; b.n_cols()];
    let mut total = 0u64;
    for r in 0..a.n_rows() {
        let (a_idx, _) = a.slice(r);
        for &k in a_idx {
            let (b_idx, _) = b.slice(k);
            for &c in b_idx {
                if marker[c] != r {
                    marker[c] = r;
                    total += 1;
                }
            }
        }
    }
    Ok(total)
}

/// Elementwise `max(v, 0)` over stored values; the structure is unchanged.
pub fn relu<T: Scalar>(m: &SparseMatrix<T>) -> SparseMatrix<T> {
    m.map_values(Scalar::relu)
}
