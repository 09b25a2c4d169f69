use super::{oracle::symbolic_nnz, SparseError, SparseMatrix};
use crate::Scalar;

/// Partial-product bloat of one SpGEMM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloatReport {
    /// Interim partial products generated by the row-wise product.
    pub pp_interim: u64,
    /// Nonzeros in the final product.
    pub nnz_output: u64,
    /// `(pp_interim - nnz_output) / nnz_output * 100`; NaN when the output
    /// is empty.
    pub bloat_percent: f64,
}

impl BloatReport {
    pub fn new(pp_interim: u64, nnz_output: u64) -> Self {
        let bloat_percent = if nnz_output == 0 {
            f64::NAN
        } else {
            (pp_interim as f64 - nnz_output as f64) / nnz_output as f64 * 100.0
        };
        Self {
            pp_interim,
            nnz_output,
            bloat_percent,
        }
    }

    /// False when the output is empty and the percentage is undefined.
    pub fn is_defined(&self) -> bool {
        self.nnz_output != 0
    }
}

/// Counts interim partial products and output nonzeros of `a x b`.
///
/// Every stored `a[r, k]` produces one partial product per stored entry of
/// row `k` of `b`.
pub fn bloat_analysis<T: Scalar>(a: &SparseMatrix<T>, b: &SparseMatrix<T>) -> Result<BloatReport, SparseError> {
    if a.n_cols() != b.n_rows() {
        return Err(SparseError::DimensionMismatch {
            left_cols: a.n_cols(),
            right_rows: b.n_rows(),
        });
    }
    let a_csc = a.to_csc();
    let b_csr = b.to_csr();
    let pp_interim = (0..a_csc.n_cols())
        .map(|k| a_csc.slice_nnz(k) as u64 * b_csr.slice_nnz(k) as u64)
        .sum();
    let nnz_output = symbolic_nnz(&a_csc, &b_csr)?;
    Ok(BloatReport::new(pp_interim, nnz_output))
}
