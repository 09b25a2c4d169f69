//! Compressed sparse storage and the host-side reference kernels.

mod bloat;
mod mtx;
mod oracle;

use std::fmt;

use thiserror::Error;

use crate::Scalar;

pub use bloat::{bloat_analysis, BloatReport};
pub use mtx::{load_matrix_market, parse_matrix_market, write_matrix_market, MtxError};
pub use oracle::{oracle_spgemm, relu, symbolic_nnz};

/// Which dimension is compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// Rows are the major dimension.
    Csr,
    /// Columns are the major dimension.
    Csc,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Csr => f.write_str("CSR"),
            Layout::Csc => f.write_str("CSC"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SparseError {
    #[error("offsets must have {expected} entries, found {found}")]
    OffsetsLength { expected: usize, found: usize },
    #[error("offsets must start at 0 and be non-decreasing (violated at position {0})")]
    OffsetsNotMonotone(usize),
    #[error("offsets end at {end} but there are {indices} indices and {values} values")]
    LengthMismatch {
        end: usize,
        indices: usize,
        values: usize,
    },
    #[error("index {index} in major slice {major} is out of range (minor dimension {bound})")]
    IndexOutOfRange {
        major: usize,
        index: usize,
        bound: usize,
    },
    #[error("indices in major slice {0} are not strictly increasing")]
    NotCanonical(usize),
    #[error("entry ({row}, {col}) lies outside a {n_rows}x{n_cols} matrix")]
    EntryOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },
    #[error("dimension mismatch: left operand has {left_cols} columns, right operand has {right_rows} rows")]
    DimensionMismatch { left_cols: usize, right_rows: usize },
}

/// A canonical compressed sparse matrix.
///
/// `offsets` has one entry per major slice plus one; the minor indices inside
/// every slice are strictly increasing. Stored zeros are legal and are part of
/// the nonzero structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    layout: Layout,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds a matrix from raw compressed arrays, checking every invariant.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        layout: Layout,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, SparseError> {
        let (major, minor) = match layout {
            Layout::Csr => (n_rows, n_cols),
            Layout::Csc => (n_cols, n_rows),
        };
        if offsets.len() != major + 1 {
            return Err(SparseError::OffsetsLength {
                expected: major + 1,
                found: offsets.len(),
            });
        }
        if offsets[0] != 0 {
            return Err(SparseError::OffsetsNotMonotone(0));
        }
        if let Some(pos) = offsets.windows(2).position(|w| w[1] < w[0]) {
            return Err(SparseError::OffsetsNotMonotone(pos + 1));
        }
        let end = offsets[major];
        if end != indices.len() || end != values.len() {
            return Err(SparseError::LengthMismatch {
                end,
                indices: indices.len(),
                values: values.len(),
            });
        }
        for m in 0..major {
            let slice = &indices[offsets[m]..offsets[m + 1]];
            if let Some(&bad) = slice.iter().find(|&&i| i >= minor) {
                return Err(SparseError::IndexOutOfRange {
                    major: m,
                    index: bad,
                    bound: minor,
                });
            }
            if slice.windows(2).any(|w| w[1] <= w[0]) {
                return Err(SparseError::NotCanonical(m));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            layout,
            offsets,
            indices,
            values,
        })
    }

    /// Builds a canonical matrix from coordinate triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets<I>(n_rows: usize, n_cols: usize, layout: Layout, triplets: I) -> Result<Self, SparseError>
    where
        I: IntoIterator<Item = (usize, usize, T)>,
    {
        let mut entries: Vec<(usize, usize, T)> = Vec::new();
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(SparseError::EntryOutOfRange {
                    row: r,
                    col: c,
                    n_rows,
                    n_cols,
                });
            }
            let (maj, min) = match layout {
                Layout::Csr => (r, c),
                Layout::Csc => (c, r),
            };
            entries.push((maj, min, v));
        }
        // Stable sort keeps duplicates in input order, so sums are reproducible.
        entries.sort_by_key(|&(maj, min, _)| (maj, min));
        let major = match layout {
            Layout::Csr => n_rows,
            Layout::Csc => n_cols,
        };
        let mut offsets = vec![0usize; major + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (maj, min, v) in entries {
            if last == Some((maj, min)) {
                let slot = values.last_mut().expect("duplicate follows an entry");
                *slot = *slot + v;
                continue;
            }
            last = Some((maj, min));
            offsets[maj + 1] += 1;
            indices.push(min);
            values.push(v);
        }
        for m in 0..major {
            offsets[m + 1] += offsets[m];
        }
        Self::new(n_rows, n_cols, layout, offsets, indices, values)
    }

    /// Builds a matrix from a row-major dense array; zeros are not stored.
    pub fn from_dense(rows: &[Vec<T>], layout: Layout) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let triplets = rows.iter().enumerate().flat_map(|(r, row)| {
            assert_eq!(row.len(), n_cols, "ragged dense input");
            row.iter()
                .enumerate()
                .filter(|(_, v)| !v.is_zero())
                .map(move |(c, &v)| (r, c, v))
        });
        Self::from_triplets(n_rows, n_cols, layout, triplets).expect("dense input is in range")
    }

    pub fn identity(n: usize, layout: Layout) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            layout,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// An `n_rows x n_cols` matrix with no stored entries.
    pub fn empty(n_rows: usize, n_cols: usize, layout: Layout) -> Self {
        let major = match layout {
            Layout::Csr => n_rows,
            Layout::Csc => n_cols,
        };
        Self {
            n_rows,
            n_cols,
            layout,
            offsets: vec![0; major + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn minor_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Size of the compressed dimension.
    pub fn major_dim(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn minor_dim(&self) -> usize {
        match self.layout {
            Layout::Csr => self.n_cols,
            Layout::Csc => self.n_rows,
        }
    }

    /// Minor indices and values of one major slice (a row for CSR, a column
    /// for CSC).
    pub fn slice(&self, major: usize) -> (&[usize], &[T]) {
        let range = self.offsets[major]..self.offsets[major + 1];
        (&self.indices[range.clone()], &self.values[range])
    }

    /// Number of stored entries in one major slice.
    pub fn slice_nnz(&self, major: usize) -> usize {
        self.offsets[major + 1] - self.offsets[major]
    }

    /// Stored value at `(row, col)`, if the coordinate is in the structure.
    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        let (maj, min) = match self.layout {
            Layout::Csr => (row, col),
            Layout::Csc => (col, row),
        };
        let (idx, vals) = self.slice(maj);
        idx.binary_search(&min).ok().map(|p| vals[p])
    }

    /// Stored entries as `(row, col, value)`, in storage order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.major_dim()).flat_map(move |maj| {
            let (idx, vals) = self.slice(maj);
            idx.iter().zip(vals).map(move |(&min, &v)| match self.layout {
                Layout::Csr => (maj, min, v),
                Layout::Csc => (min, maj, v),
            })
        })
    }

    /// Dense row-major copy; unstored entries are zero.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut dense = vec![vec![T::zero(); self.n_cols]; self.n_rows];
        for (r, c, v) in self.triplets() {
            dense[r][c] = v;
        }
        dense
    }

    /// Same logical matrix in `target` layout. Converting to the current
    /// layout returns a clone.
    pub fn convert_layout(&self, target: Layout) -> Self {
        if target == self.layout {
            return self.clone();
        }
        // Counting-sort transpose of the compressed arrays. Walking the source
        // in major order keeps each output slice sorted.
        let out_major = self.minor_dim();
        let mut offsets = vec![0usize; out_major + 1];
        for &i in &self.indices {
            offsets[i + 1] += 1;
        }
        for m in 0..out_major {
            offsets[m + 1] += offsets[m];
        }
        let mut cursor = offsets.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for maj in 0..self.major_dim() {
            let (idx, vals) = self.slice(maj);
            for (&min, &v) in idx.iter().zip(vals) {
                let at = cursor[min];
                indices[at] = maj;
                values[at] = v;
                cursor[min] += 1;
            }
        }
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            layout: target,
            offsets,
            indices,
            values,
        }
    }

    pub fn to_csr(&self) -> Self {
        self.convert_layout(Layout::Csr)
    }

    pub fn to_csc(&self) -> Self {
        self.convert_layout(Layout::Csc)
    }

    /// Applies `f` to every stored value, keeping the structure.
    pub fn map_values<U: Scalar>(&self, f: impl Fn(T) -> U) -> SparseMatrix<U> {
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            layout: self.layout,
            offsets: self.offsets.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Casts every value, failing if any value is not representable.
    pub fn cast<U: Scalar>(&self) -> Option<SparseMatrix<U>> {
        let values = self.values.iter().map(|&v| U::from(v)).collect::<Option<Vec<U>>>()?;
        Some(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            layout: self.layout,
            offsets: self.offsets.clone(),
            indices: self.indices.clone(),
            values,
        })
    }

    /// Percentage of entries that are not stored.
    pub fn sparsity_percent(&self) -> f64 {
        let cells = self.n_rows as f64 * self.n_cols as f64;
        if cells == 0.0 {
            return 100.0;
        }
        (1.0 - self.nnz() as f64 / cells) * 100.0
    }
}

/// Free-function form of [`SparseMatrix::convert_layout`].
pub fn convert_layout<T: Scalar>(m: &SparseMatrix<T>, target: Layout) -> SparseMatrix<T> {
    m.convert_layout(target)
}
