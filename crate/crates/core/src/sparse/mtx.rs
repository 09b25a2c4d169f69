use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use super::{Layout, SparseError, SparseMatrix};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum MtxError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("matrix construction failed: {0}")]
    Matrix(#[from] SparseError),
}

fn parse_err(line: usize, message: impl Into<String>) -> MtxError {
    MtxError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Real,
    Integer,
    Pattern,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
    SkewSymmetric,
}

/// Reads a Matrix Market coordinate file into `layout`.
pub fn load_matrix_market<T: Scalar>(path: impl AsRef<Path>, layout: Layout) -> Result<SparseMatrix<T>, MtxError> {
    let file = File::open(path)?;
    parse_matrix_market(BufReader::new(file), layout)
}

/// Parses Matrix Market coordinate text (`real`, `integer` or `pattern`;
/// `general`, `symmetric` or `skew-symmetric`).
///
/// Pattern entries get value 1. Symmetric files are expanded to full storage
/// and duplicate coordinates are summed.
pub fn parse_matrix_market<T: Scalar, R: BufRead>(reader: R, layout: Layout) -> Result<SparseMatrix<T>, MtxError> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (header_no, header) = match lines.next() {
        Some((n, l)) => (n, l?),
        None => return Err(parse_err(1, "empty file")),
    };
    let tokens: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(header_no, "expected '%%MatrixMarket matrix <format> <field> <symmetry>'"));
    }
    if tokens[2] != "coordinate" {
        return Err(parse_err(header_no, format!("unsupported format '{}'", tokens[2])));
    }
    let field = match tokens[3].as_str() {
        "real" | "double" => Field::Real,
        "integer" => Field::Integer,
        "pattern" => Field::Pattern,
        other => return Err(parse_err(header_no, format!("unsupported field '{other}'"))),
    };
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::SkewSymmetric,
        other => return Err(parse_err(header_no, format!("unsupported symmetry '{other}'"))),
    };

    // Integer element types truncate 0.5 to zero.
    let integral = T::from(0.5f64).is_some_and(|h: T| h.is_zero());
    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, T)> = Vec::new();
    let mut seen = 0usize;
    let mut last_line = header_no;
    for (line_no, line) in lines {
        last_line = line_no;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let Some((n_rows, n_cols, nnz)) = size else {
            if parts.len() != 3 {
                return Err(parse_err(line_no, "size line must be '<rows> <cols> <entries>'"));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(line_no, format!("invalid size field '{s}'")))
            };
            let dims = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
            if symmetry != Symmetry::General && dims.0 != dims.1 {
                return Err(parse_err(line_no, "symmetric matrix must be square"));
            }
            triplets.reserve(if symmetry == Symmetry::General { dims.2 } else { 2 * dims.2 });
            size = Some(dims);
            continue;
        };
        let expected = if field == Field::Pattern { 2 } else { 3 };
        if parts.len() != expected {
            return Err(parse_err(line_no, format!("expected {expected} fields, found {}", parts.len())));
        }
        if seen == nnz {
            return Err(parse_err(line_no, format!("more than the declared {nnz} entries")));
        }
        let coord = |s: &str, bound: usize, what: &str| -> Result<usize, MtxError> {
            let v = s
                .parse::<usize>()
                .map_err(|_| parse_err(line_no, format!("invalid {what} index '{s}'")))?;
            if v == 0 || v > bound {
                return Err(parse_err(line_no, format!("{what} index {v} outside 1..={bound}")));
            }
            Ok(v - 1)
        };
        let r = coord(parts[0], n_rows, "row")?;
        let c = coord(parts[1], n_cols, "column")?;
        let value: T = match field {
            Field::Pattern => T::one(),
            Field::Real | Field::Integer => {
                let raw = parts[2]
                    .parse::<f64>()
                    .map_err(|_| parse_err(line_no, format!("invalid value '{}'", parts[2])))?;
                if raw.fract() != 0.0 && integral {
                    return Err(parse_err(line_no, format!("value {raw} not representable")));
                }
                T::from(raw).ok_or_else(|| parse_err(line_no, format!("value {raw} not representable")))?
            }
        };
        triplets.push((r, c, value));
        if r != c {
            match symmetry {
                Symmetry::General => {}
                Symmetry::Symmetric => triplets.push((c, r, value)),
                Symmetry::SkewSymmetric => triplets.push((c, r, T::zero() - value)),
            }
        }
        seen += 1;
    }
    let Some((n_rows, n_cols, nnz)) = size else {
        return Err(parse_err(header_no + 1, "missing size line"));
    };
    if seen != nnz {
        return Err(parse_err(last_line, format!("declared {nnz} entries but found {seen}")));
    }
    Ok(SparseMatrix::from_triplets(n_rows, n_cols, layout, triplets)?)
}

/// Writes `m` as a general real coordinate file, in row-major order.
pub fn write_matrix_market<T: Scalar, W: Write>(m: &SparseMatrix<T>, mut out: W) -> io::Result<()> {
    let csr = m.to_csr();
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", csr.n_rows(), csr.n_cols(), csr.nnz())?;
    for (r, c, v) in csr.triplets() {
        writeln!(out, "{} {} {}", r + 1, c + 1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SparseMatrix<f64>, MtxError> {
        parse_matrix_market(text.as_bytes(), Layout::Csr)
    }

    #[test]
    fn coordinate_real_general() {
        let m = parse("%%MatrixMarket matrix coordinate real general\n% comment\n3 3 2\n1 1 1.0\n3 2 5.0\n").unwrap();
        assert_eq!(m.offsets(), &[0, 1, 1, 2]);
        assert_eq!(m.minor_indices(), &[0, 1]);
        assert_eq!(m.values(), &[1.0, 5.0]);
    }

    #[test]
    fn pattern_values_default_to_one() {
        let m = parse("%%MatrixMarket matrix coordinate pattern general\n2 2 3\n1 1\n1 2\n2 2\n").unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn symmetric_entries_are_mirrored() {
        let m = parse("%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n2 1 7.5\n1 1 2\n").unwrap();
        assert_eq!(m.get(1, 0), Some(7.5));
        assert_eq!(m.get(0, 1), Some(7.5));
        assert_eq!(m.get(0, 0), Some(2.0));
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn skew_symmetric_negates_mirror() {
        let m = parse("%%MatrixMarket matrix coordinate integer skew-symmetric\n2 2 1\n2 1 3\n").unwrap();
        assert_eq!(m.get(0, 1), Some(-3.0));
    }

    #[test]
    fn duplicates_are_summed() {
        let m = parse("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 2 1.5\n1 2 2.5\n").unwrap();
        assert_eq!(m.get(0, 1), Some(4.0));
        assert_eq!(m.nnz(), 1);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse("%%MatrixMarket matrix array real general\n").unwrap_err();
        assert!(matches!(err, MtxError::Parse { line: 1, .. }), "{err}");
        let err = parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n").unwrap_err();
        assert!(matches!(err, MtxError::Parse { line: 3, .. }), "{err}");
        let err = parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 x 1.0\n").unwrap_err();
        assert!(matches!(err, MtxError::Parse { line: 3, .. }), "{err}");
        let err = parse("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n").unwrap_err();
        assert!(matches!(err, MtxError::Parse { .. }), "{err}");
        let err = parse("garbage\n").unwrap_err();
        assert!(matches!(err, MtxError::Parse { line: 1, .. }));
    }

    #[test]
    fn integer_matrix_rejects_fractions() {
        let err = parse_matrix_market::<i64, _>(
            "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 0.5\n".as_bytes(),
            Layout::Csr,
        )
        .unwrap_err();
        assert!(matches!(err, MtxError::Parse { line: 3, .. }));
    }

    #[test]
    fn write_then_parse_roundtrip() {
        let m = SparseMatrix::from_dense(&[vec![0.0, 2.5], vec![-1.0, 0.0]], Layout::Csc);
        let mut buf = Vec::new();
        write_matrix_market(&m, &mut buf).unwrap();
        let back: SparseMatrix<f64> = parse_matrix_market(buf.as_slice(), Layout::Csc).unwrap();
        assert_eq!(back, m);
    }
}
