use std::fmt::{Debug, Display};

use num_traits::{Num, NumCast};

/// Element type of a [`SparseMatrix`](crate::SparseMatrix).
///
/// Anything numeric that can be cast to and from the Matrix Market text
/// representation qualifies: `f64`, `f32`, and the signed integers.
pub trait Scalar: Num + NumCast + Copy + PartialOrd + Debug + Display + Send + Sync + 'static {
    /// `max(self, 0)`.
    #[inline]
    fn relu(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl<T> Scalar for T where T: Num + NumCast + Copy + PartialOrd + Debug + Display + Send + Sync + 'static {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives_only() {
        assert_eq!((-3.5f64).relu(), 0.0);
        assert_eq!(2.0f32.relu(), 2.0);
        assert_eq!((-7i64).relu(), 0);
        assert_eq!(0i32.relu(), 0);
    }
}
