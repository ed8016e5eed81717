//! Low-rank factor pair for one adapted projection.

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Rank-`r` update `delta = down * up` for an `a x b` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `[a, r]` factor.
    pub down: Tensor,
    /// `[r, b]` factor.
    pub up: Tensor,
}

impl LoraLayer {
    pub fn new(down: Tensor, up: Tensor) -> Result<Self> {
        if down.shape().len() != 2 || up.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "low-rank factors must be 2-D, got {:?} and {:?}",
                down.shape(),
                up.shape()
            )));
        }
        let (a, r) = (down.rows(), down.cols());
        let (r2, b) = (up.rows(), up.cols());
        if r != r2 {
            return Err(Error::Shape(format!(
                "factor ranks disagree: down {a}x{r}, up {r2}x{b}"
            )));
        }
        if r > a.min(b) {
            return Err(Error::Config(format!("rank {r} exceeds min({a}, {b})")));
        }
        Ok(Self { down, up })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    /// The dense `a x b` update.
    pub fn delta(&self) -> Tensor {
        self.down.matmul(&self.up).expect("factor shapes validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_factor_gives_zero_delta() {
        let l = LoraLayer::new(Tensor::zeros(&[4, 2]), Tensor::filled(&[2, 3], 1.0)).unwrap();
        assert_eq!(l.delta(), Tensor::zeros(&[4, 3]));
    }

    #[test]
    fn hand_computed_delta() {
        let down = Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let up = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let l = LoraLayer::new(down, up).unwrap();
        assert_eq!(l.delta().data(), &[2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_factors_rejected() {
        assert!(LoraLayer::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 4])).is_err());
        // Rank above min(a, b).
        assert!(LoraLayer::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 2])).is_err());
    }
}
