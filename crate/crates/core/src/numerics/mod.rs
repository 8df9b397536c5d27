//! Matrix arithmetic, SVD, random streams and the gradient tape.

mod rng;
mod svd;
mod tape;
mod tensor;

pub use rng::{uniform, RngStream};
pub use svd::{rank_r_approx, svd, SvdResult, MAX_SWEEPS};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{matmul, Tensor2D};

pub(crate) use tape::softmax_nll;
pub(crate) use tensor::product;

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1/(1+e^-2) to 16 digits
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        for x in [-700.0, -30.0, -1.3, 0.2, 5.0, 700.0] {
            assert!((sigmoid(x) - (1.0 - sigmoid(-x))).abs() < 1e-15);
            assert!(sigmoid(x).is_finite());
        }
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor2D::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor2D::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        let m = Tensor2D::from_fn(3, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        assert_eq!(matmul(&Tensor2D::identity(3), &m).unwrap(), m);
        assert!(matmul(&a, &a.row_range(0, 1)).is_err());
    }
}
