use super::Tensor;
use crate::error::{AadError, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// `x [N, F_in] * w [F_in, F_out] + b [F_out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() || b.numel() != w.cols() {
        return Err(AadError::invalid(format!(
            "linear shapes disagree: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (n, fi, fo) = (x.rows(), x.cols(), w.cols());
    let mut y = Vec::with_capacity(n * fo);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(MatRef::row_major(x.data(), n, fi), MatRef::row_major(w.data(), fi, fo), &mut y, fo, true);
    Tensor::from_vec(&[n, fo], y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, gy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, fi, fo) = (x.rows(), x.cols(), w.cols());
    let gm = MatRef::row_major(gy.data(), n, fo);
    let mut dx = vec![T::zero(); n * fi];
    gemm(gm, MatRef::row_major(w.data(), fi, fo).t(), &mut dx, fi, false);
    let mut dw = vec![T::zero(); fi * fo];
    gemm(MatRef::row_major(x.data(), n, fi).t(), gm, &mut dw, fo, false);
    let mut db = vec![T::zero(); fo];
    for row in gy.data().chunks(fo) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw: Tensor::from_vec(w.shape(), dw)?,
        db: Tensor::from_vec(&[fo], db)?,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_product() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[2.0, 7.0]);
    }

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f32 - 5.0);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let b = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = linear_forward(&x, &Tensor::zeros(&[4, 4]), &b).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn mismatch_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
    }
}
