//! A single-channel convolution written as a sparse, weight-shared dense
//! matrix acting on the row-major flattened image.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Structured matrix `W_f` of a valid cross-correlation of an `fh x fw`
/// filter over an `h x w` image: one row per output position, one column per
/// input pixel.
pub fn conv_matrix<T: Scalar>(filter: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [fh, fw] = match filter.shape() {
        [a, b] => [*a, *b],
        s => {
            return Err(Error::ShapeMismatch {
                left: s.to_vec(),
                right: vec![2, 2],
            })
        }
    };
    if fh == 0 || fw == 0 || fh > h || fw > w {
        return Err(Error::ShapeMismatch {
            left: vec![fh, fw],
            right: vec![h, w],
        });
    }
    let (oh, ow) = (h - fh + 1, w - fw + 1);
    let mut mat = Tensor::zeros(&[oh * ow, h * w]);
    let f = filter.data();
    let data = mat.data_mut();
    for oi in 0..oh {
        for oj in 0..ow {
            let row = oi * ow + oj;
            for di in 0..fh {
                for dj in 0..fw {
                    data[row * h * w + (oi + di) * w + (oj + dj)] = f[di * fw + dj];
                }
            }
        }
    }
    Ok(mat)
}

/// The 2x2-filter, 2x3-image example: returns `(W_f, W_f vec(x))`.
pub fn conv_reference<T: Scalar>(filter: &Tensor<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if filter.shape() != [2, 2] {
        return Err(Error::ShapeMismatch {
            left: filter.shape().to_vec(),
            right: vec![2, 2],
        });
    }
    if image.shape() != [2, 3] {
        return Err(Error::ShapeMismatch {
            left: image.shape().to_vec(),
            right: vec![2, 3],
        });
    }
    let mat = conv_matrix(filter, 2, 3)?;
    let x = Tensor::from_vec(&[6, 1], image.data().to_vec())?;
    let out = mat.matmul_naive(&x)?;
    Ok((mat, Tensor::from_vec(&[2], out.into_data())?))
}
