use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};

/// `[C, H, W]` one-hot encoding of a label map.
pub fn mask_to_onehot<T: Element>(mask: &Array2<u8>, classes: usize) -> Result<Tensor<T>> {
    let (h, w) = mask.dim();
    let mut out = Tensor::zeros(&[classes, h, w]);
    let data = out.data_mut();
    for ((row, col), &label) in mask.indexed_iter() {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                row,
                col,
                classes,
            });
        }
        data[(label as usize * h + row) * w + col] = T::one();
    }
    Ok(out)
}

/// Per-pixel argmax over the leading axis of a `[C, H, W]` tensor.
pub fn onehot_to_mask<T: Element>(onehot: &Tensor<T>) -> Array2<u8> {
    let shape = onehot.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = onehot.data();
    Array2::from_shape_fn((h, w), |(r, col)| {
        (0..c)
            .max_by(|&a, &b| {
                data[(a * h + r) * w + col]
                    .partial_cmp(&data[(b * h + r) * w + col])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0) as u8
    })
}

/// A pixel is an edge iff one of its in-bounds 4-neighbours carries a different label.
pub fn mask_to_edges(mask: &Array2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let v = mask[[r, c]];
        (r > 0 && mask[[r - 1, c]] != v)
            || (r + 1 < h && mask[[r + 1, c]] != v)
            || (c > 0 && mask[[r, c - 1]] != v)
            || (c + 1 < w && mask[[r, c + 1]] != v)
    })
}
