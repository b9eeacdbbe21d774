//! Conversions between image grids and NCHW tensors.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Tensor;

/// Stacks samples, each a list of equally sized channel planes, into
/// `[N, C, H, W]`.
pub fn to_tensor(samples: &[Vec<&Grid<f32>>]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or(Error::EmptyBatch)?;
    let c = first.len();
    let (h, w) = first.first().ok_or(Error::EmptyBatch)?.dims();
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.len() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                got: s.len(),
            });
        }
        for plane in s {
            if plane.dims() != (h, w) {
                return Err(Error::SizeMismatch {
                    expected: (h, w),
                    got: plane.dims(),
                });
            }
            data.extend_from_slice(plane.as_slice());
        }
    }
    Ok(Tensor::from_vec(&[samples.len(), c, h, w], data))
}

/// Single-channel batch.
pub fn images_to_tensor(images: &[&Grid<f32>]) -> Result<Tensor<f32>> {
    let samples: Vec<Vec<&Grid<f32>>> = images.iter().map(|&i| alloc::vec![i]).collect();
    to_tensor(&samples)
}

/// Plane `(n, c)` of an NCHW tensor.
pub fn plane(t: &Tensor<f32>, n: usize, c: usize) -> Grid<f32> {
    let (_, ch, h, w) = t.nchw();
    let start = (n * ch + c) * h * w;
    Grid::from_vec(h, w, t.data()[start..start + h * w].to_vec()).expect("plane length matches")
}
