use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{expect_rank4, resize_bilinear};

pub const PYRAMID_LEVELS: usize = 4;

/// The four resized copies `P_1..P_4` of the input image.
#[derive(Debug, Clone)]
pub struct PyramidInputs {
    pub levels: Vec<Tensor>,
    pub sizes: Vec<(usize, usize)>,
}

/// Bilinear copies of `image` at 1/2, 1/4, 1/8 and 1/16 of its size.
/// Every level is resized directly from the full-resolution image.
pub fn build_pyramid(image: &Tensor) -> Result<PyramidInputs> {
    let (_, _, h, w) = expect_rank4(image, "pyramid input")?;
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::InputSize(format!(
            "pyramid input {h}x{w} must be a positive multiple of 16"
        )));
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    let mut sizes = Vec::with_capacity(PYRAMID_LEVELS);
    for level in 1..=PYRAMID_LEVELS {
        let (lh, lw) = (h >> level, w >> level);
        levels.push(resize_bilinear(image, lh, lw)?);
        sizes.push((lh, lw));
    }
    Ok(PyramidInputs { levels, sizes })
}
