use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A planar `C x H x W` raster of `f64` values, outside the autodiff graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "image",
                "length",
                channels * height * width,
                data.len(),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks equally sized images into a `[B, C, H, W]` constant tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("cannot batch zero images".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if (im.channels, im.height, im.width) != (c, h, w) {
                return Err(Error::dim(
                    "batch",
                    "image shape",
                    format!("{c}x{h}x{w}"),
                    format!("{}x{}x{}", im.channels, im.height, im.width),
                ));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), c, h, w], data)
    }

    /// Splits item `index` of a `[B, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4("image")?;
        if index >= b {
            return Err(Error::dim("image", "batch index", format!("< {b}"), index));
        }
        let n = c * h * w;
        Image::from_vec(c, h, w, t.data()[index * n..(index + 1) * n].to_vec())
    }
}
