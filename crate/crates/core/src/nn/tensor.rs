//! Dense rank-4 tensor over `f64`.

use crate::error::{Error, Result};
use crate::imgio::Image;

/// Dense `(batch, channels, height, width)` array, row-major with width
/// fastest. The universal value type of the network: feature maps, weights
/// (`(out_ch, in_ch, kh, kw)`), biases (`(1, out_ch, 1, 1)`), and scalars
/// (`(1, 1, 1, 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data of matching length.
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Shape(format!("empty tensor shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    /// Tensor filled with one value.
    pub fn full(shape: [usize; 4], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// A `(1,1,1,1)` scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Wrap a single image as a `(1, 1, H, W)` tensor.
    pub fn from_image(image: &Image) -> Self {
        Tensor {
            shape: [1, 1, image.height(), image.width()],
            data: image.data().to_vec(),
        }
    }

    /// Stack images of identical dimensions into a `(N, 1, H, W)` batch.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyBatch)?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(Error::DimensionMismatch(format!(
                    "batch mixes {}x{} and {w}x{h} images",
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor {
            shape: [images.len(), 1, h, w],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(
            b < self.shape[0] && c < self.shape[1] && h < self.shape[2] && w < self.shape[3]
        );
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.offset(b, c, h, w);
        &mut self.data[i]
    }

    /// One `H*W` spatial plane as a slice.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Extract one channel plane of one batch item as an [`Image`].
    pub fn plane_image(&self, b: usize, c: usize) -> Result<Image> {
        Image::new(self.shape[3], self.shape[2], self.plane(b, c).to_vec())
    }

    /// Error if any element is NaN or infinite. Every tape op runs this on
    /// its output: non-finite values are a numeric-contract violation.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericContract(format!(
                "{context} produced non-finite value {v}"
            )));
        }
        Ok(())
    }
}
