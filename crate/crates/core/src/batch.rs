use gantruth_tensor::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// `(batch, 3, height, width)` images with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor<f32>);

impl ImageBatch {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.rank() != 4 || t.shape()[1] != 3 {
            return Err(Error::Shape(format!("image batch must be (n, 3, h, w), got {:?}", t.shape())));
        }
        if let Some(bad) = t.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Input(format!("image value {bad} outside [-1, 1]")));
        }
        Ok(ImageBatch(t))
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let (w, h) = img.dimensions();
            if *dims.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Shape("images in a batch must share one size".into()));
            }
            let plane = (h * w) as usize;
            let start = data.len();
            data.resize(start + 3 * plane, 0.0f32);
            for (i, px) in img.pixels().enumerate() {
                for k in 0..3 {
                    data[start + k * plane + i] = px.0[k] as f32 / 127.5 - 1.0;
                }
            }
            n += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::Input("empty image batch".into()))?;
        Ok(ImageBatch(Tensor::new(vec![n, 3, h as usize, w as usize], data)?))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// 8-bit image of sample `index`.
    pub fn to_image(&self, index: usize) -> RgbImage {
        tensor_to_image(&self.0, index)
    }
}

/// Quantize sample `index` of an `(n, 3, h, w)` tensor in `[-1, 1]` to 8-bit RGB.
pub fn tensor_to_image(t: &Tensor<f32>, index: usize) -> RgbImage {
    let (_, _, h, w) = t.dims4();
    let plane = h * w;
    let base = index * 3 * plane;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|k| {
            let v = (d[base + k * plane + i].clamp(-1.0, 1.0) + 1.0) * 127.5;
            v.round() as u8
        }))
    })
}
