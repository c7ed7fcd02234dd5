use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Planar RGB image, `[3, height, width]`, linear values (nominally `[0, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Shape {
                shape: vec![3, height, width],
                reason: format!("image buffer holds {} values", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = width * height;
        let data = rgb
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, plane))
            .collect();
        Self::new(width, height, data)
    }

    /// Builds from interleaved `rgb` rows (as produced by point samplers).
    pub fn from_interleaved(width: usize, height: usize, rgb: &[f32]) -> Result<Self> {
        let plane = width * height;
        if rgb.len() != 3 * plane {
            return Err(Error::Shape {
                shape: vec![height, width, 3],
                reason: format!("interleaved buffer holds {} values", rgb.len()),
            });
        }
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c];
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let p = y * self.width + x;
        [self.data[p], self.data[plane + p], self.data[2 * plane + p]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let plane = self.width * self.height;
        let p = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + p] = v;
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::Dimension {
                op: "crop",
                lhs: vec![self.height, self.width],
                rhs: vec![y0 + height, x0 + width],
            });
        }
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in y0..y0 + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + width]);
            }
        }
        Self::new(width, height, data)
    }

    /// Largest centered square crop of side `size`.
    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size > self.width || size > self.height {
            return Err(Error::Dimension {
                op: "center_crop",
                lhs: vec![self.height, self.width],
                rhs: vec![size, size],
            });
        }
        self.crop(
            (self.width - size) / 2,
            (self.height - size) / 2,
            size,
            size,
        )
    }

    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Self::new(*w, *h, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            s => Err(Error::Dimension {
                op: "image",
                lhs: s.to_vec(),
                rhs: vec![3, 0, 0],
            }),
        }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension {
                op: "mean_abs_diff",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(total / self.data.len() as f64)
    }
}
