//! Single-channel float images in `[0, 1]`.

use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at a continuous point where pixel `(i, j)` covers
    /// `[i, i+1) x [j, j+1)`. Outside the image reads as `fill`.
    pub fn sample(&self, x: f64, y: f64, fill: f32) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        if fx <= -1.0 || fy <= -1.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return fill;
        }
        let x0 = fx.floor();
        let y0 = fy.floor();
        let lx = (fx - x0) as f32;
        let ly = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xx: i64, yy: i64| -> f32 {
            if xx < 0 || yy < 0 || xx >= self.width as i64 || yy >= self.height as i64 {
                fill
            } else {
                self.data[yy as usize * self.width + xx as usize]
            }
        };
        (1.0 - ly) * ((1.0 - lx) * at(x0, y0) + lx * at(x0 + 1, y0))
            + ly * ((1.0 - lx) * at(x0, y0 + 1) + lx * at(x0 + 1, y0 + 1))
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `[1, 1, H, W]` network input, centred around zero.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64 - 0.5)).collect(),
        )
        .expect("image buffer matches its dimensions")
    }
}
