//! Normalized image frames and the resampling primitives shared by ingestion,
//! augmentation, letterboxing and heatmap overlays.

use gunsight_autograd::Tensor;
use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};

/// `height x width x channels` frame with values in `[0, 1]`, stored HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

/// How samples outside the canvas are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    Clamp,
    Reflect,
    Zero,
}

/// Geometry of an aspect-preserving resize onto a square canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    /// Resized extent over source extent, per axis; the two differ only by
    /// the rounding of the resized size.
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub source_width: usize,
    pub source_height: usize,
}

impl Letterbox {
    /// Canvas coordinates back to source-frame coordinates.
    pub fn to_source(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale_x, (y - self.pad_y) / self.scale_y)
    }

    pub fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale_x + self.pad_x, y * self.scale_y + self.pad_y)
    }
}

impl FrameTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "frame dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::validation(format!(
                "frame {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "frame value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled frame with invalid arguments")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.values[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let values = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            values,
        }
    }

    pub fn from_image(img: &DynamicImage) -> Self {
        Self::from_rgb(&img.to_rgb8())
    }

    /// 8-bit RGB rendering. Single-channel frames are replicated to gray.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = std::array::from_fn(|c| {
                    let ch = if self.channels >= 3 { c } else { 0 };
                    (self.get(y, x, ch) * 255.0).round() as u8
                });
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    fn resolve(&self, coord: isize, len: usize, border: Border) -> Option<usize> {
        let n = len as isize;
        match border {
            Border::Clamp => Some(coord.clamp(0, n - 1) as usize),
            Border::Zero => (0..n).contains(&coord).then_some(coord as usize),
            Border::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                // symmetric reflection: ... 1 0 | 0 1 2 .. n-1 | n-1 n-2 ...
                let period = 2 * n;
                let mut m = coord.rem_euclid(period);
                if m >= n {
                    m = period - 1 - m;
                }
                Some(m as usize)
            }
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions).
    pub fn sample(&self, y: f64, x: f64, c: usize, border: Border) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let mut acc = 0.0;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let Some(yy) = self.resolve(y0 as isize + dy, self.height, border) else {
                continue;
            };
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                if let Some(xx) = self.resolve(x0 as isize + dx, self.width, border) {
                    acc += wy * wx * self.get(yy, xx, c);
                }
            }
        }
        acc.clamp(0.0, 1.0)
    }

    /// Bilinear resize with half-pixel alignment.
    pub fn resize(&self, height: usize, width: usize) -> FrameTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        FrameTensor::from_fn(height, width, self.channels, |y, x, c| {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            self.sample(src_y, src_x, c, Border::Clamp)
        })
    }

    /// Aspect-preserving resize onto a `size x size` canvas, centered, with
    /// constant `pad_value` around the image.
    pub fn letterbox(&self, size: usize, pad_value: f64) -> (FrameTensor, Letterbox) {
        let scale = size as f64 / self.height.max(self.width) as f64;
        let new_w = ((self.width as f64 * scale).round() as usize).clamp(1, size);
        let new_h = ((self.height as f64 * scale).round() as usize).clamp(1, size);
        let resized = self.resize(new_h, new_w);
        let off_x = (size - new_w) / 2;
        let off_y = (size - new_h) / 2;
        let mut canvas = FrameTensor::filled(size, size, self.channels, pad_value);
        for y in 0..new_h {
            for x in 0..new_w {
                for c in 0..self.channels {
                    canvas.set(y + off_y, x + off_x, c, resized.get(y, x, c));
                }
            }
        }
        let geometry = Letterbox {
            scale_x: new_w as f64 / self.width as f64,
            scale_y: new_h as f64 / self.height as f64,
            pad_x: off_x as f64,
            pad_y: off_y as f64,
            source_width: self.width,
            source_height: self.height,
        };
        (canvas, geometry)
    }

    /// Channel-major copy, `[C, H, W]` flattened.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        let plane = self.height * self.width;
        for (i, px) in self.values.chunks(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }
}

/// Stack homogeneous frames into an `[N, C, H, W]` tensor.
pub fn frames_to_batch(frames: &[&FrameTensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::validation("cannot batch zero frames"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(frames.len() * first.values.len());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::validation(format!(
                "heterogeneous frame shapes {:?} vs {:?}",
                f.shape(),
                shape
            )));
        }
        data.extend(f.to_chw());
    }
    Ok(Tensor::new(
        vec![frames.len(), shape.2, shape.0, shape.1],
        data,
    ))
}
