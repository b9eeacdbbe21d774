//! Dense 2D grids: grayscale images, patches and binary masks.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every synthesis patch.
pub const PATCH_SIZE: usize = 256;

/// Row-major 2D grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(alloc::format!(
                "grid data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `h`×`w` window whose top-left corner is `(y0, x0)`.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::OutOfBounds {
                y: y0 as isize,
                x: x0 as isize,
                size: h.max(w),
                height: self.height,
                width: self.width,
            });
        }
        Ok(Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Integer translation; uncovered pixels take `fill`.
    pub fn shifted(&self, dy: isize, dx: isize, fill: T) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                self.get(sy as usize, sx as usize)
            } else {
                fill
            }
        })
    }
}

/// Grayscale intensity image with values in `[0, 1]`.
pub type Image = Grid<f32>;

/// A fixed-size grayscale patch; see [`PATCH_SIZE`].
pub type Patch = Image;

/// Maps `[0, 1]` intensities to the `[-1, 1]` range used inside the networks.
#[inline]
pub fn to_signed(v: f32) -> f32 {
    v * 2.0 - 1.0
}

/// Inverse of [`to_signed`].
#[inline]
pub fn to_unit(v: f32) -> f32 {
    (v + 1.0) * 0.5
}

impl Grid<f32> {
    /// Area-averaging resample to `out_h`×`out_w`.
    pub fn resize_area(&self, out_h: usize, out_w: usize) -> Grid<f32> {
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let mut out = Grid::new(out_h, out_w, 0.0f32);
        for oy in 0..out_h {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..out_w {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = 0.0f64;
                let mut yy = y0.floor() as usize;
                while (yy as f64) < y1 && yy < self.height {
                    let wy = (y1.min(yy as f64 + 1.0) - y0.max(yy as f64)).max(0.0);
                    let mut xx = x0.floor() as usize;
                    while (xx as f64) < x1 && xx < self.width {
                        let wx = (x1.min(xx as f64 + 1.0) - x0.max(xx as f64)).max(0.0);
                        acc += wy * wx * self.get(yy, xx) as f64;
                        xx += 1;
                    }
                    yy += 1;
                }
                out.set(oy, ox, (acc / (sy * sx)) as f32);
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Inclusive pixel bounding box of a mask region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBounds {
    pub y_min: usize,
    pub x_min: usize,
    pub y_max: usize,
    pub x_max: usize,
}

impl PixelBounds {
    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }
}

/// A 2D grid of `{0, 1}` values; `1` marks shape foreground.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask(Grid<u8>);

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width, 0))
    }

    pub fn filled(height: usize, width: usize) -> Self {
        Self(Grid::new(height, width, 1))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(height, width, |y, x| f(y, x) as u8))
    }

    /// Validates that every value is exactly 0 or 1.
    pub fn from_grid(grid: Grid<u8>) -> Result<Self> {
        if grid.as_slice().iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self(grid))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x) != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.0.set(y, x, v as u8)
    }

    pub fn as_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.as_slice().iter().all(|&v| v == 0)
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width();
        self.0
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn bounds(&self) -> Option<PixelBounds> {
        let mut b: Option<PixelBounds> = None;
        for (y, x) in self.foreground() {
            b = Some(match b {
                None => PixelBounds {
                    y_min: y,
                    x_min: x,
                    y_max: y,
                    x_max: x,
                },
                Some(b) => PixelBounds {
                    y_min: b.y_min.min(y),
                    x_min: b.x_min.min(x),
                    y_max: b.y_max.max(y),
                    x_max: b.x_max.max(x),
                },
            });
        }
        b
    }

    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        self.0.window(y0, x0, h, w).map(Self)
    }

    /// Intensity view: foreground 1.0, background 0.0.
    pub fn to_image(&self) -> Image {
        self.0.map(|v| v as f32)
    }

    /// Binarizes with `v >= threshold`.
    pub fn threshold(image: &Image, threshold: f32) -> Self {
        Self(image.map(|v| (v >= threshold) as u8))
    }

    pub fn rotate90(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(w, h, |y, x| self.get(h - 1 - x, y))
    }

    pub fn transpose(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(w, h, |y, x| self.get(x, y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(self.0.flip_horizontal())
    }

    pub fn shifted(&self, dy: isize, dx: isize) -> Self {
        Self(self.0.shifted(dy, dx, 0))
    }

    /// Places `self` into a zero canvas at `(y0, x0)`; pixels falling outside are dropped.
    pub fn placed(&self, canvas_h: usize, canvas_w: usize, y0: isize, x0: isize) -> Self {
        let mut out = Self::new(canvas_h, canvas_w);
        for (y, x) in self.foreground() {
            let ty = y as isize + y0;
            let tx = x as isize + x0;
            if ty >= 0 && tx >= 0 && (ty as usize) < canvas_h && (tx as usize) < canvas_w {
                out.set(ty as usize, tx as usize, true);
            }
        }
        out
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .all(|(&a, &b)| a == 0 || b != 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_area_halves_by_block_mean() {
        let g = Grid::from_vec(2, 2, vec![0.0f32, 1.0, 1.0, 1.0]).unwrap();
        let r = g.resize_area(1, 1);
        assert!((r.get(0, 0) - 0.75).abs() < 1e-6);
        let up = g.resize_area(4, 4);
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(3, 3), 1.0);
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        let g = Grid::from_vec(1, 2, vec![0u8, 2]).unwrap();
        assert!(BinaryMask::from_grid(g).is_err());
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let m = BinaryMask::from_fn(3, 5, |y, x| (y * 7 + x * 3) % 4 == 0);
        let r = m.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(m, r);
        assert_eq!(m.rotate90().dims(), (5, 3));
    }

    #[test]
    fn bounds_are_tight() {
        let mut m = BinaryMask::new(10, 10);
        m.set(2, 3, true);
        m.set(6, 1, true);
        let b = m.bounds().unwrap();
        assert_eq!((b.y_min, b.x_min, b.y_max, b.x_max), (2, 1, 6, 3));
        assert!(BinaryMask::new(4, 4).bounds().is_none());
    }
}
