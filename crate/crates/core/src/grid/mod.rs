//! Dense 2D grids, padded convolution, and the DCT filter parameterization.
//!
//! Everything here works in a single convention: [`conv2_same`] is a true
//! convolution (the kernel is flipped), correlation is convolution with
//! [`rot180`] of the kernel, and grids are stored row-major in `f64`.

mod conv;
mod convmat;
mod dct;

pub use conv::{
    conv2_same, conv2_same_transpose, filter_grad, pad, Boundary, Padded, DEFAULT_BOUNDARY,
};
pub use convmat::{conv_matrix_equiv_check, dense_conv_matrices, MAX_DENSE_SIDE};
pub use dct::{dct_basis, normalize_vjp, realize_filter, DctBasis};

use crate::error::{Result, SfarlError};

/// A single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(SfarlError::Dimension(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(SfarlError::shape(height * width, data.len()));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(SfarlError::InvalidArgument(format!(
                "non-finite pixel at index {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image must be non-empty");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "image must be non-empty");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image without the finiteness scan. Callers guarantee the length.
    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_dims(&self, other: &Image) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(SfarlError::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::from_vec_unchecked(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination. Panics on a size mismatch.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_dims(other), "zip_map on mismatched images");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Image::from_vec_unchecked(self.height, self.width, data)
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Image) {
        assert!(self.same_dims(other), "axpy on mismatched images");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other), "dot on mismatched images");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_dims(other), "max_abs_diff on mismatched images");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Copies the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(SfarlError::Dimension(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for i in top..top + h {
            data.extend_from_slice(&self.data[i * self.width + left..i * self.width + left + w]);
        }
        Ok(Image::from_vec_unchecked(h, w, data))
    }
}

/// A square, odd-sized linear filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    size: usize,
    taps: Vec<f64>,
}

impl Filter {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(SfarlError::InvalidArgument(format!(
                "filter size must be odd and positive, got {size}"
            )));
        }
        if taps.len() != size * size {
            return Err(SfarlError::shape(size * size, taps.len()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(SfarlError::InvalidArgument("non-finite filter tap".into()));
        }
        Ok(Self { size, taps })
    }

    /// The `size x size` filter with a single 1 at the center.
    pub fn delta(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        if size % 2 == 1 {
            taps[size * size / 2] = 1.0;
        }
        Self::new(size, taps)
    }

    pub(crate) fn from_vec_unchecked(size: usize, taps: Vec<f64>) -> Self {
        debug_assert!(size % 2 == 1 && taps.len() == size * size);
        Self { size, taps }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn half(&self) -> usize {
        self.size / 2
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.taps[a * self.size + b]
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    pub fn norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }
}

/// Reverses a filter along both axes.
pub fn rot180(filter: &Filter) -> Filter {
    let mut taps = filter.taps.clone();
    taps.reverse();
    Filter::from_vec_unchecked(filter.size, taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot180_reverses_both_axes() {
        // [[1,2],[3,4]] placed in the top-left of a 3x3 grid.
        let f = Filter::new(3, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = rot180(&f);
        assert_eq!(r.taps(), &[0.0, 0.0, 0.0, 0.0, 4.0, 3.0, 0.0, 2.0, 1.0]);
        assert_eq!(rot180(&r), f);
    }

    #[test]
    fn rot180_keeps_centrally_symmetric_filter() {
        let f = Filter::new(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(rot180(&f), f);
    }

    #[test]
    fn rejects_even_filters_and_empty_images() {
        assert!(Filter::new(2, vec![0.0; 4]).is_err());
        assert!(Filter::new(3, vec![0.0; 8]).is_err());
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn crop_copies_window() {
        let img = Image::from_fn(4, 5, |i, j| (i * 10 + j) as f64);
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.as_slice(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
