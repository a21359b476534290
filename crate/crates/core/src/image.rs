//! Pixel containers shared by every module: scalar images, binary masks, and
//! channel-major multi-channel fields. All in-memory data is f64; files store
//! what their format dictates (see `io`).

use crate::error::{Error, Result};

/// Scale of the fixed-point intensity lattice: 2^53.
const LATTICE: f64 = 9007199254740992.0;

/// Snap a unit-interval value to the nearest multiple of 2^-53.
///
/// On this lattice `1 - x` is exactly representable (x = k·2^-53 with
/// k ≤ 2^53 gives 1 − x = (2^53 − k)·2^-53), so negation is an exact
/// involution. Arbitrary f64s in (0, 0.5) do not have that property: the low
/// bits of 1/255, for example, are lost by `1 - x` and never come back. The
/// image loader and the phantom generator snap everything they produce, which
/// moves a value by at most 2^-54. Values ≥ 0.5 are already on the lattice.
#[inline]
pub fn snap_unit(v: f64) -> f64 {
    (v * LATTICE).round() / LATTICE
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image data length {} != {height}x{width}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Image {
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Min-max rescale to [0, 1]. A constant image maps to all-zero.
    /// Idempotent: once min = 0 and max = 1, (x − 0)/1 returns x unchanged.
    pub fn normalize(&self) -> Image {
        let (lo, hi) = (self.min(), self.max());
        if lo == hi {
            return Image::zeros(self.height, self.width);
        }
        let span = hi - lo;
        let data = self.data.iter().map(|&v| (v - lo) / span).collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Intensity flip 1 − x. Exact involution on the 2^-53 lattice that the
    /// loader and the phantom generator emit (see [`snap_unit`]).
    pub fn negate(&self) -> Image {
        let data = self.data.iter().map(|&v| 1.0 - v).collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Image {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.width + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Image {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.width + j]
    }
}

/// Strictly binary mask; data holds only 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data length {} != {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParam("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    /// Threshold a probability image at 0.5. Ties go to background: a pixel
    /// is foreground only when p > 0.5.
    pub fn from_probability(prob: &Image) -> Mask {
        Mask {
            height: prob.height(),
            width: prob.width(),
            data: prob.data().iter().map(|&p| (p > 0.5) as u8).collect(),
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
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl std::ops::Index<(usize, usize)> for Mask {
    type Output = u8;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &u8 {
        &self.data[i * self.width + j]
    }
}

/// Channel-major stack of equally sized planes (channel, then row, then
/// column), the in-memory twin of the VMTF file layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelField {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MultiChannelField {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        MultiChannelField {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "field data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(MultiChannelField {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_channels(planes: &[&Image]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Shape("field needs at least one channel".into()))?;
        if planes.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Shape("channel planes differ in size".into()));
        }
        let mut data = Vec::with_capacity(planes.len() * first.len());
        for p in planes {
            data.extend_from_slice(p.data());
        }
        Ok(MultiChannelField {
            channels: planes.len(),
            height: first.height(),
            width: first.width(),
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
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
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_image(&self, c: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &MultiChannelField) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

impl std::ops::Index<(usize, usize, usize)> for MultiChannelField {
    type Output = f64;

    #[inline]
    fn index(&self, (c, i, j): (usize, usize, usize)) -> &f64 {
        &self.data[(c * self.height + i) * self.width + j]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for MultiChannelField {
    #[inline]
    fn index_mut(&mut self, (c, i, j): (usize, usize, usize)) -> &mut f64 {
        &mut self.data[(c * self.height + i) * self.width + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use proptest::prelude::*;

    #[test]
    fn normalize_rescales_to_unit_interval() {
        let img = Image::from_vec(2, 2, vec![2.0, 4.0, 6.0, 10.0]).unwrap();
        let n = img.normalize();
        assert_eq!(n.data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_goes_to_zero() {
        let img = Image::from_vec(3, 2, vec![7.5; 6]).unwrap();
        assert!(img.normalize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_rejects_nonbinary() {
        assert!(Mask::from_vec(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn threshold_ties_are_background() {
        let img = Image::from_vec(1, 3, vec![0.5, 0.5000001, 0.4999999]).unwrap();
        assert_eq!(Mask::from_probability(&img).data(), &[0, 1, 0]);
    }

    #[test]
    fn field_channel_layout_is_channel_major() {
        let f =
            MultiChannelField::from_vec(2, 2, 2, vec![0., 1., 2., 3., 10., 11., 12., 13.]).unwrap();
        assert_eq!(f.channel(1), &[10., 11., 12., 13.]);
        assert_eq!(f[(1, 1, 0)], 12.0);
    }

    #[test]
    fn from_channels_matches_indexing() {
        let a = Image::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Image::from_vec(2, 2, vec![5., 6., 7., 8.]).unwrap();
        let f = MultiChannelField::from_channels(&[&a, &b]).unwrap();
        assert_eq!(f[(0, 1, 1)], 4.0);
        assert_eq!(f[(1, 0, 1)], 6.0);
    }

    #[test]
    fn snap_is_identity_at_or_above_half() {
        for v in [0.5, 0.75, 1.0, 128.0 / 255.0] {
            assert_eq!(snap_unit(v), v);
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(values in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let w = values.len();
            let img = Image::from_vec(1, w, values).unwrap();
            let once = img.normalize();
            let twice = once.normalize();
            prop_assert_eq!(once.data(), twice.data());
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn negate_is_involutive_on_lattice_images(seed in any::<u64>()) {
            let mut rng = Pcg32::new(seed);
            let img = Image::from_fn(8, 8, |_, _| snap_unit(rng.next_f64()));
            let back = img.negate().negate();
            prop_assert_eq!(back.data(), img.data());
        }

        #[test]
        fn snap_moves_values_at_most_half_ulp_of_lattice(v in 0.0f64..=1.0) {
            let s = snap_unit(v);
            prop_assert!((s - v).abs() <= 1.0 / (1u64 << 54) as f64);
            prop_assert_eq!(1.0 - (1.0 - s), s);
        }
    }
}
