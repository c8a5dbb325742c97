//! Binary rasters stored row-major.

use alloc::vec;
use alloc::vec::Vec;

/// A `width x height` binary image. Pixel `(x, y)` lives at `y * width + x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Raster {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width * height).then_some(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Number of pixels set in both rasters.
    pub fn intersection(&self, other: &Raster) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    /// Number of pixels set in either raster.
    pub fn union(&self, other: &Raster) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    pub fn iou(&self, other: &Raster) -> f64 {
        let u = self.union(other);
        if u == 0 {
            0.0
        } else {
            self.intersection(other) as f64 / u as f64
        }
    }

    /// Sets every pixel that is set in `other`.
    pub fn or_assign(&mut self, other: &Raster) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Run-length encoding as alternating run lengths, starting with a run of
    /// unset pixels (which may be zero).
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[u32]) -> Option<Self> {
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(core::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Self::from_bits(width, height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_round_trip() {
        let mut r = Raster::new(5, 3);
        r.set(0, 0, true);
        r.set(3, 1, true);
        r.set(4, 1, true);
        r.set(4, 2, true);
        let runs = r.to_runs();
        assert_eq!(runs[0], 0);
        assert_eq!(Raster::from_runs(5, 3, &runs).unwrap(), r);
        assert!(Raster::from_runs(5, 3, &[3]).is_none());
    }

    #[test]
    fn iou_of_disjoint_is_zero() {
        let mut a = Raster::new(4, 4);
        let mut b = Raster::new(4, 4);
        a.set(0, 0, true);
        b.set(1, 1, true);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
