//! Named parameter tensors.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(name: &str, shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.fill(value);
        t
    }

    pub fn normal<R: Rng>(name: &str, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, shape);
        for v in &mut t.data {
            *v = std * standard_normal(rng);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Box-Muller draw from N(0, 1).
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// An ordered list of named tensors; parameters, gradients and optimizer
/// moments all share this layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self { tensors: other.tensors.iter().map(|t| Tensor::zeros(&t.name, &t.shape)).collect() }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.tensors.iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|&x| x == 0.0))
    }

    /// FNV-1a over tensor names, shapes and the bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for t in &self.tensors {
            eat(t.name.as_bytes());
            for &s in &t.shape {
                eat(&(s as u64).to_le_bytes());
            }
            for &x in &t.data {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}
