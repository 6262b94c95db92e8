//! Shared helpers: independent scalar oracles and the finite-difference
//! gradient suite. Used by the focused test targets and by `acceptance`.

#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn vals(x: &Tensor) -> Vec<f64> {
    x.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Relative error with differences below 1e-12 counted as exact.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-12 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} cases {:>4}  max err {:.2e}  tol {:.0e}  {}",
            self.name,
            self.cases,
            self.max_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Pixel center on an axis of `n` pixels, written out independently.
pub fn center(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}
