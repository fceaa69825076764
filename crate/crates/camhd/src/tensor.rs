//! Dense row-major f64 tensors and a counter-based RNG.
//!
//! This is the numeric substrate for the rest of the crate: contiguous
//! 64-bit storage, no strides or views, broadcasting only between a tensor
//! and a scalar. Any operation that could produce a NaN or infinity
//! (division, sqrt of a negative, exp overflow) reports an error instead of
//! letting the value propagate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count for a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("{ctx}: non-finite value {v} at index {i}")));
        }
        Ok(())
    }

    /// Standard matrix product, ikj loop order over contiguous rows.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::Dimension("matmul expects 2-d tensors".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension("transpose expects a 2-d tensor".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Sum of elementwise products over the flattened arrays.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "dot shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a + s).collect(),
        }
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&a| a < 0.0) {
            return Err(Error::Numeric(format!("sqrt of negative value {v}")));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a.sqrt()).collect(),
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|a| a.exp()).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("exp")?;
        Ok(out)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a.clamp(lo, hi)).collect(),
        }
    }
}

/// Counter-based RNG built on SplitMix64.
///
/// The whole state is one u64 advanced by the golden-ratio increment, so
/// identical seeds give identical sequences on every platform. Normal draws
/// use Box-Muller with no cached spare, keeping the draw count per call
/// fixed.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; u1 shifted away from zero so ln is finite.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = (u1 + f64::MIN_POSITIVE).min(1.0 - f64::EPSILON);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, t: &mut Tensor, std: f64) {
        for v in t.data_mut() {
            *v = self.normal() * std;
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i2 = identity(2);
        assert_eq!(i2.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i2).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let got = p.matmul(&b).unwrap();
        assert_eq!(got.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let mut rng = super::Rng::new(7);
        let mut a = Tensor::zeros(vec![3, 4]);
        let mut b = Tensor::zeros(vec![4, 2]);
        rng.fill_normal(&mut a, 1.0);
        rng.fill_normal(&mut b, 1.0);
        let got = a.matmul(&b).unwrap();
        // independent naive i,j,k oracle
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert!((got.at(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn dot_cases() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 2.0]);
        let z = Tensor::from_vec(vec![0.0, 0.0, 0.0]);
        assert_eq!(a.dot(&z).unwrap(), 0.0);
        assert_eq!(a.dot(&a).unwrap(), 9.0);
        let mut rng = super::Rng::new(3);
        let mut x = Tensor::zeros(vec![17]);
        let mut y = Tensor::zeros(vec![17]);
        rng.fill_normal(&mut x, 1.0);
        rng.fill_normal(&mut y, 1.0);
        let naive: f64 = (0..17).map(|i| x.data()[i] * y.data()[i]).sum();
        assert!((x.dot(&y).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn elementwise_cases() {
        let x = Tensor::from_vec(vec![1.5, -2.0]);
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(x.add(&z).unwrap(), x);
        assert_eq!(Tensor::from_vec(vec![0.5]).clip(0.0, 0.2).data(), &[0.2]);
        assert_eq!(Tensor::from_vec(vec![4.0, 9.0]).sqrt().unwrap().data(), &[2.0, 3.0]);
        assert!(matches!(x.div(&z), Err(Error::Numeric(_))));
        assert!(matches!(Tensor::from_vec(vec![-1.0]).sqrt(), Err(Error::Numeric(_))));
    }

    #[test]
    fn rng_determinism() {
        let mut a = super::Rng::new(42);
        let mut b = super::Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let draws: Vec<f64> = (0..4).map(|_| a.next_f64()).collect();
        assert!(draws.iter().all(|&d| (0.0..1.0).contains(&d)));
    }

    proptest! {
        #[test]
        fn dot_self_nonnegative(v in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(v);
            prop_assert!(t.dot(&t).unwrap() >= 0.0);
        }

        #[test]
        fn matmul_identity_exact(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = super::Rng::new(seed);
            let mut a = Tensor::zeros(vec![n, n]);
            rng.fill_normal(&mut a, 1.0);
            let i = identity(n);
            prop_assert_eq!(a.matmul(&i).unwrap(), a.clone());
            let z = Tensor::zeros(vec![n, n]);
            prop_assert_eq!(a.matmul(&z).unwrap(), z);
        }
    }
}
