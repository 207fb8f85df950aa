//! Dense row-major tensors and the parameter-set abstraction shared by the
//! optimizer, checkpoints and gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Self> {
        (shape.iter().product::<usize>() == data.len()).then(|| Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = dist.sample(rng));
        t
    }

    /// Normal entries resampled until they fall within two standard
    /// deviations.
    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let mut t = Self::zeros(shape);
        for x in t.data.iter_mut() {
            *x = loop {
                let z: f64 = dist.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            };
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0].max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// `out = self * x + bias` for a matrix `self`.
    pub fn affine(&self, x: &[f64], bias: &Tensor) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols());
        (0..self.rows())
            .map(|r| bias.data[r] + dot(self.row(r), x))
            .collect()
    }

    /// `dx += self^T * dy`.
    pub fn add_transpose_product(&self, dy: &[f64], dx: &mut [f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, self.row(r), dx);
            }
        }
    }

    /// `self += dy * x^T`.
    pub fn add_outer(&mut self, dy: &[f64], x: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, x, self.row_mut(r));
            }
        }
    }

    pub fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// A fixed collection of named tensors. Gradients and optimizer moments use
/// the same type as the parameters they belong to.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Bumped on every update so stale forward traces can be detected.
    fn revision(&self) -> u64;
    fn set_revision(&mut self, revision: u64);

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(scale, b.data(), a.data_mut());
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.data().iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Equality of every tensor, bit for bit.
    fn same_values(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|((na, a), (nb, b))| {
                na == &nb
                    && a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_and_transpose() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        assert_eq!(w.affine(&[1.0, 0.0, -1.0], &b), vec![-1.5, -2.5]);
        let mut dx = vec![0.0; 3];
        w.add_transpose_product(&[1.0, 1.0], &mut dx);
        assert_eq!(dx, vec![5.0, 7.0, 9.0]);
        let mut g = Tensor::zeros(&[2, 3]);
        g.add_outer(&[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(g.data(), &[1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::truncated_normal(&[1000], 0.1, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.2));
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_none());
    }
}
