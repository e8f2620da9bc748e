use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bias-included linear map from backbone features to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// out_dim × in_dim
    pub(crate) weights: Array2<f64>,
    pub(crate) bias: Array1<f64>,
}

impl LinearHead {
    /// Uniform init in `±1/sqrt(in_dim)` for weights and bias, from a ChaCha8 stream.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound));
        Self { weights, bias }
    }

    pub fn from_params(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weights.nrows(), bias.len(), "head weight/bias mismatch");
        Self { weights, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// B×C logits for B×D features.
    pub fn logits(&self, features: ArrayView2<f32>) -> Array2<f64> {
        let x = features.mapv(f64::from);
        let mut out = x.dot(&self.weights.t());
        out += &self.bias;
        out
    }
}

/// In-place numerically stable softmax.
pub fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_basics() {
        let mut r = [0.0, 0.0, 0.0, 0.0];
        softmax(&mut r);
        assert!(r.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let mut big = [1000.0, 0.0];
        softmax(&mut big);
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] >= 0.0);
    }

    #[test]
    fn init_bounds() {
        let h = LinearHead::init(100, 4, 9);
        assert!(h.weights().iter().chain(h.bias().iter()).all(|w| w.abs() <= 0.1));
    }

    #[test]
    fn logits_match_manual_dot() {
        let h = LinearHead::from_params(
            Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(),
            Array1::from(vec![0.5, -0.5]),
        );
        let x = Array2::from_shape_vec((1, 3), vec![1.0f32, 1.0, 2.0]).unwrap();
        assert_eq!(h.logits(x.view()).row(0).to_vec(), vec![9.5, 0.5]);
    }
}
