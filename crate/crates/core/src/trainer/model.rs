//! Multinomial logistic regression over sparse hashed features.
//!
//! Weights are stored feature-major (`weights[f * classes + k]`) behind a
//! global multiplicative `scale`, so the L2 shrinkage of a step costs O(1)
//! instead of O(dim * classes). The effective weight is `scale * weights[..]`.

use crate::features::SparseVec;

/// Below this the scale is folded back into the stored weights.
const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    scale: f64,
}

/// One training example: a feature vector and its target class.
pub type Example<'a> = (&'a SparseVec, usize);

/// Dense gradient of [`SoftmaxRegression::objective`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxRegression {
    /// Zero-initialized model.
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            scale: 1.0,
        }
    }

    pub fn from_parameters(dim: usize, classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), dim * classes, "weight matrix must be dim x classes");
        assert_eq!(bias.len(), classes, "bias must have one entry per class");
        Self { dim, classes, weights, bias, scale: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.scale * self.weights[feature * self.classes + class]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.bias[class]
    }

    /// Effective weights, feature-major.
    pub fn weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w * self.scale).collect()
    }

    pub fn logits_into(&self, x: &SparseVec, out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for &(f, v) in x.entries() {
            let row = &self.weights[f as usize * self.classes..(f as usize + 1) * self.classes];
            for (o, w) in out.iter_mut().zip(row) {
                *o += self.scale * w * v;
            }
        }
    }

    pub fn logits(&self, x: &SparseVec) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        self.logits_into(x, &mut out);
        out
    }

    pub fn predict_proba(&self, x: &SparseVec) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Mean cross-entropy over `examples` plus `l2 / 2 * ||W||^2` (bias excluded).
    pub fn objective(&self, examples: &[Example<'_>], l2: f64) -> f64 {
        let mut logits = vec![0.0; self.classes];
        let data: f64 = examples
            .iter()
            .map(|&(x, y)| {
                self.logits_into(x, &mut logits);
                log_sum_exp(&logits) - logits[y]
            })
            .sum::<f64>()
            / examples.len() as f64;
        let norm: f64 = self.weights.iter().map(|w| (w * self.scale).powi(2)).sum();
        data + 0.5 * l2 * norm
    }

    /// Per-example `(softmax - onehot) / n`, the derivative of the mean
    /// cross-entropy with respect to each example's logits.
    fn residuals(&self, examples: &[Example<'_>]) -> Vec<f64> {
        let n = examples.len() as f64;
        let mut out = vec![0.0; examples.len() * self.classes];
        for (row, &(x, y)) in out.chunks_mut(self.classes).zip(examples) {
            self.logits_into(x, row);
            softmax_in_place(row);
            row[y] -= 1.0;
            row.iter_mut().for_each(|r| *r /= n);
        }
        out
    }

    pub fn gradient(&self, examples: &[Example<'_>], l2: f64) -> Gradient {
        let residuals = self.residuals(examples);
        let mut weights: Vec<f64> = self.weights.iter().map(|w| l2 * w * self.scale).collect();
        let mut bias = vec![0.0; self.classes];
        for (row, &(x, _)) in residuals.chunks(self.classes).zip(examples) {
            for (b, r) in bias.iter_mut().zip(row) {
                *b += r;
            }
            for &(f, v) in x.entries() {
                let base = f as usize * self.classes;
                for (k, r) in row.iter().enumerate() {
                    weights[base + k] += v * r;
                }
            }
        }
        Gradient { weights, bias }
    }

    /// One mini-batch gradient step on [`Self::objective`].
    pub fn sgd_step(&mut self, examples: &[Example<'_>], learning_rate: f64, l2: f64) {
        if examples.is_empty() {
            return;
        }
        let residuals = self.residuals(examples);
        // W <- (1 - lr * l2) W - lr * g_data, with the shrinkage folded into scale.
        let shrink = 1.0 - learning_rate * l2;
        if shrink != 1.0 {
            if shrink <= 0.0 {
                self.weights.iter_mut().for_each(|w| *w = 0.0);
                self.scale = 1.0;
            } else {
                self.scale *= shrink;
            }
        }
        let step = learning_rate / self.scale;
        for (row, &(x, _)) in residuals.chunks(self.classes).zip(examples) {
            for (b, r) in self.bias.iter_mut().zip(row) {
                *b -= learning_rate * r;
            }
            for &(f, v) in x.entries() {
                let base = f as usize * self.classes;
                for (k, r) in row.iter().enumerate() {
                    self.weights[base + k] -= step * v * r;
                }
            }
        }
        if self.scale < MIN_SCALE {
            let scale = self.scale;
            self.weights.iter_mut().for_each(|w| *w *= scale);
            self.scale = 1.0;
        }
    }
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    values.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64) -> (SoftmaxRegression, Vec<SparseVec>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dim, classes) = (10, 3);
        let weights = (0..dim * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect();
        let xs: Vec<SparseVec> = (0..6)
            .map(|_| {
                let mut pairs = Vec::new();
                for f in 0..dim as u32 {
                    if rng.random_bool(0.6) {
                        pairs.push((f, rng.random_range(0.1..2.0)));
                    }
                }
                SparseVec::from_pairs(pairs)
            })
            .collect();
        let ys = (0..xs.len()).map(|_| rng.random_range(0..classes)).collect();
        (SoftmaxRegression::from_parameters(dim, classes, weights, bias), xs, ys)
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = SoftmaxRegression::new(8, 4);
        let p = model.predict_proba(&SparseVec::from_pairs(vec![(1, 3.0), (5, 1.0)]));
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let (model, xs, ys) = random_problem(seed);
            let examples: Vec<Example<'_>> = xs.iter().zip(ys.iter().copied()).collect();
            let l2 = 0.01;
            let grad = model.gradient(&examples, l2);
            let h = 1e-5;
            for i in 0..model.weights.len() {
                let mut plus = model.clone();
                plus.weights[i] += h;
                let mut minus = model.clone();
                minus.weights[i] -= h;
                let numeric = (plus.objective(&examples, l2) - minus.objective(&examples, l2)) / (2.0 * h);
                let denom = numeric.abs().max(grad.weights[i].abs()).max(1e-8);
                assert!((numeric - grad.weights[i]).abs() / denom < 1e-4, "w{i}: {numeric} vs {}", grad.weights[i]);
            }
            for k in 0..model.classes {
                let mut plus = model.clone();
                plus.bias[k] += h;
                let mut minus = model.clone();
                minus.bias[k] -= h;
                let numeric = (plus.objective(&examples, l2) - minus.objective(&examples, l2)) / (2.0 * h);
                assert!((numeric - grad.bias[k]).abs() / numeric.abs().max(1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn sgd_step_equals_dense_gradient_step() {
        let (model, xs, ys) = random_problem(9);
        let examples: Vec<Example<'_>> = xs.iter().zip(ys.iter().copied()).collect();
        let (lr, l2) = (0.3, 0.05);
        let grad = model.gradient(&examples, l2);
        let mut stepped = model.clone();
        stepped.sgd_step(&examples, lr, l2);
        for (i, (w, g)) in model.weights().iter().zip(&grad.weights).enumerate() {
            let expected = w - lr * g;
            assert!((stepped.weight(i / 3, i % 3) - expected).abs() < 1e-12);
        }
        for k in 0..3 {
            assert!((stepped.bias(k) - (model.bias(k) - lr * grad.bias[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_is_folded_back_when_tiny() {
        let x = SparseVec::from_pairs(vec![(0, 1.0)]);
        let mut model = SoftmaxRegression::new(2, 2);
        for _ in 0..200 {
            model.sgd_step(&[(&x, 0)], 0.5, 0.5);
        }
        assert!(model.scale >= MIN_SCALE);
        assert!(model.predict_proba(&x).iter().all(|p| p.is_finite()));
    }
}
