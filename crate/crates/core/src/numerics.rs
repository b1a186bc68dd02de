//! Minimal dense-network numerics: row-major matrices, layer
//! forward/backward passes, an Adam optimizer, a seeded deterministic RNG
//! and a finite-difference gradient checker.
//!
//! Everything runs in f64 and is deterministic given a seed; no global RNG.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

// --------------------------------------------------------------------- rng

/// Counter-based deterministic generator (splitmix64). The same seed yields
/// the same sequence on every platform; independent streams are obtained
/// with [`Rng::derive`] rather than by sharing state.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Independent stream for a named sub-task.
    pub fn derive(&self, tag: &str) -> Rng {
        Rng {
            state: mix(self.state ^ fnv1a(tag)),
        }
    }

    /// Independent stream for a numbered sub-task (fold, tree, epoch...).
    pub fn derive_index(&self, index: u64) -> Rng {
        Rng {
            state: mix(self.state ^ mix(index.wrapping_add(0x9e3779b97f4a7c15))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        mix(self.state)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }

    /// One draw from N(mean, std^2) via Box-Muller. std == 0 degenerates to
    /// the mean without consuming state.
    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        debug_assert!(std >= 0.0);
        if std == 0.0 {
            return mean;
        }
        let mut u1 = self.next_f64();
        while u1 == 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian_vec(&mut self, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
        if std < 0.0 {
            return Err(Error::Validation(format!(
                "gaussian std must be non-negative, got {std}"
            )));
        }
        Ok((0..n).map(|_| self.gaussian(mean, std)).collect())
    }
}

// ------------------------------------------------------------------ matrix

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn random_gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gaussian(0.0, std)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// W x
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Config(format!(
                "matvec dimension mismatch: matrix is {}x{}, input has length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            out[r] = acc;
        }
        Ok(out)
    }

    /// W^T x
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Config(format!(
                "matvec_t dimension mismatch: matrix is {}x{}, input has length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * xr;
            }
        }
        Ok(out)
    }

    /// self += scale * u v^T
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, vc) in row.iter_mut().zip(v) {
                *w += scale * ur * vc;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

// ------------------------------------------------------------------ layers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully-connected layer, out = activation(W x + b).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Per-call state produced by `forward` and consumed by `backward`.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LayerGrads {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Config(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// He initialization for ReLU layers, Xavier-like for identity heads.
    pub fn new_random(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / in_dim as f64).sqrt(),
            Activation::Identity => (1.0 / in_dim as f64).sqrt(),
        };
        DenseLayer {
            weights: Matrix::random_gaussian(out_dim, in_dim, std, rng),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, LayerCache)> {
        let mut pre = self.weights.matvec(input)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let out = pre.iter().map(|&v| self.activation.apply(v)).collect();
        Ok((
            out,
            LayerCache {
                input: input.to_vec(),
                pre,
            },
        ))
    }

    /// Given dL/d(output), returns (dL/d(input), parameter gradients).
    pub fn backward(&self, cache: &LayerCache, upstream: &[f64]) -> Result<(Vec<f64>, LayerGrads)> {
        if upstream.len() != self.out_dim() {
            return Err(Error::Config(format!(
                "upstream gradient length {} does not match {} output units",
                upstream.len(),
                self.out_dim()
            )));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&cache.pre)
            .map(|(&u, &p)| u * self.activation.derivative(p))
            .collect();
        let mut grads = LayerGrads::zeros(self.out_dim(), self.in_dim());
        grads.weights.add_outer(&delta, &cache.input, 1.0);
        grads.bias.copy_from_slice(&delta);
        let input_grad = self.weights.matvec_t(&delta)?;
        Ok((input_grad, grads))
    }
}

// -------------------------------------------------------------------- adam

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        AdamState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "adam expects {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {} at parameter {} on step {}",
                grads[i],
                i,
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            self.second_moment[i] = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

// -------------------------------------------------------------- grad check

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter index, relative error)
    pub rel_errors: Vec<(usize, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central finite differences at the
/// given parameter indices. The loss must be deterministic (reparameterization
/// noise and dropout masks frozen); a non-deterministic loss invalidates the
/// check. The relative error uses a unit floor in the denominator so that
/// near-zero gradients are compared absolutely.
pub fn grad_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::Config(
            "analytic gradient length does not match parameter count".into(),
        ));
    }
    let base = loss(params);
    let again = loss(params);
    if !base.is_finite() || base.to_bits() != again.to_bits() {
        return Err(Error::Validation(
            "loss is not deterministic under frozen randomness; gradient check invalid".into(),
        ));
    }
    let mut p = params.to_vec();
    let mut rel_errors = Vec::with_capacity(indices.len());
    let mut max_rel = 0.0f64;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + h;
        let f_plus = loss(&p);
        p[i] = orig - h;
        let f_minus = loss(&p);
        p[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
        rel_errors.push((i, rel));
    }
    Ok(GradCheckReport {
        rel_errors,
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel < tolerance,
    })
}

// ------------------------------------------------------------------- tests

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_relu_clamps_negatives() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap();
        let (out, _) = layer.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn forward_identity_map() {
        let layer =
            DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let (out, _) = layer.forward(&[0.5, 0.0, -2.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.0, -2.0]);
    }

    #[test]
    fn forward_hand_matrix_multiply() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let layer = DenseLayer::new(w, vec![1.0, 1.0], Activation::Identity).unwrap();
        let (out, _) = layer.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![4.0, 8.0]);
    }

    #[test]
    fn forward_dimension_mismatch_is_config_error() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap();
        assert!(matches!(layer.forward(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn backward_linear_weight_grad_is_outer_product() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let layer = DenseLayer::new(w, vec![0.0; 2], Activation::Identity).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, cache) = layer.forward(&x).unwrap();
        let (_, grads) = layer.backward(&cache, &[1.0, 1.0]).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.weights.get(r, c), x[c]);
            }
        }
        assert_eq!(grads.bias, vec![1.0, 1.0]);
    }

    #[test]
    fn backward_dead_relu_zeroes_input_grad() {
        let layer = DenseLayer::new(Matrix::identity(2), vec![-5.0; 2], Activation::Relu).unwrap();
        let (_, cache) = layer.forward(&[1.0, 2.0]).unwrap();
        let (input_grad, _) = layer.backward(&cache, &[1.0, 1.0]).unwrap();
        assert_eq!(input_grad, vec![0.0, 0.0]);
    }

    /// Flatten a layer's parameters, evaluate a scalar loss of its output and
    /// compare analytic gradients with central differences.
    #[test]
    fn backward_matches_finite_differences_on_random_layers() {
        let mut rng = Rng::new(7);
        for probe in 0..100 {
            let act = if probe % 2 == 0 {
                Activation::Relu
            } else {
                Activation::Identity
            };
            let mut layer = DenseLayer::new_random(4, 3, act, &mut rng);
            for b in layer.bias.iter_mut() {
                *b = rng.gaussian(0.0, 0.5);
            }
            let x: Vec<f64> = (0..3).map(|_| rng.gaussian(0.0, 1.0)).collect();
            let coeffs: Vec<f64> = (0..4).map(|_| rng.gaussian(0.0, 1.0)).collect();

            let loss_of = |l: &DenseLayer| -> f64 {
                let (out, _) = l.forward(&x).unwrap();
                out.iter().zip(&coeffs).map(|(o, c)| 0.5 * c * o * o).sum()
            };
            let (out, cache) = layer.forward(&x).unwrap();
            let upstream: Vec<f64> = out.iter().zip(&coeffs).map(|(o, c)| c * o).collect();
            let (_, grads) = layer.backward(&cache, &upstream).unwrap();

            let h = 1e-5;
            let check = |analytic: f64, bump: &mut dyn FnMut(&mut DenseLayer, f64)| {
                let mut lp = layer.clone();
                bump(&mut lp, h);
                let fp = loss_of(&lp);
                let mut lm = layer.clone();
                bump(&mut lm, -h);
                let fm = loss_of(&lm);
                let numeric = (fp - fm) / (2.0 * h);
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-4, "rel err {rel} (analytic {analytic}, numeric {numeric})");
            };
            for r in 0..4 {
                for c in 0..3 {
                    check(grads.weights.get(r, c), &mut |l, d| {
                        let v = l.weights.get(r, c);
                        l.weights.set(r, c, v + d);
                    });
                }
                check(grads.bias[r], &mut |l, d| l.bias[r] += d);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = AdamState::new(3, AdamConfig::default());
        let mut params = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.update(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With constant grad 1 the bias-corrected first step is exactly
        // lr * 1 / (1 + eps) ~= lr.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(1, cfg);
        let mut params = vec![2.0];
        adam.update(&mut params, &[1.0]).unwrap();
        assert!((params[0] - 1.9).abs() < 1e-6, "got {}", params[0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_identical_params_stay_identical() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut params = vec![0.7, 0.7];
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let g = rng.gaussian(0.0, 1.0);
            adam.update(&mut params, &[g, g]).unwrap();
            assert_eq!(params[0], params[1]);
        }
    }

    #[test]
    fn adam_nan_gradient_aborts() {
        let mut adam = AdamState::new(1, AdamConfig::default());
        let mut params = vec![1.0];
        assert!(matches!(
            adam.update(&mut params, &[f64::NAN]),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn grad_check_quadratic() {
        let params = [3.0];
        let report = grad_check(|p| p[0] * p[0], &params, &[6.0], &[0], 1e-5, 1e-8).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn grad_check_detects_corrupted_gradient() {
        let params = [3.0];
        let report = grad_check(|p| p[0] * p[0], &params, &[12.0], &[0], 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn grad_check_rejects_nondeterministic_loss() {
        let mut calls = 0u64;
        let params = [1.0];
        let res = grad_check(
            |p| {
                calls += 1;
                p[0] + calls as f64 * 1e-6
            },
            &params,
            &[1.0],
            &[0],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn gaussian_zero_std_is_degenerate() {
        let mut rng = Rng::new(1);
        let v = rng.gaussian_vec(5.0, 0.0, 10).unwrap();
        assert!(v.iter().all(|&x| x == 5.0));
    }

    #[test]
    fn gaussian_negative_std_is_error() {
        let mut rng = Rng::new(1);
        assert!(rng.gaussian_vec(0.0, -1.0, 3).is_err());
    }

    #[test]
    fn rng_same_seed_same_sequence() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ga = Rng::new(99).derive("x").gaussian_vec(0.0, 1.0, 20).unwrap();
        let gb = Rng::new(99).derive("x").gaussian_vec(0.0, 1.0, 20).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn gaussian_moments_converge() {
        let mut rng = Rng::new(12345);
        let n = 100_000;
        let v = rng.gaussian_vec(0.0, 1.0, n).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "sample std {}", var.sqrt());
    }

    #[test]
    fn derived_streams_differ() {
        let base = Rng::new(5);
        let a = base.derive("a").next_u64();
        let b = base.derive("b").next_u64();
        assert_ne!(a, b);
    }
}
