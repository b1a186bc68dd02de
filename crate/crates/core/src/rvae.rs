//! The R-VAE: probabilistic encoder (13 -> 8 -> 4 -> mu/log-var in R^2),
//! decoder (2 -> 4 -> 8 -> 13), reparameterization, the three-term joint
//! loss and a latent-space linear regression head with a 0/1 group
//! indicator. Backpropagation is written by hand and checked against
//! finite differences.

use crate::cohort::DummyEncoding;
use crate::error::{Error, Result};
use crate::numerics::{Activation, DenseLayer, LayerCache, LayerGrads, Rng};
use serde::{Deserialize, Serialize};

pub const INPUT_DIM: usize = 13;
pub const LATENT_DIM: usize = 2;

/// Log-variance head outputs are clamped to this band; outside it the
/// gradient is zero.
const LOG_VAR_CLAMP: f64 = 15.0;

/// Encoder inputs are standardized; anything this large is a sign the
/// caller forgot to standardize.
pub const STANDARDIZED_SENTINEL: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionLoss {
    Mse,
    Huber { delta: f64 },
}

impl RegressionLoss {
    pub fn validate(&self) -> Result<()> {
        if let RegressionLoss::Huber { delta } = self {
            if *delta <= 0.0 {
                return Err(Error::Config(format!("huber delta {delta} must be > 0")));
            }
        }
        Ok(())
    }

    fn value(&self, r: f64) -> f64 {
        match *self {
            RegressionLoss::Mse => r * r,
            RegressionLoss::Huber { delta } => {
                if r.abs() <= delta {
                    0.5 * r * r
                } else {
                    delta * (r.abs() - 0.5 * delta)
                }
            }
        }
    }

    /// d(loss)/d(residual)
    fn grad(&self, r: f64) -> f64 {
        match *self {
            RegressionLoss::Mse => 2.0 * r,
            RegressionLoss::Huber { delta } => {
                if r.abs() <= delta {
                    r
                } else {
                    delta * r.signum()
                }
            }
        }
    }
}

/// How the 0/1 indicator enters the regression. `Broadcast` is the literal
/// form y = w^T (z + d*1) + b; `SeparateCoefficient` is the conventional
/// y = w^T z + w_d * d + b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DummyForm {
    Broadcast,
    SeparateCoefficient,
}

/// A 0/1 group indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DummyVariable(u8);

impl DummyVariable {
    pub fn new(value: u8) -> Result<Self> {
        if value > 1 {
            return Err(Error::Validation(format!(
                "dummy variable must be 0 or 1, got {value}"
            )));
        }
        Ok(DummyVariable(value))
    }

    pub fn value(self) -> f64 {
        f64::from(self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RVaeConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub latent: usize,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub regression: RegressionLoss,
    pub dummy_form: DummyForm,
}

impl Default for RVaeConfig {
    fn default() -> Self {
        RVaeConfig {
            hidden1: 8,
            hidden2: 4,
            latent: LATENT_DIM,
            dropout: 0.3,
            alpha: 0.3,
            beta: 2.0,
            regression: RegressionLoss::Huber { delta: 9.0 },
            dummy_form: DummyForm::Broadcast,
        }
    }
}

impl RVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        self.regression.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub regression: f64,
    pub total: f64,
}

/// One standardized training record.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x: Vec<f64>,
    pub y: f64,
    /// Group indicator value (0 or 1).
    pub d: f64,
}

/// Frozen stochastic draws for one sample: reparameterization noise and the
/// four dropout masks (0/1 entries, pre-scaling).
#[derive(Debug, Clone)]
pub struct SampleNoise {
    pub eps: Vec<f64>,
    pub enc1_mask: Vec<f64>,
    pub enc2_mask: Vec<f64>,
    pub dec1_mask: Vec<f64>,
    pub dec2_mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RVaeModel {
    pub enc1: DenseLayer,
    pub enc2: DenseLayer,
    pub head_mu: DenseLayer,
    pub head_log_var: DenseLayer,
    pub dec1: DenseLayer,
    pub dec2: DenseLayer,
    pub dec3: DenseLayer,
    pub reg_w: Vec<f64>,
    pub reg_wd: f64,
    pub reg_b: f64,
    pub cfg: RVaeConfig,
    mode: Mode,
}

// ------------------------------------------------------------------ losses

/// Per-sample KL(N(mu, diag(exp(log_var))) || N(0, I)), always >= 0.
pub fn kl_loss(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Mean squared error over features.
pub fn recon_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Config(format!(
            "reconstruction length mismatch {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    let n = x.len() as f64;
    Ok(x.iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn regression_loss(y_true: &[f64], y_pred: &[f64], variant: RegressionLoss) -> Result<f64> {
    variant.validate()?;
    if y_true.len() != y_pred.len() {
        return Err(Error::Config(format!(
            "regression length mismatch {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Config("empty regression batch".into()));
    }
    let n = y_true.len() as f64;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(&y, &p)| variant.value(y - p))
        .sum::<f64>()
        / n)
}

/// Warns when an encoder input does not look standardized; returns the
/// offending feature index.
pub fn standardization_warning(x: &[f64]) -> Option<usize> {
    x.iter().position(|v| v.abs() > STANDARDIZED_SENTINEL)
}

// ----------------------------------------------------------- forward state

struct Forward {
    c_enc1: LayerCache,
    c_enc2: LayerCache,
    c_mu: LayerCache,
    c_lv: LayerCache,
    raw_log_var: Vec<f64>,
    latent: LatentCode,
    c_dec1: LayerCache,
    c_dec2: LayerCache,
    c_dec3: LayerCache,
    x_hat: Vec<f64>,
    y_hat: f64,
}

fn apply_dropout(h: &[f64], mask: Option<&[f64]>, keep: f64) -> Vec<f64> {
    match mask {
        Some(m) => h.iter().zip(m).map(|(v, b)| v * b / keep).collect(),
        None => h.to_vec(),
    }
}

fn dropout_grad(up: &[f64], mask: Option<&[f64]>, keep: f64) -> Vec<f64> {
    match mask {
        Some(m) => up.iter().zip(m).map(|(v, b)| v * b / keep).collect(),
        None => up.to_vec(),
    }
}

impl RVaeModel {
    pub fn new(cfg: RVaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng.derive("rvae-init");
        let enc1 = DenseLayer::new_random(cfg.hidden1, INPUT_DIM, Activation::Relu, &mut r);
        let enc2 = DenseLayer::new_random(cfg.hidden2, cfg.hidden1, Activation::Relu, &mut r);
        let head_mu = DenseLayer::new_random(cfg.latent, cfg.hidden2, Activation::Identity, &mut r);
        let head_log_var =
            DenseLayer::new_random(cfg.latent, cfg.hidden2, Activation::Identity, &mut r);
        let dec1 = DenseLayer::new_random(cfg.hidden2, cfg.latent, Activation::Relu, &mut r);
        let dec2 = DenseLayer::new_random(cfg.hidden1, cfg.hidden2, Activation::Relu, &mut r);
        let dec3 = DenseLayer::new_random(INPUT_DIM, cfg.hidden1, Activation::Identity, &mut r);
        let reg_w = (0..cfg.latent).map(|_| r.gaussian(0.0, 0.01)).collect();
        Ok(RVaeModel {
            enc1,
            enc2,
            head_mu,
            head_log_var,
            dec1,
            dec2,
            dec3,
            reg_w,
            reg_wd: 0.0,
            reg_b: 0.0,
            cfg,
            mode: Mode::Eval,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn keep_prob(&self) -> f64 {
        1.0 - self.cfg.dropout
    }

    /// Draws reparameterization noise and dropout masks for one sample.
    pub fn draw_noise(&self, rng: &mut Rng) -> SampleNoise {
        let keep = self.keep_prob();
        let mask = |n: usize, rng: &mut Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.bernoulli(keep) { 1.0 } else { 0.0 })
                .collect()
        };
        SampleNoise {
            eps: (0..self.cfg.latent).map(|_| rng.gaussian(0.0, 1.0)).collect(),
            enc1_mask: mask(self.cfg.hidden1, rng),
            enc2_mask: mask(self.cfg.hidden2, rng),
            dec1_mask: mask(self.cfg.hidden2, rng),
            dec2_mask: mask(self.cfg.hidden1, rng),
        }
    }

    pub fn draw_batch_noise(&self, n: usize, rng: &mut Rng) -> Vec<SampleNoise> {
        (0..n).map(|_| self.draw_noise(rng)).collect()
    }

    fn forward_sample(&self, s: &TrainSample, noise: Option<&SampleNoise>) -> Result<Forward> {
        let keep = self.keep_prob();
        let (h1, c_enc1) = self.enc1.forward(&s.x)?;
        let h1d = apply_dropout(&h1, noise.map(|n| n.enc1_mask.as_slice()), keep);
        let (h2, c_enc2) = self.enc2.forward(&h1d)?;
        let h2d = apply_dropout(&h2, noise.map(|n| n.enc2_mask.as_slice()), keep);
        let (mu, c_mu) = self.head_mu.forward(&h2d)?;
        let (raw_log_var, c_lv) = self.head_log_var.forward(&h2d)?;
        let log_var: Vec<f64> = raw_log_var
            .iter()
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect();
        let z: Vec<f64> = match noise {
            Some(n) => mu
                .iter()
                .zip(&log_var)
                .zip(&n.eps)
                .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
                .collect(),
            None => mu.clone(),
        };
        let (g1, c_dec1) = self.dec1.forward(&z)?;
        let g1d = apply_dropout(&g1, noise.map(|n| n.dec1_mask.as_slice()), keep);
        let (g2, c_dec2) = self.dec2.forward(&g1d)?;
        let g2d = apply_dropout(&g2, noise.map(|n| n.dec2_mask.as_slice()), keep);
        let (x_hat, c_dec3) = self.dec3.forward(&g2d)?;
        let y_hat = self.predict_from_latent(&z, s.d);
        Ok(Forward {
            c_enc1,
            c_enc2,
            c_mu,
            c_lv,
            raw_log_var,
            latent: LatentCode { mu, log_var, z },
            c_dec1,
            c_dec2,
            c_dec3,
            x_hat,
            y_hat,
        })
    }

    fn predict_from_latent(&self, z: &[f64], d: f64) -> f64 {
        match self.cfg.dummy_form {
            DummyForm::Broadcast => {
                z.iter()
                    .zip(&self.reg_w)
                    .map(|(&zi, &wi)| wi * (zi + d))
                    .sum::<f64>()
                    + self.reg_b
            }
            DummyForm::SeparateCoefficient => {
                z.iter().zip(&self.reg_w).map(|(&zi, &wi)| wi * zi).sum::<f64>()
                    + self.reg_wd * d
                    + self.reg_b
            }
        }
    }

    /// Maps a standardized biomarker vector to its latent code. In eval mode
    /// z = mu (no noise, no dropout); in train mode the reparameterized z
    /// uses draws from `rng`.
    pub fn encode(&self, x: &[f64], rng: &mut Rng) -> Result<LatentCode> {
        let sample = TrainSample {
            x: x.to_vec(),
            y: 0.0,
            d: 0.0,
        };
        let noise = match self.mode {
            Mode::Train => Some(self.draw_noise(rng)),
            Mode::Eval => None,
        };
        Ok(self.forward_sample(&sample, noise.as_ref())?.latent)
    }

    /// Deterministic eval-mode encoding (z = mu).
    pub fn encode_eval(&self, x: &[f64]) -> Result<LatentCode> {
        let sample = TrainSample {
            x: x.to_vec(),
            y: 0.0,
            d: 0.0,
        };
        Ok(self.forward_sample(&sample, None)?.latent)
    }

    /// Deterministic decoding of a latent point (no dropout).
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.latent {
            return Err(Error::Config(format!(
                "latent point has length {}, expected {}",
                z.len(),
                self.cfg.latent
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite latent point".into()));
        }
        let (g1, _) = self.dec1.forward(z)?;
        let (g2, _) = self.dec2.forward(&g1)?;
        let (x_hat, _) = self.dec3.forward(&g2)?;
        Ok(x_hat)
    }

    /// y = w^T (z + d*1) + b (broadcast form) or w^T z + w_d d + b.
    pub fn predict_sbp(&self, z: &[f64], d: DummyVariable) -> f64 {
        self.predict_from_latent(z, d.value())
    }

    /// Sum of regression weights; the broadcast dummy shifts the prediction
    /// by exactly this much.
    pub fn dummy_shift(&self) -> f64 {
        match self.cfg.dummy_form {
            DummyForm::Broadcast => self.reg_w.iter().sum(),
            DummyForm::SeparateCoefficient => self.reg_wd,
        }
    }

    /// Batch joint loss. `noise` must hold one entry per sample in train
    /// mode; pass `None` for eval-mode losses (z = mu, no dropout).
    pub fn joint_loss(
        &self,
        batch: &[TrainSample],
        noise: Option<&[SampleNoise]>,
    ) -> Result<LossBreakdown> {
        self.batch_pass(batch, noise, None)
    }

    /// Batch joint loss together with the gradient of the total w.r.t. every
    /// parameter, in `params_flat` order.
    pub fn joint_loss_and_grad(
        &self,
        batch: &[TrainSample],
        noise: Option<&[SampleNoise]>,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut grads = GradBuf::zeros(self);
        let breakdown = self.batch_pass(batch, noise, Some(&mut grads))?;
        Ok((breakdown, grads.flatten()))
    }

    /// Convenience wrapper drawing fresh noise in train mode.
    pub fn joint_loss_rng(&self, batch: &[TrainSample], rng: &mut Rng) -> Result<LossBreakdown> {
        match self.mode {
            Mode::Train => {
                let noise = self.draw_batch_noise(batch.len(), rng);
                self.joint_loss(batch, Some(&noise))
            }
            Mode::Eval => self.joint_loss(batch, None),
        }
    }

    fn batch_pass(
        &self,
        batch: &[TrainSample],
        noise: Option<&[SampleNoise]>,
        mut grads: Option<&mut GradBuf>,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(n) = noise {
            if n.len() != batch.len() {
                return Err(Error::Config(format!(
                    "noise entries {} do not match batch size {}",
                    n.len(),
                    batch.len()
                )));
            }
        }
        let b = batch.len() as f64;
        let inv_b = 1.0 / b;
        let alpha = self.cfg.alpha;
        let beta = self.cfg.beta;
        let (mut recon_sum, mut kl_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for (i, s) in batch.iter().enumerate() {
            if s.x.len() != INPUT_DIM {
                return Err(Error::Config(format!(
                    "sample has {} features, expected {INPUT_DIM}",
                    s.x.len()
                )));
            }
            let sn = noise.map(|n| &n[i]);
            let fwd = self.forward_sample(s, sn)?;
            recon_sum += recon_loss(&s.x, &fwd.x_hat)?;
            kl_sum += kl_loss(&fwd.latent.mu, &fwd.latent.log_var);
            reg_sum += self.cfg.regression.value(s.y - fwd.y_hat);
            if let Some(g) = grads.as_deref_mut() {
                self.backward_sample(s, sn, &fwd, inv_b, alpha, beta, g)?;
            }
        }
        let recon = recon_sum * inv_b;
        let kl = kl_sum * inv_b;
        let regression = reg_sum * inv_b;
        Ok(LossBreakdown {
            recon,
            kl,
            regression,
            total: recon + alpha * kl + beta * regression,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_sample(
        &self,
        s: &TrainSample,
        noise: Option<&SampleNoise>,
        fwd: &Forward,
        inv_b: f64,
        alpha: f64,
        beta: f64,
        out: &mut GradBuf,
    ) -> Result<()> {
        let keep = self.keep_prob();
        let n_feat = s.x.len() as f64;

        // Reconstruction path through the decoder.
        let d_x_hat: Vec<f64> = fwd
            .x_hat
            .iter()
            .zip(&s.x)
            .map(|(&xh, &x)| 2.0 * (xh - x) / n_feat * inv_b)
            .collect();
        let (d_g2d, g_dec3) = self.dec3.backward(&fwd.c_dec3, &d_x_hat)?;
        out.dec3.accumulate(&g_dec3);
        let d_g2 = dropout_grad(&d_g2d, noise.map(|n| n.dec2_mask.as_slice()), keep);
        let (d_g1d, g_dec2) = self.dec2.backward(&fwd.c_dec2, &d_g2)?;
        out.dec2.accumulate(&g_dec2);
        let d_g1 = dropout_grad(&d_g1d, noise.map(|n| n.dec1_mask.as_slice()), keep);
        let (mut d_z, g_dec1) = self.dec1.backward(&fwd.c_dec1, &d_g1)?;
        out.dec1.accumulate(&g_dec1);

        // Regression head.
        let r = s.y - fwd.y_hat;
        let d_y_hat = -beta * self.cfg.regression.grad(r) * inv_b;
        match self.cfg.dummy_form {
            DummyForm::Broadcast => {
                for j in 0..self.cfg.latent {
                    out.reg_w[j] += d_y_hat * (fwd.latent.z[j] + s.d);
                    d_z[j] += d_y_hat * self.reg_w[j];
                }
            }
            DummyForm::SeparateCoefficient => {
                for j in 0..self.cfg.latent {
                    out.reg_w[j] += d_y_hat * fwd.latent.z[j];
                    d_z[j] += d_y_hat * self.reg_w[j];
                }
                out.reg_wd += d_y_hat * s.d;
            }
        }
        out.reg_b += d_y_hat;

        // Through the reparameterization into mu / log-var, plus KL terms.
        let mut d_mu = vec![0.0; self.cfg.latent];
        let mut d_lv = vec![0.0; self.cfg.latent];
        for j in 0..self.cfg.latent {
            let lv = fwd.latent.log_var[j];
            d_mu[j] = d_z[j] + alpha * fwd.latent.mu[j] * inv_b;
            let mut dl = alpha * 0.5 * (lv.exp() - 1.0) * inv_b;
            if let Some(n) = noise {
                dl += d_z[j] * n.eps[j] * 0.5 * (lv / 2.0).exp();
            }
            // Clamp: no gradient outside the band.
            if fwd.raw_log_var[j].abs() >= LOG_VAR_CLAMP {
                dl = 0.0;
            }
            d_lv[j] = dl;
        }
        let (d_h2d_mu, g_mu) = self.head_mu.backward(&fwd.c_mu, &d_mu)?;
        out.head_mu.accumulate(&g_mu);
        let (d_h2d_lv, g_lv) = self.head_log_var.backward(&fwd.c_lv, &d_lv)?;
        out.head_log_var.accumulate(&g_lv);
        let d_h2d: Vec<f64> = d_h2d_mu.iter().zip(&d_h2d_lv).map(|(a, b)| a + b).collect();

        let d_h2 = dropout_grad(&d_h2d, noise.map(|n| n.enc2_mask.as_slice()), keep);
        let (d_h1d, g_enc2) = self.enc2.backward(&fwd.c_enc2, &d_h2)?;
        out.enc2.accumulate(&g_enc2);
        let d_h1 = dropout_grad(&d_h1d, noise.map(|n| n.enc1_mask.as_slice()), keep);
        let (_, g_enc1) = self.enc1.backward(&fwd.c_enc1, &d_h1)?;
        out.enc1.accumulate(&g_enc1);
        Ok(())
    }

    // ------------------------------------------------------ flat parameters

    fn layers(&self) -> [&DenseLayer; 7] {
        [
            &self.enc1,
            &self.enc2,
            &self.head_mu,
            &self.head_log_var,
            &self.dec1,
            &self.dec2,
            &self.dec3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum::<usize>()
            + self.reg_w.len()
            + 2
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.reg_w);
        out.push(self.reg_wd);
        out.push(self.reg_b);
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &p[off..off + n];
            off += n;
            s
        };
        for l in [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.head_mu,
            &mut self.head_log_var,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.dec3,
        ] {
            let wlen = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(take(wlen));
            let blen = l.bias.len();
            l.bias.copy_from_slice(take(blen));
        }
        let wlen = self.reg_w.len();
        self.reg_w.copy_from_slice(take(wlen));
        self.reg_wd = take(1)[0];
        self.reg_b = take(1)[0];
        Ok(())
    }
}

/// Gradient accumulator mirroring the parameter layout.
struct GradBuf {
    enc1: LayerGrads,
    enc2: LayerGrads,
    head_mu: LayerGrads,
    head_log_var: LayerGrads,
    dec1: LayerGrads,
    dec2: LayerGrads,
    dec3: LayerGrads,
    reg_w: Vec<f64>,
    reg_wd: f64,
    reg_b: f64,
}

impl LayerGrads {
    fn accumulate(&mut self, other: &LayerGrads) {
        self.weights.add_scaled(&other.weights, 1.0);
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl GradBuf {
    fn zeros(model: &RVaeModel) -> Self {
        let z = |l: &DenseLayer| LayerGrads::zeros(l.out_dim(), l.in_dim());
        GradBuf {
            enc1: z(&model.enc1),
            enc2: z(&model.enc2),
            head_mu: z(&model.head_mu),
            head_log_var: z(&model.head_log_var),
            dec1: z(&model.dec1),
            dec2: z(&model.dec2),
            dec3: z(&model.dec3),
            reg_w: vec![0.0; model.reg_w.len()],
            reg_wd: 0.0,
            reg_b: 0.0,
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in [
            &self.enc1,
            &self.enc2,
            &self.head_mu,
            &self.head_log_var,
            &self.dec1,
            &self.dec2,
            &self.dec3,
        ] {
            out.extend_from_slice(g.weights.data());
            out.extend_from_slice(&g.bias);
        }
        out.extend_from_slice(&self.reg_w);
        out.push(self.reg_wd);
        out.push(self.reg_b);
        out
    }
}

// ----------------------------------------------------------- serialization

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelWeights {
    pub enc1: DenseLayer,
    pub enc2: DenseLayer,
    pub head_mu: DenseLayer,
    pub head_log_var: DenseLayer,
    pub dec1: DenseLayer,
    pub dec2: DenseLayer,
    pub dec3: DenseLayer,
    pub reg_w: Vec<f64>,
    pub reg_wd: f64,
    pub reg_b: f64,
}

/// Single JSON document holding the full model, training statistics and
/// provenance. Weights round-trip bit-exactly (shortest-round-trip decimal
/// serialization).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub config: RVaeConfig,
    pub weights: ModelWeights,
    pub standardization: Option<crate::training::Standardization>,
    pub dummy_encoding: DummyEncoding,
    pub train_seed: Option<u64>,
    pub training_config: Option<crate::training::TrainConfig>,
}

impl RVaeModel {
    pub fn to_file(
        &self,
        standardization: Option<crate::training::Standardization>,
        dummy_encoding: DummyEncoding,
        train_seed: Option<u64>,
        training_config: Option<crate::training::TrainConfig>,
    ) -> ModelFile {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            config: self.cfg.clone(),
            weights: ModelWeights {
                enc1: self.enc1.clone(),
                enc2: self.enc2.clone(),
                head_mu: self.head_mu.clone(),
                head_log_var: self.head_log_var.clone(),
                dec1: self.dec1.clone(),
                dec2: self.dec2.clone(),
                dec3: self.dec3.clone(),
                reg_w: self.reg_w.clone(),
                reg_wd: self.reg_wd,
                reg_b: self.reg_b,
            },
            standardization,
            dummy_encoding,
            train_seed,
            training_config,
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<RVaeModel> {
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: file.schema_version,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
        file.config.validate()?;
        let w = &file.weights;
        Ok(RVaeModel {
            enc1: w.enc1.clone(),
            enc2: w.enc2.clone(),
            head_mu: w.head_mu.clone(),
            head_log_var: w.head_log_var.clone(),
            dec1: w.dec1.clone(),
            dec2: w.dec2.clone(),
            dec3: w.dec3.clone(),
            reg_w: w.reg_w.clone(),
            reg_wd: w.reg_wd,
            reg_b: w.reg_b,
            cfg: file.config.clone(),
            mode: Mode::Eval,
        })
    }
}

pub fn save_model(path: &std::path::Path, file: &ModelFile) -> Result<()> {
    let json = serde_json::to_string_pretty(file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path)?;
    // Check the version tag before deserializing the full document: a file
    // written by a different schema would otherwise surface as a confusing
    // missing-field error instead of a version mismatch.
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(found) = probe.get("schema_version").and_then(|v| v.as_u64()) {
        if found as u32 != MODEL_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: found as u32,
                expected: MODEL_SCHEMA_VERSION,
            });
        }
    }
    Ok(serde_json::from_str(&text)?)
}

// ------------------------------------------------------------------- tests

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn tiny_model(seed: u64) -> RVaeModel {
        let mut rng = Rng::new(seed);
        RVaeModel::new(RVaeConfig::default(), &mut rng).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = Rng::new(seed).derive("batch");
        (0..n)
            .map(|_| TrainSample {
                x: (0..INPUT_DIM).map(|_| rng.gaussian(0.0, 1.0)).collect(),
                y: rng.uniform(100.0, 170.0),
                d: if rng.bernoulli(0.5) { 1.0 } else { 0.0 },
            })
            .collect()
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_loss(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_closed_form_value() {
        assert!((kl_loss(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            m1 in -5.0f64..5.0, m2 in -5.0f64..5.0,
            l1 in -6.0f64..6.0, l2 in -6.0f64..6.0,
        ) {
            prop_assert!(kl_loss(&[m1, m2], &[l1, l2]) >= 0.0);
        }
    }

    #[test]
    fn recon_loss_examples() {
        let x = vec![0.0; 13];
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let mut one = vec![0.0; 13];
        one[0] = 1.0;
        assert!((recon_loss(&one, &x).unwrap() - 1.0 / 13.0).abs() < 1e-15);
        let doubled: Vec<f64> = one.iter().map(|v| 2.0 * v).collect();
        assert!(
            (recon_loss(&doubled, &x).unwrap() - 4.0 / 13.0).abs() < 1e-15,
            "quadratic homogeneity"
        );
        assert!(recon_loss(&x, &[0.0; 5]).is_err());
    }

    #[test]
    fn regression_loss_examples() {
        let zeros = vec![0.0; 4];
        assert_eq!(
            regression_loss(&zeros, &zeros, RegressionLoss::Mse).unwrap(),
            0.0
        );
        assert_eq!(
            regression_loss(&zeros, &zeros, RegressionLoss::Huber { delta: 1.0 }).unwrap(),
            0.0
        );
        // r = 1, delta = 1: quadratic zone, 0.5 * r^2.
        assert!(
            (regression_loss(&[1.0], &[0.0], RegressionLoss::Huber { delta: 1.0 }).unwrap() - 0.5)
                .abs()
                < 1e-15
        );
        // r = 10, delta = 1: 1 * (10 - 0.5) = 9.5; MSE = 100.
        assert!(
            (regression_loss(&[10.0], &[0.0], RegressionLoss::Huber { delta: 1.0 }).unwrap()
                - 9.5)
                .abs()
                < 1e-15
        );
        assert!(
            (regression_loss(&[10.0], &[0.0], RegressionLoss::Mse).unwrap() - 100.0).abs() < 1e-15
        );
        assert!(regression_loss(&[1.0], &[0.0], RegressionLoss::Huber { delta: 0.0 }).is_err());
    }

    proptest! {
        #[test]
        fn huber_matches_half_mse_inside_delta(r in -3.0f64..3.0) {
            let huber = RegressionLoss::Huber { delta: 3.0 };
            let h = regression_loss(&[r], &[0.0], huber).unwrap();
            let m = regression_loss(&[r], &[0.0], RegressionLoss::Mse).unwrap();
            prop_assert!((h - 0.5 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_sbp_examples() {
        let mut model = tiny_model(1);
        model.reg_w = vec![1.0, 1.0];
        model.reg_b = 0.0;
        let d0 = DummyVariable::new(0).unwrap();
        let d1 = DummyVariable::new(1).unwrap();
        assert_eq!(model.predict_sbp(&[10.0, 20.0], d0), 30.0);
        assert_eq!(model.predict_sbp(&[10.0, 20.0], d1), 32.0);
        model.reg_w = vec![0.0, 0.0];
        model.reg_b = 120.0;
        assert_eq!(model.predict_sbp(&[3.0, -7.0], d1), 120.0);
    }

    #[test]
    fn predict_sbp_is_affine_in_z() {
        let model = tiny_model(3);
        let d = DummyVariable::new(1).unwrap();
        let z1 = [0.7, -0.3];
        let z2 = [-1.2, 0.9];
        let sum = [z1[0] + z2[0], z1[1] + z2[1]];
        let f = |z: &[f64]| model.predict_sbp(z, d) - model.predict_sbp(&[0.0, 0.0], d);
        assert!((f(&sum) - f(&z1) - f(&z2)).abs() < 1e-9);
    }

    #[test]
    fn eval_encode_is_deterministic_and_train_is_seeded() {
        let mut model = tiny_model(5);
        let x = vec![0.3; INPUT_DIM];
        let a = model.encode_eval(&x).unwrap();
        let b = model.encode_eval(&x).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.z, a.mu, "eval mode uses z = mu");

        model.set_mode(Mode::Train);
        let mut r1 = Rng::new(11);
        let mut r2 = Rng::new(11);
        let t1 = model.encode(&x, &mut r1).unwrap();
        let t2 = model.encode(&x, &mut r2).unwrap();
        assert_eq!(t1.z, t2.z);
        assert_ne!(t1.z, t1.mu);
    }

    #[test]
    fn reparameterization_identity() {
        // z = mu + exp(log_var / 2) * eps with log_var = 0, eps = (0.5, -0.5).
        let mu = [1.0, 2.0];
        let eps = [0.5, -0.5];
        let z: Vec<f64> = mu.iter().zip(&eps).map(|(m, e)| m + e).collect();
        assert_eq!(z, vec![1.5, 1.5]);
    }

    #[test]
    fn decode_deterministic_and_zero_output_layer() {
        let mut model = tiny_model(9);
        let z = [0.4, -1.1];
        assert_eq!(model.decode(&z).unwrap(), model.decode(&z).unwrap());
        // Zero output layer: decode equals the output bias.
        let rows = model.dec3.out_dim();
        let cols = model.dec3.in_dim();
        model.dec3.weights = Matrix::zeros(rows, cols);
        model.dec3.bias = (0..rows).map(|i| i as f64).collect();
        let out = model.decode(&z).unwrap();
        assert_eq!(out, model.dec3.bias);
    }

    #[test]
    fn joint_loss_weighted_sum() {
        let mut model = tiny_model(13);
        let batch = random_batch(6, 77);
        model.set_mode(Mode::Eval);
        let l = model.joint_loss(&batch, None).unwrap();
        assert!(
            (l.total - (l.recon + model.cfg.alpha * l.kl + model.cfg.beta * l.regression)).abs()
                < 1e-12
        );
        // beta = 0 removes the regression term from the total.
        model.cfg.beta = 0.0;
        let l0 = model.joint_loss(&batch, None).unwrap();
        assert!((l0.total - (l0.recon + model.cfg.alpha * l0.kl)).abs() < 1e-12);
        // alpha = 0.3, beta = 2 with unit components gives 3.3.
        let total: f64 = 1.0 + 0.3 * 1.0 + 2.0 * 1.0;
        assert!((total - 3.3).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, form, reg) in [
            (21u64, DummyForm::Broadcast, RegressionLoss::Huber { delta: 9.0 }),
            (22, DummyForm::SeparateCoefficient, RegressionLoss::Mse),
        ] {
            let mut rng = Rng::new(seed);
            let cfg = RVaeConfig {
                dummy_form: form,
                regression: reg,
                ..RVaeConfig::default()
            };
            let mut model = RVaeModel::new(cfg, &mut rng).unwrap();
            model.set_mode(Mode::Train);
            // Jitter all parameters away from zero: freshly initialized
            // biases put ReLU pre-activations exactly on the kink, where
            // central differences and the subgradient legitimately disagree.
            let jittered: Vec<f64> = model
                .params_flat()
                .iter()
                .map(|p| p + rng.gaussian(0.0, 0.05))
                .collect();
            model.set_params_flat(&jittered).unwrap();
            let batch = random_batch(5, seed);
            let noise = model.draw_batch_noise(batch.len(), &mut rng);
            let (_, analytic) = model.joint_loss_and_grad(&batch, Some(&noise)).unwrap();
            let params = model.params_flat();
            let indices: Vec<usize> = (0..params.len()).step_by(3).collect();
            let mut probe = model.clone();
            let report = crate::numerics::grad_check(
                |p| {
                    probe.set_params_flat(p).unwrap();
                    probe.joint_loss(&batch, Some(&noise)).unwrap().total
                },
                &params,
                &analytic,
                &indices,
                1e-5,
                1e-4,
            )
            .unwrap();
            if !report.passed {
                let mut worst = report.rel_errors.clone();
                worst.sort_by(|a, b| b.1.total_cmp(&a.1));
                for (i, e) in worst.iter().take(8) {
                    eprintln!("idx {i}: rel {e} analytic {}", analytic[*i]);
                }
                eprintln!("param_count {}", model.param_count());
            }
            assert!(
                report.passed,
                "form {form:?}: max rel err {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn params_flat_round_trip() {
        let model = tiny_model(31);
        let p = model.params_flat();
        assert_eq!(p.len(), model.param_count());
        let mut other = tiny_model(32);
        other.set_params_flat(&p).unwrap();
        assert_eq!(other.params_flat(), p);
    }

    #[test]
    fn model_file_round_trip_bit_exact() {
        let model = tiny_model(41);
        let file = model.to_file(None, DummyEncoding::default(), Some(41), None);
        let json = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&json).unwrap();
        let restored = RVaeModel::from_file(&back).unwrap();
        let a = model.params_flat();
        let b = restored.params_flat();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn schema_version_mismatch_rejected() {
        let model = tiny_model(43);
        let mut file = model.to_file(None, DummyEncoding::default(), None, None);
        file.schema_version = 99;
        assert!(matches!(
            RVaeModel::from_file(&file),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn standardization_sentinel() {
        assert_eq!(standardization_warning(&[0.0, 3.0]), None);
        assert_eq!(standardization_warning(&[0.0, 130.0]), Some(1));
    }
}
