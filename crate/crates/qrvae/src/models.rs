//! The two probabilistic models and their loss terms.
//!
//! Both models share one structure: an encoder trunk with two heads
//! producing the latent mean and log-variance, a reparameterized sample,
//! and a decoder trunk with two heads. They differ only in what the decoder
//! heads mean:
//!
//! - **Gaussian VAE**: heads are a per-pixel mean and log-variance; the
//!   reconstruction term is the Gaussian negative log-likelihood. When the
//!   mean reconstructs well, maximizing the likelihood drives the learned
//!   variance toward zero (variance shrinkage).
//! - **QR-VAE**: heads are two conditional quantiles `Q_lo`, `Q_hi` trained
//!   with the pinball loss. The heads share every trunk parameter and
//!   differ only in the last layer, which also discourages quantile
//!   crossing. Under a Gaussian output assumption the pair maps one-to-one
//!   to a mean and standard deviation.
//!
//! Loss conventions: reconstruction terms are summed over output
//! dimensions and averaged over the batch; the KL term against the
//! standard-normal prior uses the closed form `0.5 * sum(mu^2 + sigma^2 -
//! 1 - log sigma^2)`, batch-averaged, with weight 1 (plain ELBO). The
//! pinball loss uses the nonnegative convention `rho_alpha(u) =
//! max(alpha*u, (alpha-1)*u)`, whose minimizer over a constant predictor is
//! the empirical `alpha`-quantile; the subgradient at the kink is 0.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{ArchKind, HeadActivation, ModelConfig, ModelKind};
use crate::error::Result;
use crate::nn::{BatchNorm2d, Conv2d, Deconv2d, Dense, Layer, Mode, Sequential};
use crate::rng::sub_rng;

/// Decoder head semantics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputKind {
    /// Heads are (mean, log-variance).
    Gaussian,
    /// Heads are the (alpha_lo, alpha_hi) conditional quantiles.
    Quantile { alpha_lo: f64, alpha_hi: f64 },
}

/// Encoder/decoder pair with two heads each; see module docs.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub output: OutputKind,
    pub encoder_trunk: Sequential,
    pub enc_head_mu: Sequential,
    pub enc_head_logvar: Sequential,
    pub decoder_trunk: Sequential,
    /// Gaussian: mean head. Quantile: `Q_lo` head.
    pub dec_head_a: Sequential,
    /// Gaussian: log-variance head (clamped). Quantile: `Q_hi` head.
    pub dec_head_b: Sequential,
    flatten_input: bool,
}

/// Everything produced by one forward pass, as tape handles.
pub struct Forwarded {
    /// The input as seen by the loss (flattened for MLP architectures).
    pub x: Var,
    pub out_a: Var,
    pub out_b: Var,
    pub z_mu: Var,
    pub z_logvar: Var,
    pub z: Var,
    /// Parameter vars in `VaeModel::params` order, for gradient collection.
    pub bound: Vec<Var>,
}

/// Scalar loss terms on the tape.
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

impl VaeModel {
    /// Construct from a validated config with seeded initialization.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<VaeModel> {
        config.validate()?;
        let mut rng = sub_rng(seed, "init", 0);
        let output = match config.kind {
            ModelKind::Vae => OutputKind::Gaussian,
            ModelKind::Qrvae => {
                let [lo, hi] = config.alphas.expect("validated");
                OutputKind::Quantile { alpha_lo: lo, alpha_hi: hi }
            }
        };
        let d = config.input_numel();
        let latent = config.latent_dim;
        let sigmoid_heads = config.head_activation == HeadActivation::Sigmoid;
        // Gaussian log-variance heads stay linear regardless; the clamp is
        // applied in forward.
        let head = |layers: Vec<Layer>, squash: bool| -> Sequential {
            let mut v = layers;
            if squash {
                v.push(Layer::Sigmoid);
            }
            Sequential::new(v)
        };
        let squash_a = sigmoid_heads;
        let squash_b = sigmoid_heads && matches!(output, OutputKind::Quantile { .. });
        let model = match config.arch {
            ArchKind::Mlp => {
                let hidden = config.hidden;
                VaeModel {
                    config: config.clone(),
                    output,
                    encoder_trunk: Sequential::new(vec![
                        Layer::Dense(Dense::new(d, hidden, &mut rng)),
                        Layer::Relu,
                    ]),
                    enc_head_mu: Sequential::new(vec![Layer::Dense(Dense::new(
                        hidden, latent, &mut rng,
                    ))]),
                    enc_head_logvar: Sequential::new(vec![Layer::Dense(Dense::new(
                        hidden, latent, &mut rng,
                    ))]),
                    decoder_trunk: Sequential::new(vec![
                        Layer::Dense(Dense::new(latent, hidden, &mut rng)),
                        Layer::Relu,
                    ]),
                    dec_head_a: head(
                        vec![Layer::Dense(Dense::new(hidden, d, &mut rng))],
                        squash_a,
                    ),
                    dec_head_b: head(
                        vec![Layer::Dense(Dense::new(hidden, d, &mut rng))],
                        squash_b,
                    ),
                    flatten_input: config.input_shape.len() > 1,
                }
            }
            ArchKind::Conv => {
                let (c_in, h, w) =
                    (config.input_shape[0], config.input_shape[1], config.input_shape[2]);
                let [c0, c1, c2] =
                    [config.channels[0], config.channels[1], config.channels[2]];
                let (bh, bw) = (h / 8, w / 8);
                let feat = c2 * bh * bw;
                let conv_block = |ci: usize, co: usize, rng: &mut _| -> Vec<Layer> {
                    vec![
                        Layer::Conv2d(Conv2d::new(ci, co, 4, 2, 1, rng)),
                        Layer::BatchNorm(BatchNorm2d::new(co)),
                        Layer::Relu,
                    ]
                };
                let mut enc_layers = Vec::new();
                enc_layers.extend(conv_block(c_in, c0, &mut rng));
                enc_layers.extend(conv_block(c0, c1, &mut rng));
                enc_layers.extend(conv_block(c1, c2, &mut rng));
                enc_layers.push(Layer::Flatten);
                let deconv_block = |ci: usize, co: usize, rng: &mut _| -> Vec<Layer> {
                    vec![
                        Layer::Deconv2d(Deconv2d::new(ci, co, 4, 2, 1, rng)),
                        Layer::BatchNorm(BatchNorm2d::new(co)),
                        Layer::Relu,
                    ]
                };
                let mut dec_layers = vec![
                    Layer::Dense(Dense::new(latent, feat, &mut rng)),
                    Layer::Unflatten(vec![c2, bh, bw]),
                ];
                dec_layers.extend(deconv_block(c2, c1, &mut rng));
                dec_layers.extend(deconv_block(c1, c0, &mut rng));
                dec_layers.extend(deconv_block(c0, c0, &mut rng));
                VaeModel {
                    config: config.clone(),
                    output,
                    encoder_trunk: Sequential::new(enc_layers),
                    enc_head_mu: Sequential::new(vec![Layer::Dense(Dense::new(
                        feat, latent, &mut rng,
                    ))]),
                    enc_head_logvar: Sequential::new(vec![Layer::Dense(Dense::new(
                        feat, latent, &mut rng,
                    ))]),
                    decoder_trunk: Sequential::new(dec_layers),
                    dec_head_a: head(
                        vec![Layer::Deconv2d(Deconv2d::new(c0, c_in, 3, 1, 1, &mut rng))],
                        squash_a,
                    ),
                    dec_head_b: head(
                        vec![Layer::Deconv2d(Deconv2d::new(c0, c_in, 3, 1, 1, &mut rng))],
                        squash_b,
                    ),
                    flatten_input: false,
                }
            }
        };
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Quantile levels for quantile models.
    pub fn alphas(&self) -> Option<[f64; 2]> {
        match self.output {
            OutputKind::Quantile { alpha_lo, alpha_hi } => Some([alpha_lo, alpha_hi]),
            OutputKind::Gaussian => None,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.sequentials()
            .iter()
            .any(|s| s.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_))))
    }

    fn sequentials(&self) -> [&Sequential; 6] {
        [
            &self.encoder_trunk,
            &self.enc_head_mu,
            &self.enc_head_logvar,
            &self.decoder_trunk,
            &self.dec_head_a,
            &self.dec_head_b,
        ]
    }

    fn sequentials_mut(&mut self) -> [&mut Sequential; 6] {
        [
            &mut self.encoder_trunk,
            &mut self.enc_head_mu,
            &mut self.enc_head_logvar,
            &mut self.decoder_trunk,
            &mut self.dec_head_a,
            &mut self.dec_head_b,
        ]
    }

    /// Trainable parameters in forward binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.sequentials().into_iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.sequentials_mut().into_iter().flat_map(|s| s.params_mut()).collect()
    }

    /// All persistent state with stable names, in serialization order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor)> {
        let names =
            ["encoder_trunk", "enc_head_mu", "enc_head_logvar", "decoder_trunk", "dec_head_a", "dec_head_b"];
        let mut out = Vec::new();
        for (seq_name, seq) in names.iter().zip(self.sequentials()) {
            for (i, layer) in seq.layers.iter().enumerate() {
                for (field, tensor) in layer.state() {
                    out.push((format!("{seq_name}.{i}.{field}"), tensor));
                }
            }
        }
        out
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names =
            ["encoder_trunk", "enc_head_mu", "enc_head_logvar", "decoder_trunk", "dec_head_a", "dec_head_b"];
        let mut out = Vec::new();
        for (seq_name, seq) in names.iter().zip(self.sequentials_mut()) {
            for (i, layer) in seq.layers.iter_mut().enumerate() {
                for (field, tensor) in layer.state_mut() {
                    out.push((format!("{seq_name}.{i}.{field}"), tensor));
                }
            }
        }
        out
    }

    /// Draw a reparameterization noise tensor for a batch.
    pub fn sample_eps(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::randn(vec![batch, self.config.latent_dim], rng)
    }

    /// Full differentiable pipeline: encode, reparameterize, decode.
    ///
    /// `eps = None` selects the deterministic reconstruction mode (`eps` is
    /// zero, so `z` equals the posterior mean); `Some` supplies the noise
    /// draw for the 1-sample objective. Gaussian log-variance heads are
    /// clamped to the configured bounds.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        eps: Option<&Tensor>,
        mode: Mode,
    ) -> Forwarded {
        assert_eq!(
            &x.shape()[1..],
            self.config.input_shape.as_slice(),
            "forward: input item shape {:?} does not match configured {:?}",
            &x.shape()[1..],
            self.config.input_shape
        );
        let batch = x.shape()[0];
        let mut bound = Vec::new();
        let x_raw = tape.leaf(x);
        let x_in = if self.flatten_input {
            tape.reshape(x_raw, vec![batch, self.config.input_numel()])
        } else {
            x_raw
        };
        let h_enc = self.encoder_trunk.forward(tape, x_in, mode, &mut bound);
        let z_mu = self.enc_head_mu.forward(tape, h_enc, mode, &mut bound);
        let z_logvar = self.enc_head_logvar.forward(tape, h_enc, mode, &mut bound);
        let eps_tensor = match eps {
            Some(e) => {
                assert_eq!(
                    e.shape(),
                    &[batch, self.config.latent_dim],
                    "forward: eps shape mismatch"
                );
                e.clone()
            }
            None => Tensor::zeros(vec![batch, self.config.latent_dim]),
        };
        let eps_var = tape.leaf(&eps_tensor);
        let z = reparameterize(tape, z_mu, z_logvar, eps_var);
        let h_dec = self.decoder_trunk.forward(tape, z, mode, &mut bound);
        let out_a = self.dec_head_a.forward(tape, h_dec, mode, &mut bound);
        let mut out_b = self.dec_head_b.forward(tape, h_dec, mode, &mut bound);
        if self.output == OutputKind::Gaussian {
            let [lo, hi] = self.config.logvar_clamp;
            out_b = tape.clamp(out_b, lo, hi);
        }
        Forwarded { x: x_in, out_a, out_b, z_mu, z_logvar, z, bound }
    }

    /// Loss of a forward pass: reconstruction term plus KL term.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forwarded) -> LossParts {
        let kl = kl_term(tape, fwd.z_mu, fwd.z_logvar);
        let recon = match self.output {
            OutputKind::Gaussian => gaussian_nll(tape, fwd.x, fwd.out_a, fwd.out_b),
            OutputKind::Quantile { alpha_lo, alpha_hi } => {
                qrvae_reconstruction_loss(tape, fwd.x, fwd.out_a, fwd.out_b, alpha_lo, alpha_hi)
            }
        };
        let total = tape.add(recon, kl);
        LossParts { total, recon, kl }
    }

    /// Encoder only: posterior mean and log-variance of a batch.
    pub fn encode(&mut self, tape: &mut Tape, x: &Tensor, mode: Mode) -> (Var, Var) {
        let batch = x.shape()[0];
        let mut bound = Vec::new();
        let x_raw = tape.leaf(x);
        let x_in = if self.flatten_input {
            tape.reshape(x_raw, vec![batch, self.config.input_numel()])
        } else {
            x_raw
        };
        let h = self.encoder_trunk.forward(tape, x_in, mode, &mut bound);
        let mu = self.enc_head_mu.forward(tape, h, mode, &mut bound);
        let logvar = self.enc_head_logvar.forward(tape, h, mode, &mut bound);
        (mu, logvar)
    }

    /// Decoder only: head outputs for a batch of latent codes.
    pub fn decode(&mut self, tape: &mut Tape, z: &Tensor, mode: Mode) -> (Var, Var) {
        assert_eq!(z.shape()[1], self.config.latent_dim, "decode: latent dim mismatch");
        let mut bound = Vec::new();
        let zv = tape.leaf(z);
        let h = self.decoder_trunk.forward(tape, zv, mode, &mut bound);
        let out_a = self.dec_head_a.forward(tape, h, mode, &mut bound);
        let mut out_b = self.dec_head_b.forward(tape, h, mode, &mut bound);
        if self.output == OutputKind::Gaussian {
            let [lo, hi] = self.config.logvar_clamp;
            out_b = tape.clamp(out_b, lo, hi);
        }
        (out_a, out_b)
    }

    /// Mean predicted output scale on a batch: mean sigma for Gaussian
    /// heads, mean `Q_hi - Q_lo` for quantile heads. Deterministic
    /// (`eps = 0`), eval mode.
    pub fn sigma_stat(&mut self, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, None, Mode::Eval);
        match self.output {
            OutputKind::Gaussian => {
                let half = tape.mul_scalar(fwd.out_b, 0.5);
                let sigma = tape.exp(half);
                let m = tape.mean(sigma);
                tape.value(m)[0]
            }
            OutputKind::Quantile { .. } => {
                let width = tape.sub(fwd.out_b, fwd.out_a);
                let m = tape.mean(width);
                tape.value(m)[0]
            }
        }
    }
}

/// `z = mu + exp(0.5 * logvar) * eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = tape.mul_scalar(logvar, 0.5);
    let std = tape.exp(half);
    let scaled = tape.mul(std, eps);
    tape.add(mu, scaled)
}

/// KL divergence of `N(mu, sigma^2)` from the standard-normal prior,
/// summed over latent dimensions and averaged over the batch:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) / batch`.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let batch = tape.shape(mu)[0];
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let sum_terms = tape.add(mu2, var);
    let minus_one = tape.add_scalar(sum_terms, -1.0);
    let all = tape.sub(minus_one, logvar);
    let total = tape.sum(all);
    tape.mul_scalar(total, 0.5 / batch as f64)
}

/// Gaussian negative log-likelihood, summed over output dimensions and
/// averaged over the batch (the additive `0.5 log 2 pi` constant omitted):
/// `mean_batch sum_pixels [0.5 logvar + (x - mu)^2 / (2 sigma^2)]`.
pub fn gaussian_nll(tape: &mut Tape, x: Var, mu: Var, logvar: Var) -> Var {
    let batch = tape.shape(x)[0];
    let resid = tape.sub(x, mu);
    let resid2 = tape.square(resid);
    let neg_lv = tape.neg(logvar);
    let inv_var = tape.exp(neg_lv);
    let quad = tape.mul(resid2, inv_var);
    let half_quad = tape.mul_scalar(quad, 0.5);
    let half_lv = tape.mul_scalar(logvar, 0.5);
    let per_pixel = tape.add(half_lv, half_quad);
    let total = tape.sum(per_pixel);
    tape.mul_scalar(total, 1.0 / batch as f64)
}

/// Elementwise check function `rho_alpha(u) = max(alpha u, (alpha-1) u)`
/// with `u = y - y_hat`, built from relu so the kink subgradient is 0.
fn pinball_elementwise(tape: &mut Tape, y: Var, y_hat: Var, alpha: f64) -> Var {
    assert!(0.0 < alpha && alpha < 1.0, "pinball: alpha must lie in (0,1), got {alpha}");
    let u = tape.sub(y, y_hat);
    let pos = tape.relu(u);
    let neg_u = tape.neg(u);
    let neg = tape.relu(neg_u);
    let a = tape.mul_scalar(pos, alpha);
    let b = tape.mul_scalar(neg, 1.0 - alpha);
    tape.add(a, b)
}

/// Pinball (check) loss at level `alpha`, averaged over all elements. Its
/// minimizer over a constant predictor is the empirical `alpha`-quantile.
pub fn pinball_loss(tape: &mut Tape, y: Var, y_hat: Var, alpha: f64) -> Var {
    let rho = pinball_elementwise(tape, y, y_hat, alpha);
    tape.mean(rho)
}

/// QR-VAE reconstruction term: the two pinball losses summed over output
/// dimensions and averaged over the batch, matching the Gaussian NLL's
/// scaling so the KL weight means the same thing for both models.
pub fn qrvae_reconstruction_loss(
    tape: &mut Tape,
    x: Var,
    q_lo: Var,
    q_hi: Var,
    alpha_lo: f64,
    alpha_hi: f64,
) -> Var {
    assert!(alpha_lo < alpha_hi, "qrvae loss: alpha_lo must be below alpha_hi");
    let batch = tape.shape(x)[0];
    let rho_lo = pinball_elementwise(tape, x, q_lo, alpha_lo);
    let rho_hi = pinball_elementwise(tape, x, q_hi, alpha_hi);
    let both = tape.add(rho_lo, rho_hi);
    let total = tape.sum(both);
    tape.mul_scalar(total, 1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    fn moons_qrvae_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Qrvae,
            arch: ArchKind::Mlp,
            input_shape: vec![4],
            latent_dim: 2,
            hidden: 32,
            channels: vec![8, 16, 32],
            alphas: Some([0.15, 0.5]),
            head_activation: HeadActivation::Linear,
            logvar_clamp: [-7.0, 7.0],
        }
    }

    fn moons_vae_config() -> ModelConfig {
        ModelConfig { kind: ModelKind::Vae, alphas: None, ..moons_qrvae_config() }
    }

    #[test]
    fn reparameterize_zero_eps_returns_mu() {
        let mut tape = Tape::new();
        let mu = tape.leaf(&t(&[2, 2], &[0.3, -1.0, 2.0, 0.0]));
        let lv = tape.leaf(&t(&[2, 2], &[0.5, -0.5, 1.0, 0.0]));
        let eps = tape.leaf(&Tensor::zeros(vec![2, 2]));
        let z = reparameterize(&mut tape, mu, lv, eps);
        assert_eq!(tape.value(z), tape.value(mu));
    }

    #[test]
    fn reparameterize_unit_gaussian_passes_eps() {
        let mut tape = Tape::new();
        let mu = tape.leaf(&Tensor::zeros(vec![1, 3]));
        let lv = tape.leaf(&Tensor::zeros(vec![1, 3]));
        let e = t(&[1, 3], &[0.7, -0.2, 1.5]);
        let eps = tape.leaf(&e);
        let z = reparameterize(&mut tape, mu, lv, eps);
        assert_eq!(tape.value(z), e.data());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn reparameterize_logvar_gradient_matches_finite_differences() {
        let mu0 = t(&[1, 2], &[0.4, -0.6]);
        let lv0 = t(&[1, 2], &[0.3, -1.1]);
        let e0 = t(&[1, 2], &[0.9, 1.7]);
        let run = |lv: &Tensor| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mu = tape.leaf(&mu0);
            let lv_var = tape.leaf(lv);
            let eps = tape.leaf(&e0);
            let z = reparameterize(&mut tape, mu, lv_var, eps);
            let s = tape.sum(z);
            tape.backward(s);
            (tape.value(s)[0], tape.grad(lv_var).unwrap().to_vec())
        };
        let (_, analytic) = run(&lv0);
        let step = 1e-5;
        for i in 0..2 {
            let mut hi = lv0.clone();
            hi.data_mut()[i] += step;
            let mut lo = lv0.clone();
            lo.data_mut()[i] -= step;
            let numeric = (run(&hi).0 - run(&lo).0) / (2.0 * step);
            assert!((numeric - analytic[i]).abs() / numeric.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn kl_term_closed_form_values() {
        // posterior equal to the prior
        let mut tape = Tape::new();
        let mu = tape.leaf(&Tensor::zeros(vec![1, 1]));
        let lv = tape.leaf(&Tensor::zeros(vec![1, 1]));
        let kl = kl_term(&mut tape, mu, lv);
        assert!(tape.value(kl)[0].abs() < 1e-15);
        // mu=1, sigma^2=1 -> 0.5
        let mut tape = Tape::new();
        let mu = tape.leaf(&t(&[1, 1], &[1.0]));
        let lv = tape.leaf(&Tensor::zeros(vec![1, 1]));
        let kl = kl_term(&mut tape, mu, lv);
        assert!((tape.value(kl)[0] - 0.5).abs() < 1e-12);
        // mu=0, sigma^2=2 -> 0.5*(2-1-ln2), evaluated independently
        let expected = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        let mut tape = Tape::new();
        let mu = tape.leaf(&Tensor::zeros(vec![1, 1]));
        let lv = tape.leaf(&t(&[1, 1], &[2.0f64.ln()]));
        let kl = kl_term(&mut tape, mu, lv);
        assert!((tape.value(kl)[0] - expected).abs() < 1e-12);
        assert!((expected - 0.15342640972002733).abs() < 1e-15);
    }

    #[test]
    fn gaussian_nll_reference_points() {
        // x = mu, sigma = 1 -> 0
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[0.5, -0.5]));
        let mu = tape.leaf(&t(&[1, 2], &[0.5, -0.5]));
        let lv = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let nll = gaussian_nll(&mut tape, x, mu, lv);
        assert!(tape.value(nll)[0].abs() < 1e-15);
        // unit residual, sigma = 1 -> 0.5 per pixel
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let mu = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let lv = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let nll = gaussian_nll(&mut tape, x, mu, lv);
        assert!((tape.value(nll)[0] - 1.0).abs() < 1e-12); // 2 pixels * 0.5
    }

    #[test]
    fn gaussian_nll_minimized_at_true_variance() {
        // With a fixed residual of 1, scan logvar: the minimum of
        // 0.5*lv + 0.5*exp(-lv) sits at sigma^2 = 1 (lv = 0).
        let nll_at = |lv_val: f64| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[1, 1], &[1.0]));
            let mu = tape.leaf(&Tensor::zeros(vec![1, 1]));
            let lv = tape.leaf(&t(&[1, 1], &[lv_val]));
            let nll = gaussian_nll(&mut tape, x, mu, lv);
            tape.value(nll)[0]
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut lv = -3.0;
        while lv <= 3.0 {
            let v = nll_at(lv);
            if v < best.0 {
                best = (v, lv);
            }
            lv += 0.001;
        }
        assert!(best.1.abs() < 0.01, "minimum at logvar {}", best.1);
    }

    #[test]
    fn pinball_loss_branch_values() {
        let eval = |y: f64, yhat: f64, alpha: f64| -> f64 {
            let mut tape = Tape::new();
            let yv = tape.leaf(&t(&[1], &[y]));
            let yh = tape.leaf(&t(&[1], &[yhat]));
            let l = pinball_loss(&mut tape, yv, yh, alpha);
            tape.value(l)[0]
        };
        // alpha = 0.9: u = 1 -> 0.9 ; u = -1 -> 0.1
        assert!((eval(1.0, 0.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((eval(0.0, 1.0, 0.9) - 0.1).abs() < 1e-15);
        // alpha = 0.5 halves the absolute residual
        for u in [-2.0, -0.3, 0.0, 1.7] {
            assert!((eval(u, 0.0, 0.5) - 0.5 * u.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn pinball_minimizer_is_the_empirical_quantile() {
        // Brute-force scan over constant predictors on 1000 random draws:
        // the minimizer of the alpha=0.15 pinball loss is the empirical
        // 15th percentile.
        let mut rng = sub_rng(31, "pinball-q", 0);
        let draws: Vec<f64> = (0..1000).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let y = Tensor::new(vec![1000], draws.clone());
        let loss_at = |c: f64| -> f64 {
            let mut tape = Tape::new();
            let yv = tape.leaf(&y);
            let ch = tape.leaf(&Tensor::full(vec![1000], c));
            let l = pinball_loss(&mut tape, yv, ch, 0.15);
            tape.value(l)[0]
        };
        let mut best = (f64::INFINITY, f64::NAN);
        let mut c = -3.0;
        while c <= 5.0 {
            let v = loss_at(c);
            if v < best.0 {
                best = (v, c);
            }
            c += 0.002;
        }
        let mut sorted = draws;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let empirical_q15 = sorted[(0.15 * 1000.0) as usize];
        assert!(
            (best.1 - empirical_q15).abs() < 0.05,
            "minimizer {} vs empirical quantile {empirical_q15}",
            best.1
        );
    }

    #[test]
    fn qrvae_loss_zero_when_quantiles_hit_data() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let l = qrvae_reconstruction_loss(&mut tape, x, x, x, 0.15, 0.5);
        assert_eq!(tape.value(l)[0], 0.0);
    }

    #[test]
    fn qrvae_loss_is_convex_in_the_quantile_pair() {
        // midpoint inequality on random probes:
        // L((a+b)/2) <= (L(a) + L(b)) / 2
        let mut rng = sub_rng(32, "convex", 0);
        let x0 = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let loss_at = |qlo: &Tensor, qhi: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let lo = tape.leaf(qlo);
            let hi = tape.leaf(qhi);
            let l = qrvae_reconstruction_loss(&mut tape, x, lo, hi, 0.15, 0.5);
            tape.value(l)[0]
        };
        for _ in 0..25 {
            let a_lo = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
            let a_hi = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
            let b_lo = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
            let b_hi = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
            let mid_lo = Tensor::new(
                vec![4, 3],
                a_lo.data().iter().zip(b_lo.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
            );
            let mid_hi = Tensor::new(
                vec![4, 3],
                a_hi.data().iter().zip(b_hi.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
            );
            let lhs = loss_at(&mid_lo, &mid_hi);
            let rhs = 0.5 * (loss_at(&a_lo, &a_hi) + loss_at(&b_lo, &b_hi));
            assert!(lhs <= rhs + 1e-12, "convexity violated: {lhs} > {rhs}");
        }
    }

    #[test]
    fn nll_plus_kl_equals_negative_elbo_identity() {
        // Spot-check the algebra: for scalar x with residual r and variance
        // s2, NLL + KL matches the directly computed negative ELBO terms
        // (up to the omitted 0.5 log 2 pi constant).
        let (x_val, mu_val, lv_val) = (1.3, 0.4, -0.7);
        let (zmu, zlv) = (0.6, 0.2);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1], &[x_val]));
        let mu = tape.leaf(&t(&[1, 1], &[mu_val]));
        let lv = tape.leaf(&t(&[1, 1], &[lv_val]));
        let zm = tape.leaf(&t(&[1, 1], &[zmu]));
        let zl = tape.leaf(&t(&[1, 1], &[zlv]));
        let nll = gaussian_nll(&mut tape, x, mu, lv);
        let kl = kl_term(&mut tape, zm, zl);
        let total = tape.add(nll, kl);
        let direct_nll = 0.5 * lv_val + (x_val - mu_val).powi(2) / (2.0 * lv_val.exp());
        let direct_kl = 0.5 * (zmu * zmu + zlv.exp() - 1.0 - zlv);
        assert!((tape.value(total)[0] - (direct_nll + direct_kl)).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut model = VaeModel::build(&moons_qrvae_config(), 5).unwrap();
        let mut rng = sub_rng(33, "fwd", 0);
        let x = Tensor::rand_uniform(vec![7, 4], -2.0, 2.0, &mut rng);
        let eps = model.sample_eps(7, &mut sub_rng(33, "fwd-eps", 0));
        let run = |m: &mut VaeModel| -> (Vec<f64>, Vec<f64>, Vec<usize>, Vec<usize>) {
            let mut tape = Tape::new();
            let fwd = m.forward(&mut tape, &x, Some(&eps), Mode::Eval);
            (
                tape.value(fwd.out_a).to_vec(),
                tape.value(fwd.out_b).to_vec(),
                tape.shape(fwd.out_a).to_vec(),
                tape.shape(fwd.z).to_vec(),
            )
        };
        let (a1, b1, out_shape, z_shape) = run(&mut model);
        assert_eq!(out_shape, vec![7, 4]);
        assert_eq!(z_shape, vec![7, 2]);
        let (a2, b2, _, _) = run(&mut model);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn gaussian_logvar_head_is_clamped() {
        let mut cfg = moons_vae_config();
        cfg.logvar_clamp = [-2.0, 2.0];
        let mut model = VaeModel::build(&cfg, 1).unwrap();
        let x = Tensor::full(vec![3, 4], 50.0); // extreme input
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, None, Mode::Eval);
        for &v in tape.value(fwd.out_b) {
            assert!((-2.0..=2.0).contains(&v));
        }
    }

    #[test]
    fn shared_trunk_accumulates_gradients_from_both_heads() {
        // Gradient of the trunk under (loss_a + loss_b) equals the sum of
        // the gradients under each head's loss alone.
        let cfg = moons_qrvae_config();
        let mut rng = sub_rng(34, "two-head", 0);
        let x = Tensor::rand_uniform(vec![5, 4], -1.0, 1.0, &mut rng);
        let grad_trunk = |which: u8| -> Vec<f64> {
            let mut model = VaeModel::build(&cfg, 77).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, None, Mode::Eval);
            let la = tape.sum(fwd.out_a);
            let lb = tape.sum(fwd.out_b);
            let loss = match which {
                0 => la,
                1 => lb,
                _ => tape.add(la, lb),
            };
            tape.backward(loss);
            // first trunk weight tensor is bound[0]
            tape.grad(fwd.bound[0]).unwrap().to_vec()
        };
        let ga = grad_trunk(0);
        let gb = grad_trunk(1);
        let gboth = grad_trunk(2);
        for i in 0..ga.len() {
            assert!((gboth[i] - (ga[i] + gb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_model_round_trips_image_shapes() {
        let cfg = ModelConfig {
            kind: ModelKind::Qrvae,
            arch: ArchKind::Conv,
            input_shape: vec![1, 16, 16],
            latent_dim: 8,
            hidden: 0,
            channels: vec![4, 8, 8],
            alphas: Some([0.025, 0.975]),
            head_activation: HeadActivation::Sigmoid,
            logvar_clamp: [-7.0, 7.0],
        };
        let mut model = VaeModel::build(&cfg, 3).unwrap();
        let mut rng = sub_rng(35, "conv-model", 0);
        let x = Tensor::rand_uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, None, Mode::Train);
        assert_eq!(tape.shape(fwd.out_a), &[2, 1, 16, 16]);
        assert_eq!(tape.shape(fwd.out_b), &[2, 1, 16, 16]);
        // sigmoid heads stay in (0,1)
        assert!(tape.value(fwd.out_a).iter().all(|&v| (0.0..=1.0).contains(&v)));
        let parts = model.loss(&mut tape, &fwd);
        assert!(tape.value(parts.total)[0].is_finite());
        tape.backward(parts.total);
        for &v in &fwd.bound {
            assert!(tape.grad(v).is_some(), "parameter without gradient");
        }
    }
}
