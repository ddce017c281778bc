//! Optimization loop: Adam updates, per-epoch logging, NaN abort.
//!
//! Everything downstream of the seed is deterministic: batch order comes
//! from a per-epoch seeded shuffle, reparameterization noise from a
//! per-batch derived stream, and validation noise from streams keyed only
//! by batch index so validation losses are comparable across epochs. The
//! wall-time column is the one nondeterministic field of a [`TrainLog`];
//! [`TrainLog::deterministic_csv`] drops it for checksumming.

use std::path::Path;
use std::time::Instant;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::models::VaeModel;
use crate::nn::Mode;
use crate::rng::sub_rng;
use crate::Tape;

/// One row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean predicted sigma (Gaussian heads) or mean quantile-interval
    /// width (quantile heads) on the validation split.
    pub sigma_stat: f64,
    pub seconds: f64,
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Full CSV with the fixed column set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,sigma_stat,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.sigma_stat, r.seconds
            ));
        }
        out
    }

    /// CSV without the wall-time column; byte-identical across reruns of
    /// the same seed and config.
    pub fn deterministic_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,sigma_stat\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                r.epoch, r.train_loss, r.val_loss, r.sigma_stat
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn final_row(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Adaptive-moment estimation with bias-corrected first and second moments:
/// `step = lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(param_sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Apply one update; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &g), (mi, vi)) in
                param.data_mut().iter_mut().zip(grad).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss over a dataset split in eval mode, with reparameterization
/// noise drawn from streams keyed by batch index only (identical draws
/// every epoch, so the curve is comparable across epochs).
fn eval_loss(model: &mut VaeModel, items: &Tensor, batch_size: usize, seed: u64) -> f64 {
    let n = items.shape()[0];
    if n == 0 {
        return f64::NAN;
    }
    let row: usize = items.shape()[1..].iter().product();
    let mut total = 0.0;
    let mut batch_idx = 0u64;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let b = end - start;
        let mut shape = items.shape().to_vec();
        shape[0] = b;
        let x = Tensor::new(shape, items.data()[start * row..end * row].to_vec());
        let eps = model.sample_eps(b, &mut sub_rng(seed, "val-eps", batch_idx));
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, Some(&eps), Mode::Eval);
        let parts = model.loss(&mut tape, &fwd);
        total += tape.value(parts.total)[0] * b as f64;
        start = end;
        batch_idx += 1;
    }
    total / n as f64
}

/// Train `model` on the train split, logging one row per epoch.
///
/// Row 0 records the untrained model (its losses evaluated in eval mode);
/// rows `1..=epochs` follow each training epoch. Batches are shuffled per
/// epoch by a seeded RNG. Batches that would leave a single sample are
/// skipped only when the model contains batchnorm (which needs batch
/// statistics). A non-finite training loss aborts with the offending epoch
/// and batch. When the validation split is empty the validation columns are
/// computed on the training split instead.
pub fn train(model: &mut VaeModel, data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("train: empty training split".into()));
    }
    let n = data.train.len();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.eps_opt);
    let needs_pairs = model.has_batchnorm();
    let mut log = TrainLog::default();
    let mut lr = cfg.lr;
    {
        // Baseline row: the model before any update.
        let started = Instant::now();
        let val_items = if data.val.is_empty() { &data.train.items } else { &data.val.items };
        log.rows.push(LogRow {
            epoch: 0,
            train_loss: eval_loss(model, &data.train.items, cfg.batch_size, cfg.seed),
            val_loss: eval_loss(model, val_items, cfg.batch_size, cfg.seed),
            sigma_stat: model.sigma_stat(val_items),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = sub_rng(cfg.seed, "shuffle", epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if needs_pairs && chunk.len() < 2 {
                continue;
            }
            let x = data.train.gather(chunk);
            let eps_stream = (epoch - 1) as u64 * 1_000_003 + batch_idx as u64;
            let eps =
                model.sample_eps(chunk.len(), &mut sub_rng(cfg.seed, "eps", eps_stream));
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, Some(&eps), Mode::Train);
            let parts = model.loss(&mut tape, &fwd);
            let loss_val = tape.value(parts.total)[0];
            if !loss_val.is_finite() {
                return Err(Error::NanLoss { epoch, batch: batch_idx });
            }
            tape.backward(parts.total);
            let grads: Vec<Vec<f64>> = fwd
                .bound
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.numel(v)])
                })
                .collect();
            let mut params = model.params_mut();
            adam.step(&mut params, &grads, lr);
            epoch_loss += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_items =
            if data.val.is_empty() { &data.train.items } else { &data.val.items };
        let val_loss = eval_loss(model, val_items, cfg.batch_size, cfg.seed);
        let sigma_stat = model.sigma_stat(val_items);
        log.rows.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            sigma_stat,
            seconds: started.elapsed().as_secs_f64(),
        });
        lr *= cfg.lr_decay;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchKind, DataConfig, HeadActivation, ModelConfig, ModelKind};

    fn tiny_data(n_train: usize, n_val: usize) -> SplitDataset {
        let cfg = DataConfig::Moons {
            n_train,
            n_val,
            n_test: 0,
            seed: 41,
            noise_scale: 1.0,
        };
        cfg.load().unwrap()
    }

    fn qrvae_cfg() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Qrvae,
            arch: ArchKind::Mlp,
            input_shape: vec![4],
            latent_dim: 2,
            hidden: 24,
            channels: vec![4, 8, 8],
            alphas: Some([0.15, 0.5]),
            head_activation: HeadActivation::Linear,
            logvar_clamp: [-7.0, 7.0],
        }
    }

    fn train_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr,
            lr_decay: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 13,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = tiny_data(32, 8);
        let mut model = VaeModel::build(&qrvae_cfg(), 2).unwrap();
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        train(&mut model, &data, &train_cfg(3, 0.0)).unwrap();
        for (b, a) in before.iter().zip(model.params()) {
            assert_eq!(b.data(), a.data());
        }
    }

    #[test]
    fn single_sample_training_loss_decreases_initially() {
        // The per-epoch loss is stochastic in the reparameterization draw,
        // so this checks the desk-scale run at a learning rate where the
        // descent dominates that noise.
        let data = tiny_data(1, 0);
        let mut model = VaeModel::build(&qrvae_cfg(), 2).unwrap();
        let mut cfg = train_cfg(200, 5e-2);
        cfg.batch_size = 1;
        cfg.seed = 2;
        let log = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(log.rows.len(), 201);
        for w in log.rows[1..=10].windows(2) {
            assert!(
                w[1].train_loss < w[0].train_loss,
                "loss rose from {} to {} at epoch {}",
                w[0].train_loss,
                w[1].train_loss,
                w[1].epoch
            );
        }
    }

    #[test]
    fn same_seed_reproduces_the_log_bitwise() {
        let data = tiny_data(48, 12);
        let run = || {
            let mut model = VaeModel::build(&qrvae_cfg(), 4).unwrap();
            train(&mut model, &data, &train_cfg(5, 1e-3)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.deterministic_csv(), b.deterministic_csv());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.sigma_stat.to_bits(), rb.sigma_stat.to_bits());
        }
    }

    #[test]
    fn training_reduces_validation_loss_on_moons() {
        // The total loss converges to an irreducible floor (noise pinball
        // plus KL) around 60% of the untrained value; the bars below pin the
        // measured desk-scale behavior near that optimum.
        let data = tiny_data(128, 32);
        let mut model = VaeModel::build(&qrvae_cfg(), 5).unwrap();
        let mut cfg = train_cfg(400, 3e-3);
        cfg.lr_decay = 0.995;
        let log = train(&mut model, &data, &cfg).unwrap();
        let untrained_total = log.rows.first().unwrap().val_loss;
        let final_total = log.rows.last().unwrap().val_loss;
        assert!(
            final_total < 0.65 * untrained_total,
            "total validation loss only moved from {untrained_total} to {final_total}"
        );
        let recon_of = |m: &mut VaeModel| -> f64 {
            let eps = m.sample_eps(data.val.len(), &mut crate::rng::sub_rng(99, "recon", 0));
            let mut tape = Tape::new();
            let fwd = m.forward(&mut tape, &data.val.items, Some(&eps), Mode::Eval);
            let parts = m.loss(&mut tape, &fwd);
            tape.value(parts.recon)[0]
        };
        let mut untrained = VaeModel::build(&qrvae_cfg(), 5).unwrap();
        let recon_before = recon_of(&mut untrained);
        let recon_after = recon_of(&mut model);
        assert!(
            recon_after < 0.55 * recon_before,
            "reconstruction loss only moved from {recon_before} to {recon_after}"
        );
    }

    #[test]
    fn csv_has_fixed_columns() {
        let log = TrainLog {
            rows: vec![LogRow {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 2.5,
                sigma_stat: 0.25,
                seconds: 0.125,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,sigma_stat,seconds\n"));
        assert!(log.deterministic_csv().starts_with("epoch,train_loss,val_loss,sigma_stat\n"));
    }
}


#[cfg(test)]
mod detection_probe {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::config::{ArchKind, DataConfig, HeadActivation, ModelConfig, ModelKind};
    use crate::models::VaeModel;
    use crate::stats::{
        bh_fdr, median_filter, quantiles_to_gaussian, roc_auc, z_and_p, GaussianParams,
    };
    use crate::Tape;

    fn model_cfg(kind: ModelKind, alphas: Option<[f64; 2]>) -> ModelConfig {
        ModelConfig {
            kind,
            arch: ArchKind::Conv,
            input_shape: vec![1, 64, 64],
            latent_dim: 128,
            hidden: 0,
            channels: vec![8, 16, 32],
            alphas,
            head_activation: HeadActivation::Sigmoid,
            logvar_clamp: [-7.0, 7.0],
        }
    }

    fn reconstruct(model: &mut VaeModel, items: &Tensor) -> (Tensor, Tensor) {
        let n = items.shape()[0];
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 16).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let x = crate::data::gather_rows(items, &idx);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &x, None, crate::nn::Mode::Eval);
            a.extend_from_slice(tape.value(fwd.out_a));
            b.extend_from_slice(tape.value(fwd.out_b));
            start = end;
        }
        let shape = items.shape().to_vec();
        (Tensor::new(shape.clone(), a), Tensor::new(shape, b))
    }

    fn run_scenario(label: &str, n_train: usize, noise_gain: f64, epochs: usize, lr_decay: f64) {
        let data = DataConfig::Lesion {
            n_train,
            n_val: 24,
            n_test: 40,
            seed: 1,
            lesion_rate: 0.45,
            noise_gain,
        }
        .load()
        .unwrap();
        let tc = TrainConfig {
            epochs,
            batch_size: 32,
            lr: 1e-3,
            lr_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 7,
        };

        let mut qr =
            VaeModel::build(&model_cfg(ModelKind::Qrvae, Some([0.15, 0.5])), 11).unwrap();
        let qr_log = train(&mut qr, &data, &tc).unwrap();
        let mut vae = VaeModel::build(&model_cfg(ModelKind::Vae, None), 11).unwrap();
        let vae_log = train(&mut vae, &data, &tc).unwrap();

        for (name, log) in [("qrvae", &qr_log), ("vae", &vae_log)] {
            let min = log.rows.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
            let min_epoch = log
                .rows
                .iter()
                .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
                .unwrap()
                .epoch;
            let last = log.rows.last().unwrap();
            println!(
                "[{label}] {name}: val min {:.2}@{min_epoch} last {:.2} (+{:.2}% above min), sigma {:.4}",
                min,
                last.val_loss,
                100.0 * (last.val_loss - min) / min.abs().max(1e-9),
                last.sigma_stat
            );
        }

        let truth: Vec<bool> = data
            .test
            .masks
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .map(|&v| v > 0.0)
            .collect();
        let x = &data.test.items;
        let n = data.test.len();
        let per = 64 * 64;

        for which in ["qr", "vae"] {
            let (params, crossing) = if which == "qr" {
                let (qa, qb) = reconstruct(&mut qr, x);
                let m = quantiles_to_gaussian(&qb, &qa, 0.15, false).unwrap();
                (m.params, m.crossing_rate)
            } else {
                let (va, vb) = reconstruct(&mut vae, x);
                let sigma: Vec<f64> = vb.data().iter().map(|&lv| (0.5 * lv).exp()).collect();
                (
                    GaussianParams { mu: va, sigma: Tensor::new(vb.shape().to_vec(), sigma) },
                    0.0,
                )
            };
            let mean_sigma =
                params.sigma.data().iter().sum::<f64>() / params.sigma.numel() as f64;
            let det = z_and_p(x, &params);
            let thr = bh_fdr(det.p.data(), 0.05).unwrap();
            let mask: Vec<bool> = det.p.data().iter().map(|&p| p <= thr).collect();
            let detections = mask.iter().filter(|&&m| m).count();
            let fp = mask.iter().zip(&truth).filter(|(&m, &t)| m && !t).count();
            let tp = mask.iter().zip(&truth).filter(|(&m, &t)| m && t).count();
            let lesion_total = truth.iter().filter(|&&t| t).count();
            let mut scores = Vec::new();
            for i in 0..n {
                let abs_z: Vec<f64> =
                    det.z.data()[i * per..(i + 1) * per].iter().map(|&z| z.abs()).collect();
                scores.extend(median_filter(&abs_z, 64, 64, 7).unwrap());
            }
            println!(
                "[{label}] {which}: sigma {mean_sigma:.4} cross {crossing:.4} det {detections} fdr {:.3} tpr {:.3} auc_filt {:.4}",
                fp as f64 / detections.max(1) as f64,
                tp as f64 / lesion_total.max(1) as f64,
                roc_auc(&scores, &truth).unwrap()
            );
        }
    }

    #[test]
    #[ignore]
    fn probe_calibrated_detection() {
        run_scenario("cal", 112, 0.12, 220, 0.995);
    }

    #[test]
    #[ignore]
    fn probe_divergence_small_n() {
        run_scenario("ovf", 32, 0.12, 250, 1.0);
    }
}
