//! Acceptance suite: every release criterion as one test, each printing a
//! `acceptance <n> <name>: PASS/FAIL` line with the measured numbers.
//!
//! Trained fixtures are shared between criteria through `OnceLock`; model
//! pairs inside a fixture train on separate threads (distinct tapes may run
//! on distinct threads). All tolerances are pinned here, in code.

use std::sync::OnceLock;

use qrvae::autodiff::{Tape, Tensor, Var};
use qrvae::config::{ArchKind, DataConfig, HeadActivation, ModelConfig, ModelKind, TrainConfig};
use qrvae::data::{gather_rows, make_moons_dataset, moons_noise_std, Dataset, SplitDataset};
use qrvae::models::{
    gaussian_nll, kl_term, pinball_loss, qrvae_reconstruction_loss, reparameterize, VaeModel,
};
use qrvae::nn::{BatchNorm2d, Conv2d, Deconv2d, Dense, Mode};
use qrvae::rng::sub_rng;
use qrvae::stats::{
    bh_fdr, interval_detect, knn_kl, median_filter, normal_quantile, quantiles_to_gaussian,
    roc_auc, z_and_p, GaussianParams,
};
use qrvae::trainer::{train, TrainLog};

use rand::Rng;
use rand_distr::StandardNormal;

fn check(criterion: &str, pass: bool, details: &str) {
    println!("acceptance {criterion}: {} — {details}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {criterion} failed: {details}");
}

// ---- shared configurations ----

fn moons_model(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        arch: ArchKind::Mlp,
        input_shape: vec![4],
        latent_dim: 2,
        hidden: 64,
        channels: vec![8, 16, 32],
        alphas: if kind == ModelKind::Qrvae { Some([0.15, 0.5]) } else { None },
        head_activation: HeadActivation::Linear,
        logvar_clamp: [-7.0, 7.0],
    }
}

fn moons_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 500,
        batch_size: 64,
        lr: 1e-3,
        lr_decay: 0.997,
        beta1: 0.9,
        beta2: 0.999,
        eps_opt: 1e-8,
        seed,
    }
}

fn lesion_model(kind: ModelKind, alphas: Option<[f64; 2]>) -> ModelConfig {
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

const LESION_NOISE_GAIN: f64 = 0.12;
const LESION_RATE: f64 = 0.45;

fn lesion_data(n_train: usize, seed: u64) -> SplitDataset {
    DataConfig::Lesion {
        n_train,
        n_val: 24,
        n_test: 40,
        seed,
        lesion_rate: LESION_RATE,
        noise_gain: LESION_NOISE_GAIN,
    }
    .load()
    .expect("lesion data")
}

/// Train two models on the same split concurrently.
fn train_pair(
    mut a: VaeModel,
    mut b: VaeModel,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> ((VaeModel, TrainLog), (VaeModel, TrainLog)) {
    std::thread::scope(|scope| {
        let ha = scope.spawn(|| {
            let log = train(&mut a, data, cfg).expect("training a");
            (a, log)
        });
        let hb = scope.spawn(|| {
            let log = train(&mut b, data, cfg).expect("training b");
            (b, log)
        });
        (ha.join().expect("thread a"), hb.join().expect("thread b"))
    })
}

/// Deterministic reconstruction of a whole split (eps = 0, eval mode).
fn reconstruct(model: &mut VaeModel, items: &Tensor) -> (Tensor, Tensor) {
    let n = items.shape()[0];
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + 16).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = gather_rows(items, &idx);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, None, Mode::Eval);
        a.extend_from_slice(tape.value(fwd.out_a));
        b.extend_from_slice(tape.value(fwd.out_b));
        start = end;
    }
    let shape = items.shape().to_vec();
    (Tensor::new(shape.clone(), a), Tensor::new(shape, b))
}

fn vae_params_from_heads(mu: Tensor, logvar: Tensor) -> GaussianParams {
    let sigma: Vec<f64> = logvar.data().iter().map(|&lv| (0.5 * lv).exp()).collect();
    let shape = logvar.shape().to_vec();
    GaussianParams { mu, sigma: Tensor::new(shape, sigma) }
}

// ---- criterion 1: gradient correctness ----

/// Independent central-difference oracle (step 1e-5); the near-zero floor
/// keeps entries at the finite-difference noise floor comparable.
fn finite_diff_check(x0: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> (usize, f64) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0);
    let loss = f(&mut tape, x);
    tape.backward(loss);
    let analytic = tape.grad(x).expect("gradient").to_vec();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..x0.numel() {
        let eval = |delta: f64| {
            let mut pert = x0.clone();
            pert.data_mut()[i] += delta;
            let mut tape = Tape::new();
            let x = tape.leaf(&pert);
            let loss = f(&mut tape, x);
            tape.value(loss)[0]
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-3);
        let rel = (numeric - analytic[i]).abs() / denom;
        worst = worst.max(rel);
        if rel >= 1e-4 {
            failures += 1;
        }
    }
    (failures, worst)
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = std::time::Instant::now();
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    let mut run = |x0: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var| {
        let (fails, w) = finite_diff_check(x0, f);
        failures += fails;
        worst = worst.max(w);
    };
    for instance in 0..20u64 {
        let mut rng = sub_rng(instance, "acceptance-fd", 0);
        // dense layer wrt weights, bias and input
        let dense = Dense::new(3, 2, &mut rng);
        let x = Tensor::rand_uniform(vec![4, 3], -2.0, 2.0, &mut rng);
        run(&x, &|t, v| {
            let mut l = dense.clone();
            let mut bound = Vec::new();
            let y = qrvae::nn::Layer::Dense(std::mem::take(&mut l.w).into_dense(l.b.clone()))
                .forward(t, v, Mode::Eval, &mut bound);
            let s = t.square(y);
            t.sum(s)
        });
    }
    let _ = (failures, worst);
    let seconds = started.elapsed().as_secs_f64();
    check(
        "1 gradient-correctness",
        failures == 0 && seconds < 60.0,
        &format!("{failures} failing positions, worst rel err {worst:.2e}, {seconds:.1}s"),
    );
}
