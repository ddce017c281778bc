//! The five subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::Rng;
use rand_distr::StandardNormal;

use qrvae::autodiff::{Tape, Tensor};
use qrvae::checkpoint::{load_checkpoint, save_checkpoint};
use qrvae::config::{file_sha256, hex_digest, DataConfig, ExperimentConfig, ModelKind};
use qrvae::data::make_moons_dataset;
use qrvae::models::VaeModel;
use qrvae::nn::Mode;
use qrvae::rng::sub_rng;
use qrvae::stats::{
    bh_fdr, gaussian_from_quantile_pair, interval_detect, median_filter, roc_auc,
    write_mask_pgm, z_and_p, GaussianParams, Kde,
};
use qrvae::trainer;

use crate::artifacts::{write_csv, write_metrics, Manifest};
use crate::{DetectMode, ZSource};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

// ---- simulate ----

pub fn simulate(n: usize, seed: u64, noise_scale: f64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    ensure_dir(out)?;
    let moons = make_moons_dataset(n, seed, noise_scale);
    let latent_rows: Vec<Vec<f64>> = moons.latent.iter().map(|z| z.to_vec()).collect();
    write_csv(&out.join("latent.csv"), "z1,z2", &latent_rows)?;
    let observed_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| moons.observed.data()[i * 4..(i + 1) * 4].to_vec())
        .collect();
    write_csv(&out.join("observed.csv"), "v1,v2,v3,v4", &observed_rows)?;
    let mut manifest = Manifest::new("moons-simulate", seed);
    manifest.insert("n", n);
    manifest.insert("noise_scale", noise_scale);
    manifest.add_file(out, "latent.csv")?;
    manifest.add_file(out, "observed.csv")?;
    manifest.write(out)?;
    println!("wrote {} samples to {}", n, out.display());
    Ok(())
}

// ---- train ----

pub fn train(model_kind: Option<&str>, data: &Path, config: &Path, out: &Path) -> Result<()> {
    let mut experiment = ExperimentConfig::from_path(config)?;
    if let Some(kind) = model_kind {
        experiment.model.kind = kind.parse::<ModelKind>()?;
        if experiment.model.kind == ModelKind::Vae {
            experiment.model.alphas = None;
        }
        experiment.model.validate()?;
    }
    let data_cfg = DataConfig::from_path(data)?;
    let split = data_cfg.load()?;
    if split.train.item_shape() != experiment.model.input_shape.as_slice() {
        bail!(
            "model/data dim mismatch: model expects {:?}, dataset items are {:?}",
            experiment.model.input_shape,
            split.train.item_shape()
        );
    }
    ensure_dir(out)?;
    let config_hash = combined_hash(config, data)?;
    let mut model = VaeModel::build(&experiment.model, experiment.train.seed)?;
    // In debug builds a non-finite value panics at the producing op (the
    // per-op debug check) before the trainer's graceful abort can run; map
    // that panic onto the same numeric-failure exit path.
    let trained = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        trainer::train(&mut model, &split, &experiment.train)
    }));
    let log = match trained {
        Ok(result) => result?,
        Err(payload) => {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            if message.contains("non-finite") {
                return Err(qrvae::Error::NanLoss { epoch: 0, batch: 0 }.into());
            }
            std::panic::resume_unwind(payload);
        }
    };
    save_checkpoint(&model, &config_hash, &out.join("checkpoint.ckpt"))?;
    log.write_csv(&out.join("train_log.csv"))?;
    let mut manifest = Manifest::new(&format!("train-{}", experiment.model.kind), experiment.train.seed);
    manifest.insert("model", experiment.model.kind);
    manifest.insert("config", config.display());
    manifest.insert("config_sha256", file_sha256(config)?);
    manifest.insert("data", data.display());
    manifest.insert("data_sha256", file_sha256(data)?);
    manifest.insert("config_hash", &config_hash);
    manifest.add_file(out, "checkpoint.ckpt")?;
    // the log's checksum covers only its deterministic columns
    manifest.add_content("train_log.csv", &log.deterministic_csv());
    manifest.write(out)?;
    let last = log.final_row().expect("at least the baseline row");
    println!(
        "trained {} for {} epochs: train {:.4}, val {:.4}, sigma-stat {:.4}",
        experiment.model.kind, experiment.train.epochs, last.train_loss, last.val_loss, last.sigma_stat
    );
    Ok(())
}

/// One provenance hash covering both the experiment and dataset configs.
fn combined_hash(config: &Path, data: &Path) -> Result<String> {
    let mut bytes = std::fs::read(config)
        .with_context(|| format!("reading {}", config.display()))?;
    bytes.extend(std::fs::read(data).with_context(|| format!("reading {}", data.display()))?);
    Ok(hex_digest(&bytes))
}

// ---- eval-kl ----

/// Per-pixel Gaussian parameters for a batch of decoded latents.
fn decode_to_gaussian(model: &mut VaeModel, z: &Tensor) -> Result<GaussianParams> {
    let mut tape = Tape::new();
    let (out_a, out_b) = model.decode(&mut tape, z, Mode::Eval);
    match model.alphas() {
        None => {
            let mu = tape.to_tensor(out_a);
            let sigma_data: Vec<f64> =
                tape.value(out_b).iter().map(|&lv| (0.5 * lv).exp()).collect();
            let shape = mu.shape().to_vec();
            Ok(GaussianParams { mu, sigma: Tensor::new(shape, sigma_data) })
        }
        Some([alpha_lo, alpha_hi]) => {
            let q_lo = tape.to_tensor(out_a);
            let q_hi = tape.to_tensor(out_b);
            let mapping = gaussian_from_quantile_pair(&q_lo, &q_hi, alpha_lo, alpha_hi)?;
            Ok(mapping.params)
        }
    }
}

pub fn eval_kl(
    checkpoint: &Path,
    data: &Path,
    n_samples: usize,
    z_source: ZSource,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if n_samples == 0 {
        bail!("--n-samples must be at least 1");
    }
    let (mut model, manifest_ck) = load_checkpoint(checkpoint)?;
    let data_cfg = DataConfig::from_path(data)?;
    let split = data_cfg.load()?;
    let inputs = &split.train;
    if inputs.item_shape() != model.config.input_shape.as_slice() {
        bail!(
            "model/data dim mismatch: model expects {:?}, dataset items are {:?}",
            model.config.input_shape,
            inputs.item_shape()
        );
    }
    if inputs.item_shape().len() != 1 {
        bail!("eval-kl expects a vector dataset (the moons simulation)");
    }
    let dim = inputs.item_shape()[0];
    ensure_dir(out)?;

    // Generate samples: z per --z-source, then x ~ N(mu, sigma) per pixel.
    let latent = model.latent_dim();
    let mut rng = sub_rng(seed, "eval-kl", 0);
    let mut generated = Vec::with_capacity(n_samples * dim);
    let mut produced = 0usize;
    while produced < n_samples {
        let b = 64.min(n_samples - produced);
        let z = match z_source {
            ZSource::Prior => Tensor::randn(vec![b, latent], &mut rng),
            ZSource::Encode => {
                // encode a random slice of the inputs, then draw from the
                // posterior
                let indices: Vec<usize> =
                    (0..b).map(|_| rng.gen_range(0..inputs.len())).collect();
                let x = inputs.gather(&indices);
                let mut tape = Tape::new();
                let (mu, logvar) = model.encode(&mut tape, &x, Mode::Eval);
                let mu = tape.value(mu);
                let lv = tape.value(logvar);
                let data: Vec<f64> = mu
                    .iter()
                    .zip(lv)
                    .map(|(&m, &l)| {
                        m + (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                Tensor::new(vec![b, latent], data)
            }
        };
        let params = decode_to_gaussian(&mut model, &z)?;
        for (m, s) in params.mu.data().iter().zip(params.sigma.data()) {
            generated.push(m + s * rng.sample::<f64, _>(StandardNormal));
        }
        produced += b;
    }
    let generated = Tensor::new(vec![n_samples, dim], generated);

    // KL estimates: input vs generated, plus a same-distribution baseline
    // from interleaved halves of the inputs (the generator orders points
    // arc by arc, so contiguous halves would be different distributions).
    let est = qrvae::stats::knn_kl(&inputs.items, &generated, 1)?;
    let evens: Vec<usize> = (0..inputs.len()).step_by(2).collect();
    let odds: Vec<usize> = (1..inputs.len()).step_by(2).collect();
    let baseline = if evens.len() > 1 && odds.len() > 1 {
        Some(qrvae::stats::knn_kl(
            &inputs.gather(&evens),
            &inputs.gather(&odds),
            1,
        )?)
    } else {
        None
    };
    let mut metrics = vec![
        ("kl_nats".to_string(), est.nats),
        ("kl_duplicate_floors".to_string(), est.duplicate_floors as f64),
        ("n_samples".to_string(), n_samples as f64),
    ];
    if let Some(b) = baseline {
        metrics.push(("kl_self_baseline_nats".to_string(), b.nats));
    }
    write_metrics(&out.join("kl_report.csv"), &metrics)?;

    // KDE grids over the pairwise dimensions of the Fig-1-style plots.
    for (name, (i, j)) in [("v1v2", (0usize, 1usize)), ("v2v3", (1, 2))] {
        if j >= dim {
            continue;
        }
        let pick = |items: &Tensor| -> Tensor {
            let n = items.shape()[0];
            let mut data = Vec::with_capacity(n * 2);
            for r in 0..n {
                data.push(items.data()[r * dim + i]);
                data.push(items.data()[r * dim + j]);
            }
            Tensor::new(vec![n, 2], data)
        };
        let input_pairs = pick(&inputs.items);
        let model_pairs = pick(&generated);
        let bounds = |t: &Tensor, col: usize| -> (f64, f64) {
            let vals = t.data().iter().skip(col).step_by(2);
            let lo = vals.clone().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.cloned().fold(f64::NEG_INFINITY, f64::max);
            let margin = 0.1 * (hi - lo).max(1e-6);
            (lo - margin, hi + margin)
        };
        let (x_lo, x_hi) = bounds(&input_pairs, 0);
        let (y_lo, y_hi) = bounds(&input_pairs, 1);
        for (set, pairs) in [("input", &input_pairs), ("model", &model_pairs)] {
            let kde = Kde::scott(pairs)?;
            let steps = 60;
            let mut rows = Vec::with_capacity(steps * steps);
            for yi in 0..steps {
                let y = y_lo + (y_hi - y_lo) * yi as f64 / (steps - 1) as f64;
                for xi in 0..steps {
                    let x = x_lo + (x_hi - x_lo) * xi as f64 / (steps - 1) as f64;
                    rows.push(vec![x, y, kde.density(&[x, y])]);
                }
            }
            write_csv(&out.join(format!("kde_{set}_{name}.csv")), "x,y,density", &rows)?;
        }
    }

    let mut manifest = Manifest::new("eval-kl", seed);
    manifest.insert("checkpoint", checkpoint.display());
    manifest.insert("checkpoint_config_hash", &manifest_ck.config_hash);
    manifest.insert("model", manifest_ck.model.kind);
    manifest.insert("z_source", format!("{z_source:?}").to_lowercase());
    manifest.insert("n_samples", n_samples);
    manifest.add_file(out, "kl_report.csv")?;
    for name in ["kde_input_v1v2.csv", "kde_model_v1v2.csv", "kde_input_v2v3.csv", "kde_model_v2v3.csv"]
    {
        if out.join(name).exists() {
            manifest.add_file(out, name)?;
        }
    }
    manifest.write(out)?;
    println!("KL(input || generated) = {:.4} nats over {n_samples} samples", est.nats);
    Ok(())
}

// ---- detect ----

pub fn detect(
    checkpoint: &Path,
    data: &Path,
    mode: DetectMode,
    q: f64,
    paper_approx: bool,
    out: &Path,
) -> Result<()> {
    let (mut model, manifest_ck) = load_checkpoint(checkpoint)?;
    match (mode, model.alphas()) {
        (DetectMode::Interval, Some([lo, hi])) => {
            if (lo - 0.025).abs() > 1e-9 || (hi - 0.975).abs() > 1e-9 {
                bail!(
                    "incompatible checkpoint: interval mode needs alphas [0.025, 0.975], \
                     manifest has [{lo}, {hi}]"
                );
            }
        }
        (DetectMode::Interval, None) => {
            bail!("incompatible checkpoint: interval mode needs a quantile model")
        }
        (DetectMode::Fdr, Some([lo, hi])) => {
            if (lo - 0.15).abs() > 1e-9 || (hi - 0.5).abs() > 1e-9 {
                bail!(
                    "incompatible checkpoint: fdr mode needs alphas [0.15, 0.5] (or a \
                     Gaussian model), manifest has [{lo}, {hi}]"
                );
            }
        }
        (DetectMode::Fdr, None) => {}
    }
    let data_cfg = DataConfig::from_path(data)?;
    let split = data_cfg.load()?;
    let test = if split.test.is_empty() { &split.val } else { &split.test };
    if test.is_empty() {
        bail!("dataset has no test or validation split to detect on");
    }
    if test.item_shape() != model.config.input_shape.as_slice() {
        bail!(
            "model/data dim mismatch: model expects {:?}, dataset items are {:?}",
            model.config.input_shape,
            test.item_shape()
        );
    }
    ensure_dir(out)?;
    let item_shape = test.item_shape().to_vec();
    let (h, w) = match item_shape.as_slice() {
        [_, h, w] => (*h, *w),
        [d] => (1usize, *d),
        other => bail!("unsupported item shape {other:?}"),
    };
    let per = h * w * if item_shape.len() == 3 { item_shape[0] } else { 1 };
    let n = test.len();

    // Deterministic reconstruction (eps = 0) of the whole split, batched.
    let mut out_a = Vec::with_capacity(n * per);
    let mut out_b = Vec::with_capacity(n * per);
    let mut start = 0usize;
    while start < n {
        let end = (start + 16).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = test.gather(&idx);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &x, None, Mode::Eval);
        out_a.extend_from_slice(tape.value(fwd.out_a));
        out_b.extend_from_slice(tape.value(fwd.out_b));
        start = end;
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(&item_shape);
    let out_a = Tensor::new(full_shape.clone(), out_a);
    let out_b = Tensor::new(full_shape.clone(), out_b);
    let x_all = &test.items;

    let truth: Option<Vec<bool>> =
        test.masks.as_ref().map(|m| m.data().iter().map(|&v| v > 0.0).collect());
    let mut metrics: Vec<(String, f64)> = Vec::new();
    let mask: Vec<bool>;
    match mode {
        DetectMode::Interval => {
            mask = interval_detect(x_all, &out_a, &out_b);
            let flagged = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            metrics.push(("flagged_fraction".into(), flagged));
            if let Some(t) = &truth {
                let clean_flagged = mask
                    .iter()
                    .zip(t)
                    .filter(|(_, &is_lesion)| !is_lesion)
                    .filter(|(&m, _)| m)
                    .count() as f64;
                let clean_total = t.iter().filter(|&&l| !l).count() as f64;
                metrics.push(("clean_pixel_flag_rate".into(), clean_flagged / clean_total));
            }
        }
        DetectMode::Fdr => {
            let (params, crossing_rate) = match model.alphas() {
                None => {
                    let mu = out_a.clone();
                    let sigma_data: Vec<f64> =
                        out_b.data().iter().map(|&lv| (0.5 * lv).exp()).collect();
                    (
                        GaussianParams {
                            mu,
                            sigma: Tensor::new(full_shape.clone(), sigma_data),
                        },
                        0.0,
                    )
                }
                Some([alpha_lo, _]) => {
                    let mapping = qrvae::stats::quantiles_to_gaussian(
                        &out_b,
                        &out_a,
                        alpha_lo,
                        paper_approx,
                    )?;
                    (mapping.params, mapping.crossing_rate)
                }
            };
            let mut det = z_and_p(x_all, &params);
            let threshold = bh_fdr(det.p.data(), q)?;
            det.apply_threshold(threshold);
            mask = det.mask.clone().expect("threshold applied");
            metrics.push(("bh_threshold".into(), threshold));
            metrics.push(("crossing_rate".into(), crossing_rate));
            let flagged = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            metrics.push(("flagged_fraction".into(), flagged));
            // per-image z and p maps
            for i in 0..n {
                let z_rows: Vec<Vec<f64>> = (0..h)
                    .map(|r| det.z.data()[(i * h + r) * w..(i * h + r) * w + w].to_vec())
                    .collect();
                write_csv(&out.join(format!("z_map_{i:03}.csv")), &csv_header(w), &z_rows)?;
                let p_rows: Vec<Vec<f64>> = (0..h)
                    .map(|r| det.p.data()[(i * h + r) * w..(i * h + r) * w + w].to_vec())
                    .collect();
                write_csv(&out.join(format!("p_map_{i:03}.csv")), &csv_header(w), &p_rows)?;
            }
            if let Some(t) = &truth {
                let detections = mask.iter().filter(|&&m| m).count();
                let false_pos =
                    mask.iter().zip(t).filter(|(&m, &l)| m && !l).count();
                let true_pos = mask.iter().zip(t).filter(|(&m, &l)| m && l).count();
                let lesion_total = t.iter().filter(|&&l| l).count();
                metrics.push((
                    "empirical_fdr".into(),
                    if detections > 0 { false_pos as f64 / detections as f64 } else { 0.0 },
                ));
                metrics.push((
                    "tpr".into(),
                    if lesion_total > 0 { true_pos as f64 / lesion_total as f64 } else { 0.0 },
                ));
                // AUC over median-filtered |z| scores, pooled across images
                let mut scores = Vec::with_capacity(n * h * w);
                for i in 0..n {
                    let abs_z: Vec<f64> = det.z.data()[i * per..(i + 1) * per]
                        .iter()
                        .map(|&z| z.abs())
                        .collect();
                    scores.extend(median_filter(&abs_z, h, w, 7)?);
                }
                metrics.push(("auc_median_filtered".into(), roc_auc(&scores, t)?));
                let raw: Vec<f64> = det.z.data().iter().map(|&z| z.abs()).collect();
                metrics.push(("auc_raw".into(), roc_auc(&raw, t)?));
            }
        }
    }
    // per-image masks
    for i in 0..n {
        write_mask_pgm(
            &out.join(format!("mask_{i:03}.pgm")),
            &mask[i * per..(i + 1) * per],
            h,
            w,
        )?;
    }
    write_metrics(&out.join("metrics.csv"), &metrics)?;
    let mut manifest = Manifest::new("detect", 0);
    manifest.insert("checkpoint", checkpoint.display());
    manifest.insert("checkpoint_config_hash", &manifest_ck.config_hash);
    manifest.insert("mode", format!("{mode:?}").to_lowercase());
    manifest.insert("q", q);
    manifest.insert("paper_approx", paper_approx);
    manifest.add_file(out, "metrics.csv")?;
    manifest.write(out)?;
    for (name, value) in &metrics {
        println!("{name} = {value:.4}");
    }
    Ok(())
}

fn csv_header(w: usize) -> String {
    (0..w).map(|c| format!("c{c}")).collect::<Vec<_>>().join(",")
}

// ---- report ----

pub fn report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut found = Vec::new();
    collect_artifacts(dir, dir, &mut found)?;
    if found.is_empty() {
        bail!(
            "no experiment artifacts under {} (expected metrics.csv, kl_report.csv, \
             train_log.csv or manifest.txt in run directories)",
            dir.display()
        );
    }
    let mut rows: Vec<String> = Vec::new();
    for (rel, kind) in &found {
        let path = dir.join(rel);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        match kind {
            ArtifactKind::Metrics => {
                for line in text.lines().skip(1) {
                    if let Some((metric, value)) = line.split_once(',') {
                        rows.push(format!("{rel},{metric},{value}"));
                    }
                }
            }
            ArtifactKind::TrainLog => {
                let data_rows: Vec<Vec<f64>> = text
                    .lines()
                    .skip(1)
                    .map(|l| {
                        l.split(',')
                            .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
                            .collect()
                    })
                    .collect();
                if let Some(last) = data_rows.last() {
                    rows.push(format!("{rel},final_train_loss,{:e}", last[1]));
                    rows.push(format!("{rel},final_val_loss,{:e}", last[2]));
                    rows.push(format!("{rel},final_sigma_stat,{:e}", last[3]));
                }
                if let Some(min_val) = data_rows
                    .iter()
                    .map(|r| r[2])
                    .filter(|v| v.is_finite())
                    .min_by(|a, b| a.partial_cmp(b).unwrap())
                {
                    rows.push(format!("{rel},min_val_loss,{min_val:e}"));
                }
            }
            ArtifactKind::ManifestFile => {
                for line in text.lines() {
                    if let Some(hash) = line.strip_prefix("config_hash=") {
                        rows.push(format!("{rel},config_hash,{hash}"));
                    }
                }
            }
        }
    }
    rows.sort();
    let mut summary = String::from("source,metric,value\n");
    for row in &rows {
        summary.push_str(row);
        summary.push('\n');
    }
    std::fs::write(dir.join("summary.csv"), &summary).context("writing summary.csv")?;
    println!("summary.csv: {} rows from {} artifacts", rows.len(), found.len());
    Ok(())
}

enum ArtifactKind {
    Metrics,
    TrainLog,
    ManifestFile,
}

fn collect_artifacts(
    root: &Path,
    dir: &Path,
    found: &mut Vec<(String, ArtifactKind)>,
) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_artifacts(root, &path, found)?;
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .expect("child of root")
            .to_string_lossy()
            .into_owned();
        match path.file_name().and_then(|n| n.to_str()) {
            Some("metrics.csv") | Some("kl_report.csv") => {
                found.push((rel, ArtifactKind::Metrics));
            }
            Some("train_log.csv") => found.push((rel, ArtifactKind::TrainLog)),
            Some("manifest.txt") => found.push((rel, ArtifactKind::ManifestFile)),
            _ => {}
        }
    }
    Ok(())
}
