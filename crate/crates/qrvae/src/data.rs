//! Dataset generation, parsing and synthesis.
//!
//! Three sources feed the experiments:
//! - a two-moons latent simulation mapped to four observed dimensions with
//!   heteroscedastic noise,
//! - IDX image files (the Fashion-MNIST container format),
//! - a synthetic lesion benchmark: smooth blob "anatomy" images with
//!   optional bright elliptical lesions and exact ground-truth masks.
//!
//! Generators are pure functions of their seed, so datasets never need to
//! be stored to be reproduced.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::sub_rng;

/// A named collection of samples: a feature matrix `[N, D]` or an image
/// stack `[N, C, H, W]`, plus optional labels and ground-truth masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Tensor,
    pub labels: Option<Vec<u8>>,
    /// Binary lesion masks `[N, H, W]` (1.0 inside a lesion).
    pub masks: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.items.shape().is_empty() {
            0
        } else {
            self.items.shape()[0]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of a single item (without the leading N).
    pub fn item_shape(&self) -> &[usize] {
        &self.items.shape()[1..]
    }

    /// Gather rows by index into a new `[len(idx), ...]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        gather_rows(&self.items, indices)
    }

    /// Subset of the dataset (items, labels, masks) by row indices.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            items: gather_rows(&self.items, indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            masks: self.masks.as_ref().map(|m| gather_rows(m, indices)),
        }
    }
}

/// Copy rows `indices` of a `[N, ...]` tensor into a new tensor.
pub fn gather_rows(items: &Tensor, indices: &[usize]) -> Tensor {
    let shape = items.shape();
    let row: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&items.data()[i * row..(i + 1) * row]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = indices.len();
    Tensor::new(out_shape, data)
}

// ---- two moons ----

/// Two interleaving half-circles: the upper arc `(cos t, sin t)` and the
/// lower arc `(1 - cos t, 0.5 - sin t)` with `t` evenly spaced over
/// `[0, pi]`, `n` split evenly between arcs (upper arc gets the remainder),
/// plus Gaussian jitter on both coordinates.
pub fn two_moons_with_jitter(n: usize, seed: u64, jitter_sigma: f64) -> Vec<[f64; 2]> {
    assert!(n >= 1, "two_moons: need n >= 1");
    let n_upper = n - n / 2;
    let n_lower = n / 2;
    let mut rng = sub_rng(seed, "moons-jitter", 0);
    let mut points = Vec::with_capacity(n);
    let spread = |count: usize, i: usize| -> f64 {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_upper {
        let t = spread(n_upper, i);
        let (mut x, mut y) = (t.cos(), t.sin());
        if jitter_sigma > 0.0 {
            x += jitter_sigma * rng.sample::<f64, _>(StandardNormal);
            y += jitter_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        points.push([x, y]);
    }
    for i in 0..n_lower {
        let t = spread(n_lower, i);
        let (mut x, mut y) = (1.0 - t.cos(), 0.5 - t.sin());
        if jitter_sigma > 0.0 {
            x += jitter_sigma * rng.sample::<f64, _>(StandardNormal);
            y += jitter_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        points.push([x, y]);
    }
    points
}

/// Two-moons latent points with the standard jitter of 0.1.
pub fn generate_two_moons(n: usize, seed: u64) -> Vec<[f64; 2]> {
    two_moons_with_jitter(n, seed, 0.1)
}

/// Noise standard deviation of each observed dimension at latent `z`.
/// The radicals read the latent coordinate's magnitude `|z1|`.
pub fn moons_noise_std(z1: f64) -> [f64; 4] {
    let a = z1.abs();
    [
        (0.03 + 0.05 * (3.0 + z1)).sqrt(),
        (0.03 + 0.03 * a).sqrt(),
        (0.03 + 0.05 * a).sqrt(),
        (0.03 + 0.03 / (0.02 + a)).sqrt(),
    ]
}

/// Map a latent point to the four observed dimensions given one noise draw
/// per dimension:
///
/// ```text
/// v1 = z1 - z2     + e1 sqrt(0.03 + 0.05 (3 + z1))
/// v2 = z1^2 - z2/2 + e2 sqrt(0.03 + 0.03 |z1|)
/// v3 = z1 z2 - z1  + e3 sqrt(0.03 + 0.05 |z1|)
/// v4 = z1 + z2     + e4 sqrt(0.03 + 0.03 / (0.02 + |z1|))
/// ```
///
/// Fails when a radicand is negative (only possible for `z1 < -3.6`,
/// far outside the two-moons support); such samples are rejected.
pub fn moons_to_4d(z: [f64; 2], eps: [f64; 4]) -> Result<[f64; 4]> {
    let [z1, z2] = z;
    let first_radicand = 0.03 + 0.05 * (3.0 + z1);
    if first_radicand < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "moons_to_4d: negative radicand at z1 = {z1}; sample rejected"
        )));
    }
    let std = moons_noise_std(z1);
    Ok([
        z1 - z2 + eps[0] * std[0],
        z1 * z1 - 0.5 * z2 + eps[1] * std[1],
        z1 * z2 - z1 + eps[2] * std[2],
        z1 + z2 + eps[3] * std[3],
    ])
}

/// A fully materialized moons dataset: latents, observations and the noise
/// draws that produced them.
#[derive(Clone, Debug)]
pub struct MoonsData {
    pub latent: Vec<[f64; 2]>,
    /// Observed samples `[n, 4]`.
    pub observed: Tensor,
    pub noise: Vec<[f64; 4]>,
}

/// Generate `n` observed 4-D samples. `noise_scale` multiplies the noise
/// draws (1.0 reproduces the generative model; 0.01 yields the near-
/// noiseless variant used to expose variance shrinkage).
pub fn make_moons_dataset(n: usize, seed: u64, noise_scale: f64) -> MoonsData {
    let latent = generate_two_moons(n, seed);
    let mut rng = sub_rng(seed, "moons-noise", 1);
    let mut observed = Vec::with_capacity(n * 4);
    let mut noise = Vec::with_capacity(n);
    for &z in &latent {
        let eps = [
            noise_scale * rng.sample::<f64, _>(StandardNormal),
            noise_scale * rng.sample::<f64, _>(StandardNormal),
            noise_scale * rng.sample::<f64, _>(StandardNormal),
            noise_scale * rng.sample::<f64, _>(StandardNormal),
        ];
        let v = moons_to_4d(z, eps).expect("two-moons latents stay inside the valid domain");
        observed.extend_from_slice(&v);
        noise.push(eps);
    }
    MoonsData { latent, observed: Tensor::new(vec![n, 4], observed), noise }
}

// ---- IDX files ----

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, format!("truncated header at byte {offset}")))
}

/// Parse an IDX image file (big-endian magic 0x00000803, then N/rows/cols
/// and raw bytes) into a `[N, 1, rows, cols]` tensor scaled to `[0, 1]`.
pub fn parse_idx_images(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    let magic = read_u32_be(&bytes, 0, &display)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            &display,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&bytes, 4, &display)? as usize;
    let rows = read_u32_be(&bytes, 8, &display)? as usize;
    let cols = read_u32_be(&bytes, 12, &display)? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(&display, "dimension overflow"))?;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::parse(
            &display,
            format!("expected {expected} pixel bytes, found {}", payload.len()),
        ));
    }
    let data: Vec<f64> = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;
    let magic = read_u32_be(&bytes, 0, &display)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            &display,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&bytes, 4, &display)? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() != n {
        return Err(Error::parse(
            &display,
            format!("expected {n} label bytes, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Write `[N, 1, rows, cols]` images (values in `[0,1]`) as an IDX file.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let display = path.display().to_string();
    let shape = images.shape();
    assert_eq!(shape.len(), 4, "write_idx_images: need [N,1,H,W]");
    assert_eq!(shape[1], 1, "write_idx_images: single channel only");
    let mut bytes = Vec::with_capacity(16 + images.numel());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(shape[0] as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    bytes.extend_from_slice(&(shape[3] as u32).to_be_bytes());
    bytes.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(&display, e))
}

/// Write labels as an IDX file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).map_err(|e| Error::io(&display, e))
}

// ---- synthetic lesion benchmark ----

/// Parameters of the synthetic lesion benchmark. The blob family is drawn
/// once from `family_seed` and shared by every image of the set, so
/// lesion-free training splits and lesioned test splits built with
/// different `seed`s depict the same "anatomy".
#[derive(Clone, Debug)]
pub struct LesionParams {
    pub canvas: usize,
    /// Blob count range (inclusive), drawn once per family.
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Per-image jitter of blob centers, in pixels.
    pub pose_jitter: f64,
    /// Base background brightness added everywhere (keeps dark pixels off
    /// the [0,1] clip boundary so quantiles stay well separated).
    pub base_brightness: f64,
    /// Additive pixel noise standard deviation.
    pub noise_sigma: f64,
    /// Optional intensity-proportional noise: the per-pixel noise std is
    /// `noise_sigma + noise_gain * clean_intensity`.
    pub noise_gain: f64,
    /// Lesion intensity range (additive, bright).
    pub lesion_intensity: (f64, f64),
    /// Lesion radius range in pixels.
    pub lesion_radius: (f64, f64),
    pub family_seed: u64,
}

impl Default for LesionParams {
    fn default() -> Self {
        LesionParams {
            canvas: 64,
            blobs_min: 3,
            blobs_max: 6,
            pose_jitter: 2.5,
            base_brightness: 0.15,
            noise_sigma: 0.02,
            noise_gain: 0.0,
            lesion_intensity: (0.3, 0.5),
            lesion_radius: (3.0, 8.0),
            family_seed: 0xb10b,
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    amplitude: f64,
}

fn blob_family(params: &LesionParams) -> Vec<Blob> {
    let mut rng = sub_rng(params.family_seed, "lesion-family", 0);
    let count = rng.gen_range(params.blobs_min..=params.blobs_max);
    let c = params.canvas as f64;
    (0..count)
        .map(|_| Blob {
            cx: rng.gen_range(0.25 * c..0.75 * c),
            cy: rng.gen_range(0.25 * c..0.75 * c),
            sx: rng.gen_range(0.08 * c..0.22 * c),
            sy: rng.gen_range(0.08 * c..0.22 * c),
            amplitude: rng.gen_range(0.25..0.55),
        })
        .collect()
}

/// Synthesize `n` images with ground-truth lesion masks. A `lesion_rate`
/// fraction of images receives one bright ellipse recorded exactly in the
/// mask (the mask is the generator's own stencil).
pub fn synthesize_lesion_set(
    n: usize,
    seed: u64,
    lesion_rate: f64,
    params: &LesionParams,
) -> Dataset {
    assert!((0.0..=1.0).contains(&lesion_rate), "lesion_rate must lie in [0,1]");
    let family = blob_family(params);
    let c = params.canvas;
    let mut images = Vec::with_capacity(n * c * c);
    let mut masks = Vec::with_capacity(n * c * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sub_rng(seed, "lesion-image", i as u64);
        // pose-jittered blob sum on a base brightness
        let mut clean = vec![params.base_brightness; c * c];
        for blob in &family {
            let jx = blob.cx + rng.gen_range(-params.pose_jitter..=params.pose_jitter);
            let jy = blob.cy + rng.gen_range(-params.pose_jitter..=params.pose_jitter);
            let amp = blob.amplitude * rng.gen_range(0.9..1.1);
            for y in 0..c {
                for x in 0..c {
                    let dx = (x as f64 - jx) / blob.sx;
                    let dy = (y as f64 - jy) / blob.sy;
                    clean[y * c + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
        // optional lesion
        let mut mask = vec![0.0f64; c * c];
        let lesioned = rng.gen_range(0.0..1.0f64) < lesion_rate;
        if lesioned {
            let radius_x = rng.gen_range(params.lesion_radius.0..=params.lesion_radius.1);
            let radius_y = rng.gen_range(params.lesion_radius.0..=params.lesion_radius.1);
            let intensity =
                rng.gen_range(params.lesion_intensity.0..=params.lesion_intensity.1);
            let margin = params.lesion_radius.1 + 4.0;
            let lx = rng.gen_range(margin..(c as f64 - margin));
            let ly = rng.gen_range(margin..(c as f64 - margin));
            for y in 0..c {
                for x in 0..c {
                    let dx = (x as f64 - lx) / radius_x;
                    let dy = (y as f64 - ly) / radius_y;
                    if dx * dx + dy * dy <= 1.0 {
                        clean[y * c + x] += intensity;
                        mask[y * c + x] = 1.0;
                    }
                }
            }
        }
        // heteroscedastic pixel noise, then clip to [0, 1]
        for &value in clean.iter() {
            let std = params.noise_sigma + params.noise_gain * value;
            let noisy = value + std * rng.sample::<f64, _>(StandardNormal);
            images.push(noisy.clamp(0.0, 1.0));
        }
        masks.extend_from_slice(&mask);
        labels.push(u8::from(lesioned));
    }
    Dataset {
        items: Tensor::new(vec![n, 1, c, c], images),
        labels: Some(labels),
        masks: Some(Tensor::new(vec![n, c, c], masks)),
    }
}

// ---- splits ----

/// Deterministically partition `n` indices into three disjoint, exhaustive
/// groups. Sizes are `floor(n * fraction)` with the remainder assigned to
/// the first split. Fractions must sum to 1.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidArgument("split fractions must be nonnegative".into()));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = sub_rng(seed, "split", 0);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = indices[..n_train].to_vec();
    let val = indices[n_train..n_train + n_val].to_vec();
    let test = indices[n_train + n_val..].to_vec();
    Ok([train, val, test])
}

/// A dataset partitioned for training.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}
