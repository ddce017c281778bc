//! Statistical machinery: normal CDF/quantile, quantile-to-Gaussian
//! mapping, z-scores and p-values, BH-FDR thresholding, interval detection,
//! Gaussian KDE, k-NN KL divergence, ROC AUC and median filtering.
//!
//! Everything here is a pure function of its inputs.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const SQRT_2PI: f64 = 2.5066282746310002;

// ---- erf / normal distribution ----

// Rational approximations for erf/erfc (Cody, "Rational Chebyshev
// approximation for the error function", 1969; the SPECFUN coefficients,
// kept at their published precision).
#[allow(clippy::excessive_precision)]
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
#[allow(clippy::excessive_precision)]
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
#[allow(clippy::excessive_precision)]
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
#[allow(clippy::excessive_precision)]
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
#[allow(clippy::excessive_precision)]
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
#[allow(clippy::excessive_precision)]
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf(x);
    } else if y <= 4.0 {
        let mut xnum = ERF_C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + ERF_C[i]) * y;
            xden = (xden + ERF_D[i]) * y;
        }
        exp_mx2(y) * (xnum + ERF_C[7]) / (xden + ERF_D[7])
    } else if y < 26.5 {
        let z = 1.0 / (y * y);
        let mut xnum = ERF_P[5] * z;
        let mut xden = z;
        for i in 0..4 {
            xnum = (xnum + ERF_P[i]) * z;
            xden = (xden + ERF_Q[i]) * z;
        }
        let r = z * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
        exp_mx2(y) * (1.0 / std::f64::consts::PI.sqrt() - r) / y
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        let z = y * y;
        let mut xnum = ERF_A[4] * z;
        let mut xden = z;
        for i in 0..3 {
            xnum = (xnum + ERF_A[i]) * z;
            xden = (xden + ERF_B[i]) * z;
        }
        x * (xnum + ERF_A[3]) / (xden + ERF_B[3])
    } else {
        let e = 1.0 - erfc(y);
        if x < 0.0 {
            -e
        } else {
            e
        }
    }
}

/// `exp(-x^2)` split for accuracy at large `x`.
fn exp_mx2(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal quantile function, by bisection plus Newton polish on
/// [`normal_cdf`]. Guarantees `|normal_cdf(result) - alpha| < 1e-10`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level must lie in (0,1), got {alpha}"
        )));
    }
    let mut lo = -8.0;
    let mut hi = 8.0;
    while normal_cdf(lo) > alpha {
        lo *= 2.0;
    }
    while normal_cdf(hi) < alpha {
        hi *= 2.0;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..4 {
        let pdf = normal_pdf(x);
        if pdf < 1e-300 {
            break;
        }
        x -= (normal_cdf(x) - alpha) / pdf;
    }
    Ok(x)
}

// ---- quantiles to Gaussian parameters ----

/// Per-pixel Gaussian output parameters.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Result of mapping two quantile maps onto a per-pixel Gaussian.
#[derive(Clone, Debug)]
pub struct QuantileMapping {
    pub params: GaussianParams,
    /// Fraction of pixels with crossed quantiles whose sigma was floored.
    pub crossing_rate: f64,
}

/// Map a median map and a low-quantile map to per-pixel Gaussian
/// parameters: `mu = q_med`, `sigma = (q_med - q_low) / (-Phi^-1(alpha))`.
///
/// With `paper_approx` the divisor is 1.0, treating the low quantile as
/// exactly one standard deviation below the mean (exact only for
/// `alpha = Phi(-1) ~ 0.1587`; with `alpha = 0.15` the exact divisor is
/// `~1.036433`, a ~3.6% difference in sigma).
///
/// Crossed quantiles (`sigma <= 0`) are floored at 1e-4 and counted in the
/// reported crossing rate.
pub fn quantiles_to_gaussian(
    q_med: &Tensor,
    q_low: &Tensor,
    alpha_low: f64,
    paper_approx: bool,
) -> Result<QuantileMapping> {
    if alpha_low >= 0.5 {
        return Err(Error::InvalidArgument(format!(
            "low quantile level must be < 0.5, got {alpha_low}"
        )));
    }
    if q_med.shape() != q_low.shape() {
        return Err(Error::InvalidArgument(format!(
            "quantile map shapes differ: {:?} vs {:?}",
            q_med.shape(),
            q_low.shape()
        )));
    }
    let divisor = if paper_approx { 1.0 } else { -normal_quantile(alpha_low)? };
    let mut crossed = 0usize;
    let sigma: Vec<f64> = q_med
        .data()
        .iter()
        .zip(q_low.data())
        .map(|(&m, &l)| {
            let s = (m - l) / divisor;
            if s <= 0.0 {
                crossed += 1;
                1e-4
            } else {
                s
            }
        })
        .collect();
    Ok(QuantileMapping {
        params: GaussianParams {
            mu: q_med.clone(),
            sigma: Tensor::new(q_med.shape().to_vec(), sigma),
        },
        crossing_rate: crossed as f64 / q_med.numel().max(1) as f64,
    })
}

/// General two-quantile mapping: solve `mu + sigma Phi^-1(alpha) = Q` for
/// both levels, giving `sigma = (q_hi - q_lo) / (Phi^-1(alpha_hi) -
/// Phi^-1(alpha_lo))` and `mu = q_hi - sigma Phi^-1(alpha_hi)`. With
/// `alpha_hi = 0.5` this reduces to [`quantiles_to_gaussian`] with the
/// exact divisor. Crossed pixels are floored and counted the same way.
pub fn gaussian_from_quantile_pair(
    q_lo: &Tensor,
    q_hi: &Tensor,
    alpha_lo: f64,
    alpha_hi: f64,
) -> Result<QuantileMapping> {
    if alpha_lo >= alpha_hi {
        return Err(Error::InvalidArgument(format!(
            "quantile levels out of order: {alpha_lo} >= {alpha_hi}"
        )));
    }
    if q_lo.shape() != q_hi.shape() {
        return Err(Error::InvalidArgument("quantile map shapes differ".into()));
    }
    let z_lo = normal_quantile(alpha_lo)?;
    let z_hi = normal_quantile(alpha_hi)?;
    let span = z_hi - z_lo;
    let mut crossed = 0usize;
    let n = q_lo.numel();
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (&lo, &hi) in q_lo.data().iter().zip(q_hi.data()) {
        let s = (hi - lo) / span;
        let s = if s <= 0.0 {
            crossed += 1;
            1e-4
        } else {
            s
        };
        sigma.push(s);
        mu.push(hi - s * z_hi);
    }
    Ok(QuantileMapping {
        params: GaussianParams {
            mu: Tensor::new(q_lo.shape().to_vec(), mu),
            sigma: Tensor::new(q_lo.shape().to_vec(), sigma),
        },
        crossing_rate: crossed as f64 / n.max(1) as f64,
    })
}

// ---- z-scores, p-values, detection ----

/// Per-pixel z-scores, two-sided p-values and an optional applied threshold.
#[derive(Clone, Debug)]
pub struct DetectionResult {
    pub z: Tensor,
    pub p: Tensor,
    /// p-value cutoff; `None` until a threshold is applied.
    pub threshold: Option<f64>,
    /// `mask[i] == (p[i] <= threshold)` once a threshold is applied.
    pub mask: Option<Vec<bool>>,
}

/// Standardize `x` by the per-pixel Gaussian and attach two-sided p-values
/// `p = 2 (1 - Phi(|z|))`. The threshold is left unset.
pub fn z_and_p(x: &Tensor, params: &GaussianParams) -> DetectionResult {
    assert_eq!(x.shape(), params.mu.shape(), "z_and_p: shape mismatch");
    let z: Vec<f64> = x
        .data()
        .iter()
        .zip(params.mu.data())
        .zip(params.sigma.data())
        .map(|((&xv, &m), &s)| (xv - m) / s)
        .collect();
    let p: Vec<f64> = z.iter().map(|&zv| erfc(zv.abs() * FRAC_1_SQRT_2)).collect();
    DetectionResult {
        z: Tensor::new(x.shape().to_vec(), z),
        p: Tensor::new(x.shape().to_vec(), p),
        threshold: None,
        mask: None,
    }
}

impl DetectionResult {
    /// Apply a p-value cutoff, filling `threshold` and `mask`.
    pub fn apply_threshold(&mut self, threshold: f64) {
        self.mask = Some(self.p.data().iter().map(|&p| p <= threshold).collect());
        self.threshold = Some(threshold);
    }
}

/// Benjamini-Hochberg step-up threshold at FDR level `q`.
///
/// Sorts the p-values ascending and returns `p(k*)` for the largest `k` with
/// `p(k) <= k q / m`. When nothing is rejected the returned threshold is
/// -1.0, which sits below every attainable p-value so the mask is empty.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<f64> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("bh_fdr: empty p-value list".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("bh_fdr: q must lie in (0,1), got {q}")));
    }
    let m = p_values.len();
    let mut sorted = p_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN p-value"));
    let mut threshold = -1.0;
    for (i, &p) in sorted.iter().enumerate() {
        if p <= (i + 1) as f64 * q / m as f64 {
            threshold = p;
        }
    }
    Ok(threshold)
}

/// Flag pixels falling outside `[q_lo, q_hi]`.
pub fn interval_detect(x: &Tensor, q_lo: &Tensor, q_hi: &Tensor) -> Vec<bool> {
    assert_eq!(x.shape(), q_lo.shape(), "interval_detect: shape mismatch");
    assert_eq!(x.shape(), q_hi.shape(), "interval_detect: shape mismatch");
    x.data()
        .iter()
        .zip(q_lo.data())
        .zip(q_hi.data())
        .map(|((&v, &lo), &hi)| v < lo || v > hi)
        .collect()
}

// ---- kernel density estimation ----

/// Product-Gaussian kernel density estimator.
#[derive(Clone, Debug)]
pub struct Kde {
    samples: Vec<f64>, // [n, d] row-major
    n: usize,
    d: usize,
    bandwidth: Vec<f64>,
}

impl Kde {
    /// Scott's rule per dimension: `h_j = n^(-1/(d+4)) * std_j`, with a
    /// 1e-6 floor for zero-variance dimensions.
    pub fn scott(samples: &Tensor) -> Result<Self> {
        let shape = samples.shape();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "kde: need [n>=2, d] samples, got {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut bandwidth = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| samples.data()[i * d + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            bandwidth.push((factor * var.sqrt()).max(1e-6));
        }
        Ok(Kde { samples: samples.data().to_vec(), n, d, bandwidth })
    }

    /// Fixed per-dimension bandwidths.
    pub fn with_bandwidth(samples: &Tensor, bandwidth: Vec<f64>) -> Result<Self> {
        let shape = samples.shape();
        if shape.len() != 2 || shape[0] < 1 {
            return Err(Error::InvalidArgument(format!(
                "kde: need [n, d] samples, got {shape:?}"
            )));
        }
        if bandwidth.len() != shape[1] || bandwidth.iter().any(|&h| h <= 0.0) {
            return Err(Error::InvalidArgument("kde: bad bandwidth vector".into()));
        }
        Ok(Kde { samples: samples.data().to_vec(), n: shape[0], d: shape[1], bandwidth })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// Density at `point` (length `d`).
    pub fn density(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.d, "kde: query dimension mismatch");
        let mut acc = 0.0;
        for i in 0..self.n {
            let row = &self.samples[i * self.d..(i + 1) * self.d];
            let mut k = 1.0;
            for j in 0..self.d {
                let u = (point[j] - row[j]) / self.bandwidth[j];
                k *= (-0.5 * u * u).exp() / (self.bandwidth[j] * SQRT_2PI);
            }
            acc += k;
        }
        acc / self.n as f64
    }
}

// ---- k-NN KL divergence ----

/// k-NN divergence estimate together with the number of distance floors
/// applied because of exact duplicates.
#[derive(Clone, Copy, Debug)]
pub struct KnnKl {
    pub nats: f64,
    pub duplicate_floors: usize,
}

/// Nearest-neighbor KL divergence estimate between two sample sets
/// (Euclidean metric, brute-force neighbor search):
///
/// `D = (d/n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n-1))`
///
/// where `rho_k(i)` is the k-th nearest-neighbor distance of `p[i]` within
/// `p` (excluding itself) and `nu_k(i)` the k-th within `q`. Zero distances
/// are floored at 1e-12 and counted.
pub fn knn_kl(samples_p: &Tensor, samples_q: &Tensor, k: usize) -> Result<KnnKl> {
    let (sp, sq) = (samples_p.shape(), samples_q.shape());
    if sp.len() != 2 || sq.len() != 2 || sp[1] != sq[1] {
        return Err(Error::InvalidArgument(format!(
            "knn_kl: need [n,d] and [m,d] samples, got {sp:?} and {sq:?}"
        )));
    }
    let (n, d) = (sp[0], sp[1]);
    let m = sq[0];
    if k == 0 || n <= k || m <= k {
        return Err(Error::InvalidArgument(format!(
            "knn_kl: need n > k and m > k (n={n}, m={m}, k={k})"
        )));
    }
    let pd = samples_p.data();
    let qd = samples_q.data();
    let mut duplicate_floors = 0usize;
    let mut acc = 0.0;
    let mut dist_p = Vec::with_capacity(n - 1);
    let mut dist_q = Vec::with_capacity(m);
    for i in 0..n {
        let xi = &pd[i * d..(i + 1) * d];
        dist_p.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            dist_p.push(sq_dist(xi, &pd[j * d..(j + 1) * d]));
        }
        let rho = kth_smallest(&mut dist_p, k).sqrt();
        dist_q.clear();
        for j in 0..m {
            dist_q.push(sq_dist(xi, &qd[j * d..(j + 1) * d]));
        }
        let nu = kth_smallest(&mut dist_q, k).sqrt();
        let rho = if rho <= 0.0 {
            duplicate_floors += 1;
            1e-12
        } else {
            rho
        };
        let nu = if nu <= 0.0 {
            duplicate_floors += 1;
            1e-12
        } else {
            nu
        };
        acc += (nu / rho).ln();
    }
    let nats = d as f64 / n as f64 * acc + (m as f64 / (n as f64 - 1.0)).ln();
    Ok(KnnKl { nats, duplicate_floors })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

fn kth_smallest(values: &mut [f64], k: usize) -> f64 {
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    *kth
}

// ---- ROC AUC ----

/// Area under the ROC curve by the rank-sum (Mann-Whitney) formulation:
/// `P(score+ > score-) + 0.5 P(score+ == score-)`. Requires both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("roc_auc: length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("roc_auc: need both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));
    // Average ranks over tied groups, then the rank-sum of positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

// ---- median filter ----

/// Per-pixel median over an odd `window x window` neighborhood with
/// replicate padding at the borders.
pub fn median_filter(img: &[f64], h: usize, w: usize, window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "median_filter: window must be odd, got {window}"
        )));
    }
    assert_eq!(img.len(), h * w, "median_filter: image size mismatch");
    let r = (window / 2) as isize;
    let mut out = vec![0.0; h * w];
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..h as isize {
        for x in 0..w as isize {
            buf.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    buf.push(img[yy * w + xx]);
                }
            }
            buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + x as usize] = buf[buf.len() / 2];
        }
    }
    Ok(out)
}

// ---- mask export ----

/// Write a binary mask as a P5 PGM (maxval 255, 0/255 encoding).
pub fn write_mask_pgm(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    assert_eq!(mask.len(), h * w, "write_mask_pgm: size mismatch");
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m { 255u8 } else { 0u8 }));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
