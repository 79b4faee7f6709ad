//! Fréchet distance between Gaussian feature statistics, FVD over a pluggable
//! embedding, a frozen random-network embedding and a toy-data depth/RGB agreement score.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::toy::{background_color, COLOR_THRESHOLD, DEPTH_THRESHOLD};
use crate::data::{Dataset, VideoTensor};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::Tensor;

/// Most negative eigenvalue a covariance may have and still count as PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Eigenvalues of the covariance product below `-CLIP_RELATIVE · max` are rejected; above it they clip to 0.
pub const CLIP_RELATIVE: f64 = 1e-6;

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::Shape(format!("mean of dim {d} with covariance {:?}", sigma.shape())));
        }
        if count < 2 {
            return Err(Error::invalid(format!("statistics need at least 2 samples, got {count}")));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let min = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        if min < -PSD_TOLERANCE {
            return Err(Error::invalid(format!("covariance has eigenvalue {min:.3e}")));
        }
        Ok(Self { mu, sigma, count })
    }

    /// Sample mean and unbiased covariance of equally long feature vectors.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if let Some(i) = features.iter().position(|f| f.len() != d) {
            return Err(Error::Shape(format!("feature {i} has length {}, expected {d}", features[i].len())));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mu = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Self::new(mu, sigma, n)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Eigen-decomposition square root of a symmetric PSD matrix, small negative eigenvalues clipped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
///
/// `Tr (Σ₁Σ₂)^½` is the sum of square roots of the eigenvalues of the
/// symmetric matrix `Σ₁^½ Σ₂ Σ₁^½`, which shares its spectrum with `Σ₁Σ₂`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", a.dim(), b.dim())));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let s = sqrt_psd(&a.sigma);
    let product = &s * &b.sigma * &s;
    let eig = SymmetricEigen::new((&product + product.transpose()) * 0.5).eigenvalues;
    let max = eig.max().max(0.0);
    let mut trace_sqrt = 0.0;
    for &v in eig.iter() {
        if v < -CLIP_RELATIVE * max.max(PSD_TOLERANCE) {
            return Err(Error::invalid(format!("covariance product has eigenvalue {v:.3e} (max {max:.3e})")));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    Ok((mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * trace_sqrt).max(0.0))
}

/// Fréchet distance between the embedded `real` and `generated` sets.
pub fn fvd(real: &[VideoTensor], generated: &[VideoTensor], feature_fn: impl Fn(&VideoTensor) -> Result<Vec<f64>>) -> Result<f64> {
    let embed = |set: &[VideoTensor]| set.iter().map(&feature_fn).collect::<Result<Vec<_>>>();
    let (fr, fg) = (embed(real)?, embed(generated)?);
    let d = fr.first().or(fg.first()).map_or(0, Vec::len);
    if fr.len() < d + 1 || fg.len() < d + 1 {
        return Err(Error::invalid(format!("feature dim {d} needs at least {} videos per set, got {} and {}", d + 1, fr.len(), fg.len())));
    }
    frechet_distance(&GaussianStats::fit(&fr)?, &GaussianStats::fit(&fg)?)
}

/// Hidden width of the surrogate network.
const SURROGATE_WIDTH: usize = 16;

/// Embedding by a frozen random network: 3×3×3 conv → SiLU → strided 3×3×3
/// conv to `d` channels → SiLU → global average pool. Weights depend only on
/// `(seed, d, channels)`.
pub fn surrogate_features(video: &VideoTensor, seed: u64, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("feature dim must be positive"));
    }
    let [f, h, w, c] = video.dims();
    let mut tape = Tape::<f64>::inference();
    let layer = |tape: &mut Tape<f64>, stream: u64, cin: usize, cout: usize| {
        let fan_in = 27 * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let wv = normal_vec::<f64>(&mut stream_rng(seed, stream), fan_in * cout).into_iter().map(|v| v * std).collect();
        let wt = tape.constant(Tensor::from_vec(&[3, 3, 3, cin, cout], wv).expect("sized"));
        let bt = tape.constant(Tensor::zeros(&[cout]));
        (wt, bt)
    };
    let x = tape.constant(Tensor::from_vec(&[1, f, h, w, c], video.data().iter().map(|&v| v as f64).collect())?);
    let (w1, b1) = layer(&mut tape, 0, c, SURROGATE_WIDTH);
    let h1 = tape.conv3d(x, w1, b1, 1)?;
    let h1 = tape.silu(h1);
    let (w2, b2) = layer(&mut tape, 1, SURROGATE_WIDTH, d);
    let h2 = tape.conv3d(h1, w2, b2, 2)?;
    let h2 = tape.silu(h2);
    let out = tape.value(h2);
    let positions = out.len() / d;
    let mut pooled = vec![0.0; d];
    for px in out.data().chunks_exact(d) {
        for (p, &v) in pooled.iter_mut().zip(px) {
            *p += v;
        }
    }
    Ok(pooled.into_iter().map(|v| v / positions as f64).collect())
}

/// Depth-derived object mask (nearer than the background threshold).
pub fn depth_mask(depth: &VideoTensor) -> Vec<bool> {
    depth.mean_channels().data().iter().map(|&v| v < DEPTH_THRESHOLD).collect()
}

/// RGB-derived object mask: pixels that deviate from the background palette of their row.
pub fn rgb_mask(rgb: &VideoTensor) -> Vec<bool> {
    let [f, h, w, _] = rgb.dims();
    let mut out = Vec::with_capacity(f * h * w);
    for fi in 0..f {
        for y in 0..h {
            let bg = background_color(y, h);
            for x in 0..w {
                let px = rgb.pixel(fi, y, x);
                out.push(px.iter().zip(bg).any(|(a, b)| (a - b).abs() > COLOR_THRESHOLD));
            }
        }
    }
    out
}

/// Per-frame IoU of object masks, averaged over frames. A frame where both
/// masks are empty scores 1.
pub fn depth_fidelity(rgb: &VideoTensor, depth: &VideoTensor) -> Result<f64> {
    let [f, h, w, c] = rgb.dims();
    let [df, dh, dw, _] = depth.dims();
    if (f, h, w) != (df, dh, dw) || c != 3 {
        return Err(Error::Shape(format!("rgb {:?} vs depth {:?}", rgb.dims(), depth.dims())));
    }
    let (a, b) = (rgb_mask(rgb), depth_mask(depth));
    let per_frame = h * w;
    let total: f64 = (0..f)
        .map(|fi| {
            let span = fi * per_frame..(fi + 1) * per_frame;
            let (mut inter, mut union) = (0usize, 0usize);
            for (&x, &y) in a[span.clone()].iter().zip(&b[span]) {
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / f as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub feature_seed: Option<u64>,
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub metrics: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// FVD between the RGB videos of two datasets under the surrogate embedding,
/// plus mean depth fidelity of each dataset's own pairs.
pub fn evaluate(real: &Dataset, generated: &Dataset, feature_seed: u64, d: usize) -> Result<MetricReport> {
    let rgb = |ds: &Dataset| ds.samples.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>();
    let fidelity = |ds: &Dataset| -> Result<f64> {
        let total = ds.samples.iter().map(|s| depth_fidelity(&s.rgb, &s.depth)).sum::<Result<f64>>()?;
        Ok(total / ds.len() as f64)
    };
    let (n_real, n_gen) = (real.len(), generated.len());
    let value = fvd(&rgb(real), &rgb(generated), |v| surrogate_features(v, feature_seed, d))?;
    Ok(MetricReport {
        metrics: vec![
            MetricEntry { name: "fvd".into(), value, n_real, n_gen, feature_seed: Some(feature_seed), d: Some(d) },
            MetricEntry { name: "depth_fidelity".into(), value: fidelity(generated)?, n_real: 0, n_gen, feature_seed: None, d: None },
            MetricEntry { name: "depth_fidelity_real".into(), value: fidelity(real)?, n_real, n_gen: 0, feature_seed: None, d: None },
        ],
    })
}
