//! Quantitative metrics: Fréchet distance between feature Gaussians (FID)
//! and structural similarity (SSIM), plus model evaluation over a test set.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SamplePair;
use crate::networks::params::{conv_init, ConvP};
use crate::networks::style_unet::generate_image;
use crate::networks::{ModelConfig, NetworkError, StyleUNetParams};
use crate::tape::{Tape, VarId};
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(
        "pretrained feature extractor {0:?} is not available in this build; \
         use the deterministic fallback extractor (FeatureExtractor::fallback)"
    )]
    ExtractorUnavailable(String),
    #[error("need at least {needed} images, got {got}")]
    TooFewImages { needed: usize, got: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("image shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("window size must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One convolution stage of a feature extractor.
#[derive(Clone, Debug)]
pub struct ExtractorLayer {
    pub conv: ConvP<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub lrelu: bool,
}

/// A frozen convolutional feature extractor. FID values are only comparable
/// between runs that used the same named extractor.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub name: String,
    pub input_size: usize,
    pub layers: Vec<ExtractorLayer>,
}

impl FeatureExtractor {
    /// Deterministic fallback: a fixed-seed random convolutional stack.
    /// Hermetic — no downloads — and frozen, so features are reproducible.
    pub fn fallback() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_FEA7);
        let widths = [8usize, 16, 32, 64];
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for &w in &widths {
            layers.push(ExtractorLayer {
                conv: conv_init(w, in_ch, 3, &mut rng),
                stride: 2,
                pad: 1,
                lrelu: true,
            });
            in_ch = w;
        }
        Self {
            name: "fallback-conv-v1".into(),
            input_size: 64,
            layers,
        }
    }

    /// Canonical pretrained extractors need external weights, which this
    /// build does not bundle; always errs, pointing at the fallback.
    pub fn pretrained(name: &str) -> Result<Self, EvalError> {
        Err(EvalError::ExtractorUnavailable(name.to_string()))
    }

    /// Single 1x1 identity convolution; used by tests with known algebra.
    pub fn linear_stub() -> Self {
        Self {
            name: "linear-stub".into(),
            input_size: 0, // no resizing
            layers: vec![ExtractorLayer {
                conv: ConvP {
                    w: Tensor::new(vec![1, 1, 1, 1], vec![1.0]),
                    b: Tensor::zeros(&[1]),
                },
                stride: 1,
                pad: 0,
                lrelu: false,
            }],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.b.len())
    }

    /// Runs the stack on a tape so callers can differentiate through it.
    /// `x` must be a [C,H,W] variable; returns one variable per layer.
    pub fn forward_layers(&self, tape: &mut Tape, x: VarId) -> Vec<VarId> {
        let mut cur = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = tape.leaf(layer.conv.w.clone());
            let b = tape.leaf(layer.conv.b.clone());
            cur = tape.conv2d(cur, w, b, layer.stride, layer.pad);
            if layer.lrelu {
                cur = tape.leaky_relu(cur, 0.2);
            }
            outs.push(cur);
        }
        outs
    }

    /// Pooled feature vector of one 2-D image: resize to the extractor input
    /// size, run the stack, and average each final-layer channel.
    pub fn features_of(&self, image: &Tensor) -> Tensor {
        let resized = if self.input_size > 0 {
            resize_bilinear(image, self.input_size, self.input_size)
        } else {
            image.clone()
        };
        let (h, w) = (resized.shape()[0], resized.shape()[1]);
        let mut tape = Tape::new();
        let x = tape.leaf(resized.reshaped(vec![1, h, w]));
        let last = *self.forward_layers(&mut tape, x).last().unwrap();
        let fmap = tape.value(last);
        let (c, fh, fw) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..fh {
                for x in 0..fw {
                    acc += fmap.at3(ch, y, x);
                }
            }
            out.data_mut()[ch] = acc / (fh * fw) as f64;
        }
        out
    }
}

/// Gaussian summary of a feature cloud.
#[derive(Clone, Debug)]
pub struct FeatureStats {
    pub mean: Tensor,       // [d]
    pub covariance: Tensor, // [d, d], symmetric
    pub sample_count: usize,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub configuration: String,
    pub extractor: String,
    /// Covariance estimator convention baked into the FID number.
    pub covariance_convention: &'static str,
    pub fid: f64,
    pub ssim_mean: f64,
    /// (sample id, ssim) per evaluated pair.
    pub per_sample_ssim: Vec<(String, f64)>,
}

pub const COVARIANCE_CONVENTION: &str = "unbiased (divisor N-1)";

/// Stacks pooled feature vectors into an N x d matrix.
pub fn extract_features(
    images: &[Tensor],
    extractor: &FeatureExtractor,
) -> Result<Tensor, EvalError> {
    if images.len() < 2 {
        return Err(EvalError::TooFewImages {
            needed: 2,
            got: images.len(),
        });
    }
    let d = extractor.feature_dim();
    let mut out = Tensor::zeros(&[images.len(), d]);
    for (i, img) in images.iter().enumerate() {
        let f = extractor.features_of(img);
        for j in 0..d {
            out.set2(i, j, f.data()[j]);
        }
    }
    Ok(out)
}

/// Sample mean and unbiased covariance of an N x d feature matrix.
pub fn gaussian_stats(features: &Tensor) -> Result<FeatureStats, EvalError> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(EvalError::TooFewImages { needed: 2, got: n });
    }
    let mut mean = Tensor::zeros(&[d]);
    for i in 0..n {
        for j in 0..d {
            mean.data_mut()[j] += features.at2(i, j);
        }
    }
    mean.scale_assign(1.0 / n as f64);
    let mut cov = Tensor::zeros(&[d, d]);
    for i in 0..n {
        for a in 0..d {
            let da = features.at2(i, a) - mean.data()[a];
            for b in a..d {
                let db = features.at2(i, b) - mean.data()[b];
                let v = cov.at2(a, b) + da * db;
                cov.set2(a, b, v);
            }
        }
    }
    let inv = 1.0 / (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.at2(a, b) * inv;
            cov.set2(a, b, v);
            cov.set2(b, a, v);
        }
    }
    Ok(FeatureStats {
        mean,
        covariance: cov,
        sample_count: n,
    })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    // Symmetrize before the eigendecomposition and clip tiny negative
    // eigenvalues from round-off.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two feature Gaussians:
/// ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}).
pub fn fid(real: &FeatureStats, gen: &FeatureStats) -> Result<f64, EvalError> {
    let d = real.mean.len();
    if gen.mean.len() != d {
        return Err(EvalError::DimMismatch(d, gen.mean.len()));
    }
    let mean_term: f64 = real
        .mean
        .data()
        .iter()
        .zip(gen.mean.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sr = DMatrix::from_row_slice(d, d, real.covariance.data());
    let sg = DMatrix::from_row_slice(d, d, gen.covariance.data());
    // (S_r S_g)^{1/2} via sqrt(S_r) S_g sqrt(S_r), which is symmetric PSD
    // and shares the product's eigenvalues.
    let root_r = sym_sqrt(&sr);
    let inner = &root_r * &sg * &root_r;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_term + sr.trace() + sg.trace() - 2.0 * trace_sqrt;
    Ok(value.max(0.0))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean structural similarity with a Gaussian window. Windows wrap at the
/// borders, so shifting both images by the same offset leaves the value
/// exactly unchanged.
pub fn ssim(
    a: &Tensor,
    b: &Tensor,
    window_size: usize,
    k1: f64,
    k2: f64,
    data_range: f64,
) -> Result<f64, EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::ShapeMismatch(
            a.shape().to_vec(),
            b.shape().to_vec(),
        ));
    }
    if window_size == 0 || window_size % 2 == 0 {
        return Err(EvalError::BadWindow(window_size));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let win = gaussian_window(window_size, 1.5);
    let half = window_size / 2;
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let wrap = |i: isize, n: usize| -> usize { i.rem_euclid(n as isize) as usize };

    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..window_size {
                let yy = wrap(y as isize + dy as isize - half as isize, h);
                for dx in 0..window_size {
                    let xx = wrap(x as isize + dx as isize - half as isize, w);
                    let wgt = win[dy] * win[dx];
                    let va = a.at2(yy, xx);
                    let vb = b.at2(yy, xx);
                    ma += wgt * va;
                    mb += wgt * vb;
                    maa += wgt * va * va;
                    mbb += wgt * vb * vb;
                    mab += wgt * va * vb;
                }
            }
            let va = maa - ma * ma;
            let vb = mbb - mb * mb;
            let cov = mab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
    }
    Ok(acc / (h * w) as f64)
}

/// SSIM with the standard constants (window 11, k1=0.01, k2=0.03) over the
/// [-1, 1] image range.
pub fn ssim_default(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    ssim(a, b, 11, 0.01, 0.03, 2.0)
}

/// Evaluates a generator given as a closure from test pair to synthesized
/// image. Computes FID between the real and generated image sets and the
/// per-pair SSIM against each paired real image.
pub fn evaluate_with(
    test: &[SamplePair],
    mut generator: impl FnMut(&SamplePair) -> Result<Tensor, EvalError>,
    extractor: &FeatureExtractor,
    label: &str,
) -> Result<MetricsReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut real = Vec::with_capacity(test.len());
    let mut generated = Vec::with_capacity(test.len());
    let mut per_sample_ssim = Vec::with_capacity(test.len());
    for pair in test {
        let gen = generator(pair)?;
        per_sample_ssim.push((pair.id.clone(), ssim_default(&gen, &pair.image)?));
        real.push(pair.image.clone());
        generated.push(gen);
    }
    let stats_real = gaussian_stats(&extract_features(&real, extractor)?)?;
    let stats_gen = gaussian_stats(&extract_features(&generated, extractor)?)?;
    let fid_value = fid(&stats_real, &stats_gen)?;
    let ssim_mean =
        per_sample_ssim.iter().map(|(_, s)| s).sum::<f64>() / per_sample_ssim.len() as f64;
    Ok(MetricsReport {
        configuration: label.to_string(),
        extractor: extractor.name.clone(),
        covariance_convention: COVARIANCE_CONVENTION,
        fid: fid_value,
        ssim_mean,
        per_sample_ssim,
    })
}

/// Evaluates trained generator parameters: one image per test mask with a
/// per-sample latent and noise stream derived from `seed`.
pub fn evaluate_model(
    test: &[SamplePair],
    params: &StyleUNetParams<Tensor>,
    cfg: &ModelConfig,
    seed: u64,
    extractor: &FeatureExtractor,
    label: &str,
) -> Result<MetricsReport, EvalError> {
    let mut zs = Vec::with_capacity(test.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in test {
        zs.push(Tensor::randn(&[cfg.latent_dim], &mut rng));
    }
    let mut idx = 0usize;
    evaluate_with(
        test,
        move |pair| {
            let z = &zs[idx % zs.len()];
            let noise_seed = seed.wrapping_add(idx as u64).wrapping_mul(0x9E37_79B9);
            idx += 1;
            Ok(generate_image(params, cfg, &pair.mask, z, noise_seed)?)
        },
        extractor,
        label,
    )
}
