//! Evaluation metrics: identity similarity, attribute consistency via a
//! ground-truth probe, and a Fréchet distance over embedder features.
//!
//! The Fréchet distance between feature sets uses the Gaussian closed form
//! `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The matrix square
//! root is computed through symmetric eigendecompositions (cyclic Jacobi):
//! `tr sqrt(S_a S_b) = tr sqrt(A^{1/2} S_b A^{1/2})`, which keeps everything
//! symmetric positive semi-definite. Covariances are regularized by
//! `+1e-6 I` and the result is clamped at zero.

use crate::datasynth::{render, FaceSpec, SyntheticDataset, ATTR_FACTORS};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamSet};
use crate::rng::{mix, Frng};
use crate::schedules::Adam;
use crate::tensor::{
    add, add_scalar, backward, cosine_similarity, mul, reduce_mean, scale, spatial_mean, sub, tanh,
    Element, Tensor,
};
use std::fmt;

/// Covariance regularizer added to both sides of the Fréchet distance.
const COV_EPS: f64 = 1e-6;

/// One evaluation of a generator checkpoint on held-out identities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean cosine between source embeddings and swap embeddings, in [-1,1].
    pub identity_similarity: f64,
    /// Probe-based agreement with the target attributes, in [0,1].
    pub attribute_consistency: f64,
    /// Fréchet distance between swap features and real-face features.
    pub frechet_distance: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "identity_similarity,attribute_consistency,frechet_distance,n_samples";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.identity_similarity,
            self.attribute_consistency,
            self.frechet_distance,
            self.n_samples
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "identity_similarity={:.4} attribute_consistency={:.4} frechet_distance={:.4} (n={})",
            self.identity_similarity,
            self.attribute_consistency,
            self.frechet_distance,
            self.n_samples
        )
    }
}

/// Mean cosine similarity between the embeddings of each `(reference, swap)`
/// image pair.
pub fn identity_similarity<E: Element>(
    pairs: &[(Tensor<E>, Tensor<E>)],
    embedder: &Embedder<E>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput {
            op: "identity_similarity",
        });
    }
    let mut total = 0.0;
    for (reference, swap) in pairs {
        let e_ref = embedder.embed(reference)?;
        let e_swap = embedder.embed(swap)?;
        total += cosine_similarity(&e_ref, &e_swap)?.item_f64();
    }
    Ok(total / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Attribute probe
// ---------------------------------------------------------------------------

/// Frozen attribute regressor: predicts the attribute vector of the face in
/// an image. Obtainable only через [`pretrain_probe`], so a probe in hand is
/// always a trained one.
pub struct AttributeProbe<E: Element> {
    pub params: ParamSet<E>,
    pub image_size: usize,
    stages: Vec<Conv2d<E>>,
    head: Linear<E>,
}

impl<E: Element> AttributeProbe<E> {
    fn build(image_size: usize, params: ParamSet<E>, rng: &mut Frng) -> AttributeProbe<E> {
        let mut params = params;
        // Plain convs: the probe must see global statistics (lighting,
        // background), which normalization would strip.
        let widths = [8usize, 16, 32];
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, c_out) in widths.iter().enumerate() {
            stages.push(Conv2d::new(
                &mut params,
                &format!("probe.conv{i}"),
                c_in,
                *c_out,
                3,
                2,
                1,
                rng,
            ));
            c_in = *c_out;
        }
        let head = Linear::new(&mut params, "probe.head", c_in, ATTR_FACTORS, rng);
        AttributeProbe {
            params,
            image_size,
            stages,
            head,
        }
    }

    /// Predicted attribute vector, each entry squashed into [0,1].
    pub fn predict(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.image_size || s[2] != self.image_size {
            return Err(Error::BadShape {
                op: "probe_predict",
                shape: s.to_vec(),
                expected: format!("[3,{0},{0}]", self.image_size),
            });
        }
        let mut x = image.clone();
        for stage in &self.stages {
            x = crate::tensor::leaky_relu(&stage.forward(&x)?, 0.2);
        }
        let raw = self.head.forward(&spatial_mean(&x)?)?;
        // (tanh + 1) / 2 keeps predictions in the factor range.
        Ok(scale(&add_scalar(&tanh(&raw), 1.0), 0.5))
    }

    pub fn frozen(&self) -> AttributeProbe<E> {
        let mut rng = Frng::from_seed(0);
        let copy = Self::build(self.image_size, ParamSet::frozen(), &mut rng);
        copy.params
            .import(&self.params.export())
            .expect("identical construction order");
        copy
    }
}

/// Trains an attribute probe by MSE regression on rendered training faces.
/// Deterministic given the seed; the returned probe is frozen.
pub fn pretrain_probe<E: Element>(
    dataset: &SyntheticDataset,
    image_size: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<AttributeProbe<E>> {
    let train = dataset.train_items();
    if train.is_empty() {
        return Err(Error::EmptyInput {
            op: "pretrain_probe",
        });
    }
    let mut rng = Frng::from_seed(mix(seed, 0xBE));
    let probe = AttributeProbe::build(image_size, ParamSet::new(), &mut rng);
    let mut adam = Adam::new(&probe.params, 0.9, 0.999);
    let mut draw = Frng::from_seed(mix(seed, 0xB0));
    for _ in 0..steps {
        let mut loss_acc: Option<Tensor<E>> = None;
        for _ in 0..batch {
            let (spec, _) = train[draw.index(train.len())];
            let img = render::<E>(spec, image_size)?;
            let pred = probe.predict(&img)?;
            let target = Tensor::from_vec(
                &[ATTR_FACTORS],
                spec.attributes.iter().map(|v| E::from_f64(*v)).collect(),
            )?;
            let diff = sub(&pred, &target)?;
            let sq = reduce_mean(&mul(&diff, &diff)?);
            loss_acc = Some(match loss_acc {
                Some(acc) => add(&acc, &sq)?,
                None => sq,
            });
        }
        let loss = scale(&loss_acc.unwrap(), 1.0 / batch as f64);
        probe.params.zero_grads();
        backward(&loss)?;
        adam.step(&probe.params, lr)?;
    }
    Ok(probe.frozen())
}

/// Mean attribute agreement between probe predictions on the images and the
/// specs' ground-truth attribute vectors: `1 - mean |pred - truth|`.
/// Attributes live in [0,1], so the result does too.
pub fn attribute_consistency<E: Element>(
    swaps: &[(Tensor<E>, &FaceSpec)],
    probe: &AttributeProbe<E>,
) -> Result<f64> {
    if swaps.is_empty() {
        return Err(Error::EmptyInput {
            op: "attribute_consistency",
        });
    }
    let mut err_total = 0.0;
    for (image, target_spec) in swaps {
        let pred = probe.predict(image)?;
        let mae: f64 = pred
            .data()
            .iter()
            .zip(&target_spec.attributes)
            .map(|(p, t)| (p.into_f64() - t).abs())
            .sum::<f64>()
            / ATTR_FACTORS as f64;
        err_total += mae;
    }
    Ok(1.0 - (err_total / swaps.len() as f64).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Fréchet distance
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major, n x n).
/// Returns eigenvalues and eigenvectors (columns of `v`).
fn jacobi_eigh(mat: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = mat.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from roundoff are clamped to zero.
fn sym_sqrt(mat: &[f64], n: usize) -> Vec<f64> {
    let (eig, v) = jacobi_eigh(mat, n);
    let mut scaled = vec![0.0; n * n]; // V * sqrt(diag)
    for i in 0..n {
        for j in 0..n {
            scaled[i * n + j] = v[i * n + j] * eig[j].max(0.0).sqrt();
        }
    }
    // (V sqrt(D)) V^T
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += scaled[i * n + k] * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mean_and_cov(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for c in &mut cov {
        *c /= denom;
    }
    for i in 0..d {
        cov[i * d + i] += COV_EPS;
    }
    (mean, cov)
}

/// Fréchet distance between two sets of feature vectors.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::EmptyInput {
            op: "frechet_distance",
        });
    }
    let d = a[0].len();
    if b[0].len() != d || a.iter().chain(b).any(|f| f.len() != d) {
        return Err(Error::InvalidConfig {
            what: "feature vectors must share one dimensionality".into(),
        });
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    // tr sqrt(S_a S_b) = tr sqrt(A^{1/2} S_b A^{1/2})
    let a_half = sym_sqrt(&cov_a, d);
    let inner = mat_mul(&a_half, &mat_mul(&cov_b, &a_half, d), d);
    // Symmetrize before the eigen-solve to clean up roundoff.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigh(&sym, d);
    let tr_sqrt: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between two image sets over embedder features.
pub fn frechet_distance<E: Element>(
    set_a: &[Tensor<E>],
    set_b: &[Tensor<E>],
    embedder: &Embedder<E>,
) -> Result<f64> {
    let embed_all = |set: &[Tensor<E>]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|img| {
                Ok(embedder
                    .embed(img)?
                    .data()
                    .iter()
                    .map(|v| v.into_f64())
                    .collect())
            })
            .collect()
    };
    frechet_from_features(&embed_all(set_a)?, &embed_all(set_b)?)
}
