//! Identity embedder: a small convolutional network mapping a face image to
//! an L2-normalized embedding.
//!
//! The embedder is pretrained once with a cosine-contrastive objective on
//! the synthetic training identities, then frozen. During GAN training its
//! weights receive no gradients, but gradients flow through its ops into the
//! generator output, which is what makes the identity loss trainable.

use crate::datasynth::{render, FaceSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamSet};

use crate::rng::{mix, Frng};
use crate::schedules::Adam;
use crate::tensor::{
    add, add_scalar, backward, cosine_similarity, l2_normalize, leaky_relu, relu, scale,
    spatial_mean, Element, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedderConfig {
    /// Embedding dimensionality.
    pub id_dim: usize,
    /// Width of the first conv; later stages double it.
    pub base_channels: usize,
    pub image_size: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            id_dim: 64,
            base_channels: 16,
            image_size: 32,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_dim < 2 {
            return Err(Error::InvalidConfig {
                what: format!("id_dim must be >= 2, got {}", self.id_dim),
            });
        }
        if self.base_channels == 0 || self.image_size < 8 {
            return Err(Error::InvalidConfig {
                what: "embedder needs base_channels >= 1 and image_size >= 8".into(),
            });
        }
        Ok(())
    }
}

pub struct Embedder<E: Element> {
    pub cfg: EmbedderConfig,
    pub params: ParamSet<E>,
    stages: Vec<Conv2d<E>>,
    head: Linear<E>,
}

impl<E: Element> Embedder<E> {
    pub fn new(cfg: EmbedderConfig, rng: &mut Frng) -> Result<Embedder<E>> {
        Self::build(cfg, ParamSet::new(), rng)
    }

    fn build(cfg: EmbedderConfig, mut params: ParamSet<E>, rng: &mut Frng) -> Result<Embedder<E>> {
        cfg.validate()?;
        let widths = [
            cfg.base_channels,
            cfg.base_channels * 2,
            cfg.base_channels * 4,
        ];
        // No normalization: identity lives partly in global color
        // statistics, which any per-image norm would erase.
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, c_out) in widths.iter().enumerate() {
            stages.push(Conv2d::new(
                &mut params,
                &format!("embed.conv{i}"),
                c_in,
                *c_out,
                3,
                2,
                1,
                rng,
            ));
            c_in = *c_out;
        }
        // Nonzero head bias keeps the pre-normalization vector away from
        // zero even on constant inputs.
        let head = Linear::with_bias_std(&mut params, "embed.head", c_in, cfg.id_dim, 0.05, rng);
        Ok(Embedder {
            cfg,
            params,
            stages,
            head,
        })
    }

    /// Frozen copy sharing this embedder's weights (data copied, gradients
    /// disabled).
    pub fn frozen(&self) -> Embedder<E> {
        let mut rng = Frng::from_seed(0);
        let copy =
            Self::build(self.cfg, ParamSet::frozen(), &mut rng).expect("config already validated");
        copy.params
            .import(&self.params.export())
            .expect("identical construction order");
        copy
    }

    /// Embeds an image in `[-1,1]` as a unit vector of length `id_dim`.
    pub fn embed(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.cfg.image_size || s[2] != self.cfg.image_size {
            return Err(Error::BadShape {
                op: "embed",
                shape: s.to_vec(),
                expected: format!("[3,{0},{0}]", self.cfg.image_size),
            });
        }
        let mut x = image.clone();
        for stage in &self.stages {
            x = leaky_relu(&stage.forward(&x)?, 0.2);
        }
        let pooled = spatial_mean(&x)?;
        let raw = self.head.forward(&pooled)?;
        l2_normalize(&raw).map_err(|e| match e {
            Error::DegenerateInput { .. } => Error::DegenerateInput {
                op: "embed",
                detail: "pre-normalization embedding has zero norm (dead network)".into(),
            },
            other => other,
        })
    }

    pub fn param_count(cfg: &EmbedderConfig) -> usize {
        let widths = [
            cfg.base_channels,
            cfg.base_channels * 2,
            cfg.base_channels * 4,
        ];
        let mut n = 0;
        let mut c_in = 3;
        for c_out in widths {
            n += crate::nn::Conv2d::<E>::param_count(c_in, c_out, 3);
            c_in = c_out;
        }
        n + Linear::<E>::param_count(c_in, cfg.id_dim)
    }
}

/// Cosine margin below which cross-identity pairs stop being pushed apart.
const CONTRASTIVE_MARGIN: f64 = 0.2;

/// Required held-out separation between mean same-identity and mean
/// cross-identity cosine similarity after pretraining.
pub const REQUIRED_SEPARATION: f64 = 0.3;

/// Mean same-identity minus mean cross-identity cosine over pairs drawn from
/// `items` (render size taken from the embedder config).
pub fn identity_separation<E: Element>(
    embedder: &Embedder<E>,
    items: &[&(FaceSpec, usize)],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if items.len() < 4 {
        return Err(Error::EmptyInput {
            op: "identity_separation",
        });
    }
    let mut rng = Frng::from_seed(seed);
    let mut same_sum = 0.0;
    let mut cross_sum = 0.0;
    let mut n_same = 0usize;
    let mut n_cross = 0usize;
    let mut attempts = 0usize;
    while (n_same < n_pairs || n_cross < n_pairs) && attempts < 200 * n_pairs {
        attempts += 1;
        let a = items[rng.index(items.len())];
        let b = items[rng.index(items.len())];
        let same = a.1 == b.1;
        if std::ptr::eq(a, b) || (same && n_same >= n_pairs) || (!same && n_cross >= n_pairs) {
            continue;
        }
        let ea = embedder.embed(&render(&a.0, embedder.cfg.image_size)?)?;
        let eb = embedder.embed(&render(&b.0, embedder.cfg.image_size)?)?;
        let cos = cosine_similarity(&ea, &eb)?.item_f64();
        if same {
            same_sum += cos;
            n_same += 1;
        } else {
            cross_sum += cos;
            n_cross += 1;
        }
    }
    if n_same == 0 || n_cross == 0 {
        return Err(Error::EmptyInput {
            op: "identity_separation",
        });
    }
    Ok(same_sum / n_same as f64 - cross_sum / n_cross as f64)
}

/// Pretrains an embedder on the dataset's training identities with a
/// margin-based contrastive objective, then checks the held-out separation.
///
/// Deterministic given the seed. `steps == 0` returns the random
/// initialization (useful as a baseline) and skips the separation gate;
/// any trained run that misses [`REQUIRED_SEPARATION`] is an error.
pub fn pretrain_embedder<E: Element>(
    cfg: EmbedderConfig,
    dataset: &crate::datasynth::SyntheticDataset,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Embedder<E>> {
    let mut init_rng = Frng::from_seed(mix(seed, 0xE0));
    let embedder = Embedder::new(cfg, &mut init_rng)?;
    let train = dataset.train_items();
    if train.len() < 4 {
        return Err(Error::EmptyInput {
            op: "pretrain_embedder",
        });
    }
    // Index training items by identity for same-pair sampling.
    let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_train_ids];
    for (i, (_, id)) in train.iter().enumerate() {
        by_id[*id].push(i);
    }
    let by_id: Vec<Vec<usize>> = by_id.into_iter().filter(|v| v.len() >= 2).collect();
    if by_id.len() < 2 {
        return Err(Error::EmptyInput {
            op: "pretrain_embedder",
        });
    }

    let mut adam = Adam::new(&embedder.params, 0.9, 0.999);
    let mut rng = Frng::from_seed(mix(seed, 0xE1));
    let half = (batch / 2).max(1);
    for _step in 0..steps {
        let mut losses: Vec<Tensor<E>> = Vec::with_capacity(2 * half);
        for _ in 0..half {
            // Same-identity pair: pull cosine toward 1.
            let ids = &by_id[rng.index(by_id.len())];
            let i = ids[rng.index(ids.len())];
            let mut j = ids[rng.index(ids.len())];
            while j == i {
                j = ids[rng.index(ids.len())];
            }
            let ei = embedder.embed(&render(&train[i].0, cfg.image_size)?)?;
            let ej = embedder.embed(&render(&train[j].0, cfg.image_size)?)?;
            let cos = cosine_similarity(&ei, &ej)?;
            losses.push(add_scalar(&scale(&cos, -1.0), 1.0));

            // Cross-identity pair: push cosine below the margin.
            let ka = rng.index(by_id.len());
            let mut kb = rng.index(by_id.len());
            while kb == ka {
                kb = rng.index(by_id.len());
            }
            let i = by_id[ka][rng.index(by_id[ka].len())];
            let j = by_id[kb][rng.index(by_id[kb].len())];
            let ei = embedder.embed(&render(&train[i].0, cfg.image_size)?)?;
            let ej = embedder.embed(&render(&train[j].0, cfg.image_size)?)?;
            let cos = cosine_similarity(&ei, &ej)?;
            losses.push(relu(&add_scalar(&cos, -CONTRASTIVE_MARGIN)));
        }
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = add(&total, l)?;
        }
        let loss = scale(&total, 1.0 / losses.len() as f64);
        embedder.params.zero_grads();
        backward(&loss)?;
        adam.step(&embedder.params, lr)?;
    }

    if steps > 0 {
        let held = dataset.heldout_items();
        let separation = identity_separation(&embedder, &held, 32, mix(seed, 0xE2))?;
        if separation < REQUIRED_SEPARATION {
            return Err(Error::PretrainingFailed {
                separation,
                required: REQUIRED_SEPARATION,
            });
        }
    }
    Ok(embedder)
}
