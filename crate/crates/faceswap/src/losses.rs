//! Training objectives: identity, reconstruction, feature matching, and the
//! hinge adversarial pair, combined into the weighted generator total.

use crate::error::{Error, Result};
use crate::tensor::{
    add, add_scalar, cosine_similarity, l1_mean, reduce_sum, relu, scale, Element, Tensor,
};

/// Weighting coefficients of the generator total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_feat: f64,
    pub lambda_rec: f64,
}

impl LossWeights {
    pub fn new(lambda_id: f64, lambda_feat: f64, lambda_rec: f64) -> Result<LossWeights> {
        for (name, v) in [
            ("lambda_id", lambda_id),
            ("lambda_feat", lambda_feat),
            ("lambda_rec", lambda_rec),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig {
                    what: format!("{name} must be finite and nonnegative, got {v}"),
                });
            }
        }
        Ok(LossWeights {
            lambda_id,
            lambda_feat,
            lambda_rec,
        })
    }
}

/// Per-step scalar losses. `id`, `feat` and `rec` are unweighted; `total`
/// applies the weights, with the reconstruction term present only on
/// self-swap batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub adv_g: f64,
    pub id: f64,
    pub feat: f64,
    pub rec: f64,
    pub total: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> bool {
        [
            self.adv_g,
            self.id,
            self.feat,
            self.rec,
            self.total,
            self.adv_d_real,
            self.adv_d_fake,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adv_g", self.adv_g),
            ("id", self.id),
            ("feat", self.feat),
            ("rec", self.rec),
            ("total", self.total),
            ("adv_d_real", self.adv_d_real),
            ("adv_d_fake", self.adv_d_fake),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Identity loss: `1 - cos(e_src, e_swap)`; range [0, 2] for any nonzero
/// embeddings.
pub fn identity_loss<E: Element>(e_src: &Tensor<E>, e_swap: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(add_scalar(
        &scale(&cosine_similarity(e_src, e_swap)?, -1.0),
        1.0,
    ))
}

/// Reconstruction loss: mean absolute difference between the target and the
/// self-swapped output.
pub fn reconstruction_loss<E: Element>(i_t: &Tensor<E>, i_tt: &Tensor<E>) -> Result<Tensor<E>> {
    l1_mean(i_t, i_tt)
}

/// Feature-matching loss: per-layer mean absolute difference, summed over
/// layers. The per-layer `1/N_i` normalization makes each layer's
/// contribution independent of its size.
///
/// Real features are expected to be gradient-detached by the caller; the
/// loss itself treats both lists symmetrically.
pub fn feature_matching_loss<E: Element>(
    feats_real: &[Tensor<E>],
    feats_fake: &[Tensor<E>],
) -> Result<Tensor<E>> {
    if feats_real.len() != feats_fake.len() {
        return Err(Error::InvalidConfig {
            what: format!(
                "feature list lengths differ: {} vs {}",
                feats_real.len(),
                feats_fake.len()
            ),
        });
    }
    if feats_real.is_empty() {
        return Err(Error::EmptyInput {
            op: "feature_matching_loss",
        });
    }
    let mut total: Option<Tensor<E>> = None;
    for (r, f) in feats_real.iter().zip(feats_fake) {
        let layer = l1_mean(r, f)?;
        total = Some(match total {
            Some(t) => add(&t, &layer)?,
            None => layer,
        });
    }
    Ok(total.unwrap())
}

/// Joint mean over every element of every map in the list.
fn joint_mean<E: Element>(maps: &[Tensor<E>], op: &'static str) -> Result<Tensor<E>> {
    if maps.is_empty() {
        return Err(Error::EmptyInput { op });
    }
    let count: usize = maps.iter().map(|m| m.numel()).sum();
    let mut total: Option<Tensor<E>> = None;
    for m in maps {
        let s = reduce_sum(m);
        total = Some(match total {
            Some(t) => add(&t, &s)?,
            None => s,
        });
    }
    Ok(scale(&total.unwrap(), 1.0 / count as f64))
}

/// Discriminator hinge terms, separately for real and fake score maps:
/// `mean(max(0, 1 - s_real))` and `mean(max(0, 1 + s_fake))`, averaged
/// jointly over all patches of all scales.
pub fn hinge_d_parts<E: Element>(
    scores_real: &[Tensor<E>],
    scores_fake: &[Tensor<E>],
) -> Result<(Tensor<E>, Tensor<E>)> {
    let real_hinges: Vec<Tensor<E>> = scores_real
        .iter()
        .map(|s| relu(&add_scalar(&scale(s, -1.0), 1.0)))
        .collect();
    let fake_hinges: Vec<Tensor<E>> = scores_fake
        .iter()
        .map(|s| relu(&add_scalar(s, 1.0)))
        .collect();
    Ok((
        joint_mean(&real_hinges, "hinge_d_loss")?,
        joint_mean(&fake_hinges, "hinge_d_loss")?,
    ))
}

/// Full discriminator hinge loss (real term + fake term).
pub fn hinge_d_loss<E: Element>(
    scores_real: &[Tensor<E>],
    scores_fake: &[Tensor<E>],
) -> Result<Tensor<E>> {
    let (r, f) = hinge_d_parts(scores_real, scores_fake)?;
    add(&r, &f)
}

/// Generator hinge loss: negative mean of all fake patch scores.
pub fn hinge_g_loss<E: Element>(scores_fake: &[Tensor<E>]) -> Result<Tensor<E>> {
    Ok(scale(&joint_mean(scores_fake, "hinge_g_loss")?, -1.0))
}

/// Unweighted generator loss terms for one batch.
pub struct GeneratorLossParts<E: Element> {
    pub adv: Tensor<E>,
    pub id: Tensor<E>,
    pub feat: Tensor<E>,
    /// Present only when the batch is a self-swap batch.
    pub rec: Option<Tensor<E>>,
}

/// Combines the loss parts into the weighted generator total and reports the
/// scalar values. The reconstruction term enters only on self-swap batches.
pub fn total_generator_loss<E: Element>(
    parts: &GeneratorLossParts<E>,
    w: &LossWeights,
    is_self_swap: bool,
) -> Result<(Tensor<E>, LossBundle)> {
    let mut total = add(&parts.adv, &scale(&parts.id, w.lambda_id))?;
    total = add(&total, &scale(&parts.feat, w.lambda_feat))?;
    let rec_value = match (&parts.rec, is_self_swap) {
        (Some(rec), true) => {
            total = add(&total, &scale(rec, w.lambda_rec))?;
            rec.item_f64()
        }
        (Some(rec), false) => rec.item_f64(),
        (None, _) => 0.0,
    };
    let bundle = LossBundle {
        adv_g: parts.adv.item_f64(),
        id: parts.id.item_f64(),
        feat: parts.feat.item_f64(),
        rec: rec_value,
        total: total.item_f64(),
        adv_d_real: 0.0,
        adv_d_fake: 0.0,
    };
    Ok((total, bundle))
}
