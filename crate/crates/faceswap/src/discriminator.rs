//! Multi-scale patch discriminator.
//!
//! Each scale is an independent patch-based stack of stride-2 convs with
//! leaky ReLU activations, operating on the input image downsampled by
//! `2^scale`. There is no normalization anywhere in the stack: every score
//! cell must remain a function of its receptive field alone, and any
//! cross-spatial statistic would break that. Every scale ends in a 1-channel
//! conv head that emits a grid of raw patch scores — no sigmoid, since the
//! hinge loss works on unsquashed scores. The per-layer activations of every
//! scale are returned for the feature-matching loss, in a fixed order:
//! scale 0 layers first, then scale 1, and so on.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::rng::Frng;
use crate::tensor::{avg_pool2d, leaky_relu, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub n_scales: usize,
    pub n_layers: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            n_scales: 2,
            n_layers: 3,
            base_channels: 16,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.n_layers == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig {
                what: "discriminator needs n_scales, n_layers, base_channels >= 1".into(),
            });
        }
        Ok(())
    }

    /// Spatial size of the score map a stack of `n_layers` k4/s2/p1 convs
    /// plus the k4/s1/p1 head produces from `input` pixels, if valid.
    pub fn score_map_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in 0..self.n_layers {
            if s + 2 < 4 {
                return None;
            }
            s = (s + 2 - 4) / 2 + 1;
            if s == 0 {
                return None;
            }
        }
        // head: kernel 4, stride 1, pad 1
        if s + 2 < 4 {
            return None;
        }
        Some(s - 1)
    }
}

struct Scale<E: Element> {
    layers: Vec<Conv2d<E>>,
    head: Conv2d<E>,
}

pub struct Discriminator<E: Element> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamSet<E>,
    pub image_size: usize,
    scales: Vec<Scale<E>>,
}

impl<E: Element> Discriminator<E> {
    pub fn new(
        cfg: DiscriminatorConfig,
        image_size: usize,
        rng: &mut Frng,
    ) -> Result<Discriminator<E>> {
        cfg.validate()?;
        // Every scale must survive its conv stack; the coarsest scale sees
        // the smallest input.
        for scale in 0..cfg.n_scales {
            let input = image_size >> scale;
            if (input << scale) != image_size {
                return Err(Error::InvalidConfig {
                    what: format!("image size {image_size} not divisible by 2^{scale}"),
                });
            }
            if cfg.score_map_size(input).unwrap_or(0) == 0 {
                return Err(Error::BadShape {
                    op: "discriminator",
                    shape: vec![3, input, input],
                    expected: format!("input large enough for {} stride-2 layers", cfg.n_layers),
                });
            }
        }
        let mut params = ParamSet::new();
        let mut scales = Vec::new();
        for s in 0..cfg.n_scales {
            let mut layers = Vec::new();
            let mut c_in = 3;
            for l in 0..cfg.n_layers {
                let c_out = cfg.base_channels << l;
                layers.push(Conv2d::new(
                    &mut params,
                    &format!("disc.s{s}.conv{l}"),
                    c_in,
                    c_out,
                    4,
                    2,
                    1,
                    rng,
                ));
                c_in = c_out;
            }
            let head = Conv2d::new(
                &mut params,
                &format!("disc.s{s}.head"),
                c_in,
                1,
                4,
                1,
                1,
                rng,
            );
            scales.push(Scale { layers, head });
        }
        Ok(Discriminator {
            cfg,
            params,
            image_size,
            scales,
        })
    }

    /// Runs all scales on an image. Returns one raw patch-score map per
    /// scale and the `n_scales * n_layers` intermediate activations.
    #[allow(clippy::type_complexity)]
    pub fn discriminate(&self, image: &Tensor<E>) -> Result<(Vec<Tensor<E>>, Vec<Tensor<E>>)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.image_size || s[2] != self.image_size {
            return Err(Error::BadShape {
                op: "discriminate",
                shape: s.to_vec(),
                expected: format!("[3,{0},{0}]", self.image_size),
            });
        }
        let mut scores = Vec::with_capacity(self.cfg.n_scales);
        let mut feats = Vec::with_capacity(self.cfg.n_scales * self.cfg.n_layers);
        let mut input = image.clone();
        for (i, scale) in self.scales.iter().enumerate() {
            if i > 0 {
                input = avg_pool2d(&input, 2)?;
            }
            let mut x = input.clone();
            for layer in &scale.layers {
                x = leaky_relu(&layer.forward(&x)?, self.cfg.leaky_slope);
                feats.push(x.clone());
            }
            scores.push(scale.head.forward(&x)?);
        }
        Ok((scores, feats))
    }

    pub fn param_count(cfg: &DiscriminatorConfig) -> usize {
        let mut n = 0;
        for _ in 0..cfg.n_scales {
            let mut c_in = 3;
            for l in 0..cfg.n_layers {
                let c_out = cfg.base_channels << l;
                n += Conv2d::<E>::param_count(c_in, c_out, 4);
                c_in = c_out;
            }
            n += Conv2d::<E>::param_count(c_in, 1, 4);
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::feature_matching_loss;
    use crate::tensor::{backward, reduce_sum};

    fn rand_image(size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Frng::from_seed(seed);
        let data: Vec<f64> = (0..3 * size * size)
            .map(|_| rng.uniform_in(-1.0, 1.0))
            .collect();
        Tensor::from_vec(&[3, size, size], data).unwrap()
    }

    #[test]
    fn single_scale_single_layer_counts() {
        let cfg = DiscriminatorConfig {
            n_scales: 1,
            n_layers: 1,
            base_channels: 4,
            leaky_slope: 0.2,
        };
        let mut rng = Frng::from_seed(1);
        let d: Discriminator<f64> = Discriminator::new(cfg, 8, &mut rng).unwrap();
        let (scores, feats) = d.discriminate(&rand_image(8, 2)).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn default_config_score_map_sizes_on_32px() {
        let cfg = DiscriminatorConfig::default();
        // 32 -> 16 -> 8 -> 4 through three stride-2 convs, then the k4/s1/p1
        // head gives 3; the half-resolution scale lands at 1.
        assert_eq!(cfg.score_map_size(32), Some(3));
        assert_eq!(cfg.score_map_size(16), Some(1));
        let mut rng = Frng::from_seed(3);
        let d: Discriminator<f64> = Discriminator::new(cfg, 32, &mut rng).unwrap();
        let (scores, feats) = d.discriminate(&rand_image(32, 4)).unwrap();
        assert_eq!(scores[0].shape(), &[1, 3, 3]);
        assert_eq!(scores[1].shape(), &[1, 1, 1]);
        assert_eq!(feats.len(), 6);
    }

    #[test]
    fn feats_ordering_is_stable_bitwise() {
        let mut rng = Frng::from_seed(5);
        let d: Discriminator<f64> =
            Discriminator::new(DiscriminatorConfig::default(), 32, &mut rng).unwrap();
        let img = rand_image(32, 6);
        let (s1, f1) = d.discriminate(&img).unwrap();
        let (s2, f2) = d.discriminate(&img).unwrap();
        for (a, b) in s1.iter().zip(&s2).chain(f1.iter().zip(&f2)) {
            assert_eq!(*a.data(), *b.data());
        }
    }

    #[test]
    fn too_small_images_fail_at_construction() {
        let cfg = DiscriminatorConfig::default();
        let mut rng = Frng::from_seed(7);
        // 16px halves to 8 which dies in three stride-2 convs plus head.
        assert!(Discriminator::<f64>::new(cfg, 8, &mut rng).is_err());
        assert!(Discriminator::<f64>::new(cfg, 30, &mut rng).is_err()); // not divisible
        assert!(Discriminator::<f64>::new(cfg, 32, &mut rng).is_ok());
    }

    #[test]
    fn patch_score_ignores_pixels_outside_receptive_field() {
        let mut rng = Frng::from_seed(9);
        let d: Discriminator<f64> =
            Discriminator::new(DiscriminatorConfig::default(), 32, &mut rng).unwrap();
        let img = rand_image(32, 10);
        let (scores, _) = d.discriminate(&img).unwrap();
        let base = scores[0].data()[0]; // full-res cell (0,0)

        // Receptive field of cell (0,0) spans input columns/rows 0..=30;
        // pixel (31,31) is outside it.
        let mut bumped = img.data().clone();
        for ch in 0..3 {
            bumped[(ch * 32 + 31) * 32 + 31] += 0.5;
        }
        let (scores2, _) = d
            .discriminate(&Tensor::from_vec(&[3, 32, 32], bumped).unwrap())
            .unwrap();
        assert_eq!(base.to_bits(), scores2[0].data()[0].to_bits());

        // A pixel inside the receptive field must change the score.
        let mut bumped = img.data().clone();
        bumped[0] += 0.5;
        let (scores3, _) = d
            .discriminate(&Tensor::from_vec(&[3, 32, 32], bumped).unwrap())
            .unwrap();
        assert_ne!(base.to_bits(), scores3[0].data()[0].to_bits());
    }

    #[test]
    fn every_feature_feeds_the_matching_loss_gradient() {
        let mut rng = Frng::from_seed(11);
        let d: Discriminator<f64> =
            Discriminator::new(DiscriminatorConfig::default(), 32, &mut rng).unwrap();
        let real = rand_image(32, 12);
        let fake_leaf = Tensor::param(&[3, 32, 32], rand_image(32, 13).data().clone()).unwrap();
        let (_, feats_real) = d.discriminate(&real).unwrap();
        let (_, feats_fake) = d.discriminate(&fake_leaf).unwrap();
        let detached: Vec<Tensor<f64>> = feats_real.iter().map(|f| f.detach()).collect();
        let loss = feature_matching_loss(&detached, &feats_fake).unwrap();
        backward(&loss).unwrap();
        let g = fake_leaf.grad().unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
        // Perturbing any single layer's contribution shows up because every
        // layer is part of the sum; spot-check by dropping one layer.
        let partial = feature_matching_loss(&detached[..5], &feats_fake[..5]).unwrap();
        assert!((partial.item() - loss.item()).abs() > 0.0);
    }

    #[test]
    fn scores_gradient_reaches_all_discriminator_params() {
        let mut rng = Frng::from_seed(15);
        let d: Discriminator<f64> =
            Discriminator::new(DiscriminatorConfig::default(), 32, &mut rng).unwrap();
        let (scores, _) = d.discriminate(&rand_image(32, 16)).unwrap();
        let mut total = reduce_sum(&scores[0]);
        for s in &scores[1..] {
            total = crate::tensor::add(&total, &reduce_sum(s)).unwrap();
        }
        backward(&total).unwrap();
        for (name, t) in d.params.iter() {
            let g = t.grad().expect(name);
            assert!(g.iter().any(|v| *v != 0.0), "dead parameter {name}");
        }
        assert_eq!(
            d.params.total_params(),
            Discriminator::<f64>::param_count(&DiscriminatorConfig::default())
        );
    }
}
