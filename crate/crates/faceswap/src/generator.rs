//! Identity-conditioned generator: encoder, identity-modulated residual
//! blocks with optional self/cross-attention at the bottleneck, decoder.
//!
//! The target image drives the spatial structure: it is encoded, transformed
//! by residual blocks whose normalization is modulated per channel by the
//! source identity embedding, and decoded back to image space through a tanh
//! head. When cross-attention is enabled the source image is also encoded
//! (sharing the encoder weights) and bottleneck target positions attend over
//! source positions; otherwise the source enters only through its embedding.
//!
//! Initialization is deliberately inert: attention gates start at zero and
//! the identity modulation starts as plain instance norm, so a fresh
//! generator computes a function of the target alone and each conditioning
//! pathway has to be learned into existence.

use crate::attention::{cross_attention, self_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNormAct, ParamSet};
use crate::rng::Frng;
use crate::tensor::{
    add, channel_affine, instance_norm, leaky_relu, matmul, reshape, tanh, upsample_nearest,
    Element, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub n_downsamples: usize,
    pub n_res_blocks: usize,
    pub use_self_attention: bool,
    pub use_cross_attention: bool,
    pub id_dim: usize,
    /// Query/key width of the attention blocks; 0 selects channels/2.
    pub d_k: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 32,
            base_channels: 16,
            n_downsamples: 2,
            n_res_blocks: 4,
            use_self_attention: true,
            use_cross_attention: true,
            id_dim: 64,
            d_k: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.image_size == 0 || self.id_dim == 0 {
            return Err(Error::InvalidConfig {
                what: "generator sizes must be positive".into(),
            });
        }
        if !self.image_size.is_multiple_of(1 << self.n_downsamples) {
            return Err(Error::InvalidConfig {
                what: format!(
                    "image size {} not divisible by 2^{}",
                    self.image_size, self.n_downsamples
                ),
            });
        }
        if (self.use_self_attention || self.use_cross_attention) && self.n_res_blocks == 0 {
            return Err(Error::InvalidConfig {
                what: "attention requires at least one residual block".into(),
            });
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_downsamples
    }

    /// Residual blocks placed before the attention site.
    fn blocks_before_attention(&self) -> usize {
        self.n_res_blocks.div_ceil(2)
    }
}

/// Embedding-conditioned per-channel modulation over instance-normalized
/// features. Initialized to the identity: zero affine maps, unit scale bias,
/// zero shift bias.
pub struct IdInjection<E: Element> {
    w_scale: Tensor<E>, // [c, id_dim]
    b_scale: Tensor<E>, // [c], init 1
    w_shift: Tensor<E>, // [c, id_dim]
    b_shift: Tensor<E>, // [c], init 0
    channels: usize,
    id_dim: usize,
}

impl<E: Element> IdInjection<E> {
    pub fn new(params: &mut ParamSet<E>, name: &str, channels: usize, id_dim: usize) -> Self {
        let zeros = |shape: &[usize]| {
            Tensor::param(shape, vec![E::zero(); shape.iter().product()]).unwrap()
        };
        IdInjection {
            w_scale: params.add(format!("{name}.w_scale"), zeros(&[channels, id_dim])),
            b_scale: params.add(
                format!("{name}.b_scale"),
                Tensor::param(&[channels], vec![E::one(); channels]).unwrap(),
            ),
            w_shift: params.add(format!("{name}.w_shift"), zeros(&[channels, id_dim])),
            b_shift: params.add(format!("{name}.b_shift"), zeros(&[channels])),
            channels,
            id_dim,
        }
    }

    /// Predicted per-channel (scale, shift) for an embedding.
    pub fn modulation(&self, id_embed: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let e_col = reshape(id_embed, &[self.id_dim, 1])?;
        let scale_v = add(
            &reshape(&matmul(&self.w_scale, &e_col)?, &[self.channels])?,
            &self.b_scale,
        )?;
        let shift_v = add(
            &reshape(&matmul(&self.w_shift, &e_col)?, &[self.channels])?,
            &self.b_shift,
        )?;
        Ok((scale_v, shift_v))
    }

    pub fn param_count(channels: usize, id_dim: usize) -> usize {
        2 * channels * id_dim + 2 * channels
    }
}

/// Applies identity injection to a feature map:
/// `scale(e) * instance_norm(feat) + shift(e)`, per channel.
pub fn inject_identity<E: Element>(
    feat: &Tensor<E>,
    id_embed: &Tensor<E>,
    p: &IdInjection<E>,
) -> Result<Tensor<E>> {
    let (scale_v, shift_v) = p.modulation(id_embed)?;
    channel_affine(&instance_norm(feat, crate::NORM_EPS)?, &scale_v, &shift_v)
}

struct ResBlock<E: Element> {
    conv1: Conv2d<E>,
    inj1: IdInjection<E>,
    conv2: Conv2d<E>,
    inj2: IdInjection<E>,
}

impl<E: Element> ResBlock<E> {
    fn new(params: &mut ParamSet<E>, name: &str, c: usize, id_dim: usize, rng: &mut Frng) -> Self {
        ResBlock {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            inj1: IdInjection::new(params, &format!("{name}.inj1"), c, id_dim),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), c, c, 3, 1, 1, rng),
            inj2: IdInjection::new(params, &format!("{name}.inj2"), c, id_dim),
        }
    }

    fn forward(&self, x: &Tensor<E>, e: &Tensor<E>) -> Result<Tensor<E>> {
        let h = leaky_relu(
            &inject_identity(&self.conv1.forward(x)?, e, &self.inj1)?,
            0.2,
        );
        let h = inject_identity(&self.conv2.forward(&h)?, e, &self.inj2)?;
        add(x, &h)
    }
}

pub struct Generator<E: Element> {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<E>,
    encoder: Vec<ConvNormAct<E>>,
    res_blocks: Vec<ResBlock<E>>,
    self_attn: Option<AttentionParams<E>>,
    cross_attn: Option<AttentionParams<E>>,
    decoder: Vec<ConvNormAct<E>>,
    head: Conv2d<E>,
}

impl<E: Element> Generator<E> {
    pub fn new(cfg: GeneratorConfig, rng: &mut Frng) -> Result<Generator<E>> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut encoder = Vec::new();
        encoder.push(ConvNormAct::new(
            &mut params,
            "gen.enc0",
            3,
            cfg.base_channels,
            3,
            1,
            1,
            0.2,
            rng,
        ));
        for d in 0..cfg.n_downsamples {
            let c_in = cfg.base_channels << d;
            encoder.push(ConvNormAct::new(
                &mut params,
                &format!("gen.enc{}", d + 1),
                c_in,
                c_in * 2,
                3,
                2,
                1,
                0.2,
                rng,
            ));
        }
        let c = cfg.bottleneck_channels();
        let res_blocks = (0..cfg.n_res_blocks)
            .map(|i| ResBlock::new(&mut params, &format!("gen.res{i}"), c, cfg.id_dim, rng))
            .collect();
        let self_attn = if cfg.use_self_attention {
            Some(AttentionParams::new(
                &mut params,
                "gen.self_attn",
                c,
                cfg.d_k,
                true,
                true,
                rng,
            )?)
        } else {
            None
        };
        let cross_attn = if cfg.use_cross_attention {
            Some(AttentionParams::new(
                &mut params,
                "gen.cross_attn",
                c,
                cfg.d_k,
                true,
                true,
                rng,
            )?)
        } else {
            None
        };
        let mut decoder = Vec::new();
        for d in (0..cfg.n_downsamples).rev() {
            let c_in = cfg.base_channels << (d + 1);
            decoder.push(ConvNormAct::new(
                &mut params,
                &format!("gen.dec{}", cfg.n_downsamples - 1 - d),
                c_in,
                c_in / 2,
                3,
                1,
                1,
                0.2,
                rng,
            ));
        }
        let head = Conv2d::new(&mut params, "gen.head", cfg.base_channels, 3, 3, 1, 1, rng);
        Ok(Generator {
            cfg,
            params,
            encoder,
            res_blocks,
            self_attn,
            cross_attn,
            decoder,
            head,
        })
    }

    fn encode(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let mut x = image.clone();
        for stage in &self.encoder {
            x = stage.forward(&x)?;
        }
        Ok(x)
    }

    fn check_image(&self, op: &'static str, image: &Tensor<E>) -> Result<()> {
        let s = image.shape();
        let n = self.cfg.image_size;
        if s != [3, n, n] {
            return Err(Error::BadShape {
                op,
                shape: s.to_vec(),
                expected: format!("[3,{n},{n}]"),
            });
        }
        Ok(())
    }

    /// Swaps the source identity onto the target image. `id_embed` is the
    /// (frozen) embedding of the source image; output values lie in [-1,1].
    pub fn forward(
        &self,
        i_s: &Tensor<E>,
        i_t: &Tensor<E>,
        id_embed: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.check_image("generator_forward", i_t)?;
        self.check_image("generator_forward", i_s)?;
        if id_embed.shape() != [self.cfg.id_dim] {
            return Err(Error::BadShape {
                op: "generator_forward",
                shape: id_embed.shape().to_vec(),
                expected: format!("[{}]", self.cfg.id_dim),
            });
        }
        let source_feat = match &self.cross_attn {
            Some(_) => Some(self.encode(i_s)?),
            None => None,
        };
        let mut x = self.encode(i_t)?;
        let pivot = self.cfg.blocks_before_attention();
        for (i, block) in self.res_blocks.iter().enumerate() {
            if i == pivot {
                x = self.apply_attention(x, &source_feat)?;
            }
            x = block.forward(&x, id_embed)?;
        }
        if pivot == self.res_blocks.len() {
            x = self.apply_attention(x, &source_feat)?;
        }
        for stage in &self.decoder {
            x = stage.forward(&upsample_nearest(&x, 2)?)?;
        }
        Ok(tanh(&self.head.forward(&x)?))
    }

    fn apply_attention(
        &self,
        mut x: Tensor<E>,
        source_feat: &Option<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        if let Some(p) = &self.self_attn {
            x = self_attention(&x, p)?;
        }
        if let (Some(p), Some(src)) = (&self.cross_attn, source_feat) {
            x = cross_attention(&x, src, p)?;
        }
        Ok(x)
    }

    /// Closed-form parameter count for a configuration.
    pub fn param_count(cfg: &GeneratorConfig) -> usize {
        let mut n = Conv2d::<E>::param_count(3, cfg.base_channels, 3);
        for d in 0..cfg.n_downsamples {
            let c_in = cfg.base_channels << d;
            n += Conv2d::<E>::param_count(c_in, c_in * 2, 3);
        }
        let c = cfg.bottleneck_channels();
        n += cfg.n_res_blocks
            * (2 * Conv2d::<E>::param_count(c, c, 3)
                + 2 * IdInjection::<E>::param_count(c, cfg.id_dim));
        let attn = AttentionParams::<E>::param_count(c, cfg.d_k, true, true);
        if cfg.use_self_attention {
            n += attn;
        }
        if cfg.use_cross_attention {
            n += attn;
        }
        for d in (0..cfg.n_downsamples).rev() {
            let c_in = cfg.base_channels << (d + 1);
            n += Conv2d::<E>::param_count(c_in, c_in / 2, 3);
        }
        n + Conv2d::<E>::param_count(cfg.base_channels, 3, 3)
    }
}
