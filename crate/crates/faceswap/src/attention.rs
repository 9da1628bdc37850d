//! Self- and cross-attention blocks over 2-D feature maps.
//!
//! A feature map `[c,h,w]` is flattened to `h*w` positions of `c` channels.
//! Queries, keys and values are linear projections of the positions; the
//! attention map is `softmax(Q K^T / sqrt(d_k))`. Self-attention projects
//! all three from one map; cross-attention takes queries from the target map
//! and keys/values from the source map, so the output keeps the target's
//! spatial shape regardless of the source's.
//!
//! Both blocks end in a zero-initialized residual gate: `out = x + gamma *
//! attended`, with `gamma = 0` at construction. A freshly built block is
//! therefore exactly the identity on its first input, and the surrounding
//! network starts out as the attention-free baseline.

use crate::error::{Error, Result};
use crate::nn::{normal_param, ParamSet};
use crate::rng::Frng;
use crate::tensor::{add, matmul, reshape, scale, softmax_rows, transpose, Element, Tensor};

/// Projection matrices and the residual gate of one attention block.
pub struct AttentionParams<E: Element> {
    pub w_q: Tensor<E>,           // [d_k, c]
    pub w_k: Tensor<E>,           // [d_k, c]
    pub w_v: Tensor<E>,           // [d_v, c]; d_v = d_k with an output projection, else c
    pub w_out: Option<Tensor<E>>, // [c, d_k]
    pub gamma: Option<Tensor<E>>, // rank-0 residual gate, zero-initialized
    d_k: usize,
    channels: usize,
}

impl<E: Element> AttentionParams<E> {
    /// Registers a block's parameters. `d_k = 0` selects the default
    /// `c / 2` (at least 1).
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        channels: usize,
        d_k: usize,
        out_projection: bool,
        residual_gate: bool,
        rng: &mut Frng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidConfig {
                what: "attention channel count must be positive".into(),
            });
        }
        let d_k = if d_k == 0 { (channels / 2).max(1) } else { d_k };
        let std = (1.0 / channels as f64).sqrt();
        let w_q = params.add(
            format!("{name}.w_q"),
            normal_param(&[d_k, channels], std, rng),
        );
        let w_k = params.add(
            format!("{name}.w_k"),
            normal_param(&[d_k, channels], std, rng),
        );
        let d_v = if out_projection { d_k } else { channels };
        let w_v = params.add(
            format!("{name}.w_v"),
            normal_param(&[d_v, channels], std, rng),
        );
        let w_out = if out_projection {
            Some(params.add(
                format!("{name}.w_out"),
                normal_param(&[channels, d_k], (1.0 / d_k as f64).sqrt(), rng),
            ))
        } else {
            None
        };
        let gamma = if residual_gate {
            Some(params.add(
                format!("{name}.gamma"),
                Tensor::param(&[], vec![E::zero()]).unwrap(),
            ))
        } else {
            None
        };
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_out,
            gamma,
            d_k,
            channels,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parameter count of one block for the given configuration.
    pub fn param_count(
        channels: usize,
        d_k: usize,
        out_projection: bool,
        residual_gate: bool,
    ) -> usize {
        let d_k = if d_k == 0 { (channels / 2).max(1) } else { d_k };
        let d_v = if d_k == 0 {
            channels
        } else if out_projection {
            d_k
        } else {
            channels
        };
        let mut n = 2 * d_k * channels + d_v * channels;
        if out_projection {
            n += channels * d_k;
        }
        if residual_gate {
            n += 1;
        }
        n
    }
}

/// `[c,h,w]` -> `[h*w, c]` with positions as rows.
fn to_positions<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    transpose(&reshape(x, &[s[0], s[1] * s[2]])?)
}

/// `[h*w, c]` -> `[c,h,w]`.
fn to_map<E: Element>(x: &Tensor<E>, c: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    reshape(&transpose(x)?, &[c, h, w])
}

fn check_channels<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            expected: "[c,h,w]".into(),
        });
    }
    if s[0] != p.channels {
        return Err(Error::BadShape {
            op,
            shape: s.to_vec(),
            expected: format!("{} channels to match the projection matrices", p.channels),
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// Attention core shared by both blocks: queries from `q_src`, keys and
/// values from `kv_src`.
fn attend<E: Element>(
    q_src: &Tensor<E>,
    kv_src: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    let q = matmul(q_src, &transpose(&p.w_q)?)?; // [n_q, d_k]
    let k = matmul(kv_src, &transpose(&p.w_k)?)?; // [n_kv, d_k]
    let v = matmul(kv_src, &transpose(&p.w_v)?)?; // [n_kv, d_v]
    let scores = scale(&matmul(&q, &transpose(&k)?)?, 1.0 / (p.d_k as f64).sqrt());
    let attn = softmax_rows(&scores)?;
    let gathered = matmul(&attn, &v)?; // [n_q, d_v]
    match &p.w_out {
        Some(w_out) => matmul(&gathered, &transpose(w_out)?),
        None => Ok(gathered),
    }
}

fn gated_residual<E: Element>(
    x: &Tensor<E>,
    attended: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    match &p.gamma {
        Some(gamma) => add(x, &crate::tensor::mul(attended, gamma)?),
        None => Ok(attended.clone()),
    }
}

/// Self-attention over one feature map; output shape equals input shape.
pub fn self_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>) -> Result<Tensor<E>> {
    let (c, h, w) = check_channels("self_attention", x, p)?;
    let pos = to_positions(x)?;
    let attended = to_map(&attend(&pos, &pos, p)?, c, h, w)?;
    gated_residual(x, &attended, p)
}

/// Cross-attention: target positions query source keys/values. The output
/// has the target's spatial shape even when the source's differs.
pub fn cross_attention<E: Element>(
    x_t: &Tensor<E>,
    x_s: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    let (c, h, w) = check_channels("cross_attention", x_t, p)?;
    check_channels("cross_attention", x_s, p)?;
    let q_pos = to_positions(x_t)?;
    let kv_pos = to_positions(x_s)?;
    let attended = to_map(&attend(&q_pos, &kv_pos, p)?, c, h, w)?;
    gated_residual(x_t, &attended, p)
}
