//! Parameter bookkeeping and small reusable layers.

use crate::error::{Error, Result};
use crate::rng::Frng;
use crate::tensor::{
    add, add_channel_bias, conv2d, instance_norm, leaky_relu, matmul, reshape, Element, Tensor,
};

/// Snapshot of named parameter data: `(name, shape, values)` per tensor.
pub type ParamSnapshot<E> = Vec<(String, Vec<usize>, Vec<E>)>;

/// Ordered, name-addressable collection of model tensors.
///
/// Iteration order is creation order, which makes optimizer updates and
/// checkpoint layouts deterministic. A frozen set stores no-grad copies of
/// whatever is registered, so backward passes flow through the model's ops
/// without ever depositing gradients in its weights.
pub struct ParamSet<E: Element> {
    entries: Vec<(String, Tensor<E>)>,
    trainable: bool,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            trainable: true,
        }
    }

    pub fn frozen() -> Self {
        ParamSet {
            entries: Vec::new(),
            trainable: false,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Registers a parameter and returns a handle to it. In a frozen set the
    /// stored (and returned) tensor is a no-grad copy.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<E>) -> Tensor<E> {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        let t = if self.trainable { t } else { t.detach() };
        self.entries.push((name, t.clone()));
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// True when no parameter holds a gradient buffer.
    pub fn grads_empty(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.grad().is_none())
    }

    /// Snapshot of all parameter data, in registration order.
    pub fn export(&self) -> ParamSnapshot<E> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().clone()))
            .collect()
    }

    /// Restores data exported by [`ParamSet::export`]; names and shapes must
    /// match the registered parameters exactly.
    pub fn import(&self, saved: &[(String, Vec<usize>, Vec<E>)]) -> Result<()> {
        if saved.len() != self.entries.len() {
            return Err(Error::Checkpoint {
                what: format!(
                    "parameter count mismatch: checkpoint has {}, model has {}",
                    saved.len(),
                    self.entries.len()
                ),
            });
        }
        for ((name, t), (sname, sshape, sdata)) in self.entries.iter().zip(saved) {
            if name != sname || t.shape() != sshape.as_slice() {
                return Err(Error::Checkpoint {
                    what: format!(
                        "parameter `{sname}` {sshape:?} does not match model `{name}` {:?}",
                        t.shape()
                    ),
                });
            }
            t.set_data(sdata.clone())?;
        }
        Ok(())
    }
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Draws a `shape`-sized parameter with N(0, std^2) entries.
pub fn normal_param<E: Element>(shape: &[usize], std: f64, rng: &mut Frng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
    Tensor::param(shape, data).expect("shape/data length agree by construction")
}

/// He-style init scale for a conv/linear weight with the given fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Convolution layer with bias.
pub struct Conv2d<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Element> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Frng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            normal_param(&[c_out, c_in, k, k], he_std(c_in * k * k), rng),
        );
        let bias = params.add(
            format!("{name}.bias"),
            Tensor::param(&[c_out], vec![E::zero(); c_out]).unwrap(),
        );
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        add_channel_bias(&conv2d(x, &self.weight, self.stride, self.pad)?, &self.bias)
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }
}

/// Fully connected layer mapping `[d_in] -> [d_out]`.
pub struct Linear<E: Element> {
    pub weight: Tensor<E>, // [d_out, d_in]
    pub bias: Tensor<E>,   // [d_out]
}

impl<E: Element> Linear<E> {
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Frng,
    ) -> Self {
        Self::with_bias_std(params, name, d_in, d_out, 0.0, rng)
    }

    /// Linear layer whose bias is drawn from N(0, bias_std^2) instead of
    /// zeros. A nonzero bias keeps downstream normalization well-defined
    /// even for constant inputs.
    pub fn with_bias_std(
        params: &mut ParamSet<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias_std: f64,
        rng: &mut Frng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            normal_param(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), rng),
        );
        let bias = if bias_std > 0.0 {
            params.add(
                format!("{name}.bias"),
                normal_param(&[d_out], bias_std, rng),
            )
        } else {
            params.add(
                format!("{name}.bias"),
                Tensor::param(&[d_out], vec![E::zero(); d_out]).unwrap(),
            )
        };
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let d_in = self.weight.shape()[1];
        let d_out = self.weight.shape()[0];
        let col = reshape(x, &[d_in, 1])?;
        let out = reshape(&matmul(&self.weight, &col)?, &[d_out])?;
        add(&out, &self.bias)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_out * d_in + d_out
    }
}

/// conv -> instance norm -> leaky relu, the standard downsampling unit.
pub struct ConvNormAct<E: Element> {
    pub conv: Conv2d<E>,
    pub slope: f64,
    pub eps: f64,
}

impl<E: Element> ConvNormAct<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        slope: f64,
        rng: &mut Frng,
    ) -> Self {
        ConvNormAct {
            conv: Conv2d::new(params, name, c_in, c_out, k, stride, pad, rng),
            slope,
            eps: crate::NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(leaky_relu(
            &instance_norm(&self.conv.forward(x)?, self.eps)?,
            self.slope,
        ))
    }
}
