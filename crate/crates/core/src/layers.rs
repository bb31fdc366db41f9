//! Parameterized building blocks shared by the encoder, refinement module
//! and decoder. Each block stores only [`ParamId`]s; values live in a
//! [`ParamStore`].

use alloc::format;
use alloc::string::String;

use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::Result;

/// Dense layer with weight `[out, in]` and optional bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

const LINEAR_INIT_STD: f64 = 0.02;

impl Linear {
    /// Normal weight with standard deviation 0.02, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut layer = Self::unbiased(store, rng, name, group, in_dim, out_dim);
        layer.bias = Some(store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim])));
        layer
    }

    /// Like [`Linear::new`] without the bias. Used for attention keys, where a
    /// bias shifts every score of a query equally and drops out of softmax.
    pub fn unbiased<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, rng.normal_tensor(&[out_dim, in_dim], LINEAR_INIT_STD));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|id| g.param(store, id));
        g.linear(x, w, b)
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// 2-D convolution, optionally depthwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    /// Kaiming-normal weight (fan-out), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_out = out_ch * kernel * kernel;
        let std = libm::sqrt(2.0 / fan_out as f64);
        let weight = store.add(
            format!("{name}.weight"),
            group,
            rng.normal_tensor(&[out_ch, in_ch, kernel, kernel], std),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
            depthwise: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depthwise<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        channels: usize,
        kernel: usize,
        pad: usize,
    ) -> Self {
        let std = libm::sqrt(2.0 / (kernel * kernel) as f64);
        let weight = store.add(
            format!("{name}.weight"),
            group,
            rng.normal_tensor(&[channels, 1, kernel, kernel], std),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[channels]));
        Self {
            weight,
            bias,
            stride: 1,
            pad,
            depthwise: true,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.depthwise {
            g.depthwise_conv2d(x, w, Some(b), self.stride, self.pad)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.pad)
        }
    }
}

/// Layer normalization over the trailing extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-6;

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta, T::c(NORM_EPS))
    }

    /// Normalizes the channel axis of a `[B,C,H,W]` map.
    pub fn forward_map<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w) = {
            let s = g.shape(x);
            (s[2], s[3])
        };
        let t = g.to_tokens(x)?;
        let t = self.forward(g, store, t)?;
        g.to_map(t, h, w)
    }
}

pub(crate) fn child(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}
