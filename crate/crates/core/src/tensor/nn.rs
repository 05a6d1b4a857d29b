//! Parameterized layers. Each layer owns only parameter names; values live
//! in a [`ParamStore`] and are bound per forward pass through a [`Graph`].

use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.init_uniform(&weight, &[cout, cin], cin, rng);
        store.insert(&bias, Tensor::zeros(&[cout]));
        Self { weight, bias, cin, cout }
    }

    /// Acts on axis 0 of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    scale: String,
    shift: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let scale = format!("{name}.scale");
        let shift = format!("{name}.shift");
        store.insert(&scale, Tensor::full(&[dim], 1.0));
        store.insert(&shift, Tensor::zeros(&[dim]));
        Self { scale, shift }
    }

    /// Normalizes over the channel axis (axis 0).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.param(&self.scale)?;
        let b = g.param(&self.shift)?;
        g.layer_norm(x, s, b, 0)
    }
}

/// Fully connected block: linear → GeLU → layer norm.
#[derive(Clone, Debug)]
pub struct FcBlock {
    linear: Linear,
    norm: LayerNorm,
}

impl FcBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, &format!("{name}.fc"), cin, cout),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn cout(&self) -> usize {
        self.linear.cout
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, x)?;
        let h = g.gelu(h);
        self.norm.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// 3×3 kernels get padding 1, 1×1 kernels padding 0.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.init_uniform(&weight, &[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        store.insert(&bias, Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// 3×3 stride-2 transposed convolution that exactly doubles the spatial size
/// (padding 1, output padding 1).
#[derive(Clone, Debug)]
pub struct Upsample2x {
    weight: String,
    bias: String,
}

impl Upsample2x {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.init_uniform(&weight, &[cout, cin, 3, 3], cin * 9 / 4, rng);
        store.insert(&bias, Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        g.deconv2d(x, w, Some(b), 2, 1, 1)
    }
}

/// Sets a convolution kernel to the identity map on the first `channels`
/// input channels (centre tap 1, everything else 0).
pub fn set_identity_kernel(store: &mut ParamStore, conv: &Conv2d, channels: usize) {
    let k = conv.kernel;
    let t = store.get_mut(conv.weight_name()).expect("registered conv weight");
    t.data_mut().fill(0.0);
    for c in 0..channels.min(conv.cout).min(conv.cin) {
        t.set(&[c, c, k / 2, k / 2], 1.0);
    }
}
