use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// 2-D convolution with optional bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialised `kernel×kernel` convolution with zero bias.
    pub fn he<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f32;
        Self::normal(store, name, c_in, c_out, kernel, stride, (2.0 / fan_in).sqrt(), 0.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn normal<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        std: f32,
        bias: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std, rng);
        let bias = Some(store.add_constant(format!("{name}.bias"), &[c_out], bias));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer over `R×D` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn normal<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[d_out, d_in], std, rng),
            bias: store.add_constant(format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    pub fn he<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::normal(store, name, d_in, d_out, (2.0 / d_in as f32).sqrt(), rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}
