//! Small strided convolutional backbone with a two-level feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Chip;
use crate::nn::{Conv2d, Graph, ParamStore, Tensor, Var};

/// Output strides of the pyramid levels, finest first.
pub const PYRAMID_STRIDES: [usize; 2] = [8, 16];
/// Chips fed to [`Backbone::forward`] need sides divisible by this.
pub const MAX_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Base channel width; stages use `w/2, w, w, 2w, 2w, 4w, 4w`.
    pub width: usize,
    /// Channels of every pyramid level.
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 16,
            fpn_channels: 32,
        }
    }
}

/// One pyramid level: a `N×C×H×W` feature map on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    pub feature: Var,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Conv2d>,
    lateral: [Conv2d; 2],
    output: [Conv2d; 2],
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut R) -> Self {
        let w = cfg.width.max(2);
        let plan = [
            (w / 2, 2),
            (w, 2),
            (w, 1),
            (2 * w, 2),
            (2 * w, 1),
            (4 * w, 2),
            (4 * w, 1),
        ];
        let mut c_in = 3;
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_out, stride))| {
                let conv = Conv2d::he(store, &format!("backbone.conv{i}"), c_in, c_out, 3, stride, rng);
                c_in = c_out;
                conv
            })
            .collect();
        let f = cfg.fpn_channels;
        let uniform = |store: &mut ParamStore, name: &str, c_in: usize, k: usize, rng: &mut R| {
            let std = (1.0 / (c_in * k * k) as f32).sqrt();
            Conv2d::normal(store, name, c_in, f, k, 1, std, 0.0, rng)
        };
        let lateral = [
            uniform(store, "fpn.lateral3", 2 * w, 1, rng),
            uniform(store, "fpn.lateral4", 4 * w, 1, rng),
        ];
        let output = [
            uniform(store, "fpn.output3", f, 3, rng),
            uniform(store, "fpn.output4", f, 3, rng),
        ];
        Self {
            stages,
            lateral,
            output,
            config: cfg,
        }
    }

    /// Features at strides 8 and 16 from an `N×3×H×W` input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> FeaturePyramid {
        let mut h = x;
        let mut c5 = None;
        for (i, conv) in self.stages.iter().enumerate() {
            let y = conv.forward(g, store, h);
            h = g.relu(y);
            if i == 4 {
                c5 = Some(h);
            }
        }
        let c5 = c5.expect("five stages");
        let top = self.lateral[1].forward(g, store, h);
        let lat = self.lateral[0].forward(g, store, c5);
        let up = g.upsample2x(top);
        let merged = g.add(lat, up);
        let p3 = self.output[0].forward(g, store, merged);
        let p4 = self.output[1].forward(g, store, top);
        FeaturePyramid {
            levels: vec![
                PyramidLevel {
                    feature: p3,
                    stride: PYRAMID_STRIDES[0],
                },
                PyramidLevel {
                    feature: p4,
                    stride: PYRAMID_STRIDES[1],
                },
            ],
        }
    }
}

/// Stacks same-sized chips into a centered `N×3×H×W` tensor.
pub fn chips_to_tensor(chips: &[&Chip]) -> Tensor {
    let (h, w) = (chips[0].height(), chips[0].width());
    let mut data = Vec::with_capacity(chips.len() * 3 * h * w);
    for chip in chips {
        assert_eq!((chip.height(), chip.width()), (h, w), "batch chips differ in size");
        for ch in 0..3 {
            for r in 0..h {
                for c in 0..w {
                    data.push(chip.pixels[[r, c, ch]] - 0.5);
                }
            }
        }
    }
    Tensor::from_vec(&[chips.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::geometry::Point2D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn blank_chip(h: usize, w: usize) -> Chip {
        Chip {
            pixels: Image::from_elem((h, w, 3), 0.25),
            origin: Point2D::new(0.0, 0.0),
            scale: 1.0,
            objects: vec![],
            gsd: None,
            sampled_class: None,
        }
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        let chip = blank_chip(64, 96);
        let mut g = Graph::new(false);
        let x = g.input(chips_to_tensor(&[&chip, &chip]));
        let p = bb.forward(&mut g, &store, x);
        assert_eq!(g.value(p.levels[0].feature).shape(), &[2, 32, 8, 12]);
        assert_eq!(g.value(p.levels[1].feature).shape(), &[2, 32, 4, 6]);
    }
}
