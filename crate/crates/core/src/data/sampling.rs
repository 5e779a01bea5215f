//! Chip sampling with GSD-aware resizing.
//!
//! A chip is either a uniform random window of a uniform random scene, or a
//! window around a uniformly sampled instance of a uniformly sampled class.
//! The scene is resized before the window is cut: to a random target GSD
//! when the scene GSD is known, otherwise by a random scale factor.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{map_object, Chip, Image, LabeledScene};
use crate::error::{invalid, Error, Result};
use crate::geometry::Point2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    pub chip_size: usize,
    /// Probability of the uniform-random branch; the rest are class-balanced.
    pub random_fraction: f64,
    /// Target GSD range in m/px for scenes with known GSD.
    pub gsd_range: (f64, f64),
    /// Resize factor range for scenes without GSD.
    pub scale_range: (f64, f64),
    /// Declared class ids `0..n`; classes absent from the set are resampled.
    pub num_classes: Option<usize>,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            chip_size: 800,
            random_fraction: 0.5,
            gsd_range: (0.1, 0.15),
            scale_range: (0.667, 1.5),
            num_classes: None,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.chip_size == 0 {
            return Err(invalid("chip_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return Err(invalid("random_fraction must lie in [0, 1]"));
        }
        for (name, (lo, hi)) in [("gsd_range", self.gsd_range), ("scale_range", self.scale_range)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(invalid(format!("{name} must be positive and ordered")));
            }
        }
        Ok(())
    }
}

const CLASS_BALANCED_RETRIES: usize = 10;

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn draw_scale<R: Rng + ?Sized>(scene: &LabeledScene, policy: &SamplingPolicy, rng: &mut R) -> f64 {
    match scene.scene.gsd {
        Some(native) => native / uniform_in(rng, policy.gsd_range),
        None => uniform_in(rng, policy.scale_range),
    }
}

/// Draws one chip.
pub fn sample_chip<R: Rng + ?Sized>(
    scenes: &[LabeledScene],
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<Chip> {
    if scenes.is_empty() {
        return Err(Error::Empty("scene set".into()));
    }
    policy.validate()?;
    let random_branch = rng.random_bool(policy.random_fraction);
    if !random_branch {
        if let Some(chip) = sample_class_balanced(scenes, policy, rng)? {
            return Ok(chip);
        }
    }
    let si = rng.random_range(0..scenes.len());
    let scene = &scenes[si];
    let scale = draw_scale(scene, policy, rng);
    let (rw, rh) = resized_dims(scene, scale);
    let u = rng.random_range(0..=rw.saturating_sub(policy.chip_size));
    let v = rng.random_range(0..=rh.saturating_sub(policy.chip_size));
    Ok(cut_window(scene, scale, u, v, policy.chip_size))
}

fn resized_dims(scene: &LabeledScene, scale: f64) -> (usize, usize) {
    (
        (scene.scene.width as f64 * scale).floor() as usize,
        (scene.scene.height as f64 * scale).floor() as usize,
    )
}

/// `None` when the set holds no objects at all.
fn sample_class_balanced<R: Rng + ?Sized>(
    scenes: &[LabeledScene],
    policy: &SamplingPolicy,
    rng: &mut R,
) -> Result<Option<Chip>> {
    let mut by_class: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (si, s) in scenes.iter().enumerate() {
        for (oi, o) in s.scene.objects.iter().enumerate() {
            by_class.entry(o.class_id).or_default().push((si, oi));
        }
    }
    if by_class.is_empty() {
        return Ok(None);
    }
    let class = match policy.num_classes {
        Some(n) if n > 0 => loop {
            let c = rng.random_range(0..n) as u32;
            if by_class.contains_key(&c) {
                break c;
            }
        },
        _ => {
            let keys: Vec<u32> = by_class.keys().copied().collect();
            keys[rng.random_range(0..keys.len())]
        }
    };
    let instances = &by_class[&class];
    let (si, oi) = instances[rng.random_range(0..instances.len())];
    let scene = &scenes[si];
    let center = scene.scene.objects[oi].center;
    let chip = policy.chip_size;

    let window_range = |pos: f64, resized: usize| -> Option<(usize, usize)> {
        let p = pos.floor().max(0.0) as usize;
        let lo = (p + 1).saturating_sub(chip);
        let hi = p.min(resized.saturating_sub(chip));
        (lo <= hi).then_some((lo, hi))
    };

    let mut scale = draw_scale(scene, policy, rng);
    for _ in 0..CLASS_BALANCED_RETRIES {
        let (rw, rh) = resized_dims(scene, scale);
        let cx = center.x * scale;
        let cy = center.y * scale;
        if let (Some((ul, uh)), Some((vl, vh))) = (window_range(cx, rw), window_range(cy, rh)) {
            let u = rng.random_range(ul..=uh);
            let v = rng.random_range(vl..=vh);
            let mut chip = cut_window(scene, scale, u, v, chip);
            chip.sampled_class = Some(class);
            return Ok(Some(chip));
        }
        scale = draw_scale(scene, policy, rng);
    }
    // Fallback: window centred on the instance, padded with background.
    let cx = (center.x * scale - chip as f64 / 2.0).floor().max(0.0) as usize;
    let cy = (center.y * scale - chip as f64 / 2.0).floor().max(0.0) as usize;
    let mut out = cut_window(scene, scale, cx, cy, chip);
    out.sampled_class = Some(class);
    Ok(Some(out))
}

/// Cuts the `size×size` window whose top-left corner is `(u, v)` in
/// resized-scene pixels. Regions beyond the image are zero.
fn cut_window(
    scene: &LabeledScene,
    scale: f64,
    u: usize,
    v: usize,
    size: usize,
) -> Chip {
    let pixels = resample_window(&scene.pixels, scale, u, v, size, size);
    let origin = Point2D::new(u as f64 / scale, v as f64 / scale);
    let shift = |p: Point2D| Point2D::new((p.x - origin.x) * scale, (p.y - origin.y) * scale);
    let objects = scene
        .scene
        .objects
        .iter()
        .map(|o| map_object(o, shift, |a| a, scale))
        .filter(|o| {
            let c = o.center;
            c.x >= 0.0 && c.y >= 0.0 && c.x < size as f64 && c.y < size as f64
        })
        .collect();
    Chip {
        pixels,
        origin,
        scale,
        objects,
        gsd: scene.scene.gsd.map(|g| g / scale),
        sampled_class: None,
    }
}

/// Bilinear resampling of a window from `src` scaled by `scale`.
pub fn resample_window(
    src: &Image,
    scale: f64,
    u: usize,
    v: usize,
    out_w: usize,
    out_h: usize,
) -> Image {
    let (h, w, _) = src.dim();
    let mut out = Image::zeros((out_h, out_w, 3));
    if h == 0 || w == 0 {
        return out;
    }
    let src_s = src.as_standard_layout();
    let data = src_s.as_slice().expect("standard layout");
    let identity = scale == 1.0;
    for r in 0..out_h {
        let ys = (v + r) as f64 + 0.5;
        let y_src = ys / scale;
        if y_src >= h as f64 {
            break;
        }
        for c in 0..out_w {
            let xs = (u + c) as f64 + 0.5;
            let x_src = xs / scale;
            if x_src >= w as f64 {
                break;
            }
            if identity {
                let (sr, sc) = (v + r, u + c);
                for ch in 0..3 {
                    out[[r, c, ch]] = data[(sr * w + sc) * 3 + ch];
                }
                continue;
            }
            let fy = (y_src - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = (x_src - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ly, lx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            for ch in 0..3 {
                let a = data[(y0 * w + x0) * 3 + ch];
                let b = data[(y0 * w + x1) * 3 + ch];
                let cc = data[(y1 * w + x0) * 3 + ch];
                let d = data[(y1 * w + x1) * 3 + ch];
                out[[r, c, ch]] = (1.0 - ly) * ((1.0 - lx) * a + lx * b) + ly * ((1.0 - lx) * cc + lx * d);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::Scene;
    use crate::geometry::GroundTruthObject;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(id: &str, w: usize, h: usize, gsd: Option<f64>, objs: &[(f64, f64, u32)]) -> LabeledScene {
        let mut pixels = Image::zeros((h, w, 3));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = ((i * 31) % 97) as f32 / 97.0;
        }
        LabeledScene {
            scene: Scene {
                image_id: id.into(),
                image_path: String::new(),
                width: w,
                height: h,
                gsd,
                objects: objs
                    .iter()
                    .map(|&(x, y, c)| GroundTruthObject::from_center(Point2D::new(x, y), c))
                    .collect(),
            },
            pixels,
        }
    }

    #[test]
    fn unit_scale_random_chip_is_the_whole_scene() {
        let s = scene("a", 800, 800, None, &[(100.0, 200.0, 0)]);
        let policy = SamplingPolicy {
            random_fraction: 1.0,
            scale_range: (1.0, 1.0),
            ..Default::default()
        };
        let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(chip.pixels, s.pixels);
        assert_eq!(chip.objects, s.scene.objects);
        assert_eq!(chip.origin, Point2D::new(0.0, 0.0));
    }

    #[test]
    fn random_chip_with_resizing_is_a_crop() {
        let s = scene("a", 800, 800, None, &[(400.0, 400.0, 0)]);
        let policy = SamplingPolicy { random_fraction: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut rng).unwrap();
            assert_eq!(chip.pixels.dim(), (800, 800, 3));
            assert!(chip.scale >= 0.667 && chip.scale <= 1.5);
        }
    }

    #[test]
    fn class_balanced_branch_contains_the_lone_object() {
        let s = scene("a", 2000, 1500, None, &[(1234.5, 987.25, 3)]);
        let policy = SamplingPolicy { random_fraction: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut rng).unwrap();
            assert_eq!(chip.objects.len(), 1);
            assert_eq!(chip.sampled_class, Some(3));
            let back = chip.to_source(&chip.objects[0].center);
            assert!(back.distance(&s.scene.objects[0].center) < 0.5);
        }
    }

    #[test]
    fn small_images_are_padded_bottom_right() {
        let s = scene("tiny", 300, 200, None, &[(150.0, 100.0, 0)]);
        let policy = SamplingPolicy { random_fraction: 0.0, scale_range: (1.0, 1.0), ..Default::default() };
        let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(chip.origin, Point2D::new(0.0, 0.0));
        assert_eq!(chip.pixels[[199, 299, 0]], s.pixels[[199, 299, 0]]);
        assert_eq!(chip.pixels[[200, 10, 1]], 0.0);
        assert_eq!(chip.pixels[[10, 300, 2]], 0.0);
        assert_eq!(chip.objects.len(), 1);
    }

    #[test]
    fn gsd_mode_hits_the_target_range() {
        let s = scene("g", 1200, 1200, Some(0.3), &[(600.0, 600.0, 0)]);
        let policy = SamplingPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut rng).unwrap();
            let g = chip.gsd.unwrap();
            assert!((0.1 - 1e-12..=0.15 + 1e-12).contains(&g), "{g}");
        }
    }

    #[test]
    fn empty_scene_set_is_an_error() {
        let policy = SamplingPolicy::default();
        assert!(matches!(
            sample_chip(&[], &policy, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn absent_declared_class_is_resampled() {
        let s = scene("a", 400, 400, None, &[(10.0, 10.0, 2)]);
        let policy = SamplingPolicy {
            chip_size: 64,
            random_fraction: 0.0,
            num_classes: Some(3),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let chip = sample_chip(std::slice::from_ref(&s), &policy, &mut rng).unwrap();
            assert_eq!(chip.sampled_class, Some(2));
        }
    }

    #[test]
    fn class_sampling_is_uniform_over_classes() {
        // Class A: one instance in its own scene. Class B: 99 instances.
        let a = scene("a", 256, 256, None, &[(128.0, 128.0, 0)]);
        let bs: Vec<(f64, f64, u32)> = (0..99)
            .map(|i| (5.0 + (i % 10) as f64 * 25.0, 5.0 + (i / 10) as f64 * 25.0, 1))
            .collect();
        let b = scene("b", 256, 256, None, &bs);
        let set = vec![a, b];
        let policy = SamplingPolicy {
            chip_size: 64,
            random_fraction: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                let chip = sample_chip(&set, &policy, &mut rng).unwrap();
                chip.objects.iter().any(|o| o.class_id == 0)
            })
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits - 0.5 * n as f64).abs() <= 3.0 * sigma, "hits = {hits}");
    }
}
