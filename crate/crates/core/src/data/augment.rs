//! Training-time augmentation: 90° rotations, horizontal flips and color
//! jitter.

use std::f64::consts::FRAC_PI_2;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{map_object, Chip, Image};
use crate::geometry::Point2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub flip: bool,
    /// Half-width of the multiplicative brightness/contrast/saturation jitter.
    pub color_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
            color_jitter: 0.2,
        }
    }
}

/// Concrete factors of one color distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

/// A fully specified augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Number of 90° counter-clockwise turns.
    pub quarter_turns: u8,
    pub flip: bool,
    pub color: Option<ColorJitter>,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        flip: false,
        color: None,
    };

    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let quarter_turns = if policy.rotate { rng.random_range(0..4u8) } else { 0 };
        let flip = policy.flip && rng.random_bool(0.5);
        let j = policy.color_jitter as f32;
        let color = (j > 0.0).then(|| ColorJitter {
            brightness: rng.random_range(1.0 - j..=1.0 + j),
            contrast: rng.random_range(1.0 - j..=1.0 + j),
            saturation: rng.random_range(1.0 - j..=1.0 + j),
        });
        Self {
            quarter_turns,
            flip,
            color,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(chip: &Chip, policy: &AugmentPolicy, rng: &mut R) -> Chip {
    apply_augment(chip, AugmentParams::sample(policy, rng))
}

pub fn apply_augment(chip: &Chip, params: AugmentParams) -> Chip {
    let mut out = chip.clone();
    for _ in 0..params.quarter_turns % 4 {
        out = rotate_ccw(&out);
    }
    if params.flip {
        out = flip_horizontal(&out);
    }
    if let Some(c) = params.color {
        color_distort(&mut out.pixels, c);
    }
    out
}

/// One 90° counter-clockwise turn: `(x, y) ↦ (y, W − x)`.
fn rotate_ccw(chip: &Chip) -> Chip {
    let (h, w, _) = chip.pixels.dim();
    let mut pixels = Image::zeros((w, h, 3));
    for r in 0..w {
        for c in 0..h {
            for ch in 0..3 {
                pixels[[r, c, ch]] = chip.pixels[[c, w - 1 - r, ch]];
            }
        }
    }
    let wf = w as f64;
    let objects = chip
        .objects
        .iter()
        .map(|o| map_object(o, |p| Point2D::new(p.y, wf - p.x), |a| a - FRAC_PI_2, 1.0))
        .collect();
    Chip {
        pixels,
        objects,
        ..chip.clone()
    }
}

/// Mirror across the vertical axis: `x ↦ W − x`.
fn flip_horizontal(chip: &Chip) -> Chip {
    let (h, w, _) = chip.pixels.dim();
    let mut pixels = Image::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                pixels[[r, c, ch]] = chip.pixels[[r, w - 1 - c, ch]];
            }
        }
    }
    let wf = w as f64;
    let objects = chip
        .objects
        .iter()
        .map(|o| map_object(o, |p| Point2D::new(wf - p.x, p.y), |a| PI - a, 1.0))
        .collect();
    Chip {
        pixels,
        objects,
        ..chip.clone()
    }
}

fn color_distort(pixels: &mut Image, c: ColorJitter) {
    let gray = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let (h, w, _) = pixels.dim();
    let n = (h * w).max(1) as f32;
    let mut mean = 0.0f32;
    for px in pixels.rows() {
        let v = [px[0] * c.brightness, px[1] * c.brightness, px[2] * c.brightness];
        mean += gray(&v);
    }
    mean /= n;
    for mut px in pixels.rows_mut() {
        let mut v = [px[0], px[1], px[2]].map(|x| x * c.brightness);
        v = v.map(|x| (x - mean) * c.contrast + mean);
        let g = gray(&v);
        v = v.map(|x| g + (x - g) * c.saturation);
        for ch in 0..3 {
            px[ch] = v[ch].clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GroundTruthObject, HorizontalBox, SourceBox};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chip_with(objects: Vec<GroundTruthObject>, w: usize, h: usize) -> Chip {
        let mut pixels = Image::zeros((h, w, 3));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = ((i * 13) % 101) as f32 / 101.0;
        }
        Chip {
            pixels,
            origin: Point2D::new(0.0, 0.0),
            scale: 1.0,
            objects,
            gsd: None,
            sampled_class: None,
        }
    }

    fn marked(x: f64, y: f64, w: usize, h: usize) -> Chip {
        let mut chip = chip_with(vec![GroundTruthObject::from_center(Point2D::new(x, y), 0)], w, h);
        chip.pixels.fill(0.0);
        chip.pixels[[y.floor() as usize, x.floor() as usize, 0]] = 1.0;
        chip
    }

    fn marker(chip: &Chip) -> (usize, usize) {
        let (h, w, _) = chip.pixels.dim();
        for r in 0..h {
            for c in 0..w {
                if chip.pixels[[r, c, 0]] == 1.0 {
                    return (r, c);
                }
            }
        }
        panic!("no marker");
    }

    #[test]
    fn identity_params_change_nothing() {
        let chip = chip_with(vec![GroundTruthObject::from_center(Point2D::new(3.0, 4.0), 1)], 16, 16);
        let out = apply_augment(&chip, AugmentParams::IDENTITY);
        assert_eq!(out.pixels, chip.pixels);
        assert_eq!(out.objects, chip.objects);
    }

    #[test]
    fn quarter_turn_moves_coordinates_with_pixels() {
        for (x, y) in [(10.0, 20.0), (10.5, 20.5), (0.2, 99.7)] {
            let chip = marked(x, y, 100, 100);
            let out = apply_augment(&chip, AugmentParams { quarter_turns: 1, ..AugmentParams::IDENTITY });
            let (r, c) = marker(&out);
            let p = out.objects[0].center;
            assert!(p.x >= c as f64 && p.x <= c as f64 + 1.0, "{p:?} vs col {c}");
            assert!(p.y >= r as f64 && p.y <= r as f64 + 1.0, "{p:?} vs row {r}");
        }
        let chip = marked(10.0, 20.0, 100, 100);
        let out = apply_augment(&chip, AugmentParams { quarter_turns: 1, ..AugmentParams::IDENTITY });
        assert_eq!(out.objects[0].center, Point2D::new(20.0, 90.0));
    }

    #[test]
    fn non_square_rotation_and_flip_track_markers() {
        let chip = marked(30.5, 7.5, 64, 32);
        for k in 0..4 {
            for flip in [false, true] {
                let out = apply_augment(&chip, AugmentParams { quarter_turns: k, flip, color: None });
                let (r, c) = marker(&out);
                let p = out.objects[0].center;
                assert_eq!((p.x - 0.5, p.y - 0.5), (c as f64, r as f64), "k={k} flip={flip}");
            }
        }
    }

    #[test]
    fn flip_mirrors_x() {
        let chip = chip_with(vec![GroundTruthObject::from_center(Point2D::new(10.0, 5.0), 0)], 100, 100);
        let out = apply_augment(&chip, AugmentParams { flip: true, ..AugmentParams::IDENTITY });
        assert_eq!(out.objects[0].center, Point2D::new(90.0, 5.0));
    }

    #[test]
    fn boxes_follow_their_centers() {
        let b = HorizontalBox::new(10.0, 20.0, 30.0, 26.0).unwrap();
        let chip = chip_with(vec![GroundTruthObject::from_box(SourceBox::Horizontal(b), 0)], 64, 48);
        for k in 0..4 {
            let out = apply_augment(&chip, AugmentParams { quarter_turns: k, flip: true, color: None });
            let o = out.objects[0];
            assert!(o.source_box.unwrap().center().distance(&o.center) < 1e-9);
            assert!((o.horizontal_box().unwrap().area() - b.area()).abs() < 1e-9);
        }
    }

    #[test]
    fn random_augment_preserves_class_multiset() {
        let objs: Vec<_> = (0..6)
            .map(|i| GroundTruthObject::from_center(Point2D::new(5.0 + i as f64 * 7.0, 9.0), (i % 3) as u32))
            .collect();
        let chip = chip_with(objs, 48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let out = augment(&chip, &AugmentPolicy::default(), &mut rng);
            let mut a: Vec<u32> = out.objects.iter().map(|o| o.class_id).collect();
            let mut b: Vec<u32> = chip.objects.iter().map(|o| o.class_id).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
