//! Rendered overhead-style scenes: colored shapes on a textured background.
//!
//! A spec file is TOML, every key optional:
//!
//! ```toml
//! width = 256
//! height = 256
//! gsd = 0.3                 # meters/pixel, omit for unknown
//! count_range = [8, 20]     # inclusive, ignored when `count` or `clutter_ratio` is set
//! # count = 25
//! # clutter_ratio = 0.0002  # objects per pixel, count = floor(r * width * height)
//! min_separation = 12.0     # minimum center distance in pixels
//! max_overlap = 0.1         # maximum IoU between horizontal boxes
//! max_attempts = 400        # placement attempts per object
//! pixel_noise = 0.03
//! texture_strength = 0.12
//!
//! [[classes]]
//! shape = "disk"            # disk | square | rectangle
//! color = [0.85, 0.2, 0.15]
//! size_range = [12.0, 30.0] # diameter / side / long side
//! aspect_range = [1.0, 1.0] # short/long side ratio, rectangles only
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{Image, LabeledScene, Scene};
use crate::error::{Error, Result};
use crate::geometry::{GroundTruthObject, HorizontalBox, Point2D, RotatedBox, SourceBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    /// Axis-aligned square.
    Square,
    /// Rectangle at a uniformly random orientation.
    Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    pub size_range: (f64, f64),
    #[serde(default = "unit_aspect")]
    pub aspect_range: (f64, f64),
}

fn unit_aspect() -> (f64, f64) {
    (1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub gsd: Option<f64>,
    pub count: Option<usize>,
    pub count_range: (usize, usize),
    pub clutter_ratio: Option<f64>,
    pub min_separation: f64,
    pub max_overlap: f64,
    pub max_attempts: usize,
    pub pixel_noise: f32,
    pub texture_strength: f32,
    pub classes: Vec<ClassSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            gsd: None,
            count: None,
            count_range: (8, 20),
            clutter_ratio: None,
            min_separation: 12.0,
            max_overlap: 0.1,
            max_attempts: 400,
            pixel_noise: 0.03,
            texture_strength: 0.12,
            classes: vec![
                ClassSpec {
                    shape: Shape::Disk,
                    color: [0.85, 0.2, 0.15],
                    size_range: (12.0, 30.0),
                    aspect_range: unit_aspect(),
                },
                ClassSpec {
                    shape: Shape::Square,
                    color: [0.2, 0.75, 0.25],
                    size_range: (12.0, 28.0),
                    aspect_range: unit_aspect(),
                },
                ClassSpec {
                    shape: Shape::Rectangle,
                    color: [0.2, 0.35, 0.9],
                    size_range: (20.0, 40.0),
                    aspect_range: (0.25, 0.45),
                },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.count_range.0 > self.count_range.1 {
            return bad(format!("count_range {:?} is not ordered", self.count_range));
        }
        if let Some(r) = self.clutter_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("clutter_ratio must be non-negative, got {r}"));
            }
        }
        if let Some(g) = self.gsd {
            if !(g > 0.0) {
                return bad(format!("gsd must be positive, got {g}"));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            let (lo, hi) = c.size_range;
            let (alo, ahi) = c.aspect_range;
            if !(lo > 0.0 && lo <= hi) || !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
                return bad(format!("class {i}: invalid size or aspect range"));
            }
        }
        Ok(())
    }

    /// Object count for one scene: explicit count, then clutter ratio, then a
    /// uniform draw from `count_range`.
    pub fn draw_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if let Some(n) = self.count {
            n
        } else if let Some(r) = self.clutter_ratio {
            (r * (self.width * self.height) as f64).floor() as usize
        } else {
            rng.random_range(self.count_range.0..=self.count_range.1)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class_id: u32,
    shape: Shape,
    rbox: RotatedBox,
    hbox: HorizontalBox,
    color: [f32; 3],
}

impl Placed {
    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = x - self.rbox.center.x;
        let dy = y - self.rbox.center.y;
        match self.shape {
            Shape::Disk => {
                let r = self.rbox.width / 2.0;
                dx * dx + dy * dy <= r * r
            }
            Shape::Square | Shape::Rectangle => {
                let (s, c) = self.rbox.angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= self.rbox.width / 2.0 && v.abs() <= self.rbox.height / 2.0
            }
        }
    }

    fn object(&self) -> GroundTruthObject {
        let b = match self.shape {
            Shape::Rectangle => SourceBox::Rotated(self.rbox),
            _ => SourceBox::Horizontal(self.hbox),
        };
        GroundTruthObject::from_box(b, self.class_id)
    }
}

/// Renders one scene. The same spec and RNG state reproduce identical pixels
/// and annotations.
pub fn generate_synthetic_scene<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
    image_id: &str,
) -> Result<LabeledScene> {
    spec.validate()?;
    let n = spec.draw_count(rng);
    let placed = place_objects(spec, n, rng)?;
    let mut pixels = background(spec, rng);
    for p in &placed {
        paint(&mut pixels, p);
    }
    if spec.pixel_noise > 0.0 {
        let noise = Normal::new(0.0f32, spec.pixel_noise).expect("positive std");
        for v in pixels.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    let scene = Scene {
        image_id: image_id.to_string(),
        image_path: format!("images/{image_id}.png"),
        width: spec.width,
        height: spec.height,
        gsd: spec.gsd,
        objects: placed.iter().map(Placed::object).collect(),
    };
    scene.validate()?;
    Ok(LabeledScene { scene, pixels })
}

fn place_objects<R: Rng + ?Sized>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> Result<Vec<Placed>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for i in 0..n {
        let mut ok = false;
        for _ in 0..spec.max_attempts {
            let class_id = rng.random_range(0..spec.classes.len());
            let c = &spec.classes[class_id];
            let size = rng.random_range(c.size_range.0..=c.size_range.1);
            let (bw, bh, angle) = match c.shape {
                Shape::Disk | Shape::Square => (size, size, 0.0),
                Shape::Rectangle => {
                    let a = rng.random_range(c.aspect_range.0..=c.aspect_range.1);
                    (size, size * a, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
                }
            };
            let center = Point2D::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            let rbox = RotatedBox::new(center, bw, bh, angle)?;
            let hbox = crate::geometry::rotated_to_horizontal(&rbox);
            // keep shapes inside the image so every box is fully visible
            if hbox.x_min < 0.0 || hbox.y_min < 0.0 || hbox.x_max > w || hbox.y_max > h {
                continue;
            }
            let clash = placed.iter().any(|p| {
                p.rbox.center.distance(&center) < spec.min_separation || p.hbox.iou(&hbox) > spec.max_overlap
            });
            if clash {
                continue;
            }
            let jitter = |v: f32, rng: &mut R| (v + rng.random_range(-0.06f32..0.06)).clamp(0.0, 1.0);
            let color = [jitter(c.color[0], rng), jitter(c.color[1], rng), jitter(c.color[2], rng)];
            placed.push(Placed {
                class_id: class_id as u32,
                shape: c.shape,
                rbox,
                hbox,
                color,
            });
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Infeasible(format!(
                "placed {i} of {n} objects on a {}×{} image before running out of attempts",
                spec.width, spec.height
            )));
        }
    }
    Ok(placed)
}

/// Earth-toned base color modulated by two octaves of value noise.
fn background<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Image {
    let (w, h) = (spec.width, spec.height);
    let base = [
        rng.random_range(0.38f32..0.52),
        rng.random_range(0.36f32..0.48),
        rng.random_range(0.30f32..0.42),
    ];
    let coarse = ValueNoise::new(w, h, 32, rng);
    let fine = ValueNoise::new(w, h, 8, rng);
    let mut img = Image::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let t = spec.texture_strength * (0.7 * coarse.at(c, r) + 0.3 * fine.at(c, r));
            for ch in 0..3 {
                img[[r, c, ch]] = (base[ch] + t).clamp(0.0, 1.0);
            }
        }
    }
    img
}

struct ValueNoise {
    cell: usize,
    cols: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new<R: Rng + ?Sized>(w: usize, h: usize, cell: usize, rng: &mut R) -> Self {
        let cols = w / cell + 2;
        let rows = h / cell + 2;
        let grid = (0..cols * rows).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { cell, cols, grid }
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let fx = x as f32 / self.cell as f32;
        let fy = y as f32 / self.cell as f32;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f32, fy - iy as f32);
        let g = |c: usize, r: usize| self.grid[r * self.cols + c];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Alpha-blends a shape using 3×3 supersampled coverage.
fn paint(img: &mut Image, p: &Placed) {
    let (h, w, _) = img.dim();
    let c0 = p.hbox.x_min.floor().max(0.0) as usize;
    let r0 = p.hbox.y_min.floor().max(0.0) as usize;
    let c1 = (p.hbox.x_max.ceil() as usize).min(w);
    let r1 = (p.hbox.y_max.ceil() as usize).min(h);
    for r in r0..r1 {
        for c in c0..c1 {
            let mut hits = 0u32;
            for sy in 0..3 {
                for sx in 0..3 {
                    let x = c as f64 + (sx as f64 + 0.5) / 3.0;
                    let y = r as f64 + (sy as f64 + 0.5) / 3.0;
                    hits += p.covers(x, y) as u32;
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f32 / 9.0;
            for ch in 0..3 {
                let v = &mut img[[r, c, ch]];
                *v = *v * (1.0 - a) + p.color[ch] * a;
            }
        }
    }
}

/// Generates `n` scenes named `{prefix}{index:05}`; scene `i` draws from its
/// own stream seeded by `seed` and `i`.
pub fn generate_synthetic_set(spec: &SyntheticSpec, n: usize, seed: u64, prefix: &str) -> Result<Vec<LabeledScene>> {
    use rand::SeedableRng;
    (0..n)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_synthetic_scene(spec, &mut rng, &format!("{prefix}{i:05}"))
        })
        .collect()
}
