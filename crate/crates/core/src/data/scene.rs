use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{GroundTruthObject, HorizontalBox, Point2D, RotatedBox, SourceBox};

/// `H×W×3` RGB image with values in `[0, 1]`.
pub type Image = Array3<f32>;

/// Annotations of one overhead image.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    /// Ground sample distance in meters per pixel.
    pub gsd: Option<f64>,
    pub objects: Vec<GroundTruthObject>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gsd {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Validation(format!(
                    "{}: gsd must be positive, got {g}",
                    self.image_id
                )));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            let c = o.center;
            if !c.is_finite()
                || c.x < 0.0
                || c.y < 0.0
                || c.x > self.width as f64
                || c.y > self.height as f64
            {
                return Err(Error::Validation(format!(
                    "{}: object {i} center ({}, {}) outside {}×{} image",
                    self.image_id, c.x, c.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Annotations per pixel.
    pub fn clutter_ratio(&self) -> f64 {
        self.objects.len() as f64 / (self.width * self.height).max(1) as f64
    }
}

/// A scene together with its pixels.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub scene: Scene,
    pub pixels: Image,
}

impl LabeledScene {
    /// The full scene as a chip at native scale.
    pub fn as_chip(&self) -> Chip {
        Chip {
            pixels: self.pixels.clone(),
            origin: Point2D::new(0.0, 0.0),
            scale: 1.0,
            objects: self.scene.objects.clone(),
            gsd: self.scene.gsd,
            sampled_class: None,
        }
    }
}

/// A training or inference window cut from a (resized) scene. Chip
/// coordinates relate to the source scene by `chip = (src − origin) · scale`.
#[derive(Debug, Clone)]
pub struct Chip {
    pub pixels: Image,
    pub origin: Point2D,
    pub scale: f64,
    pub objects: Vec<GroundTruthObject>,
    /// Effective meters per chip pixel, when the source GSD is known.
    pub gsd: Option<f64>,
    /// Class drawn by the class-balanced sampler, if that branch ran.
    pub sampled_class: Option<u32>,
}

impl Chip {
    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn to_source(&self, p: &Point2D) -> Point2D {
        Point2D::new(p.x / self.scale + self.origin.x, p.y / self.scale + self.origin.y)
    }

    /// Zero-pads bottom/right so both sides are multiples of `multiple`.
    pub fn padded_to_multiple(&self, multiple: usize) -> Chip {
        let (h, w, _) = self.pixels.dim();
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut pixels = Image::zeros((ph, pw, 3));
        pixels
            .slice_mut(ndarray::s![..h, ..w, ..])
            .assign(&self.pixels);
        Chip {
            pixels,
            ..self.clone()
        }
    }
}

/// Applies `p ↦ f(p)` to an object's center and box. Rotated boxes get
/// `angle ↦ angle_map(angle)` and extents scaled by `extent_scale`.
pub(crate) fn map_object(
    o: &GroundTruthObject,
    f: impl Fn(Point2D) -> Point2D,
    angle_map: impl Fn(f64) -> f64,
    extent_scale: f64,
) -> GroundTruthObject {
    let source_box = o.source_box.map(|b| match b {
        SourceBox::Horizontal(h) => {
            let a = f(Point2D::new(h.x_min, h.y_min));
            let c = f(Point2D::new(h.x_max, h.y_max));
            SourceBox::Horizontal(HorizontalBox {
                x_min: a.x.min(c.x),
                y_min: a.y.min(c.y),
                x_max: a.x.max(c.x),
                y_max: a.y.max(c.y),
            })
        }
        SourceBox::Rotated(r) => SourceBox::Rotated(RotatedBox {
            center: f(r.center),
            width: r.width * extent_scale,
            height: r.height * extent_scale,
            angle: crate::geometry::normalize_angle(angle_map(r.angle)),
        }),
    });
    GroundTruthObject {
        center: f(o.center),
        class_id: o.class_id,
        source_box,
    }
}
