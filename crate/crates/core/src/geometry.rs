//! Annotation geometry: centerpoints, horizontal and rotated boxes, and the
//! conversions between them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A point in continuous pixel coordinates. Pixel `(c, r)` covers
/// `[c, c + 1) × [r, r + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Image-aligned box with inclusive extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl HorizontalBox {
    /// Builds a box, rejecting inverted extremes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(invalid(format!(
                "inverted box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }

    /// Intersection over union; zero-area pairs have IoU 0.
    pub fn iou(&self, other: &HorizontalBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Object-aligned box. `angle` is kept in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub center: Point2D,
    pub width: f64,
    pub height: f64,
    pub angle: f64,
}

impl RotatedBox {
    pub fn new(center: Point2D, width: f64, height: f64, angle: f64) -> Result<Self> {
        if !(width >= 0.0 && height >= 0.0) {
            return Err(invalid(format!(
                "rotated box extents must be non-negative, got {width}×{height}"
            )));
        }
        if !angle.is_finite() || !center.is_finite() {
            return Err(invalid("rotated box must be finite"));
        }
        Ok(Self {
            center,
            width,
            height,
            angle: normalize_angle(angle),
        })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// The four corners, counter-clockwise from `(-w/2, -h/2)` in the box frame.
    pub fn corners(&self) -> [Point2D; 4] {
        let (s, c) = self.angle.sin_cos();
        let hw = 0.5 * self.width;
        let hh = 0.5 * self.height;
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(u, v)| {
            Point2D::new(
                self.center.x + c * u - s * v,
                self.center.y + s * u + c * v,
            )
        })
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// Either kind of box annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceBox {
    Horizontal(HorizontalBox),
    Rotated(RotatedBox),
}

impl SourceBox {
    pub fn center(&self) -> Point2D {
        box_center(self)
    }

    /// Area used for small / medium / large binning.
    pub fn area(&self) -> f64 {
        match self {
            SourceBox::Horizontal(b) => b.area(),
            SourceBox::Rotated(b) => b.area(),
        }
    }

    pub fn to_horizontal(&self) -> HorizontalBox {
        match self {
            SourceBox::Horizontal(b) => *b,
            SourceBox::Rotated(b) => rotated_to_horizontal(b),
        }
    }
}

/// A ground-truth annotation reduced to its centerpoint, with the original
/// box kept for size binning and the box baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub center: Point2D,
    pub class_id: u32,
    pub source_box: Option<SourceBox>,
}

impl GroundTruthObject {
    pub fn from_center(center: Point2D, class_id: u32) -> Self {
        Self {
            center,
            class_id,
            source_box: None,
        }
    }

    pub fn from_box(source: SourceBox, class_id: u32) -> Self {
        Self {
            center: source.center(),
            class_id,
            source_box: Some(source),
        }
    }

    /// Tightest horizontal box of the source annotation, if any.
    pub fn horizontal_box(&self) -> Option<HorizontalBox> {
        self.source_box.map(|b| b.to_horizontal())
    }
}

/// Tightest image-aligned box containing a rotated box.
pub fn rotated_to_horizontal(b: &RotatedBox) -> HorizontalBox {
    let (s, c) = b.angle.sin_cos();
    let (s, c) = (s.abs(), c.abs());
    let ex = 0.5 * (c * b.width + s * b.height);
    let ey = 0.5 * (s * b.width + c * b.height);
    HorizontalBox {
        x_min: b.center.x - ex,
        y_min: b.center.y - ey,
        x_max: b.center.x + ex,
        y_max: b.center.y + ey,
    }
}

/// Center of a box: midpoint of the extremes or the stored rotated center.
pub fn box_center(b: &SourceBox) -> Point2D {
    match b {
        SourceBox::Horizontal(h) => h.center(),
        SourceBox::Rotated(r) => r.center,
    }
}

/// Euclidean distance in pixels, or in meters when a GSD (m/px) is given.
pub fn center_distance(a: &Point2D, b: &Point2D, gsd: Option<f64>) -> Result<f64> {
    let d = a.distance(b);
    match gsd {
        None => Ok(d),
        Some(g) if g > 0.0 && g.is_finite() => Ok(d * g),
        Some(g) => Err(invalid(format!("gsd must be positive, got {g}"))),
    }
}

/// Fixed-size square window centered on a point.
pub fn impute_square_box(center: &Point2D, window_size: f64) -> Result<HorizontalBox> {
    if !(window_size > 0.0) {
        return Err(invalid(format!(
            "window size must be positive, got {window_size}"
        )));
    }
    let h = 0.5 * window_size;
    Ok(HorizontalBox {
        x_min: center.x - h,
        y_min: center.y - h,
        x_max: center.x + h,
        y_max: center.y + h,
    })
}
