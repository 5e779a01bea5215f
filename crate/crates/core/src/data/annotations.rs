//! JSON-lines annotation files, one scene per line:
//!
//! ```json
//! {"image_id": "s0", "image_path": "images/s0.png", "width": 256, "height": 256,
//!  "gsd": null, "objects": [{"class_id": 0, "center": [12.5, 40.0]},
//!                           {"class_id": 1, "hbox": [0, 0, 10, 20]},
//!                           {"class_id": 2, "rbox": [30, 30, 8, 20, 0.5]}]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{GroundTruthObject, HorizontalBox, Point2D, RotatedBox, SourceBox};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObjectRecord {
    Center { class_id: u32, center: [f64; 2] },
    HBox { class_id: u32, hbox: [f64; 4] },
    RBox { class_id: u32, rbox: [f64; 5] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub gsd: Option<f64>,
    pub objects: Vec<ObjectRecord>,
}

/// How box annotations are turned into objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxHandling {
    /// Keep the source box alongside the derived centerpoint.
    #[default]
    Keep,
    /// Reduce to centerpoints and drop the extent.
    CentersOnly,
}

impl ObjectRecord {
    pub fn to_object(&self, handling: BoxHandling) -> Result<GroundTruthObject> {
        let obj = match *self {
            ObjectRecord::Center { class_id, center } => {
                GroundTruthObject::from_center(Point2D::new(center[0], center[1]), class_id)
            }
            ObjectRecord::HBox { class_id, hbox } => GroundTruthObject::from_box(
                SourceBox::Horizontal(HorizontalBox::new(hbox[0], hbox[1], hbox[2], hbox[3])?),
                class_id,
            ),
            ObjectRecord::RBox { class_id, rbox } => GroundTruthObject::from_box(
                SourceBox::Rotated(RotatedBox::new(
                    Point2D::new(rbox[0], rbox[1]),
                    rbox[2],
                    rbox[3],
                    rbox[4],
                )?),
                class_id,
            ),
        };
        Ok(match handling {
            BoxHandling::Keep => obj,
            BoxHandling::CentersOnly => GroundTruthObject {
                source_box: None,
                ..obj
            },
        })
    }

    pub fn from_object(o: &GroundTruthObject) -> Self {
        match o.source_box {
            None => ObjectRecord::Center {
                class_id: o.class_id,
                center: [o.center.x, o.center.y],
            },
            Some(SourceBox::Horizontal(h)) => ObjectRecord::HBox {
                class_id: o.class_id,
                hbox: [h.x_min, h.y_min, h.x_max, h.y_max],
            },
            Some(SourceBox::Rotated(r)) => ObjectRecord::RBox {
                class_id: o.class_id,
                rbox: [r.center.x, r.center.y, r.width, r.height, r.angle],
            },
        }
    }
}

impl SceneRecord {
    pub fn to_scene(&self, handling: BoxHandling) -> Result<Scene> {
        let objects = self
            .objects
            .iter()
            .map(|o| o.to_object(handling))
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene {
            image_id: self.image_id.clone(),
            image_path: self.image_path.clone(),
            width: self.width,
            height: self.height,
            gsd: self.gsd,
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn from_scene(s: &Scene) -> Self {
        Self {
            image_id: s.image_id.clone(),
            image_path: s.image_path.clone(),
            width: s.width,
            height: s.height,
            gsd: s.gsd,
            objects: s.objects.iter().map(ObjectRecord::from_object).collect(),
        }
    }
}

/// Parses annotation JSON lines; blank lines are skipped. Errors carry the
/// 1-based line number.
pub fn parse_annotations(text: &str, path: &Path, handling: BoxHandling) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        scenes.push(record.to_scene(handling).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}:{}: {m}", path.display(), i + 1)),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: other.to_string(),
            },
        })?);
    }
    Ok(scenes)
}

pub fn load_annotations(path: impl AsRef<Path>, handling: BoxHandling) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_annotations(&text, path, handling)
}

pub fn write_annotations(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, &SceneRecord::from_scene(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_4, SQRT_2};

    fn p() -> &'static Path {
        Path::new("mem.jsonl")
    }

    #[test]
    fn parses_mixed_object_kinds() {
        let line = r#"{"image_id":"a","image_path":"a.png","width":100,"height":80,"gsd":0.3,"objects":[{"class_id":0,"center":[5,5]},{"class_id":1,"hbox":[0,0,10,20]}]}"#;
        let scenes = parse_annotations(line, p(), BoxHandling::Keep).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].objects.len(), 2);
        assert_eq!(scenes[0].objects[1].center, Point2D::new(5.0, 10.0));
        assert_eq!(scenes[0].gsd, Some(0.3));
    }

    #[test]
    fn empty_file_yields_no_scenes() {
        assert!(parse_annotations("", p(), BoxHandling::Keep).unwrap().is_empty());
    }

    #[test]
    fn rotated_record_derives_horizontal_hull() {
        let line = format!(
            r#"{{"image_id":"r","image_path":"r.png","width":10,"height":10,"gsd":null,"objects":[{{"class_id":2,"rbox":[0,0,2,2,{FRAC_PI_4}]}}]}}"#
        );
        let scenes = parse_annotations(&line, p(), BoxHandling::Keep).unwrap();
        let h = scenes[0].objects[0].horizontal_box().unwrap();
        assert_abs_diff_eq!(h.x_min, -SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(h.y_max, SQRT_2, epsilon = 1e-12);

        let centers = parse_annotations(&line, p(), BoxHandling::CentersOnly).unwrap();
        assert!(centers[0].objects[0].source_box.is_none());
    }

    #[test]
    fn malformed_line_names_its_number() {
        let text = "\n{\"image_id\": 3}\n";
        match parse_annotations(text, p(), BoxHandling::Keep) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_center_is_rejected() {
        let line = r#"{"image_id":"a","image_path":"a.png","width":10,"height":10,"gsd":null,"objects":[{"class_id":0,"center":[11,5]}]}"#;
        assert!(matches!(
            parse_annotations(line, p(), BoxHandling::Keep),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let line = r#"{"image_id":"a","image_path":"a.png","width":100,"height":80,"gsd":null,"objects":[{"class_id":0,"center":[5,5]},{"class_id":1,"rbox":[50,40,10,4,1.0]}]}"#;
        let scenes = parse_annotations(line, p(), BoxHandling::Keep).unwrap();
        write_annotations(&path, &scenes).unwrap();
        assert_eq!(load_annotations(&path, BoxHandling::Keep).unwrap(), scenes);
    }
}
