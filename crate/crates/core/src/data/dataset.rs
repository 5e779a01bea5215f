//! On-disk datasets: a directory holding `annotations.jsonl` and the PNG
//! files it references (paths relative to the directory).

use std::path::Path;

use super::annotations::{load_annotations, write_annotations, BoxHandling};
use super::scene::{Image, LabeledScene};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

pub fn save_png(path: impl AsRef<Path>, pixels: &Image) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Validation("pixel buffer does not match image size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Image::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::Validation(e.to_string()))
}

/// Writes every scene's pixels to its `image_path` plus one annotation file.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[LabeledScene]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for s in scenes {
        let path = dir.join(&s.scene.image_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_png(&path, &s.pixels)?;
    }
    let anns: Vec<_> = scenes.iter().map(|s| s.scene.clone()).collect();
    write_annotations(dir.join(ANNOTATIONS_FILE), &anns)
}

pub fn load_dataset(dir: impl AsRef<Path>, handling: BoxHandling) -> Result<Vec<LabeledScene>> {
    let dir = dir.as_ref();
    load_annotations(dir.join(ANNOTATIONS_FILE), handling)?
        .into_iter()
        .map(|scene| {
            let pixels = load_png(dir.join(&scene.image_path))?;
            let (h, w, _) = pixels.dim();
            if (w, h) != (scene.width, scene.height) {
                return Err(Error::Validation(format!(
                    "{}: image is {w}×{h}, annotation says {}×{}",
                    scene.image_id, scene.width, scene.height
                )));
            }
            Ok(LabeledScene { scene, pixels })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_set, SyntheticSpec};

    #[test]
    fn dataset_round_trip_quantizes_to_8_bits() {
        let spec = SyntheticSpec {
            width: 40,
            height: 24,
            count_range: (1, 2),
            ..Default::default()
        };
        let scenes = generate_synthetic_set(&spec, 2, 3, "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let back = load_dataset(dir.path(), BoxHandling::Keep).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.scene, b.scene);
            let err = a.pixels.iter().zip(b.pixels.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
    }
}
