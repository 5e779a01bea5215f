//! Detection interchange files, PR-curve CSVs and plain-text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{to_centerpoint, DetectionGeometry, PrCurve};
use crate::error::{Error, Result};
use crate::single_stage::Detection;

pub const DETECTIONS_FILE: &str = "detections.jsonl";

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub score: f64,
    #[serde(flatten)]
    pub geometry: DetectionGeometry,
}

impl DetectionRecord {
    pub fn from_detection(image_id: &str, d: &Detection) -> Self {
        let geometry = match d.hbox {
            Some(b) => DetectionGeometry::HBox {
                hbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            },
            None => DetectionGeometry::Center {
                center: [d.center.x, d.center.y],
            },
        };
        Self {
            image_id: image_id.to_owned(),
            class_id: d.class_id,
            score: d.score,
            geometry,
        }
    }

    /// The record reduced to a centerpoint detection.
    pub fn to_detection(&self) -> Detection {
        Detection {
            center: to_centerpoint(&self.geometry),
            class_id: self.class_id,
            score: self.score,
            hbox: None,
        }
    }
}

pub fn write_detections(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a detections file and groups centerpoint detections by image id.
pub fn read_detections(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Detection>>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.entry(rec.image_id.clone()).or_default().push(rec.to_detection());
    }
    Ok(out)
}

/// `class_<id>.csv` per class with `recall,precision` rows.
pub fn write_pr_curves(dir: impl AsRef<Path>, prefix: &str, curves: &BTreeMap<u32, PrCurve>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (class, c) in curves {
        let mut s = String::from("recall,precision\n");
        for (r, p) in c.recall.iter().zip(&c.precision) {
            writeln!(s, "{r},{p}").unwrap();
        }
        std::fs::write(dir.join(format!("{prefix}class_{class}.csv")), s)?;
    }
    Ok(())
}

/// Aligned-column text table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: impl Into<String>, header: &[&str]) -> Self {
        Self {
            title: title.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let ncol = self.header.len().max(self.rows.iter().map(Vec::len).max().unwrap_or(0));
        let mut widths = vec![0usize; ncol];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let line = |row: &[String]| {
            let cells: Vec<String> = (0..ncol)
                .map(|i| {
                    let c = row.get(i).map_or("", String::as_str);
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_owned()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            writeln!(out, "{}", self.title).unwrap();
        }
        let head = line(&self.header);
        writeln!(out, "{head}").unwrap();
        writeln!(out, "{}", "-".repeat(head.chars().count())).unwrap();
        for r in &self.rows {
            writeln!(out, "{}", line(r)).unwrap();
        }
        for n in &self.notes {
            writeln!(out, "{n}").unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HorizontalBox, Point2D};

    #[test]
    fn records_round_trip_and_reduce_to_centers() {
        let dets = [
            Detection {
                center: Point2D::new(1.0, 2.0),
                class_id: 0,
                score: 0.5,
                hbox: None,
            },
            Detection {
                center: Point2D::new(5.0, 10.0),
                class_id: 2,
                score: 0.25,
                hbox: Some(HorizontalBox::new(0.0, 0.0, 10.0, 20.0).unwrap()),
            },
        ];
        let recs: Vec<_> = dets.iter().map(|d| DetectionRecord::from_detection("a", d)).collect();
        let line = serde_json::to_string(&recs[0]).unwrap();
        assert_eq!(line, r#"{"image_id":"a","class_id":0,"score":0.5,"center":[1.0,2.0]}"#);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(DETECTIONS_FILE);
        write_detections(&p, &recs).unwrap();
        let back = read_detections(&p).unwrap();
        assert_eq!(back["a"][1].center, Point2D::new(5.0, 10.0));
        assert_eq!(back["a"][0], dets[0]);

        let rbox: DetectionRecord =
            serde_json::from_str(r#"{"image_id":"b","class_id":1,"score":0.9,"rbox":[3,4,2,6,0.5]}"#).unwrap();
        assert_eq!(rbox.to_detection().center, Point2D::new(3.0, 4.0));
    }

    #[test]
    fn table_columns_align() {
        let mut t = Table::new("T", &["Detector", "mAP"]);
        t.push(vec!["a".into(), "60.68 (0.50)".into()]);
        t.push(vec!["longer name".into(), "1.00 (0.00)".into()]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1].len(), lines[3].len());
        assert!(lines[4].ends_with(" 1.00 (0.00)"));
    }
}
