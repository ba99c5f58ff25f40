//! Moves per-chip detections into the parent image frame and merges the
//! global set with non-maximal suppression.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, pixel_to_geo, sort_canonical, Detection, GeoTransform, PixelBox};
use crate::imaging::ImageMeta;
use crate::tiler::TileSpec;

pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Detections for one image in its global pixel frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionBatch {
    pub image_name: String,
    pub detections: Vec<Detection>,
}

impl DetectionBatch {
    pub fn new(image_name: impl Into<String>, detections: Vec<Detection>) -> Self {
        DetectionBatch {
            image_name: image_name.into(),
            detections,
        }
    }
}

/// Merged, canonically ordered detections for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalDetectionSet {
    pub image_name: String,
    pub detections: Vec<Detection>,
}

/// Maps chip detections to the parent frame.
///
/// `tile` is expressed in the pixel frame the detector saw; when that frame
/// was downsampled by `downsample_factor`, both the box and the tile offset
/// are scaled back up: `(box + (col, row)) * factor`. The result is clipped
/// to `[0, image_w] x [0, image_h]` and tagged with the tile origin.
pub fn globalize(
    dets: &[Detection],
    tile: &TileSpec,
    downsample_factor: u32,
    image_w: usize,
    image_h: usize,
) -> Vec<Detection> {
    let f = downsample_factor.max(1) as f64;
    dets.iter()
        .map(|d| {
            let bbox = d
                .bbox
                .translate(tile.col as f64, tile.row as f64)
                .scale(f)
                .clip(image_w as f64, image_h as f64);
            Detection {
                bbox,
                tile_origin: Some((tile.row as u32, tile.col as u32)),
                ..d.clone()
            }
        })
        .collect()
}

/// Concatenates the batches, sorts canonically and applies per-class NMS.
/// The result does not depend on batch order or on the order of detections
/// within a batch.
pub fn merge(batches: &[DetectionBatch], nms_iou: f64) -> Result<GlobalDetectionSet> {
    let image_name = batches.first().map(|b| b.image_name.clone()).unwrap_or_default();
    if let Some(other) = batches.iter().find(|b| b.image_name != image_name) {
        return Err(Error::invalid(format!(
            "cannot merge detections from `{image_name}` and `{}`",
            other.image_name
        )));
    }
    let mut all: Vec<Detection> = batches.iter().flat_map(|b| b.detections.iter().cloned()).collect();
    sort_canonical(&mut all);
    let detections = nms(&all, nms_iou, true)?;
    Ok(GlobalDetectionSet {
        image_name,
        detections,
    })
}

/// One line of the detection JSON Lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    pub class_id: u32,
    pub class_name: String,
    pub confidence: f64,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub geo_xmin: f64,
    pub geo_ymin: f64,
    pub geo_xmax: f64,
    pub geo_ymax: f64,
    pub scale_id: String,
}

impl DetectionRecord {
    pub fn from_detection(image: &str, d: &Detection, transform: &GeoTransform) -> Self {
        let g = pixel_to_geo(&d.bbox, transform);
        DetectionRecord {
            image: image.to_string(),
            class_id: d.class_id,
            class_name: crate::class_name(d.class_id),
            confidence: d.confidence,
            xmin: d.bbox.xmin,
            ymin: d.bbox.ymin,
            xmax: d.bbox.xmax,
            ymax: d.bbox.ymax,
            geo_xmin: g.xmin,
            geo_ymin: g.ymin,
            geo_xmax: g.xmax,
            geo_ymax: g.ymax,
            scale_id: d.scale_id.clone(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let det = Detection {
            class_id: self.class_id,
            confidence: self.confidence,
            bbox: PixelBox::new(self.xmin, self.ymin, self.xmax, self.ymax)?,
            scale_id: self.scale_id.clone(),
            tile_origin: None,
        };
        det.validate()?;
        Ok(det)
    }
}

pub fn records(set: &GlobalDetectionSet, meta: &ImageMeta) -> Vec<DetectionRecord> {
    set.detections
        .iter()
        .map(|d| DetectionRecord::from_detection(&set.image_name, d, &meta.transform))
        .collect()
}

pub fn write_detections(set: &GlobalDetectionSet, meta: &ImageMeta, path: &Path) -> Result<()> {
    write_records(&records(set, meta), path)
}

pub fn write_records(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        rec.to_detection()
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a JSON Lines detection file, grouped by image in order of first
/// appearance.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionBatch>> {
    let mut batches: Vec<DetectionBatch> = Vec::new();
    for rec in read_records(path)? {
        let det = rec.to_detection()?;
        match batches.iter_mut().find(|b| b.image_name == rec.image) {
            Some(b) => b.detections.push(det),
            None => batches.push(DetectionBatch::new(rec.image, vec![det])),
        }
    }
    Ok(batches)
}

/// Per-image, per-class NMS directly on records, keeping each survivor's
/// original line (geo fields included). Images keep their order of first
/// appearance; records within an image come out in canonical order.
pub fn merge_records(records: &[DetectionRecord], nms_iou: f64) -> Result<Vec<DetectionRecord>> {
    let mut images: Vec<&str> = Vec::new();
    for r in records {
        if !images.contains(&r.image.as_str()) {
            images.push(&r.image);
        }
    }
    let key = |d: &Detection| {
        (
            d.class_id,
            d.confidence.to_bits(),
            d.bbox.key().map(f64::to_bits),
            d.scale_id.clone(),
        )
    };
    let mut out = Vec::new();
    for image in images {
        let mine: Vec<&DetectionRecord> = records.iter().filter(|r| r.image == image).collect();
        let dets = mine.iter().map(|r| r.to_detection()).collect::<Result<Vec<_>>>()?;
        let mut pool: HashMap<_, VecDeque<usize>> = HashMap::new();
        for (i, d) in dets.iter().enumerate() {
            pool.entry(key(d)).or_default().push_back(i);
        }
        for d in nms(&dets, nms_iou, true)? {
            let i = pool
                .get_mut(&key(&d))
                .and_then(|q| q.pop_front())
                .expect("nms returns input detections");
            out.push(mine[i].clone());
        }
    }
    Ok(out)
}

/// Same columns as the JSON Lines format.
pub fn write_detections_csv(set: &GlobalDetectionSet, meta: &ImageMeta, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    for r in records(set, meta) {
        w.serialize(r).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeoTransform;

    fn det(c: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> Detection {
        Detection::new(0, c, PixelBox::new(x0, y0, x1, y1).unwrap()).with_scale("s")
    }

    #[test]
    fn globalize_examples() {
        let d = vec![det(0.9, 10., 10., 20., 20.)];
        let origin = globalize(&d, &TileSpec::new(0, 0, 416, 416), 1, 5000, 5000);
        assert_eq!(origin[0].bbox, d[0].bbox);

        let g = globalize(&d, &TileSpec::new(1370, 1180, 416, 416), 1, 5000, 5000);
        assert_eq!(g[0].bbox, PixelBox::new(1190., 1380., 1200., 1390.).unwrap());
        assert_eq!(g[0].tile_origin, Some((1370, 1180)));

        let d = vec![det(0.9, 5., 5., 10., 10.)];
        let g = globalize(&d, &TileSpec::new(0, 0, 416, 416), 4, 5000, 5000);
        assert_eq!(g[0].bbox, PixelBox::new(20., 20., 40., 40.).unwrap());
    }

    #[test]
    fn globalize_clips_to_image() {
        let d = vec![det(0.9, 400., 400., 430., 430.)];
        let g = globalize(&d, &TileSpec::new(600, 600, 416, 416), 1, 1016, 1016);
        assert_eq!(g[0].bbox.xmax, 1016.0);
        assert_eq!(g[0].bbox.ymax, 1016.0);
    }

    #[test]
    fn duplicate_across_tiles_collapses() {
        let a = globalize(&[det(0.9, 400., 100., 410., 110.)], &TileSpec::new(0, 0, 416, 416), 1, 2000, 2000);
        let b = globalize(&[det(0.9, 47., 100., 57., 110.)], &TileSpec::new(0, 353, 416, 416), 1, 2000, 2000);
        let set = merge(&[DetectionBatch::new("img", a), DetectionBatch::new("img", b)], 0.5).unwrap();
        assert_eq!(set.detections.len(), 1);
        assert!(merge(&[], 0.5).unwrap().detections.is_empty());
    }

    #[test]
    fn merge_rejects_mixed_images() {
        let r = merge(&[DetectionBatch::new("a", vec![]), DetectionBatch::new("b", vec![])], 0.5);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn merge_is_order_independent() {
        let dets: Vec<Detection> = (0..30)
            .map(|i| det(0.5 + (i % 7) as f64 * 0.05, (i * 3) as f64, 0., (i * 3 + 10) as f64, 10.))
            .collect();
        let fwd = merge(&[DetectionBatch::new("x", dets.clone())], 0.3).unwrap();
        let mut rev = dets.clone();
        rev.reverse();
        let (a, b) = rev.split_at(11);
        let back = merge(&[DetectionBatch::new("x", b.to_vec()), DetectionBatch::new("x", a.to_vec())], 0.3).unwrap();
        assert_eq!(fwd, back);
    }

    #[test]
    fn jsonl_round_trip_and_geo_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let meta = ImageMeta::new("scene", GeoTransform::new(500.0, 800.0, 0.3).unwrap()).unwrap();
        let detections: Vec<Detection> = (0..10)
            .map(|i| det(0.1 * i as f64 + 0.01, i as f64 * 1.1, 0.3, i as f64 * 1.1 + 3.7, 9.123456789))
            .collect();
        let set = GlobalDetectionSet { image_name: "scene".into(), detections };
        write_detections(&set, &meta, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10);

        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].detections, set.detections);

        for r in read_records(&path).unwrap() {
            let g = pixel_to_geo(&PixelBox::new(r.xmin, r.ymin, r.xmax, r.ymax).unwrap(), &meta.transform);
            assert_eq!((r.geo_xmin, r.geo_ymin, r.geo_xmax, r.geo_ymax), (g.xmin, g.ymin, g.xmax, g.ymax));
            assert_eq!(r.class_name, "car");
        }
    }

    #[test]
    fn schema_violations_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"image\":\"x\"}\n").unwrap();
        assert_eq!(read_detections(&path).unwrap_err().code(), "schema");
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let meta = ImageMeta::with_gsd("scene", 0.5).unwrap();
        let set = GlobalDetectionSet { image_name: "scene".into(), detections: vec![det(0.9, 0., 0., 1., 1.)] };
        write_detections_csv(&set, &meta, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image,class_id,class_name,confidence,xmin"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn merge_records_keeps_original_lines() {
        let t = GeoTransform::new(1000.0, 2000.0, 0.5).unwrap();
        let a = DetectionRecord::from_detection("a", &det(0.9, 0., 0., 10., 10.), &t);
        let dup = DetectionRecord::from_detection("a", &det(0.8, 1., 0., 11., 10.), &t);
        let b = DetectionRecord::from_detection("b", &det(0.7, 0., 0., 10., 10.), &t);
        let merged = merge_records(&[b.clone(), dup, a.clone()], 0.5).unwrap();
        assert_eq!(merged, vec![b, a]);
    }

}
