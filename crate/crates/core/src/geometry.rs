//! Axis-aligned boxes, IOU, pixel/world transforms and deterministic NMS.
//!
//! Boxes use continuous half-open coordinates: a box covers
//! `[xmin, xmax) x [ymin, ymax)` and its area is `(xmax-xmin)*(ymax-ymin)`.
//! x grows to the right and y grows down.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl PixelBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = PixelBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        PixelBox {
            xmin: cx - width / 2.0,
            ymin: cy - height / 2.0,
            xmax: cx + width / 2.0,
            ymax: cy + height / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if self.xmin > self.xmax || self.ymin > self.ymax {
            return Err(Error::invalid(format!("inverted box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.xmin + self.xmax) / 2.0,
            (self.ymin + self.ymax) / 2.0,
        )
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PixelBox {
        PixelBox {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    pub fn scale(&self, factor: f64) -> PixelBox {
        PixelBox {
            xmin: self.xmin * factor,
            ymin: self.ymin * factor,
            xmax: self.xmax * factor,
            ymax: self.ymax * factor,
        }
    }

    /// Clip to `[0, width] x [0, height]`. A box entirely outside collapses to
    /// a zero-area box on the border.
    pub fn clip(&self, width: f64, height: f64) -> PixelBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        PixelBox {
            xmin: cx(self.xmin),
            ymin: cy(self.ymin),
            xmax: cx(self.xmax),
            ymax: cy(self.ymax),
        }
    }

    /// True when `other` lies inside `self` (shared edges allowed).
    pub fn contains_box(&self, other: &PixelBox) -> bool {
        other.xmin >= self.xmin
            && other.ymin >= self.ymin
            && other.xmax <= self.xmax
            && other.ymax <= self.ymax
    }

    pub(crate) fn key(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// Intersection over union. Zero for disjoint boxes and whenever the union
/// has no area (two degenerate boxes never match, even if identical).
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub scale_id: String,
    /// `(row, col)` pixel offset of the tile that produced this detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_origin: Option<(u32, u32)>,
}

impl Detection {
    pub fn new(class_id: u32, confidence: f64, bbox: PixelBox) -> Self {
        Detection {
            class_id,
            confidence,
            bbox,
            scale_id: String::new(),
            tile_origin: None,
        }
    }

    pub fn with_scale(mut self, scale_id: impl Into<String>) -> Self {
        self.scale_id = scale_id.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "confidence {} outside [0,1]",
                self.confidence
            )));
        }
        self.bbox.validate()
    }
}

/// Canonical order: confidence descending, then `(class_id, xmin, ymin, xmax,
/// ymax)` ascending, then provenance so that exact duplicates from different
/// tiles still sort the same way every run.
pub fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .key()
                .iter()
                .zip(b.bbox.key().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.scale_id.cmp(&b.scale_id))
        .then_with(|| a.tile_origin.cmp(&b.tile_origin))
}

pub fn sort_canonical(dets: &mut [Detection]) {
    dets.sort_by(canonical_cmp);
}

/// Uniform-grid bucket index over boxes. Two boxes with positive overlap
/// always share at least one cell, so a neighbourhood query never misses a
/// candidate with IOU > 0.
pub(crate) struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub(crate) fn new(cell: f64) -> Self {
        GridIndex {
            cell: if cell.is_finite() && cell > 0.0 { cell } else { 1.0 },
            buckets: HashMap::new(),
        }
    }

    /// Cell size from the median box extent of `boxes`.
    pub(crate) fn for_boxes<'a>(boxes: impl Iterator<Item = &'a PixelBox>) -> Self {
        let mut dims: Vec<f64> = boxes.map(|b| b.width().max(b.height())).collect();
        if dims.is_empty() {
            return GridIndex::new(1.0);
        }
        let mid = dims.len() / 2;
        dims.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        GridIndex::new(dims[mid].max(1.0) * 2.0)
    }

    fn cells(&self, b: &PixelBox) -> impl Iterator<Item = (i64, i64)> {
        // cap the span so a pathological giant box cannot allocate unbounded buckets
        const MAX_SPAN: i64 = 4096;
        let c = self.cell;
        let x0 = (b.xmin / c).floor() as i64;
        let y0 = (b.ymin / c).floor() as i64;
        let x1 = ((b.xmax / c).floor() as i64).min(x0 + MAX_SPAN);
        let y1 = ((b.ymax / c).floor() as i64).min(y0 + MAX_SPAN);
        (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
    }

    pub(crate) fn insert(&mut self, id: usize, b: &PixelBox) {
        let cells: Vec<_> = self.cells(b).collect();
        for key in cells {
            self.buckets.entry(key).or_default().push(id);
        }
    }

    /// Ids that may overlap `b`, deduplicated and in ascending order.
    pub(crate) fn candidates(&self, b: &PixelBox) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .cells(b)
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Greedy non-maximal suppression.
///
/// Detections are put in canonical order, then each one is kept unless a
/// previously kept detection (of the same class when `per_class`) overlaps
/// it with IOU strictly greater than `iou_threshold`. The output is in
/// canonical order and depends only on the input multiset.
pub fn nms(dets: &[Detection], iou_threshold: f64, per_class: bool) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!(
            "iou_threshold {iou_threshold} outside [0,1]"
        )));
    }
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| canonical_cmp(a, b));

    let mut index = GridIndex::for_boxes(sorted.iter().map(|d| &d.bbox));
    let mut kept: Vec<&Detection> = Vec::new();
    for det in sorted {
        let suppressed = index.candidates(&det.bbox).into_iter().any(|k| {
            let other = kept[k];
            (!per_class || other.class_id == det.class_id)
                && iou(&other.bbox, &det.bbox) > iou_threshold
        });
        if !suppressed {
            index.insert(kept.len(), &det.bbox);
            kept.push(det);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

/// North-up affine transform without rotation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub gsd: f64,
}

impl Default for GeoTransform {
    fn default() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            gsd: 1.0,
        }
    }
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, gsd: f64) -> Result<Self> {
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::invalid(format!("gsd must be > 0, got {gsd}")));
        }
        Ok(GeoTransform {
            origin_x,
            origin_y,
            gsd,
        })
    }

    pub fn pixel_to_world(&self, px: f64, py: f64) -> (f64, f64) {
        (
            self.origin_x + px * self.gsd,
            self.origin_y - py * self.gsd,
        )
    }

    pub fn world_to_pixel(&self, wx: f64, wy: f64) -> (f64, f64) {
        (
            (wx - self.origin_x) / self.gsd,
            (self.origin_y - wy) / self.gsd,
        )
    }
}

/// World-coordinate box. `ymin`/`ymax` are the world y of the pixel box's
/// `ymin`/`ymax` edges, so `ymin >= ymax` for north-up imagery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

pub fn pixel_to_geo(b: &PixelBox, t: &GeoTransform) -> GeoBox {
    let (xmin, ymin) = t.pixel_to_world(b.xmin, b.ymin);
    let (xmax, ymax) = t.pixel_to_world(b.xmax, b.ymax);
    GeoBox {
        xmin,
        ymin,
        xmax,
        ymax,
    }
}

pub fn geo_to_pixel(g: &GeoBox, t: &GeoTransform) -> PixelBox {
    let (xmin, ymin) = t.world_to_pixel(g.xmin, g.ymin);
    let (xmax, ymax) = t.world_to_pixel(g.xmax, g.ymax);
    PixelBox {
        xmin,
        ymin,
        xmax,
        ymax,
    }
}
