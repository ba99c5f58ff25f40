//! Label conversion and training-set augmentation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::imaging::{Raster, CHANNELS};
use crate::par::{self, Exec};

/// Car labels are points; boxes are drawn at this ground size.
pub const DEFAULT_POINT_BOX_M: f64 = 3.0;
pub const DEFAULT_FOOTPRINT_COVERAGE: f64 = 0.9;
pub const DEFAULT_HSV_RANGE: (f64, f64) = (0.7, 1.3);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintLabel {
    pub polygon: Vec<(f64, f64)>,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

impl LabeledBox {
    pub fn new(class_id: u32, bbox: PixelBox) -> Self {
        LabeledBox { class_id, bbox }
    }
}

/// Square box of side `object_size_m / gsd` centred on the point, clipped to
/// the image.
pub fn point_to_box(p: &PointLabel, object_size_m: f64, gsd: f64, image_w: usize, image_h: usize) -> Result<PixelBox> {
    if !(object_size_m > 0.0 && object_size_m.is_finite()) {
        return Err(Error::invalid(format!("object size must be > 0, got {object_size_m}")));
    }
    if !(gsd > 0.0 && gsd.is_finite()) {
        return Err(Error::invalid(format!("gsd must be > 0, got {gsd}")));
    }
    let (w, h) = (image_w as f64, image_h as f64);
    if !(0.0..=w).contains(&p.x) || !(0.0..=h).contains(&p.y) {
        return Err(Error::invalid(format!("point ({}, {}) outside {image_w}x{image_h} image", p.x, p.y)));
    }
    let side = object_size_m / gsd;
    Ok(PixelBox::centered(p.x, p.y, side, side).clip(w, h))
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(p1, q1, q2))
        || (d2 == 0.0 && on_segment(p2, q1, q2))
        || (d3 == 0.0 && on_segment(q1, p1, p2))
        || (d4 == 0.0 && on_segment(q2, p1, p2))
}

/// Shoelace area (absolute).
pub fn polygon_area(polygon: &[(f64, f64)]) -> f64 {
    let n = polygon.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

impl FootprintLabel {
    pub fn validate(&self) -> Result<()> {
        let p = &self.polygon;
        let n = p.len();
        if n < 3 {
            return Err(Error::invalid(format!("footprint needs >= 3 vertices, got {n}")));
        }
        if p.iter().any(|v| !v.0.is_finite() || !v.1.is_finite()) {
            return Err(Error::invalid("footprint has non-finite vertices"));
        }
        if polygon_area(p) <= 0.0 {
            return Err(Error::invalid("footprint has zero area"));
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]) {
                    return Err(Error::invalid(format!("footprint edges {i} and {j} intersect")));
                }
            }
        }
        Ok(())
    }
}

/// Axis-aligned hull of the polygon with each side scaled by `coverage`
/// about its centre.
pub fn footprint_to_box(f: &FootprintLabel, coverage: f64) -> Result<PixelBox> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid(format!("coverage must be in (0, 1], got {coverage}")));
    }
    f.validate()?;
    let fold = |pick: fn(&(f64, f64)) -> f64| {
        f.polygon
            .iter()
            .map(pick)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|v| v.0);
    let (y0, y1) = fold(|v| v.1);
    let hull = PixelBox { xmin: x0, ymin: y0, xmax: x1, ymax: y1 };
    if coverage == 1.0 {
        return Ok(hull);
    }
    let (cx, cy) = hull.center();
    Ok(PixelBox::centered(cx, cy, hull.width() * coverage, hull.height() * coverage))
}

fn normalize_angle(angle_deg: f64) -> f64 {
    let a = angle_deg.rem_euclid(360.0);
    if (360.0 - a) < 1e-9 {
        0.0
    } else {
        a
    }
}

fn quarter_turns(a: f64) -> Option<u32> {
    let q = (a / 90.0).round();
    ((a - q * 90.0).abs() < 1e-9).then_some(q as u32 % 4)
}

/// Rotates the image counter-clockwise (as displayed) by `angle_deg` about
/// its centre on an expanded canvas. Boxes map through their four corners;
/// the axis-aligned hull is clipped to the canvas. Quarter turns are exact
/// pixel permutations; other angles use nearest-neighbour sampling with a
/// black fill.
pub fn rotate_sample(image: &Raster, boxes: &[LabeledBox], angle_deg: f64) -> Result<(Raster, Vec<LabeledBox>)> {
    if !angle_deg.is_finite() {
        return Err(Error::invalid(format!("angle must be finite, got {angle_deg}")));
    }
    let a = normalize_angle(angle_deg);
    let (w, h) = (image.width(), image.height());
    let (wf, hf) = (w as f64, h as f64);

    if let Some(q) = quarter_turns(a) {
        let (nw, nh) = if q % 2 == 1 { (h, w) } else { (w, h) };
        let mut out = vec![0u8; nw * nh * CHANNELS];
        for yp in 0..nh {
            for xp in 0..nw {
                let (sx, sy) = match q {
                    0 => (xp, yp),
                    1 => (w - 1 - yp, xp),
                    2 => (w - 1 - xp, h - 1 - yp),
                    _ => (yp, h - 1 - xp),
                };
                let i = (yp * nw + xp) * CHANNELS;
                out[i..i + CHANNELS].copy_from_slice(&image.pixel(sx, sy));
            }
        }
        let map = |b: &PixelBox| -> PixelBox {
            match q {
                0 => *b,
                1 => PixelBox { xmin: b.ymin, ymin: wf - b.xmax, xmax: b.ymax, ymax: wf - b.xmin },
                2 => PixelBox { xmin: wf - b.xmax, ymin: hf - b.ymax, xmax: wf - b.xmin, ymax: hf - b.ymin },
                _ => PixelBox { xmin: hf - b.ymax, ymin: b.xmin, xmax: hf - b.ymin, ymax: b.xmax },
            }
        };
        let boxes = boxes.iter().map(|l| LabeledBox::new(l.class_id, map(&l.bbox))).collect();
        return Ok((Raster::from_vec(nw, nh, out)?, boxes));
    }

    let (s, c) = a.to_radians().sin_cos();
    let nw = ((wf * c.abs() + hf * s.abs()) - 1e-6).ceil().max(1.0) as usize;
    let nh = ((wf * s.abs() + hf * c.abs()) - 1e-6).ceil().max(1.0) as usize;
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let (ncx, ncy) = (nw as f64 / 2.0, nh as f64 / 2.0);
    let forward = |x: f64, y: f64| -> (f64, f64) {
        let (dx, dy) = (x - cx, y - cy);
        (ncx + dx * c + dy * s, ncy - dx * s + dy * c)
    };

    let mut out = vec![0u8; nw * nh * CHANNELS];
    for yp in 0..nh {
        for xp in 0..nw {
            let (dx, dy) = (xp as f64 + 0.5 - ncx, yp as f64 + 0.5 - ncy);
            let sx = cx + dx * c - dy * s;
            let sy = cy + dx * s + dy * c;
            if sx >= 0.0 && sy >= 0.0 && sx < wf && sy < hf {
                let i = (yp * nw + xp) * CHANNELS;
                out[i..i + CHANNELS].copy_from_slice(&image.pixel(sx as usize, sy as usize));
            }
        }
    }
    let boxes = boxes
        .iter()
        .map(|l| {
            let b = &l.bbox;
            let corners = [
                forward(b.xmin, b.ymin),
                forward(b.xmax, b.ymin),
                forward(b.xmin, b.ymax),
                forward(b.xmax, b.ymax),
            ];
            let xs = corners.iter().map(|p| p.0);
            let ys = corners.iter().map(|p| p.1);
            let hull = PixelBox {
                xmin: xs.clone().fold(f64::INFINITY, f64::min),
                ymin: ys.clone().fold(f64::INFINITY, f64::min),
                xmax: xs.fold(f64::NEG_INFINITY, f64::max),
                ymax: ys.fold(f64::NEG_INFINITY, f64::max),
            };
            LabeledBox::new(l.class_id, hull.clip(nw as f64, nh as f64))
        })
        .collect();
    Ok((Raster::from_vec(nw, nh, out)?, boxes))
}

/// Quarter turns, or any angle in `[0, 360)` when `continuous`.
pub fn sample_angle(rng: &mut impl Rng, continuous: bool) -> f64 {
    if continuous {
        rng.random_range(0.0..360.0)
    } else {
        [0.0, 90.0, 180.0, 270.0][rng.random_range(0..4)]
    }
}

fn check_range(name: &str, r: (f64, f64)) -> Result<()> {
    if !(r.0 > 0.0 && r.1 <= 4.0 && r.0 <= r.1) {
        return Err(Error::invalid(format!("{name} range [{}, {}] must satisfy 0 < lo <= hi <= 4", r.0, r.1)));
    }
    Ok(())
}

fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|v| v as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Saturation and value factors drawn for `seed`.
pub fn hsv_factors(sat_range: (f64, f64), val_range: (f64, f64), seed: u64) -> Result<(f64, f64)> {
    check_range("saturation", sat_range)?;
    check_range("value", val_range)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: (f64, f64)| if r.0 == r.1 { r.0 } else { rng.random_range(r.0..=r.1) };
    let fs = draw(sat_range);
    let fv = draw(val_range);
    Ok((fs, fv))
}

/// Scales S and V by one factor each, drawn uniformly from the ranges;
/// hue is left alone.
pub fn hsv_jitter(image: &Raster, sat_range: (f64, f64), val_range: (f64, f64), seed: u64) -> Result<Raster> {
    let (fs, fv) = hsv_factors(sat_range, val_range, seed)?;
    Ok(apply_hsv(image, fs, fv))
}

fn apply_hsv(image: &Raster, fs: f64, fv: f64) -> Raster {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(CHANNELS) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        px.copy_from_slice(&hsv_to_rgb(h, (s * fs).min(1.0), (v * fv).min(1.0)));
    }
    out
}

/// `<class> <xc> <yc> <w> <h>` per box, normalized by the image size.
pub fn format_labels(boxes: &[LabeledBox], image_w: usize, image_h: usize) -> Result<String> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid("image dimensions must be >= 1"));
    }
    let (w, h) = (image_w as f64, image_h as f64);
    let frame = PixelBox { xmin: 0.0, ymin: 0.0, xmax: w, ymax: h };
    let mut out = String::new();
    for l in boxes {
        l.bbox.validate()?;
        if !frame.contains_box(&l.bbox) {
            return Err(Error::invalid(format!("box {:?} outside {image_w}x{image_h} image", l.bbox)));
        }
        let (cx, cy) = l.bbox.center();
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            l.class_id,
            cx / w,
            cy / h,
            l.bbox.width() / w,
            l.bbox.height() / h
        ));
    }
    Ok(out)
}

pub fn emit_labels(boxes: &[LabeledBox], image_w: usize, image_h: usize, path: &Path) -> Result<()> {
    let text = format_labels(boxes, image_w, image_h)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_labels(text: &str, image_w: usize, image_h: usize) -> Result<Vec<LabeledBox>> {
    let (w, h) = (image_w as f64, image_h as f64);
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: String| Error::Parse { segment: line.to_string(), message: format!("line {}: {m}", i + 1) };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let class_id: u32 = fields[0].parse().map_err(|e| bad(format!("class id: {e}")))?;
            let mut v = [0f64; 4];
            for (k, f) in fields[1..].iter().enumerate() {
                v[k] = f.parse().map_err(|e| bad(format!("field {}: {e}", k + 2)))?;
            }
            let b = PixelBox::centered(v[0] * w, v[1] * h, v[2] * w, v[3] * h);
            Ok(LabeledBox::new(class_id, b))
        })
        .collect()
}

/// One emitted training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub source: String,
    pub output: String,
    pub angle: f64,
    pub seed: u64,
    pub saturation_factor: f64,
    pub value_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOptions {
    pub continuous_angles: bool,
    pub sat_range: (f64, f64),
    pub val_range: (f64, f64),
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            continuous_angles: false,
            sat_range: DEFAULT_HSV_RANGE,
            val_range: DEFAULT_HSV_RANGE,
        }
    }
}

pub struct AugmentedSample {
    pub image: Raster,
    pub boxes: Vec<LabeledBox>,
    pub record: AugmentRecord,
}

/// Rotation plus HSV jitter for sample `i` with seed `base_seed + i`.
/// Output names are `<source>_aug<i>`.
pub fn augment_batch(
    samples: &[(String, Raster, Vec<LabeledBox>)],
    base_seed: u64,
    opts: &AugmentOptions,
    exec: Exec,
) -> Result<Vec<AugmentedSample>> {
    check_range("saturation", opts.sat_range)?;
    check_range("value", opts.val_range)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    par::map(exec, &idx, |&i| {
        let (source, image, boxes) = &samples[i];
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle = sample_angle(&mut rng, opts.continuous_angles);
        let (rotated, boxes) = rotate_sample(image, boxes, angle)?;
        let (fs, fv) = hsv_factors(opts.sat_range, opts.val_range, rng.random())?;
        Ok(AugmentedSample {
            image: apply_hsv(&rotated, fs, fv),
            boxes,
            record: AugmentRecord {
                source: source.clone(),
                output: format!("{source}_aug{i}"),
                angle,
                seed,
                saturation_factor: fs,
                value_factor: fv,
            },
        })
    })
    .into_iter()
    .collect()
}

pub fn write_manifest(records: &[AugmentRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::Schema(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> PixelBox {
        PixelBox { xmin: a, ymin: b, xmax: c, ymax: d }
    }

    fn gradient(w: usize, h: usize) -> Raster {
        let mut r = Raster::filled(w, h, [0, 0, 0]).unwrap();
        for y in 0..h {
            for x in 0..w {
                r.set_pixel(x, y, [(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        r
    }

    #[test]
    fn point_box_examples() {
        let p = PointLabel { x: 100.0, y: 100.0, class_id: 0 };
        assert_eq!(point_to_box(&p, 3.0, 0.3, 416, 416).unwrap(), bx(95.0, 95.0, 105.0, 105.0));
        let corner = PointLabel { x: 0.0, y: 0.0, class_id: 0 };
        assert_eq!(point_to_box(&corner, 3.0, 0.3, 416, 416).unwrap(), bx(0.0, 0.0, 5.0, 5.0));
        let b = point_to_box(&PointLabel { x: 50.0, y: 50.0, class_id: 0 }, 0.30, 0.15, 416, 416).unwrap();
        assert!((b.width() - 2.0).abs() < 1e-12);
        assert!(point_to_box(&p, 0.0, 0.3, 416, 416).is_err());
        assert!(point_to_box(&p, 3.0, 0.0, 416, 416).is_err());
    }

    #[test]
    fn footprint_examples() {
        let sq = |s: f64| FootprintLabel { polygon: vec![(0., 0.), (s, 0.), (s, s), (0., s)], class_id: 1 };
        assert_eq!(footprint_to_box(&sq(1.0), 1.0).unwrap(), bx(0., 0., 1., 1.));
        let b = footprint_to_box(&sq(10.0), 0.9).unwrap();
        for (got, want) in [(b.xmin, 0.5), (b.ymin, 0.5), (b.xmax, 9.5), (b.ymax, 9.5)] {
            assert!((got - want).abs() < 1e-12);
        }
        let l = FootprintLabel { polygon: vec![(0., 0.), (6., 0.), (6., 2.), (2., 2.), (2., 8.), (0., 8.)], class_id: 1 };
        assert_eq!(footprint_to_box(&l, 1.0).unwrap(), bx(0., 0., 6., 8.));

        let bowtie = FootprintLabel { polygon: vec![(0., 0.), (4., 4.), (4., 0.), (0., 4.)], class_id: 1 };
        assert!(footprint_to_box(&bowtie, 0.9).is_err());
        let line = FootprintLabel { polygon: vec![(0., 0.), (1., 1.), (2., 2.)], class_id: 1 };
        assert!(footprint_to_box(&line, 0.9).is_err());
        assert!(footprint_to_box(&sq(1.0), 0.0).is_err());
        assert!(footprint_to_box(&sq(1.0), 1.1).is_err());
    }

    #[test]
    fn rotation_examples() {
        let img = gradient(40, 30);
        let boxes = vec![LabeledBox::new(2, bx(3.0, 4.0, 10.0, 8.0))];
        let (same, b0) = rotate_sample(&img, &boxes, 0.0).unwrap();
        assert_eq!(same, img);
        assert_eq!(b0, boxes);

        let (r180, b180) = rotate_sample(&img, &boxes, 180.0).unwrap();
        assert_eq!(b180[0].bbox, bx(40.0 - 10.0, 30.0 - 8.0, 40.0 - 3.0, 30.0 - 4.0));
        assert_eq!(r180.pixel(0, 0), img.pixel(39, 29));

        let (r90, b90) = rotate_sample(&img, &boxes, 90.0).unwrap();
        assert_eq!((r90.width(), r90.height()), (30, 40));
        assert_eq!(b90[0].bbox.width(), boxes[0].bbox.height());
        assert_eq!(b90[0].bbox.height(), boxes[0].bbox.width());

        let (r360, b360) = rotate_sample(&img, &boxes, 360.0).unwrap();
        assert_eq!(r360, img);
        assert_eq!(b360, boxes);
    }

    #[test]
    fn quarter_turns_agree_with_general_path() {
        // -90 + 1e-7 takes the general path; its hull should sit on the exact one.
        let img = gradient(20, 12);
        let boxes = vec![LabeledBox::new(0, bx(2.0, 3.0, 9.0, 7.0))];
        let (_, exact) = rotate_sample(&img, &boxes, 270.0).unwrap();
        let (_, approx) = rotate_sample(&img, &boxes, 270.0 + 1e-6).unwrap();
        for (a, b) in [(exact[0].bbox.xmin, approx[0].bbox.xmin), (exact[0].bbox.ymax, approx[0].bbox.ymax)] {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn oblique_rotation_expands_canvas_and_keeps_boxes_inside() {
        let img = gradient(50, 20);
        let boxes = vec![LabeledBox::new(0, bx(0.0, 0.0, 50.0, 20.0))];
        let (r, b) = rotate_sample(&img, &boxes, 45.0).unwrap();
        let side = (70.0 / 2f64.sqrt()).ceil() as usize;
        assert_eq!((r.width(), r.height()), (side, side));
        let frame = bx(0.0, 0.0, r.width() as f64, r.height() as f64);
        assert!(frame.contains_box(&b[0].bbox));
    }

    #[test]
    fn hsv_examples() {
        let img = gradient(32, 32);
        let same = hsv_jitter(&img, (1.0, 1.0), (1.0, 1.0), 9).unwrap();
        assert!(same.data().iter().zip(img.data()).all(|(&a, &b)| (a as i32 - b as i32).abs() <= 1));
        assert!(hsv_jitter(&img, (1.0, 1.0), (0.0, 0.0), 9).is_err());
        assert!(hsv_jitter(&img, (1.0, 4.5), (1.0, 1.0), 9).is_err());
        let a = hsv_jitter(&img, DEFAULT_HSV_RANGE, DEFAULT_HSV_RANGE, 4).unwrap();
        let b = hsv_jitter(&img, DEFAULT_HSV_RANGE, DEFAULT_HSV_RANGE, 4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn hsv_keeps_gray_gray() {
        let img = Raster::filled(4, 4, [100, 100, 100]).unwrap();
        let out = hsv_jitter(&img, (2.0, 2.0), (0.5, 0.5), 1).unwrap();
        assert_eq!(out.pixel(0, 0), [50, 50, 50]);
    }

    #[test]
    fn label_examples() {
        let text = format_labels(&[LabeledBox::new(0, bx(95., 95., 105., 105.))], 416, 416).unwrap();
        assert_eq!(text, "0 0.240385 0.240385 0.024038 0.024038\n");
        let full = format_labels(&[LabeledBox::new(3, bx(0., 0., 416., 300.))], 416, 300).unwrap();
        assert_eq!(full, "3 0.500000 0.500000 1.000000 1.000000\n");
        assert_eq!(format_labels(&[], 416, 416).unwrap(), "");
        assert!(format_labels(&[LabeledBox::new(0, bx(400., 0., 420., 10.))], 416, 416).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        emit_labels(&[], 10, 10, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "");
        assert!(matches!(parse_labels("0 0.5 0.5", 10, 10), Err(Error::Parse { .. })));
    }

    #[test]
    fn augment_batch_is_seeded_per_sample() {
        let samples: Vec<_> = (0..4)
            .map(|i| (format!("s{i}"), gradient(16, 12), vec![LabeledBox::new(0, bx(1., 1., 5., 4.))]))
            .collect();
        let a = augment_batch(&samples, 100, &AugmentOptions::default(), Exec::Parallel).unwrap();
        let b = augment_batch(&samples, 100, &AugmentOptions::default(), Exec::Sequential).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.image, y.image);
        }
        assert_eq!(a[2].record.seed, 102);
        assert!([0.0, 90.0, 180.0, 270.0].contains(&a[1].record.angle));
    }

    fn arb_image_and_box() -> impl Strategy<Value = (Raster, LabeledBox)> {
        (2usize..24, 2usize..24).prop_flat_map(|(w, h)| {
            (0..w * 4, 0..h * 4, 1..w * 4, 1..h * 4, any::<u64>()).prop_map(move |(x, y, bw, bh, s)| {
                let q = |v: usize| v as f64 / 4.0;
                let (x0, y0) = (q(x), q(y));
                let b = bx(x0, y0, (x0 + q(bw)).min(w as f64), (y0 + q(bh)).min(h as f64));
                let mut img = Raster::filled(w, h, [0, 0, 0]).unwrap();
                for (i, v) in img.data_mut().iter_mut().enumerate() {
                    *v = (s.wrapping_mul(i as u64 + 1) >> 17) as u8;
                }
                (img, LabeledBox::new(1, b))
            })
        })
    }

    proptest! {
        #[test]
        fn four_quarter_turns_are_identity((img, b) in arb_image_and_box()) {
            let mut cur = (img.clone(), vec![b]);
            for _ in 0..4 {
                cur = rotate_sample(&cur.0, &cur.1, 90.0).unwrap();
            }
            prop_assert_eq!(cur.0, img);
            prop_assert_eq!(cur.1, vec![b]);
        }

        #[test]
        fn unclipped_point_box_is_centred(x in 10.0..400.0f64, y in 10.0..400.0f64, gsd in 0.15..3.0f64) {
            let b = point_to_box(&PointLabel { x, y, class_id: 0 }, 3.0, gsd, 4000, 4000).unwrap();
            let (cx, cy) = b.center();
            prop_assert!((cx - x).abs() < 1e-9 && (cy - y).abs() < 1e-9);
        }

        #[test]
        fn coverage_is_monotone(w in 1.0..100.0f64, h in 1.0..100.0f64, a in 0.01..1.0f64, b in 0.01..1.0f64) {
            let f = FootprintLabel { polygon: vec![(3., 4.), (3. + w, 4.), (3. + w, 4. + h), (3., 4. + h)], class_id: 1 };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(footprint_to_box(&f, hi).unwrap().contains_box(&footprint_to_box(&f, lo).unwrap()));
        }

        #[test]
        fn labels_round_trip(x in 0.0..300.0f64, y in 0.0..200.0f64, bw in 0.5..100.0f64, bh in 0.5..100.0f64, c in 0u32..5) {
            let (w, h) = (416usize, 300usize);
            let b = bx(x, y, (x + bw).min(w as f64), (y + bh).min(h as f64));
            let text = format_labels(&[LabeledBox::new(c, b)], w, h).unwrap();
            let back = parse_labels(&text, w, h).unwrap();
            prop_assert_eq!(back[0].class_id, c);
            // 6 decimals of a normalized value, scaled by the image size.
            let tol = 1e-5 * w as f64;
            prop_assert!((back[0].bbox.xmin - b.xmin).abs() <= tol && (back[0].bbox.ymax - b.ymax).abs() <= tol);
        }
    }
}
