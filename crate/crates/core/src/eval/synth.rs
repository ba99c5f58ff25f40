use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Detection, PixelBox};
use crate::imaging::{Raster, CHANNELS};
use crate::par::{self, Exec};

/// Background noise values are drawn from this inclusive range.
pub const BACKGROUND_RANGE: (u8, u8) = (64, 127);
pub const OBJECT_RGB: [u8; 3] = [250, 250, 250];

const ATTEMPTS_PER_OBJECT: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Randomly placed objects, on top of `fixed`.
    pub n_objects: usize,
    pub object_px: usize,
    pub seed: u64,
    /// Boxes placed first, as given (e.g. straddling tile seams).
    pub fixed: Vec<PixelBox>,
    /// Random objects take a class drawn from this list.
    pub class_ids: Vec<u32>,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, n_objects: usize, object_px: usize, seed: u64) -> Self {
        SceneSpec {
            width,
            height,
            n_objects,
            object_px,
            seed,
            fixed: Vec::new(),
            class_ids: vec![0],
        }
    }
}

/// Noise raster with `n_objects` non-touching `object_px` squares.
pub fn synth_scene(width: usize, height: usize, n_objects: usize, object_px: usize, seed: u64) -> Result<(Raster, Vec<Detection>)> {
    synth_scene_with(&SceneSpec::new(width, height, n_objects, object_px, seed), Exec::Parallel)
}

/// Square occupancy grid keyed by cell; boxes are kept one pixel apart.
struct Occupancy {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<PixelBox>>,
}

impl Occupancy {
    fn keys(&self, b: &PixelBox) -> Vec<(i64, i64)> {
        let c = self.cell;
        let (x0, x1) = (((b.xmin - 1.0) / c).floor() as i64, ((b.xmax + 1.0) / c).floor() as i64);
        let (y0, y1) = (((b.ymin - 1.0) / c).floor() as i64, ((b.ymax + 1.0) / c).floor() as i64);
        (y0..=y1).flat_map(|y| (x0..=x1).map(move |x| (x, y))).collect()
    }

    fn clear(&self, b: &PixelBox) -> bool {
        let grown = PixelBox { xmin: b.xmin - 1.0, ymin: b.ymin - 1.0, xmax: b.xmax + 1.0, ymax: b.ymax + 1.0 };
        self.keys(b)
            .iter()
            .filter_map(|k| self.cells.get(k))
            .flatten()
            .all(|o| grown.intersection_area(o) <= 0.0)
    }

    fn insert(&mut self, b: PixelBox) {
        for k in self.keys(&b) {
            self.cells.entry(k).or_default().push(b);
        }
    }
}

fn background(width: usize, height: usize, seed: u64, exec: Exec) -> Result<Raster> {
    let stride = width * CHANNELS;
    let mut data = vec![0u8; height * stride];
    let (lo, hi) = BACKGROUND_RANGE;
    let span = (hi - lo) as u16 + 1;
    par::for_each_chunk_mut(exec, &mut data, stride, |y, row| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0000 ^ y as u64);
        rng.fill_bytes(row);
        for v in row.iter_mut() {
            *v = lo + ((*v as u16 * span) >> 8) as u8;
        }
    });
    Raster::from_vec(width, height, data)
}

/// Paints each box (rounded outward to whole pixels, clipped) in `rgb`.
pub fn render_boxes(r: &mut Raster, boxes: &[PixelBox], rgb: [u8; 3]) {
    let (w, h) = (r.width(), r.height());
    for b in boxes {
        let x0 = b.xmin.floor().max(0.0) as usize;
        let y0 = b.ymin.floor().max(0.0) as usize;
        let x1 = (b.xmax.ceil().max(0.0) as usize).min(w);
        let y1 = (b.ymax.ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                r.set_pixel(x, y, rgb);
            }
        }
    }
}

/// Deterministic per seed (and independent of `exec`). Fixed boxes are
/// accepted as given; random ones are placed by rejection sampling and fail
/// with `Infeasible` once the attempt budget runs out.
pub fn synth_scene_with(spec: &SceneSpec, exec: Exec) -> Result<(Raster, Vec<Detection>)> {
    if spec.object_px == 0 {
        return Err(Error::invalid("object_px must be >= 1"));
    }
    if spec.class_ids.is_empty() {
        return Err(Error::invalid("class_ids must not be empty"));
    }
    if spec.n_objects > 0 && (spec.object_px > spec.width || spec.object_px > spec.height) {
        return Err(Error::Infeasible(format!(
            "{} px objects do not fit a {}x{} scene",
            spec.object_px, spec.width, spec.height
        )));
    }
    let frame = PixelBox { xmin: 0.0, ymin: 0.0, xmax: spec.width as f64, ymax: spec.height as f64 };
    let mut occupancy = Occupancy { cell: (spec.object_px as f64 * 4.0).max(8.0), cells: HashMap::new() };
    let mut truth = Vec::with_capacity(spec.fixed.len() + spec.n_objects);
    for b in &spec.fixed {
        b.validate()?;
        if !frame.contains_box(b) {
            return Err(Error::invalid(format!("fixed box {b:?} lies outside the scene")));
        }
        occupancy.insert(*b);
        truth.push(Detection::new(spec.class_ids[0], 1.0, *b));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.object_px;
    let budget = ATTEMPTS_PER_OBJECT * spec.n_objects;
    let mut attempts = 0;
    let mut placed = 0;
    while placed < spec.n_objects {
        if attempts >= budget {
            return Err(Error::Infeasible(format!(
                "placed {placed} of {} objects in {budget} attempts",
                spec.n_objects
            )));
        }
        attempts += 1;
        let x = rng.random_range(0..=spec.width - s) as f64;
        let y = rng.random_range(0..=spec.height - s) as f64;
        let b = PixelBox { xmin: x, ymin: y, xmax: x + s as f64, ymax: y + s as f64 };
        if !occupancy.clear(&b) {
            continue;
        }
        let class_id = spec.class_ids[rng.random_range(0..spec.class_ids.len())];
        occupancy.insert(b);
        truth.push(Detection::new(class_id, 1.0, b));
        placed += 1;
    }

    let mut raster = background(spec.width, spec.height, spec.seed, exec)?;
    let boxes: Vec<PixelBox> = truth.iter().map(|d| d.bbox).collect();
    render_boxes(&mut raster, &boxes, OBJECT_RGB);
    Ok((raster, truth))
}
