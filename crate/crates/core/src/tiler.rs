//! Sliding-window decomposition of large rasters into named, overlapping
//! cutouts.
//!
//! Cutouts are named `<image>|<row>_<col>_<height>_<width>.<ext>`; the name
//! alone is enough to put a cutout's detections back into the parent frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Raster, CHANNELS};

pub const DEFAULT_OVERLAP: f64 = 0.15;
pub const DEFAULT_WINDOW: usize = 416;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileSpec {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl TileSpec {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        TileSpec {
            row,
            col,
            height,
            width,
        }
    }

    /// True when `(x, y)` lies strictly inside the tile's open extent.
    pub fn contains_strictly(&self, x: f64, y: f64) -> bool {
        x > self.col as f64
            && x < (self.col + self.width) as f64
            && y > self.row as f64
            && y < (self.row + self.height) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub image_name: String,
    pub image_w: usize,
    pub image_h: usize,
    pub window: usize,
    pub overlap_frac: f64,
    pub tiles: Vec<TileSpec>,
}

impl TilePlan {
    pub fn stride(&self) -> usize {
        stride(self.window, self.overlap_frac)
    }
}

/// `floor(window * (1 - overlap))`, never below one pixel.
pub fn stride(window: usize, overlap_frac: f64) -> usize {
    ((window as f64 * (1.0 - overlap_frac) + 1e-9).floor() as usize).max(1)
}

/// Window start offsets along one axis. Every window has length
/// `min(window, dim)`; the last one is pulled back to end on the image edge.
pub fn axis_starts(dim: usize, window: usize, overlap_frac: f64) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let step = stride(window, overlap_frac);
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * step)
        .take_while(|s| s + window <= dim)
        .collect();
    let last = *starts.last().expect("dim > window leaves room for the first tile");
    if last + window < dim {
        starts.push(dim - window);
    }
    starts
}

pub fn plan_tiles(image_w: usize, image_h: usize, window: usize, overlap_frac: f64) -> Result<TilePlan> {
    plan_tiles_named("", image_w, image_h, window, overlap_frac)
}

pub fn plan_tiles_named(
    image_name: &str,
    image_w: usize,
    image_h: usize,
    window: usize,
    overlap_frac: f64,
) -> Result<TilePlan> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::invalid(format!(
            "overlap fraction {overlap_frac} outside [0, 1)"
        )));
    }
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be >= 1, got {image_w}x{image_h}"
        )));
    }
    check_image_name(image_name)?;
    let (tile_w, tile_h) = (window.min(image_w), window.min(image_h));
    let cols = axis_starts(image_w, window, overlap_frac);
    let rows = axis_starts(image_h, window, overlap_frac);
    let tiles = rows
        .iter()
        .flat_map(|&row| cols.iter().map(move |&col| TileSpec::new(row, col, tile_h, tile_w)))
        .collect();
    Ok(TilePlan {
        image_name: image_name.to_string(),
        image_w,
        image_h,
        window,
        overlap_frac,
        tiles,
    })
}

fn check_image_name(name: &str) -> Result<()> {
    if name.contains('|') {
        return Err(Error::invalid(format!(
            "image name `{name}` contains the reserved '|' character"
        )));
    }
    Ok(())
}

pub fn tile_name(image_name: &str, spec: &TileSpec, ext: &str) -> Result<String> {
    check_image_name(image_name)?;
    if ext.is_empty() || ext.contains('|') || ext.starts_with('.') {
        return Err(Error::invalid(format!("bad cutout extension `{ext}`")));
    }
    Ok(format!(
        "{image_name}|{}_{}_{}_{}.{ext}",
        spec.row, spec.col, spec.height, spec.width
    ))
}

fn parse_err(segment: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        segment: segment.to_string(),
        message: message.into(),
    }
}

fn parse_field(segment: &str, what: &str) -> Result<usize> {
    let well_formed = !segment.is_empty()
        && segment.bytes().all(|b| b.is_ascii_digit())
        && (segment == "0" || !segment.starts_with('0'));
    if !well_formed {
        return Err(parse_err(
            segment,
            format!("{what} must be an unpadded decimal integer"),
        ));
    }
    segment
        .parse()
        .map_err(|e| parse_err(segment, format!("{what}: {e}")))
}

/// Inverse of [`tile_name`].
pub fn parse_tile_name(s: &str) -> Result<(String, TileSpec, String)> {
    let (image, rest) = s
        .split_once('|')
        .ok_or_else(|| parse_err(s, "missing '|' separating image name from tile geometry"))?;
    if rest.contains('|') {
        return Err(parse_err(rest, "more than one '|' in cutout name"));
    }
    let (geometry, ext) = rest
        .split_once('.')
        .ok_or_else(|| parse_err(rest, "missing file extension"))?;
    if ext.is_empty() {
        return Err(parse_err(rest, "empty file extension"));
    }
    let fields: Vec<&str> = geometry.split('_').collect();
    if fields.len() != 4 {
        return Err(parse_err(
            geometry,
            format!("expected row_col_height_width, found {} fields", fields.len()),
        ));
    }
    let spec = TileSpec {
        row: parse_field(fields[0], "row")?,
        col: parse_field(fields[1], "col")?,
        height: parse_field(fields[2], "height")?,
        width: parse_field(fields[3], "width")?,
    };
    Ok((image.to_string(), spec, ext.to_string()))
}

fn check_bounds(r: &Raster, spec: &TileSpec) -> Result<()> {
    if spec.width == 0
        || spec.height == 0
        || spec.col + spec.width > r.width()
        || spec.row + spec.height > r.height()
    {
        return Err(Error::invalid(format!(
            "tile {spec:?} outside {}x{} raster",
            r.width(),
            r.height()
        )));
    }
    Ok(())
}

/// Pixel-exact crop.
pub fn extract(r: &Raster, spec: &TileSpec) -> Result<Raster> {
    check_bounds(r, spec)?;
    let mut data = Vec::with_capacity(spec.width * spec.height * CHANNELS);
    for y in spec.row..spec.row + spec.height {
        let row = r.row(y);
        data.extend_from_slice(&row[spec.col * CHANNELS..(spec.col + spec.width) * CHANNELS]);
    }
    Raster::from_vec(spec.width, spec.height, data)
}

/// Copy `tile` back into `dst` at the position `spec` describes.
pub fn embed(dst: &mut Raster, tile: &Raster, spec: &TileSpec) -> Result<()> {
    check_bounds(dst, spec)?;
    if tile.width() != spec.width || tile.height() != spec.height {
        return Err(Error::invalid("tile raster does not match its spec"));
    }
    let stride = dst.width() * CHANNELS;
    let data = dst.data_mut();
    for y in 0..spec.height {
        let off = (spec.row + y) * stride + spec.col * CHANNELS;
        data[off..off + spec.width * CHANNELS].copy_from_slice(tile.row(y));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plan_examples() {
        assert_eq!(axis_starts(1000, 416, 0.15), vec![0, 353, 584]);
        let p = plan_tiles(1000, 1000, 416, 0.15).unwrap();
        assert_eq!(p.tiles.len(), 9);
        assert_eq!(p.stride(), 353);

        let p = plan_tiles(416, 416, 416, 0.6).unwrap();
        assert_eq!(p.tiles, vec![TileSpec::new(0, 0, 416, 416)]);

        let starts = axis_starts(16000, 416, 0.15);
        assert_eq!(starts.len(), 46);
        assert_eq!(starts[44], 15532);
        assert_eq!(starts[45], 15584);
        assert_eq!(plan_tiles(16000, 16000, 416, 0.15).unwrap().tiles.len(), 2116);
    }

    #[test]
    fn small_images_get_one_clamped_tile() {
        let p = plan_tiles(100, 50, 416, 0.15).unwrap();
        assert_eq!(p.tiles, vec![TileSpec::new(0, 0, 50, 100)]);
        let p = plan_tiles(1000, 50, 416, 0.15).unwrap();
        assert_eq!(p.tiles.len(), 3);
        assert!(p.tiles.iter().all(|t| t.height == 50 && t.width == 416));
    }

    #[test]
    fn no_duplicate_final_tile_on_exact_fit() {
        // 0, 50, 100 with window 100 ends exactly at 200
        assert_eq!(axis_starts(200, 100, 0.5), vec![0, 50, 100]);
    }

    #[test]
    fn plan_argument_errors() {
        assert!(matches!(plan_tiles(10, 10, 0, 0.1), Err(Error::InvalidArgument(_))));
        assert!(plan_tiles(10, 10, 5, 1.0).is_err());
        assert!(plan_tiles(10, 10, 5, -0.1).is_err());
    }

    #[test]
    fn naming_examples() {
        let spec = TileSpec::new(1370, 1180, 416, 416);
        assert_eq!(tile_name("panama50cm", &spec, "tif").unwrap(), "panama50cm|1370_1180_416_416.tif");
        assert_eq!(tile_name("x", &TileSpec::new(0, 0, 1, 1), "png").unwrap(), "x|0_0_1_1.png");
        assert_eq!(
            parse_tile_name("panama50cm|1370_1180_416_416.tif").unwrap(),
            ("panama50cm".to_string(), spec, "tif".to_string())
        );
        assert!(tile_name("a|b", &spec, "tif").is_err());
    }

    #[test]
    fn malformed_names_name_the_segment() {
        match parse_tile_name("bad_name.png") {
            Err(Error::Parse { segment, .. }) => assert_eq!(segment, "bad_name.png"),
            other => panic!("{other:?}"),
        }
        match parse_tile_name("img|1_2_x_4.png") {
            Err(Error::Parse { segment, .. }) => assert_eq!(segment, "x"),
            other => panic!("{other:?}"),
        }
        assert!(parse_tile_name("img|1_2_3.png").is_err());
        assert!(parse_tile_name("img|1_2_3_4").is_err());
        assert!(parse_tile_name("img|01_2_3_4.png").is_err());
        assert!(parse_tile_name("img|-1_2_3_4.png").is_err());
    }

    fn gradient(w: usize, h: usize) -> Raster {
        let data = (0..w * h * CHANNELS).map(|i| (i * 7 % 251) as u8).collect();
        Raster::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn extract_examples() {
        let r = gradient(13, 7);
        assert_eq!(extract(&r, &TileSpec::new(0, 0, 7, 13)).unwrap(), r);
        let one = extract(&r, &TileSpec::new(4, 9, 1, 1)).unwrap();
        assert_eq!(one.pixel(0, 0), r.pixel(9, 4));
        assert!(extract(&r, &TileSpec::new(5, 5, 3, 3)).is_err());
    }

    #[test]
    fn crop_and_reembed_restores_region() {
        let r = gradient(40, 30);
        let spec = TileSpec::new(11, 6, 9, 20);
        let crop = extract(&r, &spec).unwrap();
        let mut canvas = Raster::filled(40, 30, [0, 0, 0]).unwrap();
        embed(&mut canvas, &crop, &spec).unwrap();
        for y in spec.row..spec.row + spec.height {
            for x in spec.col..spec.col + spec.width {
                assert_eq!(canvas.pixel(x, y), r.pixel(x, y));
            }
        }
        assert_eq!(canvas.pixel(0, 0), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn overlap_lower_bound(window in 1usize..600, overlap in 0.0..0.95f64) {
            let s = stride(window, overlap);
            prop_assert!(s >= 1);
            if s > 1 {
                prop_assert!(window - s + 1 >= (overlap * window as f64).ceil() as usize);
            }
        }

        /// Anything no wider than the overlap fits wholly inside some window,
        /// and its centre is strictly inside one.
        #[test]
        fn straddler_guarantee(dim in 1usize..3000, window in 1usize..500, overlap in 0.0..0.9f64, a in 0.0..1.0f64, frac in 0.0..1.0f64) {
            let starts = axis_starts(dim, window, overlap);
            let w = window.min(dim);
            let max_extent = if starts.len() > 1 { (w - stride(window, overlap)) as f64 } else { w as f64 };
            let extent = frac * max_extent;
            let lo = a * (dim as f64 - extent);
            let hi = lo + extent;
            prop_assert!(starts.iter().any(|&s| s as f64 <= lo && hi <= (s + w) as f64));
            if extent > 0.0 {
                let c = (lo + hi) / 2.0;
                prop_assert!(starts.iter().any(|&s| (s as f64) < c && c < (s + w) as f64));
            }
        }
    }
}
