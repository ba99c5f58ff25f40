//! RGB rasters, image files with JSON geo sidecars, and Gaussian resolution
//! degradation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeoTransform;
use crate::par::{self, Exec};

pub const CHANNELS: usize = 3;

/// Native resolution of the aerial car imagery the resolution ladder starts from.
pub const NATIVE_GSD: f64 = 0.15;

const LADDER: [f64; 12] = [
    0.30, 0.45, 0.60, 0.75, 0.90, 1.05, 1.20, 1.50, 1.80, 2.10, 2.40, 3.00,
];

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * CHANNELS {
            return Err(Error::invalid(format!(
                "raster data length {} != {width}x{height}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[u8] {
        let stride = self.width * CHANNELS;
        &self.data[y * stride..(y + 1) * stride]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Mean over all channels and pixels.
    pub fn mean(&self) -> f64 {
        let sum: u64 = self.data.iter().map(|&v| v as u64).sum();
        sum as f64 / self.data.len() as f64
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "raster dimensions must be >= 1, got {width}x{height}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub name: String,
    pub gsd: f64,
    pub transform: GeoTransform,
}

impl ImageMeta {
    pub fn new(name: impl Into<String>, transform: GeoTransform) -> Result<Self> {
        let name = name.into();
        if name.contains('|') {
            return Err(Error::invalid(format!(
                "image name `{name}` contains the reserved '|' character"
            )));
        }
        if !(transform.gsd > 0.0 && transform.gsd.is_finite()) {
            return Err(Error::invalid(format!("gsd must be > 0, got {}", transform.gsd)));
        }
        Ok(ImageMeta {
            name,
            gsd: transform.gsd,
            transform,
        })
    }

    pub fn with_gsd(name: impl Into<String>, gsd: f64) -> Result<Self> {
        ImageMeta::new(name, GeoTransform::new(0.0, 0.0, gsd)?)
    }

    /// Same image frame at a coarser pixel size (origin unchanged).
    pub fn rescaled(&self, gsd: f64) -> Result<Self> {
        ImageMeta::new(
            self.name.clone(),
            GeoTransform::new(self.transform.origin_x, self.transform.origin_y, gsd)?,
        )
    }
}

/// On-disk sidecar, `<image path>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub gsd: f64,
    #[serde(default)]
    pub origin_x: f64,
    #[serde(default)]
    pub origin_y: f64,
}

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut s = image_path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// `Ok(None)` when the sidecar does not exist.
pub fn read_sidecar(image_path: &Path) -> Result<Option<Sidecar>> {
    let path = sidecar_path(image_path);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::MalformedSidecar {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if !(sidecar.gsd > 0.0 && sidecar.gsd.is_finite()) {
        return Err(Error::MalformedSidecar {
            path,
            message: format!("gsd must be > 0, got {}", sidecar.gsd),
        });
    }
    Ok(Some(sidecar))
}

fn image_format(path: &Path) -> Result<ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(ImageFormat::Png),
        Some("tif") | Some("tiff") => Ok(ImageFormat::Tiff),
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            found: format!("extension {other:?} (expected png, tif or tiff)"),
        }),
    }
}

/// Image name used when no explicit name is given: the file stem.
pub fn default_image_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .replace('|', "_")
}

pub fn load_image(path: &Path) -> Result<(Raster, ImageMeta)> {
    let format = image_format(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| {
        Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            found: format!("{:?} (expected 8-bit RGB)", img.color()),
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raster = Raster::from_vec(w, h, rgb.into_raw())?;

    let name = default_image_name(path);
    let meta = match read_sidecar(path)? {
        Some(s) => ImageMeta::new(name, GeoTransform::new(s.origin_x, s.origin_y, s.gsd)?)?,
        None => {
            log::warn!(
                "no sidecar for {}; assuming gsd 1.0 and origin (0, 0)",
                path.display()
            );
            ImageMeta::new(name, GeoTransform::default())?
        }
    };
    Ok((raster, meta))
}

pub fn save_image(raster: &Raster, meta: &ImageMeta, path: &Path) -> Result<()> {
    let format = image_format(path)?;
    let img = RgbImage::from_raw(
        raster.width as u32,
        raster.height as u32,
        raster.data.clone(),
    )
    .ok_or_else(|| Error::invalid("raster buffer does not match its dimensions"))?;
    img.save_with_format(path, format)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::ImageDecode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
    write_sidecar(meta, path)
}

pub fn write_sidecar(meta: &ImageMeta, image_path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        gsd: meta.gsd,
        origin_x: meta.transform.origin_x,
        origin_y: meta.transform.origin_y,
    };
    let path = sidecar_path(image_path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// The degraded resolutions of the car resolution study, in meters.
pub fn gsd_ladder() -> Vec<f64> {
    LADDER.to_vec()
}

/// [`gsd_ladder`] with the native 0.15 m resolution prepended (13 rungs).
pub fn gsd_ladder_with_native() -> Vec<f64> {
    std::iter::once(NATIVE_GSD).chain(LADDER).collect()
}

/// Object size in pixels at a given resolution.
pub fn object_pixel_extent(object_size_m: f64, gsd: f64) -> Result<f64> {
    if !(gsd > 0.0 && gsd.is_finite()) {
        return Err(Error::invalid(format!("gsd must be > 0, got {gsd}")));
    }
    Ok(object_size_m / gsd)
}

/// Output dimension of [`degrade`]: `floor(dim * src / dst)`. The small slack
/// absorbs representation error in decimal GSDs (0.15 / 0.30 is not exactly
/// one half in binary floating point).
pub fn degraded_dim(dim: usize, src_gsd: f64, dst_gsd: f64) -> usize {
    (dim as f64 * src_gsd / dst_gsd + 1e-9).floor() as usize
}

/// Gaussian low-pass followed by area-averaged subsampling from `src_gsd` to
/// `dst_gsd`. Sigma is half the resolution ratio (in source pixels), the
/// kernel radius is `ceil(3 sigma)` and borders are mirror-reflected.
pub fn degrade(r: &Raster, src_gsd: f64, dst_gsd: f64, exec: Exec) -> Result<Raster> {
    if !(src_gsd > 0.0 && dst_gsd > 0.0 && src_gsd.is_finite() && dst_gsd.is_finite()) {
        return Err(Error::invalid(format!(
            "gsd values must be positive, got {src_gsd} -> {dst_gsd}"
        )));
    }
    if dst_gsd < src_gsd {
        return Err(Error::invalid(format!(
            "cannot upsample: destination gsd {dst_gsd} < source gsd {src_gsd}"
        )));
    }
    if dst_gsd == src_gsd {
        return Ok(r.clone());
    }
    let ratio = dst_gsd / src_gsd;
    let out_w = degraded_dim(r.width, src_gsd, dst_gsd);
    let out_h = degraded_dim(r.height, src_gsd, dst_gsd);
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!(
            "{}x{} raster is too small to degrade by {ratio}",
            r.width, r.height
        )));
    }

    let kernel = gaussian_kernel(ratio / 2.0);
    let xs = area_weights(r.width, out_w, ratio);
    let ys = area_weights(r.height, out_h, ratio);

    // Pass 1: blur + resample along x, one input row at a time.
    let in_stride = r.width * CHANNELS;
    let mid_stride = out_w * CHANNELS;
    let mut mid = vec![0f32; r.height * mid_stride];
    par::for_each_chunk_mut(exec, &mut mid, mid_stride, |y, out_row| {
        let row = &r.data[y * in_stride..(y + 1) * in_stride];
        let mut blurred = vec![0f32; in_stride];
        blur_row_u8(row, r.width, &kernel, &mut blurred);
        resample_row(&blurred, &xs, out_row);
    });

    // Pass 2: blur along y at the output rows that need it, then resample.
    let radius = kernel.len() / 2;
    let mut out = vec![0u8; out_h * mid_stride];
    par::for_each_chunk_mut(exec, &mut out, mid_stride, |oy, out_row| {
        let mut acc = vec![0f32; mid_stride];
        let mut blurred = vec![0f32; mid_stride];
        for &(sy, wy) in &ys[oy] {
            blurred.iter_mut().for_each(|v| *v = 0.0);
            for (k, &wk) in kernel.iter().enumerate() {
                let src = reflect(sy as isize + k as isize - radius as isize, r.height);
                let src_row = &mid[src * mid_stride..(src + 1) * mid_stride];
                for (b, &s) in blurred.iter_mut().zip(src_row) {
                    *b += wk * s;
                }
            }
            for (a, &b) in acc.iter_mut().zip(&blurred) {
                *a += wy * b;
            }
        }
        for (o, &a) in out_row.iter_mut().zip(&acc) {
            *o = a.round().clamp(0.0, 255.0) as u8;
        }
    });
    Raster::from_vec(out_w, out_h, out)
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(r: &Raster, width: usize, height: usize) -> Result<Raster> {
    check_dims(width, height)?;
    if width == r.width && height == r.height {
        return Ok(r.clone());
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, r.width);
    let ys = axis(height, r.height);
    let mut out = Vec::with_capacity(width * height * CHANNELS);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (r.row(y0), r.row(y1));
        for &(x0, x1, fx) in &xs {
            for c in 0..CHANNELS {
                let a = r0[x0 * CHANNELS + c] as f32 * (1.0 - fx) + r0[x1 * CHANNELS + c] as f32 * fx;
                let b = r1[x0 * CHANNELS + c] as f32 * (1.0 - fx) + r1[x1 * CHANNELS + c] as f32 * fx;
                out.push((a * (1.0 - fy) + b * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Raster::from_vec(width, height, out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Mirror index into `[0, n)`: `-1 -> 0`, `-2 -> 1`, `n -> n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn blur_row_u8(row: &[u8], width: usize, kernel: &[f32], out: &mut [f32]) {
    let radius = (kernel.len() / 2) as isize;
    for x in 0..width {
        let mut acc = [0f32; CHANNELS];
        for (k, &wk) in kernel.iter().enumerate() {
            let sx = reflect(x as isize + k as isize - radius, width);
            let p = &row[sx * CHANNELS..sx * CHANNELS + CHANNELS];
            for c in 0..CHANNELS {
                acc[c] += wk * p[c] as f32;
            }
        }
        out[x * CHANNELS..x * CHANNELS + CHANNELS].copy_from_slice(&acc);
    }
}

/// For each output cell, the input cells overlapping `[i*ratio, (i+1)*ratio)`
/// and their overlap fraction, normalized to sum to one.
fn area_weights(in_len: usize, out_len: usize, ratio: f64) -> Vec<Vec<(usize, f32)>> {
    (0..out_len)
        .map(|i| {
            let a = i as f64 * ratio;
            let b = ((i + 1) as f64 * ratio).min(in_len as f64);
            let first = a.floor() as usize;
            let last = (b.ceil() as usize).min(in_len);
            let mut w: Vec<(usize, f64)> = (first..last)
                .map(|j| (j, (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0)))
                .filter(|&(_, w)| w > 1e-12)
                .collect();
            let total: f64 = w.iter().map(|p| p.1).sum();
            w.iter_mut().for_each(|p| p.1 /= total);
            w.into_iter().map(|(j, v)| (j, v as f32)).collect()
        })
        .collect()
}

fn resample_row(row: &[f32], weights: &[Vec<(usize, f32)>], out: &mut [f32]) {
    for (ox, ws) in weights.iter().enumerate() {
        let mut acc = [0f32; CHANNELS];
        for &(sx, w) in ws {
            for c in 0..CHANNELS {
                acc[c] += w * row[sx * CHANNELS + c];
            }
        }
        out[ox * CHANNELS..ox * CHANNELS + CHANNELS].copy_from_slice(&acc);
    }
}
