//! Detector backends and the multi-scale ensemble runner.
//!
//! Each [`ScaleProfile`] fixes a ground footprint per chip, a downsample
//! factor and the classes its classifier may report. [`run_scale`] tiles the
//! (optionally downsampled) image, runs every chip through a backend and maps
//! the results back to native pixels; [`run_ensemble`] does that for every
//! profile and merges the union with per-class NMS.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, PixelBox};
use crate::imaging::{degrade, resize_bilinear, ImageMeta, Raster};
use crate::network::{self, decode_grid, Anchor, NetworkSpec, Tensor, WeightStore};
use crate::par::{self, Exec};
use crate::stitcher::{globalize, merge, DetectionBatch, GlobalDetectionSet};
use crate::tiler::{extract, plan_tiles_named, TileSpec, DEFAULT_OVERLAP};

/// Midpoint of the 0.3-0.4 band where F1 peaks.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.35;

pub const TRUE_POSITIVE_CONFIDENCE: f64 = 0.9;
pub const SPURIOUS_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Network,
}

/// One ensemble member. Matches the profile config JSON one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub scale_id: String,
    pub chip_size_m: f64,
    #[serde(default = "one")]
    pub downsample_factor: u32,
    pub class_ids: Vec<u32>,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
    /// Explicit chip size in (downsampled) pixels; overrides `chip_size_m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_px: Option<usize>,
}

fn one() -> u32 {
    1
}

impl ScaleProfile {
    pub fn new(scale_id: impl Into<String>, chip_size_m: f64, downsample_factor: u32, class_ids: Vec<u32>) -> Self {
        ScaleProfile {
            scale_id: scale_id.into(),
            chip_size_m,
            downsample_factor,
            class_ids,
            backend: BackendKind::Mock,
            weights_path: None,
            window_px: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.chip_size_m > 0.0 && self.chip_size_m.is_finite()) {
            return Err(Error::invalid(format!(
                "profile `{}`: chip_size_m must be > 0",
                self.scale_id
            )));
        }
        if self.downsample_factor == 0 {
            return Err(Error::invalid(format!(
                "profile `{}`: downsample_factor must be >= 1",
                self.scale_id
            )));
        }
        if self.class_ids.is_empty() {
            return Err(Error::invalid(format!("profile `{}` has no classes", self.scale_id)));
        }
        if self.window_px == Some(0) {
            return Err(Error::invalid(format!("profile `{}`: window_px must be >= 1", self.scale_id)));
        }
        Ok(())
    }

    /// Chip side in pixels of the downsampled raster:
    /// `chip_size_m / (gsd * downsample_factor)`, rounded.
    pub fn window_px(&self, gsd: f64) -> Result<usize> {
        self.validate()?;
        if let Some(w) = self.window_px {
            return Ok(w);
        }
        if !(gsd > 0.0) {
            return Err(Error::invalid(format!("gsd must be > 0, got {gsd}")));
        }
        let w = (self.chip_size_m / (gsd * self.downsample_factor as f64)).round();
        if w < 1.0 {
            return Err(Error::invalid(format!(
                "profile `{}` gives a chip under one pixel at gsd {gsd}",
                self.scale_id
            )));
        }
        Ok(w as usize)
    }
}

/// Vehicles/buildings at 200 m chips and airports at 2500 m chips on a 4x
/// downsampled raster.
pub fn default_profiles() -> Vec<ScaleProfile> {
    vec![
        ScaleProfile::new("vehicles+buildings", 200.0, 1, vec![0, 1, 2, 3]),
        ScaleProfile::new("airports", 2500.0, 4, vec![4]),
    ]
}

pub fn load_profiles(path: &Path) -> Result<Vec<ScaleProfile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut profiles: Vec<ScaleProfile> =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if profiles.is_empty() {
        return Err(Error::invalid("profile list is empty"));
    }
    for p in &mut profiles {
        p.validate()?;
        if let Some(w) = &p.weights_path {
            if w.is_relative() {
                if let Some(dir) = path.parent() {
                    p.weights_path = Some(dir.join(w));
                }
            }
        }
    }
    Ok(profiles)
}

/// What a backend knows about the chip besides its pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChipContext {
    /// Tile in the (possibly downsampled) raster the chip was cut from.
    pub tile: TileSpec,
    pub downsample_factor: u32,
    /// Backends may drop anything scoring below this.
    pub conf_threshold: f64,
}

pub trait DetectorBackend: Send + Sync {
    /// Detections in chip pixel coordinates.
    fn detect(&self, chip: &Raster, ctx: &ChipContext, profile: &ScaleProfile) -> Result<Vec<Detection>>;

    /// False when `detect` must not be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockOracleConfig {
    /// Truth boxes in native global pixel coordinates.
    pub planted_truth: Vec<Detection>,
    pub drop_prob: f64,
    pub false_positives_per_tile: f64,
    pub jitter_sigma_px: f64,
    pub seed: u64,
    /// Side of the square spurious boxes, in chip pixels.
    #[serde(default = "default_fp_size")]
    pub false_positive_size_px: f64,
}

fn default_fp_size() -> f64 {
    10.0
}

impl MockOracleConfig {
    pub fn perfect(planted_truth: Vec<Detection>, seed: u64) -> Self {
        MockOracleConfig {
            planted_truth,
            drop_prob: 0.0,
            false_positives_per_tile: 0.0,
            jitter_sigma_px: 0.0,
            seed,
            false_positive_size_px: default_fp_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::invalid(format!("drop_prob {} outside [0,1]", self.drop_prob)));
        }
        if !(self.false_positives_per_tile >= 0.0 && self.false_positives_per_tile.is_finite()) {
            return Err(Error::invalid("false_positives_per_tile must be >= 0"));
        }
        if !(self.jitter_sigma_px >= 0.0 && self.jitter_sigma_px.is_finite()) {
            return Err(Error::invalid("jitter_sigma_px must be >= 0"));
        }
        if !(self.false_positive_size_px > 0.0) {
            return Err(Error::invalid("false_positive_size_px must be > 0"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per `(seed, row, col, factor)`.
fn tile_rng(seed: u64, tile: &TileSpec, factor: u32) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ tile.row as u64) ^ tile.col as u64) ^ factor as u64;
    ChaCha8Rng::seed_from_u64(splitmix(key))
}

/// Simulated detector. Planted boxes whose centre falls strictly inside the
/// tile are returned in tile coordinates with confidence 0.9, each dropped
/// with probability `drop_prob` and jittered by `N(0, jitter^2)` per
/// coordinate; then `Poisson(false_positives_per_tile)` uniformly placed
/// spurious boxes with confidence 0.5 are added. Spurious classes are drawn
/// from `class_ids`; planted boxes of other classes are not reported.
///
/// `tile` is in the frame of a raster downsampled by `downsample_factor`.
pub fn mock_detect(tile: &TileSpec, cfg: &MockOracleConfig, downsample_factor: u32, class_ids: &[u32]) -> Vec<Detection> {
    let candidates: Vec<usize> = (0..cfg.planted_truth.len()).collect();
    mock_detect_among(tile, cfg, downsample_factor, class_ids, &candidates)
}

fn mock_detect_among(
    tile: &TileSpec,
    cfg: &MockOracleConfig,
    downsample_factor: u32,
    class_ids: &[u32],
    candidates: &[usize],
) -> Vec<Detection> {
    let f = downsample_factor.max(1) as f64;
    let mut rng = tile_rng(cfg.seed, tile, downsample_factor);
    let jitter = (cfg.jitter_sigma_px > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma_px).expect("sigma > 0"));
    let (w, h) = (tile.width as f64, tile.height as f64);
    let mut out = Vec::new();

    for &i in candidates {
        let truth = &cfg.planted_truth[i];
        let (cx, cy) = truth.bbox.center();
        if !tile.contains_strictly(cx / f, cy / f) {
            continue;
        }
        if !class_ids.contains(&truth.class_id) {
            continue;
        }
        if cfg.drop_prob > 0.0 && rng.random::<f64>() < cfg.drop_prob {
            continue;
        }
        let mut b = truth.bbox.scale(1.0 / f).translate(-(tile.col as f64), -(tile.row as f64));
        if let Some(n) = &jitter {
            b.xmin += n.sample(&mut rng);
            b.ymin += n.sample(&mut rng);
            b.xmax += n.sample(&mut rng);
            b.ymax += n.sample(&mut rng);
            if b.xmin > b.xmax {
                std::mem::swap(&mut b.xmin, &mut b.xmax);
            }
            if b.ymin > b.ymax {
                std::mem::swap(&mut b.ymin, &mut b.ymax);
            }
        }
        out.push(Detection::new(truth.class_id, TRUE_POSITIVE_CONFIDENCE, b));
    }

    if cfg.false_positives_per_tile > 0.0 && !class_ids.is_empty() {
        let n = Poisson::new(cfg.false_positives_per_tile)
            .expect("rate > 0")
            .sample(&mut rng) as usize;
        let side = cfg.false_positive_size_px;
        for _ in 0..n {
            let x0 = rng.random::<f64>() * (w - side).max(0.0);
            let y0 = rng.random::<f64>() * (h - side).max(0.0);
            let class_id = class_ids[rng.random_range(0..class_ids.len())];
            let b = PixelBox {
                xmin: x0,
                ymin: y0,
                xmax: (x0 + side).min(w),
                ymax: (y0 + side).min(h),
            };
            out.push(Detection::new(class_id, SPURIOUS_CONFIDENCE, b));
        }
    }
    out
}

/// [`mock_detect`] as a backend, with planted centres bucketed so each tile
/// only scans nearby truth.
pub struct MockBackend {
    cfg: MockOracleConfig,
    bucket: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl MockBackend {
    pub fn new(cfg: MockOracleConfig) -> Result<Self> {
        cfg.validate()?;
        let bucket = 256.0;
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, t) in cfg.planted_truth.iter().enumerate() {
            let (cx, cy) = t.bbox.center();
            buckets
                .entry(((cx / bucket).floor() as i64, (cy / bucket).floor() as i64))
                .or_default()
                .push(i);
        }
        Ok(MockBackend { cfg, bucket, buckets })
    }

    pub fn config(&self) -> &MockOracleConfig {
        &self.cfg
    }

    fn candidates(&self, tile: &TileSpec, factor: u32) -> Vec<usize> {
        let f = factor.max(1) as f64;
        let b = self.bucket;
        let x0 = (tile.col as f64 * f / b).floor() as i64;
        let x1 = ((tile.col + tile.width) as f64 * f / b).floor() as i64;
        let y0 = (tile.row as f64 * f / b).floor() as i64;
        let y1 = ((tile.row + tile.height) as f64 * f / b).floor() as i64;
        let mut out: Vec<usize> = (y0..=y1)
            .flat_map(|y| (x0..=x1).map(move |x| (x, y)))
            .filter_map(|k| self.buckets.get(&k))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out
    }
}

impl DetectorBackend for MockBackend {
    fn detect(&self, _chip: &Raster, ctx: &ChipContext, profile: &ScaleProfile) -> Result<Vec<Detection>> {
        let candidates = self.candidates(&ctx.tile, ctx.downsample_factor);
        Ok(mock_detect_among(
            &ctx.tile,
            &self.cfg,
            ctx.downsample_factor,
            &profile.class_ids,
            &candidates,
        ))
    }
}

/// The from-scratch network as a backend. Chips are resized to the network
/// input, decoded, and the boxes scaled back to chip pixels. Local class `k`
/// is reported as `class_map[k]`.
pub struct NetworkBackend {
    pub net: NetworkSpec,
    pub weights: Arc<WeightStore>,
    pub anchors: Vec<Anchor>,
    pub class_map: Vec<u32>,
    /// Execution mode inside a single forward pass.
    pub exec: Exec,
}

impl NetworkBackend {
    pub fn new(net: NetworkSpec, weights: WeightStore, class_map: Vec<u32>) -> Result<Self> {
        weights.check_against(&net)?;
        if class_map.len() != net.n_classes {
            return Err(Error::invalid(format!(
                "class map has {} entries, network predicts {} classes",
                class_map.len(),
                net.n_classes
            )));
        }
        let anchors = network::default_anchors(net.n_boxes);
        Ok(NetworkBackend {
            net,
            weights: Arc::new(weights),
            anchors,
            class_map,
            exec: Exec::Sequential,
        })
    }
}

impl DetectorBackend for NetworkBackend {
    fn detect(&self, chip: &Raster, ctx: &ChipContext, _profile: &ScaleProfile) -> Result<Vec<Detection>> {
        let size = self.net.input_size;
        let input = if chip.width() == size && chip.height() == size {
            Tensor::from_raster(chip)
        } else {
            Tensor::from_raster(&resize_bilinear(chip, size, size)?)
        };
        let y = network::forward(&self.net, &self.weights, &input, self.exec)?;
        let dets = decode_grid(&y, &self.anchors, ctx.conf_threshold, size as f64)?;
        let (sx, sy) = (chip.width() as f64 / size as f64, chip.height() as f64 / size as f64);
        dets.into_iter()
            .map(|mut d| {
                d.class_id = *self
                    .class_map
                    .get(d.class_id as usize)
                    .ok_or_else(|| Error::Backend(format!("class index {} outside class map", d.class_id)))?;
                d.bbox = PixelBox {
                    xmin: d.bbox.xmin * sx,
                    ymin: d.bbox.ymin * sy,
                    xmax: d.bbox.xmax * sx,
                    ymax: d.bbox.ymax * sy,
                };
                Ok(d)
            })
            .collect()
    }
}

/// Backend for `profile`: the mock oracle, or the network from
/// `weights_path` (seeded random weights when absent).
pub fn backend_for(profile: &ScaleProfile, mock: Option<&MockOracleConfig>, seed: u64) -> Result<Box<dyn DetectorBackend>> {
    match profile.backend {
        BackendKind::Mock => {
            let cfg = mock
                .cloned()
                .unwrap_or_else(|| MockOracleConfig::perfect(Vec::new(), seed));
            Ok(Box::new(MockBackend::new(cfg)?))
        }
        BackendKind::Network => {
            let (net, weights) = match &profile.weights_path {
                Some(p) => network::load_weights(p)?,
                None => {
                    let net = network::build_yolt_spec(profile.class_ids.len(), 5, 416)?;
                    let w = WeightStore::random(&net, seed)?;
                    (net, w)
                }
            };
            Ok(Box::new(NetworkBackend::new(net, weights, profile.class_ids.clone())?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub overlap: f64,
    /// Overrides every profile's chip size (in downsampled pixels).
    pub window_override: Option<usize>,
    pub exec: Exec,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            nms_iou: crate::stitcher::DEFAULT_NMS_IOU,
            overlap: DEFAULT_OVERLAP,
            window_override: None,
            exec: Exec::Parallel,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::invalid(format!("confidence threshold {} outside [0,1]", self.conf_threshold)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid(format!("nms iou {} outside [0,1]", self.nms_iou)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!("overlap {} outside [0,1)", self.overlap)));
        }
        if self.window_override == Some(0) {
            return Err(Error::invalid("window must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChipFailure {
    pub scale_id: String,
    pub tile: TileSpec,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRun {
    pub scale_id: String,
    pub window_px: usize,
    pub tiles: usize,
    /// Global native-pixel detections, in tile order.
    pub detections: Vec<Detection>,
    pub failed_chips: Vec<ChipFailure>,
    /// Backend outputs dropped for naming a class outside the profile.
    pub rejected_out_of_profile: usize,
}

fn check_backend_output(dets: &[Detection]) -> Result<()> {
    for d in dets {
        d.validate().map_err(|e| Error::Backend(e.to_string()))?;
    }
    Ok(())
}

pub fn run_scale(
    image: &Raster,
    meta: &ImageMeta,
    profile: &ScaleProfile,
    backend: &dyn DetectorBackend,
    opts: &RunOptions,
) -> Result<ScaleRun> {
    opts.validate()?;
    profile.validate()?;
    let factor = profile.downsample_factor;
    let window = match opts.window_override {
        Some(w) => w,
        None => profile.window_px(meta.gsd)?,
    };
    let degraded;
    let raster = if factor > 1 {
        degraded = degrade(image, meta.gsd, meta.gsd * factor as f64, opts.exec)?;
        &degraded
    } else {
        image
    };
    let plan = plan_tiles_named(&meta.name, raster.width(), raster.height(), window, opts.overlap)?;
    let exec = if backend.concurrent() { opts.exec } else { Exec::Sequential };
    let (image_w, image_h) = (image.width(), image.height());

    let per_tile = par::map(exec, &plan.tiles, |tile| -> (TileSpec, Result<(Vec<Detection>, usize)>) {
        let ctx = ChipContext {
            tile: *tile,
            downsample_factor: factor,
            conf_threshold: opts.conf_threshold,
        };
        let result = extract(raster, tile)
            .and_then(|chip| backend.detect(&chip, &ctx, profile))
            .and_then(|dets| {
                check_backend_output(&dets)?;
                let total = dets.len();
                let kept: Vec<Detection> = dets
                    .into_iter()
                    .filter(|d| profile.class_ids.contains(&d.class_id))
                    .collect();
                let rejected = total - kept.len();
                let kept: Vec<Detection> = kept
                    .into_iter()
                    .filter(|d| d.confidence >= opts.conf_threshold)
                    .map(|d| d.with_scale(profile.scale_id.clone()))
                    .collect();
                Ok((globalize(&kept, tile, factor, image_w, image_h), rejected))
            });
        (*tile, result)
    });

    let mut detections = Vec::new();
    let mut failed_chips = Vec::new();
    let mut rejected_out_of_profile = 0;
    for (tile, result) in per_tile {
        match result {
            Ok((dets, rejected)) => {
                detections.extend(dets);
                rejected_out_of_profile += rejected;
            }
            Err(e) => {
                log::warn!("chip {tile:?} of scale `{}` failed: {e}", profile.scale_id);
                failed_chips.push(ChipFailure {
                    scale_id: profile.scale_id.clone(),
                    tile,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ScaleRun {
        scale_id: profile.scale_id.clone(),
        window_px: window,
        tiles: plan.tiles.len(),
        detections,
        failed_chips,
        rejected_out_of_profile,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub set: GlobalDetectionSet,
    pub scales: Vec<ScaleRun>,
}

impl EnsembleRun {
    pub fn total_tiles(&self) -> usize {
        self.scales.iter().map(|s| s.tiles).sum()
    }

    pub fn failed_chips(&self) -> Vec<&ChipFailure> {
        self.scales.iter().flat_map(|s| &s.failed_chips).collect()
    }
}

/// Runs every profile with its backend and merges the union.
pub fn run_ensemble(
    image: &Raster,
    meta: &ImageMeta,
    members: &[(ScaleProfile, &dyn DetectorBackend)],
    opts: &RunOptions,
) -> Result<EnsembleRun> {
    if members.is_empty() {
        return Err(Error::invalid("an ensemble needs at least one profile"));
    }
    let mut scales = Vec::with_capacity(members.len());
    for (profile, backend) in members {
        scales.push(run_scale(image, meta, profile, *backend, opts)?);
    }
    let batches: Vec<DetectionBatch> = scales
        .iter()
        .map(|s| DetectionBatch::new(meta.name.clone(), s.detections.clone()))
        .collect();
    let mut set = merge(&batches, opts.nms_iou)?;
    set.image_name = meta.name.clone();
    Ok(EnsembleRun { set, scales })
}

/// Ground area covered by a `w x h` raster: `w * h * gsd^2 / 1e6`.
pub fn area_km2(width: usize, height: usize, gsd: f64) -> f64 {
    width as f64 * height as f64 * gsd * gsd / 1e6
}

pub fn km2_per_minute(area_km2: f64, seconds: f64) -> f64 {
    area_km2 / (seconds.max(1e-9) / 60.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::nms;

    fn planted(class_id: u32, x: f64, y: f64, side: f64) -> Detection {
        Detection::new(class_id, 1.0, PixelBox::centered(x, y, side, side))
    }

    fn blank(w: usize, h: usize) -> Raster {
        Raster::filled(w, h, [40, 40, 40]).unwrap()
    }

    #[test]
    fn throughput_arithmetic() {
        assert_eq!(area_km2(16000, 16000, 0.5), 64.0);
        assert_eq!(km2_per_minute(64.0, 30.0), 128.0);
    }

    #[test]
    fn window_from_ground_footprint() {
        let v = ScaleProfile::new("v", 200.0, 1, vec![0]);
        assert_eq!(v.window_px(0.5).unwrap(), 400);
        let a = ScaleProfile::new("a", 2500.0, 4, vec![4]);
        assert_eq!(a.window_px(0.5).unwrap(), 1250);
    }

    #[test]
    fn profile_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.json");
        fs::write(
            &path,
            r#"[{"scale_id":"v","chip_size_m":200,"downsample_factor":1,"class_ids":[0,1],"backend":"mock"},
                {"scale_id":"a","chip_size_m":2500,"downsample_factor":4,"class_ids":[4],"backend":"network","weights_path":"w.json"}]"#,
        )
        .unwrap();
        let p = load_profiles(&path).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].backend, BackendKind::Network);
        assert_eq!(p[1].weights_path.as_deref(), Some(dir.path().join("w.json").as_path()));
        fs::write(&path, r#"[{"scale_id":"v","chip_size_m":-1,"class_ids":[0]}]"#).unwrap();
        assert!(load_profiles(&path).is_err());
    }

    #[test]
    fn perfect_mock_returns_exactly_in_tile_truth() {
        let truth = vec![planted(0, 50., 50., 10.), planted(0, 150., 50., 10.), planted(0, 99., 20., 4.)];
        let cfg = MockOracleConfig::perfect(truth, 3);
        let tile = TileSpec::new(0, 0, 100, 100);
        let got = mock_detect(&tile, &cfg, 1, &[0]);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].bbox, cfg.planted_truth[0].bbox);
        assert!(got.iter().all(|d| d.confidence == TRUE_POSITIVE_CONFIDENCE));

        let shifted = mock_detect(&TileSpec::new(0, 100, 100, 100), &cfg, 1, &[0]);
        assert_eq!(shifted.len(), 1);
        assert_eq!(shifted[0].bbox, PixelBox::centered(50., 50., 10., 10.));
    }

    #[test]
    fn drop_everything_leaves_only_spurious() {
        let truth: Vec<_> = (0..20).map(|i| planted(0, 10. + i as f64 * 20., 50., 8.)).collect();
        let mut cfg = MockOracleConfig::perfect(truth, 5);
        cfg.drop_prob = 1.0;
        cfg.false_positives_per_tile = 3.0;
        let tile = TileSpec::new(0, 0, 416, 416);
        let got: Vec<_> = (0..20)
            .flat_map(|r| mock_detect(&TileSpec { row: r * 416, ..tile }, &cfg, 1, &[0]))
            .collect();
        assert!(!got.is_empty());
        assert!(got.iter().all(|d| d.confidence == SPURIOUS_CONFIDENCE));
        assert!(got.iter().all(|d| PixelBox { xmin: 0., ymin: 0., xmax: 416., ymax: 416. }.contains_box(&d.bbox)));
    }

    #[test]
    fn mock_is_deterministic_per_tile_key() {
        let truth: Vec<_> = (0..50).map(|i| planted(0, 5. + i as f64 * 8., 200., 6.)).collect();
        let cfg = MockOracleConfig { drop_prob: 0.3, false_positives_per_tile: 2.0, jitter_sigma_px: 1.5, ..MockOracleConfig::perfect(truth, 11) };
        let t = TileSpec::new(0, 0, 416, 416);
        assert_eq!(mock_detect(&t, &cfg, 1, &[0]), mock_detect(&t, &cfg, 1, &[0]));
        let other_seed = MockOracleConfig { seed: 12, ..cfg.clone() };
        assert_ne!(mock_detect(&t, &cfg, 1, &[0]), mock_detect(&t, &other_seed, 1, &[0]));
    }

    #[test]
    fn bucketed_backend_matches_reference() {
        let truth: Vec<_> = (0..400)
            .map(|i| planted((i % 3) as u32, 7. + (i * 37 % 1900) as f64, 9. + (i * 53 % 1900) as f64, 10.))
            .collect();
        let cfg = MockOracleConfig { drop_prob: 0.2, false_positives_per_tile: 0.7, jitter_sigma_px: 0.5, ..MockOracleConfig::perfect(truth, 2) };
        let backend = MockBackend::new(cfg.clone()).unwrap();
        let profile = ScaleProfile::new("p", 200.0, 1, vec![0, 2]);
        let chip = blank(1, 1);
        for tile in crate::tiler::plan_tiles(2000, 2000, 416, 0.15).unwrap().tiles {
            let ctx = ChipContext { tile, downsample_factor: 1, conf_threshold: 0.0 };
            assert_eq!(backend.detect(&chip, &ctx, &profile).unwrap(), mock_detect(&tile, &cfg, 1, &[0, 2]));
        }
    }

    #[test]
    fn run_scale_routes_classes_and_globalizes() {
        let truth = vec![planted(0, 500., 500., 10.), planted(4, 900., 900., 40.)];
        let backend = MockBackend::new(MockOracleConfig::perfect(truth.clone(), 1)).unwrap();
        let meta = ImageMeta::with_gsd("img", 0.5).unwrap();
        let img = blank(1200, 1200);
        let vehicles = ScaleProfile::new("v", 200.0, 1, vec![0]);
        let run = run_scale(&img, &meta, &vehicles, &backend, &RunOptions::default()).unwrap();
        assert_eq!(run.window_px, 400);
        assert!(run.detections.iter().all(|d| d.class_id == 0 && d.scale_id == "v"));
        let merged = nms(&run.detections, 0.5, true).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].bbox, truth[0].bbox);
    }

    #[test]
    fn downsampled_scale_maps_back_to_native_pixels() {
        let truth = vec![planted(4, 1001., 703., 120.)];
        let backend = MockBackend::new(MockOracleConfig::perfect(truth.clone(), 1)).unwrap();
        let meta = ImageMeta::with_gsd("img", 0.5).unwrap();
        let img = blank(2000, 1600);
        let airports = ScaleProfile { window_px: Some(150), ..ScaleProfile::new("a", 2500.0, 4, vec![4]) };
        let run = run_scale(&img, &meta, &airports, &backend, &RunOptions::default()).unwrap();
        assert!(!run.detections.is_empty());
        for d in &run.detections {
            for (got, want) in [(d.bbox.xmin, truth[0].bbox.xmin), (d.bbox.ymax, truth[0].bbox.ymax)] {
                assert!((got - want).abs() <= 4.0, "{got} vs {want}");
            }
        }
    }

    struct Flaky;
    impl DetectorBackend for Flaky {
        fn detect(&self, _chip: &Raster, ctx: &ChipContext, _p: &ScaleProfile) -> Result<Vec<Detection>> {
            if ctx.tile.row == 0 && ctx.tile.col == 0 {
                Err(Error::Backend("corrupt chip".into()))
            } else {
                Ok(vec![Detection::new(9, 0.99, PixelBox::centered(5., 5., 2., 2.)), Detection::new(0, 0.99, PixelBox::centered(5., 5., 2., 2.))])
            }
        }
    }

    #[test]
    fn chip_failures_are_recorded_and_foreign_classes_rejected() {
        let meta = ImageMeta::with_gsd("img", 1.0).unwrap();
        let img = blank(300, 100);
        let p = ScaleProfile { window_px: Some(100), ..ScaleProfile::new("v", 100.0, 1, vec![0]) };
        let opts = RunOptions { overlap: 0.0, ..RunOptions::default() };
        let run = run_scale(&img, &meta, &p, &Flaky, &opts).unwrap();
        assert_eq!(run.tiles, 3);
        assert_eq!(run.failed_chips.len(), 1);
        assert_eq!(run.detections.len(), 2);
        assert_eq!(run.rejected_out_of_profile, 2);
        assert!(run.detections.iter().all(|d| d.class_id == 0));
    }

    #[test]
    fn ensemble_examples() {
        let truth = vec![planted(0, 200., 200., 10.), planted(1, 205., 200., 10.), planted(4, 600., 600., 60.)];
        let backend = MockBackend::new(MockOracleConfig::perfect(truth, 7)).unwrap();
        let meta = ImageMeta::with_gsd("img", 0.5).unwrap();
        let img = blank(1000, 1000);
        let small = ScaleProfile::new("v", 200.0, 1, vec![0, 1]);
        let big = ScaleProfile { window_px: Some(200), ..ScaleProfile::new("a", 2500.0, 4, vec![4]) };
        let opts = RunOptions::default();

        let single = run_ensemble(&img, &meta, &[(small.clone(), &backend as &dyn DetectorBackend)], &opts).unwrap();
        let by_hand = nms(&run_scale(&img, &meta, &small, &backend, &opts).unwrap().detections, opts.nms_iou, true).unwrap();
        assert_eq!(single.set.detections, by_hand);

        let both = run_ensemble(&img, &meta, &[(small.clone(), &backend as &dyn DetectorBackend), (big.clone(), &backend)], &opts).unwrap();
        let mut classes: Vec<u32> = both.set.detections.iter().map(|d| d.class_id).collect();
        classes.sort();
        assert_eq!(classes, vec![0, 1, 4]);

        let twice = run_ensemble(&img, &meta, &[(small.clone(), &backend as &dyn DetectorBackend), (small.clone(), &backend)], &opts).unwrap();
        assert_eq!(twice.set.detections, single.set.detections);
    }
}
