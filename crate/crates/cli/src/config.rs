//! `detect`: run configuration from flags and an optional JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use gigadetect::ensemble::{
    area_km2, backend_for, default_profiles, km2_per_minute, load_profiles, run_ensemble, BackendKind,
    DetectorBackend, MockOracleConfig, RunOptions, ScaleProfile, DEFAULT_CONF_THRESHOLD,
};
use gigadetect::imaging::load_image;
use gigadetect::par::Exec;
use gigadetect::stitcher::{read_records, write_detections, write_detections_csv, DEFAULT_NMS_IOU};
use gigadetect::tiler::DEFAULT_OVERLAP;
use gigadetect::{class_name, Detection};

use crate::commands::{write_json, write_run_json};
use crate::{out_dir, usage, CliError, CliResult};

/// Every flag has a config-file key of the same name (dashes become
/// underscores); flags win.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectArgs {
    /// JSON file with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Scale profile list (JSON). Defaults to vehicles+buildings at 200 m and airports at 2500 m.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Confidence threshold [default: 0.35]
    #[arg(long)]
    pub conf: Option<f64>,
    /// IOU above which NMS suppresses [default: 0.5]
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Chip size in pixels, overriding every profile.
    #[arg(long)]
    pub window: Option<usize>,
    /// Tile overlap fraction [default: 0.15]
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Force one backend for every profile.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Output directory [default: detect-out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub seed: Option<u64>,
    #[arg(skip)]
    pub workers: Option<usize>,
    /// Planted truth (detection JSONL) for the mock backend.
    #[arg(long)]
    pub mock_truth: Option<PathBuf>,
    /// Mock: per-object drop probability [default: 0]
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// Mock: spurious detections per tile [default: 0]
    #[arg(long)]
    pub fp_rate: Option<f64>,
    /// Mock: box jitter sigma in pixels [default: 0]
    #[arg(long)]
    pub jitter: Option<f64>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "mock" => Ok(BackendKind::Mock),
        "network" => Ok(BackendKind::Network),
        _ => Err(format!("unknown backend `{s}` (expected mock or network)")),
    }
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

/// Fully resolved configuration, echoed to `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub image: PathBuf,
    pub profiles: Vec<ScaleProfile>,
    pub conf: f64,
    pub nms_iou: f64,
    pub window: Option<usize>,
    pub overlap: f64,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub mock_truth: Option<PathBuf>,
    pub drop_prob: f64,
    pub fp_rate: f64,
    pub jitter: f64,
}

fn unit(name: &str, v: f64) -> CliResult<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(usage(format!("{name} must be in [0, 1], got {v}")))
    }
}

fn existing(name: &str, p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{name} `{}` does not exist", p.display())))
    }
}

pub fn resolve(flags: DetectArgs, flag_seed: Option<u64>, env_seed: Option<u64>, workers: usize) -> CliResult<RunConfig> {
    let mut merged = match &flags.config {
        Some(path) => {
            existing("--config", path)?;
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<DetectArgs>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => DetectArgs::default(),
    };
    overlay!(merged, flags, image, profiles, conf, nms_iou, window, overlap, backend, out, mock_truth, drop_prob, fp_rate, jitter);

    let image = merged.image.ok_or_else(|| usage("--image is required"))?;
    existing("--image", &image)?;
    let mut profiles = match &merged.profiles {
        Some(p) => {
            existing("--profiles", p)?;
            load_profiles(p).map_err(|e| usage(e.to_string()))?
        }
        None => default_profiles(),
    };
    if let Some(kind) = merged.backend {
        profiles.iter_mut().for_each(|p| p.backend = kind);
    }
    for p in &profiles {
        if let Some(w) = &p.weights_path {
            existing("weights_path", w)?;
        }
    }
    if let Some(t) = &merged.mock_truth {
        existing("--mock-truth", t)?;
    }
    if merged.window == Some(0) {
        return Err(usage("--window must be >= 1"));
    }
    let overlap = merged.overlap.unwrap_or(DEFAULT_OVERLAP);
    if !(0.0..1.0).contains(&overlap) {
        return Err(usage(format!("--overlap must be in [0, 1), got {overlap}")));
    }
    let fp_rate = merged.fp_rate.unwrap_or(0.0);
    let jitter = merged.jitter.unwrap_or(0.0);
    if !(fp_rate >= 0.0 && fp_rate.is_finite()) || !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(usage("--fp-rate and --jitter must be finite and >= 0"));
    }
    Ok(RunConfig {
        image,
        profiles,
        conf: unit("--conf", merged.conf.unwrap_or(DEFAULT_CONF_THRESHOLD))?,
        nms_iou: unit("--nms-iou", merged.nms_iou.unwrap_or(DEFAULT_NMS_IOU))?,
        window: merged.window,
        overlap,
        out: merged.out.unwrap_or_else(|| PathBuf::from("detect-out")),
        seed: flag_seed.or(merged.seed).or(env_seed).unwrap_or(0),
        workers: merged.workers.unwrap_or(workers),
        mock_truth: merged.mock_truth,
        drop_prob: unit("--drop-prob", merged.drop_prob.unwrap_or(0.0))?,
        fp_rate,
        jitter,
    })
}

fn planted_truth(path: &Path, image_name: &str) -> CliResult<Vec<Detection>> {
    let records = read_records(path)?;
    let total = records.len();
    let truth: Vec<Detection> = records
        .iter()
        .filter(|r| r.image == image_name)
        .map(|r| r.to_detection())
        .collect::<Result<_, _>>()?;
    if truth.is_empty() && total > 0 {
        log::warn!("{} has no records for image `{image_name}`", path.display());
    }
    Ok(truth)
}

pub fn detect(args: DetectArgs, flag_seed: Option<u64>, env_seed: Option<u64>, exec: Exec, workers: usize) -> CliResult<()> {
    let cfg = resolve(args, flag_seed, env_seed, workers)?;
    out_dir(&cfg.out)?;
    write_run_json(&cfg.out, "detect", &cfg)?;

    let started = Instant::now();
    let (raster, meta) = load_image(&cfg.image)?;
    let mock = MockOracleConfig {
        planted_truth: match &cfg.mock_truth {
            Some(p) => planted_truth(p, &meta.name)?,
            None => Vec::new(),
        },
        drop_prob: cfg.drop_prob,
        false_positives_per_tile: cfg.fp_rate,
        jitter_sigma_px: cfg.jitter,
        seed: cfg.seed,
        false_positive_size_px: 10.0,
    };
    let backends: Vec<Box<dyn DetectorBackend>> = cfg
        .profiles
        .iter()
        .map(|p| backend_for(p, Some(&mock), cfg.seed))
        .collect::<Result<_, _>>()?;
    let members: Vec<(ScaleProfile, &dyn DetectorBackend)> =
        cfg.profiles.iter().cloned().zip(backends.iter().map(|b| b.as_ref())).collect();
    let opts = RunOptions {
        conf_threshold: cfg.conf,
        nms_iou: cfg.nms_iou,
        overlap: cfg.overlap,
        window_override: cfg.window,
        exec,
    };
    log::info!("detecting on {} ({}x{}, gsd {})", meta.name, raster.width(), raster.height(), meta.gsd);
    let run = run_ensemble(&raster, &meta, &members, &opts)?;

    write_detections(&run.set, &meta, &cfg.out.join("detections.jsonl"))?;
    write_detections_csv(&run.set, &meta, &cfg.out.join("detections.csv"))?;
    let seconds = started.elapsed().as_secs_f64();

    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    for d in &run.set.detections {
        *per_class.entry(class_name(d.class_id)).or_default() += 1;
    }
    let area = area_km2(raster.width(), raster.height(), meta.gsd);
    let summary = json!({
        "image": meta.name,
        "width": raster.width(),
        "height": raster.height(),
        "gsd": meta.gsd,
        "tiles": run.total_tiles(),
        "tiles_per_scale": run.scales.iter().map(|s| json!({
            "scale_id": s.scale_id, "window_px": s.window_px, "tiles": s.tiles,
            "detections_before_merge": s.detections.len(),
            "rejected_out_of_profile": s.rejected_out_of_profile,
        })).collect::<Vec<_>>(),
        "detections": run.set.detections.len(),
        "detections_per_class": per_class,
        "failed_chips": run.failed_chips(),
        "wall_seconds": seconds,
        "area_km2": area,
        "km2_per_min": km2_per_minute(area, seconds),
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;
    if !run.failed_chips().is_empty() {
        log::warn!("{} chips failed; see summary.json", run.failed_chips().len());
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(gigadetect::Error::Schema(e.to_string()))
    }
}
