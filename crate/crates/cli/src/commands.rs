use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use gigadetect::dataprep::{
    augment_batch, footprint_to_box, format_labels, parse_labels, point_to_box, write_manifest, AugmentOptions,
    FootprintLabel, LabeledBox, PointLabel, DEFAULT_FOOTPRINT_COVERAGE, DEFAULT_HSV_RANGE, DEFAULT_POINT_BOX_M,
};
use gigadetect::ensemble::{area_km2, km2_per_minute, run_scale, MockBackend, MockOracleConfig, RunOptions, ScaleProfile};
use gigadetect::eval::{
    evaluate, line_fit, piecewise_fit, read_curve_csv, synth_scene_with, write_curve_csv, CurvePoint, IouPolicy, Scene,
    SceneSpec,
};
use gigadetect::imaging::{self, default_image_name, load_image, read_sidecar, save_image, ImageMeta};
use gigadetect::network::{build_yolt_spec, forward_traced, load_weights, save_weights, Tensor, WeightStore};
use gigadetect::stitcher::{
    merge, merge_records, read_detections, read_records, write_detections, write_records, DetectionBatch,
    DetectionRecord, DEFAULT_NMS_IOU,
};
use gigadetect::tiler::{extract, plan_tiles_named, tile_name, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use gigadetect::GeoTransform;

use crate::{out_dir, usage, CliResult, Ctx};

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| gigadetect::Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub fn write_run_json(dir: &Path, command: &str, config: &impl Serialize) -> CliResult<()> {
    write_json(
        &dir.join("run.json"),
        &json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "config": config }),
    )
}

fn existing(name: &str, p: &Path) -> CliResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{name} `{}` does not exist", p.display())))
    }
}

fn fraction(name: &str, v: f64, closed_top: bool) -> CliResult<()> {
    let ok = v >= 0.0 && if closed_top { v <= 1.0 } else { v < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(usage(format!("{name} out of range: {v}")))
    }
}

fn ext_of(p: &Path) -> String {
    p.extension().and_then(|e| e.to_str()).unwrap_or("png").to_ascii_lowercase()
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

#[derive(Args, Debug, Serialize)]
pub struct TileArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Chip file extension: png, tif or tiff [default: the input's]
    #[arg(long)]
    pub ext: Option<String>,
    /// Only write plan.json.
    #[arg(long)]
    pub plan_only: bool,
    #[arg(long, default_value = "tile-out")]
    pub out: PathBuf,
}

pub fn tile(a: TileArgs, ctx: &Ctx) -> CliResult<()> {
    existing("--image", &a.image)?;
    fraction("--overlap", a.overlap, false)?;
    if a.window == 0 {
        return Err(usage("--window must be >= 1"));
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "tile", &a)?;
    let (raster, meta) = load_image(&a.image)?;
    let plan = plan_tiles_named(&meta.name, raster.width(), raster.height(), a.window, a.overlap)?;
    write_json(&a.out.join("plan.json"), &plan)?;
    if !a.plan_only {
        let ext = a.ext.clone().unwrap_or_else(|| ext_of(&a.image));
        let chips = a.out.join("chips");
        out_dir(&chips)?;
        let results = gigadetect::par::map(ctx.exec, &plan.tiles, |t| -> CliResult<()> {
            let chip = extract(&raster, t)?;
            let (ox, oy) = meta.transform.pixel_to_world(t.col as f64, t.row as f64);
            let chip_meta = ImageMeta::new(meta.name.clone(), GeoTransform::new(ox, oy, meta.gsd)?)?;
            save_image(&chip, &chip_meta, &chips.join(tile_name(&meta.name, t, &ext)?))?;
            Ok(())
        });
        results.into_iter().collect::<CliResult<Vec<()>>>()?;
    }
    println!("{} tiles ({}x{}, window {}, stride {})", plan.tiles.len(), plan.image_w, plan.image_h, plan.window, plan.stride());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct StitchArgs {
    /// Detection JSONL files to merge.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    #[arg(long, default_value = "stitch-out")]
    pub out: PathBuf,
}

pub fn stitch(a: StitchArgs, _ctx: &Ctx) -> CliResult<()> {
    for p in &a.inputs {
        existing("--inputs", p)?;
    }
    fraction("--nms-iou", a.nms_iou, true)?;
    out_dir(&a.out)?;
    write_run_json(&a.out, "stitch", &a)?;
    let mut records: Vec<DetectionRecord> = Vec::new();
    for p in &a.inputs {
        records.extend(read_records(p)?);
    }
    let merged = merge_records(&records, a.nms_iou)?;
    write_records(&merged, &a.out.join("detections.jsonl"))?;
    println!("{} records in, {} after merge", records.len(), merged.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// One IOU threshold for every class [default: 0.25 for cars, 0.5 otherwise]
    #[arg(long)]
    pub iou: Option<f64>,
    /// GSD label for the curve row.
    #[arg(long)]
    pub gsd: Option<f64>,
    /// Append the (gsd, f1, F_c) row to this CSV instead of `<out>/curve.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value = "eval-out")]
    pub out: PathBuf,
}

pub fn eval(a: EvalArgs, ctx: &Ctx) -> CliResult<()> {
    existing("--truth", &a.truth)?;
    existing("--pred", &a.pred)?;
    let policy = match a.iou {
        Some(t) if t > 0.0 && t <= 1.0 => IouPolicy::uniform(t),
        Some(t) => return Err(usage(format!("--iou must be in (0, 1], got {t}"))),
        None => IouPolicy::default(),
    };
    out_dir(&a.out)?;
    write_run_json(&a.out, "eval", &a)?;
    let truth = read_detections(&a.truth)?;
    let pred = read_detections(&a.pred)?;
    let mut names: Vec<String> = truth.iter().map(|b| b.image_name.clone()).collect();
    for b in &pred {
        if !names.contains(&b.image_name) {
            names.push(b.image_name.clone());
        }
    }
    let find = |set: &[DetectionBatch], n: &str| set.iter().find(|b| b.image_name == n).map(|b| b.detections.clone()).unwrap_or_default();
    let scenes: Vec<Scene> = names
        .iter()
        .map(|n| Scene { scene_id: n.clone(), detections: find(&pred, n), truth: find(&truth, n) })
        .collect();
    let report = evaluate(&scenes, &policy, ctx.exec)?;
    write_json(&a.out.join("metrics.json"), &json!({ "iou_policy": policy, "report": report }))?;
    if let Some(gsd) = a.gsd {
        let row = CurvePoint { gsd, f1: report.f1, count_fraction: report.count_fraction };
        let path = a.curve.clone().unwrap_or_else(|| a.out.join("curve.csv"));
        let mut rows = if path.exists() { read_curve_csv(&path)? } else { Vec::new() };
        rows.push(row);
        write_curve_csv(&rows, &path)?;
    }
    println!(
        "precision {:.4} recall {:.4} f1 {:.4} F_c {:.4}",
        report.precision, report.recall, report.f1, report.count_fraction
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target GSDs in metres, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub gsd_list: Vec<f64>,
    /// Source GSD, overriding the sidecar.
    #[arg(long)]
    pub src_gsd: Option<f64>,
    #[arg(long, default_value = "degrade-out")]
    pub out: PathBuf,
}

pub fn degrade_cmd_name(stem: &str, gsd: f64, ext: &str) -> String {
    format!("{stem}_{gsd:.2}m.{ext}")
}

pub fn degrade(a: DegradeArgs, ctx: &Ctx) -> CliResult<()> {
    existing("--in", &a.input)?;
    if let Some(g) = a.src_gsd {
        if !(g > 0.0) {
            return Err(usage("--src-gsd must be > 0"));
        }
    }
    if a.gsd_list.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(usage("--gsd-list values must be > 0"));
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "degrade", &a)?;
    let (raster, mut meta) = load_image(&a.input)?;
    if let Some(g) = a.src_gsd {
        meta = meta.rescaled(g)?;
    }
    let ext = ext_of(&a.input);
    let mut outputs = Vec::new();
    for &gsd in &a.gsd_list {
        let out = imaging::degrade(&raster, meta.gsd, gsd, ctx.exec)?;
        let path = a.out.join(degrade_cmd_name(&meta.name, gsd, &ext));
        save_image(&out, &meta.rescaled(gsd)?, &path)?;
        log::info!("{} -> {}x{}", path.display(), out.width(), out.height());
        outputs.push(json!({ "gsd": gsd, "path": path, "width": out.width(), "height": out.height() }));
    }
    write_json(&a.out.join("outputs.json"), &outputs)?;
    println!("{} rasters written", outputs.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Normalized box label file for the image.
    #[arg(long)]
    pub labels: PathBuf,
    /// Samples to emit.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Draw angles uniformly instead of quarter turns.
    #[arg(long)]
    pub continuous: bool,
    /// Saturation factor range `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "0.7,1.3")]
    pub sat: (f64, f64),
    /// Value factor range `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "0.7,1.3")]
    pub val: (f64, f64),
    #[arg(long, default_value = "augment-out")]
    pub out: PathBuf,
}

pub fn augment(a: AugmentArgs, ctx: &Ctx) -> CliResult<()> {
    existing("--image", &a.image)?;
    existing("--labels", &a.labels)?;
    for (name, r) in [("--sat", a.sat), ("--val", a.val)] {
        if !(r.0 > 0.0 && r.0 <= r.1 && r.1 <= 4.0) {
            return Err(usage(format!("{name} must satisfy 0 < lo <= hi <= 4")));
        }
    }
    let _ = DEFAULT_HSV_RANGE;
    out_dir(&a.out)?;
    write_run_json(&a.out, "augment", &json!({ "args": &a, "seed": ctx.seed }))?;
    let (raster, meta) = load_image(&a.image)?;
    let text = fs::read_to_string(&a.labels).map_err(|e| gigadetect::Error::Io { path: a.labels.clone(), source: e })?;
    let boxes = parse_labels(&text, raster.width(), raster.height())?;
    let samples: Vec<(String, _, Vec<LabeledBox>)> =
        (0..a.count).map(|_| (meta.name.clone(), raster.clone(), boxes.clone())).collect();
    let opts = AugmentOptions { continuous_angles: a.continuous, sat_range: a.sat, val_range: a.val };
    let out = augment_batch(&samples, ctx.seed, &opts, ctx.exec)?;
    let ext = ext_of(&a.image);
    let mut records = Vec::new();
    for s in out {
        let img_path = a.out.join(format!("{}.{ext}", s.record.output));
        let m = ImageMeta::with_gsd(s.record.output.clone(), meta.gsd)?;
        save_image(&s.image, &m, &img_path)?;
        let label_path = a.out.join(format!("{}.txt", s.record.output));
        let text = format_labels(&s.boxes, s.image.width(), s.image.height())?;
        fs::write(&label_path, text).map_err(|e| gigadetect::Error::Io { path: label_path.clone(), source: e })?;
        records.push(s.record);
    }
    write_manifest(&records, &a.out.join("manifest.json"))?;
    println!("{} samples written", records.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct PrepLabelsArgs {
    /// JSON list of {x, y, class_id} points.
    #[arg(long, conflicts_with = "footprints", required_unless_present = "footprints")]
    pub points: Option<PathBuf>,
    /// JSON list of {polygon: [[x, y], ...], class_id} footprints.
    #[arg(long)]
    pub footprints: Option<PathBuf>,
    /// Image to take dimensions (and gsd) from.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub gsd: Option<f64>,
    /// Box side for point labels, metres.
    #[arg(long, default_value_t = DEFAULT_POINT_BOX_M)]
    pub size_m: f64,
    /// Per-axis extent kept from footprints.
    #[arg(long, default_value_t = DEFAULT_FOOTPRINT_COVERAGE)]
    pub coverage: f64,
    #[arg(long, default_value = "labels-out")]
    pub out: PathBuf,
}

pub fn prep_labels(a: PrepLabelsArgs, _ctx: &Ctx) -> CliResult<()> {
    let (mut w, mut h, mut gsd) = (a.width, a.height, a.gsd);
    if let Some(img) = &a.image {
        existing("--image", img)?;
        let (r, meta) = load_image(img)?;
        w = w.or(Some(r.width()));
        h = h.or(Some(r.height()));
        if gsd.is_none() && read_sidecar(img)?.is_some() {
            gsd = Some(meta.gsd);
        }
    }
    let (w, h) = match (w, h) {
        (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(usage("image dimensions needed: pass --image or --width and --height")),
    };
    out_dir(&a.out)?;
    write_run_json(&a.out, "prep-labels", &a)?;
    let read = |p: &Path| -> CliResult<String> {
        existing("input", p)?;
        fs::read_to_string(p).map_err(|e| gigadetect::Error::Io { path: p.to_path_buf(), source: e }.into())
    };
    let boxes: Vec<LabeledBox> = if let Some(p) = &a.points {
        let gsd = gsd.ok_or_else(|| usage("point labels need --gsd (or an image with a sidecar)"))?;
        let points: Vec<PointLabel> = serde_json::from_str(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        points
            .iter()
            .map(|pt| Ok(LabeledBox::new(pt.class_id, point_to_box(pt, a.size_m, gsd, w, h)?)))
            .collect::<CliResult<_>>()?
    } else {
        let p = a.footprints.as_ref().expect("clap enforces one input");
        let fps: Vec<FootprintLabel> = serde_json::from_str(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        fps.iter()
            .map(|f| Ok(LabeledBox::new(f.class_id, footprint_to_box(f, a.coverage)?.clip(w as f64, h as f64))))
            .collect::<CliResult<_>>()?
    };
    let text = format_labels(&boxes, w, h)?;
    let path = a.out.join("labels.txt");
    fs::write(&path, text).map_err(|e| gigadetect::Error::Io { path: path.clone(), source: e })?;
    println!("{} labels written to {}", boxes.len(), path.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct FitCurveArgs {
    /// CSV with gsd,f1,F_c columns.
    #[arg(long)]
    pub csv: PathBuf,
    /// Column to fit: f1 or F_c.
    #[arg(long, default_value = "f1")]
    pub column: String,
    #[arg(long, default_value = "fit-out")]
    pub out: PathBuf,
}

pub fn fit_curve(a: FitCurveArgs, _ctx: &Ctx) -> CliResult<()> {
    existing("--csv", &a.csv)?;
    if a.column != "f1" && a.column != "F_c" {
        return Err(usage(format!("--column must be f1 or F_c, got {}", a.column)));
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "fit-curve", &a)?;
    let mut rows = read_curve_csv(&a.csv)?;
    rows.sort_by(|x, y| x.gsd.total_cmp(&y.gsd));
    let xs: Vec<f64> = rows.iter().map(|r| r.gsd).collect();
    let ys: Vec<f64> = rows.iter().map(|r| if a.column == "f1" { r.f1 } else { r.count_fraction }).collect();
    let fit = piecewise_fit(&xs, &ys)?;
    let line = line_fit(&xs, &ys)?;
    write_json(&a.out.join("fit.json"), &json!({ "column": a.column, "piecewise": fit, "line": line }))?;
    println!(
        "breakpoint {:.2} m, slopes {:.4} / {:.4}, sse {:.3e} (single line {:.3e})",
        fit.breakpoint_gsd, fit.slope_left, fit.slope_right, fit.sse, line.sse
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    pub width: usize,
    #[arg(long, default_value_t = 4000)]
    pub height: usize,
    #[arg(long, default_value_t = 100)]
    pub objects: usize,
    #[arg(long, default_value_t = 10)]
    pub object_px: usize,
    /// Class ids drawn for objects, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub classes: Vec<u32>,
    #[arg(long, default_value_t = 0.5)]
    pub gsd: f64,
    #[arg(long, default_value = "scene")]
    pub name: String,
    /// png, tif or tiff.
    #[arg(long, default_value = "png")]
    pub format: String,
    #[arg(long, default_value = "synth-out")]
    pub out: PathBuf,
}

pub fn synth(a: SynthArgs, ctx: &Ctx) -> CliResult<()> {
    if !matches!(a.format.as_str(), "png" | "tif" | "tiff") {
        return Err(usage(format!("--format must be png, tif or tiff, got {}", a.format)));
    }
    if a.width == 0 || a.height == 0 || !(a.gsd > 0.0) {
        return Err(usage("--width, --height and --gsd must be positive"));
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "synth", &json!({ "args": &a, "seed": ctx.seed }))?;
    let spec = SceneSpec {
        class_ids: a.classes.clone(),
        ..SceneSpec::new(a.width, a.height, a.objects, a.object_px, ctx.seed)
    };
    let (raster, truth) = synth_scene_with(&spec, ctx.exec)?;
    let meta = ImageMeta::with_gsd(a.name.clone(), a.gsd)?;
    let path = a.out.join(format!("{}.{}", a.name, a.format));
    save_image(&raster, &meta, &path)?;
    let set = merge(&[DetectionBatch::new(a.name.clone(), truth)], 1.0)?;
    write_detections(&set, &meta, &a.out.join("truth.jsonl"))?;
    println!("{} with {} objects", path.display(), set.detections.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct NetinfoArgs {
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub boxes: usize,
    #[arg(long, default_value_t = 416)]
    pub input_size: usize,
    /// Weight manifest to load instead of building from the flags above.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Run a forward pass on a deterministic input.
    #[arg(long)]
    pub forward: bool,
    /// Save seeded random weights to this manifest path.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    #[arg(long, default_value = "netinfo-out")]
    pub out: PathBuf,
}

pub fn netinfo(a: NetinfoArgs, ctx: &Ctx) -> CliResult<()> {
    if let Some(w) = &a.weights {
        existing("--weights", w)?;
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "netinfo", &json!({ "args": &a, "seed": ctx.seed }))?;
    let (net, weights) = match &a.weights {
        Some(p) => {
            let (n, w) = load_weights(p)?;
            (n, Some(w))
        }
        None => (build_yolt_spec(a.classes, a.boxes, a.input_size).map_err(|e| usage(e.to_string()))?, None),
    };
    println!("{}", net.layer_table()?);
    let shapes = net.output_shapes()?;
    let mut info = json!({
        "layers": net.layers.len(),
        "head_filters": net.head_filters(),
        "grid_size": net.grid_size(),
        "downsample_factor": net.downsample_factor(),
        "shapes": shapes,
        "spec": &net,
    });
    let weights = match (weights, a.forward || a.save_weights.is_some()) {
        (Some(w), _) => Some(w),
        (None, true) => Some(WeightStore::random(&net, ctx.seed)?),
        (None, false) => None,
    };
    if let (Some(path), Some(w)) = (&a.save_weights, &weights) {
        save_weights(&net, w, path)?;
    }
    if a.forward {
        let w = weights.as_ref().expect("built above");
        let n = net.input_size;
        let x = Tensor::from_vec(n, n, 3, (0..n * n * 3).map(|i| (i % 251) as f32 / 251.0).collect())?;
        let t0 = Instant::now();
        let trace = forward_traced(&net, w, &x, ctx.exec)?;
        let secs = t0.elapsed().as_secs_f64();
        info["forward_seconds"] = json!(secs);
        info["output_shape"] = json!(trace.output.shape());
        println!("forward pass: output {:?} in {secs:.2} s", trace.output.shape());
    }
    write_json(&a.out.join("netinfo.json"), &info)?;
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Generate a synthetic scene instead of reading --image.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub synthetic: bool,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 16000)]
    pub width: usize,
    #[arg(long, default_value_t = 16000)]
    pub height: usize,
    #[arg(long, default_value_t = 500)]
    pub objects: usize,
    #[arg(long, default_value_t = 10)]
    pub object_px: usize,
    /// Ground sample distance; overrides the sidecar for --image.
    #[arg(long)]
    pub gsd: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    #[arg(long, default_value = "bench-out")]
    pub out: PathBuf,
}

pub fn bench(a: BenchArgs, ctx: &Ctx) -> CliResult<()> {
    fraction("--overlap", a.overlap, false)?;
    fraction("--nms-iou", a.nms_iou, true)?;
    if a.window == 0 {
        return Err(usage("--window must be >= 1"));
    }
    if let Some(g) = a.gsd {
        if !(g > 0.0) {
            return Err(usage("--gsd must be > 0"));
        }
    }
    if let Some(p) = &a.image {
        existing("--image", p)?;
    }
    out_dir(&a.out)?;
    write_run_json(&a.out, "bench", &json!({ "args": &a, "seed": ctx.seed, "workers": ctx.workers }))?;

    let t0 = Instant::now();
    let (raster, meta, truth) = match &a.image {
        Some(p) => {
            let (r, mut m) = load_image(p)?;
            if let Some(g) = a.gsd {
                m = m.rescaled(g)?;
            }
            (r, m, Vec::new())
        }
        None => {
            let spec = SceneSpec::new(a.width, a.height, a.objects, a.object_px, ctx.seed);
            let (r, t) = synth_scene_with(&spec, ctx.exec)?;
            let m = ImageMeta::with_gsd(default_image_name(Path::new("bench")), a.gsd.unwrap_or(0.5))?;
            (r, m, t)
        }
    };
    let setup_seconds = t0.elapsed().as_secs_f64();

    let backend = MockBackend::new(MockOracleConfig::perfect(truth, ctx.seed))?;
    let profile = ScaleProfile { window_px: Some(a.window), ..ScaleProfile::new("bench", 1.0, 1, vec![0]) };
    let opts = RunOptions { nms_iou: a.nms_iou, overlap: a.overlap, exec: ctx.exec, ..RunOptions::default() };
    let t1 = Instant::now();
    let run = run_scale(&raster, &meta, &profile, &backend, &opts)?;
    let set = merge(&[DetectionBatch::new(meta.name.clone(), run.detections)], a.nms_iou)?;
    let seconds = t1.elapsed().as_secs_f64();

    let area = area_km2(raster.width(), raster.height(), meta.gsd);
    let report = json!({
        "width": raster.width(),
        "height": raster.height(),
        "gsd": meta.gsd,
        "tiles": run.tiles,
        "detections": set.detections.len(),
        "workers": ctx.workers,
        "setup_seconds": setup_seconds,
        "pipeline_seconds": seconds,
        "area_km2": area,
        "km2_per_min": km2_per_minute(area, seconds),
    });
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
