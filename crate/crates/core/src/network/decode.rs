use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Detection, PixelBox};

/// Prior box size in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

/// `n` square priors spaced evenly from 0.5 to 8 cells.
pub fn default_anchors(n: usize) -> Vec<Anchor> {
    match n {
        0 => Vec::new(),
        1 => vec![Anchor { w: 0.5, h: 0.5 }],
        _ => (0..n)
            .map(|i| {
                let s = 0.5 + 7.5 * i as f64 / (n - 1) as f64;
                Anchor { w: s, h: s }
            })
            .collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns a `G x G x n_boxes*(n_classes+5)` prediction grid into chip-pixel
/// detections.
///
/// For cell `(i, j)` and prior `b` the raw values are
/// `(tx, ty, tw, th, to, class logits...)`. The centre is
/// `((j + sigmoid(tx)), (i + sigmoid(ty))) * chip / G`, the size is
/// `(anchor_w * e^tw, anchor_h * e^th) * chip / G`, and each class scores
/// `sigmoid(to) * softmax(logits)[k]`. One detection is emitted per
/// `(cell, prior, class)` scoring at least `conf_threshold`, clipped to the
/// chip.
pub fn decode_grid(y: &Tensor, anchors: &[Anchor], conf_threshold: f64, chip_size: f64) -> Result<Vec<Detection>> {
    if anchors.is_empty() {
        return Err(Error::invalid("at least one anchor is required"));
    }
    if y.h != y.w {
        return Err(Error::Shape(format!("prediction grid {}x{} is not square", y.h, y.w)));
    }
    if y.c % anchors.len() != 0 || y.c / anchors.len() < 6 {
        return Err(Error::invalid(format!(
            "{} anchors do not divide {} prediction channels into (5 + classes) groups",
            anchors.len(),
            y.c
        )));
    }
    if !(chip_size > 0.0) {
        return Err(Error::invalid(format!("chip size must be > 0, got {chip_size}")));
    }
    let per_box = y.c / anchors.len();
    let n_classes = per_box - 5;
    let g = y.h;
    let cell = chip_size / g as f64;
    let mut out = Vec::new();
    let mut probs = vec![0f64; n_classes];

    for i in 0..g {
        for j in 0..g {
            let px = y.pixel(i, j);
            for (b, anchor) in anchors.iter().enumerate() {
                let v = &px[b * per_box..(b + 1) * per_box];
                let objectness = sigmoid(v[4] as f64);
                if objectness < conf_threshold {
                    continue;
                }
                let logits = &v[5..];
                let max = logits.iter().fold(f32::NEG_INFINITY, |m, &l| m.max(l)) as f64;
                let mut total = 0.0;
                for (p, &l) in probs.iter_mut().zip(logits) {
                    *p = (l as f64 - max).exp();
                    total += *p;
                }
                let cx = (j as f64 + sigmoid(v[0] as f64)) * cell;
                let cy = (i as f64 + sigmoid(v[1] as f64)) * cell;
                let bw = anchor.w * (v[2] as f64).exp() * cell;
                let bh = anchor.h * (v[3] as f64).exp() * cell;
                let bbox = PixelBox::centered(cx, cy, bw, bh).clip(chip_size, chip_size);
                for (k, p) in probs.iter().enumerate() {
                    let score = objectness * p / total;
                    if score >= conf_threshold && score > 0.0 {
                        out.push(Detection::new(k as u32, score.clamp(0.0, 1.0), bbox));
                    }
                }
            }
        }
    }
    Ok(out)
}
