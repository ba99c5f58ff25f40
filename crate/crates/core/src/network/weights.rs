//! Weight storage and the on-disk weight format.
//!
//! A weight file is a JSON manifest plus a raw blob of little-endian `f32`.
//! For each convolution the blob holds, in order: batch-norm scale, bias,
//! mean and variance (when the layer is batch-normalized), the kernel in
//! `[ky][kx][in_c][out_c]` order, then the bias (only without batch norm).
//! The manifest records every tensor's byte offset and length.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, ConvWeights};
use super::spec::{build_yolt_spec, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

pub const WEIGHT_FORMAT: &str = "gigadetect-weights";

/// One slot per network layer; `None` for max-pool and passthrough layers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    layers: Vec<Option<ConvWeights>>,
}

impl WeightStore {
    pub fn new(layers: Vec<Option<ConvWeights>>) -> Self {
        WeightStore { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvWeights> {
        self.layers.get(layer).and_then(|l| l.as_ref())
    }

    /// Seeded He-uniform kernels with mildly perturbed batch-norm statistics.
    /// Keeps activations O(1) through all 22 layers; useful for shape and
    /// plumbing tests without trained weights.
    pub fn random(net: &NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = net.output_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut layers = Vec::with_capacity(net.layers.len());
        for (i, l) in net.layers.iter().enumerate() {
            let slot = match l {
                LayerSpec::Conv {
                    filters,
                    size,
                    batch_norm,
                    ..
                } => {
                    let fan_in = (size * size * in_c) as f32;
                    let limit = (6.0 / fan_in).sqrt();
                    let n = size * size * in_c * filters;
                    let weights = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    let (bias, bn) = if *batch_norm {
                        let mut v = |lo: f32, hi: f32| -> Vec<f32> {
                            (0..*filters).map(|_| rng.random_range(lo..hi)).collect()
                        };
                        let bn = BatchNorm {
                            scale: v(0.5, 1.5),
                            bias: v(-0.1, 0.1),
                            mean: v(-0.1, 0.1),
                            var: v(0.5, 1.5),
                        };
                        (Vec::new(), Some(bn))
                    } else {
                        (vec![0.0; *filters], None)
                    };
                    Some(ConvWeights {
                        in_c,
                        out_c: *filters,
                        size: *size,
                        weights,
                        bias,
                        bn,
                    })
                }
                _ => None,
            };
            layers.push(slot);
            in_c = shapes[i].2;
        }
        Ok(WeightStore { layers })
    }

    /// Checks every slot against the layer it feeds.
    pub fn check_against(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::Shape(format!(
                "weight store has {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        let shapes = net.output_shapes()?;
        for (i, (l, slot)) in net.layers.iter().zip(&self.layers).enumerate() {
            let in_c = if i == 0 { 3 } else { shapes[i - 1].2 };
            let wrap = |e: Error| match e {
                Error::Shape(message) | Error::Numeric(message) => Error::LayerShape { layer: i, message },
                other => other,
            };
            match (l, slot) {
                (LayerSpec::Conv { filters, size, batch_norm, .. }, Some(cw)) => {
                    if cw.in_c != in_c || cw.out_c != *filters || cw.size != *size || cw.bn.is_some() != *batch_norm {
                        return Err(Error::LayerShape {
                            layer: i,
                            message: format!(
                                "weights {}x{}x{}->{} (bn={}) but layer is {size}x{size}x{in_c}->{filters} (bn={batch_norm})",
                                cw.size, cw.size, cw.in_c, cw.out_c, cw.bn.is_some()
                            ),
                        });
                    }
                    cw.check().map_err(wrap)?;
                }
                (LayerSpec::Conv { .. }, None) => {
                    return Err(Error::LayerShape {
                        layer: i,
                        message: "missing convolution weights".into(),
                    })
                }
                (_, Some(_)) => {
                    return Err(Error::LayerShape {
                        layer: i,
                        message: "weights supplied for a parameter-free layer".into(),
                    })
                }
                (_, None) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    index: usize,
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    conv_layout: String,
    blob: String,
    n_classes: usize,
    n_boxes: usize,
    input_size: usize,
    layers: Vec<LayerEntry>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

/// Writes `<manifest_path>` and a sibling `<stem>.bin` blob.
pub fn save_weights(net: &NetworkSpec, store: &WeightStore, manifest_path: &Path) -> Result<()> {
    store.check_against(net)?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("weights");
    let blob_name = format!("{stem}.bin");
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(net.layers.len());

    for (i, (l, slot)) in net.layers.iter().zip(&store.layers).enumerate() {
        let mut tensors = Vec::new();
        let mut push = |name: &str, values: &[f32]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                offset: blob.len() as u64,
                len: values.len() as u64,
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        if let Some(cw) = slot {
            if let Some(bn) = &cw.bn {
                push("bn_scale", &bn.scale);
                push("bn_bias", &bn.bias);
                push("bn_mean", &bn.mean);
                push("bn_var", &bn.var);
            }
            push("conv_weights", &cw.weights);
            if cw.bn.is_none() {
                push("conv_bias", &cw.bias);
            }
        }
        entries.push(LayerEntry {
            index: i,
            spec: l.clone(),
            in_channels: slot.as_ref().map(|cw| cw.in_c),
            tensors,
        });
    }

    let manifest = Manifest {
        format: WEIGHT_FORMAT.to_string(),
        version: 1,
        dtype: "f32le".to_string(),
        conv_layout: "hwio".to_string(),
        blob: blob_name.clone(),
        n_classes: net.n_classes,
        n_boxes: net.n_boxes,
        input_size: net.input_size,
        layers: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    let bp = blob_path(manifest_path, &blob_name);
    fs::write(&bp, blob).map_err(|e| Error::io(bp, e))
}

/// Reads a manifest + blob pair and returns the network it describes.
pub fn load_weights(manifest_path: &Path) -> Result<(NetworkSpec, WeightStore)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != WEIGHT_FORMAT || manifest.dtype != "f32le" || manifest.conv_layout != "hwio" {
        return Err(Error::Schema(format!(
            "unsupported weight file: format={} dtype={} layout={}",
            manifest.format, manifest.dtype, manifest.conv_layout
        )));
    }
    let net = build_yolt_spec(manifest.n_classes, manifest.n_boxes, manifest.input_size)?;
    if manifest.layers.len() != net.layers.len() {
        return Err(Error::Shape(format!(
            "manifest lists {} layers, network has {}",
            manifest.layers.len(),
            net.layers.len()
        )));
    }
    let bp = blob_path(manifest_path, &manifest.blob);
    let blob = fs::read(&bp).map_err(|e| Error::io(bp, e))?;
    let shapes = net.output_shapes()?;

    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, (entry, l)) in manifest.layers.iter().zip(&net.layers).enumerate() {
        let shape_err = |message: String| Error::LayerShape { layer: i, message };
        if entry.index != i || &entry.spec != l {
            return Err(shape_err(format!(
                "manifest layer {:?} does not match network layer {l:?}",
                entry.spec
            )));
        }
        let read = |name: &str, expected: usize| -> Result<Vec<f32>> {
            let t = entry
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| shape_err(format!("missing tensor `{name}`")))?;
            if t.len as usize != expected {
                return Err(shape_err(format!(
                    "tensor `{name}` has {} values, expected {expected}",
                    t.len
                )));
            }
            let start = t.offset as usize;
            let end = start + expected * 4;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| shape_err(format!("tensor `{name}` runs past the end of the blob")))?;
            Ok(bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let slot = match l {
            LayerSpec::Conv { filters, size, batch_norm, .. } => {
                let in_c = if i == 0 { 3 } else { shapes[i - 1].2 };
                if entry.in_channels != Some(in_c) {
                    return Err(shape_err(format!(
                        "manifest in_channels {:?}, network expects {in_c}",
                        entry.in_channels
                    )));
                }
                let bn = if *batch_norm {
                    Some(BatchNorm {
                        scale: read("bn_scale", *filters)?,
                        bias: read("bn_bias", *filters)?,
                        mean: read("bn_mean", *filters)?,
                        var: read("bn_var", *filters)?,
                    })
                } else {
                    None
                };
                let weights = read("conv_weights", size * size * in_c * filters)?;
                let bias = if *batch_norm { Vec::new() } else { read("conv_bias", *filters)? };
                Some(ConvWeights { in_c, out_c: *filters, size: *size, weights, bias, bn })
            }
            _ => None,
        };
        layers.push(slot);
    }
    let store = WeightStore { layers };
    store.check_against(&net)?;
    Ok((net, store))
}
