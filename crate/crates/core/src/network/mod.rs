//! From-scratch inference for the 22-layer, stride-16 detection network.
//!
//! Tensors are `h x w x c`, row-major with channels innermost. Convolutions
//! are stride 1 with same padding; the only spatial reductions are the four
//! 2x2/2 max-pools, and layer 19 concatenates a space-to-depth copy of the
//! 52x52 (for a 416 input) feature map onto the coarse 26x26 stack.

mod decode;
mod layers;
mod spec;
mod weights;

pub use decode::{decode_grid, default_anchors, Anchor};
pub use layers::{
    batch_norm, batchnorm_leaky, conv2d, depth_to_space, leaky, maxpool2d, passthrough,
    space_to_depth, BatchNorm, ConvWeights, LEAKY_SLOPE,
};
pub use spec::{build_yolt_spec, Activation, LayerSpec, NetworkSpec, TrainingHyperparams};
pub use weights::{load_weights, save_weights, WeightStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            values: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w}x{c} tensor",
                values.len()
            )));
        }
        Ok(Tensor { h, w, c, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.values[self.index(y, x, ch)]
    }

    /// Channel vector at `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.w + x) * self.c;
        &self.values[i..i + self.c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Network input from an RGB raster, scaled to `[0, 1]`.
    pub fn from_raster(r: &crate::imaging::Raster) -> Tensor {
        Tensor {
            h: r.height(),
            w: r.width(),
            c: crate::imaging::CHANNELS,
            values: r.data().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }
}

/// Output of a forward pass plus the shape of every layer's output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Tensor,
    pub shapes: Vec<(usize, usize, usize)>,
}

pub fn forward(net: &NetworkSpec, weights: &WeightStore, x: &Tensor, exec: Exec) -> Result<Tensor> {
    forward_traced(net, weights, x, exec).map(|t| t.output)
}

pub fn forward_traced(
    net: &NetworkSpec,
    weights: &WeightStore,
    x: &Tensor,
    exec: Exec,
) -> Result<ForwardTrace> {
    if x.h != net.input_size || x.w != net.input_size || x.c != 3 {
        return Err(Error::Shape(format!(
            "input {}x{}x{} does not match network input {}x{}x3",
            x.h, x.w, x.c, net.input_size, net.input_size
        )));
    }
    if weights.len() != net.layers.len() {
        return Err(Error::Shape(format!(
            "weight store has {} layers, network has {}",
            weights.len(),
            net.layers.len()
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("non-finite input tensor".into()));
    }

    let sources: Vec<usize> = net
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::Passthrough { source } => Some(*source),
            _ => None,
        })
        .collect();
    let mut saved: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    let mut shapes = Vec::with_capacity(net.layers.len());
    let mut current = x.clone();

    for (i, layer) in net.layers.iter().enumerate() {
        let at_layer = |e: Error| match e {
            Error::Shape(message) | Error::Numeric(message) => Error::LayerShape { layer: i, message },
            other => other,
        };
        current = match layer {
            LayerSpec::Conv {
                filters,
                size,
                activation,
                ..
            } => {
                let cw = weights.conv(i).ok_or_else(|| Error::LayerShape {
                    layer: i,
                    message: "missing convolution weights".into(),
                })?;
                if cw.out_c != *filters || cw.size != *size || cw.in_c != current.c {
                    return Err(Error::LayerShape {
                        layer: i,
                        message: format!(
                            "weights are {}x{}x{}->{} but layer expects {size}x{size}x{}->{filters}",
                            cw.size, cw.size, cw.in_c, cw.out_c, current.c
                        ),
                    });
                }
                let mut y = conv2d(&current, cw, exec).map_err(at_layer)?;
                if let Activation::Leaky = activation {
                    leaky(&mut y, LEAKY_SLOPE);
                }
                y
            }
            LayerSpec::Maxpool { size, stride } => maxpool2d(&current, *size, *stride).map_err(at_layer)?,
            LayerSpec::Passthrough { source } => {
                let fine = saved[*source].as_ref().ok_or_else(|| Error::LayerShape {
                    layer: i,
                    message: format!("source layer {source} output not available"),
                })?;
                passthrough(fine, &current).map_err(at_layer)?
            }
        };
        shapes.push(current.shape());
        if sources.contains(&i) {
            saved[i] = Some(current.clone());
        }
    }
    if !current.all_finite() {
        return Err(Error::Numeric("forward pass produced non-finite values".into()));
    }
    Ok(ForwardTrace {
        output: current,
        shapes,
    })
}
