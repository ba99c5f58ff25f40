use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Leaky,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        size: usize,
        stride: usize,
        activation: Activation,
        batch_norm: bool,
    },
    Maxpool {
        size: usize,
        stride: usize,
    },
    /// Space-to-depth of `source`'s output, concatenated after the previous
    /// layer's channels.
    Passthrough {
        source: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub n_classes: usize,
    pub n_boxes: usize,
    pub input_size: usize,
}

/// Recorded optimizer settings; nothing in this crate trains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub boxes_per_grid: usize,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            learning_rate: 1e-3,
            weight_decay: 0.0005,
            momentum: 0.9,
            boxes_per_grid: 5,
        }
    }
}

fn conv(filters: usize, size: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        size,
        stride: 1,
        activation: Activation::Leaky,
        batch_norm: true,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::Maxpool { size: 2, stride: 2 }
}

/// The 22-layer network: four max-pools (stride 16 overall), a passthrough
/// from layer 10 at layer 19, and a linear 1x1 head with
/// `n_boxes * (n_classes + 5)` filters.
pub fn build_yolt_spec(n_classes: usize, n_boxes: usize, input_size: usize) -> Result<NetworkSpec> {
    if n_classes == 0 || n_boxes == 0 {
        return Err(Error::invalid("n_classes and n_boxes must be >= 1"));
    }
    if input_size == 0 || input_size % 32 != 0 {
        return Err(Error::invalid(format!(
            "input size {input_size} must be a positive multiple of 32"
        )));
    }
    let layers = vec![
        conv(32, 3),
        pool(),
        conv(64, 3),
        pool(),
        conv(128, 3),
        conv(64, 1),
        conv(128, 3),
        pool(),
        conv(256, 3),
        conv(128, 1),
        conv(256, 3),
        pool(),
        conv(512, 3),
        conv(256, 1),
        conv(512, 3),
        conv(256, 1),
        conv(512, 3),
        conv(1024, 3),
        conv(1024, 3),
        LayerSpec::Passthrough { source: 10 },
        conv(1024, 3),
        LayerSpec::Conv {
            filters: n_boxes * (n_classes + 5),
            size: 1,
            stride: 1,
            activation: Activation::Linear,
            batch_norm: false,
        },
    ];
    let net = NetworkSpec {
        layers,
        n_classes,
        n_boxes,
        input_size,
    };
    net.validate()?;
    Ok(net)
}

impl NetworkSpec {
    /// Filters of the final prediction layer.
    pub fn head_filters(&self) -> usize {
        self.n_boxes * (self.n_classes + 5)
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.downsample_factor()
    }

    pub fn downsample_factor(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Maxpool { stride, .. } | LayerSpec::Conv { stride, .. } => *stride,
                LayerSpec::Passthrough { .. } => 1,
            })
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |m: String| Err(Error::LayerShape { layer: i, message: m });
            match l {
                LayerSpec::Conv { size, stride, .. } => {
                    if *stride != 1 || !(*size == 1 || *size == 3) {
                        return bad(format!("unsupported conv {size}x{size}/{stride}"));
                    }
                }
                LayerSpec::Maxpool { size, stride } => {
                    if *size != 2 || *stride != 2 {
                        return bad(format!("unsupported maxpool {size}x{size}/{stride}"));
                    }
                }
                LayerSpec::Passthrough { source } => {
                    if *source >= i {
                        return bad(format!("passthrough source {source} does not precede it"));
                    }
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Conv { filters, .. }) if *filters == self.head_filters() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "final layer must be a conv with {} filters",
                    self.head_filters()
                )))
            }
        }
        self.output_shapes().map(|_| ())
    }

    /// Symbolic shape propagation; one `(h, w, c)` per layer.
    pub fn output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        let mut cur = (self.input_size, self.input_size, 3usize);
        for (i, l) in self.layers.iter().enumerate() {
            cur = match l {
                LayerSpec::Conv { filters, .. } => (cur.0, cur.1, *filters),
                LayerSpec::Maxpool { size, stride } => {
                    if cur.0 < *size || cur.1 < *size {
                        return Err(Error::LayerShape {
                            layer: i,
                            message: format!("{}x{} too small to pool", cur.0, cur.1),
                        });
                    }
                    ((cur.0 - size) / stride + 1, (cur.1 - size) / stride + 1, cur.2)
                }
                LayerSpec::Passthrough { source } => {
                    let fine = shapes[*source];
                    if fine.0 != 2 * cur.0 || fine.1 != 2 * cur.1 {
                        return Err(Error::LayerShape {
                            layer: i,
                            message: format!(
                                "source {}x{} is not twice the current {}x{}",
                                fine.0, fine.1, cur.0, cur.1
                            ),
                        });
                    }
                    (cur.0, cur.1, cur.2 + 4 * fine.2)
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Layer table: index, type, filters, size/stride, output size.
    pub fn layer_table(&self) -> Result<String> {
        let shapes = self.output_shapes()?;
        let mut out = String::new();
        writeln!(
            out,
            "{:<6}{:<15}{:<9}{:<14}{}",
            "Layer", "Type", "Filters", "Size/Stride", "Output Size"
        )
        .unwrap();
        for (i, (l, s)) in self.layers.iter().zip(&shapes).enumerate() {
            let (kind, filters, geom) = match l {
                LayerSpec::Conv { filters, size, stride, .. } => {
                    ("Convolutional", filters.to_string(), format!("{size}×{size} / {stride}"))
                }
                LayerSpec::Maxpool { size, stride } => {
                    ("Maxpool", String::new(), format!("{size}×{size} / {stride}"))
                }
                LayerSpec::Passthrough { source } => {
                    ("Passthrough", String::new(), format!("{source} → {}", i + 1))
                }
            };
            writeln!(
                out,
                "{:<6}{:<15}{:<9}{:<14}{}×{}×{}",
                i, kind, filters, geom, s.0, s.1, s.2
            )
            .unwrap();
        }
        Ok(out)
    }
}
