//! Network descriptions: which layers in which order, and where the
//! selected normalizer applies. Builders cover the 12-layer image
//! classifier and the deep bias-free linear stack; everything here is
//! pure data interpreted by the model.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::ops::{PoolKind, PoolSpec};
use crate::tensor::Shape;

/// Which normalization scheme the network trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    BatchNorm,
    WeightNorm,
    NormProp,
    TreluWn,
}

impl NormKind {
    /// Whether the scheme reparameterizes weights rather than
    /// normalizing activations.
    pub fn is_weight_based(&self) -> bool {
        matches!(self, NormKind::WeightNorm | NormKind::NormProp | NormKind::TreluWn)
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::BatchNorm => "bn",
            NormKind::WeightNorm => "wn",
            NormKind::NormProp => "np",
            NormKind::TreluWn => "trelu-wn",
        }
    }
}

/// One layer in topology order.
#[derive(Clone, Debug)]
pub enum LayerKind {
    /// Convolution followed by a rectifier; `normalized` marks where the
    /// network's norm scheme applies (always true for weight-based
    /// schemes, only at the marked positions for batch normalization).
    Conv { conv: ConvSpec, normalized: bool },
    /// Bias-free linear map with no rectifier.
    Fc {
        d_in: usize,
        d_out: usize,
        normalized: bool,
    },
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
}

#[derive(Clone, Debug)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDef {
    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    pub fn is_normalized(&self) -> bool {
        match self.kind {
            LayerKind::Conv { normalized, .. } | LayerKind::Fc { normalized, .. } => normalized,
            _ => false,
        }
    }
}

/// Complete network description: input geometry, ordered layers, the
/// normalization scheme, and whether a trailing channel affine restores
/// output scale before the loss.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub norm: NormKind,
    /// Per-sample input extents (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// A learned affine on the logits, used by the thresholded scheme.
    pub final_affine: bool,
    pub layers: Vec<LayerDef>,
}

impl NetworkSpec {
    /// Walks every layer's geometry from the input and confirms the
    /// stack ends at one logit per class. Returns the per-layer output
    /// shapes for a single sample.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("input extents must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut cur = Shape::new(1, c, h, w);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = match &l.kind {
                LayerKind::Conv { conv, .. } => {
                    if conv.c_in != cur.c {
                        return Err(Error::shape(format!(
                            "layer {} expects {} input channels, gets {}",
                            l.name, conv.c_in, cur.c
                        )));
                    }
                    let (oh, ow) = conv.out_hw(cur.h, cur.w)?;
                    Shape::new(1, conv.c_out, oh, ow)
                }
                LayerKind::Fc { d_in, d_out, .. } => {
                    if cur.per_sample() != *d_in {
                        return Err(Error::shape(format!(
                            "layer {} expects {} inputs, gets {}",
                            l.name,
                            d_in,
                            cur.per_sample()
                        )));
                    }
                    Shape::new(1, *d_out, 1, 1)
                }
                LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => {
                    let (oh, ow) = p.out_hw(cur.h, cur.w)?;
                    Shape::new(1, cur.c, oh, ow)
                }
            };
            shapes.push(cur);
        }
        if cur.per_sample() != self.classes {
            return Err(Error::shape(format!(
                "network ends with {} values per sample, needs {} logits",
                cur.per_sample(),
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Names of the layers the normalizer touches, in topology order.
    pub fn normalized_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.is_normalized())
            .map(|l| l.name.as_str())
            .collect()
    }
}

/// The 12-layer image classifier: three 128-channel 3x3 convolutions and
/// a pool, three 256-channel and a pool, then a valid 3x3 to 320
/// channels, two pointwise convolutions down to the class count, and a
/// global average pool. Batch normalization sits after the third and
/// sixth convolutions; weight-based schemes reparameterize every
/// convolution.
pub fn build_cifar10_nv(norm: NormKind) -> NetworkSpec {
    let mark = |bn_slot: bool| match norm {
        NormKind::None => false,
        NormKind::BatchNorm => bn_slot,
        _ => true,
    };
    let conv = |name: &str, c_out, c_in, k, pad, bn_slot| LayerDef {
        name: name.into(),
        kind: LayerKind::Conv {
            conv: ConvSpec::square(c_out, c_in, k, 1, pad).expect("static geometry"),
            normalized: mark(bn_slot),
        },
    };
    let pool = |name: &str, kind, k, stride, pad| LayerDef {
        name: name.into(),
        kind: match kind {
            PoolKind::Max => LayerKind::MaxPool(PoolSpec::square(kind, k, stride, pad).expect("static geometry")),
            PoolKind::Avg => LayerKind::AvgPool(PoolSpec::square(kind, k, stride, pad).expect("static geometry")),
        },
    };
    NetworkSpec {
        norm,
        input: (3, 28, 28),
        classes: 10,
        final_affine: norm == NormKind::TreluWn,
        layers: vec![
            conv("conv1", 128, 3, 3, 1, false),
            conv("conv2", 128, 128, 3, 1, false),
            conv("conv3", 128, 128, 3, 1, true),
            pool("pool3", PoolKind::Max, 3, 2, 1),
            conv("conv4", 256, 128, 3, 1, false),
            conv("conv5", 256, 256, 3, 1, false),
            conv("conv6", 256, 256, 3, 1, true),
            pool("pool6", PoolKind::Max, 3, 2, 1),
            conv("conv7", 320, 256, 3, 0, false),
            conv("conv8", 320, 320, 1, 0, false),
            conv("conv9", 10, 320, 1, 0, false),
            pool("pool9", PoolKind::Avg, 5, 1, 0),
        ],
    }
}

/// A bias-free stack of `depth` linear maps with no activations:
/// `in_dim` to `width`, hidden `width` to `width` transitions, then
/// `width` to `out_dim`. Supports no normalizer, per-layer batch
/// normalization, or per-layer weight normalization (gamma only, no
/// shift, keeping the network bias-free).
pub fn build_deep_linear(
    depth: usize,
    width: usize,
    in_dim: usize,
    out_dim: usize,
    norm: NormKind,
) -> Result<NetworkSpec> {
    if depth < 2 {
        return Err(Error::invalid(format!("depth {depth} below the 2-layer minimum")));
    }
    if width == 0 || in_dim == 0 || out_dim < 2 {
        return Err(Error::invalid("degenerate linear network dimensions"));
    }
    if matches!(norm, NormKind::NormProp | NormKind::TreluWn) {
        return Err(Error::invalid(
            "rectifying normalizers contradict a linear network",
        ));
    }
    let normalized = norm != NormKind::None;
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let d_in = if i == 0 { in_dim } else { width };
        let d_out = if i == depth - 1 { out_dim } else { width };
        layers.push(LayerDef {
            name: format!("fc{}", i + 1),
            kind: LayerKind::Fc {
                d_in,
                d_out,
                normalized,
            },
        });
    }
    Ok(NetworkSpec {
        norm,
        input: (in_dim, 1, 1),
        classes: out_dim,
        final_affine: false,
        layers,
    })
}

/// A two-layer classifier head for small synthetic tasks: `in_dim` to
/// `hidden`, then `hidden` to `classes`. Accepts every normalization
/// scheme; batch normalization sits on the hidden layer only, while
/// weight-based schemes reparameterize both layers.
pub fn build_fc_classifier(
    in_dim: usize,
    hidden: usize,
    classes: usize,
    norm: NormKind,
) -> Result<NetworkSpec> {
    if in_dim == 0 || hidden == 0 {
        return Err(Error::invalid("degenerate classifier dimensions"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let mark = |hidden_slot: bool| match norm {
        NormKind::None => false,
        NormKind::BatchNorm => hidden_slot,
        _ => true,
    };
    let layers = vec![
        LayerDef {
            name: "fc1".into(),
            kind: LayerKind::Fc {
                d_in: in_dim,
                d_out: hidden,
                normalized: mark(true),
            },
        },
        LayerDef {
            name: "fc2".into(),
            kind: LayerKind::Fc {
                d_in: hidden,
                d_out: classes,
                normalized: mark(false),
            },
        },
    ];
    Ok(NetworkSpec {
        norm,
        input: (in_dim, 1, 1),
        classes,
        final_affine: norm == NormKind::TreluWn,
        layers,
    })
}
