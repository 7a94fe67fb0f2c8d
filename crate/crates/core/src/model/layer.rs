use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// `spatial` convolutions take the filter mode's geometry; pointwise ones stay 1×1.
    ConvWeight { spatial: bool },
    ConvBias,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Named tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub(crate) fn register(&mut self, name: String, kind: ParamKind, tensor: Tensor) -> ParamId {
        let (idx, prev) = self.entries.insert_full(name, Param { kind, tensor });
        assert!(prev.is_none(), "duplicate parameter name");
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, p)| p.kind.trainable())
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Mutable trainable tensors, in store order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries
            .values_mut()
            .filter(|p| p.kind.trainable())
            .map(|p| &mut p.tensor)
            .collect()
    }

    /// Overwrites `name` with `tensor`, which must have the registered shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::ParamMismatch {
            name: name.to_string(),
            msg: "no such parameter".into(),
        })?;
        if p.tensor.dims() != tensor.dims() {
            return Err(Error::ParamMismatch {
                name: name.to_string(),
                msg: format!("shape {:?} does not match {:?}", tensor.dims(), p.tensor.dims()),
            });
        }
        p.tensor = tensor;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeometry,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spatial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    /// Projection layers; `from_pre` feeds them the output of the block's `pre` layers
    /// instead of the raw block input.
    Projection { layers: Vec<Layer>, from_pre: bool },
}

/// `post_relu(body(pre(x)) + shortcut(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub pre: Vec<Layer>,
    pub body: Vec<Layer>,
    pub shortcut: Shortcut,
    pub post_relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BnLayer),
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear(LinearLayer),
    Residual(ResidualBlock),
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(self) -> usize {
        match self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    /// Batched tensor dims.
    pub fn dims(self, n: usize) -> Vec<usize> {
        match self {
            ActShape::Map { c, h, w } => vec![n, c, h, w],
            ActShape::Flat(f) => vec![n, f],
        }
    }
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "max_pool2x2",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear(_) => "linear",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let map = |op: &'static str| match input {
            ActShape::Map { c, h, w } => Ok((c, h, w)),
            ActShape::Flat(_) => Err(Error::shape(op, "input", "a feature map", "a flat vector")),
        };
        match self {
            Layer::Conv(conv) => {
                let (c, h, w) = map("conv2d")?;
                if c != conv.cin {
                    return Err(Error::shape("conv2d", format!("{} input channels", conv.name), conv.cin, c));
                }
                let (oh, ow) = conv.geom.output_hw(h, w)?;
                Ok(ActShape::Map {
                    c: conv.cout,
                    h: oh,
                    w: ow,
                })
            }
            Layer::BatchNorm(bn) => {
                let ch = match input {
                    ActShape::Map { c, .. } => c,
                    ActShape::Flat(f) => f,
                };
                if ch != bn.channels {
                    return Err(Error::shape("batchnorm2d", format!("{} channels", bn.name), bn.channels, ch));
                }
                Ok(input)
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool2 => {
                let (c, h, w) = map("max_pool2x2")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("max_pool2x2", "spatial extent", "even", format!("{h}x{w}")));
                }
                Ok(ActShape::Map { c, h: h / 2, w: w / 2 })
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = map("global_avg_pool")?;
                Ok(ActShape::Flat(c))
            }
            Layer::Linear(lin) => match input {
                ActShape::Flat(f) if f == lin.fin => Ok(ActShape::Flat(lin.fout)),
                other => Err(Error::shape("linear", format!("{} input", lin.name), lin.fin, format!("{other:?}"))),
            },
            Layer::Residual(block) => {
                let pre = chain_shape(&block.pre, input)?;
                let body = chain_shape(&block.body, pre)?;
                let short = match &block.shortcut {
                    Shortcut::Identity => input,
                    Shortcut::Projection { layers, from_pre } => {
                        chain_shape(layers, if *from_pre { pre } else { input })?
                    }
                };
                if body != short {
                    return Err(Error::shape(
                        "residual",
                        format!("{} shortcut", block.name),
                        format!("{body:?}"),
                        format!("{short:?}"),
                    ));
                }
                Ok(body)
            }
        }
    }

    /// Visits this layer and every nested layer in execution order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Layer)) {
        f(self);
        if let Layer::Residual(block) = self {
            for l in &block.pre {
                l.visit(f);
            }
            for l in &block.body {
                l.visit(f);
            }
            if let Shortcut::Projection { layers, .. } = &block.shortcut {
                for l in layers {
                    l.visit(f);
                }
            }
        }
    }
}

pub fn chain_shape(layers: &[Layer], input: ActShape) -> Result<ActShape> {
    layers.iter().try_fold(input, |s, l| l.output_shape(s))
}
