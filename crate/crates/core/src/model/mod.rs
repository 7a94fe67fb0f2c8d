//! Model construction, parameter accounting, initialization and tape forward passes.

pub mod arch;
pub mod build;
pub mod layer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::norm::update_running_stats;
use crate::ops::{ConvGeometry, BN_EPS};
use crate::tape::{BnBatchStats, Tape, Var};
use crate::tensor::Tensor;

pub use arch::{ArchSpec, Family, FilterMode, SurgeryMode, SUPPORTED};
pub use layer::{
    chain_shape, ActShape, BnLayer, ConvLayer, Layer, LinearLayer, Param, ParamId, ParamKind,
    ParamStore, ResidualBlock, Shortcut,
};

use build::{build_layers, Ctx};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running-stat updates are returned, not applied.
    Train,
    /// Running statistics.
    Eval,
}

/// Ordered feature taps: top-level layer indices and their per-sample output shapes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureTapSet {
    pub layers: Vec<usize>,
    pub shapes: Vec<ActShape>,
}

impl FeatureTapSet {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Option<ArchSpec>,
    mode: FilterMode,
    surgery: SurgeryMode,
    input: [usize; 3],
    layers: Vec<Layer>,
    params: ParamStore,
    taps: Vec<usize>,
}

/// Tape handles for a model's trainable parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("trainable parameter is bound")
    }

    /// `(id, var)` for every bound parameter, in store order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BnBatchStats,
}

/// Result of a tape forward pass.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub features: Vec<Var>,
    /// Output of every top-level layer.
    pub outputs: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn build(spec: &ArchSpec, mode: FilterMode) -> Result<Model> {
    Model::build(spec, mode)
}

/// Returns `model` with freshly initialized parameters.
pub fn init_weights(mut model: Model, seed: u64) -> Model {
    model.init_weights(seed);
    model
}

impl Model {
    pub fn build(spec: &ArchSpec, mode: FilterMode) -> Result<Model> {
        Self::build_with(spec, mode, SurgeryMode::default())
    }

    /// Builds `spec` in `mode`, checking that all three filter modes agree on layer
    /// count, channel plan and tapped-feature shapes.
    pub fn build_with(spec: &ArchSpec, mode: FilterMode, surgery: SurgeryMode) -> Result<Model> {
        let model = Self::build_unchecked(spec, mode, surgery)?;
        let taps = model.tap_points()?;
        if taps.len() < 2 {
            return Err(Error::Param(format!("{spec} declares {} feature taps, need at least 2", taps.len())));
        }
        for other in FilterMode::ALL.into_iter().filter(|&m| m != mode) {
            let peer = Self::build_unchecked(spec, other, surgery)?;
            if peer.layer_count() != model.layer_count() || peer.channel_plan() != model.channel_plan() {
                return Err(Error::Param(format!(
                    "{spec}: {mode} and {other} builds differ in layer plan"
                )));
            }
            let peer_taps = peer.tap_points()?;
            if peer_taps != taps {
                return Err(Error::Shape {
                    op: "build",
                    axis: format!("{spec} feature taps ({mode} vs {other})"),
                    expected: format!("{:?}", taps.shapes),
                    got: format!("{:?}", peer_taps.shapes),
                });
            }
        }
        Ok(model)
    }

    fn build_unchecked(spec: &ArchSpec, mode: FilterMode, surgery: SurgeryMode) -> Result<Model> {
        if !spec.is_supported() {
            return Err(Error::UnsupportedArch {
                name: spec.to_string(),
                supported: SUPPORTED.join(", "),
            });
        }
        let mut ctx = Ctx::new(mode);
        let built = build_layers(&mut ctx, spec, surgery)?;
        let model = Model {
            arch: Some(spec.clone()),
            mode,
            surgery,
            input: spec.input,
            layers: built.layers,
            params: ctx.store,
            taps: built.taps,
        };
        model.layer_shapes()?;
        Ok(model)
    }

    pub fn arch(&self) -> Option<&ArchSpec> {
        self.arch.as_ref()
    }

    pub fn filter_mode(&self) -> FilterMode {
        self.mode
    }

    pub fn surgery(&self) -> SurgeryMode {
        self.surgery
    }

    /// Per-sample input shape `[C, H, W]`.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Output shape of each top-level layer for a single sample.
    pub fn layer_shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        let mut shape = ActShape::Map { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        let [c, h, w] = self.input;
        chain_shape(&self.layers, ActShape::Map { c, h, w })
    }

    pub fn tap_points(&self) -> Result<FeatureTapSet> {
        let shapes = self.layer_shapes()?;
        Ok(FeatureTapSet {
            layers: self.taps.clone(),
            shapes: self.taps.iter().map(|&i| shapes[i]).collect(),
        })
    }

    /// Number of layers including those nested in residual blocks.
    pub fn layer_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            l.visit(&mut |_| n += 1);
        }
        n
    }

    /// `(cin, cout)` of every convolution in execution order.
    pub fn channel_plan(&self) -> Vec<(usize, usize)> {
        let mut plan = Vec::new();
        for l in &self.layers {
            l.visit(&mut |l| {
                if let Layer::Conv(c) = l {
                    plan.push((c.cin, c.cout));
                }
            });
        }
        plan
    }

    /// Trainable parameter total. With `convs_only`, counts only the weights of
    /// convolutions that take the filter mode's geometry.
    pub fn param_count(&self, convs_only: bool) -> usize {
        self.params
            .iter()
            .filter(|(_, _, p)| {
                if convs_only {
                    p.kind == ParamKind::ConvWeight { spatial: true }
                } else {
                    p.kind.trainable()
                }
            })
            .map(|(_, _, p)| p.tensor.numel())
            .sum()
    }

    /// Fan-in normal weights (`std = sqrt(2 / fan_in)`), zero biases, identity BN.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let kind = self.params.get(id).kind;
            let t = self.params.tensor_mut(id);
            match kind {
                ParamKind::ConvWeight { .. } | ParamKind::LinearWeight => {
                    let fan_in: usize = t.dims()[1..].iter().product();
                    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    for v in t.data_mut() {
                        *v = normal.sample(&mut rng) as f32;
                    }
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => t.data_mut().fill(1.0),
                ParamKind::ConvBias
                | ParamKind::LinearBias
                | ParamKind::BnBeta
                | ParamKind::BnRunningMean => t.data_mut().fill(0.0),
            }
        }
    }

    /// Puts every trainable parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(_, _, p)| {
                p.kind
                    .trainable()
                    .then(|| tape.leaf(p.tensor.clone(), requires_grad))
            })
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 {
            return Err(Error::shape("model input", "rank", 4, dims.len()));
        }
        for (axis, (&want, &got)) in self.input.iter().zip(&dims[1..]).enumerate() {
            if want != got {
                let name = ["channels (axis 1)", "height (axis 2)", "width (axis 3)"][axis];
                return Err(Error::shape("model input", name, want, got));
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, bn: BnMode) -> Result<TapeForward> {
        self.check_input(tape.value(x).dims())?;
        let mut updates = Vec::new();
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = self.run_layer(layer, tape, bound, h, bn, &mut updates)?;
            outputs.push(h);
        }
        Ok(TapeForward {
            logits: h,
            features: self.taps.iter().map(|&i| outputs[i]).collect(),
            outputs,
            bn_updates: updates,
        })
    }

    fn run_seq(
        &self,
        layers: &[Layer],
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        bn: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        layers
            .iter()
            .try_fold(x, |h, l| self.run_layer(l, tape, bound, h, bn, updates))
    }

    fn run_layer(
        &self,
        layer: &Layer,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        bn: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        match layer {
            Layer::Conv(c) => tape.conv2d(x, bound.var(c.weight), c.bias.map(|b| bound.var(b)), c.geom),
            Layer::BatchNorm(b) => {
                let (g, beta) = (bound.var(b.gamma), bound.var(b.beta));
                match bn {
                    BnMode::Train => {
                        let (y, stats) = tape.batchnorm_train(x, g, beta, BN_EPS)?;
                        updates.push(BnUpdate {
                            running_mean: b.running_mean,
                            running_var: b.running_var,
                            stats,
                        });
                        Ok(y)
                    }
                    BnMode::Eval => tape.batchnorm_eval(
                        x,
                        g,
                        beta,
                        self.params.tensor(b.running_mean),
                        self.params.tensor(b.running_var),
                        BN_EPS,
                    ),
                }
            }
            Layer::Relu => Ok(tape.relu(x)),
            Layer::MaxPool2 => tape.max_pool2x2(x),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Linear(l) => tape.linear(x, bound.var(l.weight), l.bias.map(|b| bound.var(b))),
            Layer::Residual(block) => {
                let pre = self.run_seq(&block.pre, tape, bound, x, bn, updates)?;
                let body = self.run_seq(&block.body, tape, bound, pre, bn, updates)?;
                let short = match &block.shortcut {
                    Shortcut::Identity => x,
                    Shortcut::Projection { layers, from_pre } => {
                        let src = if *from_pre { pre } else { x };
                        self.run_seq(layers, tape, bound, src, bn, updates)?
                    }
                };
                let y = tape.add(body, short)?;
                Ok(if block.post_relu { tape.relu(y) } else { y })
            }
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mut rv = std::mem::replace(self.params.tensor_mut(u.running_var), Tensor::scalar(0.0));
            update_running_stats(
                self.params.tensor_mut(u.running_mean),
                &mut rv,
                &u.stats.mean,
                &u.stats.var,
                u.stats.count,
            );
            *self.params.tensor_mut(u.running_var) = rv;
        }
    }

    /// Eval-mode outputs of every top-level layer for `x`.
    pub fn eval_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, BnMode::Eval)?;
        Ok(out.outputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Eval-mode logits, computed in chunks of `batch` samples.
    pub fn predict(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.dims()[0];
        let batch = batch.max(1);
        let mut data = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(batch) {
            let chunk = x.slice_batch(start, batch.min(n - start))?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let out = self.forward(&mut tape, &bound, xv, BnMode::Eval)?;
            let logits = tape.value(out.logits);
            width = logits.dims()[1..].iter().product();
            data.extend_from_slice(logits.data());
        }
        Tensor::new(&[n, width], data)
    }
}

/// Sequential model assembled layer by layer, with shape tracking. Used for
/// hand-written networks and randomized gradient checks.
pub struct ModelBuilder {
    ctx: Ctx,
    input: [usize; 3],
    shape: ActShape,
    layers: Vec<Layer>,
    taps: Vec<usize>,
}

impl ModelBuilder {
    pub fn new(input: [usize; 3]) -> Self {
        let [c, h, w] = input;
        Self {
            ctx: Ctx::new(FilterMode::Teacher),
            input,
            shape: ActShape::Map { c, h, w },
            layers: Vec::new(),
            taps: Vec::new(),
        }
    }

    fn push(mut self, layer: Layer) -> Result<Self> {
        self.shape = layer.output_shape(self.shape)?;
        self.layers.push(layer);
        Ok(self)
    }

    fn channels(&self) -> usize {
        match self.shape {
            ActShape::Map { c, .. } => c,
            ActShape::Flat(n) => n,
        }
    }

    fn next_name(&self, kind: &str) -> String {
        format!("{kind}{}", self.layers.len())
    }

    pub fn conv(self, cout: usize, geom: ConvGeometry, bias: bool) -> Result<Self> {
        geom.validate()?;
        let mut s = self;
        let name = s.next_name("conv");
        let cin = s.channels();
        let layer = s.ctx.conv_with(&name, cin, cout, geom, !geom.is_pointwise(), bias);
        s.push(layer)
    }

    pub fn batchnorm(self) -> Result<Self> {
        let mut s = self;
        let name = s.next_name("bn");
        let c = s.channels();
        let layer = s.ctx.bn(&name, c);
        s.push(layer)
    }

    pub fn relu(self) -> Result<Self> {
        self.push(Layer::Relu)
    }

    pub fn max_pool2x2(self) -> Result<Self> {
        self.push(Layer::MaxPool2)
    }

    pub fn global_avg_pool(self) -> Result<Self> {
        self.push(Layer::GlobalAvgPool)
    }

    pub fn linear(self, fout: usize) -> Result<Self> {
        let mut s = self;
        let name = s.next_name("fc");
        let fin = match s.shape {
            ActShape::Flat(n) => n,
            map => {
                return Err(Error::shape("linear", "input", "a flat vector", format!("{map:?}")));
            }
        };
        let layer = s.ctx.linear(&name, fin, fout);
        s.push(layer)
    }

    /// Marks the most recent layer's output as a feature tap.
    pub fn tap(mut self) -> Self {
        if let Some(i) = self.layers.len().checked_sub(1) {
            self.taps.push(i);
        }
        self
    }

    pub fn build(self) -> Model {
        Model {
            arch: None,
            mode: FilterMode::Teacher,
            surgery: SurgeryMode::default(),
            input: self.input,
            layers: self.layers,
            params: self.ctx.store,
            taps: self.taps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize, mode: FilterMode) -> Model {
        let spec = ArchSpec::parse(&format!("tiny{k}"), 10).unwrap().with_input(3, 8, 8);
        init_weights(Model::build(&spec, mode).unwrap(), 7)
    }

    #[test]
    fn tiny4_forward_gives_class_logits() {
        let m = tiny(4, FilterMode::Teacher);
        let x = Tensor::full(&[2, 3, 8, 8], 0.5);
        let logits = m.predict(&x, 8).unwrap();
        assert_eq!(logits.dims(), &[2, 10]);
        assert!(logits.all_finite());
    }

    #[test]
    fn tap_counts_follow_channel_jumps() {
        let vgg16 = Model::build(&ArchSpec::parse("vgg16bn", 10).unwrap(), FilterMode::Teacher).unwrap();
        assert_eq!(vgg16.tap_points().unwrap().len(), 4);
        let r18 = Model::build(&ArchSpec::parse("resnet18", 10).unwrap(), FilterMode::RowStudent).unwrap();
        assert_eq!(r18.tap_points().unwrap().len(), 5);
        assert_eq!(tiny(4, FilterMode::Column).tap_points().unwrap().len(), 2);
    }

    #[test]
    fn vgg13_keeps_two_pools() {
        let m = Model::build(&ArchSpec::parse("vgg13bn", 10).unwrap(), FilterMode::RowStudent).unwrap();
        let pools = m.layers().iter().filter(|l| matches!(l, Layer::MaxPool2)).count();
        let strided = m
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Conv(c) if c.geom.stride_h == 2))
            .count();
        assert_eq!((pools, strided), (2, 3));
        let shapes = m.layer_shapes().unwrap();
        assert_eq!(shapes[shapes.len() - 3], ActShape::Map { c: 512, h: 1, w: 1 });
    }

    #[test]
    fn single_conv_param_ratio() {
        let count = |g| {
            ModelBuilder::new([4, 5, 5])
                .conv(4, g, false)
                .unwrap()
                .build()
                .param_count(true)
        };
        assert_eq!(count(ConvGeometry::square()), 144);
        assert_eq!(count(ConvGeometry::row()), 48);
        assert_eq!(ModelBuilder::new([3, 4, 4]).build().param_count(false), 0);
    }

    #[test]
    fn init_is_deterministic_and_bn_is_identity() {
        let a = tiny(6, FilterMode::RowStudent);
        let b = tiny(6, FilterMode::RowStudent);
        assert_eq!(a, b);
        for (_, _, p) in a.params().iter() {
            if p.kind == ParamKind::BnGamma {
                assert!(p.tensor.data().iter().all(|&g| g == 1.0));
            }
        }
        let c = init_weights(a.clone(), 8);
        assert_ne!(a, c);
    }

    #[test]
    fn train_forward_returns_bn_updates() {
        let mut m = tiny(4, FilterMode::RowStudent);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 1.0));
        let out = m.forward(&mut tape, &bound, x, BnMode::Train).unwrap();
        assert_eq!(out.bn_updates.len(), 4);
        assert_eq!(out.features.len(), 2);
        m.apply_bn_updates(&out.bn_updates);
        let rm = m.params().by_name("bn1.running_mean").unwrap();
        assert!(rm.tensor.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn wrong_input_names_axis() {
        let m = tiny(4, FilterMode::Teacher);
        let err = m.predict(&Tensor::zeros(&[1, 3, 8, 6]), 1).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }
}
