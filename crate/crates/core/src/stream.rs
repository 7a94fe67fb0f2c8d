//! Row-by-row inference for models whose convolutions only look at the current row.
//!
//! [`plan_stream`] folds batch norm into the preceding convolution, fuses ReLUs, and
//! rejects anything that needs more than one input row (kernel height > 1, pooling).
//! A [`StreamState`] then owns exactly one output row per stage, allocated up front;
//! pushing rows never allocates activation memory.

use crate::error::{Error, Result};
use crate::model::{ActShape, Layer, Model, Shortcut};
use crate::ops::norm::eval_affine;
use crate::ops::{ConvGeometry, BN_EPS};
use crate::tensor::Tensor;

/// Convolution with batch norm folded in, plus an optional fused ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedLayer {
    pub name: String,
    /// `[cout, cin, 1, kw]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub geom: ConvGeometry,
    pub relu: bool,
}

/// `w' = w·γ/√(var+eps)`, `b' = (b − mean)·γ/√(var+eps) + β`, per output channel.
#[allow(clippy::too_many_arguments)]
pub fn fold_batchnorm(
    name: &str,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<FoldedLayer> {
    let cout = weight.dims()[0];
    for (what, t) in [("gamma", gamma), ("beta", beta), ("running mean", mean), ("running var", var)] {
        if t.numel() != cout {
            return Err(Error::shape("fold_batchnorm", format!("{name} {what}"), cout, t.numel()));
        }
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape("fold_batchnorm", format!("{name} bias"), cout, b.numel()));
        }
    }
    let (scale, shift) = eval_affine(gamma, beta, mean, var, eps);
    let per = weight.numel() / cout;
    let mut w = weight.data().to_vec();
    let mut b = Vec::with_capacity(cout);
    for co in 0..cout {
        for v in &mut w[co * per..(co + 1) * per] {
            *v = (*v as f64 * scale[co]) as f32;
        }
        let b0 = bias.map_or(0.0, |t| t.data()[co] as f64);
        b.push((b0 * scale[co] + shift[co]) as f32);
    }
    Ok(FoldedLayer {
        name: name.to_string(),
        weight: Tensor::new(weight.dims(), w)?,
        bias: b,
        geom,
        relu: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
enum StageKind {
    Conv(FoldedLayer),
    /// Stand-alone batch norm as a per-channel affine map.
    Affine { scale: Vec<f32>, shift: Vec<f32>, relu: bool },
    Relu,
    Residual {
        pre: Vec<Stage>,
        body: Vec<Stage>,
        projection: Option<Vec<Stage>>,
        from_pre: bool,
        relu: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    id: usize,
    /// Top-level model layer whose output this stage reproduces, if any.
    layer: Option<usize>,
    kind: StageKind,
    channels: usize,
    width: usize,
    stride_h: usize,
}

/// Validated, folded execution plan.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPlan {
    stages: Vec<Stage>,
    n_stages: usize,
    input: [usize; 3],
    head_weight: Tensor,
    head_bias: Vec<f32>,
    /// Per stage id: (channels, width).
    buffers: Vec<(usize, usize)>,
    out_rows: usize,
}

impl StreamPlan {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Floats held by per-stage row buffers: Σ width·channels.
    pub fn memory_budget(&self) -> usize {
        self.buffers.iter().map(|(c, w)| c * w).sum()
    }

    /// `(channels, width)` of every stage buffer.
    pub fn stage_buffers(&self) -> &[(usize, usize)] {
        &self.buffers
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    /// Rows emitted by the final stage over a full image.
    pub fn output_rows(&self) -> usize {
        self.out_rows
    }

    /// Top-level stages as `(model layer index, stage id)`.
    pub fn top_level_layers(&self) -> Vec<(usize, usize)> {
        self.stages.iter().filter_map(|s| s.layer.map(|l| (l, s.id))).collect()
    }
}

struct Planner<'a> {
    model: &'a Model,
    buffers: Vec<(usize, usize)>,
}

impl Planner<'_> {
    fn tensor(&self, id: crate::model::ParamId) -> &Tensor {
        self.model.params().tensor(id)
    }

    fn new_stage(&mut self, kind: StageKind, channels: usize, width: usize, stride_h: usize) -> Stage {
        let id = self.buffers.len();
        self.buffers.push((channels, width));
        Stage {
            id,
            layer: None,
            kind,
            channels,
            width,
            stride_h,
        }
    }

    /// Plans `layers` on input `shape`; `top` carries top-level indices.
    fn plan_seq(&mut self, layers: &[Layer], mut shape: ActShape, top: Option<usize>) -> Result<(Vec<Stage>, ActShape)> {
        let mut stages: Vec<Stage> = Vec::new();
        let mut i = 0;
        while i < layers.len() {
            let layer = &layers[i];
            let next_shape = layer.output_shape(shape)?;
            let (c, w) = match next_shape {
                ActShape::Map { c, w, .. } => (c, w),
                ActShape::Flat(_) => {
                    return Err(Error::NotStreamable {
                        layer: layer.kind_name().into(),
                        reason: "flattening layers are only allowed in the classifier head".into(),
                    })
                }
            };
            let mut consumed = 1;
            let stage = match layer {
                Layer::Conv(conv) => {
                    if conv.geom.kernel_h != 1 || conv.geom.pad_h != 0 {
                        return Err(Error::NotStreamable {
                            layer: conv.name.clone(),
                            reason: format!(
                                "kernel {}x{} with vertical padding {} needs more than the current row",
                                conv.geom.kernel_h, conv.geom.kernel_w, conv.geom.pad_h
                            ),
                        });
                    }
                    let bias = conv.bias.map(|b| self.tensor(b));
                    let mut folded = match layers.get(i + 1) {
                        Some(Layer::BatchNorm(bn)) => {
                            consumed += 1;
                            fold_batchnorm(
                                &conv.name,
                                self.tensor(conv.weight),
                                bias,
                                conv.geom,
                                self.tensor(bn.gamma),
                                self.tensor(bn.beta),
                                self.tensor(bn.running_mean),
                                self.tensor(bn.running_var),
                                BN_EPS,
                            )?
                        }
                        _ => FoldedLayer {
                            name: conv.name.clone(),
                            weight: self.tensor(conv.weight).clone(),
                            bias: bias.map_or_else(|| vec![0.0; conv.cout], |b| b.data().to_vec()),
                            geom: conv.geom,
                            relu: false,
                        },
                    };
                    if matches!(layers.get(i + consumed), Some(Layer::Relu)) {
                        folded.relu = true;
                        consumed += 1;
                    }
                    let stride = conv.geom.stride_h;
                    self.new_stage(StageKind::Conv(folded), c, w, stride)
                }
                Layer::BatchNorm(bn) => {
                    let (scale, shift) = eval_affine(
                        self.tensor(bn.gamma),
                        self.tensor(bn.beta),
                        self.tensor(bn.running_mean),
                        self.tensor(bn.running_var),
                        BN_EPS,
                    );
                    let relu = matches!(layers.get(i + 1), Some(Layer::Relu));
                    if relu {
                        consumed += 1;
                    }
                    self.new_stage(
                        StageKind::Affine {
                            scale: scale.iter().map(|&v| v as f32).collect(),
                            shift: shift.iter().map(|&v| v as f32).collect(),
                            relu,
                        },
                        c,
                        w,
                        1,
                    )
                }
                Layer::Relu => self.new_stage(StageKind::Relu, c, w, 1),
                Layer::MaxPool2 => {
                    return Err(Error::NotStreamable {
                        layer: format!("max_pool2x2 (layer {})", top.map_or(i, |t| t + i)),
                        reason: "2x2 pooling needs two rows".into(),
                    })
                }
                Layer::GlobalAvgPool | Layer::Linear(_) => unreachable!("flat output handled above"),
                Layer::Residual(block) => {
                    let (pre, pre_shape) = self.plan_seq(&block.pre, shape, None)?;
                    let (body, body_shape) = self.plan_seq(&block.body, pre_shape, None)?;
                    let projection = match &block.shortcut {
                        Shortcut::Identity => None,
                        Shortcut::Projection { layers, from_pre } => {
                            let src = if *from_pre { pre_shape } else { shape };
                            Some(self.plan_seq(layers, src, None)?.0)
                        }
                    };
                    let from_pre = matches!(block.shortcut, Shortcut::Projection { from_pre: true, .. });
                    debug_assert_eq!(body_shape, next_shape);
                    // nested stages keep their own stride phase
                    let stride = 1;
                    self.new_stage(
                        StageKind::Residual {
                            pre,
                            body,
                            projection,
                            from_pre,
                            relu: block.post_relu,
                        },
                        c,
                        w,
                        stride,
                    )
                }
            };
            let mut stage = stage;
            if let Some(t) = top {
                stage.layer = Some(t + i + consumed - 1);
            }
            shape = crate::model::chain_shape(&layers[i..i + consumed], shape)?;
            stages.push(stage);
            i += consumed;
        }
        Ok((stages, shape))
    }
}

/// Checks that `model` can run one row at a time and builds its folded plan.
pub fn plan_stream(model: &Model) -> Result<StreamPlan> {
    let layers = model.layers();
    let n = layers.len();
    let head_ok = n >= 2
        && matches!(layers[n - 2], Layer::GlobalAvgPool)
        && matches!(layers[n - 1], Layer::Linear(_));
    if !head_ok {
        return Err(Error::NotStreamable {
            layer: "classifier".into(),
            reason: "streaming needs a global-average-pool + linear head".into(),
        });
    }
    let [c, h, w] = model.input_shape();
    let mut planner = Planner {
        model,
        buffers: Vec::new(),
    };
    let (stages, _) = planner.plan_seq(&layers[..n - 2], ActShape::Map { c, h, w }, Some(0))?;
    let Layer::Linear(lin) = &layers[n - 1] else { unreachable!() };
    let head_weight = model.params().tensor(lin.weight).clone();
    let head_bias = lin
        .bias
        .map_or_else(|| vec![0.0; lin.fout], |b| model.params().tensor(b).data().to_vec());
    let shapes = model.layer_shapes()?;
    let out_rows = match shapes[n - 3] {
        ActShape::Map { h, .. } => h,
        ActShape::Flat(_) => 1,
    };
    Ok(StreamPlan {
        stages,
        n_stages: planner.buffers.len(),
        input: model.input_shape(),
        head_weight,
        head_bias,
        buffers: planner.buffers,
        out_rows,
    })
}

#[derive(Clone, Copy)]
enum Src<'a> {
    Input(&'a [f32]),
    Stage(usize),
}

/// Live state of one stream: a row buffer per stage, stride phase counters and the
/// running global-average sums of the classifier.
#[derive(Clone, Debug)]
pub struct StreamState {
    rows: Vec<Vec<f32>>,
    seen: Vec<usize>,
    emitted: Vec<bool>,
    acc: Vec<f64>,
    acc_count: usize,
    rows_in: usize,
    finished: bool,
}

impl StreamState {
    pub fn new(plan: &StreamPlan) -> Self {
        let last_c = plan.head_weight.dims()[1];
        Self {
            rows: plan.buffers.iter().map(|(c, w)| vec![0.0; c * w]).collect(),
            seen: vec![0; plan.n_stages],
            emitted: vec![false; plan.n_stages],
            acc: vec![0.0; last_c],
            acc_count: 0,
            rows_in: 0,
            finished: false,
        }
    }

    /// Floats currently held in stage row buffers.
    pub fn live_floats(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Total reserved capacity of the row buffers (unchanged by pushing rows).
    pub fn reserved_floats(&self) -> usize {
        self.rows.iter().map(Vec::capacity).sum()
    }

    pub fn rows_pushed(&self) -> usize {
        self.rows_in
    }

    /// The row stage `id` emitted during the last push, if it emitted one.
    pub fn emitted_row(&self, id: usize) -> Option<&[f32]> {
        self.emitted[id].then(|| self.rows[id].as_slice())
    }

    fn src<'a>(&'a self, s: Src<'a>) -> &'a [f32] {
        match s {
            Src::Input(r) => r,
            Src::Stage(id) => &self.rows[id],
        }
    }

    fn run_seq(&mut self, stages: &[Stage], mut src: Src<'_>, cin: usize, mut win: usize) -> Option<(usize, usize, usize)> {
        let mut c = cin;
        let mut last = None;
        for st in stages {
            self.run_stage(st, src, c, win)?;
            src = Src::Stage(st.id);
            c = st.channels;
            win = st.width;
            last = Some(st.id);
        }
        last.map(|id| (id, c, win))
    }

    /// Runs one stage; `None` when its stride phase skips this row.
    fn run_stage(&mut self, st: &Stage, src: Src<'_>, cin: usize, win: usize) -> Option<()> {
        self.emitted[st.id] = false;
        let phase = self.seen[st.id];
        self.seen[st.id] += 1;
        if !phase.is_multiple_of(st.stride_h) {
            return None;
        }
        let mut out = std::mem::take(&mut self.rows[st.id]);
        match &st.kind {
            StageKind::Conv(f) => conv_row(f, self.src(src), cin, win, &mut out, st.width),
            StageKind::Affine { scale, shift, relu } => {
                let input = self.src(src);
                for ch in 0..st.channels {
                    for x in 0..st.width {
                        let v = input[ch * win + x] * scale[ch] + shift[ch];
                        out[ch * st.width + x] = if *relu { v.max(0.0) } else { v };
                    }
                }
            }
            StageKind::Relu => {
                for (o, &v) in out.iter_mut().zip(self.src(src)) {
                    *o = v.max(0.0);
                }
            }
            StageKind::Residual {
                pre,
                body,
                projection,
                from_pre,
                relu,
            } => {
                // The nested stages write their own buffers; `out` is ours.
                self.rows[st.id] = Vec::new();
                let pre_out = if pre.is_empty() {
                    None
                } else {
                    Some(self.run_seq(pre, src, cin, win).expect("pre stages do not stride"))
                };
                let body_src = pre_out.map_or(src, |(id, _, _)| Src::Stage(id));
                let (bc, bw) = pre_out.map_or((cin, win), |(_, c, w)| (c, w));
                let body_out = self.run_seq(body, body_src, bc, bw);
                let short = match projection {
                    None => body_out.map(|_| src),
                    Some(p) => {
                        let (psrc, pc, pw) = if *from_pre { (body_src, bc, bw) } else { (src, cin, win) };
                        self.run_seq(p, psrc, pc, pw).map(|(id, _, _)| Src::Stage(id))
                    }
                };
                let (Some((bid, _, _)), Some(short)) = (body_out, short) else {
                    self.rows[st.id] = out;
                    return None;
                };
                let b = &self.rows[bid];
                let s = match short {
                    Src::Input(r) => r,
                    Src::Stage(id) => &self.rows[id],
                };
                for ((o, &x), &y) in out.iter_mut().zip(b).zip(s) {
                    let v = x + y;
                    *o = if *relu { v.max(0.0) } else { v };
                }
            }
        }
        self.rows[st.id] = out;
        self.emitted[st.id] = true;
        Some(())
    }

    /// Feeds the next input row (`C·W` floats, channel-major). Returns the logits
    /// after the final row and `None` before it.
    pub fn push_row(&mut self, plan: &StreamPlan, row: &[f32]) -> Result<Option<Vec<f32>>> {
        let [c, h, w] = plan.input;
        if self.finished {
            return Err(Error::Stream("push after the final row".into()));
        }
        if row.len() != c * w {
            return Err(Error::Stream(format!("row has {} values, expected {}", row.len(), c * w)));
        }
        self.rows_in += 1;
        self.emitted.fill(false);
        if let Some((id, ch, width)) = self.run_seq(&plan.stages, Src::Input(row), c, w) {
            let r = &self.rows[id];
            for (k, a) in self.acc.iter_mut().enumerate().take(ch) {
                *a += r[k * width..(k + 1) * width].iter().map(|&v| v as f64).sum::<f64>();
            }
            self.acc_count += width;
        } else if plan.stages.is_empty() {
            for (k, a) in self.acc.iter_mut().enumerate() {
                *a += row[k * w..(k + 1) * w].iter().map(|&v| v as f64).sum::<f64>();
            }
            self.acc_count += w;
        }
        if self.rows_in < h {
            return Ok(None);
        }
        self.finished = true;
        let k = plan.head_bias.len();
        let cin = plan.head_weight.dims()[1];
        let count = self.acc_count.max(1) as f64;
        let wts = plan.head_weight.data();
        let logits = (0..k)
            .map(|o| {
                let mut s = plan.head_bias[o] as f64;
                for i in 0..cin {
                    s += wts[o * cin + i] as f64 * (self.acc[i] / count);
                }
                s as f32
            })
            .collect();
        Ok(Some(logits))
    }
}

fn conv_row(f: &FoldedLayer, input: &[f32], cin: usize, win: usize, out: &mut [f32], wout: usize) {
    let d = f.weight.dims();
    let (cout, kw) = (d[0], d[3]);
    let (pw, sw) = (f.geom.pad_w as isize, f.geom.stride_w);
    let w = f.weight.data();
    for co in 0..cout {
        for ox in 0..wout {
            let mut s = f.bias[co] as f64;
            for ci in 0..cin {
                let wrow = &w[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                let irow = &input[ci * win..(ci + 1) * win];
                for (k, &wv) in wrow.iter().enumerate() {
                    let ix = (ox * sw) as isize + k as isize - pw;
                    if ix >= 0 && (ix as usize) < win {
                        s += wv as f64 * irow[ix as usize] as f64;
                    }
                }
            }
            let v = s as f32;
            out[co * wout + ox] = if f.relu { v.max(0.0) } else { v };
        }
    }
}

/// Row `r` of a `[1, C, H, W]` (or `[C, H, W]`) image, channel-major.
pub fn image_row(image: &Tensor, r: usize) -> Vec<f32> {
    let [_, c, h, w] = image.nchw();
    let mut row = Vec::with_capacity(c * w);
    for ch in 0..c {
        row.extend_from_slice(&image.data()[(ch * h + r) * w..(ch * h + r + 1) * w]);
    }
    row
}

/// Streams every row of `image` and returns the logits.
pub fn stream_image(plan: &StreamPlan, image: &Tensor) -> Result<Vec<f32>> {
    let [n, c, h, w] = image.nchw();
    if n != 1 || [c, h, w] != plan.input {
        return Err(Error::shape(
            "stream_image",
            "image",
            format!("[1, {}, {}, {}]", plan.input[0], plan.input[1], plan.input[2]),
            format!("{:?}", image.dims()),
        ));
    }
    let mut state = StreamState::new(plan);
    let mut logits = None;
    for r in 0..h {
        logits = state.push_row(plan, &image_row(image, r))?;
    }
    Ok(logits.expect("final row emits logits"))
}

/// Outcome of comparing streaming and batch inference on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub max_abs_diff: f32,
    pub batch_argmax: usize,
    pub stream_argmax: usize,
}

/// Max absolute logit difference between streaming and eval-mode batch inference.
pub fn equivalence_check(model: &Model, image: &Tensor) -> Result<Equivalence> {
    let plan = plan_stream(model)?;
    let streamed = stream_image(&plan, image)?;
    let [_, c, h, w] = image.nchw();
    let batch = model.predict(&image.clone().reshape(&[1, c, h, w])?, 1)?;
    let streamed = Tensor::new(&[1, streamed.len()], streamed)?;
    Ok(Equivalence {
        max_abs_diff: batch.max_abs_diff(&streamed),
        batch_argmax: batch.argmax_rows()[0],
        stream_argmax: streamed.argmax_rows()[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ArchSpec, FilterMode, ModelBuilder};

    fn tiny_student(k: usize, seed: u64) -> Model {
        let spec = ArchSpec::parse(&format!("tiny{k}"), 5).unwrap();
        init_weights(Model::build(&spec, FilterMode::RowStudent).unwrap(), seed)
    }

    #[test]
    fn fold_with_unit_stats_is_identity() {
        let w = Tensor::new(&[2, 1, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let f = fold_batchnorm("c", &w, None, ConvGeometry::row(), &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(f.weight, w);
        assert_eq!(f.bias, vec![0.0, 0.0]);
        let beta = Tensor::from_vec(vec![0.5, -2.0]);
        let f = fold_batchnorm("c", &w, None, ConvGeometry::row(), &ones, &beta, &zeros, &ones, 0.0).unwrap();
        assert_eq!(f.weight, w);
        assert_eq!(f.bias, vec![0.5, -2.0]);
    }

    #[test]
    fn teacher_is_rejected_and_student_accepted() {
        let spec = ArchSpec::parse("tiny4", 5).unwrap();
        let teacher = Model::build(&spec, FilterMode::Teacher).unwrap();
        let err = plan_stream(&teacher).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
        assert!(plan_stream(&tiny_student(4, 0)).is_ok());
    }

    #[test]
    fn tiny4_budget_is_sum_of_row_buffers() {
        let plan = plan_stream(&tiny_student(4, 0)).unwrap();
        // conv1 s2: 16 wide × 16 ch; conv2: 16×16; conv3 s2: 8×32; conv4: 8×32
        assert_eq!(plan.memory_budget(), 16 * 16 + 16 * 16 + 8 * 32 + 8 * 32);
        assert_eq!(plan.output_rows(), 8);
    }

    #[test]
    fn row_kernel_example() {
        let mut m = ModelBuilder::new([1, 1, 3])
            .conv(1, ConvGeometry::row(), false)
            .unwrap()
            .global_avg_pool()
            .unwrap()
            .linear(1)
            .unwrap()
            .build();
        let id = m.params().id("conv0.weight").unwrap();
        *m.params_mut().tensor_mut(id) = Tensor::new(&[1, 1, 1, 3], vec![1.0; 3]).unwrap();
        let plan = plan_stream(&m).unwrap();
        let mut st = StreamState::new(&plan);
        st.push_row(&plan, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(st.emitted_row(0).unwrap(), &[3.0, 6.0, 5.0]);
        assert!(st.push_row(&plan, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn streaming_matches_batch() {
        for seed in 0..5 {
            let m = tiny_student(4 + seed as usize, seed);
            let x = Tensor::new(
                &[1, 3, 32, 32],
                (0..3 * 32 * 32).map(|i| ((i * 7919 + seed as usize) % 211) as f32 / 105.0 - 1.0).collect(),
            )
            .unwrap();
            let eq = equivalence_check(&m, &x).unwrap();
            assert!(eq.max_abs_diff < 1e-4, "{eq:?}");
            assert_eq!(eq.batch_argmax, eq.stream_argmax);
        }
    }
}
