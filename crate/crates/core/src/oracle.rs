//! Naive f64 reference implementations for tests. Nothing here is fast and nothing
//! here shares code with the production kernels.

use crate::model::{Layer, Model, ParamId, Shortcut};
use crate::ops::{ConvGeometry, BN_EPS};
use crate::tensor::Tensor;

/// Activation in f64, NCHW (flat vectors use h = w = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RefAct {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RefAct {
    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims();
        let (n, c, h, w) = match d.len() {
            4 => (d[0], d[1], d[2], d[3]),
            2 => (d[0], d[1], 1, 1),
            _ => panic!("reference activations are rank 2 or 4"),
        };
        Self {
            n,
            c,
            h,
            w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Nested-loop zero-padded cross-correlation.
pub fn naive_conv2d(x: &RefAct, w: &[f64], wdims: [usize; 4], b: Option<&[f64]>, g: &ConvGeometry) -> RefAct {
    let [cout, cin, kh, kw] = wdims;
    assert_eq!(cin, x.c);
    let oh = (x.h + 2 * g.pad_h - kh) / g.stride_h + 1;
    let ow = (x.w + 2 * g.pad_w - kw) / g.stride_w + 1;
    let mut out = vec![0.0; x.n * cout * oh * ow];
    for n in 0..x.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride_h + ky) as isize - g.pad_h as isize;
                                let ix = (ox * g.stride_w + kx) as isize - g.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                s += w[((co * cin + ci) * kh + ky) * kw + kx] * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    RefAct {
        n: x.n,
        c: cout,
        h: oh,
        w: ow,
        data: out,
    }
}

/// Model parameters as f64 vectors, in store order.
pub fn ref_params(model: &Model) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|(_, _, p)| p.tensor.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Whether batch norm uses batch statistics or the stored running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefBn {
    Batch,
    Running,
}

struct Interp<'a> {
    model: &'a Model,
    params: &'a [Vec<f64>],
    bn: RefBn,
}

impl Interp<'_> {
    fn p(&self, id: ParamId) -> &[f64] {
        &self.params[id.index()]
    }

    fn seq(&self, layers: &[Layer], x: RefAct) -> RefAct {
        layers.iter().fold(x, |h, l| self.layer(l, h))
    }

    fn layer(&self, layer: &Layer, x: RefAct) -> RefAct {
        match layer {
            Layer::Conv(c) => {
                let d = self.model.params().tensor(c.weight).dims();
                naive_conv2d(&x, self.p(c.weight), [d[0], d[1], d[2], d[3]], c.bias.map(|b| self.p(b)), &c.geom)
            }
            Layer::BatchNorm(b) => {
                let hw = x.h * x.w;
                let count = (x.n * hw) as f64;
                let mut out = x.clone();
                for ch in 0..x.c {
                    let vals = || (0..x.n).flat_map(|n| (0..hw).map(move |i| (n, i)));
                    let (mean, var) = match self.bn {
                        RefBn::Batch => {
                            let m = vals().map(|(n, i)| x.data[(n * x.c + ch) * hw + i]).sum::<f64>() / count;
                            let v = vals().map(|(n, i)| (x.data[(n * x.c + ch) * hw + i] - m).powi(2)).sum::<f64>() / count;
                            (m, v)
                        }
                        RefBn::Running => (self.p(b.running_mean)[ch], self.p(b.running_var)[ch]),
                    };
                    let inv = 1.0 / (var + BN_EPS as f64).sqrt();
                    let (g, be) = (self.p(b.gamma)[ch], self.p(b.beta)[ch]);
                    for (n, i) in vals() {
                        let k = (n * x.c + ch) * hw + i;
                        out.data[k] = (x.data[k] - mean) * inv * g + be;
                    }
                }
                out
            }
            Layer::Relu => RefAct {
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                ..x
            },
            Layer::MaxPool2 => {
                let (oh, ow) = (x.h / 2, x.w / 2);
                let mut data = Vec::with_capacity(x.n * x.c * oh * ow);
                for n in 0..x.n {
                    for c in 0..x.c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                    .iter()
                                    .map(|&(dy, dx)| x.at(n, c, 2 * y + dy, 2 * xx + dx))
                                    .fold(f64::NEG_INFINITY, f64::max);
                                data.push(m);
                            }
                        }
                    }
                }
                RefAct {
                    n: x.n,
                    c: x.c,
                    h: oh,
                    w: ow,
                    data,
                }
            }
            Layer::GlobalAvgPool => {
                let hw = x.h * x.w;
                let data = (0..x.n * x.c)
                    .map(|k| x.data[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect();
                RefAct {
                    n: x.n,
                    c: x.c,
                    h: 1,
                    w: 1,
                    data,
                }
            }
            Layer::Linear(l) => {
                let w = self.p(l.weight);
                let mut data = Vec::with_capacity(x.n * l.fout);
                for n in 0..x.n {
                    for o in 0..l.fout {
                        let mut s = l.bias.map_or(0.0, |b| self.p(b)[o]);
                        for i in 0..l.fin {
                            s += w[o * l.fin + i] * x.data[n * l.fin + i];
                        }
                        data.push(s);
                    }
                }
                RefAct {
                    n: x.n,
                    c: l.fout,
                    h: 1,
                    w: 1,
                    data,
                }
            }
            Layer::Residual(block) => {
                let pre = self.seq(&block.pre, x.clone());
                let body = self.seq(&block.body, pre.clone());
                let short = match &block.shortcut {
                    Shortcut::Identity => x,
                    Shortcut::Projection { layers, from_pre } => self.seq(layers, if *from_pre { pre } else { x }),
                };
                let data = body
                    .data
                    .iter()
                    .zip(&short.data)
                    .map(|(a, b)| if block.post_relu { (a + b).max(0.0) } else { a + b })
                    .collect();
                RefAct { data, ..body }
            }
        }
    }
}

/// Logits of `model` evaluated entirely in f64 with the given parameter values.
pub fn reference_logits(model: &Model, params: &[Vec<f64>], x: &Tensor, bn: RefBn) -> RefAct {
    Interp { model, params, bn }.seq(model.layers(), RefAct::from_tensor(x))
}

/// Row-wise log-softmax of `z / tau`.
pub fn naive_log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v / tau - lse).collect()
}

/// Mean over rows of `−log softmax(z)[y]`.
pub fn naive_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let rows = logits.len() / classes;
    (0..rows)
        .map(|r| -naive_log_softmax(&logits[r * classes..(r + 1) * classes], 1.0)[labels[r]])
        .sum::<f64>()
        / rows as f64
}

/// Batch mean of `KL(softmax(t/τ) ‖ softmax(s/τ))`, times `scale`.
pub fn naive_kl(teacher: &[f64], student: &[f64], classes: usize, tau: f64, scale: f64) -> f64 {
    let rows = teacher.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        let lt = naive_log_softmax(&teacher[r * classes..(r + 1) * classes], tau);
        let ls = naive_log_softmax(&student[r * classes..(r + 1) * classes], tau);
        total += lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
    }
    scale * total / rows as f64
}

/// Mean squared difference.
pub fn naive_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// A small random network mixing 3×3, 1×3 and 3×1 convolutions, batch norm,
/// pooling and a linear head, with its input batch and labels.
pub struct RandomCase {
    pub model: crate::model::Model,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

pub fn random_tiny_case(seed: u64) -> RandomCase {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(2..=4);
    let w = 2 * rng.random_range(2..=4);
    let geoms = [ConvGeometry::square(), ConvGeometry::row(), ConvGeometry::column()];
    let mut b = crate::model::ModelBuilder::new([c, h, w]);
    let mut pooled = false;
    for i in 0..rng.random_range(1..=3) {
        let g = geoms[rng.random_range(0..3)];
        let cout = rng.random_range(2..=4);
        b = b.conv(cout, g, i == 0 && rng.random_bool(0.5)).unwrap();
        b = b.batchnorm().unwrap().relu().unwrap();
        if !pooled && rng.random_bool(0.5) {
            b = b.max_pool2x2().unwrap();
            pooled = true;
        }
    }
    let k = rng.random_range(2..=4);
    let mut model = b.global_avg_pool().unwrap().linear(k).unwrap().build();
    model.init_weights(rng.random());
    // Non-trivial affine parameters so every gradient path is exercised.
    let normal = Normal::new(0.0, 0.3).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if matches!(
            model.params().get(id).kind,
            crate::model::ParamKind::BnGamma | crate::model::ParamKind::BnBeta
        ) {
            for v in model.params_mut().tensor_mut(id).data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    let n = rng.random_range(2..=4);
    let x = Tensor::new(
        &[n, c, h, w],
        (0..n * c * h * w).map(|_| normal.sample(&mut rng) as f32 * 3.0).collect(),
    )
    .unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    RandomCase { model, x, labels }
}

/// Result of comparing autodiff gradients with central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Worst relative error seen.
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// `|a − n| / max(|a|, |n|)`, with differences below `1e-6` treated as exact.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d <= 1e-6 {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

/// Samples `coords` trainable coordinates and checks the tape gradient of the
/// cross-entropy loss (train-mode batch norm) against central differences taken on
/// the f64 interpreter.
pub fn gradient_check(case: &RandomCase, coords: usize, seed: u64, tol: f64) -> GradCheck {
    use rand::{Rng, SeedableRng};

    let model = &case.model;
    let mut tape = crate::tape::Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.constant(case.x.clone());
    let out = model.forward(&mut tape, &bound, x, crate::model::BnMode::Train).unwrap();
    let loss = tape.cross_entropy(out.logits, &case.labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let base = ref_params(model);
    let trainable = model.params().trainable_ids();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ref_loss = |p: &[Vec<f64>]| {
        let z = reference_logits(model, p, &case.x, RefBn::Batch);
        naive_cross_entropy(&z.data, z.c, &case.labels)
    };
    let mut report = GradCheck::default();
    for _ in 0..coords {
        let id = trainable[rng.random_range(0..trainable.len())];
        let j = rng.random_range(0..base[id.index()].len());
        let analytic = grads.get_or_zeros(bound.var(id)).data()[j] as f64;
        let step = 1e-5 * base[id.index()][j].abs().max(1.0);
        let mut p = base.clone();
        p[id.index()][j] += step;
        let up = ref_loss(&p);
        p[id.index()][j] -= 2.0 * step;
        let down = ref_loss(&p);
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        report.worst = report.worst.max(err);
        if err <= tol {
            report.passed += 1;
        }
    }
    report
}
