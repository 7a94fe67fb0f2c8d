//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends one record holding its output value and
//! whatever its backward rule needs. Records are only ever appended, so inputs always
//! precede the records that consume them and a single reverse sweep is a valid
//! topological traversal.

use crate::error::{Error, Result};
use crate::ops::{conv, loss, norm, pool, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: norm::BnTrainCache,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor,
        var: Tensor,
        eps: f32,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Mean(Vec<Var>),
    Sum(Var),
    /// Gradient flows into `student` only.
    MeanSquaredDiff {
        student: Var,
        teacher: Var,
    },
    /// Gradient flows into `student` only.
    KlTemperature {
        teacher: Var,
        student: Var,
        tau: f32,
        scale: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f32)>),
    /// `log(mean_m softmax(x_m))`, row-wise.
    LogMeanSoftmax(Vec<Var>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-owner record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `v` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` only if some input needs a gradient; otherwise stores a plain value.
    fn record(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let op = if rg { op() } else { Op::Leaf };
        self.push(value, rg, op)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, || Op::Conv2d { x, w, b, geom }))
    }

    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BnBatchStats)> {
        let (y, cache) =
            norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BnBatchStats {
            mean: cache.mean.clone(),
            var: cache.var.clone(),
            count: cache.count,
        };
        let v = self.record(y, &[x, gamma, beta], || Op::BatchNormTrain {
            x,
            gamma,
            beta,
            cache,
        });
        Ok((v, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f32,
    ) -> Result<Var> {
        let y = norm::batchnorm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        Ok(self.record(y, &[x, gamma, beta], || Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            var: var.clone(),
            eps,
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = pool::relu(self.value(x));
        self.record(y, &[x], || Op::Relu(x))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = pool::max_pool2x2(self.value(x))?;
        Ok(self.record(y, &[x], || Op::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = pool::global_avg_pool(self.value(x))?;
        Ok(self.record(y, &[x], || Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = pool::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(y, &inputs, || Op::Linear { x, w, b }))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(
                op,
                "operand",
                format!("{:?}", self.value(a).dims()),
                format!("{:?}", self.value(b).dims()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.record(y, &[a, b], || Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).dims(), data)?;
        Ok(self.record(y, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let y = Tensor::new(self.value(x).dims(), data).expect("dims preserved");
        self.record(y, &[x], || Op::Scale(x, s))
    }

    /// Elementwise arithmetic mean of same-shaped values.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Param("mean of zero operands".into()))?;
        for &x in &xs[1..] {
            self.same_dims("mean", first, x)?;
        }
        let n = xs.len() as f64;
        let len = self.value(first).numel();
        let data = (0..len)
            .map(|i| {
                let s: f64 = xs.iter().map(|&x| self.value(x).data()[i] as f64).sum();
                (s / n) as f32
            })
            .collect();
        let y = Tensor::new(self.value(first).dims(), data)?;
        Ok(self.record(y, xs, || Op::Mean(xs.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(Tensor::scalar(s as f32), &[x], || Op::Sum(x))
    }

    /// Mean squared difference; `teacher` is treated as a constant.
    pub fn mean_squared_diff(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let v = loss::mean_squared_diff(self.value(student), self.value(teacher))?;
        Ok(self.record(Tensor::scalar(v as f32), &[student], || Op::MeanSquaredDiff {
            student,
            teacher,
        }))
    }

    /// `scale · KL(softmax(t/τ) ‖ softmax(s/τ))`; `teacher` is treated as a constant.
    pub fn kl_temperature(&mut self, teacher: Var, student: Var, tau: f32, scale: f32) -> Result<Var> {
        let v = loss::kl_temperature(self.value(teacher), self.value(student), tau, scale)?;
        Ok(self.record(Tensor::scalar(v as f32), &[student], || Op::KlTemperature {
            teacher,
            student,
            tau,
            scale,
        }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = loss::cross_entropy(self.value(logits), labels)?;
        Ok(self.record(Tensor::scalar(v as f32), &[logits], || Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        }))
    }

    /// `Σ cᵢ·xᵢ` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, c) in terms {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::shape("weighted_sum", "term", "a scalar", format!("{:?}", t.dims())));
            }
            s += c as f64 * t.item() as f64;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.record(Tensor::scalar(s as f32), &inputs, || {
            Op::WeightedSum(terms.to_vec())
        }))
    }

    /// Row-wise `log(mean_m softmax(x_m))` over same-shaped `[N, K]` logits.
    pub fn log_mean_softmax(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Param("log_mean_softmax of zero operands".into()))?;
        for &x in &xs[1..] {
            self.same_dims("log_mean_softmax", first, x)?;
        }
        let t = self.value(first);
        if t.rank() != 2 {
            return Err(Error::shape("log_mean_softmax", "logits rank", 2, t.rank()));
        }
        let k = t.dims()[1];
        let probs: Vec<Vec<f64>> = xs
            .iter()
            .map(|&x| {
                loss::log_softmax_rows(self.value(x).data(), k, 1.0)
                    .into_iter()
                    .map(f64::exp)
                    .collect()
            })
            .collect();
        let m = xs.len() as f64;
        let data = (0..t.numel())
            .map(|i| (probs.iter().map(|p| p[i]).sum::<f64>() / m).ln() as f32)
            .collect();
        let y = Tensor::new(t.dims(), data)?;
        Ok(self.record(y, xs, || Op::LogMeanSoftmax(xs.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads, dims });
        }
        grads[loss.0] = Some(Tensor::full(lv.dims(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(node, &g)? {
                if self.requires_grad(input) {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(Gradients { grads, dims })
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    g,
                    (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b))),
                )?;
                out.extend(grads.dx.map(|t| (*x, t)));
                out.extend(grads.dw.map(|t| (*w, t)));
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = norm::batchnorm_train_backward(g, self.value(*gamma), cache);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) = norm::batchnorm_eval_backward(
                    g,
                    self.value(*x),
                    self.value(*gamma),
                    mean,
                    var,
                    *eps,
                );
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Relu(x) => out.push((*x, pool::relu_backward(self.value(*x), g))),
            Op::MaxPool2 { x, argmax } => out.push((
                *x,
                pool::max_pool2x2_backward(self.value(*x).dims(), argmax, g),
            )),
            Op::GlobalAvgPool(x) => out.push((
                *x,
                pool::global_avg_pool_backward(self.value(*x).dims(), g),
            )),
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = pool::linear_backward(self.value(*x), self.value(*w), g);
                out.push((*x, dx));
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let prod = |other: &Tensor| {
                    let d = g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.dims(), d).expect("dims preserved")
                };
                out.push((*a, prod(self.value(*b))));
                out.push((*b, prod(self.value(*a))));
            }
            Op::Scale(x, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                out.push((*x, Tensor::new(g.dims(), d)?));
            }
            Op::Mean(xs) => {
                let inv = 1.0 / xs.len() as f64;
                let d: Vec<f32> = g.data().iter().map(|&v| (v as f64 * inv) as f32).collect();
                for &x in xs {
                    out.push((x, Tensor::new(g.dims(), d.clone())?));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).dims(), g.item()))),
            Op::MeanSquaredDiff { student, teacher } => {
                let s = self.value(*student);
                let t = self.value(*teacher);
                let c = 2.0 * g.item() as f64 / s.numel() as f64;
                let d = s
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| ((a as f64 - b as f64) * c) as f32)
                    .collect();
                out.push((*student, Tensor::new(s.dims(), d)?));
            }
            Op::KlTemperature {
                teacher,
                student,
                tau,
                scale,
            } => out.push((
                *student,
                loss::kl_temperature_backward(
                    self.value(*teacher),
                    self.value(*student),
                    *tau,
                    *scale,
                    g.item(),
                ),
            )),
            Op::CrossEntropy { logits, labels } => out.push((
                *logits,
                loss::cross_entropy_backward(self.value(*logits), labels, g.item()),
            )),
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    out.push((v, Tensor::full(self.value(v).dims(), g.item() * c)));
                }
            }
            Op::LogMeanSoftmax(xs) => {
                // z = log p̄, p̄ = (1/M) Σ softmax(x_m)
                // ∂L/∂x_m,j = (1/M) [ (g/p̄ ⊙ p_m)_j − p_m,j Σ_k g_k p_m,k / p̄_k ]
                let dims = self.value(xs[0]).dims().to_vec();
                let k = dims[1];
                let m = xs.len() as f64;
                let probs: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|&x| {
                        loss::log_softmax_rows(self.value(x).data(), k, 1.0)
                            .into_iter()
                            .map(f64::exp)
                            .collect()
                    })
                    .collect();
                let pbar: Vec<f64> = (0..g.numel())
                    .map(|i| probs.iter().map(|p| p[i]).sum::<f64>() / m)
                    .collect();
                for (&x, p) in xs.iter().zip(&probs) {
                    let mut d = vec![0.0f32; g.numel()];
                    for (r, row) in d.chunks_mut(k).enumerate() {
                        let base = r * k;
                        let w: Vec<f64> = (0..k)
                            .map(|j| g.data()[base + j] as f64 * p[base + j] / pbar[base + j])
                            .collect();
                        let total: f64 = w.iter().sum();
                        for j in 0..k {
                            row[j] = ((w[j] - p[base + j] * total) / m) as f32;
                        }
                    }
                    out.push((x, Tensor::new(&dims, d)?));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_product_is_other_factor() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.5, -2.0, 0.25]));
        let w = tape.leaf(Tensor::from_vec(vec![0.3, 0.1, -0.7]), true);
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.5, -2.0, 0.25]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![2.0]), true);
        let unused = tape.leaf(Tensor::from_vec(vec![5.0, 6.0]), true);
        let loss = tape.scale(a, 3.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get_or_zeros(a).data(), &[3.0]);
        assert_eq!(grads.get_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let b = tape.add(a, a).unwrap();
        let loss = tape.sum(b);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn teacher_side_of_distillation_losses_stays_detached() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap(), true);
        let s = tape.leaf(Tensor::new(&[1, 3], vec![0.0, 0.5, 0.0]).unwrap(), true);
        let kl = tape.kl_temperature(t, s, 4.0, 16.0).unwrap();
        let mse = tape.mean_squared_diff(s, t).unwrap();
        let loss = tape.weighted_sum(&[(kl, 1.0), (mse, 1.0)]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(s).is_some());
    }

    #[test]
    fn untracked_inputs_record_no_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0]));
        let b = tape.scale(a, 2.0);
        assert!(!tape.requires_grad(b));
        let grads = tape.backward(b).unwrap();
        assert!(grads.get(a).is_none());
    }
}
