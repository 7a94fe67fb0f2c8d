//! Softmax, cross-entropy, temperature KL and feature-matching kernels.
//!
//! All reductions run in f64 in a fixed order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn rows(l: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if l.rank() != 2 {
        return Err(Error::shape(op, "logits rank", 2, l.rank()));
    }
    Ok((l.dims()[0], l.dims()[1]))
}

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("temperature must be > 0, got {tau}")))
    }
}

/// Row-wise `log softmax(row / tau)` in f64.
pub fn log_softmax_rows(l: &[f32], k: usize, tau: f32) -> Vec<f64> {
    let t = tau as f64;
    let mut out = Vec::with_capacity(l.len());
    for row in l.chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / t));
        let lse = row.iter().map(|&v| (v as f64 / t - max).exp()).sum::<f64>().ln() + max;
        out.extend(row.iter().map(|&v| v as f64 / t - lse));
    }
    out
}

pub fn softmax_temperature(l: &Tensor, tau: f32) -> Result<Tensor> {
    check_tau(tau)?;
    let (_, k) = rows(l, "softmax_temperature")?;
    let p = log_softmax_rows(l.data(), k, tau)
        .into_iter()
        .map(|v| v.exp() as f32)
        .collect();
    Tensor::new(l.dims(), p)
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = rows(logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", "label count", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Param(format!("label {bad} outside [0, {k})")));
    }
    let lp = log_softmax_rows(logits.data(), k, 1.0);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -lp[i * k + y]).sum();
    Ok(total / n as f64)
}

pub fn cross_entropy_backward(logits: &Tensor, labels: &[usize], dloss: f32) -> Tensor {
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    let lp = log_softmax_rows(logits.data(), k, 1.0);
    let scale = dloss as f64 / n as f64;
    let mut g = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
            g.push(((lp[i * k + j].exp() - onehot) * scale) as f32);
        }
    }
    Tensor::new(logits.dims(), g).expect("dims preserved")
}

/// Batch-mean `KL(softmax(t/τ) ‖ softmax(s/τ))`, multiplied by `scale`.
pub fn kl_temperature(teacher: &Tensor, student: &Tensor, tau: f32, scale: f32) -> Result<f64> {
    check_tau(tau)?;
    let (n, k) = rows(student, "loss_lkd")?;
    if teacher.dims() != student.dims() {
        return Err(Error::shape(
            "loss_lkd",
            "teacher logits",
            format!("{:?}", student.dims()),
            format!("{:?}", teacher.dims()),
        ));
    }
    let lt = log_softmax_rows(teacher.data(), k, tau);
    let ls = log_softmax_rows(student.data(), k, tau);
    let mut total = 0.0f64;
    for (a, b) in lt.iter().zip(&ls) {
        total += a.exp() * (a - b);
    }
    Ok(total / n as f64 * scale as f64)
}

/// Gradient of [`kl_temperature`] with respect to the student logits only.
pub fn kl_temperature_backward(
    teacher: &Tensor,
    student: &Tensor,
    tau: f32,
    scale: f32,
    dloss: f32,
) -> Tensor {
    let (n, k) = (student.dims()[0], student.dims()[1]);
    let lt = log_softmax_rows(teacher.data(), k, tau);
    let ls = log_softmax_rows(student.data(), k, tau);
    let c = dloss as f64 * scale as f64 / (tau as f64 * n as f64);
    let g = lt
        .iter()
        .zip(&ls)
        .map(|(a, b)| ((b.exp() - a.exp()) * c) as f32)
        .collect();
    Tensor::new(student.dims(), g).expect("dims preserved")
}

/// Mean of squared elementwise differences.
pub fn mean_squared_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "loss_fkd",
            "feature",
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}
