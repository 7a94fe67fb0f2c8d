//! Activation, pooling and dense kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.dims(), data).expect("dims preserved")
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims(), data).expect("dims preserved")
}

/// 2×2 max pooling with stride 2. Also returns the flat input index of each maximum.
pub fn max_pool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    if x.rank() != 4 {
        return Err(Error::shape("max_pool2x2", "input rank", 4, x.rank()));
    }
    let [n, c, h, w] = x.nchw();
    if h % 2 != 0 {
        return Err(Error::shape("max_pool2x2", "height", "an even extent", h));
    }
    if w % 2 != 0 {
        return Err(Error::shape("max_pool2x2", "width", "an even extent", w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                // Scan in flat-index order; strict `>` keeps the lowest index on ties.
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], y)?, arg))
}

pub fn max_pool2x2_backward(x_dims: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_dims);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx as usize] += g;
    }
    dx
}

/// `[N, C, H, W] -> [N, C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("global_avg_pool", "input rank", 4, x.rank()));
    }
    let [n, c, h, w] = x.nchw();
    let hw = h * w;
    let y = x
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[n, c], y)
}

pub fn global_avg_pool_backward(x_dims: &[usize], dy: &Tensor) -> Tensor {
    let [_, _, h, w] = [x_dims[0], x_dims[1], x_dims[2], x_dims[3]];
    let hw = h * w;
    let mut data = Vec::with_capacity(dy.numel() * hw);
    for &g in dy.data() {
        let v = (g as f64 / hw as f64) as f32;
        data.extend(std::iter::repeat_n(v, hw));
    }
    Tensor::new(x_dims, data).expect("dims preserved")
}

/// `y[N, out] = x[N, in] · wᵀ + b` with `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("linear", "input rank", 2, x.rank()));
    }
    if w.rank() != 2 {
        return Err(Error::shape("linear", "weight rank", 2, w.rank()));
    }
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let (fout, win) = (w.dims()[0], w.dims()[1]);
    if win != fin {
        return Err(Error::shape("linear", "input features (axis 1)", win, fin));
    }
    if let Some(b) = b {
        if b.numel() != fout {
            return Err(Error::shape("linear", "bias length", fout, b.numel()));
        }
    }
    let mut y = Vec::with_capacity(n * fout);
    for row in x.data().chunks(fin) {
        for (o, wrow) in w.data().chunks(fin).enumerate() {
            let dot: f64 = row.iter().zip(wrow).map(|(&a, &b)| a as f64 * b as f64).sum();
            y.push((dot + b.map_or(0.0, |b| b.data()[o] as f64)) as f32);
        }
    }
    Tensor::new(&[n, fout], y)
}

/// Returns (dx, dw, db).
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let fout = w.dims()[0];
    let mut dx = vec![0.0f32; n * fin];
    for i in 0..n {
        for j in 0..fin {
            let mut s = 0.0f64;
            for o in 0..fout {
                s += dy.data()[i * fout + o] as f64 * w.data()[o * fin + j] as f64;
            }
            dx[i * fin + j] = s as f32;
        }
    }
    let mut dw = vec![0.0f32; fout * fin];
    let mut db = vec![0.0f32; fout];
    for o in 0..fout {
        let mut sb = 0.0f64;
        for i in 0..n {
            sb += dy.data()[i * fout + o] as f64;
        }
        db[o] = sb as f32;
        for j in 0..fin {
            let mut s = 0.0f64;
            for i in 0..n {
                s += dy.data()[i * fout + o] as f64 * x.data()[i * fin + j] as f64;
            }
            dw[o * fin + j] = s as f32;
        }
    }
    (
        Tensor::new(&[n, fin], dx).expect("dims"),
        Tensor::new(&[fout, fin], dw).expect("dims"),
        Tensor::from_vec(db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_picks_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_index() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = max_pool2x2(&x).unwrap();
        assert_eq!(arg, vec![0]);
        let dx = max_pool2x2_backward(x.dims(), &arg, &Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        assert!(max_pool2x2(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
        assert!(max_pool2x2(&Tensor::zeros(&[1, 1, 2, 5])).is_err());
    }

    #[test]
    fn gap_on_unit_spatial_is_identity() {
        let x = Tensor::new(&[2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, 0.0]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.5, 1.0]);
    }
}
