//! Forward kernels for the network primitives. The grad tape records these
//! and pairs each with its backward rule; the free functions here are also
//! the public inference-only API.
//!
//! Convolution is cross-correlation (no kernel flip), the usual deep
//! learning convention.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::evidential::{sigmoid, softplus};
use crate::tensor::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    GlobalAvg,
    GlobalMax,
    ChannelwiseAvg,
    ChannelwiseMax,
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    bias_len: usize,
    padding: usize,
    stride: usize,
) -> Result<ConvDims, NnError> {
    let (c_in, h, w) = input.chw()?;
    let (c_out, kc, kh, kw) = match kernels.shape() {
        &[co, ci, kh, kw] => (co, ci, kh, kw),
        s => {
            return Err(NnError::Shape(format!(
                "conv2d kernels must be C_out x C_in x k x k, got {s:?}"
            )))
        }
    };
    if kh != kw || kh % 2 == 0 {
        return Err(NnError::Shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
    }
    if kc != c_in {
        return Err(NnError::Shape(format!(
            "conv2d input has {c_in} channels but kernels expect {kc}"
        )));
    }
    if bias_len != c_out {
        return Err(NnError::Shape(format!(
            "conv2d bias length {bias_len} does not match {c_out} output channels"
        )));
    }
    if stride == 0 {
        return Err(NnError::Shape("conv2d stride must be >= 1".into()));
    }
    let span_h = h + 2 * padding;
    let span_w = w + 2 * padding;
    if span_h < kh || span_w < kh || (span_h - kh) % stride != 0 || (span_w - kh) % stride != 0 {
        return Err(NnError::Shape(format!(
            "conv2d geometry H={h} W={w} k={kh} padding={padding} stride={stride} is not integral"
        )));
    }
    Ok(ConvDims {
        c_in,
        c_out,
        h,
        w,
        k: kh,
        h_out: (span_h - kh) / stride + 1,
        w_out: (span_w - kh) / stride + 1,
    })
}

/// 2-D cross-correlation over a C x H x W input.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    padding: usize,
    stride: usize,
) -> Result<Tensor, NnError> {
    let d = conv_dims(input, kernels, bias.len(), padding, stride)?;
    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
    for co in 0..d.c_out {
        for oh in 0..d.h_out {
            for ow in 0..d.w_out {
                let mut acc = bias[co];
                for ci in 0..d.c_in {
                    let kbase = ((co * d.c_in + ci) * d.k) * d.k;
                    let xbase = ci * d.h * d.w;
                    for kh in 0..d.k {
                        let ih = (oh * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.k {
                            let iw = (ow * stride + kw) as isize - padding as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            acc += x[xbase + ih as usize * d.w + iw as usize]
                                * kd[kbase + kh * d.k + kw];
                        }
                    }
                }
                out[(co * d.h_out + oh) * d.w_out + ow] = acc;
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

/// weight . input + bias
pub fn linear(input: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor, NnError> {
    let n = input.len();
    let (m, wn) = match weight.shape() {
        &[m, wn] => (m, wn),
        s => return Err(NnError::Shape(format!("linear weight must be m x n, got {s:?}"))),
    };
    if wn != n || bias.len() != m {
        return Err(NnError::Shape(format!(
            "linear dims disagree: input {n}, weight {m}x{wn}, bias {}",
            bias.len()
        )));
    }
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = bias[i];
        let row = &wd[i * n..(i + 1) * n];
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
    Tensor::new(vec![m], out)
}

pub(crate) fn activate(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softplus => softplus(x),
    }
}

/// Derivative of the activation at pre-activation x.
pub(crate) fn activate_grad(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        Activation::Softplus => sigmoid(x),
    }
}

/// Elementwise activation; a total function on any shape.
pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    let data = input.data().iter().map(|&v| activate(v, kind)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Global modes reduce H x W to a C-vector; channelwise modes reduce C to
/// a 1 x H x W map. Max modes also report flat argmax indices for backprop.
pub(crate) fn pool_with_indices(
    input: &Tensor,
    mode: PoolMode,
) -> Result<(Tensor, Vec<usize>), NnError> {
    let (c, h, w) = input.chw()?;
    let x = input.data();
    let hw = h * w;
    match mode {
        PoolMode::GlobalAvg => {
            let out: Vec<f64> = (0..c)
                .map(|ci| x[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            Ok((Tensor::new(vec![c], out)?, Vec::new()))
        }
        PoolMode::GlobalMax => {
            let mut out = vec![0.0; c];
            let mut idx = vec![0usize; c];
            for ci in 0..c {
                let mut best = ci * hw;
                for p in ci * hw..(ci + 1) * hw {
                    if x[p] > x[best] {
                        best = p;
                    }
                }
                out[ci] = x[best];
                idx[ci] = best;
            }
            Ok((Tensor::new(vec![c], out)?, idx))
        }
        PoolMode::ChannelwiseAvg => {
            let mut out = vec![0.0; hw];
            for ci in 0..c {
                for p in 0..hw {
                    out[p] += x[ci * hw + p];
                }
            }
            for v in &mut out {
                *v /= c as f64;
            }
            Ok((Tensor::new(vec![1, h, w], out)?, Vec::new()))
        }
        PoolMode::ChannelwiseMax => {
            let mut out = vec![0.0; hw];
            let mut idx = vec![0usize; hw];
            for p in 0..hw {
                let mut best = p;
                for ci in 1..c {
                    if x[ci * hw + p] > x[best] {
                        best = ci * hw + p;
                    }
                }
                out[p] = x[best];
                idx[p] = best;
            }
            Ok((Tensor::new(vec![1, h, w], out)?, idx))
        }
    }
}

pub fn pool(input: &Tensor, mode: PoolMode) -> Result<Tensor, NnError> {
    pool_with_indices(input, mode).map(|(t, _)| t)
}

/// 2x2 max pool, stride 2; odd trailing rows/columns are dropped.
pub(crate) fn max_pool2_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    let (c, h, w) = input.chw()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(NnError::Shape(format!("max_pool2 needs H,W >= 2, got {h}x{w}")));
    }
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    let mut idx = vec![0usize; c * ho * wo];
    for ci in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = (ci * h + 2 * oh) * w + 2 * ow;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let p = (ci * h + 2 * oh + dh) * w + 2 * ow + dw;
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                let o = (ci * ho + oh) * wo + ow;
                out[o] = x[best];
                idx[o] = best;
            }
        }
    }
    Ok((Tensor::new(vec![c, ho, wo], out)?, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let x = Tensor::zeros(vec![1, 3, 3]);
        let k = t(vec![1, 1, 3, 3], vec![0.3; 9]);
        let y = conv2d(&x, &k, &[0.0], 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let k = t(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &k, &[0.0], 0, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = t(vec![1, 3, 3], vec![1.0; 9]);
        let k = t(vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &k, &[0.0], 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_relative_eq!(y.item(), 9.0, epsilon = 1e-12);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::zeros(vec![2, 3, 3]);
        let k = Tensor::zeros(vec![1, 1, 3, 3]); // channel mismatch
        assert!(conv2d(&x, &k, &[0.0], 0, 1).is_err());
        let k = Tensor::zeros(vec![1, 2, 2, 2]); // even kernel
        assert!(conv2d(&x, &k, &[0.0], 0, 1).is_err());
        let x4 = Tensor::zeros(vec![2, 4, 4]);
        let k = Tensor::zeros(vec![1, 2, 3, 3]); // stride does not divide 4 - 3
        assert!(conv2d(&x4, &k, &[0.0], 0, 2).is_err());
        assert!(conv2d(&x, &k, &[0.0, 0.0], 0, 1).is_err()); // bias length
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = crate::rng::Rng::new(5);
        let xd: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.normal()).collect();
        let yd: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.normal()).collect();
        let kd: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.normal()).collect();
        let x = t(vec![2, 4, 4], xd.clone());
        let y = t(vec![2, 4, 4], yd.clone());
        let k = t(vec![3, 2, 3, 3], kd);
        let (a, b) = (1.7, -0.4);
        let mixed: Vec<f64> = xd.iter().zip(&yd).map(|(u, v)| a * u + b * v).collect();
        let lhs = conv2d(&t(vec![2, 4, 4], mixed), &k, &[0.0; 3], 1, 1).unwrap();
        let cx = conv2d(&x, &k, &[0.0; 3], 1, 1).unwrap();
        let cy = conv2d(&y, &k, &[0.0; 3], 1, 1).unwrap();
        for i in 0..lhs.len() {
            assert_relative_eq!(
                lhs.data()[i],
                a * cx.data()[i] + b * cy.data()[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn linear_hand_values() {
        let x = t(vec![2], vec![1.0, 1.0]);
        let w = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = linear(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);

        let id = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = linear(&x, &id, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), x.data());

        let zero = Tensor::zeros(vec![2, 2]);
        let y = linear(&x, &zero, &[5.0, -2.0]).unwrap();
        assert_eq!(y.data(), &[5.0, -2.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = t(vec![3], vec![0.0; 3]);
        let w = t(vec![2, 2], vec![0.0; 4]);
        assert!(linear(&x, &w, &[0.0; 2]).is_err());
        let w = t(vec![2, 3], vec![0.0; 6]);
        assert!(linear(&x, &w, &[0.0; 3]).is_err());
    }

    #[test]
    fn activation_values() {
        let x = t(vec![3], vec![-1.0, 0.0, 2.0]);
        let r = activation(&x, Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = activation(&x, Activation::Sigmoid);
        assert_relative_eq!(s.data()[1], 0.5, epsilon = 1e-15);
        let p = activation(&x, Activation::Softplus);
        assert_relative_eq!(p.data()[1], core::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn pool_constant_field() {
        let x = t(vec![3, 2, 2], vec![0.7; 12]);
        for mode in [
            PoolMode::GlobalAvg,
            PoolMode::GlobalMax,
            PoolMode::ChannelwiseAvg,
            PoolMode::ChannelwiseMax,
        ] {
            let y = pool(&x, mode).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn pool_hand_reductions() {
        let x = t(vec![1, 1, 2], vec![1.0, 3.0]);
        assert_eq!(pool(&x, PoolMode::GlobalAvg).unwrap().data(), &[2.0]);
        assert_eq!(pool(&x, PoolMode::GlobalMax).unwrap().data(), &[3.0]);

        let x = t(vec![2, 1, 1], vec![1.0, 5.0]);
        assert_eq!(pool(&x, PoolMode::ChannelwiseAvg).unwrap().data(), &[3.0]);
        assert_eq!(pool(&x, PoolMode::ChannelwiseMax).unwrap().data(), &[5.0]);
    }

    #[test]
    fn pool_shapes() {
        let x = Tensor::zeros(vec![3, 4, 5]);
        assert_eq!(pool(&x, PoolMode::GlobalAvg).unwrap().shape(), &[3]);
        assert_eq!(pool(&x, PoolMode::ChannelwiseMax).unwrap().shape(), &[1, 4, 5]);
    }

    #[test]
    fn max_pool2_picks_window_max() {
        let x = t(
            vec![1, 2, 4],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        );
        let (y, idx) = max_pool2_with_indices(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[6.0, 8.0]);
        assert_eq!(idx, vec![5, 7]);
    }
}
