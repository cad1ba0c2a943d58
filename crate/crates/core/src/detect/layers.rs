//! Convolution and dense layers with hand-written backward passes.

use crate::tensor::Tensor;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
fn out_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k { ((in_len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// 2D cross-correlation. `input` is `[Cin, H, W]`, `weight` is `[Cout, Cin, K, K]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    debug_assert_eq!(weight.shape()[1], cin);
    let (oh, ow) = (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad));
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let x = input.data();
    let wt = weight.data();
    let o = out.data_mut();
    for co in 0..cout {
        let plane = &mut o[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = out_range(ky, pad, stride, h, oh);
                for kx in 0..k {
                    let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = out_range(kx, pad, stride, w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Returns `(grad_input, grad_weight, grad_bias)`;
/// `grad_input` is skipped when `need_input_grad` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    for co in 0..cout {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        gb.data_mut()[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = out_range(ky, pad, stride, h, oh);
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = out_range(kx, pad, stride, w, ow);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let row = &xin[iy * w..(iy + 1) * w];
                        for ox in ox0..ox1 {
                            acc += grow[ox] * row[ox * stride + kx - pad];
                        }
                        if let Some(gx) = gx.as_mut() {
                            let gxrow = &mut gx.data_mut()[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                            for ox in ox0..ox1 {
                                gxrow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                    gw.data_mut()[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_in_place(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `weight` is `[out, in]`.
pub fn linear_forward(input: &[f64], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    debug_assert_eq!(input.len(), n_in);
    let w = weight.data();
    (0..n_out)
        .map(|o| bias.data()[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward(input: &[f64], weight: &Tensor, grad_out: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = weight.shape()[1];
    let w = weight.data();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * input[i];
            gx[i] += g * row[i];
        }
    }
    gx
}
