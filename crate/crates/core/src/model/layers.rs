//! Convolution, dense and pooling kernels with explicit backward passes.
//!
//! Convolution activations use a channel-major batch layout `[C, N, H, W]`
//! so that a whole batch is one im2col matrix and one GEMM.

use serde::{Deserialize, Serialize};

use crate::linalg::{gemm, Matrix};

/// Activation tensor in `[C, N, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.c, self.n, self.h, self.w)
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the forward output was not positive.
pub fn relu_backward(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Offsets into the flat parameter vector.
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, input: &Act, ho: usize, wo: usize) -> Vec<f64> {
        let np = input.n * ho * wo;
        let mut cols = vec![0.0; self.patch_len() * np];
        let k = self.kernel;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for s in 0..input.n {
                        let plane = &input.data[(ci * input.n + s) * input.h * input.w..][..input.h * input.w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * input.w..][..input.w];
                            let dst_row = &mut dst[(s * ho + oy) * wo..][..wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < input.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut Act, ho: usize, wo: usize) {
        let np = out.n * ho * wo;
        let k = self.kernel;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    for s in 0..out.n {
                        let base = (ci * out.n + s) * out.h * out.w;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= out.h as isize {
                                continue;
                            }
                            let src_row = &src[(s * ho + oy) * wo..][..wo];
                            let dst_row = &mut out.data[base + iy as usize * out.w..][..out.w];
                            for (ox, &v) in src_row.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < out.w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f64], input: &Act) -> Act {
        debug_assert_eq!(input.c, self.cin);
        let (ho, wo) = self.out_dims(input.h, input.w);
        let np = input.n * ho * wo;
        let cols = self.im2col(input, ho, wo);
        let mut out = Act::zeros(self.cout, input.n, ho, wo);
        let bias = &params[self.b..self.b + self.cout];
        for (co, &b) in bias.iter().enumerate() {
            out.data[co * np..(co + 1) * np].fill(b);
        }
        gemm(
            self.cout,
            self.patch_len(),
            np,
            &params[self.w..self.w + self.weight_len()],
            false,
            &cols,
            false,
            &mut out.data,
            1.0,
        );
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        params: &[f64],
        input: &Act,
        grad_out: &Act,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Act> {
        let (ho, wo) = (grad_out.h, grad_out.w);
        let np = input.n * ho * wo;
        let cols = self.im2col(input, ho, wo);
        let ckk = self.patch_len();
        gemm(
            self.cout,
            np,
            ckk,
            &grad_out.data,
            false,
            &cols,
            true,
            &mut grads[self.w..self.w + self.weight_len()],
            1.0,
        );
        for co in 0..self.cout {
            grads[self.b + co] += grad_out.data[co * np..(co + 1) * np].iter().sum::<f64>();
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; ckk * np];
        gemm(
            ckk,
            self.cout,
            np,
            &params[self.w..self.w + self.weight_len()],
            true,
            &grad_out.data,
            false,
            &mut dcols,
            0.0,
        );
        let mut din = input.same_shape();
        self.col2im(&dcols, &mut din, ho, wo);
        Some(din)
    }
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn param_len(&self) -> usize {
        self.inp * self.out + self.out
    }

    pub fn forward(&self, params: &[f64], x: &Matrix) -> Matrix {
        debug_assert_eq!(x.cols, self.inp);
        let mut y = Matrix::zeros(x.rows, self.out);
        let bias = &params[self.b..self.b + self.out];
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(bias);
        }
        gemm(
            x.rows,
            self.inp,
            self.out,
            &x.data,
            false,
            &params[self.w..self.w + self.inp * self.out],
            true,
            &mut y.data,
            1.0,
        );
        y
    }

    pub fn backward(&self, params: &[f64], x: &Matrix, grad_out: &Matrix, grads: &mut [f64]) -> Matrix {
        // dW[out, in] += dYᵀ · X
        gemm(
            self.out,
            x.rows,
            self.inp,
            &grad_out.data,
            true,
            &x.data,
            false,
            &mut grads[self.w..self.w + self.inp * self.out],
            1.0,
        );
        for r in 0..grad_out.rows {
            for (g, &d) in grads[self.b..self.b + self.out].iter_mut().zip(grad_out.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.inp);
        gemm(
            x.rows,
            self.out,
            self.inp,
            &grad_out.data,
            false,
            &params[self.w..self.w + self.inp * self.out],
            false,
            &mut dx.data,
            0.0,
        );
        dx
    }
}

/// Global average pool `[C, N, H, W]` → `N × C`.
pub fn global_avg_pool(x: &Act) -> Matrix {
    let hw = x.h * x.w;
    let mut out = Matrix::zeros(x.n, x.c);
    for c in 0..x.c {
        for s in 0..x.n {
            let plane = &x.data[(c * x.n + s) * hw..][..hw];
            out.data[s * x.c + c] = plane.iter().sum::<f64>() / hw as f64;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Matrix, c: usize, n: usize, h: usize, w: usize) -> Act {
    let hw = h * w;
    let mut out = Act::zeros(c, n, h, w);
    for ch in 0..c {
        for s in 0..n {
            let g = grad.data[s * c + ch] / hw as f64;
            out.data[(ch * n + s) * hw..][..hw].fill(g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, independent of im2col.
    fn conv_naive(conv: &Conv, params: &[f64], x: &Act) -> Act {
        let (ho, wo) = conv.out_dims(x.h, x.w);
        let mut out = Act::zeros(conv.cout, x.n, ho, wo);
        let k = conv.kernel;
        for co in 0..conv.cout {
            for s in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = params[conv.b + co];
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = params[conv.w + ((co * conv.cin + ci) * k + ky) * k + kx];
                                    acc += wv * x.data[((ci * x.n + s) * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        out.data[((co * x.n + s) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (stride, pad, kernel) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
            let conv = Conv {
                cin: 2,
                cout: 3,
                kernel,
                stride,
                pad,
                w: 0,
                b: 2 * 3 * kernel * kernel,
            };
            let params: Vec<f64> = (0..conv.param_len()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let mut x = Act::zeros(2, 2, 5, 4);
            for (i, v) in x.data.iter_mut().enumerate() {
                *v = (i as f64 * 0.7).cos();
            }
            let fast = conv.forward(&params, &x);
            let slow = conv_naive(&conv, &params, &x);
            assert_eq!((fast.h, fast.w), (slow.h, slow.w));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let conv = Conv {
            cin: 2,
            cout: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
            w: 0,
            b: 36,
        };
        let params: Vec<f64> = (0..conv.param_len()).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let mut x = Act::zeros(2, 1, 4, 4);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = (i as f64 * 1.3).sin();
        }
        // loss = Σ out · r with fixed weights r
        let out = conv.forward(&params, &x);
        let r: Vec<f64> = (0..out.data.len()).map(|i| (i as f64 * 0.9).cos()).collect();
        let mut g = out.same_shape();
        g.data.copy_from_slice(&r);
        let mut grads = vec![0.0; params.len()];
        let din = conv.backward(&params, &x, &g, &mut grads, true).unwrap();
        let loss = |x: &Act| conv.forward(&params, x).data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((fd - din.data[i]).abs() < 1e-6, "{i}: {fd} vs {}", din.data[i]);
        }
    }

    #[test]
    fn pool_round_trip_shapes() {
        let mut x = Act::zeros(3, 2, 2, 2);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let p = global_avg_pool(&x);
        assert_eq!((p.rows, p.cols), (2, 3));
        assert_eq!(p.get(0, 0), 1.5);
        let back = global_avg_pool_backward(&Matrix::from_vec(2, 3, vec![4.0; 6]), 3, 2, 2, 2);
        assert!(back.data.iter().all(|&v| v == 1.0));
    }
}
