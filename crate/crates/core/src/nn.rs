//! Small dense building blocks for the discriminators: strided 3D
//! convolution (im2col + GEMM), LeakyReLU, nearest upsampling and average
//! pooling, each with its adjoint. Tensors are channel-major `C x D x H x W`.

use crate::linalg::{gemm, View};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvShape {
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Weight tensor shape `[out_ch, in_ch * kd * kh * kw]`.
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch * self.kernel_volume()]
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (d[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Walks every (column row, output position, input index) triple of the
/// im2col matrix, skipping padded taps.
fn for_each_tap(s: &ConvShape, d: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let o = s.out_dims(d);
    let p = vol(o);
    let [kd, kh, kw] = s.kernel;
    for c in 0..s.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    for oz in 0..o[0] {
                        let iz = (oz * s.stride[0] + a) as isize - s.pad[0] as isize;
                        if iz < 0 || iz >= d[0] as isize {
                            continue;
                        }
                        for oy in 0..o[1] {
                            let iy = (oy * s.stride[1] + b) as isize - s.pad[1] as isize;
                            if iy < 0 || iy >= d[1] as isize {
                                continue;
                            }
                            for ox in 0..o[2] {
                                let ix = (ox * s.stride[2] + e) as isize - s.pad[2] as isize;
                                if ix < 0 || ix >= d[2] as isize {
                                    continue;
                                }
                                let col = (oz * o[1] + oy) * o[2] + ox;
                                let src = ((c * d[0] + iz as usize) * d[1] + iy as usize) * d[2] + ix as usize;
                                f(row * p + col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col(s: &ConvShape, input: &[f64], d: [usize; 3]) -> Vec<f64> {
    let p = vol(s.out_dims(d));
    let mut cols = vec![0.0; s.in_ch * s.kernel_volume() * p];
    for_each_tap(s, d, |dst, src| cols[dst] = input[src]);
    cols
}

fn col2im(s: &ConvShape, cols: &[f64], d: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; s.in_ch * vol(d)];
    for_each_tap(s, d, |dst, src| out[src] += cols[dst]);
    out
}

/// Returns the output (`out_ch x P`) and the im2col matrix for backward.
pub fn conv_forward(s: &ConvShape, weight: &[f64], bias: &[f64], input: &[f64], d: [usize; 3]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(input.len(), s.in_ch * vol(d), "conv input size");
    let p = vol(s.out_dims(d));
    let k = s.in_ch * s.kernel_volume();
    let cols = im2col(s, input, d);
    let mut out = vec![0.0; s.out_ch * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    gemm(s.out_ch, k, p, 1.0, View::row_major(weight, k), View::row_major(&cols, p), 1.0, &mut out);
    (out, cols)
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    s: &ConvShape,
    weight: &[f64],
    cols: &[f64],
    d: [usize; 3],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let p = vol(s.out_dims(d));
    let k = s.in_ch * s.kernel_volume();
    for (o, row) in d_out.chunks(p).enumerate() {
        d_bias[o] += row.iter().sum::<f64>();
    }
    gemm(s.out_ch, p, k, 1.0, View::row_major(d_out, p), View::transposed(cols, p), 1.0, d_weight);
    want_input.then(|| {
        let mut dcols = vec![0.0; k * p];
        gemm(k, s.out_ch, p, 1.0, View::transposed(weight, k), View::row_major(d_out, p), 0.0, &mut dcols);
        col2im(s, &dcols, d)
    })
}

pub fn leaky_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect()
}

/// Gradient through LeakyReLU given the pre-activation.
pub fn leaky_relu_backward(pre: &[f64], d_out: &[f64]) -> Vec<f64> {
    pre.iter().zip(d_out).map(|(&p, &g)| if p > 0.0 { g } else { LEAKY_SLOPE * g }).collect()
}

/// Nearest-neighbour upsampling by `factor` per axis.
pub fn upsample(x: &[f64], ch: usize, d: [usize; 3], factor: [usize; 3]) -> Vec<f64> {
    let o = [d[0] * factor[0], d[1] * factor[1], d[2] * factor[2]];
    let mut out = vec![0.0; ch * vol(o)];
    for c in 0..ch {
        for z in 0..o[0] {
            for y in 0..o[1] {
                for xx in 0..o[2] {
                    let src = ((c * d[0] + z / factor[0]) * d[1] + y / factor[1]) * d[2] + xx / factor[2];
                    out[((c * o[0] + z) * o[1] + y) * o[2] + xx] = x[src];
                }
            }
        }
    }
    out
}

pub fn upsample_backward(g: &[f64], ch: usize, d: [usize; 3], factor: [usize; 3]) -> Vec<f64> {
    let o = [d[0] * factor[0], d[1] * factor[1], d[2] * factor[2]];
    let mut out = vec![0.0; ch * vol(d)];
    for c in 0..ch {
        for z in 0..o[0] {
            for y in 0..o[1] {
                for xx in 0..o[2] {
                    let dst = ((c * d[0] + z / factor[0]) * d[1] + y / factor[1]) * d[2] + xx / factor[2];
                    out[dst] += g[((c * o[0] + z) * o[1] + y) * o[2] + xx];
                }
            }
        }
    }
    out
}

/// Average pooling with window = stride = `factor`; trailing remainders are dropped.
pub fn avg_pool(x: &[f64], ch: usize, d: [usize; 3], factor: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let o = [d[0] / factor[0], d[1] / factor[1], d[2] / factor[2]];
    let norm = 1.0 / (factor[0] * factor[1] * factor[2]) as f64;
    let mut out = vec![0.0; ch * vol(o)];
    for c in 0..ch {
        for z in 0..o[0] * factor[0] {
            for y in 0..o[1] * factor[1] {
                for xx in 0..o[2] * factor[2] {
                    let dst = ((c * o[0] + z / factor[0]) * o[1] + y / factor[1]) * o[2] + xx / factor[2];
                    out[dst] += norm * x[((c * d[0] + z) * d[1] + y) * d[2] + xx];
                }
            }
        }
    }
    (out, o)
}

pub fn avg_pool_backward(g: &[f64], ch: usize, d: [usize; 3], factor: [usize; 3]) -> Vec<f64> {
    let o = [d[0] / factor[0], d[1] / factor[1], d[2] / factor[2]];
    let norm = 1.0 / (factor[0] * factor[1] * factor[2]) as f64;
    let mut out = vec![0.0; ch * vol(d)];
    for c in 0..ch {
        for z in 0..o[0] * factor[0] {
            for y in 0..o[1] * factor[1] {
                for xx in 0..o[2] * factor[2] {
                    let src = ((c * o[0] + z / factor[0]) * o[1] + y / factor[1]) * o[2] + xx / factor[2];
                    out[((c * d[0] + z) * d[1] + y) * d[2] + xx] = norm * g[src];
                }
            }
        }
    }
    out
}
