//! Conditional density field.
//!
//! A shape encoder (fully connected, ReLU) maps the encoded position and the
//! shape code to a hidden feature `h`; a one-hidden-layer density head maps
//! `h`, the encoded view direction and the appearance code to a density that
//! passes through softplus. The appearance code and view direction never
//! enter the shape encoder.
//!
//! Forward and backward passes are written out by hand over batches of
//! samples that share one view direction and one latent pair, which is the
//! shape of every rendering call.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::linalg::{gemm, View};
use crate::params::{ParamSet, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSpec {
    pub freq_count_x: usize,
    pub freq_count_xi: usize,
    pub include_raw_input: bool,
}

impl Default for EncodingSpec {
    fn default() -> Self {
        Self { freq_count_x: 10, freq_count_xi: 4, include_raw_input: true }
    }
}

pub fn encoded_dim(input_dim: usize, freq_count: usize, include_raw: bool) -> usize {
    input_dim * (2 * freq_count + include_raw as usize)
}

/// Sinusoidal encoding, component by component:
/// `[p,] sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)`.
pub fn positional_encode(values: &[f64], freq_count: usize, include_raw: bool) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(encoded_dim(values.len(), freq_count, include_raw));
    encode_into(values, freq_count, include_raw, &mut out)?;
    Ok(out)
}

fn encode_into(values: &[f64], freq_count: usize, include_raw: bool, out: &mut Vec<f64>) -> Result<()> {
    for &p in values {
        if !p.is_finite() {
            return Err(Error::data(format!("non-finite value {p} passed to positional encoding")));
        }
        if include_raw {
            out.push(p);
        }
        let mut f = PI;
        for _ in 0..freq_count {
            let (s, c) = (f * p).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldArch {
    pub encoding: EncodingSpec,
    pub hidden_width: usize,
    /// Number of fully connected layers in the shape encoder.
    pub shape_layers: usize,
    pub latent_shape_dim: usize,
    pub latent_app_dim: usize,
    /// Feed the encoded view direction to the density head.
    pub use_view_input: bool,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            encoding: EncodingSpec::default(),
            hidden_width: 256,
            shape_layers: 8,
            latent_shape_dim: 128,
            latent_app_dim: 128,
            use_view_input: true,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.shape_layers == 0 {
            return Err(Error::config("field needs a positive width and at least one shape layer"));
        }
        if self.latent_shape_dim == 0 || self.latent_app_dim == 0 {
            return Err(Error::config("latent dimensions must be at least 1"));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_dim(3, self.encoding.freq_count_x, self.encoding.include_raw_input)
    }

    pub fn view_dim(&self) -> usize {
        if self.use_view_input {
            encoded_dim(2, self.encoding.freq_count_xi, self.encoding.include_raw_input)
        } else {
            0
        }
    }

    fn head_input_dim(&self) -> usize {
        self.hidden_width + self.view_dim() + self.latent_app_dim
    }
}

/// Shape code `z_sh` and appearance code `z_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes {
    pub z_shape: Vec<f64>,
    pub z_appearance: Vec<f64>,
}

impl LatentCodes {
    pub fn zeros(m_sh: usize, m_a: usize) -> Self {
        Self { z_shape: vec![0.0; m_sh], z_appearance: vec![0.0; m_a] }
    }

    pub fn is_finite(&self) -> bool {
        self.z_shape.iter().chain(&self.z_appearance).all(|v| v.is_finite())
    }
}

/// Draws i.i.d. standard normal codes.
pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, m_sh: usize, m_a: usize) -> Result<LatentCodes> {
    if m_sh == 0 || m_a == 0 {
        return Err(Error::config("latent dimensions must be at least 1"));
    }
    let mut draw = |n: usize| (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect::<Vec<f64>>();
    let z_shape = draw(m_sh);
    let z_appearance = draw(m_a);
    Ok(LatentCodes { z_shape, z_appearance })
}

/// Network weights. Tensor order: shape layers (`w`, `b`) in sequence, then
/// head hidden (`w`, `b`), then head output (`w`, `b`).
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub arch: FieldArch,
    pub weights: ParamSet,
    version: u64,
}

// Process-wide so a cache can never validate against an unrelated instance.
static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Equality ignores the cache-invalidation counter.
impl PartialEq for FieldParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.weights == other.weights
    }
}

impl FieldParams {
    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let w = arch.hidden_width;
        let mut tensors = Vec::new();
        for l in 0..arch.shape_layers {
            let fan_in = if l == 0 { arch.position_dim() + arch.latent_shape_dim } else { w };
            tensors.push(ParamTensor::zeros(format!("shape.{l}.weight"), vec![w, fan_in]));
            tensors.push(ParamTensor::zeros(format!("shape.{l}.bias"), vec![w]));
        }
        tensors.push(ParamTensor::zeros("head.hidden.weight", vec![w, arch.head_input_dim()]));
        tensors.push(ParamTensor::zeros("head.hidden.bias", vec![w]));
        tensors.push(ParamTensor::zeros("head.out.weight", vec![1, w]));
        tensors.push(ParamTensor::zeros("head.out.bias", vec![1]));
        Ok(Self { arch, weights: ParamSet::new(tensors), version: next_version() })
    }

    pub fn from_weights(arch: FieldArch, weights: ParamSet) -> Result<Self> {
        let template = Self::zeros(arch)?;
        if !template.weights.same_layout(&weights) {
            return Err(Error::config("field weights do not match the architecture"));
        }
        Ok(Self { arch, weights, version: next_version() })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access; invalidates caches from earlier forward passes.
    pub fn weights_mut(&mut self) -> &mut ParamSet {
        self.version = next_version();
        &mut self.weights
    }

    fn shape_w(&self, l: usize) -> &[f64] {
        &self.weights.tensors[2 * l].data
    }

    fn shape_b(&self, l: usize) -> &[f64] {
        &self.weights.tensors[2 * l + 1].data
    }

    fn head_idx(&self) -> usize {
        2 * self.arch.shape_layers
    }
}

/// Fan-in scaled uniform initialization: weights in `+-sqrt(6 / fan_in)`,
/// biases zero.
pub fn init_params<R: Rng + ?Sized>(rng: &mut R, arch: FieldArch) -> Result<FieldParams> {
    let mut p = FieldParams::zeros(arch)?;
    for t in p.weights.tensors.iter_mut().filter(|t| t.name.ends_with("weight")) {
        let bound = (6.0 / t.shape[1] as f64).sqrt();
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
    Ok(p)
}

/// Maps a world position into `[-1, 1]^3` and encodes it.
pub fn encode_position(arch: &FieldArch, position: Vec3, half_extent: f64) -> Result<Vec<f64>> {
    let p = position.map(|c| c / half_extent);
    positional_encode(&p, arch.encoding.freq_count_x, arch.encoding.include_raw_input)
}

/// Row-major `N x position_dim` encoding of many positions.
pub fn encode_positions(arch: &FieldArch, positions: &[Vec3], half_extent: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(positions.len() * arch.position_dim());
    for p in positions {
        encode_into(&p.map(|c| c / half_extent), arch.encoding.freq_count_x, arch.encoding.include_raw_input, &mut out)?;
    }
    Ok(out)
}

/// Encodes a pose with both angles mapped into `[-1, 1]`.
pub fn encode_view(arch: &FieldArch, pose: Pose) -> Result<Vec<f64>> {
    if !arch.use_view_input {
        return Ok(Vec::new());
    }
    let xi = [pose.theta / PI - 1.0, pose.phi / FRAC_PI_2];
    positional_encode(&xi, arch.encoding.freq_count_xi, arch.encoding.include_raw_input)
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct FieldCache {
    version: u64,
    n: usize,
    enc_x: Vec<f64>,
    shape_pre: Vec<Vec<f64>>,
    shape_act: Vec<Vec<f64>>,
    head_pre: Vec<f64>,
    head_act: Vec<f64>,
    out_pre: Vec<f64>,
    head_extra: Vec<f64>,
    z_shape: Vec<f64>,
}

impl FieldCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Gradients of a scalar objective w.r.t. everything the field consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub params: ParamSet,
    pub z_shape: Vec<f64>,
    pub z_appearance: Vec<f64>,
    /// Row-major `N x position_dim`, filled only when requested.
    pub enc_x: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(params: &FieldParams) -> Self {
        Self {
            params: params.weights.zeros_like(),
            z_shape: vec![0.0; params.arch.latent_shape_dim],
            z_appearance: vec![0.0; params.arch.latent_app_dim],
            enc_x: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardOptions {
    pub param_grads: bool,
    pub input_grads: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { param_grads: true, input_grads: false }
    }
}

fn check_inputs(params: &FieldParams, n: usize, enc_x: &[f64], enc_xi: &[f64], codes: &LatentCodes) -> Result<()> {
    let a = &params.arch;
    if enc_x.len() != n * a.position_dim() {
        return Err(Error::config(format!(
            "encoded positions hold {} values, expected {} x {}",
            enc_x.len(),
            n,
            a.position_dim()
        )));
    }
    if enc_xi.len() != a.view_dim() {
        return Err(Error::config(format!("encoded view has {} values, expected {}", enc_xi.len(), a.view_dim())));
    }
    if codes.z_shape.len() != a.latent_shape_dim || codes.z_appearance.len() != a.latent_app_dim {
        return Err(Error::config("latent code dimensions do not match the field"));
    }
    Ok(())
}

/// Densities for `N` encoded positions sharing one view and one latent pair.
pub fn field_forward_batch(
    params: &FieldParams,
    enc_x: &[f64],
    enc_xi: &[f64],
    codes: &LatentCodes,
) -> Result<(Vec<f64>, FieldCache)> {
    let a = params.arch;
    let dx = a.position_dim();
    let n = if dx == 0 { 0 } else { enc_x.len() / dx };
    check_inputs(params, n, enc_x, enc_xi, codes)?;
    let w = a.hidden_width;

    let mut shape_pre = Vec::with_capacity(a.shape_layers);
    let mut shape_act: Vec<Vec<f64>> = Vec::with_capacity(a.shape_layers);
    for l in 0..a.shape_layers {
        let wt = params.shape_w(l);
        let b = params.shape_b(l);
        let fan_in = if l == 0 { dx + a.latent_shape_dim } else { w };
        // Per-call constant row: bias plus the latent contribution on layer 0.
        let mut row = b.to_vec();
        if l == 0 {
            for (j, r) in row.iter_mut().enumerate() {
                let wrow = &wt[j * fan_in + dx..(j + 1) * fan_in];
                *r += wrow.iter().zip(&codes.z_shape).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let mut z = Vec::with_capacity(n * w);
        for _ in 0..n {
            z.extend_from_slice(&row);
        }
        if l == 0 {
            gemm(n, dx, w, 1.0, View::row_major(enc_x, dx), View::transposed(wt, fan_in), 1.0, &mut z);
        } else {
            gemm(n, w, w, 1.0, View::row_major(&shape_act[l - 1], w), View::transposed(wt, fan_in), 1.0, &mut z);
        }
        let act: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        shape_pre.push(z);
        shape_act.push(act);
    }

    let h = params.head_idx();
    let hw = &params.weights.tensors[h].data;
    let hb = &params.weights.tensors[h + 1].data;
    let fan_in = a.head_input_dim();
    let mut head_extra = enc_xi.to_vec();
    head_extra.extend_from_slice(&codes.z_appearance);
    let mut head_const = hb.to_vec();
    for (j, r) in head_const.iter_mut().enumerate() {
        let wrow = &hw[j * fan_in + w..(j + 1) * fan_in];
        *r += wrow.iter().zip(&head_extra).map(|(x, y)| x * y).sum::<f64>();
    }
    let mut head_pre = Vec::with_capacity(n * w);
    for _ in 0..n {
        head_pre.extend_from_slice(&head_const);
    }
    gemm(n, w, w, 1.0, View::row_major(&shape_act[a.shape_layers - 1], w), View::transposed(hw, fan_in), 1.0, &mut head_pre);
    let head_act: Vec<f64> = head_pre.iter().map(|&v| v.max(0.0)).collect();

    let ow = &params.weights.tensors[h + 2].data;
    let ob = params.weights.tensors[h + 3].data[0];
    let out_pre: Vec<f64> = head_act
        .chunks_exact(w)
        .map(|row| ob + row.iter().zip(ow).map(|(x, y)| x * y).sum::<f64>())
        .collect();
    let density = out_pre.iter().map(|&z| softplus(z)).collect();

    Ok((
        density,
        FieldCache {
            version: params.version,
            n,
            enc_x: enc_x.to_vec(),
            shape_pre,
            shape_act,
            head_pre,
            head_act,
            out_pre,
            head_extra,
            z_shape: codes.z_shape.clone(),
        },
    ))
}

/// Single-sample forward pass.
pub fn field_forward(
    params: &FieldParams,
    enc_x: &[f64],
    enc_xi: &[f64],
    codes: &LatentCodes,
) -> Result<(f64, FieldCache)> {
    if enc_x.len() != params.arch.position_dim() {
        return Err(Error::config("encoded position has the wrong length"));
    }
    let (d, cache) = field_forward_batch(params, enc_x, enc_xi, codes)?;
    Ok((d[0], cache))
}

/// Accumulates into `grads` the gradient of `sum_i upstream[i] * density[i]`.
pub fn field_backward(
    params: &FieldParams,
    cache: &FieldCache,
    upstream: &[f64],
    opts: BackwardOptions,
    grads: &mut FieldGrads,
) -> Result<()> {
    if cache.version != params.version {
        return Err(Error::Usage("field cache is stale: parameters changed since the forward pass".into()));
    }
    if upstream.len() != cache.n {
        return Err(Error::Usage(format!("upstream has {} entries for {} samples", upstream.len(), cache.n)));
    }
    if !params.weights.same_layout(&grads.params) {
        return Err(Error::Usage("gradient buffer does not match the field layout".into()));
    }
    let a = params.arch;
    let n = cache.n;
    let w = a.hidden_width;
    let dx = a.position_dim();
    let h = params.head_idx();

    // Output softplus.
    let d_out: Vec<f64> = upstream.iter().zip(&cache.out_pre).map(|(g, &z)| g * sigmoid(z)).collect();
    let ow = params.weights.tensors[h + 2].data.clone();
    if opts.param_grads {
        let gw = &mut grads.params.tensors[h + 2].data;
        for (row, &g) in cache.head_act.chunks_exact(w).zip(&d_out) {
            gw.iter_mut().zip(row).for_each(|(acc, x)| *acc += g * x);
        }
        grads.params.tensors[h + 3].data[0] += d_out.iter().sum::<f64>();
    }

    // Head hidden layer.
    let mut d_head = Vec::with_capacity(n * w);
    for (i, &g) in d_out.iter().enumerate() {
        for j in 0..w {
            let pre = cache.head_pre[i * w + j];
            d_head.push(if pre > 0.0 { g * ow[j] } else { 0.0 });
        }
    }
    let head_fan = a.head_input_dim();
    let hw = &params.weights.tensors[h].data;
    let col_sum = column_sums(&d_head, w);
    if opts.param_grads {
        let last = &cache.shape_act[a.shape_layers - 1];
        let gw = &mut grads.params.tensors[h].data;
        // dW[:, :w] += d_head^T * last
        gemm_into_strided(w, n, w, &d_head, last, gw, head_fan);
        for j in 0..w {
            for (e, &x) in cache.head_extra.iter().enumerate() {
                gw[j * head_fan + w + e] += col_sum[j] * x;
            }
        }
        grads.params.tensors[h + 1].data.iter_mut().zip(&col_sum).for_each(|(acc, g)| *acc += g);
    }
    let za_off = w + a.view_dim();
    for (e, acc) in grads.z_appearance.iter_mut().enumerate() {
        *acc += (0..w).map(|j| hw[j * head_fan + za_off + e] * col_sum[j]).sum::<f64>();
    }
    let mut d_act = vec![0.0; n * w];
    gemm(n, w, w, 1.0, View::row_major(&d_head, w), View::row_major(hw, head_fan), 0.0, &mut d_act);

    // Shape encoder, top to bottom.
    for l in (0..a.shape_layers).rev() {
        let pre = &cache.shape_pre[l];
        let d_z: Vec<f64> = d_act.iter().zip(pre).map(|(g, &z)| if z > 0.0 { *g } else { 0.0 }).collect();
        let wt = params.shape_w(l);
        let fan_in = if l == 0 { dx + a.latent_shape_dim } else { w };
        let col_sum = column_sums(&d_z, w);
        if opts.param_grads {
            let gw = &mut grads.params.tensors[2 * l].data;
            if l == 0 {
                gemm_into_strided(w, n, dx, &d_z, &cache.enc_x, gw, fan_in);
                for j in 0..w {
                    for (e, &x) in cache.z_shape.iter().enumerate() {
                        gw[j * fan_in + dx + e] += col_sum[j] * x;
                    }
                }
            } else {
                gemm_into_strided(w, n, w, &d_z, &cache.shape_act[l - 1], gw, fan_in);
            }
            grads.params.tensors[2 * l + 1].data.iter_mut().zip(&col_sum).for_each(|(acc, g)| *acc += g);
        }
        if l == 0 {
            for (e, acc) in grads.z_shape.iter_mut().enumerate() {
                *acc += (0..w).map(|j| wt[j * fan_in + dx + e] * col_sum[j]).sum::<f64>();
            }
            if opts.input_grads {
                let mut d_in = vec![0.0; n * dx];
                gemm(n, w, dx, 1.0, View::row_major(&d_z, w), View::row_major(wt, fan_in), 0.0, &mut d_in);
                if grads.enc_x.len() == d_in.len() {
                    grads.enc_x.iter_mut().zip(&d_in).for_each(|(acc, g)| *acc += g);
                } else {
                    grads.enc_x = d_in;
                }
            }
        } else {
            let mut next = vec![0.0; n * w];
            gemm(n, w, w, 1.0, View::row_major(&d_z, w), View::row_major(wt, fan_in), 0.0, &mut next);
            d_act = next;
        }
    }
    Ok(())
}

fn column_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in m.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
    }
    s
}

/// `out[:, :k] += d^T (rows x n) * x (n x k)` where `out` is row-major with
/// row stride `out_stride`.
fn gemm_into_strided(rows: usize, n: usize, k: usize, d: &[f64], x: &[f64], out: &mut [f64], out_stride: usize) {
    if out_stride == k {
        gemm(rows, n, k, 1.0, View::transposed(d, rows), View::row_major(x, k), 1.0, out);
    } else {
        let mut tmp = vec![0.0; rows * k];
        gemm(rows, n, k, 1.0, View::transposed(d, rows), View::row_major(x, k), 0.0, &mut tmp);
        for r in 0..rows {
            out[r * out_stride..r * out_stride + k]
                .iter_mut()
                .zip(&tmp[r * k..(r + 1) * k])
                .for_each(|(acc, v)| *acc += v);
        }
    }
}
