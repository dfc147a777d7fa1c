//! Auto-encoded discriminators, the perceptual distance plug-in, hinge
//! losses, the fixed flip/rotation augmentation family and the per-transform
//! loss combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::nn::{
    avg_pool, avg_pool_backward, conv_backward, conv_forward, leaky_relu, leaky_relu_backward, upsample,
    upsample_backward, ConvShape,
};
use crate::params::{ParamSet, ParamTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight shared by the non-identity transforms.
    pub lambda1: f64,
    /// Weight of the patch terms relative to the sub-volume terms.
    pub lambda2: f64,
    /// Number of transforms, identity included.
    pub n_aug: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.2, lambda2: 0.5, n_aug: 4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::config("loss weights must be positive and finite"));
        }
        if !(1..=4).contains(&self.n_aug) {
            return Err(Error::config("n_aug must lie in 1..=4"));
        }
        Ok(())
    }

    /// Coefficient of transform `k` in the combined objective.
    pub fn transform_coefficient(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.lambda1 / (self.n_aug - 1) as f64
        }
    }
}

/// `f(t) = max(0, 1 + t)`.
pub fn hinge(t: f64) -> f64 {
    (1.0 + t).max(0.0)
}

/// Derivative of [`hinge`]; 0 at the kink.
pub fn hinge_slope(t: f64) -> f64 {
    if 1.0 + t > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn hinge_loss_discriminator(logit_fake: f64, logit_real: f64) -> f64 {
    hinge(logit_fake) + hinge(-logit_real)
}

pub fn hinge_loss_generator(logit_fake: f64) -> f64 {
    -logit_fake
}

/// Sub-volume and patch terms of one transform combined with `lambda2`.
pub fn transform_loss(volume_recon: f64, volume_hinge: f64, patch_recon: f64, patch_hinge: f64, w: &LossWeights) -> f64 {
    volume_recon + volume_hinge + w.lambda2 * (patch_recon + patch_hinge)
}

/// Identity-transform loss plus `lambda1 / (n - 1)` times the rest.
pub fn combined_loss(per_transform: &[f64], w: &LossWeights) -> Result<f64> {
    if per_transform.len() != w.n_aug {
        return Err(Error::Usage(format!("{} transform losses for n_aug = {}", per_transform.len(), w.n_aug)));
    }
    Ok(per_transform.iter().enumerate().map(|(k, l)| w.transform_coefficient(k) * l).sum())
}

/// Source index for each output element of transform `k` over the trailing
/// `H x W` cross-section: 0 identity, 1 horizontal flip, 2 quarter turn,
/// 3 flip then quarter turn.
fn dag_source_map(dims: [usize; 3], k: usize) -> Result<Vec<usize>> {
    let [d, h, w] = dims;
    if k >= 4 {
        return Err(Error::Usage(format!("augmentation index {k} out of range")));
    }
    if k >= 2 && h != w {
        return Err(Error::Usage("rotations need a square cross-section".into()));
    }
    let mut map = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                // out(y, x) = in(src_y, src_x)
                let (sy, sx) = match k {
                    0 => (y, x),
                    1 => (y, w - 1 - x),
                    // quarter turn: out(y, x) = in(x, n-1-y)
                    2 => (x, w - 1 - y),
                    // quarter turn of the flip collapses to a transpose
                    _ => (x, y),
                };
                map.push((z * h + sy) * w + sx);
            }
        }
    }
    Ok(map)
}

pub fn dag_augment(sample: &Grid3, k: usize, n_aug: usize) -> Result<Grid3> {
    if k >= n_aug {
        return Err(Error::Usage(format!("augmentation index {k} not below n_aug = {n_aug}")));
    }
    let map = dag_source_map(sample.dims, k)?;
    Ok(Grid3::from_vec(sample.dims, map.iter().map(|&i| sample.data[i]).collect()))
}

/// Pulls a gradient on the augmented sample back to the original sample.
pub fn dag_adjoint(grad: &Grid3, k: usize, n_aug: usize) -> Result<Grid3> {
    if k >= n_aug {
        return Err(Error::Usage(format!("augmentation index {k} not below n_aug = {n_aug}")));
    }
    let map = dag_source_map(grad.dims, k)?;
    let mut out = Grid3::zeros(grad.dims);
    for (o, &i) in map.iter().enumerate() {
        out.data[i] += grad.data[o];
    }
    Ok(out)
}

/// Interchangeable distance between equally shaped tensors. Implementations
/// must be nonnegative, zero on equal inputs and symmetric.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    /// Distance and its gradient with respect to `a`.
    fn distance_grad(&self, a: &Grid3, b: &Grid3) -> Result<(f64, Grid3)>;

    fn distance(&self, a: &Grid3, b: &Grid3) -> Result<f64> {
        Ok(self.distance_grad(a, b)?.0)
    }
}

/// Mean over dyadic scales of the summed squared mismatch of forward
/// differences along every non-singleton axis. Blind to constant offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientDifference {
    pub scales: usize,
}

impl Default for GradientDifference {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

fn pool_factor(d: [usize; 3]) -> [usize; 3] {
    d.map(|n| if n >= 2 { 2 } else { 1 })
}

fn strides(d: [usize; 3]) -> [usize; 3] {
    [d[1] * d[2], d[2], 1]
}

/// Sum of squared forward differences of `e` and its gradient.
fn diff_energy(e: &[f64], d: [usize; 3]) -> (f64, Vec<f64>) {
    let st = strides(d);
    let mut total = 0.0;
    let mut g = vec![0.0; e.len()];
    for axis in 0..3 {
        if d[axis] < 2 {
            continue;
        }
        for i in 0..e.len() {
            let coord = (i / st[axis]) % d[axis];
            if coord + 1 < d[axis] {
                let j = i + st[axis];
                let diff = e[j] - e[i];
                total += diff * diff;
                g[j] += 2.0 * diff;
                g[i] -= 2.0 * diff;
            }
        }
    }
    (total, g)
}

impl PerceptualMetric for GradientDifference {
    fn name(&self) -> &str {
        "gradient-difference"
    }

    fn distance_grad(&self, a: &Grid3, b: &Grid3) -> Result<(f64, Grid3)> {
        if a.dims != b.dims {
            return Err(Error::Usage(format!("perceptual inputs differ in shape: {:?} vs {:?}", a.dims, b.dims)));
        }
        let scales = self.scales.max(1);
        let mut levels = vec![(a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect::<Vec<_>>(), a.dims)];
        for _ in 1..scales {
            let (e, d) = levels.last().unwrap();
            let (p, pd) = avg_pool(e, 1, *d, pool_factor(*d));
            levels.push((p, pd));
        }
        let norm = 1.0 / scales as f64;
        let mut value = 0.0;
        let mut carry: Option<Vec<f64>> = None;
        for s in (0..levels.len()).rev() {
            let (e, d) = &levels[s];
            let (v, mut g) = diff_energy(e, *d);
            value += norm * v;
            g.iter_mut().for_each(|x| *x *= norm);
            if let Some(c) = carry.take() {
                let back = avg_pool_backward(&c, 1, *d, pool_factor(*d));
                g.iter_mut().zip(back).for_each(|(x, y)| *x += y);
            }
            carry = Some(g);
        }
        Ok((value, Grid3::from_vec(a.dims, carry.unwrap())))
    }
}

/// Metric distance normalized by the feature-space volume `whd`.
pub fn perceptual_loss(metric: &dyn PerceptualMetric, decoded: &Grid3, truth: &Grid3, whd: f64) -> Result<f64> {
    Ok(perceptual_loss_grad(metric, decoded, truth, whd)?.0)
}

/// As [`perceptual_loss`], with the gradient with respect to `decoded`.
pub fn perceptual_loss_grad(
    metric: &dyn PerceptualMetric,
    decoded: &Grid3,
    truth: &Grid3,
    whd: f64,
) -> Result<(f64, Grid3)> {
    if !(whd > 0.0) {
        return Err(Error::Usage("perceptual normalizer must be positive".into()));
    }
    let (v, mut g) = metric.distance_grad(decoded, truth)?;
    g.data.iter_mut().for_each(|x| *x /= whd);
    Ok((v / whd, g))
}

/// Whether a discriminator sees sub-volumes or single-slice patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleKind {
    Volume,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub kind: SampleKind,
    /// Channels of the three encoder stages.
    pub channels: [usize; 3],
}

impl DiscriminatorArch {
    pub fn new(kind: SampleKind) -> Self {
        Self { kind, channels: [16, 32, 64] }
    }

    fn kernel(&self) -> [usize; 3] {
        match self.kind {
            SampleKind::Volume => [3, 3, 3],
            SampleKind::Image => [1, 3, 3],
        }
    }

    fn factor(&self) -> [usize; 3] {
        match self.kind {
            SampleKind::Volume => [2, 2, 2],
            SampleKind::Image => [1, 2, 2],
        }
    }

    fn pad(&self) -> [usize; 3] {
        self.kernel().map(|k| k / 2)
    }

    fn encoder(&self, stage: usize) -> ConvShape {
        let in_ch = if stage == 0 { 1 } else { self.channels[stage - 1] };
        ConvShape { in_ch, out_ch: self.channels[stage], kernel: self.kernel(), stride: self.factor(), pad: self.pad() }
    }

    fn decoder(&self, layer: usize) -> ConvShape {
        let (in_ch, out_ch) = if layer == 0 { (self.channels[1], self.channels[0]) } else { (self.channels[0], 1) };
        ConvShape { in_ch, out_ch, kernel: self.kernel(), stride: [1, 1, 1], pad: self.pad() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("discriminator channels must be positive"));
        }
        Ok(())
    }

    /// Checks that a sample can pass through the encoder and decoder.
    pub fn check_sample(&self, dims: [usize; 3]) -> Result<()> {
        let f = self.factor();
        for a in 0..3 {
            if f[a] > 1 && (dims[a] == 0 || dims[a] % 4 != 0) {
                return Err(Error::Usage(format!(
                    "{:?} discriminator needs dims divisible by 4 on pooled axes, got {dims:?}",
                    self.kind
                )));
            }
        }
        if self.kind == SampleKind::Image && dims[0] != 1 {
            return Err(Error::Usage(format!("image discriminator expects depth 1, got {dims:?}")));
        }
        Ok(())
    }

    /// Shape of the reconstruction target for an input of `dims`.
    pub fn target_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let f = self.factor();
        [dims[0] / f[0], dims[1] / f[1], dims[2] / f[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub arch: DiscriminatorArch,
    pub weights: ParamSet,
}

const ENC: [&str; 3] = ["enc.0", "enc.1", "enc.2"];
const DEC: [&str; 2] = ["dec.0", "dec.1"];

impl DiscriminatorParams {
    pub fn zeros(arch: DiscriminatorArch) -> Result<Self> {
        arch.validate()?;
        let mut t = Vec::new();
        for (s, name) in ENC.iter().enumerate() {
            let c = arch.encoder(s);
            t.push(ParamTensor::zeros(format!("{name}.weight"), c.weight_shape()));
            t.push(ParamTensor::zeros(format!("{name}.bias"), vec![c.out_ch]));
        }
        t.push(ParamTensor::zeros("logit.weight", vec![1, arch.channels[2]]));
        t.push(ParamTensor::zeros("logit.bias", vec![1]));
        for (l, name) in DEC.iter().enumerate() {
            let c = arch.decoder(l);
            t.push(ParamTensor::zeros(format!("{name}.weight"), c.weight_shape()));
            t.push(ParamTensor::zeros(format!("{name}.bias"), vec![c.out_ch]));
        }
        Ok(Self { arch, weights: ParamSet::new(t) })
    }

    pub fn from_weights(arch: DiscriminatorArch, weights: ParamSet) -> Result<Self> {
        if !Self::zeros(arch)?.weights.same_layout(&weights) {
            return Err(Error::config("discriminator weights do not match the architecture"));
        }
        Ok(Self { arch, weights })
    }

    // Tensor slots: enc s -> (2s, 2s+1), logit -> (6, 7), dec l -> (8+2l, 9+2l).
    fn t(&self, i: usize) -> &[f64] {
        &self.weights.tensors[i].data
    }
}

/// Fan-in scaled uniform weights, zero biases.
pub fn init_discriminator<R: Rng + ?Sized>(rng: &mut R, arch: DiscriminatorArch) -> Result<DiscriminatorParams> {
    let mut p = DiscriminatorParams::zeros(arch)?;
    for t in p.weights.tensors.iter_mut().filter(|t| t.name.ends_with("weight")) {
        let bound = (6.0 / t.shape[1] as f64).sqrt();
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
    Ok(p)
}

/// Reconstruction target: the sample average-pooled to the decoder's output grid.
pub fn target_transform(arch: &DiscriminatorArch, sample: &Grid3) -> Grid3 {
    let (p, d) = avg_pool(&sample.data, 1, sample.dims, arch.factor());
    Grid3::from_vec(d, p)
}

#[derive(Debug, Clone)]
struct StageCache {
    dims_in: [usize; 3],
    cols: Vec<f64>,
    pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    enc: Vec<StageCache>,
    pooled: Vec<f64>,
    enc3_positions: usize,
    dec: Option<[StageCache; 2]>,
    feature_dims: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct Discrimination {
    pub logit: f64,
    /// Feature map fed to the decoder: `C x D x H x W`.
    pub features: Vec<f64>,
    pub feature_dims: [usize; 4],
    /// Decoder output at half the input resolution (absent when skipped).
    pub reconstruction: Option<Grid3>,
    pub cache: DiscriminatorCache,
}

/// Runs the encoder (and, when `decode`, the decoder) on a single-channel sample.
pub fn discriminate(params: &DiscriminatorParams, sample: &Grid3, decode: bool) -> Result<Discrimination> {
    let arch = params.arch;
    arch.check_sample(sample.dims)?;
    let mut x = sample.data.clone();
    let mut d = sample.dims;
    let mut enc = Vec::with_capacity(3);
    let mut features = Vec::new();
    let mut feature_dims = [0; 3];
    for s in 0..3 {
        let c = arch.encoder(s);
        let (pre, cols) = conv_forward(&c, params.t(2 * s), params.t(2 * s + 1), &x, d);
        let dims_in = d;
        d = c.out_dims(d);
        x = leaky_relu(&pre);
        enc.push(StageCache { dims_in, cols, pre });
        if s == 1 {
            features = x.clone();
            feature_dims = d;
        }
    }
    let positions = d.iter().product::<usize>();
    let c3 = arch.channels[2];
    let pooled: Vec<f64> = x.chunks(positions).map(|r| r.iter().sum::<f64>() / positions as f64).collect();
    let logit = params.t(7)[0] + pooled.iter().zip(params.t(6)).map(|(a, b)| a * b).sum::<f64>();
    debug_assert_eq!(pooled.len(), c3);

    let (reconstruction, dec) = if decode {
        let f = arch.factor();
        let up = upsample(&features, arch.channels[1], feature_dims, f);
        let ud = [feature_dims[0] * f[0], feature_dims[1] * f[1], feature_dims[2] * f[2]];
        let c0 = arch.decoder(0);
        let (pre0, cols0) = conv_forward(&c0, params.t(8), params.t(9), &up, ud);
        let act0 = leaky_relu(&pre0);
        let c1 = arch.decoder(1);
        let (out, cols1) = conv_forward(&c1, params.t(10), params.t(11), &act0, ud);
        (
            Some(Grid3::from_vec(ud, out)),
            Some([StageCache { dims_in: ud, cols: cols0, pre: pre0 }, StageCache { dims_in: ud, cols: cols1, pre: Vec::new() }]),
        )
    } else {
        (None, None)
    };
    let fd = [arch.channels[1], feature_dims[0], feature_dims[1], feature_dims[2]];
    Ok(Discrimination {
        logit,
        features,
        feature_dims: fd,
        reconstruction,
        cache: DiscriminatorCache { enc, pooled, enc3_positions: positions, dec, feature_dims },
    })
}

fn tensor_grad<'a>(grads: &'a mut ParamSet, i: usize) -> &'a mut [f64] {
    &mut grads.tensors[i].data
}

/// Accumulates parameter gradients for sensitivities on the logit and the
/// reconstruction; returns the gradient with respect to the input sample
/// when `want_input`.
pub fn discriminator_backward(
    params: &DiscriminatorParams,
    cache: &DiscriminatorCache,
    d_logit: f64,
    d_reconstruction: Option<&Grid3>,
    grads: &mut ParamSet,
    want_input: bool,
) -> Result<Option<Grid3>> {
    if !grads.same_layout(&params.weights) {
        return Err(Error::Usage("gradient buffer does not match the discriminator".into()));
    }
    let arch = params.arch;
    // Logit head.
    for (c, p) in cache.pooled.iter().enumerate() {
        tensor_grad(grads, 6)[c] += d_logit * p;
    }
    tensor_grad(grads, 7)[0] += d_logit;
    let n3 = cache.enc3_positions;
    let w_logit = params.t(6);
    let mut d_act: Vec<f64> = (0..arch.channels[2] * n3).map(|i| d_logit * w_logit[i / n3] / n3 as f64).collect();

    // Stage 3 back to the feature map.
    let mut d_features = {
        let sc = &cache.enc[2];
        let d_pre = leaky_relu_backward(&sc.pre, &d_act);
        let (w, rest) = grads.tensors.split_at_mut(5);
        conv_backward(&arch.encoder(2), params.t(4), &sc.cols, sc.dims_in, &d_pre, &mut w[4].data, &mut rest[0].data, true)
            .unwrap()
    };

    if let Some(dr) = d_reconstruction {
        let dec = cache
            .dec
            .as_ref()
            .ok_or_else(|| Error::Usage("reconstruction gradient given but decoder was skipped".into()))?;
        let ud = dec[0].dims_in;
        if dr.dims != ud {
            return Err(Error::Usage("reconstruction gradient has the wrong shape".into()));
        }
        let (w, rest) = grads.tensors.split_at_mut(11);
        let d_act0 =
            conv_backward(&arch.decoder(1), params.t(10), &dec[1].cols, ud, &dr.data, &mut w[10].data, &mut rest[0].data, true)
                .unwrap();
        let d_pre0 = leaky_relu_backward(&dec[0].pre, &d_act0);
        let (w, rest) = grads.tensors.split_at_mut(9);
        let d_up =
            conv_backward(&arch.decoder(0), params.t(8), &dec[0].cols, ud, &d_pre0, &mut w[8].data, &mut rest[0].data, true)
                .unwrap();
        let back = upsample_backward(&d_up, arch.channels[1], cache.feature_dims, arch.factor());
        d_features.iter_mut().zip(back).for_each(|(a, b)| *a += b);
    }

    d_act = d_features;
    for s in (0..2).rev() {
        let sc = &cache.enc[s];
        let d_pre = leaky_relu_backward(&sc.pre, &d_act);
        let need = s > 0 || want_input;
        let (w, rest) = grads.tensors.split_at_mut(2 * s + 1);
        let out = conv_backward(&arch.encoder(s), params.t(2 * s), &sc.cols, sc.dims_in, &d_pre, &mut w[2 * s].data, &mut rest[0].data, need);
        match out {
            Some(g) => d_act = g,
            None => return Ok(None),
        }
    }
    Ok(Some(Grid3::from_vec(cache.enc[0].dims_in, d_act)))
}
