//! Fitting latent codes to reference projections, volume reconstruction
//! and the evaluation metrics.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adversary::{perceptual_loss_grad, GradientDifference, PerceptualMetric};
use crate::data::dataset::ProjectionSet;
use crate::data::volume::{NormRecord, Volume};
use crate::error::{Error, Result};
use crate::field::{BackwardOptions, FieldGrads, FieldParams, LatentCodes};
use crate::geometry::Pose;
use crate::grid::Grid3;
use crate::render::{render_backward, render_full_projection, render_full_projection_diff, render_volume, Generator, Jitter, RenderConfig};
use crate::rng::rng_from;
use crate::trainer::{rmsprop_update, RmsProp};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP_DB: f64 = 999.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub lambda_perceptual: f64,
    pub lambda_psnr: f64,
    pub lambda_nll: f64,
    pub psnr_stop_threshold: f64,
    pub max_iterations: usize,
    pub lr: f64,
    pub grid: [usize; 3],
    /// Overrides the training sample count when set.
    pub samples_per_ray: Option<usize>,
    pub seed: u64,
    /// Also tune the network weights (experimental; off by default).
    pub tune_network: bool,
    pub optimizer: RmsProp,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            lambda_perceptual: 0.3,
            lambda_psnr: 0.1,
            lambda_nll: 0.3,
            psnr_stop_threshold: 25.0,
            max_iterations: 1000,
            lr: 5e-4,
            grid: [32, 32, 32],
            samples_per_ray: None,
            seed: 0,
            tune_network: false,
            optimizer: RmsProp::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_perceptual, self.lambda_psnr, self.lambda_nll];
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("inference loss weights must be positive"));
        }
        if !(self.psnr_stop_threshold > 0.0) || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("stopping threshold and learning rate must be positive"));
        }
        if self.grid.contains(&0) || self.samples_per_ray == Some(0) {
            return Err(Error::config("output grid and sample count must be positive"));
        }
        Ok(())
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse inputs differ in length");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Root-mean-square difference; scaled back to raw units (e.g. HU) through
/// a normalization record when given.
pub fn rmse(a: &[f64], b: &[f64], record: Option<NormRecord>) -> f64 {
    let r = mse(a, b).sqrt();
    record.map_or(r, |rec| r * rec.span())
}

/// `20 log10(max / rmse)`, or [`PSNR_CAP_DB`] when the inputs are identical.
pub fn psnr(a: &[f64], b: &[f64], max_value: f64) -> f64 {
    let r = rmse(a, b, None);
    if r == 0.0 {
        PSNR_CAP_DB
    } else {
        20.0 * (max_value / r).log10()
    }
}

fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

fn ssim_from(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// SSIM from whole-tensor statistics (population variances), with
/// `c1 = (k1 L)^2`, `c2 = (k2 L)^2`.
pub fn ssim(a: &[f64], b: &[f64], k1: f64, k2: f64, dynamic_range: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "ssim inputs differ in length");
    let (ma, mb, va, vb, cov) = moments(a, b);
    ssim_from(ma, mb, va, vb, cov, (k1 * dynamic_range).powi(2), (k2 * dynamic_range).powi(2))
}

/// Mean SSIM over all `window`-sided cubic windows (clipped to singleton
/// axes). Not used for reported numbers.
pub fn ssim_windowed(a: &Grid3, b: &Grid3, window: usize, k1: f64, k2: f64, dynamic_range: f64) -> Result<f64> {
    if a.dims != b.dims || window == 0 {
        return Err(Error::Usage("windowed ssim needs equal shapes and a positive window".into()));
    }
    let w = a.dims.map(|d| window.min(d));
    let (c1, c2) = ((k1 * dynamic_range).powi(2), (k2 * dynamic_range).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut wa = Vec::with_capacity(w.iter().product());
    let mut wb = Vec::with_capacity(wa.capacity());
    for z in 0..=a.dims[0] - w[0] {
        for y in 0..=a.dims[1] - w[1] {
            for x in 0..=a.dims[2] - w[2] {
                wa.clear();
                wb.clear();
                for dz in 0..w[0] {
                    for dy in 0..w[1] {
                        for dx in 0..w[2] {
                            wa.push(a.at(z + dz, y + dy, x + dx));
                            wb.push(b.at(z + dz, y + dy, x + dx));
                        }
                    }
                }
                let (ma, mb, va, vb, cov) = moments(&wa, &wb);
                total += ssim_from(ma, mb, va, vb, cov, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// RMSE in raw units, when the truth carries a normalization record.
    pub rmse_hu: Option<f64>,
}

/// Metrics on `[0, 1]`-normalized tensors.
pub fn compare(pred: &[f64], truth: &[f64], record: Option<NormRecord>) -> Result<MetricSet> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::data(format!("cannot compare tensors of {} and {} elements", pred.len(), truth.len())));
    }
    Ok(MetricSet {
        psnr_db: psnr(pred, truth, 1.0),
        ssim: ssim(pred, truth, SSIM_K1, SSIM_K2, 1.0),
        rmse: rmse(pred, truth, None),
        rmse_hu: record.map(|r| rmse(pred, truth, Some(r))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub theta_degrees: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volume: Option<MetricSet>,
    pub views: Vec<ViewMetrics>,
}

impl MetricReport {
    pub fn evaluate(
        pred_volume: Option<&Volume>,
        truth_volume: Option<&Volume>,
        pred_views: Option<&ProjectionSet>,
        truth_views: Option<&ProjectionSet>,
    ) -> Result<Self> {
        let mut r = MetricReport::default();
        if let (Some(p), Some(t)) = (pred_volume, truth_volume) {
            if p.dims() != t.dims() {
                return Err(Error::data(format!("volume shapes differ: {:?} vs {:?}", p.dims(), t.dims())));
            }
            r.volume = Some(compare(&p.grid.data, &t.grid.data, t.normalization)?);
        }
        if let (Some(p), Some(t)) = (pred_views, truth_views) {
            if p.len() != t.len() {
                return Err(Error::data("prediction and truth hold different view counts"));
            }
            for (i, (a, b)) in p.images.iter().zip(&t.images).enumerate() {
                if a.dims != b.dims {
                    return Err(Error::data(format!("view {i} shapes differ")));
                }
                let metrics = compare(&a.data, &b.data, t.normalization)?;
                r.views.push(ViewMetrics { index: i, theta_degrees: t.poses[i].theta_degrees(), metrics });
            }
        }
        Ok(r)
    }

    /// `key: value` lines followed by a TOML block.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        let line = |s: &mut String, prefix: &str, m: &MetricSet| {
            let _ = writeln!(s, "{prefix}psnr_db: {:.4}", m.psnr_db);
            let _ = writeln!(s, "{prefix}ssim: {:.6}", m.ssim);
            let _ = writeln!(s, "{prefix}rmse: {:.6}", m.rmse);
            if let Some(h) = m.rmse_hu {
                let _ = writeln!(s, "{prefix}rmse_hu: {h:.4}");
            }
        };
        if let Some(v) = &self.volume {
            line(&mut s, "volume.", v);
        }
        for v in &self.views {
            line(&mut s, &format!("view{}@{:.1}deg.", v.index, v.theta_degrees), &v.metrics);
        }
        s.push_str("\n[machine-readable]\n");
        s.push_str(&toml::to_string(self).map_err(|e| Error::data(e.to_string()))?);
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let block = text
            .split_once("[machine-readable]\n")
            .ok_or_else(|| Error::data("metric report lacks its machine-readable block"))?
            .1;
        toml::from_str(block).map_err(|e| Error::data(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub view: usize,
    pub loss: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    /// Best-so-far codes by rendered-view PSNR.
    pub codes: LatentCodes,
    pub best_psnr_db: f64,
    pub trace: Vec<TraceEntry>,
    pub reached_threshold: bool,
    /// Tuned weights, only when network tuning was requested.
    pub params: Option<FieldParams>,
}

/// Fitting objective on one full image; returns the loss and its gradient
/// with respect to the rendered pixels.
pub fn finetune_loss(metric: &dyn PerceptualMetric, rendered: &Grid3, reference: &Grid3, cfg: &InferenceConfig) -> Result<(f64, Vec<f64>)> {
    let n = rendered.len() as f64;
    let (lp, gp) = perceptual_loss_grad(metric, rendered, reference, n)?;
    let m = mse(&rendered.data, &reference.data);
    // 10 log10(MSE / MAX^2) with MAX = 1; a unit-variance Gaussian NLL is MSE/2 + const.
    let l_psnr = if m > 0.0 { 10.0 * m.log10() } else { 0.0 };
    let d_psnr = if m > 0.0 { 10.0 / (m * std::f64::consts::LN_10) } else { 0.0 };
    let l_nll = 0.5 * m + 0.5 * (2.0 * std::f64::consts::PI).ln();
    let loss = cfg.lambda_perceptual * lp + cfg.lambda_psnr * l_psnr + cfg.lambda_nll * l_nll;
    let dm = cfg.lambda_psnr * d_psnr + cfg.lambda_nll * 0.5;
    let grad = gp
        .data
        .iter()
        .zip(rendered.data.iter().zip(&reference.data))
        .map(|(g, (a, b))| cfg.lambda_perceptual * g + dm * 2.0 * (a - b) / n)
        .collect();
    Ok((loss, grad))
}

/// Fits latent codes (and optionally weights) to the reference views,
/// drawing one view per iteration and stopping once its rendered PSNR
/// reaches the threshold.
pub fn finetune_latents(
    params: &FieldParams,
    init: &LatentCodes,
    references: &ProjectionSet,
    render: &RenderConfig,
    cfg: &InferenceConfig,
) -> Result<FineTuneResult> {
    cfg.validate()?;
    references.validate()?;
    let metric = GradientDifference::default();
    let mut codes = init.clone();
    let mut acc = LatentCodes::zeros(codes.z_shape.len(), codes.z_appearance.len());
    let mut tuned = cfg.tune_network.then(|| params.clone());
    let mut net_acc = params.weights.zeros_like();
    let mut best = (f64::NEG_INFINITY, codes.clone());
    let mut trace = Vec::new();
    let mut reached = false;
    let calibration = references.calibration();
    let rcfg = RenderConfig { samples_per_ray: cfg.samples_per_ray.unwrap_or(render.samples_per_ray), model: references.model };
    for it in 0..cfg.max_iterations {
        let view = rng_from(&[cfg.seed, it as u64, 0x1f]).random_range(0..references.len());
        let net = tuned.as_ref().unwrap_or(params);
        let gen = Generator { params: net, codes: &codes };
        let (img, cache) = render_full_projection_diff(gen, &references.setup, references.poses[view], &rcfg, Jitter::Midpoint, calibration)?;
        let reference = &references.images[view];
        let p = psnr(&img.data, &reference.data, 1.0);
        let (loss, d_pix) = finetune_loss(&metric, &img, reference, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("fine-tuning iteration {it}: loss is {loss} (view {view}, psnr {p})")));
        }
        trace.push(TraceEntry { iteration: it, view, loss, psnr_db: p });
        if p > best.0 {
            best = (p, codes.clone());
        }
        if p >= cfg.psnr_stop_threshold {
            reached = true;
            break;
        }
        let mut grads = FieldGrads::zeros(net);
        render_backward(net, &cache, &d_pix, None, BackwardOptions { param_grads: cfg.tune_network, input_grads: false }, &mut grads)?;
        let o = cfg.optimizer;
        rmsprop_update(&mut codes.z_shape, &grads.z_shape, &mut acc.z_shape, cfg.lr, o.decay, o.epsilon)?;
        rmsprop_update(&mut codes.z_appearance, &grads.z_appearance, &mut acc.z_appearance, cfg.lr, o.decay, o.epsilon)?;
        if let Some(t) = tuned.as_mut() {
            let w = t.weights_mut();
            for ((p, g), a) in w.tensors.iter_mut().zip(&grads.params.tensors).zip(net_acc.tensors.iter_mut()) {
                rmsprop_update(&mut p.data, &g.data, &mut a.data, cfg.lr, o.decay, o.epsilon)?;
            }
        }
        if !codes.is_finite() {
            return Err(Error::Numeric(format!("fine-tuning iteration {it}: latent codes became non-finite")));
        }
    }
    let (best_psnr_db, codes) = if trace.is_empty() { (f64::NEG_INFINITY, codes) } else { best };
    Ok(FineTuneResult { codes, best_psnr_db, trace, reached_threshold: reached, params: tuned })
}

/// Renders the field into a volume on `grid` and attaches the density
/// record so raw-unit metrics can be reported.
pub fn reconstruct(
    params: &FieldParams,
    codes: &LatentCodes,
    view_pose: Pose,
    grid: [usize; 3],
    half_extent: f64,
    record: Option<NormRecord>,
) -> Result<Volume> {
    let mut v = render_volume(Generator { params, codes }, view_pose, grid, half_extent)?;
    v.normalization = record;
    Ok(v)
}

/// Renders every pose of `like` with deterministic sampling, under its records.
pub fn render_views(params: &FieldParams, codes: &LatentCodes, like: &ProjectionSet, render: &RenderConfig) -> Result<ProjectionSet> {
    let rcfg = RenderConfig { samples_per_ray: render.samples_per_ray, model: like.model };
    let images = like
        .poses
        .iter()
        .map(|&p| render_full_projection(Generator { params, codes }, &like.setup, p, &rcfg, Jitter::Midpoint, like.calibration()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectionSet { images, ..like.clone() })
}
