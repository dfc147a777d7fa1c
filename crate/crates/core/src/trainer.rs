//! Adversarial patch training: one discriminator update then one generator
//! update per iteration, RMSprop throughout, exact checkpoint/resume.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    dag_adjoint, dag_augment, discriminate, discriminator_backward, hinge, hinge_slope, init_discriminator,
    perceptual_loss_grad, target_transform, DiscriminatorArch, DiscriminatorParams, GradientDifference, LossWeights,
    PerceptualMetric, SampleKind,
};
use crate::data::dataset::ProjectionSet;
use crate::data::formats::TensorArchive;
use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::field::{init_params, sample_latents, BackwardOptions, FieldArch, FieldGrads, FieldParams, LatentCodes};
use crate::geometry::{patch_detector_coords, sample_patch_pattern, PoseDistribution};
use crate::grid::Grid3;
use crate::params::{ParamSet, ParamTensor};
use crate::render::{extract_true_subvolume, render_backward, render_patch, Generator, Jitter, RenderConfig};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsProp {
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self { decay: 0.99, epsilon: 1e-8 }
    }
}

/// `a <- decay a + (1 - decay) g^2;  p <- p - lr g / sqrt(a + eps)`.
pub fn rmsprop_update(params: &mut [f64], grads: &[f64], acc: &mut [f64], lr: f64, decay: f64, epsilon: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != acc.len() {
        return Err(Error::Usage(format!(
            "optimizer shapes differ: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            acc.len()
        )));
    }
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
        *a = decay * *a + (1.0 - decay) * g * g;
        let denom = (*a + epsilon).sqrt();
        if denom > 0.0 {
            *p -= lr * g / denom;
        }
    }
    Ok(())
}

fn rmsprop_set(params: &mut ParamSet, grads: &ParamSet, acc: &mut ParamSet, lr: f64, opt: RmsProp) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(acc) {
        return Err(Error::Usage("optimizer tensors do not share a layout".into()));
    }
    for ((p, g), a) in params.tensors.iter_mut().zip(&grads.tensors).zip(acc.tensors.iter_mut()) {
        rmsprop_update(&mut p.data, &g.data, &mut a.data, lr, opt.decay, opt.epsilon)?;
    }
    Ok(())
}

/// Where each batch element's latent codes come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// One learnable code pair per training subject, optimized jointly
    /// with the generator.
    #[default]
    PerSubject,
    /// Fresh standard-normal codes every draw.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub iterations: usize,
    pub use_3d_supervision: bool,
    pub patch_m: usize,
    pub samples_per_ray: usize,
    pub loss: LossWeights,
    /// Scale of the generator's adversarial terms.
    pub adversarial_weight: f64,
    /// Weight of the paired squared-error term between rendered and true
    /// samples, added to the paired perceptual term.
    pub fidelity_weight: f64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub optimizer: RmsProp,
    pub latent_mode: LatentMode,
    pub field: FieldArch,
    pub volume_discriminator_channels: [usize; 3],
    pub image_discriminator_channels: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr_generator: 5e-4,
            lr_discriminator: 1e-4,
            iterations: 5000,
            use_3d_supervision: true,
            patch_m: 32,
            samples_per_ray: 64,
            loss: LossWeights::default(),
            adversarial_weight: 0.1,
            fidelity_weight: 10.0,
            seed: 0,
            checkpoint_every: 0,
            optimizer: RmsProp::default(),
            latent_mode: LatentMode::PerSubject,
            field: FieldArch::default(),
            volume_discriminator_channels: [16, 32, 64],
            image_discriminator_channels: [16, 32, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.field.validate()?;
        let positive = [self.lr_generator, self.lr_discriminator];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("learning rates must be positive and finite"));
        }
        if !(self.adversarial_weight >= 0.0) || !(self.fidelity_weight >= 0.0) {
            return Err(Error::config("generator term weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.optimizer.decay) || !(self.optimizer.epsilon >= 0.0) {
            return Err(Error::config("RMSprop decay must lie in [0, 1) and epsilon must be nonnegative"));
        }
        if self.batch_size == 0 || self.samples_per_ray == 0 {
            return Err(Error::config("batch_size and samples_per_ray must be positive"));
        }
        if self.patch_m == 0 || self.patch_m % 4 != 0 {
            return Err(Error::config("patch_m must be a positive multiple of 4"));
        }
        if self.use_3d_supervision && self.samples_per_ray % 4 != 0 {
            return Err(Error::config("samples_per_ray must be a multiple of 4 with 3D supervision"));
        }
        DiscriminatorArch { kind: SampleKind::Volume, channels: self.volume_discriminator_channels }.validate()?;
        DiscriminatorArch { kind: SampleKind::Image, channels: self.image_discriminator_channels }.validate()?;
        Ok(())
    }

    pub fn render(&self, model: crate::render::ProjectionModel) -> RenderConfig {
        RenderConfig { samples_per_ray: self.samples_per_ray, model }
    }

    fn volume_arch(&self) -> DiscriminatorArch {
        DiscriminatorArch { kind: SampleKind::Volume, channels: self.volume_discriminator_channels }
    }

    fn image_arch(&self) -> DiscriminatorArch {
        DiscriminatorArch { kind: SampleKind::Image, channels: self.image_discriminator_channels }
    }
}

/// One subject: its posed projections and, for 3D supervision, its volume.
#[derive(Debug, Clone)]
pub struct TrainingSubject {
    pub projections: ProjectionSet,
    pub volume: Option<Volume>,
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub subjects: Vec<TrainingSubject>,
}

impl TrainingData {
    pub fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::data("training needs at least one subject"));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            s.projections.validate()?;
            let st = &s.projections.setup;
            if cfg.patch_m > st.detector_rows.min(st.detector_cols) {
                return Err(Error::config(format!("patch_m {} exceeds the detector of subject {i}", cfg.patch_m)));
            }
            if cfg.use_3d_supervision && s.volume.is_none() {
                return Err(Error::data(format!("subject {i} has no truth volume but 3D supervision is on")));
            }
        }
        Ok(())
    }
}

/// Per-term losses of one sample type (patch or sub-volume), combined over
/// transforms and averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermLosses {
    /// Discriminator self-reconstruction on real samples.
    pub recon: f64,
    /// Discriminator hinge.
    pub hinge: f64,
    /// Generator adversarial term `-D(fake)`.
    pub adversarial: f64,
    /// Generator paired term.
    pub fidelity: f64,
}

impl TermLosses {
    fn values(&self) -> [f64; 4] {
        [self.recon, self.hinge, self.adversarial, self.fidelity]
    }

    fn from_values(v: &[f64]) -> Self {
        Self { recon: v[0], hinge: v[1], adversarial: v[2], fidelity: v[3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub discriminator_total: f64,
    pub generator_total: f64,
    pub patch: TermLosses,
    /// Absent when 3D supervision is off.
    pub volume: Option<TermLosses>,
}

impl LossReport {
    const WIDTH: usize = 12;

    fn to_row(self) -> Vec<f64> {
        let mut r = vec![self.iteration as f64, self.discriminator_total, self.generator_total];
        r.extend(self.patch.values());
        r.push(if self.volume.is_some() { 1.0 } else { 0.0 });
        r.extend(self.volume.unwrap_or_default().values());
        r
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            iteration: r[0] as usize,
            discriminator_total: r[1],
            generator_total: r[2],
            patch: TermLosses::from_values(&r[3..7]),
            volume: (r[7] != 0.0).then(|| TermLosses::from_values(&r[8..12])),
        }
    }

    pub fn log_line(&self, seconds: f64) -> String {
        let mut s = format!(
            "iter={} d_total={:e} g_total={:e} p_recon={:e} p_hinge={:e} p_adv={:e} p_fid={:e}",
            self.iteration,
            self.discriminator_total,
            self.generator_total,
            self.patch.recon,
            self.patch.hinge,
            self.patch.adversarial,
            self.patch.fidelity
        );
        if let Some(v) = self.volume {
            let _ = write!(s, " v_recon={:e} v_hinge={:e} v_adv={:e} v_fid={:e}", v.recon, v.hinge, v.adversarial, v.fidelity);
        }
        let _ = write!(s, " wall={seconds:.3}");
        s
    }

    fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut t = vec![
            ("discriminator_total", self.discriminator_total),
            ("generator_total", self.generator_total),
            ("patch.recon", self.patch.recon),
            ("patch.hinge", self.patch.hinge),
            ("patch.adversarial", self.patch.adversarial),
            ("patch.fidelity", self.patch.fidelity),
        ];
        if let Some(v) = self.volume {
            t.extend([
                ("volume.recon", v.recon),
                ("volume.hinge", v.hinge),
                ("volume.adversarial", v.adversarial),
                ("volume.fidelity", v.fidelity),
            ]);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: FieldParams,
    pub generator_acc: ParamSet,
    /// Per-subject codes (empty in random-latent mode).
    pub latents: Vec<LatentCodes>,
    pub latent_acc: Vec<LatentCodes>,
    pub volume_disc: DiscriminatorParams,
    pub volume_disc_acc: ParamSet,
    pub image_disc: DiscriminatorParams,
    pub image_disc_acc: ParamSet,
    pub iteration: usize,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, subjects: usize) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let generator = init_params(&mut rng_from(&[s, 0x6e6e]), config.field)?;
        let volume_disc = init_discriminator(&mut rng_from(&[s, 0xd1]), config.volume_arch())?;
        let image_disc = init_discriminator(&mut rng_from(&[s, 0xd2]), config.image_arch())?;
        let (latents, latent_acc) = match config.latent_mode {
            LatentMode::PerSubject => {
                let mut rng = rng_from(&[s, 0x1a7]);
                let codes = (0..subjects)
                    .map(|_| sample_latents(&mut rng, config.field.latent_shape_dim, config.field.latent_app_dim))
                    .collect::<Result<Vec<_>>>()?;
                let acc = codes.iter().map(|c| LatentCodes::zeros(c.z_shape.len(), c.z_appearance.len())).collect();
                (codes, acc)
            }
            LatentMode::Random => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            config: config.clone(),
            generator_acc: generator.weights.zeros_like(),
            generator,
            latents,
            latent_acc,
            volume_disc_acc: volume_disc.weights.zeros_like(),
            volume_disc,
            image_disc_acc: image_disc.weights.zeros_like(),
            image_disc,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Starting codes for fitting a new subject: the mean of the learned
    /// per-subject codes, or the prior mean (zero) in random mode.
    pub fn latent_init(&self) -> LatentCodes {
        let a = &self.config.field;
        let mut m = LatentCodes::zeros(a.latent_shape_dim, a.latent_app_dim);
        if self.latents.is_empty() {
            return m;
        }
        let n = self.latents.len() as f64;
        for c in &self.latents {
            m.z_shape.iter_mut().zip(&c.z_shape).for_each(|(a, b)| *a += b / n);
            m.z_appearance.iter_mut().zip(&c.z_appearance).for_each(|(a, b)| *a += b / n);
        }
        m
    }
}

/// Bilinear lookup of a `1 x H x W` image at a detector coordinate whose
/// pixel centers sit at `i + 0.5`; clamps at the border.
pub fn sample_image(image: &Grid3, coord: [f64; 2]) -> f64 {
    let [_, h, w] = image.dims;
    let fx = (coord[0] - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (coord[1] - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let at = |y: usize, x: usize| image.data[y * w + x];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
}

fn mse_grad(a: &Grid3, b: &Grid3) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let mut v = 0.0;
    let g = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            v += d * d;
            2.0 * d / n
        })
        .collect();
    (v / n, g)
}

/// Loss bookkeeping for one sample type.
struct Branch<'a> {
    disc: &'a DiscriminatorParams,
    weight: f64,
}

/// Discriminator objective for one (fake, real) pair summed over
/// transforms; accumulates gradients scaled by `scale`.
fn discriminator_pair(
    br: &Branch<'_>,
    metric: &dyn PerceptualMetric,
    fake: &Grid3,
    real: &Grid3,
    w: &LossWeights,
    scale: f64,
    grads: &mut ParamSet,
) -> Result<(f64, f64)> {
    let (mut recon, mut hinge_sum) = (0.0, 0.0);
    for k in 0..w.n_aug {
        let c = w.transform_coefficient(k) * br.weight;
        let f = dag_augment(fake, k, w.n_aug)?;
        let r = dag_augment(real, k, w.n_aug)?;
        let df = discriminate(br.disc, &f, false)?;
        let dr = discriminate(br.disc, &r, true)?;
        let target = target_transform(&br.disc.arch, &r);
        let rec = dr.reconstruction.as_ref().unwrap();
        let (lr, grad_rec) = perceptual_loss_grad(metric, rec, &target, rec.len() as f64)?;
        let lh = hinge(df.logit) + hinge(-dr.logit);
        recon += w.transform_coefficient(k) * lr;
        hinge_sum += w.transform_coefficient(k) * lh;
        discriminator_backward(br.disc, &df.cache, scale * c * hinge_slope(df.logit), None, grads, false)?;
        let mut g = grad_rec;
        g.data.iter_mut().for_each(|v| *v *= scale * c);
        discriminator_backward(br.disc, &dr.cache, -scale * c * hinge_slope(-dr.logit), Some(&g), grads, false)?;
    }
    Ok((recon, hinge_sum))
}

/// Generator objective for one (fake, real) pair; returns (adversarial,
/// paired) losses and the gradient with respect to `fake`.
#[allow(clippy::too_many_arguments)]
fn generator_pair(
    br: &Branch<'_>,
    metric: &dyn PerceptualMetric,
    fake: &Grid3,
    real: &Grid3,
    w: &LossWeights,
    adv_w: f64,
    fid_w: f64,
    scale: f64,
) -> Result<(f64, f64, Grid3)> {
    let (mut adv, mut fid) = (0.0, 0.0);
    let mut d_fake = Grid3::zeros(fake.dims);
    let mut scratch = br.disc.weights.zeros_like();
    for k in 0..w.n_aug {
        let ck = w.transform_coefficient(k);
        let c = ck * br.weight * scale;
        let f = dag_augment(fake, k, w.n_aug)?;
        let r = dag_augment(real, k, w.n_aug)?;
        let mut g = Grid3::zeros(f.dims);
        if adv_w > 0.0 {
            let df = discriminate(br.disc, &f, false)?;
            adv += ck * -df.logit;
            let gi = discriminator_backward(br.disc, &df.cache, -c * adv_w, None, &mut scratch, true)?.unwrap();
            g.data.iter_mut().zip(&gi.data).for_each(|(a, b)| *a += b);
        }
        let (lp, gp) = perceptual_loss_grad(metric, &f, &r, f.len() as f64)?;
        let (lm, gm) = mse_grad(&f, &r);
        fid += ck * (lp + fid_w * lm);
        for ((a, p), m) in g.data.iter_mut().zip(&gp.data).zip(&gm) {
            *a += c * (p + fid_w * m);
        }
        let back = dag_adjoint(&g, k, w.n_aug)?;
        d_fake.data.iter_mut().zip(&back.data).for_each(|(a, b)| *a += b);
    }
    Ok((adv, fid, d_fake))
}

struct Draw {
    subject: usize,
    render: crate::render::PatchRender,
    real_patch: Grid3,
    real_volume: Option<Grid3>,
}

fn check_finite(iteration: usize, report: &LossReport) -> Result<()> {
    for (term, v) in report.terms() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("iteration {iteration}: loss term {term} is {v}")));
        }
    }
    Ok(())
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, data: &TrainingData) -> Result<LossReport> {
    let cfg = state.config.clone();
    data.validate(&cfg)?;
    if cfg.latent_mode == LatentMode::PerSubject && state.latents.len() != data.subjects.len() {
        return Err(Error::data("checkpoint latent table does not match the subject count"));
    }
    let it = state.iteration;
    let mut rng = rng_from(&[cfg.seed, it as u64, 0x57e9]);
    let metric = GradientDifference::default();
    let w = cfg.loss;
    let b_scale = 1.0 / cfg.batch_size as f64;

    let mut draws = Vec::with_capacity(cfg.batch_size);
    for b in 0..cfg.batch_size {
        let subject = rng.random_range(0..data.subjects.len());
        let s = &data.subjects[subject];
        let proj = &s.projections;
        let view = PoseDistribution::uniform(proj.poses.clone())?.sample_index(&mut rng);
        let pose = proj.poses[view];
        let pattern = sample_patch_pattern(&mut rng, &proj.setup, cfg.patch_m)?;
        let codes = match cfg.latent_mode {
            LatentMode::PerSubject => state.latents[subject].clone(),
            LatentMode::Random => sample_latents(&mut rng, cfg.field.latent_shape_dim, cfg.field.latent_app_dim)?,
        };
        let jitter = Jitter::Seeded(derive_seed(&[cfg.seed, it as u64, b as u64]));
        let render = render_patch(
            Generator { params: &state.generator, codes: &codes },
            &proj.setup,
            pose,
            &pattern,
            &cfg.render(proj.model),
            jitter,
            proj.calibration(),
        )?;
        let coords = patch_detector_coords(&pattern);
        let m = cfg.patch_m;
        let real_patch = Grid3::image(m, m, coords.iter().map(|&c| sample_image(&proj.images[view], c)).collect());
        let real_volume = if cfg.use_3d_supervision {
            let vol = s.volume.as_ref().unwrap();
            Some(extract_true_subvolume(vol, &render.sub_volume.sample_coords, [cfg.samples_per_ray, m, m])?.densities)
        } else {
            None
        };
        draws.push(Draw { subject, render, real_patch, real_volume });
    }

    // Discriminator update.
    let mut patch = TermLosses::default();
    let mut volume = TermLosses::default();
    {
        let mut g_img = state.image_disc.weights.zeros_like();
        let mut g_vol = state.volume_disc.weights.zeros_like();
        let img = Branch { disc: &state.image_disc, weight: w.lambda2 };
        let vol = Branch { disc: &state.volume_disc, weight: 1.0 };
        for d in &draws {
            let (r, h) = discriminator_pair(&img, &metric, &d.render.patch.values, &d.real_patch, &w, b_scale, &mut g_img)?;
            patch.recon += r * b_scale;
            patch.hinge += h * b_scale;
            if let Some(rv) = &d.real_volume {
                let (r, h) = discriminator_pair(&vol, &metric, &d.render.sub_volume.densities, rv, &w, b_scale, &mut g_vol)?;
                volume.recon += r * b_scale;
                volume.hinge += h * b_scale;
            }
        }
        let lr = cfg.lr_discriminator;
        rmsprop_set(&mut state.image_disc.weights, &g_img, &mut state.image_disc_acc, lr, cfg.optimizer)?;
        if cfg.use_3d_supervision {
            rmsprop_set(&mut state.volume_disc.weights, &g_vol, &mut state.volume_disc_acc, lr, cfg.optimizer)?;
        }
    }

    // Generator update against the refreshed discriminators, reusing the renders.
    let mut grads = FieldGrads::zeros(&state.generator);
    let mut latent_grads: Vec<LatentCodes> =
        state.latents.iter().map(|c| LatentCodes::zeros(c.z_shape.len(), c.z_appearance.len())).collect();
    {
        let img = Branch { disc: &state.image_disc, weight: w.lambda2 };
        let vol = Branch { disc: &state.volume_disc, weight: 1.0 };
        for d in &draws {
            let (a, f, d_pix) = generator_pair(
                &img,
                &metric,
                &d.render.patch.values,
                &d.real_patch,
                &w,
                cfg.adversarial_weight,
                cfg.fidelity_weight,
                b_scale,
            )?;
            patch.adversarial += a * b_scale;
            patch.fidelity += f * b_scale;
            let d_dens = match &d.real_volume {
                Some(rv) => {
                    let (a, f, g) = generator_pair(
                        &vol,
                        &metric,
                        &d.render.sub_volume.densities,
                        rv,
                        &w,
                        cfg.adversarial_weight,
                        cfg.fidelity_weight,
                        b_scale,
                    )?;
                    volume.adversarial += a * b_scale;
                    volume.fidelity += f * b_scale;
                    Some(g.data)
                }
                None => None,
            };
            grads.z_shape.iter_mut().for_each(|v| *v = 0.0);
            grads.z_appearance.iter_mut().for_each(|v| *v = 0.0);
            render_backward(
                &state.generator,
                &d.render.cache,
                &d_pix.data,
                d_dens.as_deref(),
                BackwardOptions { param_grads: true, input_grads: false },
                &mut grads,
            )?;
            if let Some(lg) = latent_grads.get_mut(d.subject) {
                lg.z_shape.iter_mut().zip(&grads.z_shape).for_each(|(a, b)| *a += b);
                lg.z_appearance.iter_mut().zip(&grads.z_appearance).for_each(|(a, b)| *a += b);
            }
        }
    }

    let w2 = w.lambda2;
    let report = LossReport {
        iteration: it,
        discriminator_total: volume.recon + volume.hinge + w2 * (patch.recon + patch.hinge),
        generator_total: cfg.adversarial_weight * (volume.adversarial + w2 * patch.adversarial)
            + volume.fidelity
            + w2 * patch.fidelity,
        patch,
        volume: cfg.use_3d_supervision.then_some(volume),
    };
    check_finite(it, &report)?;

    let lr = cfg.lr_generator;
    rmsprop_set(state.generator.weights_mut(), &grads.params, &mut state.generator_acc, lr, cfg.optimizer)?;
    for ((c, g), a) in state.latents.iter_mut().zip(&latent_grads).zip(state.latent_acc.iter_mut()) {
        rmsprop_update(&mut c.z_shape, &g.z_shape, &mut a.z_shape, lr, cfg.optimizer.decay, cfg.optimizer.epsilon)?;
        rmsprop_update(&mut c.z_appearance, &g.z_appearance, &mut a.z_appearance, lr, cfg.optimizer.decay, cfg.optimizer.epsilon)?;
    }
    if !state.generator.weights.all_finite() || !state.latents.iter().all(LatentCodes::is_finite) {
        return Err(Error::Numeric(format!("iteration {it}: generator parameters became non-finite")));
    }
    state.iteration += 1;
    state.history.push(report);
    Ok(report)
}

/// Runs steps until `state.config.iterations`, writing checkpoints and an
/// append-only log into `out_dir` when given.
pub fn train(state: &mut TrainState, data: &TrainingData, out_dir: Option<&Path>) -> Result<()> {
    let cfg = state.config.clone();
    data.validate(&cfg)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("training.log");
            Some((OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let start = Instant::now();
    while state.iteration < cfg.iterations {
        let report = train_step(state, data)?;
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}", report.log_line(start.elapsed().as_secs_f64())).map_err(|e| Error::io(&*p, e))?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
                save_checkpoint(state, &dir.join("checkpoint"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("checkpoint"))?;
    }
    Ok(())
}

fn push_set(a: &mut TensorArchive, prefix: &str, set: &ParamSet) {
    for t in &set.tensors {
        a.push(format!("{prefix}/{}", t.name), t.shape.clone(), t.data.clone());
    }
}

fn take_set(a: &TensorArchive, prefix: &str, template: &ParamSet) -> Result<ParamSet> {
    let mut out = Vec::with_capacity(template.tensors.len());
    for t in &template.tensors {
        let key = format!("{prefix}/{}", t.name);
        let (shape, data) = a.take(&key).ok_or_else(|| Error::data(format!("checkpoint lacks tensor `{key}`")))?;
        if shape != t.shape.as_slice() {
            return Err(Error::data(format!("checkpoint tensor `{key}` has shape {shape:?}, expected {:?}", t.shape)));
        }
        out.push(ParamTensor { name: t.name.clone(), shape: shape.to_vec(), data: data.to_vec() });
    }
    Ok(ParamSet::new(out))
}

/// Writes the full state: weights, optimizer accumulators, latent table,
/// loss history and the configuration. The step random streams derive from
/// `(seed, iteration)`, so these two fully capture the generator state.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let mut a = TensorArchive::default();
    a.push_meta("iteration", state.iteration);
    a.push_meta("seed", state.config.seed);
    a.push_meta("subjects", state.latents.len());
    push_set(&mut a, "generator", &state.generator.weights);
    push_set(&mut a, "generator_acc", &state.generator_acc);
    push_set(&mut a, "volume_disc", &state.volume_disc.weights);
    push_set(&mut a, "volume_disc_acc", &state.volume_disc_acc);
    push_set(&mut a, "image_disc", &state.image_disc.weights);
    push_set(&mut a, "image_disc_acc", &state.image_disc_acc);
    for (i, (c, acc)) in state.latents.iter().zip(&state.latent_acc).enumerate() {
        a.push(format!("latent/{i}/shape"), vec![c.z_shape.len()], c.z_shape.clone());
        a.push(format!("latent/{i}/appearance"), vec![c.z_appearance.len()], c.z_appearance.clone());
        a.push(format!("latent_acc/{i}/shape"), vec![acc.z_shape.len()], acc.z_shape.clone());
        a.push(format!("latent_acc/{i}/appearance"), vec![acc.z_appearance.len()], acc.z_appearance.clone());
    }
    let rows: Vec<f64> = state.history.iter().flat_map(|r| r.to_row()).collect();
    a.push("history", vec![state.history.len(), LossReport::WIDTH], rows);
    a.write(dir)?;
    let cfg = toml::to_string(&state.config).map_err(|e| Error::config(e.to_string()))?;
    let p = dir.join("train_config.toml");
    fs::write(&p, cfg).map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let p = dir.join("train_config.toml");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
    let a = TensorArchive::read(dir)?;
    let meta_num = |k: &str| -> Result<usize> {
        a.meta(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::data(format!("checkpoint metadata `{k}` missing or invalid")))
    };
    let subjects = meta_num("subjects")?;
    let mut s = TrainState::new(&config, subjects)?;
    s.iteration = meta_num("iteration")?;
    s.generator = FieldParams::from_weights(config.field, take_set(&a, "generator", &s.generator.weights)?)?;
    s.generator_acc = take_set(&a, "generator_acc", &s.generator_acc)?;
    s.volume_disc = DiscriminatorParams::from_weights(config.volume_arch(), take_set(&a, "volume_disc", &s.volume_disc.weights)?)?;
    s.volume_disc_acc = take_set(&a, "volume_disc_acc", &s.volume_disc_acc)?;
    s.image_disc = DiscriminatorParams::from_weights(config.image_arch(), take_set(&a, "image_disc", &s.image_disc.weights)?)?;
    s.image_disc_acc = take_set(&a, "image_disc_acc", &s.image_disc_acc)?;
    let vec_of = |key: String, n: usize| -> Result<Vec<f64>> {
        match a.take(&key) {
            Some((shape, d)) if shape == [n] => Ok(d.to_vec()),
            _ => Err(Error::data(format!("checkpoint tensor `{key}` missing or misshapen"))),
        }
    };
    let (ms, ma) = (config.field.latent_shape_dim, config.field.latent_app_dim);
    if config.latent_mode == LatentMode::PerSubject {
        for i in 0..subjects {
            s.latents[i] = LatentCodes { z_shape: vec_of(format!("latent/{i}/shape"), ms)?, z_appearance: vec_of(format!("latent/{i}/appearance"), ma)? };
            s.latent_acc[i] = LatentCodes {
                z_shape: vec_of(format!("latent_acc/{i}/shape"), ms)?,
                z_appearance: vec_of(format!("latent_acc/{i}/appearance"), ma)?,
            };
        }
    }
    let (shape, rows) = a.take("history").ok_or_else(|| Error::data("checkpoint lacks the loss history"))?;
    if shape.len() != 2 || shape[1] != LossReport::WIDTH {
        return Err(Error::data("checkpoint loss history is misshapen"));
    }
    s.history = rows.chunks(LossReport::WIDTH).map(LossReport::from_row).collect();
    Ok(s)
}
