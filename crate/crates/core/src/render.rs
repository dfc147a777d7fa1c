//! Projection rendering: turning densities along rays into detector values,
//! for the learned field and for analytic phantoms.

use serde::{Deserialize, Serialize};

use crate::data::phantom::AnalyticPhantom;
use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::field::{
    encode_positions, encode_view, field_backward, field_forward_batch, BackwardOptions, FieldCache, FieldGrads,
    FieldParams, LatentCodes,
};
use crate::geometry::{
    patch_detector_coords, ray_in_frame, stratified_samples, Frame, PatchPattern, Pose, Ray, SourceSetup, Vec3,
};
use crate::grid::Grid3;
use crate::rng::{rng_from, Rng};

/// Field samples evaluated per forward call.
const CHUNK_SAMPLES: usize = 8192;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionModel {
    /// Radiological path `sum(delta * dl)`.
    #[default]
    LineIntegral,
    /// Transmission `exp(-path)`.
    BeerLambert,
}

impl ProjectionModel {
    pub fn apply(self, path: f64) -> f64 {
        match self {
            ProjectionModel::LineIntegral => path,
            ProjectionModel::BeerLambert => (-path).exp(),
        }
    }

    fn derivative(self, path: f64) -> f64 {
        match self {
            ProjectionModel::LineIntegral => 1.0,
            ProjectionModel::BeerLambert => -(-path).exp(),
        }
    }
}

/// Composites one ray.
pub fn composite_ray(densities: &[f64], segment_lengths: &[f64], model: ProjectionModel) -> Result<f64> {
    if densities.len() != segment_lengths.len() {
        return Err(Error::Usage(format!(
            "{} densities for {} segments",
            densities.len(),
            segment_lengths.len()
        )));
    }
    if let Some(d) = densities.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Numeric(format!("negative or NaN density {d} reached the compositor")));
    }
    let path = densities.iter().zip(segment_lengths).map(|(d, l)| d * l).sum();
    Ok(model.apply(path))
}

/// Maps field densities (normalized volume units) to normalized detector
/// values: the raw density is `density_scale * delta + density_offset`, the
/// composited value is then mapped by `(v - proj_min) / (proj_max - proj_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub density_scale: f64,
    pub density_offset: f64,
    pub proj_min: f64,
    pub proj_max: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { density_scale: 1.0, density_offset: 0.0, proj_min: 0.0, proj_max: 1.0 }
    }
}

impl Calibration {
    fn span(&self) -> f64 {
        self.proj_max - self.proj_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Samples per ray.
    pub samples_per_ray: usize,
    #[serde(default)]
    pub model: ProjectionModel,
}

/// Per-ray sample placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Jitter {
    /// Bin midpoints; used for evaluation.
    Midpoint,
    /// Uniform jitter; each ray seeds its own stream from this seed and its
    /// detector coordinate, so a ray gets the same samples in any lattice.
    Seeded(u64),
}

impl Jitter {
    fn ray_rng(self, coord: [f64; 2]) -> Option<Rng> {
        match self {
            Jitter::Midpoint => None,
            Jitter::Seeded(seed) => Some(rng_from(&[seed, coord[0].to_bits(), coord[1].to_bits()])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPatch {
    /// `1 x M x M` normalized detector values.
    pub values: Grid3,
    pub pattern: PatchPattern,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubVolume {
    /// `Q x M x M` densities.
    pub densities: Grid3,
    /// Sample positions in the same order as `densities`.
    pub sample_coords: Vec<Vec3>,
}

/// Everything needed to push detector/density sensitivities back into the field.
#[derive(Debug, Clone)]
pub struct RenderCache {
    chunks: Vec<(usize, FieldCache)>,
    segments: Vec<f64>,
    raw_paths: Vec<f64>,
    rays: usize,
    q: usize,
    model: ProjectionModel,
    calibration: Calibration,
}

/// Output of a differentiable render over an arbitrary list of detector coordinates.
#[derive(Debug, Clone)]
pub struct RayBatchRender {
    pub pixels: Vec<f64>,
    /// `Q x R` densities, depth-major.
    pub densities: Vec<f64>,
    pub sample_coords: Vec<Vec3>,
    pub cache: RenderCache,
}

/// Field and latent pair to render.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub params: &'a FieldParams,
    pub codes: &'a LatentCodes,
}

/// Renders rays through `coords`; densities are reordered to `Q x R`.
pub fn render_rays(
    gen: Generator<'_>,
    setup: &SourceSetup,
    pose: Pose,
    coords: &[[f64; 2]],
    cfg: &RenderConfig,
    jitter: Jitter,
    calibration: Calibration,
) -> Result<RayBatchRender> {
    let q = cfg.samples_per_ray;
    let frame = Frame::new(pose, setup);
    let h = setup.volume_half_extent;
    let mut positions = Vec::with_capacity(coords.len() * q);
    let mut segments = Vec::with_capacity(coords.len() * q);
    let mut ray_lengths = Vec::with_capacity(coords.len());
    for (r, &c) in coords.iter().enumerate() {
        let ray = ray_in_frame(setup, &frame, c);
        let mut rng = jitter.ray_rng(c);
        let s = stratified_samples(&ray, q, r, rng.as_mut(), h)?;
        positions.extend_from_slice(&s.positions);
        segments.extend_from_slice(&s.segment_lengths);
        ray_lengths.push(ray.length());
    }
    let enc_xi = encode_view(&gen.params.arch, pose)?;
    let mut dens = Vec::with_capacity(positions.len());
    let mut chunks = Vec::new();
    let rays_per_chunk = (CHUNK_SAMPLES / q).max(1);
    for (ci, chunk) in positions.chunks(rays_per_chunk * q).enumerate() {
        let enc = encode_positions(&gen.params.arch, chunk, h)?;
        let (d, cache) = field_forward_batch(gen.params, &enc, &enc_xi, gen.codes)?;
        dens.extend_from_slice(&d);
        chunks.push((ci * rays_per_chunk * q, cache));
    }
    let span = calibration.span();
    let mut pixels = Vec::with_capacity(coords.len());
    let mut raw_paths = Vec::with_capacity(coords.len());
    for r in 0..coords.len() {
        let d = &dens[r * q..(r + 1) * q];
        let l = &segments[r * q..(r + 1) * q];
        let path = calibration.density_scale * composite_ray(d, l, ProjectionModel::LineIntegral)?
            + calibration.density_offset * ray_lengths[r];
        raw_paths.push(path);
        pixels.push((cfg.model.apply(path) - calibration.proj_min) / span);
    }
    let n = coords.len();
    let mut densities = vec![0.0; n * q];
    let mut sample_coords = vec![[0.0; 3]; n * q];
    for r in 0..n {
        for i in 0..q {
            densities[i * n + r] = dens[r * q + i];
            sample_coords[i * n + r] = positions[r * q + i];
        }
    }
    Ok(RayBatchRender {
        pixels,
        densities,
        sample_coords,
        cache: RenderCache { chunks, segments, raw_paths, rays: n, q, model: cfg.model, calibration },
    })
}

/// Accumulates field gradients for sensitivities on the rendered pixels
/// (`R`) and optionally on the densities (`Q x R`, depth-major).
pub fn render_backward(
    params: &FieldParams,
    cache: &RenderCache,
    d_pixels: &[f64],
    d_densities: Option<&[f64]>,
    opts: BackwardOptions,
    grads: &mut FieldGrads,
) -> Result<()> {
    let (n, q) = (cache.rays, cache.q);
    if d_pixels.len() != n || d_densities.is_some_and(|d| d.len() != n * q) {
        return Err(Error::Usage("sensitivity shapes do not match the render".into()));
    }
    let c = cache.calibration;
    let mut upstream = vec![0.0; n * q];
    for r in 0..n {
        let dpath = d_pixels[r] * cache.model.derivative(cache.raw_paths[r]) / c.span() * c.density_scale;
        for i in 0..q {
            let mut u = dpath * cache.segments[r * q + i];
            if let Some(dd) = d_densities {
                u += dd[i * n + r];
            }
            upstream[r * q + i] = u;
        }
    }
    for (start, fc) in &cache.chunks {
        field_backward(params, fc, &upstream[*start..*start + fc.len()], opts, grads)?;
    }
    Ok(())
}

/// Rendered patch, its sub-volume and the backward cache.
#[derive(Debug, Clone)]
pub struct PatchRender {
    pub patch: ProjectionPatch,
    pub sub_volume: SubVolume,
    pub cache: RenderCache,
}

pub fn render_patch(
    gen: Generator<'_>,
    setup: &SourceSetup,
    pose: Pose,
    pattern: &PatchPattern,
    cfg: &RenderConfig,
    jitter: Jitter,
    calibration: Calibration,
) -> Result<PatchRender> {
    let m = pattern.patch_size_m;
    let coords = patch_detector_coords(pattern);
    let out = render_rays(gen, setup, pose, &coords, cfg, jitter, calibration)?;
    Ok(PatchRender {
        patch: ProjectionPatch { values: Grid3::image(m, m, out.pixels), pattern: *pattern, pose },
        sub_volume: SubVolume {
            densities: Grid3::from_vec([cfg.samples_per_ray, m, m], out.densities),
            sample_coords: out.sample_coords,
        },
        cache: out.cache,
    })
}

/// Pixel-center coordinates of the whole detector, row-major.
pub fn full_detector_coords(setup: &SourceSetup) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(setup.detector_rows * setup.detector_cols);
    for r in 0..setup.detector_rows {
        for c in 0..setup.detector_cols {
            out.push([c as f64 + 0.5, r as f64 + 0.5]);
        }
    }
    out
}

/// Full `H x W` projection with its backward cache.
pub fn render_full_projection_diff(
    gen: Generator<'_>,
    setup: &SourceSetup,
    pose: Pose,
    cfg: &RenderConfig,
    jitter: Jitter,
    calibration: Calibration,
) -> Result<(Grid3, RenderCache)> {
    let coords = full_detector_coords(setup);
    let out = render_rays(gen, setup, pose, &coords, cfg, jitter, calibration)?;
    Ok((Grid3::image(setup.detector_rows, setup.detector_cols, out.pixels), out.cache))
}

pub fn render_full_projection(
    gen: Generator<'_>,
    setup: &SourceSetup,
    pose: Pose,
    cfg: &RenderConfig,
    jitter: Jitter,
    calibration: Calibration,
) -> Result<Grid3> {
    // Row by row keeps the activation caches small.
    let mut pixels = Vec::with_capacity(setup.detector_rows * setup.detector_cols);
    let coords = full_detector_coords(setup);
    let rows_per_call = (CHUNK_SAMPLES / (cfg.samples_per_ray * setup.detector_cols)).max(1);
    for chunk in coords.chunks(rows_per_call * setup.detector_cols) {
        pixels.extend(render_rays(gen, setup, pose, chunk, cfg, jitter, calibration)?.pixels);
    }
    Ok(Grid3::image(setup.detector_rows, setup.detector_cols, pixels))
}

/// Evaluates the field at voxel centers of a `D x H x W` lattice over the cube.
pub fn render_volume(gen: Generator<'_>, pose: Pose, dims: [usize; 3], half_extent: f64) -> Result<Volume> {
    let mut vol = Volume::cube(dims, half_extent)?;
    let enc_xi = encode_view(&gen.params.arch, pose)?;
    let centers: Vec<Vec3> = (0..vol.grid.len()).map(|i| vol.voxel_center_flat(i)).collect();
    let mut out = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(CHUNK_SAMPLES) {
        let enc = encode_positions(&gen.params.arch, chunk, half_extent)?;
        out.extend(field_forward_batch(gen.params, &enc, &enc_xi, gen.codes)?.0);
    }
    vol.grid.data = out;
    Ok(vol)
}

/// Exact line integrals of an analytic phantom at detector coordinates.
pub fn analytic_project(phantom: &AnalyticPhantom, setup: &SourceSetup, pose: Pose, coords: &[[f64; 2]]) -> Vec<f64> {
    let frame = Frame::new(pose, setup);
    coords
        .iter()
        .map(|&c| {
            let ray = ray_in_frame(setup, &frame, c);
            phantom.line_integral(ray.origin, ray.direction)
        })
        .collect()
}

/// Stratified quadrature of an analytic phantom's density along one ray.
pub fn stratified_phantom_path(phantom: &AnalyticPhantom, ray: &Ray, q: usize, rng: Option<&mut Rng>, half_extent: f64) -> Result<f64> {
    let s = stratified_samples(ray, q, 0, rng, half_extent)?;
    let dens: Vec<f64> = s.positions.iter().map(|&p| phantom.density_at(p)).collect();
    composite_ray(&dens, &s.segment_lengths, ProjectionModel::LineIntegral)
}

/// Trilinear samples of the true volume at sub-volume coordinates.
pub fn extract_true_subvolume(volume: &Volume, coords: &[Vec3], dims: [usize; 3]) -> Result<SubVolume> {
    if dims[0] * dims[1] * dims[2] != coords.len() {
        return Err(Error::Usage("sub-volume dims do not match the coordinate count".into()));
    }
    let data = coords.iter().map(|&p| volume.sample_checked(p)).collect::<Result<Vec<_>>>()?;
    Ok(SubVolume { densities: Grid3::from_vec(dims, data), sample_coords: coords.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{Primitive, Shape};
    use crate::field::{init_params, sample_latents, EncodingSpec, FieldArch};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn setup() -> SourceSetup {
        SourceSetup { sad: 1000.0, sid: 1500.0, detector_rows: 8, detector_cols: 8, pixel_pitch: 4.0, volume_half_extent: 40.0 }
    }

    fn arch() -> FieldArch {
        FieldArch {
            encoding: EncodingSpec { freq_count_x: 2, freq_count_xi: 1, include_raw_input: true },
            hidden_width: 8,
            shape_layers: 2,
            latent_shape_dim: 3,
            latent_app_dim: 2,
            use_view_input: true,
        }
    }

    #[test]
    fn composite_examples() {
        let l = [0.5, 0.5, 0.5];
        assert_eq!(composite_ray(&[0.0; 3], &l, ProjectionModel::LineIntegral).unwrap(), 0.0);
        assert_eq!(composite_ray(&[0.0; 3], &l, ProjectionModel::BeerLambert).unwrap(), 1.0);
        assert_eq!(composite_ray(&[1.0, 2.0, 3.0], &l, ProjectionModel::LineIntegral).unwrap(), 3.0);
        assert_eq!(composite_ray(&[2.0; 4], &[0.25; 4], ProjectionModel::LineIntegral).unwrap(), 2.0);
        assert!(matches!(composite_ray(&[-1.0], &[1.0], ProjectionModel::LineIntegral), Err(Error::Numeric(_))));
        assert!(composite_ray(&[1.0], &[1.0, 2.0], ProjectionModel::LineIntegral).is_err());
    }

    #[test]
    fn zero_field_patch_is_ln2_times_chord() {
        let s = setup();
        let p = FieldParams::zeros(arch()).unwrap();
        let codes = LatentCodes::zeros(3, 2);
        let pattern = PatchPattern { center_u: [4.0, 4.0], scale_s: 1.0, patch_size_m: 4 };
        let cfg = RenderConfig { samples_per_ray: 5, model: ProjectionModel::LineIntegral };
        let out = render_patch(Generator { params: &p, codes: &codes }, &s, Pose::ap(), &pattern, &cfg, Jitter::Seeded(3), Calibration::default()).unwrap();
        for (v, c) in out.patch.values.data.iter().zip(patch_detector_coords(&pattern)) {
            let ray = crate::geometry::ray_through_detector_coord(&s, Pose::ap(), c);
            assert_abs_diff_eq!(*v, LN_2 * ray.length(), epsilon = 1e-9);
        }
        assert_eq!(out.sub_volume.densities.dims, [5, 4, 4]);
    }

    #[test]
    fn single_ray_single_sample() {
        let s = setup();
        let mut rng = rng_from(&[1]);
        let p = init_params(&mut rng, arch()).unwrap();
        let codes = sample_latents(&mut rng, 3, 2).unwrap();
        let pattern = PatchPattern { center_u: [3.2, 5.1], scale_s: 1.0, patch_size_m: 1 };
        let cfg = RenderConfig { samples_per_ray: 1, model: ProjectionModel::LineIntegral };
        let out = render_patch(Generator { params: &p, codes: &codes }, &s, Pose::ap(), &pattern, &cfg, Jitter::Midpoint, Calibration::default()).unwrap();
        let ray = crate::geometry::ray_through_detector_coord(&s, Pose::ap(), [3.2, 5.1]);
        let d = out.sub_volume.densities.data[0];
        assert_abs_diff_eq!(out.patch.values.data[0], composite_ray(&[d], &[ray.length()], ProjectionModel::LineIntegral).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn full_projection_tiles_patches() {
        let s = setup();
        let mut rng = rng_from(&[2]);
        let p = init_params(&mut rng, arch()).unwrap();
        let codes = sample_latents(&mut rng, 3, 2).unwrap();
        let g = Generator { params: &p, codes: &codes };
        let cfg = RenderConfig { samples_per_ray: 4, model: ProjectionModel::LineIntegral };
        let pose = Pose::new(0.7, 0.1).unwrap();
        let full = render_full_projection(g, &s, pose, &cfg, Jitter::Seeded(9), Calibration::default()).unwrap();
        for (cx, cy) in [(2.0, 2.0), (6.0, 2.0), (2.0, 6.0), (6.0, 6.0)] {
            let pat = PatchPattern { center_u: [cx, cy], scale_s: 1.0, patch_size_m: 4 };
            let patch = render_patch(g, &s, pose, &pat, &cfg, Jitter::Seeded(9), Calibration::default()).unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let (fr, fc) = (cy as usize - 2 + r, cx as usize - 2 + c);
                    assert_eq!(patch.patch.values.at(0, r, c), full.at(0, fr, fc));
                }
            }
        }
        let zero = FieldParams::zeros(arch()).unwrap();
        let mut z = zero.clone();
        // A large negative output bias drives softplus to ~0.
        z.weights_mut().tensors.last_mut().unwrap().data[0] = -800.0;
        let img = render_full_projection(Generator { params: &z, codes: &codes }, &s, pose, &cfg, Jitter::Midpoint, Calibration::default()).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn volume_of_zero_field_is_constant() {
        let p = FieldParams::zeros(arch()).unwrap();
        let codes = LatentCodes::zeros(3, 2);
        let g = Generator { params: &p, codes: &codes };
        let v = render_volume(g, Pose::ap(), [3, 4, 5], 10.0).unwrap();
        assert!(v.grid.data.iter().all(|&x| (x - LN_2).abs() < 1e-15));
        let one = render_volume(g, Pose::ap(), [1, 1, 1], 10.0).unwrap();
        assert_eq!(one.voxel_center_flat(0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn analytic_chords() {
        let s = setup();
        let ph = AnalyticPhantom {
            primitives: vec![Primitive { shape: Shape::Sphere { radius: 10.0 }, center: [0.0; 3], density: 2.0 }],
        };
        let v = analytic_project(&ph, &s, Pose::ap(), &[[4.0, 4.0], [0.5, 0.5]]);
        assert_abs_diff_eq!(v[0], 40.0, epsilon = 1e-9);
        assert_eq!(v[1], 0.0);
        // Impact parameter 0.6 r.
        let unit = AnalyticPhantom {
            primitives: vec![Primitive { shape: Shape::Sphere { radius: 10.0 }, center: [6.0, 0.0, 0.0], density: 1.0 }],
        };
        let chord = unit.line_integral([0.0, -100.0, 0.0], [0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(chord, 16.0, epsilon = 1e-9);
    }

    #[test]
    fn adding_primitive_never_decreases_projection() {
        let s = setup();
        let base = AnalyticPhantom {
            primitives: vec![Primitive { shape: Shape::Sphere { radius: 12.0 }, center: [3.0, 0.0, -2.0], density: 1.0 }],
        };
        let mut more = base.clone();
        more.primitives.push(Primitive { shape: Shape::Box { half_sizes: [5.0, 8.0, 3.0] }, center: [-6.0, 4.0, 0.0], density: 0.4 });
        let coords = full_detector_coords(&s);
        for pose in [Pose::ap(), Pose::new(1.1, 0.2).unwrap()] {
            let a = analytic_project(&base, &s, pose, &coords);
            let b = analytic_project(&more, &s, pose, &coords);
            assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        }
    }
}
