#![allow(dead_code)]

use rand::Rng;
use sparsect::field::{init_params, sample_latents, EncodingSpec, FieldArch, FieldParams, LatentCodes};
use sparsect::geometry::SourceSetup;
use sparsect::rng::rng_from;

pub fn small_setup() -> SourceSetup {
    SourceSetup { sad: 1000.0, sid: 1500.0, detector_rows: 16, detector_cols: 16, pixel_pitch: 8.0, volume_half_extent: 40.0 }
}

pub fn small_arch() -> FieldArch {
    FieldArch {
        encoding: EncodingSpec { freq_count_x: 2, freq_count_xi: 1, include_raw_input: true },
        hidden_width: 8,
        shape_layers: 2,
        latent_shape_dim: 3,
        latent_app_dim: 2,
        use_view_input: true,
    }
}

/// Random small architecture plus perturbed weights, so biases are not all zero.
pub fn random_field(seed: u64) -> (FieldParams, LatentCodes) {
    let mut rng = rng_from(&[seed, 0xf1e1d]);
    let arch = FieldArch {
        encoding: EncodingSpec {
            freq_count_x: rng.random_range(1..=3),
            freq_count_xi: rng.random_range(0..=2),
            include_raw_input: rng.random_bool(0.5),
        },
        hidden_width: rng.random_range(4..=10),
        shape_layers: rng.random_range(1..=3),
        latent_shape_dim: rng.random_range(1..=4),
        latent_app_dim: rng.random_range(1..=4),
        use_view_input: rng.random_bool(0.5),
    };
    let mut params = init_params(&mut rng, arch).unwrap();
    for t in &mut params.weights_mut().tensors {
        for v in &mut t.data {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let codes = sample_latents(&mut rng, arch.latent_shape_dim, arch.latent_app_dim).unwrap();
    (params, codes)
}

/// Symmetric relative error; gradients below `floor` in magnitude are
/// compared on an absolute scale of `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` w.r.t. every field weight and latent entry,
/// in the order weights, z_shape, z_appearance.
pub fn numeric_gradient(
    params: &FieldParams,
    codes: &LatentCodes,
    h: f64,
    f: impl Fn(&FieldParams, &LatentCodes) -> f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    let n = params.weights.num_scalars();
    for i in 0..n {
        let mut p = params.clone();
        let w0 = *p.weights_mut().scalar_mut(i);
        *p.weights_mut().scalar_mut(i) = w0 + h;
        let up = f(&p, codes);
        *p.weights_mut().scalar_mut(i) = w0 - h;
        let down = f(&p, codes);
        out.push((up - down) / (2.0 * h));
    }
    let ns = codes.z_shape.len();
    let flat: Vec<f64> = codes.z_shape.iter().chain(&codes.z_appearance).copied().collect();
    let rebuild = |v: &[f64]| LatentCodes { z_shape: v[..ns].to_vec(), z_appearance: v[ns..].to_vec() };
    for i in 0..flat.len() {
        let mut v = flat.clone();
        v[i] = flat[i] + h;
        let up = f(params, &rebuild(&v));
        v[i] = flat[i] - h;
        let down = f(params, &rebuild(&v));
        out.push((up - down) / (2.0 * h));
    }
    out
}

use sparsect::data::dataset::{generate_drr_for_poses, DrrSource};
use sparsect::data::phantom::{make_phantom, PhantomSpec};
use sparsect::data::volume::{normalize_unit, Volume};
use sparsect::geometry::Pose;
use sparsect::render::ProjectionModel;
use sparsect::trainer::{TrainConfig, TrainingData, TrainingSubject};

/// 16^3 random phantom, normalized, with its analytic DRRs at `angles` degrees.
pub fn tiny_subject(seed: u64, angles: &[f64]) -> TrainingSubject {
    let spec = PhantomSpec { grid: [16, 16, 16], ..PhantomSpec::default() };
    let setup = small_setup();
    let (phantom, raw) = make_phantom(&spec, setup.volume_half_extent, &mut rng_from(&[seed])).unwrap();
    let (grid, rec) = normalize_unit(&raw.grid).unwrap();
    let volume = Volume { grid, normalization: Some(rec), ..raw };
    let poses = angles.iter().map(|&a| Pose::from_degrees(a, 0.0).unwrap()).collect();
    let projections = generate_drr_for_poses(
        DrrSource::Phantom { phantom: &phantom, density: Some(rec) },
        &setup,
        poses,
        ProjectionModel::LineIntegral,
    )
    .unwrap();
    TrainingSubject { projections, volume: Some(volume) }
}

pub fn tiny_data() -> TrainingData {
    TrainingData { subjects: vec![tiny_subject(1, &[0.0, 90.0, 180.0, 270.0]), tiny_subject(2, &[0.0, 45.0, 90.0])] }
}

pub fn tiny_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        iterations,
        patch_m: 8,
        samples_per_ray: 8,
        seed: 11,
        field: small_arch(),
        volume_discriminator_channels: [2, 3, 4],
        image_discriminator_channels: [2, 3, 4],
        ..TrainConfig::default()
    }
}
