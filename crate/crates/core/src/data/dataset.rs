//! Posed DRR datasets.

use std::str::FromStr;

use crate::data::phantom::AnalyticPhantom;
use crate::data::volume::{normalize_unit, NormRecord, Volume};
use crate::error::{Error, Result};
use crate::geometry::{ray_in_frame, Frame, Pose, SourceSetup};
use crate::grid::Grid3;
use crate::render::{full_detector_coords, Calibration, ProjectionModel};

/// A set of posed projections sharing one geometry and one normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    /// `1 x H x W` each.
    pub images: Vec<Grid3>,
    pub poses: Vec<Pose>,
    pub setup: SourceSetup,
    pub model: ProjectionModel,
    /// Record mapping raw detector values to the stored `[0, 1]` images.
    pub normalization: Option<NormRecord>,
    /// Record of the density volume the projections were taken through,
    /// i.e. how normalized densities map back to raw attenuation.
    pub density: Option<NormRecord>,
}

impl ProjectionSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.images.len() != self.poses.len() {
            return Err(Error::data("projection set needs one pose per image and at least one image"));
        }
        let dims = [1, self.setup.detector_rows, self.setup.detector_cols];
        if self.images.iter().any(|im| im.dims != dims || !im.all_finite()) {
            return Err(Error::data("projection images must be finite and match the detector"));
        }
        for (i, a) in self.poses.iter().enumerate() {
            if self.poses[..i].iter().any(|b| b == a) {
                return Err(Error::data("projection poses must be distinct"));
            }
        }
        if self.normalization.is_some()
            && self.images.iter().flat_map(|im| &im.data).any(|v| *v < -1e-12 || *v > 1.0 + 1e-12)
        {
            return Err(Error::data("normalized projections fall outside [0, 1]"));
        }
        Ok(())
    }

    /// Mapping from field densities to this set's stored detector values.
    pub fn calibration(&self) -> Calibration {
        let (density_scale, density_offset) = self.density.map_or((1.0, 0.0), |d| (d.span(), d.min));
        let (proj_min, proj_max) = self.normalization.map_or((0.0, 1.0), |n| (n.min, n.max));
        Calibration { density_scale, density_offset, proj_min, proj_max }
    }

    /// Keeps the views at the given indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(Error::config("view index out of range"));
        }
        Ok(Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            ..self.clone()
        })
    }
}

/// Reference-view layouts: AP only, AP + lateral, and full circles at 72, 36 and 5 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewPreset {
    One,
    Two,
    Five,
    Ten,
    SeventyTwo,
}

impl ViewPreset {
    pub const ALL: [ViewPreset; 5] = [ViewPreset::One, ViewPreset::Two, ViewPreset::Five, ViewPreset::Ten, ViewPreset::SeventyTwo];

    pub fn views(self) -> usize {
        match self {
            ViewPreset::One => 1,
            ViewPreset::Two => 2,
            ViewPreset::Five => 5,
            ViewPreset::Ten => 10,
            ViewPreset::SeventyTwo => 72,
        }
    }

    /// Angular step in degrees; the lateral view sits 90 degrees from AP.
    pub fn step_degrees(self) -> f64 {
        match self {
            ViewPreset::One => 0.0,
            ViewPreset::Two => 90.0,
            ViewPreset::Five => 72.0,
            ViewPreset::Ten => 36.0,
            ViewPreset::SeventyTwo => 5.0,
        }
    }

    pub fn poses(self) -> Vec<Pose> {
        dataset_poses(self.views(), self.step_degrees()).expect("presets are valid")
    }
}

impl FromStr for ViewPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(ViewPreset::One),
            "2" => Ok(ViewPreset::Two),
            "5" => Ok(ViewPreset::Five),
            "10" => Ok(ViewPreset::Ten),
            "72" => Ok(ViewPreset::SeventyTwo),
            other => Err(Error::config(format!("unknown view preset `{other}` (expected 1, 2, 5, 10 or 72)"))),
        }
    }
}

/// Poses at `theta = 0, step, 2 step, ...` degrees with `phi = 0`.
pub fn dataset_poses(num_views: usize, step_degrees: f64) -> Result<Vec<Pose>> {
    if num_views == 0 {
        return Err(Error::config("need at least one view"));
    }
    if num_views > 1 && (!(step_degrees > 0.0) || num_views as f64 * step_degrees > 360.0 + 1e-9) {
        return Err(Error::config("views x step must lie in (0, 360] degrees"));
    }
    (0..num_views).map(|i| Pose::from_degrees(i as f64 * step_degrees, 0.0)).collect()
}

/// What the DRRs are computed from.
#[derive(Debug, Clone, Copy)]
pub enum DrrSource<'a> {
    /// Exact projection of the analytic phantom. `density` is the record of
    /// the phantom's voxelized volume, when one is paired with it.
    Phantom { phantom: &'a AnalyticPhantom, density: Option<NormRecord> },
    /// Ray marching through a voxel volume (denormalized through its record).
    Volume(&'a Volume),
}

/// Ray-marched line integral of a voxel volume, midpoint rule with steps of
/// half the smallest voxel spacing.
pub fn march_volume(volume: &Volume, setup: &SourceSetup, pose: Pose, coords: &[[f64; 2]]) -> Vec<f64> {
    let frame = Frame::new(pose, setup);
    let step = volume.spacing.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    let (lo, hi) = volume.bounds();
    let half = (0..3).map(|a| lo[a].abs().max(hi[a].abs())).fold(0.0, f64::max);
    let rec = volume.normalization;
    coords
        .iter()
        .map(|&c| {
            let mut ray = ray_in_frame(setup, &frame, c);
            match crate::geometry::intersect_cube(ray.origin, ray.direction, half) {
                Some((n, f)) => {
                    ray.near = n;
                    ray.far = f;
                }
                None => return 0.0,
            }
            let len = ray.far - ray.near;
            let n = (len / step).ceil().max(1.0) as usize;
            let dl = len / n as f64;
            let sum: f64 = (0..n)
                .map(|i| volume.sample(ray.at(ray.near + (i as f64 + 0.5) * dl)))
                .sum::<f64>()
                * dl;
            match rec {
                Some(r) => r.span() * sum + r.min * len,
                None => sum,
            }
        })
        .collect()
}

/// Projects the source at every pose and normalizes all views jointly to `[0, 1]`.
pub fn generate_drr_for_poses(
    source: DrrSource<'_>,
    setup: &SourceSetup,
    poses: Vec<Pose>,
    model: ProjectionModel,
) -> Result<ProjectionSet> {
    setup.validate()?;
    let coords = full_detector_coords(setup);
    let (h, w) = (setup.detector_rows, setup.detector_cols);
    let mut raw = Vec::with_capacity(poses.len() * h * w);
    for &pose in &poses {
        let paths = match source {
            DrrSource::Phantom { phantom, .. } => crate::render::analytic_project(phantom, setup, pose, &coords),
            DrrSource::Volume(v) => march_volume(v, setup, pose, &coords),
        };
        raw.extend(paths.into_iter().map(|p| model.apply(p)));
    }
    let stacked = Grid3::from_vec([poses.len(), h, w], raw);
    let (norm, rec) = normalize_unit(&stacked)?;
    let images = norm.data.chunks_exact(h * w).map(|c| Grid3::image(h, w, c.to_vec())).collect();
    let density = match source {
        DrrSource::Phantom { density, .. } => density,
        DrrSource::Volume(v) => v.normalization,
    };
    let set = ProjectionSet { images, poses, setup: *setup, model, normalization: Some(rec), density };
    set.validate()?;
    Ok(set)
}

pub fn generate_drr_dataset(
    source: DrrSource<'_>,
    setup: &SourceSetup,
    num_views: usize,
    angular_step_degrees: f64,
    model: ProjectionModel,
) -> Result<ProjectionSet> {
    generate_drr_for_poses(source, setup, dataset_poses(num_views, angular_step_degrees)?, model)
}

/// Projects extra poses and stores them under an existing set's records.
pub fn project_with_records(
    source: DrrSource<'_>,
    reference: &ProjectionSet,
    poses: Vec<Pose>,
) -> Result<ProjectionSet> {
    let setup = reference.setup;
    let coords = full_detector_coords(&setup);
    let rec = reference.normalization;
    let images = poses
        .iter()
        .map(|&pose| {
            let paths = match source {
                DrrSource::Phantom { phantom, .. } => crate::render::analytic_project(phantom, &setup, pose, &coords),
                DrrSource::Volume(v) => march_volume(v, &setup, pose, &coords),
            };
            let vals = paths
                .into_iter()
                .map(|p| {
                    let v = reference.model.apply(p);
                    rec.map_or(v, |r| r.normalize(v))
                })
                .collect();
            Grid3::image(setup.detector_rows, setup.detector_cols, vals)
        })
        .collect();
    Ok(ProjectionSet { images, poses, ..reference.clone() })
}
