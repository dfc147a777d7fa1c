//! Cone-beam acquisition geometry.
//!
//! World frame: right-handed, isocenter at the origin, reconstruction cube
//! `[-h, h]^3` axis-aligned. At `theta = 0` the source sits on the `-y` axis
//! (anterior-posterior view); increasing `theta` moves it clockwise when seen
//! from `+z`, and `phi` lifts it toward `+z`. The flat detector is
//! perpendicular to the principal ray at distance `sid` from the source.
//!
//! Detector coordinates are continuous pixel units `(x', y')`: column then
//! row, pixel `(0, 0)` is the top-left corner seen from the source and its
//! center is `(0.5, 0.5)`.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Source/detector setup: distances in mm, detector in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSetup {
    /// Source to isocenter.
    pub sad: f64,
    /// Source to detector.
    pub sid: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Detector pixel pitch in mm.
    pub pixel_pitch: f64,
    /// Half-width of the reconstruction cube in mm.
    pub volume_half_extent: f64,
}

impl SourceSetup {
    pub fn validate(&self) -> Result<()> {
        let ok = |c: bool, msg: &str| if c { Ok(()) } else { Err(Error::config(msg.to_string())) };
        ok(self.sad > 0.0 && self.sad.is_finite(), "sad must be positive")?;
        ok(self.sid > self.sad && self.sid.is_finite(), "sid must exceed sad")?;
        ok(self.detector_rows >= 1 && self.detector_cols >= 1, "detector needs at least one pixel")?;
        ok(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite(), "pixel_pitch must be positive")?;
        ok(
            self.volume_half_extent > 0.0 && self.volume_half_extent.is_finite(),
            "volume_half_extent must be positive",
        )?;
        // The cube's circumscribed sphere must clear both source and detector at every pose.
        let radius = self.volume_half_extent * 3f64.sqrt();
        ok(
            radius < self.sad && radius < self.sid - self.sad,
            "reconstruction cube does not fit between source and detector",
        )
    }

    /// Ratio `min(H, W) / M`, the upper bound of the patch stride.
    pub fn max_patch_scale(&self, m: usize) -> f64 {
        self.detector_rows.min(self.detector_cols) as f64 / m as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta: f64,
    pub phi: f64,
}

impl Pose {
    /// Builds a pose, wrapping `theta` into `[0, 2pi)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::config("pose angles must be finite"));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&phi) {
            return Err(Error::config(format!("phi {phi} outside [-pi/2, pi/2]")));
        }
        let mut theta = theta.rem_euclid(TAU);
        if theta >= TAU {
            theta = 0.0;
        }
        Ok(Self { theta, phi })
    }

    pub fn from_degrees(theta_deg: f64, phi_deg: f64) -> Result<Self> {
        Self::new(theta_deg.to_radians(), phi_deg.to_radians())
    }

    pub fn ap() -> Self {
        Self { theta: 0.0, phi: 0.0 }
    }

    pub fn theta_degrees(&self) -> f64 {
        self.theta.to_degrees()
    }
}

/// Discrete pose distribution with sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDistribution {
    poses: Vec<Pose>,
    cumulative: Vec<f64>,
}

impl PoseDistribution {
    pub fn uniform(poses: Vec<Pose>) -> Result<Self> {
        let w = vec![1.0; poses.len()];
        Self::weighted(poses, w)
    }

    pub fn weighted(poses: Vec<Pose>, weights: Vec<f64>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::config("pose distribution must not be empty"));
        }
        if weights.len() != poses.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("pose weights must be finite, nonnegative, one per pose"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("pose weights sum to zero"));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self { poses, cumulative })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.cumulative[i] - if i == 0 { 0.0 } else { self.cumulative[i - 1] }
    }

    /// Draws a pose index.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.poses.len() - 1)
    }
}

/// Orthonormal source/detector frame for one pose.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub source: Vec3,
    /// Unit vector from the source toward the isocenter.
    pub forward: Vec3,
    /// Detector column direction.
    pub right: Vec3,
    /// Detector "up" direction; rows grow along `-up`.
    pub up: Vec3,
    pub detector_center: Vec3,
}

impl Frame {
    pub fn new(pose: Pose, setup: &SourceSetup) -> Self {
        let source = source_position(pose, setup);
        let forward = scale(source, -1.0 / setup.sad);
        let right = [pose.theta.cos(), -pose.theta.sin(), 0.0];
        let up = cross(right, forward);
        let detector_center = add(source, scale(forward, setup.sid));
        Self { source, forward, right, up, detector_center }
    }

    /// 3-D point on the detector plane for a continuous detector coordinate.
    pub fn detector_point(&self, setup: &SourceSetup, coord: [f64; 2]) -> Vec3 {
        let du = (coord[0] - setup.detector_cols as f64 / 2.0) * setup.pixel_pitch;
        let dv = (coord[1] - setup.detector_rows as f64 / 2.0) * setup.pixel_pitch;
        add(self.detector_center, sub(scale(self.right, du), scale(self.up, dv)))
    }
}

pub fn source_position(pose: Pose, setup: &SourceSetup) -> Vec3 {
    let (st, ct) = pose.theta.sin_cos();
    let (sp, cp) = pose.phi.sin_cos();
    [-setup.sad * st * cp, -setup.sad * ct * cp, setup.sad * sp]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    /// False when the ray misses the reconstruction cube (`near == far`).
    pub hits_volume: bool,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }

    pub fn length(&self) -> f64 {
        self.far - self.near
    }
}

/// Slab intersection of `origin + t * dir` (t >= 0) with `[-h, h]^3`.
pub fn intersect_cube(origin: Vec3, direction: Vec3, h: f64) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if direction[a].abs() < 1e-300 {
            if origin[a] < -h || origin[a] > h {
                return None;
            }
            continue;
        }
        let inv = 1.0 / direction[a];
        let (mut lo, mut hi) = ((-h - origin[a]) * inv, (h - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

pub fn ray_through_detector_coord(setup: &SourceSetup, pose: Pose, coord: [f64; 2]) -> Ray {
    ray_in_frame(setup, &Frame::new(pose, setup), coord)
}

/// Same as [`ray_through_detector_coord`] with a precomputed frame.
pub fn ray_in_frame(setup: &SourceSetup, frame: &Frame, coord: [f64; 2]) -> Ray {
    let target = frame.detector_point(setup, coord);
    let d = sub(target, frame.source);
    let direction = scale(d, 1.0 / norm(d));
    match intersect_cube(frame.source, direction, setup.volume_half_extent) {
        Some((near, far)) => Ray { origin: frame.source, direction, near, far, hits_volume: true },
        None => {
            // Park the degenerate ray at its point of closest approach.
            let t = -dot(frame.source, direction);
            Ray { origin: frame.source, direction, near: t, far: t, hits_volume: false }
        }
    }
}

/// Patch sampling pattern `v = (u, s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPattern {
    pub center_u: [f64; 2],
    pub scale_s: f64,
    pub patch_size_m: usize,
}

impl PatchPattern {
    /// Lattice covering every pixel center of the detector at stride 1.
    /// Only square detectors are covered by a single `M x M` pattern.
    pub fn full_detector(setup: &SourceSetup) -> Result<Self> {
        if setup.detector_rows != setup.detector_cols {
            return Err(Error::config("full-detector pattern needs a square detector"));
        }
        Ok(Self {
            center_u: [setup.detector_cols as f64 / 2.0, setup.detector_rows as f64 / 2.0],
            scale_s: 1.0,
            patch_size_m: setup.detector_cols,
        })
    }
}

/// Pixel-center hull `[0.5, W - 0.5] x [0.5, H - 0.5]` of the detector.
pub fn detector_domain(setup: &SourceSetup) -> ([f64; 2], [f64; 2]) {
    ([0.5, 0.5], [setup.detector_cols as f64 - 0.5, setup.detector_rows as f64 - 0.5])
}

pub fn in_detector_domain(setup: &SourceSetup, c: [f64; 2]) -> bool {
    let (lo, hi) = detector_domain(setup);
    let tol = 1e-9;
    c[0] >= lo[0] - tol && c[0] <= hi[0] + tol && c[1] >= lo[1] - tol && c[1] <= hi[1] + tol
}

pub fn sample_patch_pattern<R: Rng + ?Sized>(rng: &mut R, setup: &SourceSetup, m: usize) -> Result<PatchPattern> {
    let min_side = setup.detector_rows.min(setup.detector_cols);
    if m == 0 || m > min_side {
        return Err(Error::config(format!("patch size {m} must lie in 1..={min_side}")));
    }
    let s_max = setup.max_patch_scale(m);
    let scale_s = if s_max <= 1.0 { 1.0 } else { rng.random_range(1.0..=s_max) };
    let half = (m as f64 - 1.0) / 2.0 * scale_s;
    let (lo, hi) = detector_domain(setup);
    let mut center = [0.0; 2];
    for a in 0..2 {
        let (a_lo, a_hi) = (lo[a] + half, hi[a] - half);
        center[a] = if a_hi > a_lo { rng.random_range(a_lo..=a_hi) } else { 0.5 * (a_lo + a_hi) };
    }
    Ok(PatchPattern { center_u: center, scale_s, patch_size_m: m })
}

/// Row-major `M x M` lattice of detector coordinates, `[x', y']` each.
pub fn patch_detector_coords(pattern: &PatchPattern) -> Vec<[f64; 2]> {
    let m = pattern.patch_size_m;
    let offset = (m as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(m * m);
    for r in 0..m {
        for c in 0..m {
            out.push([
                pattern.center_u[0] + (c as f64 - offset) * pattern.scale_s,
                pattern.center_u[1] + (r as f64 - offset) * pattern.scale_s,
            ]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub ts: Vec<f64>,
    pub segment_lengths: Vec<f64>,
    pub ray_index: usize,
}

/// `q` stratified samples over `[near, far]`: one per equal bin, uniformly
/// jittered when an rng is given, at bin midpoints otherwise.
pub fn stratified_samples<R: Rng + ?Sized>(
    ray: &Ray,
    q: usize,
    ray_index: usize,
    rng: Option<&mut R>,
    half_extent: f64,
) -> Result<RaySamples> {
    if q == 0 {
        return Err(Error::config("samples per ray must be at least 1"));
    }
    if !ray.hits_volume || ray.far <= ray.near {
        let p = ray.at(ray.near).map(|c| c.clamp(-half_extent, half_extent));
        return Ok(RaySamples {
            positions: vec![p; q],
            ts: vec![ray.near; q],
            segment_lengths: vec![0.0; q],
            ray_index,
        });
    }
    let width = (ray.far - ray.near) / q as f64;
    let mut ts = Vec::with_capacity(q);
    match rng {
        Some(rng) => {
            for i in 0..q {
                let u: f64 = rng.random();
                ts.push(ray.near + (i as f64 + u) * width);
            }
        }
        None => ts.extend((0..q).map(|i| ray.near + (i as f64 + 0.5) * width)),
    }
    let positions = ts.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySamples { positions, ts, segment_lengths: vec![width; q], ray_index })
}
