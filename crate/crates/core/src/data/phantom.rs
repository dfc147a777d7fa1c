//! Analytic phantoms built from additive spheres, boxes and axis-aligned
//! ellipsoids, with exact chord lengths for the reference projector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::geometry::{dot, sub, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_sizes: [f64; 3] },
    Ellipsoid { semi_axes: [f64; 3] },
}

impl Shape {
    /// Half-size of the axis-aligned bounding box.
    pub fn extent(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_sizes } => half_sizes,
            Shape::Ellipsoid { semi_axes } => semi_axes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: Vec3,
    pub density: f64,
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.center);
        match self.shape {
            Shape::Sphere { radius } => dot(d, d) <= radius * radius,
            Shape::Box { half_sizes } => (0..3).all(|a| d[a].abs() <= half_sizes[a]),
            Shape::Ellipsoid { semi_axes } => (0..3).map(|a| (d[a] / semi_axes[a]).powi(2)).sum::<f64>() <= 1.0,
        }
    }

    /// Length of `origin + t * dir` (t >= 0, `dir` unit) inside the primitive.
    pub fn chord(&self, origin: Vec3, dir: Vec3) -> f64 {
        let o = sub(origin, self.center);
        let (t0, t1) = match self.shape {
            Shape::Sphere { radius } => match quadratic_span(o, dir, [radius; 3]) {
                Some(s) => s,
                None => return 0.0,
            },
            Shape::Ellipsoid { semi_axes } => match quadratic_span(o, dir, semi_axes) {
                Some(s) => s,
                None => return 0.0,
            },
            Shape::Box { half_sizes } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if o[a].abs() > half_sizes[a] {
                            return 0.0;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((-half_sizes[a] - o[a]) / dir[a], (half_sizes[a] - o[a]) / dir[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                (t0, t1)
            }
        };
        (t1 - t0.max(0.0)).max(0.0)
    }
}

/// Parameter interval inside the axis-aligned ellipsoid with `axes`, centered at the origin.
fn quadratic_span(o: Vec3, dir: Vec3, axes: [f64; 3]) -> Option<(f64, f64)> {
    let os = [0, 1, 2].map(|a| o[a] / axes[a]);
    let ds = [0, 1, 2].map(|a| dir[a] / axes[a]);
    let a = dot(ds, ds);
    let b = dot(os, ds);
    let c = dot(os, os) - 1.0;
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let r = disc.sqrt();
    Some(((-b - r) / a, (-b + r) / a))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPhantom {
    pub primitives: Vec<Primitive>,
}

impl AnalyticPhantom {
    pub fn validate(&self, half_extent: f64) -> Result<()> {
        for p in &self.primitives {
            if !(p.density >= 0.0) || !p.density.is_finite() {
                return Err(Error::data("phantom densities must be finite and nonnegative"));
            }
            let e = p.shape.extent();
            if e.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::data("primitive sizes must be positive"));
            }
            if (0..3).any(|a| p.center[a].abs() + e[a] > half_extent + 1e-9) {
                return Err(Error::data("primitive extends outside the reconstruction cube"));
            }
        }
        Ok(())
    }

    pub fn density_at(&self, p: Vec3) -> f64 {
        self.primitives.iter().filter(|q| q.contains(p)).map(|q| q.density).sum()
    }

    pub fn line_integral(&self, origin: Vec3, dir: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.density * q.chord(origin, dir)).sum()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::data(format!("cannot encode phantom: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::data(format!("cannot parse phantom: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Ellipsoid,
}

/// Recipe for random phantoms. Sizes are fractions of the cube half-extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub density_min: f64,
    pub density_max: f64,
    pub size_frac_min: f64,
    pub size_frac_max: f64,
    pub shapes: Vec<ShapeKind>,
    /// Voxel grid `(d, h, w)`.
    pub grid: [usize; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            count_min: 2,
            count_max: 4,
            density_min: 0.3,
            density_max: 1.0,
            size_frac_min: 0.15,
            size_frac_max: 0.45,
            shapes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Ellipsoid],
            grid: [32, 32, 32],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("phantom spec: {m}")));
        if self.count_min > self.count_max {
            return bad("count_min exceeds count_max");
        }
        if !(0.0 <= self.density_min && self.density_min <= self.density_max) {
            return bad("density range must be nonnegative and ordered");
        }
        if !(0.0 < self.size_frac_min && self.size_frac_min <= self.size_frac_max && self.size_frac_max < 1.0) {
            return bad("size fractions must satisfy 0 < min <= max < 1");
        }
        if self.count_max > 0 && self.shapes.is_empty() {
            return bad("no shapes to draw from");
        }
        if self.grid.contains(&0) {
            return bad("grid dims must be positive");
        }
        Ok(())
    }
}

pub fn random_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, half_extent: f64, rng: &mut R) -> Result<AnalyticPhantom> {
    spec.validate()?;
    let count = rng.random_range(spec.count_min..=spec.count_max);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut size = || half_extent * rng.random_range(spec.size_frac_min..=spec.size_frac_max);
        let shape = match kind {
            ShapeKind::Sphere => Shape::Sphere { radius: size() },
            ShapeKind::Box => Shape::Box { half_sizes: [size(), size(), size()] },
            ShapeKind::Ellipsoid => Shape::Ellipsoid { semi_axes: [size(), size(), size()] },
        };
        let e = shape.extent();
        let center = [0, 1, 2].map(|a| {
            let room = half_extent - e[a];
            if room > 0.0 { rng.random_range(-room..=room) } else { 0.0 }
        });
        let density = rng.random_range(spec.density_min..=spec.density_max);
        primitives.push(Primitive { shape, center, density });
    }
    Ok(AnalyticPhantom { primitives })
}

/// Center-point voxelization, averaging a 2x2x2 sub-sample wherever the
/// sub-samples disagree (primitive boundaries).
pub fn voxelize(phantom: &AnalyticPhantom, dims: [usize; 3], half_extent: f64) -> Result<Volume> {
    let mut vol = Volume::cube(dims, half_extent)?;
    let sp = vol.spacing;
    for i in 0..vol.grid.len() {
        let c = vol.voxel_center_flat(i);
        let mut subs = [0.0; 8];
        for (k, s) in subs.iter_mut().enumerate() {
            let off = [(k & 1) as f64, ((k >> 1) & 1) as f64, ((k >> 2) & 1) as f64];
            let p = [0, 1, 2].map(|a| c[a] + (off[a] - 0.5) * sp[a] / 2.0);
            *s = phantom.density_at(p);
        }
        vol.grid.data[i] = if subs.iter().all(|&s| s == subs[0]) {
            phantom.density_at(c)
        } else {
            subs.iter().sum::<f64>() / 8.0
        };
    }
    Ok(vol)
}

/// Random phantom plus its voxelization on `spec.grid`.
pub fn make_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, half_extent: f64, rng: &mut R) -> Result<(AnalyticPhantom, Volume)> {
    let ph = random_phantom(spec, half_extent, rng)?;
    let vol = voxelize(&ph, spec.grid, half_extent)?;
    Ok((ph, vol))
}
