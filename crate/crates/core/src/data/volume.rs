use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grid::Grid3;

/// Affine `[0, 1]` normalization record: `normalized = (raw - min) / (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub min: f64,
    pub max: f64,
}

impl NormRecord {
    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.span()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.span() + self.min
    }
}

/// Maps a tensor to `[0, 1]` and returns the record needed to undo it.
pub fn normalize_unit(grid: &Grid3) -> Result<(Grid3, NormRecord)> {
    if !grid.all_finite() || grid.is_empty() {
        return Err(Error::data("cannot normalize an empty or non-finite tensor"));
    }
    let (min, max) = grid.min_max();
    if !(max > min) {
        return Err(Error::data(format!("cannot normalize a constant tensor (value {min})")));
    }
    let rec = NormRecord { min, max };
    Ok((grid.map(|v| rec.normalize(v)), rec))
}

pub fn denormalize(grid: &Grid3, rec: NormRecord) -> Grid3 {
    grid.map(|v| rec.denormalize(v))
}

/// Voxel grid `(z, y, x)` with physical placement. `spacing` and `origin`
/// are in world `(x, y, z)` order; `origin` is the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid3,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub normalization: Option<NormRecord>,
}

impl Volume {
    /// Zero volume whose voxels tile the cube `[-h, h]^3` exactly.
    pub fn cube(dims: [usize; 3], half_extent: f64) -> Result<Self> {
        if dims.contains(&0) || !(half_extent > 0.0) {
            return Err(Error::config("volume dims must be positive and half extent > 0"));
        }
        // dims are (d, h, w) = (z, y, x)
        let spacing = [
            2.0 * half_extent / dims[2] as f64,
            2.0 * half_extent / dims[1] as f64,
            2.0 * half_extent / dims[0] as f64,
        ];
        let origin = spacing.map(|s| -half_extent + s / 2.0);
        Ok(Self { grid: Grid3::zeros(dims), spacing, origin, normalization: None })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.grid.all_finite() {
            return Err(Error::data("volume contains non-finite voxels"));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::data("volume spacing must be positive"));
        }
        if self.normalization.is_some() {
            let (lo, hi) = self.grid.min_max();
            if lo < -1e-12 || hi > 1.0 + 1e-12 {
                return Err(Error::data("normalized volume has values outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn voxel_center(&self, z: usize, y: usize, x: usize) -> Vec3 {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_center_flat(&self, i: usize) -> Vec3 {
        let [_, h, w] = self.grid.dims;
        self.voxel_center(i / (h * w), (i / w) % h, i % w)
    }

    /// Outer faces of the voxel lattice.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let n = [self.grid.dims[2], self.grid.dims[1], self.grid.dims[0]];
        let lo = [0, 1, 2].map(|a| self.origin[a] - self.spacing[a] / 2.0);
        let hi = [0, 1, 2].map(|a| self.origin[a] + (n[a] as f64 - 0.5) * self.spacing[a]);
        (lo, hi)
    }

    /// Trilinear interpolation between voxel centers, clamped at the lattice edge.
    pub fn sample(&self, p: Vec3) -> f64 {
        let n = [self.grid.dims[2], self.grid.dims[1], self.grid.dims[0]];
        let mut i0 = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let c = ((p[a] - self.origin[a]) / self.spacing[a]).clamp(0.0, (n[a] - 1) as f64);
            let base = (c.floor() as usize).min(n[a].saturating_sub(2));
            i0[a] = base;
            f[a] = if n[a] == 1 { 0.0 } else { c - base as f64 };
        }
        let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(n[a] - 1));
        let g = &self.grid;
        let mut acc = 0.0;
        for (dz, wz) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * g.at(dz, dy, dx);
                }
            }
        }
        acc
    }

    /// As [`Volume::sample`], but rejects points outside the voxel lattice.
    pub fn sample_checked(&self, p: Vec3) -> Result<f64> {
        let (lo, hi) = self.bounds();
        let tol = 1e-9 * (hi[0] - lo[0]).abs().max(1.0);
        for a in 0..3 {
            if p[a] < lo[a] - tol || p[a] > hi[a] + tol || !p[a].is_finite() {
                return Err(Error::Usage(format!("coordinate {p:?} lies outside the volume")));
            }
        }
        Ok(self.sample(p))
    }
}

/// Trilinear resampling that keeps the physical extent.
pub fn resample_volume(volume: &Volume, dims: [usize; 3]) -> Result<Volume> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::config("resample target needs at least 2 voxels per axis"));
    }
    if dims == volume.grid.dims {
        return Ok(volume.clone());
    }
    let (lo, hi) = volume.bounds();
    let n = [dims[2], dims[1], dims[0]];
    let spacing = [0, 1, 2].map(|a| (hi[a] - lo[a]) / n[a] as f64);
    let origin = [0, 1, 2].map(|a| lo[a] + spacing[a] / 2.0);
    let mut out = Volume { grid: Grid3::zeros(dims), spacing, origin, normalization: volume.normalization };
    for i in 0..out.grid.len() {
        let c = out.voxel_center_flat(i);
        out.grid.data[i] = volume.sample(c);
    }
    Ok(out)
}

/// Where a crop came from, so it can be undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub offset: [usize; 3],
    pub original_dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cropped {
    pub grid: Grid3,
    pub record: CropRecord,
    /// Nothing exceeded the threshold; `grid` is the untouched input.
    pub empty: bool,
}

/// Smallest axis-aligned box holding every value above `threshold`.
pub fn crop_black_border(grid: &Grid3, threshold: f64) -> Result<Cropped> {
    if !(threshold >= 0.0) {
        return Err(Error::config("crop threshold must be nonnegative"));
    }
    let [d, h, w] = grid.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if grid.at(z, y, x) > threshold {
                    any = true;
                    for (a, v) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    let full = CropRecord { offset: [0; 3], original_dims: grid.dims };
    if !any {
        return Ok(Cropped { grid: grid.clone(), record: full, empty: true });
    }
    let dims = [0, 1, 2].map(|a| hi[a] - lo[a] + 1);
    let mut out = Grid3::zeros(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let src = grid.index(z + lo[0], y + lo[1], lo[2]);
            let dst = out.index(z, y, 0);
            out.data[dst..dst + dims[2]].copy_from_slice(&grid.data[src..src + dims[2]]);
        }
    }
    Ok(Cropped { grid: out, record: CropRecord { offset: lo, original_dims: grid.dims }, empty: false })
}

/// Places a cropped grid back into its original frame, padding with `fill`.
pub fn uncrop(cropped: &Grid3, record: &CropRecord, fill: f64) -> Grid3 {
    let mut out = Grid3::filled(record.original_dims, fill);
    let [d, h, w] = cropped.dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.set(z + record.offset[0], y + record.offset[1], x + record.offset[2], cropped.at(z, y, x));
            }
        }
    }
    out
}
