//! C ABI over the reconstruction pipeline.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free`. Every fallible call returns an [`SctStatus`];
//! the message of the most recent failure on the calling thread is
//! available from [`sct_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sparsect::data::dataset::{generate_drr_for_poses, DrrSource, ProjectionSet, ViewPreset};
use sparsect::data::formats::{read_projection_set, read_volume, write_projection_set, write_volume, ElementType};
use sparsect::data::phantom::{make_phantom, PhantomSpec};
use sparsect::data::volume::{normalize_unit, Volume};
use sparsect::geometry::SourceSetup;
use sparsect::inference::{compare, finetune_latents, reconstruct, InferenceConfig};
use sparsect::render::ProjectionModel;
use sparsect::rng::rng_from;
use sparsect::trainer::{load_checkpoint, TrainState};
use sparsect::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SctStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Format = 4,
    Numeric = 5,
    Usage = 6,
    Io = 7,
    Panic = 8,
}

impl From<&Error> for SctStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => SctStatus::Config,
            Error::Data(_) => SctStatus::Data,
            Error::Format { .. } => SctStatus::Format,
            Error::Numeric(_) => SctStatus::Numeric,
            Error::Usage(_) => SctStatus::Usage,
            Error::Io { .. } => SctStatus::Io,
        }
    }
}

/// Source/detector setup (mm and pixels).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SctGeometry {
    pub sad: f64,
    pub sid: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    pub pixel_pitch: f64,
    pub volume_half_extent: f64,
}

impl From<SctGeometry> for SourceSetup {
    fn from(g: SctGeometry) -> Self {
        SourceSetup {
            sad: g.sad,
            sid: g.sid,
            detector_rows: g.detector_rows,
            detector_cols: g.detector_cols,
            pixel_pitch: g.pixel_pitch,
            volume_half_extent: g.volume_half_extent,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SctMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// NaN when the truth carries no normalization record.
    pub rmse_hu: f64,
}

/// Opaque voxel volume.
pub struct SctVolume(Volume);
/// Opaque set of posed projections.
pub struct SctProjections(ProjectionSet);
/// Opaque trained model (checkpoint).
pub struct SctModel(TrainState);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), (SctStatus, String)>) -> SctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SctStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SctStatus::Panic
        }
    }
}

fn lift<T>(r: sparsect::Result<T>) -> Result<T, (SctStatus, String)> {
    r.map_err(|e| (SctStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (SctStatus, String) {
    (SctStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (SctStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| (SctStatus::Usage, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Copies the last error message (NUL-terminated, truncated to `len`) into
/// `buf`; returns the full message length in bytes. Pass a null `buf` to
/// query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sct_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_read(path: *const c_char, out: *mut *mut SctVolume) -> SctStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, SctVolume(lift(read_volume(p))?));
        Ok(())
    })
}

/// Writes 64-bit voxels.
///
/// # Safety
/// `volume` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_write(volume: *const SctVolume, path: *const c_char) -> SctStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| null("volume"))?;
        let p = path_arg(path, "path")?;
        lift(write_volume(p, &v.0, ElementType::F64))
    })
}

/// Writes `(depth, height, width)` into `dims`.
///
/// # Safety
/// `volume` must come from this library; `dims` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_dims(volume: *const SctVolume, dims: *mut usize) -> SctStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| null("volume"))?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        for (i, d) in v.0.dims().iter().enumerate() {
            *dims.add(i) = *d;
        }
        Ok(())
    })
}

/// Copies the voxels (z, y, x order) into `data`, which must hold exactly
/// the voxel count.
///
/// # Safety
/// `data` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_copy_data(volume: *const SctVolume, data: *mut f64, len: usize) -> SctStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| null("volume"))?;
        if data.is_null() {
            return Err(null("data"));
        }
        if len != v.0.grid.len() {
            return Err((SctStatus::Usage, format!("buffer holds {len} values, volume has {}", v.0.grid.len())));
        }
        ptr::copy_nonoverlapping(v.0.grid.data.as_ptr(), data, len);
        Ok(())
    })
}

/// # Safety
/// `volume` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_free(volume: *mut SctVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Random analytic phantom voxelized on an `n^3` grid and normalized to `[0, 1]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_phantom_make(seed: u64, n: usize, half_extent: f64, out: *mut *mut SctVolume) -> SctStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = PhantomSpec { grid: [n, n, n], ..PhantomSpec::default() };
        let (_, raw) = lift(make_phantom(&spec, half_extent, &mut rng_from(&[seed, 0x9a])))?;
        let (grid, rec) = lift(normalize_unit(&raw.grid))?;
        put(out, SctVolume(Volume { grid, normalization: Some(rec), ..raw }));
        Ok(())
    })
}

/// Ray-marched DRRs of `volume` at a view preset (1, 2, 5, 10 or 72).
///
/// # Safety
/// `volume` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_drr_generate(
    volume: *const SctVolume,
    geometry: SctGeometry,
    preset: u32,
    out: *mut *mut SctProjections,
) -> SctStatus {
    guard(|| {
        let v = volume.as_ref().ok_or_else(|| null("volume"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let preset: ViewPreset = lift(preset.to_string().parse())?;
        let set = lift(generate_drr_for_poses(DrrSource::Volume(&v.0), &geometry.into(), preset.poses(), ProjectionModel::LineIntegral))?;
        put(out, SctProjections(set));
        Ok(())
    })
}

/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_projections_read(dir: *const c_char, out: *mut *mut SctProjections) -> SctStatus {
    guard(|| {
        let p = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, SctProjections(lift(read_projection_set(p))?));
        Ok(())
    })
}

/// # Safety
/// `set` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sct_projections_write(set: *const SctProjections, dir: *const c_char) -> SctStatus {
    guard(|| {
        let s = set.as_ref().ok_or_else(|| null("set"))?;
        let p = path_arg(dir, "dir")?;
        lift(write_projection_set(p, &s.0, ElementType::F64))
    })
}

/// Number of views, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sct_projections_len(set: *const SctProjections) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sct_projections_free(set: *mut SctProjections) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Loads a training checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_model_load(dir: *const c_char, out: *mut *mut SctModel) -> SctStatus {
    guard(|| {
        let p = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, SctModel(lift(load_checkpoint(&p))?));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sct_model_free(model: *mut SctModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fits latents to `references` with default inference settings (at most
/// `max_iterations` steps) and renders an `n^3` volume.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_reconstruct(
    model: *const SctModel,
    references: *const SctProjections,
    max_iterations: usize,
    n: usize,
    out: *mut *mut SctVolume,
) -> SctStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = references.as_ref().ok_or_else(|| null("references"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = InferenceConfig { max_iterations, grid: [n, n, n], ..InferenceConfig::default() };
        let state = &m.0;
        let fit = lift(finetune_latents(&state.generator, &state.latent_init(), &r.0, &state.config.render(r.0.model), &cfg))?;
        let vol = lift(reconstruct(&state.generator, &fit.codes, r.0.poses[0], cfg.grid, r.0.setup.volume_half_extent, r.0.density))?;
        put(out, SctVolume(vol));
        Ok(())
    })
}

/// PSNR, global SSIM and RMSE of `pred` against `truth`.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sct_volume_compare(pred: *const SctVolume, truth: *const SctVolume, out: *mut SctMetrics) -> SctStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("pred"))?;
        let t = truth.as_ref().ok_or_else(|| null("truth"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if p.0.dims() != t.0.dims() {
            return Err((SctStatus::Data, "volume shapes differ".into()));
        }
        let m = lift(compare(&p.0.grid.data, &t.0.grid.data, t.0.normalization))?;
        *out = SctMetrics { psnr_db: m.psnr_db, ssim: m.ssim, rmse: m.rmse, rmse_hu: m.rmse_hu.unwrap_or(f64::NAN) };
        Ok(())
    })
}
