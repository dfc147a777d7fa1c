//! Synthetic phantoms, DRR datasets, preprocessing and file formats.

pub mod dataset;
pub mod formats;
pub mod phantom;
pub mod volume;

pub use dataset::{generate_drr_dataset, DrrSource, ProjectionSet, ViewPreset};
pub use phantom::{make_phantom, AnalyticPhantom, PhantomSpec, Primitive, Shape};
pub use volume::{crop_black_border, normalize_unit, resample_volume, CropRecord, NormRecord, Volume};
