//! Run configuration and the subcommand bodies behind the executable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::dataset::{generate_drr_for_poses, DrrSource, ProjectionSet, ViewPreset};
use crate::data::formats::{read_projection_set, read_volume, write_projection_set, write_volume, ElementType, TensorArchive};
use crate::data::phantom::{make_phantom, AnalyticPhantom, PhantomSpec};
use crate::data::volume::{normalize_unit, Volume};
use crate::error::{Error, Result};
use crate::field::LatentCodes;
use crate::geometry::SourceSetup;
use crate::inference::{finetune_latents, reconstruct, InferenceConfig, MetricReport};
use crate::render::ProjectionModel;
use crate::rng::rng_from;
use crate::trainer::{load_checkpoint, train, TrainConfig, TrainState, TrainingData, TrainingSubject};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const VOLUME_FILE: &str = "volume.vol";
pub const PHANTOM_FILE: &str = "phantom.toml";
pub const PROJECTIONS_DIR: &str = "projections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrrConfig {
    /// View preset: 1, 2, 5, 10 or 72.
    pub views: u32,
    pub model: ProjectionModel,
}

impl Default for DrrConfig {
    fn default() -> Self {
        Self { views: 72, model: ProjectionModel::LineIntegral }
    }
}

impl DrrConfig {
    pub fn preset(&self) -> Result<ViewPreset> {
        self.views.to_string().parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for phantom generation; `--seed` also sets the train and
    /// inference seeds.
    pub seed: u64,
    pub threads: usize,
    pub geometry: SourceSetup,
    pub phantom: PhantomSpec,
    pub drr: DrrConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            geometry: SourceSetup {
                sad: 1000.0,
                sid: 1500.0,
                detector_rows: 32,
                detector_cols: 32,
                pixel_pitch: 4.0,
                volume_half_extent: 40.0,
            },
            phantom: PhantomSpec::default(),
            drr: DrrConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted `key=value` override; the value is read as TOML when it
/// parses, otherwise as a string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides; unknown keys are errors.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::config(e.to_string()))?;
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            merge(&mut table, t);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.inference.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        self.geometry.validate()?;
        self.phantom.validate()?;
        self.drr.preset()?;
        self.train.validate()?;
        self.inference.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, out: &Path) -> Result<()> {
        ensure_dir(out)?;
        let p = out.join(RESOLVED_CONFIG);
        fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Random phantom: writes the analytic spec and its normalized voxel volume.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<(AnalyticPhantom, Volume)> {
    cfg.echo(out)?;
    let h = cfg.geometry.volume_half_extent;
    let (ph, raw) = make_phantom(&cfg.phantom, h, &mut rng_from(&[cfg.seed, 0x9a]))?;
    let (grid, rec) = normalize_unit(&raw.grid)?;
    let vol = Volume { grid, normalization: Some(rec), ..raw };
    write_text(&out.join(PHANTOM_FILE), &ph.to_toml()?)?;
    write_volume(out.join(VOLUME_FILE), &vol, ElementType::F64)?;
    Ok((ph, vol))
}

/// DRRs of a volume (ray marched) or of an analytic phantom (exact; the
/// volume, when also given, supplies the density record).
pub fn cmd_drr(cfg: &RunConfig, out: &Path, volume: Option<&Path>, phantom: Option<&Path>) -> Result<ProjectionSet> {
    cfg.echo(out)?;
    let preset = cfg.drr.preset()?;
    let vol = volume.map(read_volume).transpose()?;
    let set = match phantom {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let ph = AnalyticPhantom::from_toml(&text)?;
            let density = vol.as_ref().and_then(|v| v.normalization);
            generate_drr_for_poses(DrrSource::Phantom { phantom: &ph, density }, &cfg.geometry, preset.poses(), cfg.drr.model)?
        }
        None => {
            let v = vol.as_ref().ok_or_else(|| Error::Usage("drr needs --volume or --phantom".into()))?;
            generate_drr_for_poses(DrrSource::Volume(v), &cfg.geometry, preset.poses(), cfg.drr.model)?
        }
    };
    write_projection_set(out.join(PROJECTIONS_DIR), &set, ElementType::F64)?;
    Ok(set)
}

/// A subject directory holds `projections/` and optionally `volume.vol`.
pub fn load_subject(dir: &Path) -> Result<TrainingSubject> {
    let projections = read_projection_set(dir.join(PROJECTIONS_DIR))?;
    let vp = dir.join(VOLUME_FILE);
    let volume = if vp.exists() { Some(read_volume(&vp)?) } else { None };
    Ok(TrainingSubject { projections, volume })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, subjects: &[PathBuf], resume: Option<&Path>) -> Result<TrainState> {
    cfg.echo(out)?;
    if subjects.is_empty() {
        return Err(Error::Usage("train needs at least one --data directory".into()));
    }
    let data = TrainingData { subjects: subjects.iter().map(|d| load_subject(d)).collect::<Result<_>>()? };
    let mut state = match resume {
        Some(dir) => {
            let mut s = load_checkpoint(dir)?;
            // Only the iteration budget and cadence may change on resume.
            let mut want = s.config.clone();
            want.iterations = cfg.train.iterations;
            want.checkpoint_every = cfg.train.checkpoint_every;
            if want != (TrainConfig { iterations: want.iterations, checkpoint_every: want.checkpoint_every, ..cfg.train.clone() }) {
                return Err(Error::config("resumed checkpoint was trained with a different configuration"));
            }
            s.config = want;
            s
        }
        None => TrainState::new(&cfg.train, data.subjects.len())?,
    };
    train(&mut state, &data, Some(out))?;
    Ok(state)
}

fn write_codes(dir: &Path, codes: &LatentCodes) -> Result<()> {
    let mut a = TensorArchive::default();
    a.push("z_shape", vec![codes.z_shape.len()], codes.z_shape.clone());
    a.push("z_appearance", vec![codes.z_appearance.len()], codes.z_appearance.clone());
    a.write(dir)
}

/// Fits latents to the reference views (optionally a preset subset of them)
/// and renders the volume.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    references: &Path,
    views: Option<ViewPreset>,
) -> Result<Volume> {
    cfg.echo(out)?;
    let state = load_checkpoint(checkpoint)?;
    let mut refs = read_projection_set(references)?;
    if let Some(preset) = views {
        let idx = preset
            .poses()
            .iter()
            .map(|p| {
                refs.poses
                    .iter()
                    .position(|q| (q.theta - p.theta).abs() < 1e-9 && (q.phi - p.phi).abs() < 1e-9)
                    .ok_or_else(|| Error::data(format!("reference set lacks the {:.1} degree view", p.theta_degrees())))
            })
            .collect::<Result<Vec<_>>>()?;
        refs = refs.subset(&idx)?;
    }
    let render = state.config.render(refs.model);
    let fit = finetune_latents(&state.generator, &state.latent_init(), &refs, &render, &cfg.inference)?;
    let mut trace = String::from("iteration view loss psnr_db\n");
    for e in &fit.trace {
        trace.push_str(&format!("{} {} {:?} {:?}\n", e.iteration, e.view, e.loss, e.psnr_db));
    }
    write_text(&out.join("finetune_trace.txt"), &trace)?;
    write_codes(&out.join("latents"), &fit.codes)?;
    let params = fit.params.as_ref().unwrap_or(&state.generator);
    let vol = reconstruct(params, &fit.codes, refs.poses[0], cfg.inference.grid, refs.setup.volume_half_extent, refs.density)?;
    write_volume(out.join("reconstruction.vol"), &vol, ElementType::F64)?;
    Ok(vol)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    out: &Path,
    pred: Option<&Path>,
    truth: Option<&Path>,
    pred_views: Option<&Path>,
    truth_views: Option<&Path>,
) -> Result<MetricReport> {
    cfg.echo(out)?;
    if pred.is_some() != truth.is_some() || pred_views.is_some() != truth_views.is_some() {
        return Err(Error::Usage("evaluate needs predictions and truths in pairs".into()));
    }
    if pred.is_none() && pred_views.is_none() {
        return Err(Error::Usage("evaluate needs --pred/--truth or --pred-views/--truth-views".into()));
    }
    let pv = pred.map(read_volume).transpose()?;
    let tv = truth.map(read_volume).transpose()?;
    let pp = pred_views.map(read_projection_set).transpose()?;
    let tp = truth_views.map(read_projection_set).transpose()?;
    let report = MetricReport::evaluate(pv.as_ref(), tv.as_ref(), pp.as_ref(), tp.as_ref())?;
    write_text(&out.join("metrics.txt"), &report.to_text()?)?;
    Ok(report)
}
