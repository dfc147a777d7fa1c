//! On-disk formats.
//!
//! Volume file: a magic line, `key value...` header lines closed by `end`,
//! then raw little-endian voxels in `(z, y, x)` order.
//!
//! Projection set: a directory holding `manifest.txt` plus one raw
//! little-endian image per view (row-major, no header).
//!
//! Tensor archive (checkpoints): `manifest.txt` with metadata and a
//! `tensor <key> <offset> <dims...>` table, plus `tensors.bin` holding
//! little-endian `f64` values.

use std::fs;
use std::path::Path;

use crate::data::dataset::ProjectionSet;
use crate::data::volume::{NormRecord, Volume};
use crate::error::{Error, FormatError, Result};
use crate::geometry::{Pose, SourceSetup};
use crate::grid::Grid3;
use crate::render::ProjectionModel;

pub const VOLUME_MAGIC: &str = "SPARSECT-VOLUME";
pub const PROJECTIONS_MAGIC: &str = "SPARSECT-PROJECTIONS";
pub const ARCHIVE_MAGIC: &str = "SPARSECT-TENSORS";
const VERSION: &str = "1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ElementType {
    #[default]
    F32,
    F64,
}

impl ElementType {
    fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::F64 => "f64",
        }
    }

    fn parse(s: &str) -> std::result::Result<Self, FormatError> {
        match s {
            "f32" => Ok(ElementType::F32),
            "f64" => Ok(ElementType::F64),
            other => Err(FormatError::UnsupportedVersion(format!("element type {other}"))),
        }
    }
}

pub fn encode_values(values: &[f64], ty: ElementType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * ty.size());
    for &v in values {
        match ty {
            ElementType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            ElementType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_values(bytes: &[u8], ty: ElementType, expected: usize) -> std::result::Result<Vec<f64>, FormatError> {
    let size = ty.size();
    if bytes.len() % size != 0 {
        return Err(FormatError::ByteCount { found: bytes.len(), element_size: size });
    }
    let found = bytes.len() / size;
    if found != expected {
        return Err(FormatError::ShapeMismatch { expected, found });
    }
    Ok(match ty {
        ElementType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parsed header: ordered `(key, values)` pairs.
struct Header {
    entries: Vec<(String, Vec<String>)>,
}

impl Header {
    fn get(&self, key: &str) -> std::result::Result<&[String], FormatError> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| FormatError::MalformedHeader(format!("missing `{key}`")))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a [String]> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    fn nums<T: std::str::FromStr>(&self, key: &str, n: usize) -> std::result::Result<Vec<T>, FormatError> {
        let v = self.get(key)?;
        if v.len() != n {
            return Err(FormatError::MalformedHeader(format!("`{key}` needs {n} values")));
        }
        v.iter().map(|s| parse_num(key, s)).collect()
    }

    fn record(&self, key: &str) -> std::result::Result<Option<NormRecord>, FormatError> {
        let v = self.get(key)?;
        match v {
            [none] if none == "none" => Ok(None),
            [a, b] => Ok(Some(NormRecord { min: parse_num(key, a)?, max: parse_num(key, b)? })),
            _ => Err(FormatError::MalformedHeader(format!("`{key}` must be `none` or `min max`"))),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, s: &str) -> std::result::Result<T, FormatError> {
    s.parse().map_err(|_| FormatError::MalformedHeader(format!("bad value `{s}` for `{key}`")))
}

/// Splits `text` into a header (terminated by an `end` line) and the byte
/// offset where the payload begins.
fn parse_header(bytes: &[u8], magic: &str) -> std::result::Result<(Header, usize), FormatError> {
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| FormatError::MalformedHeader("header is not terminated by `end`".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| FormatError::MalformedHeader("header is not valid UTF-8".into()))?
            .trim_end_matches('\r')
            .to_string();
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter();
    let first = it.next().ok_or_else(|| FormatError::MalformedHeader("empty header".into()))?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(FormatError::MalformedHeader(format!("expected magic `{magic}`")));
    }
    match parts.next() {
        Some(VERSION) => {}
        Some(v) => return Err(FormatError::UnsupportedVersion(v.to_string())),
        None => return Err(FormatError::MalformedHeader("missing format version".into())),
    }
    let entries = it
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut w = l.split_whitespace().map(str::to_string);
            let k = w.next().unwrap_or_default();
            (k, w.collect())
        })
        .collect();
    Ok((Header { entries }, pos))
}

fn fmt_record(r: Option<NormRecord>) -> String {
    match r {
        Some(r) => format!("{:?} {:?}", r.min, r.max),
        None => "none".into(),
    }
}

pub fn encode_volume(volume: &Volume, ty: ElementType) -> Vec<u8> {
    let [d, h, w] = volume.grid.dims;
    let s = volume.spacing;
    let o = volume.origin;
    let mut out = format!(
        "{VOLUME_MAGIC} {VERSION}\ndims {d} {h} {w}\nspacing {:?} {:?} {:?}\norigin {:?} {:?} {:?}\nnormalization {}\nbyte_order little\ndtype {}\nend\n",
        s[0],
        s[1],
        s[2],
        o[0],
        o[1],
        o[2],
        fmt_record(volume.normalization),
        ty.name()
    )
    .into_bytes();
    out.extend(encode_values(&volume.grid.data, ty));
    out
}

pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Volume, FormatError> {
    let (hdr, start) = parse_header(bytes, VOLUME_MAGIC)?;
    let dims: Vec<usize> = hdr.nums("dims", 3)?;
    let spacing: Vec<f64> = hdr.nums("spacing", 3)?;
    let origin: Vec<f64> = hdr.nums("origin", 3)?;
    let normalization = hdr.record("normalization")?;
    if hdr.get("byte_order")? != ["little"] {
        return Err(FormatError::UnsupportedVersion("byte order other than little".into()));
    }
    let ty = ElementType::parse(hdr.get("dtype")?.first().map(String::as_str).unwrap_or(""))?;
    let n = dims.iter().product();
    let data = decode_values(&bytes[start..], ty, n)?;
    Ok(Volume {
        grid: Grid3::from_vec([dims[0], dims[1], dims[2]], data),
        spacing: [spacing[0], spacing[1], spacing[2]],
        origin: [origin[0], origin[1], origin[2]],
        normalization,
    })
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume, ty: ElementType) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(volume, ty))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_volume(&read_bytes(path)?).map_err(|k| Error::format(path, k))
}

fn model_name(m: ProjectionModel) -> &'static str {
    match m {
        ProjectionModel::LineIntegral => "line-integral",
        ProjectionModel::BeerLambert => "beer-lambert",
    }
}

pub fn write_projection_set(dir: impl AsRef<Path>, set: &ProjectionSet, ty: ElementType) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &set.setup;
    let mut m = format!(
        "{PROJECTIONS_MAGIC} {VERSION}\nsad {:?}\nsid {:?}\ndetector {} {}\npixel_pitch {:?}\nvolume_half_extent {:?}\nmodel {}\nnormalization {}\ndensity {}\nbyte_order little\ndtype {}\n",
        s.sad,
        s.sid,
        s.detector_rows,
        s.detector_cols,
        s.pixel_pitch,
        s.volume_half_extent,
        model_name(set.model),
        fmt_record(set.normalization),
        fmt_record(set.density),
        ty.name()
    );
    for (i, (pose, img)) in set.poses.iter().zip(&set.images).enumerate() {
        let file = format!("view_{i:03}.raw");
        m.push_str(&format!("view {i} {:?} {:?} {file}\n", pose.theta, pose.phi));
        write_bytes(&dir.join(&file), &encode_values(&img.data, ty))?;
    }
    m.push_str("end\n");
    write_bytes(&dir.join("manifest.txt"), m.as_bytes())
}

pub fn read_projection_set(dir: impl AsRef<Path>) -> Result<ProjectionSet> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    let bytes = read_bytes(&mpath)?;
    let fe = |k| Error::format(&mpath, k);
    let (hdr, _) = parse_header(&bytes, PROJECTIONS_MAGIC).map_err(fe)?;
    let det: Vec<usize> = hdr.nums("detector", 2).map_err(fe)?;
    let setup = SourceSetup {
        sad: hdr.nums("sad", 1).map_err(fe)?[0],
        sid: hdr.nums("sid", 1).map_err(fe)?[0],
        detector_rows: det[0],
        detector_cols: det[1],
        pixel_pitch: hdr.nums("pixel_pitch", 1).map_err(fe)?[0],
        volume_half_extent: hdr.nums("volume_half_extent", 1).map_err(fe)?[0],
    };
    let model = match hdr.get("model").map_err(fe)? {
        [m] if m == "line-integral" => ProjectionModel::LineIntegral,
        [m] if m == "beer-lambert" => ProjectionModel::BeerLambert,
        _ => return Err(fe(FormatError::MalformedHeader("unknown projection model".into()))),
    };
    if hdr.get("byte_order").map_err(fe)? != ["little"] {
        return Err(fe(FormatError::UnsupportedVersion("byte order other than little".into())));
    }
    let ty = ElementType::parse(hdr.get("dtype").map_err(fe)?.first().map(String::as_str).unwrap_or("")).map_err(fe)?;
    let mut images = Vec::new();
    let mut poses = Vec::new();
    for v in hdr.all("view") {
        if v.len() != 4 {
            return Err(fe(FormatError::MalformedHeader("`view` needs index, theta, phi, file".into())));
        }
        let theta: f64 = parse_num("view", &v[1]).map_err(fe)?;
        let phi: f64 = parse_num("view", &v[2]).map_err(fe)?;
        poses.push(Pose::new(theta, phi)?);
        let fpath = dir.join(&v[3]);
        let data = decode_values(&read_bytes(&fpath)?, ty, det[0] * det[1]).map_err(|k| Error::format(&fpath, k))?;
        images.push(Grid3::image(det[0], det[1], data));
    }
    let set = ProjectionSet {
        images,
        poses,
        setup,
        model,
        normalization: hdr.record("normalization").map_err(fe)?,
        density: hdr.record("density").map_err(fe)?,
    };
    set.validate()?;
    Ok(set)
}

/// Named `f64` tensors plus free-form metadata lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorArchive {
    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push((key.into(), shape, data));
    }

    pub fn take(&self, key: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = format!("{ARCHIVE_MAGIC} {VERSION}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Usage(format!("metadata `{k}` is not a single-line token")));
            }
            m.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        let mut offset = 0usize;
        for (k, shape, data) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            m.push_str(&format!("tensor {k} {offset} {}\n", dims.join(" ")));
            payload.extend(encode_values(data, ElementType::F64));
            offset += data.len();
        }
        m.push_str(&format!("total {offset}\nend\n"));
        write_bytes(&dir.join("tensors.bin"), &payload)?;
        write_bytes(&dir.join("manifest.txt"), m.as_bytes())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("manifest.txt");
        let bytes = read_bytes(&mpath)?;
        let fe = |k| Error::format(&mpath, k);
        let (hdr, _) = parse_header(&bytes, ARCHIVE_MAGIC).map_err(fe)?;
        let total: usize = hdr.nums("total", 1).map_err(fe)?[0];
        let bpath = dir.join("tensors.bin");
        let flat = decode_values(&read_bytes(&bpath)?, ElementType::F64, total).map_err(|k| Error::format(&bpath, k))?;
        let mut out = TensorArchive::default();
        for (k, v) in &hdr.entries {
            match k.as_str() {
                "meta" => {
                    let key = v.first().cloned().unwrap_or_default();
                    out.meta.push((key, v[1.min(v.len())..].join(" ")));
                }
                "tensor" => {
                    if v.len() < 2 {
                        return Err(fe(FormatError::MalformedHeader("`tensor` needs key and offset".into())));
                    }
                    let off: usize = parse_num("tensor", &v[1]).map_err(fe)?;
                    let shape = v[2..].iter().map(|s| parse_num("tensor", s)).collect::<std::result::Result<Vec<usize>, _>>().map_err(fe)?;
                    let n: usize = shape.iter().product();
                    if off + n > flat.len() {
                        return Err(fe(FormatError::ShapeMismatch { expected: off + n, found: flat.len() }));
                    }
                    out.tensors.push((v[0].clone(), shape, flat[off..off + n].to_vec()));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn volume() -> Volume {
        let mut v = Volume::cube([2, 3, 4], 10.0).unwrap();
        v.grid.data.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.125);
        v.normalization = Some(NormRecord { min: -1000.0, max: 1000.0 });
        v
    }

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vol");
        let v = volume();
        write_volume(&p, &v, ElementType::F32).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let again = encode_volume(&back, ElementType::F32);
        assert_eq!(again, fs::read(&p).unwrap());
    }

    #[test]
    fn volume_errors_are_distinct() {
        let bytes = encode_volume(&volume(), ElementType::F32);
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_volume(truncated), Err(FormatError::ByteCount { .. })));
        let mut v = Volume::cube([2, 2, 2], 1.0).unwrap();
        v.grid.data.iter_mut().for_each(|x| *x = 1.0);
        let full = encode_volume(&v, ElementType::F32);
        let seven = &full[..full.len() - 4];
        assert_eq!(decode_volume(seven), Err(FormatError::ShapeMismatch { expected: 8, found: 7 }));
        let text = String::from_utf8_lossy(&full).replace("SPARSECT-VOLUME 1", "SPARSECT-VOLUME 9");
        assert!(matches!(decode_volume(text.as_bytes()), Err(FormatError::UnsupportedVersion(_))));
        let broken = String::from_utf8_lossy(&full).replace("dims 2 2 2", "dims 2 x 2");
        assert!(matches!(decode_volume(broken.as_bytes()), Err(FormatError::MalformedHeader(_))));
        assert!(matches!(decode_volume(b"hello"), Err(FormatError::MalformedHeader(_))));
    }

    proptest! {
        #[test]
        fn f64_payload_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 8)) {
            let mut v = Volume::cube([2, 2, 2], 3.0).unwrap();
            v.grid.data = values;
            let back = decode_volume(&encode_volume(&v, ElementType::F64)).unwrap();
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::default();
        a.push_meta("iteration", 12);
        a.push("w", vec![2, 3], vec![0.1, -2.5, 3.0, 1e-300, f64::MAX, 7.0]);
        a.push("b", vec![1], vec![std::f64::consts::PI]);
        a.write(dir.path()).unwrap();
        let back = TensorArchive::read(dir.path()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.meta("iteration"), Some("12"));
    }
}
