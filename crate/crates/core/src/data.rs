//! Dataset layout, artifact persistence, and audited access.
//!
//! A dataset root contains:
//!
//! ```text
//! root/
//!   dataset.json            metadata (dims, premotor window, sigma, policy)
//!   frames.csv              frame index: t,path
//!   frames/<id>.png         RGB input frames
//!   gaze.csv                session gaze trace: t,x,y,valid
//!   steering.csv            session steering trace: t,angle (simulator)
//!   geo.csv                 session geo trace: t,lat,lon,speed (road)
//!   trials.csv              t_start,t_end,opacity (simulator, optional)
//!   truth.jsonl             generator ground truth (synthetic only)
//!   fixmaps/<id>.npy        fixation maps, one per event
//!   masks/<id>.pbm          binary masks (optional)
//!   manifest.jsonl          assembled records, one JSON object per line
//!   rejects.jsonl           rejected events with reasons
//!   manifest.<split>.jsonl  after splitting: train / valid / test
//! ```
//!
//! All artifact reads go through [`DatasetStore`], which counts them per
//! kind so the harness can prove what a phase touched (e.g. that evaluation
//! never opened a fixation map).

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventSource, FramePolicy, TurnLabel};
use crate::frame::Frame;
use crate::gaze::{GazeSample, GazeTrace, Mask};
use crate::uncertainty::UncertaintyLabel;

// ---------------------------------------------------------------------------
// Manifest types
// ---------------------------------------------------------------------------

/// Per-event artifact resolution used when assembling a manifest.
#[derive(Debug, Clone, Default)]
pub struct EventArtifacts {
    pub frame: Option<PathBuf>,
    pub fixmap: Option<PathBuf>,
    /// Peripheral mask, when the masking stage ran.
    pub mask: Option<PathBuf>,
    pub gaze_ok: bool,
    pub uncertainty: Option<UncertaintyLabel>,
}

/// One complete dataset record. Field order is stable for line-delimited
/// serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub event_id: String,
    pub label: TurnLabel,
    pub t_event: f64,
    pub premotor_start: f64,
    pub premotor_end: f64,
    pub source: EventSource,
    /// Relative to the dataset root.
    pub frame: PathBuf,
    /// Relative to the dataset root.
    pub fixmap: PathBuf,
    /// Relative to the dataset root; present when the masking stage ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub uncertainty: UncertaintyLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub event_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub rejects: Vec<RejectRecord>,
}

impl Manifest {
    pub fn left_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let left = self
            .records
            .iter()
            .filter(|r| r.label == TurnLabel::Left)
            .count();
        left as f64 / self.records.len() as f64
    }
}

/// Which manifest file a load refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Full,
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Full => "manifest.jsonl",
            Split::Train => "manifest.train.jsonl",
            Split::Valid => "manifest.valid.jsonl",
            Split::Test => "manifest.test.jsonl",
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset metadata
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Simulator,
    Road,
    Synthetic,
}

/// Dataset-level configuration stored at `root/dataset.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub kind: DatasetKind,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Premotor window length in seconds (simulator default 3.0, road 1.0).
    pub premotor_seconds: f64,
    pub frame_policy: FramePolicy,
    /// Gaussian spread for fixation maps, pixels.
    pub fixation_sigma: f64,
    /// Resolution the gaze coordinates were recorded at, when it differs
    /// from the frame resolution.
    pub gaze_source_dims: Option<(usize, usize)>,
    /// Weight fixation-map terms by dwell time instead of uniformly.
    #[serde(default)]
    pub duration_weighting: bool,
}

impl DatasetMeta {
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("dataset.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&body).map_err(|e| Error::format(&path, e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Array files (.npy), 1-D and 2-D float64
// ---------------------------------------------------------------------------

/// Write a little-endian float64 array in npy format (version 1.0).
pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::invalid(format!(
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        )));
    }
    let shape_str = match shape {
        [n] => format!("({n},)"),
        _ => {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            format!("({})", dims.join(", "))
        }
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    let unpadded = 10 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(padding));
    header.push('\n');

    let mut buf = Vec::with_capacity(10 + header.len() + data.len() * 8);
    buf.extend_from_slice(b"\x93NUMPY\x01\x00");
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read an npy file written by [`write_npy`] (little-endian float64,
/// C-order). Returns the shape and the flattened data.
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::format(path, "not an npy file"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(Error::format(path, "truncated npy header"));
    }
    let header = std::str::from_utf8(&bytes[10..header_end])
        .map_err(|_| Error::format(path, "npy header is not utf-8"))?;
    if !header.contains("'<f8'") {
        return Err(Error::format(path, "expected little-endian float64 data"));
    }
    if header.contains("'fortran_order': True") {
        return Err(Error::format(path, "fortran-order arrays unsupported"));
    }
    let open = header
        .find("'shape':")
        .and_then(|i| header[i..].find('(').map(|j| i + j))
        .ok_or_else(|| Error::format(path, "npy header has no shape"))?;
    let close = header[open..]
        .find(')')
        .map(|j| open + j)
        .ok_or_else(|| Error::format(path, "unterminated shape tuple"))?;
    let shape: Vec<usize> = header[open + 1..close]
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad shape component {s:?}")))
        })
        .collect::<Result<_>>()?;
    let count: usize = shape.iter().product();
    let data_bytes = &bytes[header_end..];
    if data_bytes.len() != count * 8 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, got {}", count * 8, data_bytes.len()),
        ));
    }
    let data = data_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((shape, data))
}

pub fn write_npy_2d(path: &Path, array: &Array2<f64>) -> Result<()> {
    let (h, w) = (array.shape()[0], array.shape()[1]);
    let data: Vec<f64> = array.iter().cloned().collect();
    write_npy(path, &[h, w], &data)
}

pub fn read_npy_2d(path: &Path) -> Result<Array2<f64>> {
    let (shape, data) = read_npy(path)?;
    if shape.len() != 2 {
        return Err(Error::format(
            path,
            format!("expected a 2-D array, got shape {shape:?}"),
        ));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::format(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// Binary masks (.pbm, P4)
// ---------------------------------------------------------------------------

/// Write a mask as a binary PBM (P4): 1 bit per pixel, rows padded to bytes.
/// PBM convention: 1 is black; we store foreground as 1.
pub fn write_mask_pbm(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    out.extend_from_slice(format!("P4\n{w} {h}\n").as_bytes());
    for i in 0..h {
        let mut byte = 0u8;
        let mut bits = 0;
        for j in 0..w {
            byte = (byte << 1) | (mask.pixels[[i, j]] & 1);
            bits += 1;
            if bits == 8 {
                out.push(byte);
                byte = 0;
                bits = 0;
            }
        }
        if bits > 0 {
            out.push(byte << (8 - bits));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mask_pbm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(&bytes[..]);
    let mut magic = String::new();
    reader
        .read_line(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if magic.trim() != "P4" {
        return Err(Error::format(path, "expected binary PBM (P4)"));
    }
    let mut dims = String::new();
    loop {
        dims.clear();
        reader.read_line(&mut dims).map_err(|e| Error::io(path, e))?;
        if !dims.trim_start().starts_with('#') {
            break;
        }
    }
    let mut parts = dims.split_whitespace();
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "bad PBM width"))?;
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "bad PBM height"))?;
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let row_bytes = w.div_ceil(8);
    if data.len() < row_bytes * h {
        return Err(Error::format(path, "truncated PBM payload"));
    }
    let mut mask = Mask::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let byte = data[i * row_bytes + j / 8];
            mask.pixels[[i, j]] = (byte >> (7 - j % 8)) & 1;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Delimited trace files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GazeRow {
    t: f64,
    x: f64,
    y: f64,
    valid: u8,
}

pub fn write_gaze_csv(path: &Path, trace: &GazeTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for s in &trace.samples {
        writer
            .serialize(GazeRow {
                t: s.t,
                x: s.x,
                y: s.y,
                valid: u8::from(s.valid),
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gaze_csv(path: &Path) -> Result<GazeTrace> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut samples = Vec::new();
    for row in reader.deserialize::<GazeRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        samples.push(GazeSample {
            t: row.t,
            x: row.x,
            y: row.y,
            valid: row.valid != 0,
        });
    }
    Ok(GazeTrace::new(samples))
}

#[derive(Debug, Serialize, Deserialize)]
struct SteeringRow {
    t: f64,
    angle: f64,
}

pub fn write_steering_csv(path: &Path, trace: &crate::events::SteeringTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for (&t, &angle) in trace.t.iter().zip(&trace.angle) {
        writer
            .serialize(SteeringRow { t, angle })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_steering_csv(path: &Path) -> Result<crate::events::SteeringTrace> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut trace = crate::events::SteeringTrace::default();
    for row in reader.deserialize::<SteeringRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        trace.t.push(row.t);
        trace.angle.push(row.angle);
    }
    Ok(trace)
}

#[derive(Debug, Serialize, Deserialize)]
struct GeoRow {
    t: f64,
    lat: f64,
    lon: f64,
    speed: f64,
}

pub fn write_geo_csv(path: &Path, trace: &crate::events::GeoTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for i in 0..trace.t.len() {
        writer
            .serialize(GeoRow {
                t: trace.t[i],
                lat: trace.lat[i],
                lon: trace.lon[i],
                speed: trace.speed[i],
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_geo_csv(path: &Path) -> Result<crate::events::GeoTrace> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut trace = crate::events::GeoTrace::default();
    for row in reader.deserialize::<GeoRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        trace.t.push(row.t);
        trace.lat.push(row.lat);
        trace.lon.push(row.lon);
        trace.speed.push(row.speed);
    }
    Ok(trace)
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    t: f64,
    path: String,
}

pub fn write_frame_index_csv(path: &Path, stamps: &[crate::events::FrameStamp]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for s in stamps {
        writer
            .serialize(FrameRow {
                t: s.t,
                path: s.path.to_string_lossy().into_owned(),
            })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frame_index_csv(path: &Path) -> Result<crate::events::FrameIndex> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut stamps = Vec::new();
    for row in reader.deserialize::<FrameRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        stamps.push(crate::events::FrameStamp {
            t: row.t,
            path: PathBuf::from(row.path),
        });
    }
    Ok(crate::events::FrameIndex::new(stamps))
}

/// Simulator trial metadata: visual-noise opacity per time span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub t_start: f64,
    pub t_end: f64,
    pub opacity: f64,
}

pub fn write_trials_csv(path: &Path, trials: &[TrialRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for t in trials {
        writer
            .serialize(t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize::<TrialRow>()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Line-delimited JSON
// ---------------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?);
    }
    Ok(items)
}

pub fn save_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    write_jsonl(&root.join(Split::Full.manifest_name()), &manifest.records)?;
    write_jsonl(&root.join("rejects.jsonl"), &manifest.rejects)
}

// ---------------------------------------------------------------------------
// Audited store
// ---------------------------------------------------------------------------

/// Counters for every artifact read, by kind.
#[derive(Debug, Default)]
pub struct AccessAudit {
    frame_reads: AtomicU64,
    fixmap_reads: AtomicU64,
    mask_reads: AtomicU64,
    manifest_reads: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSnapshot {
    pub frame_reads: u64,
    pub fixmap_reads: u64,
    pub mask_reads: u64,
    pub manifest_reads: u64,
}

impl AccessAudit {
    pub fn snapshot(&self) -> AuditSnapshot {
        AuditSnapshot {
            frame_reads: self.frame_reads.load(Ordering::Relaxed),
            fixmap_reads: self.fixmap_reads.load(Ordering::Relaxed),
            mask_reads: self.mask_reads.load(Ordering::Relaxed),
            manifest_reads: self.manifest_reads.load(Ordering::Relaxed),
        }
    }
}

/// Audited accessor for one dataset root. Optionally restricted to a set of
/// manifest splits; loading any other split is an access violation. Split
/// manifests may live outside the dataset root (each run keeps its own),
/// configured via [`DatasetStore::with_manifest_dir`].
#[derive(Debug, Clone)]
pub struct DatasetStore {
    root: PathBuf,
    manifest_dir: PathBuf,
    audit: Arc<AccessAudit>,
    allowed_splits: Option<BTreeSet<Split>>,
}

impl DatasetStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            manifest_dir: root.clone(),
            root,
            audit: Arc::new(AccessAudit::default()),
            allowed_splits: None,
        }
    }

    /// Restrict manifest loads to `splits`; anything else errors.
    pub fn with_allowed_splits(mut self, splits: impl IntoIterator<Item = Split>) -> Self {
        self.allowed_splits = Some(splits.into_iter().collect());
        self
    }

    /// Read split manifests from `dir` instead of the dataset root.
    pub fn with_manifest_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.manifest_dir = dir.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn audit(&self) -> AuditSnapshot {
        self.audit.snapshot()
    }

    pub fn meta(&self) -> Result<DatasetMeta> {
        DatasetMeta::load(&self.root)
    }

    pub fn load_manifest(&self, split: Split) -> Result<Vec<ManifestRecord>> {
        if let Some(allowed) = &self.allowed_splits {
            if !allowed.contains(&split) {
                return Err(Error::AccessViolation(format!(
                    "manifest split {split:?} is outside this phase's allowed set {allowed:?}"
                )));
            }
        }
        self.audit.manifest_reads.fetch_add(1, Ordering::Relaxed);
        read_jsonl(&self.manifest_dir.join(split.manifest_name()))
    }

    pub fn load_frame(&self, rel: &Path) -> Result<Frame> {
        self.audit.frame_reads.fetch_add(1, Ordering::Relaxed);
        Frame::load_png(&self.root.join(rel))
    }

    pub fn load_fixmap(&self, rel: &Path) -> Result<Array2<f64>> {
        self.audit.fixmap_reads.fetch_add(1, Ordering::Relaxed);
        read_npy_2d(&self.root.join(rel))
    }

    pub fn load_mask(&self, rel: &Path) -> Result<Mask> {
        self.audit.mask_reads.fetch_add(1, Ordering::Relaxed);
        read_mask_pbm(&self.root.join(rel))
    }
}

/// Create a directory (and parents), mapping errors to our type.
pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write a string to a file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{SplitTag, UncertaintySource};
    use tempfile::tempdir;

    #[test]
    fn npy_round_trip_2d() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let arr = Array2::from_shape_fn((5, 7), |(i, j)| i as f64 * 10.0 + j as f64 * 0.5);
        write_npy_2d(&path, &arr).unwrap();
        let back = read_npy_2d(&path).unwrap();
        assert_eq!(arr, back);
    }

    #[test]
    fn npy_round_trip_1d() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.npy");
        let data = vec![1.5, -2.0, 3.25];
        write_npy(&path, &[3], &data).unwrap();
        let (shape, back) = read_npy(&path).unwrap();
        assert_eq!(shape, vec![3]);
        assert_eq!(back, data);
    }

    #[test]
    fn pbm_round_trip_odd_width() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pbm");
        let mut mask = Mask::zeros(5, 11);
        for j in 0..11 {
            mask.pixels[[2, j]] = (j % 3 == 0) as u8;
        }
        mask.pixels[[4, 10]] = 1;
        write_mask_pbm(&path, &mask).unwrap();
        let back = read_mask_pbm(&path).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn gaze_csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gaze.csv");
        let trace = GazeTrace::new(vec![
            GazeSample {
                t: 0.0,
                x: 1.5,
                y: 2.5,
                valid: true,
            },
            GazeSample {
                t: 0.1,
                x: 3.0,
                y: 4.0,
                valid: false,
            },
        ]);
        write_gaze_csv(&path, &trace).unwrap();
        let back = read_gaze_csv(&path).unwrap();
        assert_eq!(back.samples, trace.samples);
    }

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            event_id: id.to_string(),
            label: TurnLabel::Left,
            t_event: 15.0,
            premotor_start: 12.0,
            premotor_end: 15.0,
            source: EventSource::Steering,
            frame: PathBuf::from("frames/a.png"),
            fixmap: PathBuf::from("fixmaps/a.npy"),
            mask: None,
            uncertainty: UncertaintyLabel {
                value: 0.3,
                source: UncertaintySource::Contrast,
                split: SplitTag::Low,
                threshold: 0.25,
            },
        }
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let dir = tempdir().unwrap();
        let manifest = Manifest {
            records: vec![record("ev0"), record("ev1")],
            rejects: vec![RejectRecord {
                event_id: "ev2".into(),
                reason: "missing gaze".into(),
            }],
        };
        save_manifest(dir.path(), &manifest).unwrap();
        let records: Vec<ManifestRecord> =
            read_jsonl(&dir.path().join(Split::Full.manifest_name())).unwrap();
        assert_eq!(records, manifest.records);
        let rejects: Vec<RejectRecord> = read_jsonl(&dir.path().join("rejects.jsonl")).unwrap();
        assert_eq!(rejects, manifest.rejects);
    }

    #[test]
    fn store_counts_reads_and_enforces_split_policy() {
        let dir = tempdir().unwrap();
        let manifest = Manifest {
            records: vec![record("ev0")],
            rejects: vec![],
        };
        save_manifest(dir.path(), &manifest).unwrap();
        write_jsonl(
            &dir.path().join(Split::Test.manifest_name()),
            &manifest.records,
        )
        .unwrap();

        let store = DatasetStore::new(dir.path()).with_allowed_splits([Split::Full]);
        assert_eq!(store.audit().manifest_reads, 0);
        store.load_manifest(Split::Full).unwrap();
        assert_eq!(store.audit().manifest_reads, 1);
        let err = store.load_manifest(Split::Test);
        assert!(matches!(err, Err(Error::AccessViolation(_))));
        // A denied load is not counted as a read.
        assert_eq!(store.audit().manifest_reads, 1);
    }

    #[test]
    fn store_counts_fixmap_reads() {
        let dir = tempdir().unwrap();
        let arr = Array2::from_elem((4, 4), 0.25);
        write_npy_2d(&dir.path().join("fix.npy"), &arr).unwrap();
        let store = DatasetStore::new(dir.path());
        store.load_fixmap(Path::new("fix.npy")).unwrap();
        store.load_fixmap(Path::new("fix.npy")).unwrap();
        assert_eq!(store.audit().fixmap_reads, 2);
        assert_eq!(store.audit().frame_reads, 0);
    }
}
