//! Raw-recording preprocessing: detect turn events, select input frames,
//! build fixation maps (and optional masks), attach uncertainty labels, and
//! assemble the dataset manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetKind, DatasetMeta, EventArtifacts, Manifest};
use crate::error::{Error, Result};
use crate::events::{self, EventRecord, TurnEvent};
use crate::frame::Frame;
use crate::gaze::{self, MaskSpec};
use crate::uncertainty::{
    self, SplitDirection, SplitRule, SplitTag, TrialMetadata, UncertaintyLabel, UncertaintySource,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Also build peripheral masks under `masks/`.
    pub write_masks: bool,
    /// Dilation kernel side; when absent it scales the 30 px (at 224)
    /// default to the frame size.
    pub mask_kernel: Option<usize>,
    pub split_rule: SplitRule,
    /// Steering detector settings (simulator/synthetic datasets).
    pub lookbehind_s: f64,
    pub min_amplitude_deg: f64,
    /// Geo detector settings (road datasets).
    pub heading_threshold_deg: f64,
    pub geo_window_s: f64,
    pub min_speed_mps: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            write_masks: false,
            mask_kernel: None,
            split_rule: SplitRule::Median,
            lookbehind_s: events::DEFAULT_LOOKBEHIND_S,
            min_amplitude_deg: events::DEFAULT_MIN_AMPLITUDE_DEG,
            heading_threshold_deg: events::DEFAULT_HEADING_THRESHOLD_DEG,
            geo_window_s: events::DEFAULT_GEO_WINDOW_S,
            min_speed_mps: events::DEFAULT_MIN_SPEED_MPS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub events: usize,
    pub records: usize,
    pub rejects: usize,
    pub uncertainty_threshold: f64,
    pub high_count: usize,
    pub low_count: usize,
}

fn default_mask_kernel(meta: &DatasetMeta) -> usize {
    // 30 px at 224 scales with the frame edge.
    ((30.0 * meta.frame_height as f64 / 224.0).round() as usize).max(3)
}

/// Detect events from the dataset's motor channel.
pub fn detect_events(root: &Path, meta: &DatasetMeta, opts: &PreprocessOptions) -> Result<Vec<TurnEvent>> {
    match meta.kind {
        DatasetKind::Simulator | DatasetKind::Synthetic => {
            let steering = data::read_steering_csv(&root.join("steering.csv"))?;
            events::detect_steering_turns(
                &steering,
                opts.lookbehind_s,
                opts.min_amplitude_deg,
                meta.premotor_seconds,
            )
        }
        DatasetKind::Road => {
            let geo = data::read_geo_csv(&root.join("geo.csv"))?;
            events::detect_geo_turns(
                &geo,
                opts.heading_threshold_deg,
                opts.geo_window_s,
                opts.min_speed_mps,
                meta.premotor_seconds,
            )
        }
    }
}

/// Full preprocessing pass over a dataset root. Writes fixation maps (and
/// optional masks), the manifest, and the rejects file; returns a summary.
pub fn preprocess(root: &Path, opts: &PreprocessOptions) -> Result<PreprocessSummary> {
    let meta = DatasetMeta::load(root)?;
    let detected = detect_events(root, &meta, opts)?;
    let frame_index = data::read_frame_index_csv(&root.join("frames.csv"))?;
    let mut gaze_trace = data::read_gaze_csv(&root.join("gaze.csv"))?;
    gaze_trace.source_dims = meta.gaze_source_dims;
    let trials = {
        let path = root.join("trials.csv");
        if path.exists() {
            Some(data::read_trials_csv(&path)?)
        } else {
            None
        }
    };

    data::ensure_dir(&root.join("fixmaps"))?;
    if opts.write_masks {
        data::ensure_dir(&root.join("masks"))?;
    }
    let kernel = opts.mask_kernel.unwrap_or_else(|| default_mask_kernel(&meta));

    let mut event_records = Vec::with_capacity(detected.len());
    let mut artifacts: BTreeMap<String, EventArtifacts> = BTreeMap::new();
    let mut uncertainty_values = Vec::with_capacity(detected.len());
    let mut uncertainty_sources = Vec::with_capacity(detected.len());

    for (index, mut event) in detected.into_iter().enumerate() {
        let id = format!("ev{index:05}");
        event.input_frame_policy = meta.frame_policy;
        let mut art = EventArtifacts::default();

        // Input frame at the premotor boundary.
        let frame_path = match events::select_input_frame(&event, &frame_index) {
            Ok(stamp) => {
                art.frame = Some(stamp.path.clone());
                Some(stamp.path.clone())
            }
            Err(_) => None,
        };

        // Fixation map over the premotor window.
        let map = gaze::build_fixation_map(
            &gaze_trace,
            event.premotor,
            (meta.frame_height, meta.frame_width),
            meta.fixation_sigma,
            meta.duration_weighting,
        )?;
        art.gaze_ok = !map.empty;
        if art.gaze_ok {
            let rel = PathBuf::from(format!("fixmaps/{id}.npy"));
            data::write_npy_2d(&root.join(&rel), &map.grid)?;
            art.fixmap = Some(rel);
            if opts.write_masks {
                let spec = MaskSpec::peripheral(kernel);
                let (mask, _) = gaze::make_peripheral_mask(&map, &spec)?;
                let rel = PathBuf::from(format!("masks/{id}.pbm"));
                data::write_mask_pbm(&root.join(&rel), &mask)?;
                art.mask = Some(rel);
            }
        }

        // Uncertainty scalar: trial opacity when available, image contrast
        // otherwise.
        let value = match (&trials, &frame_path) {
            (Some(trials), _) => {
                let opacity = trials
                    .iter()
                    .find(|t| event.t_event >= t.t_start && event.t_event < t.t_end)
                    .map(|t| t.opacity);
                match opacity {
                    Some(o) => Some((
                        uncertainty::opacity_uncertainty(&TrialMetadata { opacity: Some(o) })?,
                        UncertaintySource::Opacity,
                    )),
                    None => None,
                }
            }
            (None, Some(rel)) => {
                let frame = Frame::load_png(&root.join(rel))?;
                Some((
                    uncertainty::contrast_uncertainty(&frame),
                    UncertaintySource::Contrast,
                ))
            }
            (None, None) => None,
        };
        uncertainty_values.push(value.map(|(v, _)| v));
        uncertainty_sources.push(value.map(|(_, s)| s));

        event_records.push(EventRecord { id: id.clone(), event });
        artifacts.insert(id, art);
    }

    // Split high/low over events that have an uncertainty value.
    let present: Vec<f64> = uncertainty_values.iter().filter_map(|v| *v).collect();
    let (threshold, mut high_count, mut low_count) = if present.is_empty() {
        (f64::NAN, 0, 0)
    } else {
        let direction = match uncertainty_sources.iter().flatten().next() {
            Some(UncertaintySource::Opacity) => SplitDirection::HigherIsUncertain,
            _ => SplitDirection::LowerIsUncertain,
        };
        let outcome = uncertainty::split_by_uncertainty(&present, opts.split_rule, direction)?;
        let mut tags = outcome.tags.into_iter();
        for (record, value) in event_records.iter().zip(&uncertainty_values) {
            if let Some(v) = value {
                let tag = tags.next().expect("one tag per present value");
                let art = artifacts.get_mut(&record.id).expect("artifact entry");
                art.uncertainty = Some(UncertaintyLabel {
                    value: *v,
                    source: uncertainty_sources[event_records
                        .iter()
                        .position(|r| r.id == record.id)
                        .expect("record index")]
                    .expect("source present with value"),
                    split: tag,
                    threshold: outcome.threshold,
                });
            }
        }
        (outcome.threshold, outcome.high_count, outcome.low_count)
    };
    if present.is_empty() {
        high_count = 0;
        low_count = 0;
    }

    let manifest: Manifest = events::assemble_dataset(&event_records, &artifacts)?;
    data::save_manifest(root, &manifest)?;

    Ok(PreprocessSummary {
        events: event_records.len(),
        records: manifest.records.len(),
        rejects: manifest.rejects.len(),
        uncertainty_threshold: threshold,
        high_count,
        low_count,
    })
}
