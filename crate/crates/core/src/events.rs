//! Turn-event extraction from steering traces (simulator rigs) or
//! position/speed streams (instrumented cars), premotor windows, and input
//! frame selection.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{EventArtifacts, Manifest, ManifestRecord, RejectRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TurnLabel {
    Left,
    Right,
}

impl TurnLabel {
    pub fn mirrored(self) -> Self {
        match self {
            TurnLabel::Left => TurnLabel::Right,
            TurnLabel::Right => TurnLabel::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FramePolicy {
    /// Frame at the end of the premotor window (simulator convention).
    Last,
    /// Frame at the start of the premotor window (road-footage convention).
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventSource {
    Steering,
    Geo,
}

/// One detected motor action with its premotor window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    pub label: TurnLabel,
    pub t_event: f64,
    /// `(t_event - T, t_event)` for a premotor duration `T`.
    pub premotor: (f64, f64),
    pub input_frame_policy: FramePolicy,
    pub source: EventSource,
}

/// Signed steering-angle trace; positive angles are rightward deflections.
#[derive(Debug, Clone, Default)]
pub struct SteeringTrace {
    pub t: Vec<f64>,
    pub angle: Vec<f64>,
}

/// Timestamped positions with speed, as logged by a GPS unit.
#[derive(Debug, Clone, Default)]
pub struct GeoTrace {
    pub t: Vec<f64>,
    /// Degrees.
    pub lat: Vec<f64>,
    /// Degrees.
    pub lon: Vec<f64>,
    /// m/s.
    pub speed: Vec<f64>,
}

pub const DEFAULT_LOOKBEHIND_S: f64 = 0.75;
pub const DEFAULT_MIN_AMPLITUDE_DEG: f64 = 5.0;

/// Detect left/right turn events as local extrema of |angle|.
///
/// An event is the earliest sample of a plateau that is a local maximum of
/// |angle|, reaches `min_amplitude`, and is maximal over its preceding
/// `lookbehind` window. Accepted events are at least `lookbehind` apart so
/// their look-behind windows never overlap. The sign of the angle labels the
/// turn: positive is right, negative is left.
pub fn detect_steering_turns(
    trace: &SteeringTrace,
    lookbehind: f64,
    min_amplitude: f64,
    premotor: f64,
) -> Result<Vec<TurnEvent>> {
    if trace.t.len() != trace.angle.len() {
        return Err(Error::invalid("steering trace columns differ in length"));
    }
    if !(lookbehind > 0.0) {
        return Err(Error::invalid("lookbehind must be positive"));
    }
    if !(min_amplitude > 0.0) {
        return Err(Error::invalid("min amplitude must be positive"));
    }
    if !(premotor > 0.0) {
        return Err(Error::invalid("premotor duration must be positive"));
    }
    let n = trace.t.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    let mag: Vec<f64> = trace.angle.iter().map(|a| a.abs()).collect();

    // Plateau runs of equal |angle|; a run is a local max when both
    // neighboring runs are strictly lower (trace boundaries qualify).
    let mut candidates = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && mag[end + 1] == mag[start] {
            end += 1;
        }
        let left_ok = start == 0 || mag[start - 1] < mag[start];
        let right_ok = end == n - 1 || mag[end + 1] < mag[start];
        if left_ok && right_ok && mag[start] >= min_amplitude {
            candidates.push(start);
        }
        start = end + 1;
    }

    let mut events = Vec::new();
    let mut last_accepted: Option<f64> = None;
    for &i in &candidates {
        let t_i = trace.t[i];
        // Window-maximality over [t_i - lookbehind, t_i].
        let mut maximal = true;
        for j in (0..i).rev() {
            if trace.t[j] < t_i - lookbehind {
                break;
            }
            if mag[j] > mag[i] {
                maximal = false;
                break;
            }
        }
        if !maximal {
            continue;
        }
        if let Some(last) = last_accepted {
            if t_i - last < lookbehind {
                continue;
            }
        }
        last_accepted = Some(t_i);
        events.push(TurnEvent {
            label: if trace.angle[i] > 0.0 {
                TurnLabel::Right
            } else {
                TurnLabel::Left
            },
            t_event: t_i,
            premotor: (t_i - premotor, t_i),
            input_frame_policy: FramePolicy::Last,
            source: EventSource::Steering,
        });
    }
    Ok(events)
}

pub const DEFAULT_HEADING_THRESHOLD_DEG: f64 = 45.0;
pub const DEFAULT_GEO_WINDOW_S: f64 = 3.0;
pub const DEFAULT_MIN_SPEED_MPS: f64 = 1.0;

/// Initial great-circle bearing from one position to another, degrees in
/// [0, 360), measured clockwise from north.
pub fn great_circle_bearing(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dl = (lon2 - lon1).to_radians();
    let y = dl.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dl.cos();
    let mut b = y.atan2(x).to_degrees();
    if b < 0.0 {
        b += 360.0;
    }
    b
}

fn wrap_degrees(delta: f64) -> f64 {
    let mut d = delta % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d <= -180.0 {
        d += 360.0;
    }
    d
}

/// Detect turns from a geo trace: headings come from consecutive positions;
/// an event fires where the cumulative signed heading change over `window`
/// exceeds the threshold (positive is right) while moving at `min_speed` or
/// faster. Emitted events are at least `window` apart.
pub fn detect_geo_turns(
    trace: &GeoTrace,
    heading_change_threshold: f64,
    window: f64,
    min_speed: f64,
    premotor: f64,
) -> Result<Vec<TurnEvent>> {
    let n = trace.t.len();
    if trace.lat.len() != n || trace.lon.len() != n || trace.speed.len() != n {
        return Err(Error::invalid("geo trace columns differ in length"));
    }
    if !(window > 0.0) {
        return Err(Error::invalid("window must be positive"));
    }
    if !(heading_change_threshold > 0.0) {
        return Err(Error::invalid("heading threshold must be positive"));
    }
    if n < 2 {
        return Ok(Vec::new());
    }
    for (&lat, &lon) in trace.lat.iter().zip(&trace.lon) {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("position ({lat}, {lon}) out of range")));
        }
    }

    // Heading of segment k spans positions k -> k+1; the change between
    // consecutive segments is attributed to waypoint k+1.
    let bearings: Vec<f64> = (0..n - 1)
        .map(|k| {
            great_circle_bearing(trace.lat[k], trace.lon[k], trace.lat[k + 1], trace.lon[k + 1])
        })
        .collect();
    let mut change_t = Vec::with_capacity(n.saturating_sub(2));
    let mut change = Vec::with_capacity(n.saturating_sub(2));
    for k in 1..bearings.len() {
        change_t.push(trace.t[k + 1]);
        change.push(wrap_degrees(bearings[k] - bearings[k - 1]));
    }

    let mut events = Vec::new();
    let mut last_accepted: Option<f64> = None;
    for k in 0..change.len() {
        let t_k = change_t[k];
        // Half-open window (t_k - window, t_k], so events a full window
        // apart never share a heading change.
        let mut cum = 0.0;
        for m in (0..=k).rev() {
            if change_t[m] <= t_k - window {
                break;
            }
            cum += change[m];
        }
        if cum.abs() < heading_change_threshold {
            continue;
        }
        // Speed at the waypoint the change is attributed to.
        if trace.speed[k + 2] < min_speed {
            continue;
        }
        if let Some(last) = last_accepted {
            if t_k - last < window {
                continue;
            }
        }
        last_accepted = Some(t_k);
        events.push(TurnEvent {
            label: if cum > 0.0 {
                TurnLabel::Right
            } else {
                TurnLabel::Left
            },
            t_event: t_k,
            premotor: (t_k - premotor, t_k),
            input_frame_policy: FramePolicy::First,
            source: EventSource::Geo,
        });
    }
    Ok(events)
}

/// One entry of an indexed frame sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStamp {
    pub t: f64,
    pub path: PathBuf,
}

/// Time-sorted index of available frames.
#[derive(Debug, Clone, Default)]
pub struct FrameIndex {
    stamps: Vec<FrameStamp>,
}

impl FrameIndex {
    pub fn new(mut stamps: Vec<FrameStamp>) -> Self {
        stamps.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite frame times"));
        Self { stamps }
    }

    pub fn stamps(&self) -> &[FrameStamp] {
        &self.stamps
    }

    /// Latest frame at or before `t`, if any.
    fn at_or_before(&self, t: f64) -> Option<&FrameStamp> {
        let idx = self.stamps.partition_point(|s| s.t <= t);
        idx.checked_sub(1).map(|i| &self.stamps[i])
    }
}

/// Pick the model input frame for an event: the frame at the premotor
/// boundary selected by the event's policy, taking the nearest frame at or
/// before the boundary so nothing after it can leak in.
pub fn select_input_frame<'a>(event: &TurnEvent, frames: &'a FrameIndex) -> Result<&'a FrameStamp> {
    let boundary = match event.input_frame_policy {
        FramePolicy::Last => event.premotor.1,
        FramePolicy::First => event.premotor.0,
    };
    frames.at_or_before(boundary).ok_or_else(|| {
        Error::missing(format!(
            "no frame at or before t={boundary:.3} for event at t={:.3}",
            event.t_event
        ))
    })
}

/// An event with its stable identifier, as used in manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    #[serde(flatten)]
    pub event: TurnEvent,
}

/// Assemble the dataset manifest: one record per event whose artifacts all
/// resolved, and an explicit reject entry (with reason) for every event that
/// is missing something. Duplicate event ids are a hard error.
pub fn assemble_dataset(
    events: &[EventRecord],
    artifacts: &BTreeMap<String, EventArtifacts>,
) -> Result<Manifest> {
    let mut seen = std::collections::BTreeSet::new();
    for ev in events {
        if !seen.insert(&ev.id) {
            return Err(Error::invalid(format!("duplicate event id {}", ev.id)));
        }
    }
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for ev in events {
        let art = artifacts.get(&ev.id);
        let missing: Option<&str> = match art {
            None => Some("missing artifacts"),
            Some(a) => {
                if !a.gaze_ok {
                    Some("missing gaze")
                } else if a.frame.is_none() {
                    Some("missing frame")
                } else if a.fixmap.is_none() {
                    Some("missing fixation map")
                } else if a.uncertainty.is_none() {
                    Some("missing uncertainty")
                } else {
                    None
                }
            }
        };
        match missing {
            Some(reason) => rejects.push(RejectRecord {
                event_id: ev.id.clone(),
                reason: reason.to_string(),
            }),
            None => {
                let a = art.expect("artifact presence checked");
                records.push(ManifestRecord {
                    event_id: ev.id.clone(),
                    label: ev.event.label,
                    t_event: ev.event.t_event,
                    premotor_start: ev.event.premotor.0,
                    premotor_end: ev.event.premotor.1,
                    source: ev.event.source,
                    frame: a.frame.clone().expect("frame present"),
                    fixmap: a.fixmap.clone().expect("fixmap present"),
                    mask: a.mask.clone(),
                    uncertainty: a.uncertainty.expect("uncertainty present"),
                });
            }
        }
    }
    Ok(Manifest { records, rejects })
}
