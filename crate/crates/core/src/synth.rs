//! Synthetic desk-scale dataset generator.
//!
//! Each event gets a 32x32 frame containing a bright cross glyph whose side
//! (left or right half) encodes the turn label, plus a hollow-square
//! distractor of the same brightness mirrored on the opposite side - the
//! model has to tell the shapes apart, not just find the bright side. Gaze
//! concentrates on the glyph with probability `gaze_correlation` and on the
//! distractor otherwise, so the gaze-only baseline is right about
//! `gaze_correlation` of the time. A configurable fraction of events is
//! rendered at low contrast (the high-uncertainty subset). Steering traces
//! carry one pulse per event whose sign matches the label.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetKind, DatasetMeta};
use crate::error::Result;
use crate::events::{FramePolicy, FrameStamp, SteeringTrace, TurnLabel};
use crate::frame::Frame;
use crate::gaze::{GazeSample, GazeTrace};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub id: String,
    pub samples: usize,
    pub frame_size: usize,
    /// Probability that an event is a left turn.
    pub left_fraction: f64,
    /// Probability that gaze lands on the glyph rather than the distractor.
    pub gaze_correlation: f64,
    /// Fraction of events rendered at low contrast.
    pub high_uncertainty_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            samples: 2000,
            frame_size: 32,
            left_fraction: 0.5,
            gaze_correlation: 0.9,
            high_uncertainty_fraction: 0.5,
        }
    }
}

/// Ground truth for one generated event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub event_id: String,
    pub t_event: f64,
    pub label: TurnLabel,
    /// (y, x) of the glyph center.
    pub glyph_center: (usize, usize),
    pub gaze_on_glyph: bool,
    pub high_uncertainty: bool,
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub truth: Vec<TruthRecord>,
    pub left_count: usize,
}

const EVENT_SPACING_S: f64 = 10.0;
const FIRST_EVENT_S: f64 = 10.0;
const PREMOTOR_S: f64 = 3.0;
const FIXATION_SIGMA_PX: f64 = 2.0;

/// Rendering levels for the two contrast regimes.
struct Regime {
    glyph_amp: f64,
    noise_std: f64,
}

const LOW_UNCERTAINTY: Regime = Regime {
    glyph_amp: 0.38,
    noise_std: 0.045,
};
const HIGH_UNCERTAINTY: Regime = Regime {
    glyph_amp: 0.10,
    noise_std: 0.018,
};
const BACKGROUND: f64 = 0.45;
const GLYPH_HALF: usize = 3;

pub fn event_id(index: usize) -> String {
    format!("ev{index:05}")
}

pub fn event_time(index: usize) -> f64 {
    FIRST_EVENT_S + index as f64 * EVENT_SPACING_S
}

fn draw_cross(frame: &mut Frame, cy: usize, cx: usize, amp: f64) {
    for d in -(GLYPH_HALF as isize)..=(GLYPH_HALF as isize) {
        let y = (cy as isize + d) as usize;
        let x = (cx as isize + d) as usize;
        for c in 0..3 {
            frame.pixels_mut()[[y, cx, c]] += amp;
            frame.pixels_mut()[[cy, x, c]] += amp;
        }
        let _ = (y, x);
    }
}

fn draw_hollow_square(frame: &mut Frame, cy: usize, cx: usize, amp: f64) {
    let h = GLYPH_HALF as isize;
    for d in -h..=h {
        for (y, x) in [
            (cy as isize - h, cx as isize + d),
            (cy as isize + h, cx as isize + d),
            (cy as isize + d, cx as isize - h),
            (cy as isize + d, cx as isize + h),
        ] {
            for c in 0..3 {
                frame.pixels_mut()[[y as usize, x as usize, c]] += amp;
            }
        }
    }
}

/// Generate the dataset under `root`: frames, frame index, session gaze and
/// steering traces, dataset metadata, and a ground-truth record per event.
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
    seed: u64,
    root: &Path,
) -> Result<SynthSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.frame_size;
    data::ensure_dir(root)?;
    data::ensure_dir(&root.join("frames"))?;

    let meta = DatasetMeta {
        id: spec.id.clone(),
        kind: DatasetKind::Synthetic,
        frame_height: size,
        frame_width: size,
        premotor_seconds: PREMOTOR_S,
        frame_policy: FramePolicy::Last,
        fixation_sigma: FIXATION_SIGMA_PX,
        gaze_source_dims: None,
        duration_weighting: false,
    };
    meta.save(root)?;

    let total_time = event_time(spec.samples) + EVENT_SPACING_S;
    let steer_hz = 20.0;
    let steer_n = (total_time * steer_hz) as usize;
    let mut steering = SteeringTrace {
        t: (0..steer_n).map(|i| i as f64 / steer_hz).collect(),
        angle: vec![0.0; steer_n],
    };
    for a in steering.angle.iter_mut() {
        *a = rng.random_range(-0.3..0.3);
    }

    let mut gaze_samples: Vec<GazeSample> = Vec::new();
    let mut stamps = Vec::with_capacity(spec.samples);
    let mut truth = Vec::with_capacity(spec.samples);
    let mut left_count = 0usize;

    let margin = GLYPH_HALF + 1;
    for index in 0..spec.samples {
        let id = event_id(index);
        let t_event = event_time(index);
        let label = if rng.random_range(0.0..1.0) < spec.left_fraction {
            TurnLabel::Left
        } else {
            TurnLabel::Right
        };
        if label == TurnLabel::Left {
            left_count += 1;
        }
        let high_uncertainty = rng.random_range(0.0..1.0) < spec.high_uncertainty_fraction;
        let regime = if high_uncertainty {
            &HIGH_UNCERTAINTY
        } else {
            &LOW_UNCERTAINTY
        };

        // Glyph on the label side, distractor mirrored.
        let cy = rng.random_range(margin..size - margin);
        let half = size / 2;
        let cx = match label {
            TurnLabel::Left => rng.random_range(margin..half - margin),
            TurnLabel::Right => rng.random_range(half + margin..size - margin),
        };
        let dx = size - 1 - cx;

        let mut frame = Frame::zeros(size, size);
        for v in frame.pixels_mut().iter_mut() {
            *v = BACKGROUND;
        }
        draw_cross(&mut frame, cy, cx, regime.glyph_amp);
        draw_hollow_square(&mut frame, cy, dx, regime.glyph_amp);
        for v in frame.pixels_mut().iter_mut() {
            *v = (*v + rng.random_range(-1.0..1.0) * regime.noise_std).clamp(0.0, 1.0);
        }
        let frame_rel = PathBuf::from(format!("frames/{id}.png"));
        frame.save_png(&root.join(&frame_rel))?;
        stamps.push(FrameStamp {
            t: t_event,
            path: frame_rel,
        });

        // Premotor gaze: 30 samples on the glyph or, with 1 - rho, on the
        // distractor. A few samples are marked invalid.
        let gaze_on_glyph = rng.random_range(0.0..1.0) < spec.gaze_correlation;
        let (ty, tx) = if gaze_on_glyph {
            (cy as f64, cx as f64)
        } else {
            (cy as f64, dx as f64)
        };
        for k in 0..30 {
            let t = t_event - PREMOTOR_S + (k as f64 + 0.5) * PREMOTOR_S / 30.0;
            gaze_samples.push(GazeSample {
                t,
                x: tx + rng.random_range(-1.2..1.2),
                y: ty + rng.random_range(-1.2..1.2),
                valid: rng.random_range(0.0..1.0) > 0.05,
            });
        }

        // Steering pulse: triangular, signed by label, 0.5 s wide.
        let sign = match label {
            TurnLabel::Right => 1.0,
            TurnLabel::Left => -1.0,
        };
        let start = ((t_event - 0.5) * steer_hz) as usize;
        let end = ((t_event + 0.5) * steer_hz) as usize;
        for i in start..=end.min(steer_n - 1) {
            let t = steering.t[i];
            let d = (t - t_event).abs();
            if d < 0.5 {
                steering.angle[i] += sign * 20.0 * (1.0 - d / 0.5);
            }
        }

        truth.push(TruthRecord {
            event_id: id,
            t_event,
            label,
            glyph_center: (cy, cx),
            gaze_on_glyph,
            high_uncertainty,
        });
    }

    data::write_frame_index_csv(&root.join("frames.csv"), &stamps)?;
    data::write_gaze_csv(&root.join("gaze.csv"), &GazeTrace::new(gaze_samples))?;
    data::write_steering_csv(&root.join("steering.csv"), &steering)?;
    data::write_jsonl(&root.join("truth.jsonl"), &truth)?;

    Ok(SynthSummary {
        root: root.to_path_buf(),
        truth,
        left_count,
    })
}
