//! Scene-uncertainty scalars and high/low splits.
//!
//! Two sources: a fog-opacity value carried in trial metadata (higher means
//! more uncertain), or mean local image contrast (lower means more
//! uncertain).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

const MICHELSON_EPS: f64 = 1e-6;

/// Uncertainty scalar attached to one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyLabel {
    pub value: f64,
    pub source: UncertaintySource,
    pub split: SplitTag,
    /// Threshold the split was decided against (median or fixed).
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintySource {
    Opacity,
    Contrast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    High,
    Low,
}

/// Mean local Michelson contrast: per pixel, `(Lmax - Lmin) / (Lmax + Lmin + eps)`
/// over its 5x5 neighborhood (borders use the valid sub-window), averaged
/// over all pixels. Lower contrast means higher uncertainty. The result lies
/// in [0, 1].
pub fn contrast_uncertainty(frame: &Frame) -> f64 {
    let lum = frame.luminance();
    let (h, w) = (lum.shape()[0], lum.shape()[1]);
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let i0 = i.saturating_sub(2);
            let i1 = (i + 2).min(h - 1);
            let j0 = j.saturating_sub(2);
            let j1 = (j + 2).min(w - 1);
            let mut lmin = f64::INFINITY;
            let mut lmax = f64::NEG_INFINITY;
            for ii in i0..=i1 {
                for jj in j0..=j1 {
                    let v = lum[[ii, jj]];
                    lmin = lmin.min(v);
                    lmax = lmax.max(v);
                }
            }
            total += (lmax - lmin) / (lmax + lmin + MICHELSON_EPS);
        }
    }
    total / (h * w) as f64
}

/// Per-trial metadata as recorded by the capture rig.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrialMetadata {
    /// Visual-noise opacity for the trial, when the rig provides one.
    pub opacity: Option<f64>,
}

/// Opacity-based uncertainty: the trial's opacity setting itself (higher
/// means more uncertain).
pub fn opacity_uncertainty(metadata: &TrialMetadata) -> Result<f64> {
    metadata
        .opacity
        .ok_or_else(|| Error::missing("trial metadata has no opacity field"))
}

/// Rule for splitting a value list into high/low uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "threshold")]
pub enum SplitRule {
    /// Values strictly beyond the per-dataset median are tagged per direction.
    Median,
    /// Values strictly beyond a fixed threshold.
    FixedThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitDirection {
    HigherIsUncertain,
    LowerIsUncertain,
}

/// Outcome of a split, with counts for audit.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub tags: Vec<SplitTag>,
    pub threshold: f64,
    pub high_count: usize,
    pub low_count: usize,
}

/// Tag each value high/low uncertainty. Median rule tags values strictly
/// beyond the median in the uncertain direction; ties at the threshold fall
/// to low.
pub fn split_by_uncertainty(
    values: &[f64],
    rule: SplitRule,
    direction: SplitDirection,
) -> Result<SplitOutcome> {
    if values.is_empty() {
        return Err(Error::invalid("cannot split an empty value list"));
    }
    let threshold = match rule {
        SplitRule::FixedThreshold(t) => t,
        SplitRule::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite uncertainty values"));
            if values.iter().all(|&v| v == sorted[0]) {
                return Err(Error::Degenerate(
                    "all uncertainty values identical; median split undefined".into(),
                ));
            }
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            }
        }
    };
    let tags: Vec<SplitTag> = values
        .iter()
        .map(|&v| {
            let uncertain = match direction {
                SplitDirection::HigherIsUncertain => v > threshold,
                SplitDirection::LowerIsUncertain => v < threshold,
            };
            if uncertain {
                SplitTag::High
            } else {
                SplitTag::Low
            }
        })
        .collect();
    let high_count = tags.iter().filter(|t| **t == SplitTag::High).count();
    Ok(SplitOutcome {
        threshold,
        high_count,
        low_count: tags.len() - high_count,
        tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_frame_has_zero_contrast() {
        let mut frame = Frame::zeros(16, 16);
        frame.pixels_mut().fill(0.5);
        assert!(contrast_uncertainty(&frame).abs() < 1e-9);
    }

    #[test]
    fn checkerboard_contrast_is_near_one() {
        let mut frame = Frame::zeros(16, 16);
        for i in 0..16 {
            for j in 0..16 {
                let v = if (i + j) % 2 == 0 { 0.0 } else { 1.0 };
                for c in 0..3 {
                    frame.pixels_mut()[[i, j, c]] = v;
                }
            }
        }
        assert!(contrast_uncertainty(&frame) > 0.99);
    }

    #[test]
    fn contrast_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (24usize, 31usize);
        let mut frame = Frame::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    frame.pixels_mut()[[i, j, c]] = rng.random_range(0.0..1.0);
                }
            }
        }
        let lum = frame.luminance();
        let mut total = 0.0;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut lmin = f64::INFINITY;
                let mut lmax = f64::NEG_INFINITY;
                for di in -2..=2_isize {
                    for dj in -2..=2_isize {
                        let (ii, jj) = (i + di, j + dj);
                        if ii >= 0 && jj >= 0 && ii < h as isize && jj < w as isize {
                            let v = lum[[ii as usize, jj as usize]];
                            lmin = lmin.min(v);
                            lmax = lmax.max(v);
                        }
                    }
                }
                total += (lmax - lmin) / (lmax + lmin + MICHELSON_EPS);
            }
        }
        let expected = total / (h * w) as f64;
        assert!((contrast_uncertainty(&frame) - expected).abs() < 1e-9);
    }

    #[test]
    fn contrast_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut frame = Frame::zeros(12, 12);
            for v in frame.pixels_mut().iter_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            let c = contrast_uncertainty(&frame);
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn opacity_passthrough_and_missing() {
        let meta = TrialMetadata {
            opacity: Some(0.65),
        };
        assert_eq!(opacity_uncertainty(&meta).unwrap(), 0.65);
        let meta = TrialMetadata {
            opacity: Some(0.24),
        };
        assert_eq!(opacity_uncertainty(&meta).unwrap(), 0.24);
        assert!(opacity_uncertainty(&TrialMetadata::default()).is_err());
    }

    #[test]
    fn median_split_tags_beyond_median() {
        let out = split_by_uncertainty(
            &[1.0, 2.0, 3.0, 4.0],
            SplitRule::Median,
            SplitDirection::HigherIsUncertain,
        )
        .unwrap();
        assert_eq!(
            out.tags,
            vec![SplitTag::Low, SplitTag::Low, SplitTag::High, SplitTag::High]
        );
        assert_eq!(out.high_count, 2);
        assert_eq!(out.low_count, 2);
    }

    #[test]
    fn fixed_split_uses_threshold() {
        let out = split_by_uncertainty(
            &[0.24, 0.65],
            SplitRule::FixedThreshold(0.5),
            SplitDirection::HigherIsUncertain,
        )
        .unwrap();
        assert_eq!(out.tags, vec![SplitTag::Low, SplitTag::High]);
    }

    #[test]
    fn degenerate_median_split_errors() {
        let res = split_by_uncertainty(
            &[2.0, 2.0, 2.0],
            SplitRule::Median,
            SplitDirection::HigherIsUncertain,
        );
        assert!(matches!(res, Err(Error::Degenerate(_))));
    }

    #[test]
    fn separated_contrast_groups_split_cleanly() {
        // Draws around the two real-world contrast levels, separated by
        // construction; a median split must recover group membership.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut values = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..500 {
            values.push(0.11 + rng.random_range(-0.03..0.03));
            truth.push(SplitTag::High); // low contrast = high uncertainty
            values.push(0.39 + rng.random_range(-0.03..0.03));
            truth.push(SplitTag::Low);
        }
        let out = split_by_uncertainty(
            &values,
            SplitRule::Median,
            SplitDirection::LowerIsUncertain,
        )
        .unwrap();
        assert_eq!(out.tags, truth);
    }

    #[test]
    fn median_split_is_balanced_up_to_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let out = split_by_uncertainty(
                &values,
                SplitRule::Median,
                SplitDirection::HigherIsUncertain,
            )
            .unwrap();
            let ties = values.iter().filter(|&&v| v == out.threshold).count();
            let diff = out.high_count.abs_diff(out.low_count);
            assert!(diff <= ties, "diff {diff}, ties {ties}");
        }
    }
}
