//! Fixation-map construction from gaze samples, patch-grid reduction, and
//! peripheral / random-control masking.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// One gaze sample in pixel coordinates of its source recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    /// Seconds since recording start.
    pub t: f64,
    /// Horizontal pixel coordinate.
    pub x: f64,
    /// Vertical pixel coordinate.
    pub y: f64,
    /// Tracker confidence gate; invalid samples are ignored.
    pub valid: bool,
}

/// Time-ordered gaze samples plus the resolution they were recorded at.
#[derive(Debug, Clone, Default)]
pub struct GazeTrace {
    pub samples: Vec<GazeSample>,
    /// `(height, width)` of the recording the coordinates refer to. When it
    /// differs from the target frame, coordinates are rescaled before
    /// accumulation.
    pub source_dims: Option<(usize, usize)>,
}

impl GazeTrace {
    pub fn new(samples: Vec<GazeSample>) -> Self {
        Self {
            samples,
            source_dims: None,
        }
    }

    pub fn with_source_dims(mut self, height: usize, width: usize) -> Self {
        self.source_dims = Some((height, width));
        self
    }
}

/// Per-pixel nonnegative heat map of gaze density over one frame.
#[derive(Debug, Clone)]
pub struct FixationMap {
    pub grid: Array2<f64>,
    /// `(t_start, t_end)` of the premotor window the map aggregates.
    pub window: (f64, f64),
    /// Gaussian spread in pixels.
    pub sigma: f64,
    /// True when no valid sample fell in the window; the grid is all zeros.
    pub empty: bool,
}

impl FixationMap {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().cloned().fold(0.0_f64, f64::max)
    }
}

/// How a reduced fixation vector is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Entries sum to 1 (probability vector) when the source map is nonzero.
    #[default]
    UnitSum,
    /// Maximum entry is 1 when the source map is nonzero.
    UnitMax,
    /// Plain per-patch means.
    Raw,
}

/// Patch-grid reduction of a fixation map.
#[derive(Debug, Clone)]
pub struct ReducedFixationVector {
    pub values: Array1<f64>,
    pub normalization: Normalization,
}

/// Accumulate a fixation map over `window` from the valid samples of `trace`.
///
/// Each valid in-window sample contributes a 2D isotropic Gaussian centered
/// at its (rescaled) position, truncated at the frame borders and not
/// renormalized. With `duration_weighting` the contribution is scaled by the
/// sample's dwell time (gap to the next valid in-window sample; the last
/// sample gets the gap to the window end); otherwise every weight is 1.
///
/// An empty window or a window with no valid samples yields an all-zero map
/// with `empty == true`, never an error.
pub fn build_fixation_map(
    trace: &GazeTrace,
    window: (f64, f64),
    frame_dims: (usize, usize),
    sigma: f64,
    duration_weighting: bool,
) -> Result<FixationMap> {
    let (height, width) = frame_dims;
    if height == 0 || width == 0 {
        return Err(Error::invalid("frame dimensions must be positive"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }

    let (scale_x, scale_y) = match trace.source_dims {
        Some((src_h, src_w)) if src_h > 0 && src_w > 0 => {
            (width as f64 / src_w as f64, height as f64 / src_h as f64)
        }
        _ => (1.0, 1.0),
    };

    let in_window: Vec<&GazeSample> = trace
        .samples
        .iter()
        .filter(|s| s.valid && s.t >= window.0 && s.t <= window.1)
        .collect();

    let mut grid = Array2::<f64>::zeros((height, width));
    if in_window.is_empty() || window.1 <= window.0 {
        return Ok(FixationMap {
            grid,
            window,
            sigma,
            empty: true,
        });
    }

    let denom = 2.0 * sigma * sigma;
    let mut col_kernel = vec![0.0_f64; width];
    let mut row_kernel = vec![0.0_f64; height];
    for (idx, sample) in in_window.iter().enumerate() {
        let weight = if duration_weighting {
            let next_t = in_window
                .get(idx + 1)
                .map(|s| s.t)
                .unwrap_or(window.1)
                .max(sample.t);
            next_t - sample.t
        } else {
            1.0
        };
        if weight == 0.0 {
            continue;
        }
        let cx = sample.x * scale_x;
        let cy = sample.y * scale_y;
        for (j, k) in col_kernel.iter_mut().enumerate() {
            let dx = j as f64 - cx;
            *k = (-(dx * dx) / denom).exp();
        }
        for (i, k) in row_kernel.iter_mut().enumerate() {
            let dy = i as f64 - cy;
            *k = (-(dy * dy) / denom).exp();
        }
        for i in 0..height {
            let wy = weight * row_kernel[i];
            let mut row = grid.row_mut(i);
            for j in 0..width {
                row[j] += wy * col_kernel[j];
            }
        }
    }

    Ok(FixationMap {
        grid,
        window,
        sigma,
        empty: false,
    })
}

/// Reduce a fixation map to the patch grid: entry `i` is the area-mean over
/// patch `i` in row-major patch order, followed by the requested
/// normalization. A zero map reduces to a zero vector under every tag.
pub fn reduce_fixation_map(
    map: &FixationMap,
    patch_size: usize,
    normalization: Normalization,
) -> Result<ReducedFixationVector> {
    let (h, w) = (map.height(), map.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let rows = h / patch_size;
    let cols = w / patch_size;
    let area = (patch_size * patch_size) as f64;
    let mut values = Array1::<f64>::zeros(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut sum = 0.0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    sum += map.grid[[py * patch_size + dy, px * patch_size + dx]];
                }
            }
            values[py * cols + px] = sum / area;
        }
    }
    normalize_in_place(&mut values, normalization);
    Ok(ReducedFixationVector {
        values,
        normalization,
    })
}

pub(crate) fn normalize_in_place(values: &mut Array1<f64>, normalization: Normalization) {
    match normalization {
        Normalization::Raw => {}
        Normalization::UnitSum => {
            let total: f64 = values.sum();
            if total > 0.0 {
                values.mapv_inplace(|v| v / total);
            }
        }
        Normalization::UnitMax => {
            let max = values.iter().cloned().fold(0.0_f64, f64::max);
            if max > 0.0 {
                values.mapv_inplace(|v| v / max);
            }
        }
    }
}

/// Binary H×W mask; entries are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub pixels: Array2<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }
}

/// Mask construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Side of the square dilation kernel in pixels. Even sizes use the
    /// usual anchor convention: a point dilates to a block with the extra
    /// row/column after the center.
    pub dilation_kernel: usize,
    /// Binarization threshold as a fraction of the map maximum.
    pub binarize_fraction: f64,
    /// Random-control only.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Peripheral,
    RandomControl,
}

impl MaskSpec {
    /// Peripheral mask with the default 5% binarization threshold.
    /// The 30x30 kernel default matches mid-peripheral vision on a 224x224
    /// frame; scale it with the frame size.
    pub fn peripheral(dilation_kernel: usize) -> Self {
        Self {
            kind: MaskKind::Peripheral,
            dilation_kernel,
            binarize_fraction: 0.05,
            seed: None,
        }
    }

    pub fn random_control(dilation_kernel: usize, seed: u64) -> Self {
        Self {
            kind: MaskKind::RandomControl,
            dilation_kernel,
            binarize_fraction: 0.05,
            seed: Some(seed),
        }
    }
}

/// Binarize a fixation map at `binarize_fraction * max` and dilate with the
/// spec kernel. Returns the mask and a warning flag that is true when the
/// map was all-zero (the mask is then all-zero too).
pub fn make_peripheral_mask(map: &FixationMap, spec: &MaskSpec) -> Result<(Mask, bool)> {
    if spec.kind != MaskKind::Peripheral {
        return Err(Error::invalid("mask spec kind must be peripheral"));
    }
    if spec.dilation_kernel == 0 {
        return Err(Error::invalid("dilation kernel must be at least 1x1"));
    }
    if !(0.0..=1.0).contains(&spec.binarize_fraction) {
        return Err(Error::invalid("binarize fraction must lie in [0, 1]"));
    }
    let max = map.max();
    if max <= 0.0 {
        return Ok((Mask::zeros(map.height(), map.width()), true));
    }
    let threshold = spec.binarize_fraction * max;
    let binary = map.grid.mapv(|v| u8::from(v > threshold));
    let dilated = dilate(&binary, spec.dilation_kernel);
    Ok((Mask { pixels: dilated }, false))
}

/// Binary dilation with a k×k square structuring element, separable
/// sliding-max over rows then columns. A point at `p` spreads to
/// `[p - (k-1)/2, p + k/2]` along each axis.
fn dilate(binary: &Array2<u8>, kernel: usize) -> Array2<u8> {
    let reach_before = (kernel - 1) / 2;
    let reach_after = kernel / 2;
    let (h, w) = (binary.shape()[0], binary.shape()[1]);
    let mut rows = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if binary[[i, j]] != 0 {
                let lo = j.saturating_sub(reach_before);
                let hi = (j + reach_after).min(w - 1);
                for jj in lo..=hi {
                    rows[[i, jj]] = 1;
                }
            }
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if rows[[i, j]] != 0 {
                let lo = i.saturating_sub(reach_before);
                let hi = (i + reach_after).min(h - 1);
                for ii in lo..=hi {
                    out[[ii, j]] = 1;
                }
            }
        }
    }
    out
}

/// Apply an explicit rotation (degrees, about the foreground centroid) and
/// integer translation to a binary mask. Foreground pixels are forward-mapped
/// and deduplicated, so the output area never exceeds the input area, and
/// pixels leaving the frame are clipped.
pub fn transform_mask(mask: &Mask, angle_deg: f64, dx: i64, dy: i64) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Mask::zeros(h, w);
    let area = mask.area();
    if area == 0 {
        return out;
    }
    let (cy, cx) = mask_centroid(mask);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    for i in 0..h {
        for j in 0..w {
            if mask.pixels[[i, j]] == 0 {
                continue;
            }
            let rel_x = j as f64 - cx;
            let rel_y = i as f64 - cy;
            let rot_x = cos * rel_x - sin * rel_y + cx;
            let rot_y = sin * rel_x + cos * rel_y + cy;
            let tx = rot_x.round() as i64 + dx;
            let ty = rot_y.round() as i64 + dy;
            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                out.pixels[[ty as usize, tx as usize]] = 1;
            }
        }
    }
    out
}

fn mask_centroid(mask: &Mask) -> (f64, f64) {
    let mut sum_y = 0.0;
    let mut sum_x = 0.0;
    let mut n = 0.0;
    for ((i, j), &v) in mask.pixels.indexed_iter() {
        if v != 0 {
            sum_y += i as f64;
            sum_x += j as f64;
            n += 1.0;
        }
    }
    (sum_y / n, sum_x / n)
}

/// Control mask for masking ablations: rotate the peripheral mask by a
/// uniform angle in [0°, 360°) and translate it by a uniform integer offset
/// that keeps the mask centroid inside the frame. Deterministic given `seed`.
pub fn make_random_control_mask(mask: &Mask, seed: u64) -> Result<Mask> {
    let (h, w) = (mask.height(), mask.width());
    if h == 0 || w == 0 {
        return Err(Error::invalid("mask must be non-empty"));
    }
    if mask.area() == 0 {
        return Ok(Mask::zeros(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..360.0);
    let (cy, cx) = mask_centroid(mask);
    let (cyi, cxi) = (cy.round() as i64, cx.round() as i64);
    let dx = rng.random_range(-cxi..=(w as i64 - 1 - cxi));
    let dy = rng.random_range(-cyi..=(h as i64 - 1 - cyi));
    Ok(transform_mask(mask, angle, dx, dy))
}

/// Keep frame pixels where the mask is 1, zero them elsewhere (all channels).
pub fn apply_mask(frame: &Frame, mask: &Mask) -> Result<Frame> {
    if frame.height() != mask.height() || frame.width() != mask.width() {
        return Err(Error::invalid(format!(
            "frame {}x{} and mask {}x{} dimensions differ",
            frame.height(),
            frame.width(),
            mask.height(),
            mask.width()
        )));
    }
    let mut out = frame.clone();
    for ((i, j), &keep) in mask.pixels.indexed_iter() {
        if keep == 0 {
            for c in 0..3 {
                out.pixels_mut()[[i, j, c]] = 0.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, x: f64, y: f64) -> GazeSample {
        GazeSample {
            t,
            x,
            y,
            valid: true,
        }
    }

    #[test]
    fn single_sample_map_is_truncated_gaussian() {
        let trace = GazeTrace::new(vec![sample(1.0, 112.0, 112.0)]);
        let map = build_fixation_map(&trace, (0.0, 2.0), (224, 224), 16.0, false).unwrap();
        assert!(!map.empty);
        // Argmax at the sample position.
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for ((i, j), &v) in map.grid.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
        assert_eq!(best, (112, 112));
        let denom = 2.0 * 16.0 * 16.0;
        for ((i, j), &v) in map.grid.indexed_iter() {
            let d2 = (i as f64 - 112.0).powi(2) + (j as f64 - 112.0).powi(2);
            assert!((v - (-d2 / denom).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_window_yields_zero_map_with_flag() {
        let trace = GazeTrace::new(vec![sample(5.0, 10.0, 10.0)]);
        let map = build_fixation_map(&trace, (0.0, 1.0), (224, 224), 16.0, false).unwrap();
        assert!(map.empty);
        assert!(map.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_samples_are_skipped() {
        let mut s = sample(0.5, 10.0, 10.0);
        s.valid = false;
        let map = build_fixation_map(&GazeTrace::new(vec![s]), (0.0, 1.0), (32, 32), 4.0, false)
            .unwrap();
        assert!(map.empty);
    }

    #[test]
    fn accumulation_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (64, 48);
        let sigma = 8.0;
        let samples: Vec<GazeSample> = (0..50)
            .map(|k| GazeSample {
                t: k as f64 * 0.01,
                x: rng.random_range(-5.0..(w as f64 + 5.0)),
                y: rng.random_range(-5.0..(h as f64 + 5.0)),
                valid: true,
            })
            .collect();
        let trace = GazeTrace::new(samples.clone());
        let map = build_fixation_map(&trace, (0.0, 1.0), (h, w), sigma, false).unwrap();

        let denom = 2.0 * sigma * sigma;
        let mut max_diff = 0.0_f64;
        for i in 0..h {
            for j in 0..w {
                let mut expected = 0.0;
                for s in &samples {
                    let d2 = (i as f64 - s.y).powi(2) + (j as f64 - s.x).powi(2);
                    expected += (-d2 / denom).exp();
                }
                max_diff = max_diff.max((expected - map.grid[[i, j]]).abs());
            }
        }
        assert!(max_diff < 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn rescaling_applies_before_accumulation() {
        // Source recorded at 448x448, target 224x224: (224, 224) -> (112, 112).
        let trace = GazeTrace::new(vec![sample(0.5, 224.0, 224.0)]).with_source_dims(448, 448);
        let map = build_fixation_map(&trace, (0.0, 1.0), (224, 224), 8.0, false).unwrap();
        assert!((map.grid[[112, 112]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duration_weighting_uses_dwell_time() {
        let trace = GazeTrace::new(vec![sample(0.0, 4.0, 4.0), sample(0.25, 20.0, 20.0)]);
        let map = build_fixation_map(&trace, (0.0, 1.0), (32, 32), 2.0, true).unwrap();
        // First sample dwells 0.25 s, second 0.75 s (to window end).
        assert!((map.grid[[4, 4]] - 0.25).abs() < 1e-6);
        assert!((map.grid[[20, 20]] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let trace = GazeTrace::new(vec![sample(0.5, 1.0, 1.0)]);
        assert!(build_fixation_map(&trace, (0.0, 1.0), (8, 8), 0.0, false).is_err());
        assert!(build_fixation_map(&trace, (0.0, 1.0), (8, 8), -1.0, false).is_err());
    }

    #[test]
    fn uniform_map_reduces_to_uniform_unit_sum() {
        let map = FixationMap {
            grid: Array2::from_elem((32, 32), 3.7),
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        let red = reduce_fixation_map(&map, 8, Normalization::UnitSum).unwrap();
        assert_eq!(red.values.len(), 16);
        for &v in red.values.iter() {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_in_first_patch_reduces_to_single_nonzero() {
        let mut grid = Array2::<f64>::zeros((32, 32));
        grid[[2, 3]] = 5.0;
        let map = FixationMap {
            grid,
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        let red = reduce_fixation_map(&map, 8, Normalization::Raw).unwrap();
        assert!(red.values[0] > 0.0);
        assert!(red.values.iter().skip(1).all(|&v| v == 0.0));
    }

    #[test]
    fn reduction_matches_naive_patch_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Array2::from_shape_fn((224, 224), |_| rng.random_range(0.0..1.0));
        let map = FixationMap {
            grid: grid.clone(),
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        let red = reduce_fixation_map(&map, 16, Normalization::Raw).unwrap();
        let cols = 224 / 16;
        for py in 0..cols {
            for px in 0..cols {
                let mut sum = 0.0;
                for dy in 0..16 {
                    for dx in 0..16 {
                        sum += grid[[py * 16 + dy, px * 16 + dx]];
                    }
                }
                let expected = sum / 256.0;
                assert!((red.values[py * cols + px] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let map = FixationMap {
            grid: Array2::zeros((30, 32)),
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        assert!(reduce_fixation_map(&map, 8, Normalization::Raw).is_err());
    }

    #[test]
    fn point_dilates_to_kernel_block() {
        let mut grid = Array2::<f64>::zeros((224, 224));
        grid[[100, 100]] = 1.0;
        let map = FixationMap {
            grid,
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        let (mask, warned) = make_peripheral_mask(&map, &MaskSpec::peripheral(30)).unwrap();
        assert!(!warned);
        assert_eq!(mask.area(), 30 * 30);
        for i in 0..224 {
            for j in 0..224 {
                let inside = (86..=115).contains(&i) && (86..=115).contains(&j);
                assert_eq!(mask.pixels[[i, j]] == 1, inside, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_map_gives_zero_mask_and_warning() {
        let map = FixationMap {
            grid: Array2::zeros((16, 16)),
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: true,
        };
        let (mask, warned) = make_peripheral_mask(&map, &MaskSpec::peripheral(5)).unwrap();
        assert!(warned);
        assert_eq!(mask.area(), 0);
    }

    #[test]
    fn dilation_matches_naive_sliding_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Array2::from_shape_fn((48, 40), |_| {
            if rng.random_range(0.0..1.0) < 0.05 {
                rng.random_range(0.5..1.0)
            } else {
                0.0
            }
        });
        let map = FixationMap {
            grid: grid.clone(),
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        for kernel in [1usize, 4, 7] {
            let spec = MaskSpec::peripheral(kernel);
            let (mask, _) = make_peripheral_mask(&map, &spec).unwrap();
            let threshold = 0.05 * grid.iter().cloned().fold(0.0_f64, f64::max);
            let before = (kernel - 1) / 2;
            let after = kernel / 2;
            for i in 0..48usize {
                for j in 0..40usize {
                    let mut any = 0u8;
                    for ii in i.saturating_sub(after)..=(i + before).min(47) {
                        for jj in j.saturating_sub(after)..=(j + before).min(39) {
                            if grid[[ii, jj]] > threshold {
                                any = 1;
                            }
                        }
                    }
                    assert_eq!(mask.pixels[[i, j]], any, "kernel {kernel} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn identity_transform_is_identity() {
        let mut mask = Mask::zeros(32, 32);
        for i in 10..20 {
            for j in 12..18 {
                mask.pixels[[i, j]] = 1;
            }
        }
        let out = transform_mask(&mask, 0.0, 0, 0);
        assert_eq!(out, mask);
    }

    #[test]
    fn random_control_is_deterministic_and_preserves_area_on_average() {
        let mut grid = Array2::<f64>::zeros((224, 224));
        for i in 90..130 {
            for j in 80..120 {
                grid[[i, j]] = 1.0;
            }
        }
        let map = FixationMap {
            grid,
            window: (0.0, 1.0),
            sigma: 1.0,
            empty: false,
        };
        let (mask, _) = make_peripheral_mask(&map, &MaskSpec::peripheral(1)).unwrap();
        let a = make_random_control_mask(&mask, 42).unwrap();
        let b = make_random_control_mask(&mask, 42).unwrap();
        assert_eq!(a, b);

        let base_area = mask.area() as f64;
        let mut ratio_sum = 0.0;
        for seed in 0..1000u64 {
            let m = make_random_control_mask(&mask, seed).unwrap();
            let ratio = m.area() as f64 / base_area;
            assert!(ratio <= 1.0 + 1e-12);
            ratio_sum += ratio;
        }
        let mean = ratio_sum / 1000.0;
        assert!(
            (0.8..=1.0).contains(&mean),
            "mean foreground ratio {mean} outside [0.8, 1.0]"
        );
    }

    #[test]
    fn apply_mask_keeps_and_zeroes_pixels() {
        let mut frame = Frame::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    frame.pixels_mut()[[i, j, c]] = 0.5;
                }
            }
        }
        let mut mask = Mask::zeros(4, 4);
        for i in 0..4 {
            for j in 0..2 {
                mask.pixels[[i, j]] = 1;
            }
        }
        let out = apply_mask(&frame, &mask).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    let expected = if j < 2 { 0.5 } else { 0.0 };
                    assert_eq!(out.pixels()[[i, j, c]], expected);
                }
            }
        }

        let ones = Mask {
            pixels: Array2::from_elem((4, 4), 1),
        };
        assert_eq!(apply_mask(&frame, &ones).unwrap().pixels(), frame.pixels());
        let zeros = Mask::zeros(4, 4);
        assert!(apply_mask(&frame, &zeros)
            .unwrap()
            .pixels()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_dim_mismatch_rejected() {
        let frame = Frame::zeros(4, 4);
        let mask = Mask::zeros(4, 5);
        assert!(apply_mask(&frame, &mask).is_err());
    }
}
