//! Edge maps: grayscale conversion, 3x3 Gaussian smoothing, and Canny
//! detection with a (25, 50) threshold pair.

use ndarray::Array2;

use crate::frame::Frame;
use crate::gaze::Mask;

/// Default Canny threshold pair on the Sobel gradient magnitude.
pub const CANNY_LOW: f64 = 25.0;
pub const CANNY_HIGH: f64 = 50.0;

/// Binary edge map of a frame: luminance, 3x3 Gaussian blur, then Canny.
pub fn edge_map(frame: &Frame) -> Mask {
    edge_map_with_thresholds(frame, CANNY_LOW, CANNY_HIGH)
}

pub fn edge_map_with_thresholds(frame: &Frame, low: f64, high: f64) -> Mask {
    let gray = frame.luminance();
    let blurred = blur3(&gray);
    canny(&blurred, low, high)
}

/// Separable 3x3 binomial Gaussian ([1,2,1]/4 per axis), replicate border.
fn blur3(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let at = |i: isize, j: isize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img[[ii, jj]]
    };
    let mut rows = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (i, j) = (i as isize, j as isize);
            rows[[i as usize, j as usize]] =
                0.25 * (at(i, j - 1) + 2.0 * at(i, j) + at(i, j + 1));
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let at_r = |i: isize, j: usize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        rows[[ii, j]]
    };
    for i in 0..h {
        for j in 0..w {
            let ii = i as isize;
            out[[i, j]] = 0.25 * (at_r(ii - 1, j) + 2.0 * at_r(ii, j) + at_r(ii + 1, j));
        }
    }
    out
}

/// Canny on a grayscale image: Sobel gradients, non-maximum suppression
/// along the gradient direction, then double threshold with 8-connected
/// hysteresis.
fn canny(img: &Array2<f64>, low: f64, high: f64) -> Mask {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let at = |i: isize, j: isize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img[[ii, jj]]
    };

    let mut mag = Array2::<f64>::zeros((h, w));
    let mut dir = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (ii, jj) = (i as isize, j as isize);
            let gx = at(ii - 1, jj + 1) + 2.0 * at(ii, jj + 1) + at(ii + 1, jj + 1)
                - at(ii - 1, jj - 1)
                - 2.0 * at(ii, jj - 1)
                - at(ii + 1, jj - 1);
            let gy = at(ii + 1, jj - 1) + 2.0 * at(ii + 1, jj) + at(ii + 1, jj + 1)
                - at(ii - 1, jj - 1)
                - 2.0 * at(ii - 1, jj)
                - at(ii - 1, jj + 1);
            mag[[i, j]] = (gx * gx + gy * gy).sqrt();
            dir[[i, j]] = gradient_sector(gy, gx);
        }
    }

    // Non-maximum suppression; out-of-frame neighbors count as zero.
    let mag_at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag[[i as usize, j as usize]]
        }
    };
    let mut strong = Vec::new();
    let mut class = Array2::<u8>::zeros((h, w)); // 0 none, 1 weak, 2 strong
    for i in 0..h {
        for j in 0..w {
            let m = mag[[i, j]];
            if m < low {
                continue;
            }
            let (di, dj) = sector_offsets(dir[[i, j]]);
            let (ii, jj) = (i as isize, j as isize);
            // Strict along the positive direction so tied neighbors (e.g. a
            // step between two pixels) keep a single-pixel line.
            if m > mag_at(ii + di, jj + dj) && m >= mag_at(ii - di, jj - dj) {
                if m >= high {
                    class[[i, j]] = 2;
                    strong.push((i, j));
                } else {
                    class[[i, j]] = 1;
                }
            }
        }
    }

    // Hysteresis: weak pixels 8-connected to a strong pixel become edges.
    let mut out = Mask::zeros(h, w);
    let mut stack = strong;
    while let Some((i, j)) = stack.pop() {
        if out.pixels[[i, j]] == 1 {
            continue;
        }
        out.pixels[[i, j]] = 1;
        for di in -1_isize..=1 {
            for dj in -1_isize..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if class[[ni, nj]] != 0 && out.pixels[[ni, nj]] == 0 {
                    stack.push((ni, nj));
                }
            }
        }
    }
    out
}

/// Quantize a gradient direction into 4 sectors (0=E/W, 1=NE/SW diagonal,
/// 2=N/S, 3=NW/SE diagonal).
fn gradient_sector(gy: f64, gx: f64) -> u8 {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        0
    } else if angle < 67.5 {
        1
    } else if angle < 112.5 {
        2
    } else {
        3
    }
}

fn sector_offsets(sector: u8) -> (isize, isize) {
    match sector {
        0 => (0, 1),
        1 => (1, 1),
        2 => (1, 0),
        _ => (1, -1),
    }
}
