//! Baselines and evaluation metrics: the gaze-only dummy classifier,
//! attention–fixation alignment (per-layer similarity, IoU), aggregate
//! activation statistics, the Mann–Whitney U test, and classification
//! metrics (accuracy / AUC / F1).

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::events::TurnLabel;
use crate::gaze::{FixationMap, Mask};
use crate::vit::AttentionTensor;

// ---------------------------------------------------------------------------
// Dummy classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DummyPrediction {
    pub label: TurnLabel,
    /// The two half sums were exactly equal; the configured default decided.
    pub tie: bool,
    /// The map was all-zero (implies `tie`).
    pub zero_map: bool,
}

/// Gaze-only baseline: split the fixation map into left and right halves and
/// predict the side with the greater pixel sum. For odd widths the middle
/// column belongs to neither half. Exact ties resolve to `tie_default`.
pub fn dummy_classify(map: &FixationMap, tie_default: TurnLabel) -> DummyPrediction {
    let (h, w) = (map.height(), map.width());
    let half = w / 2;
    let right_start = w - half;
    let mut left_sum = 0.0;
    let mut right_sum = 0.0;
    for i in 0..h {
        for j in 0..half {
            left_sum += map.grid[[i, j]];
        }
        for j in right_start..w {
            right_sum += map.grid[[i, j]];
        }
    }
    let zero_map = left_sum == 0.0 && right_sum == 0.0;
    if left_sum == right_sum {
        DummyPrediction {
            label: tie_default,
            tie: true,
            zero_map,
        }
    } else {
        DummyPrediction {
            label: if right_sum > left_sum {
                TurnLabel::Right
            } else {
                TurnLabel::Left
            },
            tie: false,
            zero_map,
        }
    }
}

// ---------------------------------------------------------------------------
// Alignment metrics
// ---------------------------------------------------------------------------

/// Per-layer similarity: mean over heads of the dot product between the
/// reduced attention vector and the reduced fixation vector.
pub fn layer_similarity(
    attention: &AttentionTensor,
    fixation: &Array1<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(attention.layers());
    for layer in &attention.reduced {
        let mut total = 0.0;
        for head in layer {
            if head.len() != fixation.len() {
                return Err(Error::invalid(format!(
                    "reduced attention length {} does not match fixation length {}",
                    head.len(),
                    fixation.len()
                )));
            }
            total += head.dot(fixation);
        }
        out.push(total / layer.len() as f64);
    }
    Ok(out)
}

pub const IOU_THRESHOLD: f64 = 0.4;

/// IoU of two heat maps binarized at `threshold`. Both maps are expected
/// min-max normalized to [0, 1]. Two empty foregrounds yield 0 with a
/// warning flag.
pub fn iou_alignment(
    attn_map: &Array2<f64>,
    fix_map: &Array2<f64>,
    threshold: f64,
) -> Result<(f64, bool)> {
    if attn_map.shape() != fix_map.shape() {
        return Err(Error::invalid(format!(
            "map shapes {:?} and {:?} differ",
            attn_map.shape(),
            fix_map.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &f) in attn_map.iter().zip(fix_map.iter()) {
        let a_fg = a > threshold;
        let f_fg = f > threshold;
        if a_fg && f_fg {
            inter += 1;
        }
        if a_fg || f_fg {
            union += 1;
        }
    }
    if union == 0 {
        return Ok((0.0, true));
    }
    Ok((inter as f64 / union as f64, false))
}

/// Raw aggregate sums for one sample; z-score them across the evaluation
/// set with [`zscore`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalStatistics {
    /// Sum of reduced attention over layers, heads, and patches.
    pub activation: f64,
    /// Pixel-wise sum of the fixation map.
    pub fixation: f64,
    /// Pixel count of the edge map.
    pub edge: f64,
}

pub fn total_statistics(
    attention: &AttentionTensor,
    fixation: &FixationMap,
    edges: &Mask,
) -> TotalStatistics {
    let activation = attention
        .reduced
        .iter()
        .flat_map(|layer| layer.iter())
        .map(|head| head.sum())
        .sum();
    TotalStatistics {
        activation,
        fixation: fixation.grid.sum(),
        edge: edges.area() as f64,
    }
}

/// Population z-scores. A constant list maps to zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; values.len()];
    }
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / std).collect()
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// Sample `a` tends smaller than `b`.
    Less,
    /// Sample `a` tends larger than `b`.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// U statistic of the first sample.
    pub u: f64,
    pub p: f64,
    pub method: MwuMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MwuMethod {
    ExactPermutation,
    NormalApprox,
    Degenerate,
}

/// Midranks of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).expect("finite values"));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Threshold below which the exact permutation distribution is enumerated.
pub const MWU_EXACT_LIMIT: usize = 12;

/// Rank-sum U test with tie correction: exact enumeration of all
/// C(n, n_a) group assignments when `n_a + n_b <= 12`, otherwise a normal
/// approximation with continuity correction. Returns (U, p).
pub fn mann_whitney_u(
    sample_a: &[f64],
    sample_b: &[f64],
    alternative: Alternative,
) -> Result<MannWhitneyResult> {
    let n1 = sample_a.len();
    let n2 = sample_b.len();
    if n1 == 0 || n2 == 0 {
        return Err(Error::invalid("both samples must be nonempty"));
    }
    let mut pooled: Vec<f64> = Vec::with_capacity(n1 + n2);
    pooled.extend_from_slice(sample_a);
    pooled.extend_from_slice(sample_b);
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let first = pooled[0];
    if pooled.iter().all(|&v| v == first) {
        return Ok(MannWhitneyResult {
            u: n1 as f64 * n2 as f64 / 2.0,
            p: 1.0,
            method: MwuMethod::Degenerate,
        });
    }

    let ranks = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let mu = n1 as f64 * n2 as f64 / 2.0;

    if n1 + n2 <= MWU_EXACT_LIMIT {
        // Exact permutation distribution over group assignments.
        let n = n1 + n2;
        let mut count = 0u64;
        let mut total = 0u64;
        let mut indices: Vec<usize> = (0..n1).collect();
        loop {
            let r: f64 = indices.iter().map(|&i| ranks[i]).sum();
            let u_perm = r - (n1 * (n1 + 1)) as f64 / 2.0;
            let hit = match alternative {
                Alternative::TwoSided => (u_perm - mu).abs() >= (u - mu).abs() - 1e-12,
                Alternative::Less => u_perm <= u + 1e-12,
                Alternative::Greater => u_perm >= u - 1e-12,
            };
            if hit {
                count += 1;
            }
            total += 1;
            // Next lexicographic combination of size n1 from 0..n.
            let mut k = n1;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                if indices[k] != k + n - n1 {
                    indices[k] += 1;
                    for j in k + 1..n1 {
                        indices[j] = indices[j - 1] + 1;
                    }
                    break;
                }
                if k == 0 {
                    return Ok(MannWhitneyResult {
                        u,
                        p: count as f64 / total as f64,
                        method: MwuMethod::ExactPermutation,
                    });
                }
            }
        }
    }

    // Normal approximation with tie correction and continuity correction.
    let n = (n1 + n2) as f64;
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let sigma2 = (n1 as f64 * n2 as f64 / 12.0) * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if sigma2 <= 0.0 {
        return Ok(MannWhitneyResult {
            u,
            p: 1.0,
            method: MwuMethod::Degenerate,
        });
    }
    let sigma = sigma2.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = match alternative {
        Alternative::TwoSided => {
            let z = ((u - mu).abs() - 0.5).max(0.0) / sigma;
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
        Alternative::Less => normal.cdf((u - mu + 0.5) / sigma),
        Alternative::Greater => 1.0 - normal.cdf((u - mu - 0.5) / sigma),
    };
    Ok(MannWhitneyResult {
        u,
        p,
        method: MwuMethod::NormalApprox,
    })
}

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Rank-based AUC for the left class; absent when only one class is
    /// present in the labels.
    pub auc: Option<f64>,
    /// F1 on the left class.
    pub f1: f64,
    pub count: usize,
}

/// Accuracy at a deterministic `score >= 0.5` rule (score is the predicted
/// probability of a left turn), rank-based AUC with tie handling, and F1 on
/// the left class.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[TurnLabel],
) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid("scores must lie in [0, 1]"));
    }

    let mut correct = 0usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&score, &label) in scores.iter().zip(labels) {
        let predicted = if score >= 0.5 {
            TurnLabel::Left
        } else {
            TurnLabel::Right
        };
        if predicted == label {
            correct += 1;
        }
        match (predicted, label) {
            (TurnLabel::Left, TurnLabel::Left) => tp += 1,
            (TurnLabel::Left, TurnLabel::Right) => fp += 1,
            (TurnLabel::Right, TurnLabel::Left) => fn_ += 1,
            _ => {}
        }
    }
    let accuracy = correct as f64 / scores.len() as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    let n_pos = labels.iter().filter(|l| **l == TurnLabel::Left).count();
    let n_neg = labels.len() - n_pos;
    let auc = if n_pos == 0 || n_neg == 0 {
        None
    } else {
        let ranks = midranks(scores);
        let r_pos: f64 = ranks
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == TurnLabel::Left)
            .map(|(r, _)| *r)
            .sum();
        Some((r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
    };

    Ok(ClassificationMetrics {
        accuracy,
        auc,
        f1,
        count: scores.len(),
    })
}
