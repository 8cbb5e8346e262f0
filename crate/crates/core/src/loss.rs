//! Training losses: binary cross entropy on the class probabilities, the
//! fixation–attention intersection term, and their λ-weighted combination
//! (the FAX loss). Everything is differentiable end to end; gradients reach
//! the attention weights through the query/key projections only, since the
//! weights are softmax outputs.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::TurnLabel;
use crate::frame::Frame;
use crate::gaze::ReducedFixationVector;
use crate::vit::{AttentionTensor, ForwardOutput, ModelConfig, VisionTransformer};

/// λ values evaluated in experiments; 0 is the pure-classification baseline.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.01, 0.1, 0.2, 0.8, 1.0];

const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-sample loss components as logged to the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    /// Mean attention–fixation dot product; absent for pure BCE runs.
    pub intersection: Option<f64>,
    /// `1 / sigmoid(intersection)`; absent for pure BCE runs.
    pub intersection_loss: Option<f64>,
    /// `(1 - lambda) * bce + lambda * intersection_loss`.
    pub fax: f64,
    pub lambda: f64,
}

impl TurnLabel {
    /// Class index in the probability vector: left = 0, right = 1.
    pub fn class_index(self) -> usize {
        match self {
            TurnLabel::Left => 0,
            TurnLabel::Right => 1,
        }
    }
}

/// Binary cross entropy with one-hot targets: `-c1 log(m1) - c2 log(m2)`.
/// Probabilities are clamped at 1e-12 before the log.
pub fn bce_loss(probs: (f64, f64), label: TurnLabel) -> f64 {
    let m = match label {
        TurnLabel::Left => probs.0,
        TurnLabel::Right => probs.1,
    };
    -m.max(PROB_FLOOR).ln()
}

/// Mean over all layers and heads of the dot product between the reduced
/// attention vector and the reduced fixation vector.
pub fn intersection(attention: &AttentionTensor, fixation: &ReducedFixationVector) -> Result<f64> {
    intersection_with_values(attention, &fixation.values)
}

pub fn intersection_with_values(
    attention: &AttentionTensor,
    fixation: &Array1<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in &attention.reduced {
        for head in layer {
            if head.len() != fixation.len() {
                return Err(Error::invalid(format!(
                    "reduced attention length {} does not match fixation length {}",
                    head.len(),
                    fixation.len()
                )));
            }
            total += head.dot(fixation);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("attention tensor has no heads"));
    }
    Ok(total / count as f64)
}

/// `1 / sigmoid(I)`, i.e. `1 + exp(-I)`. Strictly decreasing in `I`; lies in
/// (1, 2] for nonnegative `I`.
pub fn intersection_loss(i: f64) -> f64 {
    1.0 + (-i).exp()
}

/// `(1 - lambda) * bce + lambda * l_int` for `lambda` in [0, 1].
pub fn fax_loss(bce: f64, l_int: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok((1.0 - lambda) * bce + lambda * l_int)
}

/// Everything the training step needs for one sample: the loss breakdown,
/// the gradient on the logits, and (when an alignment term is active) the
/// gradient on every head's reduced attention vector.
pub fn fax_sample_gradients(
    output: &ForwardOutput,
    label: TurnLabel,
    fixation: Option<&Array1<f64>>,
    lambda: f64,
) -> Result<(LossBreakdown, Array1<f64>, Option<Array1<f64>>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let probs = (output.probs[0], output.probs[1]);
    let bce = bce_loss(probs, label);

    // d bce / d logits for softmax probabilities: m - onehot.
    let mut dlogits = output.probs.clone();
    dlogits[label.class_index()] -= 1.0;
    dlogits.mapv_inplace(|v| v * (1.0 - lambda));

    let (breakdown, dreduced) = match fixation {
        Some(f_red) => {
            let i = intersection_with_values(&output.attention, f_red)?;
            let l_int = intersection_loss(i);
            let fax = fax_loss(bce, l_int, lambda)?;
            // d l_int / d I = -exp(-I); shared across heads and layers.
            let head_count =
                (output.attention.layers() * output.attention.heads()) as f64;
            let coeff = lambda * (-(-i).exp()) / head_count;
            let dreduced = (lambda != 0.0).then(|| f_red.mapv(|v| v * coeff));
            (
                LossBreakdown {
                    bce,
                    intersection: Some(i),
                    intersection_loss: Some(l_int),
                    fax,
                    lambda,
                },
                dreduced,
            )
        }
        None => {
            if lambda != 0.0 {
                return Err(Error::missing(
                    "an alignment-weighted loss needs a fixation vector",
                ));
            }
            (
                LossBreakdown {
                    bce,
                    intersection: None,
                    intersection_loss: None,
                    fax: bce,
                    lambda,
                },
                None,
            )
        }
    };
    Ok((breakdown, dlogits, dreduced))
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub lambda: f64,
    pub params_checked: usize,
    pub max_rel_error: f64,
    /// L2 norm of the analytic query/key projection gradients, to show the
    /// alignment term reaches attention.
    pub qk_grad_norm: f64,
}

struct CheckSample {
    frame: Frame,
    label: TurnLabel,
    fixation: Array1<f64>,
}

fn check_batch(config: &ModelConfig, size: usize, seed: u64) -> Vec<CheckSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.patch_count();
    (0..size)
        .map(|_| {
            let mut frame = Frame::zeros(config.frame_height, config.frame_width);
            for v in frame.pixels_mut().iter_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            let mut fixation = Array1::from_shape_fn(n, |_| rng.random_range(0.0..1.0));
            let total = fixation.sum();
            fixation.mapv_inplace(|v| v / total);
            let label = if rng.random_range(0.0..1.0) < 0.5 {
                TurnLabel::Left
            } else {
                TurnLabel::Right
            };
            CheckSample {
                frame,
                label,
                fixation,
            }
        })
        .collect()
}

fn batch_loss(model: &VisionTransformer, batch: &[CheckSample], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let out = model.forward(&sample.frame)?;
        let (breakdown, _, _) =
            fax_sample_gradients(&out, sample.label, Some(&sample.fixation), lambda)?;
        total += breakdown.fax;
    }
    Ok(total / batch.len() as f64)
}

fn analytic_batch_grads(
    model: &VisionTransformer,
    batch: &[CheckSample],
    lambda: f64,
) -> Result<crate::vit::Params> {
    let mut grads = crate::vit::Params::zeros_like(model.params());
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let cache = model.forward_cached(&sample.frame)?;
        let (_, dlogits, dreduced) =
            fax_sample_gradients(&cache.output, sample.label, Some(&sample.fixation), lambda)?;
        let sample_grads = model.backward(&cache, &dlogits, dreduced.as_ref());
        grads.axpy(scale, &sample_grads);
    }
    Ok(grads)
}

/// Verify analytic FAX gradients against central finite differences
/// (step 1e-5) on a random parameter subset spanning the query/key
/// projections, value projections, embeddings, and the classifier head.
/// The relative error divides by `max(|g|, 1e-8)`.
pub fn fax_backward_check(
    config: &ModelConfig,
    lambda: f64,
    batch_size: usize,
    params_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let model = VisionTransformer::new(config.clone(), seed)?;
    let batch = check_batch(config, batch_size, seed.wrapping_add(1));
    let analytic = analytic_batch_grads(&model, &batch, lambda)?;

    let flat = analytic.flatten();
    let mut qk_norm_sq = 0.0;
    for (name, values) in &flat {
        if name.ends_with(".wq") || name.ends_with(".wk") {
            qk_norm_sq += values.iter().map(|v| v * v).sum::<f64>();
        }
    }

    let groups: [&[&str]; 4] = [
        &["wq", "wk", "bq", "bk"],
        &["wv", "bv"],
        &["patch_w", "pos", "cls"],
        &["head_w", "head_b"],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut targets: Vec<(String, usize)> = Vec::new();
    for group in groups {
        let members: Vec<&(String, Vec<f64>)> = flat
            .iter()
            .filter(|(name, _)| {
                group
                    .iter()
                    .any(|g| name == g || name.ends_with(&format!(".{g}")))
            })
            .collect();
        let total: usize = members.iter().map(|(_, v)| v.len()).sum();
        for _ in 0..params_per_group {
            let mut pick = rng.random_range(0..total);
            for (name, values) in &members {
                if pick < values.len() {
                    targets.push((name.clone(), pick));
                    break;
                }
                pick -= values.len();
            }
        }
    }

    let step = 1e-5;
    let mut max_rel: f64 = 0.0;
    let analytic_by_name: std::collections::BTreeMap<String, Vec<f64>> =
        flat.into_iter().collect();
    for (name, idx) in &targets {
        let ga = analytic_by_name[name][*idx];
        let mut plus = model.clone();
        plus.params_mut().nudge_scalar(name, *idx, step);
        let mut minus = model.clone();
        minus.params_mut().nudge_scalar(name, *idx, -step);
        let gn = (batch_loss(&plus, &batch, lambda)? - batch_loss(&minus, &batch, lambda)?)
            / (2.0 * step);
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }

    Ok(GradCheckReport {
        lambda,
        params_checked: targets.len(),
        max_rel_error: max_rel,
        qk_grad_norm: qk_norm_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn bce_reference_points() {
        let v = bce_loss((0.5, 0.5), TurnLabel::Left);
        assert!((v - 0.693147).abs() < 1e-6);
        let near_perfect = bce_loss((1.0 - 1e-12, 1e-12), TurnLabel::Left);
        assert!(near_perfect > 0.0 && near_perfect < 1e-9);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..200 {
            let m1: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let probs = (m1, 1.0 - m1);
            let label = if rng.random_range(0.0..1.0) < 0.5 {
                TurnLabel::Left
            } else {
                TurnLabel::Right
            };
            let (c1, c2) = match label {
                TurnLabel::Left => (1.0, 0.0),
                TurnLabel::Right => (0.0, 1.0),
            };
            let direct = -c1 * probs.0.ln() - c2 * probs.1.ln();
            assert!((bce_loss(probs, label) - direct).abs() < 1e-12);
        }
    }

    fn tensor_from(reduced: Vec<Vec<Array1<f64>>>) -> AttentionTensor {
        let weights = reduced
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|h| Array2::zeros((h.len() + 1, h.len() + 1)))
                    .collect()
            })
            .collect();
        AttentionTensor { weights, reduced }
    }

    fn one_hot(n: usize, idx: usize) -> Array1<f64> {
        let mut v = Array1::zeros(n);
        v[idx] = 1.0;
        v
    }

    #[test]
    fn intersection_one_hot_cases() {
        let attn = tensor_from(vec![vec![one_hot(8, 3)]]);
        assert_eq!(
            intersection_with_values(&attn, &one_hot(8, 3)).unwrap(),
            1.0
        );
        assert_eq!(
            intersection_with_values(&attn, &one_hot(8, 5)).unwrap(),
            0.0
        );
    }

    #[test]
    fn intersection_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let reduced: Vec<Vec<Array1<f64>>> = (0..2)
            .map(|_| {
                (0..2)
                    .map(|_| Array1::from_shape_fn(16, |_| rng.random_range(0.0..1.0)))
                    .collect()
            })
            .collect();
        let fixation = Array1::from_shape_fn(16, |_| rng.random_range(0.0..1.0));
        let attn = tensor_from(reduced.clone());
        let mut total = 0.0;
        for layer in &reduced {
            for head in layer {
                for j in 0..16 {
                    total += head[j] * fixation[j];
                }
            }
        }
        let expected = total / 4.0;
        let got = intersection_with_values(&attn, &fixation).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn intersection_length_mismatch_rejected() {
        let attn = tensor_from(vec![vec![one_hot(8, 0)]]);
        assert!(intersection_with_values(&attn, &one_hot(9, 0)).is_err());
    }

    #[test]
    fn intersection_loss_reference_points() {
        assert!((intersection_loss(0.0) - 2.0).abs() < 1e-12);
        assert!((intersection_loss(1.0) - (1.0 + (-1.0_f64).exp())).abs() < 1e-12);
        assert!((intersection_loss(1.0) - 1.367879).abs() < 1e-6);
        // Monotone decreasing toward 1 (strictly, until e^{-I} underflows
        // below one ulp of 1.0).
        let mut prev = f64::INFINITY;
        for k in 0..=60 {
            let i = k as f64 * 0.5;
            let v = intersection_loss(i);
            assert!(v < prev, "not decreasing at I={i}");
            assert!(v > 1.0);
            prev = v;
        }
        assert!((intersection_loss(100.0) - 1.0).abs() < 1e-12);
        // Bounded in (1, 2] on I >= 0, matching the BCE scale.
        assert!(intersection_loss(0.0) <= 2.0);
    }

    #[test]
    fn fax_loss_endpoints_and_arithmetic() {
        assert_eq!(fax_loss(0.7, 1.9, 0.0).unwrap(), 0.7);
        assert_eq!(fax_loss(0.7, 1.9, 1.0).unwrap(), 1.9);
        let v = fax_loss(0.693147, 2.0, 0.2).unwrap();
        assert!((v - 0.954518).abs() < 1e-6);
        assert!(fax_loss(0.7, 1.9, -0.1).is_err());
        assert!(fax_loss(0.7, 1.9, 1.1).is_err());
    }

    #[test]
    fn fax_lambda_derivative_identity() {
        // d/dλ [(1-λ) b + λ i] = i - b, checked by finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let b: f64 = rng.random_range(0.0..3.0);
            let i: f64 = rng.random_range(1.0..2.0);
            let lambda: f64 = rng.random_range(0.01..0.99);
            let h = 1e-7;
            let fd = (fax_loss(b, i, lambda + h).unwrap() - fax_loss(b, i, lambda - h).unwrap())
                / (2.0 * h);
            assert!((fd - (i - b)).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinearity_of_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let reduced: Vec<Vec<Array1<f64>>> = vec![vec![
            Array1::from_shape_fn(8, |_| rng.random_range(0.0..1.0)),
            Array1::from_shape_fn(8, |_| rng.random_range(0.0..1.0)),
        ]];
        let attn = tensor_from(reduced);
        let f1 = Array1::from_shape_fn(8, |_| rng.random_range(0.0..1.0));
        let f2 = Array1::from_shape_fn(8, |_| rng.random_range(0.0..1.0));
        let i1 = intersection_with_values(&attn, &f1).unwrap();
        let i2 = intersection_with_values(&attn, &f2).unwrap();
        let sum = intersection_with_values(&attn, &(&f1 + &f2)).unwrap();
        assert!((sum - (i1 + i2)).abs() < 1e-12);
        let scaled = intersection_with_values(&attn, &(&f1 * 3.5)).unwrap();
        assert!((scaled - 3.5 * i1).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_smoke_all_lambdas() {
        // Small parameter sample per group to keep unit tests quick; the
        // acceptance suite runs the full-size check.
        let config = ModelConfig::desk();
        for lambda in [0.0, 0.5, 1.0] {
            let report = fax_backward_check(&config, lambda, 2, 10, 123).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "lambda {lambda}: max rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn alignment_gradients_reach_query_key_projections() {
        let config = ModelConfig::desk();
        let report = fax_backward_check(&config, 1.0, 2, 5, 7).unwrap();
        assert!(report.qk_grad_norm > 1e-8, "qk norm {}", report.qk_grad_norm);
    }

    #[test]
    fn missing_fixation_with_positive_lambda_errors() {
        let config = ModelConfig::desk();
        let model = VisionTransformer::new(config.clone(), 3).unwrap();
        let frame = Frame::zeros(32, 32);
        let out = model.forward(&frame).unwrap();
        assert!(fax_sample_gradients(&out, TurnLabel::Left, None, 0.5).is_err());
        let (breakdown, _, dred) =
            fax_sample_gradients(&out, TurnLabel::Left, None, 0.0).unwrap();
        assert!(dred.is_none());
        assert_eq!(breakdown.fax, breakdown.bce);
    }
}
