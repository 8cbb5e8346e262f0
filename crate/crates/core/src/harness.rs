//! Experiment orchestration: dataset splits, the training loop, evaluation,
//! λ sweeps over multiple seeds, and pairwise statistical comparisons.
//!
//! Every run is reproducible: the same config and seed produce byte-identical
//! metrics records. Run artifacts (split manifests, step metrics, checkpoint,
//! run record) live in a per-run directory; the dataset itself is never
//! modified. Evaluation never opens a fixation map, which the access audit
//! enforces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, DatasetStore, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::events::TurnLabel;
use crate::frame::Frame;
use crate::gaze::{self, Normalization};
use crate::loss::{self, LossBreakdown};
use crate::metrics::{self, Alternative, ClassificationMetrics};
use crate::uncertainty::SplitTag;
use crate::vit::{ModelConfig, Params, VisionTransformer};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.65,
            valid: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.valid + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 {
            return Err(Error::invalid("all split ratios must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Bce,
    Fax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl LossConfig {
    pub fn bce() -> Self {
        Self {
            mode: LossMode::Bce,
            lambda: None,
        }
    }

    pub fn fax(lambda: f64) -> Self {
        Self {
            mode: LossMode::Fax,
            lambda: Some(lambda),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.lambda) {
            (LossMode::Bce, None) => Ok(()),
            (LossMode::Bce, Some(_)) => {
                Err(Error::invalid("lambda must be absent for the bce loss"))
            }
            (LossMode::Fax, Some(l)) if (0.0..=1.0).contains(&l) => Ok(()),
            (LossMode::Fax, Some(l)) => Err(Error::invalid(format!("lambda {l} outside [0, 1]"))),
            (LossMode::Fax, None) => Err(Error::invalid("the fax loss requires lambda")),
        }
    }

    /// Effective λ: 0 for pure BCE.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Initial SGD learning rate.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the rate by this factor at `decay_epoch`.
    pub decay_factor: f64,
    pub decay_epoch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_epoch: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InputMasking {
    #[default]
    None,
    /// Zero everything outside the dilated fixation region.
    Peripheral,
    /// Control: the peripheral mask randomly rotated and translated.
    RandomControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    #[serde(default)]
    pub input_masking: InputMasking,
    #[serde(default)]
    pub fixation_normalization: Normalization,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a synthetic dataset at `root`.
    pub fn desk(root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: root.into(),
            split: SplitRatios::default(),
            model: ModelConfig::desk(),
            loss: LossConfig::bce(),
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 20,
            seeds: vec![0],
            deterministic: true,
            input_masking: InputMasking::None,
            fixation_normalization: Normalization::UnitSum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max epochs must be positive"));
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds max epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        Ok(())
    }

    /// Stable hash of the full configuration.
    pub fn hash(&self) -> String {
        let body = serde_json::to_string(self).expect("serializable config");
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

/// Stratified split: per label, records are shuffled deterministically and
/// allocated to train/valid/test by largest remainder, with tie priority
/// rotated across strata so the overall sizes land on the targets. The three
/// outputs partition the input.
pub fn split_dataset(
    records: &[ManifestRecord],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty manifest"));
    }

    let mut strata: BTreeMap<&'static str, Vec<ManifestRecord>> = BTreeMap::new();
    for r in records {
        let key = match r.label {
            TurnLabel::Left => "left",
            TurnLabel::Right => "right",
        };
        strata.entry(key).or_default().push(r.clone());
    }

    let mut splits: [Vec<ManifestRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let fractions = [ratios.train, ratios.valid, ratios.test];
    for (stratum_index, (_, mut members)) in strata.into_iter().enumerate() {
        members.sort_by(|a, b| a.event_id.cmp(&b.event_id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(stratum_index as u64));
        members.shuffle(&mut rng);

        let total = members.len();
        let mut counts = [0usize; 3];
        let mut remainders = [(0.0, 0usize); 3];
        let mut assigned = 0usize;
        for k in 0..3 {
            let exact = fractions[k] * total as f64;
            counts[k] = exact.floor() as usize;
            assigned += counts[k];
            remainders[k] = (exact - exact.floor(), k);
        }
        // Rotate tie priority by stratum so leftovers spread across splits.
        remainders.rotate_left(stratum_index % 3);
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite remainders"));
        let mut leftover = total - assigned;
        for &(_, k) in remainders.iter() {
            if leftover == 0 {
                break;
            }
            counts[k] += 1;
            leftover -= 1;
        }

        let mut offset = 0;
        for k in 0..3 {
            splits[k].extend_from_slice(&members[offset..offset + counts[k]]);
            offset += counts[k];
        }
    }

    for split in splits.iter() {
        if split.is_empty() {
            return Err(Error::invalid(
                "a split received fewer than 1 sample; adjust ratios or dataset size",
            ));
        }
    }
    let [train, valid, test] = splits;
    Ok((train, valid, test))
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

/// Patience-based early stopping on the validation loss, tracking the best
/// epoch (1-based) for checkpoint restoration.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Record one epoch's validation loss. Returns `(improved, stop)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
        }
        let stop = self.epoch - self.best_epoch >= self.patience;
        (improved, stop)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepMetrics {
    step: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: ClassificationMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high: Option<ClassificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low: Option<ClassificationMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub loss_mode: LossMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub layers: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub test: EvalReport,
    /// Relative to the run directory.
    pub checkpoint: String,
}

struct LoadedSample {
    record: ManifestRecord,
    frame: Frame,
    fixation: Option<Array1<f64>>,
}

fn stable_id_seed(event_id: &str, salt: u64) -> u64 {
    let digest = Sha256::digest(format!("{salt}:{event_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn load_samples(
    store: &DatasetStore,
    records: &[ManifestRecord],
    with_fixations: bool,
    normalization: Normalization,
    masking: InputMasking,
    mask_seed: u64,
    patch_size: usize,
) -> Result<Vec<LoadedSample>> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mut frame = store.load_frame(&record.frame)?;
        match masking {
            InputMasking::None => {}
            InputMasking::Peripheral | InputMasking::RandomControl => {
                let rel = record.mask.as_ref().ok_or_else(|| {
                    Error::missing(format!(
                        "event {} has no mask artifact; rerun preprocessing with masks",
                        record.event_id
                    ))
                })?;
                let mut mask = store.load_mask(rel)?;
                if masking == InputMasking::RandomControl {
                    mask = gaze::make_random_control_mask(
                        &mask,
                        stable_id_seed(&record.event_id, mask_seed),
                    )?;
                }
                frame = gaze::apply_mask(&frame, &mask)?;
            }
        }
        let fixation = if with_fixations {
            let grid = store.load_fixmap(&record.fixmap)?;
            let empty = grid.iter().all(|&v| v == 0.0);
            // Only the grid matters for reduction; sigma is not re-used here.
            let map = gaze::FixationMap {
                grid,
                window: (record.premotor_start, record.premotor_end),
                sigma: 1.0,
                empty,
            };
            let reduced = gaze::reduce_fixation_map(&map, patch_size, normalization)?;
            Some(reduced.values)
        } else {
            None
        };
        out.push(LoadedSample {
            record: record.clone(),
            frame,
            fixation,
        });
    }
    Ok(out)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let lambda = parts[0].lambda;
    let bce = parts.iter().map(|p| p.bce).sum::<f64>() / n;
    let fax = parts.iter().map(|p| p.fax).sum::<f64>() / n;
    let intersection = parts[0]
        .intersection
        .map(|_| parts.iter().filter_map(|p| p.intersection).sum::<f64>() / n);
    let intersection_loss = parts[0]
        .intersection_loss
        .map(|_| parts.iter().filter_map(|p| p.intersection_loss).sum::<f64>() / n);
    LossBreakdown {
        bce,
        intersection,
        intersection_loss,
        fax,
        lambda,
    }
}

/// Train one run: split the dataset with this seed, optimize with SGD and
/// early stopping, restore the best-validation parameters, save the
/// checkpoint, and evaluate on the held-out test split exactly once.
///
/// `run_dir` receives the split manifests, per-step metrics, checkpoint,
/// and the run record.
pub fn train(config: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    data::ensure_dir(run_dir)?;
    let lambda = config.loss.effective_lambda();

    // Split with this seed; the run keeps its own manifests.
    let full_store = DatasetStore::new(&config.dataset_root).with_allowed_splits([Split::Full]);
    let records = full_store.load_manifest(Split::Full)?;
    let (train_recs, valid_recs, test_recs) = split_dataset(&records, &config.split, seed)?;
    data::write_jsonl(&run_dir.join(Split::Train.manifest_name()), &train_recs)?;
    data::write_jsonl(&run_dir.join(Split::Valid.manifest_name()), &valid_recs)?;
    data::write_jsonl(&run_dir.join(Split::Test.manifest_name()), &test_recs)?;

    // Training-phase store: the test manifest is off limits.
    let store = DatasetStore::new(&config.dataset_root)
        .with_manifest_dir(run_dir)
        .with_allowed_splits([Split::Train, Split::Valid]);
    let train_manifest = store.load_manifest(Split::Train)?;
    let valid_manifest = store.load_manifest(Split::Valid)?;

    let with_fixations = config.loss.mode == LossMode::Fax;
    let train_set = load_samples(
        &store,
        &train_manifest,
        with_fixations,
        config.fixation_normalization,
        config.input_masking,
        seed,
        config.model.patch_size,
    )?;
    let valid_set = load_samples(
        &store,
        &valid_manifest,
        with_fixations,
        config.fixation_normalization,
        config.input_masking,
        seed,
        config.model.patch_size,
    )?;

    let mut model = VisionTransformer::new(config.model.clone(), seed)?;
    let mut velocity = Params::zeros_like(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5u64));

    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut step_log: Vec<StepMetrics> = Vec::new();
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let lr = if epoch >= config.optimizer.decay_epoch {
            config.optimizer.learning_rate * config.optimizer.decay_factor
        } else {
            config.optimizer.learning_rate
        };

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut grads = Params::zeros_like(model.params());
            let scale = 1.0 / batch.len() as f64;
            let mut parts = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &train_set[idx];
                let cache = model.forward_cached(&sample.frame)?;
                let (breakdown, dlogits, dreduced) = loss::fax_sample_gradients(
                    &cache.output,
                    sample.record.label,
                    sample.fixation.as_ref(),
                    lambda,
                )?;
                let sample_grads = model.backward(&cache, &dlogits, dreduced.as_ref());
                grads.axpy(scale, &sample_grads);
                parts.push(breakdown);
            }
            let batch_mean = mean_breakdown(&parts);
            if !batch_mean.fax.is_finite() {
                let ids: Vec<&str> = batch
                    .iter()
                    .map(|&i| train_set[i].record.event_id.as_str())
                    .collect();
                let dump = run_dir.join("nan_dump.json");
                data::write_text(
                    &dump,
                    &serde_json::to_string_pretty(&serde_json::json!({
                        "step": step,
                        "batch_ids": ids,
                        "breakdowns": parts,
                    }))
                    .expect("serializable"),
                )?;
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_id: ids.first().unwrap_or(&"?").to_string(),
                    dump,
                });
            }
            epoch_loss += batch_mean.fax;
            epoch_batches += 1;
            step_log.push(StepMetrics {
                step,
                loss: batch_mean,
            });

            velocity.scale(config.optimizer.momentum);
            velocity.axpy(1.0, &grads);
            model.params_mut().axpy(-lr, &velocity);
        }
        train_losses.push(epoch_loss / epoch_batches.max(1) as f64);

        // Validation loss under the same objective.
        let mut val_total = 0.0;
        for sample in &valid_set {
            let out = model.forward(&sample.frame)?;
            let (breakdown, _, _) = loss::fax_sample_gradients(
                &out,
                sample.record.label,
                sample.fixation.as_ref(),
                lambda,
            )?;
            val_total += breakdown.fax;
        }
        let val_loss = val_total / valid_set.len().max(1) as f64;
        val_losses.push(val_loss);

        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best_params = model.params().clone();
        }
        if stop {
            break;
        }
    }

    // Restore the best-validation checkpoint and persist it.
    let model = VisionTransformer::from_params(config.model.clone(), best_params)?;
    model.save_checkpoint(run_dir, "checkpoint")?;
    data::write_jsonl(&run_dir.join("metrics.jsonl"), &step_log)?;

    // Test metrics: computed exactly once, after checkpoint selection, with
    // fixation access audited to zero.
    let test_store = DatasetStore::new(&config.dataset_root)
        .with_manifest_dir(run_dir)
        .with_allowed_splits([Split::Test]);
    let test = evaluate_model(&model, &test_store, config.input_masking, seed)?;

    let record = RunRecord {
        config_hash: config.hash(),
        seed,
        loss_mode: config.loss.mode,
        lambda: config.loss.lambda,
        layers: config.model.layers,
        epochs_run,
        best_epoch: stopper.best_epoch(),
        train_losses,
        val_losses,
        test,
        checkpoint: "checkpoint".to_string(),
    };
    data::write_text(
        &run_dir.join("run_record.json"),
        &serde_json::to_string_pretty(&record).expect("serializable"),
    )?;
    Ok(record)
}

/// Evaluate a model on the test manifest of `store`: accuracy/AUC/F1 overall
/// and per uncertainty split. The pass is gaze-free; any fixation-map read
/// during evaluation is an access violation.
pub fn evaluate_model(
    model: &VisionTransformer,
    store: &DatasetStore,
    masking: InputMasking,
    mask_seed: u64,
) -> Result<EvalReport> {
    let before = store.audit();
    let records = store.load_manifest(Split::Test)?;
    if records.is_empty() {
        return Err(Error::missing("test manifest is empty"));
    }

    let samples = load_samples(
        store,
        &records,
        false,
        Normalization::UnitSum,
        masking,
        mask_seed,
        model.config().patch_size,
    )?;
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut tags = Vec::with_capacity(samples.len());
    for sample in &samples {
        let out = model.forward(&sample.frame)?;
        scores.push(out.probs[0]);
        labels.push(sample.record.label);
        tags.push(sample.record.uncertainty.split);
    }

    let total = metrics::classification_metrics(&scores, &labels)?;
    let by_tag = |tag: SplitTag| -> Result<Option<ClassificationMetrics>> {
        let idx: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == tag).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<TurnLabel> = idx.iter().map(|&i| labels[i]).collect();
        Ok(Some(metrics::classification_metrics(&s, &l)?))
    };
    let report = EvalReport {
        total,
        high: by_tag(SplitTag::High)?,
        low: by_tag(SplitTag::Low)?,
    };

    let after = store.audit();
    if after.fixmap_reads != before.fixmap_reads {
        return Err(Error::AccessViolation(format!(
            "evaluation read {} fixation map(s); inference must be gaze-free",
            after.fixmap_reads - before.fixmap_reads
        )));
    }
    Ok(report)
}

/// Load a checkpoint from `run_dir` and evaluate it on the run's test
/// manifest against `dataset_root` artifacts.
pub fn evaluate_run(
    dataset_root: &Path,
    run_dir: &Path,
    masking: InputMasking,
    mask_seed: u64,
) -> Result<EvalReport> {
    let model = VisionTransformer::load_checkpoint(run_dir, "checkpoint")?;
    let store = DatasetStore::new(dataset_root)
        .with_manifest_dir(run_dir)
        .with_allowed_splits([Split::Test]);
    evaluate_model(&model, &store, masking, mask_seed)
}

// ---------------------------------------------------------------------------
// Alignment analysis (post-hoc; reads fixation maps deliberately)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// IoU at threshold 0.4, averaged over heads, layers, and samples.
    pub mean_iou: f64,
    /// Mean dot-product similarity per layer.
    pub per_layer_similarity: Vec<f64>,
    pub samples: usize,
}

fn minmax_normalize(grid: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let min = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        grid.mapv(|v| (v - min) / range)
    } else {
        grid.mapv(|_| 0.5)
    }
}

/// Attention–fixation alignment of a trained model over `records`:
/// per-head/layer IoU of rendered attention maps against the fixation map,
/// plus per-layer dot-product similarity. This is diagnostic tooling and
/// reads fixation maps on purpose (unlike evaluation).
pub fn alignment_analysis(
    model: &VisionTransformer,
    store: &DatasetStore,
    records: &[ManifestRecord],
    normalization: Normalization,
) -> Result<AlignmentSummary> {
    if records.is_empty() {
        return Err(Error::missing("no records for alignment analysis"));
    }
    let cfg = model.config();
    let mut iou_total = 0.0;
    let mut iou_count = 0usize;
    let mut layer_sims = vec![0.0; cfg.layers];
    for record in records {
        let frame = store.load_frame(&record.frame)?;
        let grid = store.load_fixmap(&record.fixmap)?;
        let fix_heat = minmax_normalize(&grid);
        let map = gaze::FixationMap {
            grid,
            window: (record.premotor_start, record.premotor_end),
            sigma: 1.0,
            empty: false,
        };
        let reduced = gaze::reduce_fixation_map(&map, cfg.patch_size, normalization)?;
        let out = model.forward(&frame)?;
        for layer in &out.attention.reduced {
            for head in layer {
                let attn_heat = crate::vit::render_attention_map(
                    head,
                    cfg.patch_size,
                    cfg.frame_height,
                    cfg.frame_width,
                )?;
                let (iou, _) =
                    metrics::iou_alignment(&attn_heat, &fix_heat, metrics::IOU_THRESHOLD)?;
                iou_total += iou;
                iou_count += 1;
            }
        }
        let sims = metrics::layer_similarity(&out.attention, &reduced.values)?;
        for (l, s) in sims.into_iter().enumerate() {
            layer_sims[l] += s;
        }
    }
    for s in layer_sims.iter_mut() {
        *s /= records.len() as f64;
    }
    Ok(AlignmentSummary {
        mean_iou: iou_total / iou_count as f64,
        per_layer_similarity: layer_sims,
        samples: records.len(),
    })
}

// ---------------------------------------------------------------------------
// λ sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub seed: u64,
    pub run_dir: String,
    pub record: RunRecord,
    pub alignment: AlignmentSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub runs: usize,
    pub mean_total_accuracy: f64,
    pub std_total_accuracy: f64,
    pub mean_high_accuracy: f64,
    pub mean_low_accuracy: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One training run per (λ, seed) pair, in parallel, each in its own
/// subdirectory of `out_dir`, followed by alignment analysis on the run's
/// test split. Aggregates mean ± std accuracy and mean IoU per λ.
pub fn lambda_sweep(
    base: &ExperimentConfig,
    grid: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds supplied"));
    }
    data::ensure_dir(out_dir)?;

    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let cells: Result<Vec<SweepCell>> = jobs
        .par_iter()
        .map(|&(lambda, seed)| {
            let mut config = base.clone();
            config.loss = LossConfig::fax(lambda);
            let run_dir = out_dir.join(format!("lambda_{lambda}_seed_{seed}"));
            let record = train(&config, seed, &run_dir)?;
            let model = VisionTransformer::load_checkpoint(&run_dir, "checkpoint")?;
            let analysis_store =
                DatasetStore::new(&config.dataset_root).with_manifest_dir(&run_dir);
            let test_records = analysis_store.load_manifest(Split::Test)?;
            let alignment = alignment_analysis(
                &model,
                &analysis_store,
                &test_records,
                config.fixation_normalization,
            )?;
            Ok(SweepCell {
                lambda,
                seed,
                run_dir: run_dir
                    .file_name()
                    .expect("run dir name")
                    .to_string_lossy()
                    .into_owned(),
                record,
                alignment,
            })
        })
        .collect();
    let cells = cells?;

    let mut rows = Vec::new();
    for &lambda in grid {
        let members: Vec<&SweepCell> = cells.iter().filter(|c| c.lambda == lambda).collect();
        let total: Vec<f64> = members
            .iter()
            .map(|c| c.record.test.total.accuracy)
            .collect();
        let high: Vec<f64> = members
            .iter()
            .filter_map(|c| c.record.test.high.map(|m| m.accuracy))
            .collect();
        let low: Vec<f64> = members
            .iter()
            .filter_map(|c| c.record.test.low.map(|m| m.accuracy))
            .collect();
        let iou: Vec<f64> = members.iter().map(|c| c.alignment.mean_iou).collect();
        let (mean_total, std_total) = mean_std(&total);
        rows.push(SweepRow {
            lambda,
            runs: members.len(),
            mean_total_accuracy: mean_total,
            std_total_accuracy: std_total,
            mean_high_accuracy: mean_std(&high).0,
            mean_low_accuracy: mean_std(&low).0,
            mean_iou: mean_std(&iou).0,
        });
    }

    let table = SweepTable { cells, rows };
    data::write_text(
        &out_dir.join("sweep.json"),
        &serde_json::to_string_pretty(&table).expect("serializable"),
    )?;
    let mut csv_body = String::from(
        "lambda,runs,mean_total_accuracy,std_total_accuracy,mean_high_accuracy,mean_low_accuracy,mean_iou\n",
    );
    for row in &table.rows {
        csv_body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.lambda,
            row.runs,
            row.mean_total_accuracy,
            row.std_total_accuracy,
            row.mean_high_accuracy,
            row.mean_low_accuracy,
            row.mean_iou
        ));
    }
    data::write_text(&out_dir.join("sweep.csv"), &csv_body)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Pairwise comparison
// ---------------------------------------------------------------------------

/// Accuracy lists for one model family across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRuns {
    pub name: String,
    pub total_accuracy: Vec<f64>,
    pub high_accuracy: Vec<f64>,
}

impl ModelRuns {
    pub fn from_records(name: impl Into<String>, records: &[RunRecord]) -> Self {
        Self {
            name: name.into(),
            total_accuracy: records.iter().map(|r| r.test.total.accuracy).collect(),
            high_accuracy: records
                .iter()
                .filter_map(|r| r.test.high.map(|m| m.accuracy))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_1: String,
    pub model_2: String,
    /// "total" or "high-uncertainty".
    pub metric: String,
    pub p_value: f64,
    pub reject: bool,
}

pub const COMPARISON_ALPHA: f64 = 0.05;

/// Two-sided Mann–Whitney comparison of every model pair on total and
/// high-uncertainty accuracy, with a reject flag at α = 0.05.
pub fn compare(models: &[ModelRuns]) -> Result<Vec<ComparisonRow>> {
    if models.len() < 2 {
        return Err(Error::invalid("need at least two models to compare"));
    }
    for m in models {
        if m.total_accuracy.len() < 2 {
            return Err(Error::invalid(format!(
                "model {} has fewer than 2 runs",
                m.name
            )));
        }
    }
    let mut rows = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            for (metric, a, b) in [
                (
                    "total",
                    &models[i].total_accuracy,
                    &models[j].total_accuracy,
                ),
                (
                    "high-uncertainty",
                    &models[i].high_accuracy,
                    &models[j].high_accuracy,
                ),
            ] {
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let result = metrics::mann_whitney_u(a, b, Alternative::TwoSided)?;
                rows.push(ComparisonRow {
                    model_1: models[i].name.clone(),
                    model_2: models[j].name.clone(),
                    metric: metric.to_string(),
                    p_value: result.p,
                    reject: result.p < COMPARISON_ALPHA,
                });
            }
        }
    }
    Ok(rows)
}

/// Tab-separated comparison table mirroring the run-comparison layout:
/// model pair, metric, p-value, reject flag.
pub fn write_comparison_tsv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut body = String::from("model_1\tmodel_2\tmetric\tp_value\treject\n");
    for row in rows {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.model_1, row.model_2, row.metric, row.p_value, row.reject
        ));
    }
    data::write_text(path, &body)
}

pub fn read_comparison_tsv(path: &Path) -> Result<Vec<ComparisonRow>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::format(path, format!("bad row: {line:?}")));
        }
        rows.push(ComparisonRow {
            model_1: parts[0].to_string(),
            model_2: parts[1].to_string(),
            metric: parts[2].to_string(),
            p_value: parts[3]
                .parse()
                .map_err(|_| Error::format(path, format!("bad p value {:?}", parts[3])))?,
            reject: parts[4]
                .parse()
                .map_err(|_| Error::format(path, format!("bad reject flag {:?}", parts[4])))?,
        });
    }
    Ok(rows)
}
