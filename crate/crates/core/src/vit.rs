//! Vision transformer with full attention-weight exposure.
//!
//! A standard encoder: patch embedding, CLS token, learned position
//! embeddings, pre-norm blocks (attention + MLP), and a CLS classification
//! head. Every head's post-softmax attention matrix is captured exactly as
//! used in the forward pass, and the backward pass accepts an extra gradient
//! on the reduced attention vectors so losses can steer attention directly.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn;

/// How an (N+1)x(N+1) attention matrix reduces to a length-N patch vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionReduction {
    /// Mean attention each patch receives: drop the CLS row and column and
    /// average the remaining block over queries (column mean).
    #[default]
    ColumnMeanReceived,
    /// Mean attention each patch gives: row mean of the non-CLS block.
    RowMeanGiven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// MLP hidden width as a multiple of the embedding size.
    pub mlp_ratio: usize,
    pub classes: usize,
    #[serde(default)]
    pub attention_reduction: AttentionReduction,
}

impl ModelConfig {
    /// Desk-scale configuration: 32x32 frames, P=8, D=64, 2 heads, 2 layers.
    pub fn desk() -> Self {
        Self {
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            heads: 2,
            layers: 2,
            mlp_ratio: 4,
            classes: 2,
            attention_reduction: AttentionReduction::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.frame_height % self.patch_size != 0
            || self.frame_width % self.patch_size != 0
        {
            return Err(Error::invalid(format!(
                "frame {}x{} not divisible by patch size {}",
                self.frame_height, self.frame_width, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if self.classes != 2 {
            return Err(Error::invalid("classifier head is two-way"));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        (self.frame_height / self.patch_size) * (self.frame_width / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// Split a frame into non-overlapping P×P patches, row-major over the patch
/// grid, each flattened (dy, dx, channel). Lossless: [`unpatchify`] inverts.
pub fn patchify(frame: &Frame, patch_size: usize) -> Result<Array2<f64>> {
    let (h, w) = (frame.height(), frame.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::invalid(format!(
            "frame {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let cols = w / patch_size;
    let n = (h / patch_size) * cols;
    let dim = patch_size * patch_size * 3;
    let mut out = Array2::zeros((n, dim));
    for p in 0..n {
        let (py, px) = (p / cols, p % cols);
        let mut k = 0;
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                for c in 0..3 {
                    out[[p, k]] = frame.pixels()[[py * patch_size + dy, px * patch_size + dx, c]];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array2<f64>, patch_size: usize, height: usize, width: usize) -> Result<Frame> {
    let cols = width / patch_size;
    let n = (height / patch_size) * cols;
    if patches.shape() != [n, patch_size * patch_size * 3] {
        return Err(Error::invalid(format!(
            "patch matrix shape {:?} does not match {}x{} with P={}",
            patches.shape(),
            height,
            width,
            patch_size
        )));
    }
    let mut frame = Frame::zeros(height, width);
    for p in 0..n {
        let (py, px) = (p / cols, p % cols);
        let mut k = 0;
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                for c in 0..3 {
                    frame.pixels_mut()[[py * patch_size + dy, px * patch_size + dx, c]] =
                        patches[[p, k]];
                    k += 1;
                }
            }
        }
    }
    Ok(frame)
}

/// Post-softmax attention weights for every layer and head, plus their
/// reduced per-patch vectors.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    /// `[layer][head]`, each (N+1)x(N+1) and row-stochastic.
    pub weights: Vec<Vec<Array2<f64>>>,
    /// `[layer][head]`, each length N and nonnegative.
    pub reduced: Vec<Vec<Array1<f64>>>,
}

impl AttentionTensor {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, |l| l.len())
    }

    /// Mean of the reduced vectors over heads, one per layer.
    pub fn layer_mean_reduced(&self) -> Vec<Array1<f64>> {
        self.reduced
            .iter()
            .map(|heads| {
                let mut acc = Array1::zeros(heads[0].len());
                for h in heads {
                    acc += h;
                }
                acc / heads.len() as f64
            })
            .collect()
    }
}

/// Reduce one attention matrix to a per-patch vector.
pub fn reduce_attention(weights: &Array2<f64>, reduction: AttentionReduction) -> Array1<f64> {
    let tokens = weights.shape()[0];
    let n = tokens - 1;
    let block = weights.slice(s![1.., 1..]);
    match reduction {
        AttentionReduction::ColumnMeanReceived => block.sum_axis(Axis(0)) / n as f64,
        AttentionReduction::RowMeanGiven => block.sum_axis(Axis(1)) / n as f64,
    }
}

/// Nearest-neighbor upsample of a patch-grid vector to frame resolution,
/// min-max normalized to [0, 1]; a constant vector maps to all 0.5.
pub fn render_attention_map(
    values: &Array1<f64>,
    patch_size: usize,
    height: usize,
    width: usize,
) -> Result<Array2<f64>> {
    let cols = width / patch_size;
    let rows = height / patch_size;
    if values.len() != rows * cols {
        return Err(Error::invalid(format!(
            "vector length {} does not match a {rows}x{cols} patch grid",
            values.len()
        )));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = Array2::zeros((height, width));
    for i in 0..height {
        for j in 0..width {
            let v = values[(i / patch_size) * cols + j / patch_size];
            out[[i, j]] = if range > 0.0 { (v - min) / range } else { 0.5 };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub cls: Array1<f64>,
    pub pos: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gamma: Array1<f64>,
    pub lnf_beta: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl Params {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let dm = config.mlp_dim();
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: nn::normal_init((d, d), INIT_STD, &mut rng),
                bq: Array1::zeros(d),
                wk: nn::normal_init((d, d), INIT_STD, &mut rng),
                bk: Array1::zeros(d),
                wv: nn::normal_init((d, d), INIT_STD, &mut rng),
                bv: Array1::zeros(d),
                wo: nn::normal_init((d, d), INIT_STD, &mut rng),
                bo: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w1: nn::normal_init((d, dm), INIT_STD, &mut rng),
                b1: Array1::zeros(dm),
                w2: nn::normal_init((dm, d), INIT_STD, &mut rng),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            patch_w: nn::normal_init((config.patch_dim(), d), INIT_STD, &mut rng),
            patch_b: Array1::zeros(d),
            cls: nn::normal_init_1d(d, INIT_STD, &mut rng),
            pos: nn::normal_init((config.tokens(), d), INIT_STD, &mut rng),
            blocks,
            lnf_gamma: Array1::ones(d),
            lnf_beta: Array1::zeros(d),
            // Zero-init head: symmetric start, logits begin at exactly zero.
            head_w: Array2::zeros((d, config.classes)),
            head_b: Array1::zeros(config.classes),
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        let mut out = other.clone();
        out.for_each_tensor_mut(|_, t| t.fill(0.0));
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        let mut slots = other.flatten();
        self.for_each_tensor_mut(|name, t| {
            let (n, data) = slots.remove(0);
            debug_assert_eq!(n, name);
            for (a, b) in t.iter_mut().zip(data) {
                *a += alpha * b;
            }
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_tensor_mut(|_, t| {
            for v in t.iter_mut() {
                *v *= factor;
            }
        });
    }

    pub fn num_params(&self) -> usize {
        self.flatten().iter().map(|(_, d)| d.len()).sum()
    }

    /// Stable (name, values) enumeration used for checkpoints, SGD, and the
    /// finite-difference checker.
    pub fn flatten(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(|name, shape, data| out.push({
            let _ = shape;
            (name, data.to_vec())
        }));
        out
    }

    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(|name, shape, _| out.push((name, shape)));
        out
    }

    fn visit<F: FnMut(String, Vec<usize>, &[f64])>(&self, mut f: F) {
        let arr2 = |a: &Array2<f64>| (vec![a.shape()[0], a.shape()[1]], a.iter().cloned().collect::<Vec<f64>>());
        let arr1 = |a: &Array1<f64>| (vec![a.len()], a.to_vec());
        let (s, d) = arr2(&self.patch_w);
        f("patch_w".into(), s, &d);
        let (s, d) = arr1(&self.patch_b);
        f("patch_b".into(), s, &d);
        let (s, d) = arr1(&self.cls);
        f("cls".into(), s, &d);
        let (s, d) = arr2(&self.pos);
        f("pos".into(), s, &d);
        for (i, b) in self.blocks.iter().enumerate() {
            let named = |suffix: &str| format!("blocks.{i}.{suffix}");
            for (suffix, shape, data) in [
                ("ln1_gamma", arr1(&b.ln1_gamma).0, arr1(&b.ln1_gamma).1),
                ("ln1_beta", arr1(&b.ln1_beta).0, arr1(&b.ln1_beta).1),
                ("wq", arr2(&b.wq).0, arr2(&b.wq).1),
                ("bq", arr1(&b.bq).0, arr1(&b.bq).1),
                ("wk", arr2(&b.wk).0, arr2(&b.wk).1),
                ("bk", arr1(&b.bk).0, arr1(&b.bk).1),
                ("wv", arr2(&b.wv).0, arr2(&b.wv).1),
                ("bv", arr1(&b.bv).0, arr1(&b.bv).1),
                ("wo", arr2(&b.wo).0, arr2(&b.wo).1),
                ("bo", arr1(&b.bo).0, arr1(&b.bo).1),
                ("ln2_gamma", arr1(&b.ln2_gamma).0, arr1(&b.ln2_gamma).1),
                ("ln2_beta", arr1(&b.ln2_beta).0, arr1(&b.ln2_beta).1),
                ("w1", arr2(&b.w1).0, arr2(&b.w1).1),
                ("b1", arr1(&b.b1).0, arr1(&b.b1).1),
                ("w2", arr2(&b.w2).0, arr2(&b.w2).1),
                ("b2", arr1(&b.b2).0, arr1(&b.b2).1),
            ] {
                f(named(suffix), shape, &data);
            }
        }
        let (s, d) = arr1(&self.lnf_gamma);
        f("lnf_gamma".into(), s, &d);
        let (s, d) = arr1(&self.lnf_beta);
        f("lnf_beta".into(), s, &d);
        let (s, d) = arr2(&self.head_w);
        f("head_w".into(), s, &d);
        let (s, d) = arr1(&self.head_b);
        f("head_b".into(), s, &d);
    }

    /// Mutable access in the same order as [`flatten`].
    pub fn for_each_tensor_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        f("patch_w", self.patch_w.as_slice_mut().expect("standard layout"));
        f("patch_b", self.patch_b.as_slice_mut().expect("standard layout"));
        f("cls", self.cls.as_slice_mut().expect("standard layout"));
        f("pos", self.pos.as_slice_mut().expect("standard layout"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("blocks.{i}");
            f(&format!("{prefix}.ln1_gamma"), b.ln1_gamma.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln1_beta"), b.ln1_beta.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.wq"), b.wq.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.bq"), b.bq.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.wk"), b.wk.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.bk"), b.bk.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.wv"), b.wv.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.bv"), b.bv.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.wo"), b.wo.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.bo"), b.bo.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln2_gamma"), b.ln2_gamma.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln2_beta"), b.ln2_beta.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.w1"), b.w1.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.b1"), b.b1.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.w2"), b.w2.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.b2"), b.b2.as_slice_mut().expect("layout"));
        }
        f("lnf_gamma", self.lnf_gamma.as_slice_mut().expect("layout"));
        f("lnf_beta", self.lnf_beta.as_slice_mut().expect("layout"));
        f("head_w", self.head_w.as_slice_mut().expect("layout"));
        f("head_b", self.head_b.as_slice_mut().expect("layout"));
    }

    /// Read one scalar by tensor name and flat index.
    pub fn get_scalar(&self, name: &str, index: usize) -> f64 {
        let mut value = None;
        self.visit(|n, _, data| {
            if n == name {
                value = Some(data[index]);
            }
        });
        value.unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    /// Add `delta` to one scalar by tensor name and flat index.
    pub fn nudge_scalar(&mut self, name: &str, index: usize, delta: f64) {
        let mut found = false;
        self.for_each_tensor_mut(|n, data| {
            if n == name {
                data[index] += delta;
                found = true;
            }
        });
        assert!(found, "unknown tensor {name}");
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array1<f64>,
    /// Softmax of the logits: (p_left, p_right).
    pub probs: Array1<f64>,
    pub attention: AttentionTensor,
}

struct LayerCache {
    input: Array2<f64>,
    ln1: nn::LayerNormCache,
    normed1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    head_concat: Array2<f64>,
    after_attn: Array2<f64>,
    ln2: nn::LayerNormCache,
    normed2: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_hidden: Array2<f64>,
}

pub struct ForwardCache {
    patches: Array2<f64>,
    layers: Vec<LayerCache>,
    final_input: Array2<f64>,
    lnf: nn::LayerNormCache,
    final_normed: Array2<f64>,
    pub output: ForwardOutput,
}

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    config: ModelConfig,
    params: Params,
}

impl VisionTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Inference forward pass with attention capture.
    pub fn forward(&self, frame: &Frame) -> Result<ForwardOutput> {
        Ok(self.forward_cached(frame)?.output)
    }

    /// Forward pass that retains every intermediate needed by [`backward`].
    pub fn forward_cached(&self, frame: &Frame) -> Result<ForwardCache> {
        let cfg = &self.config;
        if frame.height() != cfg.frame_height || frame.width() != cfg.frame_width {
            return Err(Error::invalid(format!(
                "frame {}x{} does not match model input {}x{}",
                frame.height(),
                frame.width(),
                cfg.frame_height,
                cfg.frame_width
            )));
        }
        let p = &self.params;
        let tokens = cfg.tokens();
        let d = cfg.embed_dim;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Centered pixel values stabilize early optimization.
        let patches = patchify(frame, cfg.patch_size)?.mapv(|v| v - 0.5);
        let embedded = nn::linear(&patches, &p.patch_w, &p.patch_b);
        let mut z = Array2::zeros((tokens, d));
        z.row_mut(0).assign(&p.cls);
        z.slice_mut(s![1.., ..]).assign(&embedded);
        z += &p.pos;

        let mut layer_caches = Vec::with_capacity(cfg.layers);
        let mut weights: Vec<Vec<Array2<f64>>> = Vec::with_capacity(cfg.layers);
        let mut reduced: Vec<Vec<Array1<f64>>> = Vec::with_capacity(cfg.layers);

        for block in &p.blocks {
            let input = z.clone();
            let (normed1, ln1) = nn::layer_norm(&input, &block.ln1_gamma, &block.ln1_beta, LN_EPS);
            let q = nn::linear(&normed1, &block.wq, &block.bq);
            let k = nn::linear(&normed1, &block.wk, &block.bk);
            let v = nn::linear(&normed1, &block.wv, &block.bv);

            let mut head_concat = Array2::zeros((tokens, d));
            let mut layer_weights = Vec::with_capacity(heads);
            let mut layer_reduced = Vec::with_capacity(heads);
            for a in 0..heads {
                let cols = s![.., a * dh..(a + 1) * dh];
                let qa = q.slice(cols);
                let ka = k.slice(cols);
                let va = v.slice(cols);
                let scores = qa.dot(&ka.t()) * scale;
                let attn = nn::softmax_rows(&scores);
                let mixed = attn.dot(&va);
                head_concat.slice_mut(cols).assign(&mixed);
                layer_reduced.push(reduce_attention(&attn, cfg.attention_reduction));
                layer_weights.push(attn);
            }
            let projected = nn::linear(&head_concat, &block.wo, &block.bo);
            let after_attn = &input + &projected;

            let (normed2, ln2) =
                nn::layer_norm(&after_attn, &block.ln2_gamma, &block.ln2_beta, LN_EPS);
            let mlp_pre = nn::linear(&normed2, &block.w1, &block.b1);
            let mlp_hidden = nn::gelu(&mlp_pre);
            let mlp_out = nn::linear(&mlp_hidden, &block.w2, &block.b2);
            z = &after_attn + &mlp_out;

            weights.push(layer_weights);
            reduced.push(layer_reduced);
            layer_caches.push(LayerCache {
                input,
                ln1,
                normed1,
                q,
                k,
                v,
                head_concat,
                after_attn,
                ln2,
                normed2,
                mlp_pre,
                mlp_hidden,
            });
        }

        let final_input = z;
        let (final_normed, lnf) =
            nn::layer_norm(&final_input, &p.lnf_gamma, &p.lnf_beta, LN_EPS);
        let cls_repr = final_normed.row(0).to_owned();
        let logits = cls_repr.dot(&p.head_w) + &p.head_b;
        let probs = nn::softmax_vec(&logits);

        Ok(ForwardCache {
            patches,
            layers: layer_caches,
            final_input,
            lnf,
            final_normed,
            output: ForwardOutput {
                logits,
                probs,
                attention: AttentionTensor { weights, reduced },
            },
        })
    }

    /// Backward pass for one sample. `dlogits` is the loss gradient on the
    /// classifier logits; `dreduced`, when present, is the loss gradient on
    /// every head's reduced attention vector (shared across heads and
    /// layers, as produced by the attention-alignment term).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array1<f64>,
        dreduced: Option<&Array1<f64>>,
    ) -> Params {
        let cfg = &self.config;
        let p = &self.params;
        let tokens = cfg.tokens();
        let n = cfg.patch_count();
        let d = cfg.embed_dim;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = Params::zeros_like(p);

        // Head: logits = lnf(z)[0] @ head_w + head_b.
        let cls_repr = cache.final_normed.row(0);
        for j in 0..d {
            for c in 0..cfg.classes {
                grads.head_w[[j, c]] += cls_repr[j] * dlogits[c];
            }
        }
        grads.head_b += dlogits;
        let mut dnormed_f = Array2::zeros((tokens, d));
        let dcls = p.head_w.dot(dlogits);
        dnormed_f.row_mut(0).assign(&dcls);

        let mut dz = nn::layer_norm_backward(
            &cache.lnf,
            &p.lnf_gamma,
            &dnormed_f,
            &mut grads.lnf_gamma,
            &mut grads.lnf_beta,
        );

        for (l, block) in p.blocks.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            let bg = &mut grads.blocks[l];

            // MLP residual: z = after_attn + mlp_out.
            let dmlp_out = dz.clone();
            let mut dafter = dz;
            let dhidden =
                nn::linear_backward(&lc.mlp_hidden, &block.w2, &dmlp_out, &mut bg.w2, &mut bg.b2);
            let dpre = nn::gelu_backward(&lc.mlp_pre, &dhidden);
            let dnormed2 =
                nn::linear_backward(&lc.normed2, &block.w1, &dpre, &mut bg.w1, &mut bg.b1);
            dafter += &nn::layer_norm_backward(
                &lc.ln2,
                &block.ln2_gamma,
                &dnormed2,
                &mut bg.ln2_gamma,
                &mut bg.ln2_beta,
            );

            // Attention residual: after_attn = input + projected.
            let dprojected = dafter.clone();
            let mut dinput = dafter;
            let dconcat = nn::linear_backward(
                &lc.head_concat,
                &block.wo,
                &dprojected,
                &mut bg.wo,
                &mut bg.bo,
            );

            let mut dq = Array2::zeros((tokens, d));
            let mut dk = Array2::zeros((tokens, d));
            let mut dv = Array2::zeros((tokens, d));
            for a in 0..heads {
                let cols = s![.., a * dh..(a + 1) * dh];
                let attn = &cache.output.attention.weights[l][a];
                let qa = lc.q.slice(cols);
                let ka = lc.k.slice(cols);
                let va = lc.v.slice(cols);
                let dmixed = dconcat.slice(cols);

                let mut dattn = dmixed.dot(&va.t());
                if let Some(dred) = dreduced {
                    // Gradient of the reduced vector spread back over the
                    // non-CLS block per the configured reduction.
                    match cfg.attention_reduction {
                        AttentionReduction::ColumnMeanReceived => {
                            for i in 1..tokens {
                                for j in 0..n {
                                    dattn[[i, j + 1]] += dred[j] / n as f64;
                                }
                            }
                        }
                        AttentionReduction::RowMeanGiven => {
                            for i in 0..n {
                                for j in 1..tokens {
                                    dattn[[i + 1, j]] += dred[i] / n as f64;
                                }
                            }
                        }
                    }
                }
                dv.slice_mut(cols).assign(&attn.t().dot(&dmixed));
                let dscores = nn::softmax_rows_backward(attn, &dattn) * scale;
                dq.slice_mut(cols).assign(&dscores.dot(&ka));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qa));
            }

            let mut dnormed1 =
                nn::linear_backward(&lc.normed1, &block.wq, &dq, &mut bg.wq, &mut bg.bq);
            dnormed1 += &nn::linear_backward(&lc.normed1, &block.wk, &dk, &mut bg.wk, &mut bg.bk);
            dnormed1 += &nn::linear_backward(&lc.normed1, &block.wv, &dv, &mut bg.wv, &mut bg.bv);
            dinput += &nn::layer_norm_backward(
                &lc.ln1,
                &block.ln1_gamma,
                &dnormed1,
                &mut bg.ln1_gamma,
                &mut bg.ln1_beta,
            );
            dz = dinput;
        }

        // Embedding: z0 = concat(cls, patches @ w + b) + pos.
        grads.pos += &dz;
        grads.cls += &dz.row(0);
        let dembedded = dz.slice(s![1.., ..]).to_owned();
        grads.patch_w += &cache.patches.t().dot(&dembedded);
        grads.patch_b += &dembedded.sum_axis(Axis(0));

        grads
    }

    /// Keep the embeddings, the first `depth` encoder blocks, and the head.
    /// Running the pruned model equals running the original through `depth`
    /// blocks and then the final norm and head.
    pub fn prune_to_depth(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.config.layers {
            return Err(Error::invalid(format!(
                "cannot prune a {}-layer model to {depth} layers",
                self.config.layers
            )));
        }
        let mut config = self.config.clone();
        config.layers = depth;
        let mut params = self.params.clone();
        params.blocks.truncate(depth);
        Ok(Self { config, params })
    }

    // -- checkpoints --------------------------------------------------------

    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<()> {
        data::ensure_dir(dir)?;
        let tensors = self.params.flatten();
        let shapes = self.params.tensor_shapes();
        let mut manifest = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for ((name, values), (name2, shape)) in tensors.iter().zip(&shapes) {
            debug_assert_eq!(name, name2);
            manifest.push(serde_json::json!({
                "name": name,
                "shape": shape,
                "offset": blob.len(),
                "len": values.len(),
            }));
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::json!({
            "format": "gazevit-checkpoint-v1",
            "dtype": "f64-le",
            "config": self.config,
            "data_file": format!("{stem}.bin"),
            "tensors": manifest,
        });
        let json_path = dir.join(format!("{stem}.json"));
        data::write_text(
            &json_path,
            &serde_json::to_string_pretty(&meta).expect("serializable"),
        )?;
        std::fs::write(dir.join(format!("{stem}.bin")), &blob)
            .map_err(|e| Error::io(dir.join(format!("{stem}.bin")), e))
    }

    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let body = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| Error::format(&json_path, e.to_string()))?;
        if meta["format"] != "gazevit-checkpoint-v1" {
            return Err(Error::format(&json_path, "unknown checkpoint format"));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(&json_path, e.to_string()))?;
        let bin_path = dir.join(
            meta["data_file"]
                .as_str()
                .ok_or_else(|| Error::format(&json_path, "missing data_file"))?,
        );
        let blob = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut params = Params::init(&config, 0)?;
        let tensors = meta["tensors"]
            .as_array()
            .ok_or_else(|| Error::format(&json_path, "missing tensors"))?
            .clone();
        let mut by_name = std::collections::BTreeMap::new();
        for t in &tensors {
            let name = t["name"].as_str().unwrap_or_default().to_string();
            let offset = t["offset"].as_u64().unwrap_or(0) as usize;
            let len = t["len"].as_u64().unwrap_or(0) as usize;
            by_name.insert(name, (offset, len));
        }
        let mut missing = Vec::new();
        params.for_each_tensor_mut(|name, slot| {
            match by_name.get(name) {
                Some(&(offset, len)) if len == slot.len() => {
                    for (i, v) in slot.iter_mut().enumerate() {
                        let start = offset + i * 8;
                        let bytes: [u8; 8] = blob[start..start + 8]
                            .try_into()
                            .expect("checkpoint blob bounds");
                        *v = f64::from_le_bytes(bytes);
                    }
                }
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(Error::format(
                &json_path,
                format!("tensors missing or mis-shaped: {missing:?}"),
            ));
        }
        Self::from_params(config, params)
    }

    /// Export every head's attention matrix as an array file keyed by
    /// (layer, head), plus an index of the written files.
    pub fn export_attention(dir: &Path, attention: &AttentionTensor) -> Result<Vec<std::path::PathBuf>> {
        data::ensure_dir(dir)?;
        let mut written = Vec::new();
        for (l, heads) in attention.weights.iter().enumerate() {
            for (a, w) in heads.iter().enumerate() {
                let path = dir.join(format!("attention_l{l}_h{a}.npy"));
                data::write_npy_2d(&path, w)?;
                written.push(path);
            }
        }
        let index: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        let index_path = dir.join("attention_index.json");
        data::write_text(
            &index_path,
            &serde_json::to_string_pretty(&index).expect("serializable"),
        )?;
        written.push(index_path);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        let mut frame = Frame::zeros(h, w);
        for v in frame.pixels_mut().iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        frame
    }

    #[test]
    fn patch_counts_follow_the_grid_formula() {
        let frame = Frame::zeros(224, 224);
        let patches = patchify(&frame, 16).unwrap();
        assert_eq!(patches.shape(), &[196, 768]);
        let frame = Frame::zeros(32, 32);
        let patches = patchify(&frame, 8).unwrap();
        assert_eq!(patches.shape(), &[16, 192]);
    }

    #[test]
    fn patchify_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_frame(&mut rng, 32, 48);
        let patches = patchify(&frame, 8).unwrap();
        let back = unpatchify(&patches, 8, 32, 48).unwrap();
        assert_eq!(frame.pixels(), back.pixels());
    }

    #[test]
    fn indivisible_patchify_rejected() {
        let frame = Frame::zeros(30, 32);
        assert!(patchify(&frame, 8).is_err());
    }

    #[test]
    fn zeroed_projections_give_uniform_attention() {
        let config = ModelConfig::desk();
        let mut model = VisionTransformer::new(config.clone(), 7).unwrap();
        for b in model.params_mut().blocks.iter_mut() {
            b.wq.fill(0.0);
            b.bq.fill(0.0);
            b.wk.fill(0.0);
            b.bk.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = random_frame(&mut rng, 32, 32);
        let out = model.forward(&frame).unwrap();
        let tokens = config.tokens() as f64;
        for layer in &out.attention.weights {
            for head in layer {
                for &v in head.iter() {
                    assert!((v - 1.0 / tokens).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = VisionTransformer::new(ModelConfig::desk(), 11).unwrap();
        for _ in 0..10 {
            let frame = random_frame(&mut rng, 32, 32);
            let out = model.forward(&frame).unwrap();
            assert!(out.logits.iter().all(|v| v.is_finite()));
            for layer in &out.attention.weights {
                for head in layer {
                    for row in head.rows() {
                        assert!((row.sum() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_frame(&mut rng, 32, 32);
        let a = VisionTransformer::new(ModelConfig::desk(), 5).unwrap();
        let b = VisionTransformer::new(ModelConfig::desk(), 5).unwrap();
        let out_a = a.forward(&frame).unwrap();
        let out_b = b.forward(&frame).unwrap();
        assert_eq!(out_a.logits, out_b.logits);
        for (la, lb) in out_a
            .attention
            .weights
            .iter()
            .zip(&out_b.attention.weights)
        {
            for (ha, hb) in la.iter().zip(lb) {
                assert_eq!(ha, hb);
            }
        }
    }

    #[test]
    fn reduce_attention_uniform_and_onehot() {
        let tokens = 17;
        let uniform = Array2::from_elem((tokens, tokens), 1.0 / tokens as f64);
        let reduced = reduce_attention(&uniform, AttentionReduction::ColumnMeanReceived);
        for &v in reduced.iter() {
            assert!((v - 1.0 / tokens as f64).abs() < 1e-12);
        }

        // All patch queries put mass 1 on patch column 3 (index 4 with CLS).
        let mut concentrated = Array2::zeros((tokens, tokens));
        for i in 0..tokens {
            concentrated[[i, 4]] = 1.0;
        }
        let reduced = reduce_attention(&concentrated, AttentionReduction::ColumnMeanReceived);
        assert!((reduced[3] - 1.0).abs() < 1e-12);
        assert!(reduced.iter().enumerate().all(|(i, &v)| i == 3 || v == 0.0));
    }

    #[test]
    fn reduce_attention_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let tokens = 17;
            let raw = Array2::from_shape_fn((tokens, tokens), |_| rng.random_range(0.0..1.0));
            let attn = nn::softmax_rows(&raw);
            let reduced = reduce_attention(&attn, AttentionReduction::ColumnMeanReceived);
            let n = tokens - 1;
            for j in 0..n {
                let mut sum = 0.0;
                for i in 1..tokens {
                    sum += attn[[i, j + 1]];
                }
                assert!((reduced[j] - sum / n as f64).abs() < 1e-12);
            }
            // Entries bounded and total at most 1.
            assert!(reduced.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(reduced.sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn render_attention_map_blocks_and_degenerate_rule() {
        let mut v = Array1::zeros(16);
        v[5] = 1.0;
        let img = render_attention_map(&v, 8, 32, 32).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                let expected = if (8..16).contains(&i) && (8..16).contains(&j) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(img[[i, j]], expected);
            }
        }
        let uniform = Array1::from_elem(16, 0.3);
        let img = render_attention_map(&uniform, 8, 32, 32).unwrap();
        assert!(img.iter().all(|&p| p == 0.5));

        let ramp = Array1::from_shape_fn(16, |i| i as f64);
        let img = render_attention_map(&ramp, 8, 32, 32).unwrap();
        for p in 0..16usize {
            let (py, px) = (p / 4, p % 4);
            let expected = p as f64 / 15.0;
            assert!((img[[py * 8, px * 8]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pruning_full_depth_is_identity_and_shapes_shrink() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = random_frame(&mut rng, 32, 32);
        let model = VisionTransformer::new(ModelConfig::desk(), 21).unwrap();
        let same = model.prune_to_depth(2).unwrap();
        let out_a = model.forward(&frame).unwrap();
        let out_b = same.forward(&frame).unwrap();
        for (a, b) in out_a.logits.iter().zip(out_b.logits.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let one = model.prune_to_depth(1).unwrap();
        let out_one = one.forward(&frame).unwrap();
        assert_eq!(out_one.attention.layers(), 1);
        assert!(model.prune_to_depth(3).is_err());
        assert!(model.prune_to_depth(0).is_err());
    }

    #[test]
    fn pruned_forward_matches_manual_truncation() {
        // Oracle: a fresh model whose block list is truncated by hand.
        let mut config = ModelConfig::desk();
        config.layers = 4;
        let model = VisionTransformer::new(config.clone(), 33).unwrap();
        let pruned = model.prune_to_depth(2).unwrap();

        let mut truncated_params = model.params().clone();
        truncated_params.blocks.truncate(2);
        let mut truncated_config = config;
        truncated_config.layers = 2;
        let manual =
            VisionTransformer::from_params(truncated_config, truncated_params).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let frame = random_frame(&mut rng, 32, 32);
            let a = pruned.forward(&frame).unwrap();
            let b = manual.forward(&frame).unwrap();
            for (x, y) in a.logits.iter().zip(b.logits.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permuting_patches_and_positions_permutes_reduced_attention() {
        let config = ModelConfig::desk();
        let model = VisionTransformer::new(config.clone(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frame = random_frame(&mut rng, 32, 32);

        // Permutation of the 16 patches.
        let mut perm: Vec<usize> = (0..16).collect();
        for i in (1..16).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }

        // Build the permuted frame: patch p of the new frame is patch
        // perm[p] of the original.
        let patches = patchify(&frame, 8).unwrap();
        let mut permuted = Array2::zeros(patches.raw_dim());
        for p in 0..16 {
            permuted.row_mut(p).assign(&patches.row(perm[p]));
        }
        let permuted_frame = unpatchify(&permuted, 8, 32, 32).unwrap();

        // Permute the non-CLS position embeddings identically.
        let mut permuted_model = model.clone();
        for p in 0..16 {
            let src = model.params().pos.row(perm[p] + 1).to_owned();
            permuted_model.params_mut().pos.row_mut(p + 1).assign(&src);
        }

        let base = model.forward(&frame).unwrap();
        let permuted_out = permuted_model.forward(&permuted_frame).unwrap();
        for l in 0..base.attention.layers() {
            for a in 0..base.attention.heads() {
                let orig = &base.attention.reduced[l][a];
                let perm_red = &permuted_out.attention.reduced[l][a];
                for p in 0..16 {
                    assert!(
                        (perm_red[p] - orig[perm[p]]).abs() < 1e-9,
                        "layer {l} head {a} patch {p}"
                    );
                }
            }
        }
        // Logits unchanged: CLS attends to the same multiset of tokens.
        for (a, b) in base.logits.iter().zip(permuted_out.logits.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let model = VisionTransformer::new(ModelConfig::desk(), 17).unwrap();
        model.save_checkpoint(dir.path(), "ckpt").unwrap();
        let loaded = VisionTransformer::load_checkpoint(dir.path(), "ckpt").unwrap();
        assert_eq!(model.params(), loaded.params());
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let frame = random_frame(&mut rng, 32, 32);
        assert_eq!(
            model.forward(&frame).unwrap().logits,
            loaded.forward(&frame).unwrap().logits
        );
    }

    #[test]
    fn attention_export_writes_per_head_files() {
        let dir = tempfile::tempdir().unwrap();
        let model = VisionTransformer::new(ModelConfig::desk(), 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let frame = random_frame(&mut rng, 32, 32);
        let out = model.forward(&frame).unwrap();
        let files = VisionTransformer::export_attention(dir.path(), &out.attention).unwrap();
        // 2 layers x 2 heads + index.
        assert_eq!(files.len(), 5);
        let back = data::read_npy_2d(&dir.path().join("attention_l1_h0.npy")).unwrap();
        assert_eq!(back, out.attention.weights[1][0]);
    }
}
