//! Two-encoder Conformer with an intermediate CTC head between the
//! encoders. The intermediate posteriors drive key-frame extraction; the
//! second encoder then runs dense, KFSA-masked, or on KFDS-shortened input.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{argmax_frame_labels, ctc_greedy_decode, ctc_loss, edit_distance, CtcPosterior};
use crate::data::{batch, Dataset};
use crate::keyframe::{
    build_kfsa_mask, check_ctc_feasible, extract_key_frames, select_kfds_frames, AttentionMask,
    Feasibility, FrameSelection, KfsaMode,
};
use crate::nn::{
    attention_mult_count, conformer_block, positional_encoding, subsample_frontend,
    ConformerBlockParams, FrontendParams,
};
use crate::tensor::Tensor;

/// Which key-frame mechanism the second encoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Dense,
    Kfsa,
    Kfds,
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Dense => "dense",
            ModelMode::Kfsa => "kfsa",
            ModelMode::Kfds => "kfds",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(ModelMode::Dense),
            "kfsa" => Ok(ModelMode::Kfsa),
            "kfds" => Ok(ModelMode::Kfds),
            other => Err(format!("unknown mode `{other}` (dense|kfsa|kfds)")),
        }
    }
}

impl std::str::FromStr for KfsaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "window_plus_k" => Ok(KfsaMode::WindowPlusK),
            "window_only" => Ok(KfsaMode::WindowOnly),
            "k_only" => Ok(KfsaMode::KOnly),
            "dense" => Ok(KfsaMode::Dense),
            other => Err(format!(
                "unknown kfsa mode `{other}` (window_plus_k|window_only|k_only|dense)"
            )),
        }
    }
}

/// Full model and training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub n_blocks_enc1: usize,
    pub n_blocks_enc2: usize,
    pub subsample_factor: usize,
    pub vocab: usize,
    pub mode: ModelMode,
    pub w: usize,
    pub kfsa_mode: KfsaMode,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop training once heldout TER drops to this value, if set.
    pub early_stop_ter: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            conv_kernel: 7,
            n_blocks_enc1: 2,
            n_blocks_enc2: 2,
            subsample_factor: 2,
            vocab: 9,
            mode: ModelMode::Dense,
            w: 1,
            kfsa_mode: KfsaMode::WindowPlusK,
            alpha0: 0.5,
            alpha1: 0.5,
            beta0: 1.0,
            beta1: 0.0,
            warmup_epochs: 5,
            lr: 2e-3,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            early_stop_ter: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if (self.alpha0 + self.alpha1 - 1.0).abs() > 1e-9 {
            return Err(format!(
                "alpha0 + alpha1 must equal 1, got {} + {}",
                self.alpha0, self.alpha1
            ));
        }
        if (self.beta0 + self.beta1 - 1.0).abs() > 1e-9 {
            return Err(format!(
                "beta0 + beta1 must equal 1, got {} + {}",
                self.beta0, self.beta1
            ));
        }
        if self.n_blocks_enc1 < 1 {
            return Err("n_blocks_enc1 must be >= 1 (intermediate CTC needs encoder 1)".into());
        }
        if self.d_model % self.heads != 0 {
            return Err(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if ![1, 2, 4].contains(&self.subsample_factor) {
            return Err(format!(
                "subsample_factor must be 1, 2, or 4, got {}",
                self.subsample_factor
            ));
        }
        if self.vocab < 2 {
            return Err("vocab must be >= 2 (blank plus at least one symbol)".into());
        }
        if self.lr <= 0.0 {
            return Err("lr must be positive".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Mechanism settings actually applied on a forward pass; eval may override
/// the training-time config.
#[derive(Debug, Clone, Copy)]
pub struct RunMode {
    pub mode: ModelMode,
    pub kfsa_mode: KfsaMode,
    pub w: usize,
}

impl RunMode {
    pub fn from_config(c: &ModelConfig) -> RunMode {
        RunMode {
            mode: c.mode,
            kfsa_mode: c.kfsa_mode,
            w: c.w,
        }
    }
}

pub struct ForwardOutput {
    pub interctc: CtcPosterior,
    pub final_post: CtcPosterior,
    pub selection: FrameSelection,
    pub mask_used: Option<AttentionMask>,
    pub fallback: bool,
    pub attn_mults_enc1: u64,
    pub attn_mults_enc2: u64,
}

pub struct Model {
    pub config: ModelConfig,
    pub frontend: FrontendParams,
    pub enc1: Vec<ConformerBlockParams>,
    pub interctc_proj: Tensor,
    pub enc2: Vec<ConformerBlockParams>,
    pub final_proj: Tensor,
}

fn snap_f32(t: &Tensor) {
    let snapped: Vec<f64> = t.to_vec().iter().map(|&v| v as f32 as f64).collect();
    t.set_data(snapped);
}

impl Model {
    pub fn init(config: &ModelConfig) -> Model {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config;
        let block = |rng: &mut ChaCha8Rng| {
            ConformerBlockParams::init(c.d_model, c.heads, c.ffn_dim, c.conv_kernel, rng)
        };
        let frontend = FrontendParams::init(c.feat_dim, c.d_model, c.subsample_factor, &mut rng);
        let enc1 = (0..c.n_blocks_enc1).map(|_| block(&mut rng)).collect();
        let std = 1.0 / (c.d_model as f64).sqrt();
        let interctc_proj = crate::tensor::randn(&[c.d_model, c.vocab], std, &mut rng).requires_grad();
        let enc2 = (0..c.n_blocks_enc2).map(|_| block(&mut rng)).collect();
        let final_proj = crate::tensor::randn(&[c.d_model, c.vocab], std, &mut rng).requires_grad();
        let model = Model {
            config: config.clone(),
            frontend,
            enc1,
            interctc_proj,
            enc2,
            final_proj,
        };
        // Parameters live on the f32 grid so checkpoints round-trip exactly.
        for (_, p) in model.named_params() {
            snap_f32(&p);
        }
        model
    }

    /// Stable name→tensor listing; also the checkpoint manifest order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        out.push(("frontend.w1".into(), self.frontend.w1.clone()));
        if let Some(w2) = &self.frontend.w2 {
            out.push(("frontend.w2".into(), w2.clone()));
        }
        let push_block = |prefix: String, b: &ConformerBlockParams, out: &mut Vec<(String, Tensor)>| {
            let items: Vec<(&str, Tensor)> = vec![
                ("ffn1.ln_gamma", b.ffn1.ln_gamma.clone()),
                ("ffn1.ln_beta", b.ffn1.ln_beta.clone()),
                ("ffn1.w1", b.ffn1.w1.clone()),
                ("ffn1.w2", b.ffn1.w2.clone()),
                ("ln_att_gamma", b.ln_att_gamma.clone()),
                ("ln_att_beta", b.ln_att_beta.clone()),
                ("attn.w_q", b.attn.w_q.clone()),
                ("attn.w_k", b.attn.w_k.clone()),
                ("attn.w_v", b.attn.w_v.clone()),
                ("attn.w_o", b.attn.w_o.clone()),
                ("conv.ln1_gamma", b.conv.ln1_gamma.clone()),
                ("conv.ln1_beta", b.conv.ln1_beta.clone()),
                ("conv.pw_in", b.conv.pw_in.clone()),
                ("conv.dw_kernel", b.conv.dw_kernel.clone()),
                ("conv.ln2_gamma", b.conv.ln2_gamma.clone()),
                ("conv.ln2_beta", b.conv.ln2_beta.clone()),
                ("conv.pw_out", b.conv.pw_out.clone()),
                ("ffn2.ln_gamma", b.ffn2.ln_gamma.clone()),
                ("ffn2.ln_beta", b.ffn2.ln_beta.clone()),
                ("ffn2.w1", b.ffn2.w1.clone()),
                ("ffn2.w2", b.ffn2.w2.clone()),
                ("ln_final_gamma", b.ln_final_gamma.clone()),
                ("ln_final_beta", b.ln_final_beta.clone()),
            ];
            for (name, t) in items {
                out.push((format!("{prefix}.{name}"), t));
            }
        };
        for (i, b) in self.enc1.iter().enumerate() {
            push_block(format!("enc1.{i}"), b, &mut out);
        }
        out.push(("interctc_proj".into(), self.interctc_proj.clone()));
        for (i, b) in self.enc2.iter().enumerate() {
            push_block(format!("enc2.{i}"), b, &mut out);
        }
        out.push(("final_proj".into(), self.final_proj.clone()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.to_vec().len()).sum()
    }

    /// Frontend → encoder 1 → intermediate CTC → (key-frame mechanism) →
    /// encoder 2 → final CTC.
    ///
    /// `labels_len_for_feasibility` lets KFDS fall back to dense processing
    /// when the shortened sequence could not carry the reference.
    pub fn forward(
        &self,
        features: &Tensor,
        labels_len_for_feasibility: Option<usize>,
        key_frames_enabled: bool,
        run: RunMode,
    ) -> ForwardOutput {
        let mults0 = attention_mult_count();
        let mut x = subsample_frontend(features, &self.frontend);
        let t = x.shape()[0];
        x = x.add(&positional_encoding(t, self.config.d_model));
        for b in &self.enc1 {
            x = conformer_block(&x, None, b);
        }
        let interctc = CtcPosterior::new(x.matmul(&self.interctc_proj).log_softmax());
        let mults_enc1 = attention_mult_count() - mults0;

        let mut selection = FrameSelection::identity(t);
        let mut mask_used: Option<AttentionMask> = None;
        let mut fallback = false;

        if key_frames_enabled && run.mode != ModelMode::Dense {
            let frame_ids = argmax_frame_labels(&interctc);
            let p = extract_key_frames(&frame_ids, interctc.blank_id);
            match run.mode {
                ModelMode::Kfsa => {
                    if p.positions.is_empty() {
                        fallback = true;
                    } else {
                        mask_used = Some(build_kfsa_mask(&p, t, run.w, run.kfsa_mode));
                    }
                }
                ModelMode::Kfds => {
                    let sel = select_kfds_frames(&p, t, run.w);
                    if sel.fallback {
                        fallback = true;
                    } else if let Some(u) = labels_len_for_feasibility {
                        if check_ctc_feasible(&sel, u) == Feasibility::FallbackNeeded {
                            fallback = true;
                        } else {
                            x = x.gather_rows(&sel.kept);
                            selection = sel;
                        }
                    } else {
                        x = x.gather_rows(&sel.kept);
                        selection = sel;
                    }
                }
                ModelMode::Dense => unreachable!(),
            }
        }

        let mults1 = attention_mult_count();
        for b in &self.enc2 {
            x = conformer_block(&x, mask_used.as_ref(), b);
        }
        let final_post = CtcPosterior::new(x.matmul(&self.final_proj).log_softmax());
        let attn_mults_enc2 = attention_mult_count() - mults1;

        ForwardOutput {
            interctc,
            final_post,
            selection,
            mask_used,
            fallback,
            attn_mults_enc1: mults_enc1,
            attn_mults_enc2,
        }
    }

    /// Deep copy of parameter values; used to move models across threads.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<f64>)]) {
        let params = self.named_params();
        assert_eq!(params.len(), snapshot.len(), "snapshot size mismatch");
        for ((name, tensor), (sname, values)) in params.iter().zip(snapshot) {
            assert_eq!(name, sname, "snapshot parameter order mismatch");
            tensor.set_data(values.clone());
        }
    }
}

/// Weighted joint objective over both CTC heads. The cross-entropy term is a pluggable
/// input defaulting to zero (no attention decoder in this artifact).
pub fn joint_loss(
    l_ctc1: &Tensor,
    l_ctc2: &Tensor,
    l_ce: Option<&Tensor>,
    config: &ModelConfig,
) -> Tensor {
    assert!(
        (config.alpha0 + config.alpha1 - 1.0).abs() <= 1e-9
            && (config.beta0 + config.beta1 - 1.0).abs() <= 1e-9,
        "joint_loss weight constraints violated: alpha=({}, {}), beta=({}, {})",
        config.alpha0,
        config.alpha1,
        config.beta0,
        config.beta1
    );
    let ctc = l_ctc1
        .scale(config.beta0 * config.alpha0)
        .add(&l_ctc2.scale(config.beta0 * config.alpha1));
    match l_ce {
        Some(ce) => ctc.add(&ce.scale(config.beta1)),
        None => ctc,
    }
}

/// Plain Adam with global gradient-norm clipping at 5.0.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[(String, Tensor)]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
            step_count: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.to_vec().len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.to_vec().len()]).collect(),
        }
    }

    /// Applies one update from the gradients stored on the params, then
    /// clears them. Parameters are re-snapped to the f32 grid.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.to_vec().len()]))
            .collect();
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, (_, t)) in params.iter().enumerate() {
            let mut data = t.to_vec();
            for (j, g) in grads[i].iter().enumerate() {
                let g = g * scale;
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.set_data(data);
            snap_f32(t);
            t.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss_ctc1: f64,
    pub loss_ctc2: f64,
    pub loss_joint: f64,
    pub ter: f64,
    pub drop_ratio_mean: f64,
    pub fallback_count: usize,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,split,loss_ctc1,loss_ctc2,loss_joint,ter,drop_ratio_mean,fallback_count";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch,
            self.split,
            self.loss_ctc1,
            self.loss_ctc2,
            self.loss_joint,
            self.ter,
            self.drop_ratio_mean,
            self.fallback_count
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
}

impl Trainer {
    pub fn new(model: Model) -> Trainer {
        let adam = Adam::new(model.config.lr, &model.named_params());
        Trainer { model, adam }
    }

    /// One pass over the (shuffled) training set. Key frames activate once
    /// `epoch_index >= warmup_epochs`.
    pub fn train_epoch(
        &mut self,
        train: &Dataset,
        epoch_index: usize,
    ) -> Result<EpochMetrics, TrainError> {
        let cfg = self.model.config.clone();
        let enabled = epoch_index >= cfg.warmup_epochs;
        let run = RunMode::from_config(&cfg);
        let params = self.model.named_params();

        let mut order: Vec<usize> = (0..train.utterances.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch_index as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let shuffled: Vec<crate::data::Utterance> =
            order.iter().map(|&i| train.utterances[i].clone()).collect();

        let mut sums = (0.0, 0.0, 0.0); // ctc1, ctc2, joint
        let mut n_seen = 0usize;
        let mut errors = 0usize;
        let mut ref_len = 0usize;
        let mut drop_sum = 0.0;
        let mut fallback_count = 0usize;

        for (batch_idx, b) in batch(&shuffled, train.feat_dim, cfg.batch_size).iter().enumerate() {
            let mut batch_loss: Option<Tensor> = None;
            let mut in_batch = 0usize;
            for i in 0..b.lengths.len() {
                let feats = b.utterance_features(i);
                let labels = &b.labels[i];
                let out = self
                    .model
                    .forward(&feats, Some(labels.len()), enabled, run);
                let l1 = ctc_loss(&out.interctc, labels);
                let l2 = ctc_loss(&out.final_post, labels);
                if !l1.feasible || !l2.feasible {
                    // No valid alignment even after fallback; skip and count.
                    fallback_count += 1;
                    continue;
                }
                let joint = joint_loss(&l1.loss, &l2.loss, None, &cfg);
                sums.0 += l1.loss.item();
                sums.1 += l2.loss.item();
                sums.2 += joint.item();
                n_seen += 1;
                in_batch += 1;
                drop_sum += out.selection.drop_ratio;
                if out.fallback {
                    fallback_count += 1;
                }
                let e = edit_distance(&ctc_greedy_decode(&out.final_post), labels);
                errors += e.errors();
                ref_len += labels.len();
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&joint),
                    None => joint,
                });
            }
            if let Some(total) = batch_loss {
                let mean = total.scale(1.0 / in_batch as f64);
                if !mean.item().is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch: epoch_index,
                        batch: batch_idx,
                    });
                }
                mean.backward();
                self.adam.step(&params);
            }
        }

        let n = n_seen.max(1) as f64;
        Ok(EpochMetrics {
            epoch: epoch_index,
            split: "train".into(),
            loss_ctc1: sums.0 / n,
            loss_ctc2: sums.1 / n,
            loss_joint: sums.2 / n,
            ter: errors as f64 / ref_len.max(1) as f64,
            drop_ratio_mean: drop_sum / n,
            fallback_count,
        })
    }
}

/// Greedy-decode evaluation statistics over a dataset split.
#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    pub ter: f64,
    pub drop_ratio_mean: f64,
    pub fallback_count: usize,
    pub t_prime_mean: f64,
    pub loss_ctc1: f64,
    pub loss_ctc2: f64,
    pub loss_joint: f64,
}

/// Evaluates with key frames enabled under `run` (which may differ from the
/// training-time config).
pub fn evaluate(model: &Model, dataset: &Dataset, run: RunMode) -> EvalMetrics {
    let cfg = &model.config;
    let mut errors = 0usize;
    let mut ref_len = 0usize;
    let mut drop_sum = 0.0;
    let mut fallback_count = 0usize;
    let mut t_prime_sum = 0usize;
    let mut sums = (0.0, 0.0, 0.0);
    let mut n_loss = 0usize;
    for utt in &dataset.utterances {
        let feats = utt.feature_tensor(dataset.feat_dim);
        let out = model.forward(&feats, Some(utt.labels.len()), true, run);
        let e = edit_distance(&ctc_greedy_decode(&out.final_post), &utt.labels);
        errors += e.errors();
        ref_len += utt.labels.len();
        drop_sum += out.selection.drop_ratio;
        if out.fallback {
            fallback_count += 1;
        }
        t_prime_sum += out.final_post.t;
        let l1 = ctc_loss(&out.interctc, &utt.labels);
        let l2 = ctc_loss(&out.final_post, &utt.labels);
        if l1.feasible && l2.feasible {
            let joint = joint_loss(&l1.loss, &l2.loss, None, cfg);
            sums.0 += l1.loss.item();
            sums.1 += l2.loss.item();
            sums.2 += joint.item();
            n_loss += 1;
        }
    }
    let n = dataset.utterances.len().max(1) as f64;
    let nl = n_loss.max(1) as f64;
    EvalMetrics {
        ter: errors as f64 / ref_len.max(1) as f64,
        drop_ratio_mean: drop_sum / n,
        fallback_count,
        t_prime_mean: t_prime_sum as f64 / n,
        loss_ctc1: sums.0 / nl,
        loss_ctc2: sums.1 / nl,
        loss_joint: sums.2 / nl,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("weights file too short for parameter `{name}`: need {need} more bytes")]
    ShortWeights { name: String, need: usize },
    #[error("weights file has {extra} trailing bytes beyond the manifest")]
    TrailingWeights { extra: usize },
    #[error("config mismatch for `{name}`: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("manifest lists `{found}` where the model expects `{expected}`")]
    NameMismatch { found: String, expected: String },
    #[error("manifest has {found} parameters, model expects {expected}")]
    CountMismatch { found: usize, expected: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json` (ordered names and shapes) and `weights.bin`
/// (concatenated little-endian f32 in manifest order).
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let params = model.named_params();
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape(),
        })
        .collect();
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&mpath))?;
    let mut bytes: Vec<u8> = Vec::new();
    for (_, t) in &params {
        for &v in t.data().iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let wpath = dir.join("weights.bin");
    std::fs::write(&wpath, bytes).map_err(io_err(&wpath))?;
    Ok(())
}

/// Rebuilds a model from `config` and fills it from a checkpoint directory.
pub fn load_checkpoint(dir: &Path, config: &ModelConfig) -> Result<Model, CheckpointError> {
    let mpath = dir.join("manifest.json");
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&std::fs::read(&mpath).map_err(io_err(&mpath))?)?;
    let wpath = dir.join("weights.bin");
    let bytes = std::fs::read(&wpath).map_err(io_err(&wpath))?;

    let model = Model::init(config);
    let params = model.named_params();
    if manifest.len() != params.len() {
        return Err(CheckpointError::CountMismatch {
            found: manifest.len(),
            expected: params.len(),
        });
    }
    let mut offset = 0usize;
    for (entry, (name, tensor)) in manifest.iter().zip(&params) {
        if &entry.name != name {
            return Err(CheckpointError::NameMismatch {
                found: entry.name.clone(),
                expected: name.clone(),
            });
        }
        let expected_shape = tensor.shape();
        if entry.shape != expected_shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: entry.shape.clone(),
                expected: expected_shape,
            });
        }
        let n: usize = entry.shape.iter().product();
        let need = n * 4;
        if offset + need > bytes.len() {
            return Err(CheckpointError::ShortWeights {
                name: name.clone(),
                need: offset + need - bytes.len(),
            });
        }
        let values: Vec<f64> = bytes[offset..offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensor.set_data(values);
        offset += need;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::TrailingWeights {
            extra: bytes.len() - offset,
        });
    }
    Ok(model)
}

/// Shared scatter of utterances across worker threads, merging per-index
/// results deterministically. `threads == 1` runs inline.
pub fn evaluate_parallel(model: &Model, dataset: &Dataset, run: RunMode, threads: usize) -> EvalMetrics {
    if threads <= 1 || dataset.utterances.len() < 2 {
        return evaluate(model, dataset, run);
    }
    let snapshot = model.snapshot();
    let config = model.config.clone();
    let chunk = dataset.utterances.len().div_ceil(threads);
    let partials: Vec<EvalMetrics> = std::thread::scope(|scope| {
        let handles: Vec<_> = dataset
            .utterances
            .chunks(chunk)
            .map(|part| {
                let snapshot = &snapshot;
                let config = &config;
                scope.spawn(move || {
                    let local = Model::init(config);
                    local.restore(snapshot);
                    let sub = Dataset {
                        feat_dim: dataset.feat_dim,
                        vocab_size: dataset.vocab_size,
                        utterances: part.to_vec(),
                    };
                    (part.len(), evaluate(&local, &sub, run))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                let (len, mut m) = h.join().expect("eval worker panicked");
                // Re-weight the means by chunk size for merging.
                m.drop_ratio_mean *= len as f64;
                m.t_prime_mean *= len as f64;
                m
            })
            .collect()
    });
    // TER must be re-derived from error/ref totals; evaluate() reports the
    // ratio, so recompute by weighting with reference lengths per chunk.
    let mut total_utts = 0usize;
    let mut drop = 0.0;
    let mut tp = 0.0;
    let mut fallback = 0usize;
    for (i, part) in dataset.utterances.chunks(chunk).enumerate() {
        total_utts += part.len();
        drop += partials[i].drop_ratio_mean;
        tp += partials[i].t_prime_mean;
        fallback += partials[i].fallback_count;
    }
    let mut errors = 0.0;
    let mut ref_total = 0usize;
    for (i, part) in dataset.utterances.chunks(chunk).enumerate() {
        let part_ref: usize = part.iter().map(|u| u.labels.len()).sum();
        errors += partials[i].ter * part_ref.max(1) as f64;
        ref_total += part_ref;
    }
    let nl = partials.len() as f64;
    EvalMetrics {
        ter: errors / ref_total.max(1) as f64,
        drop_ratio_mean: drop / total_utts as f64,
        fallback_count: fallback,
        t_prime_mean: tp / total_utts as f64,
        loss_ctc1: partials.iter().map(|p| p.loss_ctc1).sum::<f64>() / nl,
        loss_ctc2: partials.iter().map(|p| p.loss_ctc2).sum::<f64>() / nl,
        loss_joint: partials.iter().map(|p| p.loss_joint).sum::<f64>() / nl,
    }
}
