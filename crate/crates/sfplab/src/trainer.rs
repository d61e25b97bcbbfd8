//! Contrastive training engine.
//!
//! Three batch-step flavors share one gradient path:
//!
//! * `sfp_step` — one forward per sentence over the two-stage prompt; the
//!   prompt's last token is the anchor, the prefix's last token the positive.
//! * `twopass_step` — the two-forward baselines: distinct templates per pass
//!   (dual) or the same template with independent dropout masks (dropout).
//! * `pretrain_step` — next-token cross-entropy on bare sentences.
//!
//! Every step records how many sequences and tokens it pushed through the
//! model, which is what the efficiency ledger reports.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_on_tape, DropoutMode, ModelParams, ParamNodes};
use crate::numkernel::{derive_seed, Matrix, NodeId, Tape};
use crate::template::{render_single, render_two_stage, TemplateKind};
use crate::tokenizer::{Vocab, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "sfp")]
    Sfp,
    #[serde(rename = "two-pass-dual")]
    TwoPassDual,
    #[serde(rename = "two-pass-dropout")]
    TwoPassDropout,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Sfp => "sfp",
            TrainMode::TwoPassDual => "two-pass-dual",
            TrainMode::TwoPassDropout => "two-pass-dropout",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sfp" => Ok(TrainMode::Sfp),
            "two-pass-dual" => Ok(TrainMode::TwoPassDual),
            "two-pass-dropout" => Ok(TrainMode::TwoPassDropout),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected sfp | two-pass-dual | two-pass-dropout)"
            ))),
        }
    }

    pub const ALL: [TrainMode; 3] = [
        TrainMode::Sfp,
        TrainMode::TwoPassDual,
        TrainMode::TwoPassDropout,
    ];
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// InfoNCE temperature.
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Prefix template of the two-stage prompt (sfp mode).
    pub prefix_kind: TemplateKind,
    pub suffix_text: String,
    /// (anchor, positive) templates for two-pass-dual; the anchor kind is
    /// also the single template used by two-pass-dropout.
    pub baseline_kinds: (TemplateKind, TemplateKind),
    /// Add the anchor<->positive mirrored term to the loss.
    pub symmetric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Sfp,
            tau: 0.05,
            batch_size: 64,
            epochs: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
            prefix_kind: TemplateKind::Sth,
            suffix_text: crate::template::DEFAULT_SUFFIX.to_string(),
            baseline_kinds: (TemplateKind::Eol, TemplateKind::Sum),
            symmetric: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Anchor / positive embeddings produced by one batch step, with the pass
/// and token accounting for that batch.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub anchors: Matrix,
    pub positives: Matrix,
    pub forward_pass_count: u64,
    pub forwarded_token_count: u64,
}

/// Gradients in [`ModelParams::tensors`] order.
pub struct GradSet(pub Vec<Matrix>);

pub struct StepOutput {
    pub loss: f64,
    pub grads: GradSet,
    pub batch: EmbeddingBatch,
    pub seq_lens: Vec<u64>,
    pub warning: Option<String>,
}

/// InfoNCE over one batch: mean over i of
/// `-log( exp(cos(a_i, p_i)/tau) / sum_j exp(cos(a_i, p_j)/tau) )`,
/// the denominator running over the positives of every j including j = i.
pub fn infonce(anchors: &Matrix, positives: &Matrix, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if anchors.shape() != positives.shape() {
        return Err(Error::Shape(format!(
            "infonce: anchors {}x{} vs positives {}x{}",
            anchors.rows(),
            anchors.cols(),
            positives.rows(),
            positives.cols()
        )));
    }
    let n = anchors.rows();
    if n == 0 {
        return Err(Error::Input("infonce: empty batch".into()));
    }
    let norm_rows = |m: &Matrix| -> Result<Vec<Vec<f64>>> {
        (0..m.rows())
            .map(|i| {
                let row = m.row(i);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Degenerate(format!("zero-norm embedding in row {i}")));
                }
                Ok(row.iter().map(|v| v / norm).collect())
            })
            .collect()
    };
    let a = norm_rows(anchors)?;
    let p = norm_rows(positives)?;

    let mut total = 0.0;
    for i in 0..n {
        let sims: Vec<f64> = (0..n)
            .map(|j| a[i].iter().zip(&p[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = max + sims.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        total += logsum - sims[i];
    }
    Ok(total / n as f64)
}

/// Tape version of [`infonce`]; anchors/positives are [N x d] nodes.
fn taped_infonce(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    tau: f64,
    symmetric: bool,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let an = tape.row_normalize(anchors)?;
    let pn = tape.row_normalize(positives)?;
    let pt = tape.transpose(pn);
    let sim = tape.matmul(an, pt)?;
    let scaled = tape.scale(sim, 1.0 / tau);
    let n = tape.value(scaled).rows();
    let targets: Vec<usize> = (0..n).collect();
    let loss = tape.cross_entropy_rows(scaled, targets.clone(), vec![true; n])?;
    if !symmetric {
        return Ok(loss);
    }
    let st = tape.transpose(scaled);
    let mirror = tape.cross_entropy_rows(st, targets, vec![true; n])?;
    let sum = tape.add(loss, mirror)?;
    Ok(tape.scale(sum, 0.5))
}

/// Collect one gradient per parameter, zeros where the loss never touched it.
fn collect_grads(
    tape: &Tape,
    nodes: &ParamNodes,
    adjoints: &mut crate::numkernel::Adjoints,
) -> GradSet {
    let grads = nodes
        .node_list()
        .into_iter()
        .map(|id| {
            adjoints.take(id).unwrap_or_else(|| {
                let v = tape.value(id);
                Matrix::zeros(v.rows(), v.cols())
            })
        })
        .collect();
    GradSet(grads)
}

/// Single-forward-pass contrastive step: one forward per sentence, anchor
/// from the prompt's final token, positive from the prefix's final token.
pub fn sfp_step(
    params: &ModelParams,
    sentences: &[String],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    if cfg.mode != TrainMode::Sfp {
        return Err(Error::Usage(format!(
            "sfp_step called in mode {}",
            cfg.mode.name()
        )));
    }
    if sentences.is_empty() {
        return Err(Error::Input("sfp_step: empty batch".into()));
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);

    let mut anchor_rows = Vec::with_capacity(sentences.len());
    let mut positive_rows = Vec::with_capacity(sentences.len());
    let mut tokens = 0u64;
    let mut seq_lens = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let prompt = render_two_stage(vocab, cfg.prefix_kind, &cfg.suffix_text, sentence)?;
        let hidden = forward_on_tape(&mut tape, &nodes, &params.config, &prompt.ids, DropoutMode::Off)?;
        anchor_rows.push(tape.gather_rows(hidden, vec![prompt.rep2_pos])?);
        positive_rows.push(tape.gather_rows(hidden, vec![prompt.rep1_pos])?);
        tokens += prompt.ids.len() as u64;
        seq_lens.push(prompt.ids.len() as u64);
    }
    let anchors = tape.concat_rows(&anchor_rows)?;
    let positives = tape.concat_rows(&positive_rows)?;
    let loss = taped_infonce(&mut tape, anchors, positives, cfg.tau, cfg.symmetric)?;
    let mut adjoints = tape.backprop(loss)?;
    let grads = collect_grads(&tape, &nodes, &mut adjoints);

    Ok(StepOutput {
        loss: tape.scalar(loss),
        grads,
        batch: EmbeddingBatch {
            anchors: tape.value(anchors).clone(),
            positives: tape.value(positives).clone(),
            forward_pass_count: sentences.len() as u64,
            forwarded_token_count: tokens,
        },
        seq_lens,
        warning: None,
    })
}

/// Two-forward baseline step (dual-template or dropout augmentation).
///
/// `step` indexes the step within the run and seeds the dropout masks.
pub fn twopass_step(
    params: &ModelParams,
    sentences: &[String],
    vocab: &Vocab,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutput> {
    if cfg.mode == TrainMode::Sfp {
        return Err(Error::Usage("twopass_step called in mode sfp".into()));
    }
    if sentences.is_empty() {
        return Err(Error::Input("twopass_step: empty batch".into()));
    }
    let dropout_mode = cfg.mode == TrainMode::TwoPassDropout;
    let mut warning = None;
    if dropout_mode && params.config.dropout_rate == 0.0 {
        warning = Some(
            "two-pass-dropout with dropout_rate = 0: positives degenerate to anchors".to_string(),
        );
    }

    let (anchor_kind, positive_kind) = if dropout_mode {
        (cfg.baseline_kinds.0, cfg.baseline_kinds.0)
    } else {
        cfg.baseline_kinds
    };

    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let step_seed = derive_seed(cfg.seed, step);

    let mut anchor_rows = Vec::with_capacity(sentences.len());
    let mut positive_rows = Vec::with_capacity(sentences.len());
    let mut tokens = 0u64;
    let mut seq_lens = Vec::with_capacity(2 * sentences.len());
    for (i, sentence) in sentences.iter().enumerate() {
        let pass = |pass_idx: u64| -> DropoutMode {
            if dropout_mode {
                DropoutMode::Seeded(derive_seed(step_seed, 2 * i as u64 + pass_idx))
            } else {
                DropoutMode::Off
            }
        };
        let ra = render_single(vocab, anchor_kind, sentence);
        let ha = forward_on_tape(&mut tape, &nodes, &params.config, &ra.ids, pass(0))?;
        anchor_rows.push(tape.gather_rows(ha, vec![ra.rep_pos])?);
        tokens += ra.ids.len() as u64;
        seq_lens.push(ra.ids.len() as u64);

        let rb = render_single(vocab, positive_kind, sentence);
        let hb = forward_on_tape(&mut tape, &nodes, &params.config, &rb.ids, pass(1))?;
        positive_rows.push(tape.gather_rows(hb, vec![rb.rep_pos])?);
        tokens += rb.ids.len() as u64;
        seq_lens.push(rb.ids.len() as u64);
    }
    let anchors = tape.concat_rows(&anchor_rows)?;
    let positives = tape.concat_rows(&positive_rows)?;
    let loss = taped_infonce(&mut tape, anchors, positives, cfg.tau, cfg.symmetric)?;
    let mut adjoints = tape.backprop(loss)?;
    let grads = collect_grads(&tape, &nodes, &mut adjoints);

    Ok(StepOutput {
        loss: tape.scalar(loss),
        grads,
        batch: EmbeddingBatch {
            anchors: tape.value(anchors).clone(),
            positives: tape.value(positives).clone(),
            forward_pass_count: 2 * sentences.len() as u64,
            forwarded_token_count: tokens,
        },
        seq_lens,
        warning,
    })
}

/// Next-token pretraining step on bare sentences: targets are the inputs
/// shifted left by one, the final position is excluded.
pub fn pretrain_step(
    params: &ModelParams,
    sentences: &[String],
    vocab: &Vocab,
) -> Result<(f64, GradSet, Vec<u64>)> {
    if sentences.is_empty() {
        return Err(Error::Input("pretrain_step: empty batch".into()));
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);

    let mut losses = Vec::new();
    let mut seq_lens = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let ids = vocab.encode(sentence);
        seq_lens.push(ids.len() as u64);
        let n = ids.len();
        let targets: Vec<usize> = (0..n)
            .map(|i| if i + 1 < n { ids[i + 1] as usize } else { PAD_ID as usize })
            .collect();
        let active: Vec<bool> = (0..n).map(|i| i + 1 < n && ids[i + 1] != PAD_ID).collect();
        let hidden = forward_on_tape(&mut tape, &nodes, &params.config, &ids, DropoutMode::Off)?;
        if !active.iter().any(|&a| a) {
            continue; // BOS-only sentence: nothing to predict
        }
        let logits = tape.matmul(hidden, nodes.w_out)?;
        losses.push(tape.cross_entropy_rows(logits, targets, active)?);
    }
    if losses.is_empty() {
        return Err(Error::Degenerate("pretrain_step: all positions padded".into()));
    }
    let stacked = tape.concat_rows(&losses)?;
    let total = tape.sum(stacked);
    let loss = tape.scale(total, 1.0 / losses.len() as f64);
    let mut adjoints = tape.backprop(loss)?;
    let grads = collect_grads(&tape, &nodes, &mut adjoints);
    Ok((tape.scalar(loss), grads, seq_lens))
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update on a single tensor. Exposed for the optimizer algebra
/// tests; [`adam_update`] applies it across all parameters.
pub fn adam_step_tensor(
    param: &mut Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() {
        return Err(Error::Usage(format!(
            "adam: shape mismatch {:?} vs {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..param.data().len() {
        let g = grad.data()[i];
        let mi = hyper.beta1 * m.data()[i] + (1.0 - hyper.beta1) * g;
        let vi = hyper.beta2 * v.data()[i] + (1.0 - hyper.beta2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        param.data_mut()[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Standard Adam with bias correction; increments the step counter once.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &GradSet,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.0.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::Usage(format!(
            "adam_update: {} grads / {} state slots vs {} params",
            grads.0.len(),
            state.m.len(),
            tensors.len()
        )));
    }
    state.t += 1;
    for (i, (_, param)) in tensors.into_iter().enumerate() {
        adam_step_tensor(
            param,
            &grads.0[i],
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            hyper,
        )?;
    }
    Ok(())
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub mode: String,
    pub loss: f64,
    pub forward_passes_cum: u64,
    pub tokens_cum: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: u64,
}

/// Counts and losses for a whole run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epoch_stats: Vec<EpochStats>,
    pub forward_sequences: u64,
    pub forwarded_tokens: u64,
    /// Sum of squared sequence lengths (input to the MAC estimate).
    pub sum_seq_len_sq: u64,
    pub warnings: Vec<String>,
}

const SHUFFLE_TAG: u64 = 0x5AFF_1E00;

fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_TAG + epoch));
    order.shuffle(&mut rng);
    order
}

/// Contrastive training over `sentences` for `cfg.epochs` epochs.
///
/// Batches are drawn in a seeded shuffle per epoch; a final chunk of one
/// sentence is dropped (InfoNCE needs an in-batch negative). Every step is
/// reported to `log`.
pub fn train(
    params: &mut ModelParams,
    vocab: &Vocab,
    sentences: &[String],
    cfg: &TrainConfig,
    mut log: impl FnMut(&TrainLogEntry),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if sentences.len() < 2 {
        return Err(Error::Input("training needs at least 2 sentences".into()));
    }
    let hyper = AdamHyper {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut adam = AdamState::new(params);
    let mut summary = TrainSummary {
        epoch_stats: Vec::new(),
        forward_sequences: 0,
        forwarded_tokens: 0,
        sum_seq_len_sq: 0,
        warnings: Vec::new(),
    };
    let mut step_index = 0u64;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(sentences.len(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<String> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            let out = match cfg.mode {
                TrainMode::Sfp => sfp_step(params, &batch, vocab, cfg)?,
                _ => twopass_step(params, &batch, vocab, cfg, step_index)?,
            };
            adam_update(params, &out.grads, &mut adam, &hyper)?;

            summary.forward_sequences += out.batch.forward_pass_count;
            summary.forwarded_tokens += out.batch.forwarded_token_count;
            summary.sum_seq_len_sq += out.seq_lens.iter().map(|&n| n * n).sum::<u64>();
            if let Some(w) = out.warning {
                if !summary.warnings.contains(&w) {
                    summary.warnings.push(w);
                }
            }
            epoch_loss += out.loss;
            epoch_steps += 1;
            step_index += 1;
            log(&TrainLogEntry {
                step: step_index,
                mode: cfg.mode.name().to_string(),
                loss: out.loss,
                forward_passes_cum: summary.forward_sequences,
                tokens_cum: summary.forwarded_tokens,
                seed: cfg.seed,
            });
        }
        if epoch_steps == 0 {
            return Err(Error::Input(
                "epoch produced no trainable batches (corpus too small?)".into(),
            ));
        }
        summary.epoch_stats.push(EpochStats {
            mean_loss: epoch_loss / epoch_steps as f64,
            steps: epoch_steps,
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Autoregressive pretraining loop over bare sentences.
pub fn pretrain(
    params: &mut ModelParams,
    vocab: &Vocab,
    sentences: &[String],
    cfg: &PretrainConfig,
    mut log: impl FnMut(&TrainLogEntry),
) -> Result<TrainSummary> {
    if sentences.is_empty() {
        return Err(Error::Input("pretraining needs a non-empty corpus".into()));
    }
    let hyper = AdamHyper {
        lr: cfg.lr,
        ..AdamHyper::default()
    };
    let mut adam = AdamState::new(params);
    let mut summary = TrainSummary {
        epoch_stats: Vec::new(),
        forward_sequences: 0,
        forwarded_tokens: 0,
        sum_seq_len_sq: 0,
        warnings: Vec::new(),
    };
    let mut step_index = 0u64;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(sentences.len(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<String> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            let (loss, grads, seq_lens) = pretrain_step(params, &batch, vocab)?;
            adam_update(params, &grads, &mut adam, &hyper)?;

            summary.forward_sequences += seq_lens.len() as u64;
            summary.forwarded_tokens += seq_lens.iter().sum::<u64>();
            summary.sum_seq_len_sq += seq_lens.iter().map(|&n| n * n).sum::<u64>();
            epoch_loss += loss;
            epoch_steps += 1;
            step_index += 1;
            log(&TrainLogEntry {
                step: step_index,
                mode: "pretrain".to_string(),
                loss,
                forward_passes_cum: summary.forward_sequences,
                tokens_cum: summary.forwarded_tokens,
                seed: cfg.seed,
            });
        }
        summary.epoch_stats.push(EpochStats {
            mean_loss: epoch_loss / epoch_steps as f64,
            steps: epoch_steps,
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extract, forward, ModelConfig};
    use crate::tokenizer::build_vocab;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let a = Matrix::from_rows(&[vec![0.3, 0.4]]).unwrap();
        let loss = infonce(&a, &a, 0.05).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn infonce_identical_batch_is_ln2() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let loss = infonce(&a, &a, 0.05).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_hand_case() {
        // Orthogonal pairs at tau = 1: loss = ln(1 + e^{-1}).
        let anchors = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let loss = infonce(&anchors, &anchors, 1.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(infonce(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(infonce(&a, &a, -1.0), Err(Error::Config(_))));
        let zero = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(infonce(&a, &zero, 1.0), Err(Error::Degenerate(_))));
        let wide = Matrix::zeros(2, 3);
        assert!(matches!(infonce(&a, &wide, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn infonce_cosine_scale_invariance() {
        let a = Matrix::from_rows(&[unit(vec![0.2, -0.5, 1.0]), unit(vec![1.0, 0.1, 0.0])]).unwrap();
        let p = Matrix::from_rows(&[unit(vec![0.3, -0.4, 0.9]), unit(vec![0.8, 0.3, 0.1])]).unwrap();
        let base = infonce(&a, &p, 0.05).unwrap();
        let scaled = infonce(&a.scale(7.5), &p.scale(0.03), 0.05).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    fn toy_setup() -> (ModelParams, Vocab, Vec<String>) {
        let corpus = "the cat sat on the mat\nthe dog ran far away\nbirds sing in the tree\nfish swim in the sea";
        let vocab = build_vocab(corpus, 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d: 16,
            d_k: 4,
            heads: 4,
            layers: 2,
            max_seq_len: 48,
            dropout_rate: 0.1,
        };
        let params = ModelParams::init(&cfg, 9).unwrap();
        let sentences: Vec<String> = corpus.lines().map(String::from).collect();
        (params, vocab, sentences)
    }

    #[test]
    fn sfp_step_counts_and_composition() {
        let (params, vocab, sentences) = toy_setup();
        let cfg = TrainConfig::default();
        let out = sfp_step(&params, &sentences, &vocab, &cfg).unwrap();
        assert_eq!(out.batch.forward_pass_count, sentences.len() as u64);

        // Anchors must equal an independently computed forward + extract.
        let prompt =
            render_two_stage(&vocab, cfg.prefix_kind, &cfg.suffix_text, &sentences[0]).unwrap();
        let hidden = forward(&params, &prompt.ids, DropoutMode::Off).unwrap();
        let anchor = extract(&hidden, &[prompt.rep2_pos]).unwrap();
        assert_eq!(out.batch.anchors.row(0), anchor.row(0));
        let positive = extract(&hidden, &[prompt.rep1_pos]).unwrap();
        assert_eq!(out.batch.positives.row(0), positive.row(0));

        // Reported loss equals the standalone InfoNCE of the returned batch.
        let recomputed = infonce(&out.batch.anchors, &out.batch.positives, cfg.tau).unwrap();
        assert!((out.loss - recomputed).abs() < 1e-9);
    }

    #[test]
    fn sfp_step_rejects_wrong_mode() {
        let (params, vocab, sentences) = toy_setup();
        let cfg = TrainConfig {
            mode: TrainMode::TwoPassDual,
            ..TrainConfig::default()
        };
        assert!(matches!(
            sfp_step(&params, &sentences, &vocab, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn twopass_counts_and_dropout_off_degeneracy() {
        let (mut params, vocab, sentences) = toy_setup();
        params.config.dropout_rate = 0.0;
        let cfg = TrainConfig {
            mode: TrainMode::TwoPassDropout,
            ..TrainConfig::default()
        };
        let out = twopass_step(&params, &sentences, &vocab, &cfg, 0).unwrap();
        assert_eq!(out.batch.forward_pass_count, 2 * sentences.len() as u64);
        assert!(out.warning.is_some());
        assert!(out.batch.positives.bit_eq(&out.batch.anchors));
    }

    #[test]
    fn twopass_dropout_produces_distinct_positives() {
        let (params, vocab, sentences) = toy_setup();
        let cfg = TrainConfig {
            mode: TrainMode::TwoPassDropout,
            ..TrainConfig::default()
        };
        let out = twopass_step(&params, &sentences, &vocab, &cfg, 0).unwrap();
        assert!(out.warning.is_none());
        assert!(!out.batch.positives.bit_eq(&out.batch.anchors));
    }

    #[test]
    fn twopass_dual_uses_both_templates() {
        let (params, vocab, sentences) = toy_setup();
        let cfg = TrainConfig {
            mode: TrainMode::TwoPassDual,
            ..TrainConfig::default()
        };
        let out = twopass_step(&params, &sentences, &vocab, &cfg, 0).unwrap();

        let ra = render_single(&vocab, TemplateKind::Eol, &sentences[0]);
        let ha = forward(&params, &ra.ids, DropoutMode::Off).unwrap();
        assert_eq!(
            out.batch.anchors.row(0),
            extract(&ha, &[ra.rep_pos]).unwrap().row(0)
        );
        let rb = render_single(&vocab, TemplateKind::Sum, &sentences[0]);
        let hb = forward(&params, &rb.ids, DropoutMode::Off).unwrap();
        assert_eq!(
            out.batch.positives.row(0),
            extract(&hb, &[rb.rep_pos]).unwrap().row(0)
        );
    }

    #[test]
    fn pretrain_initial_loss_near_uniform() {
        // 50-token vocab; random init should be close to ln(50).
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let corpus: Vec<String> = (0..10)
            .map(|i| {
                (0..6)
                    .map(|j| words[(7 * i + 11 * j) % 50].clone())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let vocab = build_vocab(&corpus.join("\n"), 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d: 16,
            d_k: 4,
            heads: 4,
            layers: 2,
            max_seq_len: 16,
            dropout_rate: 0.0,
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let (loss, _, _) = pretrain_step(&params, &corpus, &vocab).unwrap();
        let uniform = (vocab.len() as f64).ln();
        assert!(
            (loss - uniform).abs() < 0.5,
            "loss {loss} vs ln|V| {uniform}"
        );
    }

    #[test]
    fn pretrain_memorizes_tiny_corpus() {
        let corpus = [
            "the cat sat".to_string(),
            "the dog ran".to_string(),
            "a bird sang".to_string(),
            "the fish swam".to_string(),
            "a fox hid".to_string(),
        ];
        let vocab = build_vocab(&corpus.join("\n"), 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d: 16,
            d_k: 4,
            heads: 4,
            layers: 2,
            max_seq_len: 8,
            dropout_rate: 0.0,
        };
        let mut params = ModelParams::init(&cfg, 5).unwrap();
        let (initial, _, _) = pretrain_step(&params, &corpus, &vocab).unwrap();
        let hyper = AdamHyper::default();
        let mut adam = AdamState::new(&params);
        let mut last = initial;
        for _ in 0..200 {
            let (loss, grads, _) = pretrain_step(&params, &corpus, &vocab).unwrap();
            adam_update(&mut params, &grads, &mut adam, &hyper).unwrap();
            last = loss;
        }
        assert!(last < initial, "loss {last} did not drop below {initial}");
        assert!(last < 0.5 * initial, "memorization too weak: {last} vs {initial}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (mut params, _, _) = toy_setup();
        let before = params.tok_emb.clone();
        let grads = GradSet(
            params
                .tensors()
                .iter()
                .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        );
        let mut state = AdamState::new(&params);
        adam_update(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert!(params.tok_emb.bit_eq(&before));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let hyper = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let mut p = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut m = Matrix::zeros(1, 1);
        let mut v = Matrix::zeros(1, 1);
        adam_step_tensor(&mut p, &g, &mut m, &mut v, 1, &hyper).unwrap();
        let delta = p.get(0, 0) - 2.0;
        assert!((delta + 0.1).abs() < 1e-6, "delta {delta}");

        let mut p2 = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let g2 = Matrix::from_vec(1, 1, vec![-1.0]).unwrap();
        let mut m2 = Matrix::zeros(1, 1);
        let mut v2 = Matrix::zeros(1, 1);
        adam_step_tensor(&mut p2, &g2, &mut m2, &mut v2, 1, &hyper).unwrap();
        let delta2 = p2.get(0, 0) - 2.0;
        assert!((delta2 - 0.1).abs() < 1e-6, "delta {delta2}");
    }

    #[test]
    fn train_logs_and_counts_sequences() {
        let (mut params, vocab, mut sentences) = toy_setup();
        sentences.push("the cat ran far".to_string());
        sentences.push("fish sing in the mat".to_string());
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut entries = Vec::new();
        let summary = train(&mut params, &vocab, &sentences, &cfg, |e| {
            entries.push(e.clone());
        })
        .unwrap();
        assert_eq!(summary.forward_sequences, 2 * sentences.len() as u64);
        assert_eq!(summary.epoch_stats.len(), 2);
        assert_eq!(
            entries.last().unwrap().forward_passes_cum,
            summary.forward_sequences
        );
        assert_eq!(entries.last().unwrap().mode, "sfp");
    }

    #[test]
    fn train_drops_single_sentence_remainder() {
        let (mut params, vocab, sentences) = toy_setup();
        // 4 sentences with batch 3: remainder of 1 is dropped.
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 1,
            ..TrainConfig::default()
        };
        let summary = train(&mut params, &vocab, &sentences, &cfg, |_| {}).unwrap();
        assert_eq!(summary.forward_sequences, 3);
    }
}
