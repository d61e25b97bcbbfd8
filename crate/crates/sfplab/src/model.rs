//! Miniature decoder-only transformer with a language-model head.
//!
//! Pre-norm residual blocks, multi-head causal self-attention, GELU MLP,
//! learned absolute positional embeddings, RMS normalization. The forward
//! pass is recorded on a [`Tape`] so training can backpropagate through the
//! exact computation that produced the hidden states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    causal_mask, derive_seed, dropout_mask, seeded_init, InitScheme, Matrix, NodeId, Tape,
};
use crate::tokenizer::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden width.
    pub d: usize,
    /// Per-head width; d == heads * d_k.
    pub d_k: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d: 64,
            d_k: 16,
            heads: 4,
            layers: 2,
            max_seq_len: 64,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d != self.heads * self.d_k {
            return Err(Error::Config(format!(
                "d ({}) must equal heads ({}) * d_k ({})",
                self.d, self.heads, self.d_k
            )));
        }
        if self.vocab_size == 0 || self.d == 0 || self.layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub gain_attn: Matrix,
    pub gain_mlp: Matrix,
}

/// All learnable weights.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub gain_final: Matrix,
    pub w_out: Matrix,
}

impl ModelParams {
    /// Deterministic initialization: weights Xavier-uniform from per-tensor
    /// seeds derived from `seed`, normalization gains at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ordinal = 0u64;
        let mut xavier = |rows: usize, cols: usize| {
            let m = seeded_init(rows, cols, derive_seed(seed, ordinal), InitScheme::XavierUniform);
            ordinal += 1;
            m
        };
        let ones = |cols: usize| Matrix::from_vec(1, cols, vec![1.0; cols]).expect("shape");

        let d = config.d;
        let tok_emb = xavier(config.vocab_size, d);
        let pos_emb = xavier(config.max_seq_len, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: xavier(d, d),
                w_k: xavier(d, d),
                w_v: xavier(d, d),
                w_o: xavier(d, d),
                w_up: xavier(d, 4 * d),
                w_down: xavier(4 * d, d),
                gain_attn: ones(d),
                gain_mlp: ones(d),
            })
            .collect();
        let gain_final = ones(d);
        let w_out = xavier(d, config.vocab_size);
        Ok(ModelParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            gain_final,
            w_out,
        })
    }

    /// Canonical (name, tensor) listing; checkpoint order, Adam slot order
    /// and gradient order all follow it.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_q"), &layer.w_q));
            out.push((format!("layers.{i}.w_k"), &layer.w_k));
            out.push((format!("layers.{i}.w_v"), &layer.w_v));
            out.push((format!("layers.{i}.w_o"), &layer.w_o));
            out.push((format!("layers.{i}.w_up"), &layer.w_up));
            out.push((format!("layers.{i}.w_down"), &layer.w_down));
            out.push((format!("layers.{i}.gain_attn"), &layer.gain_attn));
            out.push((format!("layers.{i}.gain_mlp"), &layer.gain_mlp));
        }
        out.push(("gain_final".into(), &self.gain_final));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.w_q"), &mut layer.w_q));
            out.push((format!("layers.{i}.w_k"), &mut layer.w_k));
            out.push((format!("layers.{i}.w_v"), &mut layer.w_v));
            out.push((format!("layers.{i}.w_o"), &mut layer.w_o));
            out.push((format!("layers.{i}.w_up"), &mut layer.w_up));
            out.push((format!("layers.{i}.w_down"), &mut layer.w_down));
            out.push((format!("layers.{i}.gain_attn"), &mut layer.gain_attn));
            out.push((format!("layers.{i}.gain_mlp"), &mut layer.gain_mlp));
        }
        out.push(("gain_final".into(), &mut self.gain_final));
        out.push(("w_out".into(), &mut self.w_out));
        out
    }

    /// Rebuild parameters from named tensors (checkpoint load path).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::init(&config, 0)?;
        let mut expected: std::collections::HashMap<String, &mut Matrix> =
            params.tensors_mut().into_iter().collect();
        let mut seen = std::collections::HashSet::new();
        for (name, tensor) in tensors {
            let slot = expected
                .get_mut(&name)
                .ok_or_else(|| Error::Input(format!("unexpected tensor {name:?}")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name:?}: {}x{} in file vs {}x{} expected",
                    tensor.rows(),
                    tensor.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            **slot = tensor;
            seen.insert(name);
        }
        if seen.len() != expected.len() {
            let missing: Vec<&String> =
                expected.keys().filter(|k| !seen.contains(*k)).collect();
            return Err(Error::Input(format!("missing tensors: {missing:?}")));
        }
        Ok(params)
    }
}

/// Final-layer hidden states for one sequence.
#[derive(Debug, Clone)]
pub struct HiddenStates(Matrix);

impl HiddenStates {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Seeded(u64),
}

/// Tape node handles for every parameter, in [`ModelParams::tensors`] order.
pub struct ParamNodes {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerNodes>,
    pub gain_final: NodeId,
    pub w_out: NodeId,
}

pub struct LayerNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub w_up: NodeId,
    pub w_down: NodeId,
    pub gain_attn: NodeId,
    pub gain_mlp: NodeId,
}

impl ParamNodes {
    /// Register every parameter as a tape leaf.
    pub fn register(tape: &mut Tape, params: &ModelParams) -> ParamNodes {
        ParamNodes {
            tok_emb: tape.leaf(params.tok_emb.clone()),
            pos_emb: tape.leaf(params.pos_emb.clone()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerNodes {
                    w_q: tape.leaf(l.w_q.clone()),
                    w_k: tape.leaf(l.w_k.clone()),
                    w_v: tape.leaf(l.w_v.clone()),
                    w_o: tape.leaf(l.w_o.clone()),
                    w_up: tape.leaf(l.w_up.clone()),
                    w_down: tape.leaf(l.w_down.clone()),
                    gain_attn: tape.leaf(l.gain_attn.clone()),
                    gain_mlp: tape.leaf(l.gain_mlp.clone()),
                })
                .collect(),
            gain_final: tape.leaf(params.gain_final.clone()),
            w_out: tape.leaf(params.w_out.clone()),
        }
    }

    /// NodeIds in the canonical tensor order.
    pub fn node_list(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.w_q, l.w_k, l.w_v, l.w_o, l.w_up, l.w_down, l.gain_attn, l.gain_mlp,
            ]);
        }
        out.push(self.gain_final);
        out.push(self.w_out);
        out
    }
}

fn check_ids(config: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Input("forward: empty token sequence".into()));
    }
    if ids.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            ids.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Run the transformer on `ids`, recording every op on `tape`. Returns the
/// node holding the final-layer hidden states (rows = sequence positions).
///
/// Causal masking guarantees hidden row i depends only on ids[0..=i]; with
/// dropout off the restriction of a longer prompt to a shared prefix is
/// bit-identical to running the prefix alone.
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    config: &ModelConfig,
    ids: &[u32],
    dropout: DropoutMode,
) -> Result<NodeId> {
    check_ids(config, ids)?;
    let n = ids.len();
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();

    let tok = tape.gather_rows(nodes.tok_emb, idx)?;
    let pos = tape.gather_rows(nodes.pos_emb, (0..n).collect())?;
    let mut x = tape.add(tok, pos)?;

    let mask = causal_mask(n);
    let scale = 1.0 / (config.d_k as f64).sqrt();

    for (li, layer) in nodes.layers.iter().enumerate() {
        let normed = tape.rms_norm(x, layer.gain_attn)?;
        let q = tape.matmul(normed, layer.w_q)?;
        let k = tape.matmul(normed, layer.w_k)?;
        let v = tape.matmul(normed, layer.w_v)?;

        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let start = h * config.d_k;
            let qh = tape.slice_cols(q, start, config.d_k)?;
            let kh = tape.slice_cols(k, start, config.d_k)?;
            let vh = tape.slice_cols(v, start, config.d_k)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scaled, mask.clone())?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let concat = tape.concat_cols(&heads)?;
        let mut attn = tape.matmul(concat, layer.w_o)?;
        if let DropoutMode::Seeded(seed) = dropout {
            if config.dropout_rate > 0.0 {
                let m = dropout_mask(
                    n,
                    config.d,
                    config.dropout_rate,
                    derive_seed(seed, (2 * li) as u64),
                );
                attn = tape.dropout(attn, m)?;
            }
        }
        x = tape.add(x, attn)?;

        let normed2 = tape.rms_norm(x, layer.gain_mlp)?;
        let up = tape.matmul(normed2, layer.w_up)?;
        let act = tape.gelu(up);
        let mut down = tape.matmul(act, layer.w_down)?;
        if let DropoutMode::Seeded(seed) = dropout {
            if config.dropout_rate > 0.0 {
                let m = dropout_mask(
                    n,
                    config.d,
                    config.dropout_rate,
                    derive_seed(seed, (2 * li + 1) as u64),
                );
                down = tape.dropout(down, m)?;
            }
        }
        x = tape.add(x, down)?;
    }
    tape.rms_norm(x, nodes.gain_final)
}

/// Pure inference forward pass.
pub fn forward(params: &ModelParams, ids: &[u32], dropout: DropoutMode) -> Result<HiddenStates> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let out = forward_on_tape(&mut tape, &nodes, &params.config, ids, dropout)?;
    Ok(HiddenStates(tape.value(out).clone()))
}

/// Indexed rows of the hidden states, in order, unmodified.
pub fn extract(hidden: &HiddenStates, positions: &[usize]) -> Result<Matrix> {
    let m = hidden.matrix();
    let mut out = Matrix::zeros(positions.len(), m.cols());
    for (i, &p) in positions.iter().enumerate() {
        if p >= m.rows() {
            return Err(Error::Input(format!(
                "extract: position {p} out of range for {} rows",
                m.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(m.row(p));
    }
    Ok(out)
}

/// Next-token logits: hidden states times the output projection.
pub fn lm_logits(hidden: &HiddenStates, w_out: &Matrix) -> Result<Matrix> {
    hidden.matrix().matmul(w_out)
}

/// Mean cross-entropy (natural log) over positions whose target is not PAD.
pub fn lm_loss(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "lm_loss: {} targets vs {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &target) in targets.iter().enumerate() {
        if target == PAD_ID {
            continue;
        }
        let t = target as usize;
        if t >= logits.cols() {
            return Err(Error::Input(format!(
                "lm_loss: target {t} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += logsum - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("lm_loss: all positions padded".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::UNK_ID;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d: 8,
            d_k: 4,
            heads: 2,
            layers: 2,
            max_seq_len: 16,
            dropout_rate: 0.1,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_forward() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let h = forward(&params, &[3], DropoutMode::Off).unwrap();
        assert_eq!(h.matrix().shape(), (1, cfg.d));
    }

    #[test]
    fn shared_prefix_rows_bit_identical() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 7).unwrap();
        let a = forward(&params, &[2, 5, 7, 9], DropoutMode::Off).unwrap();
        let b = forward(&params, &[2, 5, 7, 3, 1, 8], DropoutMode::Off).unwrap();
        for i in 0..3 {
            for j in 0..cfg.d {
                assert_eq!(
                    a.matrix().get(i, j).to_bits(),
                    b.matrix().get(i, j).to_bits(),
                    "row {i} col {j}"
                );
            }
        }
        // The first differing position diverges.
        assert_ne!(a.matrix().row(3), b.matrix().row(3));
    }

    #[test]
    fn suffix_permutation_leaves_prefix_rows_unchanged() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let a = forward(&params, &[2, 5, 7, 9, 4, 6], DropoutMode::Off).unwrap();
        let b = forward(&params, &[2, 5, 7, 6, 9, 4], DropoutMode::Off).unwrap();
        for i in 0..3 {
            assert_eq!(a.matrix().row(i), b.matrix().row(i));
        }
    }

    #[test]
    fn seeded_dropout_is_deterministic() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let ids = [2, 4, 6, 8];
        let a = forward(&params, &ids, DropoutMode::Seeded(99)).unwrap();
        let b = forward(&params, &ids, DropoutMode::Seeded(99)).unwrap();
        assert!(a.matrix().bit_eq(b.matrix()));
        let c = forward(&params, &ids, DropoutMode::Seeded(100)).unwrap();
        assert!(!a.matrix().bit_eq(c.matrix()));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ids = vec![3u32; cfg.max_seq_len + 1];
        assert!(matches!(
            forward(&params, &ids, DropoutMode::Off),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn extract_rows() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let h = forward(&params, &[2, 5, 7], DropoutMode::Off).unwrap();
        let one = extract(&h, &[0]).unwrap();
        assert_eq!(one.row(0), h.matrix().row(0));
        let two = extract(&h, &[1, 2]).unwrap();
        assert_eq!(two.row(0), h.matrix().row(1));
        assert_eq!(two.row(1), h.matrix().row(2));
        // extract(h, [i]) == extract(h, [i, j])[0]
        assert_eq!(one.row(0), extract(&h, &[0, 2]).unwrap().row(0));
        assert!(matches!(extract(&h, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_w_out_gives_uniform_distribution() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let h = forward(&params, &[2, 5], DropoutMode::Off).unwrap();
        let logits = lm_logits(&h, &Matrix::zeros(cfg.d, cfg.vocab_size)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let loss = lm_loss(&logits, &[5, 3]).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_logits_hand_case() {
        let h = HiddenStates(Matrix::from_rows(&[vec![2.0]]).unwrap());
        let w_out = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let logits = lm_logits(&h, &w_out).unwrap();
        assert_eq!(logits.data(), &[2.0, -2.0]);
    }

    #[test]
    fn lm_loss_hand_case() {
        let logits = Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let loss = lm_loss(&logits, &[1]).unwrap();
        assert!((loss - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_uniform_case() {
        let logits = Matrix::zeros(4, 10);
        let loss = lm_loss(&logits, &[1, 2, 3, 4]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_saturates_to_zero() {
        let mut logits = Matrix::zeros(1, 10);
        logits.set(0, 4, 50.0);
        let loss = lm_loss(&logits, &[4]).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn lm_loss_all_pad_is_degenerate() {
        let logits = Matrix::zeros(2, 4);
        assert!(matches!(
            lm_loss(&logits, &[PAD_ID, PAD_ID]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn unk_tokens_are_valid_inputs() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        assert!(forward(&params, &[2, UNK_ID, 5], DropoutMode::Off).is_ok());
    }

    #[test]
    fn from_tensors_roundtrip_and_validation() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let tensors: Vec<(String, Matrix)> = params
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        let rebuilt = ModelParams::from_tensors(cfg.clone(), tensors.clone()).unwrap();
        assert!(rebuilt.tok_emb.bit_eq(&params.tok_emb));
        assert!(rebuilt.w_out.bit_eq(&params.w_out));

        let mut missing = tensors.clone();
        missing.pop();
        assert!(ModelParams::from_tensors(cfg.clone(), missing).is_err());

        let mut extra = tensors;
        extra.push(("bogus".into(), Matrix::zeros(1, 1)));
        assert!(ModelParams::from_tensors(cfg, extra).is_err());
    }
}
