//! Toy causal language model standing in for the full-scale semantic
//! decoder: byte-level vocab, sinusoidal positions, pre-norm transformer
//! blocks, greedy generation. Multimodal prefix positions enter as raw
//! embeddings and contribute keys/values only; loss is masked to response
//! positions.

pub mod layout;
pub mod vocab;

pub use layout::{PositionKind, SequenceLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, TensorId};
use crate::params::{mix64, normal_init, ParamSet, TapeBinding};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub context_limit: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { embed_dim: 64, layers: 2, context_limit: 8192, seed: 4 }
    }
}

/// One contiguous span of the input sequence: either pre-computed embeddings
/// already on the tape (the multimodal prefix) or token ids to embed.
pub enum SeqPart {
    Embeds(TensorId),
    Tokens(Vec<usize>),
}

pub struct Decoder {
    pub config: DecoderConfig,
    params: ParamSet,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.layers == 0 {
            return Err(Error::config("decoder needs embed_dim >= 1 and layers >= 1".to_string()));
        }
        let e = config.embed_dim;
        let h = 2 * e;
        let std = 1.0 / (e as f64).sqrt();
        let sub = |label: &str| mix64(config.seed ^ fnv(label));
        let mut params = ParamSet::new();
        params.insert(
            "decoder.embedding",
            vec![vocab::VOCAB_SIZE, e],
            normal_init(sub("embedding"), 0.02, vocab::VOCAB_SIZE * e),
            true,
        );
        for layer in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("decoder.{layer}.attn.{w}");
                params.insert(name.clone(), vec![e, e], normal_init(sub(&name), std, e * e), true);
            }
            for (suffix, shape) in [
                ("mlp.w1", vec![e, h]),
                ("mlp.b1", vec![h]),
                ("mlp.w2", vec![h, e]),
                ("mlp.b2", vec![e]),
            ] {
                let name = format!("decoder.{layer}.{suffix}");
                let n: usize = shape.iter().product();
                let init = if suffix.contains('b') { vec![0.0; n] } else { normal_init(sub(&name), std, n) };
                params.insert(name, shape, init, true);
            }
            for ln in 0..2 {
                params.insert(format!("decoder.{layer}.ln{ln}.gamma"), vec![e], vec![1.0; e], true);
                params.insert(format!("decoder.{layer}.ln{ln}.beta"), vec![e], vec![0.0; e], true);
            }
        }
        params.insert("decoder.lnf.gamma", vec![e], vec![1.0; e], true);
        params.insert("decoder.lnf.beta", vec![e], vec![0.0; e], true);
        params.insert(
            "decoder.head.w",
            vec![e, vocab::VOCAB_SIZE],
            normal_init(sub("head.w"), std, e * vocab::VOCAB_SIZE),
            true,
        );
        params.insert("decoder.head.b", vec![vocab::VOCAB_SIZE], vec![0.0; vocab::VOCAB_SIZE], true);
        Ok(Decoder { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn trainable_parameters(&self) -> std::collections::BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Causal forward over assembled parts. Returns [L, VOCAB_SIZE] logits.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        parts: &[SeqPart],
    ) -> Result<TensorId> {
        let e = self.config.embed_dim;
        let embedding = binding.id("decoder.embedding")?;
        let mut spans = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for part in parts {
            let id = match part {
                SeqPart::Embeds(id) => {
                    let (_, cols) = tape.value(*id).dims2()?;
                    if cols != e {
                        return Err(Error::shape(format!(
                            "prefix embeddings have dim {cols}, decoder expects {e}"
                        )));
                    }
                    *id
                }
                SeqPart::Tokens(ids) => tape.gather_rows(embedding, ids)?,
            };
            total += tape.shape(id)[0];
            spans.push(id);
        }
        if total > self.config.context_limit {
            return Err(Error::input(format!(
                "sequence length {total} exceeds context limit {}",
                self.config.context_limit
            )));
        }
        let mut x = tape.concat_rows(&spans)?;
        x = tape.add_const(x, &sinusoidal(total, e))?;

        for layer in 0..self.config.layers {
            let g0 = binding.id(&format!("decoder.{layer}.ln0.gamma"))?;
            let b0 = binding.id(&format!("decoder.{layer}.ln0.beta"))?;
            let normed = tape.layer_norm(x, g0, b0, 1e-5)?;
            let wq = binding.id(&format!("decoder.{layer}.attn.wq"))?;
            let wk = binding.id(&format!("decoder.{layer}.attn.wk"))?;
            let wv = binding.id(&format!("decoder.{layer}.attn.wv"))?;
            let wo = binding.id(&format!("decoder.{layer}.attn.wo"))?;
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            let attn = tape.scaled_dot_attention(q, k, v, true)?;
            let attn = tape.matmul(attn, wo)?;
            x = tape.add(x, attn)?;

            let g1 = binding.id(&format!("decoder.{layer}.ln1.gamma"))?;
            let b1n = binding.id(&format!("decoder.{layer}.ln1.beta"))?;
            let normed = tape.layer_norm(x, g1, b1n, 1e-5)?;
            let w1 = binding.id(&format!("decoder.{layer}.mlp.w1"))?;
            let b1 = binding.id(&format!("decoder.{layer}.mlp.b1"))?;
            let w2 = binding.id(&format!("decoder.{layer}.mlp.w2"))?;
            let b2 = binding.id(&format!("decoder.{layer}.mlp.b2"))?;
            let hidden = tape.matmul(normed, w1)?;
            let hidden = tape.add_bias(hidden, b1)?;
            let hidden = tape.gelu(hidden)?;
            let out = tape.matmul(hidden, w2)?;
            let out = tape.add_bias(out, b2)?;
            x = tape.add(x, out)?;
        }

        let gf = binding.id("decoder.lnf.gamma")?;
        let bf = binding.id("decoder.lnf.beta")?;
        let x = tape.layer_norm(x, gf, bf, 1e-5)?;
        let head_w = binding.id("decoder.head.w")?;
        let head_b = binding.id("decoder.head.b")?;
        let logits = tape.matmul(x, head_w)?;
        tape.add_bias(logits, head_b)
    }

    fn layout_parts(&self, tape: &mut Tape, layout: &SequenceLayout) -> Result<Vec<SeqPart>> {
        let e = self.config.embed_dim;
        let mut parts = Vec::new();
        for slot in &layout.visual {
            let id = tape.constant(slot.tokens.clone(), vec![slot.count, e])?;
            parts.push(SeqPart::Embeds(id));
        }
        parts.push(SeqPart::Tokens(vec![vocab::SEP]));
        if layout.semantic_count > 0 {
            let id = tape.constant(layout.semantic.clone(), vec![layout.semantic_count, e])?;
            parts.push(SeqPart::Embeds(id));
        }
        parts.push(SeqPart::Tokens(layout.text_ids()));
        Ok(parts)
    }

    /// Value-level forward: [L, VOCAB_SIZE] logits for a layout.
    pub fn forward(&self, layout: &SequenceLayout) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
        let parts = self.layout_parts(&mut tape, layout)?;
        let logits = self.forward_on_tape(&mut tape, &binding, &parts)?;
        Ok(tape.data(logits).to_vec())
    }

    /// Mean cross-entropy over response positions.
    pub fn loss(&self, layout: &SequenceLayout) -> Result<f64> {
        if layout.response.is_none() {
            return Err(Error::input("loss requires a response segment".to_string()));
        }
        let mut tape = Tape::new();
        let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
        let parts = self.layout_parts(&mut tape, layout)?;
        let logits = self.forward_on_tape(&mut tape, &binding, &parts)?;
        let loss = tape.masked_cross_entropy(logits, &layout.row_targets())?;
        Ok(tape.data(loss)[0])
    }

    /// Greedy decode at the token level: argmax per step with ties broken
    /// toward the lowest token id, stopping at EOS or `max_len` tokens. The
    /// returned ids exclude the terminating EOS.
    pub fn generate_ids(&self, layout: &SequenceLayout, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::input("max_len must be >= 1".to_string()));
        }
        if layout.response.is_some() {
            return Err(Error::input("generation layout must not carry a response".to_string()));
        }
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
            let mut parts = self.layout_parts(&mut tape, layout)?;
            if !generated.is_empty() {
                parts.push(SeqPart::Tokens(generated.clone()));
            }
            let logits = self.forward_on_tape(&mut tape, &binding, &parts)?;
            let data = tape.data(logits);
            let row = &data[data.len() - vocab::VOCAB_SIZE..];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == vocab::EOS {
                break;
            }
            generated.push(best);
        }
        Ok(generated)
    }

    /// Greedy decode to text (lossy where generated bytes are invalid UTF-8).
    pub fn generate(&self, layout: &SequenceLayout, max_len: usize) -> Result<String> {
        Ok(vocab::decode_text(&self.generate_ids(layout, max_len)?))
    }
}

/// Fixed sinusoidal position encodings, [len, dim] row-major.
fn sinusoidal(len: usize, dim: usize) -> Vec<f64> {
    let mut enc = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            enc[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    enc
}

fn fnv(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
