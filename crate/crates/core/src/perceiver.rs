//! Semantic Perceiver: a two-layer transformer that fuses enhanced mask
//! tokens, learnable semantic query tokens, and the updated image embedding
//! into the visual and semantic token streams the language decoder consumes.
//!
//! Runs on the tape so the whole stack stays differentiable end to end; the
//! frozen backbone's outputs enter as constants.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::backbone::FusedState;
use crate::error::{Error, Result};
use crate::numcore::{Tape, TensorId};
use crate::params::{mix64, normal_init, ParamSet, TapeBinding};

/// Which stored image embedding the perceiver reads: the post-fusion one
/// (default) or the raw pre-fusion one kept for the ablation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    #[default]
    PostFfm,
    PreFfm,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerceiverConfig {
    /// Number of learnable semantic tokens N_s.
    pub semantic_tokens: usize,
    /// Token/channel dim shared with the backbone.
    pub dim: usize,
    pub seed: u64,
    /// Whether the semantic token bank receives gradients.
    pub bank_trainable: bool,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig { semantic_tokens: 16, dim: 256, seed: 1, bank_trainable: true }
    }
}

/// The learnable semantic query tokens, one shared bank replicated per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokenBank {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Seeded normal(0, 0.02) query-token bank.
pub fn init_bank(count: usize, dim: usize, seed: u64) -> Result<SemanticTokenBank> {
    if count == 0 {
        return Err(Error::config("semantic token count must be >= 1".to_string()));
    }
    Ok(SemanticTokenBank {
        count,
        dim,
        values: normal_init(seed, 0.02, count * dim),
        trainable: true,
    })
}

/// Frame-major token streams for an N-frame video (N = 1 for an image).
#[derive(Debug, Clone, PartialEq)]
pub struct PerceiverOutput {
    pub dim: usize,
    pub frame_count: usize,
    /// G^2: visual tokens contributed per frame.
    pub visual_per_frame: usize,
    /// N_s: semantic tokens contributed per frame.
    pub semantic_per_frame: usize,
    pub visual_tokens: Vec<f64>,
    pub semantic_tokens: Vec<f64>,
}

impl PerceiverOutput {
    pub fn total_visual(&self) -> usize {
        self.visual_per_frame * self.frame_count
    }

    pub fn total_semantic(&self) -> usize {
        self.semantic_per_frame * self.frame_count
    }

    pub fn append(&mut self, other: &PerceiverOutput) {
        assert_eq!(self.dim, other.dim);
        assert_eq!(self.visual_per_frame, other.visual_per_frame);
        assert_eq!(self.semantic_per_frame, other.semantic_per_frame);
        self.visual_tokens.extend_from_slice(&other.visual_tokens);
        self.semantic_tokens.extend_from_slice(&other.semantic_tokens);
        self.frame_count += other.frame_count;
    }
}

pub struct Perceiver {
    pub config: PerceiverConfig,
    params: ParamSet,
}

impl Perceiver {
    pub fn new(config: PerceiverConfig) -> Result<Self> {
        if config.semantic_tokens == 0 {
            return Err(Error::config("semantic token count must be >= 1".to_string()));
        }
        if config.dim == 0 {
            return Err(Error::config("perceiver dim must be >= 1".to_string()));
        }
        let d = config.dim;
        let h = 2 * d;
        let std = 1.0 / (d as f64).sqrt();
        let sub = |label: &str| mix64(config.seed ^ fnv(label));
        let mut params = ParamSet::new();

        let bank = init_bank(config.semantic_tokens, d, sub("bank"))?;
        params.insert("perceiver.bank", vec![config.semantic_tokens, d], bank.values, config.bank_trainable);

        for layer in 0..2 {
            for block in ["self", "t2i", "i2t"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    let name = format!("perceiver.{layer}.{block}.{w}");
                    params.insert(name.clone(), vec![d, d], normal_init(sub(&name), std, d * d), true);
                }
            }
            let mlp = [
                (format!("perceiver.{layer}.mlp.w1"), vec![d, h]),
                (format!("perceiver.{layer}.mlp.b1"), vec![h]),
                (format!("perceiver.{layer}.mlp.w2"), vec![h, d]),
                (format!("perceiver.{layer}.mlp.b2"), vec![d]),
            ];
            for (name, shape) in mlp {
                let n: usize = shape.iter().product();
                let init = if name.contains(".b") { vec![0.0; n] } else { normal_init(sub(&name), std, n) };
                params.insert(name, shape, init, true);
            }
            for ln in 0..4 {
                params.insert(format!("perceiver.{layer}.ln{ln}.gamma"), vec![d], vec![1.0; d], true);
                params.insert(format!("perceiver.{layer}.ln{ln}.beta"), vec![d], vec![0.0; d], true);
            }
        }
        Ok(Perceiver { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bank(&self) -> SemanticTokenBank {
        let p = self.params.get("perceiver.bank").expect("bank");
        SemanticTokenBank {
            count: self.config.semantic_tokens,
            dim: self.config.dim,
            values: p.values.clone(),
            trainable: p.trainable,
        }
    }

    /// Names of every perceiver-owned tensor that is flagged trainable.
    /// Never includes anything of the backbone's.
    pub fn trainable_parameters(&self) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Record the perceiver forward for one frame. Returns
    /// (visual tokens [G^2, D], semantic tokens [N_s, D]).
    pub fn perceive_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        fs: &FusedState,
        tap: EmbeddingTap,
    ) -> Result<(TensorId, TensorId)> {
        let d = self.config.dim;
        if fs.dim != d {
            return Err(Error::shape(format!(
                "fused state dim {} does not match perceiver dim {d}",
                fs.dim
            )));
        }
        let ns = self.config.semantic_tokens;
        let m = fs.mask_token_count;
        let grid_src = match tap {
            EmbeddingTap::PostFfm => &fs.updated_image_embedding,
            EmbeddingTap::PreFfm => &fs.pre_ffm_embedding,
        };
        let cells = grid_src.cells();

        let mask_tokens = tape.constant(fs.enhanced_mask_tokens.clone(), vec![m, d])?;
        let bank = binding.id("perceiver.bank")?;
        let mut tokens = tape.concat_rows(&[mask_tokens, bank])?;
        let mut image = tape.constant(grid_src.values.clone(), vec![cells, d])?;

        let attn = |tape: &mut Tape, prefix: &str, q_src: TensorId, kv_src: TensorId| -> Result<TensorId> {
            let wq = binding.id(&format!("{prefix}.wq"))?;
            let wk = binding.id(&format!("{prefix}.wk"))?;
            let wv = binding.id(&format!("{prefix}.wv"))?;
            let wo = binding.id(&format!("{prefix}.wo"))?;
            let q = tape.matmul(q_src, wq)?;
            let k = tape.matmul(kv_src, wk)?;
            let v = tape.matmul(kv_src, wv)?;
            let mixed = tape.scaled_dot_attention(q, k, v, false)?;
            tape.matmul(mixed, wo)
        };
        let norm = |tape: &mut Tape, x: TensorId, layer: usize, ln: usize| -> Result<TensorId> {
            let gamma = binding.id(&format!("perceiver.{layer}.ln{ln}.gamma"))?;
            let beta = binding.id(&format!("perceiver.{layer}.ln{ln}.beta"))?;
            tape.layer_norm(x, gamma, beta, 1e-5)
        };

        for layer in 0..2 {
            let delta = attn(tape, &format!("perceiver.{layer}.self"), tokens, tokens)?;
            tokens = tape.add(tokens, delta)?;
            tokens = norm(tape, tokens, layer, 0)?;

            let delta = attn(tape, &format!("perceiver.{layer}.t2i"), tokens, image)?;
            tokens = tape.add(tokens, delta)?;
            tokens = norm(tape, tokens, layer, 1)?;

            let w1 = binding.id(&format!("perceiver.{layer}.mlp.w1"))?;
            let b1 = binding.id(&format!("perceiver.{layer}.mlp.b1"))?;
            let w2 = binding.id(&format!("perceiver.{layer}.mlp.w2"))?;
            let b2 = binding.id(&format!("perceiver.{layer}.mlp.b2"))?;
            let hidden = tape.matmul(tokens, w1)?;
            let hidden = tape.add_bias(hidden, b1)?;
            let hidden = tape.gelu(hidden)?;
            let out = tape.matmul(hidden, w2)?;
            let out = tape.add_bias(out, b2)?;
            tokens = tape.add(tokens, out)?;
            tokens = norm(tape, tokens, layer, 2)?;

            let delta = attn(tape, &format!("perceiver.{layer}.i2t"), image, tokens)?;
            image = tape.add(image, delta)?;
            image = norm(tape, image, layer, 3)?;
        }

        let semantic = tape.slice_rows(tokens, m, m + ns)?;
        Ok((image, semantic))
    }

    /// Value-level forward for one frame on a throwaway tape.
    pub fn perceive(&self, fs: &FusedState, tap: EmbeddingTap) -> Result<PerceiverOutput> {
        let mut tape = Tape::new();
        let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
        let (visual, semantic) = self.perceive_on_tape(&mut tape, &binding, fs, tap)?;
        Ok(PerceiverOutput {
            dim: self.config.dim,
            frame_count: 1,
            visual_per_frame: fs.updated_image_embedding.cells(),
            semantic_per_frame: self.config.semantic_tokens,
            visual_tokens: tape.data(visual).to_vec(),
            semantic_tokens: tape.data(semantic).to_vec(),
        })
    }
}

fn fnv(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig, ImageSource, PromptSpec};

    fn fused(dim: usize, grid: usize, seed: u64) -> FusedState {
        let bb = Backbone::new(BackboneConfig { grid_size: grid, dim, mask_tokens: 2, seed })
            .unwrap();
        let img = bb.encode_image(&ImageSource::Synthetic { seed }, 0).unwrap();
        let prompt = bb.encode_prompt(&PromptSpec::point(0.5, 0.5)).unwrap();
        bb.fuse(&img, &prompt, None).unwrap()
    }

    #[test]
    fn init_bank_deterministic_and_shaped() {
        let a = init_bank(16, 256, 7).unwrap();
        let b = init_bank(16, 256, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 16 * 256);
        assert!(a.trainable);
        assert!(matches!(init_bank(0, 256, 7), Err(Error::Config(_))));
    }

    #[test]
    fn output_counts_match_contract() {
        let p = Perceiver::new(PerceiverConfig {
            semantic_tokens: 4,
            dim: 16,
            seed: 5,
            bank_trainable: true,
        })
        .unwrap();
        let fs = fused(16, 8, 2);
        let out = p.perceive(&fs, EmbeddingTap::PostFfm).unwrap();
        assert_eq!(out.visual_per_frame, 64);
        assert_eq!(out.semantic_per_frame, 4);
        assert_eq!(out.visual_tokens.len(), 64 * 16);
        assert_eq!(out.semantic_tokens.len(), 4 * 16);
    }

    #[test]
    fn tap_axis_changes_outputs() {
        let p = Perceiver::new(PerceiverConfig {
            semantic_tokens: 4,
            dim: 16,
            seed: 5,
            bank_trainable: true,
        })
        .unwrap();
        let fs = fused(16, 8, 2);
        let post = p.perceive(&fs, EmbeddingTap::PostFfm).unwrap();
        let pre = p.perceive(&fs, EmbeddingTap::PreFfm).unwrap();
        assert_ne!(post.visual_tokens, pre.visual_tokens);
        assert_ne!(post.semantic_tokens, pre.semantic_tokens);
    }

    #[test]
    fn zeroed_bank_changes_semantics_but_streams_stay_sensitive() {
        let config = PerceiverConfig { semantic_tokens: 4, dim: 16, seed: 5, bank_trainable: true };
        let p = Perceiver::new(config.clone()).unwrap();
        let fs = fused(16, 8, 2);
        let base = p.perceive(&fs, EmbeddingTap::PostFfm).unwrap();

        let mut zeroed = Perceiver::new(config).unwrap();
        let bank = zeroed.params_mut().get_mut("perceiver.bank").unwrap();
        bank.values.iter_mut().for_each(|v| *v = 0.0);
        let z = zeroed.perceive(&fs, EmbeddingTap::PostFfm).unwrap();
        let sem_diff: f64 = base
            .semantic_tokens
            .iter()
            .zip(&z.semantic_tokens)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(sem_diff > 0.0);

        // Visual stream stays sensitive to the mask tokens.
        let mut fs2 = fs.clone();
        fs2.enhanced_mask_tokens.iter_mut().for_each(|v| *v += 0.5);
        let shifted = p.perceive(&fs2, EmbeddingTap::PostFfm).unwrap();
        let vis_diff: f64 = base
            .visual_tokens
            .iter()
            .zip(&shifted.visual_tokens)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(vis_diff > 0.0);
    }

    #[test]
    fn trainable_set_excludes_backbone_and_tracks_bank_flag() {
        let p = Perceiver::new(PerceiverConfig {
            semantic_tokens: 4,
            dim: 16,
            seed: 5,
            bank_trainable: true,
        })
        .unwrap();
        let set = p.trainable_parameters();
        assert!(set.iter().all(|n| n.starts_with("perceiver.")));
        assert!(set.contains("perceiver.bank"));

        let frozen_bank = Perceiver::new(PerceiverConfig {
            semantic_tokens: 4,
            dim: 16,
            seed: 5,
            bank_trainable: false,
        })
        .unwrap();
        assert!(!frozen_bank.trainable_parameters().contains("perceiver.bank"));

        let again = Perceiver::new(PerceiverConfig {
            semantic_tokens: 4,
            dim: 16,
            seed: 5,
            bank_trainable: true,
        })
        .unwrap();
        assert_eq!(set, again.trainable_parameters());
    }

    #[test]
    fn gradients_check_out_on_tiny_perceiver() {
        let p = Perceiver::new(PerceiverConfig {
            semantic_tokens: 2,
            dim: 8,
            seed: 9,
            bank_trainable: true,
        })
        .unwrap();
        let fs = fused(8, 4, 3);
        let checks = p.params().to_check_params("perceiver");
        let names: Vec<String> = checks.iter().map(|c| c.name.clone()).collect();
        let probe_v: Vec<f64> = (0..16 * 8).map(|i| crate::params::unit_value(i as u64)).collect();
        let probe_s: Vec<f64> =
            (0..2 * 8).map(|i| crate::params::unit_value(1000 + i as u64)).collect();
        let report = crate::numcore::grad_check(
            |tape, ids| {
                let binding = TapeBinding::from_pairs(names.iter().map(String::as_str), ids);
                let (visual, semantic) = p.perceive_on_tape(tape, &binding, &fs, EmbeddingTap::PostFfm)?;
                let wv = tape.mul_const(visual, &probe_v)?;
                let ws = tape.mul_const(semantic, &probe_s)?;
                let sv = tape.sum_all(wv)?;
                let ss = tape.sum_all(ws)?;
                tape.add(sv, ss)
            },
            &checks,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }
}
