//! Assembled pipeline: frozen backbone feeding the trainable perceiver,
//! projector, and decoder, plus media handling. The training path records
//! one graph per batch on a fresh tape; inference extracts values from
//! throwaway tapes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::backbone::{Backbone, BackboneConfig, FusedState, ImageSource, PromptSpec};
use crate::config::{InstructionTemplates, RunConfig, TaskKind};
use crate::decoder::layout::{compose_instruction, full_row_targets, tail_ids};
use crate::decoder::{Decoder, DecoderConfig, SeqPart, SequenceLayout};
use crate::error::{Error, Result};
use crate::numcore::{Tape, TensorId};
use crate::params::{mix64, Param, ParamSet, TapeBinding};
use crate::perceiver::{EmbeddingTap, Perceiver, PerceiverConfig, PerceiverOutput};
use crate::projector::{FrameRole, ProjectedTokens, Projector, ProjectorConfig};

/// Media reference: a seeded synthetic clip (first-class, so CI needs no
/// assets) or a PNG on disk (single frame).
#[derive(Debug, Clone, PartialEq)]
pub enum MediaSpec {
    Synthetic { seed: u64, frames: usize, fps: f64 },
    Png { path: PathBuf },
}

impl MediaSpec {
    /// Parse "synth:seed=S,frames=N[,fps=F]" or treat the string as a PNG
    /// path.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synth:") {
            let mut seed = 0u64;
            let mut frames = 1usize;
            let mut fps = 1.0f64;
            for piece in rest.split(',').filter(|p| !p.is_empty()) {
                let (key, value) = piece
                    .split_once('=')
                    .ok_or_else(|| Error::input(format!("bad media spec field {piece:?}")))?;
                match key {
                    "seed" => {
                        seed = value
                            .parse()
                            .map_err(|e| Error::input(format!("bad seed {value:?}: {e}")))?
                    }
                    "frames" => {
                        frames = value
                            .parse()
                            .map_err(|e| Error::input(format!("bad frames {value:?}: {e}")))?
                    }
                    "fps" => {
                        fps = value
                            .parse()
                            .map_err(|e| Error::input(format!("bad fps {value:?}: {e}")))?
                    }
                    other => return Err(Error::input(format!("unknown media field {other:?}"))),
                }
            }
            if frames == 0 {
                return Err(Error::input("media needs >= 1 frame".to_string()));
            }
            if fps <= 0.0 {
                return Err(Error::input("fps must be positive".to_string()));
            }
            Ok(MediaSpec::Synthetic { seed, frames, fps })
        } else {
            Ok(MediaSpec::Png { path: PathBuf::from(s) })
        }
    }

    pub fn frame_count(&self) -> usize {
        match self {
            MediaSpec::Synthetic { frames, .. } => *frames,
            MediaSpec::Png { .. } => 1,
        }
    }

    /// Frame i is stamped at (i+1)/fps, so the last frame lands exactly on
    /// the clip duration.
    pub fn frame_times(&self) -> Vec<f64> {
        match self {
            MediaSpec::Synthetic { frames, fps, .. } => {
                (0..*frames).map(|i| (i + 1) as f64 / fps).collect()
            }
            MediaSpec::Png { .. } => vec![1.0],
        }
    }

    pub fn duration(&self) -> f64 {
        *self.frame_times().last().expect("nonempty")
    }

    pub fn id(&self) -> String {
        match self {
            MediaSpec::Synthetic { seed, frames, fps } => {
                format!("synth:seed={seed},frames={frames},fps={fps}")
            }
            MediaSpec::Png { path } => path.display().to_string(),
        }
    }
}

/// One training sample, with backbone outputs cached (the backbone is frozen
/// and deterministic, so per-frame fused states never change during
/// training).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub media_id: String,
    pub fused: Vec<FusedState>,
    pub roles: Vec<FrameRole>,
    pub task: TaskKind,
    pub language: String,
    pub prev_description: Option<String>,
    pub response: String,
}

pub struct Model {
    pub backbone: Backbone,
    pub perceiver: Perceiver,
    pub projector: Projector,
    pub decoder: Decoder,
    pub templates: InstructionTemplates,
    pub tap: EmbeddingTap,
}

impl Model {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let sub = |label: u64| mix64(cfg.seed ^ label);
        Ok(Model {
            backbone: Backbone::new(BackboneConfig {
                grid_size: m.grid_size,
                dim: m.dim,
                mask_tokens: m.mask_tokens,
                seed: sub(0xb0),
            })?,
            perceiver: Perceiver::new(PerceiverConfig {
                semantic_tokens: m.semantic_tokens,
                dim: m.dim,
                seed: sub(0x9e),
                bank_trainable: m.bank_trainable,
            })?,
            projector: Projector::new(ProjectorConfig {
                grid_size: m.grid_size,
                dim: m.dim,
                embed_dim: m.embed_dim,
                seed: sub(0x97),
            })?,
            decoder: Decoder::new(DecoderConfig {
                embed_dim: m.embed_dim,
                layers: m.decoder_layers,
                context_limit: m.context_limit,
                seed: sub(0xde),
            })?,
            templates: cfg.templates.clone(),
            tap: cfg.tap,
        })
    }

    pub fn instruction_for(&self, task: TaskKind) -> &str {
        self.templates.for_task(task)
    }

    // ── media ────────────────────────────────────────────────────────

    /// Encode and fuse every frame. Frame t cross-attends to frame t-1's
    /// updated embedding, which is how history propagates through a clip.
    pub fn encode_frames(&self, media: &MediaSpec, prompt: &PromptSpec) -> Result<Vec<FusedState>> {
        prompt.validate(self.backbone.config.grid_size)?;
        let prompt_tokens = self.backbone.encode_prompt(prompt)?;
        let mut fused: Vec<FusedState> = Vec::new();
        match media {
            MediaSpec::Synthetic { seed, frames, .. } => {
                for i in 0..*frames {
                    let frame_seed = mix64(*seed).wrapping_add(i as u64);
                    let img = self
                        .backbone
                        .encode_image(&ImageSource::Synthetic { seed: frame_seed }, i)?;
                    let memory = fused.last().map(|f: &FusedState| &f.updated_image_embedding);
                    fused.push(self.backbone.fuse(&img, &prompt_tokens, memory)?);
                }
            }
            MediaSpec::Png { path } => {
                let bytes = std::fs::read(path)
                    .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
                let img = self.backbone.encode_image(&ImageSource::Png(&bytes), 0)?;
                fused.push(self.backbone.fuse(&img, &prompt_tokens, None)?);
            }
        }
        Ok(fused)
    }

    // ── inference (value level) ──────────────────────────────────────

    /// Perceive and project one frame at the given role.
    pub fn project_frame(&self, fs: &FusedState, role: FrameRole) -> Result<(ProjectedTokens, Vec<f64>)> {
        let out: PerceiverOutput = self.perceiver.perceive(fs, self.tap)?;
        let visual = self.projector.project_visual(
            &out.visual_tokens,
            role,
            fs.updated_image_embedding.frame_index,
        )?;
        let semantic = self.projector.project_semantic(&out.semantic_tokens)?;
        Ok((visual, semantic))
    }

    /// Build a generation-ready layout for a clip: per-frame visual slots
    /// (optionally starting with carried-over tokens) plus the concatenated
    /// per-frame semantic tokens.
    pub fn build_clip_layout(
        &self,
        carry: Option<ProjectedTokens>,
        fused: &[FusedState],
        roles: &[FrameRole],
        task: TaskKind,
        prev_description: Option<&str>,
        response: Option<&str>,
    ) -> Result<SequenceLayout> {
        if fused.len() != roles.len() {
            return Err(Error::shape(format!(
                "{} fused frames vs {} roles",
                fused.len(),
                roles.len()
            )));
        }
        let mut visual = Vec::new();
        let mut semantic = Vec::new();
        let mut sem_count = 0usize;
        if let Some(c) = carry {
            visual.push(c);
        }
        for (fs, role) in fused.iter().zip(roles) {
            let (v, s) = self.project_frame(fs, *role)?;
            sem_count += s.len() / self.decoder.config.embed_dim;
            visual.push(v);
            semantic.extend(s);
        }
        SequenceLayout::build(
            visual,
            semantic,
            sem_count,
            self.decoder.config.embed_dim,
            self.instruction_for(task),
            response,
            prev_description,
        )
    }

    /// End-to-end description of media for a task; returns the layout too so
    /// callers can report token counts.
    pub fn describe(
        &self,
        media: &MediaSpec,
        prompt: &PromptSpec,
        task: TaskKind,
        max_len: usize,
    ) -> Result<(String, SequenceLayout, Vec<FusedState>)> {
        let fused = self.encode_frames(media, prompt)?;
        let roles = self.projector.plan_roles(fused.len(), prompt.frame_index.min(fused.len() - 1))?;
        let layout = self.build_clip_layout(None, &fused, &roles, task, None, None)?;
        let text = self.decoder.generate(&layout, max_len)?;
        Ok((text, layout, fused))
    }

    // ── training graph ───────────────────────────────────────────────

    pub fn param_sets(&self) -> Vec<&ParamSet> {
        vec![
            self.backbone.params(),
            self.perceiver.params(),
            self.projector.params(),
            self.decoder.params(),
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<String>) -> Result<TapeBinding> {
        TapeBinding::bind_many(tape, &self.param_sets(), trainable)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        match name.split('.').next()? {
            "backbone" => None, // frozen; nothing may write it
            "perceiver" => self.perceiver.params_mut().get_mut(name),
            "projector" => self.projector.params_mut().get_mut(name),
            "decoder" => self.decoder.params_mut().get_mut(name),
            _ => None,
        }
    }

    /// Record the loss graph for one sample. Gradients flow into perceiver,
    /// projector, and decoder leaves; the backbone never appears on the tape.
    pub fn sample_loss_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        sample: &TrainSample,
    ) -> Result<TensorId> {
        if sample.fused.len() != sample.roles.len() {
            return Err(Error::shape("sample frames/roles mismatch".to_string()));
        }
        let mut parts: Vec<SeqPart> = Vec::new();
        let mut sem_ids: Vec<TensorId> = Vec::new();
        let mut visual_count = 0usize;
        for (fs, role) in sample.fused.iter().zip(&sample.roles) {
            let (vis, sem) = self.perceiver.perceive_on_tape(tape, binding, fs, self.tap)?;
            let vis = self.projector.project_visual_on_tape(tape, binding, vis, *role)?;
            visual_count += tape.shape(vis)[0];
            parts.push(SeqPart::Embeds(vis));
            sem_ids.push(self.projector.project_semantic_on_tape(tape, binding, sem)?);
        }
        parts.push(SeqPart::Tokens(vec![crate::decoder::vocab::SEP]));
        let mut sem_count = 0usize;
        for sem in sem_ids {
            sem_count += tape.shape(sem)[0];
            parts.push(SeqPart::Embeds(sem));
        }
        let instruction = compose_instruction(
            self.instruction_for(sample.task),
            sample.prev_description.as_deref(),
        );
        parts.push(SeqPart::Tokens(tail_ids(&instruction, Some(&sample.response))));
        let logits = self.decoder.forward_on_tape(tape, binding, &parts)?;
        let targets = full_row_targets(visual_count, sem_count, &instruction, Some(&sample.response));
        tape.masked_cross_entropy(logits, &targets)
    }

    /// Mean loss over a batch, one recorded graph.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        batch: &[&TrainSample],
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::input("empty batch".to_string()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            losses.push(self.sample_loss_on_tape(tape, binding, sample)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        tape.scale(total, 1.0 / batch.len() as f64)
    }

    /// Value-level generation for a training sample (memorization checks).
    pub fn generate_for_sample(&self, sample: &TrainSample, max_len: usize) -> Result<String> {
        let layout = self.build_clip_layout(
            None,
            &sample.fused,
            &sample.roles,
            sample.task,
            sample.prev_description.as_deref(),
            None,
        )?;
        self.decoder.generate(&layout, max_len)
    }

    /// Value-level mean loss over samples (reporting).
    pub fn eval_loss(&self, samples: &[TrainSample]) -> Result<f64> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, &BTreeSet::new())?;
        let refs: Vec<&TrainSample> = samples.iter().collect();
        let loss = self.batch_loss_on_tape(&mut tape, &binding, &refs)?;
        Ok(tape.data(loss)[0])
    }

    /// Per-component parameter checksums (bit-exact).
    pub fn checksums(&self) -> BTreeMap<String, u64> {
        [
            ("backbone", self.backbone.params().checksum("backbone")),
            ("perceiver", self.perceiver.params().checksum("perceiver")),
            ("projector", self.projector.params().checksum("projector")),
            ("decoder", self.decoder.params().checksum("decoder")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Merged copy of every parameter (checkpointing).
    pub fn merged_params(&self) -> ParamSet {
        let mut merged = ParamSet::new();
        for set in self.param_sets() {
            for (name, p) in set.iter() {
                merged.insert(name.clone(), p.shape.clone(), p.values.clone(), p.trainable);
            }
        }
        merged
    }

    /// Overwrite parameter values from a checkpoint; shapes must match.
    pub fn load_merged(&mut self, set: &ParamSet) -> Result<()> {
        let names: Vec<String> = set.names().cloned().collect();
        for name in names {
            let incoming = set.get(&name).expect("iterated");
            if name.starts_with("backbone.") {
                // The backbone is frozen; a checkpoint carrying different
                // backbone values than the seeded ones is a config error.
                let current = self.backbone.params().require(&name)?;
                if current.values != incoming.values {
                    return Err(Error::config(format!(
                        "checkpoint backbone weights differ from the seeded backbone ({name})"
                    )));
                }
                continue;
            }
            let param = self
                .param_mut(&name)
                .ok_or_else(|| Error::config(format!("unknown checkpoint parameter {name:?}")))?;
            if param.shape != incoming.shape {
                return Err(Error::config(format!(
                    "checkpoint shape {:?} does not match model shape {:?} for {name}",
                    incoming.shape, param.shape
                )));
            }
            param.values = incoming.values.clone();
        }
        Ok(())
    }
}
