//! Streaming encode/decode scheduler: splits a video at user decode
//! timestamps, carries the dense clip-final tokens of each clip into the
//! next clip's initial slot, and chains the previous description into the
//! prompt.

use serde::{Deserialize, Serialize};

use crate::backbone::{FusedState, PromptSpec};
use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::model::{MediaSpec, Model};
use crate::projector::{FrameRole, ProjectedTokens};

/// One clip: frame index range [start, end) decoded at `t_end`, covering the
/// interval (t_start, t_end].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlan {
    pub clips: Vec<Clip>,
}

/// Frames land in the clip whose interval contains their timestamp, with
/// closed-right intervals: a frame exactly on a decode timestamp belongs to
/// the earlier clip. Frames after the last timestamp form a final clip.
pub fn plan_clips(frame_times: &[f64], decode_timestamps: &[f64]) -> Result<ClipPlan> {
    if frame_times.is_empty() {
        return Err(Error::input("video has no frames".to_string()));
    }
    if frame_times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("frame times must be strictly increasing".to_string()));
    }
    if decode_timestamps.is_empty() {
        return Err(Error::input("need at least one decode timestamp".to_string()));
    }
    if decode_timestamps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input(
            "decode timestamps must be strictly increasing (no duplicates)".to_string(),
        ));
    }
    let duration = *frame_times.last().expect("nonempty");
    if let Some(&beyond) = decode_timestamps.iter().find(|&&t| t > duration) {
        return Err(Error::input(format!(
            "decode timestamp {beyond} is beyond the video end {duration}"
        )));
    }
    if decode_timestamps[0] <= 0.0 {
        return Err(Error::input("decode timestamps must be positive".to_string()));
    }

    let mut clips = Vec::new();
    let mut frame = 0usize;
    let mut t_prev = 0.0f64;
    for &ts in decode_timestamps {
        let start = frame;
        while frame < frame_times.len() && frame_times[frame] <= ts {
            frame += 1;
        }
        if frame == start {
            return Err(Error::input(format!(
                "decode interval ({t_prev}, {ts}] contains no frames"
            )));
        }
        clips.push(Clip { start, end: frame, t_start: t_prev, t_end: ts });
        t_prev = ts;
    }
    if frame < frame_times.len() {
        clips.push(Clip { start: frame, end: frame_times.len(), t_start: t_prev, t_end: duration });
    }
    Ok(ClipPlan { clips })
}

/// Carry-over tokens plus the previous clip's description.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    pub carry_tokens: Option<ProjectedTokens>,
    pub prev_description: Option<String>,
}

/// Output of one streaming step. `instruction` is retained so history
/// chaining is externally checkable.
#[derive(Debug, Clone)]
pub struct ClipResult {
    pub t_start: f64,
    pub t_end: f64,
    pub text: String,
    pub instruction: String,
    pub visual_token_count: usize,
}

/// Wire format for streaming results (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StreamRecord {
    pub t_start: f64,
    pub t_end: f64,
    pub text: String,
}

impl From<&ClipResult> for StreamRecord {
    fn from(r: &ClipResult) -> Self {
        StreamRecord { t_start: r.t_start, t_end: r.t_end, text: r.text.clone() }
    }
}

/// Roles for the frames a clip actually encodes. With carry present the
/// clip's first frame is replaced by the carried tokens and contributes no
/// slot of its own; a single-frame clip is clip-final only.
fn clip_roles(frames: usize, has_carry: bool) -> Vec<FrameRole> {
    if frames == 1 {
        return vec![FrameRole::ClipFinal];
    }
    let encoded = if has_carry { frames - 1 } else { frames };
    let mut roles = Vec::with_capacity(encoded);
    if !has_carry {
        roles.push(FrameRole::Prompted);
    }
    let middles = encoded - roles.len() - 1;
    roles.extend(std::iter::repeat_n(FrameRole::Regular, middles));
    roles.push(FrameRole::ClipFinal);
    roles
}

/// Process one clip: encode it at streaming densities, chain the previous
/// description into the prompt, and emit the new state carrying this clip's
/// final-frame tokens and description.
pub fn step(
    model: &Model,
    state: StreamState,
    clip_fused: &[FusedState],
    interval: (f64, f64),
    max_len: usize,
) -> Result<(ClipResult, StreamState)> {
    if clip_fused.is_empty() {
        return Err(Error::input("clip must contain at least one frame".to_string()));
    }
    if let Some(carry) = &state.carry_tokens {
        let dense = model.projector.tokens_for_role(FrameRole::Prompted);
        if carry.count != dense {
            return Err(Error::shape(format!(
                "carry tokens have count {}, expected prompted density {dense}",
                carry.count
            )));
        }
    }
    let has_carry = state.carry_tokens.is_some();
    let roles = clip_roles(clip_fused.len(), has_carry);
    // With carry, the clip's first frame is replaced by the carried slot
    // (except for single-frame clips, which must still supply the final
    // frame themselves).
    let own_frames: &[FusedState] = if has_carry && clip_fused.len() > 1 {
        &clip_fused[1..]
    } else {
        clip_fused
    };
    let layout = model.build_clip_layout(
        state.carry_tokens.clone(),
        own_frames,
        &roles,
        TaskKind::Stream,
        state.prev_description.as_deref(),
        None,
    )?;
    let text = model.decoder.generate(&layout, max_len)?;
    let carry = layout.visual.last().expect("at least one slot").clone();
    debug_assert_eq!(carry.role, FrameRole::ClipFinal);
    let result = ClipResult {
        t_start: interval.0,
        t_end: interval.1,
        text: text.clone(),
        instruction: layout.instruction.clone(),
        visual_token_count: layout.visual_count(),
    };
    Ok((result, StreamState { carry_tokens: Some(carry), prev_description: Some(text) }))
}

/// Full streaming run: plan clips from decode timestamps, fold [`step`] over
/// them, one description per clip.
pub fn run(
    model: &Model,
    media: &MediaSpec,
    prompt: &PromptSpec,
    decode_timestamps: &[f64],
    max_len: usize,
) -> Result<Vec<ClipResult>> {
    let frame_times = media.frame_times();
    let plan = plan_clips(&frame_times, decode_timestamps)?;
    let fused = model.encode_frames(media, prompt)?;
    let mut state = StreamState::default();
    let mut results = Vec::with_capacity(plan.clips.len());
    for clip in &plan.clips {
        let (result, next) = step(
            model,
            state,
            &fused[clip.start..clip.end],
            (clip.t_start, clip.t_end),
            max_len,
        )?;
        results.push(result);
        state = next;
    }
    Ok(results)
}
