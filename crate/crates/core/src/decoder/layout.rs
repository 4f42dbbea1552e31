//! Multimodal sequence layout: projected visual tokens, projected semantic
//! tokens, instruction text, and optional response text, with SEP-marked
//! segment boundaries and a loss mask that covers only response positions.

use crate::config::PREVIOUS_PREFIX;
use crate::decoder::vocab;
use crate::error::{Error, Result};
use crate::projector::ProjectedTokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Visual,
    Semantic,
    Sep,
    Bos,
    Instruction,
    Response,
    Eos,
}

/// Instruction composition shared by the value-level layout and the on-tape
/// training path.
pub fn compose_instruction(instruction: &str, prev_description: Option<&str>) -> String {
    match prev_description {
        Some(prev) => format!("{PREVIOUS_PREFIX}{prev}\n{instruction}"),
        None => instruction.to_string(),
    }
}

/// Ids of the text tail following the semantic block: SEP, BOS, instruction
/// bytes, SEP, then response bytes + EOS when a response is present.
pub fn tail_ids(instruction: &str, response: Option<&str>) -> Vec<usize> {
    let mut ids = vec![vocab::SEP, vocab::BOS];
    ids.extend(vocab::encode(instruction));
    ids.push(vocab::SEP);
    if let Some(resp) = response {
        ids.extend(vocab::encode(resp));
        ids.push(vocab::EOS);
    }
    ids
}

/// Token id at each sequence position; None on embedding slots.
pub fn full_position_ids(
    visual_count: usize,
    semantic_count: usize,
    instruction: &str,
    response: Option<&str>,
) -> Vec<Option<usize>> {
    let mut ids = vec![None; visual_count];
    ids.push(Some(vocab::SEP));
    ids.extend(std::iter::repeat_n(None, semantic_count));
    for id in tail_ids(instruction, response) {
        ids.push(Some(id));
    }
    ids
}

/// Next-token targets aligned to logits rows: row i predicts position i+1,
/// and only response positions (plus the final EOS) contribute.
pub fn full_row_targets(
    visual_count: usize,
    semantic_count: usize,
    instruction: &str,
    response: Option<&str>,
) -> Vec<Option<usize>> {
    let ids = full_position_ids(visual_count, semantic_count, instruction, response);
    let n = ids.len();
    let resp_len = response.map(|r| vocab::encode(r).len()).unwrap_or(0);
    let masked_from = n - if response.is_some() { resp_len + 1 } else { 0 };
    (0..n)
        .map(|i| if i + 1 < n && i + 1 >= masked_from { ids[i + 1] } else { None })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub embed_dim: usize,
    /// Per-frame-slot projected visual tokens, in temporal order.
    pub visual: Vec<ProjectedTokens>,
    /// Projected semantic tokens, row-major [semantic_count, embed_dim].
    pub semantic: Vec<f64>,
    pub semantic_count: usize,
    /// Final instruction text, including the chained previous description
    /// when one was supplied.
    pub instruction: String,
    pub response: Option<String>,
}

impl SequenceLayout {
    /// Assemble a layout. `prev_description`, when present, is prepended to
    /// the instruction under the fixed `Previous: ...` template.
    pub fn build(
        visual: Vec<ProjectedTokens>,
        semantic: Vec<f64>,
        semantic_count: usize,
        embed_dim: usize,
        instruction: &str,
        response: Option<&str>,
        prev_description: Option<&str>,
    ) -> Result<Self> {
        if instruction.trim().is_empty() {
            return Err(Error::input("instruction must not be empty".to_string()));
        }
        if semantic.len() != semantic_count * embed_dim {
            return Err(Error::shape(format!(
                "semantic buffer has {} values, expected {}",
                semantic.len(),
                semantic_count * embed_dim
            )));
        }
        for slot in &visual {
            if slot.embed_dim != embed_dim {
                return Err(Error::shape(format!(
                    "visual slot dim {} does not match layout dim {embed_dim}",
                    slot.embed_dim
                )));
            }
        }
        let instruction = compose_instruction(instruction, prev_description);
        Ok(SequenceLayout {
            embed_dim,
            visual,
            semantic,
            semantic_count,
            instruction,
            response: response.map(str::to_string),
        })
    }

    pub fn visual_count(&self) -> usize {
        self.visual.iter().map(|v| v.count).sum()
    }

    /// Token ids of the text tail following the semantic block: the SEP that
    /// closes it, BOS, instruction bytes, SEP, and when a response is
    /// present, response bytes + EOS.
    pub fn text_ids(&self) -> Vec<usize> {
        tail_ids(&self.instruction, self.response.as_deref())
    }

    /// One kind per sequence position, in order: visual, SEP, semantic, SEP,
    /// then the text tail.
    pub fn position_kinds(&self) -> Vec<PositionKind> {
        let mut kinds = vec![PositionKind::Visual; self.visual_count()];
        kinds.push(PositionKind::Sep);
        kinds.extend(std::iter::repeat_n(PositionKind::Semantic, self.semantic_count));
        kinds.push(PositionKind::Sep);
        kinds.push(PositionKind::Bos);
        kinds.extend(std::iter::repeat_n(
            PositionKind::Instruction,
            vocab::encode(&self.instruction).len(),
        ));
        kinds.push(PositionKind::Sep);
        if let Some(resp) = &self.response {
            kinds.extend(std::iter::repeat_n(PositionKind::Response, vocab::encode(resp).len()));
            kinds.push(PositionKind::Eos);
        }
        kinds
    }

    /// Token id at each position; None on embedding (visual/semantic) slots.
    pub fn position_ids(&self) -> Vec<Option<usize>> {
        full_position_ids(
            self.visual_count(),
            self.semantic_count,
            &self.instruction,
            self.response.as_deref(),
        )
    }

    pub fn total_len(&self) -> usize {
        self.visual_count() + 1 + self.semantic_count + self.text_ids().len()
    }

    /// True exactly on response positions plus the final EOS.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.position_kinds()
            .iter()
            .map(|k| matches!(k, PositionKind::Response | PositionKind::Eos))
            .collect()
    }

    /// Next-token targets aligned to logits rows: row i predicts position
    /// i+1, and only masked positions contribute.
    pub fn row_targets(&self) -> Vec<Option<usize>> {
        full_row_targets(
            self.visual_count(),
            self.semantic_count,
            &self.instruction,
            self.response.as_deref(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::FrameRole;

    fn slot(count: usize, dim: usize) -> ProjectedTokens {
        ProjectedTokens {
            tokens: vec![0.1; count * dim],
            count,
            embed_dim: dim,
            role: FrameRole::Prompted,
            frame_index: 0,
        }
    }

    #[test]
    fn plain_instruction_passes_through() {
        let layout = SequenceLayout::build(
            vec![slot(4, 8)],
            vec![0.0; 2 * 8],
            2,
            8,
            "Describe the marked region in detail.",
            None,
            None,
        )
        .unwrap();
        assert_eq!(layout.instruction, "Describe the marked region in detail.");
    }

    #[test]
    fn previous_description_uses_fixed_marker() {
        let layout = SequenceLayout::build(
            vec![slot(4, 8)],
            vec![0.0; 2 * 8],
            2,
            8,
            "Describe what the marked region does during this clip.",
            None,
            Some("X"),
        )
        .unwrap();
        assert!(layout.instruction.contains("Previous: X"));
        assert_eq!(
            layout.instruction,
            "Previous: X\nDescribe what the marked region does during this clip."
        );
    }

    #[test]
    fn empty_instruction_rejected() {
        let err = SequenceLayout::build(vec![slot(4, 8)], vec![], 0, 8, "  ", None, None);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn loss_mask_covers_response_plus_eos() {
        let layout = SequenceLayout::build(
            vec![slot(4, 8)],
            vec![0.0; 2 * 8],
            2,
            8,
            "instr",
            Some("hello"),
            None,
        )
        .unwrap();
        let mask = layout.loss_mask();
        assert_eq!(mask.len(), layout.total_len());
        assert_eq!(mask.iter().filter(|&&m| m).count(), "hello".len() + 1);
        // Mask is a suffix: everything before the response is excluded.
        let first = mask.iter().position(|&m| m).unwrap();
        assert!(mask[first..].iter().all(|&m| m));
    }

    #[test]
    fn row_targets_shift_by_one() {
        let layout = SequenceLayout::build(
            vec![slot(2, 4)],
            vec![0.0; 4],
            1,
            4,
            "i",
            Some("ab"),
            None,
        )
        .unwrap();
        let targets = layout.row_targets();
        assert_eq!(targets.len(), layout.total_len());
        let hits: Vec<usize> = targets.iter().flatten().copied().collect();
        assert_eq!(hits, vec![b'a' as usize, b'b' as usize, vocab::EOS]);
        // The row just before the first response byte is the instruction SEP.
        let ids = layout.position_ids();
        let first_target_row = targets.iter().position(Option::is_some).unwrap();
        assert_eq!(ids[first_target_row], Some(vocab::SEP));
    }
}
