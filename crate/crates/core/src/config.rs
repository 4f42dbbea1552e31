//! Run configuration and the fixed text templates. Everything the CLI can
//! vary lives in one JSON document so runs are reproducible from a single
//! file; unknown keys are rejected at load.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::perceiver::EmbeddingTap;

/// Marker line prepended to the instruction when a previous clip description
/// is chained into the prompt. Golden-pinned by tests; changing it silently
/// would break streaming-history checks.
pub const PREVIOUS_PREFIX: &str = "Previous: ";

/// The four region-semantics tasks the pipeline produces data and prompts
/// for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Category,
    Explanation,
    Caption,
    Stream,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Category => "category",
            TaskKind::Explanation => "explanation",
            TaskKind::Caption => "caption",
            TaskKind::Stream => "stream",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(TaskKind::Category),
            "explanation" => Ok(TaskKind::Explanation),
            "caption" => Ok(TaskKind::Caption),
            "stream" => Ok(TaskKind::Stream),
            other => Err(Error::input(format!("unknown task kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixed instruction strings per task kind.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InstructionTemplates {
    pub category: String,
    pub explanation: String,
    pub caption: String,
    pub stream: String,
}

impl InstructionTemplates {
    pub fn for_task(&self, task: TaskKind) -> &str {
        match task {
            TaskKind::Category => &self.category,
            TaskKind::Explanation => &self.explanation,
            TaskKind::Caption => &self.caption,
            TaskKind::Stream => &self.stream,
        }
    }
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        InstructionTemplates {
            category: "Name the category of the marked region.".to_string(),
            explanation: "Explain what the marked region is and what role it plays in this scene."
                .to_string(),
            caption: "Describe the marked region in detail.".to_string(),
            stream: "Describe what the marked region does during this clip.".to_string(),
        }
    }
}

/// Model dimensions. Defaults are the published full-scale values; tests and
/// desk runs shrink them through config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub grid_size: usize,
    pub dim: usize,
    pub semantic_tokens: usize,
    pub mask_tokens: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub context_limit: usize,
    pub bank_trainable: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            grid_size: 64,
            dim: 256,
            semantic_tokens: 16,
            mask_tokens: 4,
            embed_dim: 64,
            decoder_layers: 2,
            context_limit: 8192,
            bank_trainable: true,
        }
    }
}

/// Desk-scale training knobs; stage hyperparameters keep their published
/// defaults unless overridden here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub base_lr: Option<f64>,
}

/// How annotator/judge/segmenter/translator clients are reached.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSettings {
    /// "mock" or "http"; tests always use mock.
    pub mode: String,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Fixed window (seconds) used by the mock event segmenter.
    pub mock_event_window: f64,
}

impl Default for ClientSettings {
    fn default() -> Self {
        ClientSettings {
            mode: "mock".to_string(),
            endpoint: None,
            timeout_ms: 10_000,
            retries: 2,
            mock_event_window: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub tap: EmbeddingTap,
    pub templates: InstructionTemplates,
    pub train: TrainOverrides,
    pub clients: ClientSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !m.grid_size.is_power_of_two() {
            return Err(Error::config(format!(
                "model.grid_size must be a power of two, got {}",
                m.grid_size
            )));
        }
        if m.grid_size % 4 != 0 {
            return Err(Error::config(
                "model.grid_size must be divisible by 4 for the regular-frame shuffle".to_string(),
            ));
        }
        if m.dim == 0 || m.dim % 2 != 0 {
            return Err(Error::config("model.dim must be positive and even".to_string()));
        }
        if m.semantic_tokens == 0 {
            return Err(Error::config("model.semantic_tokens must be >= 1".to_string()));
        }
        if m.mask_tokens == 0 {
            return Err(Error::config("model.mask_tokens must be >= 1".to_string()));
        }
        if m.embed_dim == 0 || m.decoder_layers == 0 {
            return Err(Error::config("decoder dims must be >= 1".to_string()));
        }
        if m.context_limit < 64 {
            return Err(Error::config("model.context_limit is unusably small".to_string()));
        }
        if self.clients.mode != "mock" && self.clients.mode != "http" {
            return Err(Error::config(format!(
                "clients.mode must be \"mock\" or \"http\", got {:?}",
                self.clients.mode
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn dump(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Small dimensions that keep every pipeline stage fast on one core.
    pub fn desk_scale(seed: u64) -> Self {
        RunConfig {
            seed,
            model: ModelDims {
                grid_size: 8,
                dim: 32,
                semantic_tokens: 4,
                mask_tokens: 2,
                embed_dim: 32,
                decoder_layers: 2,
                context_limit: 2048,
                bank_trainable: true,
            },
            ..RunConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_golden_pinned() {
        let t = InstructionTemplates::default();
        assert_eq!(t.category, "Name the category of the marked region.");
        assert_eq!(
            t.explanation,
            "Explain what the marked region is and what role it plays in this scene."
        );
        assert_eq!(t.caption, "Describe the marked region in detail.");
        assert_eq!(t.stream, "Describe what the marked region does during this clip.");
        assert_eq!(PREVIOUS_PREFIX, "Previous: ");
    }

    #[test]
    fn defaults_match_published_dims() {
        let c = RunConfig::default();
        assert_eq!(c.model.grid_size, 64);
        assert_eq!(c.model.dim, 256);
        assert_eq!(c.model.semantic_tokens, 16);
        assert_eq!(c.model.mask_tokens, 4);
        c.validate().unwrap();
    }

    #[test]
    fn config_round_trips_losslessly() {
        let c = RunConfig::desk_scale(42);
        let dumped = c.dump().unwrap();
        let reloaded: RunConfig = serde_json::from_str(&dumped).unwrap();
        assert_eq!(c, reloaded);
        assert_eq!(dumped, reloaded.dump().unwrap());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"seed": 1, "mystery_knob": true}"#;
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn bad_grid_rejected() {
        let mut c = RunConfig::default();
        c.model.grid_size = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
