//! Three-stage training curriculum: stage-wise trainable-parameter sets, the
//! published stage hyperparameters, a warmup+cosine schedule, AdamW, and a
//! desk-scale runner with per-component checksum reporting.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::PromptSpec;
use crate::config::{TaskKind, TrainOverrides};
use crate::error::{Error, Result};
use crate::model::{MediaSpec, Model, TrainSample};
use crate::numcore::Tape;
use crate::params::mix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    S1,
    #[serde(rename = "1.5")]
    S1_5,
    #[serde(rename = "2")]
    S2,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::S1 => "1",
            Stage::S1_5 => "1.5",
            Stage::S2 => "2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Stage::S1),
            "1.5" => Ok(Stage::S1_5),
            "2" => Ok(Stage::S2),
            other => Err(Error::config(format!("unknown stage {other:?}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trainable components, named by parameter prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Perceiver,
    Projector,
    Decoder,
}

impl Component {
    pub fn prefix(&self) -> &'static str {
        match self {
            Component::Perceiver => "perceiver",
            Component::Projector => "projector",
            Component::Decoder => "decoder",
        }
    }
}

/// Stage 1 & 1.5 train the perceiver and projector only; stage 2 adds the
/// decoder. The backbone is never trainable.
pub fn trainable_components(stage: Stage) -> BTreeSet<Component> {
    let mut set = BTreeSet::from([Component::Perceiver, Component::Projector]);
    if stage == Stage::S2 {
        set.insert(Component::Decoder);
    }
    set
}

/// Data kinds in each stage's mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ImageClassification,
    ImageCaption,
    ImageExplanation,
    VideoCaption,
    StreamingVideoCaption,
}

impl DatasetKind {
    pub fn task(&self) -> TaskKind {
        match self {
            DatasetKind::ImageClassification => TaskKind::Category,
            DatasetKind::ImageCaption | DatasetKind::VideoCaption => TaskKind::Caption,
            DatasetKind::ImageExplanation => TaskKind::Explanation,
            DatasetKind::StreamingVideoCaption => TaskKind::Stream,
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self, DatasetKind::VideoCaption | DatasetKind::StreamingVideoCaption)
    }
}

pub fn stage_dataset_mix(stage: Stage) -> BTreeSet<DatasetKind> {
    match stage {
        Stage::S1 => BTreeSet::from([DatasetKind::ImageClassification, DatasetKind::ImageCaption]),
        Stage::S1_5 => BTreeSet::from([
            DatasetKind::ImageClassification,
            DatasetKind::ImageCaption,
            DatasetKind::VideoCaption,
        ]),
        Stage::S2 => BTreeSet::from([
            DatasetKind::ImageClassification,
            DatasetKind::ImageExplanation,
            DatasetKind::VideoCaption,
            DatasetKind::StreamingVideoCaption,
        ]),
    }
}

/// Published per-stage hyperparameters; desk runs shrink batch/steps/lr
/// through [`TrainOverrides`] without touching these defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub trainable: BTreeSet<Component>,
    pub dataset_mix: BTreeSet<DatasetKind>,
}

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (base_lr, batch_size) = match stage {
            Stage::S1 => (1e-4, 1024),
            Stage::S1_5 => (4e-5, 1024),
            Stage::S2 => (1e-5, 256),
        };
        StageConfig {
            stage,
            base_lr,
            batch_size,
            warmup_ratio: 0.03,
            epochs: 1,
            trainable: trainable_components(stage),
            dataset_mix: stage_dataset_mix(stage),
        }
    }

    pub fn with_overrides(mut self, overrides: &TrainOverrides) -> Self {
        if let Some(b) = overrides.batch_size {
            self.batch_size = b;
        }
        if let Some(lr) = overrides.base_lr {
            self.base_lr = lr;
        }
        self
    }
}

/// Linear warmup to `base_lr` over ceil(warmup_ratio * total_steps) steps,
/// then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("lr schedule needs total_steps >= 1".to_string()));
    }
    if step > total_steps {
        return Err(Error::config(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    Ok(if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        let span = (total_steps - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    })
}

/// AdamW with decoupled weight decay (zero by default here). Moment buffers
/// exist only for the trainable names handed to `new`.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(trainable: &BTreeSet<String>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: trainable.iter().map(|n| (n.clone(), Vec::new())).collect(),
            v: trainable.iter().map(|n| (n.clone(), Vec::new())).collect(),
        }
    }

    pub fn tracked_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    /// One update over the supplied gradients. Names without gradient this
    /// step are skipped; names never registered are an error.
    pub fn apply(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("gradient for untracked parameter {name:?}")))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            if m.is_empty() {
                m.resize(grad.len(), 0.0);
                v.resize(grad.len(), 0.0);
            }
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::config(format!("cannot update frozen parameter {name:?}")))?;
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.values[i] -=
                    lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * param.values[i]);
            }
        }
        Ok(())
    }
}

/// Everything a stage run reports: losses, step count, and bit-exact
/// per-component checksums before and after (hex strings to stay lossless in
/// JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub checksums_before: BTreeMap<String, String>,
    pub checksums_after: BTreeMap<String, String>,
    pub backbone_frozen: bool,
}

fn hex_checksums(model: &Model) -> BTreeMap<String, String> {
    model
        .checksums()
        .into_iter()
        .map(|(k, v)| (k, format!("{v:016x}")))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub kinds: BTreeSet<DatasetKind>,
}

impl Dataset {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("dataset is empty".to_string()));
        }
        let kinds = samples.iter().map(sample_kind).collect();
        Ok(Dataset { samples, kinds })
    }

    pub fn merge(mut self, other: Dataset) -> Dataset {
        self.samples.extend(other.samples);
        self.kinds.extend(other.kinds);
        self
    }
}

pub fn sample_kind(sample: &TrainSample) -> DatasetKind {
    let video = sample.fused.len() > 1;
    match (sample.task, video) {
        (TaskKind::Category, _) => DatasetKind::ImageClassification,
        (TaskKind::Explanation, _) => DatasetKind::ImageExplanation,
        (TaskKind::Caption, false) => DatasetKind::ImageCaption,
        (TaskKind::Caption, true) => DatasetKind::VideoCaption,
        (TaskKind::Stream, _) => DatasetKind::StreamingVideoCaption,
    }
}

/// Optional stopping rule layered over the step cap (desk-scale overfit runs
/// stop as soon as the loss target is met).
#[derive(Debug, Clone, Default)]
pub struct StopRule {
    pub max_steps: Option<usize>,
    pub stop_below_loss: Option<f64>,
}

/// Run one stage: AdamW on the stage's trainable components only, seeded
/// batch order, loss trace, checksums before/after.
pub fn train_stage(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &StageConfig,
    seed: u64,
    stop: &StopRule,
) -> Result<TrainReport> {
    if dataset.kinds != cfg.dataset_mix {
        return Err(Error::config(format!(
            "dataset mix {:?} does not match stage {} mix {:?}",
            dataset.kinds, cfg.stage, cfg.dataset_mix
        )));
    }
    let mut trainable: BTreeSet<String> = BTreeSet::new();
    for comp in &cfg.trainable {
        match comp {
            Component::Perceiver => trainable.extend(model.perceiver.trainable_parameters()),
            Component::Projector => trainable.extend(model.projector.trainable_parameters()),
            Component::Decoder => trainable.extend(model.decoder.trainable_parameters()),
        }
    }

    let n = dataset.samples.len();
    let batch_size = cfg.batch_size.min(n).max(1);
    let steps_per_epoch = n.div_ceil(batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(cap) = stop.max_steps {
        total_steps = cap;
    }
    if total_steps == 0 {
        return Err(Error::config("stage would run zero steps".to_string()));
    }

    let checksums_before = hex_checksums(model);
    let mut optimizer = AdamW::new(&trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ fnv(cfg.stage.as_str())));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let mut batch: Vec<&TrainSample> = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset.samples[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &trainable)?;
        let loss = model.batch_loss_on_tape(&mut tape, &binding, &batch)?;
        let loss_value = tape.data(loss)[0];
        tape.backward(loss)?;
        let grads = binding.read_grads(&tape);
        let lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio)?;
        optimizer.apply(model, &grads, lr)?;
        losses.push(loss_value);
        if let Some(threshold) = stop.stop_below_loss {
            if loss_value < threshold {
                break;
            }
        }
    }

    let checksums_after = hex_checksums(model);
    let backbone_frozen = checksums_before["backbone"] == checksums_after["backbone"];
    Ok(TrainReport {
        stage: cfg.stage.to_string(),
        steps: losses.len(),
        final_loss: *losses.last().expect("ran at least one step"),
        losses,
        checksums_before,
        checksums_after,
        backbone_frozen,
    })
}

/// Stage ordering: the published order, the skip-video ablation, or a single
/// all-in-one pass (stage-2 trainable set and hyperparameters over the union
/// of all datasets).
#[derive(Debug, Clone, PartialEq)]
pub enum CurriculumPlan {
    Stages(Vec<Stage>),
    AllInOne,
}

impl CurriculumPlan {
    pub fn standard() -> Self {
        CurriculumPlan::Stages(vec![Stage::S1, Stage::S1_5, Stage::S2])
    }

    /// "1,1.5,2" / "1,2" / "all-in-one".
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim() == "all-in-one" {
            return Ok(CurriculumPlan::AllInOne);
        }
        let stages = s
            .split(',')
            .map(Stage::parse)
            .collect::<Result<Vec<_>>>()?;
        if stages.is_empty() {
            return Err(Error::config("empty stage list".to_string()));
        }
        Ok(CurriculumPlan::Stages(stages))
    }
}

/// Execute the plan in order, threading model parameters from stage to
/// stage.
pub fn run_curriculum(
    model: &mut Model,
    datasets: &BTreeMap<Stage, Dataset>,
    plan: &CurriculumPlan,
    overrides: &TrainOverrides,
    seed: u64,
    stop: &StopRule,
) -> Result<Vec<TrainReport>> {
    match plan {
        CurriculumPlan::Stages(stages) => {
            let mut reports = Vec::new();
            for stage in stages {
                let dataset = datasets.get(stage).ok_or_else(|| {
                    Error::config(format!("no dataset provided for stage {stage}"))
                })?;
                let cfg = StageConfig::defaults(*stage).with_overrides(overrides);
                reports.push(train_stage(model, dataset, &cfg, seed, stop)?);
            }
            Ok(reports)
        }
        CurriculumPlan::AllInOne => {
            let mut merged: Option<Dataset> = None;
            for dataset in datasets.values() {
                merged = Some(match merged {
                    None => dataset.clone(),
                    Some(acc) => acc.merge(dataset.clone()),
                });
            }
            let merged =
                merged.ok_or_else(|| Error::config("no datasets provided".to_string()))?;
            let mut cfg = StageConfig::defaults(Stage::S2).with_overrides(overrides);
            cfg.dataset_mix = merged.kinds.clone();
            let mut report = train_stage(model, &merged, &cfg, seed, stop)?;
            report.stage = "all-in-one".to_string();
            Ok(vec![report])
        }
    }
}

// ── synthetic data ───────────────────────────────────────────────────

const CATEGORY_WORDS: &[&str] = &["cube", "ball", "cone", "ring", "disk", "slab", "rod", "knot"];
const COLOR_WORDS: &[&str] = &["red", "blue", "green", "amber", "violet", "teal", "gray", "pink"];
const MOTION_WORDS: &[&str] = &["rolls", "spins", "drifts", "slides", "bounces", "rests", "turns", "sways"];

/// Deterministic annotation-style samples for one dataset kind.
fn synthetic_samples(
    model: &Model,
    kind: DatasetKind,
    count: usize,
    seed: u64,
    video_frames: usize,
) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let key = mix64(seed ^ fnv(&format!("{kind:?}")) ^ i as u64);
        let color = COLOR_WORDS[(key % 8) as usize];
        let noun = CATEGORY_WORDS[((key >> 8) % 8) as usize];
        let motion = MOTION_WORDS[((key >> 16) % 8) as usize];
        let frames = if kind.is_video() { video_frames } else { 1 };
        let media = MediaSpec::Synthetic { seed: key, frames, fps: 1.0 };
        let prompt = PromptSpec::point(
            0.1 + 0.8 * ((key >> 24) % 64) as f64 / 63.0,
            0.1 + 0.8 * ((key >> 32) % 64) as f64 / 63.0,
        );
        let fused = model.encode_frames(&media, &prompt)?;
        let roles = model.projector.plan_roles(frames, 0)?;
        let (prev, response) = match kind {
            DatasetKind::ImageClassification => (None, format!("{color} {noun}")),
            DatasetKind::ImageCaption => (None, format!("a {color} {noun}")),
            DatasetKind::ImageExplanation => (None, format!("the {noun} marks a spot")),
            DatasetKind::VideoCaption => (None, format!("the {color} {noun} {motion}")),
            DatasetKind::StreamingVideoCaption => {
                (Some(format!("a {color} {noun} appeared")), format!("it {motion}"))
            }
        };
        samples.push(TrainSample {
            media_id: media.id(),
            fused,
            roles,
            task: kind.task(),
            language: "en".to_string(),
            prev_description: prev,
            response,
        });
    }
    Ok(samples)
}

/// Deterministic dataset matching a stage's mix: `per_kind` samples of every
/// kind the stage expects.
pub fn synthetic_dataset(model: &Model, stage: Stage, seed: u64, per_kind: usize) -> Result<Dataset> {
    let mut samples = Vec::new();
    for kind in stage_dataset_mix(stage) {
        samples.extend(synthetic_samples(model, kind, per_kind, seed, 2)?);
    }
    Dataset::new(samples)
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
    use crate::config::RunConfig;

    #[test]
    fn trainable_sets_match_stage_table() {
        assert_eq!(
            trainable_components(Stage::S1),
            BTreeSet::from([Component::Perceiver, Component::Projector])
        );
        assert_eq!(
            trainable_components(Stage::S1_5),
            BTreeSet::from([Component::Perceiver, Component::Projector])
        );
        assert_eq!(
            trainable_components(Stage::S2),
            BTreeSet::from([Component::Perceiver, Component::Projector, Component::Decoder])
        );
    }

    #[test]
    fn stage_defaults_match_published_table() {
        let s1 = StageConfig::defaults(Stage::S1);
        assert_eq!((s1.base_lr, s1.batch_size), (1e-4, 1024));
        let s15 = StageConfig::defaults(Stage::S1_5);
        assert_eq!((s15.base_lr, s15.batch_size), (4e-5, 1024));
        let s2 = StageConfig::defaults(Stage::S2);
        assert_eq!((s2.base_lr, s2.batch_size), (1e-5, 256));
        for cfg in [&s1, &s15, &s2] {
            assert_eq!(cfg.warmup_ratio, 0.03);
            assert_eq!(cfg.epochs, 1);
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_warmup_boundary() {
        let total = 100;
        let base = 1e-3;
        assert_eq!(lr_schedule(0, total, base, 0.03).unwrap(), 0.0);
        // warmup = ceil(3) = 3 steps; step 3 is exactly base_lr.
        assert_eq!(lr_schedule(3, total, base, 0.03).unwrap(), base);
        assert!(lr_schedule(4, total, base, 0.03).unwrap() < base);
        let end = lr_schedule(total, total, base, 0.03).unwrap();
        assert!(end.abs() < 1e-18);
        assert!(matches!(lr_schedule(0, 0, base, 0.03), Err(Error::Config(_))));
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut model = Model::from_config(&RunConfig::desk_scale(3)).unwrap();
        let before = model.checksums();
        let trainable = model.perceiver.trainable_parameters();
        let mut opt = AdamW::new(&trainable);
        let grads: BTreeMap<String, Vec<f64>> = trainable
            .iter()
            .map(|n| {
                let p = model.perceiver.params().get(n).unwrap();
                (n.clone(), vec![0.0; p.numel()])
            })
            .collect();
        opt.apply(&mut model, &grads, 1e-3).unwrap();
        assert_eq!(model.checksums(), before);
    }

    #[test]
    fn optimizer_state_only_for_trainable() {
        let trainable = BTreeSet::from(["perceiver.bank".to_string()]);
        let opt = AdamW::new(&trainable);
        let tracked: Vec<&String> = opt.tracked_names().collect();
        assert_eq!(tracked, vec!["perceiver.bank"]);
    }

    #[test]
    fn stage_mix_validation_rejects_wrong_dataset() {
        let mut model = Model::from_config(&RunConfig::desk_scale(5)).unwrap();
        let s1_data = synthetic_dataset(&model, Stage::S1, 11, 1).unwrap();
        let cfg = StageConfig::defaults(Stage::S2);
        let err = train_stage(&mut model, &s1_data, &cfg, 5, &StopRule::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn short_stage_run_trains_and_freezes_backbone() {
        let mut model = Model::from_config(&RunConfig::desk_scale(5)).unwrap();
        let data = synthetic_dataset(&model, Stage::S1, 11, 2).unwrap();
        let cfg = StageConfig::defaults(Stage::S1).with_overrides(&TrainOverrides {
            batch_size: Some(4),
            steps: None,
            base_lr: Some(1e-3),
        });
        let report = train_stage(
            &mut model,
            &data,
            &cfg,
            5,
            &StopRule { max_steps: Some(5), stop_below_loss: None },
        )
        .unwrap();
        assert_eq!(report.steps, 5);
        assert!(report.backbone_frozen);
        assert_eq!(report.checksums_before["backbone"], report.checksums_after["backbone"]);
        assert_ne!(report.checksums_before["perceiver"], report.checksums_after["perceiver"]);
        assert_ne!(report.checksums_before["projector"], report.checksums_after["projector"]);
        // Stage 1 leaves the decoder untouched.
        assert_eq!(report.checksums_before["decoder"], report.checksums_after["decoder"]);
    }

    #[test]
    fn curriculum_orders_and_threading() {
        let mut model = Model::from_config(&RunConfig::desk_scale(6)).unwrap();
        let datasets: BTreeMap<Stage, Dataset> = [Stage::S1, Stage::S1_5, Stage::S2]
            .into_iter()
            .map(|s| (s, synthetic_dataset(&model, s, 21, 1).unwrap()))
            .collect();
        let overrides = TrainOverrides {
            batch_size: Some(4),
            steps: None,
            base_lr: Some(1e-3),
        };
        let stop = StopRule { max_steps: Some(2), stop_below_loss: None };
        let reports = run_curriculum(
            &mut model,
            &datasets,
            &CurriculumPlan::standard(),
            &overrides,
            6,
            &stop,
        )
        .unwrap();
        assert_eq!(
            reports.iter().map(|r| r.stage.as_str()).collect::<Vec<_>>(),
            vec!["1", "1.5", "2"]
        );
        // Threading: stage k+1 starts from stage k's final weights.
        for pair in reports.windows(2) {
            assert_eq!(pair[0].checksums_after["perceiver"], pair[1].checksums_before["perceiver"]);
        }
        assert!(reports.iter().all(|r| r.backbone_frozen));

        // Ablation orders parse.
        assert_eq!(
            CurriculumPlan::parse("1,2").unwrap(),
            CurriculumPlan::Stages(vec![Stage::S1, Stage::S2])
        );
        assert_eq!(CurriculumPlan::parse("all-in-one").unwrap(), CurriculumPlan::AllInOne);
        assert!(CurriculumPlan::parse("7").is_err());
    }

    #[test]
    fn all_in_one_merges_datasets() {
        let mut model = Model::from_config(&RunConfig::desk_scale(8)).unwrap();
        let datasets: BTreeMap<Stage, Dataset> = [Stage::S1, Stage::S2]
            .into_iter()
            .map(|s| (s, synthetic_dataset(&model, s, 31, 1).unwrap()))
            .collect();
        let overrides = TrainOverrides {
            batch_size: Some(4),
            steps: None,
            base_lr: Some(1e-3),
        };
        let stop = StopRule { max_steps: Some(2), stop_below_loss: None };
        let reports = run_curriculum(
            &mut model,
            &datasets,
            &CurriculumPlan::AllInOne,
            &overrides,
            8,
            &stop,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].stage, "all-in-one");
        assert!(reports[0].backbone_frozen);
    }
}
