//! Data refinement/augmentation pipeline: keyframe storyboards with
//! set-of-mark overlays, event segmentation, chained LLM elaboration,
//! rule-based cleaning, and bilingual duplication. External models live
//! behind the pluggable clients in [`client`]; mocks keep every test
//! deterministic and offline.

pub mod client;
pub mod record;
pub mod storyboard;

pub use client::{
    complete_with_retries, ClientRequest, EventSegment, EventSegmenter, FixtureClient, HttpClient,
    HttpSegmenter, MockAnnotator, MockSegmenter, MockTranslator, TextClient, TRANSLATE_MARKER,
};
pub use record::{
    read_records, script_matches, write_flagged, write_records, AnnotationRecord, EventAnnotation,
    FlaggedRecord, Modality, SCHEMA_HEADER,
};
pub use storyboard::{
    compose_storyboard, encode_png, sample_keyframes, som_overlay, synthetic_frame, Mark,
    StoryboardSpec, STORYBOARD_FRAMES,
};

use std::time::Duration;

use image::RgbImage;

use crate::config::{ClientSettings, TaskKind};
use crate::error::{Error, Result};
use crate::model::MediaSpec;

const ORIGINAL_SLOT: &str = "original";

/// Validated event segmentation: segments must be sorted, non-overlapping,
/// and cover (0, duration] exactly.
pub fn segment_events(
    media_id: &str,
    duration: f64,
    segmenter: &dyn EventSegmenter,
) -> Result<Vec<EventSegment>> {
    if duration <= 0.0 {
        return Err(Error::input("duration must be positive".to_string()));
    }
    let segments = segmenter.segment(media_id, duration)?;
    if segments.is_empty() {
        return Err(Error::data("segmenter returned no events".to_string()));
    }
    if segments.iter().any(|s| s.t0 >= s.t1) {
        return Err(Error::data("segmenter returned an empty interval".to_string()));
    }
    if segments[0].t0 != 0.0 || segments.last().expect("nonempty").t1 != duration {
        return Err(Error::data("segments must cover (0, duration]".to_string()));
    }
    if segments.windows(2).any(|w| w[0].t1 != w[1].t0) {
        return Err(Error::data("segments must be contiguous and non-overlapping".to_string()));
    }
    Ok(segments)
}

/// The elaboration prompt, golden-pinned by tests. `storyboard_ref` names
/// the attached composite; `previous` chains the preceding clip description
/// for streaming refinement.
pub fn elaboration_prompt(
    task: TaskKind,
    media: &str,
    storyboard_ref: &str,
    original: &str,
    previous: Option<&str>,
) -> String {
    let previous_line = match previous {
        Some(p) => format!("Previous: {p}\n"),
        None => String::new(),
    };
    format!(
        "Refine this region annotation.\nTask: {task}\nMedia: {media}\nStoryboard: {storyboard_ref}\nOriginal: {original}\n{previous_line}Respond with the improved {task} text only."
    )
}

/// Refine one record through the annotator client. The source text is read
/// from the `original` slot (seeded from the task slot on first contact), so
/// repeated elaboration with a deterministic client is idempotent.
pub fn elaborate(
    mut rec: AnnotationRecord,
    annotator: &dyn TextClient,
    storyboard_png: Option<&[u8]>,
    storyboard_ref: &str,
    prev_description: Option<&str>,
    retries: u32,
) -> Result<AnnotationRecord> {
    if !rec.responses.contains_key(ORIGINAL_SLOT) {
        let seed = rec
            .task_response()
            .or_else(|| rec.responses.values().next())
            .cloned()
            .ok_or_else(|| Error::data("record has no original annotation".to_string()))?;
        rec.responses.insert(ORIGINAL_SLOT.to_string(), seed);
    }
    let original = rec.responses[ORIGINAL_SLOT].clone();
    let prompt =
        elaboration_prompt(rec.task, &rec.media, storyboard_ref, &original, prev_description);
    let request = match storyboard_png {
        Some(png) => ClientRequest::with_png(prompt, png),
        None => ClientRequest::text(prompt),
    };
    let reply = complete_with_retries(annotator, &request, retries)?;
    if reply.trim().is_empty() {
        return Err(Error::data("annotator returned an empty response".to_string()));
    }
    rec.responses.insert(rec.task.as_str().to_string(), reply);
    Ok(rec)
}

/// Rule-based cleaning. Classification, not failure: every record lands in
/// `kept` or `flagged` with a reason.
pub fn clean(records: Vec<AnnotationRecord>) -> (Vec<AnnotationRecord>, Vec<FlaggedRecord>) {
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    let mut seen_keys = std::collections::BTreeSet::new();
    for rec in records {
        let reason = clean_reason(&rec, &mut seen_keys);
        match reason {
            None => kept.push(rec),
            Some(reason) => flagged.push(FlaggedRecord { reason, record: rec }),
        }
    }
    (kept, flagged)
}

fn clean_reason(
    rec: &AnnotationRecord,
    seen_keys: &mut std::collections::BTreeSet<String>,
) -> Option<String> {
    let response = rec.task_response();
    match response {
        None => return Some("empty_response".to_string()),
        Some(text) if text.trim().is_empty() => return Some("empty_response".to_string()),
        _ => {}
    }
    let response = response.expect("checked above");
    if rec.task == TaskKind::Caption && response.chars().count() < 3 {
        return Some("too_short".to_string());
    }
    if !rec.events_well_formed() || (rec.task == TaskKind::Stream && rec.events.is_empty()) {
        return Some("bad_events".to_string());
    }
    if !script_matches(&rec.language, response)
        || rec.events.iter().any(|e| !script_matches(&rec.language, &e.text))
    {
        return Some("language_mismatch".to_string());
    }
    if !seen_keys.insert(rec.key()) {
        return Some("duplicate".to_string());
    }
    None
}

/// Duplicate an English record into an (en, zh) pair via the translator
/// client: identical non-text fields, every response and event text
/// translated.
pub fn bilingualize(
    rec: &AnnotationRecord,
    translator: &dyn TextClient,
    retries: u32,
) -> Result<[AnnotationRecord; 2]> {
    if rec.language != "en" {
        return Err(Error::input(format!(
            "bilingualize expects an en record, got {:?}",
            rec.language
        )));
    }
    let translate = |text: &str| -> Result<String> {
        let request = ClientRequest::text(format!("{TRANSLATE_MARKER}\n{text}"));
        complete_with_retries(translator, &request, retries)
    };
    let mut zh = rec.clone();
    zh.language = "zh".to_string();
    for value in zh.responses.values_mut() {
        *value = translate(value)?;
    }
    for event in &mut zh.events {
        event.text = translate(&event.text)?;
    }
    Ok([rec.clone(), zh])
}

// ── orchestration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    Image,
    Video,
    Stream,
}

impl PipelineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(PipelineMode::Image),
            "video" => Ok(PipelineMode::Video),
            "stream" => Ok(PipelineMode::Stream),
            other => Err(Error::input(format!("unknown pipeline mode {other:?}"))),
        }
    }
}

pub struct PipelineClients {
    pub annotator: Box<dyn TextClient>,
    pub translator: Box<dyn TextClient>,
    pub segmenter: Box<dyn EventSegmenter>,
}

impl PipelineClients {
    pub fn mock(event_window: f64) -> Self {
        PipelineClients {
            annotator: Box::new(MockAnnotator),
            translator: Box::new(MockTranslator),
            segmenter: Box::new(MockSegmenter { window: event_window }),
        }
    }

    /// Build clients from settings; "http" requires an endpoint.
    pub fn from_settings(settings: &ClientSettings) -> Result<Self> {
        match settings.mode.as_str() {
            "mock" => Ok(Self::mock(settings.mock_event_window)),
            "http" => {
                let endpoint = settings.endpoint.as_deref().ok_or_else(|| {
                    Error::config("clients.mode=http requires clients.endpoint".to_string())
                })?;
                let timeout = Duration::from_millis(settings.timeout_ms);
                Ok(PipelineClients {
                    annotator: Box::new(HttpClient::new(endpoint, timeout)?),
                    translator: Box::new(HttpClient::new(endpoint, timeout)?),
                    segmenter: Box::new(HttpSegmenter {
                        client: HttpClient::new(endpoint, timeout)?,
                    }),
                })
            }
            other => Err(Error::config(format!("unknown client mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub kept: Vec<AnnotationRecord>,
    pub flagged: Vec<FlaggedRecord>,
}

const FRAME_SIDE: u32 = 64;

fn media_frames(media: &MediaSpec, total: usize) -> Vec<RgbImage> {
    match media {
        MediaSpec::Synthetic { seed, .. } => {
            (0..total).map(|i| synthetic_frame(*seed, i, FRAME_SIDE, FRAME_SIDE)).collect()
        }
        MediaSpec::Png { path } => {
            let img = image::open(path)
                .map(|i| i.to_rgb8())
                .unwrap_or_else(|_| synthetic_frame(0, 0, FRAME_SIDE, FRAME_SIDE));
            vec![img; total]
        }
    }
}

/// Storyboard over a frame range, cycling short clips up to six cells.
fn storyboard_for_range(
    frames: &[RgbImage],
    range: std::ops::Range<usize>,
    mark: &Mark,
) -> Result<(Vec<u8>, StoryboardSpec)> {
    let clip: Vec<&RgbImage> = frames[range.clone()].iter().collect();
    let (cells, keyframes): (Vec<RgbImage>, Vec<usize>) = if clip.len() >= STORYBOARD_FRAMES {
        let idx = sample_keyframes(clip.len(), STORYBOARD_FRAMES)?;
        (idx.iter().map(|&i| clip[i].clone()).collect(), idx.iter().map(|&i| i + range.start).collect())
    } else {
        // Short clips cycle their frames to fill the fixed 2x3 grid.
        (0..STORYBOARD_FRAMES)
            .map(|i| (clip[i % clip.len()].clone(), range.start + (i % clip.len())))
            .unzip()
    };
    let marks = vec![mark.clone(); STORYBOARD_FRAMES];
    let (composite, spec) = compose_storyboard(&cells, &marks, &keyframes)?;
    Ok((encode_png(&composite)?, spec))
}

fn process_one(
    rec: AnnotationRecord,
    mode: PipelineMode,
    clients: &PipelineClients,
    retries: u32,
) -> Result<AnnotationRecord> {
    let media = MediaSpec::parse(&rec.media)?;
    let mark = Mark { region: rec.prompt.clone(), color: [255, 32, 32] };
    match mode {
        PipelineMode::Image => {
            let frame = media_frames(&media, 1).remove(0);
            let marked = som_overlay(&frame, &mark.region, mark.color)?;
            let png = encode_png(&marked)?;
            elaborate(rec, clients.annotator.as_ref(), Some(&png), "som-marked-frame", None, retries)
        }
        PipelineMode::Video => {
            let total = media.frame_count();
            let frames = media_frames(&media, total);
            let (png, spec) = storyboard_for_range(&frames, 0..total, &mark)?;
            let reference = format!("storyboard-2x3-keyframes-{:?}", spec.keyframes);
            elaborate(rec, clients.annotator.as_ref(), Some(&png), &reference, None, retries)
        }
        PipelineMode::Stream => {
            let duration = media.duration();
            let mut rec = rec;
            if rec.events.is_empty() {
                rec.events = segment_events(&rec.media, duration, clients.segmenter.as_ref())?
                    .into_iter()
                    .map(|s| EventAnnotation {
                        t0: s.t0,
                        t1: s.t1,
                        text: rec
                            .responses
                            .get(ORIGINAL_SLOT)
                            .or_else(|| rec.responses.values().next())
                            .cloned()
                            .unwrap_or_default(),
                        subject: None,
                    })
                    .collect();
            }
            let total = media.frame_count();
            let frames = media_frames(&media, total);
            let times = media.frame_times();
            let mut prev: Option<String> = None;
            let mut refined_events = Vec::with_capacity(rec.events.len());
            for event in &rec.events {
                let start = times.iter().position(|&t| t > event.t0).unwrap_or(0);
                let end = times
                    .iter()
                    .position(|&t| t > event.t1)
                    .unwrap_or(times.len())
                    .max(start + 1);
                let (png, spec) = storyboard_for_range(&frames, start..end, &mark)?;
                let reference = format!(
                    "storyboard-2x3-clip-{:.2}-{:.2}-keyframes-{:?}",
                    event.t0, event.t1, spec.keyframes
                );
                let prompt = elaboration_prompt(
                    rec.task,
                    &rec.media,
                    &reference,
                    &event.text,
                    prev.as_deref(),
                );
                let reply = complete_with_retries(
                    clients.annotator.as_ref(),
                    &ClientRequest::with_png(prompt, &png),
                    retries,
                )?;
                if reply.trim().is_empty() {
                    return Err(Error::data("annotator returned an empty response".to_string()));
                }
                prev = Some(reply.clone());
                refined_events.push(EventAnnotation {
                    t0: event.t0,
                    t1: event.t1,
                    text: reply,
                    subject: event.subject.clone(),
                });
            }
            if !rec.responses.contains_key(ORIGINAL_SLOT) {
                if let Some(seed) = rec.responses.values().next().cloned() {
                    rec.responses.insert(ORIGINAL_SLOT.to_string(), seed);
                }
            }
            let joined = refined_events
                .iter()
                .map(|e| e.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            rec.events = refined_events;
            rec.responses.insert(TaskKind::Stream.as_str().to_string(), joined);
            Ok(rec)
        }
    }
}

/// Run the refinement pipeline over a record batch: per-record elaboration
/// (failures flagged, never fatal), rule-based cleaning, optional bilingual
/// duplication, canonical key order on the way out.
pub fn process_records(
    records: Vec<AnnotationRecord>,
    mode: PipelineMode,
    clients: &PipelineClients,
    bilingual: bool,
    retries: u32,
) -> Result<PipelineOutput> {
    let mut processed = Vec::new();
    let mut flagged = Vec::new();
    for rec in records {
        let original = rec.clone();
        match process_one(rec, mode, clients, retries) {
            Ok(refined) => processed.push(refined),
            Err(Error::Client(msg)) => {
                flagged.push(FlaggedRecord { reason: format!("client_error: {msg}"), record: original })
            }
            Err(Error::Data(msg)) => {
                flagged.push(FlaggedRecord { reason: format!("data_error: {msg}"), record: original })
            }
            Err(other) => return Err(other),
        }
    }
    let (mut kept, newly_flagged) = clean(processed);
    flagged.extend(newly_flagged);

    if bilingual {
        let mut expanded = Vec::with_capacity(kept.len() * 2);
        for rec in kept {
            if rec.language != "en" {
                expanded.push(rec);
                continue;
            }
            match bilingualize(&rec, clients.translator.as_ref(), retries) {
                Ok([en, zh]) => {
                    expanded.push(en);
                    expanded.push(zh);
                }
                Err(Error::Client(msg)) => {
                    flagged.push(FlaggedRecord {
                        reason: format!("translation_failed: {msg}"),
                        record: rec.clone(),
                    });
                    expanded.push(rec);
                }
                Err(other) => return Err(other),
            }
        }
        kept = expanded;
    }

    kept.sort_by_key(AnnotationRecord::key);
    flagged.sort_by(|a, b| (a.record.key(), &a.reason).cmp(&(b.record.key(), &b.reason)));
    Ok(PipelineOutput { kept, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PromptSpec;
    use std::collections::BTreeMap;

    fn seed_record(media: &str, task: TaskKind, original: &str) -> AnnotationRecord {
        let mut responses = BTreeMap::new();
        responses.insert(ORIGINAL_SLOT.to_string(), original.to_string());
        AnnotationRecord {
            media: media.to_string(),
            modality: if media.contains("frames=1,") { Modality::Image } else { Modality::Video },
            prompt: PromptSpec::bbox(0.2, 0.2, 0.8, 0.8),
            task,
            language: "en".to_string(),
            responses,
            events: Vec::new(),
        }
    }

    #[test]
    fn elaboration_prompt_is_golden_pinned() {
        let prompt = elaboration_prompt(
            TaskKind::Caption,
            "synth:seed=1,frames=1,fps=1",
            "som-marked-frame",
            "a brown dog",
            None,
        );
        assert_eq!(
            prompt,
            "Refine this region annotation.\nTask: caption\nMedia: synth:seed=1,frames=1,fps=1\nStoryboard: som-marked-frame\nOriginal: a brown dog\nRespond with the improved caption text only."
        );
        let with_prev = elaboration_prompt(
            TaskKind::Stream,
            "m",
            "sb",
            "orig",
            Some("clip one text"),
        );
        assert!(with_prev.contains("Previous: clip one text\n"));
    }

    #[test]
    fn elaborate_is_idempotent_with_mock() {
        let rec = seed_record("synth:seed=1,frames=1,fps=1", TaskKind::Caption, "a brown dog");
        let once = elaborate(rec.clone(), &MockAnnotator, None, "ref", None, 0).unwrap();
        let twice = elaborate(once.clone(), &MockAnnotator, None, "ref", None, 0).unwrap();
        assert_eq!(once, twice);
        assert!(once.responses["caption"].contains("a brown dog"));
        assert_eq!(once.responses[ORIGINAL_SLOT], "a brown dog");
    }

    #[test]
    fn elaborate_without_any_annotation_is_data_error() {
        let mut rec = seed_record("m", TaskKind::Caption, "x");
        rec.responses.clear();
        assert!(matches!(
            elaborate(rec, &MockAnnotator, None, "ref", None, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn segment_events_mock_and_validation() {
        let segs = segment_events("m", 6.0, &MockSegmenter { window: 2.0 }).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0].t0, segs[0].t1), (0.0, 2.0));

        struct Overlapping;
        impl EventSegmenter for Overlapping {
            fn segment(&self, _m: &str, _d: f64) -> Result<Vec<EventSegment>> {
                Ok(vec![
                    EventSegment { t0: 0.0, t1: 3.0 },
                    EventSegment { t0: 2.0, t1: 6.0 },
                ])
            }
        }
        assert!(matches!(segment_events("m", 6.0, &Overlapping), Err(Error::Data(_))));
        assert!(matches!(
            segment_events("m", 0.0, &MockSegmenter { window: 2.0 }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn clean_rules_fire_in_order() {
        let good = {
            let mut r = seed_record("m1", TaskKind::Caption, "a dog");
            r.responses.insert("caption".into(), "a refined dog".into());
            r
        };
        let empty = {
            let mut r = seed_record("m2", TaskKind::Caption, "x");
            r.responses.insert("caption".into(), "   ".into());
            r
        };
        let too_short = {
            let mut r = seed_record("m3", TaskKind::Caption, "x");
            r.responses.insert("caption".into(), "ok".into());
            r
        };
        let bad_events = {
            let mut r = seed_record("m4", TaskKind::Stream, "x");
            r.responses.insert("stream".into(), "event text".into());
            r.events = vec![
                EventAnnotation { t0: 2.0, t1: 4.0, text: "b".into(), subject: None },
                EventAnnotation { t0: 0.0, t1: 2.0, text: "a".into(), subject: None },
            ];
            r
        };
        let mismatch = {
            let mut r = seed_record("m5", TaskKind::Caption, "x");
            r.responses.insert("caption".into(), "中文内容不符".into());
            r
        };
        let dup = good.clone();
        let (kept, flagged) = clean(vec![good, empty, too_short, bad_events, mismatch, dup]);
        assert_eq!(kept.len(), 1);
        let reasons: Vec<&str> = flagged.iter().map(|f| f.reason.as_str()).collect();
        assert_eq!(
            reasons,
            vec!["empty_response", "too_short", "bad_events", "language_mismatch", "duplicate"]
        );
    }

    #[test]
    fn bilingualize_pairs_and_translates() {
        let mut rec = seed_record("m", TaskKind::Caption, "a dog");
        rec.responses.insert("caption".into(), "a refined dog".into());
        let [en, zh] = bilingualize(&rec, &MockTranslator, 0).unwrap();
        assert_eq!(en, rec);
        assert_eq!(zh.language, "zh");
        assert_eq!(zh.media, en.media);
        assert_eq!(zh.prompt, en.prompt);
        assert_ne!(zh.responses["caption"], en.responses["caption"]);
        assert!(script_matches("zh", &zh.responses["caption"]));

        let zh_input = zh.clone();
        assert!(matches!(
            bilingualize(&zh_input, &MockTranslator, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn pipeline_is_deterministic_and_doubles_bilingually() {
        let records: Vec<AnnotationRecord> = (0..10)
            .map(|i| {
                seed_record(
                    &format!("synth:seed={i},frames=1,fps=1"),
                    TaskKind::Caption,
                    &format!("object number {i}"),
                )
            })
            .collect();
        let clients = PipelineClients::mock(2.0);
        let a = process_records(records.clone(), PipelineMode::Image, &clients, true, 0).unwrap();
        let b = process_records(records, PipelineMode::Image, &clients, true, 0).unwrap();
        assert_eq!(a.kept, b.kept);
        assert_eq!(a.kept.len(), 20);
        assert!(a.flagged.is_empty());
        assert_eq!(a.kept.iter().filter(|r| r.language == "zh").count(), 10);
    }

    #[test]
    fn stream_pipeline_chains_previous_descriptions() {
        let clients = PipelineClients::mock(2.0);
        let rec = seed_record("synth:seed=3,frames=6,fps=1", TaskKind::Stream, "a runner");
        let out = process_records(vec![rec.clone()], PipelineMode::Stream, &clients, false, 0)
            .unwrap();
        assert_eq!(out.kept.len(), 1);
        let refined = &out.kept[0];
        assert_eq!(refined.events.len(), 3);

        // The mock annotator is a pure function of the prompt, so each
        // stored event text proves what its prompt contained: re-derive the
        // prompt for event i with event i-1's refined text chained in and
        // the mock must reproduce the stored refinement exactly.
        let media = MediaSpec::parse(&rec.media).unwrap();
        let frames = media_frames(&media, media.frame_count());
        let times = media.frame_times();
        let mark = Mark { region: rec.prompt.clone(), color: [255, 32, 32] };
        let mut prev: Option<String> = None;
        for (i, event) in refined.events.iter().enumerate() {
            let start = times.iter().position(|&t| t > event.t0).unwrap_or(0);
            let end = times
                .iter()
                .position(|&t| t > event.t1)
                .unwrap_or(times.len())
                .max(start + 1);
            let (_, spec) = storyboard_for_range(&frames, start..end, &mark).unwrap();
            let reference = format!(
                "storyboard-2x3-clip-{:.2}-{:.2}-keyframes-{:?}",
                event.t0, event.t1, spec.keyframes
            );
            let prompt =
                elaboration_prompt(rec.task, &rec.media, &reference, "a runner", prev.as_deref());
            if i > 0 {
                assert!(prompt.contains(&format!("Previous: {}", refined.events[i - 1].text)));
            }
            let expected = MockAnnotator.complete(&ClientRequest::text(prompt)).unwrap();
            assert_eq!(event.text, expected);
            prev = Some(event.text.clone());
        }
        assert!(refined.responses["stream"].contains(&refined.events[0].text));
    }

    #[test]
    fn pipeline_flags_failures_and_continues() {
        struct AlwaysFails;
        impl TextClient for AlwaysFails {
            fn complete(&self, _r: &ClientRequest) -> Result<String> {
                Err(Error::client("timeout"))
            }
        }
        let clients = PipelineClients {
            annotator: Box::new(AlwaysFails),
            translator: Box::new(MockTranslator),
            segmenter: Box::new(MockSegmenter { window: 2.0 }),
        };
        let records = vec![
            seed_record("synth:seed=1,frames=1,fps=1", TaskKind::Caption, "a"),
            seed_record("synth:seed=2,frames=1,fps=1", TaskKind::Caption, "b"),
        ];
        let out = process_records(records, PipelineMode::Image, &clients, false, 1).unwrap();
        assert!(out.kept.is_empty());
        assert_eq!(out.flagged.len(), 2);
        assert!(out.flagged.iter().all(|f| f.reason.starts_with("client_error")));
    }
}
