//! Frame-by-frame replay of recordings against a trained model.
//!
//! Frames are delivered in order on an injectable clock. At every qualifying
//! falling edge the context is assembled with the labeler's own window code,
//! the frontend and model run, and a [`DecisionEvent`] is emitted. Latency is
//! wall-clock time around frontend plus forward pass only.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TurnSample;
use crate::frontend::InputMode;
use crate::inference::{InferenceError, Predictor, SamplePrediction};
use crate::labels::{build_context_window, context_sample, label_recording, LabelConfig};
use crate::metrics::{ClassificationReport, Confusion, LatencySummary};
use crate::vad::{Channel, FallingEdgeDetector, Recording, TurnLabel};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("recording {id} does not fit the model: {reason}")]
    Mismatch { id: String, reason: String },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("no decision events to evaluate")]
    NoEvents,
    #[error("event {id}@{frame} has no ground truth")]
    MissingTruth { id: String, frame: usize },
    #[error("clock factor must be positive and finite, got {0}")]
    BadFactor(f64),
}

/// Simulated time source. Replay calls `advance_to` with the stream time of
/// each delivered frame, already divided by the acceleration factor.
pub trait Clock {
    fn advance_to(&mut self, t_s: f64);
    fn now_s(&self) -> f64;
}

/// Jumps straight to the requested time. Never sleeps.
#[derive(Debug, Default, Clone)]
pub struct VirtualClock {
    now: f64,
}

impl Clock for VirtualClock {
    fn advance_to(&mut self, t_s: f64) {
        self.now = self.now.max(t_s);
    }

    fn now_s(&self) -> f64 {
        self.now
    }
}

/// Sleeps until the requested time has passed since construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
    now: f64,
}

impl Default for WallClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
            now: 0.0,
        }
    }
}

impl Clock for WallClock {
    fn advance_to(&mut self, t_s: f64) {
        let target = Duration::from_secs_f64(t_s.max(0.0));
        let elapsed = self.origin.elapsed();
        if target > elapsed {
            std::thread::sleep(target - elapsed);
        }
        self.now = self.now.max(t_s);
    }

    fn now_s(&self) -> f64 {
        self.now
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Stream seconds per clock second.
    pub clock_factor: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { clock_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub source_id: String,
    pub channel: Channel,
    pub decision_frame: usize,
    /// Clock time at which the triggering frame was delivered.
    pub trigger_time_s: f64,
    pub decision: TurnLabel,
    pub probability: f32,
    pub logit: f32,
    pub compute_latency_ms: f64,
    pub ground_truth: Option<TurnLabel>,
}

fn timed_prediction(
    predictor: &Predictor,
    sample: &TurnSample,
) -> Result<(crate::inference::Prediction, f64), InferenceError> {
    let t0 = Instant::now();
    let p = predictor.predict_sample(sample)?;
    Ok((p, t0.elapsed().as_secs_f64() * 1e3))
}

/// Replays one recording. Channels are polled in order within each frame, so
/// events come out in (frame, channel) order like the batch labeler.
pub fn replay(
    rec: &Recording,
    predictor: &Predictor,
    labels: &LabelConfig,
    config: &ReplayConfig,
    clock: &mut dyn Clock,
) -> Result<Vec<DecisionEvent>, StreamError> {
    if !(config.clock_factor > 0.0 && config.clock_factor.is_finite()) {
        return Err(StreamError::BadFactor(config.clock_factor));
    }
    if predictor.frontend.config().input == InputMode::Audio && rec.audio.iter().any(Option::is_none) {
        return Err(StreamError::Mismatch {
            id: rec.id.clone(),
            reason: "model expects audio but the recording has VAD only".into(),
        });
    }
    let rate = rec.frame_rate_hz();
    let min_speech = labels.min_speech_frames(rate);
    let long_silence = labels.long_silence_frames(rate);
    let target = labels.context_frames(rate);
    // Ground truth needs the future, so it comes from the offline labeler.
    let truth: HashMap<(usize, Channel), TurnLabel> = label_recording(rec, labels)
        .0
        .into_iter()
        .map(|s| ((s.decision_frame, s.channel), s.label))
        .collect();

    let mut detectors = [FallingEdgeDetector::new(min_speech), FallingEdgeDetector::new(min_speech)];
    let mut events = Vec::new();
    for t in 0..rec.len() {
        let now = (t + 1) as f64 / rate as f64 / config.clock_factor;
        clock.advance_to(now);
        for c in Channel::BOTH {
            let frames = rec.channel(c).frames();
            let Some(edge) = detectors[c.index()].push(frames[t]) else {
                continue;
            };
            let history = &frames[..=t];
            let window = match build_context_window(history, edge, long_silence, target) {
                Ok(w) => w,
                Err(e) => {
                    log::warn!("{}@{edge}: no context ({e})", rec.id);
                    continue;
                }
            };
            let ground_truth = truth.get(&(edge, c)).copied();
            let sample = context_sample(rec, c, ground_truth.unwrap_or(TurnLabel::Hold), window);
            let (p, ms) = timed_prediction(predictor, &sample)?;
            events.push(DecisionEvent {
                source_id: rec.id.clone(),
                channel: c,
                decision_frame: edge,
                trigger_time_s: clock.now_s(),
                decision: p.decision,
                probability: p.probability,
                logit: p.logit,
                compute_latency_ms: ms,
                ground_truth,
            });
        }
    }
    Ok(events)
}

/// Replays recordings concurrently, each on its own virtual clock. Output
/// keeps the input order.
pub fn replay_all(
    recs: &[Recording],
    predictor: &Predictor,
    labels: &LabelConfig,
    config: &ReplayConfig,
) -> Result<Vec<DecisionEvent>, StreamError> {
    let per: Vec<Vec<DecisionEvent>> = recs
        .par_iter()
        .map(|r| replay(r, predictor, labels, config, &mut VirtualClock::default()))
        .collect::<Result<_, _>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Batch-mode events over labeled samples, one timed prediction each.
pub fn batch_events(predictor: &Predictor, samples: &[TurnSample]) -> Result<Vec<DecisionEvent>, StreamError> {
    samples
        .par_iter()
        .map(|s| {
            let (p, ms) = timed_prediction(predictor, s)?;
            Ok(DecisionEvent {
                source_id: s.source_id.clone(),
                channel: s.channel,
                decision_frame: s.decision_frame,
                trigger_time_s: (s.decision_frame + 1) as f64 / s.frame_rate_hz as f64,
                decision: p.decision,
                probability: p.probability,
                logit: p.logit,
                compute_latency_ms: ms,
                ground_truth: Some(s.label),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    #[serde(flatten)]
    pub classification: ClassificationReport,
    pub latency_ms: LatencySummary,
}

/// Accuracy, F1 (shift positive) and latency percentiles. Every event must
/// carry ground truth.
pub fn evaluate(events: &[DecisionEvent]) -> Result<StreamSummary, StreamError> {
    if events.is_empty() {
        return Err(StreamError::NoEvents);
    }
    let mut confusion = Confusion::default();
    for e in events {
        let truth = e.ground_truth.ok_or_else(|| StreamError::MissingTruth {
            id: e.source_id.clone(),
            frame: e.decision_frame,
        })?;
        confusion.add(e.decision, truth);
    }
    let ms: Vec<f64> = events.iter().map(|e| e.compute_latency_ms).collect();
    Ok(StreamSummary {
        classification: confusion.into(),
        latency_ms: LatencySummary::from_samples(&ms).ok_or(StreamError::NoEvents)?,
    })
}

/// Mismatches between replay events and batch predictions: every labeled
/// event must meet a batch prediction for the same point with the same
/// decision and bit-identical logit, and vice versa.
pub fn divergences(events: &[DecisionEvent], batch: &[SamplePrediction]) -> Vec<String> {
    let key = |id: &str, f: usize, c: Channel| (id.to_string(), f, c);
    let by_key: HashMap<_, _> = batch.iter().map(|p| (key(&p.id, p.decision_frame, p.channel), p)).collect();
    let mut seen = 0usize;
    let mut out = Vec::new();
    for e in events.iter().filter(|e| e.ground_truth.is_some()) {
        match by_key.get(&key(&e.source_id, e.decision_frame, e.channel)) {
            None => out.push(format!("{}@{} {:?}: no batch prediction", e.source_id, e.decision_frame, e.channel)),
            Some(p) => {
                seen += 1;
                if p.prediction.decision != e.decision || p.prediction.logit.to_bits() != e.logit.to_bits() {
                    out.push(format!(
                        "{}@{} {:?}: replay {:?} ({}) vs batch {:?} ({})",
                        e.source_id, e.decision_frame, e.channel, e.decision, e.logit, p.prediction.decision, p.prediction.logit
                    ));
                }
            }
        }
    }
    if seen != batch.len() {
        out.push(format!("{} batch predictions have no replay event", batch.len() - seen));
    }
    out
}
