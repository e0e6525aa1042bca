use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_context_window, consensus_with_weights, ContextWindow, FrameVerdict, LabelError, WeightScheme};
use crate::dataset::{AudioSpan, TurnSample};
use crate::frontend::AUDIO_SAMPLE_RATE_HZ;
use crate::vad::{find_decision_points, Channel, Recording, RecordingKind, TurnLabel};

/// Labeling pipeline configuration. Durations are in seconds and converted
/// to frames per recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub schemes: [WeightScheme; 3],
    pub min_speech_s: f64,
    pub long_silence_s: f64,
    pub context_s: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            schemes: WeightScheme::standard_set(),
            min_speech_s: 0.2,
            long_silence_s: 2.0,
            context_s: 10.0,
        }
    }
}

impl LabelConfig {
    fn frames(secs: f64, rate: u32) -> usize {
        (secs * rate as f64).round().max(1.0) as usize
    }

    pub fn min_speech_frames(&self, rate: u32) -> usize {
        Self::frames(self.min_speech_s, rate)
    }

    pub fn long_silence_frames(&self, rate: u32) -> usize {
        Self::frames(self.long_silence_s, rate)
    }

    pub fn context_frames(&self, rate: u32) -> usize {
        Self::frames(self.context_s, rate)
    }
}

/// Corpus-level labeling report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelingStats {
    pub recordings: usize,
    pub skipped_recordings: usize,
    pub decision_points: usize,
    pub hold: usize,
    pub shift: usize,
    pub abstained: usize,
    pub unlabelable: usize,
    pub rejected_no_speech: usize,
    pub truncated: usize,
    pub truncated_final_segment: usize,
    /// Emitted samples per whole second of left padding (last bucket: 10 s+).
    pub pad_histogram_s: [usize; 11],
    pub pad_frames_total: usize,
    pub diagnostics: Vec<String>,
}

impl LabelingStats {
    pub fn emitted(&self) -> usize {
        self.hold + self.shift
    }

    /// Abstentions over all points that had a complete future window.
    pub fn abstain_rate(&self) -> f64 {
        let judged = self.emitted() + self.abstained + self.rejected_no_speech;
        if judged == 0 {
            0.0
        } else {
            self.abstained as f64 / judged as f64
        }
    }

    pub fn mean_pad_frames(&self) -> f64 {
        if self.emitted() == 0 {
            0.0
        } else {
            self.pad_frames_total as f64 / self.emitted() as f64
        }
    }

    fn merge(&mut self, other: LabelingStats) {
        self.recordings += other.recordings;
        self.skipped_recordings += other.skipped_recordings;
        self.decision_points += other.decision_points;
        self.hold += other.hold;
        self.shift += other.shift;
        self.abstained += other.abstained;
        self.unlabelable += other.unlabelable;
        self.rejected_no_speech += other.rejected_no_speech;
        self.truncated += other.truncated;
        self.truncated_final_segment += other.truncated_final_segment;
        for (a, b) in self.pad_histogram_s.iter_mut().zip(other.pad_histogram_s) {
            *a += b;
        }
        self.pad_frames_total += other.pad_frames_total;
        self.diagnostics.extend(other.diagnostics);
    }

    /// Machine-readable form including derived rates.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("stats serialize");
        v["emitted"] = self.emitted().into();
        v["abstain_rate"] = self.abstain_rate().into();
        v["mean_pad_frames"] = self.mean_pad_frames().into();
        v
    }
}

impl fmt::Display for LabelingStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "recordings: {} ({} skipped)",
            self.recordings, self.skipped_recordings
        )?;
        writeln!(f, "decision points: {}", self.decision_points)?;
        writeln!(
            f,
            "emitted: {} (hold {}, shift {})",
            self.emitted(),
            self.hold,
            self.shift
        )?;
        writeln!(
            f,
            "abstained: {} (rate {:.4}), unlabelable: {}, no preceding speech: {}",
            self.abstained,
            self.abstain_rate(),
            self.unlabelable,
            self.rejected_no_speech
        )?;
        writeln!(
            f,
            "truncated: {} ({} cut into the final segment)",
            self.truncated, self.truncated_final_segment
        )?;
        write!(f, "mean pad: {:.1} frames; pad histogram (s):", self.mean_pad_frames())?;
        for (i, n) in self.pad_histogram_s.iter().enumerate() {
            write!(f, " {i}:{n}")?;
        }
        Ok(())
    }
}

/// Labels one recording. Points are visited in (frame, channel) order.
pub fn label_recording(rec: &Recording, config: &LabelConfig) -> (Vec<TurnSample>, LabelingStats) {
    let mut stats = LabelingStats {
        recordings: 1,
        ..Default::default()
    };
    let rate = rec.frame_rate_hz();
    let weights = match (|| -> Result<_, LabelError> {
        Ok([
            config.schemes[0].weights(rate)?,
            config.schemes[1].weights(rate)?,
            config.schemes[2].weights(rate)?,
        ])
    })() {
        Ok(w) => w,
        Err(e) => {
            stats.skipped_recordings = 1;
            stats.diagnostics.push(format!("{}: {e}", rec.id));
            return (Vec::new(), stats);
        }
    };
    let has_audio = rec.audio.iter().any(Option::is_some);
    if has_audio && AUDIO_SAMPLE_RATE_HZ % rate != 0 {
        stats.skipped_recordings = 1;
        stats.diagnostics.push(format!(
            "{}: audio at {AUDIO_SAMPLE_RATE_HZ} Hz is not frame-aligned with VAD at {rate} Hz",
            rec.id
        ));
        return (Vec::new(), stats);
    }
    let min_speech = config.min_speech_frames(rate);
    let long_silence = config.long_silence_frames(rate);
    let target = config.context_frames(rate);

    let mut points: Vec<(usize, Channel, bool)> = Vec::new();
    for c in Channel::BOTH {
        let edges = find_decision_points(rec.channel(c).frames(), min_speech);
        let last = edges.len().saturating_sub(1);
        points.extend(edges.into_iter().enumerate().map(|(k, t)| (t, c, k == last)));
    }
    points.sort_by_key(|&(t, c, _)| (t, c));
    stats.decision_points = points.len();

    let mut samples = Vec::new();
    for (t, c, is_final) in points {
        let label = match rec.kind {
            RecordingKind::SingleUtterance => {
                if is_final {
                    TurnLabel::Shift
                } else {
                    TurnLabel::Hold
                }
            }
            RecordingKind::Conversation => {
                let own = rec.channel(c).frames();
                let other = rec.channel(c.other()).frames();
                match consensus_with_weights(own, other, t, c, &weights) {
                    Ok(fl) => match fl.label {
                        FrameVerdict::Hold => TurnLabel::Hold,
                        FrameVerdict::Shift => TurnLabel::Shift,
                        FrameVerdict::Abstain => {
                            stats.abstained += 1;
                            continue;
                        }
                    },
                    Err(_) => {
                        stats.unlabelable += 1;
                        continue;
                    }
                }
            }
        };
        let window = match build_context_window(rec.channel(c).frames(), t, long_silence, target) {
            Ok(w) => w,
            Err(_) => {
                stats.rejected_no_speech += 1;
                continue;
            }
        };
        if window.truncated {
            stats.truncated += 1;
        }
        if window.cut_final_segment {
            stats.truncated_final_segment += 1;
        }
        match label {
            TurnLabel::Hold => stats.hold += 1,
            TurnLabel::Shift => stats.shift += 1,
        }
        let bucket = (window.pad_frames / rate as usize).min(10);
        stats.pad_histogram_s[bucket] += 1;
        stats.pad_frames_total += window.pad_frames;

        samples.push(context_sample(rec, c, label, window));
    }
    (samples, stats)
}

/// The sample for a context window of channel `c`. Shared with the streaming
/// replay so both paths feed the model identical inputs.
pub fn context_sample(rec: &Recording, c: Channel, label: TurnLabel, window: ContextWindow) -> TurnSample {
    let rate = rec.frame_rate_hz();
    let samples_per_frame = (AUDIO_SAMPLE_RATE_HZ / rate) as usize;
    let context_audio = rec.audio[c.index()].as_ref().map(|path| {
        let (start_sample, end_sample, pad_samples) = window.sample_range(samples_per_frame);
        AudioSpan {
            path: path.clone(),
            start_sample,
            end_sample,
            pad_samples,
        }
    });
    TurnSample {
        source_id: rec.id.clone(),
        decision_frame: window.decision_frame,
        channel: c,
        label,
        pad_frames: window.pad_frames,
        frame_rate_hz: rate,
        context_vad: window.frames,
        context_audio,
    }
}

/// Labels a corpus. Recordings are processed in parallel; output order is the
/// input order of recordings, then (decision frame, channel).
pub fn label_corpus(recordings: &[Recording], config: &LabelConfig) -> (Vec<TurnSample>, LabelingStats) {
    let per_rec: Vec<_> = recordings
        .par_iter()
        .map(|r| label_recording(r, config))
        .collect();
    let mut samples = Vec::new();
    let mut stats = LabelingStats::default();
    for (s, st) in per_rec {
        samples.extend(s);
        stats.merge(st);
    }
    (samples, stats)
}

/// One single-speaker utterance: speech segments `[start, end)` in frames
/// over a stream of `total_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub id: String,
    pub frame_rate_hz: u32,
    pub segments: Vec<(usize, usize)>,
    pub total_frames: usize,
}

impl UtteranceSpec {
    pub fn to_recording(&self) -> Result<Recording, LabelError> {
        let speech: usize = self.segments.iter().map(|&(a, b)| b.saturating_sub(a)).sum();
        if self.total_frames == 0 || speech == 0 {
            return Err(LabelError::EmptyUtterance { id: self.id.clone() });
        }
        let mut v = vec![0u8; self.total_frames];
        for &(a, b) in &self.segments {
            if a >= b || b > self.total_frames {
                return Err(LabelError::Domain(format!(
                    "segment [{a}, {b}) is empty or outside {} frames",
                    self.total_frames
                )));
            }
            v[a..b].fill(1);
        }
        Recording::from_frames(self.id.clone(), self.frame_rate_hz, v, vec![0; self.total_frames])
            .map(|r| r.with_kind(RecordingKind::SingleUtterance))
            .map_err(|e| LabelError::Domain(e.to_string()))
    }
}

/// Hold samples at interior falling edges and one shift at the final edge.
pub fn generate_single_utterance_set(
    specs: &[UtteranceSpec],
    config: &LabelConfig,
) -> Result<Vec<TurnSample>, LabelError> {
    let mut out = Vec::new();
    for spec in specs {
        let rec = spec.to_recording()?;
        let (samples, _) = label_recording(&rec, config);
        if samples.is_empty() {
            return Err(LabelError::EmptyUtterance { id: spec.id.clone() });
        }
        out.extend(samples);
    }
    Ok(out)
}
