use serde::{Deserialize, Serialize};

use super::LabelError;

/// A fixed-length context ending at a decision point.
///
/// `frames` always holds exactly `target_frames` values: `pad_frames` zeros
/// followed by the retained span `[span_start, decision_frame)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub frames: Vec<u8>,
    pub decision_frame: usize,
    /// First stream frame of the retained span.
    pub span_start: usize,
    pub pad_frames: usize,
    /// The backward extension was longer than the target and lost its oldest
    /// frames.
    pub truncated: bool,
    /// Truncation cut into the speech segment that ends at the decision point.
    pub cut_final_segment: bool,
}

impl ContextWindow {
    pub fn retained_frames(&self) -> usize {
        self.decision_frame - self.span_start
    }

    /// Sample offsets `[start, end)` of the retained span in an audio stream
    /// with `samples_per_frame` samples per VAD frame, plus the left pad in
    /// samples.
    pub fn sample_range(&self, samples_per_frame: usize) -> (usize, usize, usize) {
        (
            self.span_start * samples_per_frame,
            self.decision_frame * samples_per_frame,
            self.pad_frames * samples_per_frame,
        )
    }
}

/// Builds the context for a falling edge at `decision_frame`.
///
/// The span starts where the most recent silence run of at least
/// `long_silence_frames` (before the decision point) ends, or at the stream
/// start if there is none. It is then right-aligned into `target_frames`:
/// left-padded with silence when short, oldest frames dropped when long.
pub fn build_context_window(
    stream: &[u8],
    decision_frame: usize,
    long_silence_frames: usize,
    target_frames: usize,
) -> Result<ContextWindow, LabelError> {
    if decision_frame == 0 || decision_frame > stream.len() {
        return Err(LabelError::Domain(format!(
            "decision frame {decision_frame} is not inside a stream of {} frames",
            stream.len()
        )));
    }
    if target_frames == 0 || long_silence_frames == 0 {
        return Err(LabelError::Domain(
            "target and long-silence lengths must be positive".into(),
        ));
    }

    // Walk backwards over the history, tracking the current silence run.
    let mut start = 0;
    let mut silence_run = 0usize;
    for j in (0..decision_frame).rev() {
        if stream[j] == 0 {
            silence_run += 1;
            if silence_run >= long_silence_frames {
                // The run covers [j, j + silence_run); its end is the span start.
                start = j + silence_run;
                break;
            }
        } else {
            silence_run = 0;
        }
    }

    let span_len = decision_frame - start;
    let (span_start, pad_frames, truncated) = if span_len > target_frames {
        (decision_frame - target_frames, 0, true)
    } else {
        (start, target_frames - span_len, false)
    };
    let retained = &stream[span_start..decision_frame];
    if !retained.contains(&1) {
        return Err(LabelError::NoPrecedingSpeech { decision_frame });
    }
    let cut_final_segment = truncated && {
        let final_run = retained.iter().rev().take_while(|&&v| v == 1).count();
        final_run == retained.len() && span_start > 0 && stream[span_start - 1] == 1
    };

    let mut frames = vec![0u8; pad_frames];
    frames.extend_from_slice(retained);
    Ok(ContextWindow {
        frames,
        decision_frame,
        span_start,
        pad_frames,
        truncated,
        cut_final_segment,
    })
}
