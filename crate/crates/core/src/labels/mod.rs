//! Automatic hold/shift labeling from two-channel frame-level VAD.
//!
//! Each frame `t` of channel `c` is scored over a future window of
//! `N = round(horizon · f_s)` frames:
//!
//! ```text
//! s_c(t) = Σ_{i=0..=N} w(i) · v_c(t + i)
//! ```
//!
//! Three decaying weightings vote independently (hold iff `s_c ≥ s_other`)
//! and a label survives only when all three agree. Decision points are VAD
//! falling edges; each gets a fixed-length, left-padded context window.

mod context;
mod corpus;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vad::{Channel, FrameVadSequence, TurnLabel};

pub use context::{build_context_window, ContextWindow};
pub use corpus::{
    context_sample, generate_single_utterance_set, label_corpus, label_recording, LabelConfig, LabelingStats,
    UtteranceSpec,
};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("frame {frame} is unlabelable: its future window runs past the end of the stream")]
    Unlabelable { frame: usize },
    #[error("no preceding speech in the context window ending at frame {decision_frame}")]
    NoPrecedingSpeech { decision_frame: usize },
    #[error("utterance {id:?} contains no speech")]
    EmptyUtterance { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `w(i) = 1 - i/N`
    Linear,
    /// `w(i) = sqrt(1 - i/N)`
    Sqrt,
    /// `w(i) = 2^(-i / (half_life · f_s))`
    Exponential,
    /// `w(i) = 1`; a degenerate scheme for checking the raw window sum.
    Uniform,
}

/// A future-window weighting function. All kinds satisfy `w(0) = 1` and are
/// non-negative and non-increasing in the frame offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: WeightKind,
    pub horizon_s: f64,
    pub exp_half_life_s: f64,
}

impl WeightScheme {
    pub const DEFAULT_HORIZON_S: f64 = 2.0;
    pub const DEFAULT_HALF_LIFE_S: f64 = 1.0;

    pub fn new(kind: WeightKind) -> Self {
        Self {
            kind,
            horizon_s: Self::DEFAULT_HORIZON_S,
            exp_half_life_s: Self::DEFAULT_HALF_LIFE_S,
        }
    }

    pub fn linear() -> Self {
        Self::new(WeightKind::Linear)
    }

    pub fn sqrt() -> Self {
        Self::new(WeightKind::Sqrt)
    }

    pub fn exponential() -> Self {
        Self::new(WeightKind::Exponential)
    }

    pub fn uniform() -> Self {
        Self::new(WeightKind::Uniform)
    }

    /// The linear, square-root and exponential schemes used for consensus.
    pub fn standard_set() -> [WeightScheme; 3] {
        [Self::linear(), Self::sqrt(), Self::exponential()]
    }

    /// `N = round(horizon_s · f_s)`.
    pub fn window_frames(&self, frame_rate_hz: u32) -> Result<usize, LabelError> {
        let n = (self.horizon_s * frame_rate_hz as f64).round();
        if !(n >= 1.0) {
            return Err(LabelError::Domain(format!(
                "future window must span at least one frame (horizon {} s at {} Hz)",
                self.horizon_s, frame_rate_hz
            )));
        }
        Ok(n as usize)
    }

    /// `w(i)` for offset `i` in a window of `n` frames.
    pub fn weight(&self, i: usize, n: usize, frame_rate_hz: u32) -> Result<f64, LabelError> {
        if n < 1 {
            return Err(LabelError::Domain("window length N must be >= 1".into()));
        }
        if i > n {
            return Err(LabelError::Domain(format!("offset {i} exceeds window length {n}")));
        }
        let frac = i as f64 / n as f64;
        Ok(match self.kind {
            WeightKind::Linear => 1.0 - frac,
            WeightKind::Sqrt => (1.0 - frac).sqrt(),
            WeightKind::Exponential => {
                if !(self.exp_half_life_s > 0.0) {
                    return Err(LabelError::Domain("half-life must be positive".into()));
                }
                (-(i as f64) / (self.exp_half_life_s * frame_rate_hz as f64)).exp2()
            }
            WeightKind::Uniform => 1.0,
        })
    }

    /// The full weight vector `w(0..=N)` at the given frame rate.
    pub fn weights(&self, frame_rate_hz: u32) -> Result<Vec<f64>, LabelError> {
        let n = self.window_frames(frame_rate_hz)?;
        (0..=n).map(|i| self.weight(i, n, frame_rate_hz)).collect()
    }
}

/// Per-frame consensus outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameVerdict {
    Hold,
    Shift,
    Abstain,
}

impl FrameVerdict {
    pub fn label(self) -> Option<TurnLabel> {
        match self {
            FrameVerdict::Hold => Some(TurnLabel::Hold),
            FrameVerdict::Shift => Some(TurnLabel::Shift),
            FrameVerdict::Abstain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame_index: usize,
    pub channel: Channel,
    pub label: FrameVerdict,
    /// `(s_c, s_other)` for each of the three schemes.
    pub per_scheme_scores: [(f64, f64); 3],
}

/// Weighted future-window score with a precomputed weight vector.
/// `None` when the window `[t, t + N]` does not fit in the stream.
pub fn score_with_weights(frames: &[u8], t: usize, weights: &[f64]) -> Option<f64> {
    let n = weights.len().checked_sub(1)?;
    if t + n >= frames.len() {
        return None;
    }
    let window = &frames[t..=t + n];
    Some(
        weights
            .iter()
            .zip(window)
            .map(|(&w, &v)| if v == 1 { w } else { 0.0 })
            .sum(),
    )
}

/// `s_c(t)` for one channel; `Ok(None)` marks an incomplete future window.
pub fn future_window_score(
    vad: &FrameVadSequence,
    t: usize,
    scheme: &WeightScheme,
) -> Result<Option<f64>, LabelError> {
    if t >= vad.len() {
        return Err(LabelError::Domain(format!(
            "frame {t} out of range for a stream of {} frames",
            vad.len()
        )));
    }
    let weights = scheme.weights(vad.frame_rate_hz())?;
    Ok(score_with_weights(vad.frames(), t, &weights))
}

/// Consensus over precomputed weight vectors. Errors with `Unlabelable` when
/// any window is incomplete.
pub fn consensus_with_weights(
    own: &[u8],
    other: &[u8],
    t: usize,
    channel: Channel,
    weights: &[Vec<f64>; 3],
) -> Result<FrameLabel, LabelError> {
    let mut scores = [(0.0, 0.0); 3];
    let mut holds = 0;
    for (slot, w) in scores.iter_mut().zip(weights) {
        let s_own = score_with_weights(own, t, w).ok_or(LabelError::Unlabelable { frame: t })?;
        let s_other =
            score_with_weights(other, t, w).ok_or(LabelError::Unlabelable { frame: t })?;
        if s_own >= s_other {
            holds += 1;
        }
        *slot = (s_own, s_other);
    }
    let label = match holds {
        3 => FrameVerdict::Hold,
        0 => FrameVerdict::Shift,
        _ => FrameVerdict::Abstain,
    };
    Ok(FrameLabel {
        frame_index: t,
        channel,
        label,
        per_scheme_scores: scores,
    })
}

/// Consensus hold/shift label for `channel` at frame `t`.
pub fn consensus_label(
    ch0: &FrameVadSequence,
    ch1: &FrameVadSequence,
    t: usize,
    channel: Channel,
    schemes: &[WeightScheme; 3],
) -> Result<FrameLabel, LabelError> {
    if ch0.len() != ch1.len() {
        return Err(LabelError::Domain("channels differ in length".into()));
    }
    if t >= ch0.len() {
        return Err(LabelError::Domain(format!("frame {t} out of range")));
    }
    let rate = ch0.frame_rate_hz();
    let weights = [
        schemes[0].weights(rate)?,
        schemes[1].weights(rate)?,
        schemes[2].weights(rate)?,
    ];
    let (own, other) = match channel {
        Channel::Ch0 => (ch0, ch1),
        Channel::Ch1 => (ch1, ch0),
    };
    consensus_with_weights(own.frames(), other.frames(), t, channel, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: &[u8], rate: u32) -> FrameVadSequence {
        FrameVadSequence::new(frames.to_vec(), rate, Channel::Ch0).unwrap()
    }

    #[test]
    fn weight_examples() {
        let lin = WeightScheme::linear();
        assert_eq!(lin.weight(0, 100, 50).unwrap(), 1.0);
        assert_eq!(lin.weight(100, 100, 50).unwrap(), 0.0);
        assert_eq!(WeightScheme::exponential().weight(50, 100, 50).unwrap(), 0.5);
        assert_eq!(WeightScheme::sqrt().weight(75, 100, 50).unwrap(), 0.5);
        for s in [WeightScheme::linear(), WeightScheme::sqrt(), WeightScheme::exponential()] {
            assert_eq!(s.weight(0, 100, 50).unwrap(), 1.0);
        }
    }

    #[test]
    fn weight_domain_errors() {
        let lin = WeightScheme::linear();
        assert!(matches!(lin.weight(101, 100, 50), Err(LabelError::Domain(_))));
        assert!(matches!(lin.weight(0, 0, 50), Err(LabelError::Domain(_))));
    }

    #[test]
    fn weights_are_non_increasing_and_non_negative() {
        for s in [
            WeightScheme::linear(),
            WeightScheme::sqrt(),
            WeightScheme::exponential(),
            WeightScheme::uniform(),
        ] {
            let w = s.weights(50).unwrap();
            assert_eq!(w.len(), 101);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(w.windows(2).all(|p| p[1] <= p[0]));
        }
    }

    #[test]
    fn score_examples() {
        let zeros = seq(&[0; 300], 50);
        assert_eq!(
            future_window_score(&zeros, 10, &WeightScheme::linear()).unwrap(),
            Some(0.0)
        );

        let mut v = vec![0u8; 150];
        v[0] = 1;
        v[1] = 1;
        assert_eq!(
            future_window_score(&seq(&v, 50), 0, &WeightScheme::uniform()).unwrap(),
            Some(2.0)
        );

        // horizon 2 s at 2 Hz gives N = 4
        let s = future_window_score(&seq(&[1, 0, 1, 0, 0], 2), 0, &WeightScheme::linear()).unwrap();
        assert_eq!(s, Some(1.5));
    }

    #[test]
    fn score_incomplete_window_and_range() {
        let v = seq(&[1; 100], 50);
        // t + N = 100 is past the last index
        assert_eq!(future_window_score(&v, 0, &WeightScheme::linear()).unwrap(), None);
        assert!(future_window_score(&v, 100, &WeightScheme::linear()).is_err());
    }

    #[test]
    fn consensus_tie_is_hold() {
        let a = seq(&[0; 200], 50);
        let b = seq(&[0; 200], 50);
        let l = consensus_label(&a, &b, 5, Channel::Ch0, &WeightScheme::standard_set()).unwrap();
        assert_eq!(l.label, FrameVerdict::Hold);
    }

    #[test]
    fn consensus_own_speech_is_hold() {
        let a = seq(&[1; 200], 50);
        let b = seq(&[0; 200], 50);
        let l = consensus_label(&a, &b, 0, Channel::Ch0, &WeightScheme::standard_set()).unwrap();
        assert_eq!(l.label, FrameVerdict::Hold);
        let l = consensus_label(&a, &b, 0, Channel::Ch1, &WeightScheme::standard_set()).unwrap();
        assert_eq!(l.label, FrameVerdict::Shift);
    }

    #[test]
    fn consensus_constructed_disagreement() {
        // 5-frame window (N = 4 at 2 Hz). Own speech at offset 0, other at 4.
        let own = seq(&[1, 0, 0, 0, 0], 2);
        let other = seq(&[0, 0, 0, 0, 1], 2);
        let steep = WeightScheme {
            kind: WeightKind::Exponential,
            horizon_s: 2.0,
            exp_half_life_s: 0.25,
        };
        let schemes = [WeightScheme::linear(), WeightScheme::uniform(), steep];
        let l = consensus_label(&own, &other, 0, Channel::Ch0, &schemes).unwrap();
        // Oracle: per-scheme verdicts evaluated from the explicit sums.
        let verdicts: Vec<bool> = schemes
            .iter()
            .map(|s| {
                let n = 4;
                let s_own: f64 = (0..=n).map(|i| s.weight(i, n, 2).unwrap() * own.frames()[i] as f64).sum();
                let s_oth: f64 = (0..=n).map(|i| s.weight(i, n, 2).unwrap() * other.frames()[i] as f64).sum();
                s_own >= s_oth
            })
            .collect();
        // linear: 1 vs 0 (hold); uniform: 1 vs 1 (hold, tie); steep: 1 vs 2^-8 (hold)
        assert_eq!(verdicts, vec![true, true, true]);
        assert_eq!(l.label, FrameVerdict::Hold);

        // Move the other channel's speech to offsets 1..=4: uniform flips to
        // shift while linear stays hold, so the consensus abstains.
        let other = seq(&[0, 1, 1, 1, 1], 2);
        let l = consensus_label(&own, &other, 0, Channel::Ch0, &schemes).unwrap();
        // linear: 1 vs 0.75+0.5+0.25+0 = 1.5 (shift); uniform 1 vs 4 (shift);
        // steep: 1 vs 1/16+1/256+... < 1 (hold)
        assert_eq!(l.label, FrameVerdict::Abstain);
    }

    #[test]
    fn consensus_unlabelable_near_end() {
        let a = seq(&[1; 120], 50);
        let b = seq(&[0; 120], 50);
        let err = consensus_label(&a, &b, 30, Channel::Ch0, &WeightScheme::standard_set());
        assert_eq!(err, Err(LabelError::Unlabelable { frame: 30 }));
    }
}
