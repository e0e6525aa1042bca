//! Frame-level voice activity: per-channel binary sequences, recordings and
//! falling-edge detection.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default VAD frame rate.
pub const DEFAULT_FRAME_RATE_HZ: u32 = 50;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VadError {
    #[error("frame {index} has value {value}; VAD frames must be 0 or 1")]
    NonBinary { index: usize, value: u8 },
    #[error("invalid character {ch:?} at position {index} in compact VAD string")]
    BadChar { index: usize, ch: char },
    #[error("frame rate must be positive")]
    ZeroFrameRate,
    #[error("channel lengths differ: ch0 has {ch0} frames, ch1 has {ch1}")]
    LengthMismatch { ch0: usize, ch1: usize },
    #[error("channel frame rates differ")]
    RateMismatch,
}

/// One of the two sides of a stereo dialogue recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Channel {
    Ch0,
    Ch1,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Ch0, Channel::Ch1];

    pub fn index(self) -> usize {
        match self {
            Channel::Ch0 => 0,
            Channel::Ch1 => 1,
        }
    }

    pub fn other(self) -> Channel {
        match self {
            Channel::Ch0 => Channel::Ch1,
            Channel::Ch1 => Channel::Ch0,
        }
    }
}

impl From<Channel> for u8 {
    fn from(c: Channel) -> u8 {
        c.index() as u8
    }
}

impl TryFrom<u8> for Channel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Channel::Ch0),
            1 => Ok(Channel::Ch1),
            other => Err(format!("channel must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// Binary turn label: hold (0) keeps the turn, shift (1) hands it over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum TurnLabel {
    Hold,
    Shift,
}

impl TurnLabel {
    pub fn as_target(self) -> f64 {
        match self {
            TurnLabel::Hold => 0.0,
            TurnLabel::Shift => 1.0,
        }
    }
}

impl From<TurnLabel> for u8 {
    fn from(l: TurnLabel) -> u8 {
        match l {
            TurnLabel::Hold => 0,
            TurnLabel::Shift => 1,
        }
    }
}

impl TryFrom<u8> for TurnLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(TurnLabel::Hold),
            1 => Ok(TurnLabel::Shift),
            other => Err(format!("label must be 0 (hold) or 1 (shift), got {other}")),
        }
    }
}

impl fmt::Display for TurnLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnLabel::Hold => f.write_str("hold"),
            TurnLabel::Shift => f.write_str("shift"),
        }
    }
}

/// Per-channel binary voice-activity sequence at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameVadSequence {
    frames: Vec<u8>,
    frame_rate_hz: u32,
    channel: Channel,
}

impl FrameVadSequence {
    pub fn new(frames: Vec<u8>, frame_rate_hz: u32, channel: Channel) -> Result<Self, VadError> {
        if frame_rate_hz == 0 {
            return Err(VadError::ZeroFrameRate);
        }
        if let Some((index, &value)) = frames.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(VadError::NonBinary { index, value });
        }
        Ok(Self {
            frames,
            frame_rate_hz,
            channel,
        })
    }

    /// Parses the compact `"0110..."` form used in VAD JSONL files.
    pub fn from_compact(s: &str, frame_rate_hz: u32, channel: Channel) -> Result<Self, VadError> {
        let frames = parse_compact(s)?;
        Self::new(frames, frame_rate_hz, channel)
    }

    pub fn frames(&self) -> &[u8] {
        &self.frames
    }

    pub fn frame_rate_hz(&self) -> u32 {
        self.frame_rate_hz
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_compact(&self) -> String {
        to_compact(&self.frames)
    }
}

pub fn parse_compact(s: &str) -> Result<Vec<u8>, VadError> {
    s.chars()
        .enumerate()
        .map(|(index, ch)| match ch {
            '0' => Ok(0),
            '1' => Ok(1),
            ch => Err(VadError::BadChar { index, ch }),
        })
        .collect()
}

pub fn to_compact(frames: &[u8]) -> String {
    frames.iter().map(|&v| if v == 0 { '0' } else { '1' }).collect()
}

/// Conversational recordings are labeled by future-window consensus;
/// single-utterance recordings follow the interior-hold / final-shift
/// convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingKind {
    #[default]
    Conversation,
    SingleUtterance,
}

/// A two-channel recording: VAD for both sides, optionally backed by one
/// 16 kHz mono WAV per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub kind: RecordingKind,
    channels: [FrameVadSequence; 2],
    pub audio: [Option<PathBuf>; 2],
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        ch0: FrameVadSequence,
        ch1: FrameVadSequence,
    ) -> Result<Self, VadError> {
        if ch0.len() != ch1.len() {
            return Err(VadError::LengthMismatch {
                ch0: ch0.len(),
                ch1: ch1.len(),
            });
        }
        if ch0.frame_rate_hz != ch1.frame_rate_hz {
            return Err(VadError::RateMismatch);
        }
        let mut ch0 = ch0;
        let mut ch1 = ch1;
        ch0.channel = Channel::Ch0;
        ch1.channel = Channel::Ch1;
        Ok(Self {
            id: id.into(),
            kind: RecordingKind::Conversation,
            channels: [ch0, ch1],
            audio: [None, None],
        })
    }

    pub fn from_frames(
        id: impl Into<String>,
        frame_rate_hz: u32,
        ch0: Vec<u8>,
        ch1: Vec<u8>,
    ) -> Result<Self, VadError> {
        Self::new(
            id,
            FrameVadSequence::new(ch0, frame_rate_hz, Channel::Ch0)?,
            FrameVadSequence::new(ch1, frame_rate_hz, Channel::Ch1)?,
        )
    }

    pub fn with_kind(mut self, kind: RecordingKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn channel(&self, c: Channel) -> &FrameVadSequence {
        &self.channels[c.index()]
    }

    pub fn frame_rate_hz(&self) -> u32 {
        self.channels[0].frame_rate_hz
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Incremental falling-edge detector.
///
/// Fires at frame `t` when `v[t-1] = 1`, `v[t] = 0` and the speech run that
/// just ended is at least `min_speech_frames` long. Both the offline labeler
/// and the streaming harness detect decision points through this type.
#[derive(Debug, Clone)]
pub struct FallingEdgeDetector {
    min_speech_frames: usize,
    next_frame: usize,
    run_len: usize,
    prev: u8,
}

impl FallingEdgeDetector {
    pub fn new(min_speech_frames: usize) -> Self {
        Self {
            min_speech_frames: min_speech_frames.max(1),
            next_frame: 0,
            run_len: 0,
            prev: 0,
        }
    }

    /// Feeds the next frame. Returns the frame index if it is a qualifying
    /// falling edge.
    pub fn push(&mut self, v: u8) -> Option<usize> {
        let t = self.next_frame;
        self.next_frame += 1;
        let fired = if v == 0 && self.prev == 1 && self.run_len >= self.min_speech_frames {
            Some(t)
        } else {
            None
        };
        if v == 1 {
            self.run_len = if self.prev == 1 { self.run_len + 1 } else { 1 };
        } else {
            self.run_len = 0;
        }
        self.prev = v;
        fired
    }

    pub fn frames_seen(&self) -> usize {
        self.next_frame
    }
}

/// All qualifying falling edges of `frames`, ascending.
pub fn find_decision_points(frames: &[u8], min_speech_frames: usize) -> Vec<usize> {
    let mut detector = FallingEdgeDetector::new(min_speech_frames);
    frames.iter().filter_map(|&v| detector.push(v)).collect()
}
