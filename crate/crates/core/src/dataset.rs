//! JSONL formats: VAD recordings in, labeled turn samples out.
//!
//! Recording line:
//! `{"id": "r1", "frame_rate_hz": 50, "ch0": "0011…", "ch1": "1100…"}`
//! with optional `"kind": "single_utterance"` and per-channel WAV paths
//! `"audio_ch0"`, `"audio_ch1"` (relative paths resolve against the JSONL
//! file's directory). `ch1` may be omitted for single-utterance recordings.
//!
//! Sample line:
//! `{"id", "decision_frame", "channel", "label", "pad_frames", "frame_rate_hz",
//! "context_vad", "context_audio"?}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vad::{self, Channel, Recording, RecordingKind, TurnLabel, VadError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Vad(#[from] VadError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Audio backing for a sample: the retained span of a mono WAV plus the
/// left padding in samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioSpan {
    pub path: PathBuf,
    pub start_sample: usize,
    pub end_sample: usize,
    pub pad_samples: usize,
}

/// One decision point with its fixed-length context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    #[serde(rename = "id")]
    pub source_id: String,
    pub decision_frame: usize,
    pub channel: Channel,
    pub label: TurnLabel,
    pub pad_frames: usize,
    pub frame_rate_hz: u32,
    #[serde(with = "compact_frames")]
    pub context_vad: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_audio: Option<AudioSpan>,
}

impl TurnSample {
    /// Un-padded context length in seconds.
    pub fn speech_span_s(&self) -> f64 {
        (self.context_vad.len() - self.pad_frames) as f64 / self.frame_rate_hz as f64
    }

    /// Ordering key: recording, decision frame, channel.
    pub fn key(&self) -> (&str, usize, Channel) {
        (&self.source_id, self.decision_frame, self.channel)
    }
}

mod compact_frames {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(frames: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::vad::to_compact(frames))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        crate::vad::parse_compact(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingRecord {
    pub id: String,
    pub frame_rate_hz: u32,
    pub ch0: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ch1: Option<String>,
    #[serde(default, skip_serializing_if = "is_conversation")]
    pub kind: RecordingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ch0: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ch1: Option<PathBuf>,
}

fn is_conversation(k: &RecordingKind) -> bool {
    *k == RecordingKind::Conversation
}

impl RecordingRecord {
    pub fn from_recording(rec: &Recording) -> Self {
        Self {
            id: rec.id.clone(),
            frame_rate_hz: rec.frame_rate_hz(),
            ch0: rec.channel(Channel::Ch0).to_compact(),
            ch1: Some(rec.channel(Channel::Ch1).to_compact()),
            kind: rec.kind,
            audio_ch0: rec.audio[0].clone(),
            audio_ch1: rec.audio[1].clone(),
        }
    }

    pub fn into_recording(self, base_dir: Option<&Path>) -> Result<Recording, VadError> {
        let ch0 = vad::parse_compact(&self.ch0)?;
        let ch1 = match &self.ch1 {
            Some(s) => vad::parse_compact(s)?,
            None => vec![0; ch0.len()],
        };
        let mut rec =
            Recording::from_frames(self.id, self.frame_rate_hz, ch0, ch1)?.with_kind(self.kind);
        let resolve = |p: PathBuf| match base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        };
        rec.audio = [self.audio_ch0.map(resolve), self.audio_ch1.map(resolve)];
        Ok(rec)
    }
}

/// A skipped input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

/// Reads a VAD JSONL file. Malformed lines are skipped and reported.
pub fn read_recordings(path: &Path) -> Result<(Vec<Recording>, Vec<LineDiagnostic>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf);
    let mut recs = Vec::new();
    let mut diags = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RecordingRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.into_recording(base.as_deref()).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => recs.push(r),
            Err(message) => diags.push(LineDiagnostic { line: i + 1, message }),
        }
    }
    Ok((recs, diags))
}

pub fn write_recordings(path: &Path, recs: &[Recording]) -> Result<(), DatasetError> {
    write_jsonl(path, recs.iter().map(RecordingRecord::from_recording))
}

pub fn read_samples(path: &Path) -> Result<(Vec<TurnSample>, Vec<LineDiagnostic>), DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut diags = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TurnSample>(&line) {
            Ok(s) => out.push(s),
            Err(e) => diags.push(LineDiagnostic {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((out, diags))
}

pub fn write_samples(path: &Path, samples: &[TurnSample]) -> Result<(), DatasetError> {
    write_jsonl(path, samples.iter())
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    items: impl IntoIterator<Item = T>,
) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
