//! Seeded synthetic dialogues with a planted hold/shift signature.
//!
//! Every turn is a run of short segments separated by brief pauses (hold
//! points) and closes with one long segment followed by a gap and the other
//! speaker (the shift point). The length of the speech run that ends at a
//! decision point is therefore enough to separate the classes: runs at
//! hold points never exceed `hold_segment_s.1`, runs at shift points are at
//! least `final_segment_s.0`. Silences between turns are long enough that
//! every context starts at the beginning of the current turn.
//!
//! Listener backchannels (shorter than the minimum speech run, so never
//! decision points) are dropped into long segments of the active speaker.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frontend::{write_wav_mono, FrontendError, AUDIO_SAMPLE_RATE_HZ};
use crate::labels::{label_recording, LabelConfig};
use crate::vad::{Channel, Recording, RecordingKind, TurnLabel, VadError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub n_recordings: usize,
    pub frame_rate_hz: u32,
    pub seed: u64,
    /// Turns per conversation, inclusive range.
    pub turns: (usize, usize),
    /// Target fraction of shift points among all decision points.
    pub shift_fraction: f64,
    /// Upper bound on hold points per turn.
    pub max_holds: usize,
    pub hold_segment_s: (f64, f64),
    pub hold_pause_s: (f64, f64),
    pub final_segment_s: (f64, f64),
    pub shift_gap_s: (f64, f64),
    pub lead_in_s: (f64, f64),
    /// Speech after the last labeled turn; long enough to cover its future
    /// window.
    pub closing_s: (f64, f64),
    pub backchannel_prob: f64,
    /// Fraction of recordings that are single-speaker utterances.
    pub single_utterance_fraction: f64,
    pub with_audio: bool,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_recordings: 60,
            frame_rate_hz: 50,
            seed: 7,
            turns: (4, 8),
            shift_fraction: 0.5,
            max_holds: 3,
            hold_segment_s: (0.3, 0.9),
            hold_pause_s: (0.25, 0.4),
            final_segment_s: (2.8, 4.0),
            shift_gap_s: (0.3, 0.6),
            lead_in_s: (0.3, 1.5),
            closing_s: (2.5, 3.0),
            backchannel_prob: 0.3,
            single_utterance_fraction: 0.15,
            with_audio: false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Vad(#[from] VadError),
    #[error(transparent)]
    Audio(#[from] FrontendError),
}

/// A decision point the generator meant to create.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub decision_frame: usize,
    pub channel: Channel,
    pub label: TurnLabel,
}

#[derive(Debug, Clone)]
pub struct SyntheticRecording {
    pub recording: Recording,
    pub planted: Vec<PlantedEvent>,
    /// Per-channel speech segments `[start, end)` in frames, with the planted
    /// label of the edge that ends them (`None` for backchannels and the
    /// closing segment).
    pub segments: [Vec<(usize, usize, Option<TurnLabel>)>; 2],
}

struct Builder {
    ch: [Vec<u8>; 2],
    segments: [Vec<(usize, usize, Option<TurnLabel>)>; 2],
    planted: Vec<PlantedEvent>,
}

impl Builder {
    fn new() -> Self {
        Self {
            ch: [Vec::new(), Vec::new()],
            segments: [Vec::new(), Vec::new()],
            planted: Vec::new(),
        }
    }

    fn now(&self) -> usize {
        self.ch[0].len()
    }

    fn silence(&mut self, n: usize) {
        for c in &mut self.ch {
            c.extend(std::iter::repeat_n(0, n));
        }
    }

    fn speak(&mut self, c: Channel, n: usize, label: Option<TurnLabel>) {
        let start = self.now();
        self.ch[c.index()].extend(std::iter::repeat_n(1, n));
        self.ch[c.other().index()].extend(std::iter::repeat_n(0, n));
        self.segments[c.index()].push((start, start + n, label));
        if let Some(label) = label {
            self.planted.push(PlantedEvent {
                decision_frame: start + n,
                channel: c,
                label,
            });
        }
    }
}

impl SyntheticTaskSpec {
    fn frames(&self, secs: f64) -> usize {
        (secs * self.frame_rate_hz as f64).round() as usize
    }

    fn draw(&self, rng: &mut ChaCha8Rng, range: (f64, f64)) -> usize {
        let (a, b) = (self.frames(range.0), self.frames(range.1));
        rng.random_range(a..=b)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ranges = [
            ("hold_segment_s", self.hold_segment_s),
            ("hold_pause_s", self.hold_pause_s),
            ("final_segment_s", self.final_segment_s),
            ("shift_gap_s", self.shift_gap_s),
            ("lead_in_s", self.lead_in_s),
            ("closing_s", self.closing_s),
        ];
        for (name, (a, b)) in ranges {
            if !(a > 0.0 && a <= b) {
                return Err(SynthError::Spec(format!("{name} must satisfy 0 < min <= max")));
            }
        }
        if self.frame_rate_hz == 0 || self.turns.0 == 0 || self.turns.0 > self.turns.1 {
            return Err(SynthError::Spec("frame rate and turn counts must be positive".into()));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 1.0) {
            return Err(SynthError::Spec("shift_fraction must be in (0, 1]".into()));
        }
        if (1.0 - self.shift_fraction) / self.shift_fraction >= self.max_holds as f64 && self.shift_fraction < 1.0 {
            return Err(SynthError::Spec(format!(
                "shift_fraction {} is unreachable with at most {} holds per turn",
                self.shift_fraction, self.max_holds
            )));
        }
        if self.hold_segment_s.1 >= self.final_segment_s.0 {
            return Err(SynthError::Spec(
                "hold segments must be shorter than final segments".into(),
            ));
        }
        Ok(())
    }

    /// Continuation probability of the truncated geometric hold count whose
    /// mean, `q + q² + … + q^max_holds`, equals `(1 − f)/f`, so that one shift
    /// per turn gives the target shift fraction `f`.
    fn hold_continuation(&self) -> f64 {
        let target = (1.0 - self.shift_fraction) / self.shift_fraction;
        let mean = |q: f64| (1..=self.max_holds as i32).map(|i| q.powi(i)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mean(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn hold_count(&self, rng: &mut ChaCha8Rng, q: f64) -> usize {
        let mut k = 0;
        while k < self.max_holds && rng.random::<f64>() < q {
            k += 1;
        }
        k
    }

    fn turn(&self, b: &mut Builder, rng: &mut ChaCha8Rng, speaker: Channel) {
        let q = self.hold_continuation();
        for _ in 0..self.hold_count(rng, q) {
            let n = self.draw(rng, self.hold_segment_s);
            b.speak(speaker, n, Some(TurnLabel::Hold));
            let p = self.draw(rng, self.hold_pause_s);
            b.silence(p);
        }
        let n = self.draw(rng, self.final_segment_s);
        let start = b.now();
        b.speak(speaker, n, Some(TurnLabel::Shift));
        if rng.random::<f64>() < self.backchannel_prob {
            let max_len = self.frames(0.2).saturating_sub(1).clamp(1, 8);
            let len = rng.random_range(max_len.div_ceil(2)..=max_len);
            let at = start + n / 3 + rng.random_range(0..=n / 3);
            let listener = speaker.other().index();
            b.ch[listener][at..at + len].fill(1);
            b.segments[listener].push((at, at + len, None));
        }
    }

    fn conversation(&self, id: String, rng: &mut ChaCha8Rng) -> Result<SyntheticRecording, SynthError> {
        let mut b = Builder::new();
        let lead = self.draw(rng, self.lead_in_s);
        b.silence(lead);
        let mut speaker = if rng.random::<bool>() { Channel::Ch0 } else { Channel::Ch1 };
        let turns = rng.random_range(self.turns.0..=self.turns.1);
        for _ in 0..turns {
            self.turn(&mut b, rng, speaker);
            let gap = self.draw(rng, self.shift_gap_s);
            b.silence(gap);
            speaker = speaker.other();
        }
        let closing = self.draw(rng, self.closing_s);
        b.speak(speaker, closing, None);
        let Builder { ch, segments, planted } = b;
        let [c0, c1] = ch;
        let recording = Recording::from_frames(id, self.frame_rate_hz, c0, c1)?;
        Ok(SyntheticRecording {
            recording,
            planted,
            segments,
        })
    }

    fn single_utterance(&self, id: String, rng: &mut ChaCha8Rng) -> Result<SyntheticRecording, SynthError> {
        let mut b = Builder::new();
        let lead = self.draw(rng, self.lead_in_s);
        b.silence(lead);
        self.turn(&mut b, rng, Channel::Ch0);
        let tail = self.draw(rng, self.shift_gap_s);
        b.silence(tail);
        let Builder { ch, mut segments, planted } = b;
        // a single speaker: drop any listener activity
        segments[1].clear();
        let [c0, _] = ch;
        let n = c0.len();
        let recording = Recording::from_frames(id, self.frame_rate_hz, c0, vec![0; n])?
            .with_kind(RecordingKind::SingleUtterance);
        Ok(SyntheticRecording {
            recording,
            planted,
            segments,
        })
    }

    pub fn generate(&self) -> Result<Vec<SyntheticRecording>, SynthError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_recordings)
            .map(|i| {
                if rng.random::<f64>() < self.single_utterance_fraction {
                    self.single_utterance(format!("syn-u{i:04}"), &mut rng)
                } else {
                    self.conversation(format!("syn-c{i:04}"), &mut rng)
                }
            })
            .collect()
    }
}

/// Renders one channel as 16 kHz audio: a voiced tone plus noise during
/// speech, near-silence elsewhere. Segments that end in a shift fade out over
/// their last 400 ms.
pub fn render_channel_audio(
    segments: &[(usize, usize, Option<TurnLabel>)],
    total_frames: usize,
    frame_rate_hz: u32,
    seed: u64,
) -> Vec<f32> {
    let spf = (AUDIO_SAMPLE_RATE_HZ / frame_rate_hz) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f32> = (0..total_frames * spf)
        .map(|_| rng.random_range(-0.002f32..0.002))
        .collect();
    let fade = (0.4 * AUDIO_SAMPLE_RATE_HZ as f64) as usize;
    for &(a, b, label) in segments {
        let f0 = rng.random_range(110.0f32..220.0);
        let (s0, s1) = (a * spf, b * spf);
        for (k, v) in out[s0..s1].iter_mut().enumerate() {
            let t = k as f32 / AUDIO_SAMPLE_RATE_HZ as f32;
            let remaining = s1 - s0 - k;
            let env = if label == Some(TurnLabel::Shift) && remaining < fade {
                remaining as f32 / fade as f32
            } else {
                1.0
            };
            let voiced = (2.0 * std::f32::consts::PI * f0 * t).sin() * 0.3
                + (4.0 * std::f32::consts::PI * f0 * t).sin() * 0.1;
            *v += env * (voiced + rng.random_range(-0.05f32..0.05));
        }
    }
    out
}

impl SyntheticRecording {
    /// Writes one WAV per active channel into `dir` and attaches the paths.
    pub fn write_audio(&mut self, dir: &Path, seed: u64) -> Result<(), SynthError> {
        let rate = self.recording.frame_rate_hz();
        let n = self.recording.len();
        let channels = match self.recording.kind {
            RecordingKind::SingleUtterance => vec![Channel::Ch0],
            RecordingKind::Conversation => Channel::BOTH.to_vec(),
        };
        for c in channels {
            let name = format!("{}_ch{}.wav", self.recording.id, c.index());
            let path: PathBuf = dir.join(&name);
            let audio = render_channel_audio(&self.segments[c.index()], n, rate, seed ^ (c.index() as u64 + 1));
            write_wav_mono(&path, &audio)?;
            self.recording.audio[c.index()] = Some(PathBuf::from(name));
        }
        Ok(())
    }
}

/// Agreement between planted events and the consensus labeler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub planted: usize,
    pub planted_shift: usize,
    /// Planted events the labeler emitted with the same label.
    pub agreed: usize,
    /// Labeler samples that were not planted.
    pub unplanted: usize,
}

impl ConsistencyReport {
    pub fn rate(&self) -> f64 {
        if self.planted == 0 {
            return 1.0;
        }
        self.agreed as f64 / self.planted as f64
    }

    pub fn shift_fraction(&self) -> f64 {
        self.planted_shift as f64 / self.planted.max(1) as f64
    }
}

pub fn self_consistency(recs: &[SyntheticRecording], config: &LabelConfig) -> ConsistencyReport {
    let mut r = ConsistencyReport::default();
    for rec in recs {
        let (samples, _) = label_recording(&rec.recording, config);
        r.planted += rec.planted.len();
        r.planted_shift += rec.planted.iter().filter(|e| e.label == TurnLabel::Shift).count();
        for p in &rec.planted {
            if samples
                .iter()
                .any(|s| s.decision_frame == p.decision_frame && s.channel == p.channel && s.label == p.label)
            {
                r.agreed += 1;
            }
        }
        r.unplanted += samples
            .iter()
            .filter(|s| {
                !rec.planted
                    .iter()
                    .any(|p| p.decision_frame == s.decision_frame && p.channel == s.channel)
            })
            .count();
    }
    r
}
