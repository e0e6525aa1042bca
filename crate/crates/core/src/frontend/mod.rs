//! Frozen dual-encoder frontend.
//!
//! Two deterministic toy encoders stand in for pre-trained models: a
//! linguistic stream (512-d at a 60 ms hop) and an acoustic stream (256-d at
//! a 10 ms hop). Each computes a small vector of causal per-hop statistics
//! and expands it with a fixed, seeded random projection followed by `tanh`.
//! They hold no trainable state; only the projections into the model space
//! (see [`project`]) are learned.

mod audio;
mod featfile;
mod vad_stats;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TurnSample;
use crate::model::Linear;
use crate::Real;

pub use audio::{load_context_audio, read_wav_mono, write_wav_mono};
pub use featfile::{read_feature_file, write_feature_file};

pub const AUDIO_SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("empty input stream")]
    EmptyStream,
    #[error("input of {0:.3} s is shorter than one {1} ms hop")]
    TooShort(f64, u32),
    #[error("audio must be sampled at {AUDIO_SAMPLE_RATE_HZ} Hz, got {0} Hz")]
    SampleRate(u32),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("sample {0} has no audio span but the frontend runs in audio mode")]
    MissingAudio(String),
    #[error("audio i/o error on {path}: {message}")]
    Audio { path: PathBuf, message: String },
    #[error("feature file error: {0}")]
    FeatureFile(String),
}

/// Static description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub output_dim: usize,
    pub hop_ms: u32,
    pub deterministic_seed: u64,
}

impl EncoderSpec {
    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms as f64
    }
}

/// Frame-level feature matrix (rows are time steps).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f32>,
    frame_rate_hz: f64,
    encoder_name: String,
}

impl FeatureSequence {
    pub fn new(
        frames: Array2<f32>,
        frame_rate_hz: f64,
        encoder_name: impl Into<String>,
    ) -> Result<Self, FrontendError> {
        if frames.nrows() == 0 {
            return Err(FrontendError::EmptyStream);
        }
        if let Some(((row, col), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FrontendError::NonFinite { row, col });
        }
        Ok(Self {
            frames,
            frame_rate_hz,
            encoder_name: encoder_name.into(),
        })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn encoder_name(&self) -> &str {
        &self.encoder_name
    }

    pub fn to_real<F: Real>(&self) -> Array2<F> {
        self.frames.mapv(|v| F::lit(v as f64))
    }
}

/// Input to an encoder: one channel of VAD or audio.
#[derive(Debug, Clone, Copy)]
pub enum ChannelStream<'a> {
    Vad { frames: &'a [u8], frame_rate_hz: u32 },
    Audio { samples: &'a [f32], sample_rate_hz: u32 },
}

impl ChannelStream<'_> {
    pub fn duration_s(&self) -> f64 {
        match self {
            ChannelStream::Vad {
                frames,
                frame_rate_hz,
            } => frames.len() as f64 / *frame_rate_hz as f64,
            ChannelStream::Audio {
                samples,
                sample_rate_hz,
            } => samples.len() as f64 / *sample_rate_hz as f64,
        }
    }

    /// Number of whole hops that fit in the stream.
    pub fn hop_count(&self, hop_ms: u32) -> usize {
        let (n, rate) = match self {
            ChannelStream::Vad {
                frames,
                frame_rate_hz,
            } => (frames.len() as u64, *frame_rate_hz as u64),
            ChannelStream::Audio {
                samples,
                sample_rate_hz,
            } => (samples.len() as u64, *sample_rate_hz as u64),
        };
        (n * 1000 / (rate * hop_ms as u64)) as usize
    }
}

/// A frozen feature extractor.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, input: &ChannelStream<'_>) -> Result<FeatureSequence, FrontendError>;
}

/// Fixed random expansion `tanh(stats · R + c)`.
#[derive(Debug, Clone)]
struct Expansion {
    matrix: Array2<f32>,
    bias: Array1<f32>,
}

impl Expansion {
    fn new(stats_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.5 / (stats_dim as f64).sqrt();
        let matrix = Array2::from_shape_fn((stats_dim, output_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        });
        let bias = Array1::from_shape_fn(output_dim, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * 0.3) as f32
        });
        Self { matrix, bias }
    }

    fn apply(&self, stats: &Array2<f32>) -> Array2<f32> {
        let mut out = stats.dot(&self.matrix);
        out += &self.bias;
        out.mapv_inplace(f32::tanh);
        out
    }
}

fn check_stream(input: &ChannelStream<'_>, hop_ms: u32) -> Result<usize, FrontendError> {
    match input {
        ChannelStream::Vad { frames, .. } if frames.is_empty() => {
            return Err(FrontendError::EmptyStream)
        }
        ChannelStream::Audio { samples, .. } if samples.is_empty() => {
            return Err(FrontendError::EmptyStream)
        }
        ChannelStream::Audio { sample_rate_hz, .. } if *sample_rate_hz != AUDIO_SAMPLE_RATE_HZ => {
            return Err(FrontendError::SampleRate(*sample_rate_hz))
        }
        _ => {}
    }
    let t = input.hop_count(hop_ms);
    if t == 0 {
        return Err(FrontendError::TooShort(input.duration_s(), hop_ms));
    }
    Ok(t)
}

/// Stand-in for the linguistic encoder: slow, run-level statistics of the
/// speech stream.
pub struct ToyLinguisticEncoder {
    spec: EncoderSpec,
    vad_expansion: Expansion,
    audio_expansion: Expansion,
}

impl ToyLinguisticEncoder {
    pub const DEFAULT_DIM: usize = 512;
    pub const DEFAULT_HOP_MS: u32 = 60;

    pub fn new(output_dim: usize, seed: u64) -> Self {
        let spec = EncoderSpec {
            name: "toy-linguistic".into(),
            output_dim,
            hop_ms: Self::DEFAULT_HOP_MS,
            deterministic_seed: seed,
        };
        Self {
            vad_expansion: Expansion::new(vad_stats::LINGUISTIC_STATS, output_dim, seed),
            audio_expansion: Expansion::new(audio::LINGUISTIC_STATS, output_dim, seed ^ 0xA5A5),
            spec,
        }
    }
}

impl Default for ToyLinguisticEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 17)
    }
}

impl Encoder for ToyLinguisticEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, input: &ChannelStream<'_>) -> Result<FeatureSequence, FrontendError> {
        let hops = check_stream(input, self.spec.hop_ms)?;
        let out = match *input {
            ChannelStream::Vad {
                frames,
                frame_rate_hz,
            } => self.vad_expansion.apply(&vad_stats::linguistic(
                frames,
                frame_rate_hz,
                self.spec.hop_ms,
                hops,
            )),
            ChannelStream::Audio { samples, .. } => self
                .audio_expansion
                .apply(&audio::linguistic_stats(samples, self.spec.hop_ms, hops)),
        };
        FeatureSequence::new(out, self.spec.frame_rate_hz(), self.spec.name.clone())
    }
}

/// Stand-in for the acoustic encoder: short-window local patterns.
pub struct ToyAcousticEncoder {
    spec: EncoderSpec,
    vad_expansion: Expansion,
    audio_expansion: Expansion,
}

impl ToyAcousticEncoder {
    pub const DEFAULT_DIM: usize = 256;
    pub const DEFAULT_HOP_MS: u32 = 10;

    pub fn new(output_dim: usize, seed: u64) -> Self {
        let spec = EncoderSpec {
            name: "toy-acoustic".into(),
            output_dim,
            hop_ms: Self::DEFAULT_HOP_MS,
            deterministic_seed: seed,
        };
        Self {
            vad_expansion: Expansion::new(vad_stats::ACOUSTIC_STATS, output_dim, seed),
            audio_expansion: Expansion::new(audio::ACOUSTIC_STATS, output_dim, seed ^ 0x5A5A),
            spec,
        }
    }
}

impl Default for ToyAcousticEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 29)
    }
}

impl Encoder for ToyAcousticEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, input: &ChannelStream<'_>) -> Result<FeatureSequence, FrontendError> {
        let hops = check_stream(input, self.spec.hop_ms)?;
        let out = match *input {
            ChannelStream::Vad {
                frames,
                frame_rate_hz,
            } => self.vad_expansion.apply(&vad_stats::acoustic(
                frames,
                frame_rate_hz,
                self.spec.hop_ms,
                hops,
            )),
            ChannelStream::Audio { samples, .. } => self
                .audio_expansion
                .apply(&audio::acoustic_stats(samples, self.spec.hop_ms, hops)),
        };
        FeatureSequence::new(out, self.spec.frame_rate_hz(), self.spec.name.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Vad,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub input: InputMode,
    pub linguistic_dim: usize,
    pub acoustic_dim: usize,
    pub linguistic_seed: u64,
    pub acoustic_seed: u64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            input: InputMode::Vad,
            linguistic_dim: ToyLinguisticEncoder::DEFAULT_DIM,
            acoustic_dim: ToyAcousticEncoder::DEFAULT_DIM,
            linguistic_seed: 17,
            acoustic_seed: 29,
        }
    }
}

/// Outputs of one encoder pass over a context, shared by every consumer.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub linguistic: Arc<FeatureSequence>,
    pub acoustic: Arc<FeatureSequence>,
}

/// The pair of frozen encoders.
#[derive(Clone)]
pub struct Frontend {
    linguistic: Arc<dyn Encoder>,
    acoustic: Arc<dyn Encoder>,
    config: FrontendConfig,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Self {
        Self {
            linguistic: Arc::new(ToyLinguisticEncoder::new(
                config.linguistic_dim,
                config.linguistic_seed,
            )),
            acoustic: Arc::new(ToyAcousticEncoder::new(config.acoustic_dim, config.acoustic_seed)),
            config,
        }
    }

    pub fn with_encoders(
        linguistic: Arc<dyn Encoder>,
        acoustic: Arc<dyn Encoder>,
        config: FrontendConfig,
    ) -> Self {
        Self {
            linguistic,
            acoustic,
            config,
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn encode_stream(&self, input: &ChannelStream<'_>) -> Result<EncodedContext, FrontendError> {
        Ok(EncodedContext {
            linguistic: Arc::new(self.linguistic.encode(input)?),
            acoustic: Arc::new(self.acoustic.encode(input)?),
        })
    }

    /// Encodes a sample's context in the configured input mode.
    pub fn encode_sample(&self, sample: &TurnSample) -> Result<EncodedContext, FrontendError> {
        match self.config.input {
            InputMode::Vad => self.encode_stream(&ChannelStream::Vad {
                frames: &sample.context_vad,
                frame_rate_hz: sample.frame_rate_hz,
            }),
            InputMode::Audio => {
                let span = sample
                    .context_audio
                    .as_ref()
                    .ok_or_else(|| FrontendError::MissingAudio(sample.source_id.clone()))?;
                let samples_per_frame = (AUDIO_SAMPLE_RATE_HZ / sample.frame_rate_hz) as usize;
                let target = sample.context_vad.len() * samples_per_frame;
                let audio = load_context_audio(span, target)?;
                self.encode_stream(&ChannelStream::Audio {
                    samples: &audio,
                    sample_rate_hz: AUDIO_SAMPLE_RATE_HZ,
                })
            }
        }
    }
}

/// Maps feature rows into the shared model space with a trainable affine
/// map (`rows · W + b`).
pub fn project<F: Real>(features: &FeatureSequence, proj: &Linear<F>) -> Result<Array2<F>, FrontendError> {
    if proj.in_dim() != features.dim() {
        return Err(FrontendError::DimMismatch {
            expected: proj.in_dim(),
            got: features.dim(),
        });
    }
    Ok(proj.apply(&features.to_real::<F>()))
}
