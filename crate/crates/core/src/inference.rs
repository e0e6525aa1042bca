//! Frontend plus model, evaluated one context at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::dataset::TurnSample;
use crate::frontend::{ChannelStream, EncodedContext, Frontend, FrontendError};
use crate::metrics::{ClassificationReport, Confusion};
use crate::model::{decide, forward, ForwardTrace, ModelConfig, ModelError, ModelParams, DEFAULT_THRESHOLD};
use crate::vad::{Channel, TurnLabel};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint expects {expected}-d {stream} features, frontend produces {got}")]
    Mismatch {
        stream: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Output for one context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logit: f32,
    pub probability: f32,
    pub decision: TurnLabel,
}

/// Prediction for a labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub decision_frame: usize,
    pub channel: Channel,
    pub label: TurnLabel,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Clone)]
pub struct Predictor {
    pub frontend: Frontend,
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub threshold: f32,
}

impl Predictor {
    pub fn new(frontend: Frontend, config: ModelConfig, params: ModelParams<f32>) -> Result<Self, InferenceError> {
        let fc = frontend.config();
        for (stream, expected, got) in [
            ("linguistic", config.linguistic_dim, fc.linguistic_dim),
            ("acoustic", config.acoustic_dim, fc.acoustic_dim),
        ] {
            if expected != got {
                return Err(InferenceError::Mismatch { stream, expected, got });
            }
        }
        Ok(Self {
            frontend,
            config,
            params,
            threshold: DEFAULT_THRESHOLD as f32,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<f32>) -> Result<Self, InferenceError> {
        Self::new(Frontend::new(ck.frontend), ck.model, ck.params)
    }

    pub fn trace(&self, ctx: &EncodedContext) -> Result<ForwardTrace<f32>, InferenceError> {
        let xl = ctx.linguistic.to_real::<f32>();
        let xa = ctx.acoustic.to_real::<f32>();
        Ok(forward(&self.params, &self.config, &xl, &xa, None)?)
    }

    fn finish(&self, t: &ForwardTrace<f32>) -> Prediction {
        Prediction {
            logit: t.logit,
            probability: t.prob,
            decision: decide(t.prob, self.threshold),
        }
    }

    pub fn predict_stream(&self, input: &ChannelStream<'_>) -> Result<Prediction, InferenceError> {
        let ctx = self.frontend.encode_stream(input)?;
        Ok(self.finish(&self.trace(&ctx)?))
    }

    pub fn predict_sample(&self, sample: &TurnSample) -> Result<Prediction, InferenceError> {
        let ctx = self.frontend.encode_sample(sample)?;
        Ok(self.finish(&self.trace(&ctx)?))
    }

    /// Predictions in input order.
    pub fn predict_all(&self, samples: &[TurnSample]) -> Result<Vec<SamplePrediction>, InferenceError> {
        samples
            .par_iter()
            .map(|s| {
                Ok(SamplePrediction {
                    id: s.source_id.clone(),
                    decision_frame: s.decision_frame,
                    channel: s.channel,
                    label: s.label,
                    prediction: self.predict_sample(s)?,
                })
            })
            .collect()
    }
}

pub fn report(preds: &[SamplePrediction]) -> ClassificationReport {
    Confusion::from_pairs(preds.iter().map(|p| (p.prediction.decision, p.label))).into()
}
