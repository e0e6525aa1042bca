//! Gradient-activation attribution at the encoder outputs.
//!
//! Everything here differentiates the pre-sigmoid shift logit, never the
//! loss, so results do not depend on the label. Computations run in `f64`.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TurnSample;
use crate::frontend::{Frontend, FrontendError};
use crate::model::{backward, forward, ModelConfig, ModelError, ModelParams};

pub const TEMPORAL_BUCKETS: usize = 100;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("both gradient-activation norms are zero; contribution ratio is undefined")]
    Undefined,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("export: {0}")]
    Export(String),
}

/// Left-closed speech-span bins in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DurationBin {
    #[serde(rename = "0-3s")]
    UpTo3,
    #[serde(rename = "3-6s")]
    From3To6,
    #[serde(rename = "6-9s")]
    From6To9,
    #[serde(rename = ">9s")]
    Over9,
}

impl DurationBin {
    pub const ALL: [DurationBin; 4] = [Self::UpTo3, Self::From3To6, Self::From6To9, Self::Over9];

    pub fn from_seconds(s: f64) -> Self {
        if s < 3.0 {
            Self::UpTo3
        } else if s < 6.0 {
            Self::From3To6
        } else if s < 9.0 {
            Self::From6To9
        } else {
            Self::Over9
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::UpTo3 => "0-3s",
            Self::From3To6 => "3-6s",
            Self::From6To9 => "6-9s",
            Self::Over9 => ">9s",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderContribution {
    pub rho_linguistic: f64,
    pub rho_acoustic: f64,
    pub duration_bin: DurationBin,
}

/// `‖g ⊙ x‖₂` over all entries.
pub fn grad_activation_norm(x: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Result<f64, AttributionError> {
    if x.dim() != g.dim() {
        return Err(AttributionError::Shape(format!(
            "activation {:?} vs gradient {:?}",
            x.dim(),
            g.dim()
        )));
    }
    let mut s = 0.0;
    Zip::from(&x).and(&g).for_each(|&a, &b| s += (a * b) * (a * b));
    Ok(s.sqrt())
}

/// Contribution ratios `ρ_i = ‖∇_i ⊙ x_i‖ / Σ_j ‖∇_j ⊙ x_j‖` over any number
/// of streams given as `(activation, gradient)` pairs.
pub fn contribution_ratios(streams: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)]) -> Result<Vec<f64>, AttributionError> {
    let norms = streams
        .iter()
        .map(|(x, g)| grad_activation_norm(*x, *g))
        .collect::<Result<Vec<_>, _>>()?;
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(AttributionError::Undefined);
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

pub fn encoder_contribution(
    linguistic: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
    acoustic: (ArrayView2<'_, f64>, ArrayView2<'_, f64>),
    speech_span_s: f64,
) -> Result<EncoderContribution, AttributionError> {
    let rho = contribution_ratios(&[linguistic, acoustic])?;
    Ok(EncoderContribution {
        rho_linguistic: rho[0],
        rho_acoustic: rho[1],
        duration_bin: DurationBin::from_seconds(speech_span_s),
    })
}

/// Per-frame L2 mass of `g ⊙ x` accumulated into percentile buckets of the
/// un-padded part of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalAttribution {
    /// Accumulated mass per bucket.
    pub raw: Vec<f64>,
    /// `raw` divided by its total; absent when no mass exists.
    pub normalized: Option<Vec<f64>>,
    /// Sum of per-frame masses before bucketing.
    pub frame_mass: f64,
}

/// Bucket of frame `t` out of `n`. Frames sit at `t/(n−1)` of the way from
/// the first (0%) to the last (100%); the last bucket is closed on the
/// right. A lone frame counts as the last one.
pub fn bucket_of(t: usize, n: usize) -> usize {
    if n <= 1 {
        return TEMPORAL_BUCKETS - 1;
    }
    ((TEMPORAL_BUCKETS * t) / (n - 1)).min(TEMPORAL_BUCKETS - 1)
}

pub fn bucket_masses(masses: &[f64]) -> TemporalAttribution {
    let mut raw = vec![0.0; TEMPORAL_BUCKETS];
    let n = masses.len();
    for (t, &m) in masses.iter().enumerate() {
        raw[bucket_of(t, n)] += m;
    }
    let frame_mass: f64 = masses.iter().sum();
    let total: f64 = raw.iter().sum();
    let normalized = (total > 0.0).then(|| raw.iter().map(|v| v / total).collect());
    TemporalAttribution {
        raw,
        normalized,
        frame_mass,
    }
}

/// `skip` leading rows (padding) are ignored; the rest are mapped onto the
/// 0-100% axis.
pub fn temporal_attribution(
    x: ArrayView2<'_, f64>,
    g: ArrayView2<'_, f64>,
    skip: usize,
) -> Result<TemporalAttribution, AttributionError> {
    if x.dim() != g.dim() {
        return Err(AttributionError::Shape(format!(
            "activation {:?} vs gradient {:?}",
            x.dim(),
            g.dim()
        )));
    }
    if skip >= x.nrows() {
        return Err(AttributionError::Shape(format!(
            "{skip} padding rows leave nothing of {}",
            x.nrows()
        )));
    }
    let masses: Vec<f64> = x
        .rows()
        .into_iter()
        .zip(g.rows())
        .skip(skip)
        .map(|(xr, gr)| xr.iter().zip(gr).map(|(a, b)| (a * b) * (a * b)).sum::<f64>().sqrt())
        .collect();
    Ok(bucket_masses(&masses))
}

/// Anything that can report its logit and the logit's gradient with respect
/// to both encoder-output matrices.
pub trait Attributable {
    fn logit_gradients(
        &self,
        linguistic: &Array2<f64>,
        acoustic: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>, Array2<f64>), AttributionError>;
}

impl Attributable for (ModelParams<f64>, ModelConfig) {
    fn logit_gradients(
        &self,
        linguistic: &Array2<f64>,
        acoustic: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>, Array2<f64>), AttributionError> {
        let trace = forward(&self.0, &self.1, linguistic, acoustic, None)?;
        let g = backward(&self.0, &trace, 1.0);
        Ok((trace.logit, g.linguistic, g.acoustic))
    }
}

/// `y = Σ a ⊙ x₁ + Σ b ⊙ x₂`.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl Attributable for LinearProbe {
    fn logit_gradients(
        &self,
        linguistic: &Array2<f64>,
        acoustic: &Array2<f64>,
    ) -> Result<(f64, Array2<f64>, Array2<f64>), AttributionError> {
        if linguistic.dim() != self.a.dim() || acoustic.dim() != self.b.dim() {
            return Err(AttributionError::Shape("probe weights do not match inputs".into()));
        }
        let y = (&self.a * linguistic).sum() + (&self.b * acoustic).sum();
        Ok((y, self.a.clone(), self.b.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub id: String,
    pub decision_frame: usize,
    pub speech_span_s: f64,
    pub logit: f64,
    /// `None` when both norms vanish.
    pub contribution: Option<EncoderContribution>,
    pub linguistic: TemporalAttribution,
    pub acoustic: TemporalAttribution,
}

/// Full attribution of one pair of encoder outputs. `skip_*` are padding rows.
pub fn attribute(
    model: &dyn Attributable,
    linguistic: &Array2<f64>,
    acoustic: &Array2<f64>,
    skip: (usize, usize),
    speech_span_s: f64,
) -> Result<(f64, Option<EncoderContribution>, TemporalAttribution, TemporalAttribution), AttributionError> {
    let (logit, gl, ga) = model.logit_gradients(linguistic, acoustic)?;
    let contribution = match encoder_contribution(
        (linguistic.view(), gl.view()),
        (acoustic.view(), ga.view()),
        speech_span_s,
    ) {
        Ok(c) => Some(c),
        Err(AttributionError::Undefined) => None,
        Err(e) => return Err(e),
    };
    let tl = temporal_attribution(linguistic.view(), gl.view(), skip.0)?;
    let ta = temporal_attribution(acoustic.view(), ga.view(), skip.1)?;
    Ok((logit, contribution, tl, ta))
}

/// Rows of a feature stream at `feature_rate_hz` that lie entirely inside
/// `pad_frames` of padding at `frame_rate_hz`.
pub fn padding_rows(pad_frames: usize, frame_rate_hz: u32, feature_rate_hz: f64) -> usize {
    let hop_frames = frame_rate_hz as f64 / feature_rate_hz;
    (pad_frames as f64 / hop_frames + 1e-9).floor() as usize
}

pub fn attribute_sample(
    frontend: &Frontend,
    model: &dyn Attributable,
    sample: &TurnSample,
) -> Result<SampleAttribution, AttributionError> {
    let ctx = frontend.encode_sample(sample)?;
    let xl = ctx.linguistic.to_real::<f64>();
    let xa = ctx.acoustic.to_real::<f64>();
    let skip = (
        padding_rows(sample.pad_frames, sample.frame_rate_hz, ctx.linguistic.frame_rate_hz()),
        padding_rows(sample.pad_frames, sample.frame_rate_hz, ctx.acoustic.frame_rate_hz()),
    );
    let span = sample.speech_span_s();
    let (logit, contribution, linguistic, acoustic) = attribute(model, &xl, &xa, skip, span)?;
    Ok(SampleAttribution {
        id: sample.source_id.clone(),
        decision_frame: sample.decision_frame,
        speech_span_s: span,
        logit,
        contribution,
        linguistic,
        acoustic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: DurationBin,
    pub count: usize,
    pub rho_linguistic: f64,
    pub rho_acoustic: f64,
}

/// Mean ratios per duration bin; empty bins are left out.
pub fn bin_by_duration(items: &[EncoderContribution]) -> Vec<BinSummary> {
    DurationBin::ALL
        .iter()
        .filter_map(|&bin| {
            let in_bin: Vec<_> = items.iter().filter(|c| c.duration_bin == bin).collect();
            if in_bin.is_empty() {
                return None;
            }
            let n = in_bin.len() as f64;
            Some(BinSummary {
                bin,
                count: in_bin.len(),
                rho_linguistic: in_bin.iter().map(|c| c.rho_linguistic).sum::<f64>() / n,
                rho_acoustic: in_bin.iter().map(|c| c.rho_acoustic).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Mean of the normalized bucket vectors that exist.
pub fn mean_profile<'a>(items: impl IntoIterator<Item = &'a TemporalAttribution>) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; TEMPORAL_BUCKETS];
    let mut n = 0usize;
    for t in items {
        if let Some(v) = &t.normalized {
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            n += 1;
        }
    }
    (n > 0).then(|| acc.into_iter().map(|v| v / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub samples: Vec<SampleAttribution>,
    pub bins: Vec<BinSummary>,
    /// Samples whose ratio was undefined.
    pub undefined: usize,
    pub linguistic_profile: Option<Vec<f64>>,
    pub acoustic_profile: Option<Vec<f64>>,
}

pub fn attribute_all(
    frontend: &Frontend,
    params: &ModelParams<f32>,
    config: &ModelConfig,
    samples: &[TurnSample],
) -> Result<AttributionReport, AttributionError> {
    let model = (params.cast::<f64>(), config.clone());
    let per: Vec<SampleAttribution> = samples
        .par_iter()
        .map(|s| attribute_sample(frontend, &model, s))
        .collect::<Result<_, _>>()?;
    let contributions: Vec<EncoderContribution> = per.iter().filter_map(|s| s.contribution).collect();
    Ok(AttributionReport {
        bins: bin_by_duration(&contributions),
        undefined: per.len() - contributions.len(),
        linguistic_profile: mean_profile(per.iter().map(|s| &s.linguistic)),
        acoustic_profile: mean_profile(per.iter().map(|s| &s.acoustic)),
        samples: per,
    })
}

pub fn write_bins_csv<W: Write>(w: W, bins: &[BinSummary]) -> Result<(), AttributionError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| AttributionError::Export(e.to_string());
    out.write_record(["bin", "count", "rho_linguistic", "rho_acoustic"]).map_err(err)?;
    for b in bins {
        out.write_record([
            b.bin.label().to_string(),
            b.count.to_string(),
            b.rho_linguistic.to_string(),
            b.rho_acoustic.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| AttributionError::Export(e.to_string()))
}

/// One row per stream, one column per bucket.
pub fn write_temporal_csv<W: Write>(w: W, rows: &[(&str, &[f64])]) -> Result<(), AttributionError> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| AttributionError::Export(e.to_string());
    let mut header = vec!["stream".to_string()];
    header.extend((0..TEMPORAL_BUCKETS).map(|b| format!("b{b:02}")));
    out.write_record(&header).map_err(err)?;
    for (name, v) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(v.iter().map(f64::to_string));
        out.write_record(&rec).map_err(err)?;
    }
    out.flush().map_err(|e| AttributionError::Export(e.to_string()))
}
