//! Audio-mode statistics and 16 kHz mono WAV I/O.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrontendError, AUDIO_SAMPLE_RATE_HZ};
use crate::dataset::AudioSpan;

const MEL_BANDS: usize = 24;
const FFT_SIZE: usize = 1024;
const ENERGY_FLOOR: f64 = 1e-8;

pub const LINGUISTIC_STATS: usize = MEL_BANDS + 3;
pub const ACOUSTIC_STATS: usize = 9;

fn hop_samples(hop_ms: u32) -> usize {
    (AUDIO_SAMPLE_RATE_HZ as usize * hop_ms as usize) / 1000
}

/// `width` samples ending just before `end`, zero-filled before the start.
fn window_before(x: &[f32], end: usize, width: usize) -> Vec<f64> {
    let mut w = vec![0.0; width];
    let lo = end.saturating_sub(width);
    let off = width - (end - lo);
    for (dst, &src) in w[off..].iter_mut().zip(&x[lo..end]) {
        *dst = src as f64;
    }
    w
}

fn log_energy(w: &[f64]) -> f64 {
    let ms = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    ((ms + ENERGY_FLOOR).ln() + 8.0) / 8.0
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over FFT bins, 50 Hz to Nyquist.
fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let nyquist = AUDIO_SAMPLE_RATE_HZ as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(50.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_hz = AUDIO_SAMPLE_RATE_HZ as f64 / FFT_SIZE as f64;
    (0..MEL_BANDS)
        .map(|b| {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..=FFT_SIZE / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Spectrum {
    fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..FFT_SIZE)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / FFT_SIZE as f64).cos())
            .collect();
        Self { fft, window }
    }

    fn power(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..=FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn linguistic_stats(x: &[f32], hop_ms: u32, hops: usize) -> Array2<f32> {
    let hop = hop_samples(hop_ms);
    let bank = mel_filterbank();
    let spec = Spectrum::new();
    let mut out = Array2::zeros((hops, LINGUISTIC_STATS));
    let mut prev_energy = log_energy(&[0.0]);
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let end = (k + 1) * hop;
        let power = spec.power(&window_before(x, end, FFT_SIZE));
        for (b, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().map(|&(i, w)| w * power[i]).sum();
            row[b] = (((e + ENERGY_FLOOR).ln() + 8.0) / 16.0) as f32;
        }
        let energy = log_energy(&window_before(x, end, hop));
        row[MEL_BANDS] = energy as f32;
        row[MEL_BANDS + 1] = (energy - prev_energy) as f32;
        row[MEL_BANDS + 2] = 1.0;
        prev_energy = energy;
    }
    out
}

pub fn acoustic_stats(x: &[f32], hop_ms: u32, hops: usize) -> Array2<f32> {
    const WIN: usize = 400;
    let hop = hop_samples(hop_ms);
    let silent = log_energy(&[0.0]);
    let mut energies: Vec<f64> = Vec::with_capacity(hops);
    let mut out = Array2::zeros((hops, ACOUSTIC_STATS));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let end = (k + 1) * hop;
        let w = window_before(x, end, WIN);
        let e = log_energy(&w);
        let hist = |back: usize| -> f64 {
            if k >= back {
                energies[k - back]
            } else {
                silent
            }
        };
        let (e1, e2) = (hist(1), hist(2));
        let zc = w.windows(2).filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0) && (p[0] != 0.0 || p[1] != 0.0)).count();
        let mean_of = |n: usize| -> f64 { (e + (1..n).map(hist).sum::<f64>()) / n as f64 };
        let recent = log_energy(&w[WIN - hop..]);
        let older = log_energy(&w[..WIN - hop]);
        row[0] = e as f32;
        row[1] = ((zc as f64 / WIN as f64) * 5.0).min(1.0) as f32;
        row[2] = (e - e1) as f32;
        row[3] = (e - 2.0 * e1 + e2) as f32;
        row[4] = mean_of(5) as f32;
        row[5] = mean_of(20) as f32;
        row[6] = w.iter().fold(0.0f64, |m, v| m.max(v.abs())) as f32;
        row[7] = (recent - older) as f32;
        row[8] = 1.0;
        energies.push(e);
    }
    out
}

fn audio_err(path: &Path, e: impl std::fmt::Display) -> FrontendError {
    FrontendError::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a mono 16 kHz WAV (16-bit integer or 32-bit float) as `[-1, 1]`
/// samples.
pub fn read_wav_mono(path: &Path) -> Result<Vec<f32>, FrontendError> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(path, format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != AUDIO_SAMPLE_RATE_HZ {
        return Err(FrontendError::SampleRate(spec.sample_rate));
    }
    match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| audio_err(path, e)),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| audio_err(path, e))
        }
    }
}

/// Writes 16-bit PCM mono at 16 kHz.
pub fn write_wav_mono(path: &Path, samples: &[f32]) -> Result<(), FrontendError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: AUDIO_SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| audio_err(path, e))?;
    }
    w.finalize().map_err(|e| audio_err(path, e))
}

/// Loads a sample's audio span and left-pads it with silence to
/// `target_samples`.
pub fn load_context_audio(span: &AudioSpan, target_samples: usize) -> Result<Vec<f32>, FrontendError> {
    let all = read_wav_mono(&span.path)?;
    if span.end_sample > all.len() || span.start_sample > span.end_sample {
        return Err(audio_err(
            &span.path,
            format!(
                "span [{}, {}) outside {} samples",
                span.start_sample,
                span.end_sample,
                all.len()
            ),
        ));
    }
    let mut out = vec![0.0f32; span.pad_samples];
    out.extend_from_slice(&all[span.start_sample..span.end_sample]);
    if out.len() != target_samples {
        return Err(audio_err(
            &span.path,
            format!("context has {} samples, expected {target_samples}", out.len()),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_and_span_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        let x: Vec<f32> = (0..3200).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        write_wav_mono(&p, &x).unwrap();
        let y = read_wav_mono(&p).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));

        let span = AudioSpan {
            path: p,
            start_sample: 320,
            end_sample: 3200,
            pad_samples: 100,
        };
        let ctx = load_context_audio(&span, 2980).unwrap();
        assert!(ctx[..100].iter().all(|&v| v == 0.0));
        assert_eq!(ctx[100], y[320]);
        assert!(load_context_audio(&span, 3000).is_err());
    }

    #[test]
    fn tone_has_energy_in_the_right_band() {
        let x: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 16_000.0).sin() * 0.5)
            .collect();
        let s = linguistic_stats(&x, 60, 10);
        let row = s.row(9);
        let peak = (0..MEL_BANDS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let bank = mel_filterbank();
        let bin = (1000.0 / (16_000.0 / FFT_SIZE as f64)).round() as usize;
        assert!(bank[peak].iter().any(|&(k, _)| k.abs_diff(bin) <= 1));
    }
}
