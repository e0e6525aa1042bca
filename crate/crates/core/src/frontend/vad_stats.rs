//! Per-hop statistics of a VAD stream. Everything before the stream start is
//! treated as silence of unbounded length, so an all-silent input produces
//! identical rows.

use ndarray::Array2;

pub const LINGUISTIC_STATS: usize = 16;
pub const ACOUSTIC_STATS: usize = 12;

const UNBOUNDED: usize = usize::MAX / 4;

struct RunInfo {
    /// Length of the run containing frame `e`, counted up to `e`.
    current: Vec<usize>,
    /// Length of the opposite-state run before the current one.
    previous: Vec<usize>,
    speech_prefix: Vec<usize>,
    transition_prefix: Vec<usize>,
}

fn run_info(v: &[u8]) -> RunInfo {
    let n = v.len();
    let mut current = vec![0; n];
    let mut previous = vec![0; n];
    let mut speech_prefix = vec![0; n + 1];
    let mut transition_prefix = vec![0; n + 1];
    let mut state = 0u8;
    let mut cur = UNBOUNDED;
    let mut prev = 0usize;
    for (e, &x) in v.iter().enumerate() {
        if x != state {
            prev = cur;
            cur = 1;
            state = x;
            transition_prefix[e + 1] = transition_prefix[e] + 1;
        } else {
            cur = cur.saturating_add(1).min(UNBOUNDED);
            transition_prefix[e + 1] = transition_prefix[e];
        }
        current[e] = cur;
        previous[e] = prev;
        speech_prefix[e + 1] = speech_prefix[e] + x as usize;
    }
    RunInfo {
        current,
        previous,
        speech_prefix,
        transition_prefix,
    }
}

fn sat(len: usize, scale_frames: f64) -> f32 {
    (len as f64 / scale_frames).min(1.0) as f32
}

/// Frames overlapping hop `k`: `[start, end)`.
fn hop_frames(k: usize, hop_ms: u32, rate: u32) -> (usize, usize) {
    let per = hop_ms as u64 * rate as u64;
    let start = (k as u64 * per / 1000) as usize;
    let end = ((k as u64 + 1) * per).div_ceil(1000) as usize;
    (start, end)
}

/// Fraction of speech over the `width` frames ending at `e` (inclusive),
/// with pre-stream frames counted as silence.
fn density(info: &RunInfo, e: usize, width: usize) -> f32 {
    let lo = (e + 1).saturating_sub(width);
    (info.speech_prefix[e + 1] - info.speech_prefix[lo]) as f32 / width as f32
}

fn transitions(info: &RunInfo, e: usize, width: usize) -> usize {
    let lo = (e + 1).saturating_sub(width);
    info.transition_prefix[e + 1] - info.transition_prefix[lo]
}

pub fn linguistic(v: &[u8], rate: u32, hop_ms: u32, hops: usize) -> Array2<f32> {
    let info = run_info(v);
    let fs = rate as f64;
    let mut out = Array2::zeros((hops, LINGUISTIC_STATS));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let (a, b) = hop_frames(k, hop_ms, rate);
        let e = b - 1;
        let speaking = v[e] == 1;
        let cur = info.current[e];
        row[0] = (info.speech_prefix[b] - info.speech_prefix[a]) as f32 / (b - a) as f32;
        row[1] = v[e] as f32;
        if speaking {
            for (j, secs) in [0.25, 0.5, 1.0, 2.0, 3.0].into_iter().enumerate() {
                row[2 + j] = sat(cur, secs * fs);
            }
        } else {
            for (j, secs) in [0.2, 0.5, 2.0].into_iter().enumerate() {
                row[7 + j] = sat(cur, secs * fs);
            }
        }
        row[10] = sat(info.previous[e], 0.5 * fs);
        row[11] = sat(info.previous[e], 2.0 * fs);
        row[12] = density(&info, e, rate as usize);
        row[13] = density(&info, e, 3 * rate as usize);
        row[14] = (transitions(&info, e, rate as usize) as f32 / 5.0).min(1.0);
        row[15] = 1.0;
    }
    out
}

pub fn acoustic(v: &[u8], rate: u32, hop_ms: u32, hops: usize) -> Array2<f32> {
    let info = run_info(v);
    let at = |j: isize| -> f32 {
        if j < 0 {
            0.0
        } else {
            v[j as usize] as f32
        }
    };
    let fs = rate as f64;
    let mut out = Array2::zeros((hops, ACOUSTIC_STATS));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let (_, b) = hop_frames(k, hop_ms, rate);
        let e = b - 1;
        let ei = e as isize;
        for j in 0..5 {
            row[j] = at(ei - j as isize);
        }
        let onset = (0..3).any(|j| at(ei - j) == 1.0 && at(ei - j - 1) == 0.0);
        let offset = (0..3).any(|j| at(ei - j) == 0.0 && at(ei - j - 1) == 1.0);
        row[5] = onset as u8 as f32;
        row[6] = offset as u8 as f32;
        row[7] = density(&info, e, 10);
        row[8] = density(&info, e, 25);
        row[9] = sat(info.current[e], 0.1 * fs);
        row[10] = (transitions(&info, e, 10) as f32 / 4.0).min(1.0);
        row[11] = 1.0;
    }
    out
}
