//! Classification and latency summaries. Shift is the positive class.

use serde::{Deserialize, Serialize};

use crate::vad::TurnLabel;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TurnLabel, TurnLabel)>) -> Self {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            c.add(pred, truth);
        }
        c
    }

    pub fn add(&mut self, pred: TurnLabel, truth: TurnLabel) {
        match (pred, truth) {
            (TurnLabel::Shift, TurnLabel::Shift) => self.tp += 1,
            (TurnLabel::Shift, TurnLabel::Hold) => self.fp += 1,
            (TurnLabel::Hold, TurnLabel::Hold) => self.tn += 1,
            (TurnLabel::Hold, TurnLabel::Shift) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for ClassificationReport {
    fn from(c: Confusion) -> Self {
        Self {
            n: c.total(),
            accuracy: c.accuracy(),
            f1: c.f1(),
            precision: c.precision(),
            recall: c.recall(),
            confusion: c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: f64,
    pub p95: f64,
    pub mean: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data, `q` in (0, 100].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl LatencySummary {
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Self {
            p50: nearest_rank(&s, 50.0),
            p95: nearest_rank(&s, 95.0),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            max: s[s.len() - 1],
        })
    }
}

/// One row of a results table: accuracy in percent with two decimals, F1
/// with three, latency in whole milliseconds.
pub fn format_results_row(name: &str, accuracy: f64, f1: f64, latency_ms: Option<f64>) -> String {
    let lat = latency_ms.map_or_else(|| "-".to_string(), |l| format!("{l:.0}"));
    format!("| {name} | {:.2} | {f1:.3} | {lat} |", accuracy * 100.0)
}

pub fn results_table(rows: &[(String, f64, f64, Option<f64>)]) -> String {
    let mut out = String::from("| Model | Acc (%) | F1 | Latency (ms) |\n|---|---|---|---|\n");
    for (name, acc, f1, lat) in rows {
        out.push_str(&format_results_row(name, *acc, *f1, *lat));
        out.push('\n');
    }
    out
}
