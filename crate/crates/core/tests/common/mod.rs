//! Helpers shared by the integration tests, including a naive reference
//! implementation of the increment rule.

#![allow(dead_code)]

use std::io::Write;

use dpdkit::dpd::WindowClass;
use dpdkit::evalharness::{prepare, LabeledTrial};
use dpdkit::ingest::Label;
use dpdkit::synthgen::{generate, SynthConfig, SynthTrial};

/// Writes straight to stdout so the line shows up even when libtest
/// captures output.
pub fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

pub fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn synth(cfg: &SynthConfig) -> (Vec<SynthTrial>, Vec<LabeledTrial>) {
    let trials = generate(cfg).expect("valid synth config");
    let recs: Vec<_> = trials.iter().map(|t| t.recording.clone()).collect();
    let data = prepare(&recs, cfg.window_samples).expect("prepare");
    (trials, data)
}

// ------------------------------------------------------------ naive oracle

pub fn naive_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

/// Every distance, fully sorted, ties broken by row index.
pub fn naive_knn(query: &[f64], rows: &[&[f64]], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows.iter().enumerate().map(|(i, r)| (i, naive_sq_dist(query, r))).collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// `ln((1/k) sum exp(-gamma d))`, summed directly unless the largest term
/// would underflow.
pub fn naive_log_density(sq: &[f64], gamma: f64) -> f64 {
    let k = sq.len() as f64;
    let direct: f64 = sq.iter().map(|d| (-gamma * d).exp()).sum();
    if direct > 1e-300 {
        return (direct / k).ln();
    }
    let m = sq.iter().map(|d| -gamma * d).fold(f64::NEG_INFINITY, f64::max);
    m + (sq.iter().map(|d| (-gamma * d - m).exp()).sum::<f64>() / k).ln()
}

pub fn naive_delta(query: &[f64], pos: &[&[f64]], neg: &[&[f64]], k: usize, gamma: f64) -> f64 {
    let p: Vec<f64> = naive_knn(query, pos, k).into_iter().map(|x| x.1).collect();
    let n: Vec<f64> = naive_knn(query, neg, k).into_iter().map(|x| x.1).collect();
    naive_log_density(&p, gamma) - naive_log_density(&n, gamma)
}

pub fn naive_class(delta: f64, pi: f64) -> WindowClass {
    if delta.abs() <= pi {
        WindowClass::WNm
    } else if delta > 0.0 {
        WindowClass::WAm
    } else {
        WindowClass::WTd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveTrial {
    pub deltas: Vec<f64>,
    pub classes: Vec<WindowClass>,
    pub masks: Vec<bool>,
    pub score: f64,
    pub no_evidence: bool,
    pub prediction: Label,
}

pub fn naive_trial(deltas: Vec<f64>, pi: f64, lambda: f64) -> NaiveTrial {
    let classes: Vec<_> = deltas.iter().map(|&d| naive_class(d, pi)).collect();
    let masks: Vec<bool> = classes.iter().map(|c| *c != WindowClass::WNm).collect();
    let kept: Vec<f64> = deltas.iter().zip(&masks).filter(|(_, m)| **m).map(|(d, _)| *d).collect();
    let (score, no_evidence) = if kept.is_empty() {
        (0.0, true)
    } else {
        (kept.iter().sum::<f64>() / kept.len() as f64, false)
    };
    let prediction = if !no_evidence && score > lambda { Label::Am } else { Label::Td };
    NaiveTrial {
        deltas,
        classes,
        masks,
        score,
        no_evidence,
        prediction,
    }
}
