//! Discriminative pattern discovery.
//!
//! Each window gets an increment: the log kernel density of its k nearest
//! neighbours in the positive bag minus the same quantity in the negative
//! bag. Windows with `|delta| <= pi` are neutral and masked out; the trial
//! score is the mean increment of the remaining windows, compared with
//! `lambda`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::InstanceVector;
use crate::ingest::Label;
use crate::neighbors::{build_index, IndexKind, NeighborSearch, NeighborSet, Points};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn label(self) -> Label {
        match self {
            Polarity::Positive => Label::Am,
            Polarity::Negative => Label::Td,
        }
    }
}

/// Pooled instances of one label, searchable by nearest neighbour.
pub struct Bag {
    polarity: Polarity,
    index: Box<dyn NeighborSearch>,
    source_trials: BTreeSet<String>,
}

impl fmt::Debug for Bag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bag")
            .field("polarity", &self.polarity)
            .field("len", &self.len())
            .field("dim", &self.dim())
            .field("source_trials", &self.source_trials.len())
            .finish()
    }
}

impl Bag {
    pub fn from_instances<'a>(
        polarity: Polarity,
        instances: impl IntoIterator<Item = &'a InstanceVector>,
        kind: IndexKind,
    ) -> Result<Self> {
        let mut points: Option<Points> = None;
        let mut source_trials = BTreeSet::new();
        for inst in instances {
            let p = points.get_or_insert_with(|| Points::with_dim(inst.features.len()));
            p.push(&inst.features)?;
            if !source_trials.contains(&inst.trial_id) {
                source_trials.insert(inst.trial_id.clone());
            }
        }
        let points = points.ok_or(Error::EmptyBag)?;
        Self::from_points(polarity, points, source_trials, kind)
    }

    pub fn from_points(
        polarity: Polarity,
        points: impl Into<Arc<Points>>,
        source_trials: BTreeSet<String>,
        kind: IndexKind,
    ) -> Result<Self> {
        Ok(Bag {
            polarity,
            index: build_index(points, kind)?,
            source_trials,
        })
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn points(&self) -> &Points {
        self.index.points()
    }

    /// Trial ids that contributed instances. Empty for bags loaded from disk.
    pub fn source_trials(&self) -> &BTreeSet<String> {
        &self.source_trials
    }

    pub fn knn(&self, query: &[f64], k: usize) -> Result<NeighborSet> {
        self.index.search(query, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpdHyperParams {
    pub k: usize,
    pub pi: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Trials with fewer unmasked windows than this abstain. Off by default.
    pub min_evidence: Option<usize>,
}

impl Default for DpdHyperParams {
    fn default() -> Self {
        DpdHyperParams {
            k: DEFAULT_K,
            pi: 0.0,
            lambda: 0.0,
            gamma: DEFAULT_GAMMA,
            min_evidence: None,
        }
    }
}

impl DpdHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.pi >= 0.0) || !self.pi.is_finite() {
            return Err(Error::Config(format!("pi must be finite and >= 0, got {}", self.pi)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowClass {
    WAm,
    WTd,
    WNm,
}

impl fmt::Display for WindowClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowClass::WAm => "wAM",
            WindowClass::WTd => "wTD",
            WindowClass::WNm => "wNM",
        })
    }
}

impl FromStr for WindowClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wAM" => Ok(WindowClass::WAm),
            "wTD" => Ok(WindowClass::WTd),
            "wNM" => Ok(WindowClass::WNm),
            other => Err(format!("unknown window class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRecord {
    pub window_index: usize,
    pub start_sample: usize,
    pub delta: f64,
    pub mask: bool,
    pub class: WindowClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTrace {
    pub trial_id: String,
    pub windows: Vec<WindowRecord>,
    pub score: f64,
    pub prediction: Label,
    pub no_evidence: bool,
}

impl IncrementTrace {
    pub fn evidence_count(&self) -> usize {
        self.windows.iter().filter(|w| w.mask).count()
    }
}

/// `log((1/k) * sum_j exp(-gamma * d_j))` over the given squared distances,
/// evaluated with the maximum exponent factored out.
pub fn log_density_from_sq(sq_distances: &[f64], gamma: f64) -> f64 {
    debug_assert!(!sq_distances.is_empty());
    let m = sq_distances
        .iter()
        .map(|d| -gamma * d)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = sq_distances.iter().map(|d| (-gamma * d - m).exp()).sum();
    m + s.ln() - (sq_distances.len() as f64).ln()
}

pub fn log_kernel_density(neighbors: &NeighborSet, gamma: f64) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::Input("kernel density needs at least one neighbour".into()));
    }
    Ok(log_density_from_sq(&neighbors.sq_distances, gamma))
}

pub fn increment(query: &[f64], bag_pos: &Bag, bag_neg: &Bag, params: &DpdHyperParams) -> Result<f64> {
    let pos = bag_pos.knn(query, params.k)?;
    let neg = bag_neg.knn(query, params.k)?;
    Ok(log_kernel_density(&pos, params.gamma)? - log_kernel_density(&neg, params.gamma)?)
}

pub fn classify_window(delta: f64, pi: f64) -> WindowClass {
    if delta > pi {
        WindowClass::WAm
    } else if delta < -pi {
        WindowClass::WTd
    } else {
        WindowClass::WNm
    }
}

/// Trial rule: AM iff there is evidence and the score exceeds `lambda`.
#[inline]
pub fn decide(score: f64, no_evidence: bool, lambda: f64) -> Label {
    if !no_evidence && score > lambda {
        Label::Am
    } else {
        Label::Td
    }
}

/// Applies the window rule, the mask and the trial rule to precomputed
/// increments `(window_index, start_sample, delta)` in window order.
pub fn aggregate(
    trial_id: &str,
    increments: impl IntoIterator<Item = (usize, usize, f64)>,
    pi: f64,
    lambda: f64,
    min_evidence: Option<usize>,
) -> IncrementTrace {
    let mut windows = Vec::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (window_index, start_sample, delta) in increments {
        let class = classify_window(delta, pi);
        let mask = class != WindowClass::WNm;
        if mask {
            sum += delta;
            count += 1;
        }
        windows.push(WindowRecord {
            window_index,
            start_sample,
            delta,
            mask,
            class,
        });
    }
    let (score, prediction, no_evidence) = if count == 0 {
        (0.0, Label::Td, true)
    } else {
        let score = sum / count as f64;
        if min_evidence.is_some_and(|m| count < m) {
            (score, Label::Td, true)
        } else {
            (score, decide(score, false, lambda), false)
        }
    };
    IncrementTrace {
        trial_id: trial_id.to_string(),
        windows,
        score,
        prediction,
        no_evidence,
    }
}

pub fn classify_trial(
    instances: &[InstanceVector],
    bag_pos: &Bag,
    bag_neg: &Bag,
    params: &DpdHyperParams,
) -> Result<IncrementTrace> {
    params.validate()?;
    let first = instances
        .first()
        .ok_or_else(|| Error::Input("trial has no windows".into()))?;
    if bag_pos.is_empty() || bag_neg.is_empty() {
        return Err(Error::EmptyBag);
    }
    if instances.iter().any(|i| i.trial_id != first.trial_id) {
        return Err(Error::Input("instances span more than one trial".into()));
    }
    let increments = instances
        .iter()
        .map(|inst| Ok((inst.window_index, inst.start_sample, increment(&inst.features, bag_pos, bag_neg, params)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(
        &first.trial_id,
        increments,
        params.pi,
        params.lambda,
        params.min_evidence,
    ))
}

pub const TRACE_HEADER: &str = "trial_id,window_index,start_sample,delta,mask,class";

pub fn write_trace_csv<'a>(traces: impl IntoIterator<Item = &'a IncrementTrace>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for t in traces {
        for w in &t.windows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t.trial_id,
                w.window_index,
                w.start_sample,
                w.delta,
                u8::from(w.mask),
                w.class
            )?;
        }
    }
    Ok(())
}
