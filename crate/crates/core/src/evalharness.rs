//! Cross-validation protocol, hyper-parameter search, metrics and ROC.
//!
//! Outer folds are independent random draws of `test_size` trials. For each
//! outer fold the PCA projector and both bags are built from the training
//! trials only; hyper-parameters are chosen by an inner random-split CV on
//! the same training trials. Neighbour distances for every inner test window
//! are computed once, at the largest k in the grid, and every grid point is
//! evaluated from prefixes of that cache.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::baselines::{kmeans, knn_majority_trial, knn_window_vote, majority, no_dpd_trial, DEFAULT_CODEBOOK_SIZE};
use crate::dpd::{aggregate, classify_trial, decide, log_density_from_sq, Bag, DpdHyperParams, IncrementTrace, Polarity};
use crate::error::{Error, Result};
use crate::features::{fit_pca, InstanceVector, PcaProjector, DEFAULT_DIM};
use crate::ingest::{windowize, Label, RawWindow, TrialRecording, DEFAULT_WINDOW_SAMPLES};
use crate::kv::KvFile;
use crate::neighbors::IndexKind;
use crate::seed;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_TEST_SIZE: usize = 12;
pub const DEFAULT_K_GRID: [usize; 5] = [1, 3, 5, 7, 9];

// ---------------------------------------------------------------- folds

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    /// Indices into [`FoldPlan::trial_ids`], ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub trial_ids: Vec<String>,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.folds[fold].train.iter().map(|&i| self.trial_ids[i].as_str()).collect()
    }

    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.folds[fold].test.iter().map(|&i| self.trial_ids[i].as_str()).collect()
    }
}

/// Repeated random sub-sampling: every fold draws `test_size` trials
/// uniformly without replacement, independently of the other folds.
pub fn make_folds(trial_ids: &[String], labels: &[Label], n_folds: usize, test_size: usize, seed: u64) -> Result<FoldPlan> {
    if trial_ids.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: trial_ids.len(),
            got: labels.len(),
        });
    }
    let n = trial_ids.len();
    if n_folds == 0 || test_size == 0 {
        return Err(Error::Config("folds and test size must be >= 1".into()));
    }
    if test_size >= n {
        return Err(Error::InsufficientData(format!(
            "test size {test_size} needs more than {test_size} trials, got {n}"
        )));
    }
    let folds = (0..n_folds)
        .map(|f| {
            let mut rng = seed::rng(seed::derive(seed, "fold", f as u64));
            let mut test = sample(&mut rng, n, test_size).into_vec();
            test.sort_unstable();
            let in_test: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..n).filter(|i| !in_test.contains(i)).collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldPlan {
        seed,
        trial_ids: trial_ids.to_vec(),
        folds,
    })
}

// -------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub precision: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        let n = tp + fp + tn + fn_;
        if n == 0 {
            return Err(Error::Input("no predictions to evaluate".into()));
        }
        Ok(Metrics {
            tp,
            fp,
            tn,
            fn_,
            accuracy: (tp + tn) as f64 / n as f64,
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            false_positive_rate: ratio(fp, fp + tn),
            precision: ratio(tp, tp + fp),
        })
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(name, value)` pairs in report order.
    pub fn rates(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("accuracy", Some(self.accuracy)),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("false_positive_rate", self.false_positive_rate),
            ("precision", self.precision),
        ]
    }
}

pub fn evaluate(predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Am, Label::Am) => tp += 1,
            (Label::Am, Label::Td) => fp += 1,
            (Label::Td, Label::Td) => tn += 1,
            (Label::Td, Label::Am) => fn_ += 1,
        }
    }
    Metrics::from_counts(tp, fp, tn, fn_)
}

/// Mean and sample standard deviation over the folds where a value exists.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Summary {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    let n = v.len();
    if n == 0 {
        return Summary::default();
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt());
    Summary {
        mean: Some(mean),
        sd,
        n,
    }
}

// ------------------------------------------------------------------ ROC

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps the threshold over every distinct score, highest first. Trials
/// without evidence should carry `-inf`.
pub fn roc_sweep(scores: &[f64], labels: &[Label]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("ROC scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::RocUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}

// ------------------------------------------------------------- protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dpd,
    NoDpd,
    Knn,
    GmiGen,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dpd, Method::NoDpd, Method::Knn, Method::GmiGen];

    fn has_score(self) -> bool {
        self != Method::Knn
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dpd => "dpd",
            Method::NoDpd => "no-dpd",
            Method::Knn => "knn",
            Method::GmiGen => "gmi-gen",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected dpd, no-dpd, knn or gmi-gen)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PiGrid {
    /// `{0} U {ub / 2^(levels-2), ..., ub / 2, ub}` with `ub` the given
    /// quantile of pooled inner-test `|delta|`.
    Auto { levels: usize, quantile: f64 },
    Explicit(Vec<f64>),
}

impl Default for PiGrid {
    fn default() -> Self {
        PiGrid::Auto {
            levels: 8,
            quantile: 0.95,
        }
    }
}

/// Evenly spaced values from `lo` to `hi` inclusive.
pub fn lambda_range(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("bad lambda range {lo}..{hi} step {step}")));
    }
    let n = ((hi - lo) / step).round() as usize;
    if n > 1_000_000 {
        return Err(Error::Config("lambda grid too large".into()));
    }
    if n == 0 {
        return Ok(vec![lo]);
    }
    Ok((0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub seed: u64,
    pub folds: usize,
    pub test_size: usize,
    pub inner_folds: usize,
    pub inner_test_size: usize,
    pub pca_dim: usize,
    pub window_samples: usize,
    pub k_grid: Vec<usize>,
    pub gamma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub pi_grid: PiGrid,
    pub codebook_size: usize,
    pub min_evidence: Option<usize>,
    pub index: IndexKind,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            seed: 0,
            folds: DEFAULT_FOLDS,
            test_size: DEFAULT_TEST_SIZE,
            inner_folds: DEFAULT_FOLDS,
            inner_test_size: DEFAULT_TEST_SIZE,
            pca_dim: DEFAULT_DIM,
            window_samples: DEFAULT_WINDOW_SAMPLES,
            k_grid: DEFAULT_K_GRID.to_vec(),
            gamma_grid: vec![1.0],
            lambda_grid: lambda_range(-8.0, 0.0, 0.01).expect("default range is valid"),
            pi_grid: PiGrid::default(),
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            min_evidence: None,
            index: IndexKind::BruteForce,
        }
    }
}

pub const PROTOCOL_KEYS: [&str; 17] = [
    "seed",
    "folds",
    "test_size",
    "inner_folds",
    "inner_test_size",
    "pca_dim",
    "window_samples",
    "k_grid",
    "gamma_grid",
    "lambda_min",
    "lambda_max",
    "lambda_step",
    "pi_grid",
    "pi_levels",
    "pi_quantile",
    "codebook_size",
    "min_evidence",
];

impl ProtocolConfig {
    /// Reads a `key = value` protocol file; absent keys keep their defaults.
    /// `pi_grid` is `auto` or a comma-separated list; `index` may also be set
    /// to `brute-force` or `ball-tree`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut allowed = PROTOCOL_KEYS.to_vec();
        allowed.push("index");
        kv.reject_unknown(&allowed)?;
        let d = ProtocolConfig::default();
        let lambda_grid = match (
            kv.get::<f64>("lambda_min")?,
            kv.get::<f64>("lambda_max")?,
            kv.get::<f64>("lambda_step")?,
        ) {
            (None, None, None) => d.lambda_grid.clone(),
            (lo, hi, step) => lambda_range(lo.unwrap_or(-8.0), hi.unwrap_or(0.0), step.unwrap_or(0.01))?,
        };
        let pi_grid = match kv.raw("pi_grid") {
            None | Some("auto") => {
                let PiGrid::Auto { levels, quantile } = PiGrid::default() else {
                    unreachable!()
                };
                PiGrid::Auto {
                    levels: kv.get("pi_levels")?.unwrap_or(levels),
                    quantile: kv.get("pi_quantile")?.unwrap_or(quantile),
                }
            }
            Some(_) => PiGrid::Explicit(kv.get_list("pi_grid")?.unwrap_or_default()),
        };
        let index = match kv.raw("index") {
            None | Some("brute-force") => IndexKind::BruteForce,
            Some("ball-tree") => IndexKind::BallTree,
            Some(other) => return Err(Error::Config(format!("unknown index `{other}`"))),
        };
        let cfg = ProtocolConfig {
            seed: kv.get("seed")?.unwrap_or(d.seed),
            folds: kv.get("folds")?.unwrap_or(d.folds),
            test_size: kv.get("test_size")?.unwrap_or(d.test_size),
            inner_folds: kv.get("inner_folds")?.unwrap_or(d.inner_folds),
            inner_test_size: kv.get("inner_test_size")?.unwrap_or(d.inner_test_size),
            pca_dim: kv.get("pca_dim")?.unwrap_or(d.pca_dim),
            window_samples: kv.get("window_samples")?.unwrap_or(d.window_samples),
            k_grid: kv.get_list("k_grid")?.unwrap_or(d.k_grid),
            gamma_grid: kv.get_list("gamma_grid")?.unwrap_or(d.gamma_grid),
            lambda_grid,
            pi_grid,
            codebook_size: kv.get("codebook_size")?.unwrap_or(d.codebook_size),
            min_evidence: kv.get("min_evidence")?,
            index,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.folds == 0 || self.inner_folds == 0 {
            return bad("fold counts must be >= 1".into());
        }
        if self.test_size == 0 || self.inner_test_size == 0 {
            return bad("test sizes must be >= 1".into());
        }
        if self.pca_dim == 0 || self.window_samples == 0 || self.codebook_size == 0 {
            return bad("pca_dim, window_samples and codebook_size must be >= 1".into());
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return bad("k grid must be nonempty with every k >= 1".into());
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("gamma grid must be nonempty with every gamma finite and > 0".into());
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !l.is_finite()) {
            return bad("lambda grid must be nonempty and finite".into());
        }
        match &self.pi_grid {
            PiGrid::Auto { levels, quantile } => {
                if *levels == 0 || !(0.0..=1.0).contains(quantile) {
                    return bad(format!("pi grid needs levels >= 1 and quantile in [0, 1], got {levels}, {quantile}"));
                }
            }
            PiGrid::Explicit(v) => {
                if v.is_empty() || v.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                    return bad("pi grid must be nonempty with every pi finite and >= 0".into());
                }
            }
        }
        if self.min_evidence == Some(0) {
            return bad("min_evidence must be >= 1 when set".into());
        }
        Ok(())
    }

    fn k_max(&self) -> usize {
        self.k_grid.iter().copied().max().unwrap_or(1)
    }
}

// ------------------------------------------------------------- datasets

/// A labelled trial cut into raw windows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrial {
    pub trial_id: String,
    pub label: Label,
    pub windows: Vec<RawWindow>,
}

pub fn prepare(trials: &[TrialRecording], window_samples: usize) -> Result<Vec<LabeledTrial>> {
    let mut seen = BTreeSet::new();
    trials
        .iter()
        .map(|t| {
            if !seen.insert(t.trial_id.as_str()) {
                return Err(Error::Input(format!("duplicate trial id `{}`", t.trial_id)));
            }
            let label = t
                .label
                .ok_or_else(|| Error::Input(format!("trial `{}` has no label", t.trial_id)))?;
            Ok(LabeledTrial {
                trial_id: t.trial_id.clone(),
                label,
                windows: windowize(t, window_samples)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTrial {
    pub trial_id: String,
    pub label: Label,
    pub instances: Vec<InstanceVector>,
}

pub fn project_trials(projector: &PcaProjector, trials: &[&LabeledTrial]) -> Result<Vec<ProjectedTrial>> {
    trials
        .iter()
        .map(|t| {
            Ok(ProjectedTrial {
                trial_id: t.trial_id.clone(),
                label: t.label,
                instances: t.windows.iter().map(|w| projector.project(w)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn build_bags(trials: &[&ProjectedTrial], kind: IndexKind) -> Result<(Bag, Bag)> {
    let side = |label: Label| trials.iter().filter(move |t| t.label == label).flat_map(|t| &t.instances);
    let pos = Bag::from_instances(Polarity::Positive, side(Label::Am), kind)
        .map_err(|_| Error::InsufficientData("training trials contain no AM trial".into()))?;
    let neg = Bag::from_instances(Polarity::Negative, side(Label::Td), kind)
        .map_err(|_| Error::InsufficientData("training trials contain no TD trial".into()))?;
    Ok((pos, neg))
}

fn guard(what: &str, held_out: &[&str], used: &BTreeSet<String>) -> Result<()> {
    if let Some(id) = held_out.iter().find(|id| used.contains(**id)) {
        return Err(Error::Invariant(format!("held-out trial `{id}` leaked into {what}")));
    }
    Ok(())
}

// ---------------------------------------------------------- grid search

/// Neighbour distances of every inner-test window, at the largest k.
struct InnerCache {
    /// One entry per inner-test trial, across all inner folds.
    trials: Vec<CachedTrial>,
}

struct CachedTrial {
    trial_id: String,
    label: Label,
    windows: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
}

fn build_inner_cache(trials: &[ProjectedTrial], cfg: &ProtocolConfig, seed: u64) -> Result<InnerCache> {
    let ids: Vec<String> = trials.iter().map(|t| t.trial_id.clone()).collect();
    let labels: Vec<Label> = trials.iter().map(|t| t.label).collect();
    let plan = make_folds(&ids, &labels, cfg.inner_folds, cfg.inner_test_size, seed)?;
    let mut out = Vec::new();
    for (f, fold) in plan.folds.iter().enumerate() {
        let train: Vec<&ProjectedTrial> = fold.train.iter().map(|&i| &trials[i]).collect();
        let (pos, neg) = build_bags(&train, cfg.index)?;
        let test_ids = plan.test_ids(f);
        guard("an inner bag", &test_ids, pos.source_trials())?;
        guard("an inner bag", &test_ids, neg.source_trials())?;
        for &i in &fold.test {
            let t = &trials[i];
            let windows = t
                .instances
                .iter()
                .map(|inst| {
                    Ok((
                        inst.window_index,
                        inst.start_sample,
                        pos.knn(&inst.features, cfg.k_max())?.sq_distances,
                        neg.knn(&inst.features, cfg.k_max())?.sq_distances,
                    ))
                })
                .collect::<Result<_>>()?;
            out.push(CachedTrial {
                trial_id: t.trial_id.clone(),
                label: t.label,
                windows,
            });
        }
    }
    Ok(InnerCache { trials: out })
}

impl InnerCache {
    fn deltas(&self, k: usize, gamma: f64) -> Vec<Vec<(usize, usize, f64)>> {
        self.trials
            .iter()
            .map(|t| {
                t.windows
                    .iter()
                    .map(|(w, s, p, n)| {
                        let d = log_density_from_sq(&p[..k.min(p.len())], gamma)
                            - log_density_from_sq(&n[..k.min(n.len())], gamma);
                        (*w, *s, d)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn auto_pi_grid(abs_deltas: &[f64], levels: usize, q: f64) -> Vec<f64> {
    let ub = quantile(abs_deltas, q).unwrap_or(0.0);
    let mut grid = vec![0.0];
    if ub > 0.0 && levels > 1 {
        for i in (0..levels - 1).rev() {
            grid.push(ub / (1u64 << i) as f64);
        }
    }
    grid
}

/// Selected hyper-parameters with their inner-CV accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub params: DpdHyperParams,
    pub inner_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub dpd: Selection,
    /// Best point with `pi = 0`.
    pub no_dpd: Selection,
    pub knn: Selection,
    /// `(k, gamma, pi grid)` actually searched.
    pub pi_grids: Vec<(usize, f64, Vec<f64>)>,
}

#[derive(Clone, Copy)]
struct Candidate {
    correct: usize,
    k: usize,
    gamma: f64,
    pi: f64,
    lambda: f64,
}

impl Candidate {
    /// Higher accuracy, then smaller k, larger pi, lambda nearer 0, smaller
    /// gamma, larger lambda.
    fn better_than(&self, o: &Candidate) -> bool {
        use std::cmp::Ordering::*;
        let ord = self
            .correct
            .cmp(&o.correct)
            .then(o.k.cmp(&self.k))
            .then(self.pi.total_cmp(&o.pi))
            .then(o.lambda.abs().total_cmp(&self.lambda.abs()))
            .then(o.gamma.total_cmp(&self.gamma))
            .then(self.lambda.total_cmp(&o.lambda));
        ord == Greater
    }
}

fn best_lambda(scores: &[(f64, bool, Label)], lambdas: &[f64], mut consider: impl FnMut(usize, f64)) {
    for &l in lambdas {
        let correct = scores.iter().filter(|(s, ne, label)| decide(*s, *ne, l) == *label).count();
        consider(correct, l);
    }
}

/// Inner random-split CV over the k, gamma, pi and lambda grids.
pub fn grid_search(trials: &[ProjectedTrial], cfg: &ProtocolConfig, seed: u64) -> Result<GridOutcome> {
    cfg.validate()?;
    let cache = build_inner_cache(trials, cfg, seed)?;
    let n_eval = cache.trials.len();
    let to_acc = |c: usize| c as f64 / n_eval as f64;
    let mut best_dpd: Option<Candidate> = None;
    let mut best_zero: Option<Candidate> = None;
    let mut pi_grids = Vec::new();
    let mut ks = cfg.k_grid.clone();
    ks.sort_unstable();
    ks.dedup();
    let offer = |slot: &mut Option<Candidate>, c: Candidate| {
        if slot.as_ref().is_none_or(|b| c.better_than(b)) {
            *slot = Some(c);
        }
    };
    for &k in &ks {
        for &gamma in &cfg.gamma_grid {
            let deltas = cache.deltas(k, gamma);
            let mut pis = match &cfg.pi_grid {
                PiGrid::Auto { levels, quantile } => {
                    let abs: Vec<f64> = deltas.iter().flatten().map(|d| d.2.abs()).collect();
                    auto_pi_grid(&abs, *levels, *quantile)
                }
                PiGrid::Explicit(v) => v.clone(),
            };
            pis.sort_by(f64::total_cmp);
            pis.dedup();
            let mut eval_pis = pis.clone();
            if !eval_pis.contains(&0.0) {
                eval_pis.insert(0, 0.0);
            }
            for &pi in &eval_pis {
                let scores: Vec<(f64, bool, Label)> = deltas
                    .iter()
                    .zip(&cache.trials)
                    .map(|(d, t)| {
                        let tr = aggregate(&t.trial_id, d.iter().copied(), pi, 0.0, cfg.min_evidence);
                        (tr.score, tr.no_evidence, t.label)
                    })
                    .collect();
                let in_grid = pis.contains(&pi);
                best_lambda(&scores, &cfg.lambda_grid, |correct, lambda| {
                    let c = Candidate {
                        correct,
                        k,
                        gamma,
                        pi,
                        lambda,
                    };
                    if in_grid {
                        offer(&mut best_dpd, c);
                    }
                    if pi == 0.0 {
                        offer(&mut best_zero, c);
                    }
                });
            }
            pi_grids.push((k, gamma, pis));
        }
    }

    let mut best_knn: Option<(usize, usize)> = None;
    for &k in &ks {
        let correct = cache
            .trials
            .iter()
            .filter(|t| {
                let am = t
                    .windows
                    .iter()
                    .filter(|(_, _, p, n)| knn_window_vote(p, n, k) == Label::Am)
                    .count();
                majority(am, t.windows.len()) == t.label
            })
            .count();
        if best_knn.is_none_or(|(c, _)| correct > c) {
            best_knn = Some((correct, k));
        }
    }

    let sel = |c: Candidate| Selection {
        params: DpdHyperParams {
            k: c.k,
            pi: c.pi,
            lambda: c.lambda,
            gamma: c.gamma,
            min_evidence: cfg.min_evidence,
        },
        inner_accuracy: to_acc(c.correct),
    };
    let (knn_correct, knn_k) = best_knn.expect("k grid is nonempty");
    Ok(GridOutcome {
        dpd: sel(best_dpd.expect("grids are nonempty")),
        no_dpd: sel(best_zero.expect("grids are nonempty")),
        knn: Selection {
            params: DpdHyperParams {
                k: knn_k,
                ..Default::default()
            },
            inner_accuracy: to_acc(knn_correct),
        },
        pi_grids,
    })
}

// -------------------------------------------------------- cross-validate

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPrediction {
    pub trial_id: String,
    pub label: Label,
    pub prediction: Label,
    /// Trial score; `None` for methods without one.
    pub score: Option<f64>,
    pub no_evidence: bool,
    pub evidence_windows: Option<usize>,
}

impl TrialPrediction {
    fn from_trace(t: &IncrementTrace, label: Label) -> Self {
        TrialPrediction {
            trial_id: t.trial_id.clone(),
            label,
            prediction: t.prediction,
            score: Some(t.score),
            no_evidence: t.no_evidence,
            evidence_windows: Some(t.evidence_count()),
        }
    }

    /// Score used for ROC sweeps; abstentions sort last.
    pub fn roc_score(&self) -> f64 {
        match (self.no_evidence, self.score) {
            (false, Some(s)) => s,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodFold {
    pub method: Method,
    pub selection: Selection,
    pub codebook_size: Option<usize>,
    pub predictions: Vec<TrialPrediction>,
    pub metrics: Metrics,
    /// Per-window traces of the test trials (score-producing methods).
    pub traces: Vec<IncrementTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub projector_fingerprint: String,
    pub methods: Vec<MethodFold>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub metrics: Vec<(&'static str, Summary)>,
    /// Pooled over every fold's test predictions.
    pub roc: Option<Roc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub config: ProtocolConfig,
    pub n_trials: usize,
    pub methods: Vec<Method>,
    pub folds: Vec<FoldOutcome>,
    pub summaries: Vec<MethodSummary>,
}

impl CvReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn fold_results(&self, method: Method) -> impl Iterator<Item = &MethodFold> {
        self.folds.iter().flat_map(move |f| f.methods.iter().filter(move |m| m.method == method))
    }

    pub fn mean_accuracy(&self, method: Method) -> Option<f64> {
        self.summary(method)?.metrics.iter().find(|(n, _)| *n == "accuracy")?.1.mean
    }
}

fn run_fold(data: &[LabeledTrial], plan: &FoldPlan, f: usize, cfg: &ProtocolConfig, methods: &[Method]) -> Result<FoldOutcome> {
    let fold = &plan.folds[f];
    let test_ids = plan.test_ids(f);
    let train: Vec<&LabeledTrial> = fold.train.iter().map(|&i| &data[i]).collect();
    let test: Vec<&LabeledTrial> = fold.test.iter().map(|&i| &data[i]).collect();

    let projector = fit_pca(train.iter().flat_map(|t| &t.windows), cfg.pca_dim)?;
    guard("the PCA fit", &test_ids, projector.fitted_trials())?;

    let train_p = project_trials(&projector, &train)?;
    let test_p = project_trials(&projector, &test)?;
    let train_refs: Vec<&ProjectedTrial> = train_p.iter().collect();
    let (pos, neg) = build_bags(&train_refs, cfg.index)?;
    guard("the positive bag", &test_ids, pos.source_trials())?;
    guard("the negative bag", &test_ids, neg.source_trials())?;

    let grid = grid_search(&train_p, cfg, seed::derive(cfg.seed, "inner", f as u64))?;

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let (selection, codebook_size, traces, predictions) = match method {
            Method::Dpd | Method::NoDpd => {
                let selection = if method == Method::Dpd { grid.dpd } else { grid.no_dpd };
                let traces = test_p
                    .iter()
                    .map(|t| {
                        if method == Method::Dpd {
                            classify_trial(&t.instances, &pos, &neg, &selection.params)
                        } else {
                            no_dpd_trial(&t.instances, &pos, &neg, &selection.params)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let preds = traces.iter().zip(&test_p).map(|(tr, t)| TrialPrediction::from_trace(tr, t.label)).collect();
                (selection, None, traces, preds)
            }
            Method::GmiGen => {
                let selection = grid.dpd;
                let c_pos = cfg.codebook_size.min(pos.len());
                let c_neg = cfg.codebook_size.min(neg.len());
                let cb_pos = kmeans(pos.points(), c_pos, seed::derive(cfg.seed, "codebook/pos", f as u64), Polarity::Positive)?;
                let cb_neg = kmeans(neg.points(), c_neg, seed::derive(cfg.seed, "codebook/neg", f as u64), Polarity::Negative)?;
                let (qp, qn) = (cb_pos.to_bag()?, cb_neg.to_bag()?);
                let traces = test_p
                    .iter()
                    .map(|t| classify_trial(&t.instances, &qp, &qn, &selection.params))
                    .collect::<Result<Vec<_>>>()?;
                let preds = traces.iter().zip(&test_p).map(|(tr, t)| TrialPrediction::from_trace(tr, t.label)).collect();
                (selection, Some(c_pos.max(c_neg)), traces, preds)
            }
            Method::Knn => {
                let k = grid.knn.params.k;
                let preds = test_p
                    .iter()
                    .map(|t| {
                        let o = knn_majority_trial(&t.instances, &pos, &neg, k)?;
                        Ok(TrialPrediction {
                            trial_id: o.trial_id,
                            label: t.label,
                            prediction: o.prediction,
                            score: None,
                            no_evidence: false,
                            evidence_windows: None,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (grid.knn, None, Vec::new(), preds)
            }
        };
        let p: Vec<TrialPrediction> = predictions;
        let metrics = evaluate(
            &p.iter().map(|x| x.prediction).collect::<Vec<_>>(),
            &p.iter().map(|x| x.label).collect::<Vec<_>>(),
        )?;
        if metrics.total() != test.len() {
            return Err(Error::Invariant("confusion counts do not cover the test set".into()));
        }
        out.push(MethodFold {
            method,
            selection,
            codebook_size,
            predictions: p,
            metrics,
            traces,
        });
    }
    Ok(FoldOutcome {
        fold: f,
        train_ids: plan.train_ids(f).into_iter().map(String::from).collect(),
        test_ids: test_ids.into_iter().map(String::from).collect(),
        projector_fingerprint: projector.fingerprint(),
        methods: out,
    })
}

/// Runs the full protocol for each method. Outer folds run in parallel on the
/// current rayon pool; results are collected in fold order.
pub fn cross_validate(data: &[LabeledTrial], cfg: &ProtocolConfig, methods: &[Method]) -> Result<CvReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no method selected".into()));
    }
    let mut methods_dedup = Vec::new();
    for m in methods {
        if !methods_dedup.contains(m) {
            methods_dedup.push(*m);
        }
    }
    let ids: Vec<String> = data.iter().map(|t| t.trial_id.clone()).collect();
    let labels: Vec<Label> = data.iter().map(|t| t.label).collect();
    if !labels.contains(&Label::Am) || !labels.contains(&Label::Td) {
        return Err(Error::InsufficientData("dataset needs both AM and TD trials".into()));
    }
    let plan = make_folds(&ids, &labels, cfg.folds, cfg.test_size, seed::derive(cfg.seed, "outer", 0))?;
    let folds = (0..plan.folds.len())
        .into_par_iter()
        .map(|f| run_fold(data, &plan, f, cfg, &methods_dedup))
        .collect::<Result<Vec<_>>>()?;

    let summaries = methods_dedup
        .iter()
        .map(|&method| {
            let per: Vec<&MethodFold> = folds.iter().flat_map(|f| f.methods.iter().filter(|m| m.method == method)).collect();
            let names = per[0].metrics.rates().map(|(n, _)| n);
            let metrics = names
                .iter()
                .enumerate()
                .map(|(i, &name)| (name, summarize(per.iter().map(|m| m.metrics.rates()[i].1))))
                .collect();
            let roc = if method.has_score() {
                let preds: Vec<&TrialPrediction> = per.iter().flat_map(|m| &m.predictions).collect();
                roc_sweep(
                    &preds.iter().map(|p| p.roc_score()).collect::<Vec<_>>(),
                    &preds.iter().map(|p| p.label).collect::<Vec<_>>(),
                )
                .ok()
            } else {
                None
            };
            MethodSummary { method, metrics, roc }
        })
        .collect();

    Ok(CvReport {
        config: cfg.clone(),
        n_trials: data.len(),
        methods: methods_dedup,
        folds,
        summaries,
    })
}

// --------------------------------------------------------------- output

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str =
    "method,fold,tp,fp,tn,fn,accuracy,sensitivity,specificity,false_positive_rate,precision,auc,k,pi,lambda,gamma,codebook_size,inner_accuracy";
pub const PREDICTIONS_HEADER: &str = "method,fold,trial_id,label,prediction,score,no_evidence,evidence_windows";
pub const ROC_HEADER: &str = "method,fpr,tpr,threshold";

pub fn write_metrics_csv(report: &CvReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for s in &report.summaries {
        let m = s.method;
        for (fold, r) in report.folds.iter().flat_map(|f| f.methods.iter().filter(move |r| r.method == m).map(move |r| (f.fold, r))) {
            let x = &r.metrics;
            let p = &r.selection.params;
            let dpd_like = m != Method::Knn;
            writeln!(
                out,
                "{m},{fold},{},{},{},{},{},{},{},{},{},,{},{},{},{},{},{}",
                x.tp,
                x.fp,
                x.tn,
                x.fn_,
                x.accuracy,
                opt(x.sensitivity),
                opt(x.specificity),
                opt(x.false_positive_rate),
                opt(x.precision),
                p.k,
                if dpd_like { p.pi.to_string() } else { String::new() },
                if dpd_like { p.lambda.to_string() } else { String::new() },
                if dpd_like { p.gamma.to_string() } else { String::new() },
                r.codebook_size.map(|c| c.to_string()).unwrap_or_default(),
                r.selection.inner_accuracy,
            )?;
        }
        for (row, pick) in [("mean", 0), ("std", 1)] {
            let vals: Vec<String> = s
                .metrics
                .iter()
                .map(|(_, v)| opt(if pick == 0 { v.mean } else { v.sd }))
                .collect();
            let auc = if pick == 0 { opt(s.roc.as_ref().map(|r| r.auc)) } else { String::new() };
            writeln!(out, "{m},{row},,,,,{},{auc},,,,,,", vals.join(","))?;
        }
    }
    Ok(())
}

pub fn write_predictions_csv(report: &CvReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{PREDICTIONS_HEADER}")?;
    for &m in &report.methods {
        for f in &report.folds {
            for r in f.methods.iter().filter(|r| r.method == m) {
                for p in &r.predictions {
                    writeln!(
                        out,
                        "{m},{},{},{},{},{},{},{}",
                        f.fold,
                        p.trial_id,
                        p.label,
                        p.prediction,
                        opt(p.score),
                        u8::from(p.no_evidence),
                        p.evidence_windows.map(|e| e.to_string()).unwrap_or_default()
                    )?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_roc_csv(report: &CvReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{ROC_HEADER}")?;
    for s in &report.summaries {
        if let Some(roc) = &s.roc {
            for p in &roc.points {
                writeln!(out, "{},{},{},{}", s.method, p.fpr, p.tpr, p.threshold)?;
            }
        }
    }
    Ok(())
}

pub fn write_report_txt(report: &CvReport, mut out: impl Write) -> std::io::Result<()> {
    let c = &report.config;
    writeln!(out, "cross-validation report")?;
    writeln!(out)?;
    writeln!(out, "trials            {}", report.n_trials)?;
    writeln!(out, "outer folds       {} random splits, {} test trials each", c.folds, c.test_size)?;
    writeln!(out, "inner folds       {} random splits, {} test trials each", c.inner_folds, c.inner_test_size)?;
    writeln!(out, "seed              {}", c.seed)?;
    writeln!(out, "window samples    {}", c.window_samples)?;
    writeln!(out, "pca               d = {}, fit per outer fold on training trials only", c.pca_dim)?;
    let ks: Vec<String> = c.k_grid.iter().map(|k| k.to_string()).collect();
    let gs: Vec<String> = c.gamma_grid.iter().map(|g| g.to_string()).collect();
    writeln!(out, "k grid            {}", ks.join(", "))?;
    writeln!(out, "gamma grid        {}", gs.join(", "))?;
    writeln!(
        out,
        "lambda grid       {} values in [{}, {}]",
        c.lambda_grid.len(),
        c.lambda_grid.iter().copied().fold(f64::INFINITY, f64::min),
        c.lambda_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    )?;
    match &c.pi_grid {
        PiGrid::Auto { levels, quantile } => writeln!(
            out,
            "pi grid           auto, {levels} values from 0 up to the {quantile} quantile of inner |delta|"
        )?,
        PiGrid::Explicit(v) => {
            let v: Vec<String> = v.iter().map(|p| p.to_string()).collect();
            writeln!(out, "pi grid           {}", v.join(", "))?
        }
    }
    if let Some(m) = c.min_evidence {
        writeln!(out, "min evidence      {m}")?;
    }
    writeln!(out)?;
    writeln!(
        out,
        "{:<10} {:>13} {:>13} {:>13} {:>13} {:>13} {:>6}",
        "method", "accuracy", "sensitivity", "specificity", "fpr", "precision", "auc"
    )?;
    for s in &report.summaries {
        let cells: Vec<String> = s
            .metrics
            .iter()
            .map(|(_, v)| match (v.mean, v.sd) {
                (Some(m), Some(sd)) => format!("{m:.2} ({sd:.2})"),
                (Some(m), None) => format!("{m:.2}"),
                _ => "-".to_string(),
            })
            .collect();
        let auc = s.roc.as_ref().map(|r| format!("{:.3}", r.auc)).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<10} {:>13} {:>13} {:>13} {:>13} {:>13} {:>6}",
            s.method.to_string(),
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4],
            auc
        )?;
    }
    writeln!(out)?;
    writeln!(out, "values are mean (sample sd) over folds; '-' marks an undefined rate")?;
    writeln!(out)?;
    writeln!(out, "fold  projector fingerprint")?;
    for f in &report.folds {
        writeln!(out, "{:<5} {}", f.fold, f.projector_fingerprint)?;
    }
    Ok(())
}

pub fn write_report(report: &CvReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    type Writer = fn(&CvReport, &mut BufWriter<std::fs::File>) -> std::io::Result<()>;
    let files: [(&str, Writer); 4] = [
        ("metrics.csv", |r, w| write_metrics_csv(r, w)),
        ("roc.csv", |r, w| write_roc_csv(r, w)),
        ("predictions.csv", |r, w| write_predictions_csv(r, w)),
        ("report.txt", |r, w| write_report_txt(r, w)),
    ];
    for (name, write) in files {
        let path = dir.join(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write(report, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
