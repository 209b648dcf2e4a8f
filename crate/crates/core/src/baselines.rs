//! Comparison methods: k-NN majority vote, k-means codebooks (GMI-GEN) and
//! the unmasked variant of the increment rule.

use std::collections::BTreeSet;

use faer::{Mat, Par};
use rand::Rng;

use crate::dpd::{classify_trial, Bag, DpdHyperParams, IncrementTrace, Polarity};
use crate::error::{Error, Result};
use crate::features::InstanceVector;
use crate::ingest::Label;
use crate::neighbors::{dot, sq_dist, IndexKind, Points};

pub const DEFAULT_CODEBOOK_SIZE: usize = 500;
pub const CODEBOOK_GRID: [usize; 3] = [200, 500, 1000];
pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutcome {
    pub trial_id: String,
    pub window_votes: Vec<Label>,
    pub prediction: Label,
}

/// Votes of the `k` nearest neighbours in the union of both bags, given each
/// bag's ascending neighbour distances. Positive rows precede negative rows
/// in the union, so distance ties resolve toward the positive bag.
pub fn knn_window_vote(pos_sq: &[f64], neg_sq: &[f64], k: usize) -> Label {
    let (mut i, mut j, mut am) = (0usize, 0usize, 0usize);
    while i + j < k && (i < pos_sq.len() || j < neg_sq.len()) {
        let take_pos = match (pos_sq.get(i), neg_sq.get(j)) {
            (Some(p), Some(n)) => p <= n,
            (Some(_), None) => true,
            _ => false,
        };
        if take_pos {
            i += 1;
            am += 1;
        } else {
            j += 1;
        }
    }
    majority(am, i + j)
}

/// AM when at least half the votes are AM.
pub fn majority(am: usize, total: usize) -> Label {
    if 2 * am >= total {
        Label::Am
    } else {
        Label::Td
    }
}

pub fn knn_majority_trial(instances: &[InstanceVector], bag_pos: &Bag, bag_neg: &Bag, k: usize) -> Result<KnnOutcome> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Input("trial has no windows".into()))?;
    let window_votes = instances
        .iter()
        .map(|inst| {
            let pos = bag_pos.knn(&inst.features, k)?;
            let neg = bag_neg.knn(&inst.features, k)?;
            Ok(knn_window_vote(&pos.sq_distances, &neg.sq_distances, k))
        })
        .collect::<Result<Vec<_>>>()?;
    let am = window_votes.iter().filter(|l| **l == Label::Am).count();
    Ok(KnnOutcome {
        trial_id: first.trial_id.clone(),
        prediction: majority(am, window_votes.len()),
        window_votes,
    })
}

pub fn no_dpd_trial(
    instances: &[InstanceVector],
    bag_pos: &Bag,
    bag_neg: &Bag,
    params: &DpdHyperParams,
) -> Result<IncrementTrace> {
    classify_trial(instances, bag_pos, bag_neg, &DpdHyperParams { pi: 0.0, ..*params })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Points,
    pub source_polarity: Polarity,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl Codebook {
    pub fn to_bag(&self) -> Result<Bag> {
        Bag::from_points(
            self.source_polarity,
            self.centroids.clone(),
            BTreeSet::new(),
            IndexKind::BruteForce,
        )
    }
}

fn to_mat(p: &Points) -> Mat<f64> {
    Mat::from_fn(p.len(), p.dim(), |i, j| p.row(i)[j])
}

/// Exact nearest-centroid assignment. A GEMM expansion shortlists candidates,
/// which are then re-scored with [`sq_dist`]; ties go to the lower centroid.
fn assign(points: &Points, x: &Mat<f64>, x_norms: &[f64], centroids: &Points) -> (Vec<usize>, Vec<f64>) {
    let c = to_mat(centroids);
    let c_norms: Vec<f64> = centroids.rows().map(|r| dot(r, r)).collect();
    let mut g = Mat::<f64>::zeros(points.len(), centroids.len());
    faer::linalg::matmul::matmul(g.as_mut(), faer::Accum::Replace, x.as_ref(), c.transpose(), 1.0, Par::Seq);
    let mut labels = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    let c_max = c_norms.iter().copied().fold(0.0, f64::max);
    for i in 0..points.len() {
        let approx = |j: usize| x_norms[i] + c_norms[j] - 2.0 * g[(i, j)];
        let best = (0..centroids.len()).map(approx).fold(f64::INFINITY, f64::min);
        let slack = 1e-9 * (x_norms[i] + c_max) + 1e-12;
        let mut pick = (f64::INFINITY, 0usize);
        for j in 0..centroids.len() {
            if approx(j) <= best + slack {
                let d = sq_dist(points.row(i), centroids.row(j));
                if d < pick.0 {
                    pick = (d, j);
                }
            }
        }
        labels.push(pick.1);
        dists.push(pick.0);
    }
    (labels, dists)
}

/// Seeded k-means++ followed by Lloyd iterations.
///
/// Stops when assignments no longer change or after [`KMEANS_MAX_ITER`]
/// updates. An emptied cluster is moved onto the point farthest from its
/// centroid.
pub fn kmeans(points: &Points, c: usize, seed: u64, polarity: Polarity) -> Result<Codebook> {
    let n = points.len();
    if c == 0 {
        return Err(Error::Config("codebook size must be >= 1".into()));
    }
    if c > n {
        return Err(Error::InsufficientData(format!(
            "codebook of {c} centroids needs at least {c} instances, got {n}"
        )));
    }
    let mut rng = crate::seed::rng(seed);

    // k-means++ seeding.
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.rows().map(|r| sq_dist(r, points.row(chosen[0]))).collect();
    while chosen.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("c <= n")
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids = Points::from_rows(points.dim(), chosen.iter().map(|&i| points.row(i)))?;

    let x = to_mat(points);
    let x_norms: Vec<f64> = points.rows().map(|r| dot(r, r)).collect();
    let (mut labels, mut dists) = assign(points, &x, &x_norms, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![0.0; c * points.dim()];
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * points.dim()..(l + 1) * points.dim()].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = Points::with_dim(points.dim());
        let mut taken = BTreeSet::new();
        for j in 0..c {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                let row: Vec<f64> = sums[j * points.dim()..(j + 1) * points.dim()].iter().map(|s| s * inv).collect();
                next.push(&row)?;
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold((f64::NEG_INFINITY, 0usize), |acc, i| if dists[i] > acc.0 { (dists[i], i) } else { acc })
                    .1;
                taken.insert(far);
                next.push(points.row(far))?;
            }
        }
        centroids = next;
        let (new_labels, new_dists) = assign(points, &x, &x_norms, &centroids);
        history.push(new_dists.iter().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if stable {
            break;
        }
    }

    Ok(Codebook {
        centroids,
        source_polarity: polarity,
        inertia: dists.iter().sum(),
        iterations,
        inertia_history: history,
    })
}

pub fn gmi_gen_trial(
    instances: &[InstanceVector],
    codebook_pos: &Codebook,
    codebook_neg: &Codebook,
    params: &DpdHyperParams,
) -> Result<IncrementTrace> {
    if codebook_pos.source_polarity != Polarity::Positive || codebook_neg.source_polarity != Polarity::Negative {
        return Err(Error::Input("codebooks passed with the wrong polarity".into()));
    }
    classify_trial(instances, &codebook_pos.to_bag()?, &codebook_neg.to_bag()?, params)
}
