//! PCA projection of raw windows into instance vectors.

use std::collections::BTreeSet;

use faer::{Mat, Par, Side};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::RawWindow;
use crate::neighbors::{dot, Points};

pub const DEFAULT_DIM: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceVector {
    pub trial_id: String,
    pub window_index: usize,
    pub start_sample: usize,
    pub features: Vec<f64>,
}

/// Centring plus an orthonormal basis of the top-`d` principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    mean: Vec<f64>,
    components: Points,
    explained_variance: Vec<f64>,
    fitted_trials: BTreeSet<String>,
}

impl PcaProjector {
    /// Rebuilds a projector from stored parts (model archives).
    pub fn from_parts(mean: Vec<f64>, components: Points, explained_variance: Vec<f64>) -> Result<Self> {
        if components.dim() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: components.dim(),
            });
        }
        if components.is_empty() {
            return Err(Error::Input("projector needs at least one component".into()));
        }
        if !explained_variance.is_empty() && explained_variance.len() != components.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: explained_variance.len(),
            });
        }
        if mean.iter().chain(components.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::Input("projector contains non-finite values".into()));
        }
        Ok(PcaProjector {
            mean,
            components,
            explained_variance,
            fitted_trials: BTreeSet::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Points {
        &self.components
    }

    /// Variance captured by each component (divisor n - 1), non-increasing.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Trial ids whose windows entered the fit. Empty for projectors loaded from disk.
    pub fn fitted_trials(&self) -> &BTreeSet<String> {
        &self.fitted_trials
    }

    /// SHA-256 over the little-endian bytes of mean and components, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.input_dim() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.mean.iter().chain(self.components.as_slice()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn project_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: values.len(),
            });
        }
        let centred: Vec<f64> = values.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self.components.rows().map(|c| dot(c, &centred)).collect())
    }

    pub fn project(&self, window: &RawWindow) -> Result<InstanceVector> {
        Ok(InstanceVector {
            trial_id: window.trial_id.clone(),
            window_index: window.window_index,
            start_sample: window.start_sample,
            features: self.project_values(&window.values)?,
        })
    }

    /// Maps features back to raw-window space.
    pub fn reconstruct(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let mut out = self.mean.clone();
        for (f, c) in features.iter().zip(self.components.rows()) {
            for (o, x) in out.iter_mut().zip(c) {
                *o += f * x;
            }
        }
        Ok(out)
    }
}

/// Fits a `d`-component PCA on the given windows.
///
/// Covariance uses divisor n - 1. Components are ordered by descending
/// eigenvalue and each is flipped so its largest-magnitude entry (first such
/// entry on ties) is nonnegative.
pub fn fit_pca<'a>(windows: impl IntoIterator<Item = &'a RawWindow>, d: usize) -> Result<PcaProjector> {
    let windows: Vec<&RawWindow> = windows.into_iter().collect();
    if d == 0 {
        return Err(Error::Config("PCA dimension must be >= 1".into()));
    }
    let Some(first) = windows.first() else {
        return Err(Error::InsufficientData(format!("PCA needs at least {d} windows, got 0")));
    };
    let p = first.values.len();
    if windows.len() < d || p < d {
        return Err(Error::InsufficientData(format!(
            "PCA to {d} dimensions needs at least {d} windows of at least {d} values, got {} windows of {p}",
            windows.len()
        )));
    }
    let n = windows.len();
    let mut mean = vec![0.0; p];
    for w in &windows {
        if w.values.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: w.values.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&w.values) {
            *m += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv_n);

    let x = Mat::<f64>::from_fn(n, p, |i, j| windows[i].values[j] - mean[j]);
    let mut cov = Mat::<f64>::zeros(p, p);
    let scale = if n > 1 { 1.0 / (n - 1) as f64 } else { 1.0 };
    faer::linalg::matmul::matmul(
        cov.as_mut(),
        faer::Accum::Replace,
        x.transpose(),
        x.as_ref(),
        scale,
        Par::Seq,
    );
    drop(x);
    let eig = cov
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Invariant(format!("eigendecomposition failed: {e:?}")))?;
    let values = eig.S().column_vector();
    let vectors = eig.U();

    // faer returns eigenvalues in nondecreasing order.
    let top: Vec<usize> = (0..p).rev().take(d).collect();
    let largest = values[p - 1].max(0.0);
    let tol = largest * p as f64 * f64::EPSILON * 16.0;
    let degenerate = top.iter().filter(|&&j| !(values[j] > tol)).count();
    if largest <= 0.0 || degenerate > 0 {
        return Err(Error::ZeroVariance {
            requested: d,
            degenerate: if largest <= 0.0 { d } else { degenerate },
        });
    }

    let mut components = Points::with_dim(p);
    let mut explained = Vec::with_capacity(d);
    let mut row = vec![0.0; p];
    for &j in &top {
        let col = vectors.col(j);
        let mut pivot = 0usize;
        for i in 0..p {
            row[i] = col[i];
            if row[i].abs() > row[pivot].abs() {
                pivot = i;
            }
        }
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(&row)?;
        explained.push(values[j]);
    }

    Ok(PcaProjector {
        mean,
        components,
        explained_variance: explained,
        fitted_trials: windows.iter().map(|w| w.trial_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn window(id: &str, i: usize, values: Vec<f64>) -> RawWindow {
        RawWindow {
            trial_id: id.into(),
            window_index: i,
            start_sample: 0,
            values,
        }
    }

    fn random_windows(n: usize, p: usize, seed: u64) -> Vec<RawWindow> {
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|i| {
                let scale: Vec<f64> = (0..p).map(|j| 1.0 + j as f64).collect();
                window(
                    &format!("t{}", i % 5),
                    i,
                    scale.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    fn gram_error(pca: &PcaProjector) -> f64 {
        let c = pca.components();
        let mut worst = 0.0f64;
        for i in 0..c.len() {
            for j in 0..c.len() {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(c.row(i), c.row(j)) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn exact_affine_subspace_is_reconstructed() {
        let mut rng = crate::seed::rng(5);
        let base = [1.0, -2.0, 0.5, 3.0, 0.0];
        let u = [1.0, 2.0, 0.0, -1.0, 0.5];
        let v = [0.0, 1.0, 1.0, 1.0, -2.0];
        let windows: Vec<RawWindow> = (0..40)
            .map(|i| {
                let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                window("t", i, (0..5).map(|j| base[j] + a * u[j] + b * v[j]).collect())
            })
            .collect();
        let pca = fit_pca(&windows, 2).unwrap();
        for w in &windows {
            let back = pca.reconstruct(&pca.project(w).unwrap().features).unwrap();
            for (x, y) in back.iter().zip(&w.values) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        assert!(gram_error(&pca) < 1e-8);
    }

    #[test]
    fn mean_projects_to_zero_and_first_component_to_unit() {
        let windows = random_windows(200, 12, 1);
        let pca = fit_pca(&windows, 4).unwrap();
        assert!(pca.project_values(pca.mean()).unwrap().iter().all(|v| v.abs() < 1e-10));
        let shifted: Vec<f64> = pca
            .mean()
            .iter()
            .zip(pca.components().row(0))
            .map(|(m, c)| m + c)
            .collect();
        let f = pca.project_values(&shifted).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-10);
        assert!(f[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn ordering_sign_and_variance() {
        let windows = random_windows(300, 10, 2);
        let pca = fit_pca(&windows, 5).unwrap();
        let ev = pca.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        for c in pca.components().rows() {
            let pivot = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(pivot >= 0.0);
        }
        assert!(gram_error(&pca) < 1e-8);
        // projected total variance equals the sum of the kept eigenvalues
        let n = windows.len() as f64;
        let proj: Vec<Vec<f64>> = windows.iter().map(|w| pca.project(w).unwrap().features).collect();
        let total: f64 = (0..5)
            .map(|j| proj.iter().map(|f| f[j] * f[j]).sum::<f64>() / (n - 1.0))
            .sum();
        let want: f64 = ev.iter().sum();
        assert!((total - want).abs() <= 1e-6 * want);
        assert_eq!(pca.fitted_trials().len(), 5);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let windows = random_windows(100, 16, 3);
        let pca = fit_pca(&windows, 6).unwrap();
        let mut rng = crate::seed::rng(4);
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f1 = pca.project_values(&w).unwrap();
        let f2 = pca.project_values(&pca.reconstruct(&f1).unwrap()).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_fit_and_fingerprint() {
        let windows = random_windows(120, 8, 6);
        let a = fit_pca(&windows, 3).unwrap();
        let b = fit_pca(&windows, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = fit_pca(&windows[1..], 3).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn errors() {
        let windows = random_windows(3, 8, 7);
        assert!(matches!(fit_pca(&windows, 4), Err(Error::InsufficientData(_))));
        let flat: Vec<RawWindow> = (0..10).map(|i| window("t", i, vec![1.0; 6])).collect();
        assert!(matches!(
            fit_pca(&flat, 2),
            Err(Error::ZeroVariance { requested: 2, degenerate: 2 })
        ));
        // rank one data asked for two directions
        let line: Vec<RawWindow> = (0..10).map(|i| window("t", i, vec![i as f64; 6])).collect();
        assert!(matches!(
            fit_pca(&line, 2),
            Err(Error::ZeroVariance { requested: 2, degenerate: 1 })
        ));
        let pca = fit_pca(&random_windows(50, 8, 8), 2).unwrap();
        assert!(matches!(
            pca.project_values(&[0.0; 7]),
            Err(Error::DimensionMismatch { expected: 8, got: 7 })
        ));
    }
}
