//! Fitted models and their on-disk archive.
//!
//! An archive is a directory with a `manifest` of `key = value` lines and
//! four raw little-endian f64 arrays: `pca_mean`, `pca_components`,
//! `bag_pos`, `bag_neg`. Array shapes live in the manifest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dpd::{classify_trial, Bag, DpdHyperParams, IncrementTrace, Polarity};
use crate::error::{Error, Result};
use crate::evalharness::{build_bags, prepare, project_trials};
use crate::features::{fit_pca, PcaProjector};
use crate::ingest::{windowize, Limb, TrialRecording};
use crate::kv::KvFile;
use crate::neighbors::{IndexKind, Points};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest";

const MANIFEST_KEYS: [&str; 14] = [
    "format_version",
    "input_dim",
    "d",
    "k",
    "pi",
    "lambda",
    "gamma",
    "min_evidence",
    "channel_order",
    "window_samples",
    "bag_pos",
    "bag_neg",
    "seed",
    "index",
];

/// Channel order of a flattened window, `lw_x,lw_y,lw_z,lw_svm,rw_x,...`.
pub fn channel_order() -> String {
    Limb::ALL
        .iter()
        .flat_map(|l| ["x", "y", "z", "svm"].map(|c| format!("{}_{c}", l.prefix())))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug)]
pub struct Model {
    pub projector: PcaProjector,
    pub bag_pos: Bag,
    pub bag_neg: Bag,
    pub params: DpdHyperParams,
    pub window_samples: usize,
    pub seed: u64,
    pub index: IndexKind,
}

impl Model {
    /// Fits PCA on every window of `trials` and pools the projected windows
    /// into the two bags.
    pub fn fit(
        trials: &[TrialRecording],
        params: DpdHyperParams,
        window_samples: usize,
        d: usize,
        seed: u64,
        index: IndexKind,
    ) -> Result<Self> {
        params.validate()?;
        let data = prepare(trials, window_samples)?;
        let projector = fit_pca(data.iter().flat_map(|t| &t.windows), d)?;
        let refs: Vec<_> = data.iter().collect();
        let projected = project_trials(&projector, &refs)?;
        let (bag_pos, bag_neg) = build_bags(&projected.iter().collect::<Vec<_>>(), index)?;
        Ok(Model {
            projector,
            bag_pos,
            bag_neg,
            params,
            window_samples,
            seed,
            index,
        })
    }

    pub fn classify(&self, trial: &TrialRecording) -> Result<IncrementTrace> {
        let instances = windowize(trial, self.window_samples)?
            .iter()
            .map(|w| self.projector.project(w))
            .collect::<Result<Vec<_>>>()?;
        classify_trial(&instances, &self.bag_pos, &self.bag_neg, &self.params)
    }

    pub fn manifest_text(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("format_version", &FORMAT_VERSION);
        line("input_dim", &self.projector.input_dim());
        line("d", &self.projector.dim());
        line("k", &p.k);
        line("pi", &p.pi);
        line("lambda", &p.lambda);
        line("gamma", &p.gamma);
        if let Some(m) = p.min_evidence {
            line("min_evidence", &m);
        }
        line("channel_order", &channel_order());
        line("window_samples", &self.window_samples);
        line("bag_pos", &self.bag_pos.len());
        line("bag_neg", &self.bag_neg.len());
        line("seed", &self.seed);
        line(
            "index",
            &match self.index {
                IndexKind::BruteForce => "brute-force",
                IndexKind::BallTree => "ball-tree",
            },
        );
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(MANIFEST), self.manifest_text().as_bytes())?;
        write_file(&dir.join("pca_mean"), &encode(self.projector.mean()))?;
        write_file(&dir.join("pca_components"), &encode(self.projector.components().as_slice()))?;
        write_file(&dir.join("bag_pos"), &encode(self.bag_pos.points().as_slice()))?;
        write_file(&dir.join("bag_neg"), &encode(self.bag_neg.points().as_slice()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KvFile::read(&dir.join(MANIFEST))?;
        kv.reject_unknown(&MANIFEST_KEYS)?;
        let version: u32 = kv.require("format_version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported archive version {version}",
                dir.display()
            )));
        }
        let order: String = kv.require("channel_order")?;
        if order != channel_order() {
            return Err(Error::Input(format!("{}: unexpected channel order", dir.display())));
        }
        let input_dim: usize = kv.require("input_dim")?;
        let d: usize = kv.require("d")?;
        let window_samples: usize = kv.require("window_samples")?;
        if input_dim != window_samples * order.split(',').count() {
            return Err(Error::Input(format!(
                "{}: input_dim {input_dim} does not match window_samples",
                dir.display()
            )));
        }
        let params = DpdHyperParams {
            k: kv.require("k")?,
            pi: kv.require("pi")?,
            lambda: kv.require("lambda")?,
            gamma: kv.require("gamma")?,
            min_evidence: kv.get("min_evidence")?,
        };
        params.validate()?;
        let index = match kv.get::<String>("index")?.as_deref() {
            None | Some("ball-tree") => IndexKind::BallTree,
            Some("brute-force") => IndexKind::BruteForce,
            Some(other) => return Err(Error::Input(format!("unknown index `{other}`"))),
        };

        let mean = read_array(&dir.join("pca_mean"), 1, input_dim)?;
        let components = Points::new(input_dim, read_array(&dir.join("pca_components"), d, input_dim)?)?;
        let projector = PcaProjector::from_parts(mean, components, Vec::new())?;
        let bag = |name: &str, polarity| -> Result<Bag> {
            let n: usize = kv.require(name)?;
            let points = Points::new(d, read_array(&dir.join(name), n, d)?)?;
            Bag::from_points(polarity, points, BTreeSet::new(), index)
        };
        Ok(Model {
            projector,
            bag_pos: bag("bag_pos", Polarity::Positive)?,
            bag_neg: bag("bag_neg", Polarity::Negative)?,
            params,
            window_samples,
            seed: kv.require("seed")?,
            index,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_array(path: &Path, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::Invariant(format!(
            "{}: {} bytes, manifest implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{}: non-finite value", path.display())));
    }
    Ok(values)
}
