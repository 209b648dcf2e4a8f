//! Synthetic trials with known window classes.
//!
//! Every window starts as white noise (plus 1 g on each z axis). Windows of
//! class wAM add `+s * u` and windows of class wTD add `-s * u`, where `u` is
//! a fixed pattern over the 12 raw channels scaled so that its mean squared
//! norm per sample is 1.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::Distribution;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Normal;

use crate::dpd::WindowClass;
use crate::error::{Error, Result};
use crate::ingest::{
    write_manifest, write_meta, write_trial_csv, Label, Limb, LimbStream, ManifestEntry, TrialRecording,
    DEFAULT_RATE_HZ, DEFAULT_WINDOW_SAMPLES,
};
use crate::kv::KvFile;
use crate::seed;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const GROUND_TRUTH_HEADER: &str = "trial_id,window_index,class";
const RAW_CHANNELS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub windows_min: usize,
    pub windows_max: usize,
    pub neutral_fraction: f64,
    pub cross_leak: f64,
    pub separation: f64,
    pub noise_sd: f64,
    pub window_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_pos: 40,
            n_neg: 60,
            windows_min: 50,
            windows_max: 70,
            neutral_fraction: 0.8,
            cross_leak: 0.05,
            separation: 0.6,
            noise_sd: 0.1,
            window_samples: DEFAULT_WINDOW_SAMPLES,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "seed",
    "n_pos",
    "n_neg",
    "windows_min",
    "windows_max",
    "neutral_fraction",
    "cross_leak",
    "separation",
    "noise_sd",
    "window_samples",
];

impl SynthConfig {
    /// Reads a `key = value` config; absent keys keep their defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            seed: kv.get("seed")?.unwrap_or(d.seed),
            n_pos: kv.get("n_pos")?.unwrap_or(d.n_pos),
            n_neg: kv.get("n_neg")?.unwrap_or(d.n_neg),
            windows_min: kv.get("windows_min")?.unwrap_or(d.windows_min),
            windows_max: kv.get("windows_max")?.unwrap_or(d.windows_max),
            neutral_fraction: kv.get("neutral_fraction")?.unwrap_or(d.neutral_fraction),
            cross_leak: kv.get("cross_leak")?.unwrap_or(d.cross_leak),
            separation: kv.get("separation")?.unwrap_or(d.separation),
            noise_sd: kv.get("noise_sd")?.unwrap_or(d.noise_sd),
            window_samples: kv.get("window_samples")?.unwrap_or(d.window_samples),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        unit("neutral_fraction", self.neutral_fraction)?;
        unit("cross_leak", self.cross_leak)?;
        if self.neutral_fraction + self.cross_leak > 1.0 {
            return Err(Error::Config(format!(
                "neutral_fraction + cross_leak must be <= 1, got {}",
                self.neutral_fraction + self.cross_leak
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("separation must be finite and >= 0, got {}", self.separation)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd)));
        }
        if self.windows_min == 0 || self.windows_min > self.windows_max {
            return Err(Error::Config(format!(
                "need 1 <= windows_min <= windows_max, got {}..={}",
                self.windows_min, self.windows_max
            )));
        }
        if self.window_samples == 0 {
            return Err(Error::Config("window_samples must be >= 1".into()));
        }
        if self.n_pos + self.n_neg == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        Ok(())
    }

    /// Window-class probabilities `(wAM, wTD, wNM)` for trials of `label`.
    pub fn class_probabilities(&self, label: Label) -> [f64; 3] {
        let major = 1.0 - self.neutral_fraction - self.cross_leak;
        match label {
            Label::Am => [major, self.cross_leak, self.neutral_fraction],
            Label::Td => [self.cross_leak, major, self.neutral_fraction],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub recording: TrialRecording,
    pub classes: Vec<WindowClass>,
    pub label: Label,
}

/// The shared pattern, indexed `[channel][sample]` over the raw channels in
/// CSV column order.
pub fn pattern(window_samples: usize) -> Vec<Vec<f64>> {
    let w = window_samples as f64;
    let mut u: Vec<Vec<f64>> = (0..RAW_CHANNELS)
        .map(|c| {
            let freq = (1 + c % 3) as f64;
            (0..window_samples)
                .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / w + c as f64).sin())
                .collect()
        })
        .collect();
    let energy: f64 = u.iter().flatten().map(|v| v * v).sum();
    let scale = (w / energy).sqrt();
    u.iter_mut().flatten().for_each(|v| *v *= scale);
    u
}

pub fn trial_id(label: Label, index: usize) -> String {
    match label {
        Label::Am => format!("am_{index:04}"),
        Label::Td => format!("td_{index:04}"),
    }
}

fn generate_trial(cfg: &SynthConfig, u: &[Vec<f64>], label: Label, index: usize, stream_seed: u64) -> Result<SynthTrial> {
    let mut rng = seed::rng(stream_seed);
    let probs = cfg.class_probabilities(label);
    let chooser = WeightedIndex::new(probs).map_err(|e| Error::Config(format!("window class simplex: {e}")))?;
    let n_windows = rng.random_range(cfg.windows_min..=cfg.windows_max);
    let (required, p_required) = match label {
        Label::Am => (WindowClass::WAm, probs[0]),
        Label::Td => (WindowClass::WTd, probs[1]),
    };
    let classes = loop {
        let classes: Vec<WindowClass> = (0..n_windows)
            .map(|_| [WindowClass::WAm, WindowClass::WTd, WindowClass::WNm][chooser.sample(&mut rng)])
            .collect();
        if p_required == 0.0 || classes.contains(&required) {
            break classes;
        }
    };
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(format!("noise_sd: {e}")))?;
    let ws = cfg.window_samples;
    let mut samples: Vec<Vec<[f64; 3]>> = (0..4).map(|_| Vec::with_capacity(n_windows * ws)).collect();
    for class in &classes {
        let sign = match class {
            WindowClass::WAm => cfg.separation,
            WindowClass::WTd => -cfg.separation,
            WindowClass::WNm => 0.0,
        };
        for t in 0..ws {
            for (limb, out) in samples.iter_mut().enumerate() {
                let mut s = [0.0; 3];
                for (axis, v) in s.iter_mut().enumerate() {
                    let c = limb * 3 + axis;
                    *v = noise.sample(&mut rng) + sign * u[c][t] + if axis == 2 { 1.0 } else { 0.0 };
                }
                out.push(s);
            }
        }
    }
    let streams = Limb::ALL
        .iter()
        .zip(samples)
        .map(|(&limb, samples)| LimbStream {
            limb,
            samples,
            rate: DEFAULT_RATE_HZ,
        })
        .collect();
    let recording = TrialRecording::new(trial_id(label, index), streams, Some(label), None)?;
    Ok(SynthTrial {
        recording,
        classes,
        label,
    })
}

/// Generates `n_pos` AM trials followed by `n_neg` TD trials. Each trial draws
/// from its own stream derived from the root seed.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthTrial>> {
    cfg.validate()?;
    let u = pattern(cfg.window_samples);
    let mut out = Vec::with_capacity(cfg.n_pos + cfg.n_neg);
    for (label, count) in [(Label::Am, cfg.n_pos), (Label::Td, cfg.n_neg)] {
        for i in 0..count {
            let s = seed::derive(cfg.seed, &format!("synth/{label}"), i as u64);
            out.push(generate_trial(cfg, &u, label, i, s)?);
        }
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    Ok(BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes trial CSVs, label sidecars, `manifest.csv` and `ground_truth.csv`.
pub fn write_dataset(trials: &[SynthTrial], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(trials.len());
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let mut gt = create(&gt_path)?;
    writeln!(gt, "{GROUND_TRUTH_HEADER}").map_err(|e| Error::io(&gt_path, e))?;
    for t in trials {
        let id = &t.recording.trial_id;
        let csv = dir.join(format!("{id}.csv"));
        let mut f = create(&csv)?;
        write_trial_csv(&t.recording, &mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&csv, e))?;
        let meta = dir.join(format!("{id}.meta"));
        let mut f = create(&meta)?;
        write_meta(Some(t.label), None, &mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&meta, e))?;
        for (i, c) in t.classes.iter().enumerate() {
            writeln!(gt, "{id},{i},{c}").map_err(|e| Error::io(&gt_path, e))?;
        }
        manifest.push(ManifestEntry {
            trial_file: format!("{id}.csv"),
            label: Some(t.label),
        });
    }
    gt.flush().map_err(|e| Error::io(&gt_path, e))?;
    let mpath = dir.join(crate::ingest::MANIFEST_FILE);
    let mut f = create(&mpath)?;
    write_manifest(&manifest, &mut f)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(&mpath, e))
}

/// Reads `ground_truth.csv` as `(trial_id, window_index, class)` rows.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<(String, usize, WindowClass)>> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(GROUND_TRUTH_HEADER) {
        return Err(Error::parse(&path, 1, format!("header must be `{GROUND_TRUTH_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| Error::parse(&path, i + 2, m);
            let mut it = l.split(',');
            match (it.next(), it.next(), it.next(), it.next()) {
                (Some(id), Some(w), Some(c), None) => Ok((
                    id.to_string(),
                    w.trim().parse().map_err(|e| bad(format!("window_index: {e}")))?,
                    c.trim().parse().map_err(bad)?,
                )),
                _ => Err(bad("expected 3 cells".into())),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_dataset, windowize};

    fn small() -> SynthConfig {
        SynthConfig {
            n_pos: 3,
            n_neg: 2,
            windows_min: 4,
            windows_max: 6,
            ..Default::default()
        }
    }

    #[test]
    fn pattern_energy() {
        let u = pattern(100);
        let e: f64 = u.iter().flatten().map(|v| v * v).sum();
        assert!((e - 100.0).abs() < 1e-9);
        assert_eq!(u.len(), 12);
    }

    #[test]
    fn shape_and_labels() {
        let trials = generate(&small()).unwrap();
        assert_eq!(trials.len(), 5);
        for t in &trials {
            assert_eq!(t.recording.len(), t.classes.len() * 100);
            assert!((4..=6).contains(&t.classes.len()));
            assert_eq!(t.recording.label, Some(t.label));
            assert_eq!(windowize(&t.recording, 100).unwrap().len(), t.classes.len());
        }
        assert!(trials[..3].iter().all(|t| t.label == Label::Am && t.classes.contains(&WindowClass::WAm)));
        assert!(trials[3..].iter().all(|t| t.label == Label::Td && t.classes.contains(&WindowClass::WTd)));
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(generate(&small()).unwrap(), other);
    }

    #[test]
    fn zero_noise_windows_follow_the_pattern() {
        let cfg = SynthConfig {
            noise_sd: 0.0,
            separation: 2.0,
            ..small()
        };
        let u = pattern(100);
        for t in generate(&cfg).unwrap() {
            for (w, c) in t.classes.iter().enumerate() {
                let s = match c {
                    WindowClass::WAm => 2.0,
                    WindowClass::WTd => -2.0,
                    WindowClass::WNm => 0.0,
                };
                let x = t.recording.stream(Limb::LeftAnkle).samples[w * 100 + 7];
                assert_eq!(x[0], s * u[6][7]);
                assert_eq!(x[2], s * u[8][7] + 1.0);
            }
        }
    }

    #[test]
    fn class_frequencies_match_the_simplex() {
        // long trials keep the at-least-one-wAM redraw from biasing the counts
        let cfg = SynthConfig {
            n_pos: 200,
            n_neg: 0,
            windows_min: 60,
            windows_max: 60,
            window_samples: 1,
            ..Default::default()
        };
        let trials = generate(&cfg).unwrap();
        let n = (trials.len() * 60) as f64;
        let probs = cfg.class_probabilities(Label::Am);
        for (k, class) in [WindowClass::WAm, WindowClass::WTd, WindowClass::WNm].iter().enumerate() {
            let got = trials.iter().flat_map(|t| &t.classes).filter(|c| *c == class).count() as f64 / n;
            let se = (probs[k] * (1.0 - probs[k]) / n).sqrt();
            assert!((got - probs[k]).abs() <= 3.0 * se, "{class}: {got} vs {}", probs[k]);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { neutral_fraction: 0.97, ..small() },
            SynthConfig { cross_leak: -0.1, ..small() },
            SynthConfig { windows_min: 0, ..small() },
            SynthConfig { windows_min: 9, windows_max: 3, ..small() },
            SynthConfig { noise_sd: f64::NAN, ..small() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
        let kv = KvFile::parse("n_pos = 2\nseperation = 1\n", Path::new("cfg")).unwrap();
        assert!(SynthConfig::from_kv(&kv).is_err());
        let kv = KvFile::parse("n_pos = 2\nseparation = 1.5\n", Path::new("cfg")).unwrap();
        let cfg = SynthConfig::from_kv(&kv).unwrap();
        assert_eq!((cfg.n_pos, cfg.separation, cfg.n_neg), (2, 1.5, 60));
    }

    #[test]
    fn dataset_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let trials = generate(&small()).unwrap();
        write_dataset(&trials, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), trials.len());
        for (a, b) in loaded.iter().zip(&trials) {
            assert_eq!(a, &b.recording);
        }
        let gt = read_ground_truth(dir.path()).unwrap();
        assert_eq!(gt.len(), trials.iter().map(|t| t.classes.len()).sum::<usize>());
        assert_eq!(gt[0], (trials[0].recording.trial_id.clone(), 0, trials[0].classes[0]));
    }
}
