//! Trial loading, the signal-vector-magnitude channel, and non-overlapping
//! segmentation into raw windows.
//!
//! A window is flattened channel-major: for each limb in the order
//! left wrist, right wrist, left ankle, right ankle, the channels x, y, z and
//! SVM follow each other, each contributing `window_samples` consecutive
//! samples. At the defaults that is 16 x 100 = 1600 values.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;

pub const DEFAULT_WINDOW_SAMPLES: usize = 100;
pub const DEFAULT_RATE_HZ: f64 = 100.0;
pub const CHANNELS_PER_LIMB: usize = 4;
pub const N_LIMBS: usize = 4;
pub const N_CHANNELS: usize = N_LIMBS * CHANNELS_PER_LIMB;

pub const CSV_HEADER: &str = "t,lw_x,lw_y,lw_z,rw_x,rw_y,rw_z,la_x,la_y,la_z,ra_x,ra_y,ra_z";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "trial_file,label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Limb {
    LeftWrist,
    RightWrist,
    LeftAnkle,
    RightAnkle,
}

impl Limb {
    pub const ALL: [Limb; N_LIMBS] = [
        Limb::LeftWrist,
        Limb::RightWrist,
        Limb::LeftAnkle,
        Limb::RightAnkle,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Limb::LeftWrist => "lw",
            Limb::RightWrist => "rw",
            Limb::LeftAnkle => "la",
            Limb::RightAnkle => "ra",
        }
    }
}

/// Trial-level label. AM (abnormal movements) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Td = 0,
    Am = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Am
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Am => "AM",
            Label::Td => "TD",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "AM" | "am" | "1" => Ok(Label::Am),
            "TD" | "td" | "0" => Ok(Label::Td),
            other => Err(format!("unknown label `{other}` (expected AM or TD)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialMeta {
    pub age_month: Option<u8>,
    pub preterm: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimbStream {
    pub limb: Limb,
    pub samples: Vec<[f64; 3]>,
    pub rate: f64,
}

impl LimbStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecording {
    pub trial_id: String,
    streams: [LimbStream; N_LIMBS],
    pub label: Option<Label>,
    pub meta: Option<TrialMeta>,
}

impl TrialRecording {
    /// Builds a trial from one stream per limb (any order).
    pub fn new(
        trial_id: impl Into<String>,
        streams: Vec<LimbStream>,
        label: Option<Label>,
        meta: Option<TrialMeta>,
    ) -> Result<Self> {
        let trial_id = trial_id.into();
        if streams.len() != N_LIMBS {
            return Err(Error::Input(format!(
                "{trial_id}: expected {N_LIMBS} limb streams, got {}",
                streams.len()
            )));
        }
        let mut slots: [Option<LimbStream>; N_LIMBS] = Default::default();
        for s in streams {
            let slot = &mut slots[s.limb as usize];
            if slot.is_some() {
                return Err(Error::Input(format!("{trial_id}: duplicate stream for {:?}", s.limb)));
            }
            if !(s.rate > 0.0 && s.rate.is_finite()) {
                return Err(Error::Input(format!("{trial_id}: sampling rate must be > 0")));
            }
            if let Some(i) = s.samples.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Input(format!(
                    "{trial_id}: {:?} has a non-finite sample at index {i}",
                    s.limb
                )));
            }
            *slot = Some(s);
        }
        let streams = slots.map(|s| s.expect("four distinct limbs fill every slot"));
        let len = streams[0].len();
        if streams.iter().any(|s| s.len() != len) {
            return Err(Error::Input(format!("{trial_id}: limb streams have different lengths")));
        }
        Ok(TrialRecording {
            trial_id,
            streams,
            label,
            meta,
        })
    }

    pub fn streams(&self) -> &[LimbStream; N_LIMBS] {
        &self.streams
    }

    pub fn stream(&self, limb: Limb) -> &LimbStream {
        &self.streams[limb as usize]
    }

    /// Samples per limb stream.
    pub fn len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One fixed-length segment of a trial, flattened channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub trial_id: String,
    pub window_index: usize,
    pub start_sample: usize,
    pub values: Vec<f64>,
}

/// Per-sample Euclidean norm of the three axes.
pub fn compute_svm_channel(stream: &LimbStream) -> Result<Vec<f64>> {
    stream
        .samples
        .iter()
        .enumerate()
        .map(|(index, &[x, y, z])| {
            if x.is_finite() && y.is_finite() && z.is_finite() {
                Ok((x * x + y * y + z * z).sqrt())
            } else {
                Err(Error::NonFinite { index })
            }
        })
        .collect()
}

/// Splits a trial into `floor(len / window_samples)` contiguous windows; the
/// trailing partial window is dropped.
pub fn windowize(trial: &TrialRecording, window_samples: usize) -> Result<Vec<RawWindow>> {
    if window_samples == 0 {
        return Err(Error::Config("window_samples must be >= 1".into()));
    }
    let len = trial.len();
    if len < window_samples {
        return Err(Error::TrialTooShort {
            trial_id: trial.trial_id.clone(),
            samples: len,
            window_samples,
        });
    }
    let svm: Vec<Vec<f64>> = trial
        .streams
        .iter()
        .map(compute_svm_channel)
        .collect::<Result<_>>()?;

    let n_windows = len / window_samples;
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let start = w * window_samples;
        let end = start + window_samples;
        let mut values = Vec::with_capacity(N_CHANNELS * window_samples);
        for (stream, mag) in trial.streams.iter().zip(&svm) {
            for axis in 0..3 {
                values.extend(stream.samples[start..end].iter().map(|s| s[axis]));
            }
            values.extend_from_slice(&mag[start..end]);
        }
        out.push(RawWindow {
            trial_id: trial.trial_id.clone(),
            window_index: w,
            start_sample: start,
            values,
        });
    }
    Ok(out)
}

/// Reads a trial CSV. The trial id is the file stem; the label comes from a
/// sidecar `<stem>.meta` file if one exists next to it.
pub fn load_trial_csv(path: &Path) -> Result<TrialRecording> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let trial_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("{}: cannot derive a trial id", path.display())))?
        .to_string();
    let mut trial = parse_trial_csv(BufReader::new(file), path, &trial_id)?;
    let meta_path = path.with_extension("meta");
    if meta_path.exists() {
        let (label, meta) = read_meta(&meta_path)?;
        trial.label = label;
        trial.meta = meta;
    }
    Ok(trial)
}

pub fn parse_trial_csv(reader: impl BufRead, path: &Path, trial_id: &str) -> Result<TrialRecording> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "empty file, expected a header row")),
    };
    let header = header.trim_start_matches('\u{feff}').trim();
    if header != CSV_HEADER {
        let got: Vec<&str> = header.split(',').map(str::trim).collect();
        let missing: Vec<&str> = CSV_HEADER.split(',').filter(|c| !got.contains(c)).collect();
        let message = if missing.is_empty() {
            format!("header must be exactly `{CSV_HEADER}`")
        } else {
            format!("missing column(s) {}", missing.join(","))
        };
        return Err(Error::parse(path, 1, message));
    }

    let mut cols: Vec<Vec<[f64; 3]>> = vec![Vec::new(); N_LIMBS];
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let row = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 13 {
            return Err(Error::parse(
                path,
                line_no,
                format!("row {row}: expected 13 cells, got {}", cells.len()),
            ));
        }
        cells[0].trim().parse::<u64>().map_err(|_| {
            Error::parse(path, line_no, format!("row {row}: `t` must be an integer sample index"))
        })?;
        let mut vals = [0.0f64; 12];
        for (c, v) in vals.iter_mut().enumerate() {
            let cell = cells[c + 1].trim();
            let x: f64 = cell.parse().map_err(|_| {
                Error::parse(path, line_no, format!("row {row}: non-numeric cell `{cell}`"))
            })?;
            if !x.is_finite() {
                return Err(Error::parse(path, line_no, format!("row {row}: non-finite value `{cell}`")));
            }
            *v = x;
        }
        for (limb, col) in cols.iter_mut().enumerate() {
            col.push([vals[3 * limb], vals[3 * limb + 1], vals[3 * limb + 2]]);
        }
    }
    if cols[0].is_empty() {
        return Err(Error::TrialTooShort {
            trial_id: trial_id.to_string(),
            samples: 0,
            window_samples: DEFAULT_WINDOW_SAMPLES,
        });
    }
    let streams = Limb::ALL
        .iter()
        .zip(cols)
        .map(|(&limb, samples)| LimbStream {
            limb,
            samples,
            rate: DEFAULT_RATE_HZ,
        })
        .collect();
    TrialRecording::new(trial_id, streams, None, None)
}

/// Writes a trial in the CSV layout read by [`parse_trial_csv`]. Values use the
/// shortest decimal form that parses back to the same `f64`.
pub fn write_trial_csv(trial: &TrialRecording, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for t in 0..trial.len() {
        write!(out, "{t}")?;
        for s in &trial.streams {
            let [x, y, z] = s.samples[t];
            write!(out, ",{x},{y},{z}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<(Option<Label>, Option<TrialMeta>)> {
    let kv = KvFile::read(path)?;
    kv.reject_unknown(&["label", "age_month", "preterm"])?;
    let label = kv.get::<Label>("label")?;
    let age_month = kv.get::<u8>("age_month")?;
    if let Some(a) = age_month {
        if !(1..=6).contains(&a) {
            return Err(Error::parse(path, 0, format!("age_month {a} outside 1..=6")));
        }
    }
    let preterm = kv.get::<bool>("preterm")?;
    let meta = (age_month.is_some() || preterm.is_some()).then_some(TrialMeta { age_month, preterm });
    Ok((label, meta))
}

pub fn write_meta(label: Option<Label>, meta: Option<&TrialMeta>, mut out: impl Write) -> std::io::Result<()> {
    if let Some(l) = label {
        writeln!(out, "label = {l}")?;
    }
    if let Some(m) = meta {
        if let Some(a) = m.age_month {
            writeln!(out, "age_month = {a}")?;
        }
        if let Some(p) = m.preterm {
            writeln!(out, "preterm = {p}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub trial_file: String,
    pub label: Option<Label>,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some(MANIFEST_HEADER) => {}
        _ => return Err(Error::parse(&path, 1, format!("header must be `{MANIFEST_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(&path, line_no, "expected `trial_file,label`"))?;
        let label = match label.trim() {
            "" => None,
            l => Some(l.parse::<Label>().map_err(|e| Error::parse(&path, line_no, e))?),
        };
        out.push(ManifestEntry {
            trial_file: file.trim().to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for e in entries {
        match e.label {
            Some(l) => writeln!(out, "{},{l}", e.trial_file)?,
            None => writeln!(out, "{},", e.trial_file)?,
        }
    }
    Ok(())
}

/// Loads every trial listed in `dir/manifest.csv`. The manifest label wins;
/// a sidecar label that disagrees with it is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrialRecording>> {
    let entries = read_manifest(dir)?;
    entries
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.trial_file);
            let mut trial = load_trial_csv(&path)?;
            match (e.label, trial.label) {
                (Some(m), Some(s)) if m != s => {
                    return Err(Error::Input(format!(
                        "{}: manifest label {m} disagrees with sidecar label {s}",
                        trial.trial_id
                    )))
                }
                (Some(m), _) => trial.label = Some(m),
                (None, _) => {}
            }
            Ok(trial)
        })
        .collect()
}
