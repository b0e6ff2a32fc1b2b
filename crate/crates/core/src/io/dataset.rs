//! On-disk datasets: a JSON manifest next to a layout CSV and one CSV per
//! recording (raw signals) or per trial (precomputed features).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{DagamError, Result};
use crate::features::{recording_features, FeatureConfig, FeatureSample, Recording};
use crate::graph::ElectrodeLayout;
use crate::train::FeatureDataset;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Recordings,
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingEntry {
    pub file: String,
    pub label: usize,
    pub trial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub recordings: Vec<RecordingEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: DataKind,
    /// relative to the manifest directory
    pub layout: String,
    pub rate: u32,
    pub classes: Vec<String>,
    /// how features were computed (features) or are suggested (recordings)
    pub features: FeatureConfig,
    pub subjects: Vec<SubjectEntry>,
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DagamError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| DagamError::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| DagamError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DagamError::io(path, e)
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DagamError::io(path, e))
}

fn parse_row(line: &str, lineno: usize, path: &Path, expect: usize) -> Result<Vec<f64>> {
    let cells: Vec<&str> = line.split(',').collect();
    if cells.len() != expect {
        return Err(DagamError::load(
            path,
            Some(lineno),
            format!("expected {expect} columns, found {}", cells.len()),
        ));
    }
    cells
        .iter()
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| DagamError::load(path, Some(lineno), format!("not a number: {c:?}")))
        })
        .collect()
}

/// Header row of channel names, then one row per time sample.
pub fn recording_to_csv(rec: &Recording, layout: &ElectrodeLayout) -> String {
    let mut out = layout.names().join(",");
    out.push('\n');
    for t in 0..rec.len() {
        let row: Vec<String> = rec.samples.iter().map(|ch| ch[t].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parse a recording CSV, reordering columns into layout order.
pub fn recording_from_csv(
    text: &str,
    path: &Path,
    layout: &ElectrodeLayout,
) -> Result<Vec<Vec<f64>>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| DagamError::load(path, Some(1), "empty file"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let columns = layout
        .names()
        .iter()
        .map(|n| {
            names.iter().position(|h| h == n).ok_or_else(|| {
                DagamError::load(path, Some(1), format!("channel {n} missing from header"))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut samples = vec![Vec::new(); layout.len()];
    for (i, line) in lines {
        let row = parse_row(line, i + 1, path, names.len())?;
        for (ch, &col) in columns.iter().enumerate() {
            samples[ch].push(row[col]);
        }
    }
    Ok(samples)
}

/// Header `window,<channel>.<band>,…`, one row per window.
pub fn features_to_csv(
    samples: &[&FeatureSample],
    layout: &ElectrodeLayout,
    bands: &[String],
) -> String {
    let mut header = vec!["window".to_string()];
    for n in layout.names() {
        header.extend(bands.iter().map(|b| format!("{n}.{b}")));
    }
    let mut out = header.join(",");
    out.push('\n');
    for s in samples {
        out.push_str(&s.window.to_string());
        for v in s.x.data() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn features_from_csv(
    text: &str,
    path: &Path,
    layout: &ElectrodeLayout,
    bands: &[String],
) -> Result<Vec<(usize, Tensor)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| DagamError::load(path, Some(1), "empty file"))?;
    let expect = 1 + layout.len() * bands.len();
    let cols = header.split(',').count();
    if cols != expect {
        return Err(DagamError::load(
            path,
            Some(1),
            format!("header has {cols} columns, expected {expect}"),
        ));
    }
    lines
        .map(|(i, line)| {
            let row = parse_row(line, i + 1, path, expect)?;
            let window = row[0];
            if !(window >= 0.0 && window.fract() == 0.0) {
                return Err(DagamError::load(
                    path,
                    Some(i + 1),
                    format!("bad window index {window}"),
                ));
            }
            let x = Tensor::new(vec![layout.len(), bands.len()], row[1..].to_vec())?;
            Ok((window as usize, x))
        })
        .collect()
}

/// A dataset as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub layout: ElectrodeLayout,
    pub recordings: Vec<Recording>,
    pub features: Vec<FeatureSample>,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Read a dataset from its directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let mpath = manifest_path(path);
    let text = read_text(&mpath)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| DagamError::load(&mpath, Some(e.line()), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DagamError::load(
            &mpath,
            None,
            format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.classes.len() < 2 {
        return Err(DagamError::load(&mpath, None, "need at least 2 classes"));
    }
    let root = mpath.parent().unwrap_or(Path::new("")).to_path_buf();
    let lpath = root.join(&manifest.layout);
    let layout = ElectrodeLayout::from_csv_str(&read_text(&lpath)?, &lpath)?;
    let band_names: Vec<String> = manifest
        .features
        .bands
        .iter()
        .map(|b| b.name.clone())
        .collect();

    let mut recordings = Vec::new();
    let mut features = Vec::new();
    for subj in &manifest.subjects {
        for entry in &subj.recordings {
            if entry.label >= manifest.classes.len() {
                return Err(DagamError::load(
                    &mpath,
                    None,
                    format!(
                        "label {} of {} outside {} classes",
                        entry.label,
                        entry.file,
                        manifest.classes.len()
                    ),
                ));
            }
            let fpath = root.join(&entry.file);
            let text = read_text(&fpath)?;
            match manifest.kind {
                DataKind::Recordings => {
                    let samples = recording_from_csv(&text, &fpath, &layout)?;
                    let rec = Recording::new(
                        samples,
                        manifest.rate,
                        subj.id.clone(),
                        entry.trial,
                        entry.label,
                    )
                    .map_err(|e| DagamError::load(&fpath, None, e.to_string()))?;
                    recordings.push(rec);
                }
                DataKind::Features => {
                    for (window, x) in features_from_csv(&text, &fpath, &layout, &band_names)? {
                        features.push(FeatureSample {
                            x,
                            label: entry.label,
                            subject: subj.id.clone(),
                            trial: entry.trial,
                            window,
                        });
                    }
                }
            }
        }
    }
    Ok(LoadedDataset {
        root,
        manifest,
        layout,
        recordings,
        features,
    })
}

impl LoadedDataset {
    /// Every file the dataset was read from, manifest first.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut out = vec![
            self.root.join(MANIFEST_FILE),
            self.root.join(&self.manifest.layout),
        ];
        for s in &self.manifest.subjects {
            out.extend(s.recordings.iter().map(|r| self.root.join(&r.file)));
        }
        out
    }

    /// Feature samples, computing them with `cfg` when the dataset holds raw
    /// recordings.
    pub fn feature_dataset(&self, cfg: &FeatureConfig) -> Result<FeatureDataset> {
        let samples = match self.manifest.kind {
            DataKind::Features => self.features.clone(),
            DataKind::Recordings => {
                let mut out = Vec::new();
                for r in &self.recordings {
                    out.extend(recording_features(r, cfg)?);
                }
                out
            }
        };
        let ds = FeatureDataset {
            layout: self.layout.clone(),
            classes: self.manifest.classes.clone(),
            subjects: self
                .manifest
                .subjects
                .iter()
                .map(|s| s.id.clone())
                .collect(),
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn file_stem(subject: &str, trial: usize, label: usize) -> String {
    format!("{subject}/trial{trial:02}_class{label}.csv")
}

fn write_manifest(dir: &Path, manifest: &Manifest, layout: &ElectrodeLayout) -> Result<()> {
    atomic_write(
        &dir.join(&manifest.layout),
        layout.to_csv_string().as_bytes(),
    )?;
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    atomic_write(&dir.join(MANIFEST_FILE), json.as_bytes())
}

/// Write raw recordings in subject order.
pub fn write_recordings_dataset(
    dir: &Path,
    layout: &ElectrodeLayout,
    classes: &[String],
    subjects: &[String],
    recordings: &[Recording],
    features: &FeatureConfig,
) -> Result<Manifest> {
    let rate = recordings.first().map_or(features.working_rate, |r| r.rate);
    let mut entries = Vec::new();
    for subj in subjects {
        let mut list = Vec::new();
        for r in recordings.iter().filter(|r| &r.subject == subj) {
            if r.rate != rate || r.channels() != layout.len() {
                return Err(DagamError::Data(format!(
                    "recording of {subj} has {} channels at {} Hz, expected {} at {rate}",
                    r.channels(),
                    r.rate,
                    layout.len()
                )));
            }
            let file = file_stem(subj, r.trial, r.label);
            atomic_write(&dir.join(&file), recording_to_csv(r, layout).as_bytes())?;
            list.push(RecordingEntry {
                file,
                label: r.label,
                trial: r.trial,
            });
        }
        entries.push(SubjectEntry {
            id: subj.clone(),
            recordings: list,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: DataKind::Recordings,
        layout: "layout.csv".into(),
        rate,
        classes: classes.to_vec(),
        features: features.clone(),
        subjects: entries,
    };
    write_manifest(dir, &manifest, layout)?;
    Ok(manifest)
}

/// Write precomputed features, one CSV per (subject, trial, label).
pub fn write_features_dataset(
    dir: &Path,
    ds: &FeatureDataset,
    features: &FeatureConfig,
) -> Result<Manifest> {
    ds.validate()?;
    let bands: Vec<String> = features.bands.iter().map(|b| b.name.clone()).collect();
    if ds.features() != bands.len() {
        return Err(DagamError::Config(format!(
            "{} features per channel but {} bands named",
            ds.features(),
            bands.len()
        )));
    }
    let mut entries = Vec::new();
    for subj in &ds.subjects {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        for s in ds.samples.iter().filter(|s| &s.subject == subj) {
            if !keys.contains(&(s.trial, s.label)) {
                keys.push((s.trial, s.label));
            }
        }
        let mut list = Vec::new();
        for (trial, label) in keys {
            let rows: Vec<&FeatureSample> = ds
                .samples
                .iter()
                .filter(|s| &s.subject == subj && s.trial == trial && s.label == label)
                .collect();
            let file = file_stem(subj, trial, label);
            atomic_write(
                &dir.join(&file),
                features_to_csv(&rows, &ds.layout, &bands).as_bytes(),
            )?;
            list.push(RecordingEntry { file, label, trial });
        }
        entries.push(SubjectEntry {
            id: subj.clone(),
            recordings: list,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind: DataKind::Features,
        layout: "layout.csv".into(),
        rate: features.working_rate,
        classes: ds.classes.clone(),
        features: features.clone(),
        subjects: entries,
    };
    write_manifest(dir, &manifest, &ds.layout)?;
    Ok(manifest)
}
