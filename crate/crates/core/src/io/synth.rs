//! Deterministic synthetic EEG with class structure and subject drift.
//!
//! Each channel is white Gaussian noise whose spectrum is scaled band by band.
//! The log-amplitude of band `b` on channel `ch` for class `c`, subject `s` is
//!
//! ```text
//! δ·P[c][ch][b] + τ·Z[s][ch][b]
//! ```
//!
//! so the differential entropy of that band shifts by the same amount. `P` is
//! a smooth function of electrode position (a random affine map of the unit
//! direction), centred across bands and scaled to unit RMS: classes differ only
//! in band contrasts. `Z` is standard normal and independent for every subject,
//! channel and band, so a held-out subject's features are displaced from the
//! training subjects' in directions the class patterns do not share.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DagamError, Result};
use crate::features::{
    default_bands, recording_features, shape_spectrum, Band, FeatureConfig, Recording,
};
use crate::graph::{seed_montage, ElectrodeLayout};
use crate::io::dataset::{write_recordings_dataset, Manifest};
use crate::train::FeatureDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub classes: usize,
    pub channels: usize,
    /// class separation in log-amplitude units
    pub delta: f64,
    /// subject drift in log-amplitude units
    pub tau: f64,
    pub seed: u64,
    pub rate: u32,
    pub trials_per_class: usize,
    pub trial_s: f64,
    pub bands: Vec<Band>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 6,
            classes: 3,
            channels: 62,
            delta: 0.5,
            tau: 0.5,
            seed: 0,
            rate: 200,
            trials_per_class: 2,
            trial_s: 10.0,
            bands: default_bands(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DagamError::Config(m));
        if self.subjects < 2 || self.classes < 2 {
            return bad(format!(
                "need at least 2 subjects and 2 classes, got {} and {}",
                self.subjects, self.classes
            ));
        }
        if !(self.delta > 0.0)
            || !(self.tau >= 0.0)
            || !self.delta.is_finite()
            || !self.tau.is_finite()
        {
            return bad(format!(
                "need delta > 0 and tau >= 0, got {} and {}",
                self.delta, self.tau
            ));
        }
        let montage = seed_montage().len();
        if self.channels == 0 || self.channels > montage {
            return bad(format!(
                "{} channels requested, the montage has {montage}",
                self.channels
            ));
        }
        if self.rate == 0 || self.trials_per_class == 0 || !(self.trial_s > 0.0) {
            return bad("rate, trials per class and trial length must be positive".into());
        }
        if self.bands.is_empty() {
            return bad("no bands to synthesize".into());
        }
        if let Some(b) = self
            .bands
            .iter()
            .find(|b| !(b.lo < b.hi) || b.hi > self.rate as f64 / 2.0)
        {
            return bad(format!(
                "band {} [{}, {}] does not fit below Nyquist",
                b.name, b.lo, b.hi
            ));
        }
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let width = self.subjects.to_string().len().max(2);
        (1..=self.subjects)
            .map(|s| format!("s{s:0width$}"))
            .collect()
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    match classes {
        3 => vec!["negative".into(), "neutral".into(), "positive".into()],
        4 => vec![
            "neutral".into(),
            "sad".into(),
            "fear".into(),
            "happy".into(),
        ],
        c => (0..c).map(|i| format!("class{i}")).collect(),
    }
}

/// Generated recordings before they touch the disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub layout: ElectrodeLayout,
    pub classes: Vec<String>,
    pub subjects: Vec<String>,
    pub recordings: Vec<Recording>,
}

impl SyntheticData {
    pub fn feature_dataset(&self, cfg: &FeatureConfig) -> Result<FeatureDataset> {
        let mut samples = Vec::new();
        for r in &self.recordings {
            samples.extend(recording_features(r, cfg)?);
        }
        let ds = FeatureDataset {
            layout: self.layout.clone(),
            classes: self.classes.clone(),
            subjects: self.subjects.clone(),
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let layout = seed_montage().truncated(spec.channels)?;
    let nb = spec.bands.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let dirs: Vec<[f64; 3]> = layout
        .channels()
        .iter()
        .map(|e| {
            let r = (e.x * e.x + e.y * e.y + e.z * e.z).sqrt();
            [e.x / r, e.y / r, e.z / r]
        })
        .collect();
    // pattern[c][ch][b]
    let mut pattern = vec![vec![vec![0.0; nb]; spec.channels]; spec.classes];
    for class in pattern.iter_mut() {
        for b in 0..nb {
            let coef: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
            for (ch, d) in dirs.iter().enumerate() {
                class[ch][b] = coef[0] + coef[1] * d[0] + coef[2] * d[1] + coef[3] * d[2];
            }
        }
        for row in class.iter_mut() {
            let mean = row.iter().sum::<f64>() / nb as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    let count = (spec.classes * spec.channels * nb) as f64;
    let rms = (pattern
        .iter()
        .flatten()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        / count)
        .sqrt();
    if rms > 0.0 {
        pattern
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|v| *v /= rms);
    }
    let drift: Vec<Vec<Vec<f64>>> = (0..spec.subjects)
        .map(|_| {
            (0..spec.channels)
                .map(|_| (0..nb).map(|_| normal(&mut rng)).collect())
                .collect()
        })
        .collect();

    let len = (spec.trial_s * spec.rate as f64).round() as usize;
    let rate = spec.rate as f64;
    let subjects = spec.subject_ids();
    let mut recordings = Vec::new();
    for (s, subject) in subjects.iter().enumerate() {
        for trial in 0..spec.trials_per_class {
            for c in 0..spec.classes {
                let samples = (0..spec.channels)
                    .map(|ch| {
                        let gains: Vec<f64> = (0..nb)
                            .map(|b| {
                                (spec.delta * pattern[c][ch][b] + spec.tau * drift[s][ch][b]).exp()
                            })
                            .collect();
                        let noise: Vec<f64> = (0..len).map(|_| normal(&mut rng)).collect();
                        shape_spectrum(&noise, rate, |f| {
                            spec.bands
                                .iter()
                                .position(|b| f >= b.lo && f < b.hi)
                                .map_or(0.0, |b| gains[b])
                        })
                    })
                    .collect();
                recordings.push(Recording::new(
                    samples,
                    spec.rate,
                    subject.clone(),
                    trial * spec.classes + c,
                    c,
                )?);
            }
        }
    }
    Ok(SyntheticData {
        layout,
        classes: class_names(spec.classes),
        subjects,
        recordings,
    })
}

/// Synthesize and write a recordings dataset to `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    let data = synthesize(spec)?;
    let features = FeatureConfig {
        working_rate: spec.rate,
        bands: spec.bands.clone(),
        ..FeatureConfig::default()
    };
    write_recordings_dataset(
        dir,
        &data.layout,
        &data.classes,
        &data.subjects,
        &data.recordings,
        &features,
    )
}
