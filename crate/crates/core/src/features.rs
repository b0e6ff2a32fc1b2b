//! Differential-entropy features from raw multichannel recordings.
//!
//! Band limiting is done by masking discrete Fourier transform bins, so a pure
//! sinusoid sitting on a bin passes or vanishes exactly.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{DagamError, Result};

/// Floor applied to the window variance before taking the log.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Multichannel signal: `samples[channel][time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub samples: Vec<Vec<f64>>,
    pub rate: u32,
    pub subject: String,
    pub trial: usize,
    pub label: usize,
}

impl Recording {
    pub fn new(
        samples: Vec<Vec<f64>>,
        rate: u32,
        subject: impl Into<String>,
        trial: usize,
        label: usize,
    ) -> Result<Self> {
        let rec = Recording {
            samples,
            rate,
            subject: subject.into(),
            trial,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(DagamError::Data("sampling rate must be positive".into()));
        }
        let Some(first) = self.samples.first() else {
            return Err(DagamError::Data("recording has no channels".into()));
        };
        if let Some(c) = self.samples.iter().position(|ch| ch.len() != first.len()) {
            return Err(DagamError::Data(format!(
                "channel {c} has {} samples, channel 0 has {}",
                self.samples[c].len(),
                first.len()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate as f64
    }
}

/// One analysis window: `x` is channels × bands.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub x: Tensor,
    pub label: usize,
    pub subject: String,
    pub trial: usize,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        Band {
            name: name.to_string(),
            lo,
            hi,
        }
    }
}

pub fn default_bands() -> Vec<Band> {
    vec![
        Band::new("delta", 1.0, 4.0),
        Band::new("theta", 4.0, 8.0),
        Band::new("alpha", 8.0, 14.0),
        Band::new("beta", 14.0, 31.0),
        Band::new("gamma", 31.0, 50.0),
    ]
}

/// Preprocessing and feature parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub working_rate: u32,
    pub bandpass: (f64, f64),
    pub bands: Vec<Band>,
    pub window_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            working_rate: 200,
            bandpass: (1.0, 75.0),
            bands: default_bands(),
            window_s: 1.0,
        }
    }
}

fn check_band(lo: f64, hi: f64, rate: f64) -> Result<()> {
    if !(lo >= 0.0 && lo < hi) {
        return Err(DagamError::Config(format!(
            "band [{lo}, {hi}] is empty or negative"
        )));
    }
    if hi > rate / 2.0 {
        return Err(DagamError::Config(format!(
            "band edge {hi} Hz exceeds the Nyquist frequency {} Hz",
            rate / 2.0
        )));
    }
    Ok(())
}

/// Forward/inverse transform pair for one signal length.
struct Spectrum {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    len: usize,
}

impl Spectrum {
    fn new(planner: &mut FftPlanner<f64>, len: usize) -> Self {
        Spectrum {
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
            len,
        }
    }

    fn forward(&self, signal: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    /// Inverse of a masked spectrum, real part, normalized.
    fn inverse_masked(
        &self,
        spec: &[Complex<f64>],
        keep: impl Fn(f64) -> bool,
        rate: f64,
    ) -> Vec<f64> {
        self.inverse_weighted(spec, |f| if keep(f) { 1.0 } else { 0.0 }, rate)
    }

    /// Inverse after scaling each bin by `gain(frequency)`.
    fn inverse_weighted(
        &self,
        spec: &[Complex<f64>],
        gain: impl Fn(f64) -> f64,
        rate: f64,
    ) -> Vec<f64> {
        let n = self.len;
        let mut buf: Vec<Complex<f64>> = spec
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let g = gain(k.min(n - k) as f64 * rate / n as f64);
                if g == 0.0 {
                    Complex::new(0.0, 0.0)
                } else {
                    c * g
                }
            })
            .collect();
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Zero every DFT bin outside `[lo, hi]` Hz and transform back.
pub fn band_isolate(signal: &[f64], lo: f64, hi: f64, rate: f64) -> Result<Vec<f64>> {
    check_band(lo, hi, rate)?;
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::new();
    let sp = Spectrum::new(&mut planner, signal.len());
    let spec = sp.forward(signal);
    Ok(sp.inverse_masked(&spec, |f| f >= lo && f <= hi, rate))
}

/// Scale every DFT bin by `gain(frequency in Hz)` and transform back.
pub fn shape_spectrum(signal: &[f64], rate: f64, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    if signal.is_empty() {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let sp = Spectrum::new(&mut planner, signal.len());
    let spec = sp.forward(signal);
    sp.inverse_weighted(&spec, gain, rate)
}

/// Integer decimation to `target` Hz with frequency-domain anti-aliasing:
/// bins at or above the new Nyquist frequency are removed first.
pub fn downsample(rec: &Recording, target: u32) -> Result<Recording> {
    if target == 0 || !rec.rate.is_multiple_of(target) {
        return Err(DagamError::Config(format!(
            "cannot decimate {} Hz to {target} Hz by an integer factor",
            rec.rate
        )));
    }
    let factor = (rec.rate / target) as usize;
    if factor == 1 {
        return Ok(rec.clone());
    }
    let out_len = rec.len() / factor;
    let nyquist = target as f64 / 2.0;
    let mut planner = FftPlanner::new();
    let sp = Spectrum::new(&mut planner, rec.len().max(1));
    let samples = rec
        .samples
        .iter()
        .map(|ch| {
            if ch.is_empty() {
                return Vec::new();
            }
            let spec = sp.forward(ch);
            let filtered = sp.inverse_masked(&spec, |f| f < nyquist, rec.rate as f64);
            filtered.into_iter().step_by(factor).take(out_len).collect()
        })
        .collect();
    Ok(Recording {
        samples,
        rate: target,
        subject: rec.subject.clone(),
        trial: rec.trial,
        label: rec.label,
    })
}

/// Gaussian differential entropy `½ ln(2πe σ̂²)` of a window, with `σ̂²` the
/// unbiased sample variance floored at [`VARIANCE_FLOOR`].
pub fn differential_entropy(window: &[f64]) -> Result<f64> {
    if window.len() < 2 {
        return Err(DagamError::Degenerate(format!(
            "differential entropy needs at least 2 samples, got {}",
            window.len()
        )));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var.max(VARIANCE_FLOOR)).ln())
}

/// Downsample to the working rate, then apply the broadband band-pass.
pub fn preprocess(rec: &Recording, cfg: &FeatureConfig) -> Result<Recording> {
    let mut out = downsample(rec, cfg.working_rate)?;
    let (lo, hi) = cfg.bandpass;
    let rate = out.rate as f64;
    check_band(lo, hi, rate)?;
    if out.is_empty() {
        return Ok(out);
    }
    let mut planner = FftPlanner::new();
    let sp = Spectrum::new(&mut planner, out.len());
    for ch in &mut out.samples {
        let spec = sp.forward(ch);
        *ch = sp.inverse_masked(&spec, |f| f >= lo && f <= hi, rate);
    }
    Ok(out)
}

/// Per-window, per-band differential entropy of every channel.
///
/// Windows are non-overlapping and `window_s` long; a trailing partial
/// window is dropped.
pub fn extract_features(
    rec: &Recording,
    bands: &[Band],
    window_s: f64,
) -> Result<Vec<FeatureSample>> {
    rec.validate()?;
    if bands.is_empty() {
        return Err(DagamError::Config("no frequency bands configured".into()));
    }
    let rate = rec.rate as f64;
    for b in bands {
        check_band(b.lo, b.hi, rate)?;
    }
    let win = (window_s * rate).round();
    if !(win >= 2.0) {
        return Err(DagamError::Config(format!(
            "window of {window_s} s at {rate} Hz holds fewer than 2 samples"
        )));
    }
    let win = win as usize;
    let count = rec.len() / win;
    if count == 0 {
        return Err(DagamError::Data(format!(
            "recording of {} samples is shorter than one {win}-sample window",
            rec.len()
        )));
    }
    let mut planner = FftPlanner::new();
    let sp = Spectrum::new(&mut planner, win);
    let (n, f) = (rec.channels(), bands.len());
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let mut x = Vec::with_capacity(n * f);
        for ch in &rec.samples {
            let spec = sp.forward(&ch[w * win..(w + 1) * win]);
            for b in bands {
                let part = sp.inverse_masked(&spec, |fr| fr >= b.lo && fr <= b.hi, rate);
                x.push(differential_entropy(&part)?);
            }
        }
        out.push(FeatureSample {
            x: Tensor::new(vec![n, f], x)?,
            label: rec.label,
            subject: rec.subject.clone(),
            trial: rec.trial,
            window: w,
        });
    }
    Ok(out)
}

/// Preprocess and extract in one go.
pub fn recording_features(rec: &Recording, cfg: &FeatureConfig) -> Result<Vec<FeatureSample>> {
    let pre = preprocess(rec, cfg)?;
    extract_features(&pre, &cfg.bands, cfg.window_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{E, PI};

    fn sine(freq: f64, rate: f64, len: usize, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin())
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn rec(samples: Vec<Vec<f64>>, rate: u32) -> Recording {
        Recording::new(samples, rate, "s1", 0, 0).unwrap()
    }

    #[test]
    fn decimation_by_five() {
        let r = rec(vec![(0..1000).map(f64::from).collect()], 1000);
        let d = downsample(&r, 200).unwrap();
        assert_eq!(d.rate, 200);
        assert_eq!(d.len(), 200);
        let odd = rec(vec![vec![0.0; 1003]], 1000);
        assert_eq!(downsample(&odd, 200).unwrap().len(), 200);
    }

    #[test]
    fn decimation_identity_and_errors() {
        let r = rec(vec![vec![1.0, -2.0, 3.5]], 200);
        assert_eq!(downsample(&r, 200).unwrap(), r);
        assert!(matches!(downsample(&r, 70), Err(DagamError::Config(_))));
    }

    #[test]
    fn decimation_keeps_low_sine() {
        let r = rec(vec![sine(10.0, 1000.0, 2000, 1.0)], 1000);
        let d = downsample(&r, 200).unwrap();
        let expect = sine(10.0, 200.0, 400, 1.0);
        let peak = d.samples[0].iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 0.01, "peak {peak}");
        let err: f64 = d.samples[0]
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.01, "max deviation {err}");
    }

    #[test]
    fn band_isolation_against_sinusoids() {
        let x = sine(10.0, 200.0, 200, 1.0);
        let kept = band_isolate(&x, 8.0, 12.0, 200.0).unwrap();
        let diff: Vec<f64> = kept.iter().zip(&x).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) / norm(&x) < 1e-6);

        let gone = band_isolate(&x, 20.0, 30.0, 200.0).unwrap();
        assert!(norm(&gone) < 1e-6 * norm(&x));

        let dc = vec![3.0; 200];
        let out = band_isolate(&dc, 1.0, 75.0, 200.0).unwrap();
        assert!(norm(&out) < 1e-9);
        assert_eq!(out.len(), dc.len());
    }

    #[test]
    fn band_above_nyquist_is_config_error() {
        assert!(matches!(
            band_isolate(&[0.0; 10], 1.0, 120.0, 200.0),
            Err(DagamError::Config(_))
        ));
        assert!(matches!(
            band_isolate(&[0.0; 10], 5.0, 5.0, 200.0),
            Err(DagamError::Config(_))
        ));
    }

    #[test]
    fn de_closed_forms() {
        // two-point window with unbiased variance v: values ±sqrt(v/2)
        let v = 1.0 / (2.0 * PI * E);
        let a = (v / 2.0).sqrt();
        assert!(differential_entropy(&[a, -a]).unwrap().abs() < 1e-12);
        let a = 0.5f64.sqrt();
        let de = differential_entropy(&[a, -a]).unwrap();
        assert!((de - 0.5 * (2.0 * PI * E).ln()).abs() < 1e-12);
        assert!((de - 1.4189).abs() < 1e-4);
    }

    #[test]
    fn de_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        let de = differential_entropy(&xs).unwrap();
        let expect = 0.5 * (2.0 * PI * E * 4.0).ln();
        assert!((expect - 2.1121).abs() < 1e-4);
        assert!((de - expect).abs() < 0.01, "{de}");
    }

    #[test]
    fn de_floor_and_short_window() {
        let de = differential_entropy(&[2.0; 50]).unwrap();
        assert_eq!(de, 0.5 * (2.0 * PI * E * VARIANCE_FLOOR).ln());
        assert!(differential_entropy(&[1.0]).is_err());
    }

    #[test]
    fn feature_shapes() {
        let data: Vec<Vec<f64>> = (0..62)
            .map(|c| (0..12_000).map(|i| ((i * (c + 3)) % 17) as f64).collect())
            .collect();
        let r = rec(data, 200);
        let feats = extract_features(&r, &default_bands(), 1.0).unwrap();
        assert_eq!(feats.len(), 60);
        assert!(feats.iter().all(|f| f.x.shape() == [62, 5]));
        assert!(feats.iter().all(|f| f.x.all_finite()));
        assert_eq!(feats[59].window, 59);

        let single = extract_features(&r, &[Band::new("all", 0.0, 100.0)], 1.0).unwrap();
        assert_eq!(single[0].x.shape(), &[62, 1]);
    }

    #[test]
    fn short_recording_is_data_error() {
        let r = rec(vec![vec![0.0; 150]], 200);
        assert!(matches!(
            extract_features(&r, &default_bands(), 1.0),
            Err(DagamError::Data(_))
        ));
        assert!(matches!(
            extract_features(&r, &default_bands(), 0.001),
            Err(DagamError::Config(_))
        ));
    }

    #[test]
    fn de_ordering_follows_band_power() {
        // white noise band-limited into each band with its own gain
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let bands = default_bands();
        let gains = [0.5, 3.0, 1.0, 0.2, 2.0];
        let len = 2000;
        let mut signal = vec![0.0; len];
        for (b, g) in bands.iter().zip(gains) {
            let noise: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            let part = band_isolate(&noise, b.lo, b.hi, 200.0).unwrap();
            let scale = g / (part.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
            for (s, p) in signal.iter_mut().zip(part) {
                *s += scale * p;
            }
        }
        let feats = extract_features(&rec(vec![signal], 200), &bands, 10.0).unwrap();
        let de = feats[0].x.data();
        let mut by_gain: Vec<usize> = (0..5).collect();
        by_gain.sort_by(|&a, &b| gains[a].total_cmp(&gains[b]));
        let mut by_de: Vec<usize> = (0..5).collect();
        by_de.sort_by(|&a, &b| de[a].total_cmp(&de[b]));
        assert_eq!(by_gain, by_de);
    }
}
