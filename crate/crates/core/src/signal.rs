//! Deterministic preprocessing of raw wearable recordings into normalized
//! fixed-length windows: Butterworth filtering (causal second-order
//! sections), linear resampling, z-score + min-max normalization, and
//! 10-second segmentation.
//!
//! Per-modality pipeline: ECG gets a 0.5 Hz high-pass, PPG a 0.5–8 Hz
//! band-pass, EDA skips filtering and is upsampled to 64 Hz so every
//! modality survives the six-block convolutional stack. Normalization is
//! applied per recording, before segmentation; trailing partial windows
//! are dropped.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WINDOW_SECONDS: f64 = 10.0;
/// EDA is linearly upsampled to this rate before windowing.
pub const EDA_TARGET_FS: f64 = 64.0;
/// Filter order (analog prototype order) for both pipeline filters.
pub const FILTER_ORDER: usize = 4;

const ZSCORE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ecg,
    Ppg,
    Eda,
}

impl Modality {
    /// Native sampling rates of the source recordings.
    pub fn default_fs(self) -> f64 {
        match self {
            Modality::Ecg => 512.0,
            Modality::Ppg => 64.0,
            Modality::Eda => 4.0,
        }
    }

    /// Sampling rate of the preprocessed windows.
    pub fn window_fs(self) -> f64 {
        match self {
            Modality::Ecg => 512.0,
            Modality::Ppg => 64.0,
            Modality::Eda => EDA_TARGET_FS,
        }
    }

    pub fn window_len(self) -> usize {
        (WINDOW_SECONDS * self.window_fs()).round() as usize
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Modality::Ecg => "ecg",
            Modality::Ppg => "ppg",
            Modality::Eda => "eda",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Modality::Ecg),
            "ppg" => Ok(Modality::Ppg),
            "eda" => Ok(Modality::Eda),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// One raw, unprocessed recording of a single modality.
#[derive(Debug, Clone)]
pub struct RawRecording {
    pub subject_id: String,
    pub modality: Modality,
    pub sampling_rate_hz: f64,
    pub samples: Vec<f64>,
}

impl RawRecording {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_rate_hz <= 0.0 {
            return Err(Error::Contract(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::Contract("recording has no samples".into()));
        }
        Ok(())
    }
}

/// A fixed-duration, preprocessed segment: values in [-1, 1], length
/// `round(10 s × effective rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesWindow {
    pub subject_id: String,
    pub modality: Modality,
    pub sampling_rate_hz: f64,
    pub samples: Vec<f32>,
    pub window_index: usize,
}

impl TimeSeriesWindow {
    pub fn validate(&self) -> Result<()> {
        let expect = (WINDOW_SECONDS * self.sampling_rate_hz).round() as usize;
        if self.samples.len() != expect {
            return Err(Error::Contract(format!(
                "window has {} samples, expected {} at {} Hz",
                self.samples.len(),
                expect,
                self.sampling_rate_hz
            )));
        }
        if self.samples.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::Contract("window values outside [-1, 1]".into()));
        }
        Ok(())
    }
}

// ── Butterworth filter (cascaded second-order sections) ──────────────

/// One digital biquad: b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2.
#[derive(Debug, Clone, Copy)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Highpass,
    Bandpass,
}

/// Causal Butterworth filter realized as cascaded second-order sections.
#[derive(Debug, Clone)]
pub struct ButterworthFilter {
    sections: Vec<Sos>,
}

impl ButterworthFilter {
    pub fn design(kind: FilterKind, cutoffs: &[f64], fs: f64, order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::Config("filter order must be >= 1".into()));
        }
        if fs <= 0.0 {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        let nyquist = fs / 2.0;
        for &fc in cutoffs {
            if fc <= 0.0 || fc >= nyquist {
                return Err(Error::Config(format!(
                    "cutoff {fc} Hz must lie strictly inside (0, {nyquist}) at fs = {fs}"
                )));
            }
        }
        // Analog Butterworth prototype: poles on the left unit semicircle.
        let proto_poles: Vec<Complex64> = (0..order)
            .map(|k| {
                let theta = std::f64::consts::PI * (2.0 * k as f64 + order as f64 + 1.0)
                    / (2.0 * order as f64);
                Complex64::new(theta.cos(), theta.sin())
            })
            .collect();
        let fs2 = 2.0 * fs;
        let prewarp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();

        let (zeros, poles, gain) = match kind {
            FilterKind::Highpass => {
                let [fc] = cutoffs else {
                    return Err(Error::Config("highpass takes exactly one cutoff".into()));
                };
                let wo = prewarp(*fc);
                // lp2hp: p -> wo/p; the prototype's zeros at infinity move to
                // the origin. Gain correction real(1/prod(-p)) is exactly 1
                // for a Butterworth prototype but computed explicitly.
                let poles: Vec<Complex64> = proto_poles.iter().map(|&p| wo / p).collect();
                let zeros = vec![Complex64::new(0.0, 0.0); order];
                let denom: Complex64 = proto_poles.iter().map(|&p| -p).product();
                let gain = (Complex64::new(1.0, 0.0) / denom).re;
                (zeros, poles, gain)
            }
            FilterKind::Bandpass => {
                let [f1, f2] = cutoffs else {
                    return Err(Error::Config("bandpass takes exactly two cutoffs".into()));
                };
                if f1 >= f2 {
                    return Err(Error::Config(format!(
                        "bandpass cutoffs must be increasing, got {f1} >= {f2}"
                    )));
                }
                let (w1, w2) = (prewarp(*f1), prewarp(*f2));
                let wo = (w1 * w2).sqrt();
                let bw = w2 - w1;
                // lp2bp: each prototype pole maps to a pair.
                let mut poles = Vec::with_capacity(2 * order);
                for &p in &proto_poles {
                    let pl = p * bw / 2.0;
                    let disc = (pl * pl - Complex64::new(wo * wo, 0.0)).sqrt();
                    poles.push(pl + disc);
                    poles.push(pl - disc);
                }
                let zeros = vec![Complex64::new(0.0, 0.0); order];
                let gain = bw.powi(order as i32);
                (zeros, poles, gain)
            }
        };

        // Bilinear transform to the digital domain.
        let mut zd: Vec<Complex64> = zeros.iter().map(|&z| (fs2 + z) / (fs2 - z)).collect();
        let pd: Vec<Complex64> = poles.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
        let num: Complex64 = zeros.iter().map(|&z| fs2 - z).product();
        let den: Complex64 = poles.iter().map(|&p| fs2 - p).product();
        let kd = gain * (num / den).re;
        // Degree mismatch adds zeros at z = -1.
        while zd.len() < pd.len() {
            zd.push(Complex64::new(-1.0, 0.0));
        }

        let sections = zpk_to_sos(&zd, &pd, kd)?;
        Ok(ButterworthFilter { sections })
    }

    /// Causal forward pass (direct form II transposed), zero initial state.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for sec in &self.sections {
            let (b, a) = (sec.b, sec.a);
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for v in y.iter_mut() {
                let xin = *v;
                let out = b[0] * xin + s1;
                s1 = b[1] * xin - a[0] * out + s2;
                s2 = b[2] * xin - a[1] * out;
                *v = out;
            }
        }
        y
    }

    /// Magnitude response |H(e^{j2πf/fs})|, evaluated from the coefficients.
    pub fn magnitude_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = Complex64::new(0.0, -w).exp();
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for sec in &self.sections {
            let num = Complex64::new(sec.b[0], 0.0) + z1 * sec.b[1] + z2 * sec.b[2];
            let den = Complex64::new(1.0, 0.0) + z1 * sec.a[0] + z2 * sec.a[1];
            h *= num / den;
        }
        h.norm()
    }

    pub fn magnitude_db_at(&self, f: f64, fs: f64) -> f64 {
        20.0 * self.magnitude_at(f, fs).log10()
    }

    pub fn sections(&self) -> &[Sos] {
        &self.sections
    }
}

/// Pair conjugate poles and attach the nearest zeros to form biquads.
/// An odd pole count leaves one trailing first-order section.
fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], gain: f64) -> Result<Vec<Sos>> {
    if zeros.len() != poles.len() {
        return Err(Error::Config(format!(
            "section pairing expects matched pole/zero counts, got {} zeros and {} poles",
            zeros.len(),
            poles.len()
        )));
    }
    let mut remaining_poles = poles.to_vec();
    let mut remaining_zeros = zeros.to_vec();
    let mut sections = Vec::with_capacity(poles.len() / 2 + 1);
    while !remaining_poles.is_empty() {
        // Take the pole closest to the unit circle first (hardest section).
        let (idx, _) = remaining_poles
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (1.0 - p.norm()).abs()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let p1 = remaining_poles.swap_remove(idx);
        if remaining_poles.is_empty() {
            if p1.im.abs() > 1e-9 {
                return Err(Error::Config("unpaired complex pole".into()));
            }
            let z1 = remaining_zeros.pop().unwrap();
            if z1.im.abs() > 1e-9 {
                return Err(Error::Config("unpaired complex zero".into()));
            }
            sections.push(Sos {
                b: [1.0, -z1.re, 0.0],
                a: [-p1.re, 0.0],
            });
            break;
        }
        let p2 = if p1.im.abs() > 1e-12 {
            // Remove its conjugate partner.
            let (jdx, _) = remaining_poles
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - p1.conj()).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .ok_or_else(|| Error::Config("unpaired complex pole".into()))?;
            remaining_poles.swap_remove(jdx)
        } else {
            // Pair with the nearest remaining real pole.
            let (jdx, _) = remaining_poles
                .iter()
                .enumerate()
                .filter(|(_, p)| p.im.abs() <= 1e-12)
                .map(|(i, p)| (i, (p - p1).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .ok_or_else(|| Error::Config("unpaired real pole".into()))?;
            remaining_poles.swap_remove(jdx)
        };
        // Two zeros nearest to p1.
        let mut zs = Vec::with_capacity(2);
        for _ in 0..2 {
            let (jdx, _) = remaining_zeros
                .iter()
                .enumerate()
                .map(|(i, z)| (i, (z - p1).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            zs.push(remaining_zeros.swap_remove(jdx));
        }
        let b1 = -(zs[0] + zs[1]).re;
        let b2 = (zs[0] * zs[1]).re;
        let a1 = -(p1 + p2).re;
        let a2 = (p1 * p2).re;
        sections.push(Sos {
            b: [1.0, b1, b2],
            a: [a1, a2],
        });
    }
    if let Some(first) = sections.first_mut() {
        for b in first.b.iter_mut() {
            *b *= gain;
        }
    }
    Ok(sections)
}

/// Convenience wrapper matching the pipeline's two filter uses.
pub fn butterworth_filter(
    x: &[f64],
    fs: f64,
    kind: FilterKind,
    cutoffs: &[f64],
    order: usize,
) -> Result<Vec<f64>> {
    let filt = ButterworthFilter::design(kind, cutoffs, fs, order)?;
    Ok(filt.apply(x))
}

// ── resampling / normalization / segmentation ────────────────────────

/// Piecewise-linear resampling. Output sample `j` is taken at input time
/// `j / fs_out`; positions past the final input sample hold its value, so
/// both endpoints are preserved. Output length is `round(len · fs_out/fs_in)`.
pub fn resample_linear(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("resample of empty input".into()));
    }
    if fs_in <= 0.0 || fs_out <= 0.0 {
        return Err(Error::Config("sampling rates must be positive".into()));
    }
    if (fs_in - fs_out).abs() < f64::EPSILON {
        return Ok(x.to_vec());
    }
    let out_len = ((x.len() as f64) * fs_out / fs_in).round() as usize;
    let ratio = fs_in / fs_out;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 * ratio;
        let i = t.floor() as usize;
        if i + 1 >= x.len() {
            out.push(x[x.len() - 1]);
        } else {
            let frac = t - i as f64;
            out.push(x[i] * (1.0 - frac) + x[i + 1] * frac);
        }
    }
    Ok(out)
}

/// Z-score then min-max scale into [-1, 1]. Non-constant input attains both
/// -1 and +1 exactly; constant input (std below 1e-8) maps to all zeros.
pub fn zscore_then_minmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Contract("normalize of empty input".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZSCORE_EPS {
        return Ok(vec![0.0; x.len()]);
    }
    let z: Vec<f64> = x.iter().map(|&v| (v - mean) / std).collect();
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span < ZSCORE_EPS {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(z.iter().map(|&v| 2.0 * (v - lo) / span - 1.0).collect())
}

/// Non-overlapping consecutive windows; the trailing partial window is
/// dropped. Shorter-than-one-window input yields an empty list.
pub fn segment_windows(x: &[f64], fs: f64) -> Result<Vec<Vec<f64>>> {
    let win = (WINDOW_SECONDS * fs).round() as usize;
    if win == 0 {
        return Err(Error::Config(format!(
            "window of {WINDOW_SECONDS} s at {fs} Hz holds no samples"
        )));
    }
    Ok(x.chunks_exact(win).map(|c| c.to_vec()).collect())
}

/// Full per-recording pipeline: modality-specific filtering (EDA instead
/// resamples to 64 Hz), then z-score, min-max, segmentation.
pub fn preprocess(recording: &RawRecording) -> Result<Vec<TimeSeriesWindow>> {
    recording.validate()?;
    let fs_in = recording.sampling_rate_hz;
    let (filtered, fs_eff) = match recording.modality {
        Modality::Ecg => (
            butterworth_filter(&recording.samples, fs_in, FilterKind::Highpass, &[0.5], FILTER_ORDER)?,
            fs_in,
        ),
        Modality::Ppg => (
            butterworth_filter(
                &recording.samples,
                fs_in,
                FilterKind::Bandpass,
                &[0.5, 8.0],
                FILTER_ORDER,
            )?,
            fs_in,
        ),
        Modality::Eda => {
            if (fs_in - EDA_TARGET_FS).abs() < f64::EPSILON {
                (recording.samples.clone(), fs_in)
            } else {
                (
                    resample_linear(&recording.samples, fs_in, EDA_TARGET_FS)?,
                    EDA_TARGET_FS,
                )
            }
        }
    };
    let normalized = zscore_then_minmax(&filtered)?;
    let windows = segment_windows(&normalized, fs_eff)?;
    windows
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let tw = TimeSeriesWindow {
                subject_id: recording.subject_id.clone(),
                modality: recording.modality,
                sampling_rate_hz: fs_eff,
                samples: w.iter().map(|&v| v as f32).collect(),
                window_index: i,
            };
            tw.validate()?;
            Ok(tw)
        })
        .collect()
}
