//! Stochastic augmentations for contrastive view pairs: segment-wise time
//! warping, SNR-controlled Gaussian noise, and uniform amplitude scaling.
//! Every augmentation is a deterministic function of (input, RNG state).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Segment count for time warping; must be even so exactly half the
    /// segments stretch while the other half squeeze.
    pub segments_r: usize,
    /// Warp factor in percent.
    pub warp_sigma_pct: f64,
    /// Signal-to-noise ratio range in dB, [low, high].
    pub snr_db_range: [f64; 2],
    /// Amplitude scale range [min, max], both positive.
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            segments_r: 4,
            warp_sigma_pct: 25.0,
            snr_db_range: [5.0, 15.0],
            scale_range: [0.5, 2.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segments_r < 2 || self.segments_r % 2 != 0 {
            return Err(Error::Config(format!(
                "segments_r must be an even integer >= 2, got {}",
                self.segments_r
            )));
        }
        if !(0.0..100.0).contains(&self.warp_sigma_pct) {
            return Err(Error::Config(format!(
                "warp_sigma_pct must lie in [0, 100), got {}",
                self.warp_sigma_pct
            )));
        }
        if self.snr_db_range[0] > self.snr_db_range[1] {
            return Err(Error::Config(format!(
                "snr_db_range low {} exceeds high {}",
                self.snr_db_range[0], self.snr_db_range[1]
            )));
        }
        if self.scale_range[0] <= 0.0 || self.scale_range[0] > self.scale_range[1] {
            return Err(Error::Config(format!(
                "scale_range must be positive and increasing, got {:?}",
                self.scale_range
            )));
        }
        Ok(())
    }
}

/// Linear resample of a segment to `new_len` samples, endpoints preserved.
fn resample_segment(seg: &[f32], new_len: usize) -> Vec<f32> {
    if new_len == 0 {
        return Vec::new();
    }
    if seg.len() == 1 || new_len == 1 {
        return vec![seg[0]; new_len];
    }
    let scale = (seg.len() - 1) as f64 / (new_len - 1) as f64;
    (0..new_len)
        .map(|j| {
            let t = j as f64 * scale;
            let i = (t.floor() as usize).min(seg.len() - 2);
            let frac = (t - i as f64) as f32;
            seg[i] * (1.0 - frac) + seg[i + 1] * frac
        })
        .collect()
}

/// Split into `r` near-equal segments, stretch a random half of them by
/// `sigma_pct` percent and squeeze the rest by the same factor, then
/// concatenate; a single zero pads an odd total length.
pub fn time_warp(x: &[f32], r: usize, sigma_pct: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if r < 2 || r % 2 != 0 {
        return Err(Error::Config(format!("segment count must be even and >= 2, got {r}")));
    }
    if x.len() < 2 * r {
        return Err(Error::Contract(format!(
            "time_warp needs at least {} samples for {} segments, got {}",
            2 * r,
            r,
            x.len()
        )));
    }
    // Near-equal split: the first (len % r) segments take one extra sample.
    let base = x.len() / r;
    let extra = x.len() % r;
    let mut bounds = Vec::with_capacity(r + 1);
    bounds.push(0usize);
    for i in 0..r {
        let len = base + usize::from(i < extra);
        bounds.push(bounds[i] + len);
    }
    // Choose r/2 segment indices to stretch (partial Fisher-Yates draw).
    let mut order: Vec<usize> = (0..r).collect();
    for i in 0..r / 2 {
        let j = rng.random_range(i..r);
        order.swap(i, j);
    }
    let mut stretch = vec![false; r];
    for &i in order.iter().take(r / 2) {
        stretch[i] = true;
    }
    let mut out = Vec::with_capacity(x.len() + 1);
    for i in 0..r {
        let seg = &x[bounds[i]..bounds[i + 1]];
        let factor = if stretch[i] {
            1.0 + sigma_pct / 100.0
        } else {
            1.0 - sigma_pct / 100.0
        };
        let new_len = ((seg.len() as f64) * factor).round() as usize;
        out.extend(resample_segment(seg, new_len.max(1)));
    }
    if out.len() % 2 == 1 {
        out.push(0.0);
    }
    Ok(out)
}

/// Add white Gaussian noise at an SNR drawn uniformly from `snr_db_range`;
/// the noise std is `std(x) / 10^(SNR/20)`.
pub fn add_gaussian_noise(
    x: &[f32],
    snr_db_range: [f64; 2],
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Contract("noise augmentation of empty input".into()));
    }
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(Error::Contract(
            "SNR undefined for a constant signal".into(),
        ));
    }
    let snr_db = if snr_db_range[0] == snr_db_range[1] {
        snr_db_range[0]
    } else {
        rng.random_range(snr_db_range[0]..snr_db_range[1])
    };
    let noise_std = std / 10f64.powf(snr_db / 20.0);
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0f64, noise_std).expect("noise std finite");
    Ok(x.iter().map(|&v| v + dist.sample(rng) as f32).collect())
}

/// Multiply by a scale factor drawn uniformly from `scale_range`.
pub fn random_scale(x: &[f32], scale_range: [f64; 2], rng: &mut impl Rng) -> Vec<f32> {
    let alpha = if scale_range[0] == scale_range[1] {
        scale_range[0]
    } else {
        rng.random_range(scale_range[0]..scale_range[1])
    } as f32;
    x.iter().map(|&v| v * alpha).collect()
}

/// Crop or zero-pad to exactly `len` samples so batch shapes stay static.
pub fn fit_length(mut x: Vec<f32>, len: usize) -> Vec<f32> {
    x.truncate(len);
    x.resize(len, 0.0);
    x
}

fn apply_one(x: &[f32], which: u32, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<f32>> {
    match which {
        0 => time_warp(x, cfg.segments_r, cfg.warp_sigma_pct, rng),
        1 => add_gaussian_noise(x, cfg.snr_db_range, rng),
        _ => Ok(random_scale(x, cfg.scale_range, rng)),
    }
}

/// Two views of `x` under independently drawn augmentations, each refit to
/// the original length and clamped back to [-1, 1].
pub fn make_view_pair(
    x: &[f32],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Vec<f32>)> {
    cfg.validate()?;
    let t1 = rng.random_range(0..3u32);
    let v1 = apply_one(x, t1, cfg, rng)?;
    let t2 = rng.random_range(0..3u32);
    let v2 = apply_one(x, t2, cfg, rng)?;
    let clamp = |v: Vec<f32>| -> Vec<f32> {
        fit_length(v, x.len())
            .into_iter()
            .map(|s| s.clamp(-1.0, 1.0))
            .collect()
    };
    Ok((clamp(v1), clamp(v2)))
}
