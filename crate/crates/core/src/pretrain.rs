//! Contrastive self-supervised pre-training of the encoder: two augmented
//! views per window, a single-linear projector, and the NT-Xent loss over
//! dot-product similarities, optimized with AdamW under a cosine-warmup
//! schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentConfig};
use crate::encoder::{encode, init_backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamWState, BoundParams, CosineWarmupSchedule, ParameterSet, StepMetric};
use crate::tensor::{Graph, Tensor, VarId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// NT-Xent temperature.
    pub temperature: f32,
    /// Minibatch size M (2M views per step). Desk-scale default; the
    /// original setting was 2048 on multi-GPU hardware.
    pub batch_size: usize,
    /// Desk-scale default; the original setting was 150.
    pub epochs: usize,
    pub base_lr: f32,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    /// Projector output dimension.
    pub proj_dim: usize,
    /// When set, rows are L2-normalized before the dot product (the SimCLR
    /// cosine convention); default follows the raw-dot-product formulation.
    pub cosine_similarity: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            temperature: 0.1,
            batch_size: 64,
            epochs: 30,
            base_lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            proj_dim: 128,
            cosine_similarity: false,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.proj_dim == 0 {
            return Err(Error::Config(
                "batch_size, epochs, and proj_dim must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        self.augment.validate()
    }
}

pub fn init_projector(
    params: &mut ParameterSet,
    dim: usize,
    proj_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert("projector.w", Tensor::randn(vec![dim, proj_dim], 0.02, rng))?;
    params.insert("projector.b", Tensor::zeros(vec![proj_dim]))?;
    Ok(())
}

/// Mean-pool the encoder's output tokens and project: `[1, proj_dim]`.
pub fn embed(
    g: &mut Graph,
    x: VarId,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    train: bool,
    rng: &mut impl Rng,
) -> Result<VarId> {
    let tokens = encode(g, x, bound, "backbone.", cfg, train, rng)?;
    let h = g.mean_rows(tokens)?;
    let w = bound.get("projector.w")?;
    let b = bound.get("projector.b")?;
    let z = g.matmul(h, w)?;
    g.add_bias_rows(z, b)
}

pub struct PretrainOutput {
    pub params: ParameterSet,
    pub curve: Vec<StepMetric>,
}

/// SimCLR pre-training over unlabeled windows. Deterministic for a fixed
/// config (seed included); returns the final weights and the loss curve.
pub fn pretrain(
    windows: &[Vec<f32>],
    encoder_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    encoder_cfg.validate()?;
    if windows.len() < 2 {
        return Err(Error::Contract(format!(
            "pre-training needs at least 2 windows, got {}",
            windows.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParameterSet::new();
    init_backbone(&mut params, "backbone.", encoder_cfg, &mut rng)?;
    init_projector(&mut params, encoder_cfg.transformer.dim, cfg.proj_dim, &mut rng)?;

    let batch = cfg.batch_size.min(windows.len());
    let steps_per_epoch = (windows.len() / batch).max(1) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as u64;
    let schedule = CosineWarmupSchedule::new(cfg.base_lr, warmup, total_steps)?;
    let mut opt = AdamWState::new(cfg.weight_decay);

    let mut curve = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut step: u64 = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 || step >= total_steps {
                continue;
            }
            let m = chunk.len();
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params);
            let mut first_views = Vec::with_capacity(m);
            let mut second_views = Vec::with_capacity(m);
            for &idx in chunk {
                let (v1, v2) = make_view_pair(&windows[idx], &cfg.augment, &mut rng)?;
                first_views.push(v1);
                second_views.push(v2);
            }
            let mut rows = Vec::with_capacity(2 * m);
            for view in first_views.iter().chain(second_views.iter()) {
                let t = Tensor::new(vec![1, view.len()], view.clone())?;
                let x = g.constant(t);
                rows.push(embed(&mut g, x, &bound, encoder_cfg, true, &mut rng)?);
            }
            let z = g.concat_rows(&rows)?;
            let z = if cfg.cosine_similarity {
                g.row_normalize(z)?
            } else {
                z
            };
            let loss = g.ntxent(z, cfg.temperature, m)?;
            let loss_val = g.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pre-training loss became {loss_val} at step {step}"
                )));
            }
            g.backward(loss)?;
            let grads = bound.gradients(&g);
            let lr = schedule.lr_at(step);
            opt.step(&mut params, &grads, lr)?;
            curve.push(StepMetric {
                step,
                lr,
                loss: loss_val,
            });
            step += 1;
        }
    }
    Ok(PretrainOutput { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::small_config;

    fn synthetic_windows(n: usize, len: usize) -> Vec<Vec<f32>> {
        // Deterministic quasi-periodic waves with varying rate and phase.
        (0..n)
            .map(|i| {
                let rate = 0.05 + 0.01 * (i % 10) as f32;
                (0..len)
                    .map(|t| ((t as f32 * rate + i as f32 * 0.3).sin() * 0.8).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect()
    }

    /// Brute-force NT-Xent in f64: explicit double loop over anchors.
    fn ntxent_brute(z: &[Vec<f32>], tau: f64, m: usize) -> f64 {
        let n = 2 * m;
        let sim = |a: &[f32], b: &[f32]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum::<f64>()
        };
        let mut total = 0.0;
        for p in 0..n {
            let q = (p + m) % n;
            let mut denom = 0.0;
            for k in 0..n {
                if k != p {
                    denom += (sim(&z[p], &z[k]) / tau).exp();
                }
            }
            total += -((sim(&z[p], &z[q]) / tau).exp() / denom).ln();
        }
        total / n as f64
    }

    fn random_rows(m: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn ntxent_matches_brute_force_up_to_m16() {
        for (seed, m) in [(1u64, 2usize), (2, 3), (3, 5), (4, 8), (5, 16)] {
            let rows = random_rows(m, 6, seed);
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_rows(&rows).unwrap());
            let loss = g.ntxent(z, 0.5, m).unwrap();
            let brute = ntxent_brute(&rows, 0.5, m);
            assert!(
                (g.value(loss).data()[0] as f64 - brute).abs() < 1e-5,
                "m={m}: {} vs {brute}",
                g.value(loss).data()[0]
            );
        }
    }

    #[test]
    fn ntxent_block_permutation_invariant() {
        let m = 6;
        let rows = random_rows(m, 4, 9);
        let loss_of = |rows: &[Vec<f32>]| {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_rows(rows).unwrap());
            let l = g.ntxent(z, 0.3, m).unwrap();
            g.value(l).data()[0]
        };
        let base = loss_of(&rows);
        // Permute the sample order consistently in both view blocks.
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Vec::with_capacity(2 * m);
        for &i in &perm {
            permuted.push(rows[i].clone());
        }
        for &i in &perm {
            permuted.push(rows[m + i].clone());
        }
        assert!((loss_of(&permuted) - base).abs() < 1e-6);
    }

    #[test]
    fn ntxent_nonnegative() {
        for seed in 0..5 {
            let rows = random_rows(4, 5, 100 + seed);
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_rows(&rows).unwrap());
            let l = g.ntxent(z, 0.5, 4).unwrap();
            assert!(g.value(l).data()[0] >= 0.0);
        }
    }

    #[test]
    fn embed_shape_and_determinism() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParameterSet::new();
        init_backbone(&mut params, "backbone.", &cfg, &mut rng).unwrap();
        init_projector(&mut params, cfg.transformer.dim, 5, &mut rng).unwrap();
        let x0 = Tensor::randn(vec![1, 64], 0.5, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params);
            let x = g.constant(x0.clone());
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let z = embed(&mut g, x, &bound, &cfg, false, &mut r).unwrap();
            g.value(z).data().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 5);
        assert_eq!(a, run());
    }

    #[test]
    fn augmented_views_embed_differently() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        init_backbone(&mut params, "backbone.", &cfg, &mut rng).unwrap();
        init_projector(&mut params, cfg.transformer.dim, 8, &mut rng).unwrap();
        let window = synthetic_windows(1, 64).pop().unwrap();
        let mut distinct = 0;
        for seed in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (v1, v2) = make_view_pair(&window, &AugmentConfig::default(), &mut r).unwrap();
            let embed_of = |v: &[f32]| {
                let mut g = Graph::new();
                let bound = BoundParams::bind(&mut g, &params);
                let x = g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
                let mut r2 = ChaCha8Rng::seed_from_u64(7);
                let z = embed(&mut g, x, &bound, &cfg, false, &mut r2).unwrap();
                g.value(z).data().to_vec()
            };
            if embed_of(&v1) != embed_of(&v2) {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}/100 view pairs embedded identically");
    }

    #[test]
    fn pretrain_loss_decreases_and_is_deterministic() {
        let cfg = small_config();
        let windows = synthetic_windows(256, 64);
        let pcfg = PretrainConfig {
            batch_size: 32,
            epochs: 25, // 8 steps/epoch -> 200 steps
            base_lr: 3e-3,
            proj_dim: 8,
            seed: 42,
            ..PretrainConfig::default()
        };
        let out = pretrain(&windows, &cfg, &pcfg).unwrap();
        assert_eq!(out.curve.len(), 200);
        assert!(out.curve.iter().all(|r| r.loss.is_finite()));
        let head: f32 =
            out.curve[..10].iter().map(|r| r.loss).sum::<f32>() / 10.0;
        let tail: f32 =
            out.curve[out.curve.len() - 10..].iter().map(|r| r.loss).sum::<f32>() / 10.0;
        assert!(
            tail < head,
            "loss did not improve: first-10 mean {head}, last-10 mean {tail}"
        );
        // Bitwise-identical repeat run.
        let again = pretrain(&windows, &cfg, &pcfg).unwrap();
        for (name, p) in out.params.iter() {
            assert_eq!(
                p.tensor.data(),
                again.params.get(name).unwrap().tensor.data(),
                "{name} differs between identically seeded runs"
            );
        }
    }

    #[test]
    fn pretrain_rejects_tiny_corpus() {
        let cfg = small_config();
        assert!(pretrain(&synthetic_windows(1, 64), &cfg, &PretrainConfig::default()).is_err());
    }
}
