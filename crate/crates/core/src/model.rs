//! Adapting the frozen encoder for mood classification: a projected
//! sleep-measure token prepended to the time-series tokens, per-layer
//! learnable prompt tokens, a two-layer GELU classifier head with sigmoid
//! outputs, and BCE training — plus the full-finetune / scratch / unimodal
//! comparison modes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, MoodLabels, NUM_MOOD_LABELS, NUM_SLEEP_MEASURES};
use crate::encoder::{
    conv_projection, init_backbone, positional_encoding, transformer_layer, EncoderConfig,
};
use crate::error::{Error, Result};
use crate::optim::{AdamWState, BoundParams, CosineWarmupSchedule, ParameterSet, StepMetric};
use crate::tensor::{Graph, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Frozen backbone; only prompts + sleep projection + head train.
    Naptune,
    /// Pre-trained init, everything trainable, no prompt parameters.
    FullFinetune,
    /// Random init, everything trainable, prompts per config.
    Scratch,
    /// Frozen backbone, head only; no sleep token, no prompts.
    Unimodal,
}

impl TuneMode {
    pub fn uses_sleep(self) -> bool {
        !matches!(self, TuneMode::Unimodal)
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, TuneMode::Naptune | TuneMode::Scratch)
    }

    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, TuneMode::Scratch)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuneMode::Naptune => "naptune",
            TuneMode::FullFinetune => "full_finetune",
            TuneMode::Scratch => "scratch",
            TuneMode::Unimodal => "unimodal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prepend P_n to the full previous output; the sequence grows by
    /// p tokens at every layer from 2 on.
    #[default]
    Grow,
    /// Discard the previous layer's prompt positions before prepending P_n;
    /// constant length L+1+p from layer 2 on.
    Replace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub mode: TuneMode,
    pub epochs: usize,
    /// Desk-scale runs override this; the original schedule used 1e-5.
    pub base_lr: f32,
    pub batch_size: usize,
    pub prompt_tokens: usize,
    pub prompt_mode: PromptMode,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub head_dropout: f32,
    /// Hidden width of the sleep projection (9 -> hidden -> D).
    pub sleep_hidden: usize,
    /// Exclude prompt positions from the mean-pooled readout.
    pub pool_exclude_prompts: bool,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            mode: TuneMode::Naptune,
            epochs: 30,
            base_lr: 1e-5,
            batch_size: 64,
            prompt_tokens: 4,
            prompt_mode: PromptMode::Grow,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            head_dropout: 0.5,
            sleep_hidden: 128,
            pool_exclude_prompts: false,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config("head_dropout must lie in [0, 1)".into()));
        }
        if self.sleep_hidden == 0 {
            return Err(Error::Config("sleep_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-measure z-score statistics, computed on the training fold only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SleepNormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SleepNormStats {
    pub fn from_records(records: &[&DatasetRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("no records for sleep statistics".into()));
        }
        let n = records.len() as f64;
        let mut mean = vec![0.0f64; NUM_SLEEP_MEASURES];
        for r in records {
            for (m, v) in mean.iter_mut().zip(r.sleep.to_vec()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut std = vec![0.0f64; NUM_SLEEP_MEASURES];
        for r in records {
            for (s, (v, m)) in std.iter_mut().zip(r.sleep.to_vec().iter().zip(&mean)) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt().max(1e-8);
        }
        Ok(SleepNormStats { mean, std })
    }

    pub fn zeros() -> Self {
        SleepNormStats {
            mean: vec![0.0; NUM_SLEEP_MEASURES],
            std: vec![1.0; NUM_SLEEP_MEASURES],
        }
    }

    /// Normalize, forcing masked measures to 0 (= the training mean).
    pub fn normalize(&self, sleep: &[f64; NUM_SLEEP_MEASURES], mask: Option<&[bool; NUM_SLEEP_MEASURES]>) -> [f32; NUM_SLEEP_MEASURES] {
        let mut out = [0.0f32; NUM_SLEEP_MEASURES];
        for i in 0..NUM_SLEEP_MEASURES {
            let masked = mask.map(|m| m[i]).unwrap_or(false);
            if !masked {
                out[i] = ((sleep[i] - self.mean[i]) / self.std[i]) as f32;
            }
        }
        out
    }
}

/// A trained (or freshly initialized) mood classification model.
#[derive(Debug, Clone)]
pub struct MoodModel {
    pub params: ParameterSet,
    pub encoder: EncoderConfig,
    pub mode: TuneMode,
    pub prompt_tokens: usize,
    pub prompt_mode: PromptMode,
    pub pool_exclude_prompts: bool,
    pub head_dropout: f32,
    pub sleep_norm: SleepNormStats,
}

fn init_sleep_projection(
    params: &mut ParameterSet,
    hidden: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(
        "sleep_proj.w1",
        Tensor::randn(vec![NUM_SLEEP_MEASURES, hidden], 0.02, rng),
    )?;
    params.insert("sleep_proj.b1", Tensor::zeros(vec![hidden]))?;
    params.insert("sleep_proj.w2", Tensor::randn(vec![hidden, dim], 0.02, rng))?;
    params.insert("sleep_proj.b2", Tensor::zeros(vec![dim]))?;
    Ok(())
}

fn init_head(params: &mut ParameterSet, dim: usize, rng: &mut impl Rng) -> Result<()> {
    params.insert("head.w1", Tensor::randn(vec![dim, dim], 0.02, rng))?;
    params.insert("head.b1", Tensor::zeros(vec![dim]))?;
    params.insert(
        "head.w2",
        Tensor::randn(vec![dim, NUM_MOOD_LABELS], 0.02, rng),
    )?;
    params.insert("head.b2", Tensor::zeros(vec![NUM_MOOD_LABELS]))?;
    Ok(())
}

fn init_prompts(
    params: &mut ParameterSet,
    layers: usize,
    p_tokens: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    // Prompts exist only for layers >= 2; layer 1 consumes z0 unmodified.
    for layer in 2..=layers {
        params.insert(
            format!("prompts.layer{layer:02}"),
            Tensor::randn(vec![p_tokens, dim], 0.02, rng),
        )?;
    }
    Ok(())
}

/// Apply the per-mode trainability contract.
pub fn freeze_for_mode(params: &mut ParameterSet, mode: TuneMode) {
    params.set_all_frozen(false);
    match mode {
        TuneMode::Naptune | TuneMode::Unimodal => {
            params.set_frozen_by_prefix("backbone.", true);
        }
        TuneMode::FullFinetune | TuneMode::Scratch => {}
    }
}

/// Assemble a model for the given mode. `pretrained_backbone` supplies the
/// frozen (or finetuned) weights for every mode except scratch.
pub fn build_model(
    encoder_cfg: &EncoderConfig,
    cfg: &TuneConfig,
    pretrained_backbone: Option<&ParameterSet>,
    sleep_norm: SleepNormStats,
) -> Result<MoodModel> {
    encoder_cfg.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6f64);
    let mut params = ParameterSet::new();
    match (cfg.mode.needs_checkpoint(), pretrained_backbone) {
        (true, None) => {
            return Err(Error::Contract(format!(
                "mode {} requires a pre-trained checkpoint",
                cfg.mode.as_str()
            )))
        }
        (true, Some(src)) => {
            let mut copied = 0usize;
            for (name, p) in src.iter() {
                if name.starts_with("backbone.") {
                    params.insert(name.clone(), p.tensor.clone())?;
                    copied += 1;
                }
            }
            if copied == 0 {
                return Err(Error::Contract(
                    "checkpoint contains no backbone parameters".into(),
                ));
            }
        }
        (false, _) => {
            init_backbone(&mut params, "backbone.", encoder_cfg, &mut rng)?;
        }
    }
    let dim = encoder_cfg.transformer.dim;
    if cfg.mode.uses_sleep() {
        init_sleep_projection(&mut params, cfg.sleep_hidden, dim, &mut rng)?;
    }
    if cfg.mode.uses_prompts() && cfg.prompt_tokens > 0 {
        init_prompts(
            &mut params,
            encoder_cfg.transformer.layers,
            cfg.prompt_tokens,
            dim,
            &mut rng,
        )?;
    }
    init_head(&mut params, dim, &mut rng)?;
    freeze_for_mode(&mut params, cfg.mode);
    Ok(MoodModel {
        params,
        encoder: encoder_cfg.clone(),
        mode: cfg.mode,
        prompt_tokens: if cfg.mode.uses_prompts() { cfg.prompt_tokens } else { 0 },
        prompt_mode: cfg.prompt_mode,
        pool_exclude_prompts: cfg.pool_exclude_prompts,
        head_dropout: cfg.head_dropout,
        sleep_norm,
    })
}

/// Project nine normalized sleep measures to one D-dimensional token.
pub fn project_sleep(
    g: &mut Graph,
    normalized: &[f32; NUM_SLEEP_MEASURES],
    bound: &BoundParams,
) -> Result<VarId> {
    let s = g.constant(Tensor::new(vec![1, NUM_SLEEP_MEASURES], normalized.to_vec())?);
    let h = g.matmul(s, bound.get("sleep_proj.w1")?)?;
    let h = g.add_bias_rows(h, bound.get("sleep_proj.b1")?)?;
    let h = g.gelu(h);
    let z = g.matmul(h, bound.get("sleep_proj.w2")?)?;
    g.add_bias_rows(z, bound.get("sleep_proj.b2")?)
}

/// Sleep token prepended at position 0, then positional encoding over all
/// L+1 positions.
pub fn assemble_tokens(g: &mut Graph, z_sleep: VarId, z_ts: VarId, dim: usize) -> Result<VarId> {
    if g.value(z_sleep).shape() != [1, dim] {
        return Err(Error::Shape(format!(
            "sleep token must be [1, {dim}], got {:?}",
            g.value(z_sleep).shape()
        )));
    }
    let z0 = g.concat_rows(&[z_sleep, z_ts])?;
    let len = g.value(z0).shape()[0];
    let pe = g.constant(positional_encoding(len, dim)?);
    g.add(z0, pe)
}

/// Run the transformer stack with per-layer prompts. Layer 1 consumes `z0`
/// unmodified; later layers prepend their prompt block. Prompts receive no
/// positional encoding.
pub fn forward_with_prompts(
    g: &mut Graph,
    z0: VarId,
    bound: &BoundParams,
    model: &MoodModel,
    train: bool,
    rng: &mut impl Rng,
) -> Result<VarId> {
    let tcfg = &model.encoder.transformer;
    let p = model.prompt_tokens;
    let mut z = z0;
    for layer in 1..=tcfg.layers {
        if layer >= 2 && p > 0 {
            let prompt = bound.get(&format!("prompts.layer{layer:02}"))?;
            z = match model.prompt_mode {
                PromptMode::Grow => g.concat_rows(&[prompt, z])?,
                PromptMode::Replace => {
                    let keep = if layer >= 3 {
                        let rows = g.value(z).shape()[0];
                        g.slice_rows(z, p, rows)?
                    } else {
                        z
                    };
                    g.concat_rows(&[prompt, keep])?
                }
            };
        }
        z = transformer_layer(g, z, bound, "backbone.", layer, tcfg, train, rng)?;
    }
    Ok(z)
}

/// Number of leading prompt rows in the final token sequence.
fn final_prompt_rows(model: &MoodModel) -> usize {
    if model.prompt_tokens == 0 || model.encoder.transformer.layers < 2 {
        return 0;
    }
    match model.prompt_mode {
        PromptMode::Grow => (model.encoder.transformer.layers - 1) * model.prompt_tokens,
        PromptMode::Replace => model.prompt_tokens,
    }
}

/// Full forward pass to 7 mood probabilities (`[1, 7]` on the graph).
pub fn forward_probs(
    g: &mut Graph,
    bound: &BoundParams,
    model: &MoodModel,
    window_samples: &[f32],
    normalized_sleep: Option<&[f32; NUM_SLEEP_MEASURES]>,
    train: bool,
    rng: &mut impl Rng,
) -> Result<VarId> {
    let x = g.constant(Tensor::new(vec![1, window_samples.len()], window_samples.to_vec())?);
    let ts_tokens = conv_projection(g, x, bound, "backbone.", &model.encoder.conv, train, rng)?;
    let dim = model.encoder.transformer.dim;
    let z0 = match normalized_sleep {
        Some(ns) => {
            let z_sleep = project_sleep(g, ns, bound)?;
            assemble_tokens(g, z_sleep, ts_tokens, dim)?
        }
        None => {
            let l = g.value(ts_tokens).shape()[0];
            let pe = g.constant(positional_encoding(l, dim)?);
            g.add(ts_tokens, pe)?
        }
    };
    let z = forward_with_prompts(g, z0, bound, model, train, rng)?;
    let pooled = if model.pool_exclude_prompts {
        let skip = final_prompt_rows(model);
        let rows = g.value(z).shape()[0];
        let kept = g.slice_rows(z, skip, rows)?;
        g.mean_rows(kept)?
    } else {
        g.mean_rows(z)?
    };
    let h = g.matmul(pooled, bound.get("head.w1")?)?;
    let h = g.add_bias_rows(h, bound.get("head.b1")?)?;
    let h = g.gelu(h);
    let h = g.dropout(h, model.head_dropout, train, rng)?;
    let logits = g.matmul(h, bound.get("head.w2")?)?;
    let logits = g.add_bias_rows(logits, bound.get("head.b2")?)?;
    Ok(g.sigmoid(logits))
}

/// Inference: 7 mood probabilities for one record, optionally masking
/// individual sleep measures (test-time ablation).
pub fn classify(
    model: &MoodModel,
    window_samples: &[f32],
    sleep: Option<&[f64; NUM_SLEEP_MEASURES]>,
    mask: Option<&[bool; NUM_SLEEP_MEASURES]>,
) -> Result<[f32; NUM_MOOD_LABELS]> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params);
    let normalized = match (model.mode.uses_sleep(), sleep) {
        (true, Some(s)) => Some(model.sleep_norm.normalize(s, mask)),
        (true, None) => {
            return Err(Error::Contract(
                "model was trained with sleep input; record lacks sleep measures".into(),
            ))
        }
        (false, _) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval path draws nothing
    let probs = forward_probs(
        &mut g,
        &bound,
        model,
        window_samples,
        normalized.as_ref(),
        false,
        &mut rng,
    )?;
    let data = g.value(probs).data();
    let mut out = [0.0f32; NUM_MOOD_LABELS];
    out.copy_from_slice(data);
    Ok(out)
}

/// Elementwise threshold (>= convention) to binary labels.
pub fn binarize(probs: &[f32; NUM_MOOD_LABELS], threshold: f32) -> MoodLabels {
    let mut out = [0u8; NUM_MOOD_LABELS];
    for (o, &p) in out.iter_mut().zip(probs) {
        *o = u8::from(p >= threshold);
    }
    MoodLabels(out)
}

pub struct TuneOutput {
    pub model: MoodModel,
    pub curve: Vec<StepMetric>,
}

/// Train on labeled records with AdamW + cosine warmup over mean BCE.
/// The backbone stays bitwise untouched in naptune and unimodal modes.
pub fn tune(
    records: &[&DatasetRecord],
    encoder_cfg: &EncoderConfig,
    cfg: &TuneConfig,
    pretrained_backbone: Option<&ParameterSet>,
) -> Result<TuneOutput> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("no training records".into()));
    }
    let sleep_norm = if cfg.mode.uses_sleep() {
        SleepNormStats::from_records(records)?
    } else {
        SleepNormStats::zeros()
    };
    let mut model = build_model(encoder_cfg, cfg, pretrained_backbone, sleep_norm)?;

    let batch = cfg.batch_size.min(records.len());
    let steps_per_epoch = records.len().div_ceil(batch) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as u64;
    let schedule = CosineWarmupSchedule::new(cfg.base_lr, warmup, total_steps)?;
    let mut opt = AdamWState::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut curve = Vec::with_capacity(total_steps as usize);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut step: u64 = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if step >= total_steps {
                break;
            }
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &model.params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let r = records[idx];
                let normalized = model
                    .mode
                    .uses_sleep()
                    .then(|| model.sleep_norm.normalize(&r.sleep.to_vec(), None));
                let probs = forward_probs(
                    &mut g,
                    &bound,
                    &model,
                    &r.window.samples,
                    normalized.as_ref(),
                    true,
                    &mut rng,
                )?;
                losses.push(g.bce_loss(probs, &r.mood.as_f32())?);
            }
            let loss = g.mean_of(&losses)?;
            let loss_val = g.value(loss).data()[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss_val} at step {step} (mode {})",
                    cfg.mode.as_str()
                )));
            }
            g.backward(loss)?;
            let grads = bound.gradients(&g);
            let lr = schedule.lr_at(step);
            opt.step(&mut model.params, &grads, lr)?;
            curve.push(StepMetric {
                step,
                lr,
                loss: loss_val,
            });
            step += 1;
        }
    }
    Ok(TuneOutput { model, curve })
}

// ── checkpoint integration ───────────────────────────────────────────

/// Serialize a trained model in the shared checkpoint format, with mode,
/// prompt settings, and sleep normalization in the manifest extras.
pub fn save_model(dir: &std::path::Path, model: &MoodModel, config_snapshot: serde_json::Value) -> Result<()> {
    let mut extra = serde_json::Map::new();
    extra.insert("mode".into(), serde_json::json!(model.mode));
    extra.insert("prompt_tokens".into(), serde_json::json!(model.prompt_tokens));
    extra.insert("prompt_mode".into(), serde_json::json!(model.prompt_mode));
    extra.insert(
        "pool_exclude_prompts".into(),
        serde_json::json!(model.pool_exclude_prompts),
    );
    extra.insert("head_dropout".into(), serde_json::json!(model.head_dropout));
    extra.insert("sleep_norm".into(), serde_json::json!(model.sleep_norm));
    extra.insert(
        "encoder_config".into(),
        serde_json::to_value(&model.encoder).map_err(|e| Error::Config(e.to_string()))?,
    );
    crate::checkpoint::save(dir, &model.params, config_snapshot, extra)
}

pub fn load_model(dir: &std::path::Path) -> Result<MoodModel> {
    let (params, manifest) = crate::checkpoint::load(dir)?;
    let field = |key: &str| -> Result<&serde_json::Value> {
        manifest
            .extra
            .get(key)
            .ok_or_else(|| Error::format(dir, format!("manifest missing extra field {key}")))
    };
    let mode: TuneMode = serde_json::from_value(field("mode")?.clone())
        .map_err(|e| Error::format(dir, e.to_string()))?;
    let encoder: EncoderConfig = serde_json::from_value(field("encoder_config")?.clone())
        .map_err(|e| Error::format(dir, e.to_string()))?;
    let sleep_norm: SleepNormStats = serde_json::from_value(field("sleep_norm")?.clone())
        .map_err(|e| Error::format(dir, e.to_string()))?;
    let prompt_mode: PromptMode = serde_json::from_value(field("prompt_mode")?.clone())
        .map_err(|e| Error::format(dir, e.to_string()))?;
    let model = MoodModel {
        params,
        encoder,
        mode,
        prompt_tokens: field("prompt_tokens")?.as_u64().unwrap_or(0) as usize,
        prompt_mode,
        pool_exclude_prompts: field("pool_exclude_prompts")?.as_bool().unwrap_or(false),
        head_dropout: field("head_dropout")?.as_f64().unwrap_or(0.5) as f32,
        sleep_norm,
    };
    freeze_check(&model)?;
    Ok(model)
}

fn freeze_check(model: &MoodModel) -> Result<()> {
    let backbone_frozen = matches!(model.mode, TuneMode::Naptune | TuneMode::Unimodal);
    for (name, p) in model.params.iter() {
        if name.starts_with("backbone.") && p.frozen != backbone_frozen {
            return Err(Error::Contract(format!(
                "parameter {name} freeze flag inconsistent with mode {}",
                model.mode.as_str()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::test_sleep;
    use crate::encoder::small_config;
    use crate::signal::{Modality, TimeSeriesWindow};

    fn record(subject: &str, idx: usize, label_bit: u8) -> DatasetRecord {
        let n = 64;
        let window = TimeSeriesWindow {
            subject_id: subject.into(),
            modality: Modality::Ppg,
            sampling_rate_hz: n as f64 / 10.0,
            samples: (0..n)
                .map(|i| ((i + idx * 13) as f32 * (0.2 + 0.03 * label_bit as f32)).sin())
                .collect(),
            window_index: idx,
        };
        DatasetRecord {
            window,
            sleep: test_sleep(),
            mood: MoodLabels([label_bit, 1 - label_bit, 0, 1, 0, 1, label_bit]),
        }
    }

    fn tiny_cfg(mode: TuneMode) -> TuneConfig {
        TuneConfig {
            mode,
            epochs: 2,
            base_lr: 1e-3,
            batch_size: 4,
            prompt_tokens: 2,
            head_dropout: 0.0,
            sleep_hidden: 6,
            seed: 5,
            ..TuneConfig::default()
        }
    }

    fn pretrained() -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut ps = ParameterSet::new();
        init_backbone(&mut ps, "backbone.", &small_config(), &mut rng).unwrap();
        ps
    }

    #[test]
    fn naptune_trainable_count_matches_closed_form_at_defaults() {
        // Default dims: 5 prompt layers x 4 x 512 + sleep (9->128->512)
        // + head (512->512->7) = 343,815 trainable parameters.
        let cfg = TuneConfig::default();
        let enc = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut backbone = ParameterSet::new();
        init_backbone(&mut backbone, "backbone.", &enc, &mut rng).unwrap();
        let model = build_model(&enc, &cfg, Some(&backbone), SleepNormStats::zeros()).unwrap();
        assert_eq!(model.params.trainable_elements(), 343_815);
        let frac = model.params.trainable_elements() as f64 / model.params.total_elements() as f64;
        assert!(frac < 0.05, "trainable fraction {frac}");
    }

    #[test]
    fn sequence_length_algebra_grow_and_replace() {
        // Length bookkeeping for (L, p, N) sweeps, via actual forwards.
        let enc = small_config(); // N = 1 is too small for prompts; bump layers
        let mut enc3 = enc.clone();
        enc3.transformer.layers = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut backbone = ParameterSet::new();
        init_backbone(&mut backbone, "backbone.", &enc3, &mut rng).unwrap();
        for (p, mode, expect_extra) in [
            (2usize, PromptMode::Grow, 2 * 2),
            (2, PromptMode::Replace, 2),
            (0, PromptMode::Grow, 0),
        ] {
            let cfg = TuneConfig {
                prompt_tokens: p,
                prompt_mode: mode,
                ..tiny_cfg(TuneMode::Naptune)
            };
            let model =
                build_model(&enc3, &cfg, Some(&backbone), SleepNormStats::zeros()).unwrap();
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &model.params);
            let r = record("s", 0, 1);
            let ns = model.sleep_norm.normalize(&r.sleep.to_vec(), None);
            let x = g
                .constant(Tensor::new(vec![1, 64], r.window.samples.clone()).unwrap());
            let ts = conv_projection(&mut g, x, &bound, "backbone.", &enc3.conv, false, &mut rng)
                .unwrap();
            let l = g.value(ts).shape()[0];
            let sleep_tok = project_sleep(&mut g, &ns, &bound).unwrap();
            let z0 = assemble_tokens(&mut g, sleep_tok, ts, enc3.transformer.dim).unwrap();
            assert_eq!(g.value(z0).shape()[0], l + 1);
            let z = forward_with_prompts(&mut g, z0, &bound, &model, false, &mut rng).unwrap();
            assert_eq!(g.value(z).shape()[0], l + 1 + expect_extra);
        }
    }

    #[test]
    fn classify_outputs_probabilities() {
        let enc = small_config();
        let cfg = tiny_cfg(TuneMode::Naptune);
        let model =
            build_model(&enc, &cfg, Some(&pretrained()), SleepNormStats::zeros()).unwrap();
        let r = record("s", 1, 0);
        let probs = classify(
            &model,
            &r.window.samples,
            Some(&r.sleep.to_vec()),
            None,
        )
        .unwrap();
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // Deterministic in eval mode.
        let again = classify(&model, &r.window.samples, Some(&r.sleep.to_vec()), None).unwrap();
        assert_eq!(probs, again);
    }

    #[test]
    fn zero_head_gives_half_probabilities() {
        let enc = small_config();
        let cfg = tiny_cfg(TuneMode::Unimodal);
        let mut model =
            build_model(&enc, &cfg, Some(&pretrained()), SleepNormStats::zeros()).unwrap();
        for name in ["head.w1", "head.b1", "head.w2", "head.b2"] {
            model.params.get_mut(name).unwrap().tensor.data_mut().fill(0.0);
        }
        let r = record("s", 2, 1);
        let probs = classify(&model, &r.window.samples, None, None).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn prompt_ablation_reduces_to_unimodal_path() {
        // p = 0 and no sleep token: bitwise identical to the unimodal path.
        let enc = small_config();
        let backbone = pretrained();
        let uni = build_model(
            &enc,
            &tiny_cfg(TuneMode::Unimodal),
            Some(&backbone),
            SleepNormStats::zeros(),
        )
        .unwrap();
        let mut napt_cfg = tiny_cfg(TuneMode::Naptune);
        napt_cfg.prompt_tokens = 0;
        let napt =
            build_model(&enc, &napt_cfg, Some(&backbone), SleepNormStats::zeros()).unwrap();
        // Align head weights so both models share every live parameter.
        let mut napt = napt;
        for name in ["head.w1", "head.b1", "head.w2", "head.b2"] {
            let src = uni.params.get(name).unwrap().tensor.clone();
            napt.params.get_mut(name).unwrap().tensor = src;
        }
        let r = record("s", 3, 0);
        let a = classify(&uni, &r.window.samples, None, None).unwrap();
        // Classify through the naptune model while withholding sleep: same path.
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &napt.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs =
            forward_probs(&mut g, &bound, &napt, &r.window.samples, None, false, &mut rng)
                .unwrap();
        let b: Vec<f32> = g.value(probs).data().to_vec();
        assert_eq!(a.to_vec(), b);
    }

    #[test]
    fn masking_changes_projection_input() {
        let stats = SleepNormStats {
            mean: vec![1.0; NUM_SLEEP_MEASURES],
            std: vec![2.0; NUM_SLEEP_MEASURES],
        };
        let sleep = [3.0f64; NUM_SLEEP_MEASURES];
        let plain = stats.normalize(&sleep, None);
        assert!(plain.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let mut mask = [false; NUM_SLEEP_MEASURES];
        mask[4] = true;
        let masked = stats.normalize(&sleep, Some(&mask));
        assert_eq!(masked[4], 0.0);
        assert!((masked[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tune_learns_and_freezes_backbone() {
        let enc = small_config();
        let backbone = pretrained();
        let records: Vec<DatasetRecord> = (0..16)
            .map(|i| record(&format!("s{}", i % 4), i, (i % 2) as u8))
            .collect();
        let refs: Vec<&DatasetRecord> = records.iter().collect();
        let cfg = TuneConfig {
            epochs: 6,
            base_lr: 3e-3,
            ..tiny_cfg(TuneMode::Naptune)
        };
        let out = tune(&refs, &enc, &cfg, Some(&backbone)).unwrap();
        let first = out.curve.first().unwrap().loss;
        let last = out.curve.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
        // Backbone bitwise identical to the pre-trained input.
        for (name, p) in out.model.params.iter() {
            if name.starts_with("backbone.") {
                assert_eq!(
                    p.tensor.data(),
                    backbone.get(name).unwrap().tensor.data(),
                    "{name} drifted"
                );
                assert!(p.frozen);
            }
        }
    }

    #[test]
    fn tune_is_seed_deterministic() {
        let enc = small_config();
        let backbone = pretrained();
        let records: Vec<DatasetRecord> =
            (0..8).map(|i| record("s0", i, (i % 2) as u8)).collect();
        let refs: Vec<&DatasetRecord> = records.iter().collect();
        let cfg = tiny_cfg(TuneMode::Naptune);
        let a = tune(&refs, &enc, &cfg, Some(&backbone)).unwrap();
        let b = tune(&refs, &enc, &cfg, Some(&backbone)).unwrap();
        for (name, p) in a.model.params.iter() {
            assert_eq!(
                p.tensor.data(),
                b.model.params.get(name).unwrap().tensor.data(),
                "{name} differs across identically seeded runs"
            );
        }
    }

    #[test]
    fn scratch_needs_no_checkpoint_but_others_do() {
        let enc = small_config();
        let records: Vec<DatasetRecord> = (0..4).map(|i| record("s0", i, 1)).collect();
        let refs: Vec<&DatasetRecord> = records.iter().collect();
        assert!(tune(&refs, &enc, &tiny_cfg(TuneMode::Naptune), None).is_err());
        assert!(tune(&refs, &enc, &tiny_cfg(TuneMode::FullFinetune), None).is_err());
        let out = tune(&refs, &enc, &tiny_cfg(TuneMode::Scratch), None).unwrap();
        assert_eq!(out.model.params.trainable_elements(), out.model.params.total_elements());
    }

    #[test]
    fn binarize_conventions() {
        let probs = [0.5f32, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        assert_eq!(binarize(&probs, 0.5).0, [1u8; 7]);
        let probs = [0.0f32, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(binarize(&probs, 0.5).0, [0, 1, 0, 1, 0, 1, 0]);
        assert_eq!(binarize(&probs, 1.01).0, [0u8; 7]);
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = small_config();
        let cfg = tiny_cfg(TuneMode::Naptune);
        let model =
            build_model(&enc, &cfg, Some(&pretrained()), SleepNormStats::zeros()).unwrap();
        save_model(dir.path(), &model, serde_json::json!({"tune": "test"})).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.mode, TuneMode::Naptune);
        assert_eq!(loaded.prompt_tokens, 2);
        let r = record("s", 4, 1);
        let a = classify(&model, &r.window.samples, Some(&r.sleep.to_vec()), None).unwrap();
        let b = classify(&loaded, &r.window.samples, Some(&r.sleep.to_vec()), None).unwrap();
        assert_eq!(a, b);
    }
}
