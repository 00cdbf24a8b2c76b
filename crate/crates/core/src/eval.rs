//! Cross-subject k-fold evaluation harness: fold assignment, per-fold
//! training and scoring, test-time sleep-measure ablation, and
//! training-data-fraction sweeps. Folds run in parallel with derived
//! seeds; reports merge in fold order, so results are reproducible.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetRecord, MoodLabels, NUM_SLEEP_MEASURES};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{binarize, classify, tune, MoodModel, TuneConfig};
use crate::optim::ParameterSet;

/// Subject -> fold index; folds partition subjects with sizes within one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub assignment: BTreeMap<String, usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn subjects_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Seeded shuffle then round-robin assignment.
pub fn make_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Config("fold count must be >= 1".into()));
    }
    if subject_ids.len() < k {
        return Err(Error::Contract(format!(
            "{} subjects cannot fill {} folds",
            subject_ids.len(),
            k
        )));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldAssignment {
        assignment,
        k,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValReport {
    pub mode: String,
    pub folds: Vec<FoldReport>,
    pub aggregate: MetricsReport,
}

/// One trained fold with everything needed for further analysis.
pub struct FoldOutcome {
    pub fold: usize,
    pub model: MoodModel,
    pub n_train: usize,
    pub test_indices: Vec<usize>,
    pub metrics: MetricsReport,
}

fn seed_for_fold(base: u64, fold: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

/// Predict labels for a set of records (threshold 0.5), optionally with a
/// sleep-measure mask applied at test time.
pub fn predict(
    model: &MoodModel,
    records: &[&DatasetRecord],
    mask: Option<&[bool; NUM_SLEEP_MEASURES]>,
) -> Result<Vec<MoodLabels>> {
    records
        .iter()
        .map(|r| {
            let probs = classify(
                model,
                &r.window.samples,
                model.mode.uses_sleep().then(|| r.sleep.to_vec()).as_ref(),
                mask,
            )?;
            Ok(binarize(&probs, 0.5))
        })
        .collect()
}

/// Train and evaluate every fold (in parallel), each with a derived seed.
/// `fraction` subsamples training records within subjects first (whole
/// subjects are never dropped while their share rounds to >= 1 record).
pub fn run_folds(
    dataset: &Dataset,
    folds: &FoldAssignment,
    encoder_cfg: &EncoderConfig,
    tune_cfg: &TuneConfig,
    backbone: Option<&ParameterSet>,
    fraction: f64,
) -> Result<Vec<FoldOutcome>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Config(format!(
            "training fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let outcomes: Result<Vec<FoldOutcome>> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let mut train_indices: Vec<usize> = Vec::new();
            let mut test_indices: Vec<usize> = Vec::new();
            for (i, r) in dataset.records.iter().enumerate() {
                match folds.assignment.get(&r.window.subject_id) {
                    Some(&f) if f == fold => test_indices.push(i),
                    Some(_) => train_indices.push(i),
                    None => {
                        return Err(Error::Contract(format!(
                            "subject {} missing from fold assignment",
                            r.window.subject_id
                        )))
                    }
                }
            }
            if train_indices.is_empty() || test_indices.is_empty() {
                return Err(Error::Contract(format!(
                    "fold {fold} leaves an empty train or test split"
                )));
            }
            let fold_seed = seed_for_fold(tune_cfg.seed, fold);
            let train_indices = if fraction < 1.0 {
                subsample_within_subjects(dataset, &train_indices, fraction, fold_seed)
            } else {
                train_indices
            };
            let train: Vec<&DatasetRecord> =
                train_indices.iter().map(|&i| &dataset.records[i]).collect();
            let test: Vec<&DatasetRecord> =
                test_indices.iter().map(|&i| &dataset.records[i]).collect();
            let cfg = TuneConfig {
                seed: fold_seed,
                ..tune_cfg.clone()
            };
            let out = tune(&train, encoder_cfg, &cfg, backbone)?;
            let y_pred = predict(&out.model, &test, None)?;
            let y_true: Vec<MoodLabels> = test.iter().map(|r| r.mood).collect();
            let report = metrics::report(&y_true, &y_pred)?;
            Ok(FoldOutcome {
                fold,
                model: out.model,
                n_train: train.len(),
                test_indices,
                metrics: report,
            })
        })
        .collect();
    let mut outcomes = outcomes?;
    outcomes.sort_by_key(|o| o.fold);
    Ok(outcomes)
}

/// Per-subject record subsampling: each subject keeps
/// `max(1, round(fraction * n_subject))` of its training records.
fn subsample_within_subjects(
    dataset: &Dataset,
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_subject
            .entry(dataset.records[i].window.subject_id.as_str())
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fraction.to_bits());
    let mut kept = Vec::new();
    for (_, mut subject_indices) in by_subject {
        let n = subject_indices.len();
        let keep = ((fraction * n as f64).round() as usize).clamp(1, n);
        subject_indices.shuffle(&mut rng);
        subject_indices.truncate(keep);
        kept.extend(subject_indices);
    }
    kept.sort_unstable();
    kept
}

#[allow(non_snake_case)]
fn _5f5f_frac_bits(f: f64) -> u64 {
    f.to_bits()
}

fn x5f5f_frac_bits(f: f64) -> u64 {
    f.to_bits()
}

/// Cross-subject k-fold cross-validation; aggregate is the unweighted mean
/// over folds.
pub fn cross_validate(
    dataset: &Dataset,
    folds: &FoldAssignment,
    encoder_cfg: &EncoderConfig,
    tune_cfg: &TuneConfig,
    backbone: Option<&ParameterSet>,
) -> Result<CrossValReport> {
    let outcomes = run_folds(dataset, folds, encoder_cfg, tune_cfg, backbone, 1.0)?;
    report_from_outcomes(tune_cfg, outcomes)
}

pub fn report_from_outcomes(
    tune_cfg: &TuneConfig,
    outcomes: Vec<FoldOutcome>,
) -> Result<CrossValReport> {
    let fold_reports: Vec<FoldReport> = outcomes
        .iter()
        .map(|o| FoldReport {
            fold: o.fold,
            n_train: o.n_train,
            n_test: o.test_indices.len(),
            metrics: o.metrics.clone(),
        })
        .collect();
    let aggregate = metrics::mean_reports(
        &fold_reports
            .iter()
            .map(|f| f.metrics.clone())
            .collect::<Vec<_>>(),
    )?;
    Ok(CrossValReport {
        mode: tune_cfg.mode.as_str().to_string(),
        folds: fold_reports,
        aggregate,
    })
}

/// Metrics on `test` with measure `measure_idx` masked at test time; the
/// model is read-only throughout.
pub fn ablate_sleep_measure(
    model: &MoodModel,
    test: &[&DatasetRecord],
    measure_idx: usize,
) -> Result<MetricsReport> {
    if measure_idx >= NUM_SLEEP_MEASURES {
        return Err(Error::Config(format!(
            "sleep measure index {measure_idx} outside 0..{NUM_SLEEP_MEASURES}"
        )));
    }
    let mut mask = [false; NUM_SLEEP_MEASURES];
    mask[measure_idx] = true;
    let y_pred = predict(model, test, Some(&mask))?;
    let y_true: Vec<MoodLabels> = test.iter().map(|r| r.mood).collect();
    metrics::report(&y_true, &y_pred)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: MetricsReport,
    /// One report per masked measure, in measure order (9 entries).
    pub masked: Vec<MetricsReport>,
    pub measure_names: Vec<String>,
}

/// Mask each of the nine measures across all trained folds and aggregate.
pub fn ablation_report(dataset: &Dataset, outcomes: &[FoldOutcome]) -> Result<AblationReport> {
    let baseline = metrics::mean_reports(
        &outcomes.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>(),
    )?;
    let mut masked = Vec::with_capacity(NUM_SLEEP_MEASURES);
    for m in 0..NUM_SLEEP_MEASURES {
        let per_fold: Result<Vec<MetricsReport>> = outcomes
            .par_iter()
            .map(|o| {
                let test: Vec<&DatasetRecord> =
                    o.test_indices.iter().map(|&i| &dataset.records[i]).collect();
                ablate_sleep_measure(&o.model, &test, m)
            })
            .collect();
        masked.push(metrics::mean_reports(&per_fold?)?);
    }
    Ok(AblationReport {
        baseline,
        masked,
        measure_names: crate::dataset::SLEEP_MEASURE_NAMES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub mode: String,
    pub seed: u64,
    pub aggregate: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// Training-fraction sweep: per (fraction, mode, seed), run the full CV
/// with the per-fold training split subsampled within subjects.
#[allow(clippy::too_many_arguments)]
pub fn data_fraction_sweep(
    dataset: &Dataset,
    folds_seed: u64,
    k: usize,
    fractions: &[f64],
    modes: &[TuneConfig],
    seeds: &[u64],
    encoder_cfg: &EncoderConfig,
    backbone: Option<&ParameterSet>,
) -> Result<SweepReport> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) || f == 0.0 {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
    }
    let folds = make_folds(dataset.subjects(), k, folds_seed)?;
    let mut cells = Vec::new();
    for &fraction in fractions {
        for mode_cfg in modes {
            for &seed in seeds {
                let cfg = TuneConfig {
                    seed,
                    ..mode_cfg.clone()
                };
                let outcomes =
                    run_folds(dataset, &folds, encoder_cfg, &cfg, backbone, fraction)?;
                let aggregate = metrics::mean_reports(
                    &outcomes.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>(),
                )?;
                cells.push(SweepCell {
                    fraction,
                    mode: cfg.mode.as_str().to_string(),
                    seed,
                    aggregate,
                });
            }
        }
    }
    Ok(SweepReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{manifest_for, test_sleep};
    use crate::encoder::{init_backbone, small_config};
    use crate::model::TuneMode;
    use crate::signal::{Modality, TimeSeriesWindow};

    fn toy_dataset(n_subjects: usize, per_subject: usize) -> Dataset {
        let mut records = Vec::new();
        let mut subjects = Vec::new();
        for s in 0..n_subjects {
            let sid = format!("s{s:02}");
            subjects.push(sid.clone());
            for i in 0..per_subject {
                let bit = (s % 2) as u8;
                records.push(DatasetRecord {
                    window: TimeSeriesWindow {
                        subject_id: sid.clone(),
                        modality: Modality::Ppg,
                        sampling_rate_hz: 6.4,
                        samples: (0..64)
                            .map(|t| {
                                ((t + i) as f32 * (0.15 + 0.1 * bit as f32)).sin() * 0.9
                            })
                            .collect(),
                        window_index: i,
                    },
                    sleep: test_sleep(),
                    mood: MoodLabels([bit, 1 - bit, 0, 1, 0, 0, bit]),
                });
            }
        }
        Dataset {
            manifest: manifest_for(Modality::Ppg, subjects),
            records,
        }
    }

    #[test]
    fn folds_balance_and_determinism() {
        let subjects: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
        let f = make_folds(&subjects, 3, 7).unwrap();
        let sizes: Vec<usize> = (0..3).map(|k| f.subjects_in(k).len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);

        let subjects10: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let f10 = make_folds(&subjects10, 3, 7).unwrap();
        let mut sizes10: Vec<usize> = (0..3).map(|k| f10.subjects_in(k).len()).collect();
        sizes10.sort_unstable();
        assert_eq!(sizes10, vec![3, 3, 4]);

        let again = make_folds(&subjects, 3, 7).unwrap();
        assert_eq!(f.assignment, again.assignment);
        let other = make_folds(&subjects, 3, 8).unwrap();
        assert_ne!(f.assignment, other.assignment);
    }

    #[test]
    fn too_few_subjects_is_error() {
        let subjects: Vec<String> = vec!["a".into(), "b".into()];
        assert!(make_folds(&subjects, 3, 0).is_err());
    }

    #[test]
    fn cross_validation_partitions_subjects() {
        let ds = toy_dataset(6, 4);
        let folds = make_folds(ds.subjects(), 3, 1).unwrap();
        // Partition: every subject in exactly one fold.
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..3 {
            for s in folds.subjects_in(k) {
                assert!(seen.insert(s.to_string()), "{s} in two folds");
            }
        }
        assert_eq!(seen.len(), 6);

        let enc = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut backbone = ParameterSet::new();
        init_backbone(&mut backbone, "backbone.", &enc, &mut rng).unwrap();
        let cfg = TuneConfig {
            mode: TuneMode::Unimodal,
            epochs: 1,
            base_lr: 1e-3,
            batch_size: 8,
            head_dropout: 0.0,
            seed: 5,
            ..TuneConfig::default()
        };
        let report = cross_validate(&ds, &folds, &enc, &cfg, Some(&backbone)).unwrap();
        assert_eq!(report.folds.len(), 3);
        // Aggregate equals the mean of fold metrics.
        let mean_f1: f64 =
            report.folds.iter().map(|f| f.metrics.weighted_f1).sum::<f64>() / 3.0;
        assert!((report.aggregate.weighted_f1 - mean_f1).abs() < 1e-9);
        // Deterministic re-run.
        let again = cross_validate(&ds, &folds, &enc, &cfg, Some(&backbone)).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn ablation_leaves_model_untouched() {
        let ds = toy_dataset(3, 3);
        let folds = make_folds(ds.subjects(), 3, 2).unwrap();
        let enc = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut backbone = ParameterSet::new();
        init_backbone(&mut backbone, "backbone.", &enc, &mut rng).unwrap();
        let cfg = TuneConfig {
            mode: TuneMode::Naptune,
            epochs: 1,
            base_lr: 1e-3,
            batch_size: 8,
            prompt_tokens: 2,
            sleep_hidden: 6,
            head_dropout: 0.0,
            seed: 6,
            ..TuneConfig::default()
        };
        let outcomes = run_folds(&ds, &folds, &enc, &cfg, Some(&backbone), 1.0).unwrap();
        let o = &outcomes[0];
        let before: Vec<Vec<f32>> = o
            .model
            .params
            .iter()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect();
        let test: Vec<&DatasetRecord> =
            o.test_indices.iter().map(|&i| &ds.records[i]).collect();
        let _ = ablate_sleep_measure(&o.model, &test, 4).unwrap();
        let after: Vec<Vec<f32>> = o
            .model
            .params
            .iter()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
        assert!(ablate_sleep_measure(&o.model, &test, 9).is_err());
    }

    #[test]
    fn subsample_sizes_round_within_one() {
        let ds = toy_dataset(4, 10);
        let indices: Vec<usize> = (0..ds.records.len()).collect();
        for fraction in [0.25, 0.5, 0.75] {
            let kept = subsample_within_subjects(&ds, &indices, fraction, 9);
            let mut per_subject: BTreeMap<&str, usize> = BTreeMap::new();
            for &i in &kept {
                *per_subject
                    .entry(ds.records[i].window.subject_id.as_str())
                    .or_default() += 1;
            }
            assert_eq!(per_subject.len(), 4, "no subject dropped");
            for (_, &n) in &per_subject {
                let expect = (fraction * 10.0).round();
                assert!((n as f64 - expect).abs() <= 1.0, "kept {n} at {fraction}");
            }
        }
        // Fraction 1.0 keeps everything.
        let all = subsample_within_subjects(&ds, &indices, 1.0, 9);
        assert_eq!(all.len(), indices.len());
    }

    #[test]
    fn fraction_one_matches_plain_cross_validation() {
        let ds = toy_dataset(3, 4);
        let folds = make_folds(ds.subjects(), 3, 5).unwrap();
        let enc = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut backbone = ParameterSet::new();
        init_backbone(&mut backbone, "backbone.", &enc, &mut rng).unwrap();
        let cfg = TuneConfig {
            mode: TuneMode::Unimodal,
            epochs: 1,
            base_lr: 1e-3,
            batch_size: 8,
            head_dropout: 0.0,
            seed: 7,
            ..TuneConfig::default()
        };
        let plain = cross_validate(&ds, &folds, &enc, &cfg, Some(&backbone)).unwrap();
        let sweep = data_fraction_sweep(
            &ds,
            5,
            3,
            &[1.0],
            std::slice::from_ref(&cfg),
            &[cfg.seed],
            &enc,
            Some(&backbone),
        )
        .unwrap();
        assert_eq!(sweep.cells.len(), 1);
        assert!(
            (sweep.cells[0].aggregate.weighted_f1 - plain.aggregate.weighted_f1).abs() < 1e-12
        );
    }
}
