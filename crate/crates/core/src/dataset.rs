//! Labeled dataset and its on-disk format: a directory with `manifest.json`
//! plus one JSON-lines file per subject, each line carrying a preprocessed
//! window, the subject-night's nine sleep measures, and seven binary mood
//! labels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Modality, TimeSeriesWindow};

pub const NUM_SLEEP_MEASURES: usize = 9;
pub const NUM_MOOD_LABELS: usize = 7;

pub const SLEEP_MEASURE_NAMES: [&str; NUM_SLEEP_MEASURES] = [
    "time_in_bed_h",
    "sleep_duration_h",
    "deep_sleep_h",
    "light_sleep_h",
    "rem_sleep_h",
    "wake_time_h",
    "deep_sleep_onset_h",
    "sleep_efficiency",
    "apnea_index",
];

pub const MOOD_LABEL_NAMES: [&str; NUM_MOOD_LABELS] = [
    "tension",
    "anger",
    "fatigue",
    "depression",
    "vigor",
    "confusion",
    "esteem",
];

/// Index of REM sleep duration within the measure vector.
pub const REM_MEASURE_INDEX: usize = 4;

/// The previous night's sleep summary for one subject-night.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SleepMeasures {
    pub time_in_bed_h: f64,
    pub sleep_duration_h: f64,
    pub deep_sleep_h: f64,
    pub light_sleep_h: f64,
    pub rem_sleep_h: f64,
    pub wake_time_h: f64,
    pub deep_sleep_onset_h: f64,
    pub sleep_efficiency: f64,
    pub apnea_index: f64,
}

impl SleepMeasures {
    pub fn to_vec(&self) -> [f64; NUM_SLEEP_MEASURES] {
        [
            self.time_in_bed_h,
            self.sleep_duration_h,
            self.deep_sleep_h,
            self.light_sleep_h,
            self.rem_sleep_h,
            self.wake_time_h,
            self.deep_sleep_onset_h,
            self.sleep_efficiency,
            self.apnea_index,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.to_vec();
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Contract(
                "sleep measures must be finite and non-negative".into(),
            ));
        }
        if self.sleep_duration_h > self.time_in_bed_h + 1e-9 {
            return Err(Error::Contract(format!(
                "sleep duration {} exceeds time in bed {}",
                self.sleep_duration_h, self.time_in_bed_h
            )));
        }
        if self.time_in_bed_h > 0.0 {
            let ratio = self.sleep_duration_h / self.time_in_bed_h;
            if (ratio - self.sleep_efficiency).abs() > 0.05 {
                return Err(Error::Contract(format!(
                    "sleep efficiency {} inconsistent with duration/time-in-bed {}",
                    self.sleep_efficiency, ratio
                )));
            }
        }
        let stages = self.deep_sleep_h + self.light_sleep_h + self.rem_sleep_h;
        if stages > self.sleep_duration_h + 0.25 {
            return Err(Error::Contract(format!(
                "stage durations sum to {stages}, above sleep duration {} + 0.25",
                self.sleep_duration_h
            )));
        }
        if !(0.0..=1.0).contains(&self.sleep_efficiency) {
            return Err(Error::Contract(format!(
                "sleep efficiency {} outside [0, 1]",
                self.sleep_efficiency
            )));
        }
        Ok(())
    }
}

/// Seven binary mood labels, ordered
/// [tension, anger, fatigue, depression, vigor, confusion, esteem].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoodLabels(pub [u8; NUM_MOOD_LABELS]);

impl MoodLabels {
    pub fn from_slice(v: &[u8]) -> Result<Self> {
        if v.len() != NUM_MOOD_LABELS {
            return Err(Error::Contract(format!(
                "expected {} mood labels, got {}",
                NUM_MOOD_LABELS,
                v.len()
            )));
        }
        if v.iter().any(|&b| b > 1) {
            return Err(Error::Contract("mood labels must be 0 or 1".into()));
        }
        let mut arr = [0u8; NUM_MOOD_LABELS];
        arr.copy_from_slice(v);
        Ok(MoodLabels(arr))
    }

    pub fn as_f32(&self) -> [f32; NUM_MOOD_LABELS] {
        let mut out = [0.0f32; NUM_MOOD_LABELS];
        for (o, &b) in out.iter_mut().zip(&self.0) {
            *o = b as f32;
        }
        out
    }
}

/// One labeled example: a window plus its night's sleep and mood.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub window: TimeSeriesWindow,
    pub sleep: SleepMeasures,
    pub mood: MoodLabels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<String>,
    pub modality: Modality,
    pub window_fs: f64,
    pub window_samples: usize,
    pub label_names: Vec<String>,
    pub sleep_measure_names: Vec<String>,
}

/// In-memory dataset; records are grouped per subject in file order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<DatasetRecord>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    subject_id: String,
    modality: Modality,
    fs: f64,
    samples: Vec<f32>,
    sleep: SleepMeasures,
    mood: Vec<u8>,
}

impl Dataset {
    pub fn subjects(&self) -> &[String] {
        &self.manifest.subjects
    }

    pub fn records_for_subject<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a DatasetRecord> {
        self.records
            .iter()
            .filter(move |r| r.window.subject_id == subject)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest_json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        fs::write(&manifest_path, manifest_json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

        let mut by_subject: BTreeMap<&str, Vec<&DatasetRecord>> = BTreeMap::new();
        for r in &self.records {
            by_subject
                .entry(r.window.subject_id.as_str())
                .or_default()
                .push(r);
        }
        for (subject, recs) in by_subject {
            let path = dir.join(format!("{subject}.jsonl"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for r in recs {
                let line = RecordLine {
                    subject_id: r.window.subject_id.clone(),
                    modality: r.window.modality,
                    fs: r.window.sampling_rate_hz,
                    samples: r.window.samples.clone(),
                    sleep: r.sleep,
                    mood: r.mood.0.to_vec(),
                };
                let json = serde_json::to_string(&line)
                    .map_err(|e| Error::format(&path, e.to_string()))?;
                writeln!(w, "{json}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest_raw =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&manifest_raw)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;

        let mut records = Vec::new();
        for subject in &manifest.subjects {
            let path = dir.join(format!("{subject}.jsonl"));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let reader = BufReader::new(file);
            let mut window_index = 0usize;
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| {
                    Error::format(&path, format!("line {}: {}", lineno + 1, e))
                })?;
                if &parsed.subject_id != subject {
                    return Err(Error::format(
                        &path,
                        format!(
                            "line {}: subject {} in file for {}",
                            lineno + 1,
                            parsed.subject_id,
                            subject
                        ),
                    ));
                }
                let window = TimeSeriesWindow {
                    subject_id: parsed.subject_id,
                    modality: parsed.modality,
                    sampling_rate_hz: parsed.fs,
                    samples: parsed.samples,
                    window_index,
                };
                window.validate()?;
                parsed.sleep.validate()?;
                let mood = MoodLabels::from_slice(&parsed.mood)?;
                records.push(DatasetRecord {
                    window,
                    sleep: parsed.sleep,
                    mood,
                });
                window_index += 1;
            }
        }
        Ok(Dataset { manifest, records })
    }
}

pub fn manifest_for(modality: Modality, subjects: Vec<String>) -> DatasetManifest {
    DatasetManifest {
        subjects,
        modality,
        window_fs: modality.window_fs(),
        window_samples: modality.window_len(),
        label_names: MOOD_LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        sleep_measure_names: SLEEP_MEASURE_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
pub(crate) fn test_sleep() -> SleepMeasures {
    SleepMeasures {
        time_in_bed_h: 8.0,
        sleep_duration_h: 7.0,
        deep_sleep_h: 1.5,
        light_sleep_h: 4.0,
        rem_sleep_h: 1.5,
        wake_time_h: 1.0,
        deep_sleep_onset_h: 0.5,
        sleep_efficiency: 0.875,
        apnea_index: 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(subject: &str, idx: usize) -> TimeSeriesWindow {
        let n = 640;
        TimeSeriesWindow {
            subject_id: subject.to_string(),
            modality: Modality::Ppg,
            sampling_rate_hz: 64.0,
            samples: (0..n)
                .map(|i| ((i + idx) as f32 * 0.1).sin().clamp(-1.0, 1.0))
                .collect(),
            window_index: idx,
        }
    }

    #[test]
    fn sleep_validation_catches_inconsistency() {
        let mut s = test_sleep();
        assert!(s.validate().is_ok());
        s.sleep_duration_h = 9.0; // more than time in bed
        assert!(s.validate().is_err());
        let mut s = test_sleep();
        s.sleep_efficiency = 0.5; // far from 7/8
        assert!(s.validate().is_err());
        let mut s = test_sleep();
        s.rem_sleep_h = 4.0; // stages exceed duration + 0.25
        assert!(s.validate().is_err());
    }

    #[test]
    fn mood_labels_must_be_binary() {
        assert!(MoodLabels::from_slice(&[0, 1, 0, 1, 0, 1, 0]).is_ok());
        assert!(MoodLabels::from_slice(&[0, 2, 0, 1, 0, 1, 0]).is_err());
        assert!(MoodLabels::from_slice(&[0, 1]).is_err());
    }

    #[test]
    fn roundtrip_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<DatasetRecord> = (0..3)
            .flat_map(|s| {
                (0..2).map(move |i| DatasetRecord {
                    window: window(&format!("subj{s}"), i),
                    sleep: test_sleep(),
                    mood: MoodLabels([0, 1, 0, 1, 0, 1, 0]),
                })
            })
            .collect();
        let ds = Dataset {
            manifest: manifest_for(
                Modality::Ppg,
                vec!["subj0".into(), "subj1".into(), "subj2".into()],
            ),
            records,
        };
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), 6);
        assert_eq!(loaded.records[0].window.samples, ds.records[0].window.samples);
        assert_eq!(loaded.records[3].mood, ds.records[3].mood);
        assert_eq!(loaded.manifest.subjects.len(), 3);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let make = || Dataset {
            manifest: manifest_for(Modality::Ppg, vec!["s0".into()]),
            records: vec![DatasetRecord {
                window: window("s0", 0),
                sleep: test_sleep(),
                mood: MoodLabels([1, 0, 0, 0, 0, 0, 1]),
            }],
        };
        make().save(dir_a.path()).unwrap();
        make().save(dir_b.path()).unwrap();
        let a = fs::read(dir_a.path().join("s0.jsonl")).unwrap();
        let b = fs::read(dir_b.path().join("s0.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reader_accepts_integer_floats() {
        // fs and sleep values written as integers must parse.
        let dir = tempfile::tempdir().unwrap();
        let manifest = manifest_for(Modality::Eda, vec!["s0".into()]);
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let samples: Vec<String> = (0..640).map(|i| if i % 2 == 0 { "0".into() } else { "0.5".into() }).collect();
        let line = format!(
            "{{\"subject_id\":\"s0\",\"modality\":\"eda\",\"fs\":64,\"samples\":[{}],\"sleep\":{{\"time_in_bed_h\":8,\"sleep_duration_h\":7,\"deep_sleep_h\":1,\"light_sleep_h\":4,\"rem_sleep_h\":2,\"wake_time_h\":1,\"deep_sleep_onset_h\":1,\"sleep_efficiency\":0.875,\"apnea_index\":0}},\"mood\":[0,0,1,1,0,0,1]}}",
            samples.join(",")
        );
        fs::write(dir.path().join("s0.jsonl"), line + "\n").unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].sleep.time_in_bed_h, 8.0);
        assert_eq!(ds.records[0].window.sampling_rate_hz, 64.0);
    }
}
