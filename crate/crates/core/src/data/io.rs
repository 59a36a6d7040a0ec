//! Dataset directory layout.
//!
//! `manifest.json` lists every trial; each trial lives in its own binary file:
//! magic `EEGT`, u32 channels, u32 samples (little-endian), then
//! `channels × samples` little-endian f32 values, row-major. Samples are
//! stored as f32, so a round trip is exact for f32-representable data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, EegDataset, EegTrial, Label};

pub const TRIAL_MAGIC: &[u8; 4] = b"EEGT";
const HEADER_LEN: u64 = 12;

#[derive(Debug, Serialize, Deserialize)]
enum RestingTag {
    #[serde(rename = "resting")]
    Resting,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ClassField {
    Index(usize),
    Resting(RestingTag),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    class_index: ClassField,
    session: u32,
    trial_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    sample_rate_hz: f64,
    n_channels: usize,
    trial_samples: usize,
    classes: Vec<String>,
    trials: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_trial_file(path: &Path, trial: &EegTrial) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + trial.data.len() * 4);
    buf.extend_from_slice(TRIAL_MAGIC);
    buf.extend_from_slice(&(trial.n_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(trial.n_samples as u32).to_le_bytes());
    for &v in &trial.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads one trial file, returning `(channels, samples, data)`.
pub fn read_trial_file(path: &Path) -> Result<(usize, usize, Vec<f64>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let len = bytes.len() as u64;
    if len < 4 {
        return Err(DataError::Truncated { path: path.into(), offset: len, expected: HEADER_LEN });
    }
    if &bytes[..4] != TRIAL_MAGIC {
        return Err(DataError::MagicMismatch {
            path: path.into(),
            found: bytes[..4].to_vec(),
            expected: TRIAL_MAGIC.to_vec(),
        });
    }
    if len < HEADER_LEN {
        return Err(DataError::Truncated { path: path.into(), offset: len, expected: HEADER_LEN });
    }
    let channels = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let samples = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if channels == 0 || samples == 0 {
        return Err(DataError::MalformedHeader {
            path: path.into(),
            reason: format!("zero extent ({channels} x {samples})"),
        });
    }
    let expected = HEADER_LEN + (channels * samples * 4) as u64;
    if len < expected {
        return Err(DataError::Truncated { path: path.into(), offset: len, expected });
    }
    if len > expected {
        return Err(DataError::MalformedHeader {
            path: path.into(),
            reason: format!("{} bytes beyond the {channels} x {samples} payload", len - expected),
        });
    }
    let data = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((channels, samples, data))
}

fn trial_file_name(trial: &EegTrial) -> String {
    format!("trials/t{:06}.eegt", trial.trial_id)
}

/// Writes `manifest.json` and one file per trial under `dir`.
pub fn save_dataset(ds: &EegDataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(io_err(&trials_dir))?;
    let mut entries = Vec::with_capacity(ds.trials.len() + ds.resting.len());
    for trial in ds.trials.iter().chain(&ds.resting) {
        let file = trial_file_name(trial);
        write_trial_file(&dir.join(&file), trial)?;
        entries.push(ManifestEntry {
            file,
            class_index: match trial.label {
                Label::Class(k) => ClassField::Index(k),
                Label::Resting => ClassField::Resting(RestingTag::Resting),
            },
            session: trial.session,
            trial_id: trial.trial_id,
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        sample_rate_hz: ds.sample_rate_hz,
        n_channels: ds.n_channels,
        trial_samples: ds.trial_samples,
        classes: ds.class_names.clone(),
        trials: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<EegDataset, DataError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::MalformedManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut ds = EegDataset {
        name: manifest.name,
        sample_rate_hz: manifest.sample_rate_hz,
        n_channels: manifest.n_channels,
        trial_samples: manifest.trial_samples,
        class_names: manifest.classes,
        trials: Vec::new(),
        resting: Vec::new(),
    };
    for entry in manifest.trials {
        let file: PathBuf = dir.join(&entry.file);
        let (channels, samples, data) = read_trial_file(&file)?;
        if channels != ds.n_channels || samples != ds.trial_samples {
            return Err(DataError::MalformedHeader {
                path: file,
                reason: format!(
                    "trial is {channels} x {samples}, manifest says {} x {}",
                    ds.n_channels, ds.trial_samples
                ),
            });
        }
        let label = match entry.class_index {
            ClassField::Index(k) => Label::Class(k),
            ClassField::Resting(_) => Label::Resting,
        };
        let trial = EegTrial {
            trial_id: entry.trial_id,
            label,
            session: entry.session,
            n_channels: channels,
            n_samples: samples,
            data,
        };
        match label {
            Label::Class(_) => ds.trials.push(trial),
            Label::Resting => ds.resting.push(trial),
        }
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(id: usize, label: Label) -> EegTrial {
        EegTrial {
            trial_id: id,
            label,
            session: 2,
            n_channels: 2,
            n_samples: 3,
            data: vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 7.0, -0.0],
        }
    }

    fn dataset() -> EegDataset {
        EegDataset {
            name: "tiny".into(),
            sample_rate_hz: 250.0,
            n_channels: 2,
            trial_samples: 3,
            class_names: vec!["a".into(), "b".into()],
            trials: vec![trial(0, Label::Class(0)), trial(1, Label::Class(1))],
            resting: vec![trial(2, Label::Resting)],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(text.contains("\"resting\""));
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn magic_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset(), dir.path()).unwrap();
        let f = dir.path().join("trials/t000001.eegt");
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] = b'X';
        fs::write(&f, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::MagicMismatch { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset(), dir.path()).unwrap();
        let f = dir.path().join("trials/t000000.eegt");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Truncated { offset, expected, .. }) => {
                assert_eq!(offset, 12 + 24 - 5);
                assert_eq!(expected, 36);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_disagreeing_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset(), dir.path()).unwrap();
        let f = dir.path().join("trials/t000000.eegt");
        let mut t = trial(0, Label::Class(0));
        t.n_channels = 3;
        t.n_samples = 2;
        write_trial_file(&f, &t).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::MalformedHeader { .. })));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.json"), "{\"name\": 3}").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::MalformedManifest { .. })));
    }
}
