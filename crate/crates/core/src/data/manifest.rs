//! Dataset directory format.
//!
//! A dataset is a directory holding `manifest.json` plus raw tensor files:
//!
//! ```json
//! {
//!   "version": 1,
//!   "C": 63, "L": 250, "sampling_rate_hz": 250.0,
//!   "trials": [{"file": "eeg.f32", "offset": 0, "subject_id": 0,
//!               "class_id": 3, "exemplar_id": 0}, ...],
//!   "seen_classes": [...], "unseen_classes": [...]
//! }
//! ```
//!
//! Each trial is `C * L` little-endian float32 values in channel-major
//! (channel, time) order, starting at the given byte offset of the named
//! file. [`write_dataset`] packs all trials into one `eeg.f32` in trial
//! order; [`load_dataset`] accepts any layout the manifest describes.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DatasetHandle, Trial};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestJson {
    version: u32,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "L")]
    l: usize,
    sampling_rate_hz: f64,
    trials: Vec<TrialJson>,
    seen_classes: Vec<u32>,
    unseen_classes: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialJson {
    file: String,
    offset: u64,
    subject_id: usize,
    class_id: u32,
    exemplar_id: u32,
}

/// Load a dataset directory. `dir` must contain `manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<DatasetHandle> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ManifestJson =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::data(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let trial_bytes = manifest
        .c
        .checked_mul(manifest.l)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::data("trial size overflows"))? as u64;

    // Read each referenced file once.
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    for t in &manifest.trials {
        if !files.contains_key(&t.file) {
            let path = dir.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            files.insert(t.file.clone(), bytes);
        }
    }

    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (i, t) in manifest.trials.iter().enumerate() {
        let bytes = &files[&t.file];
        let end = t.offset + trial_bytes;
        if end > bytes.len() as u64 {
            return Err(Error::data(format!(
                "trial {i}: needs bytes {}..{end} of {} but the file has {} bytes",
                t.offset,
                t.file,
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(manifest.c * manifest.l);
        let start = t.offset as usize;
        for chunk in bytes[start..end as usize].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        trials.push(Trial {
            eeg: Tensor::new(&[manifest.c, manifest.l], data),
            subject_id: t.subject_id,
            class_id: t.class_id,
            exemplar_id: t.exemplar_id,
        });
    }

    DatasetHandle::new(
        trials,
        manifest.c,
        manifest.l,
        manifest.sampling_rate_hz,
        manifest.seen_classes.iter().copied().collect::<BTreeSet<_>>(),
        manifest.unseen_classes.iter().copied().collect::<BTreeSet<_>>(),
    )
}

/// Write `handle` as a dataset directory: `manifest.json` plus a single
/// `eeg.f32` holding all trials in order. Values are stored as little-endian
/// float32, so tensors already on the f32 grid round-trip bit-for-bit.
pub fn write_dataset(handle: &DatasetHandle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trial_bytes = (handle.channel_count() * handle.window_length() * 4) as u64;
    let mut raw: Vec<u8> =
        Vec::with_capacity(handle.trials().len() * trial_bytes as usize);
    let mut trials_json = Vec::with_capacity(handle.trials().len());
    for (i, t) in handle.trials().iter().enumerate() {
        trials_json.push(TrialJson {
            file: "eeg.f32".to_string(),
            offset: i as u64 * trial_bytes,
            subject_id: t.subject_id,
            class_id: t.class_id,
            exemplar_id: t.exemplar_id,
        });
        for &v in t.eeg.data() {
            raw.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = ManifestJson {
        version: MANIFEST_VERSION,
        c: handle.channel_count(),
        l: handle.window_length(),
        sampling_rate_hz: handle.sampling_rate_hz(),
        trials: trials_json,
        seen_classes: handle.seen_classes().iter().copied().collect(),
        unseen_classes: handle.unseen_classes().iter().copied().collect(),
    };
    let eeg_path = dir.join("eeg.f32");
    fs::write(&eeg_path, &raw).map_err(|e| Error::io(&eeg_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
