//! Run configuration, seed derivation, config-file parsing with overrides,
//! and the run manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Derive a component seed from the global seed by labeled hashing, so every
/// consumer (data synthesis, init, dropout, batching, evaluation draws) gets
/// an independent deterministic stream and adding a consumer never shifts the
/// streams of existing ones.
pub fn derive_seed(global_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

/// Hex SHA-256 of a file, for manifest input digests.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Which stages the training pipeline runs. Every flag defaults on; switching
/// one off reroutes computation around that component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Per-subject channel-mixing matrices (off: frozen at identity and
    /// bypassed).
    pub subject_specific: bool,
    /// Spectral adaptation block (off: bypassed, blend weight forced to 0).
    pub neural_spectral: bool,
    /// Class text prototypes as loss targets (off: per-sample raw text
    /// embeddings).
    pub consistency: bool,
    /// Gaussian completion noise on EEG embeddings (off: sigma treated as 0).
    pub completion: bool,
    /// Cross-modal alignment head (off: encoder output feeds the loss
    /// directly).
    pub alignment: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            subject_specific: true,
            neural_spectral: true,
            consistency: true,
            completion: true,
            alignment: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Nesta,
    Mlp,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    30
}
fn default_tau() -> f64 {
    0.07
}
fn default_eta() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    7
}
fn default_encoder() -> EncoderKind {
    EncoderKind::Nesta
}
fn default_heads() -> usize {
    4
}
fn default_ff_expansion() -> usize {
    2
}
fn default_ff_kernel() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.25
}
fn default_eitra_m() -> usize {
    8
}

/// Full training configuration. Every field has a default, so an empty JSON
/// object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    /// Balance between the image term (eta) and the text term (1 - eta).
    pub eta: f64,
    /// Completion noise scale.
    pub sigma: f64,
    /// Re-project noised embeddings onto the unit hypersphere.
    pub renormalize_noise: bool,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// Embedding width F. When absent it is inferred from the image table.
    pub embed_dim: Option<usize>,
    pub encoder: EncoderKind,
    pub heads: usize,
    pub ff_expansion: usize,
    pub ff_kernel: usize,
    pub dropout: f64,
    /// Interaction-matrix row count M of the alignment head.
    pub eitra_m: usize,
    /// Average both InfoNCE directions instead of the one-directional loss.
    pub symmetric_nce: bool,
    /// Forbid duplicate classes inside a batch (duplicates would be false
    /// negatives in the contrastive denominator).
    pub distinct_class_batching: bool,
    /// Band edges in Hz; absent means the canonical delta..gamma bands.
    pub band_edges_hz: Option<Vec<(f64, f64)>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            temperature: default_tau(),
            eta: default_eta(),
            sigma: default_sigma(),
            renormalize_noise: true,
            ablation: AblationFlags::default(),
            seed: default_seed(),
            embed_dim: None,
            encoder: default_encoder(),
            heads: default_heads(),
            ff_expansion: default_ff_expansion(),
            ff_kernel: default_ff_kernel(),
            dropout: default_dropout(),
            eitra_m: default_eitra_m(),
            symmetric_nce: false,
            distinct_class_batching: true,
            band_edges_hz: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma {} must be nonnegative", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be at least 1"));
        }
        if self.ff_kernel % 2 == 0 {
            return Err(Error::config(format!("ff_kernel {} must be odd", self.ff_kernel)));
        }
        if self.eitra_m == 0 {
            return Err(Error::config("eitra_m must be at least 1"));
        }
        if let Some(f) = self.embed_dim {
            if f < 2 {
                return Err(Error::config(format!("embed_dim {f} < 2")));
            }
        }
        Ok(())
    }
}

/// Insert `value` at a dotted `path` inside a JSON object tree, creating
/// intermediate objects as needed.
fn set_json_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(format!("override key '{path}' has an empty segment")));
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(format!("override key '{path}' descends into a non-object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("path has at least one part");
}

/// Parse a JSON config file into `T`, applying `key=value` overrides last.
/// Unknown keys and type mismatches are rejected by `T`'s strict schema;
/// values parse as JSON when possible and fall back to strings, so
/// `eta=0.3`, `ablation.alignment=false`, and `encoder=mlp` all work.
pub fn parse_json_config<T: serde::de::DeserializeOwned>(
    path: &Path,
    overrides: &[String],
) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trimmed = text.trim();
    let mut value: serde_json::Value = if trimmed.is_empty() {
        serde_json::Value::Object(Default::default())
    } else {
        serde_json::from_str(trimmed).map_err(|e| Error::json(path, e.to_string()))?
    };
    if !value.is_object() {
        return Err(Error::json(path, "config root must be a JSON object"));
    }
    apply_overrides(&mut value, overrides)?;
    serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))
}

/// Apply `key=value` overrides to a JSON object tree.
pub fn apply_overrides(value: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            return Err(Error::config(format!("override '{item}' is not of the form key=value")));
        };
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_json_path(value, key, parsed)?;
    }
    Ok(())
}

/// Parse and validate a training config.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let cfg: TrainConfig = parse_json_config(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Record of one CLI run: the resolved config, the seed, and digests of
/// every input file. Written as `run_manifest.json` next to the outputs
/// (the name avoids colliding with a dataset's own `manifest.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            input_digests: BTreeMap::new(),
        }
    }

    /// Digest one input file under its path string.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.input_digests.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Write `run_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(&path, e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        let a = derive_seed(42, "synth.noise");
        assert_eq!(a, derive_seed(42, "synth.noise"));
        assert_ne!(a, derive_seed(42, "synth.phases"));
        assert_ne!(a, derive_seed(43, "synth.noise"));
    }

    fn write_cfg(dir: &tempfile::TempDir, text: &str) -> PathBuf {
        let p = dir.path().join("config.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_config_yields_all_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(&dir, "{}");
        let cfg = parse_config(&p, &[]).unwrap();
        assert_eq!(cfg.learning_rate, 3e-4);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.temperature, 0.07);
        assert_eq!(cfg.eta, 0.5);
        assert!(cfg.ablation.alignment && cfg.ablation.neural_spectral);
        assert_eq!(cfg.encoder, EncoderKind::Nesta);
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(&dir, r#"{"learnig_rate": 0.01}"#);
        let err = parse_config(&p, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let p2 = write_cfg(&dir, r#"{"batch_size": "big"}"#);
        assert!(parse_config(&p2, &[]).is_err());
    }

    #[test]
    fn overrides_apply_last_and_are_constraint_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(&dir, r#"{"eta": 0.25}"#);
        let cfg = parse_config(&p, &["eta=0.75".into(), "encoder=mlp".into()]).unwrap();
        assert_eq!(cfg.eta, 0.75);
        assert_eq!(cfg.encoder, EncoderKind::Mlp);
        let err = parse_config(&p, &["eta=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        let nested = parse_config(&p, &["ablation.alignment=false".into()]).unwrap();
        assert!(!nested.ablation.alignment);
        assert!(nested.ablation.completion);
    }

    #[test]
    fn parsing_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(&dir, r#"{"epochs": 5, "sigma": 0.1}"#);
        let overrides = vec!["seed=99".to_string()];
        let a = parse_config(&p, &overrides).unwrap();
        let b = parse_config(&p, &overrides).unwrap();
        assert_eq!(a, b);
        let serialized = serde_json::to_string(&a).unwrap();
        let reparsed: TrainConfig = serde_json::from_str(&serialized).unwrap();
        assert_eq!(a, reparsed);
    }

    #[test]
    fn manifest_lists_digests_and_writes_next_to_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.bin");
        fs::write(&input, b"hello").unwrap();
        let mut m = RunManifest::new("synth", 7, serde_json::json!({"n_classes": 4}));
        m.add_input(&input).unwrap();
        let written = m.write(dir.path()).unwrap();
        assert_eq!(written.file_name().unwrap(), "run_manifest.json");
        let text = fs::read_to_string(&written).unwrap();
        let parsed: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.subcommand, "synth");
        // SHA-256 of "hello".
        assert_eq!(
            parsed.input_digests.values().next().unwrap(),
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
    }
}
