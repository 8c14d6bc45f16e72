//! Synthetic dataset generator: desk-scale EEG with real spectral structure.
//!
//! Each class owns a latent unit prototype in embedding space. A fixed random
//! linear map turns the prototype into per-(channel, band) amplitudes, and the
//! trial signal is the sum of one sinusoidal carrier per canonical band with
//! those amplitudes (fixed per-channel phases), mixed by a per-subject
//! channel matrix, plus white noise. Class identity is therefore carried by
//! band amplitudes, which is exactly the structure the spectral-attention
//! path of the encoder can exploit.
//!
//! Image embeddings are the prototypes themselves. Text embeddings are K
//! noisy renormalized copies of each prototype.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::config::derive_seed;
use crate::data::{DatasetHandle, EmbeddingKind, EmbeddingTable, Trial};
use crate::error::{Error, Result};
use crate::nesta::CANONICAL_BAND_EDGES;
use crate::tensor::{normalize_in_place, Tensor};

fn default_n_classes() -> usize {
    20
}
fn default_n_subjects() -> usize {
    2
}
fn default_trials() -> usize {
    10
}
fn default_channels() -> usize {
    8
}
fn default_window() -> usize {
    64
}
fn default_fs() -> f64 {
    128.0
}
fn default_embed_dim() -> usize {
    32
}
fn default_separation() -> f64 {
    1.0
}
fn default_subject_perturbation() -> f64 {
    0.2
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_text_items() -> usize {
    3
}
fn default_seed() -> u64 {
    7
}

/// Generator knobs. The defaults are the reference dataset used throughout
/// the test suite: 20 classes (10 seen, 10 unseen), 2 subjects, 10 trials per
/// class per subject, 8 channels at 128 Hz, embedding width 32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_subjects: usize,
    pub trials_per_class_per_subject: usize,
    pub channels: usize,
    pub window_length: usize,
    pub sampling_rate_hz: f64,
    pub embed_dim: usize,
    /// 0 collapses every class onto one prototype (chance-level data); 1
    /// spreads prototypes to mutual orthogonality.
    pub class_separation: f64,
    /// Magnitude of the per-subject random channel-mixing perturbation.
    pub subject_perturbation: f64,
    /// White-noise scale added to every sample.
    pub noise_sigma: f64,
    /// K: number of text embeddings per class.
    pub text_items_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: default_n_classes(),
            n_subjects: default_n_subjects(),
            trials_per_class_per_subject: default_trials(),
            channels: default_channels(),
            window_length: default_window(),
            sampling_rate_hz: default_fs(),
            embed_dim: default_embed_dim(),
            class_separation: default_separation(),
            subject_perturbation: default_subject_perturbation(),
            noise_sigma: default_noise_sigma(),
            text_items_per_class: default_text_items(),
            seed: default_seed(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(format!("n_classes {} < 2", self.n_classes)));
        }
        if self.embed_dim < 2 {
            return Err(Error::config(format!("embed_dim {} < 2", self.embed_dim)));
        }
        if self.n_subjects == 0 || self.trials_per_class_per_subject == 0 {
            return Err(Error::config("need at least one subject and one trial per class"));
        }
        if self.channels == 0 || self.window_length < 2 {
            return Err(Error::config(format!(
                "invalid geometry: {} channels x {} samples",
                self.channels, self.window_length
            )));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::config(format!("bad sampling rate {}", self.sampling_rate_hz)));
        }
        if self.class_separation < 0.0 || self.subject_perturbation < 0.0 || self.noise_sigma < 0.0
        {
            return Err(Error::config("separation, perturbation, and noise must be nonnegative"));
        }
        if self.text_items_per_class == 0 {
            return Err(Error::config("text_items_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// One carrier frequency per canonical band, or `None` when the band lies
/// entirely at or above Nyquist. The preferred carriers (2, 6, 10, 20, 40 Hz)
/// sit well inside their bands; a band clipped by Nyquist falls back to the
/// midpoint of its audible part.
pub fn band_carriers_hz(sampling_rate_hz: f64) -> Vec<Option<f64>> {
    const PREFERRED: [f64; 5] = [2.0, 6.0, 10.0, 20.0, 40.0];
    let nyquist = sampling_rate_hz / 2.0;
    CANONICAL_BAND_EDGES
        .iter()
        .zip(PREFERRED)
        .map(|(&(lo, hi), pref)| {
            if lo >= nyquist {
                return None;
            }
            let hi = hi.min(nyquist);
            if pref >= lo && pref < hi {
                Some(pref)
            } else {
                Some((lo + hi) / 2.0)
            }
        })
        .collect()
}

/// Subtract projections onto `basis` rows and normalize. Returns false if the
/// residual is degenerate (below 1e-8).
fn orthogonalize(basis: &[Vec<f64>], v: &mut [f64]) -> bool {
    for b in basis {
        let proj: f64 = b.iter().zip(v.iter()).map(|(a, x)| a * x).sum();
        for (x, a) in v.iter_mut().zip(b.iter()) {
            *x -= proj * a;
        }
    }
    normalize_in_place(v) > 1e-8
}

fn random_unit(f: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..f).map(|_| sample_gauss(rng)).collect();
        if normalize_in_place(&mut v) > 1e-8 {
            return v;
        }
    }
}

fn sample_gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Class prototypes at angular separation `min(sep, 1) * 90°` from a shared
/// anchor. Seen-class directions are mutually orthogonal; unseen-class
/// directions are orthonormal mixtures of the seen ones, so at full
/// separation the unseen prototypes stay inside the span the encoder can
/// learn from the seen classes.
fn class_prototypes(
    f: usize,
    n_seen: usize,
    n_unseen: usize,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let theta = separation.min(1.0) * PI / 2.0;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let anchor = random_unit(f, rng);

    let mut seen_dirs: Vec<Vec<f64>> = Vec::with_capacity(n_seen);
    for _ in 0..n_seen {
        let mut with_anchor: Vec<Vec<f64>> = vec![anchor.clone()];
        with_anchor.extend(seen_dirs.iter().cloned());
        let mut d = random_unit(f, rng);
        if !orthogonalize(&with_anchor, &mut d) {
            // Span exhausted (F too small): fall back to any direction
            // orthogonal to the anchor alone.
            d = random_unit(f, rng);
            let _ = orthogonalize(&[anchor.clone()], &mut d);
        }
        seen_dirs.push(d);
    }

    // Orthonormal coefficient rows over the seen directions.
    let mut coeff_rows: Vec<Vec<f64>> = Vec::with_capacity(n_unseen);
    let mut unseen_dirs: Vec<Vec<f64>> = Vec::with_capacity(n_unseen);
    for _ in 0..n_unseen {
        let mut c = random_unit(n_seen.max(1), rng);
        if !orthogonalize(&coeff_rows.clone(), &mut c) {
            c = random_unit(n_seen.max(1), rng);
        }
        coeff_rows.push(c.clone());
        let mut d = vec![0.0; f];
        for (ci, dir) in c.iter().zip(seen_dirs.iter()) {
            for (x, y) in d.iter_mut().zip(dir.iter()) {
                *x += ci * y;
            }
        }
        if normalize_in_place(&mut d) <= 1e-8 {
            d = random_unit(f, rng);
            let _ = orthogonalize(&[anchor.clone()], &mut d);
        }
        unseen_dirs.push(d);
    }

    seen_dirs
        .into_iter()
        .chain(unseen_dirs)
        .map(|d| {
            let mut p: Vec<f64> =
                anchor.iter().zip(d.iter()).map(|(a, di)| cos_t * a + sin_t * di).collect();
            normalize_in_place(&mut p);
            p
        })
        .collect()
}

/// Deterministically synthesize a dataset plus its image and raw-text
/// embedding tables. The first `ceil(n/2)` classes are the seen split.
pub fn generate_synthetic_dataset(
    spec: &SynthSpec,
) -> Result<(DatasetHandle, EmbeddingTable, EmbeddingTable)> {
    spec.validate()?;
    let (c, l, f) = (spec.channels, spec.window_length, spec.embed_dim);
    let fs = spec.sampling_rate_hz;
    let n = spec.n_classes;
    let n_unseen = n / 2;
    let n_seen = n - n_unseen;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.protos"));
    let protos = class_prototypes(f, n_seen, n_unseen, spec.class_separation, &mut proto_rng);

    let carriers = band_carriers_hz(fs);
    let nb = carriers.len();

    // Amplitude map [C*NB, F]: prototype -> per-(channel, band) amplitudes.
    let mut amp_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.amp"));
    let amp_map = Tensor::randn(&[c * nb, f], 1.0, &mut amp_rng);

    // Fixed per-(channel, band) phases shared by all classes and trials.
    let mut phase_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.phase"));
    let phases: Vec<f64> = (0..c * nb).map(|_| phase_rng.gen::<f64>() * 2.0 * PI).collect();

    // Per-class noiseless base signals [C, L].
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(n);
    for proto in &protos {
        let mut amps = vec![0.0; c * nb];
        for (row, a) in amps.iter_mut().enumerate() {
            let w = &amp_map.data()[row * f..(row + 1) * f];
            *a = w.iter().zip(proto.iter()).map(|(wi, pi)| wi * pi).sum();
        }
        let mut base = vec![0.0; c * l];
        for ch in 0..c {
            for (b, carrier) in carriers.iter().enumerate() {
                let Some(freq) = carrier else { continue };
                let amp = amps[ch * nb + b];
                let phase = phases[ch * nb + b];
                for t in 0..l {
                    base[ch * l + t] += amp * (2.0 * PI * freq * t as f64 / fs + phase).sin();
                }
            }
        }
        bases.push(base);
    }

    // Per-subject channel mixing R_s = I + rho * G_s / sqrt(C).
    let mut subj_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.subject"));
    let mut mixes: Vec<Tensor> = Vec::with_capacity(spec.n_subjects);
    for _ in 0..spec.n_subjects {
        let g = Tensor::randn(&[c, c], 1.0, &mut subj_rng);
        let mut m = Tensor::identity(c);
        let rho = spec.subject_perturbation / (c as f64).sqrt();
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi += rho * gi;
        }
        mixes.push(m);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.noise"));
    let mut trials = Vec::with_capacity(n * spec.n_subjects * spec.trials_per_class_per_subject);
    for (class, base) in bases.iter().enumerate() {
        for subject in 0..spec.n_subjects {
            let mix = &mixes[subject];
            for exemplar in 0..spec.trials_per_class_per_subject {
                let mut eeg = vec![0.0; c * l];
                for ch in 0..c {
                    for src in 0..c {
                        let w = mix.data()[ch * c + src];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..l {
                            eeg[ch * l + t] += w * base[src * l + t];
                        }
                    }
                }
                if spec.noise_sigma > 0.0 {
                    for v in eeg.iter_mut() {
                        *v += spec.noise_sigma * sample_gauss(&mut noise_rng);
                    }
                }
                trials.push(Trial {
                    eeg: Tensor::new(&[c, l], eeg).quantize_f32(),
                    subject_id: subject,
                    class_id: class as u32,
                    exemplar_id: exemplar as u32,
                });
            }
        }
    }

    let seen: BTreeSet<u32> = (0..n_seen as u32).collect();
    let unseen: BTreeSet<u32> = (n_seen as u32..n as u32).collect();
    let handle = DatasetHandle::new(trials, c, l, fs, seen, unseen)?;

    let mut image = EmbeddingTable::new(f, EmbeddingKind::Image, true);
    for (class, proto) in protos.iter().enumerate() {
        let q = Tensor::new(&[f], proto.clone()).quantize_f32();
        image.insert(class as u32, 0, q.into_data())?;
    }

    let mut text_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth.text"));
    let mut text = EmbeddingTable::new(f, EmbeddingKind::TextRaw, true);
    const TEXT_NOISE: f64 = 0.05;
    for (class, proto) in protos.iter().enumerate() {
        for item in 0..spec.text_items_per_class {
            let mut v: Vec<f64> =
                proto.iter().map(|p| p + TEXT_NOISE * sample_gauss(&mut text_rng)).collect();
            normalize_in_place(&mut v);
            let q = Tensor::new(&[f], v).quantize_f32();
            text.insert(class as u32, item as u32, q.into_data())?;
        }
    }

    Ok((handle, image, text))
}
