//! The NESTA EEG encoder: subject-specific transform, channel-token attention
//! block, neural-spectral adaptation, and projection onto the unit
//! hypersphere. Also houses the MLP baseline encoder used for comparisons.
//!
//! Every stage exists twice over the same code path: as a tape builder
//! (`*_t`, used by training and gradient checks) and as a plain-tensor
//! function that runs a private tape and returns the value. There is one
//! implementation of the math.
//!
//! Parameter names (stable; these are the tensor names inside checkpoints):
//!
//! | name                 | shape          | init      |
//! |----------------------|----------------|-----------|
//! | nesta.subject_m      | [S, C, C]      | identity  |
//! | nesta.attn.ln.g/.b   | [L]            | 1 / 0     |
//! | nesta.attn.wq/wk/wv/wo | [L, L]       | Glorot    |
//! | nesta.attn.bq/bk/bv/bo | [L]          | 0         |
//! | nesta.ffn.ln.g/.b    | [L]            | 1 / 0     |
//! | nesta.ffn.w1         | [E, 1, k]      | Glorot    |
//! | nesta.ffn.b1         | [E]            | 0         |
//! | nesta.ffn.w2         | [1, E, k]      | Glorot    |
//! | nesta.ffn.b2         | [1]            | 0         |
//! | nesta.spec.wc        | [C, C]         | Glorot    |
//! | nesta.spec.bc        | [C]            | 0         |
//! | nesta.spec.ws        | [NB, NB]       | Glorot    |
//! | nesta.spec.bs        | [NB]           | 0         |
//! | nesta.spec.ln.g/.b   | [L]            | 1 / 0     |
//! | nesta.alpha          | [1]            | 0.5       |
//! | nesta.proj.ln.g/.b   | [L]            | 1 / 0     |
//! | nesta.proj.w         | [C*L, F]       | Glorot    |
//! | nesta.proj.b         | [F]            | 0         |
//! | mlp.w1/b1, mlp.w2/b2 | see `MlpBaseline` | Glorot/0 |

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::EEGBatch;
use crate::error::{Error, Result};
use crate::fft;
use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Canonical EEG band edges in Hz: delta, theta, alpha, beta, gamma.
pub const CANONICAL_BAND_EDGES: [(f64, f64); 5] =
    [(0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 100.0)];

pub const BAND_NAMES: [&str; 5] = ["delta", "theta", "alpha", "beta", "gamma"];

/// Dropout / determinism switch for forward passes.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    /// Inverted-dropout mask, or `None` when dropout is inactive.
    fn dropout_mask(&mut self, shape: &[usize]) -> Option<Tensor> {
        match self {
            Mode::Eval => None,
            Mode::Train { dropout, rng } => {
                if *dropout <= 0.0 {
                    return None;
                }
                let keep = 1.0 - *dropout;
                let mut t = Tensor::zeros(shape);
                for v in t.data_mut() {
                    if rng.gen::<f64>() < keep {
                        *v = 1.0 / keep;
                    }
                }
                Some(t)
            }
        }
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, mode: &mut Mode) -> Var {
    match mode.dropout_mask(tape.value(x).shape()) {
        Some(mask) => tape.mul_const(x, mask),
        None => x,
    }
}

/// Frequency-band masks over the one-sided spectrum.
///
/// A bin at center frequency `f` belongs to band `(lo, hi)` when
/// `lo <= f < hi`; a band whose configured high edge reaches Nyquist is
/// clipped there and also takes the Nyquist bin itself, so a partition of the
/// full one-sided spectrum is expressible. A low edge at or above Nyquist is
/// an error (the band would be empty).
#[derive(Debug, Clone)]
pub struct BandMasks {
    /// 0/1 matrix `[n_bands, bins]`.
    pub masks: Tensor,
    /// Configured edges, before clipping.
    pub band_edges_hz: Vec<(f64, f64)>,
}

impl BandMasks {
    pub fn n_bands(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.masks.shape()[1]
    }
}

/// Build band masks for signals of length `l` sampled at `fs` Hz.
pub fn band_masks(l: usize, fs: f64, band_edges_hz: &[(f64, f64)]) -> Result<BandMasks> {
    if l < 2 {
        return Err(Error::config(format!("window length {l} too short for spectra")));
    }
    if band_edges_hz.is_empty() {
        return Err(Error::config("at least one band is required"));
    }
    let nyquist = fs / 2.0;
    let mut prev_hi = f64::NEG_INFINITY;
    for &(lo, hi) in band_edges_hz {
        if !(lo < hi) {
            return Err(Error::config(format!("band edges ({lo}, {hi}) not increasing")));
        }
        if lo < prev_hi {
            return Err(Error::config(format!(
                "band edges must be nondecreasing across bands; {lo} overlaps previous high {prev_hi}"
            )));
        }
        if lo >= nyquist {
            return Err(Error::config(format!(
                "band edge {lo} Hz at or above Nyquist ({nyquist} Hz)"
            )));
        }
        prev_hi = hi;
    }
    let bins = fft::rfft_bins(l);
    let nb = band_edges_hz.len();
    let mut masks = Tensor::zeros(&[nb, bins]);
    for (b, &(lo, hi)) in band_edges_hz.iter().enumerate() {
        let clipped_hi = hi.min(nyquist);
        let take_nyquist = hi >= nyquist;
        for k in 0..bins {
            let f = fft::bin_hz(k, l, fs);
            let inside = (f >= lo && f < clipped_hi) || (take_nyquist && (f - nyquist).abs() < 1e-9);
            if inside {
                masks.data_mut()[b * bins + k] = 1.0;
            }
        }
    }
    Ok(BandMasks { masks, band_edges_hz: band_edges_hz.to_vec() })
}

/// One-sided spectra of a batch plus the masks that band them.
#[derive(Debug, Clone)]
pub struct BandSpectra {
    /// Complex spectrum as stacked re/im: `[B, C, 2, bins]`.
    pub spectrum: Tensor,
    pub masks: BandMasks,
    pub sampling_rate_hz: f64,
    pub signal_len: usize,
}

/// FFT each channel series and attach band masks.
pub fn band_decompose(
    x: &Tensor,
    sampling_rate_hz: f64,
    band_edges_hz: &[(f64, f64)],
) -> Result<BandSpectra> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::data(format!("expected [B, C, L] input, got {shape:?}")));
    }
    let l = shape[2];
    let masks = band_masks(l, sampling_rate_hz, band_edges_hz)?;
    Ok(BandSpectra { spectrum: fft::rfft_tensor(x), masks, sampling_rate_hz, signal_len: l })
}

/// Per-band power `[B, C, n_bands]`: sum of squared magnitudes over each
/// band's bins.
pub fn band_power(spectra: &BandSpectra) -> Tensor {
    let mut tape = Tape::new();
    let spec = tape.leaf(spectra.spectrum.clone());
    let p = tape.spec_power(spec, &spectra.masks.masks);
    tape.value(p).clone()
}

// Tape-level building blocks shared by the model forward and the standalone
// operation wrappers.

fn channel_attention_t(tape: &mut Tape, p: Var, w_c: Var, b_c: Var) -> Var {
    let u = tape.mean_last(p); // [B, C]: band-aggregated power per channel
    let wct = tape.permute(w_c, &[1, 0]);
    let lin = tape.matmul(u, wct); // rows are W_c * u
    let lin = tape.add_bias(lin, b_c);
    tape.sigmoid(lin)
}

fn spectral_attention_t(tape: &mut Tape, p: Var, w_s: Var, b_s: Var) -> Var {
    let pt = tape.permute(p, &[0, 2, 1]); // [B, NB, C]
    let v = tape.mean_last(pt); // [B, NB]: channel-averaged power per band
    let wst = tape.permute(w_s, &[1, 0]);
    let lin = tape.matmul(v, wst);
    let lin = tape.add_bias(lin, b_s);
    tape.softmax(lin)
}

/// Recompose: inverse-transform the band-weighted spectrum, layer-normalize
/// per channel over time, and blend with the residual path by `alpha`.
#[allow(clippy::too_many_arguments)]
fn spectral_recompose_t(
    tape: &mut Tape,
    spec: Var,
    masks: &Tensor,
    w_c: Var,
    w_s: Var,
    e_t: Var,
    alpha: Var,
    ln_g: Var,
    ln_b: Var,
    l: usize,
) -> Var {
    let weighted = tape.spec_weight(spec, w_c, w_s, masks);
    let y = tape.irfft(weighted, l);
    let yn = tape.layer_norm(y, ln_g, ln_b);
    tape.blend(yn, e_t, alpha)
}

fn project_embedding_t(tape: &mut Tape, x: Var, ln_g: Var, ln_b: Var, w: Var, b: Var) -> Var {
    let xn = tape.layer_norm(x, ln_g, ln_b);
    let shape = tape.value(xn).shape().to_vec();
    let (bsz, c, l) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(xn, &[bsz, c * l]);
    let z = tape.matmul(flat, w);
    let z = tape.add_bias(z, b);
    tape.row_l2_norm(z)
}

/// Logistic channel weights `[B, C, 1]` from band powers `[B, C, NB]`.
pub fn channel_attention(p: &Tensor, w_c: &Tensor, b_c: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (pv, wv, bv) = (tape.leaf(p.clone()), tape.leaf(w_c.clone()), tape.leaf(b_c.clone()));
    let out = channel_attention_t(&mut tape, pv, wv, bv);
    let (b, c) = (p.shape()[0], p.shape()[1]);
    tape.value(out).reshape(&[b, c, 1])
}

/// Softmax band weights `[B, NB]` from band powers `[B, C, NB]`.
pub fn spectral_attention(p: &Tensor, w_s: &Tensor, b_s: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (pv, wv, bv) = (tape.leaf(p.clone()), tape.leaf(w_s.clone()), tape.leaf(b_s.clone()));
    let out = spectral_attention_t(&mut tape, pv, wv, bv);
    tape.value(out).clone()
}

/// `alpha * LayerNorm(IFFT(sum_b masked spectrum * w_c * w_s[b])) + (1 - alpha) * e_t`.
pub fn spectral_recompose(
    spectra: &BandSpectra,
    w_c: &Tensor,
    w_s: &Tensor,
    e_t: &Tensor,
    alpha: f64,
    ln_g: &Tensor,
    ln_b: &Tensor,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let spec = tape.leaf(spectra.spectrum.clone());
    let wc = tape.leaf(w_c.clone());
    let ws = tape.leaf(w_s.clone());
    let et = tape.leaf(e_t.clone());
    let al = tape.leaf(Tensor::scalar(alpha));
    let g = tape.leaf(ln_g.clone());
    let b = tape.leaf(ln_b.clone());
    let out = spectral_recompose_t(
        &mut tape,
        spec,
        &spectra.masks.masks,
        wc,
        ws,
        et,
        al,
        g,
        b,
        spectra.signal_len,
    );
    Ok(tape.value(out).clone())
}

/// LayerNorm, flatten, affine to `F`, unit-normalize rows.
pub fn project_embedding(
    x: &Tensor,
    ln_g: &Tensor,
    ln_b: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(ln_g.clone());
    let bb = tape.leaf(ln_b.clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let out = project_embedding_t(&mut tape, xv, g, bb, wv, bv);
    tape.value(out).clone()
}

/// Per-sample transform by that sample's subject matrix: `M[s_i] * eeg_i`.
pub fn subject_transform(batch: &EEGBatch, subject_m: &Tensor) -> Result<Tensor> {
    let s = subject_m.shape()[0];
    for &sid in &batch.subject_ids {
        if sid >= s {
            return Err(Error::data(format!("subject id {sid} out of range (have {s} matrices)")));
        }
    }
    let mut tape = Tape::new();
    let m = tape.leaf(subject_m.clone());
    let x = tape.leaf(batch.eeg.clone());
    let out = tape.subject_transform(m, x, &batch.subject_ids);
    Ok(tape.value(out).clone())
}

/// Which encoder stages are live. Training ablations switch stages off; both
/// default on.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFlags {
    pub subject_specific: bool,
    pub neural_spectral: bool,
}

impl Default for EncoderFlags {
    fn default() -> Self {
        EncoderFlags { subject_specific: true, neural_spectral: true }
    }
}

/// Static encoder geometry and hyperparameters.
#[derive(Debug, Clone)]
pub struct NestaConfig {
    pub n_subjects: usize,
    pub c: usize,
    pub l: usize,
    pub f: usize,
    pub heads: usize,
    pub ff_expansion: usize,
    pub ff_kernel: usize,
    pub dropout: f64,
    pub band_edges_hz: Vec<(f64, f64)>,
    pub sampling_rate_hz: f64,
}

impl NestaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.c == 0 || self.l < 2 || self.f == 0 {
            return Err(Error::config(format!(
                "invalid encoder geometry: subjects {}, C {}, L {}, F {}",
                self.n_subjects, self.c, self.l, self.f
            )));
        }
        if self.heads == 0 || self.l % self.heads != 0 {
            return Err(Error::config(format!(
                "attention heads ({}) must divide the window length ({})",
                self.heads, self.l
            )));
        }
        if self.ff_expansion == 0 {
            return Err(Error::config("feed-forward expansion must be at least 1"));
        }
        if self.ff_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "feed-forward kernel must be odd for same padding, got {}",
                self.ff_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// The encoder: configuration plus precomputed band masks. Parameters live in
/// a [`ParamStore`] under the names documented at module level.
#[derive(Debug, Clone)]
pub struct NestaModel {
    pub cfg: NestaConfig,
    pub masks: BandMasks,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(shape, scale, rng)
}

impl NestaModel {
    pub fn new(cfg: NestaConfig) -> Result<Self> {
        cfg.validate()?;
        let masks = band_masks(cfg.l, cfg.sampling_rate_hz, &cfg.band_edges_hz)?;
        Ok(NestaModel { cfg, masks })
    }

    /// Register all encoder parameters. Subject matrices start at identity,
    /// normalization at (1, 0), the blend at 0.5, projections at Glorot.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (s, c, l, f) = (self.cfg.n_subjects, self.cfg.c, self.cfg.l, self.cfg.f);
        let nb = self.masks.n_bands();
        let e = self.cfg.ff_expansion;
        let k = self.cfg.ff_kernel;

        let mut m = Tensor::zeros(&[s, c, c]);
        for si in 0..s {
            for i in 0..c {
                m.data_mut()[si * c * c + i * c + i] = 1.0;
            }
        }
        store.insert("nesta.subject_m", m);

        store.insert("nesta.attn.ln.g", Tensor::ones(&[l]));
        store.insert("nesta.attn.ln.b", Tensor::zeros(&[l]));
        for name in ["nesta.attn.wq", "nesta.attn.wk", "nesta.attn.wv", "nesta.attn.wo"] {
            store.insert(name, glorot(&[l, l], l, l, rng));
        }
        for name in ["nesta.attn.bq", "nesta.attn.bk", "nesta.attn.bv", "nesta.attn.bo"] {
            store.insert(name, Tensor::zeros(&[l]));
        }
        store.insert("nesta.ffn.ln.g", Tensor::ones(&[l]));
        store.insert("nesta.ffn.ln.b", Tensor::zeros(&[l]));
        store.insert("nesta.ffn.w1", glorot(&[e, 1, k], k, e * k, rng));
        store.insert("nesta.ffn.b1", Tensor::zeros(&[e]));
        store.insert("nesta.ffn.w2", glorot(&[1, e, k], e * k, k, rng));
        store.insert("nesta.ffn.b2", Tensor::zeros(&[1]));

        store.insert("nesta.spec.wc", glorot(&[c, c], c, c, rng));
        store.insert("nesta.spec.bc", Tensor::zeros(&[c]));
        store.insert("nesta.spec.ws", glorot(&[nb, nb], nb, nb, rng));
        store.insert("nesta.spec.bs", Tensor::zeros(&[nb]));
        store.insert("nesta.spec.ln.g", Tensor::ones(&[l]));
        store.insert("nesta.spec.ln.b", Tensor::zeros(&[l]));
        store.insert("nesta.alpha", Tensor::scalar(0.5));

        store.insert("nesta.proj.ln.g", Tensor::ones(&[l]));
        store.insert("nesta.proj.ln.b", Tensor::zeros(&[l]));
        store.insert("nesta.proj.w", glorot(&[c * l, f], c * l, f, rng));
        store.insert("nesta.proj.b", Tensor::zeros(&[f]));
    }

    /// Multi-head attention over channel tokens plus a convolutional
    /// feed-forward, both pre-normalized with residual connections. Returns
    /// `(output, attention probabilities [B*H, C, C])`.
    pub fn attention_block_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        mode: &mut Mode,
    ) -> (Var, Var) {
        let shape = tape.value(x).shape().to_vec();
        let (bsz, c, l) = (shape[0], shape[1], shape[2]);
        let h = self.cfg.heads;
        let dh = l / h;

        let xin = tape.layer_norm(x, p.var("nesta.attn.ln.g"), p.var("nesta.attn.ln.b"));
        let flat = tape.reshape(xin, &[bsz * c, l]);
        let mut heads = Vec::with_capacity(3);
        for (wname, bname) in [
            ("nesta.attn.wq", "nesta.attn.bq"),
            ("nesta.attn.wk", "nesta.attn.bk"),
            ("nesta.attn.wv", "nesta.attn.bv"),
        ] {
            let proj = tape.matmul(flat, p.var(wname));
            let proj = tape.add_bias(proj, p.var(bname));
            // [B, C, H, dh] -> [B, H, C, dh] -> [B*H, C, dh]
            let sp = tape.reshape(proj, &[bsz, c, h, dh]);
            let sp = tape.permute(sp, &[0, 2, 1, 3]);
            heads.push(tape.reshape(sp, &[bsz * h, c, dh]));
        }
        let (q, k, v) = (heads[0], heads[1], heads[2]);
        let kt = tape.permute(k, &[0, 2, 1]);
        let scores = tape.bmm(q, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scores); // [B*H, C, C]
        let ctx = tape.bmm(probs, v); // [B*H, C, dh]
        let ctx = tape.reshape(ctx, &[bsz, h, c, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[bsz * c, l]);
        let out = tape.matmul(ctx, p.var("nesta.attn.wo"));
        let out = tape.add_bias(out, p.var("nesta.attn.bo"));
        let out = tape.reshape(out, &[bsz, c, l]);
        let out = apply_dropout(tape, out, mode);
        let x1 = tape.add(x, out);

        let ff_in = tape.layer_norm(x1, p.var("nesta.ffn.ln.g"), p.var("nesta.ffn.ln.b"));
        let ff = tape.reshape(ff_in, &[bsz * c, 1, l]);
        let ff = tape.conv1d_same(ff, p.var("nesta.ffn.w1"), p.var("nesta.ffn.b1"));
        let ff = tape.gelu(ff);
        let ff = apply_dropout(tape, ff, mode);
        let ff = tape.conv1d_same(ff, p.var("nesta.ffn.w2"), p.var("nesta.ffn.b2"));
        let ff = tape.reshape(ff, &[bsz, c, l]);
        let ff = apply_dropout(tape, ff, mode);
        let x2 = tape.add(x1, ff);
        (x2, probs)
    }

    /// Band-decompose, weight by channel and band attention, recompose, and
    /// blend with the residual path.
    pub fn spectral_block_t(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Var {
        let l = self.cfg.l;
        let spec = tape.rfft(x);
        let power = tape.spec_power(spec, &self.masks.masks);
        let wc = channel_attention_t(tape, power, p.var("nesta.spec.wc"), p.var("nesta.spec.bc"));
        let ws = spectral_attention_t(tape, power, p.var("nesta.spec.ws"), p.var("nesta.spec.bs"));
        spectral_recompose_t(
            tape,
            spec,
            &self.masks.masks,
            wc,
            ws,
            x,
            p.var("nesta.alpha"),
            p.var("nesta.spec.ln.g"),
            p.var("nesta.spec.ln.b"),
            l,
        )
    }

    /// Full differentiable encode of a batch.
    pub fn encode_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &EEGBatch,
        mode: &mut Mode,
        flags: EncoderFlags,
    ) -> Result<Var> {
        let shape = batch.eeg.shape();
        if shape[1] != self.cfg.c || shape[2] != self.cfg.l {
            return Err(Error::data(format!(
                "batch shaped {shape:?} does not match encoder C={}, L={}",
                self.cfg.c, self.cfg.l
            )));
        }
        for &sid in &batch.subject_ids {
            if sid >= self.cfg.n_subjects {
                return Err(Error::data(format!(
                    "subject id {sid} out of range ({} subjects)",
                    self.cfg.n_subjects
                )));
            }
        }
        let x = tape.leaf(batch.eeg.clone());
        let x = if flags.subject_specific {
            let m = p.var("nesta.subject_m");
            tape.subject_transform(m, x, &batch.subject_ids)
        } else {
            x
        };
        let (x, _probs) = self.attention_block_t(tape, p, x, mode);
        let x = if flags.neural_spectral { self.spectral_block_t(tape, p, x) } else { x };
        Ok(project_embedding_t(
            tape,
            x,
            p.var("nesta.proj.ln.g"),
            p.var("nesta.proj.ln.b"),
            p.var("nesta.proj.w"),
            p.var("nesta.proj.b"),
        ))
    }

    /// Evaluation-mode encode returning plain embeddings `[B, F]`.
    pub fn encode(
        &self,
        store: &ParamStore,
        batch: &EEGBatch,
        flags: EncoderFlags,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = self.encode_t(&mut tape, &p, batch, &mut Mode::Eval, flags)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode attention block on a plain tensor.
    pub fn temporal_attention_block(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (out, _) = self.attention_block_t(&mut tape, &p, xv, &mut Mode::Eval);
        tape.value(out).clone()
    }

    /// Attention probabilities `[B, H, C, C]` for inspection.
    pub fn attention_probs(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let (_, probs) = self.attention_block_t(&mut tape, &p, xv, &mut Mode::Eval);
        let b = x.shape()[0];
        let c = x.shape()[1];
        tape.value(probs).reshape(&[b, self.cfg.heads, c, c])
    }
}

/// The two-affine-layer baseline encoder.
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    pub c: usize,
    pub l: usize,
    pub f: usize,
    pub hidden: usize,
}

impl MlpBaseline {
    pub fn new(c: usize, l: usize, f: usize) -> Self {
        MlpBaseline { c, l, f, hidden: 2 * f }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.c * self.l;
        store.insert("mlp.w1", glorot(&[d, self.hidden], d, self.hidden, rng));
        store.insert("mlp.b1", Tensor::zeros(&[self.hidden]));
        store.insert("mlp.w2", glorot(&[self.hidden, self.f], self.hidden, self.f, rng));
        store.insert("mlp.b2", Tensor::zeros(&[self.f]));
    }

    pub fn encode_t(&self, tape: &mut Tape, p: &BoundParams, batch: &EEGBatch) -> Result<Var> {
        let shape = batch.eeg.shape();
        if shape[1] != self.c || shape[2] != self.l {
            return Err(Error::data(format!(
                "batch shaped {shape:?} does not match baseline C={}, L={}",
                self.c, self.l
            )));
        }
        let x = tape.leaf(batch.eeg.clone());
        let flat = tape.reshape(x, &[shape[0], self.c * self.l]);
        let h = tape.matmul(flat, p.var("mlp.w1"));
        let h = tape.add_bias(h, p.var("mlp.b1"));
        let h = tape.gelu(h);
        let z = tape.matmul(h, p.var("mlp.w2"));
        let z = tape.add_bias(z, p.var("mlp.b2"));
        Ok(tape.row_l2_norm(z))
    }

    pub fn encode(&self, store: &ParamStore, batch: &EEGBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = self.encode_t(&mut tape, &p, batch)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config() -> NestaConfig {
        NestaConfig {
            n_subjects: 2,
            c: 4,
            l: 16,
            f: 8,
            heads: 4,
            ff_expansion: 2,
            ff_kernel: 3,
            dropout: 0.25,
            band_edges_hz: CANONICAL_BAND_EDGES.to_vec(),
            sampling_rate_hz: 128.0,
        }
    }

    fn toy_batch(b: usize, c: usize, l: usize, seed: u64) -> EEGBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EEGBatch {
            eeg: Tensor::randn(&[b, c, l], 1.0, &mut rng),
            subject_ids: (0..b).map(|i| i % 2).collect(),
            class_ids: (0..b as u32).collect(),
            exemplar_ids: vec![0; b],
        }
    }

    fn toy_model_and_store(seed: u64) -> (NestaModel, ParamStore) {
        let model = NestaModel::new(toy_config()).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init_params(&mut store, &mut rng);
        (model, store)
    }

    #[test]
    fn subject_transform_identity_passes_through() {
        let batch = toy_batch(3, 4, 16, 1);
        let mut m = Tensor::zeros(&[2, 4, 4]);
        for s in 0..2 {
            for i in 0..4 {
                m.data_mut()[s * 16 + i * 4 + i] = 1.0;
            }
        }
        let out = subject_transform(&batch, &m).unwrap();
        assert_eq!(out, batch.eeg);
    }

    #[test]
    fn subject_transform_swap_matrix_swaps_channels() {
        let batch = EEGBatch {
            eeg: Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            subject_ids: vec![0],
            class_ids: vec![0],
            exemplar_ids: vec![0],
        };
        let m = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let out = subject_transform(&batch, &m).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn subject_transform_is_per_subject_local() {
        let batch = toy_batch(4, 4, 16, 2); // subjects alternate 0,1,0,1
        let mut m = Tensor::zeros(&[2, 4, 4]);
        for s in 0..2 {
            for i in 0..4 {
                m.data_mut()[s * 16 + i * 4 + i] = 1.0;
            }
        }
        let base = subject_transform(&batch, &m).unwrap();
        // Perturb subject 1's matrix only.
        let mut m2 = m.clone();
        m2.data_mut()[16] += 0.5;
        let out = subject_transform(&batch, &m2).unwrap();
        let (c, l) = (4, 16);
        for i in 0..4 {
            let a = &base.data()[i * c * l..(i + 1) * c * l];
            let b = &out.data()[i * c * l..(i + 1) * c * l];
            if batch.subject_ids[i] == 0 {
                assert_eq!(a, b, "subject-0 row {i} changed");
            } else {
                assert_ne!(a, b, "subject-1 row {i} should change");
            }
        }
        let err = subject_transform(&batch, &Tensor::zeros(&[1, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn attention_block_is_deterministic_in_eval_mode() {
        let (model, store) = toy_model_and_store(3);
        let x = toy_batch(2, 4, 16, 4).eeg;
        let a = model.temporal_attention_block(&store, &x);
        let b = model.temporal_attention_block(&store, &x);
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (model, store) = toy_model_and_store(5);
        let x = toy_batch(2, 4, 16, 6).eeg;
        let probs = model.attention_probs(&store, &x);
        assert_eq!(probs.shape(), &[2, 4, 4, 4]);
        for row in probs.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "attention row sums to {s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn band_decompose_zero_signal_gives_zero_spectrum() {
        let x = Tensor::zeros(&[1, 2, 32]);
        let s = band_decompose(&x, 128.0, &CANONICAL_BAND_EDGES).unwrap();
        assert!(s.spectrum.data().iter().all(|&v| v == 0.0));
        assert!(band_power(&s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_hz_cosine_lands_entirely_in_alpha() {
        let (fs, l) = (250.0, 250);
        let x = Tensor::new(
            &[1, 1, l],
            (0..l).map(|n| (2.0 * std::f64::consts::PI * 10.0 * n as f64 / fs).cos()).collect(),
        );
        let s = band_decompose(&x, fs, &CANONICAL_BAND_EDGES).unwrap();
        let p = band_power(&s);
        assert_eq!(p.shape(), &[1, 1, 5]);
        let alpha_idx = 2;
        assert!(p.data()[alpha_idx] > 0.0);
        for (b, &v) in p.data().iter().enumerate() {
            if b != alpha_idx {
                assert!(v < 1e-12, "band {b} has power {v}");
            }
        }
        // Magnitude outside the alpha mask is numerically zero.
        let bins = s.masks.bins();
        for k in 0..bins {
            let m_alpha = s.masks.masks.data()[alpha_idx * bins + k];
            let re = s.spectrum.data()[k];
            let im = s.spectrum.data()[bins + k];
            if m_alpha == 0.0 {
                assert!((re * re + im * im).sqrt() < 1e-9, "bin {k} leaks");
            }
        }
    }

    #[test]
    fn default_masks_are_disjoint_and_cover_the_banded_range() {
        for (l, fs) in [(250usize, 250.0), (64, 128.0)] {
            let m = band_masks(l, fs, &CANONICAL_BAND_EDGES).unwrap();
            let bins = m.bins();
            let nyquist = fs / 2.0;
            let top = 100.0f64.min(nyquist);
            for k in 0..bins {
                let f = fft::bin_hz(k, l, fs);
                let cover: f64 = (0..m.n_bands()).map(|b| m.masks.data()[b * bins + k]).sum();
                assert!(cover <= 1.0, "bin {k} covered {cover} times");
                let expect = if f >= 0.5 && f < top {
                    1.0
                } else if (f - nyquist).abs() < 1e-9 && 100.0 >= nyquist {
                    1.0 // clipped top band takes the Nyquist bin
                } else {
                    0.0
                };
                assert_eq!(cover, expect, "bin {k} at {f} Hz (fs {fs})");
            }
        }
    }

    #[test]
    fn low_edge_at_nyquist_is_rejected() {
        let err = band_masks(64, 100.0, &[(0.5, 4.0), (50.0, 80.0)]).unwrap_err();
        assert!(err.to_string().contains("Nyquist"), "{err}");
    }

    #[test]
    fn band_power_sums_to_masked_total_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 3, 64], 1.0, &mut rng);
        let s = band_decompose(&x, 128.0, &CANONICAL_BAND_EDGES).unwrap();
        let p = band_power(&s);
        let bins = s.masks.bins();
        let nb = s.masks.n_bands();
        for bi in 0..2 {
            for ci in 0..3 {
                let by_bands: f64 = (0..nb).map(|b| p.data()[(bi * 3 + ci) * nb + b]).sum();
                let base = (bi * 3 + ci) * 2 * bins;
                let mut direct = 0.0;
                for k in 0..bins {
                    let in_union: f64 = (0..nb).map(|b| s.masks.masks.data()[b * bins + k]).sum();
                    if in_union > 0.0 {
                        let re = s.spectrum.data()[base + k];
                        let im = s.spectrum.data()[base + bins + k];
                        direct += re * re + im * im;
                    }
                }
                let rel = (by_bands - direct).abs() / direct.max(1e-30);
                assert!(rel < 1e-6, "masked power mismatch {rel}");
            }
        }
    }

    #[test]
    fn channel_attention_matches_sigmoid_cases() {
        let p = Tensor::ones(&[2, 3, 5]);
        let w0 = Tensor::zeros(&[3, 3]);
        let b0 = Tensor::zeros(&[3]);
        let out = channel_attention(&p, &w0, &b0);
        assert_eq!(out.shape(), &[2, 3, 1]);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pr = Tensor::randn(&[2, 3, 5], 1.0, &mut rng).map(f64::abs);
        let wr = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let br = Tensor::randn(&[3], 1.0, &mut rng);
        let outr = channel_attention(&pr, &wr, &br);
        assert!(outr.data().iter().all(|&v| v > 0.0 && v < 1.0), "sigmoid range violated");

        let mut bhot = Tensor::zeros(&[3]);
        bhot.data_mut()[1] = 20.0;
        let hot = channel_attention(&p, &w0, &bhot);
        assert!(hot.data()[1] > 0.999, "got {}", hot.data()[1]);
    }

    #[test]
    fn spectral_attention_matches_softmax_cases() {
        let p = Tensor::ones(&[2, 3, 5]);
        let w0 = Tensor::zeros(&[5, 5]);
        let b0 = Tensor::zeros(&[5]);
        let out = spectral_attention(&p, &w0, &b0);
        assert_eq!(out.shape(), &[2, 5]);
        assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pr = Tensor::randn(&[2, 3, 5], 1.0, &mut rng).map(f64::abs);
        let wr = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let br = Tensor::randn(&[5], 1.0, &mut rng);
        let outr = spectral_attention(&pr, &wr, &br);
        for row in outr.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }

        let mut bhot = Tensor::zeros(&[5]);
        bhot.data_mut()[3] = 20.0; // beta
        let hot = spectral_attention(&p, &w0, &bhot);
        assert!(hot.data()[3] > 0.999, "got {}", hot.data()[3]);
    }

    #[test]
    fn recompose_alpha_zero_returns_residual_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[1, 2, 16], 1.0, &mut rng);
        let s = band_decompose(&x, 128.0, &CANONICAL_BAND_EDGES).unwrap();
        let wc = Tensor::ones(&[1, 2, 1]);
        let ws = Tensor::ones(&[1, 5]);
        let g = Tensor::ones(&[16]);
        let b = Tensor::zeros(&[16]);
        let out = spectral_recompose(&s, &wc, &ws, &x, 0.0, &g, &b).unwrap();
        assert_eq!(out, x);
        assert!(spectral_recompose(&s, &wc, &ws, &x, 1.5, &g, &b).is_err());
    }

    #[test]
    fn recompose_round_trip_with_full_partition_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 16], 1.0, &mut rng);
        // Edges covering DC through (and including) Nyquist.
        let full: Vec<(f64, f64)> =
            vec![(0.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 1e9)];
        let s = band_decompose(&x, 128.0, &full).unwrap();
        let bins = s.masks.bins();
        for k in 0..bins {
            let cover: f64 = (0..5).map(|b| s.masks.masks.data()[b * bins + k]).sum();
            assert_eq!(cover, 1.0, "bin {k} not covered exactly once");
        }
        let wc = Tensor::ones(&[2, 3, 1]);
        let ws = Tensor::ones(&[2, 5]);
        let g = Tensor::ones(&[16]);
        let b = Tensor::zeros(&[16]);
        let out = spectral_recompose(&s, &wc, &ws, &x, 1.0, &g, &b).unwrap();
        // alpha=1 with unit weights is LayerNorm(IFFT(FFT(x))) = LayerNorm(x).
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gv = tape.leaf(g);
        let bv = tape.leaf(b);
        let ln = tape.layer_norm(xv, gv, bv);
        let expect = tape.value(ln).clone();
        assert!(out.max_abs_diff(&expect) < 1e-5, "round trip error {}", out.max_abs_diff(&expect));
    }

    #[test]
    fn projection_emits_unit_rows_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[3, 4, 16], 1.0, &mut rng);
        let g = Tensor::ones(&[16]);
        let b = Tensor::zeros(&[16]);
        let w = Tensor::randn(&[64, 8], 0.2, &mut rng);
        let bias = Tensor::randn(&[8], 0.2, &mut rng);
        let out = project_embedding(&x, &g, &b, &w, &bias);
        assert_eq!(out.shape(), &[3, 8]);
        for row in out.data().chunks(8) {
            let n = crate::tensor::norm(row);
            assert!((n - 1.0).abs() < 1e-6, "row norm {n}");
        }
        // Scaling the pre-normalization output scales w and b together.
        let out2 = project_embedding(&x, &g, &b, &w.scale(3.7), &bias.scale(3.7));
        assert!(out.max_abs_diff(&out2) < 1e-6);
    }

    #[test]
    fn encode_degenerates_to_projection_when_trunk_is_neutral() {
        let (model, mut store) = toy_model_and_store(13);
        // Zero the attention output path, the feed-forward output conv, and
        // the blend: the trunk becomes the identity.
        *store.get_mut("nesta.attn.wo") = Tensor::zeros(&[16, 16]);
        *store.get_mut("nesta.attn.bo") = Tensor::zeros(&[16]);
        *store.get_mut("nesta.ffn.w2") = Tensor::zeros(&[1, 2, 3]);
        *store.get_mut("nesta.ffn.b2") = Tensor::zeros(&[1]);
        *store.get_mut("nesta.alpha") = Tensor::scalar(0.0);
        let batch = toy_batch(2, 4, 16, 14);
        let enc = model.encode(&store, &batch, EncoderFlags::default()).unwrap();
        let direct = project_embedding(
            &batch.eeg,
            store.get("nesta.proj.ln.g"),
            store.get("nesta.proj.ln.b"),
            store.get("nesta.proj.w"),
            store.get("nesta.proj.b"),
        );
        assert!(enc.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn encode_emits_unit_rows_of_dim_f() {
        let (model, store) = toy_model_and_store(15);
        let batch = toy_batch(3, 4, 16, 16);
        let out = model.encode(&store, &batch, EncoderFlags::default()).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        for row in out.data().chunks(8) {
            let n = crate::tensor::norm(row);
            assert!((n - 1.0).abs() < 1e-6, "row norm {n}");
        }
    }

    #[test]
    fn mlp_baseline_emits_unit_rows_and_is_deterministic() {
        let mlp = MlpBaseline::new(4, 16, 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        mlp.init_params(&mut store, &mut rng);
        let batch = toy_batch(3, 4, 16, 18);
        let a = mlp.encode(&store, &batch).unwrap();
        let b = mlp.encode(&store, &batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 8]);
        for row in a.data().chunks(8) {
            assert!((crate::tensor::norm(row) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_window_length() {
        let mut cfg = toy_config();
        cfg.l = 18;
        cfg.heads = 4;
        assert!(NestaModel::new(cfg).is_err());
    }
}
