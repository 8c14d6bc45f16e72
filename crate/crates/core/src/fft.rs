//! One-sided real FFT with orthonormal scaling, plus the adjoint maps the
//! differentiable graph needs for backpropagation.
//!
//! Conventions, for a real signal `x` of length `L` and `F_r = L/2 + 1`
//! one-sided bins (`(L+1)/2` for odd `L`):
//!
//! ```text
//! rfft:   X[k] = (1/sqrt(L)) * sum_n x[n] * exp(-i 2 pi k n / L),  k = 0..F_r-1
//! irfft:  x[n] = (1/sqrt(L)) * Re( sum_k X_full[k] * exp(+i 2 pi k n / L) )
//! ```
//!
//! where `X_full` mirrors the one-sided bins with conjugate symmetry. The
//! `1/sqrt(L)` factor on both directions makes the pair orthonormal, so
//! `irfft(rfft(x)) == x` and total spectral power equals total signal power
//! when the doubled interior bins are accounted for (see [`bin_weight`]).
//!
//! The adjoints are not the inverses: interior one-sided bins represent two
//! bins of the full spectrum, so the adjoint of `rfft` weights all one-sided
//! bins equally while the adjoint of `irfft` doubles the interior bins. Both
//! are derived from the real linear maps above and checked in tests via the
//! defining identity `<F x, g> == <x, F* g>`.
//!
//! The complex transform underneath is `rustfft`, which handles arbitrary
//! lengths; everything in this module owns the scaling and symmetry logic.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

fn plan_inverse(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Number of one-sided spectrum bins for signal length `l`.
pub fn rfft_bins(l: usize) -> usize {
    l / 2 + 1
}

/// Center frequency in Hz of one-sided bin `k` for signal length `l` sampled
/// at `fs` Hz.
pub fn bin_hz(k: usize, l: usize, fs: f64) -> f64 {
    k as f64 * fs / l as f64
}

/// Multiplicity of one-sided bin `k` in the full spectrum: 2 for interior
/// bins, 1 for DC and (even `l`) Nyquist.
pub fn bin_weight(k: usize, l: usize) -> f64 {
    if k == 0 || (l % 2 == 0 && k == l / 2) {
        1.0
    } else {
        2.0
    }
}

/// Forward one-sided transform of a length-`l` real signal. Returns
/// `(re, im)`, each of length `rfft_bins(l)`.
pub fn rfft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = x.len();
    assert!(l >= 2, "rfft needs at least 2 samples, got {l}");
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan_forward(l).process(&mut buf);
    let bins = rfft_bins(l);
    let s = 1.0 / (l as f64).sqrt();
    let re = buf[..bins].iter().map(|c| c.re * s).collect();
    let im = buf[..bins].iter().map(|c| c.im * s).collect();
    (re, im)
}

/// Inverse of [`rfft`]: reconstructs the length-`l` real signal from one-sided
/// bins, assuming conjugate symmetry of the implied full spectrum. Imaginary
/// parts of the DC and Nyquist bins do not contribute (they have no real
/// signal counterpart).
pub fn irfft(re: &[f64], im: &[f64], l: usize) -> Vec<f64> {
    let bins = rfft_bins(l);
    assert_eq!(re.len(), bins, "irfft: expected {bins} re bins for length {l}");
    assert_eq!(im.len(), bins, "irfft: expected {bins} im bins for length {l}");
    let mut buf = vec![Complex::new(0.0, 0.0); l];
    for k in 0..bins {
        buf[k] = Complex::new(re[k], im[k]);
    }
    // Mirror interior bins; for even l the bin at k = l/2 is its own mirror.
    for k in 1..bins {
        if l % 2 == 0 && k == l / 2 {
            continue;
        }
        buf[l - k] = Complex::new(re[k], -im[k]);
    }
    plan_inverse(l).process(&mut buf);
    let s = 1.0 / (l as f64).sqrt();
    buf.iter().map(|c| c.re * s).collect()
}

/// Adjoint of [`rfft`]: maps a cotangent on the one-sided spectrum back to a
/// cotangent on the signal.
///
/// From `re[k] = (1/sqrt(L)) sum_n x[n] cos(2 pi k n / L)` and
/// `im[k] = -(1/sqrt(L)) sum_n x[n] sin(2 pi k n / L)`:
///
/// ```text
/// dx[n] = (1/sqrt(L)) sum_k ( g_re[k] cos(2 pi k n / L) - g_im[k] sin(2 pi k n / L) )
///       = (1/sqrt(L)) Re( sum_k (g_re[k] + i g_im[k]) exp(+i 2 pi k n / L) )
/// ```
///
/// i.e. an unmirrored zero-padded inverse transform: every one-sided bin
/// enters exactly once.
pub fn rfft_adjoint(g_re: &[f64], g_im: &[f64], l: usize) -> Vec<f64> {
    let bins = rfft_bins(l);
    assert_eq!(g_re.len(), bins, "rfft_adjoint: expected {bins} re bins for length {l}");
    assert_eq!(g_im.len(), bins, "rfft_adjoint: expected {bins} im bins for length {l}");
    let mut buf = vec![Complex::new(0.0, 0.0); l];
    for k in 0..bins {
        buf[k] = Complex::new(g_re[k], g_im[k]);
    }
    plan_inverse(l).process(&mut buf);
    let s = 1.0 / (l as f64).sqrt();
    buf.iter().map(|c| c.re * s).collect()
}

/// Adjoint of [`irfft`]: maps a cotangent on the signal back to a cotangent on
/// the one-sided spectrum. Interior bins pick up their multiplicity 2 from the
/// conjugate mirror; imaginary parts of DC and Nyquist get zero because the
/// forward map ignores them.
pub fn irfft_adjoint(g: &[f64], l: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(g.len(), l, "irfft_adjoint: signal cotangent must have length {l}");
    let (r, i) = rfft(g);
    let bins = rfft_bins(l);
    let mut g_re = vec![0.0; bins];
    let mut g_im = vec![0.0; bins];
    for k in 0..bins {
        let w = bin_weight(k, l);
        g_re[k] = w * r[k];
        if w == 2.0 {
            g_im[k] = w * i[k];
        }
    }
    (g_re, g_im)
}

/// Batched [`rfft`] over the last axis: `[..., L]` to `[..., 2, F_r]` with
/// real parts at index 0 of the new axis and imaginary parts at index 1.
pub fn rfft_tensor(x: &Tensor) -> Tensor {
    let shape = x.shape();
    assert!(!shape.is_empty(), "rfft_tensor needs at least 1 axis");
    let l = shape[shape.len() - 1];
    let bins = rfft_bins(l);
    let rows = x.numel() / l;
    let mut out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
    out_shape.push(2);
    out_shape.push(bins);
    let mut out = vec![0.0; rows * 2 * bins];
    for r in 0..rows {
        let (re, im) = rfft(&x.data()[r * l..(r + 1) * l]);
        out[r * 2 * bins..r * 2 * bins + bins].copy_from_slice(&re);
        out[r * 2 * bins + bins..(r + 1) * 2 * bins].copy_from_slice(&im);
    }
    Tensor::new(&out_shape, out)
}

/// Batched [`irfft`]: `[..., 2, F_r]` back to `[..., L]`.
pub fn irfft_tensor(spec: &Tensor, l: usize) -> Tensor {
    let shape = spec.shape();
    let n = shape.len();
    assert!(n >= 2 && shape[n - 2] == 2, "spectrum must be [..., 2, bins], got {shape:?}");
    let bins = shape[n - 1];
    assert_eq!(bins, rfft_bins(l), "bin count {bins} does not match length {l}");
    let rows = spec.numel() / (2 * bins);
    let mut out_shape: Vec<usize> = shape[..n - 2].to_vec();
    out_shape.push(l);
    let mut out = vec![0.0; rows * l];
    for r in 0..rows {
        let base = r * 2 * bins;
        let x = irfft(&spec.data()[base..base + bins], &spec.data()[base + bins..base + 2 * bins], l);
        out[r * l..(r + 1) * l].copy_from_slice(&x);
    }
    Tensor::new(&out_shape, out)
}

/// Batched [`rfft_adjoint`], same layout convention as [`rfft_tensor`].
pub fn rfft_adjoint_tensor(g: &Tensor, l: usize) -> Tensor {
    let shape = g.shape();
    let n = shape.len();
    assert!(n >= 2 && shape[n - 2] == 2, "cotangent must be [..., 2, bins], got {shape:?}");
    let bins = shape[n - 1];
    assert_eq!(bins, rfft_bins(l), "bin count {bins} does not match length {l}");
    let rows = g.numel() / (2 * bins);
    let mut out_shape: Vec<usize> = shape[..n - 2].to_vec();
    out_shape.push(l);
    let mut out = vec![0.0; rows * l];
    for r in 0..rows {
        let base = r * 2 * bins;
        let x = rfft_adjoint(&g.data()[base..base + bins], &g.data()[base + bins..base + 2 * bins], l);
        out[r * l..(r + 1) * l].copy_from_slice(&x);
    }
    Tensor::new(&out_shape, out)
}

/// Batched [`irfft_adjoint`], producing the `[..., 2, F_r]` layout.
pub fn irfft_adjoint_tensor(g: &Tensor, l: usize) -> Tensor {
    let shape = g.shape();
    assert!(!shape.is_empty(), "irfft_adjoint_tensor needs at least 1 axis");
    assert_eq!(shape[shape.len() - 1], l, "signal cotangent last axis must be {l}");
    let bins = rfft_bins(l);
    let rows = g.numel() / l;
    let mut out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
    out_shape.push(2);
    out_shape.push(bins);
    let mut out = vec![0.0; rows * 2 * bins];
    for r in 0..rows {
        let (re, im) = irfft_adjoint(&g.data()[r * l..(r + 1) * l], l);
        out[r * 2 * bins..r * 2 * bins + bins].copy_from_slice(&re);
        out[r * 2 * bins + bins..(r + 1) * 2 * bins].copy_from_slice(&im);
    }
    Tensor::new(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn round_trip_even_and_odd_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for l in [2usize, 8, 63, 64, 250] {
            let x = random_signal(l, &mut rng);
            let (re, im) = rfft(&x);
            let y = irfft(&re, &im, l);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "round trip error {err} at length {l}");
        }
    }

    #[test]
    fn parseval_with_bin_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for l in [16usize, 63, 250] {
            let x = random_signal(l, &mut rng);
            let (re, im) = rfft(&x);
            let sig_power: f64 = x.iter().map(|v| v * v).sum();
            let spec_power: f64 = (0..re.len())
                .map(|k| bin_weight(k, l) * (re[k] * re[k] + im[k] * im[k]))
                .sum();
            let rel = (sig_power - spec_power).abs() / sig_power;
            assert!(rel < 1e-12, "parseval relative error {rel} at length {l}");
        }
    }

    #[test]
    fn pure_cosine_lands_in_one_bin() {
        let l = 64;
        let k0 = 5;
        let x: Vec<f64> =
            (0..l).map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / l as f64).cos()).collect();
        let (re, im) = rfft(&x);
        for k in 0..re.len() {
            let p = re[k] * re[k] + im[k] * im[k];
            if k == k0 {
                // Orthonormal scaling: a unit cosine at an exact bin carries
                // amplitude sqrt(L)/2 in each mirrored bin.
                assert!((p - l as f64 / 4.0).abs() < 1e-9, "bin {k} power {p}");
            } else {
                assert!(p < 1e-18, "leakage {p} at bin {k}");
            }
        }
    }

    /// The defining adjoint identity: <F x, g> == <x, F* g> for random x, g.
    #[test]
    fn rfft_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in [8usize, 15, 64] {
            let bins = rfft_bins(l);
            let x = random_signal(l, &mut rng);
            let g_re = random_signal(bins, &mut rng);
            let g_im = random_signal(bins, &mut rng);
            let (fx_re, fx_im) = rfft(&x);
            let lhs: f64 = (0..bins).map(|k| fx_re[k] * g_re[k] + fx_im[k] * g_im[k]).sum();
            let fstar = rfft_adjoint(&g_re, &g_im, l);
            let rhs: f64 = (0..l).map(|n| x[n] * fstar[n]).sum();
            assert!((lhs - rhs).abs() < 1e-12, "rfft adjoint mismatch at length {l}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn irfft_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for l in [8usize, 15, 64] {
            let bins = rfft_bins(l);
            let s_re = random_signal(bins, &mut rng);
            let s_im = random_signal(bins, &mut rng);
            let y = random_signal(l, &mut rng);
            let x = irfft(&s_re, &s_im, l);
            let lhs: f64 = (0..l).map(|n| x[n] * y[n]).sum();
            let (g_re, g_im) = irfft_adjoint(&y, l);
            let rhs: f64 = (0..bins).map(|k| s_re[k] * g_re[k] + s_im[k] * g_im[k]).sum();
            assert!((lhs - rhs).abs() < 1e-12, "irfft adjoint mismatch at length {l}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn tensor_wrappers_match_slice_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c, l) = (2, 3, 16);
        let x = Tensor::new(&[b, c, l], random_signal(b * c * l, &mut rng));
        let spec = rfft_tensor(&x);
        assert_eq!(spec.shape(), &[b, c, 2, rfft_bins(l)]);
        let back = irfft_tensor(&spec, l);
        assert!(x.max_abs_diff(&back) < 1e-12);
        let (re0, im0) = rfft(&x.data()[..l]);
        let bins = rfft_bins(l);
        assert_eq!(&spec.data()[..bins], &re0[..]);
        assert_eq!(&spec.data()[bins..2 * bins], &im0[..]);
    }
}
