//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records a forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] walks the list once in reverse and
//! accumulates cotangents. The op set is exactly what the encoder, alignment,
//! and objective need: dense and batched matrix products, the pointwise
//! nonlinearities, layer normalization, same-padded 1-D convolution, the
//! one-sided FFT pair from [`crate::fft`], and the two fused spectral ops
//! (band power and band-weighted recomposition).
//!
//! Every op's backward is checked against central finite differences in the
//! tests at the bottom of this module; model-level compositions are re-checked
//! through the gradient-check registry.

use crate::fft;
use crate::tensor::Tensor;

/// Epsilon inside layer-norm variance denominators.
pub const LN_EPS: f64 = 1e-5;

/// Epsilon guarding row normalization of near-zero rows.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add,
    Sub,
    Scale(f64),
    /// Add a fixed tensor (noise draws, frozen offsets); the sum is taken
    /// eagerly, so the gradient passes through untouched.
    AddConstTensor,
    /// Multiply by a fixed tensor (dropout masks).
    MulConstTensor(Tensor),
    /// `alpha * a + (1 - alpha) * b` with `alpha` a learnable scalar.
    Blend,
    Matmul,
    /// Batched matmul: `[n, m, k] x [n, k, p]`.
    Bmm,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    /// Bias over the last axis.
    AddBias,
    Softmax,
    Sigmoid,
    Gelu,
    LayerNorm,
    RowL2Norm,
    MeanLast,
    SumAll,
    MeanAll,
    RowLogSumExp,
    DiagOnly,
    ConcatRows,
    Conv1dSame,
    /// Per-sample `[C, C]` transform selected by subject id.
    SubjectTransform(Vec<usize>),
    Rfft,
    Irfft(usize),
    /// Per-band masked power of a stacked `[..., 2, bins]` spectrum.
    SpecPower(Tensor),
    /// Channel- and band-weighted rescale of a stacked spectrum.
    SpecWeight(Tensor),
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op) -> Var {
        self.nodes.push(Node { value, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// New input node. Whether its gradient is used is up to the caller.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, vec![a.0, b.0], Op::Sub)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, vec![a.0], Op::Scale(c))
    }

    pub fn add_const(&mut self, a: Var, t: Tensor) -> Var {
        let v = self.value(a).add(&t);
        self.push(v, vec![a.0], Op::AddConstTensor)
    }

    pub fn mul_const(&mut self, a: Var, t: Tensor) -> Var {
        let v = self.value(a).zip(&t, |x, m| x * m);
        self.push(v, vec![a.0], Op::MulConstTensor(t))
    }

    /// `alpha * a + (1 - alpha) * b`; `alpha` must be a `[1]` tensor.
    pub fn blend(&mut self, a: Var, b: Var, alpha: Var) -> Var {
        assert_eq!(self.value(alpha).numel(), 1, "blend alpha must be scalar");
        let al = self.value(alpha).data()[0];
        let v = self.value(a).zip(self.value(b), |x, y| al * x + (1.0 - al) * y);
        self.push(v, vec![a.0, b.0, alpha.0], Op::Blend)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, vec![a.0, b.0], Op::Matmul)
    }

    /// Batched matmul over the leading axis: `[n, m, k] x [n, k, p] -> [n, m, p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-D, got {sa:?}");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-D, got {sb:?}");
        assert_eq!(sa[0], sb[0], "bmm batch dims differ");
        assert_eq!(sa[2], sb[1], "bmm inner dims differ: {sa:?} x {sb:?}");
        let (n, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; n * m * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for t in 0..n {
            for i in 0..m {
                for q in 0..k {
                    let x = da[t * m * k + i * k + q];
                    if x == 0.0 {
                        continue;
                    }
                    let row = &db[t * k * p + q * p..t * k * p + (q + 1) * p];
                    let dst = &mut out[t * m * p + i * p..t * m * p + (i + 1) * p];
                    for j in 0..p {
                        dst[j] += x * row[j];
                    }
                }
            }
        }
        self.push(Tensor::new(&[n, m, p], out), vec![a.0, b.0], Op::Bmm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = permute_tensor(self.value(a), perm);
        self.push(v, vec![a.0], Op::Permute(perm.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.value(a).shape().to_vec();
        let v = self.value(a).reshape(shape);
        self.push(v, vec![a.0], Op::Reshape(from))
    }

    /// `x + b` with `b` broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.value(x).shape().last().expect("add_bias needs at least 1 axis");
        assert_eq!(self.value(b).shape(), &[n], "bias must be [last axis]");
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bd[i % n];
        }
        self.push(v, vec![x.0, b.0], Op::AddBias)
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("softmax needs at least 1 axis");
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        self.push(v, vec![a.0], Op::Softmax)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, vec![a.0], Op::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, vec![a.0], Op::Gelu)
    }

    /// Layer normalization over the last axis with elementwise affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let n = *self.value(x).shape().last().expect("layer_norm needs at least 1 axis");
        assert_eq!(self.value(gamma).shape(), &[n], "layer_norm gamma must be [last axis]");
        assert_eq!(self.value(beta).shape(), &[n], "layer_norm beta must be [last axis]");
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            let (mu, inv) = row_mean_inv(row);
            for (j, e) in row.iter_mut().enumerate() {
                *e = g[j] * ((*e - mu) * inv) + b[j];
            }
        }
        self.push(v, vec![x.0, gamma.0, beta.0], Op::LayerNorm)
    }

    /// L2-normalize along the last axis.
    pub fn row_l2_norm(&mut self, a: Var) -> Var {
        let n = *self.value(a).shape().last().expect("row_l2_norm needs at least 1 axis");
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            let nrm = row.iter().map(|e| e * e).sum::<f64>().sqrt().max(NORM_EPS);
            for e in row.iter_mut() {
                *e /= nrm;
            }
        }
        self.push(v, vec![a.0], Op::RowL2Norm)
    }

    /// Mean over the last axis; output drops that axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = *shape.last().expect("mean_last needs at least 1 axis");
        let out_shape: Vec<usize> =
            if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        self.push(Tensor::new(&out_shape, data), vec![a.0], Op::MeanLast)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), vec![a.0], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let n = self.value(a).numel() as f64;
        self.push(Tensor::scalar(s / n), vec![a.0], Op::MeanAll)
    }

    /// log-sum-exp over the last axis, max-subtracted.
    pub fn row_log_sum_exp(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = *shape.last().expect("row_log_sum_exp needs at least 1 axis");
        let out_shape: Vec<usize> =
            if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Tensor::new(&out_shape, data), vec![a.0], Op::RowLogSumExp)
    }

    /// Main diagonal of a square matrix.
    pub fn diag_only(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape();
        assert!(shape.len() == 2 && shape[0] == shape[1], "diag_only needs square 2-D, got {shape:?}");
        let m = shape[0];
        let data: Vec<f64> = (0..m).map(|i| self.value(a).data()[i * m + i]).collect();
        self.push(Tensor::new(&[m], data), vec![a.0], Op::DiagOnly)
    }

    /// Stack two matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], "concat_rows shape mismatch {sa:?} vs {sb:?}");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Tensor::new(&[sa[0] + sb[0], sa[1]], data), vec![a.0, b.0], Op::ConcatRows)
    }

    /// Same-padded 1-D convolution: `x [n, c_in, l]`, `w [c_out, c_in, k]`
    /// (odd `k`), `b [c_out]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        assert_eq!(sx.len(), 3, "conv1d input must be [n, c_in, l], got {sx:?}");
        assert_eq!(sw.len(), 3, "conv1d weight must be [c_out, c_in, k], got {sw:?}");
        assert_eq!(sx[1], sw[1], "conv1d channel mismatch: {sx:?} vs {sw:?}");
        assert_eq!(sw[2] % 2, 1, "conv1d kernel must be odd for same padding, got {}", sw[2]);
        let (n, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        assert_eq!(self.value(b).shape(), &[cout], "conv1d bias must be [c_out]");
        let pad = (k - 1) / 2;
        let (dx, dw, db) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * cout * l];
        for s in 0..n {
            for co in 0..cout {
                let dst = &mut out[(s * cout + co) * l..(s * cout + co + 1) * l];
                for t in 0..l {
                    let mut acc = db[co];
                    for ci in 0..cin {
                        let src = &dx[(s * cin + ci) * l..(s * cin + ci + 1) * l];
                        for j in 0..k {
                            let ti = t as isize + j as isize - pad as isize;
                            if ti >= 0 && (ti as usize) < l {
                                acc += dw[(co * cin + ci) * k + j] * src[ti as usize];
                            }
                        }
                    }
                    dst[t] = acc;
                }
            }
        }
        self.push(Tensor::new(&[n, cout, l], out), vec![x.0, w.0, b.0], Op::Conv1dSame)
    }

    /// Apply per-subject square matrices: `m [s, c, c]`, `x [b, c, l]`,
    /// `subject_ids[i]` selects the matrix for sample `i`.
    pub fn subject_transform(&mut self, m: Var, x: Var, subject_ids: &[usize]) -> Var {
        let sm = self.value(m).shape().to_vec();
        let sx = self.value(x).shape().to_vec();
        assert_eq!(sm.len(), 3, "subject matrices must be [s, c, c], got {sm:?}");
        assert_eq!(sm[1], sm[2], "subject matrices must be square, got {sm:?}");
        assert_eq!(sx.len(), 3, "input must be [b, c, l], got {sx:?}");
        assert_eq!(sm[1], sx[1], "channel mismatch: {sm:?} vs {sx:?}");
        assert_eq!(subject_ids.len(), sx[0], "need one subject id per sample");
        let (s, c, l) = (sm[0], sx[1], sx[2]);
        for &sid in subject_ids {
            assert!(sid < s, "subject id {sid} out of range {s}");
        }
        let (dm, dx) = (self.value(m).data(), self.value(x).data());
        let mut out = vec![0.0; sx[0] * c * l];
        for (i, &sid) in subject_ids.iter().enumerate() {
            let mat = &dm[sid * c * c..(sid + 1) * c * c];
            let src = &dx[i * c * l..(i + 1) * c * l];
            let dst = &mut out[i * c * l..(i + 1) * c * l];
            for r in 0..c {
                for q in 0..c {
                    let a = mat[r * c + q];
                    if a == 0.0 {
                        continue;
                    }
                    let row = &src[q * l..(q + 1) * l];
                    let d = &mut dst[r * l..(r + 1) * l];
                    for t in 0..l {
                        d[t] += a * row[t];
                    }
                }
            }
        }
        self.push(Tensor::new(&sx, out), vec![m.0, x.0], Op::SubjectTransform(subject_ids.to_vec()))
    }

    /// One-sided FFT over the last axis: `[..., l] -> [..., 2, bins]`.
    pub fn rfft(&mut self, a: Var) -> Var {
        let v = fft::rfft_tensor(self.value(a));
        self.push(v, vec![a.0], Op::Rfft)
    }

    /// Inverse one-sided FFT: `[..., 2, bins] -> [..., l]`.
    pub fn irfft(&mut self, a: Var, l: usize) -> Var {
        let v = fft::irfft_tensor(self.value(a), l);
        self.push(v, vec![a.0], Op::Irfft(l))
    }

    /// Masked band power of a stacked spectrum: `spec [b, c, 2, bins]` with
    /// `masks [n_bands, bins]` (0/1 entries) gives `[b, c, n_bands]`.
    pub fn spec_power(&mut self, spec: Var, masks: &Tensor) -> Var {
        let ss = self.value(spec).shape().to_vec();
        assert_eq!(ss.len(), 4, "spectrum must be [b, c, 2, bins], got {ss:?}");
        assert_eq!(ss[2], 2, "spectrum must stack re/im on axis 2, got {ss:?}");
        let sm = masks.shape();
        assert!(sm.len() == 2 && sm[1] == ss[3], "masks must be [n_bands, bins], got {sm:?}");
        let (b, c, bins, nb) = (ss[0], ss[1], ss[3], sm[0]);
        let d = self.value(spec).data();
        let md = masks.data();
        let mut out = vec![0.0; b * c * nb];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * 2 * bins;
                for band in 0..nb {
                    let mut acc = 0.0;
                    for k in 0..bins {
                        let m = md[band * bins + k];
                        if m != 0.0 {
                            let re = d[base + k];
                            let im = d[base + bins + k];
                            acc += m * (re * re + im * im);
                        }
                    }
                    out[(bi * c + ci) * nb + band] = acc;
                }
            }
        }
        self.push(Tensor::new(&[b, c, nb], out), vec![spec.0], Op::SpecPower(masks.clone()))
    }

    /// Weight a stacked spectrum by channel gains and per-band gains:
    /// `out[b,c,:,k] = spec[b,c,:,k] * w_c[b,c] * sum_band masks[band,k] * w_s[b,band]`.
    /// Bins outside every band are zeroed (they belong to no band).
    pub fn spec_weight(&mut self, spec: Var, w_c: Var, w_s: Var, masks: &Tensor) -> Var {
        let ss = self.value(spec).shape().to_vec();
        assert_eq!(ss.len(), 4, "spectrum must be [b, c, 2, bins], got {ss:?}");
        assert_eq!(ss[2], 2, "spectrum must stack re/im on axis 2");
        let (b, c, bins) = (ss[0], ss[1], ss[3]);
        assert_eq!(self.value(w_c).numel(), b * c, "w_c must have b*c elements");
        let nb = masks.shape()[0];
        assert_eq!(masks.shape()[1], bins, "masks must be [n_bands, bins]");
        assert_eq!(self.value(w_s).shape(), &[b, nb], "w_s must be [b, n_bands]");
        let field = band_field(self.value(w_s), masks);
        let d = self.value(spec).data();
        let wc = self.value(w_c).data();
        let mut out = vec![0.0; b * c * 2 * bins];
        for bi in 0..b {
            for ci in 0..c {
                let g = wc[bi * c + ci];
                let base = (bi * c + ci) * 2 * bins;
                for e in 0..2 {
                    for k in 0..bins {
                        out[base + e * bins + k] = d[base + e * bins + k] * g * field.data()[bi * bins + k];
                    }
                }
            }
        }
        self.push(Tensor::new(&ss, out), vec![spec.0, w_c.0, w_s.0], Op::SpecWeight(masks.clone()))
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            let contribs = self.node_backward(node, &g);
            for (pid, pg) in node.parents.iter().zip(contribs) {
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { by_node: grads }
    }

    /// Cotangents for each parent of `node`, given the node's cotangent `g`.
    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<Tensor> {
        let pv = |idx: usize| &self.nodes[node.parents[idx]].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.scale(-1.0)],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::AddConstTensor => vec![g.clone()],
            Op::MulConstTensor(t) => vec![g.zip(t, |x, m| x * m)],
            Op::Blend => {
                let (a, b) = (pv(0), pv(1));
                let al = pv(2).data()[0];
                let da = g.scale(al);
                let db = g.scale(1.0 - al);
                let dal: f64 = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(gi, (ai, bi))| gi * (ai - bi))
                    .sum();
                vec![da, db, Tensor::scalar(dal)]
            }
            Op::Matmul => {
                let (a, b) = (pv(0), pv(1));
                vec![g.matmul(&b.t()), a.t().matmul(g)]
            }
            Op::Bmm => {
                let (a, b) = (pv(0), pv(1));
                let (sa, sb) = (a.shape(), b.shape());
                let (n, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
                let mut da = vec![0.0; n * m * k];
                let mut db = vec![0.0; n * k * p];
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                for t in 0..n {
                    // da[t] = g[t] * b[t]^T ; db[t] = a[t]^T * g[t]
                    for i in 0..m {
                        for q in 0..k {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += gd[t * m * p + i * p + j] * bd[t * k * p + q * p + j];
                            }
                            da[t * m * k + i * k + q] = acc;
                        }
                    }
                    for q in 0..k {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[t * m * k + i * k + q] * gd[t * m * p + i * p + j];
                            }
                            db[t * k * p + q * p + j] = acc;
                        }
                    }
                }
                vec![Tensor::new(&[n, m, k], da), Tensor::new(&[n, k, p], db)]
            }
            Op::Permute(perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![permute_tensor(g, &inv)]
            }
            Op::Reshape(from) => vec![g.reshape(from)],
            Op::AddBias => {
                let n = *pv(1).shape().last().unwrap();
                let mut db = vec![0.0; n];
                for (i, e) in g.data().iter().enumerate() {
                    db[i % n] += e;
                }
                vec![g.clone(), Tensor::new(&[n], db)]
            }
            Op::Softmax => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = g.zip(y, |gi, yi| gi * yi);
                for (grow, pair) in
                    dx.data_mut().chunks_mut(n).zip(g.data().chunks(n).zip(y.data().chunks(n)))
                {
                    let (gr, yr) = pair;
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (e, yi) in grow.iter_mut().zip(yr) {
                        *e -= dot * yi;
                    }
                }
                vec![dx]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![g.zip(y, |gi, yi| gi * yi * (1.0 - yi))]
            }
            Op::Gelu => {
                let x = pv(0);
                vec![g.zip(x, |gi, xi| gi * gelu_deriv(xi))]
            }
            Op::LayerNorm => {
                let (x, gamma) = (pv(0), pv(1));
                let n = *x.shape().last().unwrap();
                let rows = x.numel() / n;
                let gam = gamma.data();
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let (mu, inv) = row_mean_inv(xr);
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mu) * inv).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gam[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    let dst = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let dxh = gr[j] * gam[j];
                        dst[j] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Tensor::new(x.shape(), dx),
                    Tensor::new(&[n], dgamma),
                    Tensor::new(&[n], dbeta),
                ]
            }
            Op::RowL2Norm => {
                let x = pv(0);
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; x.numel()];
                for (r, xr) in x.data().chunks(n).enumerate() {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let nrm = xr.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let dst = &mut dx[r * n..(r + 1) * n];
                    if nrm <= NORM_EPS {
                        // Below the guard the forward map is x / NORM_EPS.
                        for j in 0..n {
                            dst[j] = gr[j] / NORM_EPS;
                        }
                        continue;
                    }
                    let y: Vec<f64> = xr.iter().map(|&v| v / nrm).collect();
                    let dot: f64 = gr.iter().zip(&y).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = (gr[j] - dot * y[j]) / nrm;
                    }
                }
                vec![Tensor::new(x.shape(), dx)]
            }
            Op::MeanLast => {
                let x = pv(0);
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; x.numel()];
                for (r, chunk) in dx.chunks_mut(n).enumerate() {
                    let gi = g.data()[r] / n as f64;
                    for e in chunk.iter_mut() {
                        *e = gi;
                    }
                }
                vec![Tensor::new(x.shape(), dx)]
            }
            Op::SumAll => {
                let x = pv(0);
                vec![Tensor::filled(x.shape(), g.data()[0])]
            }
            Op::MeanAll => {
                let x = pv(0);
                vec![Tensor::filled(x.shape(), g.data()[0] / x.numel() as f64)]
            }
            Op::RowLogSumExp => {
                let x = pv(0);
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; x.numel()];
                for (r, xr) in x.data().chunks(n).enumerate() {
                    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = xr.iter().map(|e| (e - m).exp()).sum();
                    let gi = g.data()[r];
                    let dst = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] = gi * (xr[j] - m).exp() / z;
                    }
                }
                vec![Tensor::new(x.shape(), dx)]
            }
            Op::DiagOnly => {
                let m = pv(0).shape()[0];
                let mut dx = vec![0.0; m * m];
                for i in 0..m {
                    dx[i * m + i] = g.data()[i];
                }
                vec![Tensor::new(&[m, m], dx)]
            }
            Op::ConcatRows => {
                let (m1, d) = (pv(0).shape()[0], pv(0).shape()[1]);
                let m2 = pv(1).shape()[0];
                let da = Tensor::new(&[m1, d], g.data()[..m1 * d].to_vec());
                let db = Tensor::new(&[m2, d], g.data()[m1 * d..].to_vec());
                vec![da, db]
            }
            Op::Conv1dSame => {
                let (x, w) = (pv(0), pv(1));
                let (n, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let pad = (k - 1) / 2;
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let mut dx = vec![0.0; n * cin * l];
                let mut dw = vec![0.0; cout * cin * k];
                let mut db = vec![0.0; cout];
                for s in 0..n {
                    for co in 0..cout {
                        let grow = &gd[(s * cout + co) * l..(s * cout + co + 1) * l];
                        for t in 0..l {
                            let gv = grow[t];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..cin {
                                let xrow = &xd[(s * cin + ci) * l..(s * cin + ci + 1) * l];
                                let dxrow = (s * cin + ci) * l;
                                for j in 0..k {
                                    let ti = t as isize + j as isize - pad as isize;
                                    if ti >= 0 && (ti as usize) < l {
                                        dw[(co * cin + ci) * k + j] += gv * xrow[ti as usize];
                                        dx[dxrow + ti as usize] += gv * wd[(co * cin + ci) * k + j];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(&[n, cin, l], dx),
                    Tensor::new(&[cout, cin, k], dw),
                    Tensor::new(&[cout], db),
                ]
            }
            Op::SubjectTransform(subject_ids) => {
                let (m, x) = (pv(0), pv(1));
                let (s, c) = (m.shape()[0], m.shape()[1]);
                let l = x.shape()[2];
                let (md, xd, gd) = (m.data(), x.data(), g.data());
                let mut dm = vec![0.0; s * c * c];
                let mut dx = vec![0.0; x.numel()];
                for (i, &sid) in subject_ids.iter().enumerate() {
                    let gi = &gd[i * c * l..(i + 1) * c * l];
                    let xi = &xd[i * c * l..(i + 1) * c * l];
                    let mat = &md[sid * c * c..(sid + 1) * c * c];
                    // dm[sid] += g_i x_i^T
                    let dmat = &mut dm[sid * c * c..(sid + 1) * c * c];
                    for r in 0..c {
                        for q in 0..c {
                            let mut acc = 0.0;
                            for t in 0..l {
                                acc += gi[r * l + t] * xi[q * l + t];
                            }
                            dmat[r * c + q] += acc;
                        }
                    }
                    // dx_i = m[sid]^T g_i
                    let dxi = &mut dx[i * c * l..(i + 1) * c * l];
                    for q in 0..c {
                        for r in 0..c {
                            let a = mat[r * c + q];
                            if a == 0.0 {
                                continue;
                            }
                            for t in 0..l {
                                dxi[q * l + t] += a * gi[r * l + t];
                            }
                        }
                    }
                }
                vec![Tensor::new(&[s, c, c], dm), Tensor::new(x.shape(), dx)]
            }
            Op::Rfft => {
                let l = *pv(0).shape().last().unwrap();
                vec![fft::rfft_adjoint_tensor(g, l)]
            }
            Op::Irfft(l) => vec![fft::irfft_adjoint_tensor(g, *l)],
            Op::SpecPower(masks) => {
                let spec = pv(0);
                let ss = spec.shape();
                let (b, c, bins) = (ss[0], ss[1], ss[3]);
                let nb = masks.shape()[0];
                let (sd, md, gd) = (spec.data(), masks.data(), g.data());
                let mut dspec = vec![0.0; spec.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * 2 * bins;
                        for band in 0..nb {
                            let gv = gd[(bi * c + ci) * nb + band];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..bins {
                                let m = md[band * bins + k];
                                if m != 0.0 {
                                    dspec[base + k] += gv * m * 2.0 * sd[base + k];
                                    dspec[base + bins + k] += gv * m * 2.0 * sd[base + bins + k];
                                }
                            }
                        }
                    }
                }
                vec![Tensor::new(ss, dspec)]
            }
            Op::SpecWeight(masks) => {
                let (spec, w_c, w_s) = (pv(0), pv(1), pv(2));
                let ss = spec.shape();
                let (b, c, bins) = (ss[0], ss[1], ss[3]);
                let nb = masks.shape()[0];
                let field = band_field(w_s, masks);
                let (sd, wcd, wsd, fd, md, gd) =
                    (spec.data(), w_c.data(), w_s.data(), field.data(), masks.data(), g.data());
                let _ = wsd;
                let mut dspec = vec![0.0; spec.numel()];
                let mut dwc = vec![0.0; b * c];
                let mut dws = vec![0.0; b * nb];
                for bi in 0..b {
                    for ci in 0..c {
                        let gch = wcd[bi * c + ci];
                        let base = (bi * c + ci) * 2 * bins;
                        let mut acc_wc = 0.0;
                        for e in 0..2 {
                            for k in 0..bins {
                                let idx = base + e * bins + k;
                                let f = fd[bi * bins + k];
                                dspec[idx] = gd[idx] * gch * f;
                                acc_wc += gd[idx] * sd[idx] * f;
                                if gd[idx] != 0.0 && sd[idx] != 0.0 {
                                    // One band per bin in practice, but sum in
                                    // case masks overlap.
                                    for band in 0..nb {
                                        let m = md[band * bins + k];
                                        if m != 0.0 {
                                            dws[bi * nb + band] += gd[idx] * sd[idx] * gch * m;
                                        }
                                    }
                                }
                            }
                        }
                        dwc[bi * c + ci] = acc_wc;
                    }
                }
                vec![
                    Tensor::new(ss, dspec),
                    Tensor::new(w_c.shape(), dwc),
                    Tensor::new(&[b, nb], dws),
                ]
            }
        }
    }
}

/// `field[b, k] = sum_band masks[band, k] * w_s[b, band]`.
fn band_field(w_s: &Tensor, masks: &Tensor) -> Tensor {
    let (b, nb) = (w_s.shape()[0], w_s.shape()[1]);
    let bins = masks.shape()[1];
    let mut out = vec![0.0; b * bins];
    for bi in 0..b {
        for band in 0..nb {
            let w = w_s.data()[bi * nb + band];
            if w == 0.0 {
                continue;
            }
            for k in 0..bins {
                out[bi * bins + k] += w * masks.data()[band * bins + k];
            }
        }
    }
    Tensor::new(&[b, bins], out)
}

fn row_mean_inv(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// Tanh-approximated GELU; smooth, which keeps finite-difference gradient
/// checks well conditioned.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

/// Materializing axis permutation.
pub fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let rank = t.shape().len();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
        seen[p] = true;
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for e in out.iter_mut() {
        *e = t.data()[src];
        // Odometer increment over the output multi-index.
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides_in[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides_in[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
