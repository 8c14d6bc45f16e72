//! EEG-image-text representation alignment. Learnable interaction matrices
//! attend over class text prototypes (the semantic anchors), the EEG- and
//! image-side attention outputs are fused through a second cross-attention
//! into a single pooled semantic context, and that context is residually
//! folded into each per-sample EEG embedding.
//!
//! Parameter names (stable checkpoint tensor names):
//!
//! | name          | shape  | init   |
//! |---------------|--------|--------|
//! | eitra.me      | [M, d] | Glorot |
//! | eitra.mi      | [M, d] | Glorot |
//! | eitra.mc      | [M, d] | Glorot |
//! | eitra.wq      | [d, d] | Glorot |
//! | eitra.wk      | [d, d] | Glorot |
//! | eitra.wv      | [d, d] | Glorot |
//! | eitra.fuse.w1 | [d, d] | Glorot |
//! | eitra.fuse.b1 | [d]    | 0      |
//! | eitra.fuse.w2 | [d, d] | Glorot |
//! | eitra.fuse.b2 | [d]    | 0      |

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct EitraModel {
    /// Interaction matrix row count M.
    pub m: usize,
    /// Model width d (equals the embedding dimension F).
    pub d: usize,
}

impl EitraModel {
    pub fn new(m: usize, d: usize) -> Result<Self> {
        if m == 0 || d < 2 {
            return Err(Error::config(format!("invalid alignment geometry: M={m}, d={d}")));
        }
        Ok(EitraModel { m, d })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (m, d) = (self.m, self.d);
        let scale = (2.0 / (2 * d) as f64).sqrt();
        for name in ["eitra.me", "eitra.mi", "eitra.mc"] {
            store.insert(name, Tensor::randn(&[m, d], scale, rng));
        }
        for name in ["eitra.wq", "eitra.wk", "eitra.wv", "eitra.fuse.w1", "eitra.fuse.w2"] {
            store.insert(name, Tensor::randn(&[d, d], scale, rng));
        }
        store.insert("eitra.fuse.b1", Tensor::zeros(&[d]));
        store.insert("eitra.fuse.b2", Tensor::zeros(&[d]));
    }

    fn check_protos(&self, protos: &Tensor) -> Result<()> {
        let shape = protos.shape();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::data(format!(
                "prototype tensor {shape:?} does not match model width d={}",
                self.d
            )));
        }
        if shape[0] == 0 {
            return Err(Error::data("need at least one text prototype"));
        }
        Ok(())
    }

    /// Attention of one interaction matrix over the prototypes:
    /// `softmax(M W_Q (protos W_K)^T / sqrt(d)) (protos W_V)`.
    /// Returns `(output [M, d], attention probabilities [M, N_c])`.
    fn anchor_attention_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        matrix_name: &str,
        protos: Var,
    ) -> (Var, Var) {
        let q = tape.matmul(p.var(matrix_name), p.var("eitra.wq"));
        let k = tape.matmul(protos, p.var("eitra.wk"));
        let v = tape.matmul(protos, p.var("eitra.wv"));
        let kt = tape.permute(k, &[1, 0]);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let probs = tape.softmax(scores);
        (tape.matmul(probs, v), probs)
    }

    /// EEG-side and image-side anchor attentions (shared projections).
    pub fn semantic_attention_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        protos: Var,
    ) -> (Var, Var) {
        let (a_e, _) = self.anchor_attention_t(tape, p, "eitra.me", protos);
        let (a_i, _) = self.anchor_attention_t(tape, p, "eitra.mi", protos);
        (a_e, a_i)
    }

    /// Cross-modal context: attend M_C over the stacked anchor outputs and
    /// mean-pool the M context rows to a single d-vector.
    pub fn context_t(&self, tape: &mut Tape, p: &BoundParams, a_e: Var, a_i: Var) -> Var {
        let cat = tape.concat_rows(a_e, a_i);
        let k_a = tape.matmul(cat, p.var("eitra.wk"));
        let v_a = tape.matmul(cat, p.var("eitra.wv"));
        let q_c = tape.matmul(p.var("eitra.mc"), p.var("eitra.wq"));
        let k_t = tape.permute(k_a, &[1, 0]);
        let scores = tape.matmul(q_c, k_t);
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let probs = tape.softmax(scores);
        let rows = tape.matmul(probs, v_a); // [M, d]
        let cols = tape.permute(rows, &[1, 0]);
        tape.mean_last(cols) // [d]
    }

    /// Broadcast-add the pooled context to each embedding, apply the fusion
    /// MLP with a residual skip, and renormalize rows.
    pub fn fuse_t(&self, tape: &mut Tape, p: &BoundParams, z: Var, context: Var) -> Var {
        let h = tape.add_bias(z, context);
        let mid = tape.matmul(h, p.var("eitra.fuse.w1"));
        let mid = tape.add_bias(mid, p.var("eitra.fuse.b1"));
        let mid = tape.gelu(mid);
        let fused = tape.matmul(mid, p.var("eitra.fuse.w2"));
        let fused = tape.add_bias(fused, p.var("eitra.fuse.b2"));
        let out = tape.add(h, fused);
        tape.row_l2_norm(out)
    }

    /// Full differentiable alignment: anchors -> context -> fusion.
    pub fn align_t(&self, tape: &mut Tape, p: &BoundParams, protos: Var, z: Var) -> Var {
        let (a_e, a_i) = self.semantic_attention_t(tape, p, protos);
        let ctx = self.context_t(tape, p, a_e, a_i);
        self.fuse_t(tape, p, z, ctx)
    }

    /// Value-level anchor attention outputs `(A_E, A_I)`.
    pub fn semantic_guided_attention(
        &self,
        store: &ParamStore,
        protos: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.check_protos(protos)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pv = tape.leaf(protos.clone());
        let (a_e, a_i) = self.semantic_attention_t(&mut tape, &p, pv);
        Ok((tape.value(a_e).clone(), tape.value(a_i).clone()))
    }

    /// Value-level attention probabilities `(EEG side, image side)`, each
    /// `[M, N_c]` and row-stochastic.
    pub fn attention_probs(&self, store: &ParamStore, protos: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_protos(protos)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pv = tape.leaf(protos.clone());
        let (_, probs_e) = self.anchor_attention_t(&mut tape, &p, "eitra.me", pv);
        let (_, probs_i) = self.anchor_attention_t(&mut tape, &p, "eitra.mi", pv);
        Ok((tape.value(probs_e).clone(), tape.value(probs_i).clone()))
    }

    /// Value-level cross-modal alignment from precomputed anchor outputs.
    pub fn cross_modal_align(
        &self,
        store: &ParamStore,
        a_e: &Tensor,
        a_i: &Tensor,
        z: &Tensor,
    ) -> Result<Tensor> {
        for (name, t) in [("A_E", a_e), ("A_I", a_i)] {
            if t.shape() != [self.m, self.d] {
                return Err(Error::data(format!(
                    "{name} shaped {:?}, expected [{}, {}]",
                    t.shape(),
                    self.m,
                    self.d
                )));
            }
        }
        if z.shape().len() != 2 || z.shape()[1] != self.d {
            return Err(Error::data(format!(
                "embeddings shaped {:?} do not match model width d={}",
                z.shape(),
                self.d
            )));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ae = tape.leaf(a_e.clone());
        let ai = tape.leaf(a_i.clone());
        let zv = tape.leaf(z.clone());
        let ctx = self.context_t(&mut tape, &p, ae, ai);
        let out = self.fuse_t(&mut tape, &p, zv, ctx);
        Ok(tape.value(out).clone())
    }

    /// Value-level full alignment.
    pub fn align(&self, store: &ParamStore, protos: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_protos(protos)?;
        let (a_e, a_i) = self.semantic_guided_attention(store, protos)?;
        self.cross_modal_align(store, &a_e, &a_i, z)
    }

    /// The pooled context vector `[d]` for a prototype set. Cached into
    /// checkpoints so evaluation can align embeddings without the text table.
    pub fn context_vector(&self, store: &ParamStore, protos: &Tensor) -> Result<Tensor> {
        self.check_protos(protos)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let pv = tape.leaf(protos.clone());
        let (a_e, a_i) = self.semantic_attention_t(&mut tape, &p, pv);
        let ctx = self.context_t(&mut tape, &p, a_e, a_i);
        Ok(tape.value(ctx).clone())
    }

    /// Value-level fusion against a cached context vector.
    pub fn align_with_context(
        &self,
        store: &ParamStore,
        z: &Tensor,
        context: &Tensor,
    ) -> Result<Tensor> {
        if context.numel() != self.d {
            return Err(Error::data(format!(
                "context vector has {} entries, expected d={}",
                context.numel(),
                self.d
            )));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let cv = tape.leaf(context.reshape(&[self.d]));
        let out = self.fuse_t(&mut tape, &p, zv, cv);
        Ok(tape.value(out).clone())
    }
}
