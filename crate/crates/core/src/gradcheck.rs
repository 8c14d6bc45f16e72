//! Finite-difference verification of the analytic gradients.
//!
//! Every differentiable component is registered under a name with a
//! tolerance. A check builds the component on a tape, probes it with a
//! fixed random linear functional (so the loss is a scalar), and compares
//! each parameter's analytic gradient against central finite differences
//! with step 1e-3. Large tensors are probed at a seeded sample of
//! coordinates; small ones exhaustively. The reported figure per component
//! is the maximum relative error across all probed coordinates, where the
//! relative error of (analytic, numeric) is their absolute difference over
//! `max(|analytic| + |numeric|, 1e-6)`.
//!
//! Differences below 1e-5 are treated as agreement: central differences at
//! step 1e-3 carry truncation error `(h^2 / 6) |f'''|`, a few 1e-6 absolute
//! through the sharper activation chains here, so smaller differences say
//! nothing about the analytic gradient. Genuine adjoint bugs scale with the
//! gradient itself and clear this floor by orders of magnitude.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::derive_seed;
use crate::data::EEGBatch;
use crate::eitra::EitraModel;
use crate::error::{Error, Result};
use crate::nesta::{EncoderFlags, MlpBaseline, Mode, NestaConfig, NestaModel, CANONICAL_BAND_EDGES};
use crate::objective::{info_nce_t, total_loss_t};
use crate::optim::{BoundParams, ParamStore};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-3;
/// Absolute differences below this are inside central-difference truncation
/// at `FD_STEP` and count as agreement (see module docs).
const NOISE_FLOOR: f64 = 1e-5;
/// Coordinates probed per tensor; tensors at or below this size are probed
/// exhaustively.
const COORD_CAP: usize = 24;

/// Result of one registered component check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Everything the registry knows how to check, in run order.
pub const COMPONENTS: &[&str] = &[
    "subject_transform",
    "temporal_attention",
    "spectral_recompose",
    "projection",
    "encode",
    "eitra_align",
    "info_nce",
    "total_loss",
    "mlp_baseline",
];

/// Run one named check. Unregistered names are a usage error.
pub fn run_one(name: &str) -> Result<CheckOutcome> {
    match name {
        "subject_transform" => check_subject_transform(),
        "temporal_attention" => check_temporal_attention(),
        "spectral_recompose" => check_spectral_recompose(),
        "projection" => check_projection(),
        "encode" => check_encode(),
        "eitra_align" => check_eitra_align(),
        "info_nce" => check_info_nce(),
        "total_loss" => check_total_loss(),
        "mlp_baseline" => check_mlp_baseline(),
        _ => Err(Error::config(format!(
            "no gradient check named {name:?}; known components: {}",
            COMPONENTS.join(", ")
        ))),
    }
}

/// Run the whole registry in order.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    COMPONENTS.iter().map(|n| run_one(n)).collect()
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let loss = build(&mut tape, &p)?;
    let v = tape.value(loss);
    assert!(v.numel() == 1, "gradient checks need a scalar loss, got {:?}", v.shape());
    Ok(v.data()[0])
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences for every parameter in `store`. Parameters the loss
/// does not reach (no analytic gradient) are skipped: an unused stage is
/// exactly the frozen-parameter case the trainer relies on.
fn check_component<F>(name: &str, tolerance: f64, mut store: ParamStore, build: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let analytic: Vec<(String, Tensor)> = {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let loss = build(&mut tape, &p)?;
        let grads = tape.backward(loss);
        p.iter()
            .filter_map(|(n, var)| grads.get(var).map(|g| (n.to_string(), g.clone())))
            .collect()
    };
    if analytic.is_empty() {
        return Err(Error::config(format!(
            "gradient check {name} reached no parameters; the probe is miswired"
        )));
    }
    let mut max_rel = 0.0f64;
    for (pname, grad) in &analytic {
        let n = grad.numel();
        let coords: Vec<usize> = if n <= COORD_CAP {
            (0..n).collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(13, &format!("coords.{name}.{pname}")));
            let mut all: Vec<usize> = (0..n).collect();
            all.partial_shuffle(&mut rng, COORD_CAP);
            all.truncate(COORD_CAP);
            all
        };
        for i in coords {
            let orig = store.get(pname).data()[i];
            store.get_mut(pname).data_mut()[i] = orig + FD_STEP;
            let up = eval_loss(&store, &build)?;
            store.get_mut(pname).data_mut()[i] = orig - FD_STEP;
            let down = eval_loss(&store, &build)?;
            store.get_mut(pname).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ana = grad.data()[i];
            let diff = (numeric - ana).abs();
            if diff < NOISE_FLOOR {
                continue;
            }
            let rel = diff / (numeric.abs() + ana.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(CheckOutcome {
        component: name.to_string(),
        max_rel_err: max_rel,
        tolerance,
        passed: max_rel < tolerance,
    })
}

/// Fixed probe tensor: pairs the component output with a random linear
/// functional so every output coordinate influences the scalar loss.
fn probe(shape: &[usize], label: &str) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, label));
    Tensor::randn(shape, 1.0, &mut rng)
}

fn probed_sum(tape: &mut Tape, out: Var, r: Tensor) -> Var {
    let weighted = tape.mul_const(out, r);
    tape.sum_all(weighted)
}

fn rng_for(label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(17, label))
}

fn nesta_fixture(c: usize, l: usize, f: usize, heads: usize, label: &str) -> (NestaModel, ParamStore) {
    let model = NestaModel::new(NestaConfig {
        n_subjects: 2,
        c,
        l,
        f,
        heads,
        ff_expansion: 2,
        ff_kernel: 3,
        dropout: 0.0,
        band_edges_hz: CANONICAL_BAND_EDGES.to_vec(),
        sampling_rate_hz: 128.0,
    })
    .expect("valid check geometry");
    let mut store = ParamStore::new();
    let mut rng = rng_for(label);
    model.init_params(&mut store, &mut rng);
    (model, store)
}

fn check_subject_transform() -> Result<CheckOutcome> {
    let (b, c, l) = (2, 3, 8);
    let mut rng = rng_for("subject_transform");
    let mut store = ParamStore::new();
    store.insert("check.m", Tensor::randn(&[2, c, c], 1.0, &mut rng));
    store.insert("check.input", Tensor::randn(&[b, c, l], 1.0, &mut rng));
    let r = probe(&[b, c, l], "subject_transform");
    check_component("subject_transform", 1e-5, store, move |tape, p| {
        let m = p.var("check.m");
        let x = p.var("check.input");
        let out = tape.subject_transform(m, x, &[0, 1]);
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_temporal_attention() -> Result<CheckOutcome> {
    let (b, c, l) = (2, 4, 16);
    let (model, mut store) = nesta_fixture(c, l, 8, 2, "temporal_attention");
    let mut rng = rng_for("temporal_attention.input");
    store.insert("check.input", Tensor::randn(&[b, c, l], 1.0, &mut rng));
    let r = probe(&[b, c, l], "temporal_attention");
    check_component("temporal_attention", 1e-4, store, move |tape, p| {
        let x = p.var("check.input");
        let (out, _probs) = model.attention_block_t(tape, p, x, &mut Mode::Eval);
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_spectral_recompose() -> Result<CheckOutcome> {
    let (b, c, l) = (1, 2, 16);
    let (model, mut store) = nesta_fixture(c, l, 6, 2, "spectral_recompose");
    let mut rng = rng_for("spectral_recompose.input");
    store.insert("check.input", Tensor::randn(&[b, c, l], 1.0, &mut rng));
    let r = probe(&[b, c, l], "spectral_recompose");
    check_component("spectral_recompose", 1e-4, store, move |tape, p| {
        let x = p.var("check.input");
        let out = model.spectral_block_t(tape, p, x);
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_projection() -> Result<CheckOutcome> {
    // The projection head alone: encode with subject and spectral stages
    // off reduces to attention + projection; probing only the projection
    // parameters isolates their gradients, and the attention parameters
    // are covered by their own check.
    let (b, c, l, f) = (2, 3, 8, 5);
    let (model, store) = nesta_fixture(c, l, f, 2, "projection");
    let mut rng = rng_for("projection.input");
    let batch = EEGBatch {
        eeg: Tensor::randn(&[b, c, l], 1.0, &mut rng),
        subject_ids: vec![0, 1],
        class_ids: vec![0, 1],
        exemplar_ids: vec![0, 0],
    };
    let r = probe(&[b, f], "projection");
    let flags = EncoderFlags { subject_specific: false, neural_spectral: false };
    check_component("projection", 1e-4, store, move |tape, p| {
        let out = model.encode_t(tape, p, &batch, &mut Mode::Eval, flags)?;
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_encode() -> Result<CheckOutcome> {
    let (b, c, l, f) = (2, 4, 32, 8);
    let (model, store) = nesta_fixture(c, l, f, 2, "encode");
    let mut rng = rng_for("encode.input");
    let batch = EEGBatch {
        eeg: Tensor::randn(&[b, c, l], 1.0, &mut rng),
        subject_ids: vec![0, 1],
        class_ids: vec![0, 1],
        exemplar_ids: vec![0, 0],
    };
    let r = probe(&[b, f], "encode");
    check_component("encode", 1e-3, store, move |tape, p| {
        let out = model.encode_t(tape, p, &batch, &mut Mode::Eval, EncoderFlags::default())?;
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_eitra_align() -> Result<CheckOutcome> {
    let (m, d, b, nc) = (2, 8, 3, 4);
    let model = EitraModel::new(m, d).expect("valid check geometry");
    let mut store = ParamStore::new();
    let mut rng = rng_for("eitra_align");
    model.init_params(&mut store, &mut rng);
    store.insert("check.protos", Tensor::randn(&[nc, d], 1.0, &mut rng));
    store.insert("check.z", Tensor::randn(&[b, d], 1.0, &mut rng));
    let r = probe(&[b, d], "eitra_align");
    check_component("eitra_align", 1e-3, store, move |tape, p| {
        let protos = p.var("check.protos");
        let z = p.var("check.z");
        let out = model.align_t(tape, p, protos, z);
        Ok(probed_sum(tape, out, r.clone()))
    })
}

fn check_info_nce() -> Result<CheckOutcome> {
    let (b, f) = (4, 6);
    let mut store = ParamStore::new();
    let mut rng = rng_for("info_nce");
    store.insert("check.z1", Tensor::randn(&[b, f], 1.0, &mut rng));
    store.insert("check.z2", Tensor::randn(&[b, f], 1.0, &mut rng));
    check_component("info_nce", 1e-4, store, move |tape, p| {
        // Normalize on-tape so perturbed parameters still feed unit rows.
        let z1 = p.var("check.z1");
        let z2 = p.var("check.z2");
        let z1 = tape.row_l2_norm(z1);
        let z2 = tape.row_l2_norm(z2);
        Ok(info_nce_t(tape, z1, z2, 0.5))
    })
}

fn check_total_loss() -> Result<CheckOutcome> {
    let (b, f) = (3, 5);
    let mut store = ParamStore::new();
    let mut rng = rng_for("total_loss");
    store.insert("check.ze", Tensor::randn(&[b, f], 1.0, &mut rng));
    store.insert("check.zi", Tensor::randn(&[b, f], 1.0, &mut rng));
    store.insert("check.zx", Tensor::randn(&[b, f], 1.0, &mut rng));
    check_component("total_loss", 1e-4, store, move |tape, p| {
        let ze = tape.row_l2_norm(p.var("check.ze"));
        let zi = tape.row_l2_norm(p.var("check.zi"));
        let zx = tape.row_l2_norm(p.var("check.zx"));
        Ok(total_loss_t(tape, ze, zi, zx, 0.3, 0.5, false))
    })
}

fn check_mlp_baseline() -> Result<CheckOutcome> {
    let (b, c, l, f) = (2, 3, 8, 5);
    let model = MlpBaseline::new(c, l, f);
    let mut store = ParamStore::new();
    let mut rng = rng_for("mlp_baseline");
    model.init_params(&mut store, &mut rng);
    let batch = EEGBatch {
        eeg: Tensor::randn(&[b, c, l], 1.0, &mut rng),
        subject_ids: vec![0, 1],
        class_ids: vec![0, 1],
        exemplar_ids: vec![0, 0],
    };
    let r = probe(&[b, f], "mlp_baseline");
    check_component("mlp_baseline", 1e-4, store, move |tape, p| {
        let out = model.encode_t(tape, p, &batch)?;
        Ok(probed_sum(tape, out, r.clone()))
    })
}
