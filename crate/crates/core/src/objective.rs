//! The contrastive objective: a one-directional InfoNCE over matched rows
//! plus the image/text balance combining two of them.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// Differentiable InfoNCE: `mean_i [ logsumexp_j(z1_i . z2_j / tau) - z1_i . z2_i / tau ]`.
///
/// One-directional: `z1` rows are queries, `z2` rows are the candidate set,
/// and row i of each is the positive pair.
pub fn info_nce_t(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Var {
    let z2t = tape.permute(z2, &[1, 0]);
    let logits = tape.matmul(z1, z2t);
    let logits = tape.scale(logits, 1.0 / tau);
    let lse = tape.row_log_sum_exp(logits);
    let diag = tape.diag_only(logits);
    let per_row = tape.sub(lse, diag);
    tape.mean_all(per_row)
}

fn check_pair(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<()> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    let (s1, s2) = (z1.shape(), z2.shape());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::data(format!("embedding shapes {s1:?} vs {s2:?} must match [B, F]")));
    }
    if s1[0] == 0 {
        return Err(Error::data("empty batch"));
    }
    let f = s1[1];
    for (name, z) in [("z1", z1), ("z2", z2)] {
        for (i, row) in z.data().chunks(f).enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::data(format!("{name} row {i} has norm {n}, expected unit")));
            }
        }
    }
    Ok(())
}

/// Value-level InfoNCE with contract checks.
pub fn info_nce(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<f64> {
    check_pair(z1, z2, tau)?;
    let mut tape = Tape::new();
    let a = tape.leaf(z1.clone());
    let b = tape.leaf(z2.clone());
    let loss = info_nce_t(&mut tape, a, b, tau);
    Ok(tape.value(loss).data()[0])
}

/// Symmetric variant: the mean of both directions. Off by default in
/// training; enable with the `symmetric_nce` config flag.
pub fn symmetric_info_nce_t(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Var {
    let fwd = info_nce_t(tape, z1, z2, tau);
    let bwd = info_nce_t(tape, z2, z1, tau);
    let sum = tape.add(fwd, bwd);
    tape.scale(sum, 0.5)
}

/// Differentiable combined loss:
/// `eta * nce(z_e, z_i) + (1 - eta) * nce(z_e, z_x)`. The eta = 0 and
/// eta = 1 limits reproduce the single-term losses exactly.
pub fn total_loss_t(
    tape: &mut Tape,
    z_e: Var,
    z_i: Var,
    z_x: Var,
    eta: f64,
    tau: f64,
    symmetric: bool,
) -> Var {
    let nce = |tape: &mut Tape, a: Var, b: Var| {
        if symmetric {
            symmetric_info_nce_t(tape, a, b, tau)
        } else {
            info_nce_t(tape, a, b, tau)
        }
    };
    if eta == 1.0 {
        return nce(tape, z_e, z_i);
    }
    if eta == 0.0 {
        return nce(tape, z_e, z_x);
    }
    let li = nce(tape, z_e, z_i);
    let lx = nce(tape, z_e, z_x);
    let li = tape.scale(li, eta);
    let lx = tape.scale(lx, 1.0 - eta);
    tape.add(li, lx)
}

/// Value-level combined loss with contract checks.
pub fn total_loss(z_e: &Tensor, z_i: &Tensor, z_x: &Tensor, eta: f64, tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta {eta} outside [0, 1]")));
    }
    check_pair(z_e, z_i, tau)?;
    check_pair(z_e, z_x, tau)?;
    let mut tape = Tape::new();
    let e = tape.leaf(z_e.clone());
    let i = tape.leaf(z_i.clone());
    let x = tape.leaf(z_x.clone());
    let loss = total_loss_t(&mut tape, e, i, x, eta, tau, false);
    Ok(tape.value(loss).data()[0])
}
