//! Reverse-mode differentiation of `ℓ(T^k(ẑ))` with respect to the warm start `ẑ`.
//!
//! With `F = (M + I)⁻¹` and `D` the 0/1 derivative mask of the cone
//! projection at the pre-projection vector `v = 2u − z`, one DR step has
//! Jacobian
//!
//! ```text
//! J = I + D(2F − I) − F
//! Jᵀ g = g + Fᵀ(2Dg − g) − Dg
//! ```
//!
//! The loss `‖T(z_k) − z_k‖` has gradient `(J_{k+1} − I)ᵀ e` with
//! `e = (ũ − u)/ℓ`, so the backward pass seeds with
//! `Fᵀ(2De − e) − De` and then applies `J_iᵀ` for `i = k, …, 1`. The mask is
//! 1 on the first `n` coordinates and, on the last `m`, 1 iff `v_j > 0`
//! (the subderivative at exactly 0 is taken as 0).

use crate::dr::dr_step;
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::qp::LcpSystem;

/// Losses at or below this are not differentiated.
pub const MIN_DIFFERENTIABLE_LOSS: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct TapeRecord {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Pre-projection vector `2u − z`.
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrollTape {
    pub records: Vec<TapeRecord>,
    /// The extra step taken at `z_k` to evaluate the loss.
    pub loss_step: TapeRecord,
    pub loss: f64,
}

impl UnrollTape {
    pub fn k(&self) -> usize {
        self.records.len()
    }
}

/// Runs `k` DR steps from `z0`, keeping every intermediate for the backward pass.
pub fn forward_tape(sys: &LcpSystem, z0: &[f64], k: usize) -> Result<(UnrollTape, Vec<f64>, f64)> {
    let mut records = Vec::with_capacity(k);
    let mut z = z0.to_vec();
    for _ in 0..k {
        let step = dr_step(sys, &z)?;
        records.push(TapeRecord {
            z,
            u: step.u,
            v: step.v,
        });
        z = step.z_next;
    }
    let last = dr_step(sys, &z)?;
    let loss = last.residual();
    let tape = UnrollTape {
        records,
        loss_step: TapeRecord {
            z: z.clone(),
            u: last.u,
            v: last.v,
        },
        loss,
    };
    Ok((tape, z, loss))
}

/// `g ← Fᵀ(2Dg − g) − Dg` plus `g` itself when `include_identity` is set.
fn apply_step_adjoint(
    sys: &LcpSystem,
    v: &[f64],
    g: &[f64],
    include_identity: bool,
) -> Result<Vec<f64>> {
    let n = sys.n();
    let dg: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(j, &gj)| if j < n || v[j] > 0.0 { gj } else { 0.0 })
        .collect();
    let rhs: Vec<f64> = dg.iter().zip(g).map(|(d, gj)| 2.0 * d - gj).collect();
    let ft = sys.factorization().solve_transpose(&rhs)?;
    Ok((0..g.len())
        .map(|j| {
            let base = if include_identity { g[j] } else { 0.0 };
            base + ft[j] - dg[j]
        })
        .collect())
}

/// `∂ℓ(T^k(z0))/∂z0` from a recorded tape.
pub fn backward(sys: &LcpSystem, tape: &UnrollTape) -> Result<Vec<f64>> {
    if tape.loss <= MIN_DIFFERENTIABLE_LOSS {
        return Err(Error::ZeroLossGradient { loss: tape.loss });
    }
    let n = sys.n();
    let last = &tape.loss_step;
    // e = (Π(v) − u)/ℓ
    let e: Vec<f64> = last
        .v
        .iter()
        .zip(&last.u)
        .enumerate()
        .map(|(j, (&vj, &uj))| {
            let proj = if j >= n && vj < 0.0 { 0.0 } else { vj };
            (proj - uj) / tape.loss
        })
        .collect();
    let mut g = apply_step_adjoint(sys, &last.v, &e, false)?;
    for rec in tape.records.iter().rev() {
        g = apply_step_adjoint(sys, &rec.v, &g, true)?;
    }
    Ok(g)
}

/// Loss and gradient in one call.
pub fn loss_and_gradient(sys: &LcpSystem, z0: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    let (tape, _, loss) = forward_tape(sys, z0, k)?;
    let g = backward(sys, &tape)?;
    Ok((loss, g))
}

/// `‖∂ℓ(T^k(z0))/∂z0‖₂` for each `k` in the grid.
pub fn gradient_norm_decay(
    sys: &LcpSystem,
    z0: &[f64],
    k_grid: &[usize],
) -> Result<Vec<(usize, f64)>> {
    k_grid
        .iter()
        .map(|&k| {
            let (_, g) = loss_and_gradient(sys, z0, k)?;
            Ok((k, norm2(&g)))
        })
        .collect()
}
