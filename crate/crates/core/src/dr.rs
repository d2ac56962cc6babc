//! Douglas-Rachford splitting on the LCP `C ∋ u ⊥ Mu + q ∈ C*` with
//! `C = Rⁿ × R₊ᵐ`.
//!
//! One step maps `z` to
//!
//! ```text
//! u      = (M + I)⁻¹ (z - q)
//! ũ      = Π_C(2u - z)
//! z_next = z + ũ - u
//! ```
//!
//! and the fixed-point residual `‖T(z) - z‖₂ = ‖ũ - u‖₂` is both the stopping
//! metric and the training loss.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, dist2, norm2};
use crate::qp::{KktResiduals, LcpSystem};

/// Clips the last `m` coordinates of `v` at zero.
pub fn project_cone(v: &[f64], n: usize, m: usize) -> Result<Vec<f64>> {
    check_len(n + m, v.len())?;
    let mut out = v.to_vec();
    project_cone_in_place(&mut out[n..]);
    Ok(out)
}

#[inline]
fn project_cone_in_place(tail: &mut [f64]) {
    for v in tail {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Output of one DR step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub z_next: Vec<f64>,
    pub u: Vec<f64>,
    pub u_tilde: Vec<f64>,
    /// `2u - z`, before projection.
    pub v: Vec<f64>,
}

impl Step {
    pub fn residual(&self) -> f64 {
        dist2(&self.u_tilde, &self.u)
    }
}

pub fn dr_step(sys: &LcpSystem, z: &[f64]) -> Result<Step> {
    check_len(sys.dim(), z.len())?;
    let rhs: Vec<f64> = z.iter().zip(sys.q()).map(|(zi, qi)| zi - qi).collect();
    let u = sys.factorization().solve(&rhs)?;
    let v: Vec<f64> = u.iter().zip(z).map(|(ui, zi)| 2.0 * ui - zi).collect();
    let mut u_tilde = v.clone();
    project_cone_in_place(&mut u_tilde[sys.n()..]);
    let z_next: Vec<f64> = z
        .iter()
        .zip(&u_tilde)
        .zip(&u)
        .map(|((zi, ut), ui)| zi + ut - ui)
        .collect();
    if z_next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteIterate { iteration: 0 });
    }
    Ok(Step {
        z_next,
        u,
        u_tilde,
        v,
    })
}

/// `ℓ(z) = ‖T(z) - z‖₂`.
pub fn fixed_point_residual(sys: &LcpSystem, z: &[f64]) -> Result<f64> {
    Ok(dr_step(sys, z)?.residual())
}

/// Applies `k` DR steps and returns `(z_k, ℓ(z_k))`.
pub fn run_k(sys: &LcpSystem, z0: &[f64], k: usize) -> Result<(Vec<f64>, f64)> {
    let mut z = z0.to_vec();
    for i in 0..k {
        z = dr_step(sys, &z)
            .map_err(|e| with_iteration(e, i + 1))?
            .z_next;
    }
    let loss = fixed_point_residual(sys, &z)?;
    Ok((z, loss))
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFiniteIterate { .. } => Error::NonFiniteIterate { iteration },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    pub max_iters: usize,
    /// Stop once `‖z^{i+1} - z^i‖₂ ≤ tol`.
    pub tol: f64,
    /// Divergence threshold is `divergence_factor · (1 + ‖z0‖)` on `‖z‖`.
    pub divergence_factor: f64,
    /// KKT residuals are evaluated every `kkt_stride` iterations (0 disables).
    pub kkt_stride: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            max_iters: 10_000,
            tol: 1e-9,
            divergence_factor: 1e8,
            kkt_stride: 10,
        }
    }
}

impl SolveSettings {
    pub fn with_tol(tol: f64, max_iters: usize) -> Self {
        SolveSettings {
            tol,
            max_iters,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidData(format!(
                "solve settings need tol > 0 and max_iters ≥ 1 (got {}, {})",
                self.tol, self.max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktCheckpoint {
    pub iter: usize,
    pub residuals: KktResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrTrace {
    pub z: Vec<f64>,
    /// `residuals[i] = ‖z^{i+1} - z^i‖₂`.
    pub residuals: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub kkt: Vec<KktCheckpoint>,
    pub final_kkt: KktResiduals,
    pub iterations: usize,
    pub termination: Termination,
}

impl DrTrace {
    /// First iteration count at which the residual dropped to `eps`.
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        self.residuals.iter().position(|&r| r <= eps).map(|i| i + 1)
    }

    /// CSV with columns `iter, fp_residual, kkt_primal, kkt_dual, kkt_comp, kkt_cone`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,fp_residual,kkt_primal,kkt_dual,kkt_comp,kkt_cone\n");
        let mut cp = self.kkt.iter().peekable();
        for (i, r) in self.residuals.iter().enumerate() {
            let iter = i + 1;
            write!(out, "{iter},{r:e}").unwrap();
            match cp.peek() {
                Some(c) if c.iter == iter => {
                    let k = c.residuals;
                    writeln!(
                        out,
                        ",{:e},{:e},{:e},{:e}",
                        k.primal, k.dual, k.comp, k.cone
                    )
                    .unwrap();
                    cp.next();
                }
                _ => out.push_str(",,,,\n"),
            }
        }
        out
    }
}

/// Recovers `(x, y, s)` from `z` via `u = (M + I)⁻¹(z - q)`, `s = b - Ax`.
pub fn recover_solution(sys: &LcpSystem, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_len(sys.dim(), z.len())?;
    let rhs: Vec<f64> = z.iter().zip(sys.q()).map(|(zi, qi)| zi - qi).collect();
    let u = sys.factorization().solve(&rhs)?;
    Ok(sys.recover(&u))
}

fn kkt_at(sys: &LcpSystem, z: &[f64]) -> Result<KktResiduals> {
    let (x, y, s) = recover_solution(sys, z)?;
    sys.kkt_residuals(&x, &y, &s)
}

/// Runs DR from `z0` until the fixed-point residual reaches `settings.tol`.
pub fn solve(sys: &LcpSystem, z0: &[f64], settings: &SolveSettings) -> Result<DrTrace> {
    settings.validate()?;
    check_len(sys.dim(), z0.len())?;
    let threshold = settings.divergence_factor * (1.0 + norm2(z0));
    let mut z = z0.to_vec();
    let mut residuals = Vec::new();
    let mut kkt = Vec::new();
    let mut termination = Termination::MaxIters;

    for iter in 1..=settings.max_iters {
        let step = dr_step(sys, &z).map_err(|e| with_iteration(e, iter))?;
        let r = step.residual();
        z = step.z_next;
        residuals.push(r);
        let norm = norm2(&z);
        if norm > threshold {
            return Err(Error::Divergence {
                iteration: iter,
                norm,
            });
        }
        if settings.kkt_stride > 0 && iter % settings.kkt_stride == 0 {
            kkt.push(KktCheckpoint {
                iter,
                residuals: kkt_at(sys, &z)?,
            });
        }
        if r <= settings.tol {
            termination = Termination::Tolerance;
            break;
        }
    }

    let (x, y, s) = recover_solution(sys, &z)?;
    let final_kkt = sys.kkt_residuals(&x, &y, &s)?;
    Ok(DrTrace {
        iterations: residuals.len(),
        z,
        residuals,
        x,
        y,
        s,
        kkt,
        final_kkt,
        termination,
    })
}

/// Tolerance used to compute the fixed-point proxy `z∞`.
pub const HIGH_ACCURACY_TOL: f64 = 1e-10;
/// Distances to `z∞` at or below this are excluded from rate estimates.
pub const BETA_MIN_DISTANCE: f64 = 1e-9;
/// Upper clamp on the contraction factor estimate.
pub const BETA_MAX: f64 = 1.0 - 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub beta: f64,
    /// Number of probes that contributed a ratio.
    pub probes_used: usize,
    /// Set when the estimate is close enough to 1 that the problem behaves as
    /// merely averaged rather than contractive.
    pub averaged_regime: bool,
}

/// Estimates above this are flagged as averaged regime.
pub const AVERAGED_REGIME_BETA: f64 = 0.999;

/// High-accuracy fixed point reached from `z0`, used as the `fix T` proxy.
pub fn fixed_point_proxy(
    sys: &LcpSystem,
    z0: &[f64],
    settings: &SolveSettings,
) -> Result<Vec<f64>> {
    let s = SolveSettings {
        tol: HIGH_ACCURACY_TOL,
        kkt_stride: 0,
        ..settings.clone()
    };
    Ok(solve(sys, z0, &s)?.z)
}

/// Empirical linear rate of `‖z^i - z∞‖`, taken over the last 20% of the
/// iterates that are still farther than [`BETA_MIN_DISTANCE`] from `z∞`.
pub fn estimate_beta(
    sys: &LcpSystem,
    probes: &[Vec<f64>],
    settings: &SolveSettings,
) -> Result<BetaEstimate> {
    if probes.is_empty() {
        return Err(Error::EstimationFailed("no probes".into()));
    }
    let mut beta: f64 = 0.0;
    let mut used = 0;
    for probe in probes {
        let z_inf = fixed_point_proxy(sys, probe, settings)?;
        let mut dists = Vec::new();
        let mut z = probe.clone();
        loop {
            let d = dist2(&z, &z_inf);
            if d <= BETA_MIN_DISTANCE || dists.len() > settings.max_iters {
                break;
            }
            dists.push(d);
            z = dr_step(sys, &z)?.z_next;
        }
        // ratios need a successor, which may itself be inside the threshold
        let d_next = dist2(&z, &z_inf);
        if dists.is_empty() {
            continue;
        }
        let count = dists.len();
        let start = count - (count / 5).max(1);
        let ratio = (start..count)
            .map(|i| {
                let next = if i + 1 < count { dists[i + 1] } else { d_next };
                next / dists[i]
            })
            .fold(0.0_f64, f64::max);
        beta = beta.max(ratio);
        used += 1;
    }
    if used == 0 {
        return Err(Error::EstimationFailed(
            "every probe is already at a fixed point".into(),
        ));
    }
    let beta = beta.min(BETA_MAX);
    Ok(BetaEstimate {
        beta,
        probes_used: used,
        averaged_regime: beta > AVERAGED_REGIME_BETA,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::qp::{build_lcp, QpInstance};

    fn tiny() -> LcpSystem {
        build_lcp(&QpInstance {
            p: DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
            a: DenseMatrix::from_rows(&[vec![-1.0]]).unwrap(),
            c: vec![0.0],
            b: vec![-1.0],
            theta: vec![],
        })
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_cone(&[3.0, -2.0], 1, 1).unwrap(), vec![3.0, 0.0]);
        assert_eq!(
            project_cone(&[1.0, 0.0, 2.0], 1, 2).unwrap(),
            vec![1.0, 0.0, 2.0]
        );
        assert_eq!(
            project_cone(&[-1.0, 0.0, 2.0], 0, 3).unwrap(),
            vec![0.0, 0.0, 2.0]
        );
        assert_eq!(project_cone(&[-1.0, -3.0], 2, 0).unwrap(), vec![-1.0, -3.0]);
        assert!(project_cone(&[1.0], 1, 1).is_err());
    }

    #[test]
    fn step_at_fixed_point() {
        // u* = (1, 1), z* = (M + I)u* + q = (2-1, 1+1) + (0, -1) = (1, 1)
        let s = dr_step(&tiny(), &[1.0, 1.0]).unwrap();
        for (a, b) in s.u.iter().zip(&[1.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.u, s.u_tilde);
        assert_eq!(s.z_next, vec![1.0, 1.0]);
        assert_eq!(fixed_point_residual(&tiny(), &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn step_from_origin() {
        // (M + I) u = (0, 1) with M + I = [[2,-1],[1,1]] -> u = (1/3, 2/3)
        let s = dr_step(&tiny(), &[0.0, 0.0]).unwrap();
        assert!((s.u[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.u[1] - 2.0 / 3.0).abs() < 1e-15);
        // v = 2u - z = (2/3, 4/3) is already in the cone
        assert_eq!(s.u_tilde, s.v);
        assert_eq!(
            s.z_next,
            vec![0.0 + s.u_tilde[0] - s.u[0], 0.0 + s.u_tilde[1] - s.u[1]]
        );
        let r = fixed_point_residual(&tiny(), &[0.0, 0.0]).unwrap();
        assert_eq!(r, dist2(&s.u_tilde, &s.u));
        assert!((r - (5.0_f64 / 9.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn step_difference_is_exact() {
        let sys = tiny();
        let z = [0.3, -2.0];
        let s = dr_step(&sys, &z).unwrap();
        for i in 0..2 {
            assert_eq!(s.z_next[i] - z[i], (z[i] + s.u_tilde[i] - s.u[i]) - z[i]);
        }
    }

    #[test]
    fn solve_tiny_qp() {
        let sys = tiny();
        let tr = solve(&sys, &[0.0, 0.0], &SolveSettings::with_tol(1e-9, 10_000)).unwrap();
        assert_eq!(tr.termination, Termination::Tolerance);
        assert!((tr.x[0] - 1.0).abs() < 1e-7);
        assert!((tr.y[0] - 1.0).abs() < 1e-7);
        assert!(tr.s[0].abs() < 1e-7);
        assert!(tr.final_kkt.max() < 1e-7);
    }

    #[test]
    fn solve_from_fixed_point_takes_one_iteration() {
        let tr = solve(&tiny(), &[1.0, 1.0], &SolveSettings::default()).unwrap();
        assert_eq!(tr.iterations, 1);
        assert_eq!(tr.iterations_to(1e-12), Some(1));
    }

    #[test]
    fn run_k_examples() {
        let sys = tiny();
        let z0 = [0.5, -0.25];
        let (z, l) = run_k(&sys, &z0, 0).unwrap();
        assert_eq!(z, z0.to_vec());
        assert_eq!(l, fixed_point_residual(&sys, &z0).unwrap());
        let (_, l) = run_k(&sys, &z0, 200).unwrap();
        assert!(l <= 1e-9);
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let (_, l) = run_k(&sys, &z0, k).unwrap();
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn beta_on_tiny_qp_is_contractive() {
        let sys = tiny();
        let est = estimate_beta(
            &sys,
            &[vec![0.0, 0.0], vec![5.0, -3.0]],
            &SolveSettings::default(),
        )
        .unwrap();
        assert!(est.beta > 0.0 && est.beta < 1.0, "{est:?}");
        assert_eq!(est.probes_used, 2);
        assert!(!est.averaged_regime);
    }

    #[test]
    fn beta_skips_fixed_point_probe() {
        let sys = tiny();
        let est = estimate_beta(
            &sys,
            &[vec![1.0, 1.0], vec![0.0, 0.0]],
            &SolveSettings::default(),
        )
        .unwrap();
        assert_eq!(est.probes_used, 1);
        assert!(matches!(
            estimate_beta(&sys, &[vec![1.0, 1.0]], &SolveSettings::default()),
            Err(Error::EstimationFailed(_))
        ));
    }

    #[test]
    fn trace_csv_leaves_off_checkpoint_kkt_empty() {
        let settings = SolveSettings {
            kkt_stride: 2,
            ..SolveSettings::with_tol(1e-12, 5)
        };
        let tr = solve(&tiny(), &[0.0, 0.0], &settings).unwrap();
        let csv = tr.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iter,fp_residual,kkt_primal,kkt_dual,kkt_comp,kkt_cone"
        );
        assert!(lines[1].ends_with(",,,,"));
        assert_eq!(lines[2].split(',').count(), 6);
        assert!(!lines[2].ends_with(','));
    }

    #[test]
    fn divergence_on_infeasible_data() {
        // x ≥ 1 and x ≤ -1
        let qp = QpInstance {
            p: DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
            a: DenseMatrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(),
            c: vec![0.0],
            b: vec![-1.0, -1.0],
            theta: vec![],
        };
        let sys = build_lcp(&qp).unwrap();
        let settings = SolveSettings {
            divergence_factor: 10.0,
            ..SolveSettings::with_tol(1e-9, 10_000)
        };
        assert!(matches!(
            solve(&sys, &[0.0; 3], &settings),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn bad_settings_rejected() {
        assert!(solve(&tiny(), &[0.0; 2], &SolveSettings::with_tol(0.0, 10)).is_err());
        assert!(solve(&tiny(), &[0.0; 2], &SolveSettings::with_tol(1e-3, 0)).is_err());
    }
}
