//! Measurements shared by the core integration tests and the acceptance suite.
//! Each returns the worst observed error so callers choose how to report it.

use drws::dr::{solve, SolveSettings, HIGH_ACCURACY_TOL};
use drws::linalg::dist2;
use drws::predictor::{init_model, unrolled_loss, TrainConfig};
use drws::unroll::{backward, forward_tape, loss_and_gradient};
use drws::zoo::{nnls_design, sample_thetas, FamilySpec, OscMassesData};
use drws::LcpSystem;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dd::{Dd, DdDr};
use super::oracles::{nnls_active_check, nnls_projected_gradient, osc_active_set};

pub struct SolverSweep {
    pub worst_kkt: f64,
    /// Largest `r_{i+1} − r_i` over all residual sequences.
    pub worst_rise: f64,
    pub most_iters: usize,
    pub unconverged: usize,
}

/// Cold-start solves of `count` random strongly convex QPs (n = 20, m = 30).
pub fn random_qp_sweep(count: u64, max_iters: usize) -> SolverSweep {
    let settings = SolveSettings {
        kkt_stride: 0,
        ..SolveSettings::with_tol(1e-10, max_iters)
    };
    let mut out = SolverSweep {
        worst_kkt: 0.0,
        worst_rise: f64::NEG_INFINITY,
        most_iters: 0,
        unconverged: 0,
    };
    for seed in 0..count {
        let fam = FamilySpec::random_qp(20, 30, seed).build().unwrap();
        let th = &sample_thetas(&fam, 1, seed + 1000)[0];
        let sys = fam.lcp(th).unwrap();
        let tr = solve(&sys, &vec![0.0; sys.dim()], &settings).unwrap();
        out.worst_kkt = out.worst_kkt.max(tr.final_kkt.max());
        out.most_iters = out.most_iters.max(tr.iterations);
        if tr.final_kkt.max() > 1e-7 {
            out.unconverged += 1;
        }
        for w in tr.residuals.windows(2) {
            out.worst_rise = out.worst_rise.max(w[1] - w[0]);
        }
    }
    out
}

fn tight() -> SolveSettings {
    SolveSettings {
        kkt_stride: 0,
        ..SolveSettings::with_tol(HIGH_ACCURACY_TOL, 200_000)
    }
}

/// Largest `‖x_DR − x_oracle‖` over 10 NNLS instances.
pub fn nnls_oracle_gap() -> f64 {
    let spec = FamilySpec::nnls(0);
    let fam = spec.build().unwrap();
    let FamilySpec::Nnls {
        rows, cols, seed, ..
    } = spec
    else {
        unreachable!()
    };
    let f = nnls_design(rows, cols, seed);
    let mut worst: f64 = 0.0;
    for th in sample_thetas(&fam, 10, 21) {
        let sys = fam.lcp(&th).unwrap();
        let tr = solve(&sys, &vec![0.0; sys.dim()], &tight()).unwrap();
        let oracle = nnls_projected_gradient(&f, &th, 1e-13, 2_000_000);
        nnls_active_check(&f, &th, &oracle);
        worst = worst.max(dist2(&tr.x, &oracle));
    }
    worst
}

/// Largest `‖x_DR − x_oracle‖` over the first 5 sampled oscillating-masses
/// instances for which the active-set oracle has a feasible start, and the
/// number of instances checked.
pub fn osc_oracle_gap() -> (f64, usize) {
    let spec = FamilySpec::osc_masses(0);
    let fam = spec.build().unwrap();
    let FamilySpec::OscMasses {
        masses,
        horizon,
        dt,
        u_max,
        x_max,
        ..
    } = spec
    else {
        unreachable!()
    };
    let data = OscMassesData::new(masses, dt).unwrap();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for th in sample_thetas(&fam, 20, 5) {
        let Some(oracle) = osc_active_set(&data, horizon, u_max, x_max, &th) else {
            continue;
        };
        let sys = fam.lcp(&th).unwrap();
        let tr = solve(&sys, &vec![0.0; sys.dim()], &tight()).unwrap();
        worst = worst.max(dist2(&tr.x, &oracle));
        checked += 1;
        if checked == 5 {
            break;
        }
    }
    (worst, checked)
}

fn reference(sys: &LcpSystem) -> DdDr {
    let dim = sys.dim();
    let mut mi = sys.matrix().as_slice().to_vec();
    for j in 0..dim {
        mi[j * dim + j] += 1.0;
    }
    DdDr::new(dim, &mi, sys.q(), sys.m())
}

/// Central differences in double-double with step `1e-6·(1 + |z0_j|)`.
fn central_fd(oracle: &DdDr, z0: &[f64], k: usize) -> Vec<f64> {
    let base: Vec<Dd> = z0.iter().map(|&x| Dd::from_f64(x)).collect();
    (0..z0.len())
        .map(|j| {
            let h = 1e-6 * (1.0 + z0[j].abs());
            let mut zp = base.clone();
            zp[j] = zp[j] + Dd::from_f64(h);
            let mut zm = base.clone();
            zm[j] = zm[j] - Dd::from_f64(h);
            ((oracle.loss(&zp, k) - oracle.loss(&zm, k)) / Dd::from_f64(2.0 * h)).to_f64()
        })
        .collect()
}

/// Worst per-coordinate relative error of the unrolled adjoint against
/// central differences, over 20 random QPs (n = 20, m = 30) at one `k`.
pub fn state_gradient_error(k: usize) -> f64 {
    let fam = FamilySpec::random_qp(20, 30, 3).build().unwrap();
    let thetas = sample_thetas(&fam, 20, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for th in &thetas {
        let sys = fam.lcp(th).unwrap();
        let z0: Vec<f64> = (0..sys.dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let (tape, _, _) = forward_tape(&sys, &z0, k).unwrap();
        let g = backward(&sys, &tape).unwrap();
        let fd = central_fd(&reference(&sys), &z0, k);
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
    }
    worst
}

/// Worst relative error of the loss gradient with respect to 20 randomly
/// chosen network weights on a 3-variable, 4-constraint family, k = 3.
pub fn weight_gradient_error() -> f64 {
    let fam = FamilySpec::random_qp(3, 4, 2).build().unwrap();
    let thetas = sample_thetas(&fam, 8, 3);
    let cfg = TrainConfig {
        k: 3,
        hidden: vec![6, 5],
        seed: 4,
        ..TrainConfig::default()
    };
    let model = init_model(&fam, &thetas, &cfg).unwrap();
    let params = model.flatten();
    let picks = sample(&mut ChaCha8Rng::seed_from_u64(5), params.len(), 20).into_vec();

    let mut worst: f64 = 0.0;
    for th in thetas.iter().take(4) {
        let sys = fam.lcp(th).unwrap();
        let z0 = model.predict(th).unwrap();
        let (_, gz) = loss_and_gradient(&sys, &z0, cfg.k).unwrap();
        let grad = model.backward(th, &gz).unwrap().flatten();
        for &j in &picks {
            let h = 1e-6 * (1.0 + params[j].abs());
            let eval = |delta: f64| {
                let mut p = params.clone();
                p[j] += delta;
                let mut m = model.clone();
                m.set_flat(&p).unwrap();
                unrolled_loss(&m, &sys, th, cfg.k).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if fd.abs() < 1e-9 && grad[j].abs() < 1e-9 {
                continue;
            }
            worst = worst.max((grad[j] - fd).abs() / fd.abs().max(1e-12));
        }
    }
    worst
}
