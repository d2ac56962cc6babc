//! Solvers that share no code with the DR path, used to check its solutions.

use drws::zoo::OscMassesData;
use drws::DenseMatrix;
use nalgebra::{DMatrix, DVector};

/// `min ‖Fx − θ‖²  s.t. x ≥ 0` by accelerated projected gradient with restarts.
///
/// Runs until the projected-gradient step moves `x` by less than `tol`.
pub fn nnls_projected_gradient(
    f: &DenseMatrix,
    theta: &[f64],
    tol: f64,
    max_iters: usize,
) -> Vec<f64> {
    let fm = DMatrix::from_row_slice(f.rows(), f.cols(), f.as_slice());
    let th = DVector::from_column_slice(theta);
    let h = 2.0 * fm.transpose() * &fm;
    let g0 = -2.0 * fm.transpose() * &th;
    let lip = h.symmetric_eigenvalues().max();
    let step = 1.0 / lip;
    let n = f.cols();
    let mut x = DVector::<f64>::zeros(n);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iters {
        let grad = &h * &y + &g0;
        let x_next = (&y - step * grad).map(|v| v.max(0.0));
        let moved = (&x_next - &x).norm();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // restart momentum when the objective direction turns
        if (&y - &x_next).dot(&(&x_next - &x)) > 0.0 {
            t = 1.0;
            y = x_next.clone();
        } else {
            y = &x_next + ((t - 1.0) / t_next) * (&x_next - &x);
            t = t_next;
        }
        x = x_next;
        if moved <= tol {
            break;
        }
    }
    x.iter().copied().collect()
}

/// Condensed oscillating-masses MPC solved by a primal active-set method.
///
/// Eliminates the dynamics (`x = Γu + Φθ`), leaving `min ‖Γu + Φθ‖² + ‖u‖²`
/// over the input and state boxes. Returns the full stacked decision
/// `(x₁..x_T, u₀..u_{T−1})`, or `None` if `u = 0` is not a feasible start.
pub fn osc_active_set(
    sys: &OscMassesData,
    horizon: usize,
    u_max: f64,
    x_max: f64,
    theta: &[f64],
) -> Option<Vec<f64>> {
    let nx = sys.nx();
    let nu = sys.nu();
    let a = DMatrix::from_row_slice(nx, nx, sys.a.as_slice());
    let b = DMatrix::from_row_slice(nx, nu, sys.b.as_slice());
    let nvar = horizon * nu;
    let mut gamma = DMatrix::<f64>::zeros(horizon * nx, nvar);
    let mut phi = DMatrix::<f64>::zeros(horizon * nx, nx);
    let mut a_pow = DMatrix::<f64>::identity(nx, nx);
    for t in 1..=horizon {
        a_pow = &a * &a_pow;
        phi.view_mut(((t - 1) * nx, 0), (nx, nx)).copy_from(&a_pow);
        let mut blk = b.clone();
        for s in (0..t).rev() {
            gamma
                .view_mut(((t - 1) * nx, s * nu), (nx, nu))
                .copy_from(&blk);
            blk = &a * blk;
        }
    }
    let th = DVector::from_column_slice(theta);
    let free = &phi * &th;
    let hess = 2.0 * (gamma.transpose() * &gamma + DMatrix::identity(nvar, nvar));
    let lin = 2.0 * gamma.transpose() * &free;

    // G u ≤ h: ±u ≤ u_max, ±(Γu + Φθ) ≤ x_max
    let nc = 2 * nvar + 2 * horizon * nx;
    let mut g = DMatrix::<f64>::zeros(nc, nvar);
    let mut h = DVector::<f64>::zeros(nc);
    for i in 0..nvar {
        g[(2 * i, i)] = 1.0;
        g[(2 * i + 1, i)] = -1.0;
        h[2 * i] = u_max;
        h[2 * i + 1] = u_max;
    }
    for r in 0..horizon * nx {
        let row = 2 * nvar + 2 * r;
        for j in 0..nvar {
            g[(row, j)] = gamma[(r, j)];
            g[(row + 1, j)] = -gamma[(r, j)];
        }
        h[row] = x_max - free[r];
        h[row + 1] = x_max + free[r];
    }

    let mut u = DVector::<f64>::zeros(nvar);
    if h.iter().any(|&v| v < 0.0) {
        return None;
    }
    let mut working: Vec<usize> = Vec::new();
    for _ in 0..10_000 {
        let w = working.len();
        let mut kkt = DMatrix::<f64>::zeros(nvar + w, nvar + w);
        kkt.view_mut((0, 0), (nvar, nvar)).copy_from(&hess);
        for (slot, &c) in working.iter().enumerate() {
            for j in 0..nvar {
                kkt[(nvar + slot, j)] = g[(c, j)];
                kkt[(j, nvar + slot)] = g[(c, j)];
            }
        }
        let mut rhs = DVector::<f64>::zeros(nvar + w);
        rhs.rows_mut(0, nvar).copy_from(&(-(&hess * &u + &lin)));
        let sol = kkt.lu().solve(&rhs)?;
        let p = sol.rows(0, nvar).into_owned();
        if p.amax() <= 1e-13 * (1.0 + u.amax()) {
            let lambda = sol.rows(nvar, w);
            match lambda.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)) {
                Some((slot, &l)) if l < -1e-12 => {
                    working.remove(slot);
                }
                _ => break,
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for c in 0..nc {
            if working.contains(&c) {
                continue;
            }
            let gp = g.row(c).dot(&p.transpose());
            if gp > 0.0 {
                let slack = h[c] - g.row(c).dot(&u.transpose());
                let a_c = (slack / gp).max(0.0);
                if a_c < alpha {
                    alpha = a_c;
                    blocking = Some(c);
                }
            }
        }
        u += alpha * p;
        if let Some(c) = blocking {
            working.push(c);
        }
    }
    let x = &gamma * &u + free;
    Some(x.iter().chain(u.iter()).copied().collect())
}

/// Asserts the first-order conditions of the NNLS problem at `x`:
/// `x ≥ 0`, gradient ≥ 0, and gradient ⟂ x, all to a loose relative tolerance.
pub fn nnls_active_check(f: &DenseMatrix, theta: &[f64], x: &[f64]) {
    let fm = DMatrix::from_row_slice(f.rows(), f.cols(), f.as_slice());
    let xv = DVector::from_column_slice(x);
    let grad = 2.0 * fm.transpose() * (&fm * &xv - DVector::from_column_slice(theta));
    let scale = 1.0 + grad.amax();
    for (xi, gi) in xv.iter().zip(grad.iter()) {
        assert!(*xi >= 0.0);
        assert!(*gi >= -1e-8 * scale, "negative gradient {gi}");
        assert!((xi * gi).abs() <= 1e-8 * scale, "complementarity {xi} {gi}");
    }
}
