//! Seeded generators for the benchmark families.
//!
//! | id           | θ                  | problem                                   |
//! |--------------|--------------------|-------------------------------------------|
//! | `nnls`       | `b ∈ U[0,10]^rows` | `min ‖Fx − θ‖²  s.t. x ≥ 0`               |
//! | `random_qp`  | `b` (feasible)     | strongly convex QP, `P = GᵀG + λI`        |
//! | `osc_masses` | `x_init`           | spring-mass chain MPC over a horizon      |
//! | `portfolio`  | `μ`                | `max ρμᵀx − xᵀΣx  s.t. 1ᵀx = 1, x ≥ 0`    |
//!
//! Equalities are written as pairs of inequalities so every family stays in
//! the `Ax + s = b, s ≥ 0` form. All families keep `P` and `A` fixed, so the
//! factorization of `M + I` is shared across θ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::qp::{ParametricFamily, ThetaSupport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Nnls {
        #[serde(default = "d_nnls_rows")]
        rows: usize,
        #[serde(default = "d_nnls_cols")]
        cols: usize,
        #[serde(default)]
        theta_lo: f64,
        #[serde(default = "d_nnls_hi")]
        theta_hi: f64,
        #[serde(default)]
        seed: u64,
    },
    RandomQp {
        #[serde(default = "d_rqp_n")]
        n: usize,
        #[serde(default = "d_rqp_m")]
        m: usize,
        #[serde(default = "d_one")]
        lambda_min: f64,
        #[serde(default)]
        seed: u64,
    },
    OscMasses {
        #[serde(default = "d_masses")]
        masses: usize,
        #[serde(default = "d_horizon")]
        horizon: usize,
        #[serde(default = "d_dt")]
        dt: f64,
        #[serde(default = "d_u_max")]
        u_max: f64,
        #[serde(default = "d_x_max")]
        x_max: f64,
        /// θ is drawn from `U[-init_box, init_box]^{n_x}`.
        #[serde(default = "d_init_box")]
        init_box: f64,
        #[serde(default)]
        seed: u64,
    },
    Portfolio {
        #[serde(default = "d_assets")]
        assets: usize,
        #[serde(default = "d_factors")]
        factors: usize,
        #[serde(default = "d_one")]
        rho: f64,
        #[serde(default = "d_mu_std")]
        mu_std: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn d_nnls_rows() -> usize {
    25
}
fn d_nnls_cols() -> usize {
    50
}
fn d_nnls_hi() -> f64 {
    10.0
}
fn d_rqp_n() -> usize {
    20
}
fn d_rqp_m() -> usize {
    30
}
fn d_one() -> f64 {
    1.0
}
fn d_masses() -> usize {
    4
}
fn d_horizon() -> usize {
    10
}
fn d_dt() -> f64 {
    0.5
}
fn d_u_max() -> f64 {
    0.5
}
fn d_x_max() -> f64 {
    2.0
}
/// Larger boxes make a growing share of draws infeasible under the ±2 state
/// bounds; 0.75 keeps sampled instances feasible.
fn d_init_box() -> f64 {
    0.75
}
fn d_assets() -> usize {
    20
}
fn d_factors() -> usize {
    5
}
fn d_mu_std() -> f64 {
    0.05
}

impl FamilySpec {
    pub fn nnls(seed: u64) -> Self {
        FamilySpec::Nnls {
            rows: d_nnls_rows(),
            cols: d_nnls_cols(),
            theta_lo: 0.0,
            theta_hi: d_nnls_hi(),
            seed,
        }
    }

    pub fn random_qp(n: usize, m: usize, seed: u64) -> Self {
        FamilySpec::RandomQp {
            n,
            m,
            lambda_min: 1.0,
            seed,
        }
    }

    /// Desk-scale oscillating masses: 4 masses, horizon 10.
    pub fn osc_masses(seed: u64) -> Self {
        FamilySpec::OscMasses {
            masses: d_masses(),
            horizon: d_horizon(),
            dt: d_dt(),
            u_max: d_u_max(),
            x_max: d_x_max(),
            init_box: d_init_box(),
            seed,
        }
    }

    /// 18 masses (36 states, 9 inputs), horizon 50.
    pub fn osc_masses_full_scale(seed: u64) -> Self {
        FamilySpec::OscMasses {
            masses: 18,
            horizon: 50,
            dt: d_dt(),
            u_max: d_u_max(),
            x_max: d_x_max(),
            init_box: d_init_box(),
            seed,
        }
    }

    pub fn portfolio(seed: u64) -> Self {
        FamilySpec::Portfolio {
            assets: d_assets(),
            factors: d_factors(),
            rho: 1.0,
            mu_std: d_mu_std(),
            seed,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            FamilySpec::Nnls { .. } => "nnls",
            FamilySpec::RandomQp { .. } => "random_qp",
            FamilySpec::OscMasses { .. } => "osc_masses",
            FamilySpec::Portfolio { .. } => "portfolio",
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            FamilySpec::Nnls { seed, .. }
            | FamilySpec::RandomQp { seed, .. }
            | FamilySpec::OscMasses { seed, .. }
            | FamilySpec::Portfolio { seed, .. } => seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            FamilySpec::Nnls { seed, .. }
            | FamilySpec::RandomQp { seed, .. }
            | FamilySpec::OscMasses { seed, .. }
            | FamilySpec::Portfolio { seed, .. } => *seed = new_seed,
        }
        s
    }

    /// True when `P` is positive definite for every member of the family.
    pub fn strongly_convex(&self) -> bool {
        match *self {
            FamilySpec::Nnls { rows, cols, .. } => rows >= cols,
            FamilySpec::RandomQp { lambda_min, .. } => lambda_min > 0.0,
            FamilySpec::OscMasses { .. } => true,
            FamilySpec::Portfolio { .. } => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidData(format!("{}: {msg}", self.id())));
        match *self {
            FamilySpec::Nnls {
                rows,
                cols,
                theta_lo,
                theta_hi,
                ..
            } => {
                if rows == 0 || cols == 0 {
                    return bad("rows and cols must be positive");
                }
                if !(theta_lo <= theta_hi) {
                    return bad("theta_lo must not exceed theta_hi");
                }
            }
            FamilySpec::RandomQp { n, lambda_min, .. } => {
                if n == 0 {
                    return bad("n must be positive");
                }
                if !(lambda_min > 0.0) {
                    return bad("lambda_min must be positive");
                }
            }
            FamilySpec::OscMasses {
                masses,
                horizon,
                dt,
                u_max,
                x_max,
                init_box,
                ..
            } => {
                if masses < 2 || horizon == 0 {
                    return bad("need at least 2 masses and a positive horizon");
                }
                if !(dt > 0.0 && u_max > 0.0 && x_max > 0.0) {
                    return bad("dt, u_max, x_max must be positive");
                }
                if !(init_box >= 0.0 && init_box <= x_max) {
                    return bad("init_box must lie in [0, x_max]");
                }
            }
            FamilySpec::Portfolio {
                assets,
                factors,
                rho,
                mu_std,
                ..
            } => {
                if assets == 0 || factors == 0 {
                    return bad("assets and factors must be positive");
                }
                if !(rho > 0.0 && mu_std >= 0.0) {
                    return bad("rho must be positive and mu_std nonnegative");
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ParametricFamily> {
        self.validate()?;
        match *self {
            FamilySpec::Nnls {
                rows,
                cols,
                theta_lo,
                theta_hi,
                seed,
            } => gen_nnls(rows, cols, theta_lo, theta_hi, seed),
            FamilySpec::RandomQp {
                n,
                m,
                lambda_min,
                seed,
            } => gen_random_qp(n, m, lambda_min, seed),
            FamilySpec::OscMasses {
                masses,
                horizon,
                dt,
                u_max,
                x_max,
                init_box,
                ..
            } => gen_osc_masses(
                &OscMassesData::new(masses, dt)?,
                horizon,
                u_max,
                x_max,
                init_box,
            ),
            FamilySpec::Portfolio {
                assets,
                factors,
                rho,
                mu_std,
                seed,
            } => gen_portfolio(assets, factors, rho, mu_std, seed),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    DenseMatrix::from_row_major(rows, cols, data).expect("finite by construction")
}

/// The fixed design matrix of the NNLS family.
pub fn nnls_design(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    gaussian_matrix(rows, cols, 1.0, &mut rng(seed))
}

/// `min ‖Fx − θ‖²  s.t. x ≥ 0` lifted to `P = 2FᵀF`, `c = −2Fᵀθ`, `A = −I`, `b = 0`.
pub fn gen_nnls(
    rows: usize,
    cols: usize,
    theta_lo: f64,
    theta_hi: f64,
    seed: u64,
) -> Result<ParametricFamily> {
    let f = nnls_design(rows, cols, seed);
    let ft = f.transpose();
    let p = ft.matmul(&f)?.scaled(2.0);
    ParametricFamily::affine(
        "nnls",
        p,
        DenseMatrix::identity(cols).scaled(-1.0),
        vec![0.0; cols],
        vec![0.0; cols],
        Some(ft.scaled(-2.0)),
        None,
        ThetaSupport::UniformBox {
            lo: vec![theta_lo; rows],
            hi: vec![theta_hi; rows],
        },
    )
}

/// Strongly convex QP with `P = GᵀG + λI` and θ = `b` drawn as `A x₀ + s₀`, `s₀ > 0`.
pub fn gen_random_qp(n: usize, m: usize, lambda_min: f64, seed: u64) -> Result<ParametricFamily> {
    let mut r = rng(seed);
    let g = gaussian_matrix(n, n, 1.0 / (n as f64).sqrt(), &mut r);
    let p = g
        .transpose()
        .matmul(&g)?
        .add(&DenseMatrix::identity(n).scaled(lambda_min))?;
    let a = gaussian_matrix(m, n, 1.0 / (n as f64).sqrt(), &mut r);
    let c: Vec<f64> = (0..n)
        .map(|_| StandardNormal.sample(&mut r))
        .collect::<Vec<f64>>();
    let support = ThetaSupport::FeasibleRhs {
        g: a.to_rows(),
        w_std: 1.0,
        s_lo: 0.1,
        s_hi: 1.0,
    };
    ParametricFamily::affine(
        "random_qp",
        p,
        a,
        c,
        vec![0.0; m],
        None,
        Some(DenseMatrix::identity(m)),
        support,
    )
}

/// Discretized spring-mass chain: unit masses, unit springs between
/// neighbors and to walls at both ends, actuator `j` pushing on mass `2j`.
#[derive(Clone, Debug)]
pub struct OscMassesData {
    pub masses: usize,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl OscMassesData {
    pub fn new(masses: usize, dt: f64) -> Result<Self> {
        let nx = 2 * masses;
        let nu = masses / 2;
        // continuous-time [[Ac, Bc], [0, 0]] for the zero-order-hold exponential
        let dim = nx + nu;
        let mut aug = DenseMatrix::zeros(dim, dim);
        for i in 0..masses {
            aug[(i, masses + i)] = 1.0;
            aug[(masses + i, i)] = -2.0;
            if i > 0 {
                aug[(masses + i, i - 1)] = 1.0;
            }
            if i + 1 < masses {
                aug[(masses + i, i + 1)] = 1.0;
            }
        }
        for j in 0..nu {
            aug[(masses + 2 * j, nx + j)] = 1.0;
        }
        let e = expm(&aug.scaled(dt))?;
        Ok(OscMassesData {
            masses,
            a: e.block(0, 0, nx, nx),
            b: e.block(0, nx, nx, nu),
        })
    }

    pub fn nx(&self) -> usize {
        self.a.rows()
    }

    pub fn nu(&self) -> usize {
        self.b.cols()
    }
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    let norm = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.scaled(0.5_f64.powi(squarings as i32));
    let mut result = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=20 {
        term = term.matmul(&scaled)?.scaled(1.0 / k as f64);
        result = result.add(&term)?;
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// Stacked MPC over `w = (x₁..x_T, u₀..u_{T−1})` with cost `Σ ‖x_t‖² + ‖u_t‖²`.
///
/// Constraint rows, in order: dynamics pairs for `t = 0..T−1`, input bounds,
/// state bounds. θ = `x_init` only enters the right-hand side of the `t = 0`
/// dynamics pair.
pub fn gen_osc_masses(
    sys: &OscMassesData,
    horizon: usize,
    u_max: f64,
    x_max: f64,
    init_box: f64,
) -> Result<ParametricFamily> {
    let layout = OscLayout::new(sys, horizon);
    let (n, m) = (layout.n(), layout.m());
    let (nx, nu) = (sys.nx(), sys.nu());
    let mut a = DenseMatrix::zeros(m, n);
    let mut b0 = vec![0.0; m];
    let mut b_map = DenseMatrix::zeros(m, nx);

    for t in 0..horizon {
        for i in 0..nx {
            let row = layout.dyn_row(t, i);
            // x_{t+1} - A x_t - B u_t  (x_0 = θ moves to the right-hand side)
            a[(row, layout.x(t + 1, i))] = 1.0;
            if t > 0 {
                for j in 0..nx {
                    a[(row, layout.x(t, j))] = -sys.a[(i, j)];
                }
            } else {
                for j in 0..nx {
                    b_map[(row, j)] = sys.a[(i, j)];
                }
            }
            for j in 0..nu {
                a[(row, layout.u(t, j))] = -sys.b[(i, j)];
            }
        }
    }
    // negated copies of the dynamics rows
    for t in 0..horizon {
        for i in 0..nx {
            let (pos, neg) = (layout.dyn_row(t, i), layout.dyn_row(t, i) + horizon * nx);
            for col in 0..n {
                a[(neg, col)] = -a[(pos, col)];
            }
            for j in 0..nx {
                b_map[(neg, j)] = -b_map[(pos, j)];
            }
        }
    }
    let mut row = 2 * horizon * nx;
    for t in 0..horizon {
        for j in 0..nu {
            a[(row, layout.u(t, j))] = 1.0;
            b0[row] = u_max;
            a[(row + 1, layout.u(t, j))] = -1.0;
            b0[row + 1] = u_max;
            row += 2;
        }
    }
    for t in 1..=horizon {
        for i in 0..nx {
            a[(row, layout.x(t, i))] = 1.0;
            b0[row] = x_max;
            a[(row + 1, layout.x(t, i))] = -1.0;
            b0[row + 1] = x_max;
            row += 2;
        }
    }
    debug_assert_eq!(row, m);

    let mut fam = ParametricFamily::affine(
        "osc_masses",
        DenseMatrix::identity(n).scaled(2.0),
        a,
        vec![0.0; n],
        b0,
        None,
        Some(b_map),
        ThetaSupport::UniformBox {
            lo: vec![-init_box; nx],
            hi: vec![init_box; nx],
        },
    )?;
    fam.set_hard_box(vec![-x_max; nx], vec![x_max; nx]);
    Ok(fam)
}

/// Index bookkeeping for the stacked MPC decision vector.
#[derive(Clone, Copy, Debug)]
pub struct OscLayout {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
}

impl OscLayout {
    pub fn new(sys: &OscMassesData, horizon: usize) -> Self {
        OscLayout {
            nx: sys.nx(),
            nu: sys.nu(),
            horizon,
        }
    }

    pub fn n(&self) -> usize {
        self.horizon * (self.nx + self.nu)
    }

    pub fn m(&self) -> usize {
        2 * self.horizon * self.nx + 2 * self.horizon * self.nu + 2 * self.horizon * self.nx
    }

    /// Column of state coordinate `i` at time `t ∈ 1..=T`.
    pub fn x(&self, t: usize, i: usize) -> usize {
        (t - 1) * self.nx + i
    }

    /// Column of input coordinate `j` at time `t ∈ 0..T`.
    pub fn u(&self, t: usize, j: usize) -> usize {
        self.horizon * self.nx + t * self.nu + j
    }

    /// Row of the `+` copy of dynamics coordinate `i` at step `t`.
    pub fn dyn_row(&self, t: usize, i: usize) -> usize {
        t * self.nx + i
    }
}

/// Synthetic factor-model portfolio.
#[derive(Clone, Debug)]
pub struct PortfolioData {
    pub sigma: DenseMatrix,
    pub mu0: Vec<f64>,
}

/// `F ~ N(0,1)`, factor vols `~ U[0.05, 0.2]`, idiosyncratic variance
/// `~ U[0.0025, 0.01]`, mean returns `μ₀ ~ U[0.02, 0.12]`.
pub fn portfolio_data(assets: usize, factors: usize, seed: u64) -> Result<PortfolioData> {
    let mut r = rng(seed);
    let f = gaussian_matrix(assets, factors, 1.0, &mut r);
    let vols = Uniform::new(0.05_f64, 0.2);
    let sigma_f: Vec<f64> = (0..factors).map(|_| vols.sample(&mut r).powi(2)).collect();
    let idio = Uniform::new(0.0025, 0.01);
    let d: Vec<f64> = (0..assets).map(|_| idio.sample(&mut r)).collect();
    let mu_dist = Uniform::new(0.02, 0.12);
    let mu0: Vec<f64> = (0..assets).map(|_| mu_dist.sample(&mut r)).collect();
    let sigma = f
        .matmul(&DenseMatrix::from_diag(&sigma_f))?
        .matmul(&f.transpose())?
        .add(&DenseMatrix::from_diag(&d))?;
    Ok(PortfolioData { sigma, mu0 })
}

/// `max ρμᵀx − xᵀΣx` as `min ½xᵀ(2Σ)x − ρμᵀx` with the budget as a pair of
/// inequalities followed by `−x ≤ 0`.
pub fn gen_portfolio_from(data: &PortfolioData, rho: f64, mu_std: f64) -> Result<ParametricFamily> {
    let n = data.mu0.len();
    let mut a = DenseMatrix::zeros(n + 2, n);
    let mut b0 = vec![0.0; n + 2];
    for j in 0..n {
        a[(0, j)] = 1.0;
        a[(1, j)] = -1.0;
        a[(2 + j, j)] = -1.0;
    }
    b0[0] = 1.0;
    b0[1] = -1.0;
    ParametricFamily::affine(
        "portfolio",
        data.sigma.scaled(2.0),
        a,
        vec![0.0; n],
        b0,
        Some(DenseMatrix::identity(n).scaled(-rho)),
        None,
        ThetaSupport::Gaussian {
            mean: data.mu0.clone(),
            std: vec![mu_std; n],
        },
    )
}

pub fn gen_portfolio(
    assets: usize,
    factors: usize,
    rho: f64,
    mu_std: f64,
    seed: u64,
) -> Result<ParametricFamily> {
    gen_portfolio_from(&portfolio_data(assets, factors, seed)?, rho, mu_std)
}

/// Draws one θ from the support.
pub fn sample_theta(support: &ThetaSupport, rng: &mut impl Rng) -> Vec<f64> {
    match support {
        ThetaSupport::UniformBox { lo, hi } => lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| if h > l { rng.gen_range(l..h) } else { l })
            .collect(),
        ThetaSupport::Gaussian { mean, std } => mean
            .iter()
            .zip(std)
            .map(|(&mu, &s)| {
                let e: f64 = StandardNormal.sample(rng);
                mu + s * e
            })
            .collect(),
        ThetaSupport::FeasibleRhs {
            g,
            w_std,
            s_lo,
            s_hi,
        } => {
            let cols = g.first().map_or(0, Vec::len);
            let w: Vec<f64> = (0..cols)
                .map(|_| Normal::new(0.0, *w_std).expect("finite std").sample(rng))
                .collect();
            g.iter()
                .map(|row| {
                    let s = if s_hi > s_lo {
                        rng.gen_range(*s_lo..*s_hi)
                    } else {
                        *s_lo
                    };
                    crate::linalg::dot(row, &w) + s
                })
                .collect()
        }
    }
}

/// `count` parameter draws from a seeded stream.
pub fn sample_thetas(family: &ParametricFamily, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| sample_theta(&family.support, &mut r))
        .collect()
}
