//! Parametric convex QPs in the inequality form
//!
//! ```text
//! minimize   ½ xᵀPx + cᵀx
//! subject to Ax + s = b,  s ≥ 0
//! ```
//!
//! and the linear complementarity system `M = [[P, Aᵀ], [-A, 0]]`, `q = (c, b)`
//! that Douglas-Rachford splitting operates on.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len, factorize, norm2, DenseMatrix, LuFactorization};

/// Symmetry tolerance on `P`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Smallest admissible eigenvalue of `P`.
pub const PSD_TOL: f64 = 1e-8;
/// Above this size the PSD check only logs a warning.
pub const PSD_HARD_CHECK_MAX_N: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct QpInstance {
    pub p: DenseMatrix,
    pub a: DenseMatrix,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
}

impl QpInstance {
    pub fn n(&self) -> usize {
        self.p.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        if !self.p.is_square() {
            return Err(Error::InvalidData(format!(
                "P is {}x{}, expected square",
                self.p.rows(),
                self.p.cols()
            )));
        }
        if m > 0 && self.a.cols() != n {
            return Err(Error::InvalidData(format!(
                "A has {} columns, P has {} rows",
                self.a.cols(),
                n
            )));
        }
        check_len(n, self.c.len())?;
        check_len(m, self.b.len())?;
        if self
            .c
            .iter()
            .chain(&self.b)
            .chain(&self.theta)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidData("non-finite vector entry".into()));
        }
        let asym = self.p.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidData(format!(
                "P is not symmetric (|P - Pᵀ| = {asym:e})"
            )));
        }
        if n > PSD_HARD_CHECK_MAX_N {
            if !is_psd(&self.p, PSD_TOL) {
                log::warn!("P may not be positive semidefinite (n = {n}, check is advisory)");
            }
        } else if !is_psd(&self.p, PSD_TOL) {
            return Err(Error::InvalidData("P is not positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.matvec(x).expect("length checked by caller");
        0.5 * linalg::dot(x, &px) + linalg::dot(&self.c, x)
    }

    /// KKT residuals of a candidate primal-dual point.
    pub fn kkt_residuals(&self, x: &[f64], y: &[f64], s: &[f64]) -> Result<KktResiduals> {
        check_len(self.n(), x.len())?;
        check_len(self.m(), y.len())?;
        check_len(self.m(), s.len())?;
        let ax = self.a.matvec(x)?;
        let primal: Vec<f64> = (0..self.m()).map(|i| ax[i] + s[i] - self.b[i]).collect();
        let mut dual = self.p.matvec(x)?;
        linalg::axpy(1.0, &self.a.matvec_t(y)?, &mut dual);
        linalg::axpy(1.0, &self.c, &mut dual);
        Ok(KktResiduals {
            primal: norm2(&primal),
            dual: norm2(&dual),
            comp: linalg::dot(s, y).abs(),
            cone: negative_part_norm(s) + negative_part_norm(y),
        })
    }

    pub fn to_json(&self) -> InstanceJson {
        InstanceJson {
            n: self.n(),
            m: self.m(),
            p: self.p.to_rows(),
            a: self.a.to_rows(),
            c: self.c.clone(),
            b: self.b.clone(),
            theta: self.theta.clone(),
        }
    }

    pub fn from_json(j: &InstanceJson) -> Result<Self> {
        let p = if j.n == 0 {
            DenseMatrix::zeros(0, 0)
        } else {
            DenseMatrix::from_rows(&j.p)?
        };
        let a = if j.m == 0 {
            DenseMatrix::zeros(0, j.n)
        } else {
            DenseMatrix::from_rows(&j.a)?
        };
        if p.rows() != j.n || a.rows() != j.m || a.cols() != j.n {
            return Err(Error::InvalidData(
                "matrix shapes disagree with n, m".into(),
            ));
        }
        let qp = QpInstance {
            p,
            a,
            c: j.c.clone(),
            b: j.b.clone(),
            theta: j.theta.clone(),
        };
        qp.validate()?;
        Ok(qp)
    }
}

/// On-disk JSON layout of one instance; matrices are row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub comp: f64,
    pub cone: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.comp).max(self.cone)
    }
}

fn negative_part_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.min(0.0).powi(2)).sum::<f64>().sqrt()
}

/// Cholesky-based test for `P + tol·I ⪰ 0`.
pub fn is_psd(p: &DenseMatrix, tol: f64) -> bool {
    let n = p.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let d = p[(j, j)] + tol - linalg::dot(&l.row(j)[..j], &l.row(j)[..j]);
        if d <= 0.0 {
            return false;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s = p[(i, j)] - linalg::dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / djj;
        }
    }
    true
}

/// Assembled LCP data with the cached factorization of `M + I`.
#[derive(Clone, Debug)]
pub struct LcpSystem {
    n: usize,
    m: usize,
    mat: Arc<DenseMatrix>,
    q: Vec<f64>,
    factor: Arc<LuFactorization>,
}

pub fn assemble_m(p: &DenseMatrix, a: &DenseMatrix) -> DenseMatrix {
    let n = p.rows();
    let m = a.rows();
    let mut mat = DenseMatrix::zeros(n + m, n + m);
    mat.set_block(0, 0, p);
    mat.set_block(0, n, &a.transpose());
    mat.set_block(n, 0, &a.scaled(-1.0));
    mat
}

fn factorize_shifted(mat: &DenseMatrix) -> Result<LuFactorization> {
    let shifted = mat.add(&DenseMatrix::identity(mat.rows()))?;
    factorize(&shifted)
}

/// Assembles `M`, `q` and factorizes `M + I`.
pub fn build_lcp(qp: &QpInstance) -> Result<LcpSystem> {
    let mat = assemble_m(&qp.p, &qp.a);
    let factor = Arc::new(factorize_shifted(&mat)?);
    Ok(LcpSystem::from_parts(qp, Arc::new(mat), factor))
}

impl LcpSystem {
    fn from_parts(qp: &QpInstance, mat: Arc<DenseMatrix>, factor: Arc<LuFactorization>) -> Self {
        let mut q = qp.c.clone();
        q.extend_from_slice(&qp.b);
        LcpSystem {
            n: qp.n(),
            m: qp.m(),
            mat,
            q,
            factor,
        }
    }

    /// Builds the system around an existing factorization of `M + I`.
    pub fn with_factorization(qp: &QpInstance, factor: Arc<LuFactorization>) -> Result<Self> {
        check_len(qp.n() + qp.m(), factor.dim())?;
        Ok(Self::from_parts(
            qp,
            Arc::new(assemble_m(&qp.p, &qp.a)),
            factor,
        ))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.mat
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn factorization(&self) -> &Arc<LuFactorization> {
        &self.factor
    }

    /// Splits `u = (x, y)` and recovers `s = b - A x`.
    pub fn recover(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (x, y) = u.split_at(self.n);
        // rows n.. of M u are -A x
        let s: Vec<f64> = (0..self.m)
            .map(|i| self.q[self.n + i] + linalg::dot(&self.mat.row(self.n + i)[..self.n], x))
            .collect();
        (x.to_vec(), y.to_vec(), s)
    }

    /// KKT residuals computed from the blocks of `M` and `q`.
    pub fn kkt_residuals(&self, x: &[f64], y: &[f64], s: &[f64]) -> Result<KktResiduals> {
        check_len(self.n, x.len())?;
        check_len(self.m, y.len())?;
        check_len(self.m, s.len())?;
        let mut u = x.to_vec();
        u.extend_from_slice(y);
        let mut r = self.mat.matvec(&u)?;
        linalg::axpy(1.0, &self.q, &mut r);
        let primal: Vec<f64> = (0..self.m).map(|i| s[i] - r[self.n + i]).collect();
        Ok(KktResiduals {
            primal: norm2(&primal),
            dual: norm2(&r[..self.n]),
            comp: linalg::dot(s, y).abs(),
            cone: negative_part_norm(s) + negative_part_norm(y),
        })
    }
}

/// How a parameter vector enters the problem data.
#[derive(Clone)]
pub enum ThetaMap {
    /// `c = c0 + Cθ`, `b = b0 + Bθ` with `P`, `A` fixed.
    Affine {
        c_map: Option<DenseMatrix>,
        b_map: Option<DenseMatrix>,
    },
    /// Arbitrary instantiation; `P` and `A` may depend on θ.
    Custom(Arc<dyn Fn(&[f64]) -> Result<QpInstance> + Send + Sync>),
}

impl std::fmt::Debug for ThetaMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThetaMap::Affine { c_map, b_map } => f
                .debug_struct("Affine")
                .field("c_map", &c_map.as_ref().map(|m| (m.rows(), m.cols())))
                .field("b_map", &b_map.as_ref().map(|m| (m.rows(), m.cols())))
                .finish(),
            ThetaMap::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Distribution of θ over its support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaSupport {
    /// Independent uniform coordinates on `[lo_i, hi_i]`.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// `θ = G w + s` with `w ~ N(0, w_std²)` and `s ~ U[s_lo, s_hi]`.
    FeasibleRhs {
        g: Vec<Vec<f64>>,
        w_std: f64,
        s_lo: f64,
        s_hi: f64,
    },
}

impl ThetaSupport {
    /// `max ‖θ‖₂` over the support when the support is bounded.
    pub fn rho2(&self) -> Option<f64> {
        match self {
            ThetaSupport::UniformBox { lo, hi } => Some(
                lo.iter()
                    .zip(hi)
                    .map(|(l, h)| l.abs().max(h.abs()).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            ),
            _ => None,
        }
    }
}

/// A family of QPs sharing structure, indexed by θ.
#[derive(Debug)]
pub struct ParametricFamily {
    pub id: String,
    p: DenseMatrix,
    a: DenseMatrix,
    c0: Vec<f64>,
    b0: Vec<f64>,
    map: ThetaMap,
    d: usize,
    pub support: ThetaSupport,
    hard_box: Option<(Vec<f64>, Vec<f64>)>,
    shared: OnceLock<(Arc<DenseMatrix>, Arc<LuFactorization>)>,
    factorizations: AtomicUsize,
}

impl ParametricFamily {
    /// Family whose `c` and `b` are affine in θ.
    #[allow(clippy::too_many_arguments)]
    pub fn affine(
        id: impl Into<String>,
        p: DenseMatrix,
        a: DenseMatrix,
        c0: Vec<f64>,
        b0: Vec<f64>,
        c_map: Option<DenseMatrix>,
        b_map: Option<DenseMatrix>,
        support: ThetaSupport,
    ) -> Result<Self> {
        let d = c_map
            .as_ref()
            .map(DenseMatrix::cols)
            .or(b_map.as_ref().map(DenseMatrix::cols))
            .unwrap_or(0);
        if let Some(cm) = &c_map {
            check_len(c0.len(), cm.rows())?;
            check_len(d, cm.cols())?;
        }
        if let Some(bm) = &b_map {
            check_len(b0.len(), bm.rows())?;
            check_len(d, bm.cols())?;
        }
        let fam = ParametricFamily {
            id: id.into(),
            p,
            a,
            c0,
            b0,
            map: ThetaMap::Affine { c_map, b_map },
            d,
            support,
            hard_box: None,
            shared: OnceLock::new(),
            factorizations: AtomicUsize::new(0),
        };
        fam.instantiate(&vec![0.0; d])?.validate()?;
        Ok(fam)
    }

    pub fn custom(
        id: impl Into<String>,
        d: usize,
        support: ThetaSupport,
        f: impl Fn(&[f64]) -> Result<QpInstance> + Send + Sync + 'static,
    ) -> Self {
        ParametricFamily {
            id: id.into(),
            p: DenseMatrix::zeros(0, 0),
            a: DenseMatrix::zeros(0, 0),
            c0: Vec::new(),
            b0: Vec::new(),
            map: ThetaMap::Custom(Arc::new(f)),
            d,
            support,
            hard_box: None,
            shared: OnceLock::new(),
            factorizations: AtomicUsize::new(0),
        }
    }

    /// Rejects θ outside `[lo, hi]` with [`Error::InfeasibleStart`].
    pub fn set_hard_box(&mut self, lo: Vec<f64>, hi: Vec<f64>) {
        self.hard_box = Some((lo, hi));
    }

    pub fn theta_dim(&self) -> usize {
        self.d
    }

    /// True iff `P` and `A` do not depend on θ, so `M + I` is factorized once.
    pub fn shared_factorization(&self) -> bool {
        matches!(self.map, ThetaMap::Affine { .. })
    }

    /// Number of `M + I` factorizations performed through this family.
    pub fn factorization_count(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }

    pub fn fixed_p(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn fixed_a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn instantiate(&self, theta: &[f64]) -> Result<QpInstance> {
        if theta.len() != self.d {
            return Err(Error::BadParameterDimension {
                expected: self.d,
                found: theta.len(),
            });
        }
        if let Some((lo, hi)) = &self.hard_box {
            if let Some(index) = (0..self.d).find(|&i| !(theta[i] >= lo[i] && theta[i] <= hi[i])) {
                return Err(Error::InfeasibleStart {
                    index,
                    value: theta[index],
                });
            }
        }
        match &self.map {
            ThetaMap::Affine { c_map, b_map } => {
                let mut c = self.c0.clone();
                if let Some(cm) = c_map {
                    linalg::axpy(1.0, &cm.matvec(theta)?, &mut c);
                }
                let mut b = self.b0.clone();
                if let Some(bm) = b_map {
                    linalg::axpy(1.0, &bm.matvec(theta)?, &mut b);
                }
                Ok(QpInstance {
                    p: self.p.clone(),
                    a: self.a.clone(),
                    c,
                    b,
                    theta: theta.to_vec(),
                })
            }
            ThetaMap::Custom(f) => {
                let qp = f(theta)?;
                Ok(QpInstance {
                    theta: theta.to_vec(),
                    ..qp
                })
            }
        }
    }

    /// Instantiates θ and builds its LCP system, reusing the cached
    /// factorization when the family shares one.
    pub fn lcp(&self, theta: &[f64]) -> Result<LcpSystem> {
        let qp = self.instantiate(theta)?;
        if self.shared_factorization() {
            let (mat, factor) = match self.shared.get() {
                Some(cached) => cached.clone(),
                None => {
                    let mat = assemble_m(&qp.p, &qp.a);
                    let f = Arc::new(factorize_shifted(&mat)?);
                    self.factorizations.fetch_add(1, Ordering::Relaxed);
                    self.shared.get_or_init(|| (Arc::new(mat), f)).clone()
                }
            };
            Ok(LcpSystem::from_parts(&qp, mat, factor))
        } else {
            self.factorizations.fetch_add(1, Ordering::Relaxed);
            build_lcp(&qp)
        }
    }
}
