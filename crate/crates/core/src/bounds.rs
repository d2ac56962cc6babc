//! Baseline warm starts and generalization bounds on the `k`-step risk.

use serde::{Deserialize, Serialize};

use crate::dr::{estimate_beta, solve, SolveSettings, HIGH_ACCURACY_TOL};
use crate::error::{Error, Result};
use crate::linalg::{check_len, dist2};
use crate::predictor::{empirical_risk, PredictorModel};
use crate::qp::ParametricFamily;
use crate::zoo::sample_thetas;

/// Caveat attached to every bound computed from a sampled `B̂`.
pub const SAMPLED_B_CAVEAT: &str =
    "B is a sampled estimate (max over drawn parameters), not a certified supremum over the parameter set";

/// Training pairs `(θᵢ, zᵢ)` for the nearest-neighbor baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborStore {
    thetas: Vec<Vec<f64>>,
    points: Vec<Vec<f64>>,
}

impl NeighborStore {
    pub fn new(thetas: Vec<Vec<f64>>, points: Vec<Vec<f64>>) -> Result<Self> {
        check_len(thetas.len(), points.len())?;
        if thetas.is_empty() {
            return Err(Error::EmptyStore);
        }
        Ok(Self { thetas, points })
    }

    /// Stores the high-accuracy fixed point of each training problem.
    pub fn from_family(family: &ParametricFamily, thetas: &[Vec<f64>]) -> Result<Self> {
        let points = crate::predictor::fixed_point_targets(family, thetas)?;
        Self::new(thetas.to_vec(), points)
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    /// Index of the closest stored θ; ties go to the lowest index.
    pub fn nearest(&self, theta: &[f64]) -> Result<usize> {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, t) in self.thetas.iter().enumerate() {
            check_len(t.len(), theta.len())?;
            let d = dist2(t, theta);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best.ok_or(Error::EmptyStore)
    }
}

#[derive(Clone, Debug)]
pub enum WarmStartStrategy {
    Cold { dim: usize },
    NearestNeighbor(NeighborStore),
    Learned(PredictorModel),
}

impl WarmStartStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            WarmStartStrategy::Cold { .. } => "cold",
            WarmStartStrategy::NearestNeighbor(_) => "nearest_neighbor",
            WarmStartStrategy::Learned(_) => "learned",
        }
    }

    pub fn warm_start(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            WarmStartStrategy::Cold { dim } => Ok(vec![0.0; *dim]),
            WarmStartStrategy::NearestNeighbor(store) => {
                let i = store.nearest(theta)?;
                Ok(store.points[i].clone())
            }
            WarmStartStrategy::Learned(model) => model.predict(theta),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub beta: f64,
    pub k: usize,
    pub n_samples: usize,
    pub delta: f64,
    /// Warm-start distance bound.
    pub b: f64,
    /// Rademacher complexity estimate; required by [`bound_theorem1`] and [`bound_averaged`].
    pub rad: Option<f64>,
    pub d: Option<usize>,
    pub rho2: Option<f64>,
    /// Averagedness; DR is 1/2-averaged.
    pub nu: Option<f64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadInputs(msg.into())
}

impl BoundInputs {
    fn check_common(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(bad(format!("beta = {} must lie in (0, 1)", self.beta)));
        }
        if self.k == 0 {
            return Err(bad("k must be positive"));
        }
        if self.n_samples == 0 {
            return Err(bad("N must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(bad(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(bad(format!(
                "B = {} must be finite and nonnegative",
                self.b
            )));
        }
        Ok(())
    }

    fn rad(&self) -> Result<f64> {
        let rad = self.rad.ok_or_else(|| bad("rad is required"))?;
        if !(rad >= 0.0 && rad.is_finite()) {
            return Err(bad(format!("rad = {rad} must be finite and nonnegative")));
        }
        Ok(rad)
    }
}

fn check_risk(r: f64) -> Result<()> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(bad(format!(
            "empirical risk {r} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// `R̂ + 2√2 β^k (2 rad + B log(1/δ)/(2N))`.
pub fn bound_theorem1(inp: &BoundInputs, empirical_risk: f64) -> Result<f64> {
    inp.check_common()?;
    check_risk(empirical_risk)?;
    let rad = inp.rad()?;
    let n = inp.n_samples as f64;
    let gap = 2.0
        * 2f64.sqrt()
        * inp.beta.powi(inp.k as i32)
        * (2.0 * rad + inp.b * (1.0 / inp.delta).ln() / (2.0 * n));
    Ok(empirical_risk + gap)
}

/// `ρ₂ √(2d/N)`, the complexity of norm-bounded linear maps.
pub fn linear_class_rad(rho2: f64, d: usize, n_samples: usize) -> f64 {
    rho2 * (2.0 * d as f64 / n_samples as f64).sqrt()
}

/// Generalization bound with `rad ← ρ₂ √(2d/N)` for the norm-bounded linear class; any `rad` in the inputs is ignored.
pub fn bound_linear_corollary(inp: &BoundInputs, empirical_risk: f64) -> Result<f64> {
    inp.check_common()?;
    let d = inp.d.ok_or_else(|| bad("d is required"))?;
    let rho2 = inp.rho2.ok_or_else(|| bad("rho2 is required"))?;
    if !(rho2 >= 0.0 && rho2.is_finite()) {
        return Err(bad(format!("rho2 = {rho2} must be finite and nonnegative")));
    }
    let with_rad = BoundInputs {
        rad: Some(linear_class_rad(rho2, d, inp.n_samples)),
        ..inp.clone()
    };
    bound_theorem1(&with_rad, empirical_risk)
}

/// `c₀ = 1/√((k+1) ν (1−ν))`.
pub fn averaged_c0(k: usize, nu: f64) -> Result<f64> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(bad(format!("nu = {nu} must lie in (0, 1)")));
    }
    Ok(1.0 / ((k as f64 + 1.0) * nu * (1.0 - nu)).sqrt())
}

/// `R̂ + 2 c₀ rad + c₁ log(2/δ)/(2N)` with `c₁ = B c₀`. Does not use β.
pub fn bound_averaged(inp: &BoundInputs, empirical_risk: f64) -> Result<f64> {
    if inp.k == 0 || inp.n_samples == 0 {
        return Err(bad("k and N must be positive"));
    }
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return Err(bad(format!("delta = {} must lie in (0, 1)", inp.delta)));
    }
    if !(inp.b >= 0.0 && inp.b.is_finite()) {
        return Err(bad(format!("B = {} must be finite and nonnegative", inp.b)));
    }
    check_risk(empirical_risk)?;
    let rad = inp.rad()?;
    let c0 = averaged_c0(inp.k, inp.nu.unwrap_or(0.5))?;
    let c1 = inp.b * c0;
    Ok(
        empirical_risk
            + 2.0 * c0 * rad
            + c1 * (2.0 / inp.delta).ln() / (2.0 * inp.n_samples as f64),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BEstimate {
    pub value: f64,
    pub samples: usize,
    /// Always true: the value is a max over samples, not a sup over the support.
    pub sampled: bool,
}

/// `B̂ = maxᵢ ‖warm_start(θᵢ) − z∞(θᵢ)‖₂`, each `z∞` solved from the warm start itself.
pub fn estimate_b(
    strategy: &WarmStartStrategy,
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
) -> Result<BEstimate> {
    if thetas.is_empty() {
        return Err(bad("no samples for B estimate"));
    }
    let settings = SolveSettings::with_tol(HIGH_ACCURACY_TOL, 100_000);
    let mut value: f64 = 0.0;
    for th in thetas {
        let sys = family.lcp(th)?;
        let z0 = strategy.warm_start(th)?;
        let z_inf = solve(&sys, &z0, &settings)?.z;
        value = value.max(dist2(&z0, &z_inf));
    }
    Ok(BEstimate {
        value,
        samples: thetas.len(),
        sampled: true,
    })
}

/// Max of per-instance contraction estimates, each probed from the strategy's warm start.
pub fn estimate_family_beta(
    strategy: &WarmStartStrategy,
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
) -> Result<f64> {
    let settings = SolveSettings::with_tol(HIGH_ACCURACY_TOL, 100_000);
    let mut beta: f64 = 0.0;
    for th in thetas {
        let sys = family.lcp(th)?;
        let probe = strategy.warm_start(th)?;
        beta = beta.max(estimate_beta(&sys, &[probe], &settings)?.beta);
    }
    Ok(beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Theorem1,
    LinearCorollary,
    Averaged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_kind: BoundKind,
    pub beta: f64,
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub rad: f64,
    pub rho2: Option<f64>,
    pub empirical_risk: f64,
    pub bound_value: f64,
    pub violation_fraction: Option<f64>,
    /// `"linear_class"` or `"supplied"`.
    pub rad_source: String,
    pub caveat: String,
}

impl BoundReport {
    pub fn compute(kind: BoundKind, inp: &BoundInputs, empirical_risk: f64) -> Result<Self> {
        let (value, rad, source) = match kind {
            BoundKind::Theorem1 => (bound_theorem1(inp, empirical_risk)?, inp.rad()?, "supplied"),
            BoundKind::Averaged => (bound_averaged(inp, empirical_risk)?, inp.rad()?, "supplied"),
            BoundKind::LinearCorollary => {
                let v = bound_linear_corollary(inp, empirical_risk)?;
                let rad =
                    linear_class_rad(inp.rho2.unwrap_or(0.0), inp.d.unwrap_or(0), inp.n_samples);
                (v, rad, "linear_class")
            }
        };
        Ok(Self {
            bound_kind: kind,
            beta: inp.beta,
            k: inp.k,
            n: inp.n_samples,
            delta: inp.delta,
            b: inp.b,
            rad,
            rho2: inp.rho2,
            empirical_risk,
            bound_value: value,
            violation_fraction: None,
            rad_source: source.to_string(),
            caveat: SAMPLED_B_CAVEAT.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub k: usize,
    pub delta: f64,
    pub seed: u64,
    /// Training problems used to estimate β̂ and B̂.
    pub estimate_samples: usize,
    /// Multiplies rad and B before evaluating the bound.
    pub inflate: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test: 100,
            k: 15,
            delta: 0.05,
            seed: 0,
            estimate_samples: 10,
            inflate: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub report: BoundReport,
    pub test_risk: f64,
    pub violated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: Vec<TrialOutcome>,
    pub violation_fraction: f64,
}

/// Resamples train/test splits, fits a model on each train split with `fit`,
/// and compares the test risk to the linear-class Corollary bound.
pub fn bound_violation_trial<F>(
    family: &ParametricFamily,
    cfg: &TrialConfig,
    trials: usize,
    mut fit: F,
) -> Result<TrialSummary>
where
    F: FnMut(&[Vec<f64>], u64) -> Result<PredictorModel>,
{
    if trials == 0 {
        return Err(bad("trials must be at least 1"));
    }
    if cfg.n_train == 0 || cfg.n_test == 0 || cfg.estimate_samples == 0 {
        return Err(bad("sample counts must be positive"));
    }
    let rho2 = family
        .support
        .rho2()
        .ok_or_else(|| bad("linear-class bound needs a bounded parameter support"))?;
    let mut outcomes = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = cfg.seed.wrapping_add(1_000_003 * t as u64);
        let train = sample_thetas(family, cfg.n_train, seed);
        let test = sample_thetas(family, cfg.n_test, seed ^ 0x7465_7374);
        let model = fit(&train, seed)?;
        let emp = empirical_risk(&model, family, &train, cfg.k)?;
        let test_risk = empirical_risk(&model, family, &test, cfg.k)?;
        let probe = &train[..cfg.estimate_samples.min(train.len())];
        let strategy = WarmStartStrategy::Learned(model);
        let beta = estimate_family_beta(&strategy, family, probe)?;
        let b = estimate_b(&strategy, family, probe)?.value;
        let inp = BoundInputs {
            beta,
            k: cfg.k,
            n_samples: cfg.n_train,
            delta: cfg.delta,
            b: b * cfg.inflate,
            rad: None,
            d: Some(family.theta_dim()),
            rho2: Some(rho2 * cfg.inflate),
            nu: None,
        };
        let report = BoundReport::compute(BoundKind::LinearCorollary, &inp, emp)?;
        let violated = test_risk > report.bound_value;
        log::debug!(
            "trial {t}: R̂ {emp:.4e} test {test_risk:.4e} bound {:.4e}",
            report.bound_value
        );
        outcomes.push(TrialOutcome {
            report,
            test_risk,
            violated,
        });
    }
    let fraction = outcomes.iter().filter(|o| o.violated).count() as f64 / trials as f64;
    for o in &mut outcomes {
        o.report.violation_fraction = Some(fraction);
    }
    Ok(TrialSummary {
        trials: outcomes,
        violation_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> BoundInputs {
        BoundInputs {
            beta: 0.9,
            k: 10,
            n_samples: 100,
            delta: 0.05,
            b: 1.0,
            rad: Some(0.5),
            ..Default::default()
        }
    }

    #[test]
    fn theorem1_worked_value() {
        let v = bound_theorem1(&inputs(), 0.2).unwrap();
        // 0.9^10 = 0.3486784401, log(20) = 2.995732273553991
        let expect = 0.2 + 2.0 * 2f64.sqrt() * 0.3486784401 * (1.0 + 2.995732273553991 / 200.0);
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 1.200_983_686_754_19).abs() < 1e-12, "{v}");
    }

    #[test]
    fn theorem1_large_k_and_zero_terms() {
        let inp = BoundInputs {
            k: 10_000,
            ..inputs()
        };
        assert!(bound_theorem1(&inp, 0.2).unwrap() - 0.2 < 1e-12);
        let zero = BoundInputs {
            rad: Some(0.0),
            b: 0.0,
            ..inputs()
        };
        assert_eq!(bound_theorem1(&zero, 0.3).unwrap(), 0.3);
    }

    #[test]
    fn bad_inputs_rejected() {
        for inp in [
            BoundInputs {
                beta: 1.0,
                ..inputs()
            },
            BoundInputs {
                delta: 1.0,
                ..inputs()
            },
            BoundInputs {
                n_samples: 0,
                ..inputs()
            },
            BoundInputs {
                rad: None,
                ..inputs()
            },
            BoundInputs {
                b: -1.0,
                ..inputs()
            },
        ] {
            assert!(matches!(
                bound_theorem1(&inp, 0.1),
                Err(Error::BadInputs(_))
            ));
        }
    }

    #[test]
    fn corollary_rad_scaling() {
        let a = linear_class_rad(3.0, 5, 100);
        let b = linear_class_rad(3.0, 5, 400);
        assert!((a / b - 2.0).abs() < 1e-14);
        assert_eq!(linear_class_rad(3.0, 0, 100), 0.0);
        let inp = BoundInputs {
            d: Some(25),
            rho2: Some(50.0),
            ..inputs()
        };
        let expect = bound_theorem1(
            &BoundInputs {
                rad: Some(50.0 * (50.0f64 / 100.0).sqrt()),
                ..inp.clone()
            },
            0.1,
        )
        .unwrap();
        assert_eq!(bound_linear_corollary(&inp, 0.1).unwrap(), expect);
    }

    #[test]
    fn averaged_constants() {
        assert!((averaged_c0(3, 0.5).unwrap() - 1.0).abs() < 1e-15);
        let c: Vec<f64> = (1..20).map(|k| averaged_c0(k, 0.5).unwrap()).collect();
        assert!(c.windows(2).all(|w| w[1] < w[0]));
        let zero = BoundInputs {
            rad: Some(0.0),
            b: 0.0,
            ..inputs()
        };
        assert_eq!(bound_averaged(&zero, 0.4).unwrap(), 0.4);
        assert!(averaged_c0(3, 1.0).is_err());
    }

    #[test]
    fn neighbor_ties_and_single_store() {
        let store = NeighborStore::new(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![10.0], vec![20.0]],
        )
        .unwrap();
        assert_eq!(store.nearest(&[0.0, 0.0]).unwrap(), 0);
        assert_eq!(store.nearest(&[-0.9, 0.0]).unwrap(), 1);
        let one = WarmStartStrategy::NearestNeighbor(
            NeighborStore::new(vec![vec![5.0]], vec![vec![1.0, 2.0]]).unwrap(),
        );
        assert_eq!(one.warm_start(&[-100.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            NeighborStore::new(vec![], vec![]),
            Err(Error::EmptyStore)
        ));
    }

    #[test]
    fn cold_is_zero() {
        let s = WarmStartStrategy::Cold { dim: 4 };
        assert_eq!(s.warm_start(&[1.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn report_keys() {
        let r = BoundReport::compute(BoundKind::Theorem1, &inputs(), 0.2).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in [
            "bound_kind",
            "beta",
            "k",
            "N",
            "delta",
            "B",
            "rad",
            "rho2",
            "empirical_risk",
            "bound_value",
            "violation_fraction",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
