//! Output records and their CSV renderings.

use std::fmt::Write as _;

use drws::bounds::{BoundReport, TrialSummary};
use serde::{Deserialize, Serialize};

/// Mean over test problems, rounded half-up.
pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// `1 − method/cold`.
pub fn reduction(method: f64, cold: f64) -> f64 {
    1.0 - method / cold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    /// `cold`, `nearest_neighbor`, or `learned_k{K}`.
    pub method: String,
    pub mean_iters: f64,
    /// `mean_iters` rounded half-up.
    pub iters: u64,
    /// Computed from the unrounded means.
    pub reduction: f64,
    /// Problems that did not reach the tolerance within `max_iters` (counted as `max_iters`).
    pub unreached: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceRow {
    pub eps: f64,
    pub methods: Vec<MethodResult>,
}

impl ToleranceRow {
    pub fn get(&self, method: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_digest: String,
    pub seed: u64,
    pub family: String,
    pub n_test: usize,
    pub max_iters: usize,
    pub rows: Vec<ToleranceRow>,
    /// Largest final KKT residual per method over the test set.
    pub worst_final_kkt: Vec<(String, f64)>,
    pub trained_k: Vec<usize>,
    pub nearest_neighbor: bool,
}

impl BenchmarkReport {
    pub fn row(&self, eps: f64) -> Option<&ToleranceRow> {
        self.rows.iter().find(|r| r.eps == eps)
    }

    /// `accuracies,no_learn_iters,naive_ws_iters,naive_ws_red,traink{K}_iters,traink{K}_red,…`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("accuracies,no_learn_iters");
        if self.nearest_neighbor {
            out.push_str(",naive_ws_iters,naive_ws_red");
        }
        for k in &self.trained_k {
            let _ = write!(out, ",traink{k}_iters,traink{k}_red");
        }
        out.push('\n');
        for row in &self.rows {
            let cold = row.get("cold").expect("cold column");
            let _ = write!(out, "{},{}", row.eps, cold.iters);
            if self.nearest_neighbor {
                let nn = row
                    .get("nearest_neighbor")
                    .expect("nearest-neighbor column");
                let _ = write!(out, ",{},{:.4}", nn.iters, nn.reduction);
            }
            for k in &self.trained_k {
                let m = row.get(&format!("learned_k{k}")).expect("learned column");
                let _ = write!(out, ",{},{:.4}", m.iters, m.reduction);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutput {
    pub config_digest: String,
    pub seed: u64,
    pub model: String,
    pub k: usize,
    pub test_risk: f64,
    pub beta_hat: f64,
    pub b_hat: f64,
    pub reports: Vec<BoundReport>,
    pub trials: Option<TrialSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRow {
    pub k: usize,
    pub median_grad_norm: f64,
    /// Median at this k over the median at the previous k.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub instance: usize,
    pub probe: usize,
    pub beta_hat: f64,
    pub averaged_regime: bool,
    pub k: usize,
    pub loss: f64,
    /// `2 β̂^k ‖z − z∞‖`.
    pub bound: f64,
    /// `loss / bound`.
    pub ratio: f64,
    /// `loss ≤ slack · bound`.
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOutput {
    pub config_digest: String,
    pub seed: u64,
    pub family: String,
    pub gradient: Vec<GradientRow>,
    pub betas: Vec<f64>,
    /// Set when any instance's β̂ exceeds the averaged-regime threshold.
    pub averaged_regime: bool,
    pub lemma: Vec<LemmaRow>,
    pub lemma_slack: f64,
    pub lemma_worst_ratio: f64,
}

impl DiagnoseOutput {
    pub fn gradient_csv(&self) -> String {
        let regime = if self.averaged_regime {
            "averaged"
        } else {
            "contractive"
        };
        let mut out = String::from("k,median_grad_norm,ratio,regime\n");
        for r in &self.gradient {
            let ratio = r.ratio.map(|x| format!("{x:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:e},{},{}", r.k, r.median_grad_norm, ratio, regime);
        }
        out
    }

    pub fn lemma_csv(&self) -> String {
        let mut out = String::from("instance,probe,beta_hat,regime,k,loss,bound,ratio,pass\n");
        for r in &self.lemma {
            let regime = if r.averaged_regime {
                "averaged"
            } else {
                "contractive"
            };
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{:e},{:e},{:e},{}",
                r.instance, r.probe, r.beta_hat, regime, r.k, r.loss, r.bound, r.ratio, r.pass
            );
        }
        out
    }
}
