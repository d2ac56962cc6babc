use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use drws::bounds::{
    bound_violation_trial, estimate_b, estimate_family_beta, BoundInputs, BoundReport,
    NeighborStore, TrialConfig, WarmStartStrategy,
};
use drws::dataset::Dataset;
use drws::dr::{estimate_beta, fixed_point_proxy, run_k, solve, SolveSettings, HIGH_ACCURACY_TOL};
use drws::linalg::{dist2, norm2};
use drws::predictor::{
    empirical_risk, fixed_point_targets, init_model, load_model, pretrain, save_model, train,
    train_from, PredictorModel, TrainConfig, TrainHistory,
};
use drws::unroll::gradient_norm_decay;
use drws::zoo::sample_thetas;
use drws::ParametricFamily;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{BoundModel, Config};
use crate::report::{
    reduction, round_half_up, BenchmarkReport, BoundsOutput, DiagnoseOutput, GradientRow, LemmaRow,
    MethodResult, ToleranceRow,
};
use crate::CliError;

/// File layout under `out_dir`.
#[derive(Clone, Debug)]
pub struct OutPaths {
    pub dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }

    pub fn test_data(&self) -> PathBuf {
        self.dir.join("test.jsonl")
    }

    pub fn model(&self, k: usize) -> PathBuf {
        self.dir.join(format!("model_k{k}.bin"))
    }

    pub fn history(&self, k: usize) -> PathBuf {
        self.dir.join(format!("history_k{k}.csv"))
    }

    pub fn pretrain_history(&self, k: usize) -> PathBuf {
        self.dir.join(format!("pretrain_k{k}.csv"))
    }

    pub fn train_summary(&self) -> PathBuf {
        self.dir.join("train.json")
    }

    pub fn evaluate_csv(&self) -> PathBuf {
        self.dir.join("evaluate.csv")
    }

    pub fn evaluate_json(&self) -> PathBuf {
        self.dir.join("evaluate.json")
    }

    pub fn curves(&self) -> PathBuf {
        self.dir.join("curves.csv")
    }

    pub fn problem_curves(&self) -> PathBuf {
        self.dir.join("curves_per_problem.csv")
    }

    pub fn bounds(&self) -> PathBuf {
        self.dir.join("bounds.json")
    }

    pub fn diagnose_csv(&self) -> PathBuf {
        self.dir.join("diagnose.csv")
    }

    pub fn lemma_csv(&self) -> PathBuf {
        self.dir.join("lemma.csv")
    }

    pub fn diagnose_json(&self) -> PathBuf {
        self.dir.join("diagnose.json")
    }
}

/// Independent stream per purpose from one run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_BOUNDS: u64 = 4;
const STREAM_DIAGNOSE: u64 = 5;

fn build_family(cfg: &Config) -> Result<ParametricFamily, CliError> {
    cfg.family
        .build()
        .map_err(|e| CliError::Config(format!("family: {e}")))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput {
            path: path.display().to_string(),
            reason: "dataset not found (run `generate` first)".into(),
        });
    }
    Dataset::load(path).map_err(|e| CliError::MissingInput {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn load_trained(path: &Path) -> Result<PredictorModel, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput {
            path: path.display().to_string(),
            reason: "model not found (run `train` first)".into(),
        });
    }
    Ok(load_model(path)?)
}

fn check_family(cfg: &Config, ds: &Dataset, path: &Path) -> Result<(), CliError> {
    if ds.family != cfg.family {
        return Err(CliError::MissingInput {
            path: path.display().to_string(),
            reason: "dataset was generated for a different family".into(),
        });
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub struct GenerateOutput {
    pub train: PathBuf,
    pub test: PathBuf,
}

pub fn cmd_generate(cfg: &Config) -> Result<GenerateOutput, CliError> {
    let paths = OutPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.dir)?;
    let family = build_family(cfg)?;
    let digest = cfg.digest();
    let train_seed = derive_seed(cfg.seed, STREAM_TRAIN);
    let test_seed = derive_seed(cfg.seed, STREAM_TEST);
    let mut train = Dataset::new(
        cfg.family.clone(),
        train_seed,
        sample_thetas(&family, cfg.generate.n_train, train_seed),
    );
    train.config_digest = Some(digest.clone());
    if cfg.generate.targets {
        let targets = fixed_point_targets(&family, &train.thetas())?;
        train.set_targets(targets)?;
    }
    let mut test = Dataset::new(
        cfg.family.clone(),
        test_seed,
        sample_thetas(&family, cfg.generate.n_test, test_seed),
    );
    test.config_digest = Some(digest);
    train.save(paths.train_data())?;
    test.save(paths.test_data())?;
    log::info!(
        "wrote {} and {}",
        paths.train_data().display(),
        paths.test_data().display()
    );
    Ok(GenerateOutput {
        train: paths.train_data(),
        test: paths.test_data(),
    })
}

fn history_csv(h: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,holdout_loss,seconds\n");
    for (i, loss) in h.train_loss.iter().enumerate() {
        let hold = h.holdout_loss[i]
            .map(|x| format!("{x:e}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:e},{},{:.6}",
            i + 1,
            loss,
            hold,
            h.epoch_seconds[i]
        );
    }
    out
}

fn pretrain_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mse\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{:e}", i + 1, l);
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainedModelSummary {
    pub k: usize,
    pub path: String,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_holdout_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub config_digest: String,
    pub seed: u64,
    pub models: Vec<TrainedModelSummary>,
}

/// Initializes, optionally pretrains on fixed points (cached in the dataset
/// when present), then trains on the unrolled loss.
pub fn fit_model(
    family: &ParametricFamily,
    train_set: &Dataset,
    holdout: &[Vec<f64>],
    tc: &TrainConfig,
) -> Result<(PredictorModel, TrainHistory), CliError> {
    let thetas = train_set.thetas();
    let mut model = init_model(family, &thetas, tc)?;
    let mut pre = Vec::new();
    if tc.pretrain && tc.pretrain_epochs > 0 {
        let targets = match train_set.targets() {
            Some(t) => t,
            None => fixed_point_targets(family, &thetas)?,
        };
        pre = pretrain(&mut model, &thetas, &targets, tc.pretrain_epochs, tc)?;
    }
    let mut history = train_from(&mut model, family, &thetas, holdout, tc)?;
    history.pretrain_loss = pre;
    Ok((model, history))
}

pub fn cmd_train(cfg: &Config) -> Result<TrainSummary, CliError> {
    let paths = OutPaths::new(&cfg.out_dir);
    let family = build_family(cfg)?;
    let train_set = load_dataset(&paths.train_data())?;
    check_family(cfg, &train_set, &paths.train_data())?;
    let holdout: Vec<Vec<f64>> = if cfg.train.holdout > 0 {
        let test = load_dataset(&paths.test_data())?;
        test.thetas().into_iter().take(cfg.train.holdout).collect()
    } else {
        Vec::new()
    };
    let digest = cfg.digest();
    let mut summary = TrainSummary {
        config_digest: digest.clone(),
        seed: cfg.seed,
        models: Vec::new(),
    };
    for &k in &cfg.train.k {
        let tc = cfg
            .train
            .train_config(k, derive_seed(cfg.seed, STREAM_MODEL));
        let (mut model, history) = fit_model(&family, &train_set, &holdout, &tc)?;
        model.meta.config_digest = Some(digest.clone());
        save_model(&model, paths.model(k))?;
        std::fs::write(paths.history(k), history_csv(&history))?;
        if !history.pretrain_loss.is_empty() {
            std::fs::write(
                paths.pretrain_history(k),
                pretrain_csv(&history.pretrain_loss),
            )?;
        }
        log::info!("trained k={k}: final loss {:?}", history.train_loss.last());
        summary.models.push(TrainedModelSummary {
            k,
            path: paths.model(k).display().to_string(),
            initial_train_loss: history.train_loss.first().copied(),
            final_train_loss: history.train_loss.last().copied(),
            final_holdout_loss: history.holdout_loss.last().copied().flatten(),
        });
    }
    write_json(&paths.train_summary(), &summary)?;
    Ok(summary)
}

struct MethodRuns {
    name: String,
    /// Per test problem: iterations to each tolerance (None if unreached).
    hits: Vec<Vec<Option<usize>>>,
    residuals: Vec<Vec<f64>>,
    worst_kkt: f64,
}

fn run_method(
    name: String,
    strategy: &WarmStartStrategy,
    family: &ParametricFamily,
    thetas: &[Vec<f64>],
    tolerances: &[f64],
    max_iters: usize,
) -> Result<MethodRuns, CliError> {
    let tightest = tolerances.iter().copied().fold(f64::INFINITY, f64::min);
    let settings = SolveSettings {
        kkt_stride: 0,
        ..SolveSettings::with_tol(tightest, max_iters)
    };
    let mut runs = MethodRuns {
        name,
        hits: Vec::with_capacity(thetas.len()),
        residuals: Vec::with_capacity(thetas.len()),
        worst_kkt: 0.0,
    };
    for th in thetas {
        let sys = family.lcp(th)?;
        let z0 = strategy.warm_start(th)?;
        let trace = solve(&sys, &z0, &settings)?;
        runs.hits
            .push(tolerances.iter().map(|&e| trace.iterations_to(e)).collect());
        runs.worst_kkt = runs.worst_kkt.max(trace.final_kkt.max());
        runs.residuals.push(trace.residuals);
    }
    Ok(runs)
}

fn mean_curve(residuals: &[Vec<f64>]) -> Vec<f64> {
    let len = residuals.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            // a finished run keeps its final residual
            let total: f64 = residuals
                .iter()
                .map(|r| r.get(i).or(r.last()).copied().unwrap_or(0.0))
                .sum();
            total / residuals.len() as f64
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &Config) -> Result<BenchmarkReport, CliError> {
    let paths = OutPaths::new(&cfg.out_dir);
    let family = build_family(cfg)?;
    let test = load_dataset(&paths.test_data())?;
    check_family(cfg, &test, &paths.test_data())?;
    let thetas = test.thetas();
    let ev = &cfg.evaluate;
    let dim = family.fixed_p().rows() + family.fixed_a().rows();
    let ks = cfg.eval_ks();

    let mut strategies = vec![("cold".to_string(), WarmStartStrategy::Cold { dim })];
    if ev.nearest_neighbor {
        let train_set = load_dataset(&paths.train_data())?;
        check_family(cfg, &train_set, &paths.train_data())?;
        let store = match train_set.targets() {
            Some(t) => NeighborStore::new(train_set.thetas(), t)?,
            None => NeighborStore::from_family(&family, &train_set.thetas())?,
        };
        strategies.push((
            "nearest_neighbor".to_string(),
            WarmStartStrategy::NearestNeighbor(store),
        ));
    }
    for &k in &ks {
        let model = load_trained(&paths.model(k))?;
        strategies.push((format!("learned_k{k}"), WarmStartStrategy::Learned(model)));
    }

    let mut runs = Vec::new();
    for (name, strategy) in &strategies {
        runs.push(run_method(
            name.clone(),
            strategy,
            &family,
            &thetas,
            &ev.tolerances,
            ev.max_iters,
        )?);
    }

    let n = thetas.len() as f64;
    let mut rows = Vec::new();
    for (t, &eps) in ev.tolerances.iter().enumerate() {
        let means: Vec<(f64, usize)> = runs
            .iter()
            .map(|r| {
                let mut unreached = 0;
                let total: usize = r
                    .hits
                    .iter()
                    .map(|h| {
                        h[t].unwrap_or_else(|| {
                            unreached += 1;
                            ev.max_iters
                        })
                    })
                    .sum();
                (total as f64 / n, unreached)
            })
            .collect();
        let cold = means[0].0;
        rows.push(ToleranceRow {
            eps,
            methods: runs
                .iter()
                .zip(&means)
                .map(|(r, &(mean, unreached))| MethodResult {
                    method: r.name.clone(),
                    mean_iters: mean,
                    iters: round_half_up(mean),
                    reduction: reduction(mean, cold),
                    unreached,
                })
                .collect(),
        });
    }

    let report = BenchmarkReport {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        family: cfg.family.id().to_string(),
        n_test: thetas.len(),
        max_iters: ev.max_iters,
        rows,
        worst_final_kkt: runs.iter().map(|r| (r.name.clone(), r.worst_kkt)).collect(),
        trained_k: ks,
        nearest_neighbor: ev.nearest_neighbor,
    };
    std::fs::write(paths.evaluate_csv(), report.to_csv())?;
    write_json(&paths.evaluate_json(), &report)?;

    let curves: Vec<Vec<f64>> = runs.iter().map(|r| mean_curve(&r.residuals)).collect();
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let mut text = String::from("iter");
    for r in &runs {
        let _ = write!(text, ",{}", r.name);
    }
    text.push('\n');
    for i in 0..len {
        let _ = write!(text, "{}", i + 1);
        for c in &curves {
            let v = c.get(i).or(c.last()).copied().unwrap_or(0.0);
            let _ = write!(text, ",{v:e}");
        }
        text.push('\n');
    }
    std::fs::write(paths.curves(), text)?;

    let mut per = String::from("method,problem,iter,residual\n");
    for r in &runs {
        for (p, res) in r.residuals.iter().take(ev.curve_problems).enumerate() {
            for (i, v) in res.iter().enumerate() {
                let _ = writeln!(per, "{},{},{},{:e}", r.name, p, i + 1, v);
            }
        }
    }
    std::fs::write(paths.problem_curves(), per)?;
    Ok(report)
}

/// Training settings for the bias-free, unnormalized linear class `θ ↦ Wθ`.
pub fn linear_class_config(cfg: &Config, seed: u64) -> TrainConfig {
    let b = &cfg.bounds;
    TrainConfig {
        k: b.k,
        epochs: b.linear_epochs,
        batch_size: b.linear_batch_size,
        learning_rate: b.linear_learning_rate,
        seed,
        hidden: Vec::new(),
        normalize: false,
        bias: false,
        pretrain: false,
        pretrain_epochs: 0,
        ..TrainConfig::default()
    }
}

pub fn cmd_bounds(cfg: &Config) -> Result<BoundsOutput, CliError> {
    let paths = OutPaths::new(&cfg.out_dir);
    let family = build_family(cfg)?;
    let b = &cfg.bounds;
    let train_set = load_dataset(&paths.train_data())?;
    let test_set = load_dataset(&paths.test_data())?;
    check_family(cfg, &train_set, &paths.train_data())?;
    check_family(cfg, &test_set, &paths.test_data())?;
    let train_th = train_set.thetas();
    let test_th = test_set.thetas();
    let seed = derive_seed(cfg.seed, STREAM_BOUNDS);

    let model = match b.model {
        BoundModel::Linear => train(&family, &train_th, &[], &linear_class_config(cfg, seed))?.0,
        BoundModel::Trained => load_trained(&paths.model(b.k))?,
    };
    let emp = empirical_risk(&model, &family, &train_th, b.k)?;
    let test_risk = empirical_risk(&model, &family, &test_th, b.k)?;
    let probe = &train_th[..b.estimate_samples.min(train_th.len())];
    let strategy = WarmStartStrategy::Learned(model.clone());
    let beta = estimate_family_beta(&strategy, &family, probe)?;
    let b_hat = estimate_b(&strategy, &family, probe)?.value;
    let inputs = BoundInputs {
        beta,
        k: b.k,
        n_samples: train_th.len(),
        delta: b.delta,
        b: b_hat,
        rad: b.rad,
        d: Some(family.theta_dim()),
        rho2: family.support.rho2(),
        nu: Some(b.nu),
    };
    let reports = b
        .kinds
        .iter()
        .map(|&kind| BoundReport::compute(kind, &inputs, emp))
        .collect::<Result<Vec<_>, _>>()?;

    let trials = if b.trials > 0 {
        let tcfg = TrialConfig {
            n_train: b.trial_n_train,
            n_test: b.trial_n_test,
            k: b.k,
            delta: b.delta,
            seed,
            estimate_samples: b.estimate_samples,
            inflate: 1.0,
        };
        let summary = match b.model {
            BoundModel::Linear => bound_violation_trial(&family, &tcfg, b.trials, |th, s| {
                Ok(train(&family, th, &[], &linear_class_config(cfg, s))?.0)
            })?,
            BoundModel::Trained => {
                bound_violation_trial(&family, &tcfg, b.trials, |_, _| Ok(model.clone()))?
            }
        };
        Some(summary)
    } else {
        None
    };

    let out = BoundsOutput {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        model: match b.model {
            BoundModel::Linear => "linear".into(),
            BoundModel::Trained => format!("trained_k{}", b.k),
        },
        k: b.k,
        test_risk,
        beta_hat: beta,
        b_hat,
        reports,
        trials,
    };
    write_json(&paths.bounds(), &out)?;
    Ok(out)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn cmd_diagnose(cfg: &Config) -> Result<DiagnoseOutput, CliError> {
    let paths = OutPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.dir)?;
    let family = build_family(cfg)?;
    let d = &cfg.diagnose;
    let seed = derive_seed(cfg.seed, STREAM_DIAGNOSE);
    let thetas = sample_thetas(&family, d.instances, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = SolveSettings::with_tol(HIGH_ACCURACY_TOL, 100_000);

    let mut norms: Vec<Vec<f64>> = vec![Vec::new(); d.k_grid.len()];
    let mut betas = Vec::new();
    let mut lemma = Vec::new();
    let mut averaged = false;
    for (i, th) in thetas.iter().enumerate() {
        let sys = family.lcp(th)?;
        let cold = vec![0.0; sys.dim()];
        for (slot, (_, g)) in gradient_norm_decay(&sys, &cold, &d.k_grid)?
            .into_iter()
            .enumerate()
        {
            norms[slot].push(g);
        }

        // probes: the cold start plus Gaussian points at the scale of the solution
        let z_cold = fixed_point_proxy(&sys, &cold, &settings)?;
        let scale = norm2(&z_cold).max(1.0) / (sys.dim() as f64).sqrt();
        let mut probes = vec![cold];
        for _ in 0..d.lemma_probes {
            probes.push(
                (0..sys.dim())
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect(),
            );
        }
        let est = estimate_beta(&sys, &probes, &settings)?;
        averaged |= est.averaged_regime;
        betas.push(est.beta);
        for (p, z) in probes.iter().enumerate() {
            let z_inf = fixed_point_proxy(&sys, z, &settings)?;
            let dist = dist2(z, &z_inf);
            for &k in &d.lemma_k {
                let (_, loss) = run_k(&sys, z, k)?;
                let bound = 2.0 * est.beta.powi(k as i32) * dist;
                let ratio = if bound > 0.0 {
                    loss / bound
                } else if loss > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                lemma.push(LemmaRow {
                    instance: i,
                    probe: p,
                    beta_hat: est.beta,
                    averaged_regime: est.averaged_regime,
                    k,
                    loss,
                    bound,
                    ratio,
                    pass: loss <= d.lemma_slack * bound,
                });
            }
        }
    }

    let mut gradient = Vec::new();
    let mut prev: Option<f64> = None;
    for (slot, &k) in d.k_grid.iter().enumerate() {
        let m = median(&mut norms[slot]);
        gradient.push(GradientRow {
            k,
            median_grad_norm: m,
            ratio: prev.map(|p| m / p),
        });
        prev = Some(m);
    }
    let worst = lemma.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let out = DiagnoseOutput {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        family: cfg.family.id().to_string(),
        gradient,
        betas,
        averaged_regime: averaged,
        lemma,
        lemma_slack: d.lemma_slack,
        lemma_worst_ratio: worst,
    };
    std::fs::write(paths.diagnose_csv(), out.gradient_csv())?;
    std::fs::write(paths.lemma_csv(), out.lemma_csv())?;
    write_json(&paths.diagnose_json(), &out)?;
    Ok(out)
}
