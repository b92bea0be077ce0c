//! Config-driven experiments: predictions, repeated outlier simulations over
//! an N grid, fluctuation summaries and the Haar/Gaussian check suite. Every
//! random draw comes from the stream `(master_seed, N, trial, purpose)`, so a
//! config fully determines its results regardless of the worker count.

use crate::cpx::{c, C64};
use crate::ensemble::{
    sample_uci, sample_wigner, sample_wigner_compressed, DMode, EntryLaw, EnsembleSample,
    Symmetry, WignerParams,
};
use crate::error::{LabError, Result};
use crate::fluctuation::{
    covariance_comparison, estimate_rate, polygon_statistics, rescale_cluster, CorrelationCheck,
    Kernel, LimitLawSampler, LimitTarget, PolygonStats, RateFit, RatePoint,
};
use crate::haar;
use crate::jordan::{embed, index_sets, realize, EmbedMode, JordanSpec, PerturbationMatrix, QMode};
use crate::measure::{OutlierPrediction, SolveOptions, SpectralMeasure};
use crate::outliers::{analyze, default_capture, default_delta, predict, Cluster, Engine, EngineOptions};
use crate::seed::{stream, Purpose};
use crate::small::Small;
use crate::stats::{mean_se, MomentRow};
use faer::Mat;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

/// Environment variable holding the worker count (default 1).
pub const WORKERS_ENV: &str = "SPIKELAB_WORKERS";

/// Runs fail when more than this fraction of trials at one N fail.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnsembleConfig {
    Wigner {
        sigma: f64,
        #[serde(default)]
        symmetry: Symmetry,
        #[serde(default)]
        entry_law: EntryLaw,
    },
    Uci {
        #[serde(default)]
        d_mode: DMode,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HaarCheckConfig {
    pub n: usize,
    pub trials: usize,
}

impl Default for HaarCheckConfig {
    fn default() -> Self {
        HaarCheckConfig { n: 200, trials: 10_000 }
    }
}

fn default_min_cov() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Limit spectral measure; required for invariant ensembles, implied by
    /// σ for Wigner ones.
    #[serde(default)]
    pub measure: Option<SpectralMeasure>,
    pub ensemble: EnsembleConfig,
    pub jordan: JordanSpec,
    #[serde(default)]
    pub q_mode: QMode,
    #[serde(default)]
    pub embed_mode: EmbedMode,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    /// Bulk margin; `max(0.1, 3N^{-1/4})` when absent.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub capture: Option<f64>,
    #[serde(default)]
    pub engine: EngineOptions,
    #[serde(default)]
    pub solve: SolveOptions,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Permits a Haar-embedded perturbation of a Wigner matrix.
    #[serde(default)]
    pub allow_unsafe_embedding: bool,
    #[serde(default = "default_min_cov")]
    pub min_covariance_trials: usize,
    #[serde(default)]
    pub haar_check: HaarCheckConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(LabError::invalid("n_grid is empty"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::invalid("n_grid must be strictly ascending"));
        }
        if self.trials == 0 {
            return Err(LabError::invalid("trials must be at least 1"));
        }
        let r4 = 4 * self.jordan.rank_bound();
        if self.n_grid[0] < r4 {
            return Err(LabError::invalid(format!("N = {} is below 4r = {r4}", self.n_grid[0])));
        }
        for (name, v) in [("delta", self.delta), ("capture", self.capture)] {
            if let Some(x) = v {
                if !(x > 0.0 && x.is_finite()) {
                    return Err(LabError::invalid(format!("{name} must be positive")));
                }
            }
        }
        match &self.ensemble {
            EnsembleConfig::Wigner { sigma, .. } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(LabError::invalid("sigma must be positive"));
                }
                if self.embed_mode == EmbedMode::Haar && !self.allow_unsafe_embedding {
                    return Err(LabError::invalid(
                        "Wigner ensembles need the canonical embedding (set allow_unsafe_embedding to override)",
                    ));
                }
                if let Some(m) = &self.measure {
                    if m.as_centered_semicircle().is_none_or(|s| (s - sigma).abs() > 1e-12) {
                        return Err(LabError::invalid("measure disagrees with the Wigner sigma"));
                    }
                }
            }
            EnsembleConfig::Uci { .. } => {
                let m = self
                    .measure
                    .as_ref()
                    .ok_or_else(|| LabError::invalid("invariant ensembles need a measure"))?;
                if m.is_single_dirac() {
                    return Err(LabError::invalid("measure is a single Dirac mass"));
                }
                if self.embed_mode == EmbedMode::Canonical {
                    return Err(LabError::invalid(
                        "invariant ensembles are stored diagonal and need the Haar embedding",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn limit_measure(&self) -> Result<SpectralMeasure> {
        match (&self.ensemble, &self.measure) {
            (EnsembleConfig::Wigner { sigma, .. }, _) => SpectralMeasure::semicircle(*sigma),
            (EnsembleConfig::Uci { .. }, Some(m)) => Ok(m.clone()),
            (EnsembleConfig::Uci { .. }, None) => Err(LabError::invalid("missing measure")),
        }
    }

    /// Covariance kernel of the limiting statistics. Exact for Gaussian
    /// Wigner entries and for invariant ensembles.
    pub fn kernel(&self) -> Result<Kernel> {
        Ok(match &self.ensemble {
            EnsembleConfig::Wigner { sigma, symmetry: Symmetry::Complex, .. } => Kernel::Gue { sigma: *sigma },
            EnsembleConfig::Wigner { sigma, symmetry: Symmetry::Real, .. } => Kernel::Goe { sigma: *sigma },
            EnsembleConfig::Uci { .. } => Kernel::Uci { measure: self.limit_measure()? },
        })
    }

    pub fn delta_at(&self, n: usize) -> f64 {
        self.delta.unwrap_or_else(|| default_delta(n))
    }

    fn uses_determinant(&self, n: usize) -> bool {
        match self.engine.engine {
            Engine::Dense => false,
            Engine::Determinant => true,
            Engine::Auto => n > self.engine.dense_max_n,
        }
    }

    /// The fixed perturbation shared by every trial.
    pub fn perturbation(&self) -> Result<PerturbationMatrix> {
        realize(&self.jordan, self.q_mode, &mut stream(self.master_seed, 0, 0, Purpose::QMatrix))
    }
}

/// Worker count from [`WORKERS_ENV`]; 1 when unset or unparsable.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&w: &usize| w >= 1)
        .unwrap_or(1)
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| LabError::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub p: usize,
    pub beta: usize,
    /// Deviations shrink like `N^{-rate_exponent}`.
    pub rate_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPrediction {
    #[serde(with = "crate::cpx::pair")]
    pub theta: C64,
    pub k: usize,
    pub m: usize,
    #[serde(with = "crate::cpx::pairs")]
    pub solutions: Vec<C64>,
    #[serde(with = "crate::cpx::pairs")]
    pub marginal: Vec<C64>,
    /// Composition of the cluster expected at every solution.
    pub classes: Vec<ClassInfo>,
    pub expected_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub thetas: Vec<ThetaPrediction>,
    pub total_expected: usize,
}

pub fn run_predict(cfg: &ExperimentConfig) -> Result<PredictionReport> {
    cfg.validate()?;
    let mu = cfg.limit_measure()?;
    let preds = predict(&mu, &cfg.jordan, &cfg.solve)?;
    let index = index_sets(&cfg.jordan);
    let thetas: Vec<ThetaPrediction> = preds
        .iter()
        .zip(&index)
        .map(|(p, idx)| ThetaPrediction {
            theta: p.theta,
            k: p.multiplicity_k,
            m: p.m,
            solutions: p.solutions.clone(),
            marginal: p.marginal.clone(),
            classes: idx
                .classes
                .iter()
                .map(|c| ClassInfo {
                    p: c.p,
                    beta: c.beta,
                    rate_exponent: 1.0 / (2.0 * c.p as f64),
                })
                .collect(),
            expected_count: p.expected_count(),
        })
        .collect();
    let total_expected = thetas.iter().map(|t| t.expected_count).sum();
    Ok(PredictionReport { thetas, total_expected })
}

/// What one trial produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n: usize,
    pub trial: usize,
    #[serde(with = "crate::cpx::pairs")]
    pub outliers: Vec<C64>,
    pub clusters: Vec<Cluster>,
    #[serde(with = "crate::cpx::pairs")]
    pub unmatched: Vec<C64>,
    /// Full spectrum; kept for trial 0 on the dense path only.
    #[serde(with = "crate::cpx::pairs")]
    pub spectrum: Vec<C64>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn counts_ok(&self) -> bool {
        self.ok() && self.unmatched.is_empty() && self.clusters.iter().all(Cluster::count_ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub trials: usize,
    pub failed: usize,
    pub delta: f64,
    pub capture: f64,
    /// Outlier count → number of trials.
    pub outlier_histogram: BTreeMap<usize, usize>,
    pub modal_outliers: usize,
    /// Fraction of successful trials with every cluster at its expected size
    /// and nothing unmatched.
    pub counts_ok_rate: f64,
    /// Fraction of successful trials with at least one unmatched outlier.
    pub unmatched_rate: f64,
    /// Fraction of successful trials with any outlier at all.
    pub any_outlier_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub predictions: Vec<OutlierPrediction>,
    pub expected_total: usize,
    pub records: Vec<TrialRecord>,
    pub sizes: Vec<SizeSummary>,
}

fn draw_sample(cfg: &ExperimentConfig, mu: &SpectralMeasure, n: usize, head: usize, trial: usize) -> Result<EnsembleSample> {
    let mut rng = stream(cfg.master_seed, n, trial, Purpose::Ensemble);
    match &cfg.ensemble {
        EnsembleConfig::Wigner { sigma, symmetry, entry_law } => {
            let params = WignerParams {
                sigma: *sigma,
                symmetry: *symmetry,
                entry_law: *entry_law,
            };
            if cfg.uses_determinant(n)
                && cfg.embed_mode == EmbedMode::Canonical
                && *entry_law == EntryLaw::Gaussian
            {
                sample_wigner_compressed(&params, n, head, &mut rng)
            } else {
                Ok(sample_wigner(&params, n, &mut rng))
            }
        }
        EnsembleConfig::Uci { d_mode } => sample_uci(mu, n, *d_mode, &mut rng),
    }
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    mu: SpectralMeasure,
    pm: PerturbationMatrix,
    preds: Vec<OutlierPrediction>,
}

fn run_trial(sh: &Shared, n: usize, trial: usize, delta: f64, capture: f64) -> TrialRecord {
    let attempt = || -> Result<(crate::outliers::OutlierReport, bool)> {
        let ep = embed(&sh.pm, n, sh.cfg.embed_mode, &mut stream(sh.cfg.master_seed, n, trial, Purpose::Embedding))?;
        let sample = draw_sample(sh.cfg, &sh.mu, n, sh.pm.spec.dim(), trial)?;
        let dense = !sh.cfg.uses_determinant(n);
        let mut opts = sh.cfg.engine;
        opts.engine = if dense { Engine::Dense } else { Engine::Determinant };
        Ok((analyze(&sample, &ep, &sh.mu, &sh.preds, delta, capture, &opts)?, dense))
    };
    match attempt() {
        Ok((rep, dense)) => TrialRecord {
            n,
            trial,
            outliers: rep.outliers,
            clusters: rep.clusters,
            unmatched: rep.unmatched,
            spectrum: if dense && trial == 0 { rep.all_eigs } else { vec![] },
            error: None,
        },
        Err(e) => TrialRecord {
            n,
            trial,
            outliers: vec![],
            clusters: vec![],
            unmatched: vec![],
            spectrum: vec![],
            error: Some(e.to_string()),
        },
    }
}

/// Samples, perturbs and classifies `trials` matrices at every N of the grid.
pub fn run_simulate(cfg: &ExperimentConfig, workers: usize) -> Result<SimulationRun> {
    cfg.validate()?;
    let mu = cfg.limit_measure()?;
    let preds = predict(&mu, &cfg.jordan, &cfg.solve)?;
    let sh = Shared {
        cfg,
        pm: cfg.perturbation()?,
        preds,
        mu,
    };
    let expected_total = sh.preds.iter().map(|p| p.expected_count()).sum();
    let mut records = Vec::new();
    let mut sizes = Vec::new();
    for &n in &cfg.n_grid {
        let delta = cfg.delta_at(n);
        let capture = cfg.capture.unwrap_or_else(|| default_capture(&sh.preds, &sh.mu, delta));
        if !(capture > 0.0) {
            return Err(LabError::invalid(format!(
                "at N = {n} a predicted point lies within delta = {delta} of the support; set delta or capture"
            )));
        }
        let recs: Vec<TrialRecord> = with_workers(workers, || {
            (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_trial(&sh, n, t, delta, capture))
                .collect()
        })?;
        let summary = summarize(n, delta, capture, &recs);
        if summary.failed as f64 > MAX_FAILURE_RATE * cfg.trials as f64 {
            let first = recs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(LabError::Convergence(format!(
                "{} of {} trials failed at N = {n}; first error: {first}",
                summary.failed, cfg.trials
            )));
        }
        sizes.push(summary);
        records.extend(recs);
    }
    Ok(SimulationRun {
        predictions: sh.preds,
        expected_total,
        records,
        sizes,
    })
}

fn summarize(n: usize, delta: f64, capture: f64, recs: &[TrialRecord]) -> SizeSummary {
    let ok: Vec<&TrialRecord> = recs.iter().filter(|r| r.ok()).collect();
    let mut hist = BTreeMap::new();
    for r in &ok {
        *hist.entry(r.outliers.len()).or_insert(0) += 1;
    }
    let modal = hist
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map_or(0, |(k, _)| *k);
    let frac = |f: &dyn Fn(&TrialRecord) -> bool| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().filter(|r| f(r)).count() as f64 / ok.len() as f64
        }
    };
    SizeSummary {
        n,
        trials: recs.len(),
        failed: recs.len() - ok.len(),
        delta,
        capture,
        outlier_histogram: hist,
        modal_outliers: modal,
        counts_ok_rate: frac(&|r| r.counts_ok()),
        unmatched_rate: frac(&|r| !r.unmatched.is_empty()),
        any_outlier_rate: frac(&|r| !r.outliers.is_empty()),
    }
}

/// One rescaled deviation `N^{1/(2p)}(λ̃ − ξ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub n: usize,
    pub trial: usize,
    pub theta_index: usize,
    pub xi_index: usize,
    pub p: usize,
    pub beta: usize,
    #[serde(with = "crate::cpx::pair")]
    pub value: C64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub theta_index: usize,
    pub xi_index: usize,
    pub p: usize,
    pub beta: usize,
    pub points: Vec<RatePoint>,
    pub fit: Option<RateFit>,
    pub theoretical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonEntry {
    pub n: usize,
    pub theta_index: usize,
    pub xi_index: usize,
    pub target_gap: f64,
    pub stats: PolygonStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEntry {
    pub n: usize,
    /// `(theta_index, xi_index)` of both outliers.
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub same_theta: bool,
    pub check: CorrelationCheck,
    /// Paired `(Re Λ_a, Re Λ_b)` per trial.
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSummary {
    pub lambda: Vec<LambdaRow>,
    pub rates: Vec<RateEntry>,
    pub polygons: Vec<PolygonEntry>,
    pub covariance: Vec<CovarianceEntry>,
    /// Trials dropped from a cluster because its size was wrong.
    pub skipped: usize,
}

/// Rescaled deviations, rate fits, polygon statistics and outlier covariances.
pub fn run_fluct(cfg: &ExperimentConfig, run: &SimulationRun) -> Result<FluctuationSummary> {
    let index = index_sets(&cfg.jordan);
    let mut lambda = Vec::new();
    let mut skipped = 0;
    // (n, trial, theta, xi) → class samples
    let mut by_cluster: BTreeMap<(usize, usize, usize, usize), Vec<crate::fluctuation::ClassSample>> = BTreeMap::new();
    for r in run.records.iter().filter(|r| r.ok()) {
        for cl in &r.clusters {
            let classes = &index[cl.theta_index].classes;
            match rescale_cluster(&cl.members, cl.xi, classes, r.n) {
                Ok(samples) => {
                    for s in &samples {
                        lambda.extend(s.values.iter().map(|&value| LambdaRow {
                            n: r.n,
                            trial: r.trial,
                            theta_index: cl.theta_index,
                            xi_index: cl.xi_index,
                            p: s.p,
                            beta: s.beta,
                            value,
                        }));
                    }
                    by_cluster.insert((r.n, r.trial, cl.theta_index, cl.xi_index), samples);
                }
                Err(LabError::SkipTrial(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let mut rates = Vec::new();
    let mut polygons = Vec::new();
    for (ti, pred) in run.predictions.iter().enumerate() {
        for xi_index in 0..pred.solutions.len() {
            for (ci, class) in index[ti].classes.iter().enumerate() {
                let mut points = Vec::new();
                for &n in &cfg.n_grid {
                    let scale = (n as f64).powf(1.0 / (2.0 * class.p as f64));
                    let per_trial: Vec<Vec<C64>> = by_cluster
                        .range((n, 0, ti, xi_index)..=(n, usize::MAX, ti, xi_index))
                        .filter(|(k, _)| k.2 == ti && k.3 == xi_index)
                        .map(|(_, s)| s[ci].values.clone())
                        .collect();
                    let means: Vec<f64> = per_trial
                        .iter()
                        .map(|v| v.iter().map(|z| z.norm() / scale).sum::<f64>() / v.len() as f64)
                        .collect();
                    if means.len() >= 2 {
                        points.push(RatePoint::from_deviations(n, &means)?);
                    }
                    if class.beta == 1 && class.p >= 2 && !per_trial.is_empty() {
                        polygons.push(PolygonEntry {
                            n,
                            theta_index: ti,
                            xi_index,
                            target_gap: 2.0 * PI / class.p as f64,
                            stats: polygon_statistics(&per_trial, class.p)?,
                        });
                    }
                }
                rates.push(RateEntry {
                    theta_index: ti,
                    xi_index,
                    p: class.p,
                    beta: class.beta,
                    fit: estimate_rate(&points).ok(),
                    points,
                    theoretical: -1.0 / (2.0 * class.p as f64),
                });
            }
        }
    }

    let covariance = covariance_entries(cfg, run, &index, &by_cluster)?;
    Ok(FluctuationSummary {
        lambda,
        rates,
        polygons,
        covariance,
        skipped,
    })
}

type ClusterMap = BTreeMap<(usize, usize, usize, usize), Vec<crate::fluctuation::ClassSample>>;

/// Pairs of single-outlier clusters (θ with one block of size one).
fn covariance_entries(
    cfg: &ExperimentConfig,
    run: &SimulationRun,
    index: &[crate::jordan::EigenIndex],
    by_cluster: &ClusterMap,
) -> Result<Vec<CovarianceEntry>> {
    let simple: Vec<(usize, usize, C64)> = run
        .predictions
        .iter()
        .enumerate()
        .filter(|(ti, _)| matches!(index[*ti].classes.as_slice(), [c] if c.p == 1 && c.beta == 1))
        .flat_map(|(ti, p)| p.solutions.iter().enumerate().map(move |(xi, &z)| (ti, xi, z)))
        .collect();
    if simple.len() < 2 {
        return Ok(vec![]);
    }
    let pm = cfg.perturbation()?;
    let kernel = cfg.kernel()?;
    let mu = cfg.limit_measure()?;
    let mut out = Vec::new();
    for i in 0..simple.len() {
        for j in i + 1..simple.len() {
            let (ta, xa, za) = simple[i];
            let (tb, xb, zb) = simple[j];
            let targets = [
                LimitTarget { theta_index: ta, xi: za },
                LimitTarget { theta_index: tb, xi: zb },
            ];
            let sampler = LimitLawSampler::new(kernel.clone(), &pm, &targets)?;
            // Λ = −m/G′(ξ) for a lone block of size one.
            let (ga, gb) = (mu.cauchy_derivative(za)?, mu.cauchy_derivative(zb)?);
            let lam = |s: usize, t: usize, conj: bool| {
                let (gs, gt) = ([ga, gb][s], [ga, gb][t]);
                if conj {
                    sampler.cov[(s, t)] / (gs * gt.conj())
                } else {
                    sampler.pseudo[(s, t)] / (gs * gt)
                }
            };
            let re_cov = |s: usize, t: usize| 0.5 * (lam(s, t, false) + lam(s, t, true)).re;
            let predicted_cov = re_cov(0, 1);
            let denom = (re_cov(0, 0) * re_cov(1, 1)).sqrt();
            let predicted_corr = if denom > 0.0 { predicted_cov / denom } else { 0.0 };
            for &n in &cfg.n_grid {
                let pairs: Vec<(f64, f64)> = (0..cfg.trials)
                    .filter_map(|t| {
                        let a = by_cluster.get(&(n, t, ta, xa))?;
                        let b = by_cluster.get(&(n, t, tb, xb))?;
                        Some((a[0].values[0].re, b[0].values[0].re))
                    })
                    .collect();
                if pairs.len() < cfg.min_covariance_trials {
                    continue;
                }
                let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                let name = format!("theta{ta}/xi{xa} vs theta{tb}/xi{xb} at N={n}");
                let check = covariance_comparison(&name, &x, &y, predicted_cov, predicted_corr, cfg.min_covariance_trials)?;
                out.push(CovarianceEntry {
                    n,
                    a: (ta, xa),
                    b: (tb, xb),
                    same_theta: ta == tb,
                    check,
                    pairs,
                });
            }
        }
    }
    Ok(out)
}

/// One named identity of the Haar/Gaussian suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub exact_or_limit: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

/// Exact identities pass below this residual.
pub const EXACT_TOL: f64 = 1e-10;
/// Monte Carlo rows pass within this many standard errors.
pub const LIMIT_Z: f64 = 4.0;

impl CheckEntry {
    fn exact(name: impl Into<String>, residual: f64) -> Self {
        CheckEntry {
            name: name.into(),
            exact_or_limit: "exact".into(),
            empirical: residual,
            theoretical: 0.0,
            stderr: 0.0,
            z: 0.0,
            pass: residual < EXACT_TOL,
        }
    }

    fn limit(row: MomentRow) -> Self {
        CheckEntry {
            pass: row.within(LIMIT_Z),
            name: row.name,
            exact_or_limit: "limit".into(),
            empirical: row.empirical,
            theoretical: row.theoretical,
            stderr: row.stderr,
            z: row.z,
        }
    }
}

fn diag_mat(v: &[f64]) -> Mat<C64> {
    Mat::from_fn(v.len(), v.len(), |i, j| c(if i == j { v[i] } else { 0.0 }, 0.0))
}

/// Diagonal with the repeating pattern `(2, −1, −1)`, shifted to trace zero.
fn traceless_pattern(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| [2.0, -1.0, -1.0][i % 3]).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.iter().map(|x| x - mean).collect()
}

/// Runs every exact identity and every Monte Carlo limit check.
pub fn run_haar_check(hc: &HaarCheckConfig, master_seed: u64, workers: usize) -> Result<Vec<CheckEntry>> {
    let n = hc.n;
    if n < 4 || hc.trials < 1000 {
        return Err(LabError::invalid("haar check needs N ≥ 4 and at least 1000 trials"));
    }
    let mut out = Vec::new();

    let id3 = Mat::<C64>::identity(3, 3);
    out.push(CheckEntry::exact("resolvent expansion, A = I, λ = 1, p = 3", haar::resolvent_expansion_check(&id3, c(1.0, 0.0), 3)?));
    let mut r = stream(master_seed, n, 0, Purpose::Gaussian);
    let mut gauss = |rows: usize, cols: usize| {
        Mat::<C64>::from_fn(rows, cols, |_, _| {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            c(a, b)
        })
    };
    let a5 = gauss(5, 5) + diag_mat(&[6.0; 5]);
    out.push(CheckEntry::exact("resolvent expansion, random 5×5, λ = 0.3, p = 5", haar::resolvent_expansion_check(&a5, c(0.3, 0.0), 5)?));
    let (a, b, cc, d) = (gauss(2, 2), gauss(2, 4), gauss(4, 2), gauss(4, 4));
    out.push(CheckEntry::exact("Schur block inverse, 2 + 4", haar::schur_inverse_check(&a, &b, &cc, &d)?));
    for q in 1..=4 {
        let w = haar::weingarten(q, n)?;
        out.push(CheckEntry::exact(format!("Gram-Weingarten consistency, q = {q}"), w.gram_residual));
    }
    let mut double_factorial = 1usize;
    for n2 in (2..=12).step_by(2) {
        double_factorial *= n2 - 1;
        let got = haar::perfect_matchings(n2)?.len();
        out.push(CheckEntry::exact(format!("perfect matchings of {n2} points"), got.abs_diff(double_factorial) as f64));
    }

    // Bilinear forms of Haar columns: G_ij = √N u_i* T u_j with T = ±1.
    let alternating: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let chunks = chunk_trials(hc.trials);
    let rows: Vec<Vec<C64>> = with_workers(workers, || {
        chunks
            .par_iter()
            .map(|&(chunk, count)| {
                let mut rng = stream(master_seed, n, chunk, Purpose::Haar);
                haar::bilinear_fluctuation_samples(std::slice::from_ref(&alternating), 2, count, &mut rng).map(|s| s.rows)
            })
            .collect::<Result<Vec<_>>>()
    })??
    .into_iter()
    .flatten()
    .collect();
    let samples = haar::BilinearSamples { p: 2, matrices: 1, rows };
    let g12 = samples.series(0, 0, 1);
    let g21 = samples.series(0, 1, 0);
    let g11 = samples.series(0, 0, 0);
    for row in haar::gaussian_moment_check(&g12, 1.0, c(0.0, 0.0))? {
        out.push(CheckEntry::limit(MomentRow { name: format!("G12: {}", row.name), ..row }));
    }
    for row in haar::gaussian_moment_check(&g11, 1.0, c(1.0, 0.0))? {
        out.push(CheckEntry::limit(MomentRow { name: format!("G11: {}", row.name), ..row }));
    }
    let pair = haar::PairMoments {
        xx: c(0.0, 0.0),
        xxc: 1.0,
        yy: c(0.0, 0.0),
        yyc: 1.0,
        xy: c(1.0, 0.0),
        xyc: c(0.0, 0.0),
    };
    for row in haar::gaussian_pair_check(&g12, &g21, &pair)? {
        out.push(CheckEntry::limit(MomentRow { name: format!("(G12, G21): {}", row.name), ..row }));
    }

    // Odd traceless moment: Monte Carlo against the exact value and against 0.
    let t = traceless_pattern(n);
    let e11 = Small::from_fn(1, 1, |_, _| c(1.0, 0.0));
    let mut e11_full = vec![0.0; n];
    e11_full[0] = 1.0;
    let exact3 = haar::haar_moment_exact(&vec![diag_mat(&t); 3], &vec![diag_mat(&e11_full); 3])?;
    let odd: Vec<C64> = with_workers(workers, || {
        chunks
            .par_iter()
            .map(|&(chunk, count)| {
                let mut rng = stream(master_seed, n, chunk + chunks.len(), Purpose::Haar);
                haar::haar_moment_samples(&vec![t.clone(); 3], &vec![e11.clone(); 3], count, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
    })??
    .into_iter()
    .flatten()
    .collect();
    let re: Vec<f64> = odd.iter().map(|z| z.re).collect();
    out.push(CheckEntry::limit(MomentRow::from_samples("q = 3 traceless moment vs 0", &re, 0.0)?));
    out.push(CheckEntry::limit(MomentRow::from_samples("q = 3 traceless moment vs exact", &re, exact3.re)?));

    // q = 4 limit: 3·(Tr A²)²·τ² with A = e₁e₁*, τ = 1, within 5%.
    let exact4 = haar::haar_moment_exact(&vec![diag_mat(&alternating); 4], &vec![diag_mat(&e11_full); 4])?;
    out.push(CheckEntry {
        name: "q = 4 moment vs matching-sum limit (5%)".into(),
        exact_or_limit: "limit".into(),
        empirical: exact4.re,
        theoretical: 3.0,
        stderr: 0.0,
        z: 0.0,
        pass: (exact4.re - 3.0).abs() < 0.15,
    });

    // Real Gaussian synthetic input: E Z⁴ = 3τ⁴.
    let mut rg = stream(master_seed, n, 1, Purpose::Gaussian);
    let real: Vec<C64> = (0..hc.trials).map(|_| c(StandardNormal.sample(&mut rg), 0.0)).collect();
    for row in haar::gaussian_moment_check(&real, 1.0, c(1.0, 0.0))? {
        out.push(CheckEntry::limit(MomentRow { name: format!("real synthetic: {}", row.name), ..row }));
    }
    Ok(out)
}

/// Fixed-size chunks so results do not depend on the worker count.
fn chunk_trials(trials: usize) -> Vec<(usize, usize)> {
    const CHUNK: usize = 500;
    (0..trials.div_ceil(CHUNK))
        .map(|i| (i, CHUNK.min(trials - i * CHUNK)))
        .collect()
}

/// Mean and standard error of `|λ̃ − ξ|` per N for every cluster; a
/// convenience for quick inspection of a run.
pub fn deviation_table(run: &SimulationRun) -> Vec<(usize, usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for s in &run.sizes {
        let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for r in run.records.iter().filter(|r| r.n == s.n && r.ok()) {
            for cl in &r.clusters {
                acc.entry((cl.theta_index, cl.xi_index))
                    .or_default()
                    .extend(cl.members.iter().map(|z| (z - cl.xi).norm()));
            }
        }
        for ((ti, xi), v) in acc {
            if let Ok((m, se)) = mean_se(&v) {
                out.push((s.n, ti, xi, m, se));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jordan::JordanEntry;

    fn gue_config(theta: f64, n_grid: Vec<usize>, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            measure: None,
            ensemble: EnsembleConfig::Wigner {
                sigma: 1.0,
                symmetry: Symmetry::Complex,
                entry_law: EntryLaw::Gaussian,
            },
            jordan: JordanSpec::single(c(theta, 0.0), 1).unwrap(),
            q_mode: QMode::Identity,
            embed_mode: EmbedMode::Canonical,
            n_grid,
            trials,
            delta: None,
            capture: None,
            engine: EngineOptions::default(),
            solve: SolveOptions::default(),
            master_seed: 11,
            output_dir: None,
            allow_unsafe_embedding: false,
            min_covariance_trials: 100,
            haar_check: HaarCheckConfig::default(),
        }
    }

    #[test]
    fn validation_rules() {
        let ok = gue_config(2.0, vec![100, 200], 3);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.n_grid = vec![200, 100];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
        let mut haar = ok.clone();
        haar.embed_mode = EmbedMode::Haar;
        assert!(haar.validate().is_err());
        haar.allow_unsafe_embedding = true;
        assert!(haar.validate().is_ok());
        let mut uci = ok.clone();
        uci.ensemble = EnsembleConfig::Uci { d_mode: DMode::Quantile };
        assert!(uci.validate().is_err());
        uci.measure = Some(SpectralMeasure::semicircle(1.0).unwrap());
        assert!(uci.validate().is_err());
        uci.embed_mode = EmbedMode::Haar;
        assert!(uci.validate().is_ok());
    }

    #[test]
    fn config_parses_from_json_and_rejects_single_dirac() {
        let json = r#"{
            "ensemble": {"kind": "uci"},
            "measure": {"atoms": [{"x": 1.0, "w": 1.0}]},
            "jordan": [{"theta": [2.0, 0.0], "blocks": [[1, 1]]}],
            "embed_mode": "haar",
            "n_grid": [100], "trials": 2
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
        let json = json.replace(r#"[{"x": 1.0, "w": 1.0}]"#, r#"[{"x": 1.0, "w": 0.5}, {"x": -1.0, "w": 0.5}]"#);
        let cfg: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.min_covariance_trials, 100);
        assert_eq!(cfg.engine.dense_max_n, 400);
    }

    #[test]
    fn predictions_for_known_configurations() {
        let rep = run_predict(&gue_config(2.0, vec![100], 1)).unwrap();
        assert_eq!(rep.total_expected, 1);
        assert!((rep.thetas[0].solutions[0] - 2.5).norm() < 1e-9);

        let mut fig2 = gue_config(2.0, vec![100], 1);
        fig2.jordan = JordanSpec::new(vec![
            JordanEntry { theta: c(1.5, 2.0), blocks: vec![(5, 1)] },
            JordanEntry { theta: c(-2.0, 1.5), blocks: vec![(3, 1)] },
        ])
        .unwrap();
        let rep = run_predict(&fig2).unwrap();
        assert_eq!(rep.total_expected, 8);
        let exps: Vec<f64> = rep.thetas.iter().map(|t| t.classes[0].rate_exponent).collect();
        assert_eq!(exps, vec![0.1, 1.0 / 6.0]);
    }

    #[test]
    fn simulation_is_deterministic_across_worker_counts() {
        let mut cfg = gue_config(2.0, vec![80, 120], 4);
        assert!(run_simulate(&cfg, 1).is_err());
        cfg.delta = Some(0.2);
        let a = run_simulate(&cfg, 1).unwrap();
        let b = run_simulate(&cfg, 2).unwrap();
        assert_eq!(a, b);
        for s in &a.sizes {
            assert_eq!(s.failed, 0);
            assert_eq!(s.modal_outliers, 1);
        }
    }

    #[test]
    fn fluct_summary_shapes() {
        let mut cfg = gue_config(2.0, vec![40, 120, 400], 12);
        cfg.delta = Some(0.2);
        let run = run_simulate(&cfg, 1).unwrap();
        let f = run_fluct(&cfg, &run).unwrap();
        assert_eq!(f.rates.len(), 1);
        assert_eq!(f.rates[0].points.len(), 3);
        assert!(f.rates[0].fit.is_some());
        assert!(f.polygons.is_empty() && f.covariance.is_empty());
        assert_eq!(f.lambda.len() + f.skipped, 36);
    }

    #[test]
    fn haar_suite_exact_rows_pass() {
        let hc = HaarCheckConfig { n: 40, trials: 2000 };
        let rows = run_haar_check(&hc, 3, 1).unwrap();
        for r in rows.iter().filter(|r| r.exact_or_limit == "exact") {
            assert!(r.pass, "{r:?}");
        }
        assert_eq!(rows, run_haar_check(&hc, 3, 2).unwrap());
    }
}
