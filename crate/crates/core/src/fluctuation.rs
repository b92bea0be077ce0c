//! Outlier fluctuations: rescaled deviations, the Gaussian limit of the
//! resolvent statistics and the random matrices built from it, convergence
//! rates and polygon geometry.

use crate::cpx::C64;
use crate::ensemble::EnsembleSample;
use crate::error::{LabError, Result};
use crate::jordan::{condition_number, EmbeddedPerturbation, PerturbationMatrix, SizeClass};
use crate::measure::{wigner_kernel_psi, SpectralMeasure};
use crate::resolvent::ProjectedResolvent;
use crate::small::Small;
use crate::stats::{correlation, fisher_z, line_fit, mean_se, MomentRow};
use faer::{Mat, Side};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

/// `√N Q⁻¹(U*(ξ − H)⁻¹U − I/θ)Q`; its (k, ℓ) entries with k ∈ J(θ), ℓ ∈ I(θ)
/// are the statistics whose limit drives the outlier fluctuations.
pub fn resolvent_statistic(
    sample: &EnsembleSample,
    ep: &EmbeddedPerturbation,
    xi: C64,
    theta: C64,
) -> Result<Small> {
    let res = ProjectedResolvent::new(sample, ep)?;
    resolvent_statistic_with(&res, &ep.pm, sample.n(), xi, theta)
}

pub fn resolvent_statistic_with(
    res: &ProjectedResolvent,
    pm: &PerturbationMatrix,
    n: usize,
    xi: C64,
    theta: C64,
) -> Result<Small> {
    let d = res.dim();
    let centred = res.eval(xi)?.sub(&Small::identity(d).scale(theta.inv()));
    Ok(pm.q_inv.matmul(&centred).matmul(&pm.q).scale(C64::new((n as f64).sqrt(), 0.0)))
}

/// Rescaled deviations `N^{1/(2p)}(λ̃ − ξ)` of one size class, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSample {
    pub p: usize,
    pub beta: usize,
    #[serde(with = "crate::cpx::pairs")]
    pub values: Vec<C64>,
}

/// Splits a cluster among the size classes of θ by decreasing deviation:
/// the `p₁β₁` largest go to the largest blocks, and so on.
pub fn rescale_cluster(
    members: &[C64],
    xi: C64,
    classes: &[SizeClass],
    n: usize,
) -> Result<Vec<ClassSample>> {
    let want: usize = classes.iter().map(|c| c.p * c.beta).sum();
    if members.len() != want {
        return Err(LabError::SkipTrial(format!(
            "cluster at {xi} has {} members, expected {want}",
            members.len()
        )));
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    // Stable sort: equal moduli keep input order.
    order.sort_by(|&a, &b| (members[b] - xi).norm().total_cmp(&(members[a] - xi).norm()));
    let mut at = 0;
    Ok(classes
        .iter()
        .map(|c| {
            let scale = (n as f64).powf(1.0 / (2.0 * c.p as f64));
            let values = order[at..at + c.p * c.beta]
                .iter()
                .map(|&i| (members[i] - xi) * scale)
                .collect();
            at += c.p * c.beta;
            ClassSample {
                p: c.p,
                beta: c.beta,
                values,
            }
        })
        .collect())
}

/// `M = θ(M^IV − M^III (M^I)⁻¹ M^II)` for one size class, from the full
/// statistic matrix `m` (indices as in [`SizeClass`]).
pub fn m_matrix(m: &Small, theta: C64, class: &SizeClass) -> Result<Small> {
    let m4 = m.select(&class.k, &class.l);
    if class.k_minus.is_empty() {
        return Ok(m4.scale(theta));
    }
    let m1 = m.select(&class.k_minus, &class.l_minus);
    let cond = condition_number(&m1)?;
    if !(cond <= 1e12) {
        return Err(LabError::SingularDraw(cond));
    }
    let m2 = m.select(&class.k_minus, &class.l);
    let m3 = m.select(&class.k, &class.l_minus);
    let schur = m4.sub(&m3.matmul(&m1.inverse()?.matmul(&m2)));
    Ok(schur.scale(theta))
}

/// Limit points of the rescaled deviations: all p-th roots of the eigenvalues
/// of `M` times `θ / (−θ² G′(ξ))^p`.
pub fn limit_deviations(
    m: &Small,
    theta: C64,
    g_prime: C64,
    class: &SizeClass,
) -> Result<Vec<C64>> {
    let mm = m_matrix(m, theta, class)?;
    let eig = mm
        .to_faer()
        .eigenvalues()
        .map_err(|e| LabError::Solver(format!("{e:?}")))?;
    let factor = theta / (-theta * theta * g_prime).powu(class.p as u32);
    let p = class.p as f64;
    Ok(eig
        .into_iter()
        .flat_map(|mu| {
            let w = mu * factor;
            let (r, a) = (w.norm().powf(1.0 / p), w.arg());
            (0..class.p).map(move |s| C64::from_polar(r, (a + 2.0 * PI * s as f64) / p))
        })
        .collect())
}

/// One representative of a near-regular p-gon: the p-th root, with argument in
/// `[0, 2π/p)`, of the mean p-th power of its vertices.
pub fn principal_root(values: &[C64], p: usize) -> C64 {
    let w = values.iter().map(|v| v.powu(p as u32)).sum::<C64>() / values.len() as f64;
    let a = w.arg().rem_euclid(2.0 * PI);
    C64::from_polar(w.norm().powf(1.0 / p as f64), a / p as f64)
}

/// Covariance kernel of the limiting resolvent field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Gue { sigma: f64 },
    Goe { sigma: f64 },
    Uci { measure: SpectralMeasure },
}

impl Kernel {
    pub fn measure(&self) -> Result<SpectralMeasure> {
        match self {
            Kernel::Gue { sigma } | Kernel::Goe { sigma } => SpectralMeasure::semicircle(*sigma),
            Kernel::Uci { measure } => Ok(measure.clone()),
        }
    }

    /// ψ for Wigner kernels, Φ for the invariant one.
    pub fn eval(&self, z: C64, w: C64) -> Result<C64> {
        match self {
            Kernel::Gue { sigma } | Kernel::Goe { sigma } => wigner_kernel_psi(*sigma, z, w),
            Kernel::Uci { measure } => measure.covariance_kernel_phi(z, w),
        }
    }
}

/// A point ξ of `S_θ` for which limit draws are wanted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitTarget {
    pub theta_index: usize,
    #[serde(with = "crate::cpx::pair")]
    pub xi: C64,
}

/// One joint draw: the statistic matrices per target and the limit
/// deviations per target and size class.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitDraw {
    pub m: Vec<Small>,
    pub deviations: Vec<Vec<ClassSample>>,
}

/// Exact sampler of the joint Gaussian limit of the statistics
/// `m_kℓ(ξ)`, k ∈ J(θ), ℓ ∈ I(θ), over several targets.
#[derive(Debug)]
pub struct LimitLawSampler {
    pub kernel: Kernel,
    pm: PerturbationMatrix,
    targets: Vec<LimitTarget>,
    g_prime: Vec<C64>,
    vars: Vec<(usize, usize, usize)>,
    /// Real factor `L` with `L Lᵀ` the covariance of `(Re m, Im m)`.
    factor: Mat<f64>,
    /// Pseudo-covariance `E[m m']` and covariance `E[m conj m']`.
    pub pseudo: Mat<C64>,
    pub cov: Mat<C64>,
    draws: AtomicUsize,
    singular: AtomicUsize,
}

const MAX_REDRAWS: usize = 1000;

impl LimitLawSampler {
    pub fn new(kernel: Kernel, pm: &PerturbationMatrix, targets: &[LimitTarget]) -> Result<Self> {
        let mu = kernel.measure()?;
        let mut vars = Vec::new();
        let mut g_prime = Vec::new();
        for (t, tg) in targets.iter().enumerate() {
            let idx = pm.index.get(tg.theta_index).ok_or_else(|| {
                LabError::invalid(format!("no eigenvalue with index {}", tg.theta_index))
            })?;
            for &k in &idx.j_set {
                for &l in &idx.i_set {
                    vars.push((t, k, l));
                }
            }
            g_prime.push(mu.cauchy_derivative(tg.xi)?);
        }
        let nv = vars.len();
        let q = &pm.q;
        let qi = &pm.q_inv;
        let a = qi.matmul(&qi.adjoint()); // Q⁻¹Q⁻*
        let b = q.adjoint().matmul(q); // Q*Q
        let at = qi.matmul(&qi.transpose()); // Q⁻¹Q⁻ᵀ
        let bt = q.transpose().matmul(q); // QᵀQ
        let e = qi.matmul(&q.conj()); // Q⁻¹Q̄
        let real = matches!(kernel, Kernel::Goe { .. });
        let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        let mut kp = HashMap::new();
        let mut kc = HashMap::new();
        for (s, x) in targets.iter().enumerate() {
            for (t, y) in targets.iter().enumerate() {
                kp.insert((s, t), kernel.eval(x.xi, y.xi)?);
                kc.insert((s, t), kernel.eval(x.xi, y.xi.conj())?);
            }
        }
        let mut pseudo = Mat::<C64>::zeros(nv, nv);
        let mut cov = Mat::<C64>::zeros(nv, nv);
        for (i, &(s, k, l)) in vars.iter().enumerate() {
            for (j, &(t, k2, l2)) in vars.iter().enumerate() {
                let mut sp = C64::new(delta(k, l2) * delta(k2, l), 0.0);
                let mut sc = a[(k, k2)] * b[(l2, l)];
                if real {
                    sp += at[(k, k2)] * bt[(l, l2)];
                    sc += e[(k, l2)] * e[(k2, l)].conj();
                }
                pseudo[(i, j)] = kp[&(s, t)] * sp;
                cov[(i, j)] = kc[&(s, t)] * sc;
            }
        }
        let mut sigma = Mat::<f64>::zeros(2 * nv, 2 * nv);
        for i in 0..nv {
            for j in 0..nv {
                let (c, p) = (cov[(i, j)], pseudo[(i, j)]);
                sigma[(i, j)] = 0.5 * (c.re + p.re);
                sigma[(nv + i, nv + j)] = 0.5 * (c.re - p.re);
                sigma[(i, nv + j)] = 0.5 * (p.im - c.im);
                sigma[(nv + i, j)] = 0.5 * (p.im + c.im);
            }
        }
        // Symmetrize rounding before the eigen solve.
        let sym = Mat::<f64>::from_fn(2 * nv, 2 * nv, |i, j| 0.5 * (sigma[(i, j)] + sigma[(j, i)]));
        let evd = sym
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| LabError::Solver(format!("{e:?}")))?;
        let vals = evd.S().column_vector();
        let top = (0..2 * nv).map(|i| vals[i].abs()).fold(0.0, f64::max);
        let neg = (0..2 * nv).map(|i| -vals[i]).fold(0.0, f64::max);
        if neg > 1e-8 * top.max(1e-300) {
            return Err(LabError::Solver(format!(
                "limit covariance is not positive semidefinite ({neg:e})"
            )));
        }
        let u = evd.U();
        // Directions at rounding level carry no variance.
        let floor = 1e-13 * top;
        let factor = Mat::<f64>::from_fn(2 * nv, 2 * nv, |i, j| {
            if vals[j] > floor {
                u[(i, j)] * vals[j].sqrt()
            } else {
                0.0
            }
        });
        Ok(LimitLawSampler {
            kernel,
            pm: pm.clone(),
            targets: targets.to_vec(),
            g_prime,
            vars,
            factor,
            pseudo,
            cov,
            draws: AtomicUsize::new(0),
            singular: AtomicUsize::new(0),
        })
    }

    pub fn targets(&self) -> &[LimitTarget] {
        &self.targets
    }

    /// `(target, k, ℓ)` for each sampled statistic, in draw order.
    pub fn variables(&self) -> &[(usize, usize, usize)] {
        &self.vars
    }

    /// The statistics alone, in [`Self::variables`] order.
    pub fn draw_statistics<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<C64> {
        let n2 = self.factor.nrows();
        let nv = n2 / 2;
        let g: Vec<f64> = (0..n2).map(|_| StandardNormal.sample(rng)).collect();
        (0..nv)
            .map(|i| {
                let mut re = 0.0;
                let mut im = 0.0;
                for j in 0..n2 {
                    re += self.factor[(i, j)] * g[j];
                    im += self.factor[(nv + i, j)] * g[j];
                }
                C64::new(re, im)
            })
            .collect()
    }

    /// Draws until every `M^I` block is well conditioned.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LimitDraw> {
        let d = self.pm.spec.dim();
        for _ in 0..MAX_REDRAWS {
            self.draws.fetch_add(1, Ordering::Relaxed);
            let stats = self.draw_statistics(rng);
            let mut m = vec![Small::zeros(d, d); self.targets.len()];
            for (&(t, k, l), v) in self.vars.iter().zip(&stats) {
                m[t][(k, l)] = *v;
            }
            match self.deviations(&m) {
                Ok(deviations) => return Ok(LimitDraw { m, deviations }),
                Err(LabError::SingularDraw(_)) => {
                    self.singular.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => return Err(e),
            }
        }
        Err(LabError::RetryExhausted {
            attempts: MAX_REDRAWS,
            what: "well-conditioned limit draw".into(),
        })
    }

    fn deviations(&self, m: &[Small]) -> Result<Vec<Vec<ClassSample>>> {
        self.targets
            .iter()
            .enumerate()
            .map(|(t, tg)| {
                let idx = &self.pm.index[tg.theta_index];
                idx.classes
                    .iter()
                    .map(|c| {
                        Ok(ClassSample {
                            p: c.p,
                            beta: c.beta,
                            values: limit_deviations(&m[t], idx.theta, self.g_prime[t], c)?,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Fraction of draws rejected for an ill-conditioned `M^I`.
    pub fn singular_rate(&self) -> f64 {
        let n = self.draws.load(Ordering::Relaxed);
        if n == 0 {
            0.0
        } else {
            self.singular.load(Ordering::Relaxed) as f64 / n as f64
        }
    }
}

/// Mean distance to ξ at one N, with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl RatePoint {
    pub fn from_deviations(n: usize, abs_devs: &[f64]) -> Result<Self> {
        let (mean, stderr) = mean_se(abs_devs)?;
        Ok(RatePoint { n, mean, stderr })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub stderr: f64,
}

/// Slope of `log(mean |λ̃ − ξ|)` against `log N`, weighted by the inverse
/// variance of each log-mean when standard errors are available.
pub fn estimate_rate(points: &[RatePoint]) -> Result<RateFit> {
    let mut ns: Vec<usize> = points.iter().map(|p| p.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 || ns[ns.len() - 1] < 8 * ns[0] {
        return Err(LabError::InsufficientData(
            "need at least 3 sizes spanning a factor 8".into(),
        ));
    }
    let x: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean.ln()).collect();
    let weighted = points.iter().all(|p| p.stderr > 0.0);
    let w: Vec<f64> = points.iter().map(|p| (p.mean / p.stderr).powi(2)).collect();
    let (slope, _, stderr) = line_fit(&x, &y, weighted.then_some(&w[..]))?;
    Ok(RateFit { slope, stderr })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolygonStats {
    pub p: usize,
    pub trials: usize,
    /// Mean gap between consecutive arguments; `2π/p` whenever p points are
    /// sorted around a full turn.
    pub gap_mean: f64,
    pub gap_std: f64,
    /// Mean over trials of the within-trial radius coefficient of variation.
    pub radius_cv: f64,
    /// Mean modulus of the rescaled deviations.
    pub radius_mean: f64,
}

pub fn polygon_statistics(trials: &[Vec<C64>], p: usize) -> Result<PolygonStats> {
    if trials.is_empty() {
        return Err(LabError::InsufficientData("no trials".into()));
    }
    let mut gaps = Vec::with_capacity(trials.len() * p);
    let mut cvs = Vec::with_capacity(trials.len());
    let mut radii_all = Vec::with_capacity(trials.len() * p);
    for pts in trials {
        if pts.len() != p {
            return Err(LabError::invalid(format!("{} points for p = {p}", pts.len())));
        }
        let mut args: Vec<f64> = pts.iter().map(|z| z.arg().rem_euclid(2.0 * PI)).collect();
        args.sort_by(f64::total_cmp);
        for i in 0..p {
            let next = if i + 1 < p { args[i + 1] } else { args[0] + 2.0 * PI };
            gaps.push(next - args[i]);
        }
        let radii: Vec<f64> = pts.iter().map(|z| z.norm()).collect();
        let rm = radii.iter().sum::<f64>() / p as f64;
        let rv = radii.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / p as f64;
        cvs.push(if rm > 0.0 { rv.sqrt() / rm } else { 0.0 });
        radii_all.extend(radii);
    }
    let g = gaps.len() as f64;
    let gap_mean = gaps.iter().sum::<f64>() / g;
    let gap_std = (gaps.iter().map(|x| (x - gap_mean).powi(2)).sum::<f64>() / g).sqrt();
    Ok(PolygonStats {
        p,
        trials: trials.len(),
        gap_mean,
        gap_std,
        radius_cv: cvs.iter().sum::<f64>() / cvs.len() as f64,
        radius_mean: radii_all.iter().sum::<f64>() / radii_all.len() as f64,
    })
}

/// Correlation of two real outlier statistics against a predicted value and
/// against independence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub name: String,
    pub n: usize,
    pub empirical: f64,
    pub predicted: f64,
    /// Fisher z of the empirical correlation against 0.
    pub z_null: f64,
    /// Fisher z against the prediction.
    pub z_predicted: f64,
    /// Empirical covariance against the predicted covariance.
    pub covariance: MomentRow,
}

/// Needs at least `min_trials` pairs. `predicted_cov` is `E[xy]` for centred
/// `x, y`; the predicted correlation uses the empirical variances only
/// through `predicted_corr`.
pub fn covariance_comparison(
    name: &str,
    x: &[f64],
    y: &[f64],
    predicted_cov: f64,
    predicted_corr: f64,
    min_trials: usize,
) -> Result<CorrelationCheck> {
    if x.len() < min_trials.max(4) {
        return Err(LabError::InsufficientData(format!(
            "{} trials, need {min_trials}",
            x.len()
        )));
    }
    let r = correlation(x, y)?;
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    Ok(CorrelationCheck {
        name: name.into(),
        n,
        empirical: r,
        predicted: predicted_corr,
        z_null: fisher_z(r, 0.0, n),
        z_predicted: fisher_z(r, predicted_corr, n),
        covariance: MomentRow::from_samples(format!("{name}: E[xy]"), &prods, predicted_cov)?,
    })
}

/// z-scored rows for `E[a b]` and `E[a conj b]` (real and imaginary parts).
pub fn complex_moment_rows(
    name: &str,
    a: &[C64],
    b: &[C64],
    pseudo: C64,
    cov: C64,
) -> Result<Vec<MomentRow>> {
    let ab: Vec<C64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let abc: Vec<C64> = a.iter().zip(b).map(|(x, y)| x * y.conj()).collect();
    let part = |v: &[C64], f: fn(&C64) -> f64| v.iter().map(f).collect::<Vec<f64>>();
    Ok(vec![
        MomentRow::from_samples(format!("{name}: Re E[ab]"), &part(&ab, |z| z.re), pseudo.re)?,
        MomentRow::from_samples(format!("{name}: Im E[ab]"), &part(&ab, |z| z.im), pseudo.im)?,
        MomentRow::from_samples(format!("{name}: Re E[a b*]"), &part(&abc, |z| z.re), cov.re)?,
        MomentRow::from_samples(format!("{name}: Im E[a b*]"), &part(&abc, |z| z.im), cov.im)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpx::c;
    use crate::ensemble::{sample_uci, sample_wigner_compressed, DMode, WignerParams};
    use crate::jordan::{embed, index_sets, realize, EmbedMode, JordanEntry, JordanSpec, QMode};
    use crate::measure::{Atom, UniformPart};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn gapped_measure() -> SpectralMeasure {
        SpectralMeasure::new(
            vec![Atom { x: -1.0, w: 0.5 }],
            vec![],
            vec![UniformPart {
                lo: 1.0,
                hi: 2.0,
                w: 0.5,
            }],
        )
        .unwrap()
    }

    #[test]
    fn statistic_matches_direct_sum() {
        let mu = gapped_measure();
        let n = 50;
        let mut r = rng(1);
        let s = sample_uci(&mu, n, DMode::Quantile, &mut r).unwrap();
        let spec = JordanSpec::single(c(1.5, 0.0), 1).unwrap();
        let pm = realize(&spec, QMode::Identity, &mut r).unwrap();
        let ep = embed(&pm, n, EmbedMode::Haar, &mut r).unwrap();
        let xi = c(3.0, 0.5);
        let m = resolvent_statistic(&s, &ep, xi, spec.entries()[0].theta).unwrap();
        let crate::ensemble::Structure::Diagonal(d) = s.structure() else { panic!() };
        let u = ep.u.as_ref().unwrap();
        let direct: C64 = (0..n).map(|a| u[(a, 0)].norm_sqr() / (xi - d[a])).sum();
        let want = (direct - 1.0 / 1.5) * (n as f64).sqrt();
        assert!((m[(0, 0)] - want).norm() < 1e-10);
    }

    #[test]
    fn rescale_examples() {
        let spec = JordanSpec::new(vec![JordanEntry {
            theta: c(2.0, 0.0),
            blocks: vec![(3, 1), (1, 2)],
        }])
        .unwrap();
        let classes = &index_sets(&spec)[0].classes;
        let xi = c(2.5, 0.0);
        let n = 4096;
        let big = (n as f64).powf(-1.0 / 6.0);
        let small = (n as f64).powf(-0.5);
        let members = vec![
            xi + c(small, 0.0),
            xi + c(0.0, big),
            xi + c(-small, 0.0),
            xi + c(-big, 0.0),
            xi + c(big, 0.0),
        ];
        let out = rescale_cluster(&members, xi, classes, n).unwrap();
        assert_eq!(out[0].p, 3);
        assert_eq!(out[0].values.len(), 3);
        for v in &out[0].values {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        for v in &out[1].values {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            rescale_cluster(&members[..4], xi, classes, n),
            Err(LabError::SkipTrial(_))
        ));
        // Ties keep input order.
        let single = &index_sets(&JordanSpec::single(c(1.0, 0.0), 1).unwrap())[0].classes;
        let tie = rescale_cluster(&[xi + 0.1], xi, single, 100).unwrap();
        assert!((tie[0].values[0] - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rescale_is_scale_consistent() {
        let spec = JordanSpec::new(vec![
            JordanEntry {
                theta: c(1.0, 1.0),
                blocks: vec![(4, 1), (1, 1)],
            },
        ])
        .unwrap();
        let classes = &index_sets(&spec)[0].classes;
        let mut r = rng(5);
        for n in [100usize, 1000, 10_000] {
            let big = (n as f64).powf(-1.0 / 8.0);
            let small = big / 4.5;
            let xi = c(0.0, 3.0);
            let mut members: Vec<(bool, C64)> = (0..4)
                .map(|j| (true, xi + C64::from_polar(big * (1.0 + 0.1 * r.random::<f64>()), j as f64)))
                .collect();
            members.push((false, xi + C64::from_polar(small, 0.3)));
            let out = rescale_cluster(&members.iter().map(|m| m.1).collect::<Vec<_>>(), xi, classes, n).unwrap();
            let scale4 = (n as f64).powf(1.0 / 8.0);
            for v in &out[0].values {
                assert!(v.norm() / scale4 >= big * 0.99);
            }
        }
    }

    #[test]
    fn single_block_limit_is_regular_polygon() {
        let spec = JordanSpec::single(c(2.0, 0.0), 5).unwrap();
        let pm = realize(&spec, QMode::Identity, &mut rng(0)).unwrap();
        let mu = SpectralMeasure::semicircle(1.0).unwrap();
        let sampler = LimitLawSampler::new(
            Kernel::Gue { sigma: 1.0 },
            &pm,
            &[LimitTarget {
                theta_index: 0,
                xi: c(2.5, 0.0),
            }],
        )
        .unwrap();
        let mut r = rng(1);
        let draws: Vec<Vec<C64>> = (0..50)
            .map(|_| sampler.draw(&mut r).unwrap().deviations[0][0].values.clone())
            .collect();
        let poly = polygon_statistics(&draws, 5).unwrap();
        assert!((poly.gap_mean - 2.0 * PI / 5.0).abs() < 1e-12);
        assert!(poly.gap_std < 1e-9 && poly.radius_cv < 1e-9);
        // Λ⁵ = θ² m / (−θ² G′)⁵ with m the single statistic.
        let d = sampler.draw(&mut r).unwrap();
        let g1 = mu.cauchy_derivative(c(2.5, 0.0)).unwrap();
        let want = d.m[0][(4, 0)] * 4.0 / (-4.0 * g1).powu(5);
        assert!((d.deviations[0][0].values[0].powu(5) - want).norm() < 1e-10 * want.norm().max(1.0));
    }

    #[test]
    fn exact_polygon_statistics() {
        let roots: Vec<C64> = (0..3).map(|j| C64::from_polar(1.0, 2.0 * PI * j as f64 / 3.0 + 0.2)).collect();
        let s = polygon_statistics(&[roots.clone(), roots], 3).unwrap();
        assert!((s.gap_mean - 2.0 * PI / 3.0).abs() < 1e-12);
        assert!(s.gap_std < 1e-12 && s.radius_cv < 1e-12);
        assert!(polygon_statistics(&[vec![c(1.0, 0.0)]], 3).is_err());
    }

    #[test]
    fn principal_root_of_polygon() {
        let w = c(-0.3, 0.8);
        let p = 4;
        let pts: Vec<C64> = (0..p)
            .map(|s| C64::from_polar(w.norm().powf(0.25), (w.arg() + 2.0 * PI * s as f64) / 4.0))
            .collect();
        let r = principal_root(&pts, p);
        assert!((r.powu(4) - w).norm() < 1e-12);
        assert!(r.arg() >= 0.0 && r.arg() < 2.0 * PI / 4.0);
    }

    #[test]
    fn hermitian_limit_matrices_are_hermitian() {
        let spec = JordanSpec::new(vec![JordanEntry {
            theta: c(2.0, 0.0),
            blocks: vec![(1, 3)],
        }])
        .unwrap();
        let pm = realize(&spec, QMode::Identity, &mut rng(0)).unwrap();
        let sampler = LimitLawSampler::new(
            Kernel::Gue { sigma: 1.0 },
            &pm,
            &[LimitTarget {
                theta_index: 0,
                xi: c(2.5, 0.0),
            }],
        )
        .unwrap();
        let mut r = rng(2);
        for _ in 0..20 {
            let d = sampler.draw(&mut r).unwrap();
            let mm = m_matrix(&d.m[0], c(2.0, 0.0), &pm.index[0].classes[0]).unwrap();
            assert!(mm.sub(&mm.adjoint()).max_abs() < 1e-10);
            for v in &d.deviations[0][0].values {
                assert!(v.im.abs() < 1e-8);
            }
        }
    }

    fn check_self_consistency(kernel: Kernel, spec: &JordanSpec, q_mode: QMode, targets: &[LimitTarget]) {
        let mut r = rng(7);
        let pm = realize(spec, q_mode, &mut r).unwrap();
        let sampler = LimitLawSampler::new(kernel, &pm, targets).unwrap();
        let draws: Vec<Vec<C64>> = (0..20_000).map(|_| sampler.draw_statistics(&mut r)).collect();
        let nv = sampler.variables().len();
        for i in 0..nv {
            for j in i..nv {
                let a: Vec<C64> = draws.iter().map(|d| d[i]).collect();
                let b: Vec<C64> = draws.iter().map(|d| d[j]).collect();
                let rows =
                    complex_moment_rows("pair", &a, &b, sampler.pseudo[(i, j)], sampler.cov[(i, j)]).unwrap();
                let scale = (sampler.cov[(i, i)].norm() * sampler.cov[(j, j)].norm()).sqrt();
                for row in rows {
                    let negligible = (row.empirical - row.theoretical).abs() < 1e-12 * scale;
                    assert!(row.within(4.5) || negligible, "{i},{j}: {row:?}");
                }
            }
        }
    }

    #[test]
    fn sampler_reproduces_its_covariance() {
        let spec = JordanSpec::new(vec![
            JordanEntry {
                theta: c(1.0, 1.5),
                blocks: vec![(2, 1), (1, 1)],
            },
            JordanEntry {
                theta: c(-2.0, 0.0),
                blocks: vec![(1, 1)],
            },
        ])
        .unwrap();
        let targets = [
            LimitTarget {
                theta_index: 0,
                xi: c(1.0, 1.5) + c(1.0, 1.5).inv(),
            },
            LimitTarget {
                theta_index: 1,
                xi: c(-2.5, 0.0),
            },
        ];
        let ginibre = QMode::RandomGinibre { condition_cap: 20.0 };
        check_self_consistency(Kernel::Gue { sigma: 1.0 }, &spec, ginibre, &targets);
        check_self_consistency(Kernel::Goe { sigma: 1.0 }, &spec, ginibre, &targets);
        let mu = gapped_measure();
        let theta = c(1.0, 0.0);
        let sols = crate::measure::solve_outlier_set(&mu, theta, &Default::default()).unwrap();
        let one = JordanSpec::single(theta, 1).unwrap();
        let t: Vec<LimitTarget> = sols.solutions.iter().map(|&xi| LimitTarget { theta_index: 0, xi }).collect();
        check_self_consistency(Kernel::Uci { measure: mu }, &one, QMode::Identity, &t);
    }

    #[test]
    fn uci_same_level_set_is_correlated() {
        let mu = gapped_measure();
        let theta = c(1.0, 0.0);
        let sols = crate::measure::solve_outlier_set(&mu, theta, &Default::default()).unwrap();
        assert_eq!(sols.m, 2);
        let (x1, x2) = (sols.solutions[0], sols.solutions[1]);
        let phi = mu.covariance_kernel_phi(x1, x2).unwrap();
        assert!(phi.norm() > 1e-3);
        let pm = realize(&JordanSpec::single(theta, 1).unwrap(), QMode::Identity, &mut rng(0)).unwrap();
        let targets = [
            LimitTarget { theta_index: 0, xi: x1 },
            LimitTarget { theta_index: 0, xi: x2 },
        ];
        let sampler = LimitLawSampler::new(Kernel::Uci { measure: mu }, &pm, &targets).unwrap();
        assert!((sampler.pseudo[(0, 1)] - phi).norm() < 1e-14);
    }

    #[test]
    fn gue_statistic_variance_matches_kernel() {
        let theta = c(2.0, 0.0);
        let xi = c(2.5, 0.0);
        let spec = JordanSpec::single(theta, 1).unwrap();
        let mut r = rng(9);
        let pm = realize(&spec, QMode::Identity, &mut r).unwrap();
        let n = 400;
        let ms: Vec<C64> = (0..4000)
            .map(|_| {
                let s = sample_wigner_compressed(&WignerParams::gue(1.0), n, 1, &mut r).unwrap();
                let ep = embed(&pm, n, EmbedMode::Canonical, &mut r).unwrap();
                resolvent_statistic(&s, &ep, xi, theta).unwrap()[(0, 0)]
            })
            .collect();
        let psi = wigner_kernel_psi(1.0, xi, xi).unwrap();
        let rows = complex_moment_rows("m11", &ms, &ms, psi, psi).unwrap();
        // Finite-N bias is O(1/√N) relative; allow 5 standard errors.
        for row in rows {
            assert!(row.within(5.0), "{row:?}");
        }
        let mean = ms.iter().sum::<C64>() / ms.len() as f64;
        assert!(mean.norm() < 0.1);
    }

    #[test]
    fn rate_examples() {
        let pts: Vec<RatePoint> = [250usize, 1000, 4000]
            .iter()
            .map(|&n| RatePoint {
                n,
                mean: (n as f64).powf(-0.25),
                stderr: 0.0,
            })
            .collect();
        let fit = estimate_rate(&pts).unwrap();
        assert!((fit.slope + 0.25).abs() < 1e-12);
        assert!(estimate_rate(&pts[..2]).is_err());
        let narrow: Vec<RatePoint> = [100usize, 200, 400]
            .iter()
            .map(|&n| RatePoint { n, mean: 1.0, stderr: 0.1 })
            .collect();
        assert!(estimate_rate(&narrow).is_err());
    }

    #[test]
    fn correlation_check_needs_data() {
        assert!(covariance_comparison("x", &[1.0; 10], &[1.0; 10], 0.0, 0.0, 100).is_err());
    }
}
