//! Spectrum of `H + A`, its outliers, and their matching to the predicted
//! level sets. Two independent paths: a dense non-Hermitian eigensolve, and
//! root finding on `f(z) = det(I − U*(z − H)⁻¹U A0)`, whose zeros away from
//! `Spec(H)` are exactly the eigenvalues of `H + A` there.

use crate::cpx::C64;
use crate::ensemble::{EnsembleSample, Structure};
use crate::error::{LabError, Result};
use crate::jordan::{EmbeddedPerturbation, JordanSpec};
use crate::measure::{solve_outlier_set, OutlierPrediction, SearchBox, SolveOptions, SpectralMeasure};
use crate::resolvent::ProjectedResolvent;
use crate::small::Small;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Level sets for every eigenvalue of the perturbation, with multiplicities.
pub fn predict(
    mu: &SpectralMeasure,
    spec: &JordanSpec,
    opts: &SolveOptions,
) -> Result<Vec<OutlierPrediction>> {
    spec.eigenvalues()
        .into_iter()
        .map(|(theta, k)| Ok(solve_outlier_set(mu, theta, opts)?.with_multiplicity(k)))
        .collect()
}

/// `max(0.1, 3 N^{-1/4})`.
pub fn default_delta(n: usize) -> f64 {
    (3.0 * (n as f64).powf(-0.25)).max(0.1)
}

/// Largest capture radius allowed: half the smallest ξ separation, and the
/// distance from every ξ to the δ-neighbourhood of the support.
pub fn capture_limit(predictions: &[OutlierPrediction], mu: &SpectralMeasure, delta: f64) -> f64 {
    let xis: Vec<C64> = predictions.iter().flat_map(|p| p.solutions.iter().copied()).collect();
    let mut cap = f64::INFINITY;
    for (i, a) in xis.iter().enumerate() {
        cap = cap.min(mu.support_distance(*a) - delta);
        for b in &xis[i + 1..] {
            cap = cap.min(0.5 * (a - b).norm());
        }
    }
    cap
}

/// `min(½ min separation, ½ (support distance − δ))`.
pub fn default_capture(predictions: &[OutlierPrediction], mu: &SpectralMeasure, delta: f64) -> f64 {
    let xis: Vec<C64> = predictions.iter().flat_map(|p| p.solutions.iter().copied()).collect();
    let mut cap = f64::INFINITY;
    for (i, a) in xis.iter().enumerate() {
        cap = cap.min(0.5 * (mu.support_distance(*a) - delta));
        for b in &xis[i + 1..] {
            cap = cap.min(0.5 * (a - b).norm());
        }
    }
    if cap.is_finite() {
        cap
    } else {
        1.0
    }
}

/// All N eigenvalues of `H + U A0 U*`.
pub fn perturbed_spectrum_dense(sample: &EnsembleSample, ep: &EmbeddedPerturbation) -> Result<Vec<C64>> {
    if ep.n != sample.n() {
        return Err(LabError::DimensionMismatch {
            expected: sample.n(),
            got: ep.n,
        });
    }
    let mut m = sample.matrix();
    match &ep.u {
        None => {
            let a = ep.a0();
            for i in 0..a.rows() {
                for j in 0..a.cols() {
                    m[(i, j)] += a[(i, j)];
                }
            }
        }
        Some(_) => m += ep.dense(),
    }
    m.eigenvalues().map_err(|e| LabError::Solver(format!("{e:?}")))
}

/// `f(z) = det(I − P(z) A0)` with `P` the projected resolvent.
#[derive(Debug, Clone)]
pub struct CharacteristicF {
    res: ProjectedResolvent,
    a0: Small,
}

impl CharacteristicF {
    pub fn new(sample: &EnsembleSample, ep: &EmbeddedPerturbation) -> Result<Self> {
        Ok(CharacteristicF {
            res: ProjectedResolvent::new(sample, ep)?,
            a0: ep.a0().clone(),
        })
    }

    pub fn resolvent(&self) -> &ProjectedResolvent {
        &self.res
    }

    pub fn eval(&self, z: C64) -> Result<C64> {
        let p = self.res.eval(z)?;
        Ok(Small::identity(self.a0.rows()).sub(&p.matmul(&self.a0)).det())
    }

    /// `(f(z), f'(z)/f(z))`; the log-derivative is infinite at a root.
    pub fn log_derivative(&self, z: C64) -> Result<(C64, C64)> {
        let (p, dp) = self.res.eval_with_derivative(z)?;
        let m = Small::identity(self.a0.rows()).sub(&p.matmul(&self.a0));
        let f = m.det();
        let l = match m.inverse() {
            Ok(inv) => -inv.matmul(&dp).matmul(&self.a0).trace(),
            Err(_) => C64::new(f64::INFINITY, 0.0),
        };
        Ok((f, l))
    }
}

pub fn characteristic_f(sample: &EnsembleSample, ep: &EmbeddedPerturbation, z: C64) -> Result<C64> {
    CharacteristicF::new(sample, ep)?.eval(z)
}

/// `f0(z) = Π_i (1 − G_μ(z) θ_i)^{k_i}`.
pub fn limit_f0(mu: &SpectralMeasure, spec: &JordanSpec, z: C64) -> Result<C64> {
    let g = mu.cauchy_transform(z)?;
    Ok(spec
        .eigenvalues()
        .into_iter()
        .map(|(theta, k)| (C64::new(1.0, 0.0) - g * theta).powu(k as u32))
        .product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Dense,
    Determinant,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    pub engine: Engine,
    /// `Auto` uses the dense path up to this N.
    pub dense_max_n: usize,
    /// Newton step tolerance relative to `1 + |z|`.
    pub newton_tol: f64,
    /// A located root must satisfy `|f| <` this.
    pub residual_tol: f64,
    pub max_iter: usize,
    /// Run the argument principle to learn how many exterior roots exist.
    pub verify_count: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            engine: Engine::Auto,
            dense_max_n: 400,
            newton_tol: 1e-13,
            residual_tol: 1e-8,
            max_iter: 100,
            verify_count: true,
        }
    }
}

/// Stadium `{z : dist(z, [a, b]) = r}`, traversed counterclockwise.
#[derive(Debug, Clone, Copy)]
struct Stadium {
    a: f64,
    b: f64,
    r: f64,
}

impl Stadium {
    fn length(&self) -> f64 {
        2.0 * (self.b - self.a) + 2.0 * PI * self.r
    }

    fn point(&self, s: f64) -> C64 {
        let w = self.b - self.a;
        let arc = PI * self.r;
        if s < w {
            return C64::new(self.a + s, -self.r);
        }
        let s = s - w;
        if s < arc {
            return self.b + C64::from_polar(self.r, -PI / 2.0 + s / self.r);
        }
        let s = s - arc;
        if s < w {
            return C64::new(self.b - s, self.r);
        }
        let s = (s - w).min(arc);
        self.a + C64::from_polar(self.r, PI / 2.0 + s / self.r)
    }
}

/// Support intervals whose δ-neighbourhoods overlap are fused.
fn stadiums(mu: &SpectralMeasure, delta: f64) -> Vec<Stadium> {
    let mut out: Vec<Stadium> = Vec::new();
    for (a, b) in mu.support_intervals() {
        match out.last_mut() {
            Some(last) if a - last.b < 2.0 * delta => last.b = last.b.max(b),
            _ => out.push(Stadium { a, b, r: delta }),
        }
    }
    out
}

const MAX_ARG_STEP: f64 = PI / 4.0;

/// Winding number of `f` around one stadium, by adaptive sampling.
fn winding(f: &CharacteristicF, st: &Stadium) -> Result<f64> {
    let len = st.length();
    let n0 = ((len / st.r).ceil() as usize).clamp(32, 4096);
    let at = |s: f64| -> Result<C64> {
        let v = f.eval(st.point(s))?;
        if v.norm() == 0.0 || !v.re.is_finite() || !v.im.is_finite() {
            return Err(LabError::Convergence("f vanishes on the contour".into()));
        }
        Ok(v)
    };
    fn segment(
        at: &dyn Fn(f64) -> Result<C64>,
        (s0, f0): (f64, C64),
        (s1, f1): (f64, C64),
        depth: u32,
    ) -> Result<f64> {
        let d = (f1 / f0).arg();
        if d.abs() <= MAX_ARG_STEP {
            return Ok(d);
        }
        if depth >= 40 {
            return Err(LabError::Convergence("argument jump on the contour".into()));
        }
        let mid = 0.5 * (s0 + s1);
        let fm = at(mid)?;
        Ok(segment(at, (s0, f0), (mid, fm), depth + 1)? + segment(at, (mid, fm), (s1, f1), depth + 1)?)
    }
    let start = at(0.0)?;
    let mut prev = (0.0, start);
    let mut total = 0.0;
    for j in 1..=n0 {
        let s = len * j as f64 / n0 as f64;
        let cur = if j == n0 { (len, start) } else { (s, at(s)?) };
        total += segment(&at, prev, cur, 0)?;
        prev = cur;
    }
    Ok(total / (2.0 * PI))
}

/// Located exterior zeros of `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootSearch {
    #[serde(with = "crate::cpx::pairs")]
    pub roots: Vec<C64>,
    /// Number of exterior zeros from the argument principle, if run.
    pub expected: Option<usize>,
    /// Newton runs started.
    pub seeds: usize,
}

impl RootSearch {
    pub fn complete(&self) -> bool {
        self.expected.is_none_or(|e| e == self.roots.len())
    }
}

/// Zeros of `f` at distance more than `delta` from the support of `mu`.
///
/// Each predicted ξ gets a disc of radius `capture`; zeros inside it are
/// counted and located from contour moments of `f'/f`, then polished by
/// Newton. With `verify_count` the argument principle on the δ-contour gives
/// the total, and any zeros outside the discs are hunted by deflated Newton
/// from a grid.
pub fn exterior_roots(
    f: &CharacteristicF,
    mu: &SpectralMeasure,
    predictions: &[OutlierPrediction],
    delta: f64,
    capture: f64,
    opts: &EngineOptions,
) -> Result<RootSearch> {
    let st = stadiums(mu, delta);
    let expected = if opts.verify_count {
        let mut wind = 0.0;
        for s in &st {
            wind += winding(f, s)?;
        }
        let rounded = wind.round();
        if (wind - rounded).abs() > 0.05 {
            return Err(LabError::Convergence(format!("non-integer winding {wind}")));
        }
        let res = f.resolvent();
        let mut poles = res.count_below(st[0].a - delta)?;
        for w in st.windows(2) {
            poles += res.count_below(w[1].a - w[1].r)? - res.count_below(w[0].b + w[0].r)?;
        }
        let last = st[st.len() - 1];
        poles += res.count_below(f64::MAX.sqrt())? - res.count_below(last.b + last.r)?;
        let count = poles as f64 - rounded;
        if count < 0.0 {
            return Err(LabError::Convergence(format!("negative root count {count}")));
        }
        Some(count as usize)
    } else {
        None
    };

    let mut roots: Vec<C64> = Vec::new();
    let mut seeds = 0;
    for p in predictions {
        for &xi in &p.solutions {
            let found = disc_roots(f, xi, capture, opts)?;
            seeds += found.len();
            for z in found {
                if roots.iter().all(|r| (r - z).norm() >= 1e-8) {
                    roots.push(z);
                }
            }
        }
    }

    if let Some(e) = expected.filter(|&e| roots.len() < e) {
        let (lo, hi) = mu.hull();
        let mut bx = SearchBox {
            re_min: lo,
            re_max: hi,
            im_min: 0.0,
            im_max: 0.0,
        };
        for p in predictions {
            let b = SearchBox::around(mu, p.theta);
            bx.re_min = bx.re_min.min(b.re_min);
            bx.re_max = bx.re_max.max(b.re_max);
            bx.im_min = bx.im_min.min(b.im_min);
            bx.im_max = bx.im_max.max(b.im_max);
        }
        let escape =
            4.0 * (bx.re_max - bx.re_min).max(bx.im_max - bx.im_min) + lo.abs().max(hi.abs());
        let pitch = 0.25;
        let nx = ((bx.re_max - bx.re_min) / pitch).ceil() as usize;
        let ny = ((bx.im_max - bx.im_min) / pitch).ceil() as usize;
        let mut interior: Vec<C64> = Vec::new();
        'grid: for i in 0..=nx {
            for j in 0..=ny {
                if roots.len() >= e {
                    break 'grid;
                }
                let seed = C64::new(bx.re_min + i as f64 * pitch, bx.im_min + j as f64 * pitch);
                if mu.support_distance(seed) <= delta {
                    continue;
                }
                seeds += 1;
                let known: Vec<C64> = roots.iter().chain(&interior).copied().collect();
                let Some(z) = deflated_newton(f, seed, &known, escape, opts) else {
                    continue;
                };
                if known.iter().any(|r| (r - z).norm() < 1e-8) {
                    continue;
                }
                if mu.support_distance(z) > delta {
                    roots.push(z);
                } else {
                    interior.push(z);
                }
            }
        }
    }
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(RootSearch {
        roots,
        expected,
        seeds,
    })
}

/// Zeros of `f` in the open disc `|z − c| < r`.
///
/// The shifted power sums `Σ (z_j − c)^k` are trapezoid-rule contour integrals
/// of `(z − c)^k f'/f`; Newton's identities turn them into a polynomial whose
/// roots seed a deflated Newton polish. The disc must contain no pole of `f`.
fn disc_roots(f: &CharacteristicF, c: C64, r: f64, opts: &EngineOptions) -> Result<Vec<C64>> {
    let res = f.resolvent();
    if c.im.abs() < r {
        let half = (r * r - c.im * c.im).sqrt();
        if res.count_below(c.re + half)? != res.count_below(c.re - half)? {
            return Err(LabError::Convergence(format!("pole of f inside the disc around {c}")));
        }
    }
    let mut m = 64;
    loop {
        let mut logder = Vec::with_capacity(m);
        for j in 0..m {
            let u = C64::from_polar(1.0, 2.0 * PI * j as f64 / m as f64);
            let (_, l) = f.log_derivative(c + u * r)?;
            logder.push((u, l * r));
        }
        let count = logder.iter().map(|(u, l)| u * l).sum::<C64>() / m as f64;
        let k = count.re.round();
        let settled = (count.re - k).abs() < 0.05 && count.im.abs() < 0.05;
        if !settled {
            if m >= 1024 {
                return Err(LabError::Convergence(format!(
                    "no integer root count near {c}: {count}"
                )));
            }
            m *= 2;
            continue;
        }
        let k = k as usize;
        if k == 0 {
            return Ok(vec![]);
        }
        // Power sums in units of r.
        let s: Vec<C64> = (1..=k)
            .map(|p| logder.iter().map(|(u, l)| u.powu(p as u32 + 1) * l).sum::<C64>() / m as f64)
            .collect();
        let mut e = vec![C64::new(1.0, 0.0)];
        for q in 1..=k {
            let mut acc = C64::new(0.0, 0.0);
            for i in 1..=q {
                let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
                acc += e[q - i] * s[i - 1] * sign;
            }
            e.push(acc / q as f64);
        }
        // Companion matrix of u^k − e1 u^{k−1} + e2 u^{k−2} − …
        let comp = faer::Mat::<C64>::from_fn(k, k, |i, j| {
            if i == 0 {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                e[j + 1] * sign
            } else if i == j + 1 {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let approx = comp
            .eigenvalues()
            .map_err(|e| LabError::Solver(format!("{e:?}")))?;
        let mut out: Vec<C64> = Vec::with_capacity(k);
        for u in approx {
            let seed = c + u * r;
            let z = deflated_newton(f, seed, &out, 10.0 * (c.norm() + r), opts)
                .filter(|z| (z - c).norm() < r)
                .ok_or_else(|| LabError::Convergence(format!("polish failed near {seed}")))?;
            out.push(z);
        }
        return Ok(out);
    }
}

/// Newton on `f / Π (z − r_j)`.
fn deflated_newton(
    f: &CharacteristicF,
    seed: C64,
    known: &[C64],
    escape: f64,
    opts: &EngineOptions,
) -> Option<C64> {
    let mut z = seed;
    for _ in 0..opts.max_iter {
        let (fz, l) = f.log_derivative(z).ok()?;
        if fz.norm() == 0.0 {
            return Some(z);
        }
        let mut ld = l;
        for r in known {
            ld -= (z - r).inv();
        }
        if !(ld.re.is_finite() && ld.im.is_finite()) || ld.norm() == 0.0 {
            return None;
        }
        let step = ld.inv();
        z -= step;
        if z.norm() > escape {
            return None;
        }
        if step.norm() < opts.newton_tol * (1.0 + z.norm()) {
            let r = f.eval(z).ok()?;
            return (r.norm() < opts.residual_tol).then_some(z);
        }
    }
    None
}

/// One ξ and the outliers captured by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub theta_index: usize,
    pub xi_index: usize,
    #[serde(with = "crate::cpx::pair")]
    pub theta: C64,
    #[serde(with = "crate::cpx::pair")]
    pub xi: C64,
    /// `Σ_j p_j β_j` for θ.
    pub expected: usize,
    #[serde(with = "crate::cpx::pairs")]
    pub members: Vec<C64>,
}

impl Cluster {
    pub fn count_ok(&self) -> bool {
        self.members.len() == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    #[serde(with = "crate::cpx::pairs")]
    pub all_eigs: Vec<C64>,
    #[serde(with = "crate::cpx::pairs")]
    pub bulk: Vec<C64>,
    #[serde(with = "crate::cpx::pairs")]
    pub outliers: Vec<C64>,
    pub clusters: Vec<Cluster>,
    #[serde(with = "crate::cpx::pairs")]
    pub unmatched: Vec<C64>,
    pub delta: f64,
    pub capture: f64,
    /// Exterior root count from the argument principle (determinant path).
    pub expected_exterior: Option<usize>,
}

impl OutlierReport {
    pub fn all_counts_ok(&self) -> bool {
        self.unmatched.is_empty() && self.clusters.iter().all(Cluster::count_ok)
    }
}

pub fn classify_and_match(
    eigs: &[C64],
    predictions: &[OutlierPrediction],
    mu: &SpectralMeasure,
    delta: f64,
    capture: f64,
) -> Result<OutlierReport> {
    if !(delta > 0.0 && capture > 0.0) {
        return Err(LabError::invalid("delta and capture must be positive"));
    }
    let limit = capture_limit(predictions, mu, delta);
    if capture > limit * (1.0 + 1e-12) {
        return Err(LabError::invalid(format!(
            "capture {capture} exceeds the separation limit {limit}"
        )));
    }
    let mut clusters: Vec<Cluster> = predictions
        .iter()
        .enumerate()
        .flat_map(|(ti, p)| {
            p.solutions.iter().enumerate().map(move |(xi_index, &xi)| Cluster {
                theta_index: ti,
                xi_index,
                theta: p.theta,
                xi,
                expected: p.multiplicity_k,
                members: vec![],
            })
        })
        .collect();
    let (mut bulk, mut outliers, mut unmatched) = (vec![], vec![], vec![]);
    for &z in eigs {
        if mu.support_distance(z) <= delta {
            bulk.push(z);
            continue;
        }
        outliers.push(z);
        let nearest = clusters
            .iter_mut()
            .map(|c| ((c.xi - z).norm(), c))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match nearest {
            Some((d, c)) if d <= capture => c.members.push(z),
            _ => unmatched.push(z),
        }
    }
    Ok(OutlierReport {
        all_eigs: eigs.to_vec(),
        bulk,
        outliers,
        clusters,
        unmatched,
        delta,
        capture,
        expected_exterior: None,
    })
}

/// Runs the configured engine and classifies the result. The determinant path
/// returns only exterior roots, so its report has an empty bulk.
pub fn analyze(
    sample: &EnsembleSample,
    ep: &EmbeddedPerturbation,
    mu: &SpectralMeasure,
    predictions: &[OutlierPrediction],
    delta: f64,
    capture: f64,
    opts: &EngineOptions,
) -> Result<OutlierReport> {
    let dense = match opts.engine {
        Engine::Dense => true,
        Engine::Determinant => false,
        Engine::Auto => {
            sample.n() <= opts.dense_max_n
                && !matches!(sample.structure(), Structure::BlockTridiagonal(_))
        }
    };
    if dense {
        let eigs = perturbed_spectrum_dense(sample, ep)?;
        return classify_and_match(&eigs, predictions, mu, delta, capture);
    }
    let f = CharacteristicF::new(sample, ep)?;
    let search = exterior_roots(&f, mu, predictions, delta, capture, opts)?;
    if !search.complete() {
        return Err(LabError::Convergence(format!(
            "located {} of {} exterior roots",
            search.roots.len(),
            search.expected.unwrap_or(0)
        )));
    }
    let mut report = classify_and_match(&search.roots, predictions, mu, delta, capture)?;
    report.expected_exterior = search.expected;
    Ok(report)
}
