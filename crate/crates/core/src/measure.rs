//! Compactly supported spectral measures built from atoms, scaled
//! semicircles and uniform segments, with their Cauchy transforms,
//! resolvent moments, covariance kernels and the level sets `G = 1/θ`.

use crate::cpx::{ln_1p, C64};
use crate::error::{LabError, Result};
use serde::{Deserialize, Serialize};

/// Weight sums must match 1 to this precision.
const WEIGHT_TOL: f64 = 1e-12;
/// Points closer than this to the support are rejected by the transforms.
const SUPPORT_TOL: f64 = 1e-12;
/// `covariance_kernel_phi` switches to the diagonal formula below this gap.
pub const DIAGONAL_SWITCH: f64 = 1e-8;
/// Highest order accepted by `resolvent_moment`.
pub const MAX_MOMENT_ORDER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemicirclePart {
    pub center: f64,
    pub sigma: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformPart {
    pub lo: f64,
    pub hi: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct MeasureRepr {
    #[serde(default)]
    atoms: Vec<Atom>,
    #[serde(default)]
    semicircle: Vec<SemicirclePart>,
    #[serde(default)]
    uniform: Vec<UniformPart>,
}

/// A probability measure on the real line with compact support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct SpectralMeasure {
    atoms: Vec<Atom>,
    semicircle: Vec<SemicirclePart>,
    uniform: Vec<UniformPart>,
}

impl TryFrom<MeasureRepr> for SpectralMeasure {
    type Error = LabError;

    fn try_from(r: MeasureRepr) -> Result<Self> {
        SpectralMeasure::new(r.atoms, r.semicircle, r.uniform)
    }
}

impl From<SpectralMeasure> for MeasureRepr {
    fn from(m: SpectralMeasure) -> Self {
        MeasureRepr {
            atoms: m.atoms,
            semicircle: m.semicircle,
            uniform: m.uniform,
        }
    }
}

impl SpectralMeasure {
    /// Validated constructor. Rejects a lone Dirac mass.
    pub fn new(
        atoms: Vec<Atom>,
        semicircle: Vec<SemicirclePart>,
        uniform: Vec<UniformPart>,
    ) -> Result<Self> {
        let m = Self::build(atoms, semicircle, uniform)?;
        if m.is_single_dirac() {
            return Err(LabError::invalid("measure is a single Dirac mass"));
        }
        Ok(m)
    }

    fn build(
        atoms: Vec<Atom>,
        semicircle: Vec<SemicirclePart>,
        uniform: Vec<UniformPart>,
    ) -> Result<Self> {
        let finite = |v: f64| v.is_finite();
        for a in &atoms {
            if !(finite(a.x) && a.w > 0.0 && a.w <= 1.0) {
                return Err(LabError::invalid(format!("bad atom {a:?}")));
            }
        }
        for s in &semicircle {
            if !(finite(s.center) && finite(s.sigma) && s.sigma > 0.0 && s.w > 0.0) {
                return Err(LabError::invalid(format!("bad semicircle part {s:?}")));
            }
        }
        for u in &uniform {
            if !(finite(u.lo) && finite(u.hi) && u.lo < u.hi && u.w > 0.0) {
                return Err(LabError::invalid(format!("bad uniform part {u:?}")));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.w).sum::<f64>()
            + semicircle.iter().map(|s| s.w).sum::<f64>()
            + uniform.iter().map(|u| u.w).sum::<f64>();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(LabError::invalid(format!("total weight {total} is not 1")));
        }
        Ok(SpectralMeasure {
            atoms,
            semicircle,
            uniform,
        })
    }

    /// Semicircle law of variance `sigma²` centred at 0, supported on `[−2σ, 2σ]`.
    pub fn semicircle(sigma: f64) -> Result<Self> {
        Self::new(
            vec![],
            vec![SemicirclePart {
                center: 0.0,
                sigma,
                w: 1.0,
            }],
            vec![],
        )
    }

    /// A point mass. Degenerate, so only kernel null tests use it.
    pub fn dirac(x: f64) -> Self {
        SpectralMeasure {
            atoms: vec![Atom { x, w: 1.0 }],
            semicircle: vec![],
            uniform: vec![],
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn semicircle_parts(&self) -> &[SemicirclePart] {
        &self.semicircle
    }

    pub fn uniform_parts(&self) -> &[UniformPart] {
        &self.uniform
    }

    pub fn is_single_dirac(&self) -> bool {
        self.atoms.len() == 1 && self.semicircle.is_empty() && self.uniform.is_empty()
    }

    /// If the measure is exactly one semicircle centred at 0, its σ.
    pub fn as_centered_semicircle(&self) -> Option<f64> {
        match (&self.atoms[..], &self.semicircle[..], &self.uniform[..]) {
            ([], [s], []) if s.center == 0.0 => Some(s.sigma),
            _ => None,
        }
    }

    /// Support as sorted, merged closed intervals (atoms are degenerate intervals).
    pub fn support_intervals(&self) -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = self
            .atoms
            .iter()
            .map(|a| (a.x, a.x))
            .chain(
                self.semicircle
                    .iter()
                    .map(|s| (s.center - 2.0 * s.sigma, s.center + 2.0 * s.sigma)),
            )
            .chain(self.uniform.iter().map(|u| (u.lo, u.hi)))
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
        for (lo, hi) in iv {
            match merged.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => merged.push((lo, hi)),
            }
        }
        merged
    }

    /// Smallest interval containing the support.
    pub fn hull(&self) -> (f64, f64) {
        let iv = self.support_intervals();
        (iv[0].0, iv[iv.len() - 1].1)
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.hull();
        hi - lo
    }

    /// Euclidean distance from `z` to the closed support.
    pub fn support_distance(&self, z: C64) -> f64 {
        self.support_intervals()
            .iter()
            .map(|&(lo, hi)| {
                let dx = (lo - z.re).max(z.re - hi).max(0.0);
                dx.hypot(z.im)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn check_domain(&self, z: C64) -> Result<()> {
        if !(z.re.is_finite() && z.im.is_finite()) || self.support_distance(z) <= SUPPORT_TOL {
            return Err(LabError::domain(z));
        }
        Ok(())
    }

    /// `G_μ(z) = ∫ μ(dx)/(z − x)`.
    pub fn cauchy_transform(&self, z: C64) -> Result<C64> {
        self.check_domain(z)?;
        Ok(self.g_unchecked(z))
    }

    fn g_unchecked(&self, z: C64) -> C64 {
        let mut g = C64::new(0.0, 0.0);
        for a in &self.atoms {
            g += a.w / (z - a.x);
        }
        for s in &self.semicircle {
            g += s.w * sc_g(z - s.center, s.sigma);
        }
        for u in &self.uniform {
            g += u.w * uniform_log(z, u) / (u.hi - u.lo);
        }
        g
    }

    /// `∫ (z − x)^{−(k+1)} μ(dx)`, i.e. `(−1)^k G^{(k)}(z) / k!`.
    pub fn resolvent_moment(&self, z: C64, k: usize) -> Result<C64> {
        if k > MAX_MOMENT_ORDER {
            return Err(LabError::invalid(format!(
                "moment order {k} exceeds {MAX_MOMENT_ORDER}"
            )));
        }
        self.check_domain(z)?;
        if k == 0 {
            return Ok(self.g_unchecked(z));
        }
        let mut acc = C64::new(0.0, 0.0);
        for a in &self.atoms {
            acc += a.w * (z - a.x).powi(-(k as i32 + 1));
        }
        for s in &self.semicircle {
            let g = sc_taylor(z - s.center, s.sigma, k);
            let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
            acc += s.w * sign * g[k];
        }
        for u in &self.uniform {
            let kk = k as i32;
            acc += u.w * ((z - u.hi).powi(-kk) - (z - u.lo).powi(-kk))
                / (k as f64 * (u.hi - u.lo));
        }
        Ok(acc)
    }

    /// `G′_μ(z)`.
    pub fn cauchy_derivative(&self, z: C64) -> Result<C64> {
        Ok(-self.resolvent_moment(z, 1)?)
    }

    /// `φ(z,w) = ∫ (z−x)^{−1}(w−x)^{−1} μ(dx)`, evaluated without cancellation
    /// when `z` and `w` are close.
    pub fn cross_integral(&self, z: C64, w: C64) -> Result<C64> {
        self.check_domain(z)?;
        self.check_domain(w)?;
        let (z, w) = ordered(z, w);
        let gap = (z - w).norm();
        if gap < DIAGONAL_SWITCH {
            return self.resolvent_moment(0.5 * (z + w), 1);
        }
        let near = gap < 0.25 * self.support_distance(z).min(self.support_distance(w));
        let mut acc = C64::new(0.0, 0.0);
        for a in &self.atoms {
            acc += a.w / ((z - a.x) * (w - a.x));
        }
        for s in &self.semicircle {
            acc += s.w * sc_cross(z - s.center, w - s.center, s.sigma, near);
        }
        for u in &self.uniform {
            let len = u.hi - u.lo;
            let quotient = if near {
                let h = w - z;
                (ln_1p(h / (z - u.lo)) - ln_1p(h / (z - u.hi))) / (z - w)
            } else {
                (uniform_log(w, u) - uniform_log(z, u)) / (z - w)
            };
            acc += u.w * quotient / len;
        }
        Ok(acc)
    }

    /// `Φ(z,w) = φ(z,w) − G(z)G(w)`, symmetric in its arguments as computed.
    pub fn covariance_kernel_phi(&self, z: C64, w: C64) -> Result<C64> {
        let (z, w) = ordered(z, w);
        let phi = self.cross_integral(z, w)?;
        if (z - w).norm() < DIAGONAL_SWITCH {
            let g = self.g_unchecked(0.5 * (z + w));
            return Ok(phi - g * g);
        }
        Ok(phi - self.g_unchecked(z) * self.g_unchecked(w))
    }

    /// Cumulative distribution function.
    pub fn cdf(&self, x: f64) -> f64 {
        self.continuous_cdf(x) + self.atoms.iter().filter(|a| a.x <= x).map(|a| a.w).sum::<f64>()
    }

    fn continuous_cdf(&self, x: f64) -> f64 {
        let sc: f64 = self
            .semicircle
            .iter()
            .map(|s| {
                let t = ((x - s.center) / (2.0 * s.sigma)).clamp(-1.0, 1.0);
                s.w * (0.5 + (t * (1.0 - t * t).sqrt() + t.asin()) / std::f64::consts::PI)
            })
            .sum();
        let un: f64 = self
            .uniform
            .iter()
            .map(|u| u.w * ((x - u.lo) / (u.hi - u.lo)).clamp(0.0, 1.0))
            .sum();
        sc + un
    }

    /// Generalised inverse `inf{x : F(x) ≥ u}` for `u ∈ (0, 1)`. Atoms are hit exactly.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut atoms = self.atoms.clone();
        atoms.sort_by(|a, b| a.x.total_cmp(&b.x));
        for a in &atoms {
            let below = self.continuous_cdf(a.x)
                + atoms.iter().filter(|b| b.x < a.x).map(|b| b.w).sum::<f64>();
            if below < u && u <= below + a.w {
                return a.x;
            }
        }
        let (mut lo, mut hi) = self.hull();
        if self.cdf(lo) >= u {
            return lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) >= u {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// Canonical argument order so that two-point kernels are exactly symmetric.
fn ordered(z: C64, w: C64) -> (C64, C64) {
    if (z.re, z.im) <= (w.re, w.im) {
        (z, w)
    } else {
        (w, z)
    }
}

/// `sqrt(ζ − 2σ)·sqrt(ζ + 2σ)`: the square root of `ζ² − 4σ²` with its cut on `[−2σ, 2σ]`.
fn sc_root(zeta: C64, sigma: f64) -> C64 {
    (zeta - 2.0 * sigma).sqrt() * (zeta + 2.0 * sigma).sqrt()
}

/// Semicircle transform `(ζ − s)/(2σ²)`, written as `2/(ζ + s)` to avoid cancellation.
fn sc_g(zeta: C64, sigma: f64) -> C64 {
    2.0 / (zeta + sc_root(zeta, sigma))
}

/// Taylor coefficients `g_0..=g_k` of the semicircle transform at `ζ`.
fn sc_taylor(zeta: C64, sigma: f64, k: usize) -> Vec<C64> {
    let zero = C64::new(0.0, 0.0);
    let cs = [zeta * zeta - 4.0 * sigma * sigma, 2.0 * zeta, C64::new(1.0, 0.0)];
    let mut a = vec![zero; k + 1];
    a[0] = sc_root(zeta, sigma);
    for n in 1..=k {
        let mut rhs = if n < 3 { cs[n] } else { zero };
        for j in 1..n {
            rhs -= a[j] * a[n - j];
        }
        a[n] = rhs / (2.0 * a[0]);
    }
    // G = 2/t with t = ζ + h + s(ζ + h); invert the series of t.
    let mut t = a;
    t[0] += zeta;
    if k >= 1 {
        t[1] += 1.0;
    }
    let mut r = vec![zero; k + 1];
    r[0] = 1.0 / t[0];
    for n in 1..=k {
        let mut acc = zero;
        for j in 1..=n {
            acc += t[j] * r[n - j];
        }
        r[n] = -acc * r[0];
    }
    r.into_iter().map(|x| 2.0 * x).collect()
}

/// `∫ (z−x)^{−1}(w−x)^{−1}` against the unit semicircle part, at shifted points.
fn sc_cross(zz: C64, ww: C64, sigma: f64, near: bool) -> C64 {
    if near {
        // (G(z) − G(w))/(z − w) = −2(1 + (ζ_z + ζ_w)/(s_z + s_w)) / ((ζ_z + s_z)(ζ_w + s_w))
        let sz = sc_root(zz, sigma);
        let sw = sc_root(ww, sigma);
        let dq = -2.0 * (1.0 + (zz + ww) / (sz + sw)) / ((zz + sz) * (ww + sw));
        -dq
    } else {
        (sc_g(ww, sigma) - sc_g(zz, sigma)) / (zz - ww)
    }
}

/// `log(z − lo) − log(z − hi)`, analytic off `[lo, hi]`.
fn uniform_log(z: C64, u: &UniformPart) -> C64 {
    ln_1p((u.hi - u.lo) / (z - u.hi))
}

/// `ψ_sc(z,w) = G²(z)G²(w)(σ² + σ⁴ φ_sc(z,w))` for the centred semicircle of variance σ².
pub fn wigner_kernel_psi(sigma: f64, z: C64, w: C64) -> Result<C64> {
    let mu = SpectralMeasure::semicircle(sigma)?;
    let (z, w) = ordered(z, w);
    let gz = mu.cauchy_transform(z)?;
    let gw = mu.cauchy_transform(w)?;
    let phi = mu.cross_integral(z, w)?;
    let s2 = sigma * sigma;
    Ok(gz * gz * gw * gw * (s2 + s2 * s2 * phi))
}

/// Rectangle `[re_min, re_max] × [im_min, im_max]` for the root search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl SearchBox {
    /// Hull of the support padded by its diameter, `2|θ|` and one unit.
    pub fn around(mu: &SpectralMeasure, theta: C64) -> Self {
        let (lo, hi) = mu.hull();
        let pad = mu.diameter() + 2.0 * theta.norm() + 1.0;
        SearchBox {
            re_min: lo - pad,
            re_max: hi + pad,
            im_min: -pad,
            im_max: pad,
        }
    }

    pub fn contains(&self, z: C64) -> bool {
        z.re >= self.re_min && z.re <= self.re_max && z.im >= self.im_min && z.im <= self.im_max
    }

    fn boundary_distance(&self, z: C64) -> f64 {
        (z.re - self.re_min)
            .min(self.re_max - z.re)
            .min(z.im - self.im_min)
            .min(self.im_max - z.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    /// Residual target `|G(ξ) − 1/θ|`.
    pub tol: f64,
    /// Solutions closer than this to the support are reported as marginal.
    pub delta_min: f64,
    /// Spacing of the Newton starting grid.
    pub pitch: f64,
    pub max_iter: usize,
    pub search_box: Option<SearchBox>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            delta_min: 1e-3,
            pitch: 0.1,
            max_iter: 60,
            search_box: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub seeds: usize,
    /// Seeds whose Newton run did not settle.
    pub failed_seeds: usize,
    /// Solutions within one grid pitch of the box edge.
    #[serde(with = "crate::cpx::pairs")]
    pub boundary_roots: Vec<C64>,
}

/// The level set `S_θ = {ξ : G_μ(ξ) = 1/θ}` outside the support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierPrediction {
    #[serde(with = "crate::cpx::pair")]
    pub theta: C64,
    #[serde(with = "crate::cpx::pairs")]
    pub solutions: Vec<C64>,
    #[serde(with = "crate::cpx::pairs")]
    pub marginal: Vec<C64>,
    #[serde(rename = "k")]
    pub multiplicity_k: usize,
    pub m: usize,
    pub diagnostics: SolveDiagnostics,
}

impl OutlierPrediction {
    pub fn with_multiplicity(mut self, k: usize) -> Self {
        self.multiplicity_k = k;
        self
    }

    /// Outliers this θ should produce: `k·m`.
    pub fn expected_count(&self) -> usize {
        self.multiplicity_k * self.m
    }
}

/// All solutions of `G_μ(ξ) = 1/θ` by multi-start Newton over a grid.
/// The returned prediction has multiplicity 1; callers set the real one.
pub fn solve_outlier_set(
    mu: &SpectralMeasure,
    theta: C64,
    opts: &SolveOptions,
) -> Result<OutlierPrediction> {
    if theta.norm() == 0.0 || !theta.re.is_finite() || !theta.im.is_finite() {
        return Err(LabError::invalid("theta must be a nonzero finite number"));
    }
    if !(opts.pitch > 0.0 && opts.tol > 0.0) {
        return Err(LabError::invalid("pitch and tol must be positive"));
    }
    let bx = opts.search_box.unwrap_or_else(|| SearchBox::around(mu, theta));
    let nx = ((bx.re_max - bx.re_min) / opts.pitch).ceil() as usize;
    let ny = ((bx.im_max - bx.im_min) / opts.pitch).ceil() as usize;
    let escape = 3.0 * (bx.re_max - bx.re_min).max(bx.im_max - bx.im_min);
    let dedup = 10.0 * opts.tol;

    let mut diag = SolveDiagnostics::default();
    let mut roots: Vec<C64> = Vec::new();
    for ix in 0..=nx {
        for iy in 0..=ny {
            let seed = C64::new(
                bx.re_min + ix as f64 * opts.pitch,
                bx.im_min + iy as f64 * opts.pitch,
            );
            if !bx.contains(seed) || mu.support_distance(seed) <= opts.delta_min {
                continue;
            }
            diag.seeds += 1;
            match newton_level_set(mu, theta, seed, opts, escape) {
                Some(xi) => {
                    if !roots.iter().any(|r| (r - xi).norm() < dedup) {
                        roots.push(xi);
                    }
                }
                None => diag.failed_seeds += 1,
            }
        }
    }
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let (solutions, marginal): (Vec<C64>, Vec<C64>) = roots
        .into_iter()
        .partition(|&xi| mu.support_distance(xi) > opts.delta_min);
    diag.boundary_roots = solutions
        .iter()
        .copied()
        .filter(|&xi| bx.boundary_distance(xi) < opts.pitch)
        .collect();
    Ok(OutlierPrediction {
        theta,
        m: solutions.len(),
        solutions,
        marginal,
        multiplicity_k: 1,
        diagnostics: diag,
    })
}

/// Newton on `1/G(ξ) − θ`, which is close to linear far from the support and
/// so converges from a much wider basin than Newton on `G(ξ) − 1/θ`.
fn newton_level_set(
    mu: &SpectralMeasure,
    theta: C64,
    seed: C64,
    opts: &SolveOptions,
    escape: f64,
) -> Option<C64> {
    let target = 1.0 / theta;
    let mut xi = seed;
    for _ in 0..opts.max_iter {
        let g = mu.cauchy_transform(xi).ok()?;
        if (g - target).norm() < opts.tol {
            // Polishing steps push the root well below the dedup radius.
            for _ in 0..2 {
                let g = mu.cauchy_transform(xi).ok()?;
                let d = mu.cauchy_derivative(xi).ok()?;
                if d.norm() == 0.0 {
                    break;
                }
                xi -= (g - target) / d;
            }
            let r = mu.cauchy_transform(xi).ok()? - target;
            return (r.norm() < opts.tol).then_some(xi);
        }
        let d = mu.cauchy_derivative(xi).ok()?;
        // F = 1/G − θ, F' = −G'/G²
        let f = 1.0 / g - theta;
        let fp = -d / (g * g);
        if fp.norm() == 0.0 || !fp.re.is_finite() || !fp.im.is_finite() {
            return None;
        }
        xi -= f / fp;
        if xi.norm() > escape {
            return None;
        }
    }
    None
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::cpx::c;
    use proptest::prelude::*;

    fn sample_measures() -> Vec<SpectralMeasure> {
        vec![
            SpectralMeasure::semicircle(1.0).unwrap(),
            SpectralMeasure::new(
                vec![Atom { x: -1.0, w: 0.4 }, Atom { x: 1.0, w: 0.4 }],
                vec![SemicirclePart {
                    center: 0.0,
                    sigma: 1.0,
                    w: 0.2,
                }],
                vec![],
            )
            .unwrap(),
            SpectralMeasure::new(
                vec![Atom { x: -1.0, w: 0.5 }],
                vec![],
                vec![UniformPart {
                    lo: 1.0,
                    hi: 2.0,
                    w: 0.5,
                }],
            )
            .unwrap(),
        ]
    }

    fn off_support() -> impl Strategy<Value = C64> {
        (-6.0..6.0f64, 0.05..4.0f64, any::<bool>())
            .prop_map(|(re, im, up)| c(re, if up { im } else { -im }))
    }

    proptest! {
        #[test]
        fn schwarz_reflection(z in off_support(), which in 0usize..3) {
            let mu = &sample_measures()[which];
            let g = mu.cauchy_transform(z).unwrap();
            let gc = mu.cauchy_transform(z.conj()).unwrap();
            prop_assert!((gc - g.conj()).norm() < 1e-13);
        }

        #[test]
        fn behaves_like_one_over_z_far_away(r in 50.0..1e4f64, t in 0.0..std::f64::consts::TAU, which in 0usize..3) {
            let mu = &sample_measures()[which];
            let z = C64::from_polar(r, t);
            prop_assume!(mu.support_distance(z) > 10.0 * mu.diameter());
            let g = mu.cauchy_transform(z).unwrap();
            prop_assert!((z * g - 1.0).norm() < 2.0 * mu.diameter() / z.norm());
        }

        #[test]
        fn moments_are_derivatives(z in off_support(), k in 1usize..6, which in 0usize..3) {
            let mu = &sample_measures()[which];
            prop_assume!(mu.support_distance(z) > 0.5);
            let h = 1e-4;
            let lower = |t: C64| mu.resolvent_moment(t, k - 1).unwrap();
            let fd = (lower(z + h) - lower(z - h)) / (2.0 * h);
            // d/dz ∫(z−x)^{−k} = −k ∫(z−x)^{−k−1}
            let expect = -(k as f64) * mu.resolvent_moment(z, k).unwrap();
            prop_assert!((fd - expect).norm() < 1e-6 * (1.0 + expect.norm()));
        }

        #[test]
        fn phi_symmetric_and_continuous(z in off_support(), eps_re in -1e-6..1e-6f64, eps_im in -1e-6..1e-6f64, which in 0usize..3) {
            let mu = &sample_measures()[which];
            let w = z + c(eps_re, eps_im);
            prop_assert_eq!(mu.covariance_kernel_phi(z, w).unwrap(), mu.covariance_kernel_phi(w, z).unwrap());
            // A symmetric pair straddling z differs from the diagonal only at second order,
            // so the two branches must agree across the switch.
            let diag = mu.covariance_kernel_phi(z, z).unwrap();
            for h in [c(0.5e-8, 0.0), c(2e-8, 0.0), c(0.0, 3e-8), c(-2e-8, 2e-8)] {
                let pair = mu.covariance_kernel_phi(z - h / 2.0, z + h / 2.0).unwrap();
                prop_assert!((diag - pair).norm() < 1e-8);
            }
        }

        #[test]
        fn atom_kernels_match_direct_sums(z in off_support(), w in off_support()) {
            let atoms = [(-1.0, 0.3), (0.5, 0.2), (2.0, 0.5)];
            let mu = SpectralMeasure::new(
                atoms.iter().map(|&(x, w)| Atom { x, w }).collect(), vec![], vec![]).unwrap();
            let g = |t: C64| atoms.iter().map(|&(x, a)| a / (t - x)).sum::<C64>();
            let phi: C64 = atoms.iter().map(|&(x, a)| a / ((z - x) * (w - x))).sum();
            prop_assert!((mu.cauchy_transform(z).unwrap() - g(z)).norm() < 1e-12);
            prop_assert!((mu.covariance_kernel_phi(z, w).unwrap() - (phi - g(z) * g(w))).norm() < 1e-12);
        }
    }

    #[test]
    fn level_set_stable_under_grid_refinement() {
        for mu in sample_measures() {
            for theta in [c(2.0, 0.0), c(0.0, 2f64.sqrt()), c(-1.5, 0.7)] {
                let coarse = SolveOptions { pitch: 0.2, ..SolveOptions::default() };
                let fine = SolveOptions { pitch: 0.1, ..SolveOptions::default() };
                let a = solve_outlier_set(&mu, theta, &coarse).unwrap();
                let b = solve_outlier_set(&mu, theta, &fine).unwrap();
                assert_eq!(a.m, b.m, "{theta}");
                for (x, y) in a.solutions.iter().zip(&b.solutions) {
                    assert!((x - y).norm() < 10.0 * coarse.tol);
                }
            }
        }
    }
}
