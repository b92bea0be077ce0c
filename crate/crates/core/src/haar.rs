//! Unitary-group moment calculus and the Gaussian limits of Haar bilinear
//! forms: permutation traces, perfect matchings, Weingarten values by Gram
//! inversion, exact Haar moments, moment recursions for complex Gaussians,
//! and two block-inverse identities.

use crate::cpx::C64;
use crate::ensemble::sample_haar_isometry;
use crate::error::{LabError, Result};
use crate::small::Small;
use crate::stats::MomentRow;
use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A permutation of `{0, …, q−1}` stored by images.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Perm(pub Vec<usize>);

impl Perm {
    pub fn identity(q: usize) -> Self {
        Perm((0..q).collect())
    }

    /// From 1-based cycles such as `[[1,3],[2,5,6],[4]]`; omitted points are fixed.
    pub fn from_cycles(q: usize, cycles: &[Vec<usize>]) -> Result<Self> {
        let mut img: Vec<Option<usize>> = vec![None; q];
        let mut seen = vec![false; q];
        for c in cycles {
            if c.is_empty() {
                return Err(LabError::invalid("empty cycle"));
            }
            for (i, &x) in c.iter().enumerate() {
                if x == 0 || x > q || seen[x - 1] {
                    return Err(LabError::invalid(format!("bad or repeated point {x} in cycles")));
                }
                seen[x - 1] = true;
                img[x - 1] = Some(c[(i + 1) % c.len()] - 1);
            }
        }
        Ok(Perm(img.iter().enumerate().map(|(i, v)| v.unwrap_or(i)).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Perm) -> Perm {
        Perm(other.0.iter().map(|&i| self.0[i]).collect())
    }

    pub fn inverse(&self) -> Perm {
        let mut inv = vec![0; self.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Perm(inv)
    }

    /// 0-based cycles, each starting at its smallest point.
    pub fn cycles(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for s in 0..self.len() {
            if seen[s] {
                continue;
            }
            let mut c = vec![s];
            seen[s] = true;
            let mut x = self.0[s];
            while x != s {
                seen[x] = true;
                c.push(x);
                x = self.0[x];
            }
            out.push(c);
        }
        out
    }

    pub fn num_cycles(&self) -> usize {
        self.cycles().len()
    }

    /// Cycle lengths, descending.
    pub fn cycle_type(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.cycles().iter().map(Vec::len).collect();
        t.sort_unstable_by(|a, b| b.cmp(a));
        t
    }
}

/// All permutations of `{0, …, q−1}` in lexicographic order.
pub fn all_perms(q: usize) -> Vec<Perm> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Perm>) {
        if prefix.len() == used.len() {
            out.push(Perm(prefix.clone()));
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; q], &mut out);
    out
}

/// `Tr_σ(M_1, …, M_q) = Π_cycles Tr(M_{c1} M_{c2} ⋯)`, following each cycle
/// `t → σ(t)`.
pub fn trace_sigma(sigma: &Perm, matrices: &[Mat<C64>]) -> Result<C64> {
    if matrices.len() != sigma.len() {
        return Err(LabError::DimensionMismatch {
            expected: sigma.len(),
            got: matrices.len(),
        });
    }
    let n = matrices.first().map_or(0, |m| m.nrows());
    if matrices.iter().any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(LabError::invalid("trace_sigma needs square matrices of one size"));
    }
    let diagonal = matrices.iter().all(is_diagonal);
    let mut total = C64::new(1.0, 0.0);
    for c in sigma.cycles() {
        let tr: C64 = if diagonal {
            (0..n).map(|i| c.iter().map(|&t| matrices[t][(i, i)]).product::<C64>()).sum()
        } else {
            let mut prod = matrices[c[0]].clone();
            for &t in &c[1..] {
                prod = &prod * &matrices[t];
            }
            (0..n).map(|i| prod[(i, i)]).sum()
        };
        total *= tr;
    }
    Ok(total)
}

fn is_diagonal(m: &Mat<C64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == C64::new(0.0, 0.0)))
}

/// All `(n2 − 1)!!` perfect matchings of `{1, …, n2}` as 1-based pairs.
pub fn perfect_matchings(n2: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    if n2 % 2 == 1 {
        return Err(LabError::invalid(format!("{n2} points cannot be perfectly matched")));
    }
    if n2 > 12 {
        return Err(LabError::invalid("at most 12 points"));
    }
    fn rec(rest: &[usize], acc: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        let first = rest[0];
        for k in 1..rest.len() {
            acc.push((first, rest[k]));
            let remaining: Vec<usize> =
                rest[1..].iter().copied().filter(|&x| x != rest[k]).collect();
            rec(&remaining, acc, out);
            acc.pop();
        }
    }
    let mut out = Vec::new();
    let pts: Vec<usize> = (1..=n2).collect();
    rec(&pts, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Weingarten values on `S_q` at dimension `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeingartenTable {
    pub q: usize,
    pub n: usize,
    pub perms: Vec<Perm>,
    pub values: Vec<f64>,
    /// Largest `|Σ_τ Wg(στ⁻¹) G(τ, π) − δ_{σπ}|`.
    pub gram_residual: f64,
}

impl WeingartenTable {
    pub fn value(&self, sigma: &Perm) -> f64 {
        let i = self.perms.iter().position(|p| p == sigma).expect("permutation of the right size");
        self.values[i]
    }

    /// `(cycle type, value)` per conjugacy class, with the spread inside the class.
    pub fn by_class(&self) -> Vec<(Vec<usize>, f64, f64)> {
        let mut classes: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        for (p, v) in self.perms.iter().zip(&self.values) {
            let t = p.cycle_type();
            match classes.iter_mut().find(|(c, _)| *c == t) {
                Some((_, vs)) => vs.push(*v),
                None => classes.push((t, vec![*v])),
            }
        }
        classes
            .into_iter()
            .map(|(t, vs)| {
                let lo = vs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (t, vs[0], hi - lo)
            })
            .collect()
    }
}

/// Solves the Gram system `G(σ, τ) = n^{#cycles(στ⁻¹)}`; `Wg(σ) = (G⁻¹)(σ, id)`.
pub fn weingarten(q: usize, n: usize) -> Result<WeingartenTable> {
    if q == 0 || q > 4 {
        return Err(LabError::invalid("q must be in 1..=4"));
    }
    if n < q {
        return Err(LabError::SingularGram { q, n });
    }
    let perms = all_perms(q);
    let m = perms.len();
    let nf = n as f64;
    let gram = Mat::<f64>::from_fn(m, m, |i, j| {
        nf.powi(perms[i].compose(&perms[j].inverse()).num_cycles() as i32)
    });
    let inv = gram.partial_piv_lu().inverse();
    let id = perms.iter().position(|p| *p == Perm::identity(q)).expect("identity present");
    let values: Vec<f64> = (0..m).map(|i| inv[(i, id)]).collect();
    let mut gram_residual: f64 = 0.0;
    for s in 0..m {
        for p in 0..m {
            let mut acc = 0.0;
            for t in 0..m {
                let st = perms[s].compose(&perms[t].inverse());
                let k = perms.iter().position(|x| *x == st).expect("closed under products");
                acc += values[k] * gram[(t, p)];
            }
            let want = if s == p { 1.0 } else { 0.0 };
            gram_residual = gram_residual.max((acc - want).abs());
        }
    }
    Ok(WeingartenTable {
        q,
        n,
        perms,
        values,
        gram_residual,
    })
}

/// `E[Π_t √N Tr(U* T_t U A_t)]` for Haar `U`, exactly:
/// `N^{q/2} Σ_{σ,τ} Wg(στ) Tr_σ(T) Tr_τ(A)`.
pub fn haar_moment_exact(ts: &[Mat<C64>], as_: &[Mat<C64>]) -> Result<C64> {
    let q = ts.len();
    if as_.len() != q {
        return Err(LabError::DimensionMismatch {
            expected: q,
            got: as_.len(),
        });
    }
    let n = ts.first().map_or(0, |m| m.nrows());
    if ts.iter().chain(as_).any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(LabError::invalid("all matrices must be N×N"));
    }
    let wg = weingarten(q, n)?;
    let tr_t: Vec<C64> = wg.perms.iter().map(|s| trace_sigma(s, ts)).collect::<Result<_>>()?;
    let tr_a: Vec<C64> = wg.perms.iter().map(|t| trace_sigma(t, as_)).collect::<Result<_>>()?;
    let mut acc = C64::new(0.0, 0.0);
    for (i, s) in wg.perms.iter().enumerate() {
        for (j, t) in wg.perms.iter().enumerate() {
            acc += wg.value(&s.compose(t)) * tr_t[i] * tr_a[j];
        }
    }
    Ok(acc * (n as f64).powf(q as f64 / 2.0))
}

/// Monte Carlo draws of `Π_t √N Tr(U* T_t U A_t)` for diagonal `T_t` and
/// `A_t` supported on the first `k` coordinates (given as k×k blocks). Only
/// the first `k` Haar columns are needed.
pub fn haar_moment_samples<R: Rng + ?Sized>(
    t_diag: &[Vec<f64>],
    a_blocks: &[Small],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<C64>> {
    let q = t_diag.len();
    if a_blocks.len() != q || q == 0 {
        return Err(LabError::DimensionMismatch {
            expected: q,
            got: a_blocks.len(),
        });
    }
    let n = t_diag[0].len();
    let k = a_blocks[0].rows();
    let sq = (n as f64).sqrt();
    Ok((0..trials)
        .map(|_| {
            let u = sample_haar_isometry(n, k, rng);
            t_diag
                .iter()
                .zip(a_blocks)
                .map(|(t, a)| {
                    let b = Small::from_fn(k, k, |i, j| {
                        (0..n).map(|r| u[(r, i)].conj() * t[r] * u[(r, j)]).sum()
                    });
                    b.matmul(a).trace() * sq
                })
                .product()
        })
        .collect())
}

/// Per-trial `√N ⟨u_i, T_m u_j⟩` for the first `p` Haar columns; entry
/// `m·p² + i·p + j` of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSamples {
    pub p: usize,
    pub matrices: usize,
    pub rows: Vec<Vec<C64>>,
}

impl BilinearSamples {
    pub fn series(&self, m: usize, i: usize, j: usize) -> Vec<C64> {
        let at = m * self.p * self.p + i * self.p + j;
        self.rows.iter().map(|r| r[at]).collect()
    }
}

pub fn bilinear_fluctuation_samples<R: Rng + ?Sized>(
    t_diag: &[Vec<f64>],
    p: usize,
    trials: usize,
    rng: &mut R,
) -> Result<BilinearSamples> {
    let n = t_diag.first().map_or(0, Vec::len);
    if n < p || t_diag.iter().any(|t| t.len() != n) {
        return Err(LabError::invalid("diagonals must share one length N ≥ p"));
    }
    let sq = (n as f64).sqrt();
    let rows = (0..trials)
        .map(|_| {
            let u = sample_haar_isometry(n, p, rng);
            let mut row = Vec::with_capacity(t_diag.len() * p * p);
            for t in t_diag {
                for i in 0..p {
                    for j in 0..p {
                        let v: C64 = (0..n).map(|r| u[(r, i)].conj() * t[r] * u[(r, j)]).sum();
                        row.push(v * sq);
                    }
                }
            }
            row
        })
        .collect();
    Ok(BilinearSamples {
        p,
        matrices: t_diag.len(),
        rows,
    })
}

fn rows_for(name: &str, values: &[C64], target: C64) -> Result<[MomentRow; 2]> {
    let re: Vec<f64> = values.iter().map(|z| z.re).collect();
    let im: Vec<f64> = values.iter().map(|z| z.im).collect();
    Ok([
        MomentRow::from_samples(format!("{name} (re)"), &re, target.re)?,
        MomentRow::from_samples(format!("{name} (im)"), &im, target.im)?,
    ])
}

/// Moment identities of a centred complex Gaussian `Z` with `E|Z|² = σ²` and
/// `E Z² = τ²`. Each row averages a per-sample quantity whose mean is the
/// stated target, so every row has a plain Monte Carlo standard error.
pub fn gaussian_moment_check(samples: &[C64], sigma2: f64, tau2: C64) -> Result<Vec<MomentRow>> {
    if samples.len() < 1000 {
        return Err(LabError::InsufficientData(format!(
            "{} samples, need 1000",
            samples.len()
        )));
    }
    let zero = C64::new(0.0, 0.0);
    let mut rows = Vec::new();
    rows.extend(rows_for("E Z", samples, zero)?);
    let sq: Vec<C64> = samples.iter().map(|z| z * z).collect();
    rows.extend(rows_for("E Z^2", &sq, tau2)?);
    let abs2: Vec<C64> = samples.iter().map(|z| C64::new(z.norm_sqr(), 0.0)).collect();
    rows.extend(rows_for("E |Z|^2", &abs2, C64::new(sigma2, 0.0))?);
    let z4: Vec<C64> = samples.iter().map(|z| z.powu(4)).collect();
    rows.extend(rows_for("E Z^4", &z4, 3.0 * tau2 * tau2)?);
    let pw = |z: &C64, a: u32, b: u32| z.powu(a) * z.conj().powu(b);
    for (p, q) in [(0u32, 0u32), (1, 0), (0, 1), (1, 1)] {
        let diff: Vec<C64> = samples
            .iter()
            .map(|z| {
                pw(z, p + 2, q + 2)
                    - sigma2 * (q + 2) as f64 * pw(z, p + 1, q + 1)
                    - tau2 * (p + 1) as f64 * pw(z, p, q + 2)
            })
            .collect();
        rows.extend(rows_for(&format!("recursion (p,q)=({p},{q})"), &diff, zero)?);
    }
    Ok(rows)
}

/// Second moments of a centred complex Gaussian pair `(X, Y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMoments {
    pub xx: C64,
    pub xxc: f64,
    pub yy: C64,
    pub yyc: f64,
    pub xy: C64,
    /// `E[X conj Y]`.
    pub xyc: C64,
}

/// Second- and fourth-order Wick identities for a pair.
pub fn gaussian_pair_check(x: &[C64], y: &[C64], m: &PairMoments) -> Result<Vec<MomentRow>> {
    if x.len() != y.len() {
        return Err(LabError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 1000 {
        return Err(LabError::InsufficientData(format!("{} pairs, need 1000", x.len())));
    }
    let mut rows = Vec::new();
    let prod = |f: &dyn Fn(C64, C64) -> C64| -> Vec<C64> {
        x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect()
    };
    rows.extend(rows_for("E XY", &prod(&|a, b| a * b), m.xy)?);
    rows.extend(rows_for("E X conj Y", &prod(&|a, b| a * b.conj()), m.xyc)?);
    // E[X Y X̄ Ȳ] = |E XY|² + E|X|² E|Y|² + |E X Ȳ|²
    let mixed = m.xy.norm_sqr() + m.xxc * m.yyc + m.xyc.norm_sqr();
    rows.extend(rows_for(
        "E |XY|^2",
        &prod(&|a, b| C64::new((a * b).norm_sqr(), 0.0)),
        C64::new(mixed, 0.0),
    )?);
    // E[X² Ȳ²] = 2 (E X Ȳ)²
    rows.extend(rows_for(
        "E X^2 conj(Y)^2",
        &prod(&|a, b| a * a * (b * b).conj()),
        2.0 * m.xyc * m.xyc,
    )?);
    // E[X² Y²] = E X² E Y² + 2 (E XY)²
    rows.extend(rows_for(
        "E X^2 Y^2",
        &prod(&|a, b| a * a * b * b),
        m.xx * m.yy + 2.0 * m.xy * m.xy,
    )?);
    Ok(rows)
}

fn max_abs(m: &Mat<C64>) -> f64 {
    let mut best: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            best = best.max(m[(i, j)].norm());
        }
    }
    best
}

fn checked_inverse(m: &Mat<C64>, what: &str) -> Result<Mat<C64>> {
    let s = m.singular_values().map_err(|e| LabError::Solver(format!("{e:?}")))?;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-14 * smax) {
        return Err(LabError::SingularInput(format!("{what} is singular")));
    }
    Ok(m.partial_piv_lu().inverse())
}

/// Residual of `(A+λI)⁻¹ = Σ_{k=1}^p (−λ)^{k−1} A^{−k} + (−λ)^p A^{−p}(A+λI)⁻¹`,
/// relative to the size of `(A+λI)⁻¹`.
pub fn resolvent_expansion_check(a: &Mat<C64>, lambda: C64, p: usize) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n || p == 0 {
        return Err(LabError::invalid("square A and p ≥ 1 required"));
    }
    let a_inv = checked_inverse(a, "A")?;
    let shifted = Mat::<C64>::from_fn(n, n, |i, j| if i == j { a[(i, j)] + lambda } else { a[(i, j)] });
    let s_inv = checked_inverse(&shifted, "A + λI")?;
    let mut sum = Mat::<C64>::zeros(n, n);
    let mut power = Mat::<C64>::identity(n, n);
    let mut coeff = C64::new(1.0, 0.0);
    for _ in 0..p {
        power = &power * &a_inv;
        sum += Mat::<C64>::from_fn(n, n, |i, j| power[(i, j)] * coeff);
        coeff *= -lambda;
    }
    let tail = &power * &s_inv;
    let rhs = sum + Mat::<C64>::from_fn(n, n, |i, j| tail[(i, j)] * coeff);
    Ok(max_abs(&(s_inv.clone() - rhs)) / max_abs(&s_inv).max(1.0))
}

/// Residual of the block inverse built from the Schur complement
/// `S = A − B D⁻¹ C` against a direct inverse, relative to its size.
pub fn schur_inverse_check(a: &Mat<C64>, b: &Mat<C64>, c: &Mat<C64>, d: &Mat<C64>) -> Result<f64> {
    let (na, nd) = (a.nrows(), d.nrows());
    if a.ncols() != na || d.ncols() != nd || b.nrows() != na || b.ncols() != nd || c.nrows() != nd || c.ncols() != na {
        return Err(LabError::invalid("inconsistent block shapes"));
    }
    let d_inv = checked_inverse(d, "D")?;
    let s = a - b * &d_inv * c;
    let s_inv = checked_inverse(&s, "A − B D⁻¹ C")?;
    let top_right = -(&s_inv * b * &d_inv);
    let bottom_left = -(&d_inv * c * &s_inv);
    let bottom_right = &d_inv + &d_inv * c * &s_inv * b * &d_inv;
    let n = na + nd;
    let full = Mat::<C64>::from_fn(n, n, |i, j| match (i < na, j < na) {
        (true, true) => a[(i, j)],
        (true, false) => b[(i, j - na)],
        (false, true) => c[(i - na, j)],
        (false, false) => d[(i - na, j - na)],
    });
    let direct = checked_inverse(&full, "block matrix")?;
    let built = Mat::<C64>::from_fn(n, n, |i, j| match (i < na, j < na) {
        (true, true) => s_inv[(i, j)],
        (true, false) => top_right[(i, j - na)],
        (false, true) => bottom_left[(i - na, j)],
        (false, false) => bottom_right[(i - na, j - na)],
    });
    Ok(max_abs(&(direct.clone() - built)) / max_abs(&direct).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpx::c;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn diag(v: &[f64]) -> Mat<C64> {
        Mat::from_fn(v.len(), v.len(), |i, j| C64::new(if i == j { v[i] } else { 0.0 }, 0.0))
    }

    #[test]
    fn trace_sigma_examples() {
        let id2: Vec<Mat<C64>> = (0..6).map(|_| Mat::identity(2, 2)).collect();
        let s = Perm::from_cycles(6, &[vec![1, 3], vec![2, 5, 6], vec![4]]).unwrap();
        assert_eq!(trace_sigma(&s, &id2).unwrap(), c(8.0, 0.0));
        let m = vec![diag(&[1.0, -1.0]), diag(&[1.0, -1.0])];
        assert_eq!(trace_sigma(&Perm::identity(2), &m).unwrap(), c(0.0, 0.0));
        let swap = Perm::from_cycles(2, &[vec![1, 2]]).unwrap();
        assert_eq!(trace_sigma(&swap, &m).unwrap(), c(2.0, 0.0));
        assert!(Perm::from_cycles(3, &[vec![1, 2], vec![2, 3]]).is_err());
        assert!(Perm::from_cycles(3, &[vec![1, 4]]).is_err());
    }

    #[test]
    fn trace_sigma_follows_cycle_order() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let ms: Vec<Mat<C64>> = (0..3)
            .map(|_| Mat::from_fn(3, 3, |_, _| C64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))))
            .collect();
        let s = Perm::from_cycles(3, &[vec![1, 3, 2]]).unwrap();
        let want = (&ms[0] * &ms[2] * &ms[1]).diagonal().column_vector().iter().sum::<C64>();
        assert!((trace_sigma(&s, &ms).unwrap() - want).norm() < 1e-12);
    }

    #[test]
    fn matchings() {
        assert_eq!(perfect_matchings(2).unwrap(), vec![vec![(1, 2)]]);
        assert_eq!(
            perfect_matchings(4).unwrap(),
            vec![vec![(1, 2), (3, 4)], vec![(1, 3), (2, 4)], vec![(1, 4), (2, 3)]]
        );
        let mut double_factorial = 1;
        for n2 in (2..=12).step_by(2) {
            double_factorial *= n2 - 1;
            assert_eq!(perfect_matchings(n2).unwrap().len(), double_factorial);
        }
        assert!(perfect_matchings(5).is_err());
    }

    #[test]
    fn weingarten_examples() {
        let w1 = weingarten(1, 7).unwrap();
        assert!((w1.values[0] - 1.0 / 7.0).abs() < 1e-15);
        let w2 = weingarten(2, 10).unwrap();
        assert!((w2.value(&Perm::identity(2)) - 1.0 / 99.0).abs() < 1e-15);
        assert!((w2.value(&Perm(vec![1, 0])) + 1.0 / 990.0).abs() < 1e-15);
        let w3 = weingarten(3, 5).unwrap();
        for (_, _, spread) in w3.by_class() {
            assert!(spread < 1e-12);
        }
        assert!(w3.gram_residual < 1e-10);
        assert!(matches!(weingarten(3, 2), Err(LabError::SingularGram { .. })));
    }

    fn closed_form_q4(t: &[usize], n: f64) -> f64 {
        let den = n * n * (n * n - 1.0) * (n * n - 4.0) * (n * n - 9.0);
        match t {
            [1, 1, 1, 1] => (n.powi(4) - 8.0 * n * n + 6.0) / den,
            [2, 1, 1] => -n / (n * n * (n * n - 1.0) * (n * n - 9.0)),
            [2, 2] => (n * n + 6.0) / den,
            [3, 1] => (2.0 * n * n - 3.0) / den,
            [4] => -5.0 * n / den,
            _ => unreachable!(),
        }
    }

    #[test]
    fn weingarten_matches_closed_forms_at_q4() {
        for n in [4usize, 5, 8, 16, 64] {
            for (t, v, _) in weingarten(4, n).unwrap().by_class() {
                let want = closed_form_q4(&t, n as f64);
                assert!((v - want).abs() <= 1e-10 * want.abs(), "{t:?} at {n}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn weingarten_scaling() {
        // N = 8 is still pre-asymptotic for the [2,2] and [4] classes.
        let ns = [16usize, 32, 64];
        let tables: Vec<_> = ns.iter().map(|&n| weingarten(4, n).unwrap()).collect();
        for (ci, (t, _, _)) in tables[0].by_class().iter().enumerate() {
            let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
            let y: Vec<f64> = tables.iter().map(|w| w.by_class()[ci].1.abs().ln()).collect();
            let (slope, _, _) = crate::stats::line_fit(&x, &y, None).unwrap();
            let leading = -(4.0 + (4.0 - t.len() as f64));
            assert!((slope - leading).abs() < 0.1, "{t:?}: {slope} vs {leading}");
        }
    }

    #[test]
    fn exact_moment_matches_monte_carlo_with_distinct_matrices() {
        // Non-commuting A blocks on a 2-dimensional corner distinguish the
        // orientation of the permutation sums.
        let n = 4;
        let t_diag = vec![vec![1.0, -1.0, 0.5, -0.5], vec![2.0, 0.0, -1.0, -1.0], vec![0.0, 1.0, -2.0, 1.0]];
        let a_blocks = vec![
            Small::from_fn(2, 2, |i, j| c((i + 2 * j) as f64, 0.0)),
            Small::from_fn(2, 2, |i, j| c(if i == j { 1.0 } else { 0.0 }, (i as f64) - (j as f64))),
            Small::from_fn(2, 2, |i, j| c(1.0 - (i * j) as f64, 0.5)),
        ];
        let pad = |a: &Small| Mat::<C64>::from_fn(n, n, |i, j| if i < 2 && j < 2 { a[(i, j)] } else { c(0.0, 0.0) });
        let ts: Vec<Mat<C64>> = t_diag.iter().map(|t| diag(t)).collect();
        let as_: Vec<Mat<C64>> = a_blocks.iter().map(pad).collect();
        let exact = haar_moment_exact(&ts, &as_).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let xs = haar_moment_samples(&t_diag, &a_blocks, 200_000, &mut r).unwrap();
        for (part, want) in [(0, exact.re), (1, exact.im)] {
            let v: Vec<f64> = xs.iter().map(|z| if part == 0 { z.re } else { z.im }).collect();
            let row = MomentRow::from_samples("moment", &v, want).unwrap();
            assert!(row.within(4.0), "{row:?}");
        }
    }

    #[test]
    fn exact_moment_examples() {
        let n = 10;
        let mut t = vec![0.0; n];
        t[0] = 1.0;
        t[1] = -1.0;
        let mut e11 = vec![0.0; n];
        e11[0] = 1.0;
        let q1 = haar_moment_exact(&[diag(&t)], &[diag(&e11)]).unwrap();
        assert!(q1.norm() < 1e-14);
        // q = 2 against the closed form of E|u_1* T u_1|² at N = 10.
        let exact = haar_moment_exact(&[diag(&t), diag(&t)], &[diag(&e11), diag(&e11)]).unwrap();
        let wg_id = 1.0 / 99.0;
        let wg_tr = -1.0 / 990.0;
        // Tr_σ(T): id → (Tr T)² = 0, swap → Tr T² = 2. Tr_τ(A) = 1 for both.
        let want = 10.0 * (2.0 * wg_tr + 2.0 * wg_id);
        assert!((exact.re - want).abs() < 1e-14 && exact.im.abs() < 1e-14);
    }

    fn pattern(n: usize, p: &[f64]) -> Vec<f64> {
        (0..n).map(|i| p[i % p.len()]).collect()
    }

    fn unit(n: usize) -> Vec<f64> {
        let mut e = vec![0.0; n];
        e[0] = 1.0;
        e
    }

    #[test]
    fn odd_traceless_moment_decays() {
        let ns = [12usize, 24, 48, 78];
        let vals: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let t = diag(&pattern(n, &[2.0, -1.0, -1.0]));
                let a = diag(&unit(n));
                haar_moment_exact(&[t.clone(), t.clone(), t], &[a.clone(), a.clone(), a]).unwrap().norm()
            })
            .collect();
        // √N·|value| settles to a constant: bounded, with shrinking increments.
        let scaled: Vec<f64> = ns.iter().zip(&vals).map(|(&n, v)| v * (n as f64).sqrt()).collect();
        assert!(scaled.iter().all(|&s| s <= scaled[0] * 1.5), "{scaled:?}");
        let steps: Vec<f64> = scaled.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(steps.windows(2).all(|w| w[1] < w[0]), "{scaled:?}");
        assert!(vals[3] < vals[0] / 2.0);
    }

    #[test]
    fn fourth_moment_approaches_matching_sum() {
        let n = 200;
        let t = diag(&pattern(n, &[1.0, -1.0]));
        let a = diag(&unit(n));
        let v = haar_moment_exact(&vec![t; 4], &vec![a; 4]).unwrap();
        // Three matchings, each Tr_σ(A) = 1, τ = 1.
        assert!((v.re - 3.0).abs() < 0.15 && v.im.abs() < 1e-12, "{v}");
    }

    #[test]
    fn gaussian_checks_on_synthetic_data() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let circ: Vec<C64> = (0..40_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut r);
                let b: f64 = StandardNormal.sample(&mut r);
                C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect();
        for row in gaussian_moment_check(&circ, 1.0, c(0.0, 0.0)).unwrap() {
            assert!(row.within(4.0), "{row:?}");
        }
        let abs4: Vec<f64> = circ.iter().map(|z| z.norm_sqr().powi(2)).collect();
        assert!(MomentRow::from_samples("E|Z|^4", &abs4, 2.0).unwrap().within(4.0));
        let real: Vec<C64> = (0..40_000).map(|_| C64::new(StandardNormal.sample(&mut r), 0.0)).collect();
        for row in gaussian_moment_check(&real, 1.0, c(1.0, 0.0)).unwrap() {
            assert!(row.within(4.0), "{row:?}");
        }
        // Wrong τ² is detected.
        let bad = gaussian_moment_check(&real, 1.0, c(0.0, 0.0)).unwrap();
        assert!(bad.iter().any(|row| !row.within(4.0)));
        assert!(gaussian_moment_check(&real[..10], 1.0, c(1.0, 0.0)).is_err());
    }

    #[test]
    fn bilinear_forms_are_gaussian_with_predicted_moments() {
        let n = 60;
        let t: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let s = bilinear_fluctuation_samples(&[t], 2, 6000, &mut r).unwrap();
        let g12 = s.series(0, 0, 1);
        let g21 = s.series(0, 1, 0);
        let m = PairMoments {
            xx: c(0.0, 0.0),
            xxc: 1.0,
            yy: c(0.0, 0.0),
            yyc: 1.0,
            xy: c(1.0, 0.0),
            xyc: c(0.0, 0.0),
        };
        // Finite-N corrections are O(1/N); 5 standard errors.
        for row in gaussian_pair_check(&g12, &g21, &m).unwrap() {
            assert!(row.within(5.0), "{row:?}");
        }
        for row in gaussian_moment_check(&g12, 1.0, c(0.0, 0.0)).unwrap() {
            assert!(row.within(5.0), "{row:?}");
        }
    }

    #[test]
    fn identity_checks() {
        let id = Mat::<C64>::identity(3, 3);
        assert!(resolvent_expansion_check(&id, c(1.0, 0.0), 3).unwrap() < 1e-15);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut rand_mat = |n: usize, m: usize| {
            Mat::<C64>::from_fn(n, m, |_, _| C64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)))
        };
        let a = rand_mat(5, 5) + Mat::<C64>::from_fn(5, 5, |i, j| c(if i == j { 6.0 } else { 0.0 }, 0.0));
        for p in 1..=5 {
            assert!(resolvent_expansion_check(&a, c(0.3, 0.0), p).unwrap() < 1e-10);
        }
        let (a, b, cc, d) = (rand_mat(2, 2), rand_mat(2, 4), rand_mat(4, 2), rand_mat(4, 4));
        assert!(schur_inverse_check(&a, &b, &cc, &d).unwrap() < 1e-10);
        let z24 = Mat::<C64>::zeros(2, 4);
        let z42 = Mat::<C64>::zeros(4, 2);
        assert!(schur_inverse_check(&a, &z24, &z42, &d).unwrap() < 1e-12);
        let s = |x: f64, y: f64| Mat::<C64>::from_fn(1, 1, |_, _| c(x, y));
        assert!(schur_inverse_check(&s(2.0, 0.0), &s(1.0, 0.0), &s(3.0, 1.0), &s(4.0, 0.0)).unwrap() < 1e-15);
        assert!(matches!(
            resolvent_expansion_check(&Mat::<C64>::zeros(2, 2), c(1.0, 0.0), 1),
            Err(LabError::SingularInput(_))
        ));
    }

    fn perm_strategy(q: usize) -> impl proptest::strategy::Strategy<Value = Perm> {
        proptest::sample::select(all_perms(q))
    }

    proptest::proptest! {
        #[test]
        fn cycles_cover_every_point_once(s in perm_strategy(5), t in perm_strategy(5)) {
            for p in [&s, &t, &s.compose(&t)] {
                let mut seen: Vec<usize> = p.cycles().into_iter().flatten().collect();
                seen.sort_unstable();
                proptest::prop_assert_eq!(seen, (0..5).collect::<Vec<_>>());
            }
            proptest::prop_assert_eq!(s.compose(&s.inverse()), Perm::identity(5));
            proptest::prop_assert_eq!(s.compose(&t).inverse(), t.inverse().compose(&s.inverse()));
        }

        #[test]
        fn weingarten_solves_the_gram_system(q in 1usize..4, n in 4usize..40) {
            let t = weingarten(q, n).unwrap();
            proptest::prop_assert!(t.gram_residual < 1e-10);
        }
    }
}
