//! The projected resolvent `P(z) = U*(z − H)⁻¹U` (d×d), its z-derivative and
//! the number of its poles below a real point.
//!
//! Two evaluation forms:
//! - spectral: `P_kl = Σ_a conj(w_ak) w_al / (z − λ_a)` with `w_a` the rows of
//!   `V*U`, O(N d²) per point after one eigendecomposition (free for diagonal H);
//! - block continued fraction on a block-tridiagonal H, O(N b²) per point.

use crate::cpx::C64;
use crate::ensemble::{BlockTridiagonal, EnsembleSample, Structure};
use crate::error::{LabError, Result};
use crate::jordan::{EmbedMode, EmbeddedPerturbation};
use crate::small::Small;
use faer::Side;

/// Points closer than this to a pole are rejected.
pub const POLE_GUARD: f64 = 1e-10;

#[derive(Debug, Clone)]
enum Form {
    Spectral {
        /// Pole locations, one per weighted row.
        lambdas: Vec<f64>,
        /// Row-major `lambdas.len() × d`.
        w: Vec<C64>,
        sorted: Vec<f64>,
    },
    Tridiagonal(BlockTridiagonal),
}

#[derive(Debug, Clone)]
pub struct ProjectedResolvent {
    d: usize,
    form: Form,
}

impl ProjectedResolvent {
    pub fn new(sample: &EnsembleSample, ep: &EmbeddedPerturbation) -> Result<Self> {
        let n = sample.n();
        if ep.n != n {
            return Err(LabError::DimensionMismatch {
                expected: n,
                got: ep.n,
            });
        }
        let d = ep.dim();
        match sample.structure() {
            Structure::Diagonal(diag) => {
                let rows: Vec<(f64, Vec<C64>)> = match &ep.u {
                    None => (0..d)
                        .map(|k| {
                            let mut row = vec![C64::new(0.0, 0.0); d];
                            row[k] = C64::new(1.0, 0.0);
                            (diag[k], row)
                        })
                        .collect(),
                    Some(u) => (0..n)
                        .map(|a| (diag[a], (0..d).map(|k| u[(a, k)]).collect()))
                        .collect(),
                };
                Ok(Self::spectral(d, rows))
            }
            Structure::Dense(_) => {
                let e = sample.eigen()?;
                let u = ep.isometry();
                let w = e.vectors.adjoint() * &u;
                let rows = (0..n)
                    .map(|a| (e.values[a], (0..d).map(|k| w[(a, k)]).collect()))
                    .collect();
                Ok(Self::spectral(d, rows))
            }
            Structure::BlockTridiagonal(bt) => {
                if ep.mode != EmbedMode::Canonical {
                    return Err(LabError::invalid(
                        "block-tridiagonal samples need the canonical embedding",
                    ));
                }
                if d > bt.head_dim() {
                    return Err(LabError::DimensionMismatch {
                        expected: bt.head_dim(),
                        got: d,
                    });
                }
                Ok(ProjectedResolvent {
                    d,
                    form: Form::Tridiagonal(bt.clone()),
                })
            }
        }
    }

    fn spectral(d: usize, rows: Vec<(f64, Vec<C64>)>) -> Self {
        let rows: Vec<_> = rows
            .into_iter()
            .filter(|(_, r)| r.iter().any(|x| x.norm_sqr() > 0.0))
            .collect();
        let lambdas: Vec<f64> = rows.iter().map(|(l, _)| *l).collect();
        let w = rows.into_iter().flat_map(|(_, r)| r).collect();
        let mut sorted = lambdas.clone();
        sorted.sort_by(f64::total_cmp);
        ProjectedResolvent {
            d,
            form: Form::Spectral { lambdas, w, sorted },
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn eval(&self, z: C64) -> Result<Small> {
        Ok(self.eval_impl(z, false)?.0)
    }

    /// `(P(z), P'(z))`.
    pub fn eval_with_derivative(&self, z: C64) -> Result<(Small, Small)> {
        let (g, dg) = self.eval_impl(z, true)?;
        Ok((g, dg.expect("derivative requested")))
    }

    fn eval_impl(&self, z: C64, want_derivative: bool) -> Result<(Small, Option<Small>)> {
        let d = self.d;
        match &self.form {
            Form::Spectral { lambdas, w, .. } => {
                let mut g = Small::zeros(d, d);
                let mut dg = want_derivative.then(|| Small::zeros(d, d));
                for (a, &lam) in lambdas.iter().enumerate() {
                    let gap = z - lam;
                    if gap.norm() < POLE_GUARD {
                        return Err(LabError::domain(z));
                    }
                    let c = gap.inv();
                    let row = &w[a * d..a * d + d];
                    let gs = g.as_mut_slice();
                    for k in 0..d {
                        let t = c * row[k].conj();
                        for l in 0..d {
                            gs[k * d + l] += t * row[l];
                        }
                    }
                    if let Some(dg) = dg.as_mut() {
                        let c2 = -c * c;
                        let ds = dg.as_mut_slice();
                        for k in 0..d {
                            let t = c2 * row[k].conj();
                            for l in 0..d {
                                ds[k * d + l] += t * row[l];
                            }
                        }
                    }
                }
                Ok((g, dg))
            }
            Form::Tridiagonal(bt) => continued_fraction(bt, z, d, want_derivative),
        }
    }

    /// Number of poles (counted with multiplicity) strictly below `x`.
    pub fn count_below(&self, x: f64) -> Result<usize> {
        match &self.form {
            Form::Spectral { sorted, .. } => Ok(sorted.partition_point(|&l| l < x)),
            Form::Tridiagonal(bt) => sturm_count(bt, x),
        }
    }
}

/// Bottom-up elimination: `K_m = z − D_m`, `K_k = z − D_k − C_k* K_{k+1}⁻¹ C_k`,
/// then `P` is the leading d×d block of `K_0⁻¹`.
fn continued_fraction(
    bt: &BlockTridiagonal,
    z: C64,
    d: usize,
    want_derivative: bool,
) -> Result<(Small, Option<Small>)> {
    let m = bt.diag.len();
    let shifted = |k: usize| {
        let b = bt.diag[k].rows();
        Small::identity(b).scale(z).sub(&bt.diag[k])
    };
    let mut k_mat = shifted(m - 1);
    let mut k_der = want_derivative.then(|| Small::identity(bt.diag[m - 1].rows()));
    for k in (0..m - 1).rev() {
        let inv = k_mat.inverse().map_err(|_| LabError::domain(z))?;
        let c = &bt.coupling[k];
        let x = inv.matmul(c);
        let y = c.adjoint().matmul(&inv);
        let next = shifted(k).sub(&c.adjoint().matmul(&x));
        if let Some(kd) = k_der.as_mut() {
            let b = bt.diag[k].rows();
            *kd = Small::identity(b).add(&y.matmul(kd).matmul(&x));
        }
        k_mat = next;
    }
    let g_full = k_mat.inverse().map_err(|_| LabError::domain(z))?;
    let lead: Vec<usize> = (0..d).collect();
    let g = g_full.select(&lead, &lead);
    let dg = k_der.map(|kd| {
        g_full
            .matmul(&kd)
            .matmul(&g_full)
            .scale(C64::new(-1.0, 0.0))
            .select(&lead, &lead)
    });
    Ok((g, dg))
}

/// Inertia count: `x − H` is congruent to `diag(K_0, …, K_m)` with the
/// Hermitian Schur complements above, so `#{λ < x}` is the total number of
/// positive eigenvalues of the `K_k`.
fn sturm_count(bt: &BlockTridiagonal, x: f64) -> Result<usize> {
    let z = C64::new(x, 0.0);
    let m = bt.diag.len();
    let shifted = |k: usize| {
        let b = bt.diag[k].rows();
        Small::identity(b).scale(z).sub(&bt.diag[k])
    };
    let positives = |k: &Small| -> Result<usize> {
        let vals = k
            .to_faer()
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| LabError::Solver(format!("{e:?}")))?;
        Ok(vals.iter().filter(|&&v| v > 0.0).count())
    };
    let mut k_mat = shifted(m - 1);
    let mut count = positives(&k_mat)?;
    for k in (0..m - 1).rev() {
        let inv = k_mat.inverse().map_err(|_| LabError::domain(z))?;
        let c = &bt.coupling[k];
        let mut next = shifted(k).sub(&c.adjoint().matmul(&inv.matmul(c)));
        // Symmetrize away rounding so the eigen solve sees a Hermitian block.
        let b = next.rows();
        for i in 0..b {
            for j in 0..i {
                let v = (next[(i, j)] + next[(j, i)].conj()) * 0.5;
                next[(i, j)] = v;
                next[(j, i)] = v.conj();
            }
            next[(i, i)] = C64::new(next[(i, i)].re, 0.0);
        }
        count += positives(&next)?;
        k_mat = next;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpx::c;
    use crate::ensemble::{sample_uci, sample_wigner, sample_wigner_compressed, DMode, WignerParams};
    use crate::jordan::{embed, realize, JordanSpec, QMode};
    use crate::measure::SpectralMeasure;
    use faer::linalg::solvers::DenseSolveCore;
    use faer::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct(sample: &EnsembleSample, ep: &EmbeddedPerturbation, z: C64) -> Small {
        let h = sample.matrix();
        let n = h.nrows();
        let zh = Mat::<C64>::from_fn(n, n, |i, j| if i == j { z - h[(i, j)] } else { -h[(i, j)] });
        let inv = zh.partial_piv_lu().inverse();
        let u = ep.isometry();
        Small::from_faer(&(u.adjoint() * inv * &u))
    }

    fn perturbation(d_theta: usize, n: usize, mode: EmbedMode, rng: &mut ChaCha8Rng) -> EmbeddedPerturbation {
        let spec = JordanSpec::single(c(2.0, 0.5), d_theta).unwrap();
        let pm = realize(&spec, QMode::Identity, rng).unwrap();
        embed(&pm, n, mode, rng).unwrap()
    }

    #[test]
    fn forms_agree_with_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = c(0.7, 0.3);
        let dense = sample_wigner(&WignerParams::gue(1.0), 40, &mut rng);
        let ep = perturbation(3, 40, EmbedMode::Haar, &mut rng);
        let p = ProjectedResolvent::new(&dense, &ep).unwrap();
        assert!(p.eval(z).unwrap().sub(&direct(&dense, &ep, z)).max_abs() < 1e-10);

        let tri = sample_wigner_compressed(&WignerParams::goe(1.0), 41, 3, &mut rng).unwrap();
        let ep = perturbation(2, 41, EmbedMode::Canonical, &mut rng);
        let p = ProjectedResolvent::new(&tri, &ep).unwrap();
        assert!(p.eval(z).unwrap().sub(&direct(&tri, &ep, z)).max_abs() < 1e-10);

        let mu = SpectralMeasure::semicircle(1.0).unwrap();
        let uci = sample_uci(&mu, 30, DMode::Quantile, &mut rng).unwrap();
        for mode in [EmbedMode::Canonical, EmbedMode::Haar] {
            let ep = perturbation(2, 30, mode, &mut rng);
            let p = ProjectedResolvent::new(&uci, &ep).unwrap();
            assert!(p.eval(z).unwrap().sub(&direct(&uci, &ep, z)).max_abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tri = sample_wigner_compressed(&WignerParams::gue(1.0), 60, 4, &mut rng).unwrap();
        let ep = perturbation(3, 60, EmbedMode::Canonical, &mut rng);
        let dense = EnsembleSample::new(Structure::Dense(tri.matrix()), tri.provenance.clone());
        let z = c(2.6, -0.4);
        let h = 1e-5;
        for s in [&tri, &dense] {
            let p = ProjectedResolvent::new(s, &ep).unwrap();
            let (_, dg) = p.eval_with_derivative(z).unwrap();
            let fd = p
                .eval(z + h)
                .unwrap()
                .sub(&p.eval(z - h).unwrap())
                .scale(C64::new(0.5 / h, 0.0));
            assert!(dg.sub(&fd).max_abs() < 1e-7);
        }
    }

    #[test]
    fn pole_counts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tri = sample_wigner_compressed(&WignerParams::gue(1.0), 50, 3, &mut rng).unwrap();
        let ep = perturbation(2, 50, EmbedMode::Canonical, &mut rng);
        let p = ProjectedResolvent::new(&tri, &ep).unwrap();
        let eig = tri.eigvals().unwrap();
        for x in [-2.5, -1.0, 0.0, 0.3, 1.7, 2.5] {
            let want = eig.iter().filter(|&&l| l < x).count();
            assert_eq!(p.count_below(x).unwrap(), want, "x = {x}");
        }
    }

    #[test]
    fn pole_hit_is_domain_error() {
        let mu = SpectralMeasure::semicircle(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uci = sample_uci(&mu, 10, DMode::Quantile, &mut rng).unwrap();
        let ep = perturbation(1, 10, EmbedMode::Canonical, &mut rng);
        let p = ProjectedResolvent::new(&uci, &ep).unwrap();
        let Structure::Diagonal(d) = uci.structure() else { panic!() };
        assert!(matches!(p.eval(c(d[0], 0.0)), Err(LabError::Domain { .. })));
    }
}
