//! Jordan-form perturbations: the spec of eigenvalues and block sizes, the
//! realized triple `(Q, J, A0 = Q J Q⁻¹)`, the first/last-column index sets
//! and the embedding `A_N = U A0 U*` into dimension N.

use crate::cpx::C64;
use crate::ensemble::sample_haar_isometry;
use crate::error::{LabError, Result};
use crate::small::Small;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Block multiset for one eigenvalue: `(p, β)` means β copies of `R_p(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JordanEntry {
    #[serde(with = "crate::cpx::pair")]
    pub theta: C64,
    pub blocks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<JordanEntry>", into = "Vec<JordanEntry>")]
pub struct JordanSpec {
    entries: Vec<JordanEntry>,
}

impl TryFrom<Vec<JordanEntry>> for JordanSpec {
    type Error = LabError;
    fn try_from(entries: Vec<JordanEntry>) -> Result<Self> {
        JordanSpec::new(entries)
    }
}

impl From<JordanSpec> for Vec<JordanEntry> {
    fn from(s: JordanSpec) -> Self {
        s.entries
    }
}

impl JordanSpec {
    pub fn new(entries: Vec<JordanEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(LabError::invalid("empty Jordan spec"));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.theta.norm() == 0.0 || !e.theta.re.is_finite() || !e.theta.im.is_finite() {
                return Err(LabError::invalid("theta must be nonzero and finite"));
            }
            if e.blocks.is_empty() {
                return Err(LabError::invalid(format!("entry {i} has no blocks")));
            }
            if e.blocks.iter().any(|&(p, b)| p == 0 || b == 0) {
                return Err(LabError::invalid("block sizes and counts must be ≥ 1"));
            }
            if e.blocks.windows(2).any(|w| w[0].0 <= w[1].0) {
                return Err(LabError::invalid(
                    "block sizes must be strictly decreasing per eigenvalue",
                ));
            }
            if entries[..i].iter().any(|o| o.theta == e.theta) {
                return Err(LabError::invalid("eigenvalues must be distinct"));
            }
        }
        Ok(JordanSpec { entries })
    }

    /// One `R_p(θ)` block of multiplicity one.
    pub fn single(theta: C64, p: usize) -> Result<Self> {
        Self::new(vec![JordanEntry {
            theta,
            blocks: vec![(p, 1)],
        }])
    }

    pub fn entries(&self) -> &[JordanEntry] {
        &self.entries
    }

    /// `d = Σ p·β`, the natural dimension of A0.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(multiplicity).sum()
    }

    /// `(θ_i, k_i)` with `k_i = Σ_j p_ij β_ij` the algebraic multiplicity.
    pub fn eigenvalues(&self) -> Vec<(C64, usize)> {
        self.entries.iter().map(|e| (e.theta, multiplicity(e))).collect()
    }

    /// Smallest `r` with `2r ≥ d`.
    pub fn rank_bound(&self) -> usize {
        self.dim().div_ceil(2)
    }
}

fn multiplicity(e: &JordanEntry) -> usize {
    e.blocks.iter().map(|&(p, b)| p * b).sum()
}

/// Block-diagonal Jordan matrix in (θ order, decreasing p, copy) layout.
pub fn build_jcf(spec: &JordanSpec) -> Small {
    let d = spec.dim();
    let mut j = Small::zeros(d, d);
    let mut at = 0;
    for e in spec.entries() {
        for &(p, beta) in &e.blocks {
            for _ in 0..beta {
                for s in 0..p {
                    j[(at + s, at + s)] = e.theta;
                    if s + 1 < p {
                        j[(at + s, at + s + 1)] = C64::new(1.0, 0.0);
                    }
                }
                at += p;
            }
        }
    }
    j
}

/// Index sets of one size class `p_ij` of eigenvalue `θ_i` (0-based columns of J).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub p: usize,
    pub beta: usize,
    /// Last columns of the size-p blocks.
    pub k: Vec<usize>,
    /// Last columns of the larger blocks of the same eigenvalue.
    pub k_minus: Vec<usize>,
    /// First columns of the size-p blocks.
    pub l: Vec<usize>,
    /// First columns of the larger blocks.
    pub l_minus: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenIndex {
    #[serde(with = "crate::cpx::pair")]
    pub theta: C64,
    /// First columns of all blocks of θ.
    pub i_set: Vec<usize>,
    /// Last columns of all blocks of θ.
    pub j_set: Vec<usize>,
    pub classes: Vec<SizeClass>,
}

impl EigenIndex {
    /// Number of outliers per ξ: `Σ_j p_ij β_ij`.
    pub fn cluster_size(&self) -> usize {
        self.classes.iter().map(|c| c.p * c.beta).sum()
    }
}

pub fn index_sets(spec: &JordanSpec) -> Vec<EigenIndex> {
    let mut at = 0;
    spec.entries()
        .iter()
        .map(|e| {
            let mut idx = EigenIndex {
                theta: e.theta,
                i_set: vec![],
                j_set: vec![],
                classes: vec![],
            };
            for &(p, beta) in &e.blocks {
                let firsts: Vec<usize> = (0..beta).map(|c| at + c * p).collect();
                let lasts: Vec<usize> = firsts.iter().map(|f| f + p - 1).collect();
                idx.classes.push(SizeClass {
                    p,
                    beta,
                    k: lasts.clone(),
                    k_minus: idx.j_set.clone(),
                    l: firsts.clone(),
                    l_minus: idx.i_set.clone(),
                });
                idx.i_set.extend(firsts);
                idx.j_set.extend(lasts);
                at += p * beta;
            }
            idx
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QMode {
    #[default]
    Identity,
    RandomGinibre { condition_cap: f64 },
}

/// The realized perturbation `A0 = Q J Q⁻¹` with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMatrix {
    pub spec: JordanSpec,
    pub j: Small,
    pub q: Small,
    pub q_inv: Small,
    pub a0: Small,
    pub index: Vec<EigenIndex>,
}

const GINIBRE_ATTEMPTS: usize = 100;

pub fn realize<R: Rng + ?Sized>(
    spec: &JordanSpec,
    q_mode: QMode,
    rng: &mut R,
) -> Result<PerturbationMatrix> {
    let j = build_jcf(spec);
    let d = spec.dim();
    let q = match q_mode {
        QMode::Identity => Small::identity(d),
        QMode::RandomGinibre { condition_cap } => {
            if condition_cap.is_nan() || condition_cap <= 1.0 {
                return Err(LabError::invalid("condition_cap must exceed 1"));
            }
            let mut found = None;
            for _ in 0..GINIBRE_ATTEMPTS {
                let g = Small::from_fn(d, d, |_, _| complex_normal(rng));
                if condition_number(&g)? <= condition_cap {
                    found = Some(g);
                    break;
                }
            }
            found.ok_or_else(|| LabError::RetryExhausted {
                attempts: GINIBRE_ATTEMPTS,
                what: format!("Ginibre draw with condition ≤ {condition_cap}"),
            })?
        }
    };
    let q_inv = q.inverse()?;
    let a0 = if q_mode == QMode::Identity {
        j.clone()
    } else {
        q.matmul(&j).matmul(&q_inv)
    };
    Ok(PerturbationMatrix {
        spec: spec.clone(),
        j,
        q,
        q_inv,
        a0,
        index: index_sets(spec),
    })
}

/// Standard complex Gaussian: `E|z|² = 1`.
pub(crate) fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    C64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn condition_number(m: &Small) -> Result<f64> {
    let s = m
        .to_faer()
        .singular_values()
        .map_err(|e| LabError::Solver(format!("{e:?}")))?;
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = s.iter().copied().fold(0.0, f64::max);
    Ok(if smin == 0.0 { f64::INFINITY } else { smax / smin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    #[default]
    Canonical,
    Haar,
}

/// `A_N = U A0 U*` with `U` an N×d isometry.
#[derive(Debug, Clone)]
pub struct EmbeddedPerturbation {
    pub n: usize,
    pub mode: EmbedMode,
    /// `None` in canonical mode: `U` is the first d standard basis vectors.
    pub u: Option<faer::Mat<C64>>,
    pub pm: PerturbationMatrix,
}

impl EmbeddedPerturbation {
    pub fn dim(&self) -> usize {
        self.pm.a0.rows()
    }

    pub fn a0(&self) -> &Small {
        &self.pm.a0
    }

    /// The isometry `U` as a dense N×d matrix.
    pub fn isometry(&self) -> faer::Mat<C64> {
        match &self.u {
            Some(u) => u.clone(),
            None => faer::Mat::from_fn(self.n, self.dim(), |i, j| {
                if i == j {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        }
    }

    /// Dense N×N matrix `U A0 U*`.
    pub fn dense(&self) -> faer::Mat<C64> {
        let u = self.isometry();
        let a = self.pm.a0.to_faer();
        &u * &a * u.adjoint()
    }
}

pub fn embed<R: Rng + ?Sized>(
    pm: &PerturbationMatrix,
    n: usize,
    mode: EmbedMode,
    rng: &mut R,
) -> Result<EmbeddedPerturbation> {
    let r = pm.spec.rank_bound();
    if n < 4 * r {
        return Err(LabError::invalid(format!("N = {n} is below 4r = {}", 4 * r)));
    }
    let u = match mode {
        EmbedMode::Canonical => None,
        EmbedMode::Haar => Some(sample_haar_isometry(n, pm.spec.dim(), rng)),
    };
    Ok(EmbeddedPerturbation {
        n,
        mode,
        u,
        pm: pm.clone(),
    })
}
