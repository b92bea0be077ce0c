//! Hermitian base matrices: Wigner (real symmetric or complex Hermitian),
//! unitarily invariant matrices stored by their diagonal, and Haar isometries.
//!
//! Gaussian Wigner matrices can also be drawn directly in block-tridiagonal
//! form. Block Householder reduction that fixes the first `d` coordinates maps
//! a GOE/GUE matrix to a block-tridiagonal one whose diagonal blocks are again
//! GOE/GUE and whose couplings are the R factors of Gaussian matrices (Bartlett
//! decomposition). The law of `H + A` with `A` supported on those `d`
//! coordinates is unchanged, but the sample costs O(N d) instead of O(N²).

use crate::cpx::C64;
use crate::error::{LabError, Result};
use crate::measure::SpectralMeasure;
use crate::small::Small;
use faer::{Mat, Side};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Real,
    #[default]
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntryLaw {
    #[default]
    Gaussian,
    Rademacher,
    Uniform,
}

impl EntryLaw {
    /// A centred unit-variance real draw.
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            EntryLaw::Gaussian => StandardNormal.sample(rng),
            EntryLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryLaw::Uniform => (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WignerParams {
    pub sigma: f64,
    #[serde(default)]
    pub symmetry: Symmetry,
    #[serde(default)]
    pub entry_law: EntryLaw,
}

impl WignerParams {
    pub fn gue(sigma: f64) -> Self {
        WignerParams {
            sigma,
            symmetry: Symmetry::Complex,
            entry_law: EntryLaw::Gaussian,
        }
    }

    pub fn goe(sigma: f64) -> Self {
        WignerParams {
            sigma,
            symmetry: Symmetry::Real,
            entry_law: EntryLaw::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DMode {
    #[default]
    Quantile,
    Iid,
}

/// `H` with Hermitian diagonal blocks `D_k` and couplings `C_k = H[k+1, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<Small>,
    pub coupling: Vec<Small>,
}

impl BlockTridiagonal {
    pub fn n(&self) -> usize {
        self.diag.iter().map(|d| d.rows()).sum()
    }

    pub fn head_dim(&self) -> usize {
        self.diag[0].rows()
    }

    pub fn to_dense(&self) -> Mat<C64> {
        let n = self.n();
        let mut h = Mat::<C64>::zeros(n, n);
        let mut at = 0;
        for (k, d) in self.diag.iter().enumerate() {
            let b = d.rows();
            for i in 0..b {
                for j in 0..b {
                    h[(at + i, at + j)] = d[(i, j)];
                }
            }
            if let Some(c) = self.coupling.get(k) {
                for i in 0..c.rows() {
                    for j in 0..c.cols() {
                        h[(at + b + i, at + j)] = c[(i, j)];
                        h[(at + j, at + b + i)] = c[(i, j)].conj();
                    }
                }
            }
            at += b;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub enum Structure {
    Dense(Mat<C64>),
    /// `H = diag(D)`; any Haar conjugation lives in the embedding.
    Diagonal(Vec<f64>),
    BlockTridiagonal(BlockTridiagonal),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub n: usize,
    pub seed: Option<u64>,
    pub params: String,
}

#[derive(Debug, Clone)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are the matching unit eigenvectors.
    pub vectors: Mat<C64>,
}

/// One realized Hermitian matrix with a lazily computed eigendecomposition.
#[derive(Debug)]
pub struct EnsembleSample {
    structure: Structure,
    pub provenance: Provenance,
    eigen: OnceLock<std::result::Result<HermitianEigen, LabError>>,
}

impl Clone for EnsembleSample {
    fn clone(&self) -> Self {
        EnsembleSample {
            structure: self.structure.clone(),
            provenance: self.provenance.clone(),
            eigen: self.eigen.clone(),
        }
    }
}

impl EnsembleSample {
    pub fn new(structure: Structure, provenance: Provenance) -> Self {
        EnsembleSample {
            structure,
            provenance,
            eigen: OnceLock::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.provenance.seed = Some(seed);
        self
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        match &self.structure {
            Structure::Dense(h) => h.nrows(),
            Structure::Diagonal(d) => d.len(),
            Structure::BlockTridiagonal(b) => b.n(),
        }
    }

    pub fn trace(&self) -> f64 {
        match &self.structure {
            Structure::Dense(h) => (0..h.nrows()).map(|i| h[(i, i)].re).sum(),
            Structure::Diagonal(d) => d.iter().sum(),
            Structure::BlockTridiagonal(b) => b.diag.iter().map(|d| d.trace().re).sum(),
        }
    }

    /// Dense N×N copy of `H`.
    pub fn matrix(&self) -> Mat<C64> {
        match &self.structure {
            Structure::Dense(h) => h.clone(),
            Structure::Diagonal(d) => Mat::from_fn(d.len(), d.len(), |i, j| {
                C64::new(if i == j { d[i] } else { 0.0 }, 0.0)
            }),
            Structure::BlockTridiagonal(b) => b.to_dense(),
        }
    }

    /// Cached eigendecomposition; O(N³) on first use for dense storage.
    pub fn eigen(&self) -> Result<&HermitianEigen> {
        self.eigen
            .get_or_init(|| self.compute_eigen())
            .as_ref()
            .map_err(Clone::clone)
    }

    fn compute_eigen(&self) -> std::result::Result<HermitianEigen, LabError> {
        match &self.structure {
            Structure::Diagonal(d) => {
                let mut order: Vec<usize> = (0..d.len()).collect();
                order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
                let values = order.iter().map(|&i| d[i]).collect();
                let vectors = Mat::from_fn(d.len(), d.len(), |i, j| {
                    C64::new(if order[j] == i { 1.0 } else { 0.0 }, 0.0)
                });
                Ok(HermitianEigen { values, vectors })
            }
            _ => {
                let h = self.matrix();
                let e = h
                    .self_adjoint_eigen(Side::Lower)
                    .map_err(|e| LabError::Solver(format!("{e:?}")))?;
                let values = e.S().column_vector().iter().map(|x| x.re).collect();
                Ok(HermitianEigen {
                    values,
                    vectors: e.U().to_owned(),
                })
            }
        }
    }

    /// Ascending eigenvalues.
    pub fn eigvals(&self) -> Result<Vec<f64>> {
        Ok(self.eigen()?.values.clone())
    }

    /// `H + c·I` with the same provenance.
    pub fn shifted(&self, c: f64) -> EnsembleSample {
        let structure = match &self.structure {
            Structure::Dense(h) => {
                let mut h = h.clone();
                for i in 0..h.nrows() {
                    h[(i, i)] += c;
                }
                Structure::Dense(h)
            }
            Structure::Diagonal(d) => Structure::Diagonal(d.iter().map(|x| x + c).collect()),
            Structure::BlockTridiagonal(b) => {
                let mut b = b.clone();
                for d in &mut b.diag {
                    let id = Small::identity(d.rows()).scale(C64::new(c, 0.0));
                    *d = d.add(&id);
                }
                Structure::BlockTridiagonal(b)
            }
        };
        EnsembleSample::new(structure, self.provenance.clone())
    }
}

fn wigner_provenance(params: &WignerParams, n: usize, kind: &str) -> Provenance {
    Provenance {
        kind: kind.into(),
        n,
        seed: None,
        params: serde_json::to_string(params).unwrap_or_default(),
    }
}

/// `H = W/√N` with independent entries: off-diagonal variance σ², diagonal
/// variance 2σ² (real) or σ² (complex, real diagonal).
pub fn sample_wigner<R: Rng + ?Sized>(params: &WignerParams, n: usize, rng: &mut R) -> EnsembleSample {
    let scale = params.sigma / (n as f64).sqrt();
    let law = params.entry_law;
    let mut h = Mat::<C64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = if i == j {
                match params.symmetry {
                    Symmetry::Real => C64::new(2f64.sqrt() * law.draw(rng), 0.0),
                    Symmetry::Complex => C64::new(law.draw(rng), 0.0),
                }
            } else {
                match params.symmetry {
                    Symmetry::Real => C64::new(law.draw(rng), 0.0),
                    Symmetry::Complex => {
                        C64::new(law.draw(rng), law.draw(rng)) * std::f64::consts::FRAC_1_SQRT_2
                    }
                }
            } * scale;
            h[(i, j)] = v;
            h[(j, i)] = v.conj();
        }
    }
    EnsembleSample::new(Structure::Dense(h), wigner_provenance(params, n, "wigner"))
}

/// Gaussian Wigner matrix drawn directly in block-tridiagonal form with a
/// leading block of size `head`. Equal in law to `sample_wigner` as far as any
/// quantity depending on `H` and its first `head` coordinates is concerned.
pub fn sample_wigner_compressed<R: Rng + ?Sized>(
    params: &WignerParams,
    n: usize,
    head: usize,
    rng: &mut R,
) -> Result<EnsembleSample> {
    if params.entry_law != EntryLaw::Gaussian {
        return Err(LabError::invalid(
            "block-tridiagonal sampling needs Gaussian entries",
        ));
    }
    if head == 0 || head > n {
        return Err(LabError::invalid(format!("head {head} out of range for N={n}")));
    }
    let s = params.sigma / (n as f64).sqrt();
    let real = params.symmetry == Symmetry::Real;
    let mut diag = Vec::new();
    let mut coupling = Vec::new();
    let mut b = head;
    let mut rest = n - head;
    loop {
        diag.push(gaussian_block(b, s, real, rng));
        if rest == 0 {
            break;
        }
        let rows = rest.min(b);
        let mut r = Small::zeros(rows, b);
        for j in 0..rows {
            let dof = (rest - j) as f64;
            r[(j, j)] = if real {
                C64::new(s * ChiSquared::new(dof).expect("dof > 0").sample(rng).sqrt(), 0.0)
            } else {
                let chi2 = ChiSquared::new(2.0 * dof).expect("dof > 0").sample(rng);
                C64::new(s * (chi2 / 2.0).sqrt(), 0.0)
            };
            for k in j + 1..b {
                r[(j, k)] = off_diagonal(s, real, rng);
            }
        }
        coupling.push(r);
        b = rows;
        rest -= rows;
    }
    let bt = BlockTridiagonal { diag, coupling };
    Ok(EnsembleSample::new(
        Structure::BlockTridiagonal(bt),
        wigner_provenance(params, n, "wigner_block_tridiagonal"),
    ))
}

fn off_diagonal<R: Rng + ?Sized>(s: f64, real: bool, rng: &mut R) -> C64 {
    let a: f64 = StandardNormal.sample(rng);
    if real {
        C64::new(s * a, 0.0)
    } else {
        let b: f64 = StandardNormal.sample(rng);
        C64::new(a, b) * (s * std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// GOE/GUE block of size `b` with off-diagonal scale `s`.
fn gaussian_block<R: Rng + ?Sized>(b: usize, s: f64, real: bool, rng: &mut R) -> Small {
    let mut d = Small::zeros(b, b);
    for i in 0..b {
        let g: f64 = StandardNormal.sample(rng);
        d[(i, i)] = C64::new(if real { 2f64.sqrt() * s * g } else { s * g }, 0.0);
        for j in 0..i {
            let v = off_diagonal(s, real, rng);
            d[(i, j)] = v;
            d[(j, i)] = v.conj();
        }
    }
    d
}

/// First `k` columns of a Haar unitary: QR of a complex Ginibre matrix with
/// the phases of R's diagonal moved into Q.
pub fn sample_haar_isometry<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Mat<C64> {
    assert!(k <= n, "isometry wider than tall");
    let g = Mat::<C64>::from_fn(n, k, |_, _| crate::jordan::complex_normal(rng));
    let qr = g.qr();
    let mut q = qr.compute_thin_Q();
    let r = qr.thin_R();
    for j in 0..k {
        let rjj = r[(j, j)];
        let phase = if rjj.norm() == 0.0 {
            C64::new(1.0, 0.0)
        } else {
            rjj / rjj.norm()
        };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Unitarily invariant matrix stored as its diagonal `D`: μ-quantiles at
/// `(i − ½)/N`, or i.i.d. draws from μ.
pub fn sample_uci<R: Rng + ?Sized>(
    mu: &SpectralMeasure,
    n: usize,
    mode: DMode,
    rng: &mut R,
) -> Result<EnsembleSample> {
    if n < 2 {
        return Err(LabError::invalid("N must be at least 2"));
    }
    let d: Vec<f64> = match mode {
        DMode::Quantile => (0..n)
            .map(|i| mu.quantile((i as f64 + 0.5) / n as f64))
            .collect(),
        DMode::Iid => (0..n)
            .map(|_| mu.quantile(rng.random::<f64>().max(f64::MIN_POSITIVE)))
            .collect(),
    };
    Ok(EnsembleSample::new(
        Structure::Diagonal(d),
        Provenance {
            kind: "uci".into(),
            n,
            seed: None,
            params: serde_json::to_string(&(mu, mode)).unwrap_or_default(),
        },
    ))
}
