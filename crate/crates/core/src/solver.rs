//! ADMM solver for the multi-dictionary decomposition
//!
//! ```text
//! min ½‖Ω ⊡ (X − ⟦Φ₁Y₁, Φ₂Y₂, Φ₃Y₃⟧)‖²_F + Σᵢ λᵢ‖Yᵢ‖₁
//! ```
//!
//! Each outer iteration updates, per mode, the encoding `Yᵢ` (closed form,
//! orthonormal or eigendecomposition path), rescales it column-wise into the
//! shared scale vector `S`, soft-thresholds the proxy `Zᵢ` and takes a dual
//! step on `Γᵢ`. The imputation tensor `D` is refreshed once per iteration.
//!
//! `S` is kept as a single vector updated multiplicatively by every mode's
//! normalization, and it is applied to the lower-index context factor while a
//! mode is updated, so the freshly solved `Yᵢ` only carries the residual
//! scale that its normalization moves into `S`.

use std::borrow::Cow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{gram_evd_of, precompute_gram_evd, Dictionary, GramEvd};
use crate::error::{MdtdError, Result};
use crate::tensor::{
    khatri_rao, kr_gram, mttkrp, nnz_matrix, other_modes, reconstruct, reconstruct_at,
    FactorMatrix, Mask, SparseTensor3, Tensor3,
};

/// How the reconstruction tensor `D` is maintained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMode {
    /// `D = X`; the mask only enters the objective.
    #[default]
    None,
    /// Dense penalized update of every cell.
    Dense,
    /// Observed entries kept as-is, missing cells filled from the model.
    Sparse,
}

impl std::str::FromStr for ImputeMode {
    type Err = MdtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ImputeMode::None),
            "dense" => Ok(ImputeMode::Dense),
            "sparse" => Ok(ImputeMode::Sparse),
            _ => Err(MdtdError::InvalidArgument(format!("unknown impute mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for ImputeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ImputeMode::None => "none",
            ImputeMode::Dense => "dense",
            ImputeMode::Sparse => "sparse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rank: usize,
    pub lambda: [f64; 3],
    pub rho: [f64; 3],
    pub lambda_d: f64,
    pub epsilon: f64,
    /// Largest `‖Zᵢ − Yᵢ‖_∞` accepted at convergence; `f64::INFINITY`
    /// stops on the objective change alone.
    pub primal_tol: f64,
    pub max_iters: usize,
    pub impute: ImputeMode,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            lambda: [0.0; 3],
            rho: [1.0; 3],
            lambda_d: 1.0,
            epsilon: 1e-4,
            primal_tol: 1e-4,
            max_iters: 500,
            impute: ImputeMode::None,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MdtdError::InvalidArgument(msg));
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda must be finite and ≥ 0, got {:?}", self.lambda));
        }
        if self.rho.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad(format!("rho must be finite and > 0, got {:?}", self.rho));
        }
        if !(self.lambda_d > 0.0 && self.lambda_d.is_finite()) {
            return bad(format!("lambda_d must be > 0, got {}", self.lambda_d));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.primal_tol.is_nan() || self.primal_tol <= 0.0 {
            return bad(format!("primal_tol must be > 0, got {}", self.primal_tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        Ok(())
    }
}

/// Which per-mode codes to expand through the dictionaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Codes {
    /// The encodings `Yᵢ` the ADMM iterates on.
    Encoding,
    /// The soft-thresholded proxies `Zᵢ` (the sparse model that is reported
    /// and dumped).
    Proxy,
}

#[derive(Clone, Debug)]
pub struct MdtdModel {
    pub y: [FactorMatrix; 3],
    pub z: [FactorMatrix; 3],
    pub gamma: [FactorMatrix; 3],
    pub scale: DVector<f64>,
    pub dictionaries: [Dictionary; 3],
}

impl MdtdModel {
    pub fn rank(&self) -> usize {
        self.scale.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|m| self.dictionaries[m].mode_len())
    }

    fn codes(&self, codes: Codes) -> &[FactorMatrix; 3] {
        match codes {
            Codes::Encoding => &self.y,
            Codes::Proxy => &self.z,
        }
    }

    /// `Φᵢ · codesᵢ` for every mode (scale not applied).
    pub fn expanded(&self, codes: Codes) -> [FactorMatrix; 3] {
        let c = self.codes(codes);
        [0, 1, 2].map(|m| self.dictionaries[m].atoms() * &c[m])
    }

    /// Expanded factors with `S` folded into the first mode.
    pub fn scaled_factors(&self, codes: Codes) -> [FactorMatrix; 3] {
        let mut f = self.expanded(codes);
        scale_columns(&mut f[0], &self.scale);
        f
    }

    /// `⟦S ⊡ Φ₁c₁, Φ₂c₂, Φ₃c₃⟧`.
    pub fn reconstruct(&self, codes: Codes) -> Result<Tensor3> {
        let f = self.expanded(codes);
        reconstruct(&f[0], &f[1], &f[2], &self.scale)
    }

    pub fn reconstruct_at(&self, codes: Codes, idx: &[[usize; 3]]) -> Result<Vec<f64>> {
        let f = self.expanded(codes);
        reconstruct_at(&f[0], &f[1], &f[2], &self.scale, idx)
    }

    /// Nonzero coefficients of the sparse model: exact nonzeros of every
    /// `Zᵢ` plus the `k` scale entries.
    pub fn nnz(&self) -> usize {
        self.z.iter().map(|z| nnz_matrix(z, 0.0)).sum::<usize>() + self.rank()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective value after each iteration.
    pub objective_trace: Vec<f64>,
    /// Fit `1 − ‖Ω⊡(X−R)‖/‖Ω⊡X‖` after each iteration, on the encodings.
    pub fit_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Squared error of the sparse (`Zᵢ`) model over observed cells.
    pub sse: f64,
    pub nnz: usize,
    pub fit: f64,
    pub seconds: f64,
}

/// Borrowed input tensor.
#[derive(Clone, Copy, Debug)]
pub enum TensorRef<'a> {
    Dense(&'a Tensor3),
    Sparse(&'a SparseTensor3),
}

impl<'a> From<&'a Tensor3> for TensorRef<'a> {
    fn from(x: &'a Tensor3) -> Self {
        TensorRef::Dense(x)
    }
}

impl<'a> From<&'a SparseTensor3> for TensorRef<'a> {
    fn from(x: &'a SparseTensor3) -> Self {
        TensorRef::Sparse(x)
    }
}

impl TensorRef<'_> {
    pub fn dims(&self) -> [usize; 3] {
        match self {
            TensorRef::Dense(x) => x.dims(),
            TensorRef::Sparse(x) => x.dims(),
        }
    }
}

pub(crate) fn scale_columns(m: &mut FactorMatrix, s: &DVector<f64>) {
    for (mut col, &v) in m.column_iter_mut().zip(s.iter()) {
        col *= v;
    }
}

/// Orthonormal-dictionary update from a precomputed data term
/// `ΦᵀDᵀ(B⊙A)`: `Y = (data + ρZ − Γ)(G + ρI)⁻¹` with `G = BᵀB ⊡ AᵀA`,
/// solved through a Cholesky factorization.
pub fn solve_y_orthogonal(
    data: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    z: &FactorMatrix,
    gamma: &FactorMatrix,
    rho: f64,
) -> Result<FactorMatrix> {
    let k = gram.nrows();
    let rhs = data + z * rho - gamma;
    let system = gram + DMatrix::identity(k, k) * rho;
    let chol = system.cholesky().ok_or_else(|| {
        MdtdError::Numerical("G + ρI is not positive definite (ρ too small or NaN input)".into())
    })?;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// General update through the eigendecompositions of `ΦᵀΦ` and `G`:
/// `Y = E_d [(E_dᵀ C E_v) ⊘ (p_d p_vᵀ + ρ)] E_vᵀ`, `C = data + ρZ − Γ`.
pub fn solve_y_general(
    data: &DMatrix<f64>,
    dict_evd: &GramEvd,
    gram: &DMatrix<f64>,
    z: &FactorMatrix,
    gamma: &FactorMatrix,
    rho: f64,
) -> Result<FactorMatrix> {
    let c = data + z * rho - gamma;
    let gram_evd = gram_evd_of_symmetric(gram)?;
    let (e_d, p_d) = (&dict_evd.vectors, &dict_evd.values);
    let (e_v, p_v) = (&gram_evd.vectors, &gram_evd.values);
    let mut core = e_d.transpose() * c * e_v;
    for col in 0..core.ncols() {
        for row in 0..core.nrows() {
            core[(row, col)] /= p_d[row] * p_v[col] + rho;
        }
    }
    Ok(e_d * core * e_v.transpose())
}

fn gram_evd_of_symmetric(g: &DMatrix<f64>) -> Result<GramEvd> {
    let k = g.nrows();
    let scale = g.amax();
    if !scale.is_finite() {
        return Err(MdtdError::Numerical("non-finite k×k Gram matrix".into()));
    }
    if scale == 0.0 {
        return Ok(GramEvd {
            vectors: DMatrix::identity(k, k),
            values: DVector::zeros(k),
        });
    }
    // Unit-scale copy; entries below ε² relative to the largest are flushed
    // so the rotations never see denormals.
    let mut sym = (g + g.transpose()) * (0.5 / scale);
    sym.apply(|v| {
        if v.abs() < 1e-32 {
            *v = 0.0;
        }
    });
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| MdtdError::Numerical("eigensolver failed on the k×k Gram matrix".into()))?;
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
        return Err(MdtdError::Numerical("eigensolver produced non-finite values".into()));
    }
    let mut values = eig.eigenvalues * scale;
    values.apply(|v| *v = v.max(0.0));
    Ok(GramEvd {
        vectors: eig.eigenvectors,
        values,
    })
}

fn data_term_from_unfolding(
    d_unfold: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    a: &FactorMatrix,
    b: &FactorMatrix,
) -> Result<DMatrix<f64>> {
    let kr = khatri_rao(b, a)?;
    if d_unfold.nrows() != kr.nrows() || d_unfold.ncols() != phi.nrows() {
        return Err(MdtdError::ShapeMismatch(format!(
            "unfolding {:?}, Khatri-Rao rows {}, dictionary rows {}",
            d_unfold.shape(),
            kr.nrows(),
            phi.nrows()
        )));
    }
    Ok(phi.transpose() * (d_unfold.transpose() * kr))
}

/// Orthonormal-path `Yᵢ` update from an explicit unfolding `Dᵢ` and the two
/// context factors `A`, `B` (lower mode first).
pub fn update_y_orthogonal(
    d_unfold: &DMatrix<f64>,
    phi: &Dictionary,
    a: &FactorMatrix,
    b: &FactorMatrix,
    z: &FactorMatrix,
    gamma: &FactorMatrix,
    rho: f64,
) -> Result<FactorMatrix> {
    let data = data_term_from_unfolding(d_unfold, phi.atoms(), a, b)?;
    solve_y_orthogonal(&data, &kr_gram(a, b)?, z, gamma, rho)
}

/// General-path `Yᵢ` update; uses the dictionary's cached Gram
/// eigendecomposition, computing one when absent.
pub fn update_y_general(
    d_unfold: &DMatrix<f64>,
    dict: &Dictionary,
    a: &FactorMatrix,
    b: &FactorMatrix,
    z: &FactorMatrix,
    gamma: &FactorMatrix,
    rho: f64,
) -> Result<FactorMatrix> {
    let data = data_term_from_unfolding(d_unfold, dict.atoms(), a, b)?;
    let evd = match dict.gram_evd() {
        Some(e) => Cow::Borrowed(e),
        None => Cow::Owned(gram_evd_of(dict.atoms())?),
    };
    solve_y_general(&data, &evd, &kr_gram(a, b)?, z, gamma, rho)
}

/// Divides each column by its largest absolute entry (clamped below at
/// 1e-12) and returns the divisors.
pub fn normalize_factors(y: &FactorMatrix) -> (FactorMatrix, DVector<f64>) {
    let s = DVector::from_iterator(
        y.ncols(),
        y.column_iter().map(|c| c.amax().max(1e-12)),
    );
    let mut out = y.clone();
    for (mut col, &v) in out.column_iter_mut().zip(s.iter()) {
        col /= v;
    }
    (out, s)
}

#[inline]
fn soft_threshold(h: f64, thr: f64) -> f64 {
    if h > thr {
        h - thr
    } else if h < -thr {
        h + thr
    } else {
        0.0
    }
}

/// `Z = soft(Y − Γ/ρ, λ/ρ)`.
pub fn update_z(y: &FactorMatrix, gamma: &FactorMatrix, lambda: f64, rho: f64) -> FactorMatrix {
    let thr = lambda / rho;
    y.zip_map(gamma, |yv, gv| soft_threshold(yv - gv / rho, thr))
}

/// `Γ + ρ(Z − Y)`.
pub fn update_dual(gamma: &FactorMatrix, z: &FactorMatrix, y: &FactorMatrix, rho: f64) -> FactorMatrix {
    gamma + (z - y) * rho
}

/// `D = (R + λ_d Ω⊡X) ⊘ (1 + λ_d Ω)` cell-wise.
pub fn update_d_dense(recon: &Tensor3, x: &Tensor3, mask: &Mask, lambda_d: f64) -> Result<Tensor3> {
    if recon.dims() != x.dims() || mask.dims() != x.dims() {
        return Err(MdtdError::ShapeMismatch(format!(
            "dense imputation: recon {:?}, x {:?}, mask {:?}",
            recon.dims(),
            x.dims(),
            mask.dims()
        )));
    }
    let observed = mask.to_observed();
    let mut out = recon.clone();
    for ((d, &xv), &o) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(&observed) {
        if o {
            *d = (*d + lambda_d * xv) / (1.0 + lambda_d);
        }
    }
    Ok(out)
}

/// `D = Ω⊡X + (1−Ω)⊡⟦…⟧`: observed entries copied from `x`, each missing
/// cell filled with the model value (computed only at those cells).
pub fn update_d_sparse(
    model: &MdtdModel,
    x: &SparseTensor3,
    missing_idx: &[[usize; 3]],
) -> Result<SparseTensor3> {
    if model.dims() != x.dims() {
        return Err(MdtdError::ShapeMismatch(format!(
            "model dims {:?}, tensor dims {:?}",
            model.dims(),
            x.dims()
        )));
    }
    if let Some(&[i, j, t]) = missing_idx.iter().find(|p| x.contains(**p)) {
        return Err(MdtdError::MaskOverlap(i, j, t));
    }
    let values = model.reconstruct_at(Codes::Encoding, missing_idx)?;
    let mut triplets: Vec<([usize; 3], f64)> = x.iter().collect();
    triplets.extend(missing_idx.iter().copied().zip(values));
    SparseTensor3::from_triplets(x.dims(), triplets)
}

/// Objective value on the encodings `Yᵢ`.
pub fn objective_value(
    model: &MdtdModel,
    x: TensorRef<'_>,
    mask: Option<&Mask>,
    cfg: &SolverConfig,
) -> Result<f64> {
    let f = model.expanded(Codes::Encoding);
    let masked_sse = match x {
        TensorRef::Dense(xd) => {
            let r = reconstruct(&f[0], &f[1], &f[2], &model.scale)?;
            crate::tensor::sse(xd, &r, mask)?
        }
        TensorRef::Sparse(xs) => sparse_masked_sse(xs, mask, &f, &model.scale)?,
    };
    Ok(0.5 * masked_sse + l1_penalty(&model.y, &cfg.lambda))
}

fn l1_penalty(y: &[FactorMatrix; 3], lambda: &[f64; 3]) -> f64 {
    y.iter()
        .zip(lambda)
        .map(|(m, l)| l * m.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

/// `‖Ω⊡(X − R)‖²` for a sparse `X` without materializing `R`:
/// `‖X‖² − 2⟨X,R⟩ + ‖R‖² − Σ_missing R²` (missing cells hold no entry of X).
fn sparse_masked_sse(
    x: &SparseTensor3,
    mask: Option<&Mask>,
    f: &[FactorMatrix; 3],
    s: &DVector<f64>,
) -> Result<f64> {
    let mut cross = 0.0;
    let mut observed_sq = 0.0;
    let recon = reconstruct_at(&f[0], &f[1], &f[2], s, x.indices())?;
    let mut missing_in_x_sq = 0.0;
    for ((idx, v), r) in x.iter().zip(recon) {
        if mask.is_some_and(|m| !m.is_observed(idx[0], idx[1], idx[2])) {
            missing_in_x_sq += r * r;
            continue;
        }
        cross += v * r;
        observed_sq += v * v;
    }
    let g = (&f[0].transpose() * &f[0])
        .component_mul(&(&f[1].transpose() * &f[1]))
        .component_mul(&(&f[2].transpose() * &f[2]));
    let recon_sq = (s.transpose() * g * s)[(0, 0)];
    let missing_sq: f64 = match mask {
        None => 0.0,
        Some(m) => {
            let idx: Vec<[usize; 3]> = m
                .missing_indices()
                .into_iter()
                .filter(|p| !x.contains(*p))
                .collect();
            reconstruct_at(&f[0], &f[1], &f[2], s, &idx)?
                .iter()
                .map(|r| r * r)
                .sum()
        }
    };
    Ok((observed_sq - 2.0 * cross + recon_sq - missing_sq - missing_in_x_sq).max(0.0))
}

fn observed_norm_sq(x: TensorRef<'_>, mask: Option<&Mask>) -> f64 {
    match (x, mask) {
        (TensorRef::Dense(xd), None) => xd.frobenius_norm_sq(),
        (TensorRef::Dense(xd), Some(m)) => {
            let obs = m.to_observed();
            xd.as_slice()
                .iter()
                .zip(obs)
                .filter(|(_, o)| *o)
                .map(|(v, _)| v * v)
                .sum()
        }
        (TensorRef::Sparse(xs), m) => xs
            .iter()
            .filter(|(p, _)| m.is_none_or(|m| m.is_observed(p[0], p[1], p[2])))
            .map(|(_, v)| v * v)
            .sum(),
    }
}

/// Working copy of the tensor the encodings are fitted to.
enum Working<'a> {
    Dense(Cow<'a, Tensor3>),
    Sparse(Cow<'a, SparseTensor3>),
}

impl Working<'_> {
    fn mttkrp(&self, mode: usize, a: &FactorMatrix, b: &FactorMatrix) -> Result<DMatrix<f64>> {
        match self {
            Working::Dense(d) => mttkrp(d, mode, a, b),
            Working::Sparse(d) => d.mttkrp(mode, a, b),
        }
    }
}

fn init_model(dicts: [Dictionary; 3], k: usize, seed: u64) -> Result<MdtdModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dictionaries = dicts.map(precompute_gram_evd);
    let [d1, d2, d3] = dictionaries;
    let dictionaries = [d1?, d2?, d3?];
    let y: [FactorMatrix; 3] = [0, 1, 2].map(|m| {
        DMatrix::from_fn(dictionaries[m].atom_count(), k, |_, _| rng.random::<f64>())
    });
    let zeros = [0, 1, 2].map(|m| DMatrix::zeros(dictionaries[m].atom_count(), k));
    Ok(MdtdModel {
        z: y.clone(),
        y,
        gamma: zeros,
        scale: DVector::from_element(k, 1.0),
        dictionaries,
    })
}

/// Runs the ADMM decomposition.
///
/// `mask` marks observed cells. With [`ImputeMode::None`] the encodings are
/// fitted to `x` directly and the mask only affects the objective; the
/// imputing modes refresh `D` once per iteration. For sparse input the
/// mask's missing cells must not coincide with stored entries of `x`;
/// absent, non-missing cells count as observed zeros.
pub fn solve<'a>(
    x: impl Into<TensorRef<'a>>,
    mask: Option<&Mask>,
    dicts: [Dictionary; 3],
    cfg: &SolverConfig,
) -> Result<(MdtdModel, FitReport)> {
    let x: TensorRef<'a> = x.into();
    let started = Instant::now();
    cfg.validate()?;
    let dims = x.dims();
    for (m, d) in dicts.iter().enumerate() {
        if d.mode_len() != dims[m] {
            return Err(MdtdError::ShapeMismatch(format!(
                "dictionary {} has {} rows, mode length is {}",
                m + 1,
                d.mode_len(),
                dims[m]
            )));
        }
    }
    if let Some(m) = mask {
        if m.dims() != dims {
            return Err(MdtdError::ShapeMismatch(format!(
                "mask dims {:?}, tensor dims {dims:?}",
                m.dims()
            )));
        }
    }

    // Input as seen by the solver for this impute mode.
    let (x_eff, dense_mask, missing_idx): (TensorRef<'_>, Option<Mask>, Vec<[usize; 3]>);
    let densified;
    let sparsified;
    match cfg.impute {
        ImputeMode::None => {
            x_eff = x;
            dense_mask = None;
            missing_idx = Vec::new();
        }
        ImputeMode::Dense => {
            let m = mask.cloned().unwrap_or_else(|| Mask::all_observed(dims));
            x_eff = match x {
                TensorRef::Dense(_) => x,
                TensorRef::Sparse(xs) => {
                    densified = xs.to_dense();
                    TensorRef::Dense(&densified)
                }
            };
            dense_mask = Some(m);
            missing_idx = Vec::new();
        }
        ImputeMode::Sparse => {
            x_eff = match x {
                TensorRef::Sparse(_) => x,
                TensorRef::Dense(xd) => {
                    // values under the mask's missing cells are unknown
                    let full = SparseTensor3::from_dense(xd);
                    sparsified = match mask {
                        Some(m) => SparseTensor3::from_triplets(
                            dims,
                            full.iter()
                                .filter(|(p, _)| m.is_observed(p[0], p[1], p[2]))
                                .collect(),
                        )?,
                        None => full,
                    };
                    TensorRef::Sparse(&sparsified)
                }
            };
            dense_mask = None;
            missing_idx = mask.map(|m| m.missing_indices()).unwrap_or_default();
            if let TensorRef::Sparse(xs) = x_eff {
                if let Some(&[i, j, t]) = missing_idx.iter().find(|p| xs.contains(**p)) {
                    return Err(MdtdError::MaskOverlap(i, j, t));
                }
            }
        }
    }

    let k = cfg.rank;
    let mut model = init_model(dicts, k, cfg.seed)?;
    let mut working = match x_eff {
        TensorRef::Dense(xd) => Working::Dense(Cow::Borrowed(xd)),
        TensorRef::Sparse(xs) => Working::Sparse(Cow::Borrowed(xs)),
    };
    let x_norm_sq = observed_norm_sq(x_eff, mask);

    let mut factors = model.expanded(Codes::Encoding);
    // Φᵢᵀ Dᵢᵀ cache for the k > pᵢ ordering when D never changes
    let mut projected: [Option<Tensor3>; 3] = [None, None, None];

    let mut f_prev = objective_value(&model, x_eff, mask, cfg)?;
    let mut objective_trace = Vec::new();
    let mut fit_trace = Vec::new();
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        for m0 in 0..3 {
            let mode = m0 + 1;
            let (ma, mb) = other_modes(m0);
            let mut a = factors[ma].clone();
            scale_columns(&mut a, &model.scale);
            let b = &factors[mb];
            let gram = kr_gram(&a, b)?;
            let dict = &model.dictionaries[m0];
            let phi = dict.atoms();

            let data = match &working {
                Working::Dense(d) if k > dict.atom_count() => {
                    let reuse = cfg.impute == ImputeMode::None;
                    let proj = match (&projected[m0], reuse) {
                        (Some(p), true) => Cow::Borrowed(p),
                        _ => {
                            let p = d.mode_product(mode, &phi.transpose())?;
                            if reuse {
                                projected[m0] = Some(p);
                                Cow::Borrowed(projected[m0].as_ref().unwrap())
                            } else {
                                Cow::Owned(p)
                            }
                        }
                    };
                    mttkrp(&proj, mode, &a, b)?
                }
                _ => phi.transpose() * working.mttkrp(mode, &a, b)?,
            };

            let rho = cfg.rho[m0];
            // The Z and Γ updates use the convention ⟨Γ, Z − Y⟩, under which
            // the Y-subproblem's proximal term is ρ/2‖Y − Z − Γ/ρ‖²; the
            // closed forms take the multiplier in the opposite convention.
            let gfix = -&model.gamma[m0];
            let y_new = match dict.gram_evd() {
                None => solve_y_orthogonal(&data, &gram, &model.z[m0], &gfix, rho)?,
                Some(evd) => {
                    solve_y_general(&data, evd, &gram, &model.z[m0], &gfix, rho)?
                }
            };
            let (y_norm, s) = normalize_factors(&y_new);
            model.scale.component_mul_assign(&s);
            let z = update_z(&y_norm, &model.gamma[m0], cfg.lambda[m0], rho);
            model.gamma[m0] = update_dual(&model.gamma[m0], &z, &y_norm, rho);
            model.z[m0] = z;
            model.y[m0] = y_norm;
            factors[m0] = phi * &model.y[m0];
        }

        // D refresh, objective and fit
        let masked_sse = match cfg.impute {
            ImputeMode::Dense => {
                let xd = match x_eff {
                    TensorRef::Dense(xd) => xd,
                    TensorRef::Sparse(_) => unreachable!("dense imputation densifies its input"),
                };
                let recon = reconstruct(&factors[0], &factors[1], &factors[2], &model.scale)?;
                let sse = crate::tensor::sse(xd, &recon, mask)?;
                let m = dense_mask.as_ref().expect("dense imputation has a mask");
                working = Working::Dense(Cow::Owned(update_d_dense(&recon, xd, m, cfg.lambda_d)?));
                sse
            }
            ImputeMode::Sparse => {
                let xs = match x_eff {
                    TensorRef::Sparse(xs) => xs,
                    TensorRef::Dense(_) => unreachable!("sparse imputation sparsifies its input"),
                };
                working = Working::Sparse(Cow::Owned(update_d_sparse(&model, xs, &missing_idx)?));
                sparse_masked_sse(xs, mask, &factors, &model.scale)?
            }
            ImputeMode::None => match x_eff {
                TensorRef::Dense(xd) => {
                    let recon = reconstruct(&factors[0], &factors[1], &factors[2], &model.scale)?;
                    crate::tensor::sse(xd, &recon, mask)?
                }
                TensorRef::Sparse(xs) => sparse_masked_sse(xs, mask, &factors, &model.scale)?,
            },
        };
        let f = 0.5 * masked_sse + l1_penalty(&model.y, &cfg.lambda);
        if !f.is_finite() {
            return Err(MdtdError::Diverged { iteration: iter });
        }
        objective_trace.push(f);
        fit_trace.push(fit_value(masked_sse, x_norm_sq));
        log::debug!("iter {iter}: objective {f:.6e}");
        let primal = model
            .z
            .iter()
            .zip(&model.y)
            .map(|(z, y)| (z - y).amax())
            .fold(0.0, f64::max);
        if (f - f_prev).abs() <= cfg.epsilon && primal <= cfg.primal_tol {
            converged = true;
            break;
        }
        f_prev = f;
    }

    let sparse_factors = model.expanded(Codes::Proxy);
    let sse = match x {
        TensorRef::Dense(xd) => {
            let r = reconstruct(&sparse_factors[0], &sparse_factors[1], &sparse_factors[2], &model.scale)?;
            crate::tensor::sse(xd, &r, mask)?
        }
        TensorRef::Sparse(xs) => sparse_masked_sse(xs, mask, &sparse_factors, &model.scale)?,
    };
    let report = FitReport {
        iterations: objective_trace.len(),
        objective_trace,
        fit_trace,
        converged,
        sse,
        nnz: model.nnz(),
        fit: fit_value(sse, x_norm_sq),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn fit_value(sse: f64, norm_sq: f64) -> f64 {
    if norm_sq > 0.0 {
        1.0 - (sse / norm_sq).sqrt()
    } else {
        f64::NAN
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{identity_dictionary, ramanujan_dictionary, DictionaryKind};
    use crate::tensor::unfold;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn orthogonal_update_trivial_cases() {
        let zero = DMatrix::<f64>::zeros(1, 1);
        let y = solve_y_orthogonal(&zero, &zero, &zero, &zero, 1.0).unwrap();
        assert_eq!(y[(0, 0)], 0.0);
        // data 2, ρZ − Γ = 1, gram 3, ρ = 1
        let y = solve_y_orthogonal(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 3.0),
            &DMatrix::from_element(1, 1, 1.0),
            &zero,
            1.0,
        )
        .unwrap();
        assert!((y[(0, 0)] - 0.75).abs() < 1e-15);
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert!(solve_y_orthogonal(&zero, &nan, &zero, &zero, 1.0).is_err());
    }

    #[test]
    fn general_update_trivial_cases() {
        // p_d = 4, p_v = 9, ρ = 1, C = 74 → 2
        let evd = GramEvd {
            vectors: DMatrix::identity(1, 1),
            values: DVector::from_element(1, 4.0),
        };
        let zero = DMatrix::<f64>::zeros(1, 1);
        let y = solve_y_general(
            &DMatrix::from_element(1, 1, 74.0),
            &evd,
            &DMatrix::from_element(1, 1, 9.0),
            &zero,
            &zero,
            1.0,
        )
        .unwrap();
        assert!((y[(0, 0)] - 2.0).abs() < 1e-14);

        // zero dictionary Gram → Y = C/ρ
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let evd0 = GramEvd {
            vectors: DMatrix::identity(3, 3),
            values: DVector::zeros(3),
        };
        let c = rand_mat(3, 2, &mut rng);
        let g = rand_mat(2, 2, &mut rng);
        let g = &g * g.transpose();
        let y = solve_y_general(&c, &evd0, &g, &DMatrix::zeros(3, 2), &DMatrix::zeros(3, 2), 2.0)
            .unwrap();
        assert!((y - c / 2.0).amax() < 1e-14);
    }

    #[test]
    fn update_paths_agree_for_orthonormal_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ni, nj, nt, k) = (5, 4, 6, 3);
        let x = Tensor3::from_fn([ni, nj, nt], |_, _, _| rng.random_range(-1.0..1.0));
        let dict = identity_dictionary(ni).unwrap();
        let a = rand_mat(nj, k, &mut rng);
        let b = rand_mat(nt, k, &mut rng);
        let z = rand_mat(ni, k, &mut rng);
        let g = rand_mat(ni, k, &mut rng);
        let d1 = unfold(&x, 1).unwrap();
        let yo = update_y_orthogonal(&d1, &dict, &a, &b, &z, &g, 0.7).unwrap();
        let yg = update_y_general(&d1, &dict, &a, &b, &z, &g, 0.7).unwrap();
        assert!((yo - yg).amax() < 1e-8);
    }

    #[test]
    fn normalization_cases() {
        let y = DMatrix::from_column_slice(2, 2, &[2.0, -4.0, 0.0, 0.0]);
        let (n, s) = normalize_factors(&y);
        assert_eq!(n.column(0).as_slice(), &[0.5, -1.0]);
        assert_eq!(s[0], 4.0);
        assert_eq!(s[1], 1e-12);
        assert_eq!(n.column(1).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn soft_threshold_cases() {
        let y = DMatrix::from_row_slice(1, 3, &[2.5, -0.5, -3.0]);
        let z = update_z(&y, &DMatrix::zeros(1, 3), 1.0, 1.0);
        assert_eq!(z.as_slice(), &[1.5, 0.0, -2.0]);
        let z = update_z(&y, &DMatrix::zeros(1, 3), 0.0, 1.0);
        assert_eq!(z, y);
        let g = DMatrix::from_element(1, 3, 1.0);
        let h = update_z(&y, &g, 0.0, 2.0);
        assert_eq!(h.as_slice(), &[2.0, -1.0, -3.5]);
    }

    #[test]
    fn dual_update_cases() {
        let y = DMatrix::from_element(2, 2, 0.3);
        let g = DMatrix::from_element(2, 2, 0.7);
        assert_eq!(update_dual(&g, &y, &y, 5.0), g);
        let z = DMatrix::from_element(1, 1, 1.0);
        let out = update_dual(&DMatrix::zeros(1, 1), &z, &DMatrix::zeros(1, 1), 2.0);
        assert_eq!(out[(0, 0)], 2.0);
    }

    #[test]
    fn dense_d_update_cases() {
        let recon = Tensor3::from_vec([1, 1, 2], vec![2.0, 5.0]).unwrap();
        let x = Tensor3::from_vec([1, 1, 2], vec![4.0, 9.0]).unwrap();
        let mask = Mask::from_observed([1, 1, 2], vec![true, false]).unwrap();
        let d = update_d_dense(&recon, &x, &mask, 1.0).unwrap();
        assert_eq!(d.as_slice(), &[3.0, 5.0]);
        let none = Mask::from_observed([1, 1, 2], vec![false, false]).unwrap();
        assert_eq!(update_d_dense(&recon, &x, &none, 1.0).unwrap(), recon);
        let all = Mask::all_observed([1, 1, 2]);
        let d = update_d_dense(&recon, &x, &all, 1e8).unwrap();
        for (dv, xv) in d.as_slice().iter().zip(x.as_slice()) {
            assert!((dv - xv).abs() / xv.abs() < 1e-6);
        }
        assert!(update_d_dense(&recon, &Tensor3::zeros([1, 2, 1]), &all, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let mut c = SolverConfig {
            rho: [1.0, 0.0, 1.0],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.rho = [1.0; 3];
        c.lambda = [-1.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        c.lambda = [0.0; 3];
        c.rank = 0;
        assert!(c.validate().is_err());
        assert_eq!("sparse".parse::<ImputeMode>().unwrap(), ImputeMode::Sparse);
        assert!("x".parse::<ImputeMode>().is_err());
    }

    #[test]
    fn solve_rejects_mismatched_dictionaries() {
        let x = Tensor3::zeros([3, 4, 5]);
        let dicts = [
            identity_dictionary(3).unwrap(),
            identity_dictionary(3).unwrap(),
            identity_dictionary(5).unwrap(),
        ];
        let cfg = SolverConfig {
            rank: 2,
            ..Default::default()
        };
        assert!(matches!(
            solve(&x, None, dicts, &cfg),
            Err(MdtdError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn objective_zero_model_is_half_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor3::from_fn([3, 4, 10], |_, _, _| rng.random_range(-1.0..1.0));
        let dicts = [
            identity_dictionary(3).unwrap(),
            identity_dictionary(4).unwrap(),
            ramanujan_dictionary(10, 3).unwrap(),
        ];
        let mut model = init_model(dicts, 2, 0).unwrap();
        for m in 0..3 {
            model.y[m].fill(0.0);
        }
        let cfg = SolverConfig {
            rank: 2,
            lambda: [0.3; 3],
            ..Default::default()
        };
        let f = objective_value(&model, (&x).into(), None, &cfg).unwrap();
        assert!((f - 0.5 * x.frobenius_norm_sq()).abs() < 1e-12);
        assert_eq!(model.dictionaries[2].kind(), DictionaryKind::Ramanujan);
        assert!(model.dictionaries[2].gram_evd().is_some());
    }
}
