//! Dense and sparse 3-way tensors and the multilinear kernels built on them.
//!
//! Storage is column-major: cell `(i, j, t)` of a dense tensor with dims
//! `(I, J, T)` lives at `i + I * (j + J * t)`. The mode-`m` unfolding places
//! the vectorized slice for index `x` of mode `m` in column `x`; inside that
//! column the earlier remaining mode varies fastest. With that convention
//!
//! ```text
//! unfold(⟦F1, F2, F3⟧, m)ᵀ = Fm · (B ⊙ A)ᵀ
//! ```
//!
//! where `A`/`B` are the factors of the two other modes in ascending order
//! and `⊙` is [`khatri_rao`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{MdtdError, Result};

/// Factor, encoding, proxy and dual matrices: rows index a mode (or atoms),
/// columns index the rank.
pub type FactorMatrix = DMatrix<f64>;

/// Number of t-chunks used by the parallel kernels. Fixed so that the
/// summation order does not depend on the thread count.
const T_CHUNKS: usize = 16;

fn check_mode(mode: usize) -> Result<usize> {
    match mode {
        1..=3 => Ok(mode - 1),
        _ => Err(MdtdError::InvalidMode(mode)),
    }
}

/// The two modes other than `mode` (0-based), ascending.
pub(crate) fn other_modes(mode0: usize) -> (usize, usize) {
    match mode0 {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Dense `I × J × T` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(MdtdError::ShapeMismatch(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(MdtdError::ShapeMismatch(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for t in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, t));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, t: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * t)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.data[self.offset(i, j, t)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, t: usize, v: f64) {
        let o = self.offset(i, j, t);
        self.data[o] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    /// Mode-`mode` product with `m` (shape `p × dims[mode]`): replaces that
    /// mode's dimension by `p`.
    pub fn mode_product(&self, mode: usize, m: &DMatrix<f64>) -> Result<Tensor3> {
        let m0 = check_mode(mode)?;
        if m.ncols() != self.dims[m0] {
            return Err(MdtdError::ShapeMismatch(format!(
                "mode-{mode} product: matrix has {} columns, mode length {}",
                m.ncols(),
                self.dims[m0]
            )));
        }
        let unfolded = unfold(self, mode)?;
        let projected = unfolded * m.transpose();
        let mut dims = self.dims;
        dims[m0] = m.nrows();
        fold(&projected, mode, dims)
    }
}

/// Mode-`mode` unfolding (`mode` ∈ {1, 2, 3}).
///
/// Shapes: mode 1 → `(J·T, I)`, mode 2 → `(I·T, J)`, mode 3 → `(I·J, T)`.
pub fn unfold(x: &Tensor3, mode: usize) -> Result<DMatrix<f64>> {
    let m0 = check_mode(mode)?;
    let [ni, nj, nt] = x.dims;
    let out = match m0 {
        0 => DMatrix::from_fn(nj * nt, ni, |row, i| x.get(i, row % nj, row / nj)),
        1 => DMatrix::from_fn(ni * nt, nj, |row, j| x.get(row % ni, j, row / ni)),
        // column-major storage is already the mode-3 unfolding
        _ => DMatrix::from_column_slice(ni * nj, nt, &x.data),
    };
    Ok(out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &DMatrix<f64>, mode: usize, dims: [usize; 3]) -> Result<Tensor3> {
    let m0 = check_mode(mode)?;
    let [ni, nj, nt] = dims;
    let expected = match m0 {
        0 => (nj * nt, ni),
        1 => (ni * nt, nj),
        _ => (ni * nj, nt),
    };
    if m.shape() != expected {
        return Err(MdtdError::ShapeMismatch(format!(
            "cannot fold {:?} matrix on mode {mode} into dims {dims:?} (expected {:?})",
            m.shape(),
            expected
        )));
    }
    let t = match m0 {
        0 => Tensor3::from_fn(dims, |i, j, t| m[(j + nj * t, i)]),
        1 => Tensor3::from_fn(dims, |i, j, t| m[(i + ni * t, j)]),
        _ => Tensor3::from_fn(dims, |i, j, t| m[(i + ni * j, t)]),
    };
    Ok(t)
}

fn check_same_rank(mats: &[&FactorMatrix]) -> Result<usize> {
    let k = mats[0].ncols();
    if mats.iter().any(|m| m.ncols() != k) {
        let cols: Vec<usize> = mats.iter().map(|m| m.ncols()).collect();
        return Err(MdtdError::RankMismatch(format!("column counts {cols:?}")));
    }
    Ok(k)
}

/// Khatri-Rao product `b ⊙ a`: column `r` is `b[:, r] ⊗ a[:, r]` with the row
/// index of `a` varying fastest.
pub fn khatri_rao(b: &FactorMatrix, a: &FactorMatrix) -> Result<DMatrix<f64>> {
    let k = check_same_rank(&[a, b])?;
    let (ra, rb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(ra * rb, k);
    for r in 0..k {
        let mut col = out.column_mut(r);
        for ib in 0..rb {
            let bv = b[(ib, r)];
            for ia in 0..ra {
                col[ia + ra * ib] = a[(ia, r)] * bv;
            }
        }
    }
    Ok(out)
}

/// `(b ⊙ a)ᵀ(b ⊙ a)` computed as `(bᵀb) ⊡ (aᵀa)` without forming the product.
pub fn kr_gram(a: &FactorMatrix, b: &FactorMatrix) -> Result<DMatrix<f64>> {
    check_same_rank(&[a, b])?;
    let ga = a.transpose() * a;
    let gb = b.transpose() * b;
    Ok(gb.component_mul(&ga))
}

fn check_recon_args(
    a: &FactorMatrix,
    b: &FactorMatrix,
    c: &FactorMatrix,
    s: &DVector<f64>,
) -> Result<usize> {
    let k = check_same_rank(&[a, b, c])?;
    if s.len() != k {
        return Err(MdtdError::RankMismatch(format!(
            "scale vector has length {}, rank is {k}",
            s.len()
        )));
    }
    Ok(k)
}

#[inline]
fn cell_value(
    a: &FactorMatrix,
    b: &FactorMatrix,
    c: &FactorMatrix,
    s: &DVector<f64>,
    i: usize,
    j: usize,
    t: usize,
) -> f64 {
    let mut acc = 0.0;
    for r in 0..a.ncols() {
        let w = s[r] * b[(j, r)] * c[(t, r)];
        acc += a[(i, r)] * w;
    }
    acc
}

/// Dense reconstruction `X(i,j,t) = Σ_r s_r a(i,r) b(j,r) c(t,r)`.
pub fn reconstruct(
    a: &FactorMatrix,
    b: &FactorMatrix,
    c: &FactorMatrix,
    s: &DVector<f64>,
) -> Result<Tensor3> {
    let k = check_recon_args(a, b, c, s)?;
    let dims = [a.nrows(), b.nrows(), c.nrows()];
    let mut out = Tensor3::zeros(dims);
    let slice_len = dims[0] * dims[1];
    out.data
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each(|(t, slice)| {
            let mut w = vec![0.0; k];
            for j in 0..dims[1] {
                for (r, wr) in w.iter_mut().enumerate() {
                    *wr = s[r] * b[(j, r)] * c[(t, r)];
                }
                let fiber = &mut slice[j * dims[0]..(j + 1) * dims[0]];
                for (i, cell) in fiber.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (r, wr) in w.iter().enumerate() {
                        acc += a[(i, r)] * wr;
                    }
                    *cell = acc;
                }
            }
        });
    Ok(out)
}

/// Reconstruction evaluated only at `idx` (0-based). Values are bit-identical
/// to [`reconstruct`] at the same cells.
pub fn reconstruct_at(
    a: &FactorMatrix,
    b: &FactorMatrix,
    c: &FactorMatrix,
    s: &DVector<f64>,
    idx: &[[usize; 3]],
) -> Result<Vec<f64>> {
    check_recon_args(a, b, c, s)?;
    let dims = [a.nrows(), b.nrows(), c.nrows()];
    idx.iter()
        .map(|&[i, j, t]| {
            if i >= dims[0] || j >= dims[1] || t >= dims[2] {
                Err(MdtdError::IndexOutOfRange { i, j, t, dims })
            } else {
                Ok(cell_value(a, b, c, s, i, j, t))
            }
        })
        .collect()
}

/// Matricized tensor times Khatri-Rao product `X_modeᵀ (b ⊙ a)` for a dense
/// tensor, where `a`, `b` are the factors of the two other modes in ascending
/// mode order. Never materializes the Khatri-Rao product.
pub fn mttkrp(x: &Tensor3, mode: usize, a: &FactorMatrix, b: &FactorMatrix) -> Result<DMatrix<f64>> {
    let m0 = check_mode(mode)?;
    let k = check_same_rank(&[a, b])?;
    let dims = x.dims;
    let (ma, mb) = other_modes(m0);
    if a.nrows() != dims[ma] || b.nrows() != dims[mb] {
        return Err(MdtdError::ShapeMismatch(format!(
            "mttkrp mode {mode}: factor rows ({}, {}) vs dims {dims:?}",
            a.nrows(),
            b.nrows()
        )));
    }
    let [ni, nj, nt] = dims;
    let chunk = nt.div_ceil(T_CHUNKS).max(1);
    let partials: Vec<DMatrix<f64>> = (0..nt)
        .step_by(chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|t0| {
            let mut m = DMatrix::<f64>::zeros(dims[m0], k);
            let mut w = vec![0.0; k];
            for t in t0..(t0 + chunk).min(nt) {
                for j in 0..nj {
                    let base = ni * (j + nj * t);
                    let fiber = &x.data[base..base + ni];
                    match m0 {
                        0 => {
                            for (r, wr) in w.iter_mut().enumerate() {
                                *wr = a[(j, r)] * b[(t, r)];
                            }
                            for (r, wr) in w.iter().enumerate() {
                                let mut col = m.column_mut(r);
                                for (i, v) in fiber.iter().enumerate() {
                                    col[i] += v * wr;
                                }
                            }
                        }
                        1 => {
                            for r in 0..k {
                                let dot: f64 =
                                    fiber.iter().enumerate().map(|(i, v)| v * a[(i, r)]).sum();
                                m[(j, r)] += dot * b[(t, r)];
                            }
                        }
                        _ => {
                            for r in 0..k {
                                let dot: f64 =
                                    fiber.iter().enumerate().map(|(i, v)| v * a[(i, r)]).sum();
                                m[(t, r)] += dot * b[(j, r)];
                            }
                        }
                    }
                }
            }
            m
        })
        .collect();
    let mut out = DMatrix::zeros(dims[m0], k);
    for p in partials {
        out += p;
    }
    Ok(out)
}

/// Sparse tensor in coordinate format. Indices are 0-based in memory (the
/// text format is 1-based), sorted by linear offset and unique.
///
/// Entries are explicit: a stored value may be zero (imputed cells keep
/// their slot), but [`SparseTensor3::from_dense`] only stores nonzeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor3 {
    dims: [usize; 3],
    indices: Vec<[usize; 3]>,
    values: Vec<f64>,
}

fn linear(dims: [usize; 3], [i, j, t]: [usize; 3]) -> usize {
    i + dims[0] * (j + dims[1] * t)
}

impl SparseTensor3 {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from unsorted 0-based triplets; rejects duplicates and
    /// out-of-range indices.
    pub fn from_triplets(dims: [usize; 3], triplets: Vec<([usize; 3], f64)>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(MdtdError::ShapeMismatch(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        let mut triplets = triplets;
        for &([i, j, t], _) in &triplets {
            if i >= dims[0] || j >= dims[1] || t >= dims[2] {
                return Err(MdtdError::IndexOutOfRange { i, j, t, dims });
            }
        }
        triplets.sort_by_key(|(idx, _)| linear(dims, *idx));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 {
                let [i, j, t] = w[0].0;
                return Err(MdtdError::DuplicateEntry(i, j, t));
            }
        }
        let (indices, values) = triplets.into_iter().unzip();
        Ok(Self {
            dims,
            indices,
            values,
        })
    }

    pub fn from_dense(x: &Tensor3) -> Self {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for t in 0..x.dims[2] {
            for j in 0..x.dims[1] {
                for i in 0..x.dims[0] {
                    let v = x.get(i, j, t);
                    if v != 0.0 {
                        indices.push([i, j, t]);
                        values.push(v);
                    }
                }
            }
        }
        Self {
            dims: x.dims,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor3 {
        let mut out = Tensor3::zeros(self.dims);
        for (&[i, j, t], &v) in self.indices.iter().zip(&self.values) {
            out.set(i, j, t, v);
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Stored entry count.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indices(&self) -> &[[usize; 3]] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        let key = linear(self.dims, idx);
        self.indices
            .binary_search_by_key(&key, |&p| linear(self.dims, p))
            .is_ok()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Sparse counterpart of [`mttkrp`]; cost is `nnz · k`.
    pub fn mttkrp(&self, mode: usize, a: &FactorMatrix, b: &FactorMatrix) -> Result<DMatrix<f64>> {
        let m0 = check_mode(mode)?;
        let k = check_same_rank(&[a, b])?;
        let (ma, mb) = other_modes(m0);
        if a.nrows() != self.dims[ma] || b.nrows() != self.dims[mb] {
            return Err(MdtdError::ShapeMismatch(format!(
                "mttkrp mode {mode}: factor rows ({}, {}) vs dims {:?}",
                a.nrows(),
                b.nrows(),
                self.dims
            )));
        }
        let mut out = DMatrix::zeros(self.dims[m0], k);
        for (idx, v) in self.iter() {
            let row = idx[m0];
            let (ja, jb) = (idx[ma], idx[mb]);
            for r in 0..k {
                out[(row, r)] += v * a[(ja, r)] * b[(jb, r)];
            }
        }
        Ok(out)
    }
}

/// Binary observation mask: `true` = observed, `false` = missing.
///
/// Either a dense bitmap or a sparse sorted list of the missing cells.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    Dense {
        dims: [usize; 3],
        observed: Vec<bool>,
    },
    Missing {
        dims: [usize; 3],
        missing: Vec<[usize; 3]>,
    },
}

impl Mask {
    pub fn all_observed(dims: [usize; 3]) -> Self {
        Mask::Missing {
            dims,
            missing: Vec::new(),
        }
    }

    /// Dense mask from a column-major bitmap.
    pub fn from_observed(dims: [usize; 3], observed: Vec<bool>) -> Result<Self> {
        if observed.len() != dims[0] * dims[1] * dims[2] {
            return Err(MdtdError::ShapeMismatch(format!(
                "mask has {} cells, dims {dims:?}",
                observed.len()
            )));
        }
        Ok(Mask::Dense { dims, observed })
    }

    /// Sparse mask from a list of missing cells (deduplicated and sorted).
    pub fn from_missing(dims: [usize; 3], mut missing: Vec<[usize; 3]>) -> Result<Self> {
        for &[i, j, t] in &missing {
            if i >= dims[0] || j >= dims[1] || t >= dims[2] {
                return Err(MdtdError::IndexOutOfRange { i, j, t, dims });
            }
        }
        missing.sort_by_key(|&p| linear(dims, p));
        missing.dedup();
        Ok(Mask::Missing { dims, missing })
    }

    pub fn dims(&self) -> [usize; 3] {
        match self {
            Mask::Dense { dims, .. } | Mask::Missing { dims, .. } => *dims,
        }
    }

    pub fn is_observed(&self, i: usize, j: usize, t: usize) -> bool {
        match self {
            Mask::Dense { dims, observed } => observed[linear(*dims, [i, j, t])],
            Mask::Missing { dims, missing } => {
                let key = linear(*dims, [i, j, t]);
                missing
                    .binary_search_by_key(&key, |&p| linear(*dims, p))
                    .is_err()
            }
        }
    }

    pub fn missing_count(&self) -> usize {
        match self {
            Mask::Dense { observed, .. } => observed.iter().filter(|o| !**o).count(),
            Mask::Missing { missing, .. } => missing.len(),
        }
    }

    pub fn observed_count(&self) -> usize {
        let [a, b, c] = self.dims();
        a * b * c - self.missing_count()
    }

    /// Missing cells in linear-offset order.
    pub fn missing_indices(&self) -> Vec<[usize; 3]> {
        match self {
            Mask::Missing { missing, .. } => missing.clone(),
            Mask::Dense { dims, observed } => {
                let [ni, nj, _] = *dims;
                observed
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| !**o)
                    .map(|(o, _)| [o % ni, (o / ni) % nj, o / (ni * nj)])
                    .collect()
            }
        }
    }

    /// Column-major observed bitmap.
    pub fn to_observed(&self) -> Vec<bool> {
        match self {
            Mask::Dense { observed, .. } => observed.clone(),
            Mask::Missing { dims, missing } => {
                let mut out = vec![true; dims[0] * dims[1] * dims[2]];
                for &p in missing {
                    out[linear(*dims, p)] = false;
                }
                out
            }
        }
    }
}

fn check_dims(a: [usize; 3], b: [usize; 3], what: &str) -> Result<()> {
    if a != b {
        return Err(MdtdError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Sum of squared differences over the observed cells of `mask` (all cells
/// when `mask` is `None`).
pub fn sse(x: &Tensor3, y: &Tensor3, mask: Option<&Mask>) -> Result<f64> {
    check_dims(x.dims, y.dims, "sse")?;
    let diff = |o: usize| {
        let d = x.data[o] - y.data[o];
        d * d
    };
    match mask {
        None => Ok((0..x.len()).map(diff).sum()),
        Some(m) => {
            check_dims(x.dims, m.dims(), "sse mask")?;
            let observed = m.to_observed();
            Ok((0..x.len()).filter(|&o| observed[o]).map(diff).sum())
        }
    }
}

/// `sse / (number of selected cells)`.
pub fn mse(x: &Tensor3, y: &Tensor3, mask: Option<&Mask>) -> Result<f64> {
    let count = match mask {
        None => x.len(),
        Some(m) => m.observed_count(),
    };
    let total = sse(x, y, mask)?;
    if count == 0 {
        return Err(MdtdError::DivisionByZero("mask selects no cells"));
    }
    Ok(total / count as f64)
}

/// Number of matrix entries with `|v| > tol`.
pub fn nnz_matrix(m: &DMatrix<f64>, tol: f64) -> usize {
    m.iter().filter(|v| v.abs() > tol).count()
}

/// Number of tensor cells with `|v| > tol`.
pub fn nnz_tensor(x: &Tensor3, tol: f64) -> usize {
    x.data.iter().filter(|v| v.abs() > tol).count()
}

/// `1 − ‖x − recon‖_F / ‖x‖_F`.
pub fn fit(x: &Tensor3, recon: &Tensor3) -> Result<f64> {
    let norm = x.frobenius_norm();
    if norm == 0.0 {
        return Err(MdtdError::DivisionByZero("input tensor has zero norm"));
    }
    Ok(1.0 - sse(x, recon, None)?.sqrt() / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_2x2x2() -> Tensor3 {
        // slice t=1 = [[1,3],[2,4]], slice t=2 = [[5,7],[6,8]]
        Tensor3::from_vec([2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap()
    }

    fn random_tensor(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unfold_mode1_hand_example() {
        let x = example_2x2x2();
        assert_eq!(x.get(0, 1, 0), 3.0);
        assert_eq!(x.get(1, 0, 1), 6.0);
        let u = unfold(&x, 1).unwrap();
        let expected = DMatrix::from_row_slice(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(u, expected);
    }

    #[test]
    fn fold_hand_example_and_errors() {
        let m = DMatrix::from_row_slice(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(fold(&m, 1, [2, 2, 2]).unwrap(), example_2x2x2());
        let bad = DMatrix::<f64>::zeros(5, 2);
        assert!(matches!(
            fold(&bad, 1, [2, 2, 2]),
            Err(MdtdError::ShapeMismatch(_))
        ));
        assert!(matches!(unfold(&example_2x2x2(), 4), Err(MdtdError::InvalidMode(4))));
        assert!(matches!(unfold(&example_2x2x2(), 0), Err(MdtdError::InvalidMode(0))));
    }

    #[test]
    fn unfold_mode2_entrywise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([3, 4, 5], &mut rng);
        let u = unfold(&x, 2).unwrap();
        assert_eq!(u.shape(), (15, 4));
        for i in 0..3 {
            for j in 0..4 {
                for t in 0..5 {
                    assert_eq!(u[(i + 3 * t, j)], x.get(i, j, t));
                }
            }
        }
        let u3 = unfold(&x, 3).unwrap();
        assert_eq!(u3.shape(), (12, 5));
        assert_eq!(unfold(&x, 1).unwrap().shape(), (20, 3));
    }

    #[test]
    fn khatri_rao_small_cases() {
        let a = DMatrix::from_column_slice(2, 1, &[1., 2.]);
        let b = DMatrix::from_column_slice(2, 1, &[3., 4.]);
        let kr = khatri_rao(&b, &a).unwrap();
        assert_eq!(kr.as_slice(), &[3., 6., 4., 8.]);
        assert_eq!(kr_gram(&a, &b).unwrap()[(0, 0)], 125.0);

        let id = DMatrix::<f64>::identity(2, 2);
        let kr = khatri_rao(&id, &id).unwrap();
        assert_eq!(kr.column(0).as_slice(), &[1., 0., 0., 0.]);
        assert_eq!(kr.column(1).as_slice(), &[0., 0., 0., 1.]);
        assert_eq!(kr_gram(&id, &id).unwrap(), id);

        let c = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(khatri_rao(&c, &a), Err(MdtdError::RankMismatch(_))));
        assert!(kr_gram(&a, &c).is_err());
    }

    #[test]
    fn reconstruct_rank_one_and_zero_scale() {
        let a = DMatrix::from_column_slice(2, 1, &[1., 2.]);
        let b = DMatrix::from_column_slice(2, 1, &[1., 0.]);
        let c = DMatrix::from_column_slice(2, 1, &[1., 1.]);
        let x = reconstruct(&a, &b, &c, &DVector::from_element(1, 1.0)).unwrap();
        for i in 0..2 {
            for t in 0..2 {
                assert_eq!(x.get(i, 0, t), a[(i, 0)]);
                assert_eq!(x.get(i, 1, t), 0.0);
            }
        }
        let z = reconstruct(&a, &b, &c, &DVector::zeros(1)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(reconstruct(&a, &b, &c, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn reconstruct_at_matches_dense_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b, c) = (
            random_matrix(4, 5, &mut rng),
            random_matrix(6, 5, &mut rng),
            random_matrix(7, 5, &mut rng),
        );
        let s = DVector::from_fn(5, |_, _| rng.random_range(0.1..2.0));
        let dense = reconstruct(&a, &b, &c, &s).unwrap();
        let idx: Vec<[usize; 3]> = (0..100)
            .map(|_| {
                [
                    rng.random_range(0..4),
                    rng.random_range(0..6),
                    rng.random_range(0..7),
                ]
            })
            .collect();
        let vals = reconstruct_at(&a, &b, &c, &s, &idx).unwrap();
        for (p, v) in idx.iter().zip(vals) {
            assert_eq!(v, dense.get(p[0], p[1], p[2]));
        }
        assert!(reconstruct_at(&a, &b, &c, &s, &[]).unwrap().is_empty());
        assert!(matches!(
            reconstruct_at(&a, &b, &c, &s, &[[4, 0, 0]]),
            Err(MdtdError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn mttkrp_dense_and_sparse_match_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [4, 5, 6];
        let x = random_tensor(dims, &mut rng);
        let sp = SparseTensor3::from_dense(&x);
        let f: Vec<DMatrix<f64>> = dims.iter().map(|&d| random_matrix(d, 3, &mut rng)).collect();
        for mode in 1..=3 {
            let (ma, mb) = other_modes(mode - 1);
            let explicit = unfold(&x, mode).unwrap().transpose()
                * khatri_rao(&f[mb], &f[ma]).unwrap();
            let fused = mttkrp(&x, mode, &f[ma], &f[mb]).unwrap();
            let sparse = sp.mttkrp(mode, &f[ma], &f[mb]).unwrap();
            assert!((&explicit - &fused).amax() < 1e-12);
            assert!((&explicit - &sparse).amax() < 1e-12);
        }
        assert!(mttkrp(&x, 1, &f[0], &f[2]).is_err());
    }

    #[test]
    fn mode_product_matches_unfolded_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor([3, 4, 5], &mut rng);
        let m = random_matrix(2, 4, &mut rng);
        let y = x.mode_product(2, &m).unwrap();
        assert_eq!(y.dims(), [3, 2, 5]);
        let v: f64 = (0..4).map(|j| m[(1, j)] * x.get(2, j, 3)).sum();
        assert!((y.get(2, 1, 3) - v).abs() < 1e-14);
    }

    #[test]
    fn sparse_construction_and_round_trip() {
        let x = example_2x2x2();
        let sp = SparseTensor3::from_dense(&x);
        assert_eq!(sp.nnz(), 8);
        assert_eq!(sp.to_dense(), x);
        assert!(matches!(
            SparseTensor3::from_triplets([2, 2, 2], vec![([0, 0, 0], 1.0), ([0, 0, 0], 2.0)]),
            Err(MdtdError::DuplicateEntry(0, 0, 0))
        ));
        assert!(matches!(
            SparseTensor3::from_triplets([2, 2, 2], vec![([0, 2, 0], 1.0)]),
            Err(MdtdError::IndexOutOfRange { .. })
        ));
        let sp = SparseTensor3::from_triplets([2, 2, 2], vec![([1, 1, 1], 1.0), ([0, 0, 0], 2.0)])
            .unwrap();
        assert_eq!(sp.indices(), &[[0, 0, 0], [1, 1, 1]]);
        assert!(sp.contains([1, 1, 1]));
        assert!(!sp.contains([1, 0, 1]));
    }

    #[test]
    fn mask_representations_agree() {
        let dims = [2, 3, 2];
        let m = Mask::from_missing(dims, vec![[1, 2, 1], [0, 0, 0], [1, 2, 1]]).unwrap();
        assert_eq!(m.missing_count(), 2);
        assert_eq!(m.observed_count(), 10);
        let dense = Mask::from_observed(dims, m.to_observed()).unwrap();
        assert_eq!(dense.missing_indices(), m.missing_indices());
        assert!(!dense.is_observed(1, 2, 1));
        assert!(m.is_observed(1, 1, 1));
        assert!(Mask::from_missing(dims, vec![[2, 0, 0]]).is_err());
    }

    #[test]
    fn metrics_basic() {
        let x = Tensor3::from_vec([1, 1, 1], vec![2.0]).unwrap();
        let y = Tensor3::zeros([1, 1, 1]);
        assert_eq!(sse(&x, &y, None).unwrap(), 4.0);
        assert_eq!(mse(&x, &y, None).unwrap(), 4.0);
        assert_eq!(sse(&x, &x, None).unwrap(), 0.0);
        assert_eq!(fit(&x, &x).unwrap(), 1.0);
        assert!(matches!(fit(&y, &x), Err(MdtdError::DivisionByZero(_))));
        let none = Mask::from_observed([1, 1, 1], vec![false]).unwrap();
        assert!(matches!(mse(&x, &y, Some(&none)), Err(MdtdError::DivisionByZero(_))));
        let z = Tensor3::zeros([1, 2, 1]);
        assert!(matches!(sse(&x, &z, None), Err(MdtdError::ShapeMismatch(_))));
        let m = DMatrix::from_row_slice(1, 3, &[0.0, 1e-13, 0.5]);
        assert_eq!(nnz_matrix(&m, 0.0), 2);
        assert_eq!(nnz_matrix(&m, 1e-12), 1);
    }

    #[test]
    fn masked_sse_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [3, 4, 5];
        let x = random_tensor(dims, &mut rng);
        let y = random_tensor(dims, &mut rng);
        let observed: Vec<bool> = (0..60).map(|_| rng.random_bool(0.6)).collect();
        let mask = Mask::from_observed(dims, observed).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                for t in 0..5 {
                    if mask.is_observed(i, j, t) {
                        oracle += (x.get(i, j, t) - y.get(i, j, t)).powi(2);
                    }
                }
            }
        }
        assert!((sse(&x, &y, Some(&mask)).unwrap() - oracle).abs() < 1e-12);
    }
}
