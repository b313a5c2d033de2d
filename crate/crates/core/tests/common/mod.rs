//! Test-only reference implementations, written from the definitions
//! with plain loops and dense solves.

#![allow(dead_code)]

use mdtd_core::Tensor3;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_tensor(dims: [usize; 3], rng: &mut impl Rng) -> Tensor3 {
    Tensor3::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

/// `Σ_r s_r a_r ∘ b_r ∘ c_r` by triple loop.
pub fn reconstruct_loop(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, s: &DVector<f64>) -> Tensor3 {
    let dims = [a.nrows(), b.nrows(), c.nrows()];
    let mut x = Tensor3::zeros(dims);
    for t in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut v = 0.0;
                for r in 0..s.len() {
                    v += s[r] * a[(i, r)] * b[(j, r)] * c[(t, r)];
                }
                x.set(i, j, t, v);
            }
        }
    }
    x
}

/// Mode unfolding straight from the index definition (`mode` 1-based):
/// rows enumerate the two remaining indices, lower mode fastest.
pub fn unfold_loop(x: &Tensor3, mode: usize) -> DMatrix<f64> {
    let [ni, nj, nt] = x.dims();
    match mode {
        1 => DMatrix::from_fn(nj * nt, ni, |row, i| x.get(i, row % nj, row / nj)),
        2 => DMatrix::from_fn(ni * nt, nj, |row, j| x.get(row % ni, j, row / ni)),
        3 => DMatrix::from_fn(ni * nj, nt, |row, t| x.get(row % ni, row / ni, t)),
        _ => panic!("mode"),
    }
}

/// Column-wise Kronecker product, first argument's index slowest.
pub fn khatri_rao_loop(b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.ncols();
    DMatrix::from_fn(a.nrows() * b.nrows(), k, |row, r| {
        a[(row % a.nrows(), r)] * b[(row / a.nrows(), r)]
    })
}

/// Solves `ΦᵀΦ·Y·G + ρY = RHS` through the vectorized system
/// `(Gᵀ ⊗ ΦᵀΦ + ρI) vec(Y) = vec(RHS)` with a dense LU.
pub fn vec_trick_solve(phi: &DMatrix<f64>, g: &DMatrix<f64>, rhs: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let ptp = phi.transpose() * phi;
    let n = ptp.nrows() * g.nrows();
    let m = g.transpose().kronecker(&ptp) + DMatrix::identity(n, n) * rho;
    let v = DVector::from_column_slice(rhs.as_slice());
    let sol = m.lu().solve(&v).expect("vec-trick system is nonsingular");
    DMatrix::from_column_slice(rhs.nrows(), rhs.ncols(), sol.as_slice())
}

pub fn sse_loop(x: &Tensor3, y: &Tensor3) -> f64 {
    x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Plain CP-ALS: each factor is the least-squares solution given the other
/// two, from unfoldings and explicit Khatri-Rao products. Best of `starts`
/// random initializations.
pub fn cp_als(x: &Tensor3, k: usize, starts: u64, iters: usize) -> (f64, [DMatrix<f64>; 3]) {
    let dims = x.dims();
    let unf = [unfold_loop(x, 1), unfold_loop(x, 2), unfold_loop(x, 3)];
    let mut best: Option<(f64, [DMatrix<f64>; 3])> = None;
    for start in 0..starts {
        let mut r = rng(1000 + start);
        let mut f = [0, 1, 2].map(|m| rand_mat(dims[m], k, &mut r));
        let mut prev = f64::INFINITY;
        for _ in 0..iters {
            for m in 0..3 {
                let (lo, hi) = match m {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let kr = khatri_rao_loop(&f[hi], &f[lo]);
                let gram = kr.transpose() * &kr;
                let rhs = unf[m].transpose() * &kr;
                let sol = gram
                    .clone()
                    .svd(true, true)
                    .solve(&rhs.transpose(), 1e-14)
                    .expect("svd solve");
                f[m] = sol.transpose();
            }
            let e = sse_loop(x, &reconstruct_loop(&f[0], &f[1], &f[2], &DVector::from_element(k, 1.0)));
            if prev.is_finite() && (prev - e).abs() <= 1e-12 * prev.max(1.0) {
                prev = e;
                break;
            }
            prev = e;
        }
        if best.as_ref().is_none_or(|(b, _)| prev < *b) {
            best = Some((prev, f));
        }
    }
    best.expect("at least one start")
}
