//! Rank estimation by core consistency (CORCONDIA).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{MdtdError, Result};
use crate::solver::{solve, Codes, SolverConfig, TensorRef};
use crate::tensor::{FactorMatrix, Mask, Tensor3};

/// Dense `k×k×k` core.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreTensor {
    k: usize,
    data: Vec<f64>,
}

impl CoreTensor {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            data: vec![0.0; k * k * k],
        }
    }

    /// Superdiagonal core with ones on `g_rrr`.
    pub fn superdiagonal(k: usize) -> Self {
        let mut g = Self::zeros(k);
        for r in 0..k {
            g.set(r, r, r, 1.0);
        }
        g
    }

    pub fn from_tensor(t: Tensor3) -> Result<Self> {
        let [a, b, c] = t.dims();
        if a != b || b != c {
            return Err(MdtdError::ShapeMismatch(format!(
                "core must be a cube, got {a}×{b}×{c}"
            )));
        }
        Ok(Self {
            k: a,
            data: t.into_vec(),
        })
    }

    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn get(&self, p: usize, q: usize, r: usize) -> f64 {
        self.data[p + self.k * (q + self.k * r)]
    }

    pub fn set(&mut self, p: usize, q: usize, r: usize, v: f64) {
        self.data[p + self.k * (q + self.k * r)] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

const PINV_RTOL: f64 = 1e-12;

/// Moore–Penrose pseudoinverse via SVD with a relative singular-value cutoff.
/// Warns when the factor is numerically rank deficient.
fn pinv(m: &FactorMatrix, name: &str) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_RTOL * smax * m.nrows().max(m.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    if rank < m.ncols() {
        log::warn!(
            "factor {name} is rank deficient ({rank} of {} columns); using pseudoinverse",
            m.ncols()
        );
    }
    svd.pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
        .map_err(|e| MdtdError::Numerical(e.to_string()))
}

/// Least-squares core `G = X ×₁ A⁺ ×₂ B⁺ ×₃ C⁺`, i.e. the minimizer of
/// `‖vec(X) − (C⊗B⊗A) vec(G)‖²` without forming the Kronecker product.
pub fn fit_core<'a>(
    x: impl Into<TensorRef<'a>>,
    a: &FactorMatrix,
    b: &FactorMatrix,
    c: &FactorMatrix,
) -> Result<CoreTensor> {
    let x = x.into();
    let dims = x.dims();
    let k = a.ncols();
    if b.ncols() != k || c.ncols() != k {
        return Err(MdtdError::RankMismatch(format!(
            "factor column counts {}, {}, {}",
            k,
            b.ncols(),
            c.ncols()
        )));
    }
    for (m, f) in [a, b, c].into_iter().enumerate() {
        if f.nrows() != dims[m] {
            return Err(MdtdError::ShapeMismatch(format!(
                "factor {} has {} rows, mode length is {}",
                m + 1,
                f.nrows(),
                dims[m]
            )));
        }
    }
    let (pa, pb, pc) = (pinv(a, "A")?, pinv(b, "B")?, pinv(c, "C")?);
    match x {
        TensorRef::Dense(xd) => {
            let g = xd
                .mode_product(1, &pa)?
                .mode_product(2, &pb)?
                .mode_product(3, &pc)?;
            CoreTensor::from_tensor(g)
        }
        TensorRef::Sparse(xs) => {
            let mut g = CoreTensor::zeros(k);
            for ([i, j, t], v) in xs.iter() {
                for r in 0..k {
                    let vr = v * pc[(r, t)];
                    for q in 0..k {
                        let vq = vr * pb[(q, j)];
                        for p in 0..k {
                            g.data[p + k * (q + k * r)] += vq * pa[(p, i)];
                        }
                    }
                }
            }
            Ok(g)
        }
    }
}

/// `100·(1 − Σ(g − t)² / k)` with `t` the superdiagonal ones tensor.
pub fn core_consistency(g: &CoreTensor) -> f64 {
    let k = g.k;
    if k == 0 {
        return 0.0;
    }
    let mut off = 0.0;
    for r in 0..k {
        for q in 0..k {
            for p in 0..k {
                let target = if p == q && q == r { 1.0 } else { 0.0 };
                let d = g.get(p, q, r) - target;
                off += d * d;
            }
        }
    }
    100.0 * (1.0 - off / k as f64)
}

/// How the scored candidates are turned into a rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankRule {
    /// Highest score; ties go to the smaller rank.
    Argmax,
    /// Largest rank whose score reaches the threshold, falling back to
    /// [`RankRule::Argmax`] when no candidate does.
    Threshold(f64),
}

impl Default for RankRule {
    fn default() -> Self {
        RankRule::Threshold(90.0)
    }
}

impl FromStr for RankRule {
    type Err = MdtdError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MdtdError::InvalidArgument(format!("unknown rank rule `{s}`"));
        match s.split_once(':') {
            None if s == "argmax" => Ok(RankRule::Argmax),
            None if s == "threshold" => Ok(RankRule::default()),
            Some(("threshold", v)) => {
                let v: f64 = v.parse().map_err(|_| bad())?;
                if v.is_finite() {
                    Ok(RankRule::Threshold(v))
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for RankRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankRule::Argmax => f.write_str("argmax"),
            RankRule::Threshold(v) => write!(f, "threshold:{v}"),
        }
    }
}

/// Applies `rule` to candidates sorted by ascending rank. NaN scores never
/// win. `None` when there is nothing to choose from.
pub fn select_rank(entries: &[RankScore], rule: RankRule) -> Option<usize> {
    let argmax = || {
        entries
            .iter()
            .filter(|e| !e.score.is_nan())
            .fold(None::<&RankScore>, |best, e| match best {
                Some(b) if b.score >= e.score => Some(b),
                _ => Some(e),
            })
            .map(|e| e.rank)
    };
    match rule {
        RankRule::Argmax => argmax(),
        RankRule::Threshold(t) => entries
            .iter()
            .rev()
            .find(|e| e.score >= t)
            .map(|e| e.rank)
            .or_else(argmax),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub rank: usize,
    pub score: f64,
    pub sse: f64,
    pub nnz: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankScanResult {
    /// Scored candidates in ascending rank order.
    pub entries: Vec<RankScore>,
    pub chosen: usize,
    /// Candidates whose decomposition failed, with the error text.
    pub skipped: Vec<(usize, String)>,
}

fn score_candidate(
    x: TensorRef<'_>,
    mask: Option<&Mask>,
    dicts: &[Dictionary; 3],
    cfg: &SolverConfig,
    k: usize,
) -> Result<RankScore> {
    let started = Instant::now();
    let cfg = SolverConfig {
        rank: k,
        ..cfg.clone()
    };
    let (model, report) = solve(x, mask, dicts.clone(), &cfg)?;
    let [a, b, c] = model.scaled_factors(Codes::Encoding);
    let g = fit_core(x, &a, &b, &c)?;
    Ok(RankScore {
        rank: k,
        score: core_consistency(&g),
        sse: report.sse,
        nnz: report.nnz,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Decomposes `x` at every candidate rank, scores each fitted core and
/// picks a rank with `rule`. Candidates that fail are skipped with a
/// warning; it is an error if all fail.
pub fn estimate_rank<'a>(
    x: impl Into<TensorRef<'a>>,
    mask: Option<&Mask>,
    dicts: &[Dictionary; 3],
    ranks: &[usize],
    cfg: &SolverConfig,
    rule: RankRule,
) -> Result<RankScanResult> {
    let x = x.into();
    if ranks.is_empty() {
        return Err(MdtdError::InvalidArgument("empty rank range".into()));
    }
    if ranks.contains(&0) || ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MdtdError::InvalidArgument(format!(
            "rank range must be positive and strictly ascending, got {ranks:?}"
        )));
    }
    let outcomes: Vec<(usize, Result<RankScore>)> = ranks
        .par_iter()
        .map(|&k| (k, score_candidate(x, mask, dicts, cfg, k)))
        .collect();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (k, outcome) in outcomes {
        match outcome {
            Ok(s) => entries.push(s),
            Err(e) => {
                log::warn!("rank {k} skipped: {e}");
                skipped.push((k, e.to_string()));
            }
        }
    }
    let chosen = select_rank(&entries, rule)
        .ok_or_else(|| MdtdError::InvalidArgument("every candidate rank failed".into()))?;
    Ok(RankScanResult {
        entries,
        chosen,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{reconstruct, SparseTensor3};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    fn orthonormal(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        random(rows, cols, rng).qr().q()
    }

    /// Explicit `(C⊗B⊗A)` least squares.
    fn kron_oracle(x: &Tensor3, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        let m = c.kronecker(&b.kronecker(a));
        let rhs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        (m.transpose() * &m).lu().solve(&(m.transpose() * rhs)).unwrap()
    }

    #[test]
    fn exact_cpd_gives_superdiagonal_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c) = (random(6, 3, &mut rng), random(5, 3, &mut rng), random(7, 3, &mut rng));
        let x = reconstruct(&a, &b, &c, &DVector::from_element(3, 1.0)).unwrap();
        let g = fit_core(&x, &a, &b, &c).unwrap();
        let t = CoreTensor::superdiagonal(3);
        for (u, v) in g.as_slice().iter().zip(t.as_slice()) {
            assert!((u - v).abs() < 1e-8);
        }
        assert_relative_eq!(core_consistency(&g), 100.0, epsilon = 1e-6);
    }

    #[test]
    fn rank_one_core_is_scalar_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor3::from_fn([3, 4, 5], |_, _, _| rng.random::<f64>());
        let (a, b, c) = (random(3, 1, &mut rng), random(4, 1, &mut rng), random(5, 1, &mut rng));
        let g = fit_core(&x, &a, &b, &c).unwrap();
        let mut inner = 0.0;
        for t in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    inner += x.get(i, j, t) * a[(i, 0)] * b[(j, 0)] * c[(t, 0)];
                }
            }
        }
        let expected = inner / (a.norm_squared() * b.norm_squared() * c.norm_squared());
        assert_relative_eq!(g.get(0, 0, 0), expected, epsilon = 1e-12);
    }

    #[test]
    fn matches_kronecker_oracle_with_orthonormal_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor3::from_fn([4, 5, 6], |_, _, _| rng.random::<f64>());
        let (a, b, c) = (
            orthonormal(4, 2, &mut rng),
            orthonormal(5, 2, &mut rng),
            orthonormal(6, 2, &mut rng),
        );
        let g = fit_core(&x, &a, &b, &c).unwrap();
        let oracle = kron_oracle(&x, &a, &b, &c);
        for (u, v) in g.as_slice().iter().zip(oracle.iter()) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn sparse_and_dense_cores_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor3::from_fn([4, 5, 6], |_, _, _| {
            if rng.random::<f64>() < 0.4 {
                rng.random::<f64>()
            } else {
                0.0
            }
        });
        let xs = SparseTensor3::from_dense(&x);
        let (a, b, c) = (random(4, 3, &mut rng), random(5, 3, &mut rng), random(6, 3, &mut rng));
        let gd = fit_core(&x, &a, &b, &c).unwrap();
        let gs = fit_core(&xs, &a, &b, &c).unwrap();
        for (u, v) in gd.as_slice().iter().zip(gs.as_slice()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_factor_still_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor3::from_fn([4, 4, 4], |_, _, _| rng.random::<f64>());
        let mut a = random(4, 2, &mut rng);
        let col = a.column(0).clone_owned();
        a.set_column(1, &col);
        let b = random(4, 2, &mut rng);
        let c = random(4, 2, &mut rng);
        let g = fit_core(&x, &a, &b, &c).unwrap();
        assert!(g.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let x = Tensor3::zeros([3, 3, 3]);
        let a = DMatrix::zeros(3, 2);
        assert!(matches!(
            fit_core(&x, &a, &DMatrix::zeros(3, 1), &a),
            Err(MdtdError::RankMismatch(_))
        ));
        assert!(matches!(
            fit_core(&x, &a, &DMatrix::zeros(4, 2), &a),
            Err(MdtdError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn score_examples() {
        assert_eq!(core_consistency(&CoreTensor::superdiagonal(4)), 100.0);
        assert_eq!(core_consistency(&CoreTensor::zeros(4)), 0.0);
        let mut g = CoreTensor::superdiagonal(2);
        g.set(0, 1, 0, 1.0);
        // one unit off-diagonal error over k = 2
        assert_eq!(core_consistency(&g), 50.0);
        assert!(core_consistency(&g) < 100.0);
    }

    #[test]
    fn rejects_bad_rank_ranges() {
        let x = Tensor3::zeros([3, 3, 3]);
        let d = crate::dictionary::identity_dictionary(3).unwrap();
        let dicts = [d.clone(), d.clone(), d];
        let cfg = SolverConfig::default();
        let rule = RankRule::default();
        assert!(estimate_rank(&x, None, &dicts, &[], &cfg, rule).is_err());
        assert!(estimate_rank(&x, None, &dicts, &[2, 2], &cfg, rule).is_err());
        assert!(estimate_rank(&x, None, &dicts, &[0, 1], &cfg, rule).is_err());
    }

    #[test]
    fn single_rank_range_chooses_that_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor3::from_fn([4, 5, 6], |_, _, _| rng.random::<f64>());
        let dicts = [4, 5, 6].map(|n| crate::dictionary::identity_dictionary(n).unwrap());
        let cfg = SolverConfig {
            max_iters: 20,
            ..SolverConfig::default()
        };
        let r = estimate_rank(&x, None, &dicts, &[3], &cfg, RankRule::Argmax).unwrap();
        assert_eq!(r.chosen, 3);
        assert_eq!(r.entries.len(), 1);
        assert!(r.skipped.is_empty());
    }

    fn scored(scores: &[(usize, f64)]) -> Vec<RankScore> {
        scores
            .iter()
            .map(|&(rank, score)| RankScore {
                rank,
                score,
                sse: 0.0,
                nnz: 0,
                seconds: 0.0,
            })
            .collect()
    }

    #[test]
    fn selection_rules() {
        let e = scored(&[(1, 100.0), (2, 100.0), (3, 95.0), (4, 20.0), (5, f64::NAN)]);
        assert_eq!(select_rank(&e, RankRule::Argmax), Some(1));
        assert_eq!(select_rank(&e, RankRule::Threshold(90.0)), Some(3));
        assert_eq!(select_rank(&e, RankRule::Threshold(100.0)), Some(2));
        // nothing reaches the threshold: argmax fallback
        let e = scored(&[(2, 10.0), (3, 40.0), (4, -5.0)]);
        assert_eq!(select_rank(&e, RankRule::Threshold(90.0)), Some(3));
        assert_eq!(select_rank(&[], RankRule::Argmax), None);
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("argmax".parse::<RankRule>().unwrap(), RankRule::Argmax);
        assert_eq!("threshold".parse::<RankRule>().unwrap(), RankRule::Threshold(90.0));
        assert_eq!("threshold:75.5".parse::<RankRule>().unwrap(), RankRule::Threshold(75.5));
        assert!("threshold:x".parse::<RankRule>().is_err());
        assert!("best".parse::<RankRule>().is_err());
        let r = RankRule::Threshold(80.0);
        assert_eq!(r.to_string().parse::<RankRule>().unwrap(), r);
    }

    proptest! {
        #[test]
        fn score_never_exceeds_100(vals in proptest::collection::vec(-3.0f64..3.0, 27)) {
            let g = CoreTensor::from_tensor(Tensor3::from_vec([3, 3, 3], vals).unwrap()).unwrap();
            let s = core_consistency(&g);
            prop_assert!(s <= 100.0);
            let is_target = g == CoreTensor::superdiagonal(3);
            prop_assert_eq!(s == 100.0, is_target);
        }

        #[test]
        fn residual_is_orthogonal_to_kronecker_span(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor3::from_fn([4, 3, 5], |_, _, _| rng.random::<f64>());
            let (a, b, c) = (random(4, 2, &mut rng), random(3, 2, &mut rng), random(5, 2, &mut rng));
            let g = fit_core(&x, &a, &b, &c).unwrap();
            let m = c.kronecker(&b.kronecker(&a));
            let gv = DMatrix::from_column_slice(8, 1, g.as_slice());
            let resid = DMatrix::from_column_slice(x.len(), 1, x.as_slice()) - &m * gv;
            let proj = m.transpose() * resid;
            prop_assert!(proj.amax() < 1e-8);
        }
    }
}
