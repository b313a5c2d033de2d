//! Fixed analytical dictionaries: graph Fourier (Laplacian eigenvectors),
//! Ramanujan periodic, B-spline and identity.

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MdtdError, Result};

/// Weighted undirected graph without self-loops. Node indices are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl Graph {
    /// Edges are stored with `u < v`; a pair listed twice is an error.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n == 0 {
            return Err(MdtdError::InvalidArgument("graph needs at least one node".into()));
        }
        let mut norm = Vec::with_capacity(edges.len());
        for (u, v, w) in edges {
            if u >= n || v >= n {
                return Err(MdtdError::InvalidArgument(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(MdtdError::InvalidArgument(format!("self-loop at node {u}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(MdtdError::InvalidArgument(format!(
                    "edge ({u}, {v}) has non-positive weight {w}"
                )));
            }
            norm.push((u.min(v), u.max(v), w));
        }
        norm.sort_by_key(|e| (e.0, e.1));
        if let Some(w) = norm.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(MdtdError::InvalidArgument(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self { n, edges: norm })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for &(u, v, w) in &self.edges {
            d[u] += w;
            d[v] += w;
        }
        d
    }

    pub fn laplacian(&self, kind: LaplacianKind) -> DMatrix<f64> {
        let deg = self.degrees();
        let mut l = DMatrix::zeros(self.n, self.n);
        match kind {
            LaplacianKind::Combinatorial => {
                for (u, &d) in deg.iter().enumerate() {
                    l[(u, u)] = d;
                }
                for &(u, v, w) in &self.edges {
                    l[(u, v)] -= w;
                    l[(v, u)] -= w;
                }
            }
            LaplacianKind::Normalized => {
                // isolated nodes get a zero row
                let inv_sqrt: Vec<f64> = deg
                    .iter()
                    .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
                    .collect();
                for (u, &d) in deg.iter().enumerate() {
                    if d > 0.0 {
                        l[(u, u)] = 1.0;
                    }
                }
                for &(u, v, w) in &self.edges {
                    let x = w * inv_sqrt[u] * inv_sqrt[v];
                    l[(u, v)] -= x;
                    l[(v, u)] -= x;
                }
            }
        }
        l
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaplacianKind {
    /// `L = D − W`
    #[default]
    Combinatorial,
    /// `L = I − D^{-1/2} W D^{-1/2}`
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DictionaryKind {
    Gft,
    Ramanujan,
    Spline,
    Identity,
}

/// Eigendecomposition `ΦᵀΦ = E diag(p) Eᵀ`, eigenvalues ascending and
/// clamped at zero.
#[derive(Clone, Debug)]
pub struct GramEvd {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

/// A dictionary matrix `Φ` (mode length × atom count).
#[derive(Clone, Debug)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    kind: DictionaryKind,
    orthonormal: bool,
    gram_evd: Option<GramEvd>,
}

impl Dictionary {
    /// Wraps an arbitrary matrix. The orthonormal flag is set only when the
    /// caller asserts it and `ΦᵀΦ = I` holds to 1e-8.
    pub fn from_matrix(atoms: DMatrix<f64>, kind: DictionaryKind, orthonormal: bool) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(MdtdError::InvalidArgument("empty dictionary".into()));
        }
        if orthonormal {
            let gram = atoms.transpose() * &atoms;
            let err = (gram - DMatrix::identity(atoms.ncols(), atoms.ncols())).amax();
            if err >= 1e-8 {
                return Err(MdtdError::InvalidArgument(format!(
                    "dictionary flagged orthonormal but ‖ΦᵀΦ − I‖∞ = {err:e}"
                )));
            }
        }
        Ok(Self {
            atoms,
            kind,
            orthonormal,
            gram_evd: None,
        })
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    pub fn gram_evd(&self) -> Option<&GramEvd> {
        self.gram_evd.as_ref()
    }

    /// Mode length (rows of `Φ`).
    pub fn mode_len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }
}

fn sorted_symmetric_eigen(m: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MdtdError::Numerical("non-finite entry in symmetric matrix".into()));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| MdtdError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&o| eig.eigenvalues[o]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0.0f64;
        for &x in col.iter() {
            if x.abs() > best.abs() + 1e-12 {
                best = x;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Within clusters of (numerically) equal eigenvalues, orders eigenvectors by
/// descending lexicographic comparison.
fn order_degenerate_clusters(values: &DVector<f64>, vectors: &mut DMatrix<f64>) {
    let n = values.len();
    let tol = 1e-9 * values.amax().max(1.0);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[end - 1] <= tol {
            end += 1;
        }
        if end - start > 1 {
            let mut cols: Vec<Vec<f64>> = (start..end)
                .map(|c| vectors.column(c).iter().copied().collect())
                .collect();
            cols.sort_by(|a, b| lexicographic(b, a));
            for (off, col) in cols.iter().enumerate() {
                vectors.set_column(start + off, &DVector::from_column_slice(col));
            }
        }
        start = end;
    }
}

/// Graph Fourier dictionary from the combinatorial Laplacian: the
/// `num_atoms` eigenvectors with the smallest eigenvalues (default all).
pub fn gft_dictionary(g: &Graph, num_atoms: Option<usize>) -> Result<Dictionary> {
    gft_dictionary_with(g, num_atoms, LaplacianKind::Combinatorial)
}

pub fn gft_dictionary_with(
    g: &Graph,
    num_atoms: Option<usize>,
    kind: LaplacianKind,
) -> Result<Dictionary> {
    Ok(gft_with_spectrum(g, num_atoms, kind)?.0)
}

/// GFT dictionary together with the eigenvalues of its atoms (ascending).
pub fn gft_with_spectrum(
    g: &Graph,
    num_atoms: Option<usize>,
    kind: LaplacianKind,
) -> Result<(Dictionary, DVector<f64>)> {
    let n = g.node_count();
    let atoms = num_atoms.unwrap_or(n);
    if atoms == 0 || atoms > n {
        return Err(MdtdError::InvalidArgument(format!(
            "GFT atom count {atoms} outside 1..={n}"
        )));
    }
    if g.edges().is_empty() {
        let id = DMatrix::identity(n, atoms);
        return Ok((
            Dictionary::from_matrix(id, DictionaryKind::Gft, true)?,
            DVector::zeros(atoms),
        ));
    }
    let (values, mut vectors) = sorted_symmetric_eigen(g.laplacian(kind))?;
    fix_signs(&mut vectors);
    order_degenerate_clusters(&values, &mut vectors);
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    let phi = vectors.columns(0, atoms).into_owned();
    let spectrum = values.rows(0, atoms).into_owned();
    Ok((Dictionary::from_matrix(phi, DictionaryKind::Gft, true)?, spectrum))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Euler's totient.
pub fn euler_phi(q: usize) -> usize {
    (1..=q).filter(|&k| gcd(k, q) == 1).count()
}

/// Ramanujan sum `c_q(n) = Σ_{1≤k≤q, gcd(k,q)=1} cos(2πkn/q)`; always an
/// integer, so the cosine sum is rounded.
pub fn ramanujan_sum(q: usize, n: usize) -> f64 {
    let s: f64 = (1..=q)
        .filter(|&k| gcd(k, q) == 1)
        .map(|k| (2.0 * std::f64::consts::PI * (k * (n % q)) as f64 / q as f64).cos())
        .sum();
    s.round()
}

/// Ramanujan periodic dictionary. For each period `q = 1..=max_period` the
/// `φ(q)` circular shifts of `c_q(n)` span the period-`q` Ramanujan subspace;
/// each is tiled over `t_len` samples and normalized to unit norm.
pub fn ramanujan_dictionary(t_len: usize, max_period: usize) -> Result<Dictionary> {
    if max_period == 0 || t_len < max_period {
        return Err(MdtdError::InvalidArgument(format!(
            "Ramanujan dictionary needs t_len ≥ max_period ≥ 1 (got {t_len}, {max_period})"
        )));
    }
    let total: usize = (1..=max_period).map(euler_phi).sum();
    let mut phi = DMatrix::zeros(t_len, total);
    let mut col = 0;
    for q in 1..=max_period {
        let base: Vec<f64> = (0..q).map(|n| ramanujan_sum(q, n)).collect();
        for shift in 0..euler_phi(q) {
            let mut c = phi.column_mut(col);
            for n in 0..t_len {
                c[n] = base[(n + q - shift % q) % q];
            }
            let norm = c.norm();
            c /= norm;
            col += 1;
        }
    }
    Dictionary::from_matrix(phi, DictionaryKind::Ramanujan, false)
}

/// Unnormalized B-spline basis evaluated at `t = 1..=t_len`: `num_knots`
/// evenly spaced breakpoints on `[1, t_len]` with clamped ends, giving
/// `num_knots + degree − 1` columns. Rows sum to one.
pub fn spline_basis(t_len: usize, num_knots: usize, degree: usize) -> Result<DMatrix<f64>> {
    if t_len < 2 || num_knots < 2 || degree < 1 {
        return Err(MdtdError::InvalidArgument(format!(
            "spline basis needs t_len ≥ 2, knots ≥ 2, degree ≥ 1 (got {t_len}, {num_knots}, {degree})"
        )));
    }
    let lo = 1.0;
    let hi = t_len as f64;
    let step = (hi - lo) / (num_knots - 1) as f64;
    let mut knots = vec![lo; degree];
    knots.extend((0..num_knots).map(|k| if k + 1 == num_knots { hi } else { lo + k as f64 * step }));
    knots.extend(std::iter::repeat_n(hi, degree));
    let n_basis = num_knots + degree - 1;
    let mut out = DMatrix::zeros(t_len, n_basis);
    for row in 0..t_len {
        let x = (row + 1) as f64;
        // knot span index with knots[span] ≤ x < knots[span+1], clamped at the right end
        let span = if x >= hi {
            n_basis - 1
        } else {
            let mut s = degree;
            while s < n_basis - 1 && knots[s + 1] <= x {
                s += 1;
            }
            s
        };
        // Cox–de Boor triangular evaluation of the degree+1 nonzero functions
        let mut vals = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        vals[0] = 1.0;
        for d in 1..=degree {
            left[d] = x - knots[span + 1 - d];
            right[d] = knots[span + d] - x;
            let mut saved = 0.0;
            for r in 0..d {
                let denom = right[r + 1] + left[d - r];
                let temp = if denom != 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[d - r] * temp;
            }
            vals[d] = saved;
        }
        for (r, v) in vals.iter().enumerate() {
            out[(row, span - degree + r)] = *v;
        }
    }
    Ok(out)
}

/// Column-normalized [`spline_basis`].
pub fn spline_dictionary(t_len: usize, num_knots: usize, degree: usize) -> Result<Dictionary> {
    let mut phi = spline_basis(t_len, num_knots, degree)?;
    for (c, mut col) in phi.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(MdtdError::InvalidArgument(format!(
                "spline function {c} vanishes on every integer time point; use fewer knots"
            )));
        }
        col /= norm;
    }
    Dictionary::from_matrix(phi, DictionaryKind::Spline, false)
}

pub fn identity_dictionary(n: usize) -> Result<Dictionary> {
    if n == 0 {
        return Err(MdtdError::InvalidArgument("identity dictionary of size 0".into()));
    }
    Dictionary::from_matrix(DMatrix::identity(n, n), DictionaryKind::Identity, true)
}

/// Stores the eigendecomposition of `ΦᵀΦ`; a no-op for orthonormal
/// dictionaries, which take the direct update path.
pub fn precompute_gram_evd(mut d: Dictionary) -> Result<Dictionary> {
    if d.orthonormal || d.gram_evd.is_some() {
        return Ok(d);
    }
    d.gram_evd = Some(gram_evd_of(&d.atoms)?);
    Ok(d)
}

/// Eigendecomposition of `ΦᵀΦ` regardless of the orthonormal flag.
pub fn gram_evd_of(phi: &DMatrix<f64>) -> Result<GramEvd> {
    let gram = phi.transpose() * phi;
    let (mut values, vectors) = sorted_symmetric_eigen(gram)?;
    values.apply(|v| *v = v.max(0.0));
    Ok(GramEvd { vectors, values })
}

/// Textual dictionary choice: `gft:<graphfile>[:atoms][:norm]`,
/// `ram:<max_period>`, `spline:<knots>[:degree]` or `id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DictSpec {
    Gft {
        graph: PathBuf,
        atoms: Option<usize>,
        laplacian: LaplacianKind,
    },
    Ramanujan {
        max_period: usize,
    },
    Spline {
        knots: usize,
        degree: usize,
    },
    Identity,
}

fn parse_count(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| MdtdError::InvalidArgument(format!("invalid {what} `{s}`")))
}

impl FromStr for DictSpec {
    type Err = MdtdError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["id"] => Ok(DictSpec::Identity),
            ["ram", p] => Ok(DictSpec::Ramanujan {
                max_period: parse_count(p, "max period")?,
            }),
            ["spline", k] => Ok(DictSpec::Spline {
                knots: parse_count(k, "knot count")?,
                degree: 3,
            }),
            ["spline", k, d] => Ok(DictSpec::Spline {
                knots: parse_count(k, "knot count")?,
                degree: parse_count(d, "degree")?,
            }),
            ["gft", rest @ ..] if !rest.is_empty() && !rest[0].is_empty() => {
                let mut laplacian = LaplacianKind::Combinatorial;
                let mut rest = rest.to_vec();
                if rest.len() > 1 && *rest.last().unwrap() == "norm" {
                    laplacian = LaplacianKind::Normalized;
                    rest.pop();
                }
                let atoms = match rest.as_slice() {
                    [_] => None,
                    [_, a] => Some(parse_count(a, "atom count")?),
                    _ => return Err(MdtdError::InvalidArgument(format!("bad GFT spec `{s}`"))),
                };
                Ok(DictSpec::Gft {
                    graph: PathBuf::from(rest[0]),
                    atoms,
                    laplacian,
                })
            }
            _ => Err(MdtdError::InvalidArgument(format!(
                "unknown dictionary spec `{s}`"
            ))),
        }
    }
}

impl fmt::Display for DictSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DictSpec::Identity => write!(f, "id"),
            DictSpec::Ramanujan { max_period } => write!(f, "ram:{max_period}"),
            DictSpec::Spline { knots, degree } => write!(f, "spline:{knots}:{degree}"),
            DictSpec::Gft {
                graph,
                atoms,
                laplacian,
            } => {
                write!(f, "gft:{}", graph.display())?;
                if let Some(a) = atoms {
                    write!(f, ":{a}")?;
                }
                if *laplacian == LaplacianKind::Normalized {
                    write!(f, ":norm")?;
                }
                Ok(())
            }
        }
    }
}

impl DictSpec {
    /// Builds the dictionary for a mode of length `mode_len`, with its Gram
    /// eigendecomposition precomputed. Relative graph paths resolve against
    /// `base_dir` when given.
    pub fn build(&self, mode_len: usize, base_dir: Option<&Path>) -> Result<Dictionary> {
        let d = match self {
            DictSpec::Identity => identity_dictionary(mode_len)?,
            DictSpec::Ramanujan { max_period } => ramanujan_dictionary(mode_len, *max_period)?,
            DictSpec::Spline { knots, degree } => spline_dictionary(mode_len, *knots, *degree)?,
            DictSpec::Gft {
                graph,
                atoms,
                laplacian,
            } => {
                let path = match base_dir {
                    Some(b) if graph.is_relative() => b.join(graph),
                    _ => graph.clone(),
                };
                let g = crate::io::read_graph(&path)?;
                if g.node_count() != mode_len {
                    return Err(MdtdError::ShapeMismatch(format!(
                        "graph {} has {} nodes, mode length is {mode_len}",
                        path.display(),
                        g.node_count()
                    )));
                }
                gft_dictionary_with(&g, *atoms, *laplacian)?
            }
        };
        precompute_gram_evd(d)
    }
}
