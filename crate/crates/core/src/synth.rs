//! Synthetic benchmark generation: SBM graphs feeding GFT dictionaries, a
//! Ramanujan temporal dictionary, sparse random encodings, and Gaussian noise
//! at a target SNR. Also random missing-value masks.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dictionary::{gft_dictionary, ramanujan_dictionary, Dictionary, Graph};
use crate::error::{MdtdError, Result};
use crate::tensor::{reconstruct, Mask, SparseTensor3, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    /// GFT atoms for modes 1 and 2.
    pub graph_atoms: [usize; 2],
    pub max_period: usize,
    pub rank: usize,
    /// Fraction of nonzero entries in every encoding column.
    pub nonzero_fraction: f64,
    /// Target SNR in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub communities: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dims: [200, 300, 400],
            graph_atoms: [50, 30],
            max_period: 10,
            rank: 10,
            nonzero_fraction: 0.75,
            snr_db: Some(20.0),
            communities: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 50×60×80, rank 5, 15/10 graph atoms, max period 5.
    pub fn desk_scale() -> Self {
        Self {
            dims: [50, 60, 80],
            graph_atoms: [15, 10],
            max_period: 5,
            rank: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdtdError::InvalidArgument(m));
        if self.dims.contains(&0) || self.rank == 0 || self.communities == 0 {
            return bad("dims, rank and communities must be positive".into());
        }
        if !(self.nonzero_fraction > 0.0 && self.nonzero_fraction <= 1.0) {
            return bad(format!(
                "nonzero fraction must be in (0, 1], got {}",
                self.nonzero_fraction
            ));
        }
        for m in 0..2 {
            if self.graph_atoms[m] == 0 || self.graph_atoms[m] > self.dims[m] {
                return bad(format!(
                    "mode {} atoms {} outside 1..={}",
                    m + 1,
                    self.graph_atoms[m],
                    self.dims[m]
                ));
            }
            if self.communities > self.dims[m] {
                return bad(format!(
                    "{} communities exceed {} nodes",
                    self.communities, self.dims[m]
                ));
            }
        }
        if self.max_period == 0 || self.max_period > self.dims[2] {
            return bad(format!(
                "max period {} outside 1..={}",
                self.max_period, self.dims[2]
            ));
        }
        Ok(())
    }
}

/// SBM graph plus its community bookkeeping.
#[derive(Clone, Debug)]
pub struct SbmGraph {
    pub graph: Graph,
    /// Community of each node.
    pub community: Vec<usize>,
    /// Internal edges per community.
    pub internal_edges: Vec<usize>,
    /// External edges originated by each community.
    pub external_edges: Vec<usize>,
}

fn pair_from_index(idx: usize, n: usize) -> (usize, usize) {
    // row-major enumeration of pairs (u, v) with u < v
    let mut u = 0;
    let mut rem = idx;
    while rem >= n - 1 - u {
        rem -= n - 1 - u;
        u += 1;
    }
    (u, u + 1 + rem)
}

/// Stochastic block model: nodes split into `communities` near-equal
/// contiguous blocks; each block of size `c` receives `round(c(c−1)/4)`
/// uniformly drawn internal edges and the same number of distinct external
/// edges to nodes of other blocks. Unit weights.
pub fn sbm_graph(n: usize, communities: usize, rng: &mut impl Rng) -> Result<SbmGraph> {
    if communities == 0 || communities > n {
        return Err(MdtdError::InvalidArgument(format!(
            "{communities} communities for {n} nodes"
        )));
    }
    let base = n / communities;
    let extra = n % communities;
    let mut community = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(communities);
    for c in 0..communities {
        starts.push(community.len());
        let size = base + usize::from(c < extra);
        community.extend(std::iter::repeat_n(c, size));
    }
    starts.push(n);

    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    let mut ordered = Vec::new();
    let mut internal_edges = Vec::with_capacity(communities);
    let mut external_edges = Vec::with_capacity(communities);
    for c in 0..communities {
        let (lo, hi) = (starts[c], starts[c + 1]);
        let size = hi - lo;
        let pairs = size * size.saturating_sub(1) / 2;
        let target = (0.5 * pairs as f64).round() as usize;
        if size >= 2 {
            for p in sample(rng, pairs, target).into_vec() {
                let (u, v) = pair_from_index(p, size);
                let e = (lo + u, lo + v);
                edges.insert(e);
                ordered.push(e);
            }
        }
        internal_edges.push(target);

        let candidates: Vec<(usize, usize)> = (lo..hi)
            .flat_map(|u| (0..n).filter(move |v| *v < lo || *v >= hi).map(move |v| (u.min(v), u.max(v))))
            .filter(|e| !edges.contains(e))
            .collect();
        let want = if target > candidates.len() {
            log::warn!(
                "community {c}: only {} external edges available, wanted {target}",
                candidates.len()
            );
            candidates.len()
        } else {
            target
        };
        for p in sample(rng, candidates.len(), want).into_vec() {
            let e = candidates[p];
            edges.insert(e);
            ordered.push(e);
        }
        external_edges.push(want);
    }
    let graph = Graph::new(n, ordered.into_iter().map(|(u, v)| (u, v, 1.0)).collect())?;
    Ok(SbmGraph {
        graph,
        community,
        internal_edges,
        external_edges,
    })
}

/// Generated instance and everything needed to score against it.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub encodings: [DMatrix<f64>; 3],
    pub dictionaries: [Dictionary; 3],
    pub graphs: [SbmGraph; 2],
    pub noiseless: Tensor3,
    pub noisy: Tensor3,
    pub rank: usize,
    /// Variance of the added noise (0 when noise is disabled).
    pub noise_variance: f64,
}

/// Random encoding: each column gets `round(fraction·p)` (at least one)
/// nonzeros at uniformly chosen atoms, values uniform in `[0, 1)`.
pub fn sparse_encoding(p: usize, k: usize, fraction: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let support = ((fraction * p as f64).round() as usize).clamp(1, p);
    let mut y = DMatrix::zeros(p, k);
    for r in 0..k {
        for row in sample(rng, p, support).into_vec() {
            y[(row, r)] = rng.random::<f64>();
        }
    }
    y
}

pub fn generate(cfg: &SynthConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g1 = sbm_graph(cfg.dims[0], cfg.communities, &mut rng)?;
    let g2 = sbm_graph(cfg.dims[1], cfg.communities, &mut rng)?;
    let dictionaries = [
        gft_dictionary(&g1.graph, Some(cfg.graph_atoms[0]))?,
        gft_dictionary(&g2.graph, Some(cfg.graph_atoms[1]))?,
        ramanujan_dictionary(cfg.dims[2], cfg.max_period)?,
    ];
    let encodings = [0, 1, 2].map(|m| {
        sparse_encoding(
            dictionaries[m].atom_count(),
            cfg.rank,
            cfg.nonzero_fraction,
            &mut rng,
        )
    });
    let f: Vec<DMatrix<f64>> = (0..3)
        .map(|m| dictionaries[m].atoms() * &encodings[m])
        .collect();
    let noiseless = reconstruct(&f[0], &f[1], &f[2], &DVector::from_element(cfg.rank, 1.0))?;
    let (noisy, noise_variance) = match cfg.snr_db {
        Some(snr) if snr.is_finite() => {
            let signal_power = noiseless.frobenius_norm_sq() / noiseless.len() as f64;
            let variance = signal_power / 10f64.powf(snr / 10.0);
            let normal = Normal::new(0.0, variance.sqrt())
                .map_err(|e| MdtdError::InvalidArgument(e.to_string()))?;
            let mut noisy = noiseless.clone();
            for v in noisy.as_mut_slice() {
                *v += normal.sample(&mut rng);
            }
            (noisy, variance)
        }
        _ => (noiseless.clone(), 0.0),
    };
    Ok(GroundTruth {
        encodings,
        dictionaries,
        graphs: [g1, g2],
        noiseless,
        noisy,
        rank: cfg.rank,
        noise_variance,
    })
}

/// Dense mask with exactly `round(fraction·I·J·T)` missing cells drawn
/// uniformly without replacement.
pub fn make_mask(dims: [usize; 3], missing_fraction: f64, seed: u64) -> Result<Mask> {
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(MdtdError::InvalidArgument(format!(
            "missing fraction must be in [0, 1), got {missing_fraction}"
        )));
    }
    let total = dims[0] * dims[1] * dims[2];
    let count = (missing_fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observed = vec![true; total];
    for o in sample(&mut rng, total, count).into_vec() {
        observed[o] = false;
    }
    Mask::from_observed(dims, observed)
}

/// `count` distinct cells not stored in `x`, drawn uniformly, sorted by
/// linear offset.
pub fn make_missing_idx(x: &SparseTensor3, count: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    let dims = x.dims();
    let total = dims[0] * dims[1] * dims[2];
    let free = total - x.nnz();
    if count > free {
        return Err(MdtdError::InvalidArgument(format!(
            "{count} missing cells requested, only {free} unobserved cells"
        )));
    }
    let decode = |o: usize| [o % dims[0], (o / dims[0]) % dims[1], o / (dims[0] * dims[1])];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if count * 2 <= free {
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let o = rng.random_range(0..total);
            if !x.contains(decode(o)) && seen.insert(o) {
                out.push(o);
            }
        }
        out
    } else {
        let candidates: Vec<usize> = (0..total).filter(|&o| !x.contains(decode(o))).collect();
        sample(&mut rng, candidates.len(), count)
            .into_iter()
            .map(|p| candidates[p])
            .collect()
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(decode).collect())
}
