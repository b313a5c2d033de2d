//! Shared solver flags and their conversion to a [`SolverConfig`].

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mdtd_core::{DictSpec, Dictionary, ImputeMode, SolverConfig};
use serde::Serialize;

#[derive(Args, Debug, Clone, Serialize)]
pub struct SolverArgs {
    /// Decomposition rank k.
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    /// Sparsity weight: one value for all modes or `l1,l2,l3`.
    #[arg(long, default_value = "0")]
    pub lambda: String,
    /// ADMM penalty: one value or `r1,r2,r3`.
    #[arg(long, default_value = "1")]
    pub rho: String,
    /// Weight of the imputation fit term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_d: f64,
    /// Stop when the objective changes by at most this much.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Largest `‖Z − Y‖∞` accepted at convergence.
    #[arg(long, default_value_t = 1e-4)]
    pub primal_tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Dictionary specs `m1,m2,m3`, e.g. `gft:g1.txt:15,gft:g2.txt:10,ram:5`.
    #[arg(long, default_value = "id,id,id")]
    pub dict: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write 0 in timing columns so repeated runs give identical files.
    #[arg(long)]
    pub no_timing: bool,
}

pub fn parse_triple(s: &str, what: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("invalid {what} `{s}`"))?;
    match v.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("{what} needs 1 or 3 values, got {}", v.len()),
    }
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse::<T>().ok().with_context(|| format!("invalid {what} entry `{t}`")))
        .collect()
}

/// `a..b` (inclusive) or a comma list.
pub fn parse_ranks(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().with_context(|| format!("invalid rank range `{s}`"))?;
        let b: usize = b.trim().parse().with_context(|| format!("invalid rank range `{s}`"))?;
        if a > b {
            bail!("empty rank range `{s}`");
        }
        Ok((a..=b).collect())
    } else {
        parse_list(s, "rank")
    }
}

impl SolverArgs {
    pub fn config(&self, impute: ImputeMode) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            rank: self.rank,
            lambda: parse_triple(&self.lambda, "lambda")?,
            rho: parse_triple(&self.rho, "rho")?,
            lambda_d: self.lambda_d,
            epsilon: self.eps,
            primal_tol: self.primal_tol,
            max_iters: self.max_iters,
            impute,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn specs(&self) -> Result<[DictSpec; 3]> {
        let parts: Vec<&str> = self.dict.split(',').map(str::trim).collect();
        let [a, b, c] = parts.as_slice() else {
            bail!("--dict needs three comma-separated specs, got `{}`", self.dict);
        };
        Ok([a.parse()?, b.parse()?, c.parse()?])
    }

    pub fn dictionaries(&self, dims: [usize; 3]) -> Result<([DictSpec; 3], [Dictionary; 3])> {
        let specs = self.specs()?;
        let mut built = Vec::with_capacity(3);
        for m in 0..3 {
            built.push(
                specs[m]
                    .build(dims[m], None)
                    .with_context(|| format!("building mode-{} dictionary `{}`", m + 1, specs[m]))?,
            );
        }
        let [a, b, c]: [Dictionary; 3] = built.try_into().expect("three modes");
        Ok((specs, [a, b, c]))
    }

    pub fn seconds(&self, s: f64) -> f64 {
        if self.no_timing {
            0.0
        } else {
            s
        }
    }

    /// Graph files referenced by the dictionary specs.
    pub fn graph_files(&self) -> Result<Vec<PathBuf>> {
        Ok(self
            .specs()?
            .into_iter()
            .filter_map(|s| match s {
                DictSpec::Gft { graph, .. } => Some(graph),
                _ => None,
            })
            .collect())
    }
}
