//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mdtd_core::dump::{CodeTriplets, ModelDump, DUMP_FORMAT, DUMP_VERSION};
use mdtd_core::rank::{estimate_rank, RankRule};
use mdtd_core::synth::{generate, make_mask, SynthConfig};
use mdtd_core::{io, solve, Codes, FitReport, ImputeMode, Mask, SparseTensor3, Tensor3, TensorRef};
use serde_json::json;

use crate::args::{parse_list, parse_ranks, SolverArgs};
use crate::manifest::RunManifest;
use crate::{Axis, BenchArgs, DecomposeArgs, GenArgs, ImputeArgs, InputArgs, Preset, RankArgs};

enum Input {
    Dense(Tensor3),
    Sparse(SparseTensor3),
}

impl Input {
    fn as_ref(&self) -> TensorRef<'_> {
        match self {
            Input::Dense(x) => TensorRef::Dense(x),
            Input::Sparse(x) => TensorRef::Sparse(x),
        }
    }

    fn dims(&self) -> [usize; 3] {
        self.as_ref().dims()
    }
}

fn load_input(a: &InputArgs, m: &mut RunManifest) -> Result<Input> {
    m.add_input(&a.input)?;
    let x = io::read_sparse_tensor(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    Ok(if a.sparse { Input::Sparse(x) } else { Input::Dense(x.to_dense()) })
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn hash_graphs(s: &SolverArgs, m: &mut RunManifest) -> Result<()> {
    for g in s.graph_files()? {
        m.add_input(&g)?;
    }
    Ok(())
}

fn load_missing(path: &Path, dims: [usize; 3], m: &mut RunManifest) -> Result<Vec<[usize; 3]>> {
    m.add_input(path)?;
    let (d, idx) = io::read_index_set(path).with_context(|| format!("reading {}", path.display()))?;
    if d != dims {
        bail!("missing-index dims {d:?} differ from tensor dims {dims:?}");
    }
    Ok(idx)
}

fn metrics_row(r: &FitReport, s: &SolverArgs) -> String {
    format!("{},{},{},{},{}", r.sse, r.nnz, r.fit, r.iterations, s.seconds(r.seconds))
}

fn record_fit(m: &mut RunManifest, r: &FitReport) {
    m.metric("sse", r.sse);
    m.metric("nnz", r.nnz as f64);
    m.metric("fit", r.fit);
    m.metric("iters", r.iterations as f64);
    m.metric("converged", if r.converged { 1.0 } else { 0.0 });
}

fn finish(m: &mut RunManifest, out: &Path, started: Instant, no_timing: bool) -> Result<()> {
    m.wall_seconds = if no_timing { 0.0 } else { started.elapsed().as_secs_f64() };
    m.write(out)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = match a.preset {
        Preset::Full => SynthConfig::default(),
        Preset::Desk => SynthConfig::desk_scale(),
    };
    if let Some(d) = &a.dims {
        let v: Vec<usize> = parse_list(d, "dims")?;
        let [i, j, t] = v.as_slice() else {
            bail!("--dims needs I,J,T");
        };
        cfg.dims = [*i, *j, *t];
    }
    if let Some(at) = &a.atoms {
        let v: Vec<usize> = parse_list(at, "atoms")?;
        let [p, q] = v.as_slice() else {
            bail!("--atoms needs a1,a2");
        };
        cfg.graph_atoms = [*p, *q];
    }
    cfg.max_period = a.max_period.unwrap_or(cfg.max_period);
    cfg.rank = a.rank.unwrap_or(cfg.rank);
    cfg.nonzero_fraction = a.nonzero.unwrap_or(cfg.nonzero_fraction);
    cfg.communities = a.communities.unwrap_or(cfg.communities);
    if let Some(s) = &a.snr {
        cfg.snr_db = match s.as_str() {
            "none" => None,
            v => Some(v.parse().with_context(|| format!("invalid --snr `{v}`"))?),
        };
    }
    cfg.seed = a.seed;

    prepare_out(&a.out)?;
    let truth = generate(&cfg)?;
    let mut m = RunManifest::new("gen", a, a.seed)?;
    m.write_output(a.out.join("tensor.txt"), &io::format_dense_tensor(&truth.noisy))?;
    m.write_output(a.out.join("clean.txt"), &io::format_dense_tensor(&truth.noiseless))?;
    let mut specs = Vec::new();
    for (g, sbm) in truth.graphs.iter().enumerate() {
        let path = a.out.join(format!("graph{}.txt", g + 1));
        m.write_output(path.clone(), &io::format_graph(&sbm.graph))?;
        specs.push(format!("gft:{}:{}", path.display(), cfg.graph_atoms[g]));
    }
    specs.push(format!("ram:{}", cfg.max_period));
    let dump = ModelDump {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        dims: cfg.dims,
        rank: cfg.rank,
        scale: vec![1.0; cfg.rank],
        dictionaries: [specs[0].clone(), specs[1].clone(), specs[2].clone()],
        codes: [0, 1, 2].map(|i| CodeTriplets::from_matrix(&truth.encodings[i])),
    };
    m.write_output(a.out.join("truth.json"), &(dump.to_json()? + "\n"))?;
    m.write_output(
        a.out.join("model.conf"),
        &format!("# dictionaries and rank of the generator\ndict = {}\nrank = {}\n", specs.join(","), cfg.rank),
    )?;
    if a.mask_fraction > 0.0 {
        let mask = make_mask(cfg.dims, a.mask_fraction, a.seed)?;
        m.write_output(a.out.join("missing.txt"), &io::format_index_set(cfg.dims, &mask.missing_indices()))?;
        m.metric("missing", mask.missing_count() as f64);
    }
    let meta = json!({
        "config": cfg,
        "snr_units": "dB",
        "noise_variance": truth.noise_variance,
        "graphs": truth.graphs.iter().map(|g| json!({
            "nodes": g.graph.node_count(),
            "internal_edges": g.internal_edges,
            "external_edges": g.external_edges,
        })).collect::<Vec<_>>(),
        "dictionaries": specs,
    });
    m.write_output(a.out.join("metadata.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    m.metric("noise_variance", truth.noise_variance);
    finish(&mut m, &a.out, started, a.no_timing)?;
    println!("wrote synthetic tensor {:?} to {}", cfg.dims, a.out.display());
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> Result<()> {
    let started = Instant::now();
    prepare_out(&a.io.out)?;
    let mut m = RunManifest::new("decompose", a, a.solver.seed)?;
    hash_graphs(&a.solver, &mut m)?;
    let x = load_input(&a.io, &mut m)?;
    let (specs, dicts) = a.solver.dictionaries(x.dims())?;
    let cfg = a.solver.config(ImputeMode::None)?;

    if let Some(sweep) = &a.sweep_lambda {
        let lambdas: Vec<f64> = parse_list(sweep, "lambda")?;
        let mut csv = String::from("lambda,sse,nnz,fit,iters,seconds\n");
        for &l in &lambdas {
            let c = mdtd_core::SolverConfig { lambda: [l; 3], ..cfg.clone() };
            c.validate()?;
            let (_, r) = solve(x.as_ref(), None, dicts.clone(), &c)?;
            info!("λ={l}: sse {} nnz {}", r.sse, r.nnz);
            let _ = writeln!(csv, "{l},{}", metrics_row(&r, &a.solver));
        }
        m.write_output(a.io.out.join("sweep.csv"), &csv)?;
        m.metric("points", lambdas.len() as f64);
        print!("{csv}");
    } else {
        let (model, r) = solve(x.as_ref(), None, dicts, &cfg)?;
        if !r.converged {
            warn!("stopped after {} iterations without converging", r.iterations);
        }
        let csv = format!("sse,nnz,fit,iters,seconds\n{}\n", metrics_row(&r, &a.solver));
        m.write_output(a.io.out.join("metrics.csv"), &csv)?;
        let dump = ModelDump::from_model(&model, &specs);
        m.write_output(a.io.out.join("model.json"), &(dump.to_json()? + "\n"))?;
        record_fit(&mut m, &r);
        print!("{csv}");
    }
    finish(&mut m, &a.io.out, started, a.solver.no_timing)
}

pub fn impute(a: &ImputeArgs) -> Result<()> {
    let started = Instant::now();
    let mode: ImputeMode = a.impute.parse()?;
    if mode == ImputeMode::None {
        bail!("--impute must be `dense` or `sparse`");
    }
    prepare_out(&a.io.out)?;
    let mut m = RunManifest::new("impute", a, a.solver.seed)?;
    hash_graphs(&a.solver, &mut m)?;
    let x = load_input(&a.io, &mut m)?;
    let dims = x.dims();
    let missing = load_missing(&a.missing, dims, &mut m)?;
    let mask = Mask::from_missing(dims, missing.clone())?;
    let (specs, dicts) = a.solver.dictionaries(dims)?;
    let cfg = a.solver.config(mode)?;
    let (model, r) = solve(x.as_ref(), Some(&mask), dicts, &cfg)?;
    let cells = mask.missing_indices();
    let values = model.reconstruct_at(Codes::Proxy, &cells)?;

    let mse = match &a.truth {
        Some(p) => {
            m.add_input(p)?;
            let t = io::read_dense_tensor(p).with_context(|| format!("reading {}", p.display()))?;
            if t.dims() != dims {
                bail!("truth dims {:?} differ from tensor dims {dims:?}", t.dims());
            }
            let n = cells.len().max(1) as f64;
            let e: f64 = cells
                .iter()
                .zip(&values)
                .map(|(c, v)| (t.get(c[0], c[1], c[2]) - v).powi(2))
                .sum();
            Some(e / n)
        }
        None => None,
    };
    let imputed = SparseTensor3::from_triplets(dims, cells.iter().copied().zip(values).collect())?;
    m.write_output(a.io.out.join("imputed.txt"), &io::format_sparse_tensor(&imputed))?;
    let csv = format!(
        "sse,nnz,fit,iters,seconds,mse\n{},{}\n",
        metrics_row(&r, &a.solver),
        mse.map(|v| v.to_string()).unwrap_or_default()
    );
    m.write_output(a.io.out.join("metrics.csv"), &csv)?;
    let dump = ModelDump::from_model(&model, &specs);
    m.write_output(a.io.out.join("model.json"), &(dump.to_json()? + "\n"))?;
    record_fit(&mut m, &r);
    m.metric("imputed", imputed.nnz() as f64);
    if let Some(v) = mse {
        m.metric("mse", v);
    }
    print!("{csv}");
    finish(&mut m, &a.io.out, started, a.solver.no_timing)
}

pub fn rank(a: &RankArgs) -> Result<()> {
    let started = Instant::now();
    prepare_out(&a.io.out)?;
    let mut m = RunManifest::new("rank", a, a.solver.seed)?;
    hash_graphs(&a.solver, &mut m)?;
    let x = load_input(&a.io, &mut m)?;
    let mask = match &a.missing {
        Some(p) => Some(Mask::from_missing(x.dims(), load_missing(p, x.dims(), &mut m)?)?),
        None => None,
    };
    let ranks = parse_ranks(&a.ranks)?;
    let rule: RankRule = a.rule.parse()?;
    let (_, dicts) = a.solver.dictionaries(x.dims())?;
    let impute = if mask.is_some() { ImputeMode::Dense } else { ImputeMode::None };
    let cfg = a.solver.config(impute)?;
    let res = estimate_rank(x.as_ref(), mask.as_ref(), &dicts, &ranks, &cfg, rule)?;
    for (k, e) in &res.skipped {
        warn!("rank {k} skipped: {e}");
    }
    let mut csv = String::from("rank,score,sse,nnz,seconds\n");
    for e in &res.entries {
        let _ = writeln!(csv, "{},{},{},{},{}", e.rank, e.score, e.sse, e.nnz, a.solver.seconds(e.seconds));
    }
    m.write_output(a.io.out.join("rank.csv"), &csv)?;
    m.metric("chosen", res.chosen as f64);
    print!("{csv}");
    println!("chosen rank: {}", res.chosen);
    finish(&mut m, &a.io.out, started, a.solver.no_timing)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let started = Instant::now();
    prepare_out(&a.out)?;
    let mut m = RunManifest::new("bench", a, a.solver.seed)?;
    let grid: Vec<usize> = parse_list(&a.grid, "grid")?;
    let base = match a.preset {
        Preset::Full => SynthConfig::default(),
        Preset::Desk => SynthConfig::desk_scale(),
    };
    let cfg = a.solver.config(ImputeMode::None)?;
    let mut csv = String::from("nodes_or_T,gigabytes,seconds,iters\n");
    for &n in &grid {
        let mut sc = SynthConfig { seed: a.solver.seed, ..base.clone() };
        match a.axis {
            Axis::T => sc.dims[2] = n,
            Axis::Nodes => {
                sc.dims[0] = n;
                sc.graph_atoms[0] = sc.graph_atoms[0].min(n);
                sc.communities = sc.communities.min(n);
            }
        }
        let truth = generate(&sc).with_context(|| format!("generating grid point {n}"))?;
        let gb = (sc.dims.iter().product::<usize>() * std::mem::size_of::<f64>()) as f64 / 1e9;
        let (_, r) = solve(&truth.noisy, None, truth.dictionaries, &cfg)?;
        let _ = writeln!(csv, "{n},{gb},{},{}", a.solver.seconds(r.seconds), r.iterations);
    }
    m.write_output(a.out.join("bench.csv"), &csv)?;
    m.metric("points", grid.len() as f64);
    print!("{csv}");
    finish(&mut m, &a.out, started, a.solver.no_timing)
}
