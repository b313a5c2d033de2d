//! Plain-text formats.
//!
//! Tensor files start with `dims I J T` followed by one `i j t value` line
//! per stored entry (1-based indices). Index-set files (missing cells) use
//! the same header and `i j t` lines. Graph files start with `nodes n`
//! followed by `u v w` edge lines (1-based). Blank lines and lines starting
//! with `#` are ignored everywhere.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dictionary::Graph;
use crate::error::{MdtdError, Result};
use crate::tensor::{SparseTensor3, Tensor3};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_field<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| MdtdError::Parse {
        line,
        msg: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| MdtdError::Parse {
        line,
        msg: format!("invalid {what} `{tok}`"),
    })
}

fn parse_index(tok: Option<&str>, line: usize, what: &str, bound: usize) -> Result<usize> {
    let v: usize = parse_field(tok, line, what)?;
    if v == 0 || v > bound {
        return Err(MdtdError::Parse {
            line,
            msg: format!("{what} {v} outside 1..={bound}"),
        });
    }
    Ok(v - 1)
}

fn parse_dims_header<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<[usize; 3]> {
    let (line, header) = lines.next().ok_or(MdtdError::Parse {
        line: 0,
        msg: "empty file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("dims") {
        return Err(MdtdError::Parse {
            line,
            msg: "expected `dims I J T` header".into(),
        });
    }
    let mut dims = [0; 3];
    for (d, name) in dims.iter_mut().zip(["I", "J", "T"]) {
        *d = parse_field(toks.next(), line, name)?;
        if *d == 0 {
            return Err(MdtdError::Parse {
                line,
                msg: format!("{name} must be positive"),
            });
        }
    }
    Ok(dims)
}

pub fn parse_sparse_tensor(text: &str) -> Result<SparseTensor3> {
    let mut lines = content_lines(text);
    let dims = parse_dims_header(&mut lines)?;
    let mut triplets = Vec::new();
    for (line, l) in lines {
        let mut toks = l.split_whitespace();
        let i = parse_index(toks.next(), line, "i", dims[0])?;
        let j = parse_index(toks.next(), line, "j", dims[1])?;
        let t = parse_index(toks.next(), line, "t", dims[2])?;
        let v: f64 = parse_field(toks.next(), line, "value")?;
        triplets.push(([i, j, t], v));
    }
    SparseTensor3::from_triplets(dims, triplets)
}

pub fn read_sparse_tensor(path: impl AsRef<Path>) -> Result<SparseTensor3> {
    parse_sparse_tensor(&fs::read_to_string(path)?)
}

/// Reads a tensor file into dense storage; cells not listed are zero.
pub fn read_dense_tensor(path: impl AsRef<Path>) -> Result<Tensor3> {
    Ok(read_sparse_tensor(path)?.to_dense())
}

pub fn format_sparse_tensor(x: &SparseTensor3) -> String {
    let [a, b, c] = x.dims();
    let mut out = format!("dims {a} {b} {c}\n");
    for ([i, j, t], v) in x.iter() {
        let _ = writeln!(out, "{} {} {} {:e}", i + 1, j + 1, t + 1, v);
    }
    out
}

/// Writes every cell, including zeros.
pub fn format_dense_tensor(x: &Tensor3) -> String {
    let [ni, nj, nt] = x.dims();
    let mut out = format!("dims {ni} {nj} {nt}\n");
    for t in 0..nt {
        for j in 0..nj {
            for i in 0..ni {
                let _ = writeln!(out, "{} {} {} {:e}", i + 1, j + 1, t + 1, x.get(i, j, t));
            }
        }
    }
    out
}

pub fn write_sparse_tensor(path: impl AsRef<Path>, x: &SparseTensor3) -> Result<()> {
    Ok(fs::write(path, format_sparse_tensor(x))?)
}

pub fn write_dense_tensor(path: impl AsRef<Path>, x: &Tensor3) -> Result<()> {
    Ok(fs::write(path, format_dense_tensor(x))?)
}

/// Parses an index-set file (`dims` header then `i j t` lines).
pub fn parse_index_set(text: &str) -> Result<([usize; 3], Vec<[usize; 3]>)> {
    let mut lines = content_lines(text);
    let dims = parse_dims_header(&mut lines)?;
    let mut out = Vec::new();
    for (line, l) in lines {
        let mut toks = l.split_whitespace();
        out.push([
            parse_index(toks.next(), line, "i", dims[0])?,
            parse_index(toks.next(), line, "j", dims[1])?,
            parse_index(toks.next(), line, "t", dims[2])?,
        ]);
    }
    Ok((dims, out))
}

pub fn read_index_set(path: impl AsRef<Path>) -> Result<([usize; 3], Vec<[usize; 3]>)> {
    parse_index_set(&fs::read_to_string(path)?)
}

pub fn format_index_set(dims: [usize; 3], idx: &[[usize; 3]]) -> String {
    let mut out = format!("dims {} {} {}\n", dims[0], dims[1], dims[2]);
    for p in idx {
        let _ = writeln!(out, "{} {} {}", p[0] + 1, p[1] + 1, p[2] + 1);
    }
    out
}

pub fn write_index_set(path: impl AsRef<Path>, dims: [usize; 3], idx: &[[usize; 3]]) -> Result<()> {
    Ok(fs::write(path, format_index_set(dims, idx))?)
}

pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut lines = content_lines(text);
    let (line, header) = lines.next().ok_or(MdtdError::Parse {
        line: 0,
        msg: "empty graph file".into(),
    })?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("nodes") {
        return Err(MdtdError::Parse {
            line,
            msg: "expected `nodes n` header".into(),
        });
    }
    let n: usize = parse_field(toks.next(), line, "node count")?;
    let mut edges = Vec::new();
    for (line, l) in lines {
        let mut toks = l.split_whitespace();
        let u = parse_index(toks.next(), line, "u", n)?;
        let v = parse_index(toks.next(), line, "v", n)?;
        let w: f64 = parse_field(toks.next(), line, "weight")?;
        edges.push((u, v, w));
    }
    Graph::new(n, edges)
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<Graph> {
    parse_graph(&fs::read_to_string(path)?)
}

pub fn format_graph(g: &Graph) -> String {
    let mut out = format!("nodes {}\n", g.node_count());
    for &(u, v, w) in g.edges() {
        let _ = writeln!(out, "{} {} {:e}", u + 1, v + 1, w);
    }
    out
}

pub fn write_graph(path: impl AsRef<Path>, g: &Graph) -> Result<()> {
    Ok(fs::write(path, format_graph(g))?)
}
