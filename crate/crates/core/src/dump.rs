//! Versioned JSON dump of a fitted sparse model: the scale vector, the
//! dictionary specs and a triplet listing of every proxy matrix `Zᵢ`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{DictSpec, Dictionary};
use crate::error::{MdtdError, Result};
use crate::solver::MdtdModel;
use crate::tensor::{reconstruct, FactorMatrix, Tensor3};

pub const DUMP_FORMAT: &str = "mdtd-model";
pub const DUMP_VERSION: u32 = 1;

/// Nonzero entries of one code matrix; `row` (atom) and `col` (component)
/// are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeTriplets {
    pub atoms: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl CodeTriplets {
    pub fn from_matrix(m: &FactorMatrix) -> Self {
        let mut entries = Vec::new();
        for (c, col) in m.column_iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                if v != 0.0 {
                    entries.push((r + 1, c + 1, v));
                }
            }
        }
        Self {
            atoms: m.nrows(),
            entries,
        }
    }

    pub fn to_matrix(&self, rank: usize) -> Result<FactorMatrix> {
        let mut m = DMatrix::zeros(self.atoms, rank);
        for &(r, c, v) in &self.entries {
            if r == 0 || r > self.atoms || c == 0 || c > rank {
                return Err(MdtdError::InvalidArgument(format!(
                    "code entry ({r}, {c}) outside {}×{rank}",
                    self.atoms
                )));
            }
            m[(r - 1, c - 1)] = v;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub rank: usize,
    pub scale: Vec<f64>,
    /// Dictionary spec strings, one per mode.
    pub dictionaries: [String; 3],
    pub codes: [CodeTriplets; 3],
}

impl ModelDump {
    pub fn from_model(model: &MdtdModel, specs: &[DictSpec; 3]) -> Self {
        Self {
            format: DUMP_FORMAT.into(),
            version: DUMP_VERSION,
            dims: model.dims(),
            rank: model.rank(),
            scale: model.scale.iter().copied().collect(),
            dictionaries: [0, 1, 2].map(|m| specs[m].to_string()),
            codes: [0, 1, 2].map(|m| CodeTriplets::from_matrix(&model.z[m])),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: ModelDump = serde_json::from_str(text)?;
        if d.format != DUMP_FORMAT {
            return Err(MdtdError::InvalidArgument(format!(
                "not a model dump (format `{}`)",
                d.format
            )));
        }
        if d.version != DUMP_VERSION {
            return Err(MdtdError::InvalidArgument(format!(
                "unsupported dump version {} (expected {DUMP_VERSION})",
                d.version
            )));
        }
        if d.scale.len() != d.rank {
            return Err(MdtdError::RankMismatch(format!(
                "scale has {} entries, rank is {}",
                d.scale.len(),
                d.rank
            )));
        }
        Ok(d)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_json()? + "\n")?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rebuilds the dictionaries from their specs (relative graph paths
    /// resolved against `base_dir`).
    pub fn dictionaries(&self, base_dir: Option<&Path>) -> Result<[Dictionary; 3]> {
        let mut out = Vec::with_capacity(3);
        for m in 0..3 {
            let spec: DictSpec = self.dictionaries[m].parse()?;
            let d = spec.build(self.dims[m], base_dir)?;
            if d.atom_count() != self.codes[m].atoms {
                return Err(MdtdError::ShapeMismatch(format!(
                    "mode {}: dictionary has {} atoms, codes have {}",
                    m + 1,
                    d.atom_count(),
                    self.codes[m].atoms
                )));
            }
            out.push(d);
        }
        let [a, b, c]: [Dictionary; 3] = out.try_into().expect("three modes");
        Ok([a, b, c])
    }

    /// `⟦S ⊡ Φ₁Z₁, Φ₂Z₂, Φ₃Z₃⟧`.
    pub fn reconstruct(&self, base_dir: Option<&Path>) -> Result<Tensor3> {
        let dicts = self.dictionaries(base_dir)?;
        let f: Vec<FactorMatrix> = (0..3)
            .map(|m| Ok(dicts[m].atoms() * self.codes[m].to_matrix(self.rank)?))
            .collect::<Result<_>>()?;
        reconstruct(&f[0], &f[1], &f[2], &DVector::from_vec(self.scale.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve, Codes, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triplets_round_trip() {
        let m = DMatrix::from_row_slice(3, 2, &[0.0, 1.5, -2.0, 0.0, 0.0, 1e-300]);
        let t = CodeTriplets::from_matrix(&m);
        assert_eq!(t.entries, vec![(2, 1, -2.0), (1, 2, 1.5), (3, 2, 1e-300)]);
        assert_eq!(t.to_matrix(2).unwrap(), m);
        assert!(t.to_matrix(1).is_err());
    }

    #[test]
    fn dump_reload_reproduces_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [6, 5, 12];
        let x = Tensor3::from_fn(dims, |_, _, _| rng.random::<f64>());
        let specs: [DictSpec; 3] = ["id".parse().unwrap(), "id".parse().unwrap(), "ram:4".parse().unwrap()];
        let dicts = [0, 1, 2].map(|m| specs[m].build(dims[m], None).unwrap());
        let cfg = SolverConfig {
            rank: 2,
            lambda: [0.05; 3],
            max_iters: 30,
            ..SolverConfig::default()
        };
        let (model, _) = solve(&x, None, dicts, &cfg).unwrap();
        let dump = ModelDump::from_model(&model, &specs);
        let back = ModelDump::from_json(&dump.to_json().unwrap()).unwrap();
        assert_eq!(back, dump);
        let expected = model.reconstruct(Codes::Proxy).unwrap();
        let got = back.reconstruct(None).unwrap();
        for (a, b) in expected.as_slice().iter().zip(got.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_foreign_documents() {
        let dump = ModelDump {
            format: "other".into(),
            version: DUMP_VERSION,
            dims: [1, 1, 1],
            rank: 1,
            scale: vec![1.0],
            dictionaries: ["id".into(), "id".into(), "id".into()],
            codes: std::array::from_fn(|_| CodeTriplets {
                atoms: 1,
                entries: vec![(1, 1, 1.0)],
            }),
        };
        assert!(ModelDump::from_json(&dump.to_json().unwrap()).is_err());
        let wrong_version = ModelDump {
            format: DUMP_FORMAT.into(),
            version: 99,
            ..dump.clone()
        };
        assert!(ModelDump::from_json(&wrong_version.to_json().unwrap()).is_err());
        let ok = ModelDump {
            format: DUMP_FORMAT.into(),
            ..dump
        };
        assert_eq!(ok.reconstruct(None).unwrap().as_slice(), &[1.0]);
    }
}
