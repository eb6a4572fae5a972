//! Class-name embedding tables.
//!
//! Embeddings come from files produced by an external text encoder, or from
//! the deterministic synthetic generators below. The table is frozen: lookup
//! never mutates it, and a missing name is a hard error.
//!
//! File format: UTF-8 text. First data line `dim <D_g>`, then one line per
//! class: `<class_name>TAB<v1> <v2> ... <vD_g>`. Lines starting with `#` are
//! comments. Values are written with 17 significant digits, which round-trips
//! every f64 exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::{class_motif, mix_seed};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frozen map from class name to semantic embedding.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Tensor>,
}

impl ClassEmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(ClassEmbeddingTable {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Tensor) -> Result<()> {
        let name = name.into();
        if v.shape() != [self.dim] {
            return Err(Error::Shape(format!(
                "embedding for {name:?} has shape {:?}, want ({})",
                v.shape(),
                self.dim
            )));
        }
        v.ensure_finite("embedding")?;
        if self.entries.contains_key(&name) {
            return Err(Error::Input(format!("duplicate class name {name:?}")));
        }
        self.entries.insert(name, v);
        Ok(())
    }

    /// Hard error on a missing class, never a silent default.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Checks that every name in `required` has an entry.
    pub fn cover(&self, required: &[String]) -> Result<()> {
        for name in required {
            self.get(name)?;
        }
        Ok(())
    }
}

/// Parses an embedding file; errors carry 1-based line numbers.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<ClassEmbeddingTable> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path_str, e))?;
    let mut table: Option<ClassEmbeddingTable> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match &mut table {
            None => {
                let dim = line
                    .strip_prefix("dim ")
                    .and_then(|d| d.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: format!("expected `dim <D_g>`, got {line:?}"),
                    })?;
                table = Some(ClassEmbeddingTable::new(dim)?);
            }
            Some(table) => {
                let (name, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "embedding line lacks a tab separator".into(),
                })?;
                let values: Vec<f64> = rest
                    .split_whitespace()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad float {v:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if values.len() != table.dim() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!(
                            "class {name:?} has {} values, want {}",
                            values.len(),
                            table.dim()
                        ),
                    });
                }
                table.insert(name, Tensor::vector(values)).map_err(|e| match e {
                    Error::Input(msg) => Error::Parse { line: lineno, msg },
                    other => other,
                })?;
            }
        }
    }
    table.ok_or(Error::Parse {
        line: 0,
        msg: "file has no `dim` header".into(),
    })
}

/// Writes a table in the text format; values keep 17 significant digits so
/// a save/load cycle is bitwise exact.
pub fn save_embeddings(path: impl AsRef<Path>, table: &ClassEmbeddingTable) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    let mut out = String::new();
    out.push_str(&format!("dim {}\n", table.dim()));
    for (name, v) in &table.entries {
        let values: Vec<String> = v.data().iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&format!("{name}\t{}\n", values.join(" ")));
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(&path_str, e))
}

const SYNTH_TAG: u64 = 0x454d_4254; // "EMBT"

fn name_stream(name: &str, dim_seed: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(dim_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha12Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Deterministic pseudo-random unit embeddings: each vector is a pure
/// function of `(name, seed)`.
pub fn synth_embeddings(
    class_names: &[String],
    dim: usize,
    seed: u64,
) -> Result<ClassEmbeddingTable> {
    if dim < 2 {
        return Err(Error::Config(format!("embedding dim {dim} < 2")));
    }
    let mut table = ClassEmbeddingTable::new(dim)?;
    let normal = Normal::new(0.0, 1.0).expect("normal params");
    for name in class_names {
        let mut rng = name_stream(name, mix_seed(&[seed, SYNTH_TAG]));
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        table.insert(name, Tensor::vector(normalize(v)))?;
    }
    Ok(table)
}

/// Embeddings that genuinely carry class information for the synthetic
/// dataset: the class motif pattern is tiled across the vector and a small
/// name-keyed perturbation is added before normalization. Requires the
/// dataset generator's seed and cell size to recover the motifs.
pub fn synth_embeddings_aligned(
    classes: &[(usize, String)],
    dim: usize,
    dataset_seed: u64,
    cell: usize,
    seed: u64,
) -> Result<ClassEmbeddingTable> {
    if dim < 2 {
        return Err(Error::Config(format!("embedding dim {dim} < 2")));
    }
    let mut table = ClassEmbeddingTable::new(dim)?;
    let normal = Normal::new(0.0, 1.0).expect("normal params");
    for (class_id, name) in classes {
        let motif = class_motif(dataset_seed, *class_id, cell);
        let mut v: Vec<f64> = (0..dim).map(|i| motif[i % motif.len()] - 0.8).collect();
        let mut rng = name_stream(name, mix_seed(&[seed, SYNTH_TAG, 1]));
        for x in v.iter_mut() {
            *x += 0.02 * normal.sample(&mut rng);
        }
        table.insert(name, Tensor::vector(normalize(v)))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_single_entry_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "# comment\ndim 4\ncat\t1 0 0 0\n").unwrap();
        let table = load_embeddings(&path).unwrap();
        assert_eq!(table.dim(), 4);
        assert_eq!(table.len(), 1);
        assert_eq!(table.get("cat").unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_name_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "dim 2\ncat\t1 0\ncat\t0 1\n").unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "dim 3\ndog\t1 0\n").unwrap();
        match load_embeddings(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let names: Vec<String> = (0..12).map(|i| format!("class_{i:02}")).collect();
        let table = synth_embeddings(&names, 7, 123).unwrap();
        save_embeddings(&path, &table).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded.dim(), table.dim());
        for name in &names {
            let (a, b) = (table.get(name).unwrap(), loaded.get(name).unwrap());
            assert_eq!(a.data(), b.data(), "{name} drifted through the file");
        }
    }

    #[test]
    fn synth_is_deterministic_per_name_and_seed() {
        let names = vec!["a".to_string(), "b".to_string()];
        let t1 = synth_embeddings(&names, 8, 9).unwrap();
        let t2 = synth_embeddings(&names, 8, 9).unwrap();
        assert_eq!(t1.get("a").unwrap(), t2.get("a").unwrap());
        let t3 = synth_embeddings(&names, 8, 10).unwrap();
        assert_ne!(t1.get("a").unwrap(), t3.get("a").unwrap());
    }

    #[test]
    fn synth_vectors_are_unit_norm_and_collision_free() {
        let names: Vec<String> = (0..1000).map(|i| format!("name_{i}")).collect();
        let table = synth_embeddings(&names, 16, 77).unwrap();
        let mut seen: Vec<&Tensor> = Vec::new();
        for name in &names {
            let v = table.get(name).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-12, "{name} norm {}", v.norm());
            assert!(!seen.contains(&v), "collision at {name}");
            seen.push(v);
        }
    }

    #[test]
    fn missing_name_is_a_hard_error() {
        let table = synth_embeddings(&["x".to_string()], 4, 0).unwrap();
        assert!(matches!(
            table.get("y"),
            Err(Error::MissingEmbedding(_))
        ));
    }

    #[test]
    fn aligned_embeddings_track_motifs() {
        let classes: Vec<(usize, String)> =
            (0..6).map(|i| (i, format!("class_{i:02}"))).collect();
        let t1 = synth_embeddings_aligned(&classes, 32, 5, 4, 1).unwrap();
        let t2 = synth_embeddings_aligned(&classes, 32, 5, 4, 1).unwrap();
        for (_, name) in &classes {
            let v = t1.get(name).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert_eq!(v, t2.get(name).unwrap());
        }
        // two classes with different motifs are far apart relative to noise
        let a = t1.get("class_00").unwrap();
        let b = t1.get("class_01").unwrap();
        assert!(a.sub(b).unwrap().norm() > 1e-3);
    }
}
