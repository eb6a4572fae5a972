//! Dataset model, synthetic data generation, and episodic sampling.
//!
//! The synthetic generator produces grayscale images on a cell grid: each
//! class owns a high-contrast motif pattern stamped at a few random cells,
//! the remaining cells carry clutter drawn from a distractor pool shared by
//! all classes, over a low-amplitude noise background. Class-discriminative
//! and spurious features therefore coexist in every image, and the motif
//! cell positions are available as ground truth for attention diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{read_tensor_block, write_tensor_block};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image: Tensor,
    pub class_id: usize,
    pub class_name: String,
}

/// Which split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Validation,
    Novel,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Validation => "val",
            Split::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" | "validation" => Ok(Split::Validation),
            "novel" | "test" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Class-disjoint base/validation/novel splits.
#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub base: Vec<DatasetRecord>,
    pub validation: Vec<DatasetRecord>,
    pub novel: Vec<DatasetRecord>,
}

impl SplitDataset {
    pub fn records(&self, split: Split) -> &[DatasetRecord] {
        match split {
            Split::Base => &self.base,
            Split::Validation => &self.validation,
            Split::Novel => &self.novel,
        }
    }

    /// Sorted `(class_id, class_name)` pairs present in a split.
    pub fn classes(&self, split: Split) -> Vec<(usize, String)> {
        let mut map = BTreeMap::new();
        for r in self.records(split) {
            map.insert(r.class_id, r.class_name.clone());
        }
        map.into_iter().collect()
    }

    /// Sorted class names over all splits.
    pub fn all_class_names(&self) -> Vec<String> {
        let mut map = BTreeMap::new();
        for split in [Split::Base, Split::Validation, Split::Novel] {
            for r in self.records(split) {
                map.insert(r.class_id, r.class_name.clone());
            }
        }
        map.into_values().collect()
    }

    /// Checks that the class-name/id mapping is bijective per split and the
    /// name sets of base and novel are disjoint.
    pub fn validate(&self) -> Result<()> {
        for split in [Split::Base, Split::Validation, Split::Novel] {
            let mut by_id: BTreeMap<usize, &str> = BTreeMap::new();
            let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
            for r in self.records(split) {
                if r.class_name.is_empty() {
                    return Err(Error::Input("empty class name".into()));
                }
                if let Some(&n) = by_id.get(&r.class_id) {
                    if n != r.class_name {
                        return Err(Error::Input(format!(
                            "class id {} maps to both {:?} and {:?}",
                            r.class_id, n, r.class_name
                        )));
                    }
                }
                if let Some(&i) = by_name.get(r.class_name.as_str()) {
                    if i != r.class_id {
                        return Err(Error::Input(format!(
                            "class name {:?} maps to both {} and {}",
                            r.class_name, i, r.class_id
                        )));
                    }
                }
                by_id.insert(r.class_id, &r.class_name);
                by_name.insert(&r.class_name, r.class_id);
            }
        }
        let base: std::collections::BTreeSet<_> =
            self.base.iter().map(|r| r.class_name.as_str()).collect();
        for r in self.novel.iter().chain(self.validation.iter()) {
            if base.contains(r.class_name.as_str()) {
                return Err(Error::Input(format!(
                    "class {:?} appears in base and in a held-out split",
                    r.class_name
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth motif cell indices, aligned with the generated records.
#[derive(Debug, Clone, Default)]
pub struct MotifTruth {
    pub base: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub novel: Vec<Vec<usize>>,
}

impl MotifTruth {
    pub fn cells(&self, split: Split) -> &[Vec<usize>] {
        match split {
            Split::Base => &self.base,
            Split::Validation => &self.validation,
            Split::Novel => &self.novel,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic combination of seed components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x51ED_2701_8C95_C3A7, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const MOTIF_TAG: u64 = 0x4d4f_5449; // "MOTI"
const POOL_TAG: u64 = 0x504f_4f4c; // "POOL"
const DISTRACTOR_TAG: u64 = 0x4449_5354; // "DIST"
const RECORD_TAG: u64 = 0x5245_43; // "REC"
const DISTRACTOR_POOL: usize = 6;

/// The class-specific motif pattern: `cell*cell` values in [0.6, 1.0].
pub fn class_motif(dataset_seed: u64, class_id: usize, cell: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[dataset_seed, MOTIF_TAG, class_id as u64]));
    (0..cell * cell).map(|_| rng.gen_range(0.6..1.0)).collect()
}

/// Grid cells a class prefers for its motif: half the grid, class-specific.
/// The positional bias keeps the class signal linearly detectable while the
/// shared distractor pool still lands anywhere.
pub fn class_cell_pool(dataset_seed: u64, class_id: usize, cells: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[dataset_seed, POOL_TAG, class_id as u64]));
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let take = (cells / 2).max(3).min(cells);
    let mut pool = order[..take].to_vec();
    pool.sort_unstable();
    pool
}

fn distractor_pattern(dataset_seed: u64, idx: usize, cell: usize) -> Vec<f64> {
    let mut rng =
        ChaCha12Rng::seed_from_u64(mix_seed(&[dataset_seed, DISTRACTOR_TAG, idx as u64]));
    (0..cell * cell).map(|_| rng.gen_range(0.25..0.65)).collect()
}

fn stamp(img: &mut [f64], image_size: usize, cell: usize, cell_idx: usize, pat: &[f64], rng: &mut ChaCha12Rng) {
    let grid = image_size / cell;
    let (gy, gx) = (cell_idx / grid, cell_idx % grid);
    for py in 0..cell {
        for px in 0..cell {
            let v = (pat[py * cell + px] + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            img[(gy * cell + py) * image_size + gx * cell + px] = v;
        }
    }
}

fn synth_record(
    dataset_seed: u64,
    class_id: usize,
    record_idx: usize,
    image_size: usize,
    cell: usize,
    motifs: &[Vec<f64>],
    distractors: &[Vec<f64>],
) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(&[
        dataset_seed,
        RECORD_TAG,
        class_id as u64,
        record_idx as u64,
    ]));
    let grid = image_size / cell;
    let cells = grid * grid;
    let mut img: Vec<f64> = (0..image_size * image_size)
        .map(|_| rng.gen_range(0.0..0.15))
        .collect();
    let mut pool = class_cell_pool(dataset_seed, class_id, cells);
    pool.shuffle(&mut rng);
    let n_motif = rng.gen_range(3..=4usize).min(pool.len());
    let motif_cells: Vec<usize> = pool[..n_motif].to_vec();
    let mut rest: Vec<usize> = (0..cells).filter(|c| !motif_cells.contains(c)).collect();
    rest.shuffle(&mut rng);
    let n_distract = rng.gen_range(2..=4usize).min(rest.len());
    let distract_cells: Vec<usize> = rest[..n_distract].to_vec();
    for &c in &distract_cells {
        let which = rng.gen_range(0..distractors.len());
        stamp(&mut img, image_size, cell, c, &distractors[which], &mut rng);
    }
    for &c in &motif_cells {
        stamp(&mut img, image_size, cell, c, &motifs[class_id], &mut rng);
    }
    let tensor = Tensor::new(vec![image_size, image_size, 1], img).expect("image shape");
    let mut sorted_cells = motif_cells;
    sorted_cells.sort_unstable();
    (tensor, sorted_cells)
}

/// Synthetic dataset with motif ground truth. Splits are class-disjoint:
/// roughly half the classes go to base and a quarter each to validation and
/// novel. Deterministic in every byte given the same arguments.
pub fn generate_synthetic_dataset_with_truth(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    cell: usize,
    seed: u64,
) -> Result<(SplitDataset, MotifTruth)> {
    if num_classes < 4 {
        return Err(Error::Config(format!(
            "need at least 4 classes for disjoint splits, got {num_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if cell == 0 || image_size % cell != 0 {
        return Err(Error::Config(format!(
            "cell {cell} does not divide image size {image_size}"
        )));
    }
    let val_classes = (num_classes / 4).max(1);
    let novel_classes = (num_classes / 4).max(1);
    let base_classes = num_classes - val_classes - novel_classes;

    let motifs: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| class_motif(seed, c, cell))
        .collect();
    let distractors: Vec<Vec<f64>> = (0..DISTRACTOR_POOL)
        .map(|d| distractor_pattern(seed, d, cell))
        .collect();

    let mut ds = SplitDataset::default();
    let mut truth = MotifTruth::default();
    for class_id in 0..num_classes {
        let class_name = format!("class_{class_id:02}");
        let (records, cells) = if class_id < base_classes {
            (&mut ds.base, &mut truth.base)
        } else if class_id < base_classes + val_classes {
            (&mut ds.validation, &mut truth.validation)
        } else {
            (&mut ds.novel, &mut truth.novel)
        };
        for idx in 0..per_class {
            let (image, motif_cells) =
                synth_record(seed, class_id, idx, image_size, cell, &motifs, &distractors);
            records.push(DatasetRecord {
                image,
                class_id,
                class_name: class_name.clone(),
            });
            cells.push(motif_cells);
        }
    }
    ds.validate()?;
    Ok((ds, truth))
}

pub fn generate_synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    cell: usize,
    seed: u64,
) -> Result<SplitDataset> {
    generate_synthetic_dataset_with_truth(num_classes, per_class, image_size, cell, seed)
        .map(|(ds, _)| ds)
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// An N-way K-shot task sampled from one split.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Episode class order; query labels index into this list.
    pub class_names: Vec<String>,
    /// `support[c]` holds the K support records of class `c`.
    pub support: Vec<Vec<DatasetRecord>>,
    /// Query records with their label index.
    pub query: Vec<(DatasetRecord, usize)>,
    pub seed: u64,
}

/// Samples an episode: `way` distinct classes drawn uniformly without
/// replacement, then disjoint support/query records within each class.
/// A pure function of its arguments.
pub fn sample_episode(
    records: &[DatasetRecord],
    way: usize,
    shot: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Config("way and shot must be positive".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_name.as_str()).or_default().push(r);
    }
    let needed = shot + queries_per_class;
    let eligible: Vec<&str> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= needed)
        .map(|(k, _)| *k)
        .collect();
    if eligible.len() < way {
        return Err(Error::Sampling(format!(
            "need {way} classes with at least {needed} records, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pool: Vec<&str> = eligible;
    // partial Fisher-Yates: first `way` entries are a uniform sample
    for i in 0..way {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let chosen: Vec<String> = pool[..way].iter().map(|s| s.to_string()).collect();

    let mut support = Vec::with_capacity(way);
    let mut query = Vec::new();
    for (label, name) in chosen.iter().enumerate() {
        let members = &by_class[name.as_str()];
        let mut idx: Vec<usize> = (0..members.len()).collect();
        idx.shuffle(&mut rng);
        let sup: Vec<DatasetRecord> = idx[..shot].iter().map(|&i| members[i].clone()).collect();
        for &i in &idx[shot..shot + queries_per_class] {
            query.push((members[i].clone(), label));
        }
        support.push(sup);
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class,
        class_names: chosen,
        support,
        query,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Prototypes
// ---------------------------------------------------------------------------

/// Per-class mean of support features.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub class_name: String,
    pub vector: Tensor,
}

/// Exact arithmetic mean per class, in the order given.
pub fn compute_prototypes(groups: &[(String, Vec<Tensor>)]) -> Result<Vec<Prototype>> {
    let mut out = Vec::with_capacity(groups.len());
    for (name, feats) in groups {
        if feats.is_empty() {
            return Err(Error::Input(format!("class {name:?} has no features")));
        }
        let dim = feats[0].len();
        let mut sum = Tensor::zeros(&[dim]);
        for f in feats {
            if f.shape() != [dim] {
                return Err(Error::Shape(format!(
                    "feature shape {:?} in class {name:?}, want ({dim})",
                    f.shape()
                )));
            }
            sum.add_assign(f);
        }
        let k = feats.len() as f64;
        out.push(Prototype {
            class_name: name.clone(),
            vector: sum.map(|v| v / k),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk dataset directories
// ---------------------------------------------------------------------------

/// Writes `classes.tsv` plus one tensor-block file per record under
/// `base/`, `val/` and `novel/`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &SplitDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let classes_path = dir.join("classes.tsv");
    let mut classes: BTreeMap<usize, &str> = BTreeMap::new();
    for split in [Split::Base, Split::Validation, Split::Novel] {
        for r in ds.records(split) {
            classes.insert(r.class_id, &r.class_name);
        }
    }
    let mut tsv = String::new();
    for (id, name) in &classes {
        tsv.push_str(&format!("{id}\t{name}\n"));
    }
    fs::write(&classes_path, tsv).map_err(|e| Error::io(classes_path.display().to_string(), e))?;

    for split in [Split::Base, Split::Validation, Split::Novel] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(sub.display().to_string(), e))?;
        for (i, r) in ds.records(split).iter().enumerate() {
            let path = sub.join(format!("{i:05}_c{:03}.bin", r.class_id));
            let path_str = path.display().to_string();
            let file = fs::File::create(&path).map_err(|e| Error::io(&path_str, e))?;
            let mut w = BufWriter::new(file);
            write_tensor_block(&mut w, &r.class_name, &r.image, &path_str)?;
            w.flush().map_err(|e| Error::io(&path_str, e))?;
        }
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SplitDataset> {
    let dir = dir.as_ref();
    let classes_path = dir.join("classes.tsv");
    let text = fs::read_to_string(&classes_path)
        .map_err(|e| Error::io(classes_path.display().to_string(), e))?;
    let mut id_to_name: BTreeMap<usize, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("classes.tsv line {line:?} lacks a tab"),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad class id {id:?}"),
        })?;
        id_to_name.insert(id, name.to_string());
    }

    let mut ds = SplitDataset::default();
    for split in [Split::Base, Split::Validation, Split::Novel] {
        let sub = dir.join(split.name());
        let mut names: Vec<_> = fs::read_dir(&sub)
            .map_err(|e| Error::io(sub.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.ends_with(".bin"))
            .collect();
        names.sort();
        for fname in names {
            let path = sub.join(&fname);
            let path_str = path.display().to_string();
            let class_id: usize = fname
                .trim_end_matches(".bin")
                .rsplit_once("_c")
                .and_then(|(_, id)| id.parse().ok())
                .ok_or_else(|| Error::format(&path_str, "record filename lacks a class id"))?;
            let file = fs::File::open(&path).map_err(|e| Error::io(&path_str, e))?;
            let mut r = BufReader::new(file);
            let (name, image) = read_tensor_block(&mut r, &path_str)?
                .ok_or_else(|| Error::format(&path_str, "empty record file"))?;
            let expected = id_to_name.get(&class_id).ok_or_else(|| {
                Error::format(&path_str, format!("class id {class_id} not in classes.tsv"))
            })?;
            if &name != expected {
                return Err(Error::format(
                    &path_str,
                    format!("block name {name:?} does not match classes.tsv {expected:?}"),
                ));
            }
            let records = match split {
                Split::Base => &mut ds.base,
                Split::Validation => &mut ds.validation,
                Split::Novel => &mut ds.novel,
            };
            records.push(DatasetRecord {
                image,
                class_id,
                class_name: name,
            });
        }
    }
    ds.validate()?;
    Ok(ds)
}
