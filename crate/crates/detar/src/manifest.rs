//! Dataset splits on disk: one CRSP file per set plus a JSON manifest per split.
//!
//! ```text
//! <dir>/train.manifest.json
//! <dir>/train/000000.crsp
//! ...
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use detar_core::data::{generate, set_seed, CorrespondenceSet, GenSpec, SetMeta};

use crate::crsp;
use crate::error::{Error, Result};
use crate::pool::parallel_map;

pub const MANIFEST_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub index: u64,
    pub n_corr: usize,
    pub meta: SetMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    /// Base seed of the whole dataset; per-set seeds are derived from it.
    pub seed: u64,
    /// Generator settings; each file overrides only the inlier ratio.
    pub gen: GenSpec,
    pub ratios: Vec<f64>,
    pub files: Vec<FileEntry>,
    /// Effective configuration of the run that produced the split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest.json"))
}

fn spec_for(gen: &GenSpec, ratio: f64) -> GenSpec {
    GenSpec { inlier_ratio: ratio, ..gen.clone() }
}

/// Generates and writes the train, val and test splits. Set `i` of a split
/// uses `ratios[i % ratios.len()]` and a seed derived from `(seed, split, i)`,
/// so splits never share a seed stream.
pub fn make_split(
    dir: &Path,
    gen: &GenSpec,
    ratios: &[f64],
    counts: &SplitCounts,
    seed: u64,
    threads: usize,
    config: Option<serde_json::Value>,
) -> Result<Vec<Manifest>> {
    if ratios.is_empty() {
        return Err(Error::Config("at least one inlier ratio is required".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("inlier ratio {r} outside [0, 1]")));
    }
    for split in SPLITS {
        if counts.get(split) == 0 {
            return Err(Error::Config(format!("split `{split}` needs at least one set")));
        }
    }
    gen.validate()?;
    let mut out = Vec::new();
    for split in SPLITS {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(Error::io(&sub))?;
        let indices: Vec<u64> = (0..counts.get(split) as u64).collect();
        let files = parallel_map(&indices, threads, |_, &i| -> Result<FileEntry> {
            let ratio = ratios[i as usize % ratios.len()];
            let set = generate(&spec_for(gen, ratio), set_seed(seed, split, i))?;
            let rel = format!("{split}/{i:06}.crsp");
            crsp::write_set(dir.join(&rel), &set)?;
            Ok(FileEntry { path: rel, index: i, n_corr: set.len(), meta: set.meta })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            version: MANIFEST_VERSION,
            split: split.into(),
            seed,
            gen: gen.clone(),
            ratios: ratios.to_vec(),
            files,
            config: config.clone(),
        };
        write_manifest(dir, &m)?;
        out.push(m);
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = manifest_path(dir, &m.split);
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(&path, text).map_err(Error::io(&path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Version { kind: "manifest", found: m.version, expected: MANIFEST_VERSION });
    }
    Ok(m)
}

/// A split's manifest, from a dataset directory or a manifest file path.
pub fn open_split(data: &Path, split: &str) -> Result<(PathBuf, Manifest)> {
    let path = if data.is_dir() { manifest_path(data, split) } else { data.to_path_buf() };
    let m = read_manifest(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((root, m))
}

/// Reads every set of a split, in manifest order, with its relative path as id.
pub fn load_sets(root: &Path, m: &Manifest, threads: usize) -> Result<Vec<(String, CorrespondenceSet)>> {
    parallel_map(&m.files, threads, |_, f| -> Result<(String, CorrespondenceSet)> {
        let set = crsp::read_set(root.join(&f.path))?;
        if set.meta != f.meta || set.len() != f.n_corr {
            return Err(Error::Invalid(format!("{} does not match its manifest entry", f.path)));
        }
        Ok((f.path.clone(), set))
    })
    .into_iter()
    .collect()
}

pub fn load_split(data: &Path, split: &str, threads: usize) -> Result<Vec<(String, CorrespondenceSet)>> {
    let (root, m) = open_split(data, split)?;
    load_sets(&root, &m, threads)
}

/// Regenerates every listed set and compares it byte for byte with the file on disk.
/// Returns the paths that differ.
pub fn verify(root: &Path, m: &Manifest, threads: usize) -> Result<Vec<String>> {
    let checks = parallel_map(&m.files, threads, |_, f| -> Result<Option<String>> {
        let set = generate(&spec_for(&m.gen, f.meta.inlier_ratio), f.meta.seed)?;
        let disk = fs::read(root.join(&f.path)).map_err(Error::io(root.join(&f.path)))?;
        Ok((crsp::encode(&set)? != disk).then(|| f.path.clone()))
    });
    checks.into_iter().filter_map(Result::transpose).collect()
}

/// Seeds used by more than one file across the given manifests.
pub fn seed_collisions(manifests: &[Manifest]) -> Vec<u64> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for f in manifests.iter().flat_map(|m| &m.files) {
        if !seen.insert(f.meta.seed) {
            dup.insert(f.meta.seed);
        }
    }
    dup.into_iter().collect()
}

/// Number of files per requested ratio, in `m.ratios` order.
pub fn ratio_histogram(m: &Manifest) -> Vec<usize> {
    m.ratios.iter().map(|&r| m.files.iter().filter(|f| f.meta.inlier_ratio == r).count()).collect()
}
