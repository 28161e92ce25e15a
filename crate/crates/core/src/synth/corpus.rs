use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_sample, SyntheticTreeSpec};
use crate::error::{Error, Result};
use crate::volume::write_label_map;

pub const MANIFEST_NAME: &str = "manifest.json";

/// One generated tree; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub seed: u64,
    pub mhd: String,
    pub graph: String,
    /// Branch ID → class name.
    pub labels: BTreeMap<BranchKey, String>,
}

pub type BranchKey = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Spec of the first tree; tree `i` uses `seed + i`.
    pub spec: SyntheticTreeSpec,
    pub trees: Vec<CorpusEntry>,
}

/// Generates `count` trees into `dir` and writes `manifest.json`.
pub fn write_corpus(dir: &Path, base: &SyntheticTreeSpec, count: usize) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut trees = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let spec = SyntheticTreeSpec { seed: base.seed.wrapping_add(i), ..base.clone() };
        let sample = generate_sample(&spec)?;
        let stem = format!("tree_{:06}", spec.seed);
        let mhd = format!("{stem}.mhd");
        let graph = format!("{stem}.graph.json");
        write_label_map(&sample.volume, &dir.join(&mhd))?;
        sample.graph.write_json(&dir.join(&graph))?;
        let labels = sample.tree.nodes.iter().map(|n| (n.id, n.class.name().to_owned())).collect();
        trees.push(CorpusEntry { seed: spec.seed, mhd, graph, labels });
    }
    let manifest = CorpusManifest { spec: base.clone(), trees };
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Accepts the manifest file or the directory holding it.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let s = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_str(&s)?)
}
