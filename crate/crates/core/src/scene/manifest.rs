use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate, SceneConfig, ScenePair, SceneSampler};
use crate::error::{Error, Result};
use crate::image::{write_file, Image};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths relative to the dataset directory.
    pub source: String,
    pub target: String,
    pub config: SceneConfig,
}

/// Dataset index. Ground truth is not stored: every pair is regenerated
/// exactly from its config, and the stored images are checked against it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub sampler: Option<SceneSampler>,
    pub pairs: Vec<ManifestEntry>,
}

/// Writes images (PPM, plus PNG when `png`) and `manifest.json` into `dir`.
pub fn write_dataset(
    pairs: &[ScenePair],
    dir: &Path,
    png: bool,
    sampler: Option<&SceneSampler>,
    seed: Option<u64>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let id = format!("pair_{:05}", i);
        let source = format!("{}_src.ppm", id);
        let target = format!("{}_tgt.ppm", id);
        write_file(&dir.join(&source), &pair.source.encode_ppm())?;
        write_file(&dir.join(&target), &pair.target.encode_ppm())?;
        if png {
            pair.source.write_png(&dir.join(format!("{}_src.png", id)))?;
            pair.target.write_png(&dir.join(format!("{}_tgt.png", id)))?;
        }
        entries.push(ManifestEntry {
            id,
            source,
            target,
            config: pair.config.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        sampler: sampler.cloned(),
        pairs: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "manifest schema version {} (expected {})",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            ),
        ));
    }
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<ScenePair>)> {
    let manifest = read_manifest(dir)?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for entry in &manifest.pairs {
        let pair = generate(&entry.config)?;
        for (file, img) in [(&entry.source, &pair.source), (&entry.target, &pair.target)] {
            let path = dir.join(file);
            if Image::read_ppm(&path)? != *img {
                return Err(Error::format(&path, "image does not match its scene config"));
            }
        }
        pairs.push(pair);
    }
    Ok((manifest, pairs))
}
