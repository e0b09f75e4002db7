//! Writes a corpus to disk with a JSON-lines manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::glyphs;
use super::scene::{BackgroundKind, GlyphScene};
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub rng_seed: u64,
    pub background: BackgroundKind,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub masks: Vec<String>,
    pub seeds: Vec<String>,
    pub symbols: Vec<usize>,
}

/// Writes `scene_{id}.png`, one `{0,255}` PNG mask and one TSR1 seed per
/// instance, and `manifest.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &[GlyphScene]) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut lines = String::new();
    for (id, scene) in corpus.iter().enumerate() {
        let stem = format!("scene_{id:04}");
        let image = format!("{stem}.png");
        imageio::write_rgb(&dir.join(&image), &scene.image)?;
        let mut masks = Vec::new();
        let mut seeds = Vec::new();
        for (k, inst) in scene.instances.iter().enumerate() {
            let name = glyphs::name_of(inst.symbol).unwrap_or('?');
            let m = format!("{stem}_{k}_{name}.png");
            let s = format!("{stem}_{k}_{name}_seed.tsr");
            imageio::write_mask(&dir.join(&m), &inst.mask)?;
            imageio::write_gray(&dir.join(&s), inst.seed.values())?;
            masks.push(m);
            seeds.push(s);
        }
        let rec = ManifestRecord {
            id,
            rng_seed: scene.rng_seed,
            background: scene.background,
            image,
            masks,
            seeds,
            symbols: scene.instances.iter().map(|i| i.symbol).collect(),
        };
        let _ = writeln!(
            lines,
            "{}",
            serde_json::to_string(&rec).expect("record serializes")
        );
        records.push(rec);
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.into(),
                reason: e.to_string(),
            })
        })
        .collect()
}
