//! Scene-pair storage, synthetic scenes and sampling.

pub mod archive;
pub mod sampling;
pub mod scene;
pub mod synth;

pub use archive::{write_atomic, Archive, Array, DType};
pub use sampling::{downsample_gt, resample_to};
pub use scene::ScenePair;
pub use synth::{scene_seed, synth_dataset, synth_rigid_scene};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Every `.npz` file directly inside `dir`, sorted by file name.
pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "npz") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every scene pair of [`scene_files`].
pub fn load_scene_dir(dir: &Path) -> Result<Vec<(PathBuf, ScenePair)>> {
    scene_files(dir)?
        .into_iter()
        .map(|p| ScenePair::load(&p).map(|s| (p, s)))
        .collect()
}
