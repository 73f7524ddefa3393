//! On-disk scene layout: `scenes/<id>/bg.ppm`, `scenes/<id>/frame_<t>.ppm`
//! and a `manifest.txt` with one `scene_id T seed` line per scene.

use std::fs;
use std::path::{Path, PathBuf};

use rspu_core::data::{Image, TimeLapseScene};
use rspu_core::train::Dataset;

use crate::{ppm, CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";

fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn frame_path(root: &Path, id: &str, t: usize) -> PathBuf {
    scene_dir(root, id).join(format!("frame_{t}.ppm"))
}

pub fn background_path(root: &Path, id: &str) -> PathBuf {
    scene_dir(root, id).join("bg.ppm")
}

pub fn write(root: &Path, scenes: &[TimeLapseScene]) -> CliResult<()> {
    let mut manifest = String::new();
    for scene in scenes {
        let dir = scene_dir(root, &scene.scene_id);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        ppm::write(&background_path(root, &scene.scene_id), &scene.background, None)?;
        for (t, frame) in scene.frames.iter().enumerate() {
            ppm::write(&frame_path(root, &scene.scene_id, t), frame, None)?;
        }
        manifest.push_str(&format!("{} {} {}\n", scene.scene_id, scene.frames.len(), scene.seed));
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(CliError::io(&path))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub frames: usize,
    pub seed: u64,
}

pub fn read_manifest(root: &Path) -> CliResult<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let bad = |n: usize, why: &str| CliError::Data(format!("{}:{}: {why}", path.display(), n + 1));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, frames, seed] = fields[..] else {
            return Err(bad(n, "expected `scene_id T seed`"));
        };
        if id.contains(['/', '\\']) || id == ".." || id == "." {
            return Err(bad(n, "scene id must be a plain directory name"));
        }
        let frames: usize = frames.parse().map_err(|_| bad(n, "T is not a count"))?;
        if frames < 2 {
            return Err(bad(n, "a scene needs at least 2 frames"));
        }
        entries.push(ManifestEntry {
            scene_id: id.to_string(),
            frames,
            seed: seed.parse().map_err(|_| bad(n, "seed is not an integer"))?,
        });
    }
    if entries.is_empty() {
        return Err(CliError::Data(format!("{}: no scenes", path.display())));
    }
    Ok(entries)
}

/// Reads every scene of the manifest, checking that all images share one
/// 3-channel shape.
pub fn read(root: &Path) -> CliResult<Vec<TimeLapseScene>> {
    let mut shape: Option<[usize; 3]> = None;
    let mut check = |img: Image, path: PathBuf| -> CliResult<Image> {
        if img.channels() != 3 {
            return Err(CliError::Data(format!("{}: expected an RGB (P6) image", path.display())));
        }
        match shape {
            Some(s) if s != img.shape() => Err(CliError::Data(format!(
                "{}: shape {:?} differs from {:?}",
                path.display(),
                img.shape(),
                s
            ))),
            _ => {
                shape = Some(img.shape());
                Ok(img)
            }
        }
    };
    read_manifest(root)?
        .into_iter()
        .map(|e| {
            let bg = background_path(root, &e.scene_id);
            let background = check(ppm::read(&bg)?, bg)?;
            let frames = (0..e.frames)
                .map(|t| {
                    let p = frame_path(root, &e.scene_id, t);
                    check(ppm::read(&p)?, p)
                })
                .collect::<CliResult<_>>()?;
            Ok(TimeLapseScene {
                scene_id: e.scene_id,
                seed: e.seed,
                background,
                frames,
            })
        })
        .collect()
}

/// Normalised training view of a scene list.
pub fn training_set(scenes: &[TimeLapseScene]) -> CliResult<Dataset> {
    let ds = Dataset::from_scenes(scenes)?;
    ds.validate()?;
    Ok(ds)
}
