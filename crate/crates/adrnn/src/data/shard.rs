//! Binary dataset shards: `manifest.json` plus raw little-endian blobs
//! (`images.bin`, `labels.bin`, `difficulty.bin`), each CRC-checked.
//! Shards are re-generatable bit-exactly from (spec, seed).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::maze::{gen_maze, MazeSpec};
use crate::data::pathfinder::{gen_pathfinder, PathFinderSpec};
use crate::error::{AdrnnError, Result};
use crate::tensor::{crc32, from_le_bytes, to_le_bytes};

pub const SHARD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format_version: u32,
    pub task: String,
    pub spec: serde_json::Value,
    pub count: usize,
    pub seed: u64,
    pub blobs: BTreeMap<String, BlobInfo>,
}

/// In-memory shard: images plus per-sample labels and difficulty tags.
#[derive(Debug, Clone)]
pub struct Shard {
    pub manifest: ShardManifest,
    /// Mazes: [count,3,S,S]; PathFinder: [count,1,S,S].
    pub images: ArrayD<f32>,
    /// Mazes: [count,S,S] masks; PathFinder: [count] labels.
    pub labels: ArrayD<f32>,
    /// [count] difficulty tag (grid_n or path_len).
    pub difficulty: Vec<f32>,
}

impl Shard {
    pub fn count(&self) -> usize {
        self.manifest.count
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_blob(dir, "images.bin", &self.images)?;
        write_blob(dir, "labels.bin", &self.labels)?;
        let diff = ArrayD::from_shape_vec(IxDyn(&[self.difficulty.len()]), self.difficulty.clone())
            .expect("difficulty");
        write_blob(dir, "difficulty.bin", &diff)?;
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, dir.join("manifest.json"))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Shard> {
        let manifest: ShardManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != SHARD_FORMAT_VERSION {
            return Err(AdrnnError::FormatVersion {
                found: manifest.format_version,
                expected: SHARD_FORMAT_VERSION,
            });
        }
        let images = read_blob(dir, "images.bin", &manifest)?;
        let labels = read_blob(dir, "labels.bin", &manifest)?;
        let difficulty = read_blob(dir, "difficulty.bin", &manifest)?
            .into_raw_vec_and_offset()
            .0;
        let expect_counts = [images.shape()[0], labels.shape()[0], difficulty.len()];
        if expect_counts.iter().any(|&c| c != manifest.count) {
            return Err(AdrnnError::ShardFormat(format!(
                "blob counts {expect_counts:?} do not match manifest count {}",
                manifest.count
            )));
        }
        Ok(Shard {
            manifest,
            images,
            labels,
            difficulty,
        })
    }
}

fn write_blob(dir: &Path, name: &str, t: &ArrayD<f32>) -> Result<()> {
    let bytes = to_le_bytes(t.as_slice().expect("contiguous"));
    let tmp = dir.join(format!("{name}.tmp"));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, manifest: &ShardManifest) -> Result<ArrayD<f32>> {
    let info = manifest
        .blobs
        .get(name)
        .ok_or_else(|| AdrnnError::ShardFormat(format!("manifest missing blob '{name}'")))?;
    let bytes = fs::read(dir.join(name))?;
    let computed = crc32(&bytes);
    if computed != info.crc32 {
        return Err(AdrnnError::ChecksumFailure {
            blob: name.to_string(),
            stored: info.crc32,
            computed,
        });
    }
    let values = from_le_bytes::<f32>(&bytes, &info.dtype)?;
    if values.len() != info.shape.iter().product::<usize>() {
        return Err(AdrnnError::ShardFormat(format!(
            "blob '{name}' truncated: {} values for shape {:?}",
            values.len(),
            info.shape
        )));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&info.shape), values).expect("shape"))
}

fn blob_info(t: &ArrayD<f32>) -> BlobInfo {
    BlobInfo {
        dtype: "f32".into(),
        shape: t.shape().to_vec(),
        crc32: crc32(&to_le_bytes(t.as_slice().expect("contiguous"))),
    }
}

fn manifest_for(task: &str, spec: serde_json::Value, count: usize, seed: u64, shard: (&ArrayD<f32>, &ArrayD<f32>, &ArrayD<f32>)) -> ShardManifest {
    let mut blobs = BTreeMap::new();
    blobs.insert("images.bin".to_string(), blob_info(shard.0));
    blobs.insert("labels.bin".to_string(), blob_info(shard.1));
    blobs.insert("difficulty.bin".to_string(), blob_info(shard.2));
    ShardManifest {
        format_version: SHARD_FORMAT_VERSION,
        task: task.to_string(),
        spec,
        count,
        seed,
        blobs,
    }
}

/// Generate a full maze shard; deterministic in (spec, seed).
pub fn generate_maze_shard(spec: &MazeSpec) -> Result<Shard> {
    spec.validate()?;
    let s = spec.image_px();
    let n = spec.count;
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, 3, s, s]));
    let mut labels = ArrayD::<f32>::zeros(IxDyn(&[n, s, s]));
    let mut difficulty = vec![0f32; n];
    for i in 0..n {
        let sample = gen_maze(spec, i as u64)?;
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&sample.image);
        labels
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&sample.mask);
        difficulty[i] = sample.difficulty as f32;
    }
    let diff =
        ArrayD::from_shape_vec(IxDyn(&[n]), difficulty.clone()).expect("difficulty");
    let manifest = manifest_for(
        "mazes",
        serde_json::to_value(spec)?,
        n,
        spec.seed,
        (&images, &labels, &diff),
    );
    Ok(Shard {
        manifest,
        images,
        labels,
        difficulty,
    })
}

/// Generate a full PathFinder shard; deterministic in (spec, seed).
pub fn generate_pathfinder_shard(spec: &PathFinderSpec) -> Result<Shard> {
    spec.validate()?;
    let s = spec.image_px;
    let n = spec.count;
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[n, 1, s, s]));
    let mut labels = ArrayD::<f32>::zeros(IxDyn(&[n]));
    let mut difficulty = vec![0f32; n];
    for i in 0..n {
        let sample = gen_pathfinder(spec, i as u64)?;
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&sample.image);
        labels[[i]] = sample.label as f32;
        difficulty[i] = sample.difficulty as f32;
    }
    let diff =
        ArrayD::from_shape_vec(IxDyn(&[n]), difficulty.clone()).expect("difficulty");
    let manifest = manifest_for(
        "pathfinder",
        serde_json::to_value(spec)?,
        n,
        spec.seed,
        (&images, &labels, &diff),
    );
    Ok(Shard {
        manifest,
        images,
        labels,
        difficulty,
    })
}
