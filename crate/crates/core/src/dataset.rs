//! Datasets on disk: a TOML manifest plus raw little-endian f32 blobs.
//!
//! Pose blobs hold `d` floats per record (the pose vector). Image blobs hold
//! `H·W·3` floats per record in row-major HWC order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose, PoseDim};
use crate::image::Image;
use crate::scene::CameraIntrinsics;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("manifest: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("blob {path} has {got} bytes, expected {expected}")]
    BlobSize { path: PathBuf, expected: u64, got: u64 },
    #[error("no split named `{0}`")]
    MissingSplit(String),
    #[error("split `{0}` already exists")]
    DuplicateSplit(String),
    #[error("sample {index}: {detail}")]
    Sample { index: usize, detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pose: Pose,
    pub image: Image,
    pub synthetic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the generating config text.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
    pub poses: String,
    pub images: String,
    pub synthetic: bool,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Scene file, relative to the manifest directory.
    pub scene: String,
    pub pose_dim: PoseDim,
    pub intrinsics: CameraIntrinsics,
    pub image_width: usize,
    pub image_height: usize,
    pub provenance: Provenance,
    #[serde(default)]
    pub splits: Vec<SplitEntry>,
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let expected = (expected_values * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(DatasetError::BlobSize { path: path.to_path_buf(), expected, got: bytes.len() as u64 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

impl Manifest {
    pub fn new(scene: &str, pose_dim: PoseDim, intrinsics: CameraIntrinsics, provenance: Provenance) -> Self {
        Self {
            version: MANIFEST_VERSION,
            scene: scene.to_string(),
            pose_dim,
            image_width: intrinsics.width,
            image_height: intrinsics.height,
            intrinsics,
            provenance,
            splits: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = toml::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Version(m.version));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?).map_err(io_err(path))
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name).ok_or_else(|| DatasetError::MissingSplit(name.into()))
    }

    fn image_len(&self) -> usize {
        self.image_width * self.image_height * 3
    }

    /// Write the blobs of a new split into `dir` and register it.
    pub fn add_split(&mut self, dir: &Path, name: &str, samples: &[Sample], provenance: Provenance) -> Result<()> {
        if self.splits.iter().any(|s| s.name == name) {
            return Err(DatasetError::DuplicateSplit(name.into()));
        }
        let synthetic = samples.first().is_some_and(|s| s.synthetic);
        for (index, s) in samples.iter().enumerate() {
            if s.pose.dim != self.pose_dim {
                return Err(DatasetError::Sample { index, detail: "pose dimension differs from the manifest".into() });
            }
            if s.image.width != self.image_width || s.image.height != self.image_height {
                return Err(DatasetError::Sample { index, detail: "image size differs from the manifest".into() });
            }
            if s.synthetic != synthetic {
                return Err(DatasetError::Sample { index, detail: "split mixes synthetic and original samples".into() });
            }
        }
        let poses = format!("{name}.poses.f32");
        let images = format!("{name}.images.f32");
        write_f32(&dir.join(&poses), samples.iter().flat_map(|s| s.pose.to_vec()))?;
        write_f32(&dir.join(&images), samples.iter().flat_map(|s| s.image.data.iter().copied()))?;
        self.splits.push(SplitEntry { name: name.into(), count: samples.len(), poses, images, synthetic, provenance });
        Ok(())
    }

    /// Read a split, checking blob sizes against the declared count.
    pub fn load_split(&self, dir: &Path, name: &str) -> Result<Vec<Sample>> {
        let entry = self.split(name)?;
        let d = self.pose_dim.dim();
        let poses = read_f32(&dir.join(&entry.poses), entry.count * d)?;
        let images = read_f32(&dir.join(&entry.images), entry.count * self.image_len())?;
        (0..entry.count)
            .map(|i| {
                let pose = Pose::from_vec(self.pose_dim, &poses[i * d..(i + 1) * d])?;
                let data = images[i * self.image_len()..(i + 1) * self.image_len()].to_vec();
                Ok(Sample {
                    pose,
                    image: Image { width: self.image_width, height: self.image_height, data },
                    synthetic: entry.synthetic,
                })
            })
            .collect()
    }
}
