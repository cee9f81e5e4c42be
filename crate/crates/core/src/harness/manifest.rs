//! Posed image datasets described by a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat4, PoseSE3};
use crate::spine::pose_rows;

pub const MANIFEST_VERSION: u32 = 1;

/// Camera axes used by a manifest's transforms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// x right, y down, z forward.
    #[default]
    Opencv,
    /// x right, y up, z backward.
    OpenglYUp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    /// Row-major 4x4 camera-to-world transform.
    pub transform: [[f64; 4]; 4],
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub version: u32,
    #[serde(default)]
    pub convention: Convention,
    pub frames: Vec<FrameRecord>,
}

/// A frame with paths resolved and the pose in the internal convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    pub pose: PoseSE3,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub frames: Vec<Frame>,
}

/// Flips the camera y and z axes, mapping between the two conventions (an involution).
pub fn flip_yz(m: &Mat4) -> Mat4 {
    m * Mat4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, 1.0))
}

fn rows_to_matrix(rows: &[[f64; 4]; 4]) -> Mat4 {
    Mat4::from_fn(|i, j| rows[i][j])
}

/// Reads a manifest, resolving paths against its directory and converting poses to OpenCV axes.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| parse_err(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    if file.version != MANIFEST_VERSION {
        return Err(parse_err(format!("unsupported manifest version {}", file.version)));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut frames = Vec::with_capacity(file.frames.len());
    for (i, f) in file.frames.iter().enumerate() {
        let mut m = rows_to_matrix(&f.transform);
        if file.convention == Convention::OpenglYUp {
            m = flip_yz(&m);
        }
        let pose = PoseSE3::from_matrix(&m).map_err(|e| parse_err(format!("frames[{i}].transform: {e}")))?;
        f.intrinsics
            .validate()
            .map_err(|e| parse_err(format!("frames[{i}].intrinsics: {e}")))?;
        let image = base.join(&f.image);
        if !image.is_file() {
            return Err(parse_err(format!("frames[{i}].image: file not found: {}", image.display())));
        }
        let depth = match &f.depth {
            Some(d) => {
                let d = base.join(d);
                if !d.is_file() {
                    return Err(parse_err(format!("frames[{i}].depth: file not found: {}", d.display())));
                }
                Some(d)
            }
            None => None,
        };
        frames.push(Frame { image, depth, pose, intrinsics: f.intrinsics });
    }
    Ok(DatasetManifest { frames })
}

fn relative_to(p: &Path, base: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

/// Writes a manifest in OpenCV convention with paths relative to its directory where possible.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        convention: Convention::Opencv,
        frames: manifest
            .frames
            .iter()
            .map(|f| FrameRecord {
                image: relative_to(&f.image, base),
                depth: f.depth.as_ref().map(|d| relative_to(d, base)),
                transform: pose_rows(&f.pose),
                intrinsics: f.intrinsics,
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
