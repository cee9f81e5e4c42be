//! On-disk layout of a rendered view: a set of files sharing one path prefix.
//!
//! | file                   | content                                         |
//! |------------------------|-------------------------------------------------|
//! | `<prefix>.png`         | 8-bit RGB                                       |
//! | `<prefix>.depth.bin`   | little-endian f32 depth, row-major, 0 = empty   |
//! | `<prefix>.depth.json`  | depth shape and encoding                        |
//! | `<prefix>.labels.png`  | 8-bit class ids, 255 = background               |
//! | `<prefix>.camera.json` | intrinsics and, if known, camera-to-world pose  |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mat4, PoseSE3};
use crate::image::{Image, LabelImage};
use crate::scene::RGBDImage;
use crate::spine::pose_rows;

pub const CAMERA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub version: u32,
    pub intrinsics: CameraIntrinsics,
    /// Row-major camera-to-world transform, OpenCV axes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_to_world: Option<[[f64; 4]; 4]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewPaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub depth_sidecar: PathBuf,
    pub labels: PathBuf,
    pub camera: PathBuf,
}

impl ViewPaths {
    pub fn new(prefix: impl AsRef<Path>) -> Self {
        let p = prefix.as_ref().to_string_lossy().into_owned();
        Self {
            rgb: format!("{p}.png").into(),
            depth: format!("{p}.depth.bin").into(),
            depth_sidecar: format!("{p}.depth.json").into(),
            labels: format!("{p}.labels.png").into(),
            camera: format!("{p}.camera.json").into(),
        }
    }

    /// Paths for the view whose RGB image is `png` (the prefix is the path minus `.png`).
    pub fn from_rgb(png: impl AsRef<Path>) -> Result<Self> {
        let png = png.as_ref();
        if png.extension().and_then(|e| e.to_str()) != Some("png") {
            return Err(Error::invalid(format!("expected a .png image, got {}", png.display())));
        }
        Ok(Self::new(png.with_extension("")))
    }
}

#[derive(Clone, Debug)]
pub struct StoredView {
    pub rgbd: RGBDImage,
    pub labels: LabelImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: Option<PoseSE3>,
}

pub fn save_view(
    prefix: impl AsRef<Path>,
    rgbd: &RGBDImage,
    labels: &LabelImage,
    k: &CameraIntrinsics,
    pose: Option<&PoseSE3>,
) -> Result<ViewPaths> {
    let paths = ViewPaths::new(prefix);
    if let Some(dir) = paths.rgb.parent() {
        std::fs::create_dir_all(dir)?;
    }
    rgbd.rgb.save_png(&paths.rgb)?;
    rgbd.save_depth(&paths.depth, &paths.depth_sidecar)?;
    labels.save_png(&paths.labels)?;
    let record = CameraRecord { version: CAMERA_VERSION, intrinsics: *k, camera_to_world: pose.map(pose_rows) };
    std::fs::write(&paths.camera, serde_json::to_string_pretty(&record)?)?;
    Ok(paths)
}

pub fn load_view(paths: &ViewPaths) -> Result<StoredView> {
    let rgb = Image::load_rgb_png(&paths.rgb)?;
    let (w, h, depth) = RGBDImage::load_depth(&paths.depth, &paths.depth_sidecar)?;
    if (w, h) != (rgb.width(), rgb.height()) {
        return Err(Error::dims(rgb.shape_string(), format!("{w}x{h} depth")));
    }
    let labels = LabelImage::load_png(&paths.labels)?;
    let text = std::fs::read_to_string(&paths.camera)?;
    let record: CameraRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: paths.camera.clone(),
        message: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    if record.version != CAMERA_VERSION {
        return Err(Error::Parse {
            path: paths.camera.clone(),
            message: format!("unsupported camera version {}", record.version),
        });
    }
    if (record.intrinsics.width, record.intrinsics.height) != (w, h) {
        return Err(Error::dims(format!("{w}x{h}"), format!("{}x{} intrinsics", record.intrinsics.width, record.intrinsics.height)));
    }
    let pose = record
        .camera_to_world
        .map(|rows| PoseSE3::from_matrix(&Mat4::from_fn(|i, j| rows[i][j])))
        .transpose()?;
    Ok(StoredView { rgbd: RGBDImage::new(rgb, depth)?, labels, intrinsics: record.intrinsics, pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_intrinsics, default_scene, orbit_pose, render, RenderConfig};

    #[test]
    fn view_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = default_intrinsics();
        let pose = orbit_pose(20.0, 30.0, 3.5).unwrap();
        let r = render(&default_scene(), &k, &pose, &RenderConfig::default()).unwrap();
        let paths = save_view(dir.path().join("v/q0"), &r.rgbd, &r.labels, &k, Some(&pose)).unwrap();
        assert_eq!(paths, ViewPaths::from_rgb(dir.path().join("v/q0.png")).unwrap());
        let back = load_view(&paths).unwrap();
        assert_eq!(back.labels, r.labels);
        assert_eq!(back.intrinsics, k);
        assert!(back.pose.unwrap().rotation_error_deg(&pose) < 1e-9);
        for (a, b) in back.rgbd.depth.iter().zip(&r.rgbd.depth) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        for (a, b) in back.rgbd.rgb.data().iter().zip(r.rgbd.rgb.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
