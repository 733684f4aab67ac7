//! Scene manifests, feature files and synthetic scenes.

mod feature_io;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{BoundingBox, CameraIntrinsics, Convention, Pose, PoseJson};
use crate::raster::{Mask, RgbImage};
use crate::reconstruction::Observation;

pub use feature_io::{load_feature, load_sidecar, save_feature, save_sidecar, FeatureSidecar};
pub use synth::{SyntheticShape, ShapeKind, Texture};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    /// Object diameter in the manifest's length unit.
    pub d_real: f64,
    /// Generating shape, for synthetic scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<SyntheticShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: usize,
    pub image: String,
    pub mask: String,
    pub pose: PoseJson,
    pub intrinsics: CameraIntrinsics,
    pub bbox: BoundingBox,
    pub object_id: String,
}

/// On-disk manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub convention: String,
    pub objects: Vec<ObjectEntry>,
    pub frames: Vec<FrameEntry>,
}

/// A manifest frame with its pose in the internal convention and normalized
/// object units.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub bbox: BoundingBox,
    pub object_id: String,
    pub d_real: f64,
}

impl Frame {
    pub fn load_observation(&self) -> Result<Observation> {
        Ok(Observation {
            image: RgbImage::load(&self.image_path)?,
            mask: Mask::load(&self.mask_path)?,
            pose: self.pose,
            intrinsics: self.intrinsics,
            bbox: self.bbox,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub convention: Convention,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn object(&self, id: &str) -> Option<&ObjectEntry> {
        self.manifest.objects.iter().find(|o| o.id == id)
    }

    pub fn frame(&self, id: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }

    /// Frames of one object, or all frames when `object_id` is `None`.
    pub fn frames_of<'a>(&'a self, object_id: Option<&'a str>) -> impl Iterator<Item = &'a Frame> + 'a {
        self.frames.iter().filter(move |f| object_id.is_none_or(|id| f.object_id == id))
    }
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), message: message.into() }
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<SceneManifest> {
    serde_json::from_str(text).map_err(|e| parse_error(path, e.to_string()))
}

/// Reads and validates a manifest, converting every pose to the internal
/// convention and normalized units.
pub fn load_manifest<P: AsRef<Path>>(path: P) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest = parse_manifest(path, &text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    scene_from_manifest(manifest, root, path)
}

pub fn scene_from_manifest(manifest: SceneManifest, root: PathBuf, path: &Path) -> Result<Scene> {
    let convention = Convention::parse(&manifest.convention)?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let object = manifest
            .objects
            .iter()
            .find(|o| o.id == f.object_id)
            .ok_or_else(|| parse_error(path, format!("frames[{i}].object_id: unknown object {:?}", f.object_id)))?;
        if !(object.d_real > 0.0) {
            return Err(parse_error(path, format!("objects[{}].d_real must be positive", object.id)));
        }
        let image_path = root.join(&f.image);
        let mask_path = root.join(&f.mask);
        for (field, p) in [("image", &image_path), ("mask", &mask_path)] {
            if !p.exists() {
                return Err(parse_error(path, format!("frames[{i}].{field}: {} does not exist", p.display())));
            }
        }
        f.intrinsics
            .validate()
            .map_err(|e| parse_error(path, format!("frames[{i}].intrinsics: {e}")))?;
        f.bbox.validate().map_err(|e| parse_error(path, format!("frames[{i}].bbox: {e}")))?;
        let pose = f.pose.to_internal(convention, object.d_real).map_err(|e| match e {
            Error::ConventionUnknown(c) => Error::ConventionUnknown(c),
            other => parse_error(path, format!("frames[{i}].pose: {other}")),
        })?;
        frames.push(Frame {
            id: f.id,
            image_path,
            mask_path,
            pose,
            intrinsics: f.intrinsics,
            bbox: f.bbox,
            object_id: f.object_id.clone(),
            d_real: object.d_real,
        });
    }
    Ok(Scene { root, manifest, convention, frames })
}

pub fn save_manifest<P: AsRef<Path>>(manifest: &SceneManifest, path: P) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// One entry of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frame: usize,
    pub pose: PoseJson,
}

pub fn load_predictions<P: AsRef<Path>>(path: P) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))
}

pub fn save_predictions<P: AsRef<Path>>(preds: &[Prediction], path: P) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds)? + "\n")?;
    Ok(())
}
