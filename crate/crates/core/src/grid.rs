//! Cone-beam ray grids: forming, cropping, pushing and transformation into
//! object space.
//!
//! A grid holds `height × width` rays with `n_z` points each, stored row-major
//! as `((m * width + l) * n_z + n)`. Along every ray the formed/cropped point
//! `n` sits at signed distance `s_n = 2n/N_z - 1` from the camera center, so
//! after pushing by `‖t‖` the points are ordered near to far.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{BoundingBox, CameraIntrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStage {
    Formed,
    Cropped,
    Pushed,
    Object,
}

impl GridStage {
    pub fn code(&self) -> u32 {
        match self {
            Self::Formed => 0,
            Self::Cropped => 1,
            Self::Pushed => 2,
            Self::Object => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Self::Formed,
            1 => Self::Cropped,
            2 => Self::Pushed,
            3 => Self::Object,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayGrid {
    pub height: usize,
    pub width: usize,
    pub n_z: usize,
    pub stage: GridStage,
    pub points: Vec<Vector3<f64>>,
    /// Unit camera-space direction of each ray (`height * width` entries).
    pub directions: Vec<Vector3<f64>>,
}

impl RayGrid {
    pub fn ray_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, row: usize, col: usize, n: usize) -> usize {
        (row * self.width + col) * self.n_z + n
    }

    pub fn point(&self, row: usize, col: usize, n: usize) -> &Vector3<f64> {
        &self.points[self.index(row, col, n)]
    }

    /// The `n_z` points of ray `ray` (row-major ray index).
    pub fn ray(&self, ray: usize) -> &[Vector3<f64>] {
        &self.points[ray * self.n_z..(ray + 1) * self.n_z]
    }

    pub fn same_shape(&self, other: &RayGrid) -> bool {
        self.height == other.height && self.width == other.width && self.n_z == other.n_z
    }

    fn expect_stage(&self, allowed: &[GridStage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(Error::StageMismatch { expected: allowed[0], found: self.stage })
        }
    }
}

/// Signed ray parameter of point `n`.
pub fn ray_parameter(n: usize, n_z: usize) -> f64 {
    2.0 * n as f64 / n_z as f64 - 1.0
}

fn rays_to_grid(
    directions: Vec<Vector3<f64>>,
    height: usize,
    width: usize,
    n_z: usize,
    stage: GridStage,
) -> RayGrid {
    let params: Vec<f64> = (0..n_z).map(|n| ray_parameter(n, n_z)).collect();
    let points = directions
        .par_iter()
        .flat_map_iter(|u| params.iter().map(move |&s| u * s))
        .collect();
    RayGrid { height, width, n_z, stage, points, directions }
}

pub(crate) fn check_n_z(n_z: usize) -> Result<()> {
    if n_z < 2 {
        return Err(Error::InvalidArgument(format!("n_z must be at least 2, got {n_z}")));
    }
    Ok(())
}

/// Full-image grid: one ray per pixel, points inside the unit ball around the
/// camera center.
pub fn form_grid(k: &CameraIntrinsics, width: usize, height: usize, n_z: usize) -> Result<RayGrid> {
    check_n_z(n_z)?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image must be at least 1×1".into()));
    }
    let directions = (0..height * width)
        .map(|i| k.ray_direction((i % width) as f64, (i / width) as f64))
        .collect();
    Ok(rays_to_grid(directions, height, width, n_z, GridStage::Formed))
}

/// Continuous image coordinate sampled by output cell `i` of an `out_res`
/// resampling of the box span starting at `start` with length `side`.
pub fn roi_coordinate(start: f64, side: f64, i: usize, out_res: usize) -> f64 {
    start - 0.5 + (i as f64 + 0.5) * side / out_res as f64
}

/// RoI grid over the zoom-in square of `b`, evaluated analytically at the
/// continuous pixel coordinates an aligned RoI-align would sample.
pub fn crop_grid(
    k: &CameraIntrinsics,
    b: &BoundingBox,
    out_res: usize,
    n_z: usize,
) -> Result<RayGrid> {
    b.validate()?;
    check_n_z(n_z)?;
    if out_res < 2 {
        return Err(Error::InvalidArgument(format!("out_res must be at least 2, got {out_res}")));
    }
    let sq = b.squared();
    let directions = (0..out_res * out_res)
        .map(|i| {
            let u = roi_coordinate(sq.x, sq.w, i % out_res, out_res);
            let v = roi_coordinate(sq.y, sq.h, i / out_res, out_res);
            k.ray_direction(u, v)
        })
        .collect();
    Ok(rays_to_grid(directions, out_res, out_res, n_z, GridStage::Cropped))
}

/// Moves every point along its ray by the object distance `‖t‖`, flipping the
/// points behind the camera center to the far side.
///
/// The center sample of an even-`N_z` grid is the zero vector; it maps to the
/// ray point at exactly `distance`.
pub fn push_grid(grid: &RayGrid, distance: f64) -> Result<RayGrid> {
    grid.expect_stage(&[GridStage::Cropped, GridStage::Formed])?;
    if !(distance > 1.0) || !distance.is_finite() {
        return Err(Error::DistanceTooSmall(distance));
    }
    let n_z = grid.n_z;
    let points = grid
        .points
        .par_iter()
        .enumerate()
        .map(|(i, g)| push_point(g, &grid.directions[i / n_z], distance))
        .collect();
    Ok(RayGrid { stage: GridStage::Pushed, points, ..grid.clone_shape() })
}

/// One point of [`push_grid`]; `direction` is the unit direction of its ray.
pub fn push_point(g: &Vector3<f64>, direction: &Vector3<f64>, distance: f64) -> Vector3<f64> {
    let norm = g.norm();
    if norm == 0.0 {
        direction * distance
    } else {
        let sign = if g.z < 0.0 { -1.0 } else { 1.0 };
        g - g * (distance / norm * sign)
    }
}

/// Camera space to object space: `g ↦ Rᵀ (g - t)`.
pub fn transform_grid(grid: &RayGrid, pose: &Pose) -> Result<RayGrid> {
    grid.expect_stage(&[GridStage::Pushed])?;
    let rt = pose.r.transpose();
    let points = grid.points.par_iter().map(|g| rt * (g - pose.t)).collect();
    Ok(RayGrid { stage: GridStage::Object, points, ..grid.clone_shape() })
}

impl RayGrid {
    fn clone_shape(&self) -> RayGrid {
        RayGrid {
            height: self.height,
            width: self.width,
            n_z: self.n_z,
            stage: self.stage,
            points: Vec::new(),
            directions: self.directions.clone(),
        }
    }
}

/// Crop, push by `‖t‖` and transform: the object-space RoI grid for a pose.
pub fn object_grid(
    k: &CameraIntrinsics,
    b: &BoundingBox,
    pose: &Pose,
    out_res: usize,
    n_z: usize,
) -> Result<RayGrid> {
    let cropped = crop_grid(k, b, out_res, n_z)?;
    let pushed = push_grid(&cropped, pose.t.norm())?;
    transform_grid(&pushed, pose)
}

const GRID_MAGIC: &[u8; 4] = b"DPRG";
const GRID_VERSION: u32 = 1;

/// Writes the debug dump: magic, version, H, W, N_z, stage, two reserved
/// words (all u32 little-endian), then the points as f32 little-endian.
pub fn write_grid_dump<W: Write>(grid: &RayGrid, mut w: W) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    for v in [
        GRID_VERSION,
        grid.height as u32,
        grid.width as u32,
        grid.n_z as u32,
        grid.stage.code(),
        0,
        0,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(grid.points.len() * 12);
    for p in &grid.points {
        for c in p.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid_dump<R: Read>(mut r: R) -> Result<RayGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return Err(Error::TruncatedFile { expected: 32, found: bytes.len() });
    }
    if &bytes[0..4] != GRID_MAGIC {
        return Err(Error::Format("bad grid dump magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != GRID_VERSION {
        return Err(Error::Format(format!("unsupported grid dump version {}", word(1))));
    }
    let (height, width, n_z) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let stage = GridStage::from_code(word(5))
        .ok_or_else(|| Error::Format(format!("unknown stage code {}", word(5))))?;
    let count = height * width * n_z;
    let expected = 32 + count * 12;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile { expected, found: bytes.len() });
    }
    let points: Vec<Vector3<f64>> = bytes[32..expected]
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            Vector3::new(f(0), f(1), f(2))
        })
        .collect();
    // Directions are not stored; for camera-space stages the first point of
    // each ray sits at -1 or ‖t‖ - 1 along it, which fixes the direction.
    let directions = match stage {
        GridStage::Object => Vec::new(),
        _ => points
            .chunks_exact(n_z.max(1))
            .map(|ray| {
                let p = ray[0];
                if stage == GridStage::Pushed {
                    p.normalize()
                } else {
                    -p.normalize()
                }
            })
            .collect(),
    };
    Ok(RayGrid { height, width, n_z, stage, points, directions })
}
