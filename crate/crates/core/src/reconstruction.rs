//! Space-carved voxel reference features.
//!
//! The canvas spans `[-1, 1]³` in object space with voxel centers at
//! `2(i + 0.5)/S - 1`. Each reference projects the canvas into its image; a
//! voxel survives only if it lands inside every reference mask, and its color
//! is the plain average of the reference pixels it lands on.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pose::{geodesic_distance, BoundingBox, CameraIntrinsics, Pose};
use crate::raster::{Mask, RgbImage};

/// Dense `S × S × S × C` voxel array, linear index
/// `((iz * S + iy) * S + ix) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeature {
    pub size: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl VoxelFeature {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self { size, channels, values: vec![0.0; size * size * size * channels] }
    }

    pub fn from_values(size: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size * size * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {size}³×{channels} feature",
                values.len()
            )));
        }
        Ok(Self { size, channels, values })
    }

    pub fn voxel_count(&self) -> usize {
        self.size * self.size * self.size
    }

    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.size + iy) * self.size + ix
    }

    pub fn voxel(&self, ix: usize, iy: usize, iz: usize) -> &[f32] {
        let i = self.voxel_index(ix, iy, iz) * self.channels;
        &self.values[i..i + self.channels]
    }

    pub fn voxel_mut(&mut self, ix: usize, iy: usize, iz: usize) -> &mut [f32] {
        let i = self.voxel_index(ix, iy, iz) * self.channels;
        &mut self.values[i..i + self.channels]
    }

    /// Object-space center of the voxel with linear index `v`.
    pub fn voxel_center(&self, v: usize) -> Vector3<f64> {
        voxel_center(self.size, v)
    }

    pub fn is_occupied(&self, v: usize) -> bool {
        self.values[v * self.channels..(v + 1) * self.channels].iter().any(|x| *x != 0.0)
    }

    /// Centers of all nonzero voxels in linear index order.
    pub fn occupied_centers(&self) -> Vec<Vector3<f64>> {
        (0..self.voxel_count())
            .filter(|v| self.is_occupied(*v))
            .map(|v| self.voxel_center(v))
            .collect()
    }
}

pub fn voxel_coordinate(size: usize, i: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / size as f64 - 1.0
}

pub fn voxel_center(size: usize, v: usize) -> Vector3<f64> {
    let ix = v % size;
    let iy = (v / size) % size;
    let iz = v / (size * size);
    Vector3::new(voxel_coordinate(size, ix), voxel_coordinate(size, iy), voxel_coordinate(size, iz))
}

/// A posed image: one element of a reference or test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: RgbImage,
    pub mask: Mask,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub observations: Vec<Observation>,
    /// Indices of the observations in the set they were selected from.
    pub indices: Vec<usize>,
}

impl ReferenceSet {
    pub fn new(observations: Vec<Observation>) -> Self {
        let indices = (0..observations.len()).collect();
        Self { observations, indices }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Greedy farthest-point sampling on rotations. The first pick has the
/// largest mask; each next pick maximizes its minimum geodesic distance to the
/// picks so far. Ties go to the lowest index.
pub fn select_reference_indices(
    mask_sizes: &[usize],
    rotations: &[nalgebra::Matrix3<f64>],
    n_refs: usize,
) -> Result<Vec<usize>> {
    if mask_sizes.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if mask_sizes.len() != rotations.len() {
        return Err(Error::ShapeMismatch("mask sizes and rotations differ in length".into()));
    }
    if n_refs == 0 || n_refs > mask_sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "n_refs must be in 1..={}, got {n_refs}",
            mask_sizes.len()
        )));
    }
    let mut first = 0;
    for (i, &s) in mask_sizes.iter().enumerate() {
        if s > mask_sizes[first] {
            first = i;
        }
    }
    let mut selected = vec![first];
    let mut min_dist: Vec<f64> =
        rotations.iter().map(|r| geodesic_distance(&rotations[first], r)).collect();
    while selected.len() < n_refs {
        let mut best: Option<usize> = None;
        for i in 0..rotations.len() {
            if selected.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("n_refs bounded by set size");
        selected.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(geodesic_distance(&rotations[next], &rotations[i]));
        }
    }
    Ok(selected)
}

pub fn select_references(training_set: &[Observation], n_refs: usize) -> Result<ReferenceSet> {
    let sizes: Vec<usize> = training_set.iter().map(|o| o.mask.count()).collect();
    let rotations: Vec<_> = training_set.iter().map(|o| o.pose.r).collect();
    let indices = select_reference_indices(&sizes, &rotations, n_refs)?;
    Ok(ReferenceSet {
        observations: indices.iter().map(|&i| training_set[i].clone()).collect(),
        indices,
    })
}

/// Pixel coordinates of every voxel center under `pose`, in linear voxel
/// order. Voxels at or behind the camera plane are `None`.
pub fn project_canvas(pose: &Pose, k: &CameraIntrinsics, size: usize) -> Result<Vec<Option<[f64; 2]>>> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!("canvas size must be at least 2, got {size}")));
    }
    Ok((0..size * size * size)
        .into_par_iter()
        .map(|v| k.project(&pose.transform_point(&voxel_center(size, v))))
        .collect())
}

/// Nearest pixel to a continuous coordinate (round half away from zero), or
/// `None` outside the image.
pub fn nearest_pixel(uv: [f64; 2], width: usize, height: usize) -> Option<(usize, usize)> {
    let (x, y) = (uv[0].round(), uv[1].round());
    if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
        Some((x as usize, y as usize))
    } else {
        None
    }
}

/// Carved RGB feature together with the carved occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct CarvedFeature {
    pub rgb: VoxelFeature,
    pub mask: VoxelFeature,
}

/// Space carving: occupancy is the product of per-reference nearest-neighbor
/// mask lookups and color is the mean over all references of the looked-up
/// pixel (zero where the voxel falls outside an image).
pub fn carve_with_mask(refs: &ReferenceSet, size: usize) -> Result<CarvedFeature> {
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if size < 2 {
        return Err(Error::InvalidArgument(format!("canvas size must be at least 2, got {size}")));
    }
    let n = refs.len() as f64;
    let per_voxel: Vec<([f32; 3], f32)> = (0..size * size * size)
        .into_par_iter()
        .map(|v| {
            let center = voxel_center(size, v);
            let mut inside = true;
            let mut sum = [0.0f64; 3];
            for obs in &refs.observations {
                let hit = obs
                    .intrinsics
                    .project(&obs.pose.transform_point(&center))
                    .and_then(|uv| nearest_pixel(uv, obs.image.width, obs.image.height));
                match hit {
                    Some((x, y)) => {
                        inside &= obs.mask.get(x, y);
                        let rgb = obs.image.get(x, y);
                        for c in 0..3 {
                            sum[c] += rgb[c] as f64;
                        }
                    }
                    None => inside = false,
                }
            }
            if inside {
                ([(sum[0] / n) as f32, (sum[1] / n) as f32, (sum[2] / n) as f32], 1.0)
            } else {
                ([0.0; 3], 0.0)
            }
        })
        .collect();
    let mut rgb = VoxelFeature::zeros(size, 3);
    let mut mask = VoxelFeature::zeros(size, 1);
    for (v, (color, m)) in per_voxel.into_iter().enumerate() {
        rgb.values[3 * v..3 * v + 3].copy_from_slice(&color);
        mask.values[v] = m;
    }
    Ok(CarvedFeature { rgb, mask })
}

pub fn carve(refs: &ReferenceSet, size: usize) -> Result<VoxelFeature> {
    Ok(carve_with_mask(refs, size)?.rgb)
}
