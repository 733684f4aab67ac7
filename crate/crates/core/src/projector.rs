//! Grid sampling of a voxel feature and nearest-valid-sample compositing.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{self, GridStage, RayGrid};
use crate::pose::{BoundingBox, CameraIntrinsics, Pose};
use crate::raster::{Mask, RgbImage};
use crate::reconstruction::VoxelFeature;

/// A sample counts as non-empty when its channel magnitude exceeds this.
pub const VALID_TAU: f64 = 1e-6;

/// Trilinear interpolation of `feature` at object-space point `p`, written to
/// `out` (length `channels`). Corners outside the canvas contribute zero and
/// points outside `[-1, 1]³` sample to zero.
pub fn trilinear_sample(feature: &VoxelFeature, p: &nalgebra::Vector3<f64>, out: &mut [f64]) {
    trilinear_sample_weighted(feature, p, out);
}

/// [`trilinear_sample`] that also returns the interpolated occupancy: the
/// total weight of the corners holding a non-zero voxel.
pub fn trilinear_sample_weighted(feature: &VoxelFeature, p: &nalgebra::Vector3<f64>, out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|v| *v = 0.0);
    if !(p.iter().all(|c| (-1.0..=1.0).contains(c))) {
        return 0.0;
    }
    let s = feature.size;
    let c = feature.channels;
    let half = s as f64 * 0.5;
    // per axis: [low, high] corner weight, index and whether it is on the canvas
    let mut weight = [[0.0f64; 2]; 3];
    let mut index = [[0usize; 2]; 3];
    let mut inside = [[false; 2]; 3];
    for a in 0..3 {
        let idx = (p[a] + 1.0) * half - 0.5;
        let f = idx.floor();
        let frac = idx - f;
        let base = f as isize;
        weight[a] = [1.0 - frac, frac];
        for hi in 0..2 {
            let i = base + hi as isize;
            inside[a][hi] = i >= 0 && i < s as isize;
            index[a][hi] = i.max(0) as usize;
        }
    }
    let mut occupancy = 0.0;
    for corner in 0..8 {
        let h = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        if !(inside[0][h[0]] && inside[1][h[1]] && inside[2][h[2]]) {
            continue;
        }
        let w = weight[0][h[0]] * weight[1][h[1]] * weight[2][h[2]];
        if w == 0.0 {
            continue;
        }
        let i = ((index[2][h[2]] * s + index[1][h[1]]) * s + index[0][h[0]]) * c;
        let v = &feature.values[i..i + c];
        if v.iter().any(|x| *x != 0.0) {
            occupancy += w;
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * *x as f64;
        }
    }
    occupancy
}

/// Trilinear sampling with an occupancy bitmap of the feature, so samples
/// whose eight corners are all empty skip the voxel array. Results are
/// identical to [`trilinear_sample_weighted`].
pub struct FeatureSampler<'a> {
    feature: &'a VoxelFeature,
    occupied: Vec<u64>,
}

impl<'a> FeatureSampler<'a> {
    pub fn new(feature: &'a VoxelFeature) -> Self {
        let mut occupied = vec![0u64; feature.voxel_count().div_ceil(64)];
        for (v, vals) in feature.values.chunks(feature.channels.max(1)).enumerate() {
            if vals.iter().any(|x| *x != 0.0) {
                occupied[v / 64] |= 1 << (v % 64);
            }
        }
        Self { feature, occupied }
    }

    pub fn feature(&self) -> &'a VoxelFeature {
        self.feature
    }

    fn bit(&self, v: usize) -> bool {
        self.occupied[v / 64] >> (v % 64) & 1 == 1
    }

    pub fn sample(&self, p: &nalgebra::Vector3<f64>, out: &mut [f64]) -> f64 {
        if p.iter().all(|c| (-1.0..=1.0).contains(c)) {
            let s = self.feature.size;
            let half = s as f64 * 0.5;
            let mut lo = [0isize; 3];
            for a in 0..3 {
                lo[a] = ((p[a] + 1.0) * half - 0.5).floor() as isize;
            }
            let any = (0..8).any(|corner: usize| {
                let mut v = 0usize;
                for a in (0..3).rev() {
                    let i = lo[a] + ((corner >> a) & 1) as isize;
                    if i < 0 || i >= s as isize {
                        return false;
                    }
                    v = v * s + i as usize;
                }
                self.bit(v)
            });
            if !any {
                out.iter_mut().for_each(|v| *v = 0.0);
                return 0.0;
            }
        }
        trilinear_sample_weighted(self.feature, p, out)
    }
}

/// Per-point samples, laid out like the grid with `channels` values per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeature {
    pub height: usize,
    pub width: usize,
    pub n_z: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    /// Interpolated occupancy per point.
    pub occupancy: Vec<f64>,
}

impl SampledFeature {
    pub fn sample(&self, ray: usize, n: usize) -> &[f64] {
        let i = (ray * self.n_z + n) * self.channels;
        &self.values[i..i + self.channels]
    }
}

pub fn sample_feature(feature: &VoxelFeature, grid: &RayGrid) -> Result<SampledFeature> {
    if grid.stage != GridStage::Object {
        return Err(Error::StageMismatch { expected: GridStage::Object, found: grid.stage });
    }
    let c = feature.channels;
    let mut values = vec![0.0; grid.len() * c];
    let mut occupancy = vec![0.0; grid.len()];
    values
        .par_chunks_mut(c.max(1))
        .zip(occupancy.par_iter_mut())
        .zip(grid.points.par_iter())
        .for_each(|((out, occ), p)| *occ = trilinear_sample_weighted(feature, p, out));
    Ok(SampledFeature { height: grid.height, width: grid.width, n_z: grid.n_z, channels: c, values, occupancy })
}

/// 2-D rendering of a feature: per-pixel channel values and whether the ray
/// hit anything.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Appearance {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![0.0; width * height * channels],
            valid: vec![false; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn valid_mask(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.valid.clone() }
    }

    /// RGB image (single-channel appearances are replicated to gray).
    pub fn to_rgb_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height);
        for (i, px) in self.pixels.chunks(self.channels.max(1)).enumerate() {
            for c in 0..3 {
                img.data[3 * i + c] = px[c.min(self.channels - 1)] as f32;
            }
        }
        img
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            channels: 3,
            pixels: img.data.iter().map(|v| *v as f64).collect(),
            valid: vec![true; img.width * img.height],
        }
    }

    /// Writes the appearance as 8-bit PNG and, if given, the valid mask.
    pub fn save<P: AsRef<Path>>(&self, image: P, valid_mask: Option<&Path>) -> Result<()> {
        self.to_rgb_image().save(image)?;
        if let Some(p) = valid_mask {
            self.valid_mask().save(p)?;
        }
        Ok(())
    }
}

/// Index of the first non-empty sample on a ray.
fn first_valid(samples: &[f64], channels: usize) -> Option<usize> {
    samples
        .chunks(channels)
        .position(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt() > VALID_TAU)
}

// Sample value divided by its occupancy, so a hit near the surface is not
// darkened by the empty corners blended into it.
fn normalized(sample: &[f64], occupancy: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(sample) {
        *o = if occupancy > 0.0 { v / occupancy } else { *v };
    }
}

/// Z-buffering: each pixel takes the nearest non-empty sample along its ray,
/// normalized by the sample's occupancy; pixels without one are background
/// (0) and invalid.
pub fn composite(sampled: &SampledFeature) -> Appearance {
    let c = sampled.channels;
    let rays = sampled.height * sampled.width;
    let mut out = Appearance::zeros(sampled.width, sampled.height, c);
    let stride = sampled.n_z * c;
    for ray in 0..rays {
        let samples = &sampled.values[ray * stride..(ray + 1) * stride];
        if let Some(n) = first_valid(samples, c) {
            let occ = sampled.occupancy[ray * sampled.n_z + n];
            normalized(&samples[n * c..(n + 1) * c], occ, &mut out.pixels[ray * c..(ray + 1) * c]);
            out.valid[ray] = true;
        }
    }
    out
}

/// `composite(sample_feature(feature, grid))` with early exit along each ray.
/// Results are identical to the two-step path.
pub fn render_grid(feature: &VoxelFeature, grid: &RayGrid) -> Result<Appearance> {
    if grid.stage != GridStage::Object {
        return Err(Error::StageMismatch { expected: GridStage::Object, found: grid.stage });
    }
    let c = feature.channels;
    let per_ray: Vec<Option<Vec<f64>>> = (0..grid.ray_count())
        .into_par_iter()
        .map(|ray| {
            let mut buf = vec![0.0; c];
            for p in grid.ray(ray) {
                let occ = trilinear_sample_weighted(feature, p, &mut buf);
                if buf.iter().map(|v| v * v).sum::<f64>().sqrt() > VALID_TAU {
                    let mut px = vec![0.0; c];
                    normalized(&buf, occ, &mut px);
                    return Some(px);
                }
            }
            None
        })
        .collect();
    let mut out = Appearance::zeros(grid.width, grid.height, c);
    for (ray, hit) in per_ray.into_iter().enumerate() {
        if let Some(v) = hit {
            out.pixels[ray * c..(ray + 1) * c].copy_from_slice(&v);
            out.valid[ray] = true;
        }
    }
    Ok(out)
}

/// Renders the zoom-in crop of `b` at `out_res × out_res` under `pose`.
pub fn render(
    feature: &VoxelFeature,
    pose: &Pose,
    k: &CameraIntrinsics,
    b: &BoundingBox,
    n_z: usize,
    out_res: usize,
) -> Result<Appearance> {
    render_with(&FeatureSampler::new(feature), pose, k, b, n_z, out_res)
}

/// [`render`] with a prepared sampler, for rendering one feature many times.
pub fn render_with(
    sampler: &FeatureSampler<'_>,
    pose: &Pose,
    k: &CameraIntrinsics,
    b: &BoundingBox,
    n_z: usize,
    out_res: usize,
) -> Result<Appearance> {
    // same points as `object_grid`, generated per ray so marching can stop at
    // the first hit
    grid::check_n_z(n_z)?;
    let cropped = grid::crop_grid(k, b, out_res, 2)?;
    let distance = pose.t.norm();
    if !(distance > 1.0) || !distance.is_finite() {
        return Err(Error::DistanceTooSmall(distance));
    }
    let rt = pose.r.transpose();
    let c = sampler.feature().channels;
    let mut out = Appearance::zeros(out_res, out_res, c);
    out.pixels
        .par_chunks_mut(c.max(1))
        .zip(out.valid.par_iter_mut())
        .zip(cropped.directions.par_iter())
        .for_each(|((px, valid), u)| {
            let mut buf = vec![0.0; c];
            for n in 0..n_z {
                let g = u * grid::ray_parameter(n, n_z);
                let p = rt * (grid::push_point(&g, u, distance) - pose.t);
                let occ = sampler.sample(&p, &mut buf);
                if buf.iter().map(|v| v * v).sum::<f64>().sqrt() > VALID_TAU {
                    normalized(&buf, occ, px);
                    *valid = true;
                    return;
                }
            }
        });
    Ok(out)
}

/// Renders the whole `width × height` image, one ray per pixel.
pub fn render_full_frame(
    feature: &VoxelFeature,
    pose: &Pose,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    n_z: usize,
) -> Result<Appearance> {
    let formed = grid::form_grid(k, width, height, n_z)?;
    let pushed = grid::push_grid(&formed, pose.t.norm())?;
    let obj = grid::transform_grid(&pushed, pose)?;
    render_grid(feature, &obj)
}

/// Bilinear RoI-align of an image over the zoom-in square of `b`, sampled at
/// exactly the pixel coordinates the crop grid's rays pass through. Samples
/// outside the image read as zero.
pub fn crop_image(img: &RgbImage, b: &BoundingBox, out_res: usize) -> Result<Appearance> {
    b.validate()?;
    let sq = b.squared();
    let mut out = Appearance::zeros(out_res, out_res, 3);
    let fetch = |x: isize, y: isize| -> [f64; 3] {
        if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
            [0.0; 3]
        } else {
            let p = img.get(x as usize, y as usize);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    for j in 0..out_res {
        let v = grid::roi_coordinate(sq.y, sq.h, j, out_res);
        for i in 0..out_res {
            let u = grid::roi_coordinate(sq.x, sq.w, i, out_res);
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let corners = [
                (fetch(x0, y0), (1.0 - fx) * (1.0 - fy)),
                (fetch(x0 + 1, y0), fx * (1.0 - fy)),
                (fetch(x0, y0 + 1), (1.0 - fx) * fy),
                (fetch(x0 + 1, y0 + 1), fx * fy),
            ];
            let idx = j * out_res + i;
            for (rgb, w) in corners {
                for c in 0..3 {
                    out.pixels[3 * idx + c] += w * rgb[c];
                }
            }
            out.valid[idx] = u >= 0.0 && v >= 0.0 && u <= (img.width - 1) as f64 && v <= (img.height - 1) as f64;
        }
    }
    Ok(out)
}

/// Nearest-neighbor crop of a mask over the zoom-in square of `b`.
pub fn crop_mask(mask: &Mask, b: &BoundingBox, out_res: usize) -> Result<Mask> {
    b.validate()?;
    let sq = b.squared();
    let mut out = Mask::new(out_res, out_res);
    for j in 0..out_res {
        let v = grid::roi_coordinate(sq.y, sq.h, j, out_res);
        for i in 0..out_res {
            let u = grid::roi_coordinate(sq.x, sq.w, i, out_res);
            if let Some((x, y)) = crate::reconstruction::nearest_pixel([u, v], mask.width, mask.height) {
                out.set(i, j, mask.get(x, y));
            }
        }
    }
    Ok(out)
}
