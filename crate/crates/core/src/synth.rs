//! Labeled synthetic scenes: depth rendering, keypoint selection, radial maps.
//!
//! Rasters are row-major with pixel `(u, v)` at index `v * width + u`.

use alloc::format;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{project_unchecked, rotation_from_axis_angles, CameraIntrinsics, MeshModel, Pose};
use crate::prelude::*;
use crate::{Error, Result};

/// Background value of radial maps.
pub const RADIAL_BACKGROUND: f32 = -1.0;

/// Per-pixel depth in meters; `0` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Min-max normalization of the foreground into `[0, 1]`; background stays `0`.
    pub fn normalized(&self) -> Vec<f32> {
        let (lo, hi) = self
            .data
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &d| {
                (lo.min(d), hi.max(d))
            });
        let span = hi - lo;
        self.data
            .iter()
            .map(|&d| {
                if d <= 0.0 || !(span > 0.0) {
                    0.0
                } else {
                    (d - lo) / span
                }
            })
            .collect()
    }
}

/// Instance-id raster; `0` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u32>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.data[v * self.width + u]
    }

    pub fn count(&self, id: u32) -> usize {
        self.data.iter().filter(|&&m| m == id).count()
    }

    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// `count` stacked rasters of keypoint distances, `-1` on background.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMapStack {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub data: Vec<f32>,
}

impl RadialMapStack {
    pub fn new(width: usize, height: usize, count: usize) -> Self {
        Self {
            width,
            height,
            count,
            data: vec![RADIAL_BACKGROUND; width * height * count],
        }
    }

    pub fn map(&self, j: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn map_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[j * n..(j + 1) * n]
    }

    /// Appends the maps of `other`, which must have the same raster size.
    pub fn extend(&mut self, other: &RadialMapStack) -> Result<()> {
        if other.width != self.width || other.height != self.height {
            return Err(Error::domain("radial stacks differ in size"));
        }
        self.data.extend_from_slice(&other.data);
        self.count += other.count;
        Ok(())
    }

    /// Smallest and largest foreground distance over all maps.
    pub fn foreground_range(&self) -> Option<(f32, f32)> {
        self.data.iter().filter(|&&r| r >= 0.0).fold(None, |acc, &r| match acc {
            None => Some((r, r)),
            Some((lo, hi)) => Some((lo.min(r), hi.max(r))),
        })
    }
}

/// Renders one mesh; the mask is `1` wherever a triangle covers a pixel center.
pub fn render_depth(mesh: &MeshModel, pose: &Pose, k: &CameraIntrinsics) -> Result<(DepthMap, Mask)> {
    let mut depth = DepthMap::empty(k.width, k.height);
    let mut mask = Mask::empty(k.width, k.height);
    render_into(&mut depth, &mut mask, 1, mesh, pose, k)?;
    Ok((depth, mask))
}

/// Renders several objects into one z-buffer; object `i` gets instance id `i + 1`.
pub fn render_scene(objects: &[(&MeshModel, Pose)], k: &CameraIntrinsics) -> Result<(DepthMap, Mask)> {
    let mut depth = DepthMap::empty(k.width, k.height);
    let mut mask = Mask::empty(k.width, k.height);
    for (i, (mesh, pose)) in objects.iter().enumerate() {
        render_into(&mut depth, &mut mask, i as u32 + 1, mesh, pose, k)?;
    }
    Ok((depth, mask))
}

/// Z-buffers `mesh` at `pose` into existing rasters, writing `id` where it is nearest.
pub fn render_into(
    depth: &mut DepthMap,
    mask: &mut Mask,
    id: u32,
    mesh: &MeshModel,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<()> {
    if depth.width != k.width || depth.height != k.height || mask.width != k.width || mask.height != k.height {
        return Err(Error::domain("raster size does not match intrinsics"));
    }
    let cam = mesh.transformed_vertices(pose);
    if let Some(v) = cam.iter().find(|v| !(v.z > 0.0)) {
        return Err(Error::domain(format!(
            "object vertex at depth {} is not in front of the camera",
            v.z
        )));
    }
    let px: Vec<Vector2<f64>> = cam.iter().map(|p| project_unchecked(p, k)).collect();
    for &[a, b, c] in &mesh.faces {
        rasterize_triangle(depth, mask, id, [cam[a], cam[b], cam[c]], [px[a], px[b], px[c]], k);
    }
    Ok(())
}

fn rasterize_triangle(
    depth: &mut DepthMap,
    mask: &mut Mask,
    id: u32,
    cam: [Vector3<f64>; 3],
    px: [Vector2<f64>; 3],
    k: &CameraIntrinsics,
) {
    let edge = |a: &Vector2<f64>, b: &Vector2<f64>, x: f64, y: f64| (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    let area = edge(&px[0], &px[1], px[2].x, px[2].y);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let normal = (cam[1] - cam[0]).cross(&(cam[2] - cam[0]));
    let plane = normal.dot(&cam[0]);

    let min_x = px.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = px.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor();
    let min_y = px.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = px.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor();
    if max_x < 0.0 || max_y < 0.0 {
        return;
    }
    let max_x = max_x.min(k.width as f64 - 1.0);
    let max_y = max_y.min(k.height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    const EDGE_EPS: f64 = 1e-12;
    for v in min_y as usize..=max_y as usize {
        for u in min_x as usize..=max_x as usize {
            let (x, y) = (u as f64, v as f64);
            let b0 = edge(&px[1], &px[2], x, y) / area;
            let b1 = edge(&px[2], &px[0], x, y) / area;
            let b2 = edge(&px[0], &px[1], x, y) / area;
            if b0 < -EDGE_EPS || b1 < -EDGE_EPS || b2 < -EDGE_EPS {
                continue;
            }
            let ray = k.ray(x, y);
            let denom = normal.dot(&ray);
            if denom == 0.0 {
                continue;
            }
            let z = plane / denom;
            if !(z > 0.0) {
                continue;
            }
            let z = z as f32;
            let idx = v * k.width + u;
            let current = depth.data[idx];
            if current == 0.0 || z < current {
                depth.data[idx] = z;
                mask.data[idx] = id;
            }
        }
    }
}

/// Farthest-point sampling over mesh vertices.
///
/// The first pick is the vertex farthest from the centroid. `seed` only
/// decides between vertices whose distances tie exactly.
pub fn select_keypoints_fps(mesh: &MeshModel, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if n == 0 {
        return Err(Error::domain("need at least one keypoint"));
    }
    if n > mesh.vertices.len() {
        return Err(Error::domain(format!(
            "requested {n} keypoints from {} vertices",
            mesh.vertices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroid = mesh.centroid();
    let mut dist: Vec<f64> = mesh.vertices.iter().map(|v| (v - centroid).norm()).collect();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let i = argmax_with_ties(&dist, &mut rng);
        let p = mesh.vertices[i];
        let first = picked.is_empty();
        picked.push(p);
        for (d, v) in dist.iter_mut().zip(&mesh.vertices) {
            let to_p = (v - p).norm();
            *d = if first { to_p } else { d.min(to_p) };
        }
    }
    Ok(picked)
}

fn argmax_with_ties(values: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = best.abs() * 1e-12;
    let ties: Vec<usize> = (0..values.len()).filter(|&i| values[i] >= best - tol).collect();
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

/// Radial maps of one instance: for pixels with `mask == instance`, the
/// distance from the back-projected depth point to each camera-frame keypoint.
pub fn make_radial_maps(
    depth: &DepthMap,
    mask: &Mask,
    instance: u32,
    pose: &Pose,
    keypoints3d: &[Vector3<f64>],
    k: &CameraIntrinsics,
) -> Result<RadialMapStack> {
    if depth.width != mask.width || depth.height != mask.height || depth.width != k.width || depth.height != k.height {
        return Err(Error::domain("depth, mask and intrinsics disagree on raster size"));
    }
    let targets: Vec<Vector3<f64>> = keypoints3d.iter().map(|p| pose.apply(p)).collect();
    let mut stack = RadialMapStack::new(k.width, k.height, targets.len());
    let n = k.width * k.height;
    for idx in 0..n {
        let d = depth.data[idx];
        if mask.data[idx] != instance || !(d > 0.0) {
            continue;
        }
        let (u, v) = (idx % k.width, idx / k.width);
        let point = k.ray(u as f64, v as f64) * d as f64;
        for (j, t) in targets.iter().enumerate() {
            stack.data[j * n + idx] = (point - t).norm() as f32;
        }
    }
    Ok(stack)
}

/// A mesh together with its class id and model-frame keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub class_id: u32,
    pub mesh: MeshModel,
    pub keypoints: Vec<Vector3<f64>>,
}

impl ObjectModel {
    pub fn with_fps_keypoints(class_id: u32, mesh: MeshModel, n: usize, seed: u64) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::domain("class id 0 is reserved for background"));
        }
        let keypoints = select_keypoints_fps(&mesh, n, seed)?;
        Ok(Self {
            class_id,
            mesh,
            keypoints,
        })
    }
}

/// Ground truth of one placed object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLabel {
    pub instance_id: u32,
    pub class_id: u32,
    pub pose: Pose,
    pub keypoints3d: Vec<Vector3<f64>>,
    pub keypoints2d: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub mask: Mask,
    pub objects: Vec<ObjectLabel>,
}

impl LabelSet {
    pub fn keypoints3d(&self) -> Vec<Vector3<f64>> {
        self.objects
            .iter()
            .flat_map(|o| o.keypoints3d.iter().copied())
            .collect()
    }

    pub fn keypoints2d(&self) -> Vec<Vector2<f64>> {
        self.objects
            .iter()
            .flat_map(|o| o.keypoints2d.iter().copied())
            .collect()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.objects
            .iter()
            .flat_map(|o| core::iter::repeat_n(o.class_id, o.keypoints3d.len()))
            .collect()
    }

    /// `(class_id, keypoint slot)` for every radial map channel, in stack order.
    pub fn channels(&self) -> Vec<(u32, usize)> {
        self.objects
            .iter()
            .flat_map(|o| (0..o.keypoints3d.len()).map(move |s| (o.class_id, s)))
            .collect()
    }

    /// 2D keypoints divided by image width and height.
    pub fn normalized_keypoints2d(&self, k: &CameraIntrinsics) -> Vec<Vector2<f64>> {
        self.keypoints2d()
            .iter()
            .map(|p| Vector2::new(p.x / k.width as f64, p.y / k.height as f64))
            .collect()
    }
}

/// Axis-aligned box of allowed object centers in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Rejection-sampling attempts per object.
    pub max_attempts: usize,
}

impl PlacementBox {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub depth: DepthMap,
    pub labels: LabelSet,
    pub radial: RadialMapStack,
}

/// Places every object once at a random non-overlapping pose, renders the
/// scene and derives all labels. Identical seeds give identical scenes.
pub fn generate_scene(
    objects: &[ObjectModel],
    seed: u64,
    k: &CameraIntrinsics,
    placement: &PlacementBox,
) -> Result<Scene> {
    if objects.is_empty() {
        return Err(Error::domain("scene needs at least one object"));
    }
    if (0..3).any(|i| placement.min[i] > placement.max[i]) || !(placement.min.z > 0.0) {
        return Err(Error::domain(
            "placement box must be non-empty and in front of the camera",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses: Vec<Pose> = Vec::with_capacity(objects.len());
    for (i, obj) in objects.iter().enumerate() {
        let radius = obj.mesh.bounding_radius();
        let mut placed = None;
        for _ in 0..placement.max_attempts.max(1) {
            let angles = Vector3::new(
                rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
                rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
                rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
            );
            let t = Vector3::new(
                sample(&mut rng, placement.min.x, placement.max.x),
                sample(&mut rng, placement.min.y, placement.max.y),
                sample(&mut rng, placement.min.z, placement.max.z),
            );
            let pose = Pose {
                rotation: rotation_from_axis_angles(&angles),
                translation: t,
            };
            let clear = poses
                .iter()
                .zip(objects)
                .all(|(other, o)| (other.translation - t).norm() > radius + o.mesh.bounding_radius());
            if clear && fully_visible(&obj.mesh, &pose, k) {
                placed = Some(pose);
                break;
            }
        }
        match placed {
            Some(p) => poses.push(p),
            None => {
                return Err(Error::capacity(format!(
                    "could not place object {i} after {} attempts",
                    placement.max_attempts
                )))
            }
        }
    }

    let pairs: Vec<(&MeshModel, Pose)> = objects.iter().zip(&poses).map(|(o, p)| (&o.mesh, *p)).collect();
    let (depth, mask) = render_scene(&pairs, k)?;

    let mut radial = RadialMapStack::new(k.width, k.height, 0);
    let mut labels = Vec::with_capacity(objects.len());
    for (i, (obj, pose)) in objects.iter().zip(&poses).enumerate() {
        let instance_id = i as u32 + 1;
        radial.extend(&make_radial_maps(&depth, &mask, instance_id, pose, &obj.keypoints, k)?)?;
        let keypoints2d = obj
            .keypoints
            .iter()
            .map(|p| project_unchecked(&pose.apply(p), k))
            .collect();
        labels.push(ObjectLabel {
            instance_id,
            class_id: obj.class_id,
            pose: *pose,
            keypoints3d: obj.keypoints.clone(),
            keypoints2d,
        });
    }
    Ok(Scene {
        depth,
        labels: LabelSet { mask, objects: labels },
        radial,
    })
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn fully_visible(mesh: &MeshModel, pose: &Pose, k: &CameraIntrinsics) -> bool {
    let (w, h) = ((k.width - 1) as f64, (k.height - 1) as f64);
    mesh.vertices.iter().all(|v| {
        let c = pose.apply(v);
        if !(c.z > 0.0) {
            return false;
        }
        let p = project_unchecked(&c, k);
        p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h
    })
}
