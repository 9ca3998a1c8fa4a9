//! Accumulator-space radial voting.
//!
//! Every foreground pixel of a radial map casts one vote into each voxel
//! whose center lies on the sphere shell `| ‖c − p‖ − r | ≤ voxel/2` around
//! the back-projected pixel `p`. All spheres of one map pass through its
//! keypoint, so the densest voxel marks it.

use alloc::format;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{project_unchecked, CameraIntrinsics};
use crate::prelude::*;
use crate::synth::{DepthMap, RadialMapStack, RADIAL_BACKGROUND};
use crate::{Error, Result};

/// Maps radii to a heat map: `(v_max − v) / (v_max − v_min)` on foreground,
/// clamping into `[v_min, v_max]` first. Background stays `-1`.
pub fn invert_radial_map(vr: &RadialMapStack, v_min: f64, v_max: f64) -> Result<RadialMapStack> {
    if !(v_max > v_min) || !v_min.is_finite() || !v_max.is_finite() {
        return Err(Error::domain(format!("need v_max > v_min, got [{v_min}, {v_max}]")));
    }
    let span = v_max - v_min;
    let data = vr
        .data
        .iter()
        .map(|&v| {
            if v < 0.0 {
                RADIAL_BACKGROUND
            } else {
                ((v_max - (v as f64).clamp(v_min, v_max)) / span) as f32
            }
        })
        .collect();
    Ok(RadialMapStack {
        width: vr.width,
        height: vr.height,
        count: vr.count,
        data,
    })
}

/// Explicit grid placement; when absent the grid is fitted to the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub voxel_size: f64,
    /// Upper bound on voxels per grid.
    pub max_voxels: usize,
    pub bounds: Option<GridBounds>,
    /// Inlier gate of [`refine_peak`] in voxels; `0` keeps the raw peak.
    pub refine_voxels: f64,
    /// Margin of [`carve_free_space`] in voxels; `0` disables carving.
    pub carve_voxels: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            voxel_size: 0.005,
            max_voxels: 1 << 26,
            bounds: None,
            refine_voxels: 2.0,
            carve_voxels: 2.0,
        }
    }
}

/// Dense vote accumulator. Voxel `(i, j, k)` spans
/// `origin + [i, i+1) × voxel_size` along x (likewise y, z) and has linear
/// index `i + dims[0] * (j + dims[1] * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub counts: Vec<f32>,
    /// Number of pixels that voted.
    pub voters: usize,
}

impl VoteGrid {
    pub fn zeros(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        Self {
            origin,
            voxel_size,
            dims,
            counts: vec![0.0; dims[0] * dims[1] * dims[2]],
            voters: 0,
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().map(|&c| c as f64).sum()
    }

    /// Adds `other` voxel by voxel; both grids must share placement.
    pub fn merge(&mut self, other: &VoteGrid) -> Result<()> {
        if self.dims != other.dims || self.origin != other.origin || self.voxel_size != other.voxel_size {
            return Err(Error::domain("cannot merge grids with different placement"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        self.voters += other.voters;
        Ok(())
    }

    /// Casts the votes of one sphere shell.
    pub fn add_sphere(&mut self, center: &Vector3<f64>, radius: f64) {
        let vs = self.voxel_size;
        let half = vs / 2.0;
        let outer = radius + half;
        let outer2 = outer * outer;
        let inner = radius - half;
        let inner2 = if inner > 0.0 { inner * inner } else { -1.0 };
        let [nx, ny, nz] = self.dims;
        let o = self.origin;

        let axis_range = |lo: f64, hi: f64, origin: f64, n: usize| -> Option<(usize, usize)> {
            let a = ((lo - origin) / vs - 0.5).ceil() as i64 - 1;
            let b = ((hi - origin) / vs - 0.5).floor() as i64 + 1;
            let a = a.max(0);
            let b = b.min(n as i64 - 1);
            (a <= b).then_some((a as usize, b as usize))
        };
        let on_shell = |d2: f64| {
            let d = d2.sqrt();
            (d - radius).abs() <= half
        };

        let Some((i0, i1)) = axis_range(center.x - outer, center.x + outer, o.x, nx) else {
            return;
        };
        let Some((j0, j1)) = axis_range(center.y - outer, center.y + outer, o.y, ny) else {
            return;
        };
        for j in j0..=j1 {
            let dy = o.y + (j as f64 + 0.5) * vs - center.y;
            for i in i0..=i1 {
                let dx = o.x + (i as f64 + 0.5) * vs - center.x;
                let rho2 = dx * dx + dy * dy;
                if rho2 > outer2 + vs * vs {
                    continue;
                }
                let zo = (outer2 - rho2).max(0.0).sqrt();
                let hit = |k0: usize, k1: usize, counts: &mut [f32]| {
                    for k in k0..=k1 {
                        let dz = o.z + (k as f64 + 0.5) * vs - center.z;
                        if on_shell(rho2 + dz * dz) {
                            counts[i + nx * (j + ny * k)] += 1.0;
                        }
                    }
                };
                if rho2 < inner2 {
                    let zi = (inner2 - rho2).sqrt();
                    let low = axis_range(center.z - zo, center.z - zi, o.z, nz);
                    let high = axis_range(center.z + zi, center.z + zo, o.z, nz);
                    let mut last = None;
                    if let Some((a, b)) = low {
                        hit(a, b, &mut self.counts);
                        last = Some(b);
                    }
                    if let Some((a, b)) = high {
                        let a = match last {
                            Some(l) if a <= l => l + 1,
                            _ => a,
                        };
                        if a <= b {
                            hit(a, b, &mut self.counts);
                        }
                    }
                } else if let Some((a, b)) = axis_range(center.z - zo, center.z + zo, o.z, nz) {
                    hit(a, b, &mut self.counts);
                }
            }
        }
    }
}

/// Foreground pixels of one map as `(camera point, radius)` pairs.
fn voters(map: &[f32], depth: &DepthMap, k: &CameraIntrinsics) -> Vec<(Vector3<f64>, f64)> {
    map.iter()
        .zip(&depth.data)
        .enumerate()
        .filter(|(_, (&r, &d))| r >= 0.0 && d > 0.0)
        .map(|(idx, (&r, &d))| {
            let (u, v) = (idx % depth.width, idx / depth.width);
            (k.ray(u as f64, v as f64) * d as f64, r as f64)
        })
        .collect()
}

fn fit_grid(points: &[(Vector3<f64>, f64)], spec: &GridSpec) -> Result<VoteGrid> {
    let vs = spec.voxel_size;
    if let Some(b) = spec.bounds {
        let n = b.dims.iter().product::<usize>();
        if n > spec.max_voxels {
            return Err(Error::capacity(format!(
                "grid of {n} voxels exceeds budget {}",
                spec.max_voxels
            )));
        }
        return Ok(VoteGrid::zeros(b.origin, vs, b.dims));
    }
    if points.is_empty() {
        return Ok(VoteGrid::zeros(Vector3::zeros(), vs, [1, 1, 1]));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let mut max_r = 0.0f64;
    for (p, r) in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        max_r = max_r.max(*r);
    }
    let pad = max_r + vs;
    let origin = lo - Vector3::repeat(pad);
    let extent = hi - lo + Vector3::repeat(2.0 * pad);
    let mut dims = [0usize; 3];
    let mut total: f64 = 1.0;
    for a in 0..3 {
        let n = (extent[a] / vs).ceil() + 1.0;
        total *= n;
        dims[a] = n as usize;
    }
    if !(total <= spec.max_voxels as f64) {
        return Err(Error::capacity(format!(
            "grid of {total} voxels exceeds budget {}",
            spec.max_voxels
        )));
    }
    Ok(VoteGrid::zeros(origin, vs, dims))
}

/// Least-squares intersection of the vote spheres around `start`.
///
/// Minimizes `Σ (‖p − cᵢ‖ − rᵢ)²` by Gauss-Newton over the voters whose
/// residual is within `gate` of the current estimate. Returns `None` when
/// fewer than four voters agree, the system is singular, or the estimate
/// drifts more than `2·gate` from `start`.
pub fn refine_peak(start: &Vector3<f64>, voters: &[(Vector3<f64>, f64)], gate: f64) -> Option<Vector3<f64>> {
    let mut p = *start;
    for _ in 0..20 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jte = Vector3::zeros();
        let mut used = 0usize;
        for (c, r) in voters {
            let d = p - c;
            let n = d.norm();
            let e = n - r;
            if !(n > 0.0) || e.abs() > gate {
                continue;
            }
            let g = d / n;
            jtj += g * g.transpose();
            jte += g * e;
            used += 1;
        }
        if used < 4 {
            return None;
        }
        let step = jtj.try_inverse()? * -jte;
        p += step;
        if !p.iter().all(|x| x.is_finite()) || (p - start).norm() > 2.0 * gate {
            return None;
        }
        if step.norm() < 1e-10 {
            break;
        }
    }
    Some(p)
}

/// Votes a single radial map.
pub fn vote_map(map: &[f32], depth: &DepthMap, k: &CameraIntrinsics, spec: &GridSpec) -> Result<VoteGrid> {
    if map.len() != depth.data.len() || depth.width != k.width || depth.height != k.height {
        return Err(Error::domain(
            "radial map, depth and intrinsics disagree on raster size",
        ));
    }
    if !(spec.voxel_size > 0.0) {
        return Err(Error::domain("voxel size must be positive"));
    }
    let points = voters(map, depth, k);
    let mut grid = fit_grid(&points, spec)?;
    for (p, r) in &points {
        grid.add_sphere(p, *r);
    }
    grid.voters = points.len();
    Ok(grid)
}

/// Clears the votes of voxels that the depth map proves empty.
///
/// A voxel is free space when it lies behind the camera, or when every pixel
/// of the 3×3 patch around its projection saw either nothing or a surface
/// more than `margin` behind it. A planar patch of voters puts a mirror copy
/// of the keypoint in front of the observed surface; carving removes it.
/// Voxels projecting near or past the image border are kept.
pub fn carve_free_space(grid: &mut VoteGrid, depth: &DepthMap, k: &CameraIntrinsics, margin: f64) {
    let (w, h) = (depth.width as i64, depth.height as i64);
    for idx in 0..grid.counts.len() {
        if grid.counts[idx] == 0.0 {
            continue;
        }
        let [i, j, kk] = grid.coords(idx);
        let c = grid.center(i, j, kk);
        if !(c.z > 0.0) {
            grid.counts[idx] = 0.0;
            continue;
        }
        let px = project_unchecked(&c, k);
        let (u, v) = (px.x.round(), px.y.round());
        if !(u >= 1.0 && v >= 1.0 && u < (w - 1) as f64 && v < (h - 1) as f64) {
            continue;
        }
        let (u, v) = (u as i64, v as i64);
        let free = (-1..=1).all(|dv| {
            (-1..=1).all(|du| {
                let d = f64::from(depth.data[((v + dv) * w + u + du) as usize]);
                d <= 0.0 || d > c.z + margin
            })
        });
        if free {
            grid.counts[idx] = 0.0;
        }
    }
}

/// One accumulator per radial map.
pub fn vote_radial(
    vr: &RadialMapStack,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    spec: &GridSpec,
) -> Result<Vec<VoteGrid>> {
    if vr.width != depth.width || vr.height != depth.height {
        return Err(Error::domain("radial stack and depth map differ in size"));
    }
    (0..vr.count).map(|j| vote_map(vr.map(j), depth, k, spec)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub position: Vector3<f64>,
    /// Peak count over the number of voting pixels, in `[0, 1]`.
    pub score: f64,
    pub count: f64,
    pub voxel: [usize; 3],
}

/// Argmax voxel (lowest linear index on ties) refined by the count-weighted
/// center of mass of its 3×3×3 neighborhood.
pub fn extract_peak(grid: &VoteGrid) -> Result<Peak> {
    let mut best_idx = 0;
    let mut best = 0.0f32;
    for (idx, &c) in grid.counts.iter().enumerate() {
        if c > best {
            best = c;
            best_idx = idx;
        }
    }
    if !(best > 0.0) {
        return Err(Error::NoPeak);
    }
    let [i, j, k] = grid.coords(best_idx);
    let mut mass = 0.0;
    let mut acc = Vector3::zeros();
    let span = |c: usize, n: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
    for kk in span(k, grid.dims[2]) {
        for jj in span(j, grid.dims[1]) {
            for ii in span(i, grid.dims[0]) {
                let w = grid.counts[grid.index(ii, jj, kk)] as f64;
                mass += w;
                acc += grid.center(ii, jj, kk) * w;
            }
        }
    }
    let score = if grid.voters == 0 {
        0.0
    } else {
        (best as f64 / grid.voters as f64).clamp(0.0, 1.0)
    };
    Ok(Peak {
        position: acc / mass,
        score,
        count: best as f64,
        voxel: [i, j, k],
    })
}

/// One keypoint hypothesis: a row of the `n × 4` voter output plus its 3D
/// location. `slot` is the keypoint index within the class's model keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointCandidate {
    pub kp2d: Vector2<f64>,
    pub kp3d: Vector3<f64>,
    /// `0` is the background class and never reaches pose estimation.
    pub class_id: u32,
    pub slot: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub entries: Vec<KeypointCandidate>,
}

impl KeypointSet {
    /// Orders entries by class, then by descending score. The sort is stable.
    pub fn sort_by_score(&mut self) {
        self.entries.sort_by(|a, b| {
            a.class_id
                .cmp(&b.class_id)
                .then(b.score.partial_cmp(&a.score).unwrap_or(core::cmp::Ordering::Equal))
        });
    }

    pub fn is_sorted_by_score(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[0].class_id != w[1].class_id || w[0].score >= w[1].score)
    }

    pub fn foreground(&self) -> impl Iterator<Item = &KeypointCandidate> {
        self.entries.iter().filter(|e| e.class_id != 0)
    }
}

/// Votes one map and returns its peak. Free space is carved first when
/// `spec.carve_voxels > 0`; the peak is refined by [`refine_peak`] when
/// `spec.refine_voxels > 0` and the refinement succeeds.
pub fn locate_keypoint(map: &[f32], depth: &DepthMap, k: &CameraIntrinsics, spec: &GridSpec) -> Result<Peak> {
    let mut grid = vote_map(map, depth, k, spec)?;
    if spec.carve_voxels > 0.0 {
        carve_free_space(&mut grid, depth, k, spec.carve_voxels * spec.voxel_size);
    }
    let mut peak = extract_peak(&grid)?;
    if spec.refine_voxels > 0.0 {
        let points = voters(map, depth, k);
        if let Some(p) = refine_peak(&peak.position, &points, spec.refine_voxels * spec.voxel_size) {
            peak.position = p;
        }
    }
    Ok(peak)
}

/// Votes every map and keeps one candidate per map that produced a peak.
/// `channels[j]` gives `(class_id, slot)` of map `j`.
pub fn detect_keypoints(
    vr: &RadialMapStack,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    channels: &[(u32, usize)],
    spec: &GridSpec,
) -> Result<KeypointSet> {
    if channels.len() != vr.count {
        return Err(Error::domain(format!(
            "{} channel labels for {} radial maps",
            channels.len(),
            vr.count
        )));
    }
    let mut set = KeypointSet::default();
    for (j, &(class_id, slot)) in channels.iter().enumerate() {
        match locate_keypoint(vr.map(j), depth, k, spec) {
            Ok(peak) if peak.position.z > 0.0 => set.entries.push(KeypointCandidate {
                kp2d: project_unchecked(&peak.position, k),
                kp3d: peak.position,
                class_id,
                slot,
                score: peak.score,
            }),
            Ok(_) | Err(Error::NoPeak) => {}
            Err(e) => return Err(e),
        }
    }
    set.sort_by_score();
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingConfig {
    /// Candidates kept per slot (best scores first) before enumeration.
    pub max_per_slot: usize,
    /// Groups whose mean discrepancy exceeds this are rejected.
    pub max_discrepancy: f64,
    pub min_keypoints: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            max_per_slot: 4,
            max_discrepancy: f64::INFINITY,
            min_keypoints: 4,
        }
    }
}

/// Keypoints assigned to one object instance, ordered by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: u32,
    pub keypoints: KeypointSet,
    /// Mean `| ‖k_a − k_b‖ − ‖m_a − m_b‖ |` over assigned pairs, meters.
    pub discrepancy: f64,
}

/// Mean absolute pairwise-distance mismatch between candidates and the model
/// keypoints of their slots.
pub fn pairwise_discrepancy(candidates: &[&KeypointCandidate], model: &[Vector3<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..candidates.len() {
        for b in a + 1..candidates.len() {
            let (ca, cb) = (candidates[a], candidates[b]);
            let observed = (ca.kp3d - cb.kp3d).norm();
            let expected = (model[ca.slot] - model[cb.slot]).norm();
            sum += (observed - expected).abs();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Greedy partition of candidates into instances by rigid consistency with
/// the CAD keypoints. `models` maps a class id to its model keypoints.
///
/// Each round fills every slot that still has candidates with one of them,
/// takes the combination of least discrepancy, and removes its keypoints.
/// Rounds stop once fewer than `min_keypoints` slots remain populated.
pub fn group_instances<'a>(
    kps: &KeypointSet,
    models: impl Fn(u32) -> Option<&'a [Vector3<f64>]>,
    config: &GroupingConfig,
) -> Vec<Instance> {
    let mut classes: Vec<u32> = kps.foreground().map(|e| e.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = Vec::new();
    for class_id in classes {
        let Some(model) = models(class_id) else {
            continue;
        };
        let mut remaining: Vec<&KeypointCandidate> = kps
            .entries
            .iter()
            .filter(|e| e.class_id == class_id && e.slot < model.len())
            .collect();
        // stable: best score first inside each slot
        remaining.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(core::cmp::Ordering::Equal));

        loop {
            let slots: Vec<Vec<usize>> = (0..model.len())
                .map(|s| {
                    remaining
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| c.slot == s)
                        .map(|(i, _)| i)
                        .take(config.max_per_slot.max(1))
                        .collect::<Vec<_>>()
                })
                .filter(|v| !v.is_empty())
                .collect();
            if slots.len() < config.min_keypoints.max(1) {
                break;
            }
            let Some((choice, discrepancy)) = best_combination(&slots, &remaining, model) else {
                break;
            };
            if !(discrepancy <= config.max_discrepancy) {
                break;
            }
            let mut entries: Vec<KeypointCandidate> = choice.iter().map(|&i| *remaining[i]).collect();
            entries.sort_by_key(|e| e.slot);
            let mut taken = choice.clone();
            taken.sort_unstable_by(|a, b| b.cmp(a));
            for i in taken {
                remaining.remove(i);
            }
            out.push(Instance {
                class_id,
                keypoints: KeypointSet { entries },
                discrepancy,
            });
        }
    }
    out
}

/// Exhaustive search over one candidate per populated slot.
fn best_combination(
    slots: &[Vec<usize>],
    remaining: &[&KeypointCandidate],
    model: &[Vector3<f64>],
) -> Option<(Vec<usize>, f64)> {
    let mut cursor = vec![0usize; slots.len()];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut picked: Vec<&KeypointCandidate> = Vec::with_capacity(slots.len());
    loop {
        picked.clear();
        picked.extend(cursor.iter().zip(slots).map(|(&c, s)| remaining[s[c]]));
        let d = pairwise_discrepancy(&picked, model);
        if best.as_ref().is_none_or(|(_, b)| d < *b) {
            best = Some((cursor.iter().zip(slots).map(|(&c, s)| s[c]).collect(), d));
        }
        // odometer increment
        let mut axis = 0;
        loop {
            if axis == slots.len() {
                return best;
            }
            cursor[axis] += 1;
            if cursor[axis] < slots[axis].len() {
                break;
            }
            cursor[axis] = 0;
            axis += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cube, Pose};
    use crate::synth::{generate_scene, ObjectModel, PlacementBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from(values: &[f32]) -> RadialMapStack {
        RadialMapStack {
            width: values.len(),
            height: 1,
            count: 1,
            data: values.to_vec(),
        }
    }

    #[test]
    fn inversion_examples() {
        let s = stack_from(&[2.0, 1.0, 1.5, -1.0, 5.0, 0.0]);
        let inv = invert_radial_map(&s, 1.0, 2.0).unwrap();
        assert_eq!(inv.data, vec![0.0, 1.0, 0.5, -1.0, 0.0, 1.0]);
        assert!(invert_radial_map(&s, 2.0, 2.0).is_err());
        assert!(invert_radial_map(&s, 3.0, 2.0).is_err());
    }

    fn tiny_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 2.0, 2.0, 5, 5).unwrap()
    }

    #[test]
    fn zero_radius_hits_single_voxel() {
        let k = tiny_camera();
        let mut depth = DepthMap::empty(5, 5);
        let mut map = vec![RADIAL_BACKGROUND; 25];
        depth.data[2 * 5 + 2] = 1.0;
        map[2 * 5 + 2] = 0.0;
        // back-projected point (0, 0, 1) sits at the center of voxel (5, 5, 5)
        let vs = 0.01;
        let spec = GridSpec {
            voxel_size: vs,
            bounds: Some(GridBounds {
                origin: Vector3::new(-5.5 * vs, -5.5 * vs, 1.0 - 5.5 * vs),
                dims: [11, 11, 11],
            }),
            ..GridSpec::default()
        };
        let grid = vote_map(&map, &depth, &k, &spec).unwrap();
        assert_eq!(grid.total(), 1.0);
        assert_eq!(grid.counts[grid.index(5, 5, 5)], 1.0);
        let peak = extract_peak(&grid).unwrap();
        assert!((peak.position - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(peak.score, 1.0);
    }

    #[test]
    fn background_votes_nothing() {
        let k = tiny_camera();
        let mut depth = DepthMap::empty(5, 5);
        depth.data.iter_mut().for_each(|d| *d = 1.0);
        let map = vec![RADIAL_BACKGROUND; 25];
        let grid = vote_map(&map, &depth, &k, &GridSpec::default()).unwrap();
        assert_eq!(grid.total(), 0.0);
        assert_eq!(extract_peak(&grid), Err(Error::NoPeak));
    }

    #[test]
    fn budget_is_enforced() {
        let k = tiny_camera();
        let mut depth = DepthMap::empty(5, 5);
        depth.data[0] = 1.0;
        let mut map = vec![RADIAL_BACKGROUND; 25];
        map[0] = 0.5;
        let spec = GridSpec {
            max_voxels: 1000,
            ..GridSpec::default()
        };
        assert!(matches!(vote_map(&map, &depth, &k, &spec), Err(Error::Capacity(_))));
    }

    #[test]
    fn peak_ties_pick_lowest_index() {
        let mut g = VoteGrid::zeros(Vector3::zeros(), 1.0, [4, 1, 1]);
        g.counts[1] = 2.0;
        g.counts[2] = 2.0;
        g.voters = 4;
        let p = extract_peak(&g).unwrap();
        assert_eq!(p.voxel, [1, 0, 0]);
        // neighborhood of voxel 1 is voxels 0..=2: mass at 1.5 and 2.5
        assert!((p.position.x - 2.0).abs() < 1e-12);
        assert_eq!(p.score, 0.5);
    }

    /// Every voxel tested against the shell predicate directly.
    fn brute_force_sphere(grid: &mut VoteGrid, c: &Vector3<f64>, r: f64) {
        let half = grid.voxel_size / 2.0;
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    if ((grid.center(i, j, k) - c).norm() - r).abs() <= half {
                        let idx = grid.index(i, j, k);
                        grid.counts[idx] += 1.0;
                    }
                }
            }
        }
    }

    #[test]
    fn shell_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let origin = Vector3::new(-0.1, -0.1, 0.4);
            let mut fast = VoteGrid::zeros(origin, 0.01, [20, 20, 20]);
            let mut slow = fast.clone();
            for _ in 0..5 {
                let c = Vector3::new(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(0.35..0.65),
                );
                let r = rng.random_range(0.0..0.12);
                fast.add_sphere(&c, r);
                brute_force_sphere(&mut slow, &c, r);
            }
            assert_eq!(fast.counts, slow.counts);
        }
    }

    #[test]
    fn accumulation_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spheres: Vec<(Vector3<f64>, f64)> = (0..30)
            .map(|_| {
                (
                    Vector3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(0.5..0.6),
                    ),
                    rng.random_range(0.0..0.05),
                )
            })
            .collect();
        let base = VoteGrid::zeros(Vector3::new(-0.1, -0.1, 0.45), 0.005, [40, 40, 40]);
        let mut forward = base.clone();
        spheres.iter().for_each(|(c, r)| forward.add_sphere(c, *r));
        let mut halves = (base.clone(), base.clone());
        spheres.iter().rev().enumerate().for_each(|(i, (c, r))| {
            if i % 2 == 0 {
                halves.0.add_sphere(c, *r)
            } else {
                halves.1.add_sphere(c, *r)
            }
        });
        halves.0.merge(&halves.1).unwrap();
        assert_eq!(forward.counts, halves.0.counts);
    }

    #[test]
    fn exact_maps_recover_keypoints() {
        let k = CameraIntrinsics::new(150.0, 150.0, 64.0, 48.0, 128, 96).unwrap();
        let objects = [ObjectModel::with_fps_keypoints(1, cube(0.12), 4, 0).unwrap()];
        let placement = PlacementBox {
            min: Vector3::new(-0.05, -0.03, 0.6),
            max: Vector3::new(0.05, 0.03, 0.8),
            max_attempts: 100,
        };
        let spec = GridSpec::default();
        for seed in 0..3 {
            let scene = generate_scene(&objects, seed, &k, &placement).unwrap();
            let kps = detect_keypoints(&scene.radial, &scene.depth, &k, &scene.labels.channels(), &spec).unwrap();
            assert_eq!(kps.entries.len(), 4);
            let obj = &scene.labels.objects[0];
            for e in &kps.entries {
                let gt = obj.pose.apply(&obj.keypoints3d[e.slot]);
                assert!(
                    (e.kp3d - gt).norm() <= spec.voxel_size,
                    "seed {seed}: {}",
                    (e.kp3d - gt).norm()
                );
            }
        }
    }

    fn candidates_for(pose: &Pose, model: &[Vector3<f64>], score: f64) -> Vec<KeypointCandidate> {
        model
            .iter()
            .enumerate()
            .map(|(slot, m)| KeypointCandidate {
                kp2d: Vector2::zeros(),
                kp3d: pose.apply(m),
                class_id: 1,
                slot,
                score,
            })
            .collect()
    }

    fn model_kps() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.05, 0.05, 0.05),
            Vector3::new(-0.05, -0.05, 0.05),
            Vector3::new(-0.05, 0.05, -0.05),
            Vector3::new(0.05, -0.05, -0.05),
        ]
    }

    #[test]
    fn single_instance_exact() {
        let model = model_kps();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let set = KeypointSet {
            entries: candidates_for(&pose, &model, 0.9),
        };
        let groups = group_instances(
            &set,
            |c| (c == 1).then_some(model.as_slice()),
            &GroupingConfig::default(),
        );
        assert_eq!(groups.len(), 1);
        assert!(groups[0].discrepancy < 1e-12);
        assert_eq!(groups[0].keypoints.entries.len(), 4);
    }

    #[test]
    fn two_instances_separate_cleanly() {
        let model = model_kps();
        let a = Pose::from_translation(Vector3::new(-0.5, 0.0, 1.5));
        let b = Pose {
            rotation: crate::geometry::rotation_from_axis_angles(&Vector3::new(0.3, 0.2, -0.4)),
            translation: Vector3::new(0.5, 0.0, 1.5),
        };
        let mut entries = candidates_for(&a, &model, 0.8);
        entries.extend(candidates_for(&b, &model, 0.7));
        // interleave so grouping cannot rely on input order
        entries.swap(1, 5);
        entries.swap(2, 7);
        let set = KeypointSet { entries };
        let groups = group_instances(
            &set,
            |c| (c == 1).then_some(model.as_slice()),
            &GroupingConfig::default(),
        );
        assert_eq!(groups.len(), 2);
        for g in &groups {
            assert_eq!(g.keypoints.entries.len(), 4);
            assert!(g.discrepancy < 1e-6);
            let xs: Vec<f64> = g.keypoints.entries.iter().map(|e| e.kp3d.x).collect();
            assert!(xs.iter().all(|&x| x < 0.0) || xs.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn outlier_is_left_out() {
        let model = model_kps();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut entries = candidates_for(&pose, &model, 0.5);
        entries.push(KeypointCandidate {
            kp2d: Vector2::zeros(),
            kp3d: Vector3::new(10.0, 0.0, 1.0),
            class_id: 1,
            slot: 2,
            score: 0.99,
        });
        let set = KeypointSet { entries };
        let groups = group_instances(
            &set,
            |c| (c == 1).then_some(model.as_slice()),
            &GroupingConfig::default(),
        );
        assert_eq!(groups.len(), 1);
        assert!(groups[0].keypoints.entries.iter().all(|e| e.kp3d.x < 1.0));
    }

    #[test]
    fn background_and_sparse_classes_are_dropped() {
        let model = model_kps();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut entries = candidates_for(&pose, &model, 0.5);
        entries.iter_mut().for_each(|e| e.class_id = 0);
        let mut three = candidates_for(&pose, &model, 0.5);
        three.truncate(3);
        entries.extend(three);
        let set = KeypointSet { entries };
        let groups = group_instances(&set, |_| Some(model.as_slice()), &GroupingConfig::default());
        assert!(groups.is_empty());
    }

    #[test]
    fn sorting_orders_scores_within_class() {
        let model = model_kps();
        let pose = Pose::identity();
        let mut entries = candidates_for(&pose, &model, 0.1);
        for (i, e) in entries.iter_mut().enumerate() {
            e.score = i as f64 / 10.0;
            e.class_id = 1 + (i as u32 % 2);
        }
        let mut set = KeypointSet { entries };
        set.sort_by_score();
        assert!(set.is_sorted_by_score());
    }

    #[test]
    fn refinement_recovers_exact_sphere_intersection() {
        let target = Vector3::new(0.01, -0.02, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let voters: Vec<_> = (0..50)
            .map(|_| {
                let c = Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(0.6..0.65),
                );
                (c, (c - target).norm())
            })
            .collect();
        let start = target + Vector3::new(0.004, -0.003, 0.005);
        let p = refine_peak(&start, &voters, 0.01).unwrap();
        assert!((p - target).norm() < 1e-9);
        // a single repeated center cannot fix a point
        let same = vec![(Vector3::new(0.0, 0.0, 0.6), 0.1); 10];
        assert_eq!(refine_peak(&Vector3::new(0.0, 0.0, 0.7), &same, 0.01), None);
        assert_eq!(refine_peak(&start, &voters[..3], 0.01), None);
    }

    fn plane_camera() -> (CameraIntrinsics, DepthMap) {
        let k = CameraIntrinsics::new(200.0, 200.0, 16.0, 16.0, 33, 33).unwrap();
        let mut depth = DepthMap::empty(33, 33);
        depth.data.iter_mut().for_each(|d| *d = 0.6);
        (k, depth)
    }

    #[test]
    fn carving_clears_only_votes_in_front_of_the_surface() {
        let (k, depth) = plane_camera();
        let vs = 0.01;
        let mut grid = VoteGrid::zeros(Vector3::new(-0.005, -0.005, 0.39), vs, [1, 1, 40]);
        grid.counts.iter_mut().for_each(|c| *c = 1.0);
        carve_free_space(&mut grid, &depth, &k, 0.02);
        for kk in 0..40 {
            let z = grid.center(0, 0, kk).z;
            let kept = grid.counts[kk] > 0.0;
            assert_eq!(kept, z > 0.58, "z = {z}");
        }
        // voxels projecting onto the border row are never carved
        let mut edge = VoteGrid::zeros(Vector3::new(0.048, -0.005, 0.395), vs, [1, 1, 1]);
        edge.counts[0] = 1.0;
        carve_free_space(&mut edge, &depth, &k, 0.02);
        assert_eq!(edge.counts[0], 1.0);
    }

    #[test]
    fn carving_resolves_the_planar_mirror() {
        let (k, depth) = plane_camera();
        for z in [0.64, 0.66, 0.7] {
            let target = Vector3::new(0.003, -0.002, z);
            let map: Vec<f32> = (0..33 * 33)
                .map(|i| ((k.ray((i % 33) as f64, (i / 33) as f64) * 0.6 - target).norm()) as f32)
                .collect();
            let peak = locate_keypoint(&map, &depth, &k, &GridSpec::default()).unwrap();
            assert!((peak.position - target).norm() < 1e-6, "z = {z}: {:?}", peak.position);
        }
    }
}
