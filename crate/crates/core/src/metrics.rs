//! Pose accuracy metrics.
//!
//! Distances are in meters except [`mspd`], which is in pixels. Recall-style
//! scores count a pose as correct when its error is strictly below the
//! threshold.

use alloc::format;

use crate::geometry::{project_unchecked, CameraIntrinsics, MeshModel, Pose};
use crate::prelude::*;
use crate::synth::{render_depth, DepthMap};
use crate::{Error, Result};

/// Default visibility tolerance for [`vsd`], in meters.
pub const VSD_DELTA: f64 = 0.015;
/// Default upper limit of the ADD-S AUC curve, in meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.1;
/// Reference image width for the pixel thresholds of MSPD.
pub const MSPD_REFERENCE_WIDTH: f64 = 640.0;

/// Average distance between corresponding model vertices.
pub fn add(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose) -> f64 {
    let sum: f64 = mesh
        .vertices
        .iter()
        .map(|v| (pose_gt.apply(v) - pose_est.apply(v)).norm())
        .sum();
    sum / mesh.vertices.len() as f64
}

/// Average distance from each ground-truth vertex to the nearest estimated vertex.
pub fn add_s(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose) -> f64 {
    let gt = mesh.transformed_vertices(pose_gt);
    let est = mesh.transformed_vertices(pose_est);
    let sum: f64 = gt
        .iter()
        .map(|g| {
            est.iter()
                .map(|e| (g - e).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / gt.len() as f64
}

/// ADD for asymmetric objects, ADD-S for objects with a non-trivial symmetry set.
pub fn add_or_add_s(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose) -> f64 {
    if is_symmetric(mesh) {
        add_s(mesh, pose_gt, pose_est)
    } else {
        add(mesh, pose_gt, pose_est)
    }
}

pub fn is_symmetric(mesh: &MeshModel) -> bool {
    mesh.symmetries.len() > 1
}

/// One pose's ADD family errors together with what is needed to threshold them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddRecord {
    pub add: f64,
    pub add_s: f64,
    pub diameter: f64,
    pub symmetric: bool,
}

impl AddRecord {
    pub fn compute(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose) -> Self {
        Self {
            add: add(mesh, pose_gt, pose_est),
            add_s: add_s(mesh, pose_gt, pose_est),
            diameter: mesh.diameter,
            symmetric: is_symmetric(mesh),
        }
    }

    /// The ADD(S) error: ADD-S for symmetric objects, ADD otherwise.
    pub fn error(&self) -> f64 {
        if self.symmetric {
            self.add_s
        } else {
            self.add
        }
    }
}

/// Share of poses whose ADD(S) error is below `fraction · diameter`.
/// An empty list scores 0.
pub fn add_threshold_accuracy(records: &[AddRecord], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0) {
        return Err(Error::domain(format!(
            "threshold fraction must be positive, got {fraction}"
        )));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let hits = records.iter().filter(|r| r.error() < fraction * r.diameter).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Area under the accuracy-versus-threshold curve on `[0, max_threshold]`,
/// normalized to `[0, 1]`.
///
/// Each error `e` contributes accuracy on `(e, max_threshold]`, so the exact
/// integral is the mean of `max(0, max_threshold − e) / max_threshold`.
pub fn add_s_auc(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::domain("AUC of an empty error list"));
    }
    if !(max_threshold > 0.0) {
        return Err(Error::domain(format!(
            "max threshold must be positive, got {max_threshold}"
        )));
    }
    let area: f64 = errors
        .iter()
        .map(|&e| {
            if e.is_nan() {
                0.0
            } else {
                (max_threshold - e.max(0.0)).max(0.0)
            }
        })
        .sum();
    Ok(area / (errors.len() as f64 * max_threshold))
}

/// Accuracy sampled at `steps + 1` evenly spaced thresholds in `[0, max_threshold]`.
pub fn accuracy_curve(errors: &[f64], max_threshold: f64, steps: usize) -> Vec<(f64, f64)> {
    let n = errors.len().max(1) as f64;
    (0..=steps)
        .map(|i| {
            let t = max_threshold * i as f64 / steps.max(1) as f64;
            (t, errors.iter().filter(|&&e| e < t).count() as f64 / n)
        })
        .collect()
}

/// Maximum symmetry-aware surface distance.
pub fn mssd(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose) -> f64 {
    let est = mesh.transformed_vertices(pose_est);
    mesh.symmetries
        .iter()
        .map(|s| {
            let gt = pose_gt.compose(s);
            est.iter()
                .zip(&mesh.vertices)
                .map(|(e, v)| (e - gt.apply(v)).norm_squared())
                .fold(0.0, f64::max)
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum symmetry-aware projection distance in pixels. Infinite when any
/// vertex of either pose lies on or behind the image plane.
pub fn mspd(mesh: &MeshModel, pose_gt: &Pose, pose_est: &Pose, k: &CameraIntrinsics) -> f64 {
    let est = mesh.transformed_vertices(pose_est);
    if est.iter().any(|p| !(p.z > 0.0)) {
        return f64::INFINITY;
    }
    let est_px: Vec<_> = est.iter().map(|p| project_unchecked(p, k)).collect();
    let mut best = f64::INFINITY;
    for s in &mesh.symmetries {
        let gt = pose_gt.compose(s);
        let mut worst = 0.0f64;
        for (e, v) in est_px.iter().zip(&mesh.vertices) {
            let p = gt.apply(v);
            if !(p.z > 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((e - project_unchecked(&p, k)).norm_squared());
        }
        best = best.min(worst.sqrt());
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsdResult {
    pub value: f64,
    /// Neither render is visible anywhere; `value` is 0.
    pub empty: bool,
}

/// Visible surface discrepancy between two renders against the scene depth.
///
/// A render pixel is visible when it has depth and lies within `delta` of the
/// scene. Over the union of both visibility masks, a pixel is an error unless
/// it is visible in both renders with depths within `tau`.
pub fn vsd(gt_render: &DepthMap, est_render: &DepthMap, scene: &DepthMap, tau: f64, delta: f64) -> Result<VsdResult> {
    let dims = (scene.width, scene.height);
    if (gt_render.width, gt_render.height) != dims || (est_render.width, est_render.height) != dims {
        return Err(Error::domain("renders and scene depth differ in size"));
    }
    let visible = |r: f32, s: f32| r > 0.0 && s > 0.0 && (f64::from(r) - f64::from(s)).abs() < delta;
    let mut union = 0usize;
    let mut wrong = 0usize;
    for ((&g, &e), &s) in gt_render.data.iter().zip(&est_render.data).zip(&scene.data) {
        let (vg, ve) = (visible(g, s), visible(e, s));
        if !(vg || ve) {
            continue;
        }
        union += 1;
        if !(vg && ve) || (f64::from(g) - f64::from(e)).abs() > tau {
            wrong += 1;
        }
    }
    if union == 0 {
        return Ok(VsdResult {
            value: 0.0,
            empty: true,
        });
    }
    Ok(VsdResult {
        value: wrong as f64 / union as f64,
        empty: false,
    })
}

/// Threshold grids for the averaged recall.
#[derive(Debug, Clone, PartialEq)]
pub struct ArThresholds {
    /// VSD misalignment tolerances as fractions of the object diameter.
    pub vsd_tau_fractions: Vec<f64>,
    /// VSD error thresholds.
    pub vsd_thetas: Vec<f64>,
    /// MSSD thresholds as fractions of the object diameter.
    pub mssd_fractions: Vec<f64>,
    /// MSPD thresholds in pixels.
    pub mspd_pixels: Vec<f64>,
}

impl ArThresholds {
    /// Grids of 5% to 50% in 5% steps; MSPD uses 5 to 50 px scaled by `image_width / 640`.
    pub fn standard(image_width: usize) -> Self {
        let grid: Vec<f64> = (1..=10).map(|i| 0.05 * i as f64).collect();
        let scale = image_width as f64 / MSPD_REFERENCE_WIDTH;
        Self {
            vsd_tau_fractions: grid.clone(),
            vsd_thetas: grid.clone(),
            mssd_fractions: grid,
            mspd_pixels: (1..=10).map(|i| 5.0 * i as f64 * scale).collect(),
        }
    }
}

/// Errors of one pose on the averaged-recall metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrors {
    /// One VSD value per entry of [`ArThresholds::vsd_tau_fractions`].
    pub vsd: Vec<f64>,
    pub mssd: f64,
    pub mspd: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArRecall {
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub ar: f64,
}

/// Mean recall over each threshold grid, and their average.
pub fn ar_recall(poses: &[PoseErrors], thresholds: &ArThresholds) -> Result<ArRecall> {
    if poses.is_empty() {
        return Err(Error::domain("averaged recall of an empty pose list"));
    }
    if let Some(p) = poses.iter().find(|p| p.vsd.len() != thresholds.vsd_tau_fractions.len()) {
        return Err(Error::domain(format!(
            "pose has {} VSD values for {} tolerances",
            p.vsd.len(),
            thresholds.vsd_tau_fractions.len()
        )));
    }
    let n = poses.len() as f64;
    let mean_recall = |grid: &[f64], passes: &dyn Fn(&PoseErrors, f64) -> bool| -> f64 {
        if grid.is_empty() {
            return 0.0;
        }
        let total: f64 = grid
            .iter()
            .map(|&t| poses.iter().filter(|p| passes(p, t)).count() as f64 / n)
            .sum();
        total / grid.len() as f64
    };
    let ar_mssd = mean_recall(&thresholds.mssd_fractions, &|p, f| p.mssd < f * p.diameter);
    let ar_mspd = mean_recall(&thresholds.mspd_pixels, &|p, t| p.mspd < t);
    let mut vsd_total = 0.0;
    let mut vsd_cells = 0usize;
    for ti in 0..thresholds.vsd_tau_fractions.len() {
        for &theta in &thresholds.vsd_thetas {
            vsd_total += poses.iter().filter(|p| p.vsd[ti] < theta).count() as f64 / n;
            vsd_cells += 1;
        }
    }
    let ar_vsd = if vsd_cells == 0 {
        0.0
    } else {
        vsd_total / vsd_cells as f64
    };
    Ok(ArRecall {
        ar_vsd,
        ar_mssd,
        ar_mspd,
        ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0,
    })
}

/// Renders `mesh` at `pose`; poses that cannot be rendered give an empty map.
pub fn render_or_empty(mesh: &MeshModel, pose: &Pose, k: &CameraIntrinsics) -> DepthMap {
    render_depth(mesh, pose, k).map_or_else(|_| DepthMap::empty(k.width, k.height), |(d, _)| d)
}

/// Every per-pose metric for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMetrics {
    pub add: f64,
    pub add_s: f64,
    pub mssd: f64,
    pub mspd: f64,
    /// VSD at each tolerance of the threshold grid.
    pub vsd: Vec<f64>,
    pub diameter: f64,
    pub symmetric: bool,
}

impl PoseMetrics {
    pub fn add_record(&self) -> AddRecord {
        AddRecord {
            add: self.add,
            add_s: self.add_s,
            diameter: self.diameter,
            symmetric: self.symmetric,
        }
    }

    pub fn pose_errors(&self) -> PoseErrors {
        PoseErrors {
            vsd: self.vsd.clone(),
            mssd: self.mssd,
            mspd: self.mspd,
            diameter: self.diameter,
        }
    }
}

/// Evaluates one estimate. Without a scene depth map the ground-truth render
/// stands in for it, which makes the whole object visible.
pub fn evaluate_pose(
    mesh: &MeshModel,
    pose_gt: &Pose,
    pose_est: &Pose,
    k: &CameraIntrinsics,
    scene: Option<&DepthMap>,
    thresholds: &ArThresholds,
    delta: f64,
) -> Result<PoseMetrics> {
    let gt_render = render_or_empty(mesh, pose_gt, k);
    let est_render = render_or_empty(mesh, pose_est, k);
    let scene = scene.unwrap_or(&gt_render);
    let vsd = thresholds
        .vsd_tau_fractions
        .iter()
        .map(|f| vsd(&gt_render, &est_render, scene, f * mesh.diameter, delta).map(|r| r.value))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseMetrics {
        add: add(mesh, pose_gt, pose_est),
        add_s: add_s(mesh, pose_gt, pose_est),
        mssd: mssd(mesh, pose_gt, pose_est),
        mspd: mspd(mesh, pose_gt, pose_est, k),
        vsd,
        diameter: mesh.diameter,
        symmetric: is_symmetric(mesh),
    })
}

/// Dataset-level summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub poses: Vec<PoseMetrics>,
    pub add_accuracy: f64,
    pub add_s_auc: f64,
    pub recall: ArRecall,
}

pub fn summarize(poses: Vec<PoseMetrics>, thresholds: &ArThresholds, auc_max: f64) -> Result<MetricReport> {
    let records: Vec<_> = poses.iter().map(PoseMetrics::add_record).collect();
    let errors: Vec<_> = records.iter().map(AddRecord::error).collect();
    let errs: Vec<_> = poses.iter().map(PoseMetrics::pose_errors).collect();
    Ok(MetricReport {
        add_accuracy: add_threshold_accuracy(&records, 0.1)?,
        add_s_auc: add_s_auc(&errors, auc_max)?,
        recall: ar_recall(&errs, thresholds)?,
        poses,
    })
}
