//! Self-supervision on unlabeled depth: pseudo-keypoints and pseudo-poses,
//! augmented pose sets, synthetic-over-real composites, the loss stack and
//! the epoch schedule.

use alloc::format;
use alloc::string::String;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{rotation_from_axis_angles, CameraIntrinsics, MeshModel, Pose};
use crate::pnp::{epnp, icp_refine, Correspondences, IcpConfig, IcpResult};
use crate::prelude::*;
use crate::synth::{render_depth, DepthMap, Mask, ObjectModel, RadialMapStack, RADIAL_BACKGROUND};
use crate::voting::{detect_keypoints, group_instances, GridSpec, GroupingConfig, Instance};
use crate::{Error, Result};

/// Mean smooth-L1 penalty: `0.5 e²` for `|e| < 1`, else `|e| − 0.5`.
pub fn smooth_l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::domain(format!("shape mismatch: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::domain("smooth L1 of empty tensors"));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let e = (p - g).abs();
            if e < 1.0 {
                0.5 * e * e
            } else {
                e - 0.5
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Probabilities below this are raised to it before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of `labels` under row-major `n × classes`
/// probability rows.
pub fn cross_entropy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if classes == 0 || labels.is_empty() || probs.len() != labels.len() * classes {
        return Err(Error::domain(format!(
            "{} probabilities do not form {} rows of {classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    for (row, &label) in probs.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::domain(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::domain(format!("probability row sums to {total}")));
        }
        sum -= row[label].max(PROBABILITY_FLOOR).ln();
    }
    Ok(sum / labels.len() as f64)
}

/// The five loss terms: radial, keypoint, classification, score and adapter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub radial: f64,
    pub keypoint: f64,
    pub class: f64,
    pub score: f64,
    pub adapter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub radial: f64,
    pub keypoint: f64,
    pub class: f64,
    pub score: f64,
    pub adapter: f64,
}

impl LossWeights {
    pub fn new(radial: f64, keypoint: f64, class: f64, score: f64, adapter: f64) -> Result<Self> {
        let w = Self {
            radial,
            keypoint,
            class,
            score,
            adapter,
        };
        if [radial, keypoint, class, score, adapter]
            .iter()
            .any(|x| !(*x >= 0.0) || !x.is_finite())
        {
            return Err(Error::domain(format!(
                "loss weights must be finite and non-negative: {w:?}"
            )));
        }
        Ok(w)
    }

    pub fn uniform(v: f64) -> Result<Self> {
        Self::new(v, v, v, v, v)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.radial * c.radial + w.keypoint * c.keypoint + w.class * c.class + w.score * c.score + w.adapter * c.adapter
}

/// First epoch with the second weight phase.
pub const WEIGHT_SWITCH_EPOCH: usize = 80;
/// First epoch of alternating real and synthetic training.
pub const ADAPTATION_START_EPOCH: usize = 120;
pub const TOTAL_EPOCHS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPhase {
    Syn,
    Real,
}

impl DataPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            DataPhase::Syn => "syn",
            DataPhase::Real => "real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPlan {
    pub weights: LossWeights,
    pub adapter_frozen: bool,
    pub phase: DataPhase,
}

/// Training plan for one epoch.
///
/// Classification and score terms weigh 0.6 (radial and keypoint 0.4) before
/// epoch 80, and the reverse afterwards. From epoch 120 the adapter term has
/// weight 1, epochs alternate real and synthetic starting with real, and the
/// adapter is trainable on the real epochs only.
pub fn schedule_controller(epoch: usize) -> EpochPlan {
    let (lo, hi) = if epoch < WEIGHT_SWITCH_EPOCH {
        (0.4, 0.6)
    } else {
        (0.6, 0.4)
    };
    let adapting = epoch >= ADAPTATION_START_EPOCH;
    let phase = if adapting && (epoch - ADAPTATION_START_EPOCH).is_multiple_of(2) {
        DataPhase::Real
    } else {
        DataPhase::Syn
    };
    EpochPlan {
        weights: LossWeights {
            radial: lo,
            keypoint: lo,
            class: hi,
            score: hi,
            adapter: if adapting { 1.0 } else { 0.0 },
        },
        adapter_frozen: phase == DataPhase::Syn,
        phase,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    /// Per-axis rotation bound, radians.
    pub rot_range: f64,
    /// Per-axis translation bound in units of `normalization_diameter`.
    pub trans_range: f64,
    pub cardinality: usize,
    /// Largest object diameter of the dataset, meters.
    pub normalization_diameter: f64,
}

impl AugmentationSpec {
    /// `±π/18` rotation, `±0.1` normalized translation, one pose fewer than the batch.
    pub fn for_batch(batch_size: usize, normalization_diameter: f64) -> Self {
        Self {
            rot_range: core::f64::consts::PI / 18.0,
            trans_range: 0.1,
            cardinality: batch_size.saturating_sub(1),
            normalization_diameter,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.rot_range >= 0.0
            && self.rot_range.is_finite()
            && self.trans_range >= 0.0
            && self.trans_range.is_finite()
            && self.normalization_diameter > 0.0
            && self.normalization_diameter.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid augmentation spec {self:?}")))
        }
    }
}

/// Perturbs `pseudo` in its model frame: each output is `pseudo ∘ Δ` with
/// uniformly drawn per-axis rotation angles and translation components.
pub fn augment_pose(pseudo: &Pose, spec: &AugmentationSpec, seed: u64) -> Result<Vec<Pose>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = spec.trans_range * spec.normalization_diameter;
    let mut draw = |bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(spec.cardinality);
    for _ in 0..spec.cardinality {
        let angles = Vector3::new(draw(spec.rot_range), draw(spec.rot_range), draw(spec.rot_range));
        let t = Vector3::new(draw(t_max), draw(t_max), draw(t_max));
        let delta = Pose {
            rotation: rotation_from_axis_angles(&angles),
            translation: t,
        };
        out.push(pseudo.compose(&delta));
    }
    Ok(out)
}

/// Z-buffers a render of `mesh` at `pose` into a real depth map. Pixels
/// where the render is strictly nearer (or the real scene has no depth) take
/// the rendered depth and mask id `id`.
pub fn composite_syn_over_real(
    real_depth: &DepthMap,
    real_mask: &Mask,
    mesh: &MeshModel,
    pose: &Pose,
    k: &CameraIntrinsics,
    id: u32,
) -> Result<(DepthMap, Mask)> {
    if (real_depth.width, real_depth.height) != (k.width, k.height)
        || (real_mask.width, real_mask.height) != (k.width, k.height)
    {
        return Err(Error::domain("real depth, mask and intrinsics disagree on raster size"));
    }
    let (render, _) = render_depth(mesh, pose, k)?;
    let mut depth = real_depth.clone();
    let mut mask = real_mask.clone();
    for ((d, m), &r) in depth.data.iter_mut().zip(mask.data.iter_mut()).zip(&render.data) {
        if r > 0.0 && (!(*d > 0.0) || r < *d) {
            *d = r;
            *m = id;
        }
    }
    Ok((depth, mask))
}

/// Stand-in for learned radial estimates: Gaussian noise on foreground radii
/// (clamped at zero) and random removal of foreground pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorruptionModel {
    /// Standard deviation of additive radius noise, meters.
    pub sigma: f64,
    /// Probability of turning a foreground pixel into background.
    pub dropout: f64,
}

impl CorruptionModel {
    pub fn apply(&self, stack: &RadialMapStack, seed: u64) -> Result<RadialMapStack> {
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::domain(format!("invalid corruption model {self:?}")));
        }
        let mut out = stack.clone();
        if self.sigma == 0.0 && self.dropout == 0.0 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.sigma).map_err(|e| Error::domain(format!("{e}")))?;
        for r in out.data.iter_mut().filter(|r| **r >= 0.0) {
            if self.dropout > 0.0 && rng.random::<f64>() < self.dropout {
                *r = RADIAL_BACKGROUND;
                continue;
            }
            if self.sigma > 0.0 {
                *r = (f64::from(*r) + noise.sample(&mut rng)).max(0.0) as f32;
            }
        }
        Ok(out)
    }
}

/// Marks depth pixels whose back-projection lies within `radius` of `center`.
pub fn crop_mask(depth: &DepthMap, k: &CameraIntrinsics, center: &Vector3<f64>, radius: f64, id: u32) -> Mask {
    let mut mask = Mask::empty(depth.width, depth.height);
    for (idx, (&d, m)) in depth.data.iter().zip(mask.data.iter_mut()).enumerate() {
        if d > 0.0 {
            let p = k.ray((idx % depth.width) as f64, (idx / depth.width) as f64) * f64::from(d);
            if (p - center).norm() <= radius {
                *m = id;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub grouping: GroupingConfig,
    pub corruption: CorruptionModel,
    pub batch_size: usize,
    /// Largest object diameter of the dataset, meters.
    pub normalization_diameter: f64,
    /// ICP applied to each pseudo-pose; `None` skips refinement.
    pub refine: Option<IcpConfig>,
    /// Whether to render the augmented composites.
    pub composites: bool,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(batch_size: usize, normalization_diameter: f64, seed: u64) -> Self {
        Self {
            grid: GridSpec::default(),
            grouping: GroupingConfig::default(),
            corruption: CorruptionModel::default(),
            batch_size,
            normalization_diameter,
            refine: Some(IcpConfig::default()),
            composites: true,
            seed,
        }
    }
}

/// Self-supervision targets for one detected instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class_id: u32,
    pub instance: Instance,
    /// Pose from ePnP on the pseudo-keypoints.
    pub epnp_pose: Pose,
    pub reprojection_rmse: f64,
    /// ICP refinement of `epnp_pose` against the scene depth.
    pub refined: Option<IcpResult>,
    /// The refined pose when refinement ran, else `epnp_pose`. Augmentation
    /// and composites start from it.
    pub pseudo_pose: Pose,
    /// The augmented set, excluding the pseudo-pose itself.
    pub augmented: Vec<Pose>,
    /// One composite per augmented pose followed by the pseudo-pose composite.
    pub composites: Vec<(DepthMap, Mask)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineOutput {
    pub labels: Vec<PseudoLabel>,
    /// Why nothing was produced, when `labels` is empty.
    pub diagnostic: Option<String>,
}

/// Radial maps → keypoint votes → instance grouping → ePnP → optional ICP →
/// augmented poses → composites. `channels[j]` labels radial map `j` with
/// its `(class_id, slot)`; the depth map is the only scene observation used.
pub fn pseudo_label_pipeline(
    depth: &DepthMap,
    radial: &RadialMapStack,
    channels: &[(u32, usize)],
    objects: &[ObjectModel],
    k: &CameraIntrinsics,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let estimated = config.corruption.apply(radial, config.seed)?;
    let kps = detect_keypoints(&estimated, depth, k, channels, &config.grid)?;
    let model_kps = |c: u32| objects.iter().find(|o| o.class_id == c).map(|o| o.keypoints.as_slice());
    let instances = group_instances(&kps, model_kps, &config.grouping);
    if instances.is_empty() {
        let diagnostic = format!("no instance found among {} keypoint candidates", kps.entries.len());
        return Ok(PipelineOutput {
            labels: Vec::new(),
            diagnostic: Some(diagnostic),
        });
    }
    let spec = AugmentationSpec::for_batch(config.batch_size, config.normalization_diameter);
    let mut labels = Vec::with_capacity(instances.len());
    let mut skipped = Vec::new();
    for (n, instance) in instances.into_iter().enumerate() {
        let Some(object) = objects.iter().find(|o| o.class_id == instance.class_id) else {
            continue;
        };
        let entries = &instance.keypoints.entries;
        let corr = Correspondences::new(
            entries.iter().map(|e| object.keypoints[e.slot]).collect(),
            entries.iter().map(|e| e.kp2d).collect(),
            entries.iter().map(|e| e.score.clamp(0.0, 1.0)).collect(),
        )?;
        let solution = match epnp(&corr, k) {
            Ok(s) => s,
            Err(Error::Degenerate(msg)) => {
                skipped.push(format!("class {}: {msg}", instance.class_id));
                continue;
            }
            Err(e) => return Err(e),
        };
        let refined = match &config.refine {
            Some(icp) => {
                let radius = object.mesh.bounding_radius() * 1.1;
                let mask = crop_mask(depth, k, &solution.pose.translation, radius, 1);
                Some(icp_refine(&solution.pose, &object.mesh, depth, &mask, 1, k, icp)?)
            }
            None => None,
        };
        let pseudo = refined.as_ref().map_or(solution.pose, |r| r.pose);
        let augmented = augment_pose(
            &pseudo,
            &spec,
            config.seed ^ (n as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        )?;
        let mut composites = Vec::new();
        if config.composites {
            let empty = Mask::empty(k.width, k.height);
            for pose in augmented.iter().chain(core::iter::once(&pseudo)) {
                composites.push(composite_syn_over_real(
                    depth,
                    &empty,
                    &object.mesh,
                    pose,
                    k,
                    instance.class_id,
                )?);
            }
        }
        labels.push(PseudoLabel {
            class_id: instance.class_id,
            instance,
            epnp_pose: solution.pose,
            reprojection_rmse: solution.rmse,
            refined,
            pseudo_pose: pseudo,
            augmented,
            composites,
        });
    }
    let diagnostic = if labels.is_empty() {
        Some(skipped.join("; "))
    } else {
        None
    };
    Ok(PipelineOutput { labels, diagnostic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angles_from_rotation, cube, cylinder, subdivide};
    use crate::metrics::add;
    use crate::synth::{generate_scene, PlacementBox};
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[0.0], &[2.0]).unwrap(), 1.5);
        assert!(smooth_l1(&[0.0], &[1.0, 2.0]).is_err());
        assert!(smooth_l1(&[], &[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 3, &[1]).unwrap(), 0.0);
        let uniform = [0.2; 5];
        assert!((cross_entropy(&uniform, 5, &[3]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let two = [0.5, 0.5, 0.25, 0.75];
        let want = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((cross_entropy(&two, 2, &[0, 0]).unwrap() - want).abs() < 1e-12);
        let zero = cross_entropy(&[1.0, 0.0], 2, &[1]).unwrap();
        assert!(zero.is_finite() && (zero + PROBABILITY_FLOOR.ln()).abs() < 1e-9);
        assert!(cross_entropy(&[0.5, 0.4], 2, &[0]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], 2, &[2]).is_err());
    }

    #[test]
    fn total_loss_cases() {
        let c = LossComponents {
            radial: 1.0,
            keypoint: 2.0,
            class: 3.0,
            score: 4.0,
            adapter: 5.0,
        };
        assert_eq!(total_loss(&c, &LossWeights::uniform(0.0).unwrap()), 0.0);
        assert_eq!(total_loss(&c, &LossWeights::uniform(1.0).unwrap()), 15.0);
        let ones = LossComponents {
            radial: 1.0,
            keypoint: 1.0,
            class: 1.0,
            score: 1.0,
            adapter: 0.0,
        };
        assert!((total_loss(&ones, &schedule_controller(0).weights) - 2.0).abs() < 1e-15);
        assert!(LossWeights::new(1.0, -0.1, 0.0, 0.0, 0.0).is_err());
    }

    /// `(radial, keypoint, class, score, adapter, frozen, phase)` written out per epoch range.
    fn golden_row(epoch: usize) -> (f64, f64, f64, f64, f64, bool, &'static str) {
        match epoch {
            0..=79 => (0.4, 0.4, 0.6, 0.6, 0.0, true, "syn"),
            80..=119 => (0.6, 0.6, 0.4, 0.4, 0.0, true, "syn"),
            e if e % 2 == 0 => (0.6, 0.6, 0.4, 0.4, 1.0, false, "real"),
            _ => (0.6, 0.6, 0.4, 0.4, 1.0, true, "syn"),
        }
    }

    #[test]
    fn schedule_matches_phase_table() {
        for epoch in 0..TOTAL_EPOCHS {
            let p = schedule_controller(epoch);
            let w = p.weights;
            let got = (
                w.radial,
                w.keypoint,
                w.class,
                w.score,
                w.adapter,
                p.adapter_frozen,
                p.phase.as_str(),
            );
            assert_eq!(got, golden_row(epoch), "epoch {epoch}");
        }
        let e10 = schedule_controller(10);
        assert_eq!(
            (e10.weights.class, e10.adapter_frozen, e10.phase),
            (0.6, true, DataPhase::Syn)
        );
        assert_eq!(schedule_controller(121).weights.adapter, 1.0);
        assert_ne!(schedule_controller(150).phase, schedule_controller(151).phase);
    }

    fn check_within_ranges(pseudo: &Pose, poses: &[Pose], spec: &AugmentationSpec) {
        for p in poses {
            let delta = pseudo.inverse().compose(p);
            let a = axis_angles_from_rotation(&delta.rotation);
            assert!(a.iter().all(|x| x.abs() <= spec.rot_range + 1e-9), "{a:?}");
            let t_max = spec.trans_range * spec.normalization_diameter;
            assert!(delta.translation.iter().all(|x| x.abs() <= t_max + 1e-12));
        }
    }

    #[test]
    fn augmentation_cases() {
        let pseudo = Pose::new(
            rotation_from_axis_angles(&Vector3::new(0.3, 0.1, -0.7)),
            Vector3::new(0.1, 0.0, 0.8),
        )
        .unwrap();
        let zero = AugmentationSpec {
            rot_range: 0.0,
            trans_range: 0.0,
            cardinality: 5,
            normalization_diameter: 0.1,
        };
        let copies = augment_pose(&pseudo, &zero, 1).unwrap();
        assert_eq!(copies.len(), 5);
        assert!(copies
            .iter()
            .all(|p| p.rotation_error(&pseudo) < 1e-12 && p.translation_error(&pseudo) < 1e-15));

        let spec = AugmentationSpec::for_batch(8, 0.12);
        assert_eq!(spec.cardinality, 7);
        assert_eq!(spec.rot_range, core::f64::consts::PI / 18.0);
        let a = augment_pose(&pseudo, &spec, 42).unwrap();
        assert_eq!(a, augment_pose(&pseudo, &spec, 42).unwrap());
        assert_ne!(a, augment_pose(&pseudo, &spec, 43).unwrap());
        check_within_ranges(&pseudo, &a, &spec);
        assert!(augment_pose(
            &pseudo,
            &AugmentationSpec {
                rot_range: -1.0,
                ..spec
            },
            0
        )
        .is_err());
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 64.0, 48.0, 128, 96).unwrap()
    }

    #[test]
    fn composite_cases() {
        let k = camera();
        let mesh = cube(0.1);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 0.8));
        let empty = DepthMap::empty(k.width, k.height);
        let no_mask = Mask::empty(k.width, k.height);
        let (render, _) = render_depth(&mesh, &pose, &k).unwrap();
        let (d, m) = composite_syn_over_real(&empty, &no_mask, &mesh, &pose, &k, 3).unwrap();
        assert_eq!(d, render);
        assert_eq!(m.count(3), render.foreground_count());

        let mut wall = DepthMap::empty(k.width, k.height);
        wall.data.iter_mut().for_each(|x| *x = 0.5);
        let wall_mask = Mask {
            width: k.width,
            height: k.height,
            data: vec![9; k.width * k.height],
        };
        let (d, m) = composite_syn_over_real(&wall, &wall_mask, &mesh, &pose, &k, 3).unwrap();
        assert_eq!((d, m), (wall.clone(), wall_mask.clone()));

        // a slanted real plane cutting through the object
        let mut slant = DepthMap::empty(k.width, k.height);
        for v in 0..k.height {
            for u in 0..k.width {
                slant.data[v * k.width + u] = 0.75 + 0.004 * (u as f32 - 64.0);
            }
        }
        let (d, m) = composite_syn_over_real(&slant, &wall_mask, &mesh, &pose, &k, 3).unwrap();
        let (mut real_px, mut syn_px) = (0, 0);
        for i in 0..d.data.len() {
            let (r, s) = (render.data[i], slant.data[i]);
            let want = if r > 0.0 && r < s { r } else { s };
            assert_eq!(d.data[i], want);
            assert_eq!(m.data[i], if r > 0.0 && r < s { 3 } else { 9 });
            if r > 0.0 {
                if r < s {
                    syn_px += 1;
                } else {
                    real_px += 1;
                }
            }
        }
        assert!(real_px > 0 && syn_px > 0);
    }

    #[test]
    fn corruption_keeps_background_and_clamps() {
        let mut stack = RadialMapStack::new(4, 1, 1);
        stack.data.copy_from_slice(&[RADIAL_BACKGROUND, 0.0, 0.001, 0.5]);
        let c = CorruptionModel {
            sigma: 0.01,
            dropout: 0.0,
        };
        let out = c.apply(&stack, 3).unwrap();
        assert_eq!(out.data[0], RADIAL_BACKGROUND);
        assert!(out.data[1..].iter().all(|&r| r >= 0.0));
        assert_ne!(out.data[3], 0.5);
        assert_eq!(out, c.apply(&stack, 3).unwrap());
        let all = CorruptionModel {
            sigma: 0.0,
            dropout: 1.0,
        }
        .apply(&stack, 0)
        .unwrap();
        assert!(all.data.iter().all(|&r| r == RADIAL_BACKGROUND));
        assert_eq!(CorruptionModel::default().apply(&stack, 0).unwrap(), stack);
        assert!(CorruptionModel {
            sigma: -1.0,
            dropout: 0.0
        }
        .apply(&stack, 0)
        .is_err());
    }

    fn single_object_scene(seed: u64) -> (ObjectModel, crate::synth::Scene) {
        let obj = ObjectModel::with_fps_keypoints(1, subdivide(&cube(0.07), 1), 8, 0).unwrap();
        let place = PlacementBox {
            min: Vector3::new(-0.08, -0.05, 0.5),
            max: Vector3::new(0.08, 0.05, 0.7),
            max_attempts: 500,
        };
        let scene = generate_scene(core::slice::from_ref(&obj), seed, &camera(), &place).unwrap();
        (obj, scene)
    }

    #[test]
    fn noise_free_pipeline_recovers_pose() {
        let k = camera();
        for seed in 0..3 {
            let (obj, scene) = single_object_scene(seed);
            let cfg = PipelineConfig::new(8, obj.mesh.diameter, seed);
            let out = pseudo_label_pipeline(
                &scene.depth,
                &scene.radial,
                &scene.labels.channels(),
                core::slice::from_ref(&obj),
                &k,
                &cfg,
            )
            .unwrap();
            assert_eq!(out.labels.len(), 1);
            let label = &out.labels[0];
            let gt = scene.labels.objects[0].pose;
            assert!(add(&obj.mesh, &gt, &label.epnp_pose) < 1e-3);
            assert!(add(&obj.mesh, &gt, &label.pseudo_pose) < 1e-3);
            assert_eq!(label.augmented.len(), 7);
            assert_eq!(label.composites.len(), 8);
            let spec = AugmentationSpec::for_batch(8, obj.mesh.diameter);
            check_within_ranges(&label.pseudo_pose, &label.augmented, &spec);
        }
    }

    #[test]
    fn pipeline_without_keypoints_reports_diagnostic() {
        let k = camera();
        let (obj, scene) = single_object_scene(0);
        let blank = RadialMapStack::new(k.width, k.height, scene.radial.count);
        let mut blank = blank;
        blank.data.iter_mut().for_each(|r| *r = RADIAL_BACKGROUND);
        let cfg = PipelineConfig::new(4, obj.mesh.diameter, 0);
        let out = pseudo_label_pipeline(
            &scene.depth,
            &blank,
            &scene.labels.channels(),
            core::slice::from_ref(&obj),
            &k,
            &cfg,
        )
        .unwrap();
        assert!(out.labels.is_empty());
        assert!(out.diagnostic.is_some());
    }

    #[test]
    fn crop_mask_selects_object_pixels() {
        let k = camera();
        let mesh = cylinder(0.03, 0.08, 16);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 0.6));
        let (d, m) = render_depth(&mesh, &pose, &k).unwrap();
        let crop = crop_mask(&d, &k, &pose.translation, mesh.bounding_radius() * 1.1, 1);
        assert_eq!(crop, m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_match_elementwise_definitions(values in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            let (p, g): (Vec<f64>, Vec<f64>) = values.iter().copied().unzip();
            let mut want = 0.0;
            for i in 0..p.len() {
                let e = (p[i] - g[i]).abs();
                want += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
            }
            want /= p.len() as f64;
            prop_assert!((smooth_l1(&p, &g).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn cross_entropy_matches_definition(logits in proptest::collection::vec(-4.0f64..4.0, 12), labels in proptest::collection::vec(0usize..4, 3)) {
            let mut probs = Vec::new();
            for row in logits.chunks(4) {
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                probs.extend(row.iter().map(|x| x.exp() / z));
            }
            let mut want = 0.0;
            for (r, &l) in labels.iter().enumerate() {
                want -= probs[r * 4 + l].ln();
            }
            want /= 3.0;
            prop_assert!((cross_entropy(&probs, 4, &labels).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn augmentation_respects_ranges(seed in 0u64..100_000, batch in 1usize..12) {
            let pseudo = Pose::new(rotation_from_axis_angles(&Vector3::new(1.0, -0.4, 2.0)), Vector3::new(0.0, 0.1, 0.9)).unwrap();
            let spec = AugmentationSpec::for_batch(batch, 0.15);
            let poses = augment_pose(&pseudo, &spec, seed).unwrap();
            prop_assert_eq!(poses.len(), batch - 1);
            check_within_ranges(&pseudo, &poses, &spec);
        }
    }
}
