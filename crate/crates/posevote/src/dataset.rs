//! Desk-scale synthetic datasets and their directory layout.
//!
//! ```text
//! <root>/intrinsics.json
//! <root>/models/models.json            class ids, keypoints, file names
//! <root>/models/obj_<class>.off
//! <root>/models/obj_<class>.symmetries.json
//! <root>/scenes/<index>/depth.rkr      1 channel, meters, 0 = no depth
//! <root>/scenes/<index>/mask.rkr       1 channel, instance ids
//! <root>/scenes/<index>/radial.rkr     one channel per (instance, keypoint)
//! <root>/scenes/<index>/labels.json
//! <root>/scenes/<index>/intrinsics.json
//! ```

use std::path::{Path, PathBuf};

use posevote_core::geometry::{blob, cube, cylinder, subdivide};
use posevote_core::nalgebra::Vector3;
use posevote_core::synth::{
    generate_scene, DepthMap, LabelSet, Mask, ObjectModel, PlacementBox, RadialMapStack, Scene,
};
use posevote_core::{CameraIntrinsics, Pose};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::formats::{
    read_depth, read_json, read_mask, read_radial, write_json, write_mesh, CameraDto, LabelsFile, ModelEntry,
    ModelTable, ObjectLabelDto, Raster,
};

/// 128×96 pinhole camera with 200 px focal length.
pub fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(200.0, 200.0, 64.0, 48.0, 128, 96).expect("valid intrinsics")
}

/// Objects land 0.5 to 0.8 m in front of the camera.
pub fn desk_placement() -> PlacementBox {
    PlacementBox {
        min: Vector3::new(-0.1, -0.06, 0.5),
        max: Vector3::new(0.1, 0.06, 0.8),
        max_attempts: 1000,
    }
}

/// Three desk objects of about 10 cm: a cube, an asymmetric blob and a cylinder.
pub fn desk_objects(keypoints: usize) -> posevote_core::Result<Vec<ObjectModel>> {
    Ok(vec![
        ObjectModel::with_fps_keypoints(1, subdivide(&cube(0.07), 1), keypoints, 1)?,
        ObjectModel::with_fps_keypoints(2, blob(0.04, 2, 0.3, 3), keypoints, 2)?,
        ObjectModel::with_fps_keypoints(3, cylinder(0.03, 0.08, 32), keypoints, 3)?,
    ])
}

pub fn max_diameter(objects: &[ObjectModel]) -> f64 {
    objects.iter().map(|o| o.mesh.diameter).fold(0.0, f64::max)
}

/// Independent per-scene seeds drawn from one run seed.
pub fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// `count` distinct objects chosen by `seed`, in class order.
pub fn pick_objects(objects: &[ObjectModel], seed: u64, count: usize) -> Vec<ObjectModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0b_1ec7);
    let mut idx = sample(&mut rng, objects.len(), count.clamp(1, objects.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| objects[i].clone()).collect()
}

/// A generated scene together with the objects placed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub seed: u64,
    pub objects: Vec<ObjectModel>,
    pub scene: Scene,
}

/// Generates `n` scenes in parallel; the result does not depend on the thread count.
pub fn generate_scenes(
    objects: &[ObjectModel],
    seed: u64,
    n: usize,
    per_scene: usize,
    k: &CameraIntrinsics,
    placement: &PlacementBox,
) -> posevote_core::Result<Vec<GeneratedScene>> {
    scene_seeds(seed, n)
        .into_par_iter()
        .map(|s| {
            let chosen = pick_objects(objects, s, per_scene);
            let scene = generate_scene(&chosen, s, k, placement)?;
            Ok(GeneratedScene {
                seed: s,
                objects: chosen,
                scene,
            })
        })
        .collect()
}

pub fn labels_to_file(labels: &LabelSet) -> LabelsFile {
    LabelsFile {
        objects: labels
            .objects
            .iter()
            .map(|o| ObjectLabelDto {
                instance_id: o.instance_id,
                class_id: o.class_id,
                pose: o.pose.to_row_major(),
                keypoints3d: o.keypoints3d.iter().map(|p| [p.x, p.y, p.z]).collect(),
                keypoints2d: o.keypoints2d.iter().map(|p| [p.x, p.y]).collect(),
            })
            .collect(),
        channels: labels.channels(),
    }
}

pub fn model_table(objects: &[ObjectModel]) -> ModelTable {
    ModelTable {
        models: objects
            .iter()
            .map(|o| ModelEntry {
                class_id: o.class_id,
                mesh: format!("obj_{:02}.off", o.class_id),
                symmetries: format!("obj_{:02}.symmetries.json", o.class_id),
                diameter: o.mesh.diameter,
                keypoints: o.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            })
            .collect(),
    }
}

pub fn models_dir(root: &Path) -> PathBuf {
    root.join("models")
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join("scenes").join(format!("{index:06}"))
}

pub fn write_models(dir: &Path, objects: &[ObjectModel]) -> Result<()> {
    let table = model_table(objects);
    for (o, e) in objects.iter().zip(&table.models) {
        write_mesh(&o.mesh, &dir.join(&e.mesh), &dir.join(&e.symmetries))?;
    }
    write_json(&dir.join("models.json"), &table)
}

pub fn write_scene(dir: &Path, scene: &Scene, k: &CameraIntrinsics) -> Result<()> {
    Raster::from(&scene.depth).write(&dir.join("depth.rkr"))?;
    Raster::from(&scene.labels.mask).write(&dir.join("mask.rkr"))?;
    Raster::from(&scene.radial).write(&dir.join("radial.rkr"))?;
    write_json(&dir.join("labels.json"), &labels_to_file(&scene.labels))?;
    write_json(&dir.join("intrinsics.json"), &CameraDto::from(k))
}

/// Everything stored for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredScene {
    pub depth: DepthMap,
    pub mask: Mask,
    pub radial: RadialMapStack,
    pub labels: LabelsFile,
    pub camera: CameraIntrinsics,
}

pub fn read_scene(dir: &Path) -> Result<StoredScene> {
    let camera: CameraDto = read_json(&dir.join("intrinsics.json"))?;
    Ok(StoredScene {
        depth: read_depth(&dir.join("depth.rkr"))?,
        mask: read_mask(&dir.join("mask.rkr"))?,
        radial: read_radial(&dir.join("radial.rkr"))?,
        labels: read_json(&dir.join("labels.json"))?,
        camera: camera.to_intrinsics()?,
    })
}

/// Ground-truth poses of a label file, by class.
pub fn label_poses(labels: &LabelsFile) -> posevote_core::Result<Vec<(u32, Pose)>> {
    labels
        .objects
        .iter()
        .map(|o| Ok((o.class_id, Pose::from_row_major(&o.pose)?)))
        .collect()
}
