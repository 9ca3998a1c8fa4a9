use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::dataset::{
    desk_camera, desk_objects, desk_placement, generate_scenes, models_dir, scene_dir, write_models, write_scene,
};
use crate::error::Result;
use crate::formats::{write_json, CameraDto};

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Farthest-point keypoints per object.
    #[arg(long, default_value_t = 8)]
    pub keypoints: usize,
    #[arg(long, default_value_t = 1)]
    pub objects_per_scene: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunCommand for GenDataArgs {
    const NAME: &'static str = "gen-data";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, seed: u64) -> Result<()> {
        let objects = desk_objects(self.keypoints)?;
        let k = desk_camera();
        let scenes = generate_scenes(
            &objects,
            seed,
            self.scenes,
            self.objects_per_scene,
            &k,
            &desk_placement(),
        )?;
        write_models(&models_dir(&self.out), &objects)?;
        write_json(&self.out.join("intrinsics.json"), &CameraDto::from(&k))?;
        for (i, s) in scenes.iter().enumerate() {
            write_scene(&scene_dir(&self.out, i), &s.scene, &k)?;
        }
        Ok(())
    }
}
