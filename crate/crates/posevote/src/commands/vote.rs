use std::path::{Path, PathBuf};

use posevote_core::selfsup::CorruptionModel;
use posevote_core::voting::{detect_keypoints, GridSpec};
use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::error::{CliError, Result};
use crate::formats::{read_camera, read_depth, read_json, read_radial, write_json, KeypointFile, LabelsFile};

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct VoteArgs {
    /// RKR1 radial maps, one channel per keypoint.
    #[arg(long)]
    pub radial: PathBuf,
    /// RKR1 depth map in meters.
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Label file naming the class and keypoint slot of each channel;
    /// without it channel `j` is slot `j` of class 1.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Voxel edge in meters.
    #[arg(long, default_value_t = 0.005)]
    pub voxel: f64,
    /// Inlier gate of the least-squares peak refinement, in voxels; 0 disables it.
    #[arg(long, default_value_t = 2.0)]
    pub refine_voxels: f64,
    /// Votes this many voxels or more in front of the observed surface are
    /// discarded; 0 keeps them.
    #[arg(long, default_value_t = 2.0)]
    pub carve_voxels: f64,
    /// Gaussian noise added to the radii before voting, meters.
    #[arg(long, default_value_t = 0.0)]
    pub corruption_sigma: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunCommand for VoteArgs {
    const NAME: &'static str = "vote";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, seed: u64) -> Result<()> {
        let k = read_camera(&self.intrinsics)?;
        let depth = read_depth(&self.depth)?;
        let radial = read_radial(&self.radial)?;
        let channels = match &self.labels {
            Some(p) => {
                let labels: LabelsFile = read_json(p)?;
                labels.channels
            }
            None => (0..radial.count).map(|j| (1, j)).collect(),
        };
        if channels.len() != radial.count {
            return Err(CliError::format(
                &self.radial,
                format!("{} channels but {} channel labels", radial.count, channels.len()),
            ));
        }
        let corruption = CorruptionModel {
            sigma: self.corruption_sigma,
            dropout: 0.0,
        };
        let radial = corruption.apply(&radial, seed)?;
        let spec = GridSpec {
            voxel_size: self.voxel,
            refine_voxels: self.refine_voxels,
            carve_voxels: self.carve_voxels,
            ..GridSpec::default()
        };
        let set = detect_keypoints(&radial, &depth, &k, &channels, &spec)?;
        write_json(&self.out.join("keypoints.json"), &KeypointFile::from(&set))
    }
}
