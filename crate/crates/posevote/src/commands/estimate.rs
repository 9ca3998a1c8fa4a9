use std::path::{Path, PathBuf};

use posevote_core::pnp::{epnp, Correspondences};
use posevote_core::voting::{group_instances, GroupingConfig};
use posevote_core::Error;
use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::error::Result;
use crate::formats::{read_camera, read_json, write_json, KeypointFile, ModelTable, PoseEntry, PoseFile};

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// Keypoint file written by `vote`.
    #[arg(long)]
    pub keypoints: PathBuf,
    /// Model table (`models.json`) with the CAD keypoints of each class.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_per_slot: usize,
    #[arg(long, default_value_t = 4)]
    pub min_keypoints: usize,
    /// Reject instances whose mean pairwise distance mismatch exceeds this, meters.
    #[arg(long)]
    pub max_discrepancy: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunCommand for EstimateArgs {
    const NAME: &'static str = "estimate";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, _seed: u64) -> Result<()> {
        let k = read_camera(&self.intrinsics)?;
        let kps: KeypointFile = read_json(&self.keypoints)?;
        let table: ModelTable = read_json(&self.models)?;
        let model_kps: Vec<(u32, Vec<_>)> = table
            .models
            .iter()
            .map(|m| (m.class_id, table.keypoints(m.class_id).unwrap_or_default()))
            .collect();
        let config = GroupingConfig {
            max_per_slot: self.max_per_slot,
            min_keypoints: self.min_keypoints,
            max_discrepancy: self.max_discrepancy.unwrap_or(f64::INFINITY),
        };
        let lookup = |c: u32| model_kps.iter().find(|(id, _)| *id == c).map(|(_, v)| v.as_slice());
        let instances = group_instances(&kps.to_set(), lookup, &config);
        let mut poses = Vec::new();
        for inst in &instances {
            let model = lookup(inst.class_id).expect("grouped classes have models");
            let entries = &inst.keypoints.entries;
            let corr = Correspondences::new(
                entries.iter().map(|e| model[e.slot]).collect(),
                entries.iter().map(|e| e.kp2d).collect(),
                entries.iter().map(|e| e.score.clamp(0.0, 1.0)).collect(),
            )?;
            match epnp(&corr, &k) {
                Ok(sol) => poses.push(PoseEntry {
                    class_id: inst.class_id,
                    pose: sol.pose.to_row_major(),
                    rmse: Some(sol.rmse),
                    discrepancy: Some(inst.discrepancy),
                }),
                Err(Error::Degenerate(msg)) => eprintln!("skipping class {}: {msg}", inst.class_id),
                Err(e) => return Err(e.into()),
            }
        }
        write_json(&self.out.join("poses.json"), &PoseFile { poses })
    }
}
