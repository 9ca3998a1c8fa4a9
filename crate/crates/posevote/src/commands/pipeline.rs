use std::path::{Path, PathBuf};

use posevote_core::metrics::add_or_add_s;
use posevote_core::pnp::IcpConfig;
use posevote_core::selfsup::{pseudo_label_pipeline, CorruptionModel, PipelineConfig, PipelineOutput};
use posevote_core::voting::GridSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::dataset::{desk_camera, desk_objects, desk_placement, generate_scenes, max_diameter, GeneratedScene};
use crate::error::{CliError, Result};
use crate::formats::{write_csv, write_json, PoseMatrix, Raster};

/// Pass threshold on ADD (ADD-S for symmetric objects) as a fraction of the
/// object diameter.
const ADD_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct PipelineArgs {
    /// Single-object scenes to generate and pseudo-label.
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub keypoints: usize,
    /// Gaussian noise on the radial maps, meters.
    #[arg(long, default_value_t = 0.0)]
    pub corruption_sigma: f64,
    /// Probability that a radial-map pixel is dropped.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Voxel edge in meters.
    #[arg(long, default_value_t = 0.005)]
    pub voxel: f64,
    /// Skip ICP; the pseudo-pose is then the ePnP pose.
    #[arg(long)]
    pub no_refine: bool,
    /// Write each composite as `scenes/<i>/composite_<j>.rkr` (depth, mask).
    #[arg(long)]
    pub write_composites: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct LabelDto {
    class_id: u32,
    keypoints: usize,
    epnp_pose: PoseMatrix,
    reprojection_rmse: f64,
    pseudo_pose: PoseMatrix,
    icp_iterations: Option<usize>,
    add_epnp: Option<f64>,
    add_pseudo: Option<f64>,
    augmented: Vec<PoseMatrix>,
}

#[derive(Serialize)]
struct SceneDto {
    seed: u64,
    gt: Vec<(u32, PoseMatrix)>,
    labels: Vec<LabelDto>,
    diagnostic: Option<String>,
}

#[derive(Serialize)]
struct Row {
    scene: usize,
    class_id: u32,
    found: bool,
    diameter: f64,
    add_epnp: f64,
    add_pseudo: f64,
    pass_epnp: bool,
    pass_pseudo: bool,
}

#[derive(Serialize)]
struct Summary {
    scenes: usize,
    found: usize,
    add_fraction: f64,
    pass_rate_epnp: f64,
    pass_rate_pseudo: f64,
}

impl PipelineArgs {
    fn config(&self, normalization: f64, seed: u64) -> PipelineConfig {
        PipelineConfig {
            grid: GridSpec {
                voxel_size: self.voxel,
                ..GridSpec::default()
            },
            corruption: CorruptionModel {
                sigma: self.corruption_sigma,
                dropout: self.dropout,
            },
            refine: (!self.no_refine).then(IcpConfig::default),
            composites: self.write_composites,
            ..PipelineConfig::new(self.batch_size, normalization, seed)
        }
    }
}

fn scene_report(g: &GeneratedScene, out: &PipelineOutput) -> (SceneDto, Vec<Row>) {
    let mut rows = Vec::new();
    let mut labels: Vec<LabelDto> = out
        .labels
        .iter()
        .map(|l| LabelDto {
            class_id: l.class_id,
            keypoints: l.instance.keypoints.entries.len(),
            epnp_pose: l.epnp_pose.to_row_major(),
            reprojection_rmse: l.reprojection_rmse,
            pseudo_pose: l.pseudo_pose.to_row_major(),
            icp_iterations: l.refined.as_ref().map(|r| r.iterations),
            add_epnp: None,
            add_pseudo: None,
            augmented: l.augmented.iter().map(|p| p.to_row_major()).collect(),
        })
        .collect();
    for o in &g.scene.labels.objects {
        let mesh = &g
            .objects
            .iter()
            .find(|m| m.class_id == o.class_id)
            .expect("scene objects are known")
            .mesh;
        let found = out.labels.iter().position(|l| l.class_id == o.class_id);
        let (add_epnp, add_pseudo) = match found {
            Some(i) => {
                let l = &out.labels[i];
                let pair = (
                    add_or_add_s(mesh, &o.pose, &l.epnp_pose),
                    add_or_add_s(mesh, &o.pose, &l.pseudo_pose),
                );
                labels[i].add_epnp = Some(pair.0);
                labels[i].add_pseudo = Some(pair.1);
                pair
            }
            None => (f64::INFINITY, f64::INFINITY),
        };
        let limit = ADD_FRACTION * mesh.diameter;
        rows.push(Row {
            scene: 0,
            class_id: o.class_id,
            found: found.is_some(),
            diameter: mesh.diameter,
            add_epnp,
            add_pseudo,
            pass_epnp: add_epnp < limit,
            pass_pseudo: add_pseudo < limit,
        });
    }
    let dto = SceneDto {
        seed: g.seed,
        gt: g
            .scene
            .labels
            .objects
            .iter()
            .map(|o| (o.class_id, o.pose.to_row_major()))
            .collect(),
        labels,
        diagnostic: out.diagnostic.clone(),
    };
    (dto, rows)
}

impl RunCommand for PipelineArgs {
    const NAME: &'static str = "pipeline";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, seed: u64) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CliError::Usage("--batch-size must be positive".into()));
        }
        let objects = desk_objects(self.keypoints)?;
        let k = desk_camera();
        let scenes = generate_scenes(&objects, seed, self.scenes, 1, &k, &desk_placement())?;
        let normalization = max_diameter(&objects);
        let outputs = scenes
            .par_iter()
            .map(|g| {
                let channels = g.scene.labels.channels();
                let config = self.config(normalization, g.seed);
                pseudo_label_pipeline(&g.scene.depth, &g.scene.radial, &channels, &g.objects, &k, &config)
            })
            .collect::<posevote_core::Result<Vec<_>>>()?;

        let mut all_rows = Vec::new();
        for (i, (g, out)) in scenes.iter().zip(&outputs).enumerate() {
            let (dto, rows) = scene_report(g, out);
            write_json(&self.out.join("scenes").join(format!("{i:06}.json")), &dto)?;
            all_rows.extend(rows.into_iter().map(|r| Row { scene: i, ..r }));
            if self.write_composites {
                let composites = out.labels.iter().flat_map(|l| &l.composites);
                for (j, (depth, mask)) in composites.enumerate() {
                    let mut data = Raster::from(depth).data;
                    data.extend(Raster::from(mask).data);
                    let raster = Raster::new(depth.width, depth.height, 2, data).expect("two planes of equal size");
                    raster.write(
                        &self
                            .out
                            .join("scenes")
                            .join(format!("{i:06}"))
                            .join(format!("composite_{j}.rkr")),
                    )?;
                }
            }
        }

        let total = all_rows.len().max(1) as f64;
        let summary = Summary {
            scenes: scenes.len(),
            found: all_rows.iter().filter(|r| r.found).count(),
            add_fraction: ADD_FRACTION,
            pass_rate_epnp: all_rows.iter().filter(|r| r.pass_epnp).count() as f64 / total,
            pass_rate_pseudo: all_rows.iter().filter(|r| r.pass_pseudo).count() as f64 / total,
        };
        write_csv(
            &self.out.join("summary.csv"),
            &[
                "scene",
                "class_id",
                "found",
                "diameter",
                "add_epnp",
                "add_pseudo",
                "pass_epnp",
                "pass_pseudo",
            ],
            &all_rows,
        )?;
        write_json(&self.out.join("summary.json"), &summary)
    }
}
