use std::path::{Path, PathBuf};

use posevote_core::metrics::{
    accuracy_curve, add_s_auc, add_threshold_accuracy, ar_recall, evaluate_pose, is_symmetric, AddRecord, ArThresholds,
    PoseMetrics,
};
use posevote_core::{MeshModel, Pose};
use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::error::{CliError, Result};
use crate::formats::{read_camera, read_json, write_csv, write_json, ModelTable, PoseFile};

const METRIC_NAMES: [&str; 7] = ["add", "adds", "auc", "mssd", "mspd", "vsd", "ar"];
const CURVE_STEPS: usize = 100;

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Ground-truth pose files (`poses.json` or scene `labels.json`).
    #[arg(long, required = true, num_args = 1..)]
    pub gt: Vec<PathBuf>,
    /// Estimated pose files, paired with `--gt` by position.
    #[arg(long, required = true, num_args = 1..)]
    pub est: Vec<PathBuf>,
    /// Model table; meshes are read from its directory.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Comma-separated subset of add, adds, auc, mssd, mspd, vsd, ar.
    #[arg(long, default_value = "add,adds,auc,mssd,mspd,vsd,ar")]
    pub metrics: String,
    /// Largest ADD(-S) threshold of the AUC curve, meters.
    #[arg(long, default_value_t = 0.1)]
    pub auc_max: f64,
    /// VSD visibility tolerance, meters.
    #[arg(long, default_value_t = 0.015)]
    pub vsd_delta: f64,
    /// ADD threshold as a fraction of the object diameter.
    #[arg(long, default_value_t = 0.1)]
    pub add_fraction: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PoseRow {
    file: usize,
    class_id: u32,
    found: bool,
    add: f64,
    add_s: f64,
    mssd: f64,
    mspd: f64,
    vsd_mean: f64,
    diameter: f64,
    symmetric: bool,
}

/// Metrics of an object without a matching estimate: every error is infinite
/// and VSD is 1 at every tolerance.
fn missing(mesh: &MeshModel, taus: usize) -> PoseMetrics {
    PoseMetrics {
        add: f64::INFINITY,
        add_s: f64::INFINITY,
        mssd: f64::INFINITY,
        mspd: f64::INFINITY,
        vsd: vec![1.0; taus],
        diameter: mesh.diameter,
        symmetric: is_symmetric(mesh),
    }
}

fn parse_metrics(list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list
        .split(',')
        .map(|s| s.trim().to_ascii_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(CliError::Usage("--metrics is empty".into()));
    }
    if let Some(bad) = names.iter().find(|n| !METRIC_NAMES.contains(&n.as_str())) {
        return Err(CliError::Usage(format!(
            "unknown metric {bad:?}; expected one of {}",
            METRIC_NAMES.join(", ")
        )));
    }
    Ok(names)
}

/// Greedy class matching: each ground-truth object takes the first unused
/// estimate of its class.
fn match_poses(gt: &[(u32, Pose)], est: &[(u32, Pose)]) -> Vec<Option<Pose>> {
    let mut used = vec![false; est.len()];
    gt.iter()
        .map(|(class, _)| {
            let i = (0..est.len()).find(|&i| !used[i] && est[i].0 == *class)?;
            used[i] = true;
            Some(est[i].1)
        })
        .collect()
}

fn poses(path: &Path) -> Result<Vec<(u32, Pose)>> {
    let file: PoseFile = read_json(path)?;
    file.poses
        .iter()
        .map(|p| {
            Pose::from_row_major(&p.pose)
                .map(|pose| (p.class_id, pose))
                .map_err(|e| CliError::format(path, e.to_string()))
        })
        .collect()
}

impl RunCommand for EvalArgs {
    const NAME: &'static str = "eval";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, _seed: u64) -> Result<()> {
        let selected = parse_metrics(&self.metrics)?;
        if self.gt.len() != self.est.len() {
            return Err(CliError::Usage(format!(
                "{} --gt files but {} --est files",
                self.gt.len(),
                self.est.len()
            )));
        }
        let k = read_camera(&self.intrinsics)?;
        let table: ModelTable = read_json(&self.models)?;
        let dir = self.models.parent().unwrap_or(Path::new("."));
        let mut meshes: Vec<(u32, MeshModel)> = Vec::new();
        let thresholds = ArThresholds::standard(k.width);

        let mut metrics = Vec::new();
        let mut rows = Vec::new();
        for (file, (gt_path, est_path)) in self.gt.iter().zip(&self.est).enumerate() {
            let gt = poses(gt_path)?;
            let est = poses(est_path)?;
            for ((class_id, gt_pose), found) in gt.iter().zip(match_poses(&gt, &est)) {
                if !meshes.iter().any(|(c, _)| c == class_id) {
                    meshes.push((*class_id, table.mesh(dir, *class_id)?));
                }
                let mesh = &meshes.iter().find(|(c, _)| c == class_id).expect("loaded above").1;
                let m = match found {
                    Some(est_pose) => evaluate_pose(mesh, gt_pose, &est_pose, &k, None, &thresholds, self.vsd_delta)?,
                    None => missing(mesh, thresholds.vsd_tau_fractions.len()),
                };
                rows.push(PoseRow {
                    file,
                    class_id: *class_id,
                    found: found.is_some(),
                    add: m.add,
                    add_s: m.add_s,
                    mssd: m.mssd,
                    mspd: m.mspd,
                    vsd_mean: m.vsd.iter().sum::<f64>() / m.vsd.len().max(1) as f64,
                    diameter: m.diameter,
                    symmetric: m.symmetric,
                });
                metrics.push(m);
            }
        }
        if metrics.is_empty() {
            return Err(CliError::format(&self.gt[0], "no ground-truth poses to evaluate"));
        }

        let records: Vec<AddRecord> = metrics.iter().map(PoseMetrics::add_record).collect();
        let errors: Vec<f64> = records.iter().map(AddRecord::error).collect();
        let recall = ar_recall(
            &metrics.iter().map(PoseMetrics::pose_errors).collect::<Vec<_>>(),
            &thresholds,
        )?;
        let mean = |f: fn(&PoseMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / metrics.len() as f64;

        let mut summary = serde_json::Map::new();
        summary.insert("poses".into(), metrics.len().into());
        summary.insert("found".into(), rows.iter().filter(|r| r.found).count().into());
        for name in &selected {
            let value: serde_json::Value = match name.as_str() {
                "add" => {
                    let plain: Vec<AddRecord> = records.iter().map(|r| AddRecord { symmetric: false, ..*r }).collect();
                    add_threshold_accuracy(&plain, self.add_fraction)?.into()
                }
                "adds" => add_threshold_accuracy(&records, self.add_fraction)?.into(),
                "auc" => add_s_auc(&errors, self.auc_max)?.into(),
                "mssd" => recall.ar_mssd.into(),
                "mspd" => recall.ar_mspd.into(),
                "vsd" => recall.ar_vsd.into(),
                "ar" => recall.ar.into(),
                _ => unreachable!("names validated"),
            };
            summary.insert(name.clone(), value);
        }
        summary.insert(
            "mean_vsd".into(),
            mean(|m| m.vsd.iter().sum::<f64>() / m.vsd.len().max(1) as f64).into(),
        );

        write_csv(
            &self.out.join("per_pose.csv"),
            &[
                "file",
                "class_id",
                "found",
                "add",
                "add_s",
                "mssd",
                "mspd",
                "vsd_mean",
                "diameter",
                "symmetric",
            ],
            &rows,
        )?;
        write_json(&self.out.join("summary.json"), &summary)?;
        write_csv(
            &self.out.join("auc.csv"),
            &["threshold", "accuracy"],
            &accuracy_curve(&errors, self.auc_max, CURVE_STEPS),
        )
    }
}
