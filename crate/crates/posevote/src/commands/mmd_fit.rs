use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use posevote_core::rkhs::{
    fit_kernel_weights, kl_divergence_gaussianized, mmd, random_lift, truncate_to_common, wasserstein_1d_sliced,
    Estimator, FeatureBatch, FitConfig, Kernel, KernelWeights, MmdReport, Objective, Scaling, DEFAULT_PROJECTIONS,
};
use serde::{Deserialize, Serialize};

use crate::cli::RunCommand;
use crate::error::{CliError, Result};
use crate::formats::{write_csv, write_json, FeatureFile, Raster, RKR_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelArg {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    /// Closed-form adapter estimator with trainable weights.
    Paper,
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingArg {
    InverseMSquared,
    InverseM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveArg {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct MmdFitArgs {
    /// Source features: an RKR1 raster (pixels are samples, channels are
    /// dimensions) or a JSON `{"rows": [[...], ...]}` file.
    #[arg(long)]
    pub source: PathBuf,
    /// Target features, same formats as `--source`.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
    pub kernel: KernelArg,
    /// Bandwidth weight `w` of `exp(-w‖x−y‖²)`.
    #[arg(long, default_value_t = 1.0)]
    pub rbf_weight: f64,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Paper)]
    pub estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = ScalingArg::InverseMSquared)]
    pub scaling: ScalingArg,
    /// Gradient steps on the linear kernel weights; 0 only measures.
    #[arg(long, default_value_t = 0)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Minimize)]
    pub objective: ObjectiveArg,
    /// Split both sets into consecutive batches of this many samples for
    /// fitting; by default each set is one batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Random Gaussian lift of the features to `lift × d` dimensions.
    #[arg(long, default_value_t = 1)]
    pub lift: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Loads features, telling RKR1 from JSON by the magic bytes.
pub fn read_features(path: &Path) -> Result<FeatureBatch> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let batch = if bytes.starts_with(RKR_MAGIC) {
        let r = Raster::from_bytes(&bytes).map_err(|m| CliError::format(path, m))?;
        let n = r.width * r.height;
        let data = (0..n)
            .flat_map(|i| (0..r.channels).map(move |c| (i, c)))
            .map(|(i, c)| f64::from(r.data[c * n + i]))
            .collect();
        FeatureBatch::new(n, r.channels, data)
    } else {
        let file: FeatureFile = serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))?;
        FeatureBatch::from_rows(&file.rows)
    };
    batch.map_err(|e| CliError::format(path, e.to_string()))
}

fn split(batch: &FeatureBatch, size: usize) -> Result<Vec<FeatureBatch>> {
    let rows: Vec<Vec<f64>> = batch.rows().map(<[f64]>::to_vec).collect();
    rows.chunks(size)
        .filter(|c| c.len() == size)
        .map(|c| FeatureBatch::from_rows(c).map_err(CliError::from))
        .collect()
}

#[derive(Serialize)]
struct ReportDto {
    value: f64,
    squared: f64,
    clamped: bool,
}

impl From<&MmdReport> for ReportDto {
    fn from(r: &MmdReport) -> Self {
        Self {
            value: r.value,
            squared: r.squared,
            clamped: r.clamped,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    samples: usize,
    dim: usize,
    truncated: bool,
    initial: ReportDto,
    #[serde(rename = "final")]
    fitted: ReportDto,
    /// `None` when a covariance is singular.
    kl: Option<f64>,
    sliced_w1: f64,
}

#[derive(Serialize)]
struct WeightsDto {
    wx: Vec<Vec<f64>>,
    wy: Vec<Vec<f64>>,
}

impl From<&KernelWeights> for WeightsDto {
    fn from(w: &KernelWeights) -> Self {
        let rows =
            |m: &posevote_core::nalgebra::DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        Self {
            wx: rows(&w.wx),
            wy: rows(&w.wy),
        }
    }
}

impl RunCommand for MmdFitArgs {
    const NAME: &'static str = "mmd-fit";

    fn out(&self) -> &Path {
        &self.out
    }

    fn run(&self, seed: u64) -> Result<()> {
        if self.epochs > 0 && self.kernel == KernelArg::Rbf {
            return Err(CliError::Usage("kernel fitting needs --kernel linear".into()));
        }
        if self.lift == 0 {
            return Err(CliError::Usage("--lift must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(CliError::Usage("--batch-size must be positive".into()));
        }
        let mut source = read_features(&self.source)?;
        let mut target = read_features(&self.target)?;
        if source.dim() != target.dim() {
            return Err(CliError::format(
                &self.target,
                format!("dimension {} differs from the source's {}", target.dim(), source.dim()),
            ));
        }
        if self.lift > 1 {
            source = random_lift(&source, self.lift, seed);
            target = random_lift(&target, self.lift, seed);
        }
        let (source, target, truncated) = truncate_to_common(&source, &target);
        let d = source.dim();
        let estimator = match self.estimator {
            EstimatorArg::Paper => Estimator::Paper,
            EstimatorArg::Biased => Estimator::Biased,
            EstimatorArg::Unbiased => Estimator::Unbiased,
        };
        let scaling = match self.scaling {
            ScalingArg::InverseMSquared => Scaling::InverseMSquared,
            ScalingArg::InverseM => Scaling::InverseM,
        };
        let initial_kernel = match self.kernel {
            KernelArg::Linear => Kernel::inner_product(d),
            KernelArg::Rbf => Kernel::Rbf(self.rbf_weight),
        };
        let initial = mmd(estimator, &source, &target, &initial_kernel, scaling)?;

        let (weights, trace) = if self.kernel == KernelArg::Linear {
            let pairs = match self.batch_size {
                Some(b) => split(&source, b)?
                    .into_iter()
                    .zip(split(&target, b)?)
                    .collect::<Vec<_>>(),
                None => vec![(source.clone(), target.clone())],
            };
            if pairs.is_empty() {
                return Err(CliError::Usage(format!(
                    "--batch-size exceeds the {} common samples",
                    source.samples()
                )));
            }
            let config = FitConfig {
                lr: self.lr,
                epochs: self.epochs,
                objective: match self.objective {
                    ObjectiveArg::Minimize => Objective::Minimize,
                    ObjectiveArg::Maximize => Objective::Maximize,
                },
                scaling,
            };
            let fit = fit_kernel_weights(&pairs, &config)?;
            (Some(fit.weights), fit.trace)
        } else {
            (None, Vec::new())
        };
        let fitted = match &weights {
            Some(w) => mmd(estimator, &source, &target, &Kernel::Linear(w.clone()), scaling)?,
            None => initial,
        };

        let summary = Summary {
            samples: source.samples(),
            dim: d,
            truncated,
            initial: (&initial).into(),
            fitted: (&fitted).into(),
            kl: kl_divergence_gaussianized(&source, &target).ok(),
            sliced_w1: wasserstein_1d_sliced(&source, &target, DEFAULT_PROJECTIONS, seed)?,
        };
        let rows: Vec<(usize, f64)> = trace.into_iter().enumerate().collect();
        write_csv(&self.out.join("trace.csv"), &["epoch", "value"], &rows)?;
        if let Some(w) = &weights {
            write_json(&self.out.join("weights.json"), &WeightsDto::from(w))?;
        }
        write_json(&self.out.join("summary.json"), &summary)
    }
}
