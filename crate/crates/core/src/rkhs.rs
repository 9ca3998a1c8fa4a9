//! Trainable kernels and kernel mean discrepancies between feature batches.
//!
//! The adapter estimator ([`mmd_paper`]) sums each of the three Gram blocks
//! with its diagonal removed and adds the cross block once:
//!
//! ```text
//! P = s · [ (ΣΣ k(sr,sr) − Σ k(srᵢ,srᵢ)) − (ΣΣ k(sr,r) − Σ k(srᵢ,rᵢ)) + (ΣΣ k(r,r) − Σ k(rᵢ,rᵢ)) ]
//! MMD = sqrt(max(P, 0))
//! ```
//!
//! with `s = 1/m²` by default. This is not the textbook estimator, which
//! subtracts the cross block twice; [`mmd_biased`] and [`mmd_unbiased`] are
//! provided for comparison and the difference is reported, never corrected.

use alloc::format;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::prelude::*;
use crate::{Error, Result};

/// `m` samples of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(m: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::domain(format!(
                "a feature batch needs at least 2 samples, got {m}"
            )));
        }
        if d == 0 {
            return Err(Error::domain("feature dimension must be positive"));
        }
        if data.len() != m * d {
            return Err(Error::domain(format!(
                "expected {} values for {m}×{d}, got {}",
                m * d,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::domain("features must be finite"));
        }
        Ok(Self { m, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::domain("ragged feature rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn samples(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies every entry by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            m: self.m,
            d: self.d,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    fn vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.row(i))
    }

    fn prefix(&self, m: usize) -> Self {
        Self {
            m,
            d: self.d,
            data: self.data[..m * self.d].to_vec(),
        }
    }
}

/// Cuts two batches to their common sample count. The flag reports whether
/// anything was dropped.
pub fn truncate_to_common(a: &FeatureBatch, b: &FeatureBatch) -> (FeatureBatch, FeatureBatch, bool) {
    let m = a.m.min(b.m);
    (a.prefix(m), b.prefix(m), a.m != b.m)
}

/// Fixed Gaussian lift `d → factor·d`, entries `N(0, 1/d)`, standing in for
/// the learned encoder that raises feature dimensionality.
pub fn random_lift(batch: &FeatureBatch, factor: usize, seed: u64) -> FeatureBatch {
    let d = batch.d;
    let out_d = d * factor.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let lift = DMatrix::<f64>::from_fn(out_d, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let mut data = Vec::with_capacity(batch.m * out_d);
    for i in 0..batch.m {
        data.extend((&lift * batch.vector(i)).iter());
    }
    FeatureBatch {
        m: batch.m,
        d: out_d,
        data,
    }
}

/// Weight matrices applied to each kernel argument before the inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub wx: DMatrix<f64>,
    pub wy: DMatrix<f64>,
}

impl KernelWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            wx: DMatrix::identity(d, d),
            wy: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.wx.ncols()
    }

    fn check(&self, d: usize) -> Result<()> {
        let ok = self.wx.ncols() == d && self.wy.ncols() == d && self.wx.nrows() == self.wy.nrows();
        if !ok {
            return Err(Error::domain(format!(
                "weights {}×{} / {}×{} do not fit dimension {d}",
                self.wx.nrows(),
                self.wx.ncols(),
                self.wy.nrows(),
                self.wy.ncols()
            )));
        }
        if !self.wx.iter().chain(self.wy.iter()).all(|x| x.is_finite()) {
            return Err(Error::domain("kernel weights must be finite"));
        }
        Ok(())
    }
}

/// `⟨W_X x, W_Y y⟩`.
pub fn kernel_linear_trainable(x: &[f64], y: &[f64], w: &KernelWeights) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "vector dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    w.check(x.len())?;
    let a = &w.wx * DVector::from_column_slice(x);
    let b = &w.wy * DVector::from_column_slice(y);
    Ok(a.dot(&b))
}

/// `exp(−w ‖x − y‖²)`.
pub fn kernel_rbf_trainable(x: &[f64], y: &[f64], w: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "vector dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::domain(format!("rbf weight must be positive, got {w}")));
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-w * d2).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Linear(KernelWeights),
    Rbf(f64),
}

impl Kernel {
    /// Linear kernel with identity weights (plain inner product).
    pub fn inner_product(d: usize) -> Self {
        Kernel::Linear(KernelWeights::identity(d))
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Kernel::Linear(w) => kernel_linear_trainable(x, y, w),
            Kernel::Rbf(w) => kernel_rbf_trainable(x, y, *w),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Kernel::Linear(w) => w.check(d),
            Kernel::Rbf(w) if *w > 0.0 && w.is_finite() => Ok(()),
            Kernel::Rbf(w) => Err(Error::domain(format!("rbf weight must be positive, got {w}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Paper,
    Biased,
    Unbiased,
}

/// Normalization of the adapter estimator's bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// `1/m²` inside the square root.
    #[default]
    InverseMSquared,
    /// `1/m` inside the square root.
    InverseM,
}

impl Scaling {
    fn factor(self, m: usize) -> f64 {
        match self {
            Scaling::InverseMSquared => 1.0 / (m * m) as f64,
            Scaling::InverseM => 1.0 / m as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdReport {
    /// Square root of the clamped quantity; never negative.
    pub value: f64,
    /// The quantity under the square root before clamping.
    pub squared: f64,
    pub estimator: Estimator,
    /// True iff `squared` was negative.
    pub clamped: bool,
}

impl MmdReport {
    fn new(squared: f64, estimator: Estimator) -> Self {
        let clamped = squared < 0.0;
        let value = if squared.is_nan() {
            f64::NAN
        } else {
            squared.max(0.0).sqrt()
        };
        Self {
            value,
            squared,
            estimator,
            clamped,
        }
    }
}

/// Block sums of one Gram matrix: total and diagonal.
struct BlockSums {
    total: f64,
    diagonal: f64,
}

fn block_sums(kernel: &Kernel, xs: &FeatureBatch, ys: &FeatureBatch) -> Result<BlockSums> {
    match kernel {
        Kernel::Linear(w) => {
            // ΣᵢΣⱼ ⟨W_X xᵢ, W_Y yⱼ⟩ = ⟨W_X Σx, W_Y Σy⟩
            let sx = column_sum(xs);
            let sy = column_sum(ys);
            let total = (&w.wx * sx).dot(&(&w.wy * sy));
            let g = w.wx.transpose() * &w.wy;
            let diagonal = (0..xs.m.min(ys.m))
                .map(|i| xs.vector(i).dot(&(&g * ys.vector(i))))
                .sum();
            Ok(BlockSums { total, diagonal })
        }
        Kernel::Rbf(_) => {
            let mut total = 0.0;
            let mut diagonal = 0.0;
            for i in 0..xs.m {
                for j in 0..ys.m {
                    let v = kernel.eval(xs.row(i), ys.row(j))?;
                    total += v;
                    if i == j {
                        diagonal += v;
                    }
                }
            }
            Ok(BlockSums { total, diagonal })
        }
    }
}

fn column_sum(b: &FeatureBatch) -> DVector<f64> {
    let mut s = DVector::zeros(b.d);
    for row in b.rows() {
        for (acc, x) in s.iter_mut().zip(row) {
            *acc += x;
        }
    }
    s
}

fn check_pair(sr: &FeatureBatch, r: &FeatureBatch, kernel: &Kernel, equal_m: bool) -> Result<()> {
    if sr.d != r.d {
        return Err(Error::domain(format!("feature dimensions differ: {} vs {}", sr.d, r.d)));
    }
    if equal_m && sr.m != r.m {
        return Err(Error::domain(format!("sample counts differ: {} vs {}", sr.m, r.m)));
    }
    kernel.validate(sr.d)
}

/// The adapter's estimator; see the module docs.
pub fn mmd_paper(sr: &FeatureBatch, r: &FeatureBatch, kernel: &Kernel, scaling: Scaling) -> Result<MmdReport> {
    check_pair(sr, r, kernel, true)?;
    let ss = block_sums(kernel, sr, sr)?;
    let sx = block_sums(kernel, sr, r)?;
    let rr = block_sums(kernel, r, r)?;
    let bracket = (ss.total - ss.diagonal) - (sx.total - sx.diagonal) + (rr.total - rr.diagonal);
    Ok(MmdReport::new(scaling.factor(sr.m) * bracket, Estimator::Paper))
}

/// V-statistic: `mean k(sr,sr) − 2 mean k(sr,r) + mean k(r,r)`.
pub fn mmd_biased(sr: &FeatureBatch, r: &FeatureBatch, kernel: &Kernel) -> Result<MmdReport> {
    check_pair(sr, r, kernel, false)?;
    let (m, n) = (sr.m as f64, r.m as f64);
    let ss = block_sums(kernel, sr, sr)?.total / (m * m);
    let sx = block_sums(kernel, sr, r)?.total / (m * n);
    let rr = block_sums(kernel, r, r)?.total / (n * n);
    Ok(MmdReport::new(ss - 2.0 * sx + rr, Estimator::Biased))
}

/// U-statistic with within-batch diagonals excluded.
pub fn mmd_unbiased(sr: &FeatureBatch, r: &FeatureBatch, kernel: &Kernel) -> Result<MmdReport> {
    check_pair(sr, r, kernel, false)?;
    let (m, n) = (sr.m as f64, r.m as f64);
    let ss = block_sums(kernel, sr, sr)?;
    let rr = block_sums(kernel, r, r)?;
    let sx = block_sums(kernel, sr, r)?;
    let squared = (ss.total - ss.diagonal) / (m * (m - 1.0)) + (rr.total - rr.diagonal) / (n * (n - 1.0))
        - 2.0 * sx.total / (m * n);
    Ok(MmdReport::new(squared, Estimator::Unbiased))
}

pub fn mmd(
    estimator: Estimator,
    sr: &FeatureBatch,
    r: &FeatureBatch,
    kernel: &Kernel,
    scaling: Scaling,
) -> Result<MmdReport> {
    match estimator {
        Estimator::Paper => mmd_paper(sr, r, kernel, scaling),
        Estimator::Biased => mmd_biased(sr, r, kernel),
        Estimator::Unbiased => mmd_unbiased(sr, r, kernel),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradient {
    pub dwx: DMatrix<f64>,
    pub dwy: DMatrix<f64>,
    pub report: MmdReport,
    /// False when the clamped value sits at zero, where the square root has no gradient.
    pub defined: bool,
}

/// Gradient of the [`mmd_paper`] value with respect to both weight matrices
/// of the linear trainable kernel.
///
/// With `k(x, y) = tr(W_Xᵀ W_Y y xᵀ)` the bracket is `tr(W_Xᵀ W_Y B)` for
/// `B = Σ_{i≠j} (srⱼ srᵢᵀ − rⱼ srᵢᵀ + rⱼ rᵢᵀ)`, so
/// `∂P/∂W_X = s W_Y B` and `∂P/∂W_Y = s W_X Bᵀ`, then `∂√P = ∂P / (2√P)`.
pub fn mmd_grad_weights(
    sr: &FeatureBatch,
    r: &FeatureBatch,
    w: &KernelWeights,
    scaling: Scaling,
) -> Result<WeightGradient> {
    let kernel = Kernel::Linear(w.clone());
    let report = mmd_paper(sr, r, &kernel, scaling)?;
    let zeros = || {
        (
            DMatrix::zeros(w.wx.nrows(), w.wx.ncols()),
            DMatrix::zeros(w.wy.nrows(), w.wy.ncols()),
        )
    };
    if !(report.squared > 0.0) {
        let (dwx, dwy) = zeros();
        return Ok(WeightGradient {
            dwx,
            dwy,
            report,
            defined: false,
        });
    }
    let d = sr.d;
    let s_sum = column_sum(sr);
    let r_sum = column_sum(r);
    let mut b = &s_sum * s_sum.transpose() - &r_sum * s_sum.transpose() + &r_sum * r_sum.transpose();
    for i in 0..sr.m {
        let (si, ri) = (sr.vector(i), r.vector(i));
        b -= &si * si.transpose() - &ri * si.transpose() + &ri * ri.transpose();
    }
    debug_assert_eq!(b.nrows(), d);
    let scale = scaling.factor(sr.m) / (2.0 * report.value);
    Ok(WeightGradient {
        dwx: &w.wy * &b * scale,
        dwy: &w.wx * b.transpose() * scale,
        report,
        defined: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub epochs: usize,
    pub objective: Objective,
    pub scaling: Scaling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub weights: KernelWeights,
    /// Mean [`mmd_paper`] value over the pairs: entry `e` is the loss before
    /// epoch `e`'s update, and the last entry is the final loss.
    pub trace: Vec<f64>,
}

/// Plain gradient descent (or ascent) on the mean adapter MMD over all
/// pairs, starting from identity weights.
pub fn fit_kernel_weights(pairs: &[(FeatureBatch, FeatureBatch)], config: &FitConfig) -> Result<FitResult> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::domain("kernel fitting needs at least one batch pair"));
    };
    if !(config.lr > 0.0) || !config.lr.is_finite() {
        return Err(Error::domain(format!(
            "learning rate must be positive, got {}",
            config.lr
        )));
    }
    let d = first.d;
    let mut weights = KernelWeights::identity(d);
    let sign = match config.objective {
        Objective::Minimize => -1.0,
        Objective::Maximize => 1.0,
    };
    let mut trace = Vec::with_capacity(config.epochs + 1);
    let count = pairs.len() as f64;
    for epoch in 0..=config.epochs {
        let mut loss = 0.0;
        let mut gx = DMatrix::zeros(d, d);
        let mut gy = DMatrix::zeros(d, d);
        for (sr, r) in pairs {
            let g = mmd_grad_weights(sr, r, &weights, config.scaling)?;
            loss += g.report.value;
            gx += g.dwx;
            gy += g.dwy;
        }
        loss /= count;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
        if epoch == config.epochs {
            break;
        }
        weights.wx += gx * (sign * config.lr / count);
        weights.wy += gy * (sign * config.lr / count);
    }
    Ok(FitResult { weights, trace })
}

/// Covariance regularization added before inversion.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

fn moments(b: &FeatureBatch) -> (DVector<f64>, DMatrix<f64>) {
    let mean = column_sum(b) / b.m as f64;
    let mut cov = DMatrix::<f64>::zeros(b.d, b.d);
    for i in 0..b.m {
        let c = b.vector(i) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (b.m - 1) as f64;
    for i in 0..b.d {
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    (mean, cov)
}

/// `KL(N(μ_sr, Σ_sr) ‖ N(μ_r, Σ_r))` between moment-matched Gaussians.
pub fn kl_divergence_gaussianized(sr: &FeatureBatch, r: &FeatureBatch) -> Result<f64> {
    if sr.d != r.d {
        return Err(Error::domain("feature dimensions differ"));
    }
    let (m0, s0) = moments(sr);
    let (m1, s1) = moments(r);
    let c0 = s0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::domain("source covariance is singular"))?;
    let c1 = s1
        .cholesky()
        .ok_or_else(|| Error::domain("target covariance is singular"))?;
    let trace = c1.solve(&s0).trace();
    let diff = &m1 - &m0;
    let maha = diff.dot(&c1.solve(&diff));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| -> f64 {
        2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    };
    let kl = 0.5 * (trace + maha - sr.d as f64 + logdet(&c1) - logdet(&c0));
    Ok(kl.max(0.0))
}

/// Sliced 1-Wasserstein distance averaged over seeded random directions.
/// Unequal batches are compared on their common prefix.
pub fn wasserstein_1d_sliced(sr: &FeatureBatch, r: &FeatureBatch, n_projections: usize, seed: u64) -> Result<f64> {
    if sr.d != r.d {
        return Err(Error::domain("feature dimensions differ"));
    }
    if n_projections == 0 {
        return Err(Error::domain("need at least one projection"));
    }
    let (a, b, _) = truncate_to_common(sr, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut pa = vec![0.0; a.m];
    let mut pb = vec![0.0; b.m];
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..a.d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|x| *x /= norm);
        }
        let project = |batch: &FeatureBatch, out: &mut [f64]| {
            for (o, row) in out.iter_mut().zip(batch.rows()) {
                *o = row.iter().zip(&dir).map(|(x, u)| x * u).sum();
            }
            out.sort_by(f64::total_cmp);
        };
        project(&a, &mut pa);
        project(&b, &mut pb);
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.m as f64;
    }
    Ok(total / n_projections as f64)
}

/// Default number of random directions for [`wasserstein_1d_sliced`].
pub const DEFAULT_PROJECTIONS: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn batch(m: usize, d: usize, seed: u64, mean: f64, sd: f64) -> FeatureBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sd * z
            })
            .collect();
        FeatureBatch::new(m, d, data).unwrap()
    }

    fn random_weights(d: usize, seed: u64) -> KernelWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelWeights {
            wx: DMatrix::from_fn(
                d,
                d,
                |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
            ),
            wy: DMatrix::from_fn(
                d,
                d,
                |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
            ),
        }
    }

    /// Literal double sum over index pairs, one kernel call per pair.
    fn oracle_paper_squared(sr: &FeatureBatch, r: &FeatureBatch, k: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
        let m = sr.samples();
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    acc += k(sr.row(i), sr.row(j)) - k(sr.row(i), r.row(j)) + k(r.row(i), r.row(j));
                }
            }
        }
        acc / (m * m) as f64
    }

    #[test]
    fn linear_kernel_matches_weighted_dot() {
        let w = KernelWeights {
            wx: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            wy: DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -1.0]),
        };
        // W_X x = (1+4, 2) = (5, 2); W_Y y = (3, -1) -> 15 - 2
        assert_eq!(kernel_linear_trainable(&[1.0, 2.0], &[1.0, 1.0], &w).unwrap(), 13.0);
        assert!(kernel_linear_trainable(&[1.0], &[1.0, 1.0], &w).is_err());
    }

    #[test]
    fn rbf_kernel_values() {
        assert_eq!(kernel_rbf_trainable(&[0.5, 1.0], &[0.5, 1.0], 3.0).unwrap(), 1.0);
        let v = kernel_rbf_trainable(&[0.0], &[2.0], 0.25).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(kernel_rbf_trainable(&[0.0], &[2.0], 0.0).is_err());
    }

    #[test]
    fn paper_estimator_matches_double_sum_linear_and_rbf() {
        for seed in 0..20 {
            let sr = batch(9, 3, seed, 0.2, 1.0);
            let r = batch(9, 3, seed + 100, -0.1, 0.7);
            let w = random_weights(3, seed);
            let want = oracle_paper_squared(&sr, &r, &|x, y| kernel_linear_trainable(x, y, &w).unwrap());
            let got = mmd_paper(&sr, &r, &Kernel::Linear(w.clone()), Scaling::InverseMSquared).unwrap();
            assert!(
                (got.squared - want).abs() < 1e-10 * (1.0 + want.abs()),
                "{} vs {want}",
                got.squared
            );
            assert!((got.value - want.max(0.0).sqrt()).abs() < 1e-10);
            assert_eq!(got.clamped, want < 0.0);

            let want = oracle_paper_squared(&sr, &r, &|x, y| kernel_rbf_trainable(x, y, 0.4).unwrap());
            let got = mmd_paper(&sr, &r, &Kernel::Rbf(0.4), Scaling::InverseMSquared).unwrap();
            assert!((got.squared - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_m_scaling_is_m_times_larger() {
        let sr = batch(8, 2, 1, 1.0, 1.0);
        let r = batch(8, 2, 2, 0.0, 1.0);
        let k = Kernel::inner_product(2);
        let a = mmd_paper(&sr, &r, &k, Scaling::InverseMSquared).unwrap();
        let b = mmd_paper(&sr, &r, &k, Scaling::InverseM).unwrap();
        assert!((b.squared - 8.0 * a.squared).abs() < 1e-12 * b.squared.abs().max(1.0));
    }

    #[test]
    fn identical_batches_keep_cross_self_term() {
        // The cross block enters once, so identical inputs leave the
        // off-diagonal self block behind instead of cancelling to zero.
        let sr = batch(6, 2, 3, 0.5, 1.0);
        let k = Kernel::Rbf(0.5);
        let rep = mmd_paper(&sr, &sr, &k, Scaling::InverseMSquared).unwrap();
        let ss = oracle_paper_squared(&sr, &sr, &|x, y| kernel_rbf_trainable(x, y, 0.5).unwrap());
        assert!((rep.squared - ss).abs() < 1e-12);
        assert!(rep.value > 0.0);
        assert!(mmd_biased(&sr, &sr, &k).unwrap().value < 1e-7);
    }

    #[test]
    fn point_masses_have_closed_form_biased_mmd() {
        let sr = FeatureBatch::new(4, 1, vec![0.0; 4]).unwrap();
        let r = FeatureBatch::new(4, 1, vec![1.0; 4]).unwrap();
        let rep = mmd_biased(&sr, &r, &Kernel::Rbf(1.0)).unwrap();
        assert!((rep.squared - (2.0 - 2.0 / core::f64::consts::E)).abs() < 1e-14);
    }

    #[test]
    fn unbiased_estimator_is_centred_under_equal_distributions() {
        let trials = 1000;
        let mut values = Vec::with_capacity(trials);
        for t in 0..trials as u64 {
            let a = batch(16, 2, 2 * t, 0.0, 1.0);
            let b = batch(16, 2, 2 * t + 1, 0.0, 1.0);
            values.push(mmd_unbiased(&a, &b, &Kernel::Rbf(0.5)).unwrap().squared);
        }
        let mean = values.iter().sum::<f64>() / trials as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
        let stderr = (var / trials as f64).sqrt();
        assert!(mean.abs() < 3.0 * stderr, "mean {mean} stderr {stderr}");
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = batch(5, 2, 0, 0.0, 1.0);
        let b = batch(5, 3, 1, 0.0, 1.0);
        let c = batch(6, 2, 1, 0.0, 1.0);
        assert!(mmd_paper(&a, &b, &Kernel::Rbf(1.0), Scaling::default()).is_err());
        assert!(mmd_paper(&a, &c, &Kernel::Rbf(1.0), Scaling::default()).is_err());
        assert!(mmd_biased(&a, &c, &Kernel::Rbf(1.0)).is_ok());
        assert!(mmd_paper(&a, &a, &Kernel::inner_product(3), Scaling::default()).is_err());
        assert!(FeatureBatch::new(1, 2, vec![0.0, 0.0]).is_err());
        let (x, y, cut) = truncate_to_common(&a, &c);
        assert!(cut);
        assert_eq!((x.samples(), y.samples()), (5, 5));
        assert_eq!(y.row(4), c.row(4));
    }

    fn finite_difference(
        sr: &FeatureBatch,
        r: &FeatureBatch,
        w: &KernelWeights,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let value = |w: &KernelWeights| {
            mmd_paper(sr, r, &Kernel::Linear(w.clone()), Scaling::InverseMSquared)
                .unwrap()
                .value
        };
        let d = w.dim();
        let mut gx = DMatrix::zeros(d, d);
        let mut gy = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut p = w.clone();
                let mut q = w.clone();
                p.wx[(i, j)] += h;
                q.wx[(i, j)] -= h;
                gx[(i, j)] = (value(&p) - value(&q)) / (2.0 * h);
                let mut p = w.clone();
                let mut q = w.clone();
                p.wy[(i, j)] += h;
                q.wy[(i, j)] -= h;
                gy[(i, j)] = (value(&p) - value(&q)) / (2.0 * h);
            }
        }
        (gx, gy)
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut checked = 0;
        for seed in 0..30 {
            let sr = batch(10, 3, seed, 1.0, 1.0);
            let r = batch(10, 3, seed + 500, -0.5, 0.8);
            let w = random_weights(3, seed + 7);
            let g = mmd_grad_weights(&sr, &r, &w, Scaling::InverseMSquared).unwrap();
            if !g.defined || g.report.squared < 1e-3 {
                continue;
            }
            let (fx, fy) = finite_difference(&sr, &r, &w, 1e-6);
            let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1e-12);
            assert!(rel(&g.dwx, &fx) < 1e-5, "wx rel {}", rel(&g.dwx, &fx));
            assert!(rel(&g.dwy, &fy) < 1e-5, "wy rel {}", rel(&g.dwy, &fy));
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn gradient_vanishes_on_zero_inputs() {
        let z = FeatureBatch::new(4, 2, vec![0.0; 8]).unwrap();
        let g = mmd_grad_weights(&z, &z, &KernelWeights::identity(2), Scaling::default()).unwrap();
        assert!(!g.defined);
        assert_eq!(g.report.value, 0.0);
        assert!(g.dwx.iter().chain(g.dwy.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn fitting_reduces_shifted_domain_discrepancy() {
        let pairs: Vec<_> = (0..4)
            .map(|s| {
                let sr = batch(32, 4, s, 0.0, 1.0);
                let r = FeatureBatch::new(
                    32,
                    4,
                    sr.as_slice()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| 1.5 * x + if i % 4 == 0 { 3.0 } else { 1.0 })
                        .collect(),
                )
                .unwrap();
                (sr, r)
            })
            .collect();
        let cfg = FitConfig {
            lr: 1e-2,
            epochs: 200,
            objective: Objective::Minimize,
            scaling: Scaling::InverseMSquared,
        };
        let fit = fit_kernel_weights(&pairs, &cfg).unwrap();
        assert_eq!(fit.trace.len(), 201);
        assert!(
            fit.trace[200] * 2.0 <= fit.trace[0],
            "{} -> {}",
            fit.trace[0],
            fit.trace[200]
        );

        let up = fit_kernel_weights(
            &pairs,
            &FitConfig {
                objective: Objective::Maximize,
                epochs: 20,
                ..cfg
            },
        )
        .unwrap();
        assert!(up.trace[20] > up.trace[0]);
    }

    #[test]
    fn fitting_equal_distributions_stays_near_noise_floor() {
        let pairs: Vec<_> = (0..4)
            .map(|s| (batch(32, 4, 2 * s, 0.0, 1.0), batch(32, 4, 2 * s + 1, 0.0, 1.0)))
            .collect();
        let floor = pairs
            .iter()
            .map(|(a, b)| {
                mmd_paper(a, b, &Kernel::inner_product(4), Scaling::default())
                    .unwrap()
                    .value
            })
            .fold(0.0, f64::max);
        let cfg = FitConfig {
            lr: 1e-2,
            epochs: 50,
            objective: Objective::Minimize,
            scaling: Scaling::default(),
        };
        let fit = fit_kernel_weights(&pairs, &cfg).unwrap();
        assert!(fit.trace.iter().all(|&v| v >= 0.0 && v <= floor + 1e-12));
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let sr = batch(8, 2, 0, 1e170, 1e169);
        let r = batch(8, 2, 1, -1e170, 1e169);
        let cfg = FitConfig {
            lr: 1e-2,
            epochs: 10,
            objective: Objective::Maximize,
            scaling: Scaling::default(),
        };
        match fit_kernel_weights(&[(sr, r)], &cfg) {
            Err(Error::Diverged { epoch, trace }) => {
                assert_eq!(trace.len(), epoch + 1);
                assert!(!trace.last().unwrap().is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn kl_of_identical_batches_is_zero() {
        let a = batch(200, 3, 9, 0.3, 1.2);
        assert!(kl_divergence_gaussianized(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn kl_of_unit_gaussian_shift() {
        let mu = 0.8;
        let a = batch(10_000, 1, 1, 0.0, 1.0);
        let b = batch(10_000, 1, 2, mu, 1.0);
        let kl = kl_divergence_gaussianized(&a, &b).unwrap();
        assert!((kl - mu * mu / 2.0).abs() < 0.03, "{kl}");
    }

    #[test]
    fn kl_rejects_degenerate_covariance() {
        // Constant features leave only the ridge, which is still positive definite.
        let a = FeatureBatch::new(5, 2, vec![1.0; 10]).unwrap();
        assert!(kl_divergence_gaussianized(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn sliced_w1_of_shifted_line() {
        let a = FeatureBatch::new(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = FeatureBatch::new(4, 1, vec![3.5, 0.5, 2.5, 1.5]).unwrap();
        let w = wasserstein_1d_sliced(&a, &b, 8, 0).unwrap();
        assert!((w - 0.5).abs() < 1e-12);
        assert_eq!(wasserstein_1d_sliced(&a, &a, 8, 0).unwrap(), 0.0);
        assert_eq!(
            wasserstein_1d_sliced(&a, &b, DEFAULT_PROJECTIONS, 3).unwrap(),
            wasserstein_1d_sliced(&a, &b, DEFAULT_PROJECTIONS, 3).unwrap()
        );
    }

    #[test]
    fn lift_is_seeded_and_widens() {
        let a = batch(5, 3, 0, 0.0, 1.0);
        let l = random_lift(&a, 4, 11);
        assert_eq!((l.samples(), l.dim()), (5, 12));
        assert_eq!(l, random_lift(&a, 4, 11));
        assert_ne!(l, random_lift(&a, 4, 12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn value_is_nonnegative_and_symmetric_in_swap(seed in 0u64..1000, w in 0.05f64..2.0) {
            let a = batch(6, 2, seed, 0.0, 1.0);
            let b = batch(6, 2, seed + 1, 0.5, 1.5);
            let k = Kernel::Rbf(w);
            let ab = mmd_paper(&a, &b, &k, Scaling::default()).unwrap();
            let ba = mmd_paper(&b, &a, &k, Scaling::default()).unwrap();
            prop_assert!(ab.value >= 0.0);
            // Symmetric kernel: the bracket is symmetric under swapping the batches.
            prop_assert!((ab.squared - ba.squared).abs() < 1e-12);
            let bi = mmd_biased(&a, &b, &k).unwrap();
            prop_assert!(bi.value >= 0.0);
        }

        #[test]
        fn linear_value_is_homogeneous_in_weights(seed in 0u64..1000, s in 0.1f64..5.0) {
            let a = batch(5, 3, seed, 1.0, 1.0);
            let b = batch(5, 3, seed + 9, 0.0, 1.0);
            let w = random_weights(3, seed);
            let mut ws = w.clone();
            ws.wx *= s;
            let p = mmd_paper(&a, &b, &Kernel::Linear(w), Scaling::default()).unwrap();
            let q = mmd_paper(&a, &b, &Kernel::Linear(ws), Scaling::default()).unwrap();
            prop_assert!((q.squared - s * p.squared).abs() < 1e-9 * (1.0 + p.squared.abs() * s));
        }

        #[test]
        fn sliced_w1_is_nonnegative_and_symmetric(seed in 0u64..1000) {
            let a = batch(7, 3, seed, 0.0, 1.0);
            let b = batch(7, 3, seed + 3, 1.0, 1.0);
            let ab = wasserstein_1d_sliced(&a, &b, 16, seed).unwrap();
            let ba = wasserstein_1d_sliced(&b, &a, 16, seed).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
