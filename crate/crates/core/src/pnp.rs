//! Pose from correspondences: ePnP, Horn absolute orientation and ICP.

use alloc::format;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector2, Vector3, SVD};

use crate::geometry::{project_unchecked, rotation_angle, CameraIntrinsics, MeshModel, Pose};
use crate::prelude::*;
use crate::synth::{DepthMap, Mask};
use crate::{Error, Result};

/// 2D–3D matches with per-match confidence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub model_pts: Vec<Vector3<f64>>,
    pub image_pts: Vec<Vector2<f64>>,
    pub weights: Vec<f64>,
}

impl Correspondences {
    pub fn new(model_pts: Vec<Vector3<f64>>, image_pts: Vec<Vector2<f64>>, weights: Vec<f64>) -> Result<Self> {
        let n = model_pts.len();
        if image_pts.len() != n || weights.len() != n {
            return Err(Error::domain("correspondence arrays differ in length"));
        }
        if n < 4 {
            return Err(Error::domain(format!("ePnP needs at least 4 correspondences, got {n}")));
        }
        let finite = model_pts.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && image_pts.iter().all(|p| p.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::domain("correspondences must be finite"));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::domain("weights must lie in [0, 1]"));
        }
        Ok(Self {
            model_pts,
            image_pts,
            weights,
        })
    }

    /// All weights set to one.
    pub fn unweighted(model_pts: Vec<Vector3<f64>>, image_pts: Vec<Vector2<f64>>) -> Result<Self> {
        let w = vec![1.0; model_pts.len()];
        Self::new(model_pts, image_pts, w)
    }

    pub fn len(&self) -> usize {
        self.model_pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_pts.is_empty()
    }
}

/// Root-mean-square reprojection error in pixels.
pub fn reprojection_rmse(pose: &Pose, c: &Correspondences, k: &CameraIntrinsics) -> f64 {
    let sum: f64 = c
        .model_pts
        .iter()
        .zip(&c.image_pts)
        .map(|(m, px)| {
            let p = pose.apply(m);
            if p.z <= 0.0 {
                return f64::INFINITY;
            }
            (project_unchecked(&p, k) - px).norm_squared()
        })
        .sum();
    (sum / c.len() as f64).sqrt()
}

/// Planarity threshold on the ratio of smallest to largest principal spread.
const PLANAR_RATIO: f64 = 1e-4;
const GAUSS_NEWTON_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EpnpSolution {
    pub pose: Pose,
    pub rmse: f64,
    /// Number of null-space vectors of the winning candidate.
    pub null_dims: usize,
}

/// Efficient PnP with Gauss-Newton refinement of the null-space coefficients.
///
/// Control points are the centroid plus the principal axes of the model
/// points, scaled by their standard deviations. Coplanar input uses three
/// control points. Candidates for one to four null-space vectors are each
/// refined, aligned with [`horn_align`] and ranked by reprojection RMSE.
pub fn epnp(c: &Correspondences, k: &CameraIntrinsics) -> Result<EpnpSolution> {
    let n = c.len();
    if n < 4 {
        return Err(Error::domain("ePnP needs at least 4 correspondences"));
    }
    let active = c.weights.iter().filter(|&&w| w > 0.0).count();
    if active < 4 {
        return Err(Error::degenerate("fewer than 4 correspondences carry weight"));
    }
    let controls = control_points(&c.model_pts)?;
    let nc = controls.points.len();
    let alphas: Vec<Vec<f64>> = c.model_pts.iter().map(|p| controls.barycentric(p)).collect();

    let cols = 3 * nc;
    let mut m = DMatrix::<f64>::zeros(2 * n, cols);
    for i in 0..n {
        let w = c.weights[i];
        let (u, v) = (c.image_pts[i].x, c.image_pts[i].y);
        for j in 0..nc {
            let a = alphas[i][j] * w;
            m[(2 * i, 3 * j)] = a * k.fx;
            m[(2 * i, 3 * j + 2)] = a * (k.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * k.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (k.cy - v);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let null_count = nc.min(4);
    let null: Vec<DVector<f64>> = order[..null_count]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs = control_pairs(nc);
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (controls.points[a] - controls.points[b]).norm_squared())
        .collect();
    // dv[p][k]: difference of control points a and b inside null vector k
    let dv: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(a, b)| null.iter().map(|v| sub3(v, a) - sub3(v, b)).collect())
        .collect();

    let mut best: Option<EpnpSolution> = None;
    for dims in 1..=null_count {
        let Some(mut betas) = initial_betas(dims, &dv, &rho, null_count) else {
            continue;
        };
        gauss_newton(&mut betas, &dv, &rho);
        let Ok(pose) = pose_from_betas(&betas, &null, &alphas, c) else {
            continue;
        };
        let rmse = reprojection_rmse(&pose, c, k);
        if rmse.is_finite() && best.as_ref().is_none_or(|b| rmse < b.rmse) {
            best = Some(EpnpSolution {
                pose,
                rmse,
                null_dims: dims,
            });
        }
    }
    best.ok_or_else(|| Error::degenerate("no ePnP candidate produced a valid pose"))
}

struct ControlPoints {
    points: Vec<Vector3<f64>>,
    /// Rows map `p - c0` onto barycentric coordinates of controls `1..`.
    to_local: Vec<Vector3<f64>>,
}

impl ControlPoints {
    fn barycentric(&self, p: &Vector3<f64>) -> Vec<f64> {
        let d = p - self.points[0];
        let mut out = Vec::with_capacity(self.points.len());
        out.push(0.0);
        let mut rest = 0.0;
        for row in &self.to_local {
            let a = row.dot(&d);
            rest += a;
            out.push(a);
        }
        out[0] = 1.0 - rest;
        out
    }
}

fn control_points(pts: &[Vector3<f64>]) -> Result<ControlPoints> {
    let n = pts.len() as f64;
    let c0 = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c0;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let lambda: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if !(lambda[0] > 0.0) || lambda[1] <= 1e-12 * lambda[0] {
        return Err(Error::degenerate("model points are collinear or coincident"));
    }
    let planar = lambda[2].sqrt() <= PLANAR_RATIO * lambda[0].sqrt();
    let axes = if planar { 2 } else { 3 };
    let mut points = vec![c0];
    let mut to_local = Vec::with_capacity(axes);
    for &i in idx.iter().take(axes) {
        let dir: Vector3<f64> = eig.eigenvectors.column(i).into_owned();
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        points.push(c0 + dir * s);
        to_local.push(dir / s);
    }
    Ok(ControlPoints { points, to_local })
}

fn control_pairs(nc: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for a in 0..nc {
        for b in a + 1..nc {
            v.push((a, b));
        }
    }
    v
}

fn sub3(v: &DVector<f64>, j: usize) -> Vector3<f64> {
    Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

/// Linearized distance constraints. Each row expands
/// `‖Σ β_k dv_k‖² = ρ` into the products `β_k β_l` listed in `terms`.
fn linearized_system(dv: &[Vec<Vector3<f64>>], terms: &[(usize, usize)]) -> DMatrix<f64> {
    DMatrix::from_fn(dv.len(), terms.len(), |p, t| {
        let (a, b) = terms[t];
        let dot = dv[p][a].dot(&dv[p][b]);
        if a == b {
            dot
        } else {
            2.0 * dot
        }
    })
}

fn least_squares(l: &DMatrix<f64>, rho: &[f64]) -> Option<DVector<f64>> {
    let rhs = DVector::from_column_slice(rho);
    let svd = SVD::new(l.clone(), true, true);
    svd.solve(&rhs, 1e-14).ok()
}

/// Initial coefficients for `dims` null vectors; unused coefficients are zero.
fn initial_betas(dims: usize, dv: &[Vec<Vector3<f64>>], rho: &[f64], total: usize) -> Option<Vec<f64>> {
    let mut betas = vec![0.0; total];
    match dims {
        1 => {
            // closed-form scale that best matches control distances
            let (mut num, mut den) = (0.0, 0.0);
            for (p, r) in dv.iter().zip(rho) {
                let d = p[0].norm();
                num += d * r.sqrt();
                den += d * d;
            }
            if den <= 0.0 {
                return None;
            }
            betas[0] = num / den;
        }
        2 => {
            let x = least_squares(&linearized_system(dv, &[(0, 0), (0, 1), (1, 1)]), rho)?;
            let b1 = x[0].abs().sqrt();
            let b2 = x[2].abs().sqrt() * if x[1] < 0.0 { -1.0 } else { 1.0 };
            betas[0] = b1;
            betas[1] = b2;
        }
        3 if dv.len() >= 6 => {
            let terms = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
            let x = least_squares(&linearized_system(dv, &terms), rho)?;
            let b1 = x[0].abs().sqrt();
            if b1 == 0.0 {
                return None;
            }
            betas[0] = b1;
            betas[1] = x[1] / b1;
            betas[2] = x[2] / b1;
        }
        _ => {
            // subset of products involving the first vector only
            let terms: Vec<(usize, usize)> = (0..dims).map(|l| (0, l)).collect();
            let x = least_squares(&linearized_system(dv, &terms), rho)?;
            let b1 = x[0].abs().sqrt();
            if b1 == 0.0 {
                return None;
            }
            betas[0] = b1;
            for l in 1..dims {
                betas[l] = x[l] / b1;
            }
        }
    }
    betas.iter().all(|b| b.is_finite()).then_some(betas)
}

fn gauss_newton(betas: &mut [f64], dv: &[Vec<Vector3<f64>>], rho: &[f64]) {
    let nb = betas.len();
    for _ in 0..GAUSS_NEWTON_ITERS {
        let mut jac = DMatrix::<f64>::zeros(dv.len(), nb);
        let mut res = DVector::<f64>::zeros(dv.len());
        for (p, (d, r)) in dv.iter().zip(rho).enumerate() {
            let s: Vector3<f64> = d
                .iter()
                .zip(betas.iter())
                .fold(Vector3::zeros(), |acc, (v, b)| acc + v * *b);
            res[p] = s.norm_squared() - r;
            for kk in 0..nb {
                jac[(p, kk)] = 2.0 * s.dot(&d[kk]);
            }
        }
        let svd = SVD::new(jac, true, true);
        let Ok(step) = svd.solve(&(-res), 1e-14) else {
            return;
        };
        if !step.iter().all(|x| x.is_finite()) {
            return;
        }
        for (b, s) in betas.iter_mut().zip(step.iter()) {
            *b += s;
        }
    }
}

fn pose_from_betas(betas: &[f64], null: &[DVector<f64>], alphas: &[Vec<f64>], c: &Correspondences) -> Result<Pose> {
    let nc = alphas[0].len();
    let controls: Vec<Vector3<f64>> = (0..nc)
        .map(|j| {
            null.iter()
                .zip(betas)
                .fold(Vector3::zeros(), |acc, (v, b)| acc + sub3(v, j) * *b)
        })
        .collect();
    let mut cam: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| {
            a.iter()
                .zip(&controls)
                .fold(Vector3::zeros(), |acc, (w, p)| acc + p * *w)
        })
        .collect();
    let behind = cam.iter().filter(|p| p.z < 0.0).count();
    if 2 * behind > cam.len() {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    horn_align(&c.model_pts, &cam, &c.weights)
}

/// Weighted least-squares rigid alignment `dst ≈ R src + t` (Kabsch/Horn via SVD
/// of the cross-covariance, with a determinant fix against reflections).
pub fn horn_align(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> Result<Pose> {
    let n = src.len();
    if dst.len() != n || weights.len() != n {
        return Err(Error::domain("alignment inputs differ in length"));
    }
    if n < 3 {
        return Err(Error::domain(format!("alignment needs at least 3 points, got {n}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::domain("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::degenerate("all weights are zero"));
    }
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for i in 0..n {
        cs += src[i] * weights[i];
        cd += dst[i] * weights[i];
    }
    cs /= total;
    cd /= total;

    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for i in 0..n {
        let a = src[i] - cs;
        let b = dst[i] - cd;
        h += a * b.transpose() * weights[i];
        spread += a * a.transpose() * weights[i];
    }
    let mut ev = SymmetricEigen::new(spread).eigenvalues;
    ev.as_mut_slice()
        .sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::degenerate("source points are collinear"));
    }

    let svd = SVD::new(h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::degenerate("svd did not converge")),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * fix * u.transpose();
    let translation = cd - rotation * cs;
    Ok(Pose { rotation, translation })
}

/// Weighted sum of squared alignment residuals.
pub fn alignment_objective(pose: &Pose, src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> f64 {
    src.iter()
        .zip(dst)
        .zip(weights)
        .map(|((s, d), w)| w * (pose.apply(s) - d).norm_squared())
        .sum()
}

/// Closest point to `p` on triangle `(a, b, c)`.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Uniform grid over a mesh's bounding box; each cell lists the triangles
/// whose bounding boxes overlap it. Queries are exact.
pub struct SurfaceIndex<'a> {
    mesh: &'a MeshModel,
    origin: Vector3<f64>,
    cell: f64,
    dims: [i64; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> SurfaceIndex<'a> {
    pub fn new(mesh: &'a MeshModel, cell: f64) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::domain("mesh has no faces"));
        }
        if !(cell > 0.0) {
            return Err(Error::domain("cell size must be positive"));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &mesh.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let mut dims = [0i64; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / cell).floor() as i64 + 1;
        }
        let total = (dims[0] * dims[1] * dims[2]) as usize;
        if total > 1 << 24 {
            return Err(Error::capacity("surface index grid too large"));
        }
        let mut cells = vec![Vec::new(); total];
        let cell_of = |x: f64, a: usize| (((x - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1);
        for (fi, f) in mesh.faces.iter().enumerate() {
            let tri = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
            let tlo = tri[0].inf(&tri[1]).inf(&tri[2]);
            let thi = tri[0].sup(&tri[1]).sup(&tri[2]);
            for z in cell_of(tlo.z, 2)..=cell_of(thi.z, 2) {
                for y in cell_of(tlo.y, 1)..=cell_of(thi.y, 1) {
                    for x in cell_of(tlo.x, 0)..=cell_of(thi.x, 0) {
                        cells[(x + dims[0] * (y + dims[1] * z)) as usize].push(fi as u32);
                    }
                }
            }
        }
        Ok(Self {
            mesh,
            origin: lo,
            cell,
            dims,
            cells,
        })
    }

    fn triangle(&self, fi: u32) -> [Vector3<f64>; 3] {
        let f = self.mesh.faces[fi as usize];
        [
            self.mesh.vertices[f[0]],
            self.mesh.vertices[f[1]],
            self.mesh.vertices[f[2]],
        ]
    }

    /// Closest surface point and its squared distance.
    pub fn closest(&self, p: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let q: [i64; 3] = core::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64);
        // Chebyshev ring distance from q to the grid box
        let gap = (0..3)
            .map(|a| {
                if q[a] < 0 {
                    -q[a]
                } else if q[a] >= self.dims[a] {
                    q[a] - self.dims[a] + 1
                } else {
                    0
                }
            })
            .max()
            .unwrap_or(0);
        let max_ring = (0..3)
            .map(|a| (q[a]).abs().max((q[a] - self.dims[a] + 1).abs()))
            .max()
            .unwrap_or(0);
        let mut best = (Vector3::zeros(), f64::INFINITY);
        let mut ring = gap;
        loop {
            for z in q[2] - ring..=q[2] + ring {
                if z < 0 || z >= self.dims[2] {
                    continue;
                }
                for y in q[1] - ring..=q[1] + ring {
                    if y < 0 || y >= self.dims[1] {
                        continue;
                    }
                    let on_face = (z - q[2]).abs() == ring || (y - q[1]).abs() == ring;
                    let mut x = q[0] - ring;
                    while x <= q[0] + ring {
                        if x >= 0 && x < self.dims[0] {
                            for &fi in &self.cells[(x + self.dims[0] * (y + self.dims[1] * z)) as usize] {
                                let [a, b, c] = self.triangle(fi);
                                let cp = closest_point_on_triangle(p, &a, &b, &c);
                                let d2 = (cp - p).norm_squared();
                                if d2 < best.1 {
                                    best = (cp, d2);
                                }
                            }
                        }
                        // interior rows of the ring only need their two end cells
                        x += if on_face || ring == 0 { 1 } else { 2 * ring };
                    }
                }
            }
            let cleared = ring as f64 * self.cell;
            if best.1 <= cleared * cleared || ring >= max_ring {
                return best;
            }
            ring += 1;
        }
    }
}

/// Brute-force closest point over every triangle.
pub fn closest_point_brute_force(mesh: &MeshModel, p: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let mut best = (Vector3::zeros(), f64::INFINITY);
    for f in &mesh.faces {
        let cp = closest_point_on_triangle(p, &mesh.vertices[f[0]], &mesh.vertices[f[1]], &mesh.vertices[f[2]]);
        let d2 = (cp - p).norm_squared();
        if d2 < best.1 {
            best = (cp, d2);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once translation change plus rotation change (rad) drops below this.
    pub tol: f64,
    pub min_points: usize,
    pub cell_size: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-7,
            min_points: 100,
            cell_size: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    pub iterations: usize,
    /// Set when too few depth points were available; `pose` is then the input.
    pub skipped: bool,
    /// Mean squared point-to-surface distance after each accepted step, starting with the input pose.
    pub objective: Vec<f64>,
}

/// Point-to-point ICP between the masked depth points and the closest points
/// on the mesh surface. The objective never increases.
pub fn icp_refine(
    pose0: &Pose,
    mesh: &MeshModel,
    depth: &DepthMap,
    mask: &Mask,
    instance: u32,
    k: &CameraIntrinsics,
    config: &IcpConfig,
) -> Result<IcpResult> {
    if depth.width != mask.width || depth.height != mask.height {
        return Err(Error::domain("depth and mask differ in size"));
    }
    let scene: Vec<Vector3<f64>> = depth
        .data
        .iter()
        .zip(&mask.data)
        .enumerate()
        .filter(|(_, (&d, &m))| d > 0.0 && m == instance)
        .map(|(idx, (&d, _))| k.ray((idx % depth.width) as f64, (idx / depth.width) as f64) * d as f64)
        .collect();
    if scene.len() < config.min_points.max(3) {
        return Ok(IcpResult {
            pose: *pose0,
            iterations: 0,
            skipped: true,
            objective: Vec::new(),
        });
    }
    let index = SurfaceIndex::new(mesh, config.cell_size)?;
    let weights = vec![1.0; scene.len()];
    let associate = |pose: &Pose| -> (Vec<Vector3<f64>>, f64) {
        let inv = pose.inverse();
        let mut total = 0.0;
        let matches = scene
            .iter()
            .map(|s| {
                let (cp, d2) = index.closest(&inv.apply(s));
                total += d2;
                cp
            })
            .collect();
        (matches, total / scene.len() as f64)
    };

    let mut pose = *pose0;
    let (mut matches, mut objective) = associate(&pose);
    let mut trace = vec![objective];
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        let Ok(next) = horn_align(&matches, &scene, &weights) else {
            break;
        };
        let (next_matches, next_objective) = associate(&next);
        if next_objective > objective {
            break;
        }
        let delta = pose.inverse().compose(&next);
        let change = delta.translation.norm() + rotation_angle(&delta.rotation);
        pose = next;
        matches = next_matches;
        objective = next_objective;
        trace.push(objective);
        iterations += 1;
        if change < config.tol {
            break;
        }
    }
    Ok(IcpResult {
        pose,
        iterations,
        skipped: false,
        objective: trace,
    })
}
