//! Procedural meshes used for synthetic scenes and tests.

use alloc::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{rot_x, rot_z, MeshModel, Pose};
use crate::prelude::*;

/// Axis-aligned cube centered at the origin with its 24 rotational symmetries.
pub fn cube(side: f64) -> MeshModel {
    let (vertices, faces) = box_geometry(side, side, side);
    MeshModel::new(vertices, faces, cube_symmetries()).expect("cube is well formed")
}

/// Axis-aligned box centered at the origin; symmetric under half-turns about each axis.
pub fn cuboid(sx: f64, sy: f64, sz: f64) -> MeshModel {
    let (vertices, faces) = box_geometry(sx, sy, sz);
    let symmetries = [
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ]
    .iter()
    .map(|d| Pose {
        rotation: Matrix3::from_diagonal(d),
        translation: Vector3::zeros(),
    })
    .collect();
    MeshModel::new(vertices, faces, symmetries).expect("cuboid is well formed")
}

fn box_geometry(sx: f64, sy: f64, sz: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
    let mut vertices = Vec::with_capacity(8);
    for i in 0..8 {
        let x = if i & 1 == 0 { -hx } else { hx };
        let y = if i & 2 == 0 { -hy } else { hy };
        let z = if i & 4 == 0 { -hz } else { hz };
        vertices.push(Vector3::new(x, y, z));
    }
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (vertices, faces)
}

/// All signed permutation matrices with determinant +1.
fn cube_symmetries() -> Vec<Pose> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) == 0 { 1.0 } else { -1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(Pose {
                    rotation: m,
                    translation: Vector3::zeros(),
                });
            }
        }
    }
    out
}

/// Geodesic sphere from `level` subdivisions of an icosahedron.
pub fn icosphere(radius: f64, level: u32) -> MeshModel {
    let (vertices, faces) = icosphere_geometry(level);
    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    MeshModel::new(vertices, faces, vec![]).expect("icosphere is well formed")
}

fn icosphere_geometry(level: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let mut vertices: Vec<Vector3<f64>> = raw.iter().map(|&(x, y, z)| Vector3::new(x, y, z).normalize()).collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let (v, f) = split_faces(&vertices, &faces);
        vertices = v.into_iter().map(|p| p.normalize()).collect();
        faces = f;
    }
    (vertices, faces)
}

/// Closed cylinder along the model z axis with `segments` sides.
///
/// Symmetries: rotations by multiples of `2π / segments` about z, each
/// optionally combined with a half-turn about x.
pub fn cylinder(radius: f64, height: f64, segments: usize) -> MeshModel {
    let segments = segments.max(3);
    let h = height / 2.0;
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for i in 0..segments {
        let a = core::f64::consts::TAU * i as f64 / segments as f64;
        let (s, c) = a.sin_cos();
        vertices.push(Vector3::new(radius * c, radius * s, -h));
        vertices.push(Vector3::new(radius * c, radius * s, h));
    }
    let bottom = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, -h));
    let top = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, h));
    let mut faces = Vec::with_capacity(4 * segments);
    for i in 0..segments {
        let j = (i + 1) % segments;
        let (b0, t0, b1, t1) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
        faces.push([b0, b1, t0]);
        faces.push([t0, b1, t1]);
        faces.push([bottom, b1, b0]);
        faces.push([top, t0, t1]);
    }
    let mut symmetries = Vec::with_capacity(2 * segments);
    for flip in [false, true] {
        for i in 0..segments {
            let a = core::f64::consts::TAU * i as f64 / segments as f64;
            let mut r = rot_z(a);
            if flip {
                r *= rot_x(core::f64::consts::PI);
            }
            symmetries.push(Pose {
                rotation: r,
                translation: Vector3::zeros(),
            });
        }
    }
    MeshModel::new(vertices, faces, symmetries).expect("cylinder is well formed")
}

/// Icosphere with seeded per-vertex radial jitter; has no symmetries besides identity.
pub fn blob(radius: f64, level: u32, amplitude: f64, seed: u64) -> MeshModel {
    let (unit, faces) = icosphere_geometry(level);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Low-frequency lobes keep the surface smooth enough for dense voting.
    let lobes: Vec<(Vector3<f64>, f64)> = (0..3)
        .map(|_| {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let dir = if dir.norm() > 1e-6 {
                dir.normalize()
            } else {
                Vector3::z()
            };
            (dir, rng.random_range(-1.0..1.0))
        })
        .collect();
    let vertices = unit
        .into_iter()
        .map(|v| {
            let bump: f64 = lobes.iter().map(|(d, w)| w * v.dot(d).powi(2)).sum();
            v * radius * (1.0 + amplitude * bump)
        })
        .collect();
    MeshModel::new(vertices, faces, vec![]).expect("blob is well formed")
}

/// Splits every triangle into four through its edge midpoints, `levels` times.
/// Symmetries and the diameter carry over unchanged because midpoints stay in
/// the convex hull.
pub fn subdivide(mesh: &MeshModel, levels: u32) -> MeshModel {
    let mut vertices = mesh.vertices.clone();
    let mut faces = mesh.faces.clone();
    for _ in 0..levels {
        let (v, f) = split_faces(&vertices, &faces);
        vertices = v;
        faces = f;
    }
    MeshModel::new(vertices, faces, mesh.symmetries.clone()).expect("subdivision keeps indices valid")
}

fn split_faces(vertices: &[Vector3<f64>], faces: &[[usize; 3]]) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let mut vertices = vertices.to_vec();
    let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vector3<f64>>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            vertices.push((vertices[a] + vertices[b]) / 2.0);
            vertices.len() - 1
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    (vertices, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_has_24_proper_symmetries() {
        let m = cube(0.1);
        assert_eq!(m.symmetries.len(), 24);
        for s in &m.symmetries {
            assert!(s.is_valid(1e-12));
            // every symmetry maps the vertex set onto itself
            for v in &m.vertices {
                let w = s.apply(v);
                assert!(m.vertices.iter().any(|u| (u - w).norm() < 1e-12));
            }
        }
    }

    #[test]
    fn cylinder_symmetries_map_vertices() {
        let m = cylinder(0.05, 0.1, 16);
        assert_eq!(m.symmetries.len(), 32);
        for s in &m.symmetries {
            for v in &m.vertices {
                let w = s.apply(v);
                assert!(m.vertices.iter().any(|u| (u - w).norm() < 1e-12));
            }
        }
    }

    #[test]
    fn icosphere_counts() {
        let m = icosphere(1.0, 2);
        assert_eq!(m.faces.len(), 320);
        assert_eq!(m.vertices.len(), 162);
        assert!(m.vertices.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn subdivision_preserves_diameter() {
        let m = cube(0.2);
        let s = subdivide(&m, 2);
        assert_eq!(s.faces.len(), 12 * 16);
        assert!((s.diameter - m.diameter).abs() < 1e-15);
    }

    #[test]
    fn blob_is_deterministic() {
        assert_eq!(blob(0.1, 2, 0.3, 5), blob(0.1, 2, 0.3, 5));
        assert_ne!(blob(0.1, 2, 0.3, 5), blob(0.1, 2, 0.3, 6));
    }
}
