//! On-disk formats.
//!
//! - RKR1 rasters: the bytes `RKR1`, then `width`, `height`, `channels` as
//!   little-endian `u32`, then `width·height·channels` little-endian `f32`
//!   values, one row-major plane per channel.
//! - Meshes: OFF text files, with symmetries in a sidecar JSON array of
//!   row-major 4×4 matrices.
//! - Everything structured: JSON.

use std::fs;
use std::path::Path;

use posevote_core::nalgebra::{Vector2, Vector3};
use posevote_core::synth::{DepthMap, Mask, RadialMapStack};
use posevote_core::voting::{KeypointCandidate, KeypointSet};
use posevote_core::{CameraIntrinsics, MeshModel, Pose};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RKR_MAGIC: &[u8; 4] = b"RKR1";

/// Multi-channel `f32` raster in planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(RKR_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != RKR_MAGIC {
            return Err("not an RKR1 raster".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (width, height, channels) = (word(0), word(1), word(2));
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or("raster dimensions overflow")?;
        if bytes.len() != 16 + 4 * count {
            return Err(format!(
                "{width}x{height}x{channels} raster needs {} bytes, found {}",
                16 + 4 * count,
                bytes.len()
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| CliError::format(path, m))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }
}

impl From<&DepthMap> for Raster {
    fn from(d: &DepthMap) -> Self {
        Self {
            width: d.width,
            height: d.height,
            channels: 1,
            data: d.data.clone(),
        }
    }
}

impl From<&Mask> for Raster {
    fn from(m: &Mask) -> Self {
        Self {
            width: m.width,
            height: m.height,
            channels: 1,
            data: m.data.iter().map(|&id| id as f32).collect(),
        }
    }
}

impl From<&RadialMapStack> for Raster {
    fn from(s: &RadialMapStack) -> Self {
        Self {
            width: s.width,
            height: s.height,
            channels: s.count,
            data: s.data.clone(),
        }
    }
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let r = Raster::read(path)?;
    if r.channels != 1 {
        return Err(CliError::format(
            path,
            format!("depth map needs 1 channel, found {}", r.channels),
        ));
    }
    Ok(DepthMap {
        width: r.width,
        height: r.height,
        data: r.data,
    })
}

/// Largest integer `f32` holds exactly.
const MAX_EXACT_ID: f32 = 16_777_216.0;

pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = Raster::read(path)?;
    if r.channels != 1 {
        return Err(CliError::format(
            path,
            format!("mask needs 1 channel, found {}", r.channels),
        ));
    }
    if r.data
        .iter()
        .any(|&x| !(0.0..=MAX_EXACT_ID).contains(&x) || x.fract() != 0.0)
    {
        return Err(CliError::format(path, "mask values must be non-negative integers"));
    }
    Ok(Mask {
        width: r.width,
        height: r.height,
        data: r.data.iter().map(|&x| x as u32).collect(),
    })
}

pub fn read_radial(path: &Path) -> Result<RadialMapStack> {
    let r = Raster::read(path)?;
    Ok(RadialMapStack {
        width: r.width,
        height: r.height,
        count: r.channels,
        data: r.data,
    })
}

/// OFF text for a triangle mesh. Coordinates use the shortest decimal form
/// that reads back to the same `f64`.
pub fn mesh_to_off(mesh: &MeshModel) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

/// Vertices and triangles.
pub type OffMesh = (Vec<Vector3<f64>>, Vec<[usize; 3]>);

/// Vertices and triangles of an OFF file; polygons are split into fans.
pub fn parse_off(text: &str) -> std::result::Result<OffMesh, String> {
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    let mut it = tokens.into_iter();
    match it.next() {
        Some("OFF") => {}
        other => return Err(format!("expected OFF header, found {other:?}")),
    }
    let mut next = |what: &str| it.next().ok_or_else(|| format!("missing {what}"));
    let int = |t: &str, what: &str| t.parse::<usize>().map_err(|e| format!("bad {what} {t:?}: {e}"));
    let nv = int(next("vertex count")?, "vertex count")?;
    let nf = int(next("face count")?, "face count")?;
    next("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut c = [0.0; 3];
        for x in &mut c {
            let t = next("coordinate")?;
            *x = t.parse::<f64>().map_err(|e| format!("bad coordinate {t:?}: {e}"))?;
        }
        vertices.push(Vector3::new(c[0], c[1], c[2]));
    }
    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let n = int(next("face size")?, "face size")?;
        if n < 3 {
            return Err(format!("face {i} has {n} vertices"));
        }
        let idx = (0..n)
            .map(|_| next("face index").and_then(|t| int(t, "face index")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for t in 1..n - 1 {
            faces.push([idx[0], idx[t], idx[t + 1]]);
        }
    }
    Ok((vertices, faces))
}

pub fn write_mesh(mesh: &MeshModel, off: &Path, symmetries: &Path) -> Result<()> {
    write_bytes(off, mesh_to_off(mesh).as_bytes())?;
    let syms: Vec<PoseMatrix> = mesh.symmetries.iter().map(Pose::to_row_major).collect();
    write_json(symmetries, &syms)
}

/// Reads an OFF mesh and, when given, its symmetry sidecar.
pub fn read_mesh(off: &Path, symmetries: Option<&Path>) -> Result<MeshModel> {
    let text = fs::read_to_string(off).map_err(|e| CliError::io(off, e))?;
    let (vertices, faces) = parse_off(&text).map_err(|m| CliError::format(off, m))?;
    let syms = match symmetries {
        Some(p) => {
            let rows: Vec<PoseMatrix> = read_json(p)?;
            rows.iter()
                .map(Pose::from_row_major)
                .collect::<posevote_core::Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    Ok(MeshModel::new(vertices, faces, syms)?)
}

pub type PoseMatrix = [[f64; 4]; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraDto {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraIntrinsics> for CameraDto {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl CameraDto {
    pub fn to_intrinsics(&self) -> posevote_core::Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

pub fn read_camera(path: &Path) -> Result<CameraIntrinsics> {
    let dto: CameraDto = read_json(path)?;
    Ok(dto.to_intrinsics()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabelDto {
    pub instance_id: u32,
    pub class_id: u32,
    pub pose: PoseMatrix,
    pub keypoints3d: Vec<[f64; 3]>,
    pub keypoints2d: Vec<[f64; 2]>,
}

/// Per-scene ground truth. `channels[j]` is the `(class_id, slot)` of radial map `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub objects: Vec<ObjectLabelDto>,
    pub channels: Vec<(u32, usize)>,
}

/// One entry of a dataset's model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub class_id: u32,
    /// OFF file, relative to the table.
    pub mesh: String,
    /// Symmetry sidecar, relative to the table.
    pub symmetries: String,
    pub diameter: f64,
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTable {
    pub models: Vec<ModelEntry>,
}

impl ModelTable {
    pub fn entry(&self, class_id: u32) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.class_id == class_id)
    }

    pub fn keypoints(&self, class_id: u32) -> Option<Vec<Vector3<f64>>> {
        self.entry(class_id)
            .map(|m| m.keypoints.iter().map(|p| Vector3::from(*p)).collect())
    }

    /// Loads the mesh of `class_id`, resolving paths against `dir`.
    pub fn mesh(&self, dir: &Path, class_id: u32) -> Result<MeshModel> {
        let e = self
            .entry(class_id)
            .ok_or_else(|| CliError::format(dir, format!("no model for class {class_id}")))?;
        read_mesh(&dir.join(&e.mesh), Some(&dir.join(&e.symmetries)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointDto {
    pub class_id: u32,
    pub slot: usize,
    pub score: f64,
    pub kp2d: [f64; 2],
    pub kp3d: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub keypoints: Vec<KeypointDto>,
}

impl From<&KeypointSet> for KeypointFile {
    fn from(set: &KeypointSet) -> Self {
        Self {
            keypoints: set
                .entries
                .iter()
                .map(|e| KeypointDto {
                    class_id: e.class_id,
                    slot: e.slot,
                    score: e.score,
                    kp2d: [e.kp2d.x, e.kp2d.y],
                    kp3d: [e.kp3d.x, e.kp3d.y, e.kp3d.z],
                })
                .collect(),
        }
    }
}

impl KeypointFile {
    pub fn to_set(&self) -> KeypointSet {
        KeypointSet {
            entries: self
                .keypoints
                .iter()
                .map(|k| KeypointCandidate {
                    kp2d: Vector2::from(k.kp2d),
                    kp3d: Vector3::from(k.kp3d),
                    class_id: k.class_id,
                    slot: k.slot,
                    score: k.score,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub class_id: u32,
    pub pose: PoseMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrepancy: Option<f64>,
}

/// A list of poses. Label files are accepted too, through their `objects` key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(alias = "objects")]
    pub poses: Vec<PoseEntry>,
}

/// Feature rows for `mmd-fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub rows: Vec<Vec<f64>>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("in-memory values serialize");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json_bytes(value))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `rows` under `header` as CSV.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::format(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}
