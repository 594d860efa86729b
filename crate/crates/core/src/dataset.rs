//! TUM RGB-D directory layout and trajectory files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imaging::{DepthImage, GrayImage};

pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
pub const DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone)]
pub struct RgbdRecord {
    pub timestamp: f64,
    pub gray: GrayImage,
    pub depth: DepthImage,
}

/// One line of an index file: timestamp and path relative to the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    pub file: String,
}

pub fn parse_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(file)) = (it.next(), it.next()) else {
            return Err(parse_error(path, n + 1, "expected 'timestamp filename'"));
        };
        let timestamp = ts
            .parse::<f64>()
            .map_err(|_| parse_error(path, n + 1, &format!("bad timestamp '{ts}'")))?;
        out.push(IndexEntry {
            timestamp,
            file: file.to_string(),
        });
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(out)
}

fn parse_error(path: &Path, line: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn nearest(sorted: &[f64], t: f64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let i = sorted.partition_point(|&x| x < t);
    let mut best = i.min(sorted.len() - 1);
    if i > 0 && (t - sorted[i - 1]).abs() <= (sorted[best] - t).abs() {
        best = i - 1;
    }
    Some(best)
}

/// Pairs `a[i]` with `b[j]` when each is the other's nearest neighbour and
/// the gap is within `tolerance`. Inputs must be sorted.
pub fn associate(a: &[f64], b: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let Some(j) = nearest(b, t) else {
            continue;
        };
        if (b[j] - t).abs() <= tolerance && nearest(a, b[j]) == Some(i) {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Pull-based reader over an associated sequence.
#[derive(Debug)]
pub struct SequenceLoader {
    root: PathBuf,
    pairs: Vec<(IndexEntry, IndexEntry)>,
    next: usize,
    /// Index entries that found no partner.
    pub unmatched: usize,
    /// Records skipped because an image could not be read.
    pub skipped: usize,
    pub intrinsics: Option<CameraIntrinsics>,
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<SequenceLoader> {
    let root = dir.as_ref().to_path_buf();
    let rgb = parse_index(&root.join("rgb.txt"))?;
    let depth = parse_index(&root.join("depth.txt"))?;
    let ta: Vec<f64> = rgb.iter().map(|e| e.timestamp).collect();
    let tb: Vec<f64> = depth.iter().map(|e| e.timestamp).collect();
    let pairs: Vec<_> = associate(&ta, &tb, ASSOCIATION_TOLERANCE)
        .into_iter()
        .map(|(i, j)| (rgb[i].clone(), depth[j].clone()))
        .collect();
    let unmatched = rgb.len() + depth.len() - 2 * pairs.len();
    if unmatched > 0 {
        warn!("{unmatched} index entries without an rgb/depth partner were dropped");
    }
    let camera = root.join("camera.txt");
    let intrinsics = if camera.exists() { Some(read_camera(&camera)?) } else { None };
    Ok(SequenceLoader {
        root,
        pairs,
        next: 0,
        unmatched,
        skipped: 0,
        intrinsics,
    })
}

impl SequenceLoader {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read(&self, rgb: &IndexEntry, depth: &IndexEntry) -> Result<RgbdRecord> {
        Ok(RgbdRecord {
            timestamp: rgb.timestamp,
            gray: read_gray(&self.root.join(&rgb.file))?,
            depth: read_depth(&self.root.join(&depth.file))?,
        })
    }
}

impl Iterator for SequenceLoader {
    type Item = RgbdRecord;

    fn next(&mut self) -> Option<RgbdRecord> {
        while self.next < self.pairs.len() {
            let (rgb, depth) = &self.pairs[self.next];
            self.next += 1;
            match self.read(rgb, depth) {
                Ok(r) => return Some(r),
                Err(e) => {
                    warn!("skipping frame at {:.6}: {e}", rgb.timestamp);
                    self.skipped += 1;
                }
            }
        }
        None
    }
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    GrayImage::from_rgb8(rgb.width(), rgb.height(), rgb.as_raw())
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let raw = img.to_luma16();
    let data = raw.as_raw().iter().map(|&v| (v as f64 / DEPTH_SCALE) as f32).collect();
    DepthImage::new(raw.width(), raw.height(), data)
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let rgb: Vec<u8> = bytes.iter().flat_map(|&b| [b, b, b]).collect();
    image::save_buffer(path, &rgb, img.width(), img.height(), image::ExtendedColorType::Rgb8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|&d| (d as f64 * DEPTH_SCALE).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width(), depth.height(), raw)
        .ok_or_else(|| Error::Dataset("depth buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `fx fy cx cy width height` on one line.
pub fn read_camera(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| parse_error(path, 1, "empty camera file"))?;
    let f: Vec<&str> = line.1.split_whitespace().collect();
    if f.len() != 6 {
        return Err(parse_error(path, line.0 + 1, "expected 'fx fy cx cy width height'"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| parse_error(path, line.0 + 1, &format!("bad number '{s}'")));
    let dim = |s: &str| s.parse::<u32>().map_err(|_| parse_error(path, line.0 + 1, &format!("bad size '{s}'")));
    CameraIntrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, dim(f[4])?, dim(f[5])?)
}

pub fn write_camera(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    let line = format!(
        "{} {} {} {} {} {}\n",
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
    );
    fs::write(path, line)?;
    Ok(())
}

/// Camera-to-world pose with a timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryEntry {
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        let mut q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*pose.rotation()));
        if q.w < 0.0 {
            q = UnitQuaternion::new_unchecked(-q.into_inner());
        }
        Self {
            timestamp,
            translation: *pose.translation(),
            rotation: q,
        }
    }

    /// From a translation and an `(x, y, z, w)` quaternion, which is normalized.
    pub fn from_components(timestamp: f64, translation: [f64; 3], quaternion: [f64; 4]) -> Result<Self> {
        let [x, y, z, w] = quaternion;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-6) || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("invalid pose components".into()));
        }
        Ok(Self {
            timestamp,
            translation: Vector3::from(translation),
            rotation: UnitQuaternion::from_quaternion(q),
        })
    }

    /// Translation and `(x, y, z, w)` quaternion.
    pub fn components(&self) -> ([f64; 3], [f64; 4]) {
        let q = self.rotation.quaternion();
        (self.translation.into(), [q.i, q.j, q.k, q.w])
    }

    pub fn pose(&self) -> Pose {
        Pose::new(*self.rotation.to_rotation_matrix().matrix(), self.translation)
    }
}

fn clean(v: f64) -> f64 {
    // avoid printing "-0"
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

pub fn format_entry(e: &TrajectoryEntry) -> String {
    let q = e.rotation.quaternion();
    let mut s = format!("{:.6}", e.timestamp);
    for v in [e.translation.x, e.translation.y, e.translation.z, q.i, q.j, q.k, q.w] {
        let _ = write!(s, " {}", clean(v));
    }
    s
}

pub fn write_trajectory(entries: &[TrajectoryEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in entries {
        out.push_str(&format_entry(e));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_error(path, n + 1, &format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_error(path, n + 1, &format!("bad number '{f}'")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-6 {
            return Err(parse_error(path, n + 1, "zero quaternion"));
        }
        out.push(TrajectoryEntry {
            timestamp: v[0],
            translation: Vector3::new(v[1], v[2], v[3]),
            rotation: UnitQuaternion::from_quaternion(q),
        });
    }
    Ok(out)
}
