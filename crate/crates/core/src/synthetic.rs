//! Synthetic wireframe scenes with exact geometry, used as a test oracle.

use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_camera, write_depth, write_gray, write_trajectory, TrajectoryEntry};
use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::imaging::{DepthImage, GrayImage};

/// Pixels within this distance of a projected segment receive its depth.
const DEPTH_RADIUS: f64 = 2.0;
const NEAR_PLANE: f64 = 0.05;
/// Distance over which the intensity step decays back to the background,
/// both across the segment and beyond its endpoints. Long enough that the
/// decay gradient stays below the default Canny low threshold.
const FALLOFF: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

/// Each projected segment is drawn as a soft intensity step across it: the
/// side to the left of `a -> b` brightens towards `foreground`, the other
/// side darkens by the same amount below `background`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub segments: Vec<Segment>,
    pub background: f32,
    pub foreground: f32,
}

impl SyntheticScene {
    pub fn empty() -> Self {
        Self {
            segments: Vec::new(),
            background: 128.0,
            foreground: 178.0,
        }
    }

    /// Adds the 12 edges of an axis-aligned box.
    pub fn add_box(&mut self, center: Vector3<f64>, size: Vector3<f64>) {
        self.add_oriented_box(center, size, &Rotation3::identity());
    }

    /// Adds the 12 edges of a box rotated by `orientation` about its center.
    pub fn add_oriented_box(&mut self, center: Vector3<f64>, size: Vector3<f64>, orientation: &Rotation3<f64>) {
        let h = size / 2.0;
        let corner = |i: usize| {
            center
                + orientation * Vector3::new(
                    if i & 1 == 0 { -h.x } else { h.x },
                    if i & 2 == 0 { -h.y } else { h.y },
                    if i & 4 == 0 { -h.z } else { h.z },
                )
        };
        for i in 0..8 {
            for bit in [1, 2, 4] {
                if i & bit == 0 {
                    self.segments.push(Segment {
                        a: corner(i),
                        b: corner(i | bit),
                    });
                }
            }
        }
    }

    pub fn cube(center: Vector3<f64>, side: f64) -> Self {
        let mut s = Self::empty();
        s.add_box(center, Vector3::repeat(side));
        s
    }

    /// Boxes and loose segments scattered within `extent` of `center`,
    /// fully determined by `seed`.
    pub fn random(seed: u64, center: Vector3<f64>, extent: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::empty();
        let point = |rng: &mut ChaCha8Rng, r: f64| {
            center + Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
        };
        for _ in 0..10 {
            let c = point(&mut rng, extent * 0.6);
            let size = Vector3::new(
                rng.random_range(0.15..0.5) * extent,
                rng.random_range(0.15..0.5) * extent,
                rng.random_range(0.15..0.5) * extent,
            );
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let orientation = Rotation3::new(axis * std::f64::consts::PI);
            s.add_oriented_box(c, size, &orientation);
        }
        for _ in 0..30 {
            let a = point(&mut rng, extent);
            let b = point(&mut rng, extent);
            if (a - b).norm() > 0.2 * extent {
                s.segments.push(Segment { a, b });
            }
        }
        s
    }

    /// Closest approach of any segment to a camera center, measured along
    /// the viewing direction.
    pub fn min_depth(&self, pose: &Pose) -> Option<f64> {
        let inv = pose.inverse();
        self.segments
            .iter()
            .flat_map(|s| [inv.transform_point(&s.a).z, inv.transform_point(&s.b).z])
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub gray: GrayImage,
    pub depth: DepthImage,
    /// Pixels whose centers lie within half a pixel of a projected segment.
    pub edge_mask: Vec<bool>,
    /// Exact depth at `edge_mask` pixels, 0 elsewhere.
    pub edge_depth: DepthImage,
}

fn clip_near(a: Vector3<f64>, b: Vector3<f64>) -> Option<(Vector3<f64>, Vector3<f64>)> {
    match (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (a_in, _) => {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let m = a + (b - a) * t;
            if a_in {
                Some((a, m))
            } else {
                Some((m, b))
            }
        }
    }
}

/// Signed step profile at perpendicular offset `s` and distance `beyond`
/// past the nearest endpoint, both in pixels. The step is 2 px wide on the
/// segment and widens past its ends so no edge overshoots them.
fn step_profile(s: f64, beyond: f64) -> f64 {
    if beyond >= FALLOFF {
        return 0.0;
    }
    let half = (1.0 + beyond * beyond).min(FALLOFF);
    let f = if s.abs() <= half {
        s / half
    } else {
        s.signum() * (1.0 - (s.abs() - half) / FALLOFF).max(0.0)
    };
    f * (1.0 - beyond / FALLOFF)
}

/// Renders `scene` seen from camera-to-world `pose`.
pub fn render_frame(scene: &SyntheticScene, pose: &Pose, intr: &CameraIntrinsics) -> Result<RenderedFrame> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut step = vec![0.0f64; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    let mut edge_depth = vec![f64::INFINITY; w * h];
    let inv = pose.inverse();
    let mut drawn = false;

    for seg in &scene.segments {
        let Some((a, b)) = clip_near(inv.transform_point(&seg.a), inv.transform_point(&seg.b)) else {
            continue;
        };
        let (Some(pa), Some(pb)) = (project(&a, intr), project(&b, intr)) else {
            continue;
        };
        let d = pb - pa;
        let len2 = d.norm_squared();
        let len = len2.sqrt();
        let margin = 2.0 * FALLOFF + 1.0;
        let x0 = (pa.x.min(pb.x) - margin).floor().max(0.0);
        let x1 = (pa.x.max(pb.x) + margin).ceil().min(w as f64 - 1.0);
        let y0 = (pa.y.min(pb.y) - margin).floor().max(0.0);
        let y1 = (pa.y.max(pb.y) + margin).ceil().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = Vector2::new(x as f64, y as f64);
                let i = y * w + x;
                let t = if len2 > 0.0 { (p - pa).dot(&d) / len2 } else { 0.0 };
                if len > 0.0 {
                    let beyond = (-t).max(t - 1.0).max(0.0) * len;
                    let across = (d.x * (p.y - pa.y) - d.y * (p.x - pa.x)) / len;
                    step[i] += step_profile(across, beyond);
                }
                let s = t.clamp(0.0, 1.0);
                let dist = (p - (pa + d * s)).norm();
                if dist > DEPTH_RADIUS {
                    continue;
                }
                drawn = true;
                // inverse depth is affine along the projected segment
                let z = 1.0 / ((1.0 - s) / a.z + s / b.z);
                depth[i] = depth[i].min(z);
                if dist <= 0.5 {
                    edge_depth[i] = edge_depth[i].min(z);
                }
            }
        }
    }
    if !drawn {
        return Err(Error::EmptyFrame);
    }
    let (bg, fg) = (scene.background as f64, scene.foreground as f64);
    let gray = GrayImage::new(
        intr.width,
        intr.height,
        step.iter().map(|f| (bg + (fg - bg) * f).clamp(0.0, 255.0) as f32).collect(),
    )?;
    let finite = |v: &f64| if v.is_finite() { *v as f32 } else { 0.0 };
    let edge_mask = edge_depth.iter().map(|v| v.is_finite()).collect();
    Ok(RenderedFrame {
        gray,
        depth: DepthImage::new(intr.width, intr.height, depth.iter().map(finite).collect())?,
        edge_mask,
        edge_depth: DepthImage::new(intr.width, intr.height, edge_depth.iter().map(finite).collect())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    Static,
    /// Pure translation along a unit direction.
    Line { direction: Vector3<f64> },
    /// Camera circles `center` about the vertical axis, always facing it.
    /// The first pose is at `center - (0, 0, radius)`.
    Orbit { center: Vector3<f64>, radius: f64 },
}

/// `length` camera-to-world poses; `step` is meters per frame for a line
/// and radians per frame for an orbit.
pub fn generate_trajectory(kind: TrajectoryKind, length: usize, step: f64) -> Vec<Pose> {
    (0..length)
        .map(|i| match kind {
            TrajectoryKind::Static => Pose::identity(),
            TrajectoryKind::Line { direction } => Pose::from_translation(direction * (i as f64 * step)),
            TrajectoryKind::Orbit { center, radius } => {
                let r = Rotation3::from_axis_angle(&Vector3::y_axis(), i as f64 * step);
                let rm = *r.matrix();
                Pose::new(rm, center - rm * Vector3::new(0.0, 0.0, radius))
            }
        })
        .collect()
}

/// Writes a sequence in the TUM directory layout: rgb/, depth/, rgb.txt,
/// depth.txt, groundtruth.txt and camera.txt.
pub fn write_sequence(
    dir: &Path,
    scene: &SyntheticScene,
    poses: &[Pose],
    intr: &CameraIntrinsics,
    start: f64,
    rate_hz: f64,
) -> Result<()> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("depth"))?;
    let mut rgb_index = String::from("# color images\n# timestamp filename\n");
    let mut depth_index = String::from("# depth maps\n# timestamp filename\n");
    let mut gt = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let t = start + i as f64 / rate_hz;
        let name = format!("{t:.6}.png");
        let frame = render_frame(scene, pose, intr)?;
        write_gray(&dir.join("rgb").join(&name), &frame.gray)?;
        write_depth(&dir.join("depth").join(&name), &frame.depth)?;
        rgb_index.push_str(&format!("{t:.6} rgb/{name}\n"));
        depth_index.push_str(&format!("{t:.6} depth/{name}\n"));
        gt.push(TrajectoryEntry::from_pose(t, pose));
    }
    fs::write(dir.join("rgb.txt"), rgb_index)?;
    fs::write(dir.join("depth.txt"), depth_index)?;
    write_trajectory(&gt, dir.join("groundtruth.txt"))?;
    write_camera(&dir.join("camera.txt"), intr)?;
    Ok(())
}

/// Path length of a pose sequence.
pub fn path_length(poses: &[Pose]) -> f64 {
    poses
        .windows(2)
        .map(|w| (w[1].translation() - w[0].translation()).norm())
        .sum()
}
