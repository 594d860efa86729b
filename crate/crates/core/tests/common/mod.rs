#![allow(dead_code)]

pub mod oracles;

use edge_odometry::dataset::TrajectoryEntry;
use edge_odometry::geometry::{CameraIntrinsics, Pose};
use edge_odometry::synthetic::{generate_trajectory, render_frame, RenderedFrame, SyntheticScene, TrajectoryKind};
use edge_odometry::system::{Odometry, OdometryOutput, PipelineConfig};
use nalgebra::Vector3;

pub const RATE_HZ: f64 = 30.0;

/// O(n^2) distance transform: every pixel scans every edge. Ties go to the
/// lowest column, then the lowest row.
pub fn brute_force_dt(mask: &[bool], w: usize, h: usize) -> Vec<(f32, Option<(u32, u32)>)> {
    let edges: Vec<(usize, usize)> = (0..w)
        .flat_map(|x| (0..h).map(move |y| (x, y)))
        .filter(|&(x, y)| mask[y * w + x])
        .collect();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let mut best: Option<(usize, (usize, usize))> = None;
            // `edges` is sorted by column then row, so a strict comparison
            // keeps the first minimizer in that order.
            for &(ex, ey) in &edges {
                let d2 = (ex as isize - x as isize).pow(2) as usize + (ey as isize - y as isize).pow(2) as usize;
                if best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, (ex, ey)));
                }
            }
            match best {
                Some((d2, (ex, ey))) => ((d2 as f64).sqrt() as f32, Some((ex as u32, ey as u32))),
                None => (f32::INFINITY, None),
            }
        })
        .collect()
}

pub fn timestamp(i: usize) -> f64 {
    1.0 + i as f64 / RATE_HZ
}

pub fn ground_truth(poses: &[Pose]) -> Vec<TrajectoryEntry> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry::from_pose(timestamp(i), p))
        .collect()
}

/// A seeded random scene centered 2.5 m in front of the first camera.
pub struct Sequence {
    pub scene: SyntheticScene,
    pub poses: Vec<Pose>,
}

pub const SCENE_CENTER: [f64; 3] = [0.0, 0.0, 2.5];

impl Sequence {
    pub fn orbit(seed: u64, frames: usize, step: f64) -> Self {
        let center = Vector3::from(SCENE_CENTER);
        Self {
            scene: SyntheticScene::random(seed, center, 1.0),
            poses: generate_trajectory(TrajectoryKind::Orbit { center, radius: center.z }, frames, step),
        }
    }

    pub fn line(seed: u64, frames: usize, step: f64, direction: Vector3<f64>) -> Self {
        Self {
            scene: SyntheticScene::random(seed, Vector3::from(SCENE_CENTER), 1.0),
            poses: generate_trajectory(TrajectoryKind::Line { direction: direction.normalize() }, frames, step),
        }
    }

    pub fn still(seed: u64, frames: usize) -> Self {
        Self {
            scene: SyntheticScene::random(seed, Vector3::from(SCENE_CENTER), 1.0),
            poses: generate_trajectory(TrajectoryKind::Static, frames, 0.0),
        }
    }

    pub fn render(&self, intr: &CameraIntrinsics) -> Vec<RenderedFrame> {
        self.poses
            .iter()
            .map(|p| render_frame(&self.scene, p, intr).expect("scene in view"))
            .collect()
    }
}

pub fn run_frames(frames: &[RenderedFrame], intr: &CameraIntrinsics, config: PipelineConfig) -> edge_odometry::Result<OdometryOutput> {
    let mut odo = Odometry::new(config, *intr)?;
    for (i, f) in frames.iter().enumerate() {
        odo.process(timestamp(i), &f.gray, f.depth.clone())?;
    }
    Ok(odo.finish())
}

pub fn single_thread(selection: bool) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        single_thread: true,
        ..PipelineConfig::default()
    };
    if !selection {
        cfg.selection = None;
    }
    cfg
}

pub fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Largest optical flow, in pixels, of the analytic edges between
/// consecutive frames.
pub fn max_edge_flow(frames: &[RenderedFrame], poses: &[Pose], intr: &CameraIntrinsics) -> f64 {
    let w = intr.width as usize;
    let mut worst = 0.0f64;
    for i in 1..frames.len() {
        let rel = poses[i].inverse().compose(&poses[i - 1]);
        let f = &frames[i - 1];
        for (idx, &m) in f.edge_mask.iter().enumerate() {
            if !m {
                continue;
            }
            let z = f.edge_depth.data()[idx] as f64;
            if z <= 0.0 {
                continue;
            }
            let uv = nalgebra::Vector2::new((idx % w) as f64, (idx / w) as f64);
            let p = edge_odometry::geometry::backproject(&uv, 1.0 / z, intr).unwrap();
            if let Some(q) = edge_odometry::geometry::project(&rel.transform_point(&p), intr) {
                worst = worst.max((q - uv).norm());
            }
        }
    }
    worst
}
