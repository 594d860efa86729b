//! Frame-to-keyframe tracking and local mapping wired together.
//!
//! Mapping runs either inline after each keyframe or on its own thread. In
//! both modes the tracker only reads refined keyframe poses when it creates
//! the next keyframe, so the two modes produce identical trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use log::{debug, info};

use crate::dataset::{format_entry, TrajectoryEntry};
use crate::error::{Error, Result};
use crate::evaluation::FrameTiming;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imaging::{preprocess, DepthImage, GrayImage, PreprocessConfig, PreprocessedFrame, PYRAMID_LEVELS};
use crate::mapping::{Keyframe, MappingReport, SlidingWindow, WindowConfig};
use crate::selection::{edge_pixels_with_depth, select_edges, SelectionConfig};
use crate::tracking::{keyframe_decision, track_frame, EdgePixel, TrackingConfig, TrackingResult};

pub const DIAGNOSTICS_SCHEMA: &str = "edge-odometry-diagnostics v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub tracking: TrackingConfig,
    /// `None` tracks every edge that has depth.
    pub selection: Option<SelectionConfig>,
    pub window: WindowConfig,
    pub single_thread: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            tracking: TrackingConfig::default(),
            selection: Some(SelectionConfig::default()),
            window: WindowConfig::default(),
            single_thread: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracking.validate(self.preprocess.distance_cap as f64)?;
        if let Some(s) = &self.selection {
            s.validate()?;
        }
        self.window.validate()?;
        if !(self.preprocess.canny_low > 0.0 && self.preprocess.canny_low <= self.preprocess.canny_high) {
            return Err(Error::Config("canny thresholds must satisfy 0 < low <= high".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDiagnostics {
    pub timestamp: f64,
    /// Camera-to-world estimate.
    pub pose: Pose,
    pub keyframe: bool,
    /// Keyframe edges the frame was tracked against.
    pub tracked_edges: usize,
    pub inliers: usize,
    pub mean_residual: f64,
    pub iterations: [usize; PYRAMID_LEVELS],
    pub timing: FrameTiming,
}

#[derive(Debug, Clone, Default)]
pub struct OdometryOutput {
    pub trajectory: Vec<TrajectoryEntry>,
    /// Window-refined keyframe poses.
    pub keyframes: Vec<TrajectoryEntry>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

pub fn diagnostics_csv(rows: &[FrameDiagnostics]) -> String {
    let mut s = format!("# {DIAGNOSTICS_SCHEMA}\n");
    s.push_str("timestamp,tx,ty,tz,qx,qy,qz,qw,keyframe,tracked_edges,inliers,mean_residual,");
    s.push_str("iters_l0,iters_l1,iters_l2,preprocess_ms,track_ms,select_ms,map_ms,total_ms\n");
    for r in rows {
        let pose = format_entry(&TrajectoryEntry::from_pose(r.timestamp, &r.pose)).replace(' ', ",");
        let t = &r.timing;
        let _ = writeln!(
            s,
            "{pose},{},{},{},{:.4},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            r.keyframe as u8,
            r.tracked_edges,
            r.inliers,
            r.mean_residual,
            r.iterations[0],
            r.iterations[1],
            r.iterations[2],
            t.preprocess,
            t.track,
            t.select,
            t.map,
            t.total()
        );
    }
    s
}

pub fn write_diagnostics(rows: &[FrameDiagnostics], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, diagnostics_csv(rows))?;
    Ok(())
}

struct NewKeyframe {
    keyframe: Keyframe,
    /// Final track ages of the previous keyframe's edges.
    previous_ages: Option<(u64, Vec<u32>)>,
}

struct MapperReply {
    poses: Vec<(u64, Pose)>,
}

struct Mapper {
    window: SlidingWindow,
    removed: Vec<(u64, f64, Pose)>,
}

impl Mapper {
    fn handle(&mut self, msg: NewKeyframe) -> MapperReply {
        if let Some((id, ages)) = msg.previous_ages {
            if let Some(kf) = self.window.keyframe_mut(id) {
                for (e, a) in kf.edges.iter_mut().zip(ages) {
                    e.track_age = a;
                }
            }
        }
        let report: MappingReport = self.window.insert_keyframe(msg.keyframe);
        debug!(
            "mapping: {} activated, optimization {:?}, marginalized {:?}",
            report.activated,
            report.optimization.as_ref().map(|o| (o.initial_cost, o.final_cost)),
            report.marginalization.as_ref().map(|m| m.victim)
        );
        if let Some(r) = report.removed {
            self.removed.push(r);
        }
        MapperReply {
            poses: self.window.poses(),
        }
    }

    fn finish(mut self) -> Vec<(u64, f64, Pose)> {
        for kf in &self.window.keyframes {
            self.removed.push((kf.id, kf.timestamp, kf.world_pose));
        }
        self.removed.sort_by_key(|r| r.0);
        self.removed
    }
}

enum MapperHandle {
    Inline {
        mapper: Mapper,
        reply: Option<(MapperReply, f64)>,
    },
    Threaded {
        tx: Sender<NewKeyframe>,
        rx: Receiver<MapperReply>,
        pending: bool,
        join: JoinHandle<Mapper>,
    },
}

impl MapperHandle {
    fn new(window: SlidingWindow, single_thread: bool) -> Self {
        let mapper = Mapper {
            window,
            removed: Vec::new(),
        };
        if single_thread {
            return Self::Inline { mapper, reply: None };
        }
        let (tx, worker_rx) = channel::<NewKeyframe>();
        let (worker_tx, rx) = channel();
        let join = std::thread::Builder::new()
            .name("mapping".into())
            .spawn(move || {
                let mut mapper = mapper;
                while let Ok(msg) = worker_rx.recv() {
                    if worker_tx.send(mapper.handle(msg)).is_err() {
                        break;
                    }
                }
                mapper
            })
            .expect("failed to spawn mapping thread");
        Self::Threaded {
            tx,
            rx,
            pending: false,
            join,
        }
    }

    /// Hands over a keyframe; returns milliseconds spent on the caller's thread.
    fn submit(&mut self, msg: NewKeyframe) -> f64 {
        match self {
            Self::Inline { mapper, reply } => {
                let start = Instant::now();
                let r = mapper.handle(msg);
                let ms = elapsed_ms(start);
                *reply = Some((r, ms));
                ms
            }
            Self::Threaded { tx, pending, .. } => {
                // The worker only exits after the sender is dropped.
                let _ = tx.send(msg);
                *pending = true;
                0.0
            }
        }
    }

    /// Waits for the last submitted keyframe; returns the refined poses and
    /// the milliseconds spent waiting.
    fn sync(&mut self) -> (Option<MapperReply>, f64) {
        match self {
            Self::Inline { reply, .. } => (reply.take().map(|r| r.0), 0.0),
            Self::Threaded { rx, pending, .. } => {
                if !*pending {
                    return (None, 0.0);
                }
                let start = Instant::now();
                let r = rx.recv().ok();
                *pending = false;
                (r, elapsed_ms(start))
            }
        }
    }

    fn finish(self) -> Vec<(u64, f64, Pose)> {
        match self {
            Self::Inline { mapper, .. } => mapper.finish(),
            Self::Threaded { tx, rx, pending, join } => {
                drop(tx);
                if pending {
                    let _ = rx.recv();
                }
                drop(rx);
                join.join().map(Mapper::finish).unwrap_or_default()
            }
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Tracking state for the current keyframe.
struct Reference {
    keyframe: Keyframe,
    /// Camera-to-world pose the tracker uses for this keyframe.
    world_pose: Pose,
    last_relative: Pose,
    inlier_sum: f64,
    tracked: usize,
}

pub struct Odometry {
    config: PipelineConfig,
    intrinsics: CameraIntrinsics,
    mapper: Option<MapperHandle>,
    reference: Option<Reference>,
    /// Frame-to-frame motion of the last tracked frame.
    velocity: Pose,
    next_id: u64,
    output: OdometryOutput,
}

impl Odometry {
    pub fn new(config: PipelineConfig, intrinsics: CameraIntrinsics) -> Result<Self> {
        config.validate()?;
        intrinsics.validate()?;
        let window = SlidingWindow::new(intrinsics, config.window.clone());
        Ok(Self {
            mapper: Some(MapperHandle::new(window, config.single_thread)),
            config,
            intrinsics,
            reference: None,
            velocity: Pose::identity(),
            next_id: 0,
            output: OdometryOutput::default(),
        })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn diagnostics(&self) -> &[FrameDiagnostics] {
        &self.output.diagnostics
    }

    /// Latest camera-to-world estimate.
    pub fn current_pose(&self) -> Option<Pose> {
        self.output.diagnostics.last().map(|d| d.pose)
    }

    pub fn process(&mut self, timestamp: f64, gray: &GrayImage, depth: DepthImage) -> Result<&FrameDiagnostics> {
        if gray.width() != self.intrinsics.width || gray.height() != self.intrinsics.height {
            return Err(Error::InvalidImage(format!(
                "frame is {}x{}, camera is {}x{}",
                gray.width(),
                gray.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        let mut timing = FrameTiming::default();
        let start = Instant::now();
        let frame = Arc::new(preprocess(timestamp, gray, depth, &self.config.preprocess)?);
        timing.preprocess = elapsed_ms(start);

        let Some(reference) = self.reference.as_ref() else {
            let pose = Pose::identity();
            let tracked = self.create_keyframe(frame, pose, None, &mut timing)?;
            return Ok(self.record(timestamp, pose, true, tracked, None, timing));
        };

        let start = Instant::now();
        let prior = self.velocity.compose(&reference.last_relative);
        let result = self.track(reference, &frame, &prior)?;
        timing.track = elapsed_ms(start);

        let reference = self.reference.as_mut().expect("reference keyframe");
        let relative = result.relative_pose;
        for &i in &result.inlier_edges {
            reference.keyframe.edges[i].track_age += 1;
        }
        let average = if reference.tracked == 0 {
            result.inlier_count as f64
        } else {
            reference.inlier_sum / reference.tracked as f64
        };
        reference.inlier_sum += result.inlier_count as f64;
        reference.tracked += 1;
        self.velocity = relative.compose(&reference.last_relative.inverse());
        reference.last_relative = relative;
        let elapsed = timestamp - reference.keyframe.timestamp;
        let pose = reference.world_pose.compose(&relative.inverse());
        let tracked_edges = reference.keyframe.edges.len();

        let is_keyframe = keyframe_decision(&result, &result.flow, average, elapsed, &self.config.tracking);
        let pose = if is_keyframe {
            self.create_keyframe(frame, pose, Some(relative), &mut timing)?;
            self.reference.as_ref().map(|r| r.world_pose).unwrap_or(pose)
        } else {
            pose
        };
        Ok(self.record(timestamp, pose, is_keyframe, tracked_edges, Some(&result), timing))
    }

    fn track(&self, reference: &Reference, frame: &PreprocessedFrame, prior: &Pose) -> Result<TrackingResult> {
        let cfg = &self.config.tracking;
        match track_frame(&reference.keyframe, frame, prior, &self.intrinsics, cfg) {
            Ok(r) => Ok(r),
            Err(first) => {
                debug!("tracking from motion prior failed ({first}); retrying from the keyframe pose");
                track_frame(&reference.keyframe, frame, &Pose::identity(), &self.intrinsics, cfg).map_err(|e| {
                    Error::TrackingLost(format!("frame {:.6}: {e}", frame.timestamp))
                })
            }
        }
    }

    fn record(
        &mut self,
        timestamp: f64,
        pose: Pose,
        keyframe: bool,
        tracked_edges: usize,
        result: Option<&TrackingResult>,
        timing: FrameTiming,
    ) -> &FrameDiagnostics {
        self.output.trajectory.push(TrajectoryEntry::from_pose(timestamp, &pose));
        self.output.diagnostics.push(FrameDiagnostics {
            timestamp,
            pose,
            keyframe,
            tracked_edges,
            inliers: result.map_or(0, |r| r.inlier_count),
            mean_residual: result.map_or(0.0, |r| r.mean_residual),
            iterations: result.map_or([0; PYRAMID_LEVELS], |r| r.iterations),
            timing,
        });
        self.output.diagnostics.last().expect("just pushed")
    }

    /// Makes `frame` the new reference. `relative` maps the previous
    /// keyframe into this frame. Returns the number of selected edges.
    fn create_keyframe(
        &mut self,
        frame: Arc<PreprocessedFrame>,
        fallback_pose: Pose,
        relative: Option<Pose>,
        timing: &mut FrameTiming,
    ) -> Result<usize> {
        let (reply, wait) = self.mapper.as_mut().expect("mapper running").sync();
        timing.map += wait;

        let world_pose = match (&self.reference, relative, reply) {
            (Some(r), Some(rel), Some(reply)) => {
                let refined = reply
                    .poses
                    .iter()
                    .find(|(id, _)| *id == r.keyframe.id)
                    .map_or(r.world_pose, |p| p.1);
                refined.compose(&rel.inverse())
            }
            _ => fallback_pose,
        };

        let start = Instant::now();
        let edges = self.keyframe_edges(&frame)?;
        timing.select = elapsed_ms(start);
        let count = edges.len();

        let id = self.next_id;
        self.next_id += 1;
        let keyframe = Keyframe::new(id, frame.timestamp, world_pose, edges, frame);
        let previous_ages = self
            .reference
            .as_ref()
            .map(|r| (r.keyframe.id, r.keyframe.edges.iter().map(|e| e.track_age).collect()));
        info!("keyframe {id} at {:.6} with {count} edges", keyframe.timestamp);
        timing.map += self.mapper.as_mut().expect("mapper running").submit(NewKeyframe {
            keyframe: keyframe.clone(),
            previous_ages,
        });
        self.reference = Some(Reference {
            keyframe,
            world_pose,
            last_relative: Pose::identity(),
            inlier_sum: 0.0,
            tracked: 0,
        });
        Ok(count)
    }

    fn keyframe_edges(&self, frame: &PreprocessedFrame) -> Result<Vec<EdgePixel>> {
        let edges = match &self.config.selection {
            Some(cfg) => {
                select_edges(
                    &frame.edges,
                    &frame.depth,
                    &self.velocity,
                    &self.intrinsics,
                    cfg,
                )?
                .edges
            }
            None => edge_pixels_with_depth(&frame.edges, &frame.depth),
        };
        if edges.is_empty() {
            return Err(Error::TrackingLost(format!("no usable edges at {:.6}", frame.timestamp)));
        }
        Ok(edges)
    }

    /// Stops the mapper and returns everything estimated so far.
    pub fn finish(mut self) -> OdometryOutput {
        let removed = self.mapper.take().map(MapperHandle::finish).unwrap_or_default();
        self.output.keyframes = removed
            .into_iter()
            .map(|(_, t, pose)| TrajectoryEntry::from_pose(t, &pose))
            .collect();
        std::mem::take(&mut self.output)
    }
}

impl Drop for Odometry {
    fn drop(&mut self) {
        if let Some(m) = self.mapper.take() {
            m.finish();
        }
    }
}
