//! Frame-to-keyframe tracking: coarse-to-fine, Huber-weighted Gauss-Newton
//! over distance-field residuals with residual and gradient-consistency
//! outlier rejection, followed by the keyframe decision.

use nalgebra::{Matrix6, RowVector6, Vector2, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{backproject, point_twist_jacobian, project, project_jacobian, CameraIntrinsics, Pose};
use crate::imaging::{field_contains, field_lookup, DistanceField, EdgeMap, PreprocessedFrame, PYRAMID_LEVELS};
use crate::mapping::Keyframe;

/// Minimum number of residuals for a well-posed 6-dof solve.
pub const MIN_RESIDUALS: usize = 6;

/// An edge pixel of a keyframe with its depth and appearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgePixel {
    pub x: u32,
    pub y: u32,
    pub inv_depth: f64,
    pub gradient_dir: Vector2<f64>,
    pub gradient_mag: f64,
    /// Number of frames in which this edge was an inlier.
    pub track_age: u32,
}

impl EdgePixel {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingConfig {
    /// Residual rejection thresholds in level-local pixels, indexed by level.
    pub level_thresholds: [f64; PYRAMID_LEVELS],
    /// Minimum inner product of matched gradient directions.
    pub gradient_margin: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Conditioning term added to the normal matrix.
    pub damping: f64,
    /// Maximum number of step halvings when the cost increases.
    pub max_halvings: usize,
    /// Coarsest pyramid level used; 0 disables coarse-to-fine.
    pub coarsest_level: usize,
    pub keyframe_flow_weight: f64,
    pub keyframe_translation_flow_weight: f64,
    pub keyframe_correspondence_ratio: f64,
    pub keyframe_max_interval: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            level_thresholds: [2.5, 5.0, 10.0],
            gradient_margin: 0.6,
            huber_delta: 1.0,
            max_iterations: 20,
            convergence_eps: 1e-6,
            damping: 1e-8,
            max_halvings: 5,
            coarsest_level: PYRAMID_LEVELS - 1,
            keyframe_flow_weight: 1.0 / 12.0,
            keyframe_translation_flow_weight: 1.0 / 12.0,
            keyframe_correspondence_ratio: 0.3,
            keyframe_max_interval: 1.0,
        }
    }
}

impl TrackingConfig {
    /// Checks parameter ranges; `distance_cap` is the per-level saturation of
    /// the distance fields.
    pub fn validate(&self, distance_cap: f64) -> Result<()> {
        if !(self.gradient_margin > 0.0 && self.gradient_margin <= 1.0) {
            return Err(Error::Config(format!("gradient margin {} outside (0, 1]", self.gradient_margin)));
        }
        for (level, &t) in self.level_thresholds.iter().enumerate() {
            if !(t > 0.0) || t > distance_cap {
                return Err(Error::Config(format!(
                    "level {level} residual threshold {t} must be in (0, {distance_cap}]"
                )));
            }
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber delta must be positive".into()));
        }
        if self.coarsest_level >= PYRAMID_LEVELS {
            return Err(Error::Config(format!("coarsest level must be below {PYRAMID_LEVELS}")));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max iterations must be positive".into()));
        }
        Ok(())
    }
}

/// One reprojected edge with its residual against the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub edge: usize,
    pub residual: f64,
    pub jacobian: RowVector6<f64>,
    pub weight: f64,
    /// Nearest edge in level-local pixels.
    pub nearest: Vector2<f64>,
    /// Linear level-0 index of the nearest edge.
    pub nearest_index: u32,
}

pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

pub fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Residuals of `edges` warped by `pose` into `field` (which may be any
/// pyramid level; `intr` are the level-0 intrinsics). Edges leaving the view
/// are skipped.
pub fn compute_residuals(
    edges: &[EdgePixel],
    pose: &Pose,
    field: &DistanceField,
    intr: &CameraIntrinsics,
    huber_delta: f64,
) -> Result<Vec<Correspondence>> {
    let level_intr = intr.at_level(field.level());
    let mut out = Vec::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        if let Some(c) = residual_of(i, e, pose, field, intr, &level_intr, huber_delta) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::TrackingLost("all edges out of view".into()));
    }
    Ok(out)
}

fn residual_of(
    index: usize,
    edge: &EdgePixel,
    pose: &Pose,
    field: &DistanceField,
    intr: &CameraIntrinsics,
    level_intr: &CameraIntrinsics,
    huber_delta: f64,
) -> Option<Correspondence> {
    let x = pose.transform_point(&backproject(&edge.pixel(), edge.inv_depth, intr).ok()?);
    let uv = project(&x, level_intr)?;
    if !field_contains(field, &uv) {
        return None;
    }
    let s = field_lookup(field, &uv).ok()?;
    let jacobian = s.gradient.transpose() * project_jacobian(&x, level_intr) * point_twist_jacobian(&x);
    Some(Correspondence {
        edge: index,
        residual: s.distance,
        jacobian,
        weight: huber_weight(s.distance, huber_delta),
        nearest: s.nearest,
        nearest_index: s.nearest_index,
    })
}

/// True when the reference gradient and the current gradient at the matched
/// edge are consistent enough.
pub fn gradient_consistent(reference: &Vector2<f64>, current: &Vector2<f64>, margin: f64) -> bool {
    reference.dot(current) >= margin
}

/// Drops correspondences over the level threshold or with inconsistent
/// gradient directions.
pub fn reject_outliers(
    correspondences: Vec<Correspondence>,
    level: usize,
    config: &TrackingConfig,
    ref_edges: &[EdgePixel],
    current: &EdgeMap,
) -> Result<Vec<Correspondence>> {
    let threshold = config.level_thresholds[level];
    let kept: Vec<_> = correspondences
        .into_iter()
        .filter(|c| c.residual.abs() <= threshold)
        .filter(|c| {
            gradient_consistent(
                &ref_edges[c.edge].gradient_dir,
                &current.direction_at_index(c.nearest_index as usize),
                config.gradient_margin,
            )
        })
        .collect();
    if kept.len() < MIN_RESIDUALS {
        return Err(Error::DegenerateSystem(kept.len()));
    }
    Ok(kept)
}

/// Per-level solver statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelStats {
    pub iterations: usize,
    pub inliers: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
    pub inliers: Vec<Correspondence>,
    pub stats: LevelStats,
    /// Robust cost of every accepted iterate, starting with the initial pose.
    pub cost_history: Vec<f64>,
}

struct Evaluation {
    inliers: Vec<Correspondence>,
    cost: f64,
}

/// Robust cost over all reference edges: inliers pay their Huber cost, edges
/// that are out of view or rejected pay the cost of the level threshold.
fn evaluate(
    edges: &[EdgePixel],
    pose: &Pose,
    frame: &PreprocessedFrame,
    intr: &CameraIntrinsics,
    config: &TrackingConfig,
    level: usize,
) -> Evaluation {
    let field = frame.pyramid.level(level);
    let level_intr = intr.at_level(level);
    let threshold = config.level_thresholds[level];
    let outlier_cost = huber_cost(threshold, config.huber_delta);
    let mut inliers = Vec::with_capacity(edges.len());
    let mut cost = 0.0;
    for (i, e) in edges.iter().enumerate() {
        let c = residual_of(i, e, pose, field, intr, &level_intr, config.huber_delta).filter(|c| {
            c.residual.abs() <= threshold
                && gradient_consistent(
                    &e.gradient_dir,
                    &frame.edges.direction_at_index(c.nearest_index as usize),
                    config.gradient_margin,
                )
        });
        match c {
            Some(c) => {
                cost += huber_cost(c.residual, config.huber_delta);
                inliers.push(c);
            }
            None => cost += outlier_cost,
        }
    }
    Evaluation { inliers, cost }
}

fn normal_equations(inliers: &[Correspondence]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in inliers {
        let jt = c.jacobian.transpose();
        h += jt * c.jacobian * c.weight;
        g += jt * (c.weight * c.residual);
    }
    (h, g)
}

/// Gauss-Newton with step halving on one pyramid level.
pub fn gauss_newton_level(
    edges: &[EdgePixel],
    init_pose: &Pose,
    frame: &PreprocessedFrame,
    intr: &CameraIntrinsics,
    config: &TrackingConfig,
    level: usize,
) -> Result<LevelResult> {
    let mut pose = *init_pose;
    let mut current = evaluate(edges, &pose, frame, intr, config, level);
    if current.inliers.len() < MIN_RESIDUALS {
        return Err(Error::DegenerateSystem(current.inliers.len()));
    }
    let mut stats = LevelStats {
        initial_cost: current.cost,
        ..LevelStats::default()
    };
    let mut history = vec![current.cost];

    for _ in 0..config.max_iterations {
        stats.iterations += 1;
        let (h, g) = normal_equations(&current.inliers);
        let regularized = h + Matrix6::identity() * config.damping;
        let Some(chol) = regularized.cholesky() else {
            return Err(Error::TrackingLost("normal matrix not invertible".into()));
        };
        let mut step: Vector6<f64> = -chol.solve(&g);

        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let trial_pose = Pose::exp(&step).compose(&pose);
            let trial = evaluate(edges, &trial_pose, frame, intr, config, level);
            if trial.inliers.len() >= MIN_RESIDUALS && trial.cost <= current.cost {
                accepted = Some((trial_pose, trial));
                break;
            }
            step *= 0.5;
        }
        let Some((next_pose, next)) = accepted else {
            stats.converged = false;
            break;
        };
        pose = next_pose;
        current = next;
        history.push(current.cost);
        if step.norm() < config.convergence_eps {
            stats.converged = true;
            break;
        }
    }

    let (h, _) = normal_equations(&current.inliers);
    let covariance = h
        .try_inverse()
        .or_else(|| (h + Matrix6::identity() * config.damping).try_inverse())
        .ok_or_else(|| Error::TrackingLost("singular information matrix".into()))?;
    stats.inliers = current.inliers.len();
    stats.final_cost = current.cost;
    Ok(LevelResult {
        pose,
        covariance,
        inliers: current.inliers,
        stats,
        cost_history: history,
    })
}

/// Optical-flow magnitudes used by the keyframe decision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowStats {
    /// RMS pixel displacement of inlier edges under the full motion.
    pub rms_flow: f64,
    /// Same with the rotation removed.
    pub rms_translation_flow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingResult {
    /// Pose mapping keyframe coordinates into the current frame.
    pub relative_pose: Pose,
    pub covariance: Matrix6<f64>,
    pub inlier_count: usize,
    pub mean_residual: f64,
    pub converged: bool,
    pub flow: FlowStats,
    /// Iterations per level, indexed by level.
    pub iterations: [usize; PYRAMID_LEVELS],
    /// Indices into the keyframe edges of the final level-0 inliers.
    pub inlier_edges: Vec<usize>,
}

pub fn flow_stats(edges: &[EdgePixel], inliers: &[usize], pose: &Pose, intr: &CameraIntrinsics) -> FlowStats {
    let trans = pose.translation_only();
    let (mut full, mut tonly, mut n) = (0.0, 0.0, 0usize);
    for &i in inliers {
        let e = &edges[i];
        let Ok(x) = backproject(&e.pixel(), e.inv_depth, intr) else {
            continue;
        };
        let (Some(a), Some(b)) = (project(&pose.transform_point(&x), intr), project(&trans.transform_point(&x), intr)) else {
            continue;
        };
        full += (a - e.pixel()).norm_squared();
        tonly += (b - e.pixel()).norm_squared();
        n += 1;
    }
    if n == 0 {
        return FlowStats::default();
    }
    FlowStats {
        rms_flow: (full / n as f64).sqrt(),
        rms_translation_flow: (tonly / n as f64).sqrt(),
    }
}

/// Tracks `frame` against the selected edges of `keyframe`, from the
/// coarsest level down to full resolution, starting at `prior`.
pub fn track_frame(
    keyframe: &Keyframe,
    frame: &PreprocessedFrame,
    prior: &Pose,
    intr: &CameraIntrinsics,
    config: &TrackingConfig,
) -> Result<TrackingResult> {
    track_edges(&keyframe.edges, frame, prior, intr, config)
}

/// [`track_frame`] on a bare edge list.
pub fn track_edges(
    edges: &[EdgePixel],
    frame: &PreprocessedFrame,
    prior: &Pose,
    intr: &CameraIntrinsics,
    config: &TrackingConfig,
) -> Result<TrackingResult> {
    if edges.len() < MIN_RESIDUALS {
        return Err(Error::DegenerateSystem(edges.len()));
    }
    if frame.pyramid.is_empty() {
        return Err(Error::TrackingLost("frame has no edges".into()));
    }
    let mut pose = *prior;
    let mut iterations = [0; PYRAMID_LEVELS];
    let mut finest = None;
    for level in (0..=config.coarsest_level).rev() {
        match gauss_newton_level(edges, &pose, frame, intr, config, level) {
            Ok(r) => {
                pose = r.pose;
                iterations[level] = r.stats.iterations;
                if level == 0 {
                    finest = Some(r);
                }
            }
            // Too few edges at a coarse level: refine on the next one.
            Err(Error::DegenerateSystem(_)) if level > 0 => continue,
            Err(Error::DegenerateSystem(n)) => {
                return Err(Error::TrackingLost(format!("only {n} inliers at full resolution")))
            }
            Err(e) => return Err(e),
        }
    }
    let finest = finest.ok_or_else(|| Error::TrackingLost("no result at full resolution".into()))?;
    let inlier_edges: Vec<usize> = finest.inliers.iter().map(|c| c.edge).collect();
    let mean_residual =
        finest.inliers.iter().map(|c| c.residual.abs()).sum::<f64>() / finest.inliers.len().max(1) as f64;
    Ok(TrackingResult {
        relative_pose: finest.pose,
        covariance: finest.covariance,
        inlier_count: finest.inliers.len(),
        mean_residual,
        converged: finest.stats.converged,
        flow: flow_stats(edges, &inlier_edges, &finest.pose, intr),
        iterations,
        inlier_edges,
    })
}

/// Whether the tracked frame should become a new keyframe.
///
/// `average_correspondences` is the running mean inlier count against the
/// current keyframe; `elapsed` is the time since that keyframe in seconds.
pub fn keyframe_decision(
    result: &TrackingResult,
    flow: &FlowStats,
    average_correspondences: f64,
    elapsed: f64,
    config: &TrackingConfig,
) -> bool {
    let flow_score =
        config.keyframe_flow_weight * flow.rms_flow + config.keyframe_translation_flow_weight * flow.rms_translation_flow;
    flow_score > 1.0
        || (result.inlier_count as f64) < config.keyframe_correspondence_ratio * average_correspondences
        || elapsed >= config.keyframe_max_interval
}
