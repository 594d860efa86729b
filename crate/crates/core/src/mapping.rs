//! Sliding-window local mapping.
//!
//! The window holds up to `capacity` keyframes. Each new keyframe activates
//! reliable candidate edges of older keyframes, then all window poses and the
//! inverse depths of active edges are refined jointly by Gauss-Newton with
//! the depths eliminated through the Schur complement. Before the window
//! overflows one old keyframe is marginalized into a quadratic prior.
//!
//! The oldest keyframe in the window always fixes the gauge.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3x4, RowVector4, RowVector6, SymmetricEigen, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{backproject, point_twist_jacobian, project, project_jacobian, CameraIntrinsics, Pose};
use crate::imaging::{field_contains, field_lookup, PreprocessedFrame};
use crate::tracking::{huber_cost, huber_weight, EdgePixel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeState {
    Candidate,
    Active,
    Marginalized,
}

/// Tracking reference and window node.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u64,
    pub timestamp: f64,
    /// Camera-to-world transform.
    pub world_pose: Pose,
    /// Selected edges; inverse depths of active edges are refined in place.
    pub edges: Vec<EdgePixel>,
    /// Sensor inverse depth of each edge at insertion.
    pub measured_inv_depth: Vec<f64>,
    pub states: Vec<EdgeState>,
    pub frame: Arc<PreprocessedFrame>,
}

impl Keyframe {
    pub fn new(id: u64, timestamp: f64, world_pose: Pose, edges: Vec<EdgePixel>, frame: Arc<PreprocessedFrame>) -> Self {
        let states = vec![EdgeState::Candidate; edges.len()];
        Self {
            id,
            timestamp,
            world_pose,
            measured_inv_depth: edges.iter().map(|e| e.inv_depth).collect(),
            edges,
            states,
            frame,
        }
    }

    pub fn active_edges(&self) -> impl Iterator<Item = usize> + '_ {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == EdgeState::Active)
            .map(|(i, _)| i)
    }

    pub fn active_count(&self) -> usize {
        self.active_edges().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub capacity: usize,
    /// Gauss-Newton iterations per inserted keyframe.
    pub iterations: usize,
    /// Side of the square activation cells in pixels.
    pub activation_cell: u32,
    pub activation_max_angle_deg: f64,
    pub huber_delta: f64,
    /// Window residuals above this many pixels are treated as outliers.
    pub residual_threshold: f64,
    /// Relative standard deviation of the sensor inverse depth; each active
    /// edge is tied to its measurement with this uncertainty. Without it the
    /// window scale is unobservable. 0 disables the prior.
    pub depth_prior_sigma: f64,
    pub optimize_poses: bool,
    /// Also refine `fx, fy, cx, cy`.
    pub optimize_intrinsics: bool,
    pub damping: f64,
    pub max_halvings: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            capacity: 7,
            iterations: 6,
            activation_cell: 20,
            activation_max_angle_deg: 30.0,
            huber_delta: 1.0,
            residual_threshold: 5.0,
            depth_prior_sigma: 0.02,
            optimize_poses: true,
            optimize_intrinsics: false,
            damping: 1e-8,
            max_halvings: 5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(5..=7).contains(&self.capacity) {
            return Err(Error::Config(format!("window size {} outside [5, 7]", self.capacity)));
        }
        if self.activation_cell == 0
            || !(self.residual_threshold > 0.0)
            || !(self.huber_delta > 0.0)
            || !(self.depth_prior_sigma >= 0.0)
        {
            return Err(Error::Config("invalid window parameters".into()));
        }
        Ok(())
    }
}

/// Quadratic prior `1/2 d^T H d + b^T d` over pose increments
/// `d_k = log(T_k * T_k,lin^-1)` of the listed keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalizationPrior {
    pub ids: Vec<u64>,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub linearization: Vec<Pose>,
}

impl Default for MarginalizationPrior {
    fn default() -> Self {
        Self {
            ids: Vec::new(),
            hessian: DMatrix::zeros(0, 0),
            gradient: DVector::zeros(0),
            linearization: Vec::new(),
        }
    }
}

impl MarginalizationPrior {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacked increments of the current poses from the linearization point.
    pub fn delta(&self, pose_of: impl Fn(u64) -> Pose) -> DVector<f64> {
        let mut d = DVector::zeros(6 * self.ids.len());
        for (k, (&id, lin)) in self.ids.iter().zip(&self.linearization).enumerate() {
            let xi = pose_of(id).compose(&lin.inverse()).log();
            d.fixed_rows_mut::<6>(6 * k).copy_from(&xi);
        }
        d
    }

    pub fn cost(&self, pose_of: impl Fn(u64) -> Pose) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.delta(pose_of);
        0.5 * d.dot(&(&self.hessian * &d)) + self.gradient.dot(&d)
    }
}

/// Edge residual between a host and a target keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowResidual {
    pub host_id: u64,
    pub target_id: u64,
    pub edge: usize,
    pub residual: f64,
    pub jac_host: RowVector6<f64>,
    pub jac_target: RowVector6<f64>,
    pub jac_depth: f64,
    /// Derivative with respect to `(fx, fy, cx, cy)`.
    pub jac_intrinsics: RowVector4<f64>,
    pub weight: f64,
}

/// Reprojects edge `edge` of `host` into `target` using the given camera-to-
/// world poses; `None` when out of view.
pub fn window_residual(
    host: &Keyframe,
    host_pose: &Pose,
    target: &Keyframe,
    target_pose: &Pose,
    edge: usize,
    inv_depth: f64,
    intr: &CameraIntrinsics,
    huber_delta: f64,
) -> Option<WindowResidual> {
    let e = &host.edges[edge];
    let xh = backproject(&e.pixel(), inv_depth, intr).ok()?;
    let xw = host_pose.transform_point(&xh);
    let world_to_target = target_pose.inverse();
    let xt = world_to_target.transform_point(&xw);
    let uv = project(&xt, intr)?;
    let field = target.frame.pyramid.level(0);
    if !field_contains(field, &uv) {
        return None;
    }
    let s = field_lookup(field, &uv).ok()?;
    let g = s.gradient.transpose();
    let gj = g * project_jacobian(&xt, intr);
    let a = gj * world_to_target.rotation();
    let dxw = point_twist_jacobian(&xw);
    let jac_host = a * dxw;
    let jac_target = -jac_host;
    let r_th = world_to_target.rotation() * host_pose.rotation();
    let jac_depth = (gj * r_th * (-xh / inv_depth))[0];

    let (u, v) = (e.x as f64, e.y as f64);
    let dxh_dc = Matrix3x4::new(
        -(u - intr.cx) / (intr.fx * intr.fx * inv_depth),
        0.0,
        -1.0 / (intr.fx * inv_depth),
        0.0,
        0.0,
        -(v - intr.cy) / (intr.fy * intr.fy * inv_depth),
        0.0,
        -1.0 / (intr.fy * inv_depth),
        0.0,
        0.0,
        0.0,
        0.0,
    );
    let direct = RowVector4::new(g[0] * xt.x / xt.z, g[1] * xt.y / xt.z, g[0], g[1]);
    let jac_intrinsics = direct + gj * r_th * dxh_dc;

    Some(WindowResidual {
        host_id: host.id,
        target_id: target.id,
        edge,
        residual: s.distance,
        jac_host,
        jac_target,
        jac_depth,
        jac_intrinsics,
        weight: huber_weight(s.distance, huber_delta),
    })
}

/// Candidate edge reprojected into the newest keyframe for activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationCandidate {
    pub host_id: u64,
    pub edge: usize,
    /// Reprojected position in the new keyframe.
    pub pixel: Vector2<f64>,
    pub residual: f64,
    /// Cosine of the angle between the reprojected gradient direction and
    /// the gradient at the nearest edge in the new keyframe.
    pub cos_angle: f64,
    pub track_age: u32,
}

/// Picks at most one candidate per `cell` x `cell` grid cell: among those
/// with residual not above the median of all residuals and gradient angle
/// within `max_angle_deg`, the one with the greatest track age. Ties go to
/// the older host, then to the lower edge index. Returns indices into
/// `candidates`.
pub fn choose_activations(candidates: &[ActivationCandidate], cell: u32, max_angle_deg: f64) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut residuals: Vec<f64> = candidates.iter().map(|c| c.residual).collect();
    residuals.sort_by(f64::total_cmp);
    let n = residuals.len();
    let median = if n % 2 == 1 {
        residuals[n / 2]
    } else {
        0.5 * (residuals[n / 2 - 1] + residuals[n / 2])
    };
    let min_cos = max_angle_deg.to_radians().cos();
    let cell = cell as f64;

    let mut best: std::collections::BTreeMap<(i64, i64), usize> = Default::default();
    for (i, c) in candidates.iter().enumerate() {
        if c.residual > median || c.cos_angle < min_cos {
            continue;
        }
        let key = ((c.pixel.x / cell).floor() as i64, (c.pixel.y / cell).floor() as i64);
        let better = match best.get(&key) {
            None => true,
            Some(&j) => {
                let o = &candidates[j];
                (c.track_age, std::cmp::Reverse(c.host_id), std::cmp::Reverse(c.edge))
                    > (o.track_age, std::cmp::Reverse(o.host_id), std::cmp::Reverse(o.edge))
            }
        };
        if better {
            best.insert(key, i);
        }
    }
    best.into_values().collect()
}

/// Normal equations of the window with the inverse depths kept separate.
///
/// Global variables are the free poses (6 each, window order) followed by
/// the intrinsics when enabled; `h_depth` is the diagonal depth block.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSystem {
    pub h_global: DMatrix<f64>,
    pub b_global: DVector<f64>,
    pub h_cross: DMatrix<f64>,
    pub h_depth: DVector<f64>,
    pub b_depth: DVector<f64>,
}

impl WindowSystem {
    /// Solves `H x = -b` by eliminating the depths first.
    pub fn solve_schur(&self, damping: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let g = self.h_global.nrows();
        let m = self.h_depth.len();
        let inv_dd: Vec<f64> = self.h_depth.iter().map(|d| 1.0 / (d + damping)).collect();
        let mut s = self.h_global.clone();
        let mut rhs = self.b_global.clone();
        for d in 0..m {
            let col = self.h_cross.column(d);
            s.ger(-inv_dd[d], &col, &col, 1.0);
            rhs.axpy(-inv_dd[d] * self.b_depth[d], &col, 1.0);
        }
        s += DMatrix::identity(g, g) * damping;
        let dg = if g == 0 {
            DVector::zeros(0)
        } else {
            -(s.cholesky()?.solve(&rhs))
        };
        let cross_t_dg = self.h_cross.tr_mul(&dg);
        let dd = DVector::from_fn(m, |d, _| -(self.b_depth[d] + cross_t_dg[d]) * inv_dd[d]);
        Some((dg, dd))
    }

    /// Reference solve of the assembled full system.
    pub fn solve_dense(&self, damping: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let g = self.h_global.nrows();
        let m = self.h_depth.len();
        let n = g + m;
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (g, g)).copy_from(&self.h_global);
        h.view_mut((0, g), (g, m)).copy_from(&self.h_cross);
        h.view_mut((g, 0), (m, g)).copy_from(&self.h_cross.transpose());
        for d in 0..m {
            h[(g + d, g + d)] = self.h_depth[d];
        }
        h += DMatrix::identity(n, n) * damping;
        let mut b = DVector::zeros(n);
        b.rows_mut(0, g).copy_from(&self.b_global);
        b.rows_mut(g, m).copy_from(&self.b_depth);
        let x = -(h.lu().solve(&b)?);
        Some((x.rows(0, g).into_owned(), x.rows(g, m).into_owned()))
    }
}

/// Eliminates `marg` from the quadratic `1/2 x^T H x + b^T x`, returning the
/// reduced system over `keep`. The marginalized block is inverted through
/// its eigen-decomposition with near-zero modes dropped.
pub fn schur_marginalize(h: &DMatrix<f64>, b: &DVector<f64>, keep: &[usize], marg: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let hkk = h.select_rows(keep).select_columns(keep);
    let bk = b.select_rows(keep);
    if marg.is_empty() {
        return (hkk, bk);
    }
    let hmm = h.select_rows(marg).select_columns(marg);
    let hkm = h.select_rows(keep).select_columns(marg);
    let bm = b.select_rows(marg);
    let inv = pseudo_inverse_sym(&hmm);
    let reduced_h = &hkk - &hkm * &inv * hkm.transpose();
    let reduced_b = &bk - &hkm * (&inv * &bm);
    let sym = (&reduced_h + reduced_h.transpose()) * 0.5;
    (sym, reduced_b)
}

fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = max * 1e-12 * m.nrows() as f64;
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Projects a symmetric matrix onto the PSD cone. The flag reports
/// negative eigenvalues beyond round-off relative to the largest one.
pub fn clamp_psd(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if h.is_empty() {
        return (h.clone(), false);
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, false);
    }
    let scale = eig.eigenvalues.amax();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    (
        &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose(),
        min < -1e-9 * scale,
    )
}

/// Current values of all window variables.
#[derive(Debug, Clone, PartialEq)]
struct Estimate {
    poses: Vec<Pose>,
    depths: Vec<Vec<f64>>,
    intrinsics: CameraIntrinsics,
}

/// Statistics of one window optimization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowStats {
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub residuals: usize,
    pub active_edges: usize,
    pub last_step_norm: f64,
    /// Set when the normal system could not be solved.
    pub aborted: bool,
    /// Cost after every accepted iteration, starting with the initial one.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarginalizationReport {
    pub victim: u64,
    pub marginalized_edges: usize,
    pub residuals: usize,
    pub clamped: bool,
}

/// Result of inserting one keyframe.
#[derive(Debug, Clone, Default)]
pub struct MappingReport {
    pub activated: usize,
    pub optimization: Option<WindowStats>,
    pub marginalization: Option<MarginalizationReport>,
    /// Keyframe that left the window, with its final refined pose.
    pub removed: Option<(u64, f64, Pose)>,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub keyframes: Vec<Keyframe>,
    pub prior: MarginalizationPrior,
    pub intrinsics: CameraIntrinsics,
    pub config: WindowConfig,
}

impl SlidingWindow {
    pub fn new(intrinsics: CameraIntrinsics, config: WindowConfig) -> Self {
        Self {
            keyframes: Vec::new(),
            prior: MarginalizationPrior::default(),
            intrinsics,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }

    pub fn keyframe(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn keyframe_mut(&mut self, id: u64) -> Option<&mut Keyframe> {
        self.keyframes.iter_mut().find(|k| k.id == id)
    }

    /// Adds a keyframe, activates edges, optimizes and marginalizes when the
    /// window is full.
    pub fn insert_keyframe(&mut self, kf: Keyframe) -> MappingReport {
        self.keyframes.push(kf);
        let mut report = MappingReport {
            activated: self.activate_edges().len(),
            ..MappingReport::default()
        };
        if self.len() >= 2 && self.keyframes.iter().any(|k| k.active_count() > 0) {
            report.optimization = Some(self.optimize(self.config.iterations));
        }
        if let Some(victim) = self.choose_marginalization_victim() {
            let kf = self.keyframe(victim).map(|k| (k.id, k.timestamp, k.world_pose));
            match self.marginalize_keyframe(victim) {
                Ok(m) => report.marginalization = Some(m),
                Err(e) => warn!("marginalization of keyframe {victim} failed: {e}"),
            }
            report.removed = kf;
        }
        report
    }

    /// Reprojects candidate edges of older keyframes into the newest one and
    /// activates at most one per grid cell.
    pub fn activate_edges(&mut self) -> Vec<(u64, usize)> {
        let Some(new) = self.keyframes.last() else {
            return Vec::new();
        };
        let intr = self.intrinsics;
        let new_pose_inv = new.world_pose.inverse();
        let field = new.frame.pyramid.level(0);
        let mut candidates = Vec::new();
        for host in &self.keyframes[..self.keyframes.len() - 1] {
            let rel = new_pose_inv.compose(&host.world_pose);
            for (i, e) in host.edges.iter().enumerate() {
                if host.states[i] != EdgeState::Candidate {
                    continue;
                }
                let Ok(xh) = backproject(&e.pixel(), e.inv_depth, &intr) else {
                    continue;
                };
                let Some(uv) = project(&rel.transform_point(&xh), &intr) else {
                    continue;
                };
                if !field_contains(field, &uv) {
                    continue;
                }
                let Ok(s) = field_lookup(field, &uv) else {
                    continue;
                };
                let along = backproject(&(e.pixel() + e.gradient_dir), e.inv_depth, &intr)
                    .ok()
                    .and_then(|x| project(&rel.transform_point(&x), &intr))
                    .map(|p| p - uv)
                    .filter(|d| d.norm() > 1e-9)
                    .map(|d| d.normalize())
                    .unwrap_or(e.gradient_dir);
                let current = new.frame.edges.direction_at_index(s.nearest_index as usize);
                candidates.push(ActivationCandidate {
                    host_id: host.id,
                    edge: i,
                    pixel: uv,
                    residual: s.distance,
                    cos_angle: along.dot(&current),
                    track_age: e.track_age,
                });
            }
        }
        let chosen = choose_activations(&candidates, self.config.activation_cell, self.config.activation_max_angle_deg);
        let mut out = Vec::with_capacity(chosen.len());
        for i in chosen {
            let c = candidates[i];
            if let Some(kf) = self.keyframe_mut(c.host_id) {
                kf.states[c.edge] = EdgeState::Active;
                out.push((c.host_id, c.edge));
            }
        }
        out
    }

    fn estimate(&self) -> Estimate {
        Estimate {
            poses: self.keyframes.iter().map(|k| k.world_pose).collect(),
            depths: self
                .keyframes
                .iter()
                .map(|k| k.edges.iter().map(|e| e.inv_depth).collect())
                .collect(),
            intrinsics: self.intrinsics,
        }
    }

    fn apply(&mut self, est: Estimate) {
        for ((kf, pose), depths) in self.keyframes.iter_mut().zip(est.poses).zip(est.depths) {
            kf.world_pose = pose;
            for (e, d) in kf.edges.iter_mut().zip(depths) {
                e.inv_depth = d;
            }
        }
        self.intrinsics = est.intrinsics;
    }

    fn active_keys(&self) -> Vec<(usize, usize)> {
        self.keyframes
            .iter()
            .enumerate()
            .flat_map(|(h, k)| k.active_edges().map(move |e| (h, e)))
            .collect()
    }

    /// Inlier residuals of the given edges against every other keyframe and
    /// the truncated robust cost they incur.
    fn residuals_for(&self, est: &Estimate, keys: &[(usize, usize)]) -> (Vec<(usize, WindowResidual)>, f64) {
        let threshold = self.config.residual_threshold;
        let delta = self.config.huber_delta;
        let outlier = huber_cost(threshold, delta);
        let mut out = Vec::new();
        let mut cost = 0.0;
        for (slot, &(h, e)) in keys.iter().enumerate() {
            for t in 0..self.keyframes.len() {
                if t == h {
                    continue;
                }
                let r = window_residual(
                    &self.keyframes[h],
                    &est.poses[h],
                    &self.keyframes[t],
                    &est.poses[t],
                    e,
                    est.depths[h][e],
                    &est.intrinsics,
                    delta,
                )
                .filter(|r| r.residual.abs() <= threshold);
                match r {
                    Some(r) => {
                        cost += huber_cost(r.residual, delta);
                        out.push((slot, r));
                    }
                    None => cost += outlier,
                }
            }
        }
        (out, cost)
    }

    fn prior_cost(&self, est: &Estimate) -> f64 {
        self.prior.cost(|id| est.poses[self.index_of(id).unwrap_or(0)])
    }

    /// Whitened residual and Jacobian of the depth measurement of `(h, e)`.
    fn depth_prior(&self, est: &Estimate, (h, e): (usize, usize)) -> Option<(f64, f64)> {
        let measured = self.keyframes[h].measured_inv_depth[e];
        let s = self.config.depth_prior_sigma * measured;
        (s > 0.0).then(|| ((est.depths[h][e] - measured) / s, 1.0 / s))
    }

    fn depth_prior_cost(&self, est: &Estimate, keys: &[(usize, usize)]) -> f64 {
        keys.iter()
            .filter_map(|&k| self.depth_prior(est, k))
            .map(|(r, _)| 0.5 * r * r)
            .sum()
    }

    /// Free pose slots: every window index except the gauge-holding oldest.
    fn free_poses(&self) -> Vec<usize> {
        if !self.config.optimize_poses {
            return Vec::new();
        }
        (1..self.keyframes.len()).collect()
    }

    /// Linearizes the window at `est` over the active edges `keys`.
    fn build_system(&self, est: &Estimate, keys: &[(usize, usize)], residuals: &[(usize, WindowResidual)]) -> WindowSystem {
        let free = self.free_poses();
        let mut slot_of = vec![None; self.keyframes.len()];
        for (k, &p) in free.iter().enumerate() {
            slot_of[p] = Some(6 * k);
        }
        let intr_offset = 6 * free.len();
        let g = intr_offset + if self.config.optimize_intrinsics { 4 } else { 0 };
        let m = keys.len();
        let mut sys = WindowSystem {
            h_global: DMatrix::zeros(g, g),
            b_global: DVector::zeros(g),
            h_cross: DMatrix::zeros(g, m),
            h_depth: DVector::zeros(m),
            b_depth: DVector::zeros(m),
        };
        let mut jg = DVector::zeros(g);
        for (slot, r) in residuals {
            let h = self.index_of(r.host_id).unwrap_or(0);
            let t = self.index_of(r.target_id).unwrap_or(0);
            jg.fill(0.0);
            if let Some(o) = slot_of[h] {
                jg.rows_mut(o, 6).copy_from(&r.jac_host.transpose());
            }
            if let Some(o) = slot_of[t] {
                let mut v = jg.rows_mut(o, 6);
                v += r.jac_target.transpose();
            }
            if self.config.optimize_intrinsics {
                jg.rows_mut(intr_offset, 4).copy_from(&r.jac_intrinsics.transpose());
            }
            let w = r.weight;
            sys.h_global.ger(w, &jg, &jg, 1.0);
            sys.b_global.axpy(w * r.residual, &jg, 1.0);
            let mut col = sys.h_cross.column_mut(*slot);
            col.axpy(w * r.jac_depth, &jg, 1.0);
            sys.h_depth[*slot] += w * r.jac_depth * r.jac_depth;
            sys.b_depth[*slot] += w * r.jac_depth * r.residual;
        }
        for (slot, &k) in keys.iter().enumerate() {
            if let Some((r, j)) = self.depth_prior(est, k) {
                sys.h_depth[slot] += j * j;
                sys.b_depth[slot] += j * r;
            }
        }

        if !self.prior.is_empty() && !free.is_empty() {
            let delta = self.prior.delta(|id| est.poses[self.index_of(id).unwrap_or(0)]);
            let grad = &self.prior.hessian * &delta + &self.prior.gradient;
            for (a, &ida) in self.prior.ids.iter().enumerate() {
                let Some(oa) = self.index_of(ida).and_then(|i| slot_of[i]) else {
                    continue;
                };
                let mut bv = sys.b_global.rows_mut(oa, 6);
                bv += grad.rows(6 * a, 6);
                for (b, &idb) in self.prior.ids.iter().enumerate() {
                    let Some(ob) = self.index_of(idb).and_then(|i| slot_of[i]) else {
                        continue;
                    };
                    let mut hv = sys.h_global.view_mut((oa, ob), (6, 6));
                    hv += self.prior.hessian.view((6 * a, 6 * b), (6, 6));
                }
            }
        }
        sys
    }

    /// Linear system at the current estimate over all active edges.
    pub fn linear_system(&self) -> WindowSystem {
        let est = self.estimate();
        let keys = self.active_keys();
        let (residuals, _) = self.residuals_for(&est, &keys);
        self.build_system(&est, &keys, &residuals)
    }

    fn step(&self, est: &Estimate, keys: &[(usize, usize)], dg: &DVector<f64>, dd: &DVector<f64>, scale: f64) -> Option<Estimate> {
        let mut next = est.clone();
        for (k, p) in self.free_poses().into_iter().enumerate() {
            let xi = dg.fixed_rows::<6>(6 * k).into_owned() * scale;
            next.poses[p] = Pose::exp(&xi).compose(&est.poses[p]);
        }
        if self.config.optimize_intrinsics {
            let o = 6 * self.free_poses().len();
            let dc: Vector4<f64> = dg.fixed_rows::<4>(o).into_owned() * scale;
            next.intrinsics.fx += dc[0];
            next.intrinsics.fy += dc[1];
            next.intrinsics.cx += dc[2];
            next.intrinsics.cy += dc[3];
            next.intrinsics.validate().ok()?;
        }
        for (slot, &(h, e)) in keys.iter().enumerate() {
            let d = est.depths[h][e] + scale * dd[slot];
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            next.depths[h][e] = d;
        }
        Some(next)
    }

    /// Gauss-Newton over poses, active inverse depths and optionally the
    /// intrinsics, with step halving on cost increase.
    pub fn optimize(&mut self, iterations: usize) -> WindowStats {
        let keys = self.active_keys();
        let mut est = self.estimate();
        let (mut residuals, data_cost) = self.residuals_for(&est, &keys);
        let mut cost = data_cost + self.prior_cost(&est) + self.depth_prior_cost(&est, &keys);
        let mut stats = WindowStats {
            initial_cost: cost,
            active_edges: keys.len(),
            cost_history: vec![cost],
            ..WindowStats::default()
        };
        for _ in 0..iterations {
            stats.iterations += 1;
            let sys = self.build_system(&est, &keys, &residuals);
            let Some((dg, dd)) = sys.solve_schur(self.config.damping) else {
                warn!("window normal system is singular; keeping previous state");
                stats.aborted = true;
                break;
            };
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=self.config.max_halvings {
                if let Some(trial) = self.step(&est, &keys, &dg, &dd, scale) {
                    let (r, c) = self.residuals_for(&trial, &keys);
                    let c = c + self.prior_cost(&trial) + self.depth_prior_cost(&trial, &keys);
                    if c <= cost {
                        accepted = Some((trial, r, c));
                        break;
                    }
                }
                scale *= 0.5;
            }
            let Some((trial, r, c)) = accepted else {
                break;
            };
            stats.accepted += 1;
            stats.last_step_norm = scale * (dg.norm_squared() + dd.norm_squared()).sqrt();
            est = trial;
            residuals = r;
            cost = c;
            stats.cost_history.push(cost);
            if stats.last_step_norm < 1e-10 {
                break;
            }
        }
        stats.final_cost = cost;
        stats.residuals = residuals.len();
        self.apply(est);
        stats
    }

    /// Fraction of a keyframe's edges that project into at least one other
    /// window keyframe.
    fn visible_fraction(&self, idx: usize) -> f64 {
        let kf = &self.keyframes[idx];
        if kf.edges.is_empty() {
            return 0.0;
        }
        let intr = self.intrinsics;
        let rels: Vec<Pose> = self
            .keyframes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(_, o)| o.world_pose.inverse().compose(&kf.world_pose))
            .collect();
        let visible = kf
            .edges
            .iter()
            .filter(|e| {
                let Ok(x) = backproject(&e.pixel(), e.inv_depth, &intr) else {
                    return false;
                };
                rels.iter()
                    .any(|t| project(&t.transform_point(&x), &intr).is_some_and(|p| intr.contains(&p)))
            })
            .count();
        visible as f64 / kf.edges.len() as f64
    }

    /// Keyframe to marginalize once the window is full. The newest two are
    /// exempt; the rest are scored by distance to the newest keyframe and
    /// by how few of their edges the other keyframes still see.
    pub fn choose_marginalization_victim(&self) -> Option<u64> {
        let n = self.keyframes.len();
        if n < self.config.capacity || n < 3 {
            return None;
        }
        let newest = self.keyframes[n - 1].world_pose.translation();
        let eligible = 0..n - 2;
        let dists: Vec<f64> = eligible
            .clone()
            .map(|i| (self.keyframes[i].world_pose.translation() - newest).norm())
            .collect();
        let max_dist = dists.iter().cloned().fold(0.0, f64::max);
        let mut best: Option<(usize, f64)> = None;
        for (slot, i) in eligible.enumerate() {
            let nd = if max_dist > 0.0 { dists[slot] / max_dist } else { 0.0 };
            let score = 0.5 * nd + 0.5 * (1.0 - self.visible_fraction(i));
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| self.keyframes[i].id)
    }

    /// Marginalizes the victim's active edges, active edges no longer seen by
    /// the newest two keyframes, and then the victim pose itself. The result
    /// replaces the window prior and the victim leaves the window.
    pub fn marginalize_keyframe(&mut self, victim: u64) -> Result<MarginalizationReport> {
        let vi = self
            .index_of(victim)
            .ok_or_else(|| Error::Config(format!("keyframe {victim} not in window")))?;
        let n = self.keyframes.len();
        let est = self.estimate();
        let recent: Vec<usize> = (n.saturating_sub(2)..n).collect();

        let all = self.active_keys();
        let (all_res, _) = self.residuals_for(&est, &all);
        let mut seen_recently = vec![false; all.len()];
        for (slot, r) in &all_res {
            let t = self.index_of(r.target_id).unwrap_or(0);
            if recent.contains(&t) {
                seen_recently[*slot] = true;
            }
        }
        let marg_keys: Vec<(usize, usize)> = all
            .iter()
            .enumerate()
            .filter(|(slot, &(h, _))| h == vi || (!recent.contains(&h) && !seen_recently[*slot]))
            .map(|(_, &k)| k)
            .collect();
        let (marg_res, _) = self.residuals_for(&est, &marg_keys);

        // Dense system over all window poses followed by the marginalized depths.
        let p = 6 * n;
        let m = marg_keys.len();
        let mut h = DMatrix::zeros(p + m, p + m);
        let mut b = DVector::zeros(p + m);
        let mut j = DVector::zeros(p + m);
        for (slot, r) in &marg_res {
            j.fill(0.0);
            let hi = self.index_of(r.host_id).unwrap_or(0);
            let ti = self.index_of(r.target_id).unwrap_or(0);
            j.rows_mut(6 * hi, 6).copy_from(&r.jac_host.transpose());
            let mut tv = j.rows_mut(6 * ti, 6);
            tv += r.jac_target.transpose();
            j[p + slot] = r.jac_depth;
            h.ger(r.weight, &j, &j, 1.0);
            b.axpy(r.weight * r.residual, &j, 1.0);
        }
        for (slot, &k) in marg_keys.iter().enumerate() {
            if let Some((r, jd)) = self.depth_prior(&est, k) {
                h[(p + slot, p + slot)] += jd * jd;
                b[p + slot] += jd * r;
            }
        }
        if !self.prior.is_empty() {
            let delta = self.prior.delta(|id| est.poses[self.index_of(id).unwrap_or(0)]);
            let grad = &self.prior.hessian * &delta + &self.prior.gradient;
            for (a, &ida) in self.prior.ids.iter().enumerate() {
                let oa = 6 * self.index_of(ida).unwrap_or(0);
                let mut bv = b.rows_mut(oa, 6);
                bv += grad.rows(6 * a, 6);
                for (c, &idc) in self.prior.ids.iter().enumerate() {
                    let oc = 6 * self.index_of(idc).unwrap_or(0);
                    let mut hv = h.view_mut((oa, oc), (6, 6));
                    hv += self.prior.hessian.view((6 * a, 6 * c), (6, 6));
                }
            }
        }

        let depth_idx: Vec<usize> = (p..p + m).collect();
        let pose_idx: Vec<usize> = (0..p).collect();
        let (hp, bp) = schur_marginalize(&h, &b, &pose_idx, &depth_idx);

        let keep: Vec<usize> = (0..n).filter(|&i| i != vi).flat_map(|i| 6 * i..6 * i + 6).collect();
        let victim_block: Vec<usize> = (6 * vi..6 * vi + 6).collect();
        // The gauge-holding oldest keyframe is a constant: condition on it.
        let (hr, br) = if vi == 0 {
            (hp.select_rows(&keep).select_columns(&keep), bp.select_rows(&keep))
        } else {
            schur_marginalize(&hp, &bp, &keep, &victim_block)
        };
        let (hr, clamped) = clamp_psd(&hr);
        if clamped {
            warn!("marginalization prior was indefinite; clamped negative eigenvalues");
        }

        let survivors: Vec<usize> = (0..n).filter(|&i| i != vi).collect();
        let informative = hr.iter().any(|v| *v != 0.0) || br.iter().any(|v| *v != 0.0);
        self.prior = if informative {
            MarginalizationPrior {
                ids: survivors.iter().map(|&i| self.keyframes[i].id).collect(),
                hessian: hr,
                gradient: br,
                linearization: survivors.iter().map(|&i| est.poses[i]).collect(),
            }
        } else {
            MarginalizationPrior::default()
        };

        for &(hk, e) in &marg_keys {
            self.keyframes[hk].states[e] = EdgeState::Marginalized;
        }
        self.keyframes.remove(vi);
        Ok(MarginalizationReport {
            victim,
            marginalized_edges: m,
            residuals: marg_res.len(),
            clamped,
        })
    }

    /// Refined camera-to-world poses of the current window.
    pub fn poses(&self) -> Vec<(u64, Pose)> {
        self.keyframes.iter().map(|k| (k.id, k.world_pose)).collect()
    }
}

/// Helper for tests and oracles: a world point seen by a keyframe pixel.
pub fn world_point(kf: &Keyframe, edge: usize, intr: &CameraIntrinsics) -> Option<Vector3<f64>> {
    let e = &kf.edges[edge];
    backproject(&e.pixel(), e.inv_depth, intr)
        .ok()
        .map(|x| kf.world_pose.transform_point(&x))
}
