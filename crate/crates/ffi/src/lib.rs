//! C ABI over the odometry pipeline.
//!
//! Every fallible call returns an [`EoStatus`]; on failure a message is
//! available from [`eo_last_error`] on the calling thread. Handles are opaque
//! and must be released with their `_destroy` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use edge_odometry::dataset::TrajectoryEntry;
use edge_odometry::evaluation::compute_ate;
use edge_odometry::geometry::CameraIntrinsics;
use edge_odometry::imaging::{DepthImage, GrayImage};
use edge_odometry::system::{Odometry, OdometryOutput, PipelineConfig};
use edge_odometry::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    TrackingLost = 4,
    Panic = 5,
}

/// Pinhole camera.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EoOptions {
    /// Run mapping on the calling thread.
    pub single_thread: bool,
    /// Track a selected edge subset instead of every edge with depth.
    pub selection: bool,
    pub edges_k: u32,
    pub window_size: u32,
    pub seed: u64,
}

/// Camera-to-world pose; quaternion order is x, y, z, w.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EoPose {
    pub timestamp: f64,
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

/// Opaque odometry session.
pub struct EoOdometry {
    camera: CameraIntrinsics,
    odometry: Option<Odometry>,
}

/// Opaque list of poses.
pub struct EoTrajectory {
    poses: Vec<EoPose>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

type Outcome = Result<(), (EoStatus, String)>;

fn guard(f: impl FnOnce() -> Outcome) -> EoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EoStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EoStatus::Panic
        }
    }
}

fn status_of(e: &Error) -> EoStatus {
    match e {
        Error::TrackingLost(_) | Error::DegenerateSystem(_) | Error::SelectionImpossible | Error::NoEdges => {
            EoStatus::TrackingLost
        }
        Error::Config(_) | Error::InvalidIntrinsics(_) | Error::InvalidImage(_) => EoStatus::InvalidArgument,
        _ => EoStatus::DataError,
    }
}

fn from_core(e: Error) -> (EoStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (EoStatus, String) {
    (EoStatus::NullPointer, format!("{name} is null"))
}

fn to_pose(e: &TrajectoryEntry) -> EoPose {
    let (translation, quaternion) = e.components();
    EoPose {
        timestamp: e.timestamp,
        translation,
        quaternion,
    }
}

fn to_entries(poses: &[EoPose]) -> Result<Vec<TrajectoryEntry>, (EoStatus, String)> {
    poses
        .iter()
        .map(|p| TrajectoryEntry::from_components(p.timestamp, p.translation, p.quaternion))
        .collect::<Result<_, _>>()
        .map_err(|e| (EoStatus::InvalidArgument, e.to_string()))
}

/// Defaults matching the command-line tool.
#[no_mangle]
pub extern "C" fn eo_options_default() -> EoOptions {
    let cfg = PipelineConfig::default();
    let sel = cfg.selection.unwrap_or_default();
    EoOptions {
        single_thread: false,
        selection: true,
        edges_k: sel.k as u32,
        window_size: cfg.window.capacity as u32,
        seed: sel.seed,
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn eo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn eo_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Creates a session. `options` may be null for defaults.
///
/// # Safety
/// `camera` must point to a valid camera, `options` to valid options or be
/// null, and `out` to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn eo_odometry_create(
    camera: *const EoCamera,
    options: *const EoOptions,
    out: *mut *mut EoOdometry,
) -> EoStatus {
    guard(|| {
        let camera = unsafe { camera.as_ref() }.ok_or_else(|| null("camera"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let options = unsafe { options.as_ref() }.copied().unwrap_or_else(|| eo_options_default());
        let intr = CameraIntrinsics::new(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height)
            .map_err(from_core)?;
        let mut cfg = PipelineConfig {
            single_thread: options.single_thread,
            ..PipelineConfig::default()
        };
        cfg.window.capacity = options.window_size as usize;
        if options.selection {
            let sel = cfg.selection.get_or_insert_with(Default::default);
            sel.k = options.edges_k as usize;
            sel.seed = options.seed;
        } else {
            cfg.selection = None;
        }
        let odometry = Odometry::new(cfg, intr).map_err(from_core)?;
        let handle = Box::new(EoOdometry {
            camera: intr,
            odometry: Some(odometry),
        });
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Releases a session; null is ignored.
///
/// # Safety
/// `handle` must come from [`eo_odometry_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eo_odometry_destroy(handle: *mut EoOdometry) {
    if !handle.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(unsafe { Box::from_raw(handle) })));
    }
}

/// Tracks one frame. `gray` holds `width * height` 8-bit intensities and
/// `depth` the same number of 16-bit values; meters are `depth / depth_scale`
/// and 0 marks a missing measurement. `pose_out` may be null.
///
/// # Safety
/// `handle` must be a live session; `gray` and `depth` must point to
/// `width * height` elements of the camera size.
#[no_mangle]
pub unsafe extern "C" fn eo_odometry_push_frame(
    handle: *mut EoOdometry,
    timestamp: f64,
    gray: *const u8,
    depth: *const u16,
    depth_scale: f64,
    pose_out: *mut EoPose,
) -> EoStatus {
    guard(|| {
        let h = unsafe { handle.as_mut() }.ok_or_else(|| null("handle"))?;
        if gray.is_null() {
            return Err(null("gray"));
        }
        if depth.is_null() {
            return Err(null("depth"));
        }
        if !(depth_scale > 0.0) {
            return Err((EoStatus::InvalidArgument, "depth scale must be positive".into()));
        }
        let (w, hgt) = (h.camera.width, h.camera.height);
        let n = w as usize * hgt as usize;
        let gray = unsafe { std::slice::from_raw_parts(gray, n) };
        let depth = unsafe { std::slice::from_raw_parts(depth, n) };
        let img = GrayImage::new(w, hgt, gray.iter().map(|&v| v as f32).collect()).map_err(from_core)?;
        let d = DepthImage::new(w, hgt, depth.iter().map(|&v| (v as f64 / depth_scale) as f32).collect())
            .map_err(from_core)?;
        let odometry = h
            .odometry
            .as_mut()
            .ok_or_else(|| (EoStatus::InvalidArgument, "session already finished".to_string()))?;
        let diag = odometry.process(timestamp, &img, d).map_err(from_core)?;
        if let Some(out) = unsafe { pose_out.as_mut() } {
            *out = to_pose(&TrajectoryEntry::from_pose(timestamp, &diag.pose));
        }
        Ok(())
    })
}

/// Number of frames tracked so far.
///
/// # Safety
/// `handle` must be a live session or null.
#[no_mangle]
pub unsafe extern "C" fn eo_odometry_frame_count(handle: *const EoOdometry) -> usize {
    unsafe { handle.as_ref() }
        .and_then(|h| h.odometry.as_ref())
        .map_or(0, |o| o.diagnostics().len())
}

/// Stops the session and returns the per-frame and refined keyframe
/// trajectories. Either output may be null. The session accepts no more
/// frames afterwards but must still be destroyed.
///
/// # Safety
/// `handle` must be a live session; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn eo_odometry_finish(
    handle: *mut EoOdometry,
    frames_out: *mut *mut EoTrajectory,
    keyframes_out: *mut *mut EoTrajectory,
) -> EoStatus {
    guard(|| {
        let h = unsafe { handle.as_mut() }.ok_or_else(|| null("handle"))?;
        let odometry = h
            .odometry
            .take()
            .ok_or_else(|| (EoStatus::InvalidArgument, "session already finished".to_string()))?;
        let out: OdometryOutput = odometry.finish();
        let boxed = |v: &[TrajectoryEntry]| {
            Box::into_raw(Box::new(EoTrajectory {
                poses: v.iter().map(to_pose).collect(),
            }))
        };
        if !frames_out.is_null() {
            unsafe { *frames_out = boxed(&out.trajectory) };
        }
        if !keyframes_out.is_null() {
            unsafe { *keyframes_out = boxed(&out.keyframes) };
        }
        Ok(())
    })
}

/// # Safety
/// `trajectory` must be a live trajectory or null.
#[no_mangle]
pub unsafe extern "C" fn eo_trajectory_len(trajectory: *const EoTrajectory) -> usize {
    unsafe { trajectory.as_ref() }.map_or(0, |t| t.poses.len())
}

/// # Safety
/// `trajectory` must be a live trajectory and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn eo_trajectory_get(trajectory: *const EoTrajectory, index: usize, out: *mut EoPose) -> EoStatus {
    guard(|| {
        let t = unsafe { trajectory.as_ref() }.ok_or_else(|| null("trajectory"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = *t
            .poses
            .get(index)
            .ok_or_else(|| (EoStatus::InvalidArgument, format!("index {index} out of range")))?;
        Ok(())
    })
}

/// # Safety
/// `trajectory` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eo_trajectory_destroy(trajectory: *mut EoTrajectory) {
    if !trajectory.is_null() {
        drop(unsafe { Box::from_raw(trajectory) });
    }
}

/// Translational absolute trajectory error (RMSE, meters) after rigid
/// alignment of `estimated` onto `ground_truth`.
///
/// # Safety
/// The pose arrays must hold the given number of elements; `rmse_out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn eo_ate_rmse(
    estimated: *const EoPose,
    estimated_len: usize,
    ground_truth: *const EoPose,
    ground_truth_len: usize,
    rmse_out: *mut f64,
) -> EoStatus {
    guard(|| {
        if estimated.is_null() {
            return Err(null("estimated"));
        }
        if ground_truth.is_null() {
            return Err(null("ground_truth"));
        }
        let out = unsafe { rmse_out.as_mut() }.ok_or_else(|| null("rmse_out"))?;
        let est = to_entries(unsafe { std::slice::from_raw_parts(estimated, estimated_len) })?;
        let gt = to_entries(unsafe { std::slice::from_raw_parts(ground_truth, ground_truth_len) })?;
        *out = compute_ate(&est, &gt).map_err(from_core)?.rmse;
        Ok(())
    })
}
