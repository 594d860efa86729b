//! Absolute trajectory error and timing summaries.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::{associate, TrajectoryEntry, ASSOCIATION_TOLERANCE};
use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub matched: usize,
    /// Maps estimated positions onto ground truth.
    pub alignment: Pose,
    /// `(timestamp, error)` for every matched pose.
    pub errors: Vec<(f64, f64)>,
}

/// Least-squares rigid transform `T` minimizing `sum |T a_i - b_i|^2`.
/// Falls back to a pure translation when `a` has no spread.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Pose {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let spread: f64 = a.iter().map(|p| (p - ca).norm_squared()).sum();
    if spread < 1e-20 {
        return Pose::from_translation(cb - ca);
    }
    let mut cov = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov += (q - cb) * (p - ca).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Pose::new(r, cb - r * ca)
}

pub fn compute_ate(estimated: &[TrajectoryEntry], ground_truth: &[TrajectoryEntry]) -> Result<AteReport> {
    let mut est = estimated.to_vec();
    let mut gt = ground_truth.to_vec();
    est.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    gt.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let te: Vec<f64> = est.iter().map(|e| e.timestamp).collect();
    let tg: Vec<f64> = gt.iter().map(|e| e.timestamp).collect();
    let pairs = associate(&te, &tg, ASSOCIATION_TOLERANCE);
    if pairs.len() < 2 {
        return Err(Error::Evaluation(format!(
            "need at least 2 matched poses, found {}",
            pairs.len()
        )));
    }
    let a: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].translation).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].translation).collect();
    let alignment = align_rigid(&a, &b);
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&(i, _), (p, q))| (est[i].timestamp, (alignment.transform_point(p) - q).norm()))
        .collect();
    let mut e: Vec<f64> = errors.iter().map(|x| x.1).collect();
    let n = e.len() as f64;
    let rmse = (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let mean = e.iter().sum::<f64>() / n;
    e.sort_by(f64::total_cmp);
    Ok(AteReport {
        rmse,
        mean,
        median: median_sorted(&e),
        max: *e.last().unwrap_or(&0.0),
        matched: pairs.len(),
        alignment,
        errors,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Wall-clock milliseconds spent in each stage for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameTiming {
    pub preprocess: f64,
    pub track: f64,
    pub select: f64,
    pub map: f64,
}

impl FrameTiming {
    pub fn total(&self) -> f64 {
        self.preprocess + self.track + self.select + self.map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageSummary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl StageSummary {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self::default();
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        Self {
            mean,
            median: median_sorted(&v),
            p95: percentile_sorted(&v, 95.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingSummary {
    pub frames: usize,
    pub preprocess: StageSummary,
    pub track: StageSummary,
    pub select: StageSummary,
    pub map: StageSummary,
    pub total: StageSummary,
    pub hz: f64,
}

pub fn timing_summary(frames: &[FrameTiming]) -> TimingSummary {
    let total = StageSummary::of(frames.iter().map(FrameTiming::total));
    TimingSummary {
        frames: frames.len(),
        preprocess: StageSummary::of(frames.iter().map(|f| f.preprocess)),
        track: StageSummary::of(frames.iter().map(|f| f.track)),
        select: StageSummary::of(frames.iter().map(|f| f.select)),
        map: StageSummary::of(frames.iter().map(|f| f.map)),
        hz: if total.mean > 0.0 { 1000.0 / total.mean } else { f64::INFINITY },
        total,
    }
}
