//! Oracle computations shared by the oracle suites and the acceptance
//! report. Each returns the measured quantity; callers decide the bound.

use std::sync::Arc;

use edge_odometry::geometry::{warp, warp_jacobian, CameraIntrinsics, Pose, Twist};
use edge_odometry::imaging::{build_pyramid, distance_transform, DepthImage, DistanceField, EdgeMap, PreprocessedFrame};
use edge_odometry::mapping::{clamp_psd, schur_marginalize, window_residual, Keyframe};
use edge_odometry::selection::{logdet, selection_value, stochastic_partition_greedy, Candidate, HessianBlock, Partition, SelectionConfig};
use edge_odometry::tracking::{compute_residuals, EdgePixel};
use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix6, RowVector4, RowVector6, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::brute_force_dt;

/// Number of random masks whose transform differs anywhere from the
/// brute-force oracle, in distance or attaining edge.
pub fn dt_mismatches(seed: u64, masks: usize, w: u32, h: u32) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..masks {
        // densities from a single edge to nearly full
        let density = [0.005, 0.02, 0.1, 0.3, 0.8][i % 5];
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        if !dt_matches(&mask, w, h) {
            bad += 1;
        }
    }
    bad
}

pub fn dt_matches(mask: &[bool], w: u32, h: u32) -> bool {
    let oracle = brute_force_dt(mask, w as usize, h as usize);
    let field = distance_transform(&EdgeMap::from_mask(w, h, mask.to_vec()).unwrap());
    (0..h).all(|y| {
        (0..w).all(|x| {
            let (d, nearest) = oracle[(y * w + x) as usize];
            field.distance(x, y) == d && field.nearest_base(x, y) == nearest
        })
    })
}

pub fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let xi = Twist::from_fn(|i, _| if i < 3 { rng.random_range(-trans..trans) } else { rng.random_range(-rot..rot) });
    Pose::exp(&xi)
}

fn unit(i: usize) -> Twist {
    Twist::from_fn(|r, _| if r == i { 1.0 } else { 0.0 })
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-12)
}

/// Largest relative deviation of `warp_jacobian` from central differences
/// over `configs` random pixel, depth and pose draws.
pub fn warp_jacobian_error(seed: u64, configs: usize) -> f64 {
    let intr = CameraIntrinsics::tum_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < configs {
        let px = Vector2::new(rng.random_range(20.0..620.0), rng.random_range(20.0..460.0));
        let rho = rng.random_range(0.2..2.0);
        let pose = random_pose(&mut rng, 0.15, 0.15);
        let Ok(j) = warp_jacobian(&px, rho, &pose, &intr) else { continue };
        let mut fd = Matrix2x6::zeros();
        let mut ok = true;
        for i in 0..6 {
            let plus = warp(&px, rho, &Pose::exp(&(unit(i) * h)).compose(&pose), &intr);
            let minus = warp(&px, rho, &Pose::exp(&(unit(i) * -h)).compose(&pose), &intr);
            match (plus, minus) {
                (Ok(p), Ok(m)) => fd.set_column(i, &((p - m) / (2.0 * h))),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let scale = j.amax();
        for (a, b) in j.iter().zip(fd.iter()) {
            worst = worst.max(rel_err(*a, *b, scale));
        }
        checked += 1;
    }
    worst
}

/// Field whose bilinear interpolant is the affine function itself, so the
/// residual is smooth everywhere inside the image.
pub fn affine_field(intr: &CameraIntrinsics, a: f32, bx: f32, by: f32) -> DistanceField {
    let (w, h) = (intr.width, intr.height);
    let d = (0..h).flat_map(|y| (0..w).map(move |x| a + bx * x as f32 + by * y as f32)).collect();
    DistanceField::from_distances(w, h, d).unwrap()
}

/// Largest relative deviation of the tracking residual Jacobian from
/// central differences on a smooth field, with the number of residuals
/// checked.
pub fn tracking_jacobian_error(seed: u64) -> (f64, usize) {
    let intr = CameraIntrinsics::tum_default();
    let field = affine_field(&intr, 20.0, 0.05, -0.03);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<EdgePixel> = (0..300)
        .map(|_| EdgePixel {
            x: rng.random_range(40..600),
            y: rng.random_range(40..440),
            inv_depth: rng.random_range(0.3..1.5),
            gradient_dir: Vector2::new(1.0, 0.0),
            gradient_mag: 200.0,
            track_age: 0,
        })
        .collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..20 {
        let pose = random_pose(&mut rng, 0.05, 0.05);
        let base = compute_residuals(&edges, &pose, &field, &intr, 1.0).unwrap();
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for i in 0..6 {
            plus.push(compute_residuals(&edges, &Pose::exp(&(unit(i) * h)).compose(&pose), &field, &intr, 1.0).unwrap());
            minus.push(compute_residuals(&edges, &Pose::exp(&(unit(i) * -h)).compose(&pose), &field, &intr, 1.0).unwrap());
        }
        for c in &base {
            let mut fd = RowVector6::zeros();
            let mut ok = true;
            for i in 0..6 {
                let p = plus[i].iter().find(|x| x.edge == c.edge);
                let m = minus[i].iter().find(|x| x.edge == c.edge);
                match (p, m) {
                    (Some(p), Some(m)) => fd[i] = (p.residual - m.residual) / (2.0 * h),
                    _ => ok = false,
                }
            }
            if !ok {
                continue;
            }
            let scale = c.jacobian.amax();
            for (a, b) in c.jacobian.iter().zip(fd.iter()) {
                worst = worst.max(rel_err(*a, *b, scale));
            }
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn field_keyframe(id: u64, pose: Pose, field: DistanceField, edges: Vec<EdgePixel>, intr: &CameraIntrinsics) -> Keyframe {
    let n = (intr.width * intr.height) as usize;
    let frame = PreprocessedFrame {
        timestamp: id as f64,
        depth: DepthImage::new(intr.width, intr.height, vec![0.0; n]).unwrap(),
        edges: EdgeMap::from_mask(intr.width, intr.height, vec![false; n]).unwrap(),
        pyramid: build_pyramid(&field, 1e6),
    };
    Keyframe::new(id, id as f64, pose, edges, Arc::new(frame))
}

/// Largest relative deviation of the window residual Jacobians (host pose,
/// target pose, inverse depth, intrinsics) from central differences, with
/// the number of residuals checked.
pub fn window_jacobian_errors(seed: u64) -> ([f64; 4], usize) {
    let intr = CameraIntrinsics::tum_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<EdgePixel> = (0..200)
        .map(|_| EdgePixel {
            x: rng.random_range(60..580),
            y: rng.random_range(60..420),
            inv_depth: rng.random_range(0.3..1.0),
            gradient_dir: Vector2::new(0.0, 1.0),
            gradient_mag: 200.0,
            track_age: 0,
        })
        .collect();
    let host_pose = random_pose(&mut rng, 0.1, 0.1);
    let target_pose = host_pose.compose(&random_pose(&mut rng, 0.05, 0.05));
    let host = field_keyframe(0, host_pose, affine_field(&intr, 15.0, 0.02, 0.01), edges.clone(), &intr);
    let target = field_keyframe(1, target_pose, affine_field(&intr, 12.0, -0.03, 0.04), Vec::new(), &intr);

    let h = 1e-6;
    let mut worst = [0.0f64; 4];
    let mut checked = 0;
    let res = |hp: &Pose, tp: &Pose, e: usize, rho: f64, k: &CameraIntrinsics| {
        window_residual(&host, hp, &target, tp, e, rho, k, 1.0).map(|r| r.residual)
    };
    for (e, edge) in edges.iter().enumerate() {
        let rho = edge.inv_depth;
        let Some(r) = window_residual(&host, &host_pose, &target, &target_pose, e, rho, &intr, 1.0) else { continue };
        let mut fd_host = RowVector6::zeros();
        let mut fd_target = RowVector6::zeros();
        let mut ok = true;
        for i in 0..6 {
            let dp = Pose::exp(&(unit(i) * h));
            let dm = Pose::exp(&(unit(i) * -h));
            match (res(&dp.compose(&host_pose), &target_pose, e, rho, &intr), res(&dm.compose(&host_pose), &target_pose, e, rho, &intr)) {
                (Some(p), Some(m)) => fd_host[i] = (p - m) / (2.0 * h),
                _ => ok = false,
            }
            match (res(&host_pose, &dp.compose(&target_pose), e, rho, &intr), res(&host_pose, &dm.compose(&target_pose), e, rho, &intr)) {
                (Some(p), Some(m)) => fd_target[i] = (p - m) / (2.0 * h),
                _ => ok = false,
            }
        }
        let fd_depth = match (res(&host_pose, &target_pose, e, rho + h, &intr), res(&host_pose, &target_pose, e, rho - h, &intr)) {
            (Some(p), Some(m)) => (p - m) / (2.0 * h),
            _ => continue,
        };
        let mut fd_intr = RowVector4::zeros();
        for i in 0..4 {
            let mut kp = intr;
            let mut km = intr;
            let step = 1e-4;
            match i {
                0 => (kp.fx, km.fx) = (intr.fx + step, intr.fx - step),
                1 => (kp.fy, km.fy) = (intr.fy + step, intr.fy - step),
                2 => (kp.cx, km.cx) = (intr.cx + step, intr.cx - step),
                _ => (kp.cy, km.cy) = (intr.cy + step, intr.cy - step),
            }
            match (res(&host_pose, &target_pose, e, rho, &kp), res(&host_pose, &target_pose, e, rho, &km)) {
                (Some(p), Some(m)) => fd_intr[i] = (p - m) / (2.0 * step),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let s = r.jac_host.amax().max(r.jac_target.amax());
        for (a, b) in r.jac_host.iter().zip(fd_host.iter()) {
            worst[0] = worst[0].max(rel_err(*a, *b, s));
        }
        for (a, b) in r.jac_target.iter().zip(fd_target.iter()) {
            worst[1] = worst[1].max(rel_err(*a, *b, s));
        }
        worst[2] = worst[2].max(rel_err(r.jac_depth, fd_depth, r.jac_depth.abs()));
        let si = r.jac_intrinsics.amax();
        for (a, b) in r.jac_intrinsics.iter().zip(fd_intr.iter()) {
            worst[3] = worst[3].max(rel_err(*a, *b, si));
        }
        checked += 1;
    }
    (worst, checked)
}

pub fn rank_one(rng: &mut ChaCha8Rng) -> HessianBlock {
    let scale = rng.random_range(0.1..10.0);
    let v = RowVector6::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
    HessianBlock::from_row(&v)
}

/// Exhaustive optimum over one choice per partition.
pub fn enumerated_optimum(partitions: &[Partition], candidates: &[Candidate], lambda: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut choice = vec![0usize; partitions.len()];
    loop {
        let blocks: Vec<HessianBlock> = partitions
            .iter()
            .zip(&choice)
            .map(|(p, &c)| candidates[p.members[c]].hessian)
            .collect();
        best = best.max(selection_value(&blocks, lambda));
        let mut i = 0;
        loop {
            if i == partitions.len() {
                return best;
            }
            choice[i] += 1;
            if choice[i] < partitions[i].members.len() {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// Up to 6 partitions of up to 4 random rank-one candidates each.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Partition>, Vec<Candidate>) {
    let np = rng.random_range(1..=6);
    let mut partitions = Vec::new();
    let mut candidates = Vec::new();
    for cell in 0..np {
        let size = rng.random_range(1..=4);
        let members = (candidates.len()..candidates.len() + size).collect();
        for _ in 0..size {
            candidates.push(Candidate {
                hessian: rank_one(rng),
                probability: 1.0,
                visible: true,
            });
        }
        partitions.push(Partition { cell, members });
    }
    (partitions, candidates)
}

pub struct GreedyRatios {
    /// greedy / optimum, sorted ascending
    pub ratios: Vec<f64>,
    /// Instances below half the optimum or above it.
    pub violations: usize,
}

impl GreedyRatios {
    pub fn median(&self) -> f64 {
        self.ratios[self.ratios.len() / 2]
    }

    pub fn worst(&self) -> f64 {
        self.ratios[0]
    }
}

/// Partition greedy against exhaustive enumeration on `instances` random
/// enumerable instances with `lambda = 1e-3`.
pub fn greedy_vs_optimum(seed: u64, instances: usize) -> GreedyRatios {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = 1e-3;
    let mut ratios = Vec::new();
    let mut violations = 0;
    for i in 0..instances {
        let (partitions, candidates) = random_instance(&mut rng);
        let config = SelectionConfig {
            k: partitions.len(),
            lambda,
            seed: i as u64,
            ..SelectionConfig::default()
        };
        let out = stochastic_partition_greedy(&partitions, &candidates, &config);
        let chosen: Vec<HessianBlock> = out.selected.iter().map(|&i| candidates[i].hessian).collect();
        let greedy = selection_value(&chosen, lambda);
        let opt = enumerated_optimum(&partitions, &candidates, lambda);
        let ratio = greedy / opt;
        if out.selected.len() != partitions.len() || ratio < 0.5 || greedy > opt + 1e-9 {
            violations += 1;
        }
        ratios.push(ratio);
    }
    ratios.sort_by(f64::total_cmp);
    GreedyRatios { ratios, violations }
}

/// Nested-set instances where the logdet gain of one extra block grows
/// with the set or turns negative, beyond 1e-9.
pub fn submodularity_violations(seed: u64, instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = Matrix6::identity() * 1e-3;
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..12);
        let blocks: Vec<Matrix6<f64>> = (0..n).map(|_| rank_one(&mut rng).0).collect();
        let e = rank_one(&mut rng).0;
        let small = rng.random_range(0..n);
        let sum = |k: usize| blocks[..k].iter().fold(Matrix6::zeros(), |a, b| a + b);
        let (hs, hl) = (sum(small), sum(n));
        let gain = |h: &Matrix6<f64>| logdet(&(h + e + reg)) - logdet(&(h + reg));
        let (gs, gl) = (gain(&hs), gain(&hl));
        if gl < -1e-9 || gs < gl - 1e-9 {
            bad += 1;
        }
    }
    bad
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
    a.transpose() * a + DMatrix::identity(n, n) * 1e-2
}

pub fn min_max_eig(h: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(h.clone()).eigenvalues;
    (e.min(), e.amax())
}

/// Largest deviation, relative to the solution scale, between the minimizer
/// of a Schur-reduced system and the full minimizer restricted to the kept
/// variables, over random SPD systems and random variable splits.
pub fn schur_minimizer_error(seed: u64, systems: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..systems {
        let n = rng.random_range(4..30);
        let h = random_spd(&mut rng, n);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let mut idx: Vec<usize> = (0..n).collect();
        let split = rng.random_range(1..n);
        // random subsets, not just a leading block
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let (keep, marg) = idx.split_at(split);
        let full = -(h.clone().cholesky().unwrap().solve(&b));
        let (hr, br) = schur_marginalize(&h, &b, keep, marg);
        let reduced = -(hr.cholesky().unwrap().solve(&br));
        let scale = full.amax().max(1.0);
        for (k, &i) in keep.iter().enumerate() {
            worst = worst.max((reduced[k] - full[i]).abs() / scale);
        }
    }
    worst
}

/// Most negative `min eigenvalue / max eigenvalue` seen while a chain of
/// 6-dof blocks is repeatedly grown and marginalized, with the number of
/// times the PSD clamp had to intervene.
pub fn successive_marginalization_psd(seed: u64, chains: usize, rounds: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut clamped = 0;
    for _ in 0..chains {
        // Each round adds a new block with rank-deficient factors coupling
        // it to the survivors, then marginalizes the oldest block.
        let blocks = 5;
        let mut h = random_spd(&mut rng, 6 * blocks);
        let mut b = DVector::from_fn(6 * blocks, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..rounds {
            let n = h.nrows();
            let mut grown = DMatrix::zeros(n + 6, n + 6);
            grown.view_mut((0, 0), (n, n)).copy_from(&h);
            for _ in 0..20 {
                let j = DVector::from_fn(n + 6, |i, _| if i >= n - 12 { rng.random_range(-1.0..1.0) } else { 0.0 });
                grown.ger(1.0, &j, &j, 1.0);
            }
            let mut gb = DVector::zeros(n + 6);
            gb.rows_mut(0, n).copy_from(&b);
            let keep: Vec<usize> = (6..n + 6).collect();
            let marg: Vec<usize> = (0..6).collect();
            let (hr, br) = schur_marginalize(&grown, &gb, &keep, &marg);
            let (min, max) = min_max_eig(&hr);
            worst = worst.min(min / max);
            let (next, flagged) = clamp_psd(&hr);
            clamped += flagged as usize;
            h = next;
            b = br;
        }
    }
    (worst, clamped)
}
