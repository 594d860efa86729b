mod common;

use common::oracles::{greedy_vs_optimum, random_instance, submodularity_violations};
use edge_odometry::geometry::{warp, CameraIntrinsics, Pose, Twist};
use edge_odometry::imaging::{canny_detect, DepthImage, GrayImage};
use edge_odometry::selection::*;
use edge_odometry::tracking::EdgePixel;
use nalgebra::{Matrix6, RowVector6, Vector2, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn partition_greedy_is_half_optimal_on_enumerable_instances() {
    let r = greedy_vs_optimum(21, 1000);
    println!("median greedy/optimum ratio {:.4}, worst {:.4}", r.median(), r.worst());
    assert_eq!(r.violations, 0);
    assert!(r.median() >= 0.9);
}

#[test]
fn logdet_gain_is_monotone_and_submodular() {
    assert_eq!(submodularity_violations(22, 1000), 0);
}

#[test]
fn information_accumulates_exactly_and_every_candidate_is_evaluated_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for seed in 0..100 {
        let (partitions, mut candidates) = random_instance(&mut rng);
        for c in &mut candidates {
            c.visible = rng.random_bool(0.8);
            c.probability = rng.random_range(0.5..1.0);
        }
        let config = SelectionConfig {
            k: 100,
            seed,
            ..SelectionConfig::default()
        };
        let out = stochastic_partition_greedy(&partitions, &candidates, &config);
        let recomputed = out.selected.iter().fold(Matrix6::zeros(), |a, &i| a + candidates[i].hessian.0);
        assert!((out.information - recomputed).amax() < 1e-9);
        assert_eq!(out.gain_evaluations, candidates.iter().filter(|c| c.visible).count());
        let visited = partitions.iter().filter(|p| p.members.iter().any(|&m| candidates[m].visible)).count();
        assert_eq!(out.selected.len(), visited);
        for p in &partitions {
            let picks = out.selected.iter().filter(|s| p.members.contains(s)).count();
            assert!(picks <= 1);
        }
        assert!(out.selected.iter().all(|&s| candidates[s].visible));
    }
}

#[test]
fn hessian_trace_matches_finite_difference_row() {
    let intr = CameraIntrinsics::tum_default();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let h = 1e-6;
    for _ in 0..200 {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let e = EdgePixel {
            x: rng.random_range(10..630),
            y: rng.random_range(10..470),
            inv_depth: rng.random_range(0.2..2.0),
            gradient_dir: Vector2::new(angle.cos(), angle.sin()),
            gradient_mag: 150.0,
            track_age: 0,
        };
        let block = edge_hessian(&e, &intr).unwrap();
        let mut row = RowVector6::zeros();
        for i in 0..6 {
            let d = Twist::from_fn(|r, _| if r == i { h } else { 0.0 });
            let p = warp(&e.pixel(), e.inv_depth, &Pose::exp(&d), &intr).unwrap();
            let m = warp(&e.pixel(), e.inv_depth, &Pose::exp(&-d), &intr).unwrap();
            row[i] = e.gradient_dir.dot(&((p - m) / (2.0 * h)));
        }
        let trace = block.0.trace();
        assert!((trace - row.norm_squared()).abs() <= 1e-6 * trace.max(1.0));
        let eig = block.0.symmetric_eigen().eigenvalues;
        let mut sorted: Vec<f64> = eig.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[4].abs() <= 1e-9 * sorted[5].max(1.0), "block must be rank one");
    }
}

fn textured_frame(w: u32, h: u32, square: u32) -> (GrayImage, DepthImage) {
    let gray = GrayImage::from_fn(w, h, |x, y| if ((x / square) + (y / square)) % 2 == 0 { 30.0 } else { 220.0 }).unwrap();
    let depth = DepthImage::new(w, h, vec![2.0; (w * h) as usize]).unwrap();
    (gray, depth)
}

#[test]
fn textured_frame_yields_exactly_k_edges() {
    let intr = CameraIntrinsics::tum_default();
    let (gray, depth) = textured_frame(640, 480, 8);
    let edges = canny_detect(&gray, 40.0, 100.0).unwrap();
    let config = SelectionConfig::default();
    let report = select_edges(&edges, &depth, &Pose::identity(), &intr, &config).unwrap();
    assert!(report.partitions > 600);
    assert_eq!(report.edges.len(), 600);
    let side = cell_side(640, 480, 600);
    assert_eq!(side, 22);
    let cols = 640u32.div_ceil(side);
    let mut cells: Vec<u32> = report.edges.iter().map(|e| (e.y / side) * cols + e.x / side).collect();
    cells.sort_unstable();
    cells.dedup();
    assert_eq!(cells.len(), 600, "one edge per cell");
    assert!(report.edges.iter().all(|e| e.gradient_mag >= config.high_threshold));

    let again = select_edges(&edges, &depth, &Pose::identity(), &intr, &config).unwrap();
    assert_eq!(report, again);
}

#[test]
fn sparse_scene_keeps_one_edge_per_occupied_cell() {
    let intr = CameraIntrinsics::tum_default();
    // One bright square: few occupied cells, far fewer than k.
    let gray = GrayImage::from_fn(640, 480, |x, y| if (300..340).contains(&x) && (200..260).contains(&y) { 220.0 } else { 30.0 }).unwrap();
    let depth = DepthImage::new(640, 480, vec![1.5; 640 * 480]).unwrap();
    let edges = canny_detect(&gray, 40.0, 100.0).unwrap();
    let report = select_edges(&edges, &depth, &Pose::identity(), &intr, &SelectionConfig::default()).unwrap();
    assert!(report.partitions < 600);
    assert_eq!(report.edges.len(), report.partitions);
}

#[test]
fn depth_holes_cull_about_half() {
    let (gray, _) = textured_frame(320, 240, 10);
    let edges = canny_detect(&gray, 40.0, 100.0).unwrap();
    let full = DepthImage::new(320, 240, vec![2.0; 320 * 240]).unwrap();
    // independent coin flip per pixel
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let holes = DepthImage::new(320, 240, (0..320 * 240).map(|_| if rng.random_bool(0.5) { 2.0 } else { 0.0 }).collect()).unwrap();
    let all = cull_edges(&edges, &full, 100.0).unwrap().len() as f64;
    let kept = cull_edges(&edges, &holes, 100.0).unwrap().len() as f64;
    let ratio = kept / all;
    assert!((0.4..=0.6).contains(&ratio), "kept fraction {ratio}");
}

#[test]
fn forward_motion_visibility_matches_warp_oracle() {
    let intr = CameraIntrinsics::tum_default();
    let prior = Pose::exp(&Vector6::new(0.0, 0.0, -0.8, 0.0, 0.0, 0.0));
    for x in (0..640).step_by(7) {
        for y in [0u32, 5, 240, 470, 479] {
            let e = EdgePixel {
                x,
                y,
                inv_depth: 0.5,
                gradient_dir: Vector2::new(1.0, 0.0),
                gradient_mag: 150.0,
                track_age: 0,
            };
            let direct = {
                let z = 2.0;
                let p = nalgebra::Vector3::new((x as f64 - intr.cx) / intr.fx * z, (y as f64 - intr.cy) / intr.fy * z, z);
                let q = prior.transform_point(&p);
                let u = intr.fx * q.x / q.z + intr.cx;
                let v = intr.fy * q.y / q.z + intr.cy;
                q.z > 0.0 && u > 0.0 && v > 0.0 && u < 639.0 && v < 479.0
            };
            assert_eq!(visibility_check(&e, &prior, &intr), direct, "edge ({x}, {y})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partitions_are_disjoint_and_cover(
        pts in prop::collection::vec((0u32..640, 0u32..480), 1..400),
        k in 1usize..800,
    ) {
        let edges: Vec<EdgePixel> = pts.iter().map(|&(x, y)| EdgePixel {
            x, y, inv_depth: 1.0, gradient_dir: Vector2::new(1.0, 0.0), gradient_mag: 150.0, track_age: 0,
        }).collect();
        let parts = build_partitions(&edges, 640, 480, k);
        let mut seen = vec![0u32; edges.len()];
        for p in &parts {
            prop_assert!(!p.members.is_empty());
            for &m in &p.members {
                seen[m] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let side = cell_side(640, 480, k);
        let cells = 640u32.div_ceil(side) as usize * 480u32.div_ceil(side) as usize;
        prop_assert!(cells >= k);
    }

    #[test]
    fn probability_is_monotone_above_half(a in 10.0f64..200.0, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let p_lo = reobservation_probability(a + lo, a);
        let p_hi = reobservation_probability(a + hi, a);
        prop_assert!(p_lo >= 0.5 && p_hi <= 1.0);
        prop_assert!(p_hi >= p_lo);
    }
}
