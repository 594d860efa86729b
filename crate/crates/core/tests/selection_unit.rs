use edge_odometry::selection::*;
use edge_odometry::geometry::{CameraIntrinsics, Pose};
use edge_odometry::imaging::{DepthImage, EdgeMap};
use edge_odometry::tracking::EdgePixel;
use edge_odometry::Error;
use nalgebra::{Matrix6, RowVector6, Vector2};
use approx::assert_relative_eq;

fn edge_at(x: u32, y: u32, mag: f64) -> EdgePixel {
    EdgePixel {
        x,
        y,
        inv_depth: 0.5,
        gradient_dir: Vector2::new(1.0, 0.0),
        gradient_mag: mag,
        track_age: 0,
    }
}

fn diag_block(v: f64) -> HessianBlock {
    let mut m = Matrix6::zeros();
    m[(0, 0)] = v;
    HessianBlock(m)
}

#[test]
fn probability_examples() {
    assert_relative_eq!(reobservation_probability(100.0, 100.0), 0.5);
    assert_relative_eq!(reobservation_probability(100.0 + 3f64.ln(), 100.0), 0.75, epsilon = 1e-12);
    assert!(reobservation_probability(120.0, 100.0) > 0.9999);
    assert!(reobservation_probability(130.0, 100.0) > reobservation_probability(120.0, 100.0));
}

#[test]
fn greedy_picks_larger_logdet() {
    let partitions = vec![Partition {
        cell: 0,
        members: vec![0, 1],
    }];
    let candidates = [diag_block(3.0), diag_block(1.0)].map(|h| Candidate {
        hessian: h,
        probability: 0.8,
        visible: true,
    });
    let config = SelectionConfig {
        lambda: 1.0,
        ..SelectionConfig::default()
    };
    let out = stochastic_partition_greedy(&partitions, &candidates, &config);
    assert_eq!(out.selected, vec![0]);
    assert_relative_eq!(logdet(&(out.information + Matrix6::identity())), 4f64.ln(), epsilon = 1e-12);
}

#[test]
fn ties_pick_lowest_index() {
    let partitions = vec![Partition {
        cell: 0,
        members: vec![0, 1, 2],
    }];
    let candidates = [diag_block(2.0); 3].map(|h| Candidate {
        hessian: h,
        probability: 1.0,
        visible: true,
    });
    let out = stochastic_partition_greedy(&partitions, &candidates, &SelectionConfig::default());
    assert_eq!(out.selected, vec![0]);
}

#[test]
fn invisible_partition_is_skipped() {
    let partitions = vec![
        Partition { cell: 0, members: vec![0] },
        Partition { cell: 1, members: vec![1] },
    ];
    let candidates = [
        Candidate {
            hessian: diag_block(1.0),
            probability: 1.0,
            visible: false,
        },
        Candidate {
            hessian: diag_block(1.0),
            probability: 1.0,
            visible: true,
        },
    ];
    let out = stochastic_partition_greedy(&partitions, &candidates, &SelectionConfig::default());
    assert_eq!(out.selected, vec![1]);
    assert_eq!(out.gain_evaluations, 1);
}

#[test]
fn partitions_cover_and_single_cell() {
    let edges: Vec<_> = (0..10).map(|i| edge_at(3 + i % 3, 4 + i % 2, 120.0)).collect();
    let p = build_partitions(&edges, 640, 480, 100);
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].members, (0..10).collect::<Vec<_>>());
}

#[test]
fn cell_side_guarantees_k_cells() {
    assert_eq!(cell_side(640, 480, 100), 55);
    let s = cell_side(640, 480, 600);
    assert!((640u32.div_ceil(s) * 480u32.div_ceil(s)) as usize >= 600);
    assert_eq!(s, 22);
}

#[test]
fn cull_boundaries() {
    let mut mask = vec![false; 16];
    mask[5] = true;
    mask[6] = true;
    mask[9] = true;
    let edges = EdgeMap::from_mask(4, 4, mask).unwrap();
    // from_mask gives zero magnitudes: everything falls below a positive bound
    let depth = DepthImage::new(4, 4, vec![1.0; 16]).unwrap();
    assert!(matches!(cull_edges(&edges, &depth, 1.0), Err(Error::SelectionImpossible)));
    assert_eq!(cull_edges(&edges, &depth, 0.0).unwrap().len(), 3);
    let mut holes = vec![1.0; 16];
    holes[6] = 0.0;
    let depth = DepthImage::new(4, 4, holes).unwrap();
    assert_eq!(cull_edges(&edges, &depth, 0.0).unwrap().len(), 2);
}

#[test]
fn visibility_examples() {
    let intr = CameraIntrinsics::tum_default();
    let e = edge_at(600, 240, 120.0);
    assert!(visibility_check(&e, &Pose::identity(), &intr));
    let shift = Pose::from_translation(nalgebra::Vector3::new(0.2, 0.0, 0.0));
    assert!(!visibility_check(&e, &shift, &intr));
}

#[test]
fn hessian_block_properties() {
    let j = RowVector6::new(1.0, -2.0, 0.5, 3.0, 0.0, 1.5);
    let h = HessianBlock::from_row(&j);
    assert_relative_eq!(h.0.trace(), j.norm_squared(), epsilon = 1e-12);
    assert_eq!(h.0.rank(1e-9), 1);
    assert_eq!(h.0, h.0.transpose());
}
