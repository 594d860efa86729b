//! Keyframe edge selection: culling, per-edge information blocks,
//! re-observation probabilities and greedy log-determinant maximization over
//! a grid partition matroid.

use nalgebra::{Matrix6, RowVector6, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{warp, warp_jacobian, CameraIntrinsics, Pose};
use crate::imaging::{DepthImage, EdgeMap};
use crate::tracking::EdgePixel;

/// Rank-one information block `j^T j` of a single edge residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianBlock(pub Matrix6<f64>);

impl HessianBlock {
    pub fn zero() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn from_row(j: &RowVector6<f64>) -> Self {
        Self(j.transpose() * j)
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// One edge per grid cell, cells visited in seeded random order.
    PartitionGreedy,
    /// Unconstrained stochastic greedy drawing `sample_size` candidates per round.
    StochasticGreedy { sample_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Canny high threshold; culling bound and sigmoid offset.
    pub high_threshold: f64,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 600,
            lambda: 1e-3,
            seed: 0x5eed,
            high_threshold: 100.0,
            mode: SelectionMode::PartitionGreedy,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("selection lambda must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("selection k must be at least 1".into()));
        }
        if let SelectionMode::StochasticGreedy { sample_size: 0 } = self.mode {
            return Err(Error::Config("stochastic greedy sample size must be positive".into()));
        }
        Ok(())
    }
}

/// Every Canny edge that has a depth measurement at its integer pixel.
pub fn edge_pixels_with_depth(edges: &EdgeMap, depth: &DepthImage) -> Vec<EdgePixel> {
    edges
        .edge_pixels()
        .filter_map(|(x, y)| {
            let d = depth.at(x, y)?;
            Some(EdgePixel {
                x,
                y,
                inv_depth: 1.0 / d as f64,
                gradient_dir: edges.direction(x, y),
                gradient_mag: edges.magnitude(x, y) as f64,
                track_age: 0,
            })
        })
        .collect()
}

/// Removes edges without depth or with gradient magnitude below `high`.
pub fn cull_edges(edges: &EdgeMap, depth: &DepthImage, high: f64) -> Result<Vec<EdgePixel>> {
    let kept: Vec<_> = edge_pixels_with_depth(edges, depth)
        .into_iter()
        .filter(|e| e.gradient_mag >= high)
        .collect();
    if kept.is_empty() {
        return Err(Error::SelectionImpossible);
    }
    Ok(kept)
}

/// Information block of an edge evaluated in its own keyframe (identity pose).
///
/// On the edge itself the distance field has a kink; its one-sided gradient
/// is the unit edge normal, which is what the residual row uses here. The
/// sign is irrelevant for `j^T j`.
pub fn edge_hessian(edge: &EdgePixel, intr: &CameraIntrinsics) -> Result<HessianBlock> {
    let p = edge.pixel();
    let jw = warp_jacobian(&p, edge.inv_depth, &Pose::identity(), intr)?;
    if edge.gradient_dir == Vector2::zeros() {
        return Ok(HessianBlock::zero());
    }
    Ok(HessianBlock::from_row(&(edge.gradient_dir.transpose() * jw)))
}

/// Probability that an edge of gradient magnitude `m` is detected again,
/// a logistic in `m - a`.
pub fn reobservation_probability(gradient_mag: f64, a: f64) -> f64 {
    1.0 / (1.0 + (a - gradient_mag).exp())
}

pub fn visibility_check(edge: &EdgePixel, prior: &Pose, intr: &CameraIntrinsics) -> bool {
    warp(&edge.pixel(), edge.inv_depth, prior, intr).is_ok()
}

/// A nonempty grid cell and the candidate indices that fall into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub cell: usize,
    pub members: Vec<usize>,
}

/// Side length of the square grid cells for a target of `k` cells. Starts
/// from `round(sqrt(W H / k))` and shrinks until the grid has at least `k`
/// cells.
pub fn cell_side(width: u32, height: u32, k: usize) -> u32 {
    let area = width as f64 * height as f64;
    let mut side = (area / k.max(1) as f64).sqrt().round().max(1.0) as u32;
    while side > 1 && (width.div_ceil(side) as usize) * (height.div_ceil(side) as usize) < k {
        side -= 1;
    }
    side
}

/// Groups candidates by grid cell. Partitions are ordered by cell index and
/// members keep their input order.
pub fn build_partitions(edges: &[EdgePixel], width: u32, height: u32, k: usize) -> Vec<Partition> {
    let side = cell_side(width, height, k);
    let cols = width.div_ceil(side) as usize;
    let rows = height.div_ceil(side) as usize;
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); cols * rows];
    for (i, e) in edges.iter().enumerate() {
        let cx = (e.x / side) as usize;
        let cy = (e.y / side) as usize;
        cells[cy.min(rows - 1) * cols + cx.min(cols - 1)].push(i);
    }
    cells
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(cell, members)| Partition { cell, members })
        .collect()
}

/// Per-candidate inputs of the greedy objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub hessian: HessianBlock,
    pub probability: f64,
    pub visible: bool,
}

/// `log det` of a symmetric positive definite matrix via Cholesky, or `-inf`.
pub fn logdet(m: &Matrix6<f64>) -> f64 {
    match m.cholesky() {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Normalized objective `log det(lambda I + H(S)) - log det(lambda I)`.
pub fn selection_value(blocks: &[HessianBlock], lambda: f64) -> f64 {
    let h = blocks.iter().fold(Matrix6::zeros(), |acc, b| acc + b.0);
    logdet(&(h + Matrix6::identity() * lambda)) - 6.0 * lambda.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Selected candidate indices in selection order.
    pub selected: Vec<usize>,
    /// Accumulated information `H(S)`.
    pub information: Matrix6<f64>,
    pub gain_evaluations: usize,
}

/// Greedy over the partition matroid: partitions are visited in a seeded
/// random order and each contributes the visible member with the largest
/// probability-weighted log-determinant gain. Stops after `k` selections.
pub fn stochastic_partition_greedy(
    partitions: &[Partition],
    candidates: &[Candidate],
    config: &SelectionConfig,
) -> SelectionOutcome {
    let mut order: Vec<usize> = (0..partitions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);

    let regularizer = Matrix6::identity() * config.lambda;
    let mut information = Matrix6::zeros();
    let mut base = logdet(&regularizer);
    let mut selected = Vec::new();
    let mut evaluations = 0;
    for pi in order {
        if selected.len() >= config.k {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for &e in &partitions[pi].members {
            let c = &candidates[e];
            if !c.visible {
                continue;
            }
            evaluations += 1;
            let gain = c.probability * (logdet(&(information + c.hessian.0 + regularizer)) - base);
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((e, gain));
            }
        }
        let Some((e, _)) = best else {
            continue;
        };
        information += candidates[e].hessian.0;
        base = logdet(&(information + regularizer));
        selected.push(e);
    }
    SelectionOutcome {
        selected,
        information,
        gain_evaluations: evaluations,
    }
}

/// Baseline stochastic greedy without the partition constraint: each of `k`
/// rounds draws `sample_size` unselected visible candidates and keeps the
/// best probability-weighted gain.
pub fn stochastic_greedy(candidates: &[Candidate], k: usize, sample_size: usize, lambda: f64, seed: u64) -> SelectionOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regularizer = Matrix6::identity() * lambda;
    let mut information = Matrix6::zeros();
    let mut base = logdet(&regularizer);
    let mut remaining: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].visible).collect();
    let mut selected = Vec::new();
    let mut evaluations = 0;
    while selected.len() < k && !remaining.is_empty() {
        let n = sample_size.min(remaining.len());
        let (sample, _) = remaining.partial_shuffle(&mut rng, n);
        let mut best: Option<(usize, f64)> = None;
        for (slot, &e) in sample.iter().enumerate() {
            evaluations += 1;
            let c = &candidates[e];
            let gain = c.probability * (logdet(&(information + c.hessian.0 + regularizer)) - base);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((slot, gain));
            }
        }
        let Some((slot, _)) = best else {
            break;
        };
        let e = remaining.swap_remove(slot);
        information += candidates[e].hessian.0;
        base = logdet(&(information + regularizer));
        selected.push(e);
    }
    SelectionOutcome {
        selected,
        information,
        gain_evaluations: evaluations,
    }
}

/// Per-candidate record for debug dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionRecord {
    pub x: u32,
    pub y: u32,
    pub magnitude: f64,
    pub probability: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    /// Selected edges, ordered by pixel position.
    pub edges: Vec<EdgePixel>,
    /// One record per culled candidate.
    pub records: Vec<SelectionRecord>,
    pub partitions: usize,
    pub gain_evaluations: usize,
}

/// Full keyframe selection: cull, visibility check under `prior`, partition
/// and greedy selection.
pub fn select_edges(
    edges: &EdgeMap,
    depth: &DepthImage,
    prior: &Pose,
    intr: &CameraIntrinsics,
    config: &SelectionConfig,
) -> Result<SelectionReport> {
    let culled = cull_edges(edges, depth, config.high_threshold)?;
    let visible: Vec<EdgePixel> = culled.into_iter().filter(|e| visibility_check(e, prior, intr)).collect();
    if visible.is_empty() {
        return Err(Error::SelectionImpossible);
    }
    let candidates: Vec<Candidate> = visible
        .iter()
        .map(|e| Candidate {
            hessian: edge_hessian(e, intr).unwrap_or_else(|_| HessianBlock::zero()),
            probability: reobservation_probability(e.gradient_mag, config.high_threshold),
            visible: true,
        })
        .collect();
    let (outcome, partitions) = match config.mode {
        SelectionMode::PartitionGreedy => {
            let partitions = build_partitions(&visible, intr.width, intr.height, config.k);
            (stochastic_partition_greedy(&partitions, &candidates, config), partitions.len())
        }
        SelectionMode::StochasticGreedy { sample_size } => (
            stochastic_greedy(&candidates, config.k, sample_size, config.lambda, config.seed),
            0,
        ),
    };
    let mut flags = vec![false; visible.len()];
    for &i in &outcome.selected {
        flags[i] = true;
    }
    let records = visible
        .iter()
        .zip(&candidates)
        .zip(&flags)
        .map(|((e, c), &selected)| SelectionRecord {
            x: e.x,
            y: e.y,
            magnitude: e.gradient_mag,
            probability: c.probability,
            selected,
        })
        .collect();
    let edges = visible
        .iter()
        .zip(&flags)
        .filter(|(_, &s)| s)
        .map(|(e, _)| *e)
        .collect();
    Ok(SelectionReport {
        edges,
        records,
        partitions,
        gain_evaluations: outcome.gain_evaluations,
    })
}
