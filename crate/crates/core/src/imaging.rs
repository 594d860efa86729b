//! Per-frame preprocessing: Canny edges, exact Euclidean distance fields with
//! nearest-edge indices, and the three-level distance-field pyramid.

use std::collections::VecDeque;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::pixel_to_level;

pub const PYRAMID_LEVELS: usize = 3;

/// Marks a pixel without a nearest edge (empty edge map).
const NO_EDGE: u32 = u32::MAX;

/// Row-major grayscale image with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidImage(format!(
                "expected {}x{} = {} samples, got {}",
                width,
                height,
                width as usize * height as usize,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {bad} outside [0, 255]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> f32) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data)
    }

    /// Luminance conversion of packed 8-bit RGB.
    pub fn from_rgb8(width: u32, height: u32, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width as usize * height as usize {
            return Err(Error::InvalidImage("rgb buffer size mismatch".into()));
        }
        let data = rgb
            .chunks_exact(3)
            .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) as f32)
            .map(|v| v.clamp(0.0, 255.0))
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }
}

/// Depth in meters; `0` marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidImage("depth buffer size mismatch".into()));
        }
        let data = data
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Depth at an integer pixel, `None` when missing or out of bounds.
    pub fn at(&self, x: u32, y: u32) -> Option<f32> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.data[(y * self.width + x) as usize];
        (d > 0.0).then_some(d)
    }
}

/// Output of the Canny detector. Gradients are unnormalized 3x3 Sobel
/// responses, so magnitudes are in intensity units per pixel scaled by the
/// Sobel gain.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    width: u32,
    height: u32,
    mask: Vec<bool>,
    magnitude: Vec<f32>,
    direction: Vec<[f32; 2]>,
}

impl EdgeMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_edge(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn magnitude(&self, x: u32, y: u32) -> f32 {
        self.magnitude[(y * self.width + x) as usize]
    }

    pub fn direction(&self, x: u32, y: u32) -> Vector2<f64> {
        self.direction_at_index((y * self.width + x) as usize)
    }

    pub fn direction_at_index(&self, idx: usize) -> Vector2<f64> {
        let d = self.direction[idx];
        Vector2::new(d[0] as f64, d[1] as f64)
    }

    pub fn edge_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Edge pixel coordinates in row-major order.
    pub fn edge_pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Builds an edge map from an explicit mask; used by oracles and tests.
    /// Gradients are zero.
    pub fn from_mask(width: u32, height: u32, mask: Vec<bool>) -> Result<Self> {
        let n = width as usize * height as usize;
        if mask.len() != n {
            return Err(Error::InvalidImage("mask size mismatch".into()));
        }
        Ok(Self {
            width,
            height,
            mask,
            magnitude: vec![0.0; n],
            direction: vec![[0.0, 0.0]; n],
        })
    }
}

/// Canny edge detection: Sobel gradients, non-maximum suppression and
/// hysteresis with 8-connectivity.
pub fn canny_detect(img: &GrayImage, low: f32, high: f32) -> Result<EdgeMap> {
    if !(low > 0.0 && low < high) {
        return Err(Error::InvalidImage(format!("canny thresholds must satisfy 0 < low < high, got {low}, {high}")));
    }
    let (w, h) = (img.width as usize, img.height as usize);
    let n = w * h;
    let mut gx = vec![0f32; n];
    let mut gy = vec![0f32; n];
    let mut mag = vec![0f32; n];
    let px = &img.data;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let i = y * w + x;
            let (a, b, c) = (px[i - w - 1], px[i - w], px[i - w + 1]);
            let (d, f) = (px[i - 1], px[i + 1]);
            let (g, hh, k) = (px[i + w - 1], px[i + w], px[i + w + 1]);
            let sx = (c + 2.0 * f + k) - (a + 2.0 * d + g);
            let sy = (g + 2.0 * hh + k) - (a + 2.0 * b + c);
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }

    // Non-maximum suppression along the quantized gradient direction. Ties
    // are broken towards the pixel with the smaller offset so plateaus stay
    // one pixel wide.
    let mut candidate = vec![false; n];
    let tan22 = std::f32::consts::FRAC_PI_8.tan();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let step: isize = if ay <= ax * tan22 {
                1
            } else if ax <= ay * tan22 {
                w as isize
            } else if (gx[i] > 0.0) == (gy[i] > 0.0) {
                w as isize + 1
            } else {
                w as isize - 1
            };
            let prev = mag[(i as isize - step) as usize];
            let next = mag[(i as isize + step) as usize];
            candidate[i] = m > prev && m >= next;
        }
    }

    let mut mask = vec![false; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        if candidate[i] && mag[i] >= high {
            mask[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if candidate[j] && !mask[j] {
                    mask[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }

    let direction = (0..n)
        .map(|i| {
            if mag[i] > 0.0 {
                let m = (gx[i] as f64).hypot(gy[i] as f64);
                [(gx[i] as f64 / m) as f32, (gy[i] as f64 / m) as f32]
            } else {
                [0.0, 0.0]
            }
        })
        .collect();

    Ok(EdgeMap {
        width: img.width,
        height: img.height,
        mask,
        magnitude: mag,
        direction,
    })
}

/// Distance to the nearest edge together with the edge that attains it.
///
/// Nearest-edge coordinates are always stored as linear indices into the
/// level-0 grid so coarse levels can still reach full-resolution gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: u32,
    height: u32,
    level: usize,
    base_width: u32,
    distance: Vec<f32>,
    nearest: Vec<u32>,
}

/// Result of a continuous [`field_lookup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub distance: f64,
    pub gradient: Vector2<f64>,
    /// Nearest-edge coordinate in this level's pixels.
    pub nearest: Vector2<f64>,
    /// Linear level-0 index of the nearest edge.
    pub nearest_index: u32,
}

impl DistanceField {
    /// Level-0 field with arbitrary distances whose nearest edge is pixel 0
    /// everywhere. Lookups only interpolate the distances, so this serves as
    /// an analytic field.
    pub fn from_distances(width: u32, height: u32, distance: Vec<f32>) -> Result<Self> {
        if distance.len() != width as usize * height as usize || width < 2 || height < 2 {
            return Err(Error::InvalidImage(format!(
                "need at least 2x2 and {} samples, got {}x{} with {}",
                width as usize * height as usize,
                width,
                height,
                distance.len()
            )));
        }
        Ok(Self {
            width,
            height,
            level: 0,
            base_width: width,
            nearest: vec![0; distance.len()],
            distance,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// True for the sentinel field of an edge-free frame.
    pub fn is_empty(&self) -> bool {
        self.nearest.iter().all(|&i| i == NO_EDGE)
    }

    pub fn distance(&self, x: u32, y: u32) -> f32 {
        self.distance[(y * self.width + x) as usize]
    }

    pub fn distances(&self) -> &[f32] {
        &self.distance
    }

    /// Level-0 integer coordinate of the nearest edge to pixel `(x, y)`.
    pub fn nearest_base(&self, x: u32, y: u32) -> Option<(u32, u32)> {
        let idx = self.nearest[(y * self.width + x) as usize];
        (idx != NO_EDGE).then(|| (idx % self.base_width, idx / self.base_width))
    }

    /// Nearest-edge coordinate expressed in this level's pixels.
    pub fn nearest(&self, x: u32, y: u32) -> Option<Vector2<f64>> {
        self.nearest_base(x, y)
            .map(|(u, v)| pixel_to_level(&Vector2::new(u as f64, v as f64), self.level))
    }

    /// Saturates stored distances at `cap` pixels.
    pub fn capped(mut self, cap: f32) -> Self {
        for d in &mut self.distance {
            *d = d.min(cap);
        }
        self
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.distance[y * self.width as usize + x] as f64
    }
}

/// Exact Euclidean distance transform with nearest-edge propagation.
///
/// Columns are resolved with a forward/backward scan, rows with the lower
/// envelope of parabolas. An edge-free map yields an all-infinite field.
/// Among equidistant edges the one with the lowest column wins, then the
/// lowest row.
pub fn distance_transform(edges: &EdgeMap) -> DistanceField {
    let (w, h) = (edges.width as usize, edges.height as usize);
    let n = w * h;
    let inf = f64::INFINITY;

    // Column pass: squared vertical distance and nearest edge row.
    let mut col_sq = vec![inf; n];
    let mut col_row = vec![usize::MAX; n];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if edges.mask[y * w + x] {
                last = Some(y);
            }
            if let Some(ly) = last {
                col_row[y * w + x] = ly;
                col_sq[y * w + x] = ((y - ly) * (y - ly)) as f64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if edges.mask[y * w + x] {
                next = Some(y);
            }
            if let Some(ny) = next {
                let d = ((ny - y) * (ny - y)) as f64;
                if d < col_sq[y * w + x] {
                    col_sq[y * w + x] = d;
                    col_row[y * w + x] = ny;
                }
            }
        }
    }

    let mut distance = vec![f32::INFINITY; n];
    let mut nearest = vec![NO_EDGE; n];
    let mut sites = vec![0usize; w];
    let mut bounds = vec![0f64; w + 1];
    let mut f = vec![0f64; w];
    for y in 0..h {
        for x in 0..w {
            f[x] = col_sq[y * w + x];
        }
        // Lower envelope of parabolas rooted at columns with a finite value.
        let mut k: isize = -1;
        for q in 0..w {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    sites[0] = q;
                    bounds[0] = f64::NEG_INFINITY;
                    bounds[1] = f64::INFINITY;
                    break;
                }
                let v = sites[k as usize];
                let s = ((f[q] + (q * q) as f64) - (f[v] + (v * v) as f64)) / (2.0 * (q as f64 - v as f64));
                if s <= bounds[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                sites[k as usize] = q;
                bounds[k as usize] = s;
                bounds[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for x in 0..w {
            while bounds[j + 1] < x as f64 {
                j += 1;
            }
            let s = sites[j];
            let dx = x as f64 - s as f64;
            let sq = dx * dx + f[s];
            let i = y * w + x;
            distance[i] = sq.sqrt() as f32;
            nearest[i] = (col_row[y * w + s] * w + s) as u32;
        }
    }

    DistanceField {
        width: edges.width,
        height: edges.height,
        level: 0,
        base_width: edges.width,
        distance,
        nearest,
    }
}

/// Three distance-field levels, each half the resolution of the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceFieldPyramid {
    levels: Vec<DistanceField>,
}

impl DistanceFieldPyramid {
    pub fn level(&self, level: usize) -> &DistanceField {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[DistanceField] {
        &self.levels
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }
}

/// Builds coarser levels by bilinear sampling at the centers of 2x2 blocks of
/// the finer level. Distances are halved per level so they stay in
/// level-local pixels; every level is then saturated at `cap`.
pub fn build_pyramid(field: &DistanceField, cap: f32) -> DistanceFieldPyramid {
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    let mut current = field.clone();
    for _ in 1..PYRAMID_LEVELS {
        let next = downsample(&current);
        levels.push(current.capped(cap));
        current = next;
    }
    levels.push(current.capped(cap));
    DistanceFieldPyramid { levels }
}

fn downsample(field: &DistanceField) -> DistanceField {
    let (w, h) = (field.width as usize, field.height as usize);
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let mut distance = Vec::with_capacity(cw * ch);
    let mut nearest = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        let y0 = 2 * y;
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..cw {
            let x0 = 2 * x;
            let x1 = (x0 + 1).min(w - 1);
            let taps = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
            let sum: f32 = taps.iter().map(|&(tx, ty)| field.distance[ty * w + tx]).sum();
            distance.push(0.25 * sum * 0.5);
            let best = taps
                .iter()
                .copied()
                .min_by(|a, b| field.distance[a.1 * w + a.0].total_cmp(&field.distance[b.1 * w + b.0]))
                .unwrap_or((x0, y0));
            nearest.push(field.nearest[best.1 * w + best.0]);
        }
    }
    DistanceField {
        width: cw as u32,
        height: ch as u32,
        level: field.level + 1,
        base_width: field.base_width,
        distance,
        nearest,
    }
}

/// True when bilinear lookup at `pt` is defined (one-pixel border margin).
pub fn field_contains(field: &DistanceField, pt: &Vector2<f64>) -> bool {
    pt.x >= 1.0 && pt.y >= 1.0 && pt.x <= (field.width as f64 - 2.0) && pt.y <= (field.height as f64 - 2.0)
}

/// Bilinear distance, its exact gradient within the enclosing cell and the
/// nearest edge of the closest integer pixel.
pub fn field_lookup(field: &DistanceField, pt: &Vector2<f64>) -> Result<FieldSample> {
    if !field_contains(field, pt) {
        return Err(Error::OutOfView);
    }
    let x0 = pt.x.floor() as usize;
    let y0 = pt.y.floor() as usize;
    let (ax, ay) = (pt.x - x0 as f64, pt.y - y0 as f64);
    let d00 = field.at(x0, y0);
    let d10 = field.at(x0 + 1, y0);
    let d01 = field.at(x0, y0 + 1);
    let d11 = field.at(x0 + 1, y0 + 1);
    let top = d00 + ax * (d10 - d00);
    let bottom = d01 + ax * (d11 - d01);
    let distance = top + ay * (bottom - top);
    let gradient = Vector2::new(
        (1.0 - ay) * (d10 - d00) + ay * (d11 - d01),
        bottom - top,
    );
    let (nx, ny) = (pt.x.round() as u32, pt.y.round() as u32);
    let nearest_index = field.nearest[(ny * field.width + nx) as usize];
    if nearest_index == NO_EDGE {
        return Err(Error::NoEdges);
    }
    let nearest = field.nearest(nx, ny).unwrap_or(*pt);
    Ok(FieldSample {
        distance,
        gradient,
        nearest,
        nearest_index,
    })
}

/// Canny thresholds and distance cap shared by the preprocessing stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub canny_low: f32,
    pub canny_high: f32,
    pub distance_cap: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            canny_low: 40.0,
            canny_high: 100.0,
            distance_cap: 30.0,
        }
    }
}

/// A frame ready for tracking.
#[derive(Debug, Clone)]
pub struct PreprocessedFrame {
    pub timestamp: f64,
    pub depth: DepthImage,
    pub edges: EdgeMap,
    pub pyramid: DistanceFieldPyramid,
}

pub fn preprocess(timestamp: f64, gray: &GrayImage, depth: DepthImage, config: &PreprocessConfig) -> Result<PreprocessedFrame> {
    if gray.width != depth.width || gray.height != depth.height {
        return Err(Error::InvalidImage("gray and depth sizes differ".into()));
    }
    let edges = canny_detect(gray, config.canny_low, config.canny_high)?;
    let field = distance_transform(&edges);
    let pyramid = build_pyramid(&field, config.distance_cap);
    Ok(PreprocessedFrame {
        timestamp,
        depth,
        edges,
        pyramid,
    })
}
