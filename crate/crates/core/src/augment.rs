//! Self-supervised patch augmentations: Bézier intensity remapping, local
//! voxel shuffling and in/out-painting, plus two-view pair generation.
//!
//! Every transform is a pure function of its input, parameters and seed.
//! Output patches keep the shape and metadata of their input.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Patch;

/// Number of curve samples in the Bézier lookup table.
pub const BEZIER_SAMPLES: usize = 1024;

pub type ControlPoints = [[f64; 2]; 4];

pub const IDENTITY_CURVE: ControlPoints = [[0.0, 0.0], [1.0 / 3.0, 1.0 / 3.0], [2.0 / 3.0, 2.0 / 3.0], [1.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaintMode {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub bezier_points: ControlPoints,
    pub shuffle_blocks: usize,
    pub shuffle_block_size: usize,
    pub paint_count: usize,
    pub paint_size_range: (usize, usize),
    pub bezier_probability: f64,
    pub shuffle_probability: f64,
    pub paint_probability: f64,
    /// Share of paint applications that in-paint; the rest out-paint.
    pub inpaint_share: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            bezier_points: [[0.0, 0.0], [0.3, 0.6], [0.7, 0.4], [1.0, 1.0]],
            shuffle_blocks: 16,
            shuffle_block_size: 4,
            paint_count: 3,
            paint_size_range: (4, 8),
            bezier_probability: 0.9,
            shuffle_probability: 0.5,
            paint_probability: 0.5,
            inpaint_share: 0.8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let pts = &self.bezier_points;
        if pts[0] != [0.0, 0.0] || pts[3] != [1.0, 1.0] {
            return Err(Error::invalid("bezier endpoints must be (0,0) and (1,1)"));
        }
        if pts.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("bezier control points must lie in [0,1]^2"));
        }
        for (name, p) in [
            ("bezier_probability", self.bezier_probability),
            ("shuffle_probability", self.shuffle_probability),
            ("paint_probability", self.paint_probability),
            ("inpaint_share", self.inpaint_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.shuffle_block_size == 0 || self.shuffle_block_size > patch_size {
            return Err(Error::invalid(format!(
                "shuffle_block_size {} must be in 1..={patch_size}",
                self.shuffle_block_size
            )));
        }
        check_size_range(self.paint_size_range, patch_size)
    }
}

fn check_size_range((lo, hi): (usize, usize), patch_size: usize) -> Result<()> {
    if lo == 0 || lo > hi || hi > patch_size {
        return Err(Error::invalid(format!(
            "paint size range ({lo}, {hi}) must satisfy 1 <= min <= max <= {patch_size}"
        )));
    }
    Ok(())
}

fn cubic_bezier(p: [f64; 4], t: f64) -> f64 {
    let s = 1.0 - t;
    s * s * s * p[0] + 3.0 * s * s * t * p[1] + 3.0 * s * t * t * p[2] + t * t * t * p[3]
}

/// Sampled `x -> y` mapping of a cubic Bézier curve.
///
/// The curve is parametric in `t`; `x(t)` samples are made non-decreasing
/// with a running maximum so the table can be inverted by binary search.
#[derive(Debug, Clone)]
pub struct BezierLut {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl BezierLut {
    pub fn new(points: &ControlPoints) -> Self {
        let px = [points[0][0], points[1][0], points[2][0], points[3][0]];
        let py = [points[0][1], points[1][1], points[2][1], points[3][1]];
        let mut xs = Vec::with_capacity(BEZIER_SAMPLES);
        let mut ys = Vec::with_capacity(BEZIER_SAMPLES);
        let mut running = f64::NEG_INFINITY;
        for i in 0..BEZIER_SAMPLES {
            let t = i as f64 / (BEZIER_SAMPLES - 1) as f64;
            running = running.max(cubic_bezier(px, t));
            xs.push(running);
            ys.push(cubic_bezier(py, t));
        }
        BezierLut { xs, ys }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        // first sample strictly greater than x
        let hi = self.xs.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let (x0, x1) = (self.xs[lo], self.xs[hi]);
        let w = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        self.ys[lo] + w * (self.ys[hi] - self.ys[lo])
    }
}

fn value_range(data: &[f32]) -> (f32, f32) {
    data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Remaps patch intensities through a cubic Bézier curve.
///
/// Intensities are min-max normalized over the whole patch, mapped, then
/// scaled back to the original range. A constant patch is returned as is.
pub fn bezier_intensity(patch: &Patch, points: &ControlPoints) -> Patch {
    let (lo, hi) = value_range(&patch.data);
    if !(hi > lo) {
        return patch.clone();
    }
    let lut = BezierLut::new(points);
    let (lo, span) = (f64::from(lo), f64::from(hi) - f64::from(lo));
    let data = patch
        .data
        .iter()
        .map(|&v| {
            let u = (f64::from(v) - lo) / span;
            (lo + lut.eval(u) * span) as f32
        })
        .collect();
    patch.with_data(data)
}

#[inline]
fn offset(size: usize, x: usize, y: usize, z: usize) -> usize {
    (z * size + y) * size + x
}

fn random_box(rng: &mut impl Rng, patch_size: usize, extent: [usize; 3]) -> [std::ops::Range<usize>; 3] {
    std::array::from_fn(|a| {
        let start = rng.random_range(0..=patch_size - extent[a]);
        start..start + extent[a]
    })
}

/// Permutes voxels inside `n_blocks` random cubes of side `block_size`.
///
/// All channels of a block receive the same permutation so registered
/// channels stay aligned.
pub fn local_pixel_shuffle(patch: &Patch, n_blocks: usize, block_size: usize, seed: u64) -> Result<Patch> {
    if block_size == 0 || block_size > patch.size {
        return Err(Error::invalid(format!(
            "block size {block_size} must be in 1..={}",
            patch.size
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut data = patch.data.clone();
    let per_channel = patch.voxels_per_channel();
    let mut cells = Vec::with_capacity(block_size.pow(3));
    let mut buf = Vec::with_capacity(block_size.pow(3));
    for _ in 0..n_blocks {
        let [bx, by, bz] = random_box(&mut rng, patch.size, [block_size; 3]);
        cells.clear();
        for z in bz {
            for y in by.clone() {
                for x in bx.clone() {
                    cells.push(offset(patch.size, x, y, z));
                }
            }
        }
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.shuffle(&mut rng);
        for c in 0..patch.channels {
            let base = c * per_channel;
            buf.clear();
            buf.extend(order.iter().map(|&o| data[base + cells[o]]));
            for (&cell, &v) in cells.iter().zip(&buf) {
                data[base + cell] = v;
            }
        }
    }
    Ok(patch.with_data(data))
}

/// In-painting fills `count` random boxes with uniform noise spanning the
/// patch's intensity range; out-painting replaces everything outside the
/// union of the boxes instead.
pub fn paint(patch: &Patch, mode: PaintMode, count: usize, size_range: (usize, usize), seed: u64) -> Result<Patch> {
    check_size_range(size_range, patch.size)?;
    let mut rng = rng::seeded(seed);
    let n = patch.voxels_per_channel();
    let mut inside = vec![false; n];
    for _ in 0..count {
        let extent = std::array::from_fn(|_| rng.random_range(size_range.0..=size_range.1));
        let [bx, by, bz] = random_box(&mut rng, patch.size, extent);
        for z in bz {
            for y in by.clone() {
                for x in bx.clone() {
                    inside[offset(patch.size, x, y, z)] = true;
                }
            }
        }
    }
    let (lo, hi) = value_range(&patch.data);
    let mut data = patch.data.clone();
    for c in 0..patch.channels {
        for (i, &in_box) in inside.iter().enumerate() {
            let replace = match mode {
                PaintMode::In => in_box,
                PaintMode::Out => !in_box,
            };
            if replace {
                data[c * n + i] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            }
        }
    }
    Ok(patch.with_data(data))
}

fn augment_view(patch: &Patch, cfg: &AugmentConfig, seed: u64) -> Result<Patch> {
    let mut rng = rng::seeded(seed);
    let mut out = patch.clone();
    if rng.random_bool(cfg.bezier_probability) {
        out = bezier_intensity(&out, &cfg.bezier_points);
    }
    if rng.random_bool(cfg.shuffle_probability) {
        out = local_pixel_shuffle(&out, cfg.shuffle_blocks, cfg.shuffle_block_size, rng.random())?;
    }
    if rng.random_bool(cfg.paint_probability) {
        let mode = if rng.random_bool(cfg.inpaint_share) {
            PaintMode::In
        } else {
            PaintMode::Out
        };
        out = paint(&out, mode, cfg.paint_count, cfg.paint_size_range, rng.random())?;
    }
    Ok(out)
}

/// Two independently augmented views of one patch for the contrastive task.
///
/// View `i` draws from the stream `derive_seed(seed, i)`; within a view the
/// transforms run in the order bezier, shuffle, paint, each gated by its own
/// probability.
pub fn augment_pair(patch: &Patch, cfg: &AugmentConfig, seed: u64) -> Result<(Patch, Patch)> {
    cfg.validate(patch.size)?;
    let a = augment_view(patch, cfg, rng::derive_seed(seed, 0))?;
    let b = augment_view(patch, cfg, rng::derive_seed(seed, 1))?;
    Ok((a, b))
}
