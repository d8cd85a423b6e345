//! Optical flow between gray frames and flow-derived motion masks.
//!
//! Flow follows the backward-warp convention used by [`crate::ops::bilinear_sample`]:
//! for `flow = estimate_flow(a, b)`, `a(p) ≈ b(p + flow(p))`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel displacement `(dx, dy)` in pixels, row-major and interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        Self::from_fn(width, height, |_, _| (dx, dy))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(2 * width * height);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data.push(dx);
                data.push(dy);
            }
        }
        Self { width, height, data }
    }

    /// Builds a field from interleaved `(dx, dy)` values.
    pub fn from_interleaved(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::invalid(format!(
                "flow {width}×{height} needs {} values, got {}",
                2 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn interleaved(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.data.chunks(2).map(|v| v[0].hypot(v[1])).collect()
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Planar `2×H×W` tensor (dx plane then dy plane), the layout the warp kernels use.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.width * self.height;
        Tensor::from_fn(&[2, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            T::lit(self.data[2 * p + c] as f64)
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [2, h, w] = t.shape()[..] else {
            return Err(Error::invalid(format!("flow tensor must be 2×H×W, got {:?}", t.shape())));
        };
        let hw = h * w;
        Ok(Self::from_fn(w, h, |x, y| {
            let p = y * w + x;
            (t.data()[p].as_f64() as f32, t.data()[hw + p].as_f64() as f32)
        }))
    }

    /// Top-left `w×h` window starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }
}

/// Block matcher settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Block edge in pixels at every pyramid level.
    pub block: usize,
    /// Search radius (pixels) at the coarsest level.
    pub search: usize,
    /// Coarsest level scale; a power of two.
    pub downscale: usize,
    /// Half-size of the per-pixel matching window used to assign block vectors to pixels.
    pub pixel_radius: usize,
    /// Zero out vectors that fail the forward–backward round trip by more than this
    /// many pixels (occluded or disoccluded pixels). `None` disables the check.
    pub occlusion_tolerance: Option<f32>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            block: 8,
            search: 4,
            downscale: 4,
            pixel_radius: 2,
            occlusion_tolerance: Some(1.0),
        }
    }
}

/// Gray image plane used during matching.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.v[yc * self.w + xc]
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.v[2 * y * self.w + 2 * x]
                    + self.v[2 * y * self.w + 2 * x + 1]
                    + self.v[(2 * y + 1) * self.w + 2 * x]
                    + self.v[(2 * y + 1) * self.w + 2 * x + 1];
                v.push(s * 0.25);
            }
        }
        Plane { w, h, v }
    }
}

type Vec2 = (i32, i32);

/// Search radius around each doubled parent vector at the finer pyramid levels.
const REFINE_RADIUS: i32 = 2;

/// Candidate ordering: lower cost, then smaller squared magnitude, then lexicographic `(dy, dx)`.
#[inline]
fn better(cost: f32, d: Vec2, best_cost: f32, best: Vec2) -> bool {
    if cost != best_cost {
        return cost < best_cost;
    }
    let (m, bm) = (d.0 * d.0 + d.1 * d.1, best.0 * best.0 + best.1 * best.1);
    if m != bm {
        return m < bm;
    }
    (d.1, d.0) < (best.1, best.0)
}

fn sad(a: &Plane, b: &Plane, x0: usize, y0: usize, x1: usize, y1: usize, d: Vec2) -> f32 {
    let mut s = 0.0f32;
    for y in y0..y1 {
        for x in x0..x1 {
            s += (a.v[y * a.w + x] - b.at(x as isize + d.0 as isize, y as isize + d.1 as isize)).abs();
        }
    }
    s
}

struct BlockField {
    cols: usize,
    rows: usize,
    v: Vec<Vec2>,
}

impl BlockField {
    fn at(&self, bx: isize, by: isize) -> Vec2 {
        let x = bx.clamp(0, self.cols as isize - 1) as usize;
        let y = by.clamp(0, self.rows as isize - 1) as usize;
        self.v[y * self.cols + x]
    }
}

fn match_blocks(a: &Plane, b: &Plane, block: usize, limit: i32, candidates: impl Fn(usize, usize) -> Vec<(Vec2, i32)>) -> BlockField {
    let cols = a.w.div_ceil(block);
    let rows = a.h.div_ceil(block);
    let mut v = Vec::with_capacity(cols * rows);
    for by in 0..rows {
        for bx in 0..cols {
            let (x0, y0) = (bx * block, by * block);
            let (x1, y1) = ((x0 + block).min(a.w), (y0 + block).min(a.h));
            let mut best = (0, 0);
            let mut best_cost = f32::INFINITY;
            let mut seen: Vec<Vec2> = Vec::new();
            for (c, r) in candidates(bx, by) {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let d = (c.0 + dx, c.1 + dy);
                        if d.0.abs() > limit || d.1.abs() > limit || seen.contains(&d) {
                            continue;
                        }
                        seen.push(d);
                        let cost = sad(a, b, x0, y0, x1, y1, d);
                        if better(cost, d, best_cost, best) {
                            best_cost = cost;
                            best = d;
                        }
                    }
                }
            }
            v.push(best);
        }
    }
    BlockField { cols, rows, v }
}

fn plane(frame: &Tensor<f32>) -> Result<Plane> {
    let (h, w) = frame.hw()?;
    Ok(Plane {
        w,
        h,
        v: frame.data().to_vec(),
    })
}

/// Coarse-to-fine minimum-SAD block matching.
///
/// The coarsest level (`1/downscale`) runs an exhaustive `±search` window; each
/// finer level refines the doubled vectors of the 3×3 parent neighbourhood by
/// `±2`. At full resolution every pixel picks, among the vectors of its 3×3
/// block neighbourhood, the one with the lowest SAD over the best small window
/// containing it. Ties prefer the smallest displacement, then lexicographic
/// `(dy, dx)`, so textureless content yields zero flow. Components never exceed
/// `search·downscale`.
///
/// With `occlusion_tolerance` set, the reverse flow `b → a` is estimated too and
/// every vector whose round trip `φ(p) + φ_rev(p + φ(p))` exceeds the tolerance is
/// set to zero, so pixels without a counterpart in `b` report no motion.
pub fn estimate_flow(frame_a: &Tensor<f32>, frame_b: &Tensor<f32>, cfg: &FlowConfig) -> Result<FlowField> {
    let fwd = match_flow(frame_a, frame_b, cfg)?;
    let Some(tol) = cfg.occlusion_tolerance else {
        return Ok(fwd);
    };
    let bwd = match_flow(frame_b, frame_a, cfg)?;
    let (w, h) = (fwd.width, fwd.height);
    Ok(FlowField::from_fn(w, h, |x, y| {
        let (dx, dy) = fwd.get(x, y);
        let qx = (x as f32 + dx).round().clamp(0.0, (w - 1) as f32) as usize;
        let qy = (y as f32 + dy).round().clamp(0.0, (h - 1) as f32) as usize;
        let (bx, by) = bwd.get(qx, qy);
        if (dx + bx).hypot(dy + by) > tol {
            (0.0, 0.0)
        } else {
            (dx, dy)
        }
    }))
}

fn match_flow(frame_a: &Tensor<f32>, frame_b: &Tensor<f32>, cfg: &FlowConfig) -> Result<FlowField> {
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::shape("estimate_flow", frame_a.shape(), frame_b.shape()));
    }
    if cfg.block == 0 || cfg.downscale == 0 || !cfg.downscale.is_power_of_two() {
        return Err(Error::invalid(format!(
            "flow config needs block ≥ 1 and a power-of-two downscale, got {cfg:?}"
        )));
    }
    let (h, w) = frame_a.hw()?;
    let min = cfg.block * cfg.downscale;
    if h < min || w < min {
        return Err(Error::invalid(format!(
            "frames {w}×{h} smaller than block·downscale = {min}"
        )));
    }
    let levels = cfg.downscale.trailing_zeros() as usize;
    let mut pa = vec![plane(frame_a)?];
    let mut pb = vec![plane(frame_b)?];
    for l in 0..levels {
        let (na, nb) = (pa[l].half(), pb[l].half());
        pa.push(na);
        pb.push(nb);
    }
    let limit = (cfg.search * cfg.downscale) as i32;
    let s = cfg.search as i32;
    let mut field = match_blocks(&pa[levels], &pb[levels], cfg.block, s, |_, _| vec![((0, 0), s)]);
    for l in (0..levels).rev() {
        let parent = field;
        let lim = limit >> l;
        let blk = cfg.block;
        field = match_blocks(&pa[l], &pb[l], blk, lim, |bx, by| {
            // Parent block covering this block's centre.
            let cx = ((bx * blk + blk / 2) / 2 / blk) as isize;
            let cy = ((by * blk + blk / 2) / 2 / blk) as isize;
            let mut c = vec![((0, 0), REFINE_RADIUS)];
            for oy in -1..=1 {
                for ox in -1..=1 {
                    let v = parent.at(cx + ox, cy + oy);
                    c.push(((2 * v.0, 2 * v.1), REFINE_RADIUS));
                }
            }
            c
        });
    }
    let (a, b) = (&pa[0], &pb[0]);
    let blk = cfg.block;
    let candidates = |x: usize, y: usize| {
        let (bx, by) = ((x / blk) as isize, (y / blk) as isize);
        let mut cands: Vec<Vec2> = vec![(0, 0)];
        for oy in -1..=1 {
            for ox in -1..=1 {
                let v = field.at(bx + ox, by + oy);
                if !cands.contains(&v) {
                    cands.push(v);
                }
            }
        }
        cands
    };
    let mut distinct: Vec<Vec2> = vec![(0, 0)];
    distinct.extend(field.v.iter().copied());
    distinct.sort_unstable();
    distinct.dedup();
    let maps: Vec<Vec<f32>> = distinct.iter().map(|&d| shiftable_window_cost(a, b, d, cfg.pixel_radius)).collect();
    Ok(FlowField::from_fn(w, h, |x, y| {
        let mut best = (0, 0);
        let mut best_cost = f32::INFINITY;
        for d in candidates(x, y) {
            let cost = maps[distinct.binary_search(&d).unwrap()][y * w + x];
            if better(cost, d, best_cost, best) {
                best_cost = cost;
                best = d;
            }
        }
        (best.0 as f32, best.1 as f32)
    }))
}

/// Per-pixel matching cost of displacement `d`: the smallest SAD over all
/// `(2r+1)²` windows that contain the pixel. Letting the window slide off a
/// motion boundary keeps background pixels from inheriting the object's vector.
fn shiftable_window_cost(a: &Plane, b: &Plane, d: Vec2, r: usize) -> Vec<f32> {
    let (w, h) = (a.w, a.h);
    let r = r as isize;
    let mut diff = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            diff[y * w + x] = (a.v[y * w + x] - b.at(x as isize + d.0 as isize, y as isize + d.1 as isize)).abs();
        }
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // Box sum with replicated borders, separable.
    let mut rows = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).map(|o| diff[y * w + clamp(x as isize + o, w)]).sum();
        }
    }
    let mut boxed = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            boxed[y * w + x] = (-r..=r).map(|o| rows[clamp(y as isize + o, h) * w + x]).sum();
        }
    }
    // Minimum over window centres that lie inside the frame.
    let lo = |v: usize, n: usize| (v as isize - r).max(0) as usize..=((v as isize + r) as usize).min(n - 1);
    let mut mins = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            mins[y * w + x] = lo(x, w).map(|xx| boxed[y * w + xx]).fold(f32::INFINITY, f32::min);
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = lo(y, h).map(|yy| mins[yy * w + x]).fold(f32::INFINITY, f32::min);
        }
    }
    out
}

/// Elementwise average `(φ_prev + φ_next) / 2`, the initial motion estimate for the centre frame.
pub fn mean_flow(prev: &FlowField, next: &FlowField) -> Result<FlowField> {
    check_same(prev, next, "mean_flow")?;
    Ok(FlowField {
        width: prev.width,
        height: prev.height,
        data: prev.data.iter().zip(&next.data).map(|(a, b)| (a + b) * 0.5).collect(),
    })
}

fn check_same(a: &FlowField, b: &FlowField, op: &'static str) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// Per-pixel motion saliency in `[0, 1]`, stored as an `H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask(Tensor<f32>);

impl MotionMask {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        values.hw()?;
        Ok(Self(values.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn constant(width: usize, height: usize, v: f32) -> Self {
        Self(Tensor::full(&[height, width], v.clamp(0.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn max(&self) -> f32 {
        self.0.data().iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn inverted(&self) -> Self {
        Self(self.0.map(|v| 1.0 - v))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let src = &self.0;
        let sw = self.width();
        Self(Tensor::from_fn(&[h, w], |i| src.data()[(y0 + i / w) * sw + x0 + i % w]))
    }
}

/// Nearest-rank percentile of `values` (`pct` in `(0, 100]`).
pub fn percentile(values: &[f32], pct: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// `m(p) = max(‖φ_prev(p)‖, ‖φ_next(p)‖) / q`, clamped to `[0, 1]`, where `q` is
/// the `pct` percentile of that magnitude field floored at `1e-6`.
pub fn motion_mask(prev: &FlowField, next: &FlowField, pct: f64) -> Result<MotionMask> {
    check_same(prev, next, "motion_mask")?;
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::invalid(format!("percentile must be in (0, 100], got {pct}")));
    }
    let mag: Vec<f32> = prev
        .magnitude()
        .into_iter()
        .zip(next.magnitude())
        .map(|(a, b)| a.max(b))
        .collect();
    let q = percentile(&mag, pct).max(1e-6);
    let t = Tensor::from_vec(&[prev.height, prev.width], mag.iter().map(|m| (m / q).clamp(0.0, 1.0)).collect())?;
    Ok(MotionMask(t))
}

/// Binary gate: `1` where `mask ≥ theta`, else `0`.
pub fn binarize_gate(mask: &MotionMask, theta: f32) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("gate threshold must be in [0, 1], got {theta}")));
    }
    Ok(mask.0.map(|v| if v >= theta { 1.0 } else { 0.0 }))
}
