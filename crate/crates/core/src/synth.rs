//! Deterministic synthetic infrared/visible video with ground-truth flow and motion masks.
//!
//! The visible modality is a value-noise textured background with dim textured
//! objects; the infrared modality is a flat background with bright objects.
//! Objects move with constant velocity and are rendered by bilinear splatting, so
//! sub-pixel positions keep the ground-truth flow exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_entries, parse_value, Entry};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::io;
use crate::tensor::Tensor;

/// Lattice spacing of the background value noise.
const BACKGROUND_CELL: usize = 4;
/// Lattice spacing of the per-object texture.
const OBJECT_CELL: usize = 3;
/// Texture amplitude of infrared objects.
const IR_OBJECT_TEXTURE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { width: usize, height: usize },
    Disk { radius: usize },
}

impl Shape {
    fn bbox(self) -> (usize, usize) {
        match self {
            Shape::Rect { width, height } => (width, height),
            Shape::Disk { radius } => (2 * radius, 2 * radius),
        }
    }

    fn covers(self, x: usize, y: usize) -> bool {
        match self {
            Shape::Rect { .. } => true,
            Shape::Disk { radius } => {
                let r = radius as f64;
                let (cx, cy) = (x as f64 + 0.5 - r, y as f64 + 0.5 - r);
                cx * cx + cy * cy <= r * r
            }
        }
    }
}

/// A constant-velocity object. `(x, y)` is the top-left corner of its bounding box at frame 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub ir_intensity: f64,
    pub vis_intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: Vec<SceneObject>,
    /// Amplitude of the visible background texture around mid-gray.
    pub vis_texture: f64,
    pub ir_base: f64,
    pub noise_vis: f64,
    pub noise_ir: f64,
}

impl Default for SceneSpec {
    /// 64×64, 10 frames: a 16×16 rectangle moving right and an r=8 disk moving up-left.
    fn default() -> Self {
        Self {
            seed: 7,
            width: 64,
            height: 64,
            frames: 10,
            objects: vec![
                SceneObject {
                    shape: Shape::Rect { width: 16, height: 16 },
                    x: 8.0,
                    y: 8.0,
                    dx: 2.0,
                    dy: 0.0,
                    ir_intensity: 0.9,
                    vis_intensity: 0.25,
                },
                SceneObject {
                    shape: Shape::Disk { radius: 8 },
                    x: 40.0,
                    y: 38.0,
                    dx: -2.0,
                    dy: -1.0,
                    ir_intensity: 0.8,
                    vis_intensity: 0.3,
                },
            ],
            vis_texture: 0.35,
            ir_base: 0.2,
            noise_vis: 0.01,
            noise_ir: 0.01,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")))
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::invalid("scene width, height and frames must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (bw, bh) = o.shape.bbox();
            if bw == 0 || bh == 0 {
                return Err(Error::invalid(format!("object {i} has zero size")));
            }
            if bw > self.width || bh > self.height {
                return Err(Error::invalid(format!(
                    "object {i} ({bw}x{bh}) is larger than the {}x{} frame",
                    self.width, self.height
                )));
            }
            if ![o.x, o.y, o.dx, o.dy].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("object {i} has a non-finite position or velocity")));
            }
            unit("ir intensity", o.ir_intensity)?;
            unit("vis intensity", o.vis_intensity)?;
        }
        unit("vis_texture", self.vis_texture)?;
        unit("ir_base", self.ir_base)?;
        if !(self.noise_vis >= 0.0 && self.noise_ir >= 0.0) {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        Ok(())
    }

    /// Parses a scene file: scalar `key = value` lines plus repeatable
    /// `object = rect w=16 h=16 x=8 y=8 dx=2 dy=0 ir=0.9 vis=0.25` (or `disk r=8 ...`).
    /// Any `object` line replaces the default object list.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut spec = SceneSpec::default();
        let mut objects = Vec::new();
        for e in parse_entries(text, path)? {
            match e.key.as_str() {
                "seed" => spec.seed = parse_value(&e, path)?,
                "width" => spec.width = parse_value(&e, path)?,
                "height" => spec.height = parse_value(&e, path)?,
                "frames" => spec.frames = parse_value(&e, path)?,
                "vis_texture" => spec.vis_texture = parse_value(&e, path)?,
                "ir_base" => spec.ir_base = parse_value(&e, path)?,
                "noise_vis" => spec.noise_vis = parse_value(&e, path)?,
                "noise_ir" => spec.noise_ir = parse_value(&e, path)?,
                "object" => objects.push(parse_object(&e, path)?),
                other => {
                    return Err(Error::Config {
                        path: path.to_path_buf(),
                        line: e.line,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        if !objects.is_empty() {
            spec.objects = objects;
        }
        spec.validate().map_err(|err| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            msg: err.to_string(),
        })?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "frames = {}", self.frames).unwrap();
        writeln!(s, "vis_texture = {}", self.vis_texture).unwrap();
        writeln!(s, "ir_base = {}", self.ir_base).unwrap();
        writeln!(s, "noise_vis = {}", self.noise_vis).unwrap();
        writeln!(s, "noise_ir = {}", self.noise_ir).unwrap();
        for o in &self.objects {
            let shape = match o.shape {
                Shape::Rect { width, height } => format!("rect w={width} h={height}"),
                Shape::Disk { radius } => format!("disk r={radius}"),
            };
            writeln!(
                s,
                "object = {shape} x={} y={} dx={} dy={} ir={} vis={}",
                o.x, o.y, o.dx, o.dy, o.ir_intensity, o.vis_intensity
            )
            .unwrap();
        }
        s
    }
}

fn parse_object(e: &Entry, path: &Path) -> Result<SceneObject> {
    let err = |msg: String| Error::Config {
        path: path.to_path_buf(),
        line: e.line,
        msg,
    };
    let mut words = e.value.split_whitespace();
    let kind = words.next().ok_or_else(|| err("empty object description".into()))?;
    let mut fields: Vec<(&str, f64)> = Vec::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected name=value, got `{w}`")))?;
        let v: f64 = v.parse().map_err(|_| err(format!("cannot parse `{v}` for object field `{k}`")))?;
        fields.push((k, v));
    }
    let get = |k: &str, default: Option<f64>| -> Result<f64> {
        fields
            .iter()
            .find(|(n, _)| *n == k)
            .map(|&(_, v)| v)
            .or(default)
            .ok_or_else(|| err(format!("object is missing `{k}`")))
    };
    let size = |k: &str| -> Result<usize> {
        let v = get(k, None)?;
        if v < 1.0 || v.fract() != 0.0 {
            return Err(err(format!("object `{k}` must be a positive integer")));
        }
        Ok(v as usize)
    };
    let allowed: &[&str] = match kind {
        "rect" => &["w", "h", "x", "y", "dx", "dy", "ir", "vis"],
        "disk" => &["r", "x", "y", "dx", "dy", "ir", "vis"],
        other => return Err(err(format!("unknown object shape `{other}`"))),
    };
    if let Some((k, _)) = fields.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(err(format!("unknown object field `{k}`")));
    }
    let shape = if kind == "rect" {
        Shape::Rect {
            width: size("w")?,
            height: size("h")?,
        }
    } else {
        Shape::Disk { radius: size("r")? }
    };
    Ok(SceneObject {
        shape,
        x: get("x", None)?,
        y: get("y", None)?,
        dx: get("dx", Some(0.0))?,
        dy: get("dy", Some(0.0))?,
        ir_intensity: get("ir", Some(0.9))?,
        vis_intensity: get("vis", Some(0.25))?,
    })
}

/// Generated sequence. `flow_fwd[t]` maps frame `t` toward `t+1` and
/// `flow_bwd[t]` maps frame `t+1` toward `t` (backward-warp convention).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub ir: Vec<Tensor<f32>>,
    pub vis: Vec<Tensor<f32>>,
    pub flow_fwd: Vec<FlowField>,
    pub flow_bwd: Vec<FlowField>,
    pub masks: Vec<Tensor<f32>>,
}

/// Seeded lattice noise, bilinearly interpolated and smoothed by a 3×3 box filter.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let lw = w / cell + 2;
    let lh = h / cell + 2;
    let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.gen::<f64>()).collect();
    let mut raw = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let l = |i: usize, j: usize| lattice[j * lw + i];
            raw[y * w + x] = (1.0 - ty) * ((1.0 - tx) * l(x0, y0) + tx * l(x0 + 1, y0))
                + ty * ((1.0 - tx) * l(x0, y0 + 1) + tx * l(x0 + 1, y0 + 1));
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for j in -1i64..=1 {
                for i in -1i64..=1 {
                    let xx = (x as i64 + i).clamp(0, w as i64 - 1) as usize;
                    let yy = (y as i64 + j).clamp(0, h as i64 - 1) as usize;
                    s += raw[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

struct Appearance {
    bw: usize,
    bh: usize,
    cover: Vec<bool>,
    ir: Vec<f64>,
    vis: Vec<f64>,
}

/// Splats one object at real-valued offset; returns per-pixel coverage and premultiplied values.
fn splat(app: &Appearance, ox: f64, oy: f64, w: usize, h: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut cov = vec![0.0; w * h];
    let mut ir = vec![0.0; w * h];
    let mut vis = vec![0.0; w * h];
    let (ix, iy) = (ox.floor(), oy.floor());
    let (fx, fy) = (ox - ix, oy - iy);
    let taps = [
        (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ];
    for ly in 0..app.bh {
        for lx in 0..app.bw {
            let k = ly * app.bw + lx;
            if !app.cover[k] {
                continue;
            }
            for &(ax, ay, wt) in &taps {
                if wt == 0.0 {
                    continue;
                }
                let x = ix as i64 + lx as i64 + ax;
                let y = iy as i64 + ly as i64 + ay;
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let p = y as usize * w + x as usize;
                cov[p] += wt;
                ir[p] += wt * app.ir[k];
                vis[p] += wt * app.vis[k];
            }
        }
    }
    (cov, ir, vis)
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let (w, h, frames) = (spec.width, spec.height, spec.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_vis: Vec<f64> = value_noise(&mut rng, w, h, BACKGROUND_CELL)
        .into_iter()
        .map(|n| 0.5 + 2.0 * spec.vis_texture * (n - 0.5))
        .collect();
    let apps: Vec<Appearance> = spec
        .objects
        .iter()
        .map(|o| {
            let (bw, bh) = o.shape.bbox();
            let tex = value_noise(&mut rng, bw, bh, OBJECT_CELL);
            Appearance {
                bw,
                bh,
                cover: (0..bw * bh).map(|k| o.shape.covers(k % bw, k / bw)).collect(),
                ir: tex.iter().map(|n| o.ir_intensity + IR_OBJECT_TEXTURE * (n - 0.5)).collect(),
                vis: tex.iter().map(|n| o.vis_intensity + spec.vis_texture * (n - 0.5)).collect(),
            }
        })
        .collect();
    let normal = |sigma: f64| Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()));
    let (nv, ni) = (normal(spec.noise_vis)?, normal(spec.noise_ir)?);

    let mut out = SyntheticVideo {
        ir: Vec::with_capacity(frames),
        vis: Vec::with_capacity(frames),
        flow_fwd: Vec::new(),
        flow_bwd: Vec::new(),
        masks: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let mut vis = bg_vis.clone();
        let mut ir = vec![spec.ir_base; w * h];
        // Velocity of the topmost object per pixel; None where the background shows.
        let mut top: Vec<Option<(f64, f64)>> = vec![None; w * h];
        for (o, app) in spec.objects.iter().zip(&apps) {
            let (cov, oi, ov) = splat(app, o.x + o.dx * t as f64, o.y + o.dy * t as f64, w, h);
            for p in 0..w * h {
                let c = cov[p].min(1.0);
                vis[p] = vis[p] * (1.0 - c) + ov[p];
                ir[p] = ir[p] * (1.0 - c) + oi[p];
                if cov[p] >= 0.5 {
                    top[p] = Some((o.dx, o.dy));
                }
            }
        }
        for p in 0..w * h {
            vis[p] = (vis[p] + nv.sample(&mut rng)).clamp(0.0, 1.0);
            ir[p] = (ir[p] + ni.sample(&mut rng)).clamp(0.0, 1.0);
        }
        out.vis.push(Tensor::from_vec(&[h, w], vis.iter().map(|&v| v as f32).collect())?);
        out.ir.push(Tensor::from_vec(&[h, w], ir.iter().map(|&v| v as f32).collect())?);
        let moving = |p: usize| top[p].filter(|&(dx, dy)| dx != 0.0 || dy != 0.0);
        out.masks.push(Tensor::from_fn(&[h, w], |p| if moving(p).is_some() { 1.0 } else { 0.0 }));
        let flow = |sign: f32| {
            FlowField::from_fn(w, h, |x, y| match moving(y * w + x) {
                Some((dx, dy)) => (sign * dx as f32, sign * dy as f32),
                None => (0.0, 0.0),
            })
        };
        if t + 1 < frames {
            out.flow_fwd.push(flow(1.0));
        }
        if t > 0 {
            out.flow_bwd.push(flow(-1.0));
        }
    }
    Ok(out)
}

impl SyntheticVideo {
    pub fn frame_count(&self) -> usize {
        self.ir.len()
    }

    /// Writes `ir/`, `vis/`, `mask/` frame directories and `flow/{fwd,bwd}_XXXX.flo`,
    /// where the index names the source frame of each flow.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_frame_dir(&dir.join("ir"), &self.ir)?;
        io::write_frame_dir(&dir.join("vis"), &self.vis)?;
        io::write_frame_dir(&dir.join("mask"), &self.masks)?;
        let flow_dir = dir.join("flow");
        for (t, f) in self.flow_fwd.iter().enumerate() {
            io::write_flo(&flow_dir.join(io::flow_name("fwd", t)), f)?;
        }
        for (t, f) in self.flow_bwd.iter().enumerate() {
            io::write_flo(&flow_dir.join(io::flow_name("bwd", t + 1)), f)?;
        }
        Ok(())
    }
}
