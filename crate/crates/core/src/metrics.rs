//! Fusion quality and temporal smoothness metrics.
//!
//! Images are gray `H×W` tensors in `[0, 1]`; all statistics are accumulated in `f64`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, mean_flow, FlowConfig};
use crate::loss::validity_mask;
use crate::ops;
use crate::tensor::Tensor;

/// Sigmoid shape of the edge-strength preservation term.
const QABF_KG: f64 = -15.0;
const QABF_DG: f64 = 0.5;
/// Sigmoid shape of the orientation preservation term.
const QABF_KA: f64 = -22.0;
const QABF_DA: f64 = 0.8;

/// SSIM window and stabilizers used by every SSIM-family metric here.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Name used for the temporal metric in reports.
pub const MS2R_NAME: &str = "ms2r_proxy";

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn new(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = t.hw()?;
        Ok(Self {
            w,
            h,
            v: t.data().iter().map(|&x| x as f64).collect(),
        })
    }

    #[inline]
    fn at(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.v[yc * self.w + xc]
    }
}

fn check3(a: &Tensor<f32>, b: &Tensor<f32>, f: &Tensor<f32>, op: &'static str) -> Result<()> {
    if a.shape() != f.shape() {
        return Err(Error::shape(op, a.shape(), f.shape()));
    }
    if b.shape() != f.shape() {
        return Err(Error::shape(op, b.shape(), f.shape()));
    }
    a.hw()?;
    Ok(())
}

/// Sobel edge strength and orientation per pixel, replicate-padded borders.
fn sobel(img: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::with_capacity(img.w * img.h);
    let mut a = Vec::with_capacity(img.w * img.h);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let p = |dx: isize, dy: isize| img.at(x + dx, y + dy);
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            g.push(sx.hypot(sy));
            a.push(if sx == 0.0 {
                if sy == 0.0 {
                    0.0
                } else {
                    FRAC_PI_2.copysign(sy)
                }
            } else {
                (sy / sx).atan()
            });
        }
    }
    (g, a)
}

fn edge_preservation(g_src: f64, a_src: f64, g_f: f64, a_f: f64) -> f64 {
    let rel = if g_src == g_f {
        1.0
    } else if g_src > g_f {
        g_f / g_src
    } else {
        g_src / g_f
    };
    let orient = 1.0 - (a_src - a_f).abs() / FRAC_PI_2;
    // Gains normalise each sigmoid to exactly 1 at perfect preservation.
    let tg = 1.0 + (QABF_KG * (1.0 - QABF_DG)).exp();
    let ta = 1.0 + (QABF_KA * (1.0 - QABF_DA)).exp();
    let qg = tg / (1.0 + (QABF_KG * (rel - QABF_DG)).exp());
    let qa = ta / (1.0 + (QABF_KA * (orient - QABF_DA)).exp());
    qg * qa
}

/// Gradient-based fusion performance `Q^{AB/F}`: edge strength and orientation
/// preserved from each source, weighted by the source's edge strength.
pub fn qabf(ir: &Tensor<f32>, vis: &Tensor<f32>, fused: &Tensor<f32>) -> Result<f64> {
    check3(ir, vis, fused, "qabf")?;
    let (ga, aa) = sobel(&Plane::new(ir)?);
    let (gb, ab) = sobel(&Plane::new(vis)?);
    let (gf, af) = sobel(&Plane::new(fused)?);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        num += edge_preservation(ga[i], aa[i], gf[i], af[i]) * ga[i] + edge_preservation(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// First and second moments over every valid `SSIM_WINDOW²` window.
struct WindowStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn window_stats(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<WindowStats> {
    let a64 = a.cast::<f64>();
    let b64 = b.cast::<f64>();
    let win = SSIM_WINDOW;
    let mu_a = ops::box_mean_valid(&a64, win)?.into_vec();
    let mu_b = ops::box_mean_valid(&b64, win)?.into_vec();
    let e_aa = ops::box_mean_valid(&a64.map(|x| x * x), win)?.into_vec();
    let e_bb = ops::box_mean_valid(&b64.map(|x| x * x), win)?.into_vec();
    let e_ab = ops::box_mean_valid(&a64.zip_map(&b64, |x, y| x * y), win)?.into_vec();
    let var_a = e_aa.iter().zip(&mu_a).map(|(e, m)| (e - m * m).max(0.0)).collect();
    let var_b = e_bb.iter().zip(&mu_b).map(|(e, m)| (e - m * m).max(0.0)).collect();
    let cov = e_ab.iter().zip(mu_a.iter().zip(&mu_b)).map(|(e, (x, y))| e - x * y).collect();
    Ok(WindowStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    })
}

fn ssim_windows(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(Vec<f64>, WindowStats)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let s = window_stats(a, b)?;
    let map = (0..s.mu_a.len())
        .map(|i| {
            ((2.0 * s.mu_a[i] * s.mu_b[i] + SSIM_C1) * (2.0 * s.cov[i] + SSIM_C2))
                / ((s.mu_a[i] * s.mu_a[i] + s.mu_b[i] * s.mu_b[i] + SSIM_C1) * (s.var_a[i] + s.var_b[i] + SSIM_C2))
        })
        .collect();
    Ok((map, s))
}

/// Mean local SSIM (uniform 7×7 windows).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (map, _) = ssim_windows(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Piella's saliency-weighted quality: per window, local SSIM against each
/// source weighted by that source's share of the local variance. Windows with
/// negative combined quality count as 0.
pub fn piella_qs(ir: &Tensor<f32>, vis: &Tensor<f32>, fused: &Tensor<f32>) -> Result<f64> {
    check3(ir, vis, fused, "piella_qs")?;
    let (qa, sa) = ssim_windows(ir, fused)?;
    let (qb, sb) = ssim_windows(vis, fused)?;
    let mut acc = 0.0;
    for i in 0..qa.len() {
        let total = sa.var_a[i] + sb.var_a[i];
        let lambda = if total > 0.0 { sa.var_a[i] / total } else { 0.5 };
        acc += (lambda * qa[i] + (1.0 - lambda) * qb[i]).max(0.0);
    }
    Ok(acc / qa.len() as f64)
}

fn masked_warp_error(cur: &Tensor<f32>, prev: &Tensor<f32>, flow: &Tensor<f32>, valid: &Tensor<f32>) -> Result<(f64, usize)> {
    let (h, w) = cur.hw()?;
    let warped = ops::bilinear_sample(&prev.reshape(&[1, h, w])?, flow)?;
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..h * w {
        if valid.data()[i] > 0.0 {
            s += (cur.data()[i] as f64 - warped.data()[i] as f64).abs();
            n += 1;
        }
    }
    Ok((s, n))
}

/// Temporal smoothness against both reference videos (lower is better).
///
/// For each `t ≥ 1` the flow to `t−1` is estimated on both references and
/// averaged; the warped L1 error of the fused video over forward–backward
/// consistent pixels is divided by the mean of the same error measured on the
/// two references. Returns one value per frame pair (`T−1` values).
pub fn ms2r_per_frame(fused: &[Tensor<f32>], ir: &[Tensor<f32>], vis: &[Tensor<f32>], flow_cfg: &FlowConfig) -> Result<Vec<f64>> {
    let t = fused.len();
    if t < 2 {
        return Err(Error::invalid(format!("{MS2R_NAME} needs at least 2 frames, got {t}")));
    }
    if ir.len() != t || vis.len() != t {
        return Err(Error::invalid(format!(
            "sequence lengths differ: fused {t}, ir {}, vis {}",
            ir.len(),
            vis.len()
        )));
    }
    let mut fused_err = Vec::with_capacity(t - 1);
    let mut ref_err = 0.0;
    for i in 1..t {
        for seq in [ir, vis] {
            if seq[i].shape() != fused[i].shape() {
                return Err(Error::shape("ms2r", fused[i].shape(), seq[i].shape()));
            }
        }
        let back = mean_flow(
            &estimate_flow(&vis[i], &vis[i - 1], flow_cfg)?,
            &estimate_flow(&ir[i], &ir[i - 1], flow_cfg)?,
        )?;
        let fwd = mean_flow(
            &estimate_flow(&vis[i - 1], &vis[i], flow_cfg)?,
            &estimate_flow(&ir[i - 1], &ir[i], flow_cfg)?,
        )?;
        let valid = validity_mask(&back, &fwd, 1.0)?;
        let flow = back.to_tensor::<f32>();
        let (ef, n) = masked_warp_error(&fused[i], &fused[i - 1], &flow, &valid)?;
        let (ev, _) = masked_warp_error(&vis[i], &vis[i - 1], &flow, &valid)?;
        let (ei, _) = masked_warp_error(&ir[i], &ir[i - 1], &flow, &valid)?;
        if n == 0 {
            fused_err.push(0.0);
        } else {
            fused_err.push(ef / n as f64);
            ref_err += 0.5 * (ev + ei) / n as f64;
        }
    }
    let norm = (ref_err / (t - 1) as f64).max(1e-6);
    Ok(fused_err.into_iter().map(|e| e / norm).collect())
}

pub fn ms2r_proxy(fused: &[Tensor<f32>], ir: &[Tensor<f32>], vis: &[Tensor<f32>], flow_cfg: &FlowConfig) -> Result<f64> {
    let v = ms2r_per_frame(fused, ir, vis, flow_cfg)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// One metric's per-frame values. `first_frame` is 1 for pairwise metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub first_frame: usize,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frame_count: usize,
    pub series: Vec<MetricSeries>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).map(MetricSeries::mean)
    }

    /// `frame,metric,value` rows (per frame, then one `mean` row per metric), 6 decimals, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,metric,value\n");
        for s in &self.series {
            for (i, v) in s.values.iter().enumerate() {
                writeln!(out, "{},{},{:.6}", s.first_frame + i, s.name, v).unwrap();
            }
        }
        for s in &self.series {
            writeln!(out, "mean,{},{:.6}", s.name, s.mean()).unwrap();
        }
        out
    }

    /// Parses [`MetricReport::to_csv`] output (per-frame rows only; means are recomputed).
    pub fn from_csv(text: &str, frame_count: usize) -> Result<Self> {
        let mut series: Vec<MetricSeries> = Vec::new();
        let mut lines = text.lines();
        if lines.next() != Some("frame,metric,value") {
            return Err(Error::invalid("metric CSV must start with the header frame,metric,value"));
        }
        for (n, line) in lines.enumerate() {
            let mut parts = line.split(',');
            let (Some(frame), Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(Error::invalid(format!("metric CSV line {}: expected 3 fields", n + 2)));
            };
            if frame == "mean" {
                continue;
            }
            let frame: usize = frame.parse().map_err(|_| Error::invalid(format!("metric CSV line {}: bad frame", n + 2)))?;
            let value: f64 = value.parse().map_err(|_| Error::invalid(format!("metric CSV line {}: bad value", n + 2)))?;
            match series.iter_mut().find(|s| s.name == name) {
                Some(s) => s.values.push(value),
                None => series.push(MetricSeries {
                    name: name.to_string(),
                    first_frame: frame,
                    values: vec![value],
                }),
            }
        }
        Ok(Self { frame_count, series })
    }
}

/// Per-frame `qabf`, `piella_qs`, `ssim` (mean against both sources) and the
/// pairwise temporal proxy for aligned sequences.
pub fn report(fused: &[Tensor<f32>], ir: &[Tensor<f32>], vis: &[Tensor<f32>], flow_cfg: &FlowConfig) -> Result<MetricReport> {
    let t = fused.len();
    if ir.len() != t || vis.len() != t {
        return Err(Error::invalid(format!(
            "sequence lengths differ: fused {t}, ir {}, vis {}",
            ir.len(),
            vis.len()
        )));
    }
    let mut q = Vec::with_capacity(t);
    let mut s = Vec::with_capacity(t);
    let mut m = Vec::with_capacity(t);
    for i in 0..t {
        q.push(qabf(&ir[i], &vis[i], &fused[i])?);
        s.push(piella_qs(&ir[i], &vis[i], &fused[i])?);
        m.push(0.5 * (ssim(&fused[i], &ir[i])? + ssim(&fused[i], &vis[i])?));
    }
    let mut series = vec![
        MetricSeries {
            name: "qabf".into(),
            first_frame: 0,
            values: q,
        },
        MetricSeries {
            name: "piella_qs".into(),
            first_frame: 0,
            values: s,
        },
        MetricSeries {
            name: "ssim".into(),
            first_frame: 0,
            values: m,
        },
    ];
    if t >= 2 {
        series.push(MetricSeries {
            name: MS2R_NAME.into(),
            first_frame: 1,
            values: ms2r_per_frame(fused, ir, vis, flow_cfg)?,
        });
    }
    Ok(MetricReport { frame_count: t, series })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..0.9))
    }

    /// Literal per-pixel transcription of the published Q^{AB/F} steps on an 8×8 image.
    fn qabf_reference(a: &Tensor<f32>, b: &Tensor<f32>, f: &Tensor<f32>) -> f64 {
        let n = 8usize;
        let get = |t: &Tensor<f32>, x: i32, y: i32| {
            let xc = x.clamp(0, n as i32 - 1) as usize;
            let yc = y.clamp(0, n as i32 - 1) as usize;
            t.data()[yc * n + xc] as f64
        };
        let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let grad = |t: &Tensor<f32>, x: i32, y: i32| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    let v = get(t, x + i as i32 - 1, y + j as i32 - 1);
                    sx += kx[j][i] * v;
                    sy += ky[j][i] * v;
                }
            }
            let g = (sx * sx + sy * sy).sqrt();
            let alpha = if sx == 0.0 { if sy == 0.0 { 0.0 } else { FRAC_PI_2 * sy.signum() } } else { (sy / sx).atan() };
            (g, alpha)
        };
        let q = |gs: f64, as_: f64, gf: f64, af: f64| {
            let g = if gs == gf { 1.0 } else if gs > gf { gf / gs } else { gs / gf };
            let al = 1.0 - (as_ - af).abs() / FRAC_PI_2;
            let gam_g = 1.0 + (-15.0f64 * 0.5).exp();
            let gam_a = 1.0 + (-22.0f64 * 0.2).exp();
            (gam_g / (1.0 + (-15.0 * (g - 0.5)).exp())) * (gam_a / (1.0 + (-22.0 * (al - 0.8)).exp()))
        };
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..n as i32 {
            for x in 0..n as i32 {
                let (ga, aa) = grad(a, x, y);
                let (gb, ab) = grad(b, x, y);
                let (gf, af) = grad(f, x, y);
                num += q(ga, aa, gf, af) * ga + q(gb, ab, gf, af) * gb;
                den += ga + gb;
            }
        }
        num / den
    }

    #[test]
    fn qabf_identity_and_constant() {
        let a = img(1, 16, 16);
        assert!((qabf(&a, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        let c = Tensor::full(&[16, 16], 0.5f32);
        assert!(qabf(&a, &img(2, 16, 16), &c).unwrap() < 1e-3);
    }

    #[test]
    fn qabf_matches_reference_formula() {
        let (a, b, f) = (img(3, 8, 8), img(4, 8, 8), img(5, 8, 8));
        let q = qabf(&a, &b, &f).unwrap();
        assert!((q - qabf_reference(&a, &b, &f)).abs() < 1e-12, "{q}");
        assert!((0.0..=1.0).contains(&q));
    }

    /// Direct window loop over 7×7 windows.
    fn piella_reference(a: &Tensor<f32>, b: &Tensor<f32>, f: &Tensor<f32>) -> f64 {
        let (h, w) = a.hw().unwrap();
        let stats = |x: &Tensor<f32>, y: &Tensor<f32>, ox: usize, oy: usize| {
            let mut v = Vec::new();
            for j in 0..7 {
                for i in 0..7 {
                    let k = (oy + j) * w + ox + i;
                    v.push((x.data()[k] as f64, y.data()[k] as f64));
                }
            }
            let n = v.len() as f64;
            let mx = v.iter().map(|p| p.0).sum::<f64>() / n;
            let my = v.iter().map(|p| p.1).sum::<f64>() / n;
            let vx = v.iter().map(|p| p.0 * p.0).sum::<f64>() / n - mx * mx;
            let vy = v.iter().map(|p| p.1 * p.1).sum::<f64>() / n - my * my;
            let c = v.iter().map(|p| p.0 * p.1).sum::<f64>() / n - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx.max(0.0) + vy.max(0.0) + SSIM_C2));
            (s, vx.max(0.0))
        };
        let mut acc = 0.0;
        let mut n = 0;
        for oy in 0..=h - 7 {
            for ox in 0..=w - 7 {
                let (qa, va) = stats(a, f, ox, oy);
                let (qb, vb) = stats(b, f, ox, oy);
                let l = if va + vb > 0.0 { va / (va + vb) } else { 0.5 };
                acc += (l * qa + (1.0 - l) * qb).max(0.0);
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn piella_identity_symmetry_reference() {
        let (a, b, f) = (img(6, 12, 12), img(7, 12, 12), img(8, 12, 12));
        assert!((piella_qs(&a, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        let q1 = piella_qs(&a, &b, &f).unwrap();
        let q2 = piella_qs(&b, &a, &f).unwrap();
        assert!((q1 - q2).abs() < 1e-12);
        assert!((q1 - piella_reference(&a, &b, &f)).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric_and_unit_on_identity() {
        let (a, b) = (img(9, 10, 10), img(10, 10, 10));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms2r_static_is_zero_and_short_sequence_rejected() {
        let a = img(11, 32, 32);
        let seq = vec![a.clone(), a.clone(), a.clone()];
        assert_eq!(ms2r_proxy(&seq, &seq, &seq, &FlowConfig::default()).unwrap(), 0.0);
        assert!(ms2r_proxy(&seq[..1], &seq[..1], &seq[..1], &FlowConfig::default()).is_err());
    }

    #[test]
    fn csv_round_trip_and_means() {
        let r = MetricReport {
            frame_count: 2,
            series: vec![
                MetricSeries { name: "qabf".into(), first_frame: 0, values: vec![1.0, 0.5] },
                MetricSeries { name: MS2R_NAME.into(), first_frame: 1, values: vec![0.25] },
            ],
        };
        let csv = r.to_csv();
        assert_eq!(csv, "frame,metric,value\n0,qabf,1.000000\n1,qabf,0.500000\n1,ms2r_proxy,0.250000\nmean,qabf,0.750000\nmean,ms2r_proxy,0.250000\n");
        assert_eq!(MetricReport::from_csv(&csv, 2).unwrap(), r);
    }
}
