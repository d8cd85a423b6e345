//! Training objective: spatial fidelity (pixel + structural similarity) and
//! flow-warped temporal consistency between adjacent fused frames.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the temporal term.
    pub gamma: f64,
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    /// Forward–backward consistency tolerance in pixels.
    pub fb_epsilon: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            ssim_window: 7,
            c1: 1e-4,
            c2: 9e-4,
            fb_epsilon: 1.0,
        }
    }
}

fn as_plane<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    match *tape.shape(v) {
        [h, w] => tape.reshape(v, &[h, w]),
        [1, h, w] => tape.reshape(v, &[h, w]),
        _ => Err(Error::invalid(format!("expected a gray image, got {:?}", tape.shape(v)))),
    }
}

/// `mean |F − max(I_ir, I_vis)|`.
pub fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, fused: Var, ir: &Tensor<T>, vis: &Tensor<T>) -> Result<Var> {
    let f = as_plane(tape, fused)?;
    let (h, w) = tape.value(f).hw()?;
    if ir.len() != h * w || vis.len() != h * w {
        return Err(Error::shape("pixel_loss", tape.shape(fused), ir.shape()));
    }
    let target = Tensor::from_fn(&[h, w], |i| ir.data()[i].max(vis.data()[i]));
    let t = tape.constant(target);
    let d = tape.sub(f, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean local SSIM over all `window×window` windows that fit in the image.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    let a = as_plane(tape, a)?;
    let b = as_plane(tape, b)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("ssim", tape.shape(a), tape.shape(b)));
    }
    let win = cfg.ssim_window;
    let (c1, c2) = (T::lit(cfg.c1), T::lit(cfg.c2));
    let mu_a = tape.box_mean_valid(a, win)?;
    let mu_b = tape.box_mean_valid(b, win)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.box_mean_valid(aa, win)?;
    let e_bb = tape.box_mean_valid(bb, win)?;
    let e_ab = tape.box_mean_valid(ab, win)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, T::lit(2.0));
    let n1 = tape.add_scalar(n1, c1);
    let n2 = tape.scale(cov, T::lit(2.0));
    let n2 = tape.add_scalar(n2, c2);
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, c2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `1 − SSIM(F, reference)`.
pub fn ssim_loss<T: Scalar>(tape: &mut Tape<T>, fused: Var, reference: Var, cfg: &LossConfig) -> Result<Var> {
    let s = ssim(tape, fused, reference, cfg)?;
    let neg = tape.scale(s, -T::one());
    Ok(tape.add_scalar(neg, T::one()))
}

/// Pixel loss plus the SSIM loss averaged over both sources.
pub fn spatial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fused: Var,
    ir: &Tensor<T>,
    vis: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let pix = pixel_loss(tape, fused, ir, vis)?;
    let irv = tape.constant(ir.clone());
    let visv = tape.constant(vis.clone());
    let s_ir = ssim_loss(tape, fused, irv, cfg)?;
    let s_vis = ssim_loss(tape, fused, visv, cfg)?;
    let s = tape.add(s_ir, s_vis)?;
    let s = tape.scale(s, T::lit(0.5));
    tape.add(pix, s)
}

/// Forward–backward consistency: `p` is valid iff `‖φ_fwd(p) + φ_bwd(p + φ_fwd(p))‖ < ε`.
pub fn validity_mask(forward: &FlowField, backward: &FlowField, epsilon: f32) -> Result<Tensor<f32>> {
    let (w, h) = (forward.width(), forward.height());
    if (backward.width(), backward.height()) != (w, h) {
        return Err(Error::shape("validity_mask", &[h, w], &[backward.height(), backward.width()]));
    }
    let fwd = forward.to_tensor::<f32>();
    let bwd_at = ops::bilinear_sample(&backward.to_tensor::<f32>(), &fwd)?;
    let hw = w * h;
    Ok(Tensor::from_fn(&[h, w], |p| {
        let dx = fwd.data()[p] + bwd_at.data()[p];
        let dy = fwd.data()[hw + p] + bwd_at.data()[hw + p];
        if dx.hypot(dy) < epsilon {
            1.0
        } else {
            0.0
        }
    }))
}

/// One neighbour's warped-difference term for the temporal loss.
pub struct TemporalTerm<'a, T> {
    pub neighbor: Var,
    /// Flow from the centre frame to the neighbour (backward-warp convention).
    pub flow: &'a FlowField,
    /// Binary validity mask `H×W`.
    pub valid: &'a Tensor<T>,
}

/// Sum over neighbours of the mean `|I_t − W(I_neighbor, O)|` over valid pixels.
/// A neighbour with no valid pixel contributes zero.
pub fn temporal_loss<T: Scalar>(tape: &mut Tape<T>, center: Var, terms: &[TemporalTerm<'_, T>]) -> Result<Var> {
    let c = as_plane(tape, center)?;
    let (h, w) = tape.value(c).hw()?;
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for term in terms {
        if tape.value(term.neighbor).len() != h * w || term.valid.shape() != [h, w] {
            return Err(Error::shape("temporal_loss", &[h, w], tape.shape(term.neighbor)));
        }
        if (term.flow.width(), term.flow.height()) != (w, h) {
            return Err(Error::shape("temporal_loss flow", &[h, w], &[term.flow.height(), term.flow.width()]));
        }
        let count = term.valid.data().iter().filter(|&&v| v > T::zero()).count();
        if count == 0 {
            continue;
        }
        let nb = tape.reshape(term.neighbor, &[1, h, w])?;
        let flow = tape.constant(term.flow.to_tensor());
        let warped = tape.bilinear_sample(nb, flow)?;
        let warped = tape.reshape(warped, &[h, w])?;
        let diff = tape.sub(c, warped)?;
        let diff = tape.abs(diff);
        let m = tape.constant(term.valid.clone());
        let masked = tape.mul(diff, m)?;
        let s = tape.sum(masked);
        let s = tape.scale(s, T::one() / T::lit(count as f64));
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// `L_total = L_spatial + γ·L_temp`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, spatial: Var, temporal: Var, gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    let t = tape.scale(temporal, T::lit(gamma));
    tape.add(spatial, t)
}
