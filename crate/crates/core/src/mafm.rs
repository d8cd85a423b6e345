//! Motion-aware feature alignment: coarse multi-frame warping, cross-modal
//! residual flow refinement, softmax temporal aggregation and motion gating.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learnable parameters of one alignment module.
#[derive(Clone, Debug, PartialEq)]
pub struct MafmWeights<T> {
    /// `C×(4C+4)×1×1` channel compression.
    pub compress: Tensor<T>,
    pub compress_bias: Tensor<T>,
    /// `C×3×3` depthwise spatial refinement.
    pub depthwise: Tensor<T>,
    /// `2×C×1×1` projection to a flow residual.
    pub project: Tensor<T>,
    pub project_bias: Tensor<T>,
    /// Temporal logits for `(t−1, t, t+1)`.
    pub omega: Tensor<T>,
}

impl<T: Scalar> MafmWeights<T> {
    /// All-zero weights: no residual flow and equal temporal weights.
    pub fn zeros(channels: usize) -> Self {
        let cin = 4 * channels + 4;
        Self {
            compress: Tensor::zeros(&[channels, cin, 1, 1]),
            compress_bias: Tensor::zeros(&[channels]),
            depthwise: Tensor::zeros(&[channels, 3, 3]),
            project: Tensor::zeros(&[2, channels, 1, 1]),
            project_bias: Tensor::zeros(&[2]),
            omega: Tensor::zeros(&[3]),
        }
    }

    /// Random refinement stack with a zero projection, so training starts from pure coarse alignment.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(channels);
        let cin = 4 * channels + 4;
        let a = (1.0 / cin as f64).sqrt();
        w.compress = Tensor::uniform(&[channels, cin, 1, 1], -a, a, rng);
        w.depthwise = Tensor::uniform(&[channels, 3, 3], -1.0 / 3.0, 1.0 / 3.0, rng);
        w
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("compress", &self.compress),
            ("compress_bias", &self.compress_bias),
            ("depthwise", &self.depthwise),
            ("project", &self.project),
            ("project_bias", &self.project_bias),
            ("omega", &self.omega),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("compress", &mut self.compress),
            ("compress_bias", &mut self.compress_bias),
            ("depthwise", &mut self.depthwise),
            ("project", &mut self.project),
            ("project_bias", &mut self.project_bias),
            ("omega", &mut self.omega),
        ]
    }

    /// Records the weights on `tape`, as leaves when `train` is set.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> MafmVars {
        let mut put = |t: &Tensor<T>| if train { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        MafmVars {
            compress: put(&self.compress),
            compress_bias: put(&self.compress_bias),
            depthwise: put(&self.depthwise),
            project: put(&self.project),
            project_bias: put(&self.project_bias),
            omega: put(&self.omega),
        }
    }
}

/// Tape handles of [`MafmWeights`].
#[derive(Clone, Copy, Debug)]
pub struct MafmVars {
    pub compress: Var,
    pub compress_bias: Var,
    pub depthwise: Var,
    pub project: Var,
    pub project_bias: Var,
    pub omega: Var,
}

impl MafmVars {
    pub fn all(&self) -> [Var; 6] {
        [
            self.compress,
            self.compress_bias,
            self.depthwise,
            self.project,
            self.project_bias,
            self.omega,
        ]
    }
}

/// Frames `(t−1, t, t+1)` after coarse warping, with the centre's mean flow.
#[derive(Clone, Copy, Debug)]
pub struct AlignedTriplet {
    pub frames: [Var; 3],
    pub center_flow: Var,
}

fn check_triplet<T: Scalar>(tape: &Tape<T>, frames: &[Var; 3], flows: &[Var]) -> Result<(usize, usize, usize)> {
    let (c, h, w) = tape.value(frames[0]).chw()?;
    for &f in &frames[1..] {
        if tape.shape(f) != tape.shape(frames[0]) {
            return Err(Error::shape("mafm", tape.shape(frames[0]), tape.shape(f)));
        }
    }
    for &fl in flows {
        if tape.shape(fl) != [2, h, w] {
            return Err(Error::shape("mafm flow", tape.shape(frames[0]), tape.shape(fl)));
        }
    }
    Ok((c, h, w))
}

/// Warps neighbours by their own flows and the centre by the mean flow.
pub fn coarse_align<T: Scalar>(tape: &mut Tape<T>, frames: [Var; 3], flow_prev: Var, flow_next: Var) -> Result<AlignedTriplet> {
    check_triplet(tape, &frames, &[flow_prev, flow_next])?;
    let sum = tape.add(flow_prev, flow_next)?;
    let center_flow = tape.scale(sum, T::lit(0.5));
    let a = tape.bilinear_sample(frames[0], flow_prev)?;
    let b = tape.bilinear_sample(frames[1], center_flow)?;
    let c = tape.bilinear_sample(frames[2], flow_next)?;
    Ok(AlignedTriplet {
        frames: [a, b, c],
        center_flow,
    })
}

/// Predicts the `2×H×W` residual flow from `[anchor, f̃_{t−1}, f̃_t, f̃_{t+1}, φ_prev, φ_next]`.
pub fn refine_residual<T: Scalar>(
    tape: &mut Tape<T>,
    anchor: Var,
    aligned: &AlignedTriplet,
    flow_prev: Var,
    flow_next: Var,
    w: &MafmVars,
) -> Result<Var> {
    if tape.shape(anchor) != tape.shape(aligned.frames[0]) {
        return Err(Error::shape("refine_residual anchor", tape.shape(aligned.frames[0]), tape.shape(anchor)));
    }
    let [a, b, c] = aligned.frames;
    let x = tape.concat_channels(&[anchor, a, b, c, flow_prev, flow_next])?;
    let h = tape.conv2d(x, w.compress, Some(w.compress_bias))?;
    let h = tape.leaky_relu(h);
    let h = tape.depthwise_conv2d(h, w.depthwise)?;
    tape.conv2d(h, w.project, Some(w.project_bias))
}

/// `f̂_t = W(f_t, φ_t + Δφ)`.
pub fn apply_residual<T: Scalar>(tape: &mut Tape<T>, current: Var, center_flow: Var, residual: Var) -> Result<Var> {
    let flow = tape.add(center_flow, residual)?;
    tape.bilinear_sample(current, flow)
}

/// `Σ softmax(ω)_i · f̂_i`.
pub fn temporal_aggregate<T: Scalar>(tape: &mut Tape<T>, frames: [Var; 3], omega: Var) -> Result<Var> {
    if tape.value(omega).len() != 3 {
        return Err(Error::invalid(format!("temporal logits must have 3 entries, got {:?}", tape.shape(omega))));
    }
    let weights = tape.softmax(omega);
    let mut acc: Option<Var> = None;
    for (i, &f) in frames.iter().enumerate() {
        let wi = tape.index(weights, i)?;
        let term = tape.mul_scalar(f, wi)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three frames"))
}

/// Aggregated features inside the binary `gate`, current-frame features elsewhere.
pub fn motion_gate<T: Scalar>(tape: &mut Tape<T>, aggregated: Var, current: Var, gate: &Tensor<T>) -> Result<Var> {
    tape.select_spatial(gate, aggregated, current)
}

/// Full alignment for one modality at time `t`.
///
/// `frames` are the encoded `(t−1, t, t+1)` features, `anchor` the other
/// modality's features at `t`, flows are constants on the tape.
pub fn align<T: Scalar>(
    tape: &mut Tape<T>,
    frames: [Var; 3],
    anchor: Var,
    flow_prev: Var,
    flow_next: Var,
    gate: &Tensor<T>,
    w: &MafmVars,
) -> Result<Var> {
    let coarse = coarse_align(tape, frames, flow_prev, flow_next)?;
    let residual = refine_residual(tape, anchor, &coarse, flow_prev, flow_next, w)?;
    let refined = apply_residual(tape, frames[1], coarse.center_flow, residual)?;
    let agg = temporal_aggregate(tape, [coarse.frames[0], refined, coarse.frames[2]], w.omega)?;
    motion_gate(tape, agg, frames[1], gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| (i % w) as f64)
    }

    fn uniform_flow(h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f64> {
        Tensor::from_fn(&[2, h, w], |i| if i < h * w { dx } else { dy })
    }

    #[test]
    fn coarse_align_zero_flow_identity_and_mean_shift() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fr: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::uniform(&[2, 6, 8], -1.0, 1.0, &mut rng))).collect();
        let z = tape.constant(Tensor::zeros(&[2, 6, 8]));
        let t = coarse_align(&mut tape, [fr[0], fr[1], fr[2]], z, z).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(t.frames[i]), tape.value(fr[i]));
        }

        let r = tape.constant(ramp(1, 4, 8));
        let prev = tape.constant(uniform_flow(4, 8, 2.0, 0.0));
        let next = tape.constant(Tensor::zeros(&[2, 4, 8]));
        let t = coarse_align(&mut tape, [r, r, r], prev, next).unwrap();
        let center = tape.value(t.frames[1]);
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(center.data()[y * 8 + x], x as f64 + 1.0);
            }
        }
    }

    #[test]
    fn zero_refinement_weights_give_zero_residual() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fr: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::uniform(&[3, 5, 6], -1.0, 1.0, &mut rng))).collect();
        let fp = tape.constant(Tensor::uniform(&[2, 5, 6], -2.0, 2.0, &mut rng));
        let fnx = tape.constant(Tensor::uniform(&[2, 5, 6], -2.0, 2.0, &mut rng));
        let w = MafmWeights::<f64>::zeros(3).bind(&mut tape, false);
        let t = coarse_align(&mut tape, [fr[0], fr[1], fr[2]], fp, fnx).unwrap();
        let d = refine_residual(&mut tape, fr[3], &t, fp, fnx, &w).unwrap();
        assert_eq!(tape.shape(d), &[2, 5, 6]);
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));

        let wr = MafmWeights::<f64>::init(3, &mut rng).bind(&mut tape, false);
        let d = refine_residual(&mut tape, fr[3], &t, fp, fnx, &wr).unwrap();
        assert_eq!(tape.shape(d), &[2, 5, 6]);

        let bad = tape.constant(Tensor::zeros(&[2, 5, 6]));
        assert!(refine_residual(&mut tape, bad, &t, fp, fnx, &w).is_err());
    }

    #[test]
    fn apply_residual_matches_composed_warp() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::uniform(&[2, 6, 7], -1.0, 1.0, &mut rng);
        let phi = Tensor::uniform(&[2, 6, 7], -2.0, 2.0, &mut rng);
        let delta = Tensor::uniform(&[2, 6, 7], -1.0, 1.0, &mut rng);
        let (fv, pv, dv) = (tape.constant(f.clone()), tape.constant(phi.clone()), tape.constant(delta.clone()));
        let out = apply_residual(&mut tape, fv, pv, dv).unwrap();
        let oracle = ops::bilinear_sample(&f, &phi.zip_map(&delta, |a, b| a + b)).unwrap();
        assert!(tape.value(out).max_abs_diff(&oracle) < 1e-12);

        let r = tape.constant(ramp(1, 4, 8));
        let z = tape.constant(Tensor::zeros(&[2, 4, 8]));
        let one = tape.constant(uniform_flow(4, 8, 1.0, 0.0));
        let out = apply_residual(&mut tape, r, z, one).unwrap();
        assert_eq!(tape.value(out).data()[3], 4.0);
    }

    #[test]
    fn aggregate_mean_and_dominance() {
        let mut tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng)).collect();
        let vs: Vec<Var> = fs.iter().map(|f| tape.constant(f.clone())).collect();
        let z = tape.constant(Tensor::zeros(&[3]));
        let m = temporal_aggregate(&mut tape, [vs[0], vs[1], vs[2]], z).unwrap();
        let mean = Tensor::from_fn(&[2, 3, 3], |i| (fs[0].data()[i] + fs[1].data()[i] + fs[2].data()[i]) / 3.0);
        assert!(tape.value(m).max_abs_diff(&mean) < 1e-12);

        let dom = tape.constant(Tensor::from_vec(&[3], vec![20.0, -20.0, -20.0]).unwrap());
        let d = temporal_aggregate(&mut tape, [vs[0], vs[1], vs[2]], dom).unwrap();
        assert!(tape.value(d).max_abs_diff(&fs[0]) < 1e-6);
    }

    #[test]
    fn gate_extremes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2, 2, 2], 1.0));
        let b = tape.constant(Tensor::full(&[2, 2, 2], -3.0));
        let off = motion_gate(&mut tape, a, b, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(tape.value(off), tape.value(b));
        let on = motion_gate(&mut tape, a, b, &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(tape.value(on), tape.value(a));
        assert!(motion_gate(&mut tape, a, b, &Tensor::ones(&[3, 2])).is_err());
    }
}
