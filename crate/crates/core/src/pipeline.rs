//! The full fusion network: per-modality encoders, motion-aware alignment,
//! static/dynamic interaction, decoder; plus training and operation counting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FusionConfig, Variant};
use crate::counter;
use crate::error::{Error, Result};
use crate::flow::{binarize_gate, estimate_flow, motion_mask, FlowConfig, FlowField, MotionMask};
use crate::io::WeightStore;
use crate::loss::{self, LossConfig, TemporalTerm};
use crate::mafm::{self, MafmVars, MafmWeights};
use crate::mdim::{self, attention_flops, retained_count, MdimSettings, MdimVars, MdimWeights, SalientSet, Selection};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Percentile used to normalise flow magnitude into the motion mask.
pub const MASK_PERCENTILE: f64 = 99.0;

/// Two 3×3 convolutions with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPair<T> {
    pub conv1: Tensor<T>,
    pub bias1: Tensor<T>,
    pub conv2: Tensor<T>,
    pub bias2: Tensor<T>,
}

impl<T: Scalar> ConvPair<T> {
    fn zeros(cin: usize, mid: usize, cout: usize) -> Self {
        Self {
            conv1: Tensor::zeros(&[mid, cin, 3, 3]),
            bias1: Tensor::zeros(&[mid]),
            conv2: Tensor::zeros(&[cout, mid, 3, 3]),
            bias2: Tensor::zeros(&[cout]),
        }
    }

    fn init<R: Rng + ?Sized>(cin: usize, mid: usize, cout: usize, rng: &mut R) -> Self {
        let a1 = (3.0 / (9 * cin) as f64).sqrt();
        let a2 = (3.0 / (9 * mid) as f64).sqrt();
        Self {
            conv1: Tensor::uniform(&[mid, cin, 3, 3], -a1, a1, rng),
            bias1: Tensor::zeros(&[mid]),
            conv2: Tensor::uniform(&[cout, mid, 3, 3], -a2, a2, rng),
            bias2: Tensor::zeros(&[cout]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 4] {
        [("conv1", &self.conv1), ("bias1", &self.bias1), ("conv2", &self.conv2), ("bias2", &self.bias2)]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 4] {
        [
            ("conv1", &mut self.conv1),
            ("bias1", &mut self.bias1),
            ("conv2", &mut self.conv2),
            ("bias2", &mut self.bias2),
        ]
    }

    /// `conv2(leaky(conv1(x)))`, both with bias.
    pub fn apply(tape: &mut Tape<T>, x: Var, v: &[Var; 4]) -> Result<Var> {
        let h = tape.conv2d(x, v[0], Some(v[1]))?;
        let h = tape.leaky_relu(h);
        tape.conv2d(h, v[2], Some(v[3]))
    }
}

/// All learnable tensors of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T> {
    pub channels: usize,
    pub patch: usize,
    pub enc_ir: ConvPair<T>,
    pub enc_vis: ConvPair<T>,
    pub mafm_ir: MafmWeights<T>,
    pub mafm_vis: MafmWeights<T>,
    /// `C×2C×1×1` join of the two aligned streams.
    pub fuse: Tensor<T>,
    pub fuse_bias: Tensor<T>,
    pub mdim: MdimWeights<T>,
    pub dec: ConvPair<T>,
}

/// Tape handles of a bound [`FusionModel`], in [`FusionModel::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub enc_ir: [Var; 4],
    pub enc_vis: [Var; 4],
    pub mafm_ir: MafmVars,
    pub mafm_vis: MafmVars,
    pub fuse: Var,
    pub fuse_bias: Var,
    pub mdim: MdimVars,
    pub dec: [Var; 4],
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        v.extend(self.enc_ir);
        v.extend(self.enc_vis);
        v.extend(self.mafm_ir.all());
        v.extend(self.mafm_vis.all());
        v.push(self.fuse);
        v.push(self.fuse_bias);
        v.extend(self.mdim.all());
        v.extend(self.dec);
        v
    }
}

impl<T: Scalar> FusionModel<T> {
    /// Every tensor zero: the output is the constant 0.5.
    pub fn zeros(channels: usize, patch: usize) -> Self {
        Self {
            channels,
            patch,
            enc_ir: ConvPair::zeros(1, channels, channels),
            enc_vis: ConvPair::zeros(1, channels, channels),
            mafm_ir: MafmWeights::zeros(channels),
            mafm_vis: MafmWeights::zeros(channels),
            fuse: Tensor::zeros(&[channels, 2 * channels, 1, 1]),
            fuse_bias: Tensor::zeros(&[channels]),
            mdim: MdimWeights::zeros(channels, patch),
            dec: ConvPair::zeros(channels, channels, 1),
        }
    }

    /// Seeded random initialisation; alignment residual projections start at zero.
    pub fn init(channels: usize, patch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (1.0 / (2 * channels) as f64).sqrt();
        Self {
            channels,
            patch,
            enc_ir: ConvPair::init(1, channels, channels, &mut rng),
            enc_vis: ConvPair::init(1, channels, channels, &mut rng),
            mafm_ir: MafmWeights::init(channels, &mut rng),
            mafm_vis: MafmWeights::init(channels, &mut rng),
            fuse: Tensor::uniform(&[channels, 2 * channels, 1, 1], -a, a, &mut rng),
            fuse_bias: Tensor::zeros(&[channels]),
            mdim: MdimWeights::init(channels, patch, &mut rng),
            dec: ConvPair::init(channels, channels, 1, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = Vec::new();
        v.extend(self.enc_ir.named().map(|(n, t)| (format!("enc_ir.{n}"), t)));
        v.extend(self.enc_vis.named().map(|(n, t)| (format!("enc_vis.{n}"), t)));
        v.extend(self.mafm_ir.named().into_iter().map(|(n, t)| (format!("mafm_ir.{n}"), t)));
        v.extend(self.mafm_vis.named().into_iter().map(|(n, t)| (format!("mafm_vis.{n}"), t)));
        v.push(("fuse.weight".into(), &self.fuse));
        v.push(("fuse.bias".into(), &self.fuse_bias));
        v.extend(self.mdim.named().into_iter().map(|(n, t)| (format!("mdim.{n}"), t)));
        v.extend(self.dec.named().map(|(n, t)| (format!("dec.{n}"), t)));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = Vec::new();
        v.extend(self.enc_ir.named_mut().map(|(n, t)| (format!("enc_ir.{n}"), t)));
        v.extend(self.enc_vis.named_mut().map(|(n, t)| (format!("enc_vis.{n}"), t)));
        v.extend(self.mafm_ir.named_mut().into_iter().map(|(n, t)| (format!("mafm_ir.{n}"), t)));
        v.extend(self.mafm_vis.named_mut().into_iter().map(|(n, t)| (format!("mafm_vis.{n}"), t)));
        v.push(("fuse.weight".into(), &mut self.fuse));
        v.push(("fuse.bias".into(), &mut self.fuse_bias));
        v.extend(self.mdim.named_mut().into_iter().map(|(n, t)| (format!("mdim.{n}"), t)));
        v.extend(self.dec.named_mut().map(|(n, t)| (format!("dec.{n}"), t)));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor on `tape`, as differentiable leaves when `train` is set.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> ModelVars {
        let mut put = |t: &Tensor<T>| if train { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let enc_ir = self.enc_ir.named().map(|(_, t)| put(t));
        let enc_vis = self.enc_vis.named().map(|(_, t)| put(t));
        let mafm_ir = self.mafm_ir.bind(tape, train);
        let mafm_vis = self.mafm_vis.bind(tape, train);
        let mut put = |t: &Tensor<T>| if train { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let fuse = put(&self.fuse);
        let fuse_bias = put(&self.fuse_bias);
        let mdim = self.mdim.bind(tape, train);
        let mut put = |t: &Tensor<T>| if train { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let dec = self.dec.named().map(|(_, t)| put(t));
        ModelVars {
            enc_ir,
            enc_vis,
            mafm_ir,
            mafm_vis,
            fuse,
            fuse_bias,
            mdim,
            dec,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        let mut out = FusionModel::<U>::zeros(self.channels, self.patch);
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }

    pub fn to_store(&self) -> WeightStore {
        let mut s = WeightStore::new();
        for (name, t) in self.params() {
            s.insert(name, t.cast()).expect("parameter names are unique");
        }
        s
    }

    /// Rebuilds a model from stored tensors; channel count and patch size are read from the shapes.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let missing = |n: &str| Error::invalid(format!("weights are missing tensor `{n}`"));
        let c = store.get("enc_ir.conv1").ok_or_else(|| missing("enc_ir.conv1"))?.shape()[0];
        let d = store.get("mdim.query").ok_or_else(|| missing("mdim.query"))?.shape()[0];
        let p = ((d / c.max(1)) as f64).sqrt().round() as usize;
        if c == 0 || p * p * c != d {
            return Err(Error::invalid(format!("token width {d} is not channels·patch² for {c} channels")));
        }
        let mut model = Self::zeros(c, p);
        let expected = model.params().len();
        for (name, dst) in model.params_mut() {
            let src = store.get(&name).ok_or_else(|| missing(&name))?;
            if src.shape() != dst.shape() {
                return Err(Error::invalid(format!(
                    "weight `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.cast();
        }
        if store.len() != expected {
            return Err(Error::invalid(format!(
                "weights hold {} tensors, the model has {expected}",
                store.len()
            )));
        }
        if !model.all_finite() {
            return Err(Error::NonFinite("loaded weights".into()));
        }
        Ok(model)
    }
}

/// Flows from frame `t` toward `t−1` and `t+1` (backward-warp convention).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub prev: FlowField,
    pub next: FlowField,
}

impl FlowPair {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            prev: FlowField::zeros(width, height),
            next: FlowField::zeros(width, height),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            prev: self.prev.crop(x0, y0, w, h),
            next: self.next.crop(x0, y0, w, h),
        }
    }
}

/// Estimated flows for every frame from the visible sequence; boundary frames get zero flow
/// toward the missing neighbour.
pub fn sequence_flows(vis: &[Tensor<f32>], cfg: &FlowConfig) -> Result<Vec<FlowPair>> {
    let (h, w) = vis.first().ok_or_else(|| Error::invalid("empty sequence"))?.hw()?;
    let n = vis.len();
    (0..n)
        .map(|t| {
            Ok(FlowPair {
                prev: if t > 0 { estimate_flow(&vis[t], &vis[t - 1], cfg)? } else { FlowField::zeros(w, h) },
                next: if t + 1 < n { estimate_flow(&vis[t], &vis[t + 1], cfg)? } else { FlowField::zeros(w, h) },
            })
        })
        .collect()
}

/// Pipeline stages as metered at run time.
pub const RUNTIME_STAGES: [&str; 5] = ["encoder", "mafm", "fuse", "mdim", "decoder"];

pub struct ForwardOutput<T> {
    /// Fused frame `H×W` in `(0, 1)`.
    pub fused: Tensor<T>,
    pub mask: MotionMask,
    pub salient: Option<SalientSet<T>>,
    /// Counted multiply–adds per stage, in [`RUNTIME_STAGES`] order.
    pub stage_macs: Vec<(&'static str, u64)>,
}

/// Tape-level result of fusing one frame.
pub struct FusedVar<T> {
    /// `1×H×W`.
    pub output: Var,
    pub mask: MotionMask,
    pub salient: Option<SalientSet<T>>,
    pub stage_macs: Vec<(&'static str, u64)>,
}

fn check_frame_size(h: usize, w: usize, patch: usize) -> Result<()> {
    let min = 4 * patch;
    if h < min || w < min {
        return Err(Error::invalid(format!(
            "frame {w}×{h} is below the minimum {min}×{min} (4·patch)"
        )));
    }
    Ok(())
}

/// Encodes a gray `H×W` frame into `C×H×W` features.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, frame: &Tensor<T>, weights: &[Var; 4]) -> Result<Var> {
    let (h, w) = frame.hw()?;
    let x = tape.constant(frame.reshape(&[1, h, w])?);
    ConvPair::apply(tape, x, weights)
}

/// Everything after encoding: gates, alignment, join, interaction, decoder.
///
/// `ir` and `vis` are the encoded `(t−1, t, t+1)` features.
pub fn fuse_features<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &FusionConfig,
    ir: [Var; 3],
    vis: [Var; 3],
    flows: &FlowPair,
) -> Result<FusedVar<T>> {
    let (_, h, w) = tape.value(ir[1]).chw()?;
    let mut macs = Vec::with_capacity(5);
    let mut mark = counter::current();
    let mut meter = |name: &'static str, macs: &mut Vec<(&'static str, u64)>| {
        let now = counter::current();
        macs.push((name, now - mark));
        mark = now;
    };
    let mask = motion_mask(&flows.prev, &flows.next, MASK_PERCENTILE)?;
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::shape("pipeline flow", &[h, w], &[mask.height(), mask.width()]));
    }
    let gate: Tensor<T> = binarize_gate(&mask, cfg.gate_theta as f32)?.cast();

    let (a_ir, a_vis) = if cfg.variant == Variant::NoMafm {
        let mean3 = |tape: &mut Tape<T>, f: [Var; 3]| -> Result<Var> {
            let s = tape.add(f[0], f[1])?;
            let s = tape.add(s, f[2])?;
            Ok(tape.scale(s, T::lit(1.0 / 3.0)))
        };
        (mean3(tape, ir)?, mean3(tape, vis)?)
    } else {
        let prev = tape.constant(flows.prev.to_tensor());
        let next = tape.constant(flows.next.to_tensor());
        let a_ir = mafm::align(tape, ir, vis[1], prev, next, &gate, &vars.mafm_ir)?;
        let a_vis = mafm::align(tape, vis, ir[1], prev, next, &gate, &vars.mafm_vis)?;
        (a_ir, a_vis)
    };
    meter("mafm", &mut macs);

    let joined = tape.concat_channels(&[a_ir, a_vis])?;
    let x = tape.conv2d(joined, vars.fuse, Some(vars.fuse_bias))?;
    meter("fuse", &mut macs);

    let mdim_mask: Tensor<T> = match cfg.variant {
        Variant::FullDb => Tensor::ones(&[h, w]),
        Variant::InvertedMask => mask.inverted().tensor().cast(),
        _ => mask.tensor().cast(),
    };
    let settings = mdim_settings(cfg);
    let out = mdim::mdim_forward(tape, x, &mdim_mask, &settings, &vars.mdim)?;
    meter("mdim", &mut macs);

    let y = ConvPair::apply(tape, out.output, &vars.dec)?;
    let y = tape.sigmoid(y);
    meter("decoder", &mut macs);
    Ok(FusedVar {
        output: y,
        mask,
        salient: out.salient,
        stage_macs: macs,
    })
}

pub fn mdim_settings(cfg: &FusionConfig) -> MdimSettings {
    MdimSettings {
        patch: cfg.patch,
        selection: if cfg.variant == Variant::DenseAttention {
            Selection::All
        } else {
            Selection::TopK {
                tau: cfg.tau,
                k_max: cfg.k_max,
            }
        },
        kv_mode: cfg.kv_mode,
        dynamic: cfg.variant != Variant::FullSb,
    }
}

fn check_model(model_channels: usize, model_patch: usize, cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    if model_patch != cfg.patch {
        return Err(Error::invalid(format!(
            "weights were built for patch {model_patch}, config asks for {}",
            cfg.patch
        )));
    }
    if model_channels != cfg.channels {
        return Err(Error::invalid(format!(
            "weights have {model_channels} channels, config asks for {}",
            cfg.channels
        )));
    }
    Ok(())
}

/// Fuses frame `t` from its `(t−1, t, t+1)` triplets.
pub fn forward<T: Scalar>(
    model: &FusionModel<T>,
    cfg: &FusionConfig,
    ir: [&Tensor<T>; 3],
    vis: [&Tensor<T>; 3],
    flows: &FlowPair,
) -> Result<ForwardOutput<T>> {
    check_model(model.channels, model.patch, cfg)?;
    let (h, w) = ir[1].hw()?;
    check_frame_size(h, w, cfg.patch)?;
    for f in ir.iter().chain(vis.iter()) {
        if f.shape() != [h, w] {
            return Err(Error::shape("forward", &[h, w], f.shape()));
        }
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let start = counter::current();
    let enc = |tape: &mut Tape<T>, frames: [&Tensor<T>; 3], wts: &[Var; 4]| -> Result<[Var; 3]> {
        Ok([encode(tape, frames[0], wts)?, encode(tape, frames[1], wts)?, encode(tape, frames[2], wts)?])
    };
    let e_ir = enc(&mut tape, ir, &vars.enc_ir)?;
    let e_vis = enc(&mut tape, vis, &vars.enc_vis)?;
    let enc_macs = counter::current() - start;
    let out = fuse_features(&mut tape, &vars, cfg, e_ir, e_vis, flows)?;
    let fused = tape.value(out.output).reshape(&[h, w])?;
    if !fused.all_finite() {
        return Err(Error::NonFinite("fused frame".into()));
    }
    let mut stage_macs = vec![("encoder", enc_macs)];
    stage_macs.extend(out.stage_macs);
    Ok(ForwardOutput {
        fused,
        mask: out.mask,
        salient: out.salient,
        stage_macs,
    })
}

/// Neighbour indices of frame `t` with edge duplication.
fn triplet(t: usize, n: usize) -> [usize; 3] {
    [t.saturating_sub(1), t, (t + 1).min(n - 1)]
}

/// Fuses every frame of aligned sequences. `flows` defaults to estimates from the
/// visible sequence. `jobs > 1` fans frames out over threads; output is identical.
pub fn fuse_sequence(
    model: &FusionModel<f32>,
    cfg: &FusionConfig,
    ir: &[Tensor<f32>],
    vis: &[Tensor<f32>],
    flows: Option<&[FlowPair]>,
    jobs: usize,
) -> Result<Vec<Tensor<f32>>> {
    let n = ir.len();
    if n == 0 || vis.len() != n {
        return Err(Error::invalid(format!(
            "need equal non-empty sequences, got {n} infrared and {} visible frames",
            vis.len()
        )));
    }
    let estimated;
    let flows = match flows {
        Some(f) => f,
        None => {
            estimated = sequence_flows(vis, &FlowConfig::default())?;
            &estimated
        }
    };
    if flows.len() != n {
        return Err(Error::invalid(format!("{} flow pairs for {n} frames", flows.len())));
    }
    let one = |t: usize| -> Result<Tensor<f32>> {
        let [a, b, c] = triplet(t, n);
        Ok(forward(model, cfg, [&ir[a], &ir[b], &ir[c]], [&vis[a], &vis[b], &vis[c]], &flows[t])?.fused)
    };
    let jobs = jobs.max(1).min(n);
    if jobs == 1 {
        return (0..n).map(one).collect();
    }
    let mut slots: Vec<Option<Result<Tensor<f32>>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let one = &one;
        let handles: Vec<_> = (0..jobs)
            .map(|j| s.spawn(move || (j..n).step_by(jobs).map(|t| (t, one(t))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (t, r) in h.join().expect("fusion worker panicked") {
                slots[t] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every frame assigned")).collect()
}

/// Learning rate at iteration `i`: exponential decay from `lr` to `lr/100` at the last iteration.
pub fn lr_at(cfg: &FusionConfig, i: usize) -> f64 {
    if cfg.iters <= 1 {
        return cfg.lr;
    }
    cfg.lr * 0.01f64.powf(i as f64 / (cfg.iters - 1) as f64)
}

/// Adam with bias correction.
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &FusionModel<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update; `grads` follow [`FusionModel::params`] order (`None` = zero gradient).
    pub fn update(&mut self, model: &mut FusionModel<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, (_, p)) in model.params_mut().into_iter().enumerate() {
            let Some(g) = &grads[i] else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let g64 = gj.as_f64();
                let mj = b1 * m.data()[j].as_f64() + (1.0 - b1) * g64;
                let vj = b2 * v.data()[j].as_f64() + (1.0 - b2) * g64 * g64;
                m.data_mut()[j] = T::lit(mj);
                v.data_mut()[j] = T::lit(vj);
                let upd = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                pd[j] = T::lit(pd[j].as_f64() - upd);
            }
        }
    }
}

/// Per-frame data shared by every training window.
pub struct TrainingSet {
    pub ir: Vec<Tensor<f32>>,
    pub vis: Vec<Tensor<f32>>,
    pub flows: Vec<FlowPair>,
    /// Validity toward `t−1` and `t+1` for each frame (full resolution).
    pub valid_prev: Vec<Tensor<f32>>,
    pub valid_next: Vec<Tensor<f32>>,
}

impl TrainingSet {
    /// Estimates visible-frame flows and their forward–backward validity.
    pub fn new(ir: Vec<Tensor<f32>>, vis: Vec<Tensor<f32>>) -> Result<Self> {
        let n = ir.len();
        if n < 3 {
            return Err(Error::invalid(format!("training needs at least 3 frames, got {n}")));
        }
        if vis.len() != n {
            return Err(Error::invalid(format!("{n} infrared frames but {} visible frames", vis.len())));
        }
        for f in ir.iter().chain(&vis) {
            if f.shape() != ir[0].shape() {
                return Err(Error::shape("training frames", ir[0].shape(), f.shape()));
            }
        }
        let flows = sequence_flows(&vis, &FlowConfig::default())?;
        let eps = LossConfig::default().fb_epsilon;
        let (h, w) = ir[0].hw()?;
        let mut valid_prev = Vec::with_capacity(n);
        let mut valid_next = Vec::with_capacity(n);
        for t in 0..n {
            valid_prev.push(if t > 0 {
                loss::validity_mask(&flows[t].prev, &flows[t - 1].next, eps)?
            } else {
                Tensor::zeros(&[h, w])
            });
            valid_next.push(if t + 1 < n {
                loss::validity_mask(&flows[t].next, &flows[t + 1].prev, eps)?
            } else {
                Tensor::zeros(&[h, w])
            });
        }
        Ok(Self {
            ir,
            vis,
            flows,
            valid_prev,
            valid_next,
        })
    }

    pub fn len(&self) -> usize {
        self.ir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ir.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        self.ir[0].hw().expect("frames are 2-D")
    }
}

/// A training sample: centre frame and crop origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub center: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

fn crop_rect(t: &Tensor<f32>, x0: usize, y0: usize, cw: usize, ch: usize) -> Tensor<f32> {
    let w = t.shape()[1];
    Tensor::from_fn(&[ch, cw], |i| t.data()[(y0 + i / cw) * w + x0 + i % cw])
}

/// Loss of one window: spatial loss averaged over the fused frames `t−1, t, t+1`
/// plus `γ` times the temporal loss of `t` against its fused neighbours.
pub fn window_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &FusionConfig,
    data: &TrainingSet,
    win: Window,
) -> Result<Var> {
    let n = data.len();
    let s = win.size;
    let crop = |t: &Tensor<f32>| -> Tensor<T> { crop_rect(t, win.x0, win.y0, s, s).cast() };
    let centers: Vec<usize> = {
        let mut c = triplet(win.center, n).to_vec();
        c.dedup();
        c
    };
    let mut enc: BTreeMap<usize, (Var, Var, Tensor<T>, Tensor<T>)> = BTreeMap::new();
    for &c in &centers {
        for f in triplet(c, n) {
            if let std::collections::btree_map::Entry::Vacant(e) = enc.entry(f) {
                let (ir, vis) = (crop(&data.ir[f]), crop(&data.vis[f]));
                let ei = encode(tape, &ir, &vars.enc_ir)?;
                let ev = encode(tape, &vis, &vars.enc_vis)?;
                e.insert((ei, ev, ir, vis));
            }
        }
    }
    let lcfg = LossConfig {
        gamma: cfg.gamma,
        ..LossConfig::default()
    };
    let mut fused: BTreeMap<usize, Var> = BTreeMap::new();
    let mut spatial: Option<Var> = None;
    for &c in &centers {
        let [a, b, d] = triplet(c, n);
        let flows = data.flows[c].crop(win.x0, win.y0, s, s);
        let out = fuse_features(tape, vars, cfg, [enc[&a].0, enc[&b].0, enc[&d].0], [enc[&a].1, enc[&b].1, enc[&d].1], &flows)?;
        let f = tape.reshape(out.output, &[s, s])?;
        let l = loss::spatial_loss(tape, f, &enc[&c].2, &enc[&c].3, &lcfg)?;
        spatial = Some(match spatial {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        fused.insert(c, f);
    }
    let spatial = tape.scale(spatial.expect("at least one centre"), T::lit(1.0 / centers.len() as f64));
    let t = win.center;
    let flows = data.flows[t].crop(win.x0, win.y0, s, s);
    let vp: Tensor<T> = crop(&data.valid_prev[t]);
    let vn: Tensor<T> = crop(&data.valid_next[t]);
    let mut terms = Vec::new();
    if t > 0 {
        terms.push(TemporalTerm {
            neighbor: fused[&(t - 1)],
            flow: &flows.prev,
            valid: &vp,
        });
    }
    if t + 1 < n {
        terms.push(TemporalTerm {
            neighbor: fused[&(t + 1)],
            flow: &flows.next,
            valid: &vn,
        });
    }
    let temporal = loss::temporal_loss(tape, fused[&t], &terms)?;
    loss::total_loss(tape, spatial, temporal, cfg.gamma)
}

fn sample_window<R: Rng>(rng: &mut R, data: &TrainingSet, crop: usize) -> Window {
    let (h, w) = data.size();
    Window {
        center: rng.gen_range(0..data.len()),
        x0: rng.gen_range(0..=w - crop),
        y0: rng.gen_range(0..=h - crop),
        size: crop,
    }
}

/// One optimizer step over `windows`; returns the mean loss before the update.
pub fn train_step<T: Scalar>(
    model: &mut FusionModel<T>,
    adam: &mut Adam<T>,
    cfg: &FusionConfig,
    data: &TrainingSet,
    windows: &[Window],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let mut total: Option<Var> = None;
    for &w in windows {
        let l = window_loss(&mut tape, &vars, cfg, data, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let total = tape.scale(total, T::lit(1.0 / windows.len() as f64));
    let value = tape.value(total).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = tape.backward(total)?;
    let g: Vec<Option<Tensor<T>>> = vars.all().into_iter().map(|v| grads.take(v)).collect();
    adam.update(model, &g, lr);
    if !model.all_finite() {
        return Err(Error::NonFinite("model weights after update".into()));
    }
    Ok(value)
}

/// Trains from seeded initial weights. `progress(i, loss)` is called after each step.
pub fn train(
    cfg: &FusionConfig,
    data: &TrainingSet,
    mut progress: impl FnMut(usize, f64),
) -> Result<(FusionModel<f32>, Vec<f64>)> {
    cfg.validate()?;
    let (h, w) = data.size();
    let crop = cfg.crop.min(h).min(w);
    check_frame_size(crop, crop, cfg.patch)?;
    let mut model = FusionModel::<f32>::init(cfg.channels, cfg.patch, cfg.seed);
    let mut adam = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let windows: Vec<Window> = (0..cfg.batch).map(|_| sample_window(&mut rng, data, crop)).collect();
        let l = train_step(&mut model, &mut adam, cfg, data, &windows, lr_at(cfg, i))?;
        losses.push(l);
        progress(i, l);
    }
    Ok((model, losses))
}

/// `iter,lr,loss` rows with fixed formatting.
pub fn loss_curve_csv(cfg: &FusionConfig, losses: &[f64]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{:.6e},{l:.8}", lr_at(cfg, i)).unwrap();
    }
    s
}

/// Trailing moving average with window `k` (shorter at the start).
pub fn moving_average(values: &[f64], k: usize) -> Vec<f64> {
    let k = k.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= k {
            acc -= values[i - k];
        }
        out.push(acc / (i + 1).min(k) as f64);
    }
    out
}

/// Bounding box `(x0, y0, w, h)` of mask values `>= theta`, grown by `margin` and clipped.
pub fn moving_bbox(mask: &MotionMask, theta: f32, margin: usize) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in mask.tensor().data().iter().enumerate() {
        if v >= theta && v > 0.0 {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let (x0, y0) = (x0.saturating_sub(margin), y0.saturating_sub(margin));
    let (x1, y1) = ((x1 + margin).min(w - 1), (y1 + margin).min(h - 1));
    Some((x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Mean Q^{AB/F} over per-frame crops around moving content; whole frames when nothing moves.
pub fn qabf_moving(
    fused: &[Tensor<f32>],
    ir: &[Tensor<f32>],
    vis: &[Tensor<f32>],
    flows: &[FlowPair],
    theta: f32,
) -> Result<f64> {
    const MARGIN: usize = 4;
    let mut acc = Vec::new();
    for t in 0..fused.len() {
        let mask = motion_mask(&flows[t].prev, &flows[t].next, MASK_PERCENTILE)?;
        if let Some((x0, y0, w, h)) = moving_bbox(&mask, theta, MARGIN) {
            let c = |f: &Tensor<f32>| crop_rect(f, x0, y0, w, h);
            acc.push(crate::metrics::qabf(&c(&ir[t]), &c(&vis[t]), &c(&fused[t]))?);
        }
    }
    if acc.is_empty() {
        for t in 0..fused.len() {
            acc.push(crate::metrics::qabf(&ir[t], &vis[t], &fused[t])?);
        }
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_loss: f64,
    pub qabf: f64,
    pub qabf_moving: f64,
    pub piella_qs: f64,
    pub ssim: f64,
    pub ms2r_proxy: f64,
}

pub const ABLATION_HEADER: &str = "variant,final_loss,qabf,qabf_moving,piella_qs,ssim,ms2r_proxy";

/// Evaluates trained weights on the whole training sequence.
pub fn evaluate(model: &FusionModel<f32>, cfg: &FusionConfig, data: &TrainingSet, final_loss: f64) -> Result<AblationRow> {
    let fused = fuse_sequence(model, cfg, &data.ir, &data.vis, Some(&data.flows), 1)?;
    let rep = crate::metrics::report(&fused, &data.ir, &data.vis, &FlowConfig::default())?;
    let m = |n: &str| rep.mean(n).unwrap_or(f64::NAN);
    Ok(AblationRow {
        variant: cfg.variant,
        final_loss,
        qabf: m("qabf"),
        qabf_moving: qabf_moving(&fused, &data.ir, &data.vis, &data.flows, cfg.gate_theta as f32)?,
        piella_qs: m("piella_qs"),
        ssim: m("ssim"),
        ms2r_proxy: m(crate::metrics::MS2R_NAME),
    })
}

/// Trains every variant from the same seed and settings, then evaluates each.
/// `final_loss` is the last value of the 50-step moving average.
pub fn ablate(
    base: &FusionConfig,
    variants: &[Variant],
    data: &TrainingSet,
    mut progress: impl FnMut(Variant, usize, f64),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = FusionConfig { variant, ..base.clone() };
            let (model, losses) = train(&cfg, data, |i, l| progress(variant, i, l))?;
            let final_loss = moving_average(&losses, 50).last().copied().unwrap_or(f64::NAN);
            evaluate(&model, &cfg, data, final_loss)
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.final_loss, r.qabf, r.qabf_moving, r.piella_qs, r.ssim, r.ms2r_proxy
        )
        .unwrap();
    }
    s
}

/// Analytic multiply–adds of one fused frame, per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCount {
    pub stage: &'static str,
    pub macs: u64,
}

pub const REPORT_STAGES: [&str; 8] = ["encoder", "mafm", "fuse", "static", "attention", "smooth", "decoder", "total"];

/// Counts for one `h×w` frame under `cfg` (including its variant), with a trailing total.
pub fn flops_report(cfg: &FusionConfig, h: usize, w: usize) -> Vec<StageCount> {
    let (c, hw) = (cfg.channels as u64, (h * w) as u64);
    let k9 = 9u64;
    let encoder = 6 * (hw * c * k9 + hw * c * c * k9);
    let mafm = if cfg.variant == Variant::NoMafm {
        0
    } else {
        2 * (hw * c * (4 * c + 4) + hw * c * k9 + hw * 2 * c)
    };
    let fuse = hw * c * 2 * c;
    let stat = hw * c * k9 + hw * c * c + hw * c * c * k9;
    let p = cfg.patch;
    let n = (h.div_ceil(p) * w.div_ceil(p)) as u64;
    let d = c * (p * p) as u64;
    let (attention, smooth) = if cfg.variant == Variant::FullSb {
        (0, 0)
    } else {
        let k = if cfg.variant == Variant::DenseAttention {
            n
        } else {
            retained_count(n as usize, cfg.tau, cfg.k_max) as u64
        };
        (attention_flops(n, k, d, cfg.kv_mode), hw * c * c * k9)
    };
    let decoder = hw * c * c * k9 + hw * c * k9;
    let stages = [encoder, mafm, fuse, stat, attention, smooth, decoder];
    let total = stages.iter().sum();
    REPORT_STAGES
        .iter()
        .zip(stages.iter().copied().chain([total]))
        .map(|(&stage, macs)| StageCount { stage, macs })
        .collect()
}

/// Per-stage growth between 640×480 and 1280×720 as CSV
/// (`stage,macs_640x480,macs_1280x720,growth`).
pub fn flops_scaling_csv(cfg: &FusionConfig) -> String {
    let a = flops_report(cfg, 480, 640);
    let b = flops_report(cfg, 720, 1280);
    let mut s = String::from("stage,macs_640x480,macs_1280x720,growth\n");
    for (x, y) in a.iter().zip(&b) {
        let g = if x.macs == 0 { 0.0 } else { y.macs as f64 / x.macs as f64 };
        writeln!(s, "{},{},{},{g:.6}", x.stage, x.macs, y.macs).unwrap();
    }
    s
}

/// Attention multiply–adds of the configured mode at `N` patch tokens.
pub fn attention_stage_macs(cfg: &FusionConfig, n: usize) -> u64 {
    let d = (cfg.channels * cfg.patch * cfg.patch) as u64;
    let k = retained_count(n, cfg.tau, cfg.k_max) as u64;
    attention_flops(n as u64, k, d, cfg.kv_mode)
}
