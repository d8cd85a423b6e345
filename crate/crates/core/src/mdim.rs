//! Motion-guided dual interaction: Top-K sparse attention over the most
//! dynamic patches, convolutional weak interaction everywhere, and a
//! mask-gated reconstruction that merges the two.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, PatchGrid};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Source of keys and values for the sparse attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KvMode {
    /// Keys/values from all `N` patch tokens, each biased by the global token.
    #[default]
    AllPatches,
    /// Keys/values from the single global token.
    GlobalTokenOnly,
}

impl KvMode {
    pub fn name(self) -> &'static str {
        match self {
            KvMode::AllPatches => "all_patches",
            KvMode::GlobalTokenOnly => "global_token_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all_patches" => Some(KvMode::AllPatches),
            "global_token_only" => Some(KvMode::GlobalTokenOnly),
            _ => None,
        }
    }
}

/// Selected patch indices (ascending) and their saliency scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientSet<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T> SalientSet<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Patch-level saliency: the mean of `mask` (`H×W`, divisible by `p`) over each patch.
pub fn saliency_scores<T: Scalar>(mask: &Tensor<T>, p: usize) -> Result<Vec<T>> {
    mask.hw()?;
    Ok(ops::avg_pool(mask, p)?.into_vec())
}

/// Number of retained patches: `max(1, min(⌊N·τ⌋, k_max))`.
pub fn retained_count(n: usize, tau: f64, k_max: usize) -> usize {
    (((n as f64) * tau).floor() as usize).min(k_max).max(1)
}

/// Keeps the `k` highest scores; ties go to the lower patch index.
pub fn topk_select<T: Scalar>(scores: &[T], tau: f64, k_max: usize) -> Result<SalientSet<T>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("top-k ratio must be in (0, 1], got {tau}")));
    }
    if k_max == 0 || scores.is_empty() {
        return Err(Error::invalid("top-k needs k_max ≥ 1 and at least one score"));
    }
    let k = retained_count(scores.len(), tau, k_max);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let weights = indices.iter().map(|&i| scores[i]).collect();
    Ok(SalientSet { indices, weights })
}

/// Query/key/value projections, each `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            query: Tensor::zeros(&[d, d]),
            key: Tensor::zeros(&[d, d]),
            value: Tensor::zeros(&[d, d]),
        }
    }

    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let a = (1.0 / d as f64).sqrt();
        Self {
            query: Tensor::uniform(&[d, d], -a, a, rng),
            key: Tensor::uniform(&[d, d], -a, a, rng),
            value: Tensor::uniform(&[d, d], -a, a, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Single-head attention with queries from the selected tokens only.
///
/// `queries` is `k×d`, `tokens` holds all `N×d` patch tokens. Returns `k×d`.
pub fn sparse_attention<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    tokens: Var,
    mode: KvMode,
    w: &AttentionVars,
) -> Result<Var> {
    let d = tape.shape(tokens)[1];
    if tape.shape(queries)[1] != d || tape.shape(w.query) != [d, d] || tape.shape(w.key) != [d, d] || tape.shape(w.value) != [d, d] {
        return Err(Error::shape("sparse_attention", tape.shape(queries), tape.shape(w.query)));
    }
    let global = tape.mean_rows(tokens)?;
    let kv_in = match mode {
        KvMode::AllPatches => tape.add_row(tokens, global)?,
        KvMode::GlobalTokenOnly => global,
    };
    let q = tape.matmul(queries, w.query)?;
    let k = tape.matmul(kv_in, w.key)?;
    let v = tape.matmul(kv_in, w.value)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let attn = tape.softmax(scores);
    tape.matmul(attn, v)
}

/// Analytic multiply–adds of [`sparse_attention`] (projections, scores and value mixing).
pub fn attention_flops(n: u64, k: u64, d: u64, mode: KvMode) -> u64 {
    match mode {
        KvMode::AllPatches => 2 * k * n * d + (k + 2 * n) * d * d,
        KvMode::GlobalTokenOnly => 2 * k * d + (k + 2) * d * d,
    }
}

/// Dense self-attention over all `N` tokens: `2·N²·d + 3·N·d²`.
pub fn dense_attention_flops(n: u64, d: u64) -> u64 {
    2 * n * n * d + 3 * n * d * d
}

/// Depthwise-separable plus standard `3×3` convolution, in residual form.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticWeights<T> {
    pub depthwise: Tensor<T>,
    pub pointwise: Tensor<T>,
    pub conv: Tensor<T>,
    pub conv_bias: Tensor<T>,
}

impl<T: Scalar> StaticWeights<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            depthwise: Tensor::zeros(&[c, 3, 3]),
            pointwise: Tensor::zeros(&[c, c, 1, 1]),
            conv: Tensor::zeros(&[c, c, 3, 3]),
            conv_bias: Tensor::zeros(&[c]),
        }
    }

    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let a = (1.0 / (9 * c) as f64).sqrt();
        let b = (1.0 / c as f64).sqrt();
        Self {
            depthwise: Tensor::uniform(&[c, 3, 3], -1.0 / 3.0, 1.0 / 3.0, rng),
            pointwise: Tensor::uniform(&[c, c, 1, 1], -b, b, rng),
            conv: Tensor::uniform(&[c, c, 3, 3], -a, a, rng),
            conv_bias: Tensor::zeros(&[c]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StaticVars {
    pub depthwise: Var,
    pub pointwise: Var,
    pub conv: Var,
    pub conv_bias: Var,
}

/// `F_static = X + conv3×3(act(depthwise_separable(X)))`.
pub fn static_branch<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &StaticVars) -> Result<Var> {
    let h = tape.depthwise_separable(x, w.depthwise, w.pointwise)?;
    let h = tape.leaky_relu(h);
    let h = tape.conv2d(h, w.conv, Some(w.conv_bias))?;
    tape.add(x, h)
}

/// `Y = F_static + Smooth(M ⊙ R(F_attn ⊙ W))`.
///
/// `grid` describes the padded map the tokens came from; the scattered map is
/// cropped back to `F_static`'s extent before gating. `smooth` is a bias-free
/// `C×C×3×3` kernel.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct<T: Scalar>(
    tape: &mut Tape<T>,
    f_static: Var,
    f_attn: Var,
    weights: Var,
    indices: &[usize],
    grid: PatchGrid,
    mask: Var,
    smooth: Var,
) -> Result<Var> {
    let (c, h, w) = tape.value(f_static).chw()?;
    let weighted = tape.mul_rows(f_attn, weights)?;
    let placed = tape.scatter_patches(weighted, grid, indices, c)?;
    let placed = tape.crop_hw(placed, h, w)?;
    let gated = tape.mul_spatial(placed, mask)?;
    let smoothed = tape.conv2d(gated, smooth, None)?;
    tape.add(f_static, smoothed)
}

/// Learnable parameters of the interaction module.
#[derive(Clone, Debug, PartialEq)]
pub struct MdimWeights<T> {
    pub attention: AttentionWeights<T>,
    pub static_branch: StaticWeights<T>,
    pub smooth: Tensor<T>,
}

impl<T: Scalar> MdimWeights<T> {
    pub fn zeros(c: usize, patch: usize) -> Self {
        let d = c * patch * patch;
        Self {
            attention: AttentionWeights::zeros(d),
            static_branch: StaticWeights::zeros(c),
            smooth: Tensor::zeros(&[c, c, 3, 3]),
        }
    }

    pub fn init<R: Rng + ?Sized>(c: usize, patch: usize, rng: &mut R) -> Self {
        let d = c * patch * patch;
        let a = (1.0 / (9 * c) as f64).sqrt();
        Self {
            attention: AttentionWeights::init(d, rng),
            static_branch: StaticWeights::init(c, rng),
            smooth: Tensor::uniform(&[c, c, 3, 3], -a, a, rng),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("query", &self.attention.query),
            ("key", &self.attention.key),
            ("value", &self.attention.value),
            ("static_depthwise", &self.static_branch.depthwise),
            ("static_pointwise", &self.static_branch.pointwise),
            ("static_conv", &self.static_branch.conv),
            ("static_conv_bias", &self.static_branch.conv_bias),
            ("smooth", &self.smooth),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("query", &mut self.attention.query),
            ("key", &mut self.attention.key),
            ("value", &mut self.attention.value),
            ("static_depthwise", &mut self.static_branch.depthwise),
            ("static_pointwise", &mut self.static_branch.pointwise),
            ("static_conv", &mut self.static_branch.conv),
            ("static_conv_bias", &mut self.static_branch.conv_bias),
            ("smooth", &mut self.smooth),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> MdimVars {
        let mut put = |t: &Tensor<T>| if train { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        MdimVars {
            attention: AttentionVars {
                query: put(&self.attention.query),
                key: put(&self.attention.key),
                value: put(&self.attention.value),
            },
            static_branch: StaticVars {
                depthwise: put(&self.static_branch.depthwise),
                pointwise: put(&self.static_branch.pointwise),
                conv: put(&self.static_branch.conv),
                conv_bias: put(&self.static_branch.conv_bias),
            },
            smooth: put(&self.smooth),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MdimVars {
    pub attention: AttentionVars,
    pub static_branch: StaticVars,
    pub smooth: Var,
}

impl MdimVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.attention.query,
            self.attention.key,
            self.attention.value,
            self.static_branch.depthwise,
            self.static_branch.pointwise,
            self.static_branch.conv,
            self.static_branch.conv_bias,
            self.smooth,
        ]
    }
}

/// How the dynamic branch picks its query patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    /// Top-K by saliency with ratio `tau` and cap `k_max`.
    TopK { tau: f64, k_max: usize },
    /// Every patch is a query (dense attention).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdimSettings {
    pub patch: usize,
    pub selection: Selection,
    pub kv_mode: KvMode,
    /// `false` removes the dynamic branch entirely (`Y = F_static`).
    pub dynamic: bool,
}

/// Result of one interaction pass.
pub struct MdimOutput<T> {
    pub output: Var,
    /// `None` when the dynamic branch is disabled.
    pub salient: Option<SalientSet<T>>,
}

/// Runs both branches on `x` (`C×H×W`) guided by `mask` (`H×W` in `[0, 1]`).
pub fn mdim_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mask: &Tensor<T>,
    settings: &MdimSettings,
    w: &MdimVars,
) -> Result<MdimOutput<T>> {
    let (_, h, wd) = tape.value(x).chw()?;
    if mask.shape() != [h, wd] {
        return Err(Error::shape("mdim mask", tape.shape(x), mask.shape()));
    }
    let f_static = static_branch(tape, x, &w.static_branch)?;
    if !settings.dynamic {
        return Ok(MdimOutput {
            output: f_static,
            salient: None,
        });
    }
    let p = settings.patch;
    let (hp, wp) = (h.div_ceil(p) * p, wd.div_ceil(p) * p);
    let grid = PatchGrid::new(hp, wp, p)?;
    let padded_mask = ops::pad_hw(mask, hp, wp)?;
    let scores = saliency_scores(&padded_mask, p)?;
    let salient = match settings.selection {
        Selection::TopK { tau, k_max } => topk_select(&scores, tau, k_max)?,
        Selection::All => SalientSet {
            indices: (0..grid.len()).collect(),
            weights: scores.clone(),
        },
    };
    let xp = tape.pad_hw(x, hp, wp)?;
    let all: Vec<usize> = (0..grid.len()).collect();
    let tokens = tape.gather_patches(xp, grid, &all)?;
    let queries = tape.gather_patches(xp, grid, &salient.indices)?;
    let attn = sparse_attention(tape, queries, tokens, settings.kv_mode, &w.attention)?;
    let wv = tape.constant(Tensor::from_vec(&[salient.len()], salient.weights.clone())?);
    let mv = tape.constant(mask.clone());
    let y = reconstruct(tape, f_static, attn, wv, &salient.indices, grid, mv, w.smooth)?;
    Ok(MdimOutput {
        output: y,
        salient: Some(salient),
    })
}
