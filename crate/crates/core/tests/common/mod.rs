//! Shared checkers and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidfuse::flow::FlowField;
use vidfuse::loss::{self, LossConfig, TemporalTerm};
use vidfuse::mafm::{self, MafmVars};
use vidfuse::mdim::{self, AttentionVars, KvMode, MdimSettings, MdimVars, Selection, StaticVars};
use vidfuse::ops::{self, PatchGrid};
use vidfuse::{Result, Tape, Tensor, Var};

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
pub fn rand_away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Flow components `n + f` with integer `n ∈ [−2, 1]` and fraction `f ∈ [0.1, 0.9]`,
/// so sample coordinates never sit on a grid line.
pub fn rand_fractional_flow(h: usize, w: usize, r: &mut ChaCha8Rng) -> T64 {
    Tensor::from_fn(&[2, h, w], |_| r.gen_range(-2i32..=1) as f64 + r.gen_range(0.1..0.9))
}

pub fn checkerboard(h: usize, w: usize) -> T64 {
    Tensor::from_fn(&[h, w], |i| ((i / w + i % w) % 2) as f64)
}

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Result of one finite-difference comparison.
pub struct GradCase {
    pub name: &'static str,
    /// Worst over inputs of `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates sitting on a non-differentiable point (one-sided slopes disagree and the
    /// analytic value equals one of them); excluded from `max_rel`.
    pub kinks: usize,
}

fn projected_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let proj = rand_t(tape.shape(out), &mut r);
    let p = tape.constant(proj);
    let m = tape.mul(out, p)?;
    Ok(tape.sum(m))
}

fn eval(inputs: &[T64], build: &Build, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let l = projected_loss(&mut tape, out, seed)?;
    Ok(tape.value(l).item())
}

/// Central differences with step `1e-4` against reverse-mode gradients of `Σ R ⊙ f(inputs)`
/// for a fixed random `R`.
pub fn grad_check(name: &'static str, inputs: Vec<T64>, build: &Build) -> GradCase {
    const H: f64 = 1e-4;
    let seed = 0x5eed;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
    let l = projected_loss(&mut tape, out, seed).unwrap();
    let mut grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    let (mut checked, mut kinks) = (0usize, 0usize);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut work = inputs.clone();
        let mut one_sided = Vec::new();
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + H;
            let up = eval(&work, build, seed).unwrap();
            work[i].data_mut()[j] = x0 - H;
            let down = eval(&work, build, seed).unwrap();
            work[i].data_mut()[j] = x0;
            *n = (up - down) / (2.0 * H);
            let mid = eval(&work, build, seed).unwrap();
            one_sided.push(((up - mid) / H, (mid - down) / H));
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(1e-6f64, |m, &x| m.max(x.abs()));
        for (j, (&an, &nu)) in analytic.data().iter().zip(&numeric).enumerate() {
            let (right, left) = one_sided[j];
            // Smooth points put the analytic value midway between the one-sided slopes; at a
            // kink it coincides with one of them.
            let jump = (right - left).abs();
            if jump > 1e-4 * scale && (an - right).abs().min((an - left).abs()) < 0.1 * jump {
                kinks += 1;
                continue;
            }
            checked += 1;
            worst = worst.max((an - nu).abs() / scale);
        }
    }
    GradCase {
        name,
        max_rel: worst,
        checked,
        kinks,
    }
}

fn mafm_vars(v: &[Var]) -> MafmVars {
    MafmVars {
        compress: v[0],
        compress_bias: v[1],
        depthwise: v[2],
        project: v[3],
        project_bias: v[4],
        omega: v[5],
    }
}

fn mafm_weights(c: usize, r: &mut ChaCha8Rng) -> Vec<T64> {
    vec![
        Tensor::uniform(&[c, 4 * c + 4, 1, 1], -0.3, 0.3, r),
        Tensor::uniform(&[c], -0.3, 0.3, r),
        Tensor::uniform(&[c, 3, 3], -0.3, 0.3, r),
        Tensor::uniform(&[2, c, 1, 1], -0.3, 0.3, r),
        Tensor::uniform(&[2], -0.3, 0.3, r),
        rand_t(&[3], r),
    ]
}

fn mdim_vars(v: &[Var]) -> MdimVars {
    MdimVars {
        attention: AttentionVars {
            query: v[0],
            key: v[1],
            value: v[2],
        },
        static_branch: StaticVars {
            depthwise: v[3],
            pointwise: v[4],
            conv: v[5],
            conv_bias: v[6],
        },
        smooth: v[7],
    }
}

fn mdim_weights(c: usize, p: usize, r: &mut ChaCha8Rng) -> Vec<T64> {
    let d = c * p * p;
    let a = (1.0 / d as f64).sqrt();
    vec![
        Tensor::uniform(&[d, d], -a, a, r),
        Tensor::uniform(&[d, d], -a, a, r),
        Tensor::uniform(&[d, d], -a, a, r),
        Tensor::uniform(&[c, 3, 3], -0.3, 0.3, r),
        Tensor::uniform(&[c, c, 1, 1], -0.3, 0.3, r),
        Tensor::uniform(&[c, c, 3, 3], -0.3, 0.3, r),
        Tensor::uniform(&[c], -0.3, 0.3, r),
        Tensor::uniform(&[c, c, 3, 3], -0.3, 0.3, r),
    ]
}

/// Every differentiable operation, each loss, both modules and a composed micro-network.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let mut case = |name: &'static str, inputs: Vec<T64>, build: &Build| out.push(grad_check(name, inputs, build));

    let (a, b) = (rand_t(&[3, 4], &mut r), rand_t(&[3, 4], &mut r));
    case("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    case("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
    case("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    let den = Tensor::uniform(&[3, 4], 0.5, 1.5, &mut r);
    case("div", vec![a.clone(), den], &|t, v| t.div(v[0], v[1]));
    case("scale", vec![a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)));
    case("add_scalar", vec![a.clone()], &|t, v| Ok(t.add_scalar(v[0], 0.3)));
    let az = rand_away_from_zero(&[3, 4], &mut r);
    case("abs", vec![az.clone()], &|t, v| Ok(t.abs(v[0])));
    case("leaky_relu", vec![az], &|t, v| Ok(t.leaky_relu(v[0])));
    case("sigmoid", vec![a.clone()], &|t, v| Ok(t.sigmoid(v[0])));
    case("sum", vec![a.clone()], &|t, v| Ok(t.sum(v[0])));
    case("mean", vec![a.clone()], &|t, v| Ok(t.mean(v[0])));
    case("mul_scalar", vec![a.clone(), rand_t(&[1], &mut r)], &|t, v| t.mul_scalar(v[0], v[1]));
    case("index", vec![a.clone()], &|t, v| t.index(v[0], 5));
    case("reshape", vec![a.clone()], &|t, v| t.reshape(v[0], &[2, 6]));
    let x = rand_t(&[2, 3, 4], &mut r);
    case("mul_spatial", vec![x.clone(), rand_t(&[3, 4], &mut r)], &|t, v| t.mul_spatial(v[0], v[1]));
    let gate = checkerboard(3, 4);
    case("select_spatial", vec![x.clone(), rand_t(&[2, 3, 4], &mut r)], &move |t, v| {
        t.select_spatial(&gate, v[0], v[1])
    });
    let m = rand_t(&[5, 3], &mut r);
    case("mul_rows", vec![m.clone(), rand_t(&[5], &mut r)], &|t, v| t.mul_rows(v[0], v[1]));
    case("add_row", vec![m.clone(), rand_t(&[3], &mut r)], &|t, v| t.add_row(v[0], v[1]));
    case("mean_rows", vec![m.clone()], &|t, v| t.mean_rows(v[0]));
    case("concat_channels", vec![x.clone(), rand_t(&[1, 3, 4], &mut r)], &|t, v| {
        t.concat_channels(&[v[0], v[1]])
    });
    case("pad_hw", vec![x.clone()], &|t, v| t.pad_hw(v[0], 5, 6));
    case("crop_hw", vec![rand_t(&[2, 5, 6], &mut r)], &|t, v| t.crop_hw(v[0], 3, 4));
    let img = rand_t(&[2, 5, 6], &mut r);
    case(
        "conv2d_3x3_bias",
        vec![img.clone(), rand_t(&[3, 2, 3, 3], &mut r), rand_t(&[3], &mut r)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2])),
    );
    case("conv2d_5x5", vec![img.clone(), rand_t(&[2, 2, 5, 5], &mut r)], &|t, v| t.conv2d(v[0], v[1], None));
    case("conv2d_kernel_wider_than_image", vec![rand_t(&[2, 2, 3], &mut r), rand_t(&[2, 2, 5, 5], &mut r)], &|t, v| {
        t.conv2d(v[0], v[1], None)
    });
    case("depthwise_kernel_wider_than_image", vec![rand_t(&[2, 3, 1], &mut r), rand_t(&[2, 5, 5], &mut r)], &|t, v| {
        t.depthwise_conv2d(v[0], v[1])
    });
    case("conv2d_1x1", vec![img.clone(), rand_t(&[4, 2, 1, 1], &mut r)], &|t, v| t.conv2d(v[0], v[1], None));
    case("depthwise_conv2d", vec![img.clone(), rand_t(&[2, 3, 3], &mut r)], &|t, v| {
        t.depthwise_conv2d(v[0], v[1])
    });
    case(
        "depthwise_separable",
        vec![img.clone(), rand_t(&[2, 3, 3], &mut r), rand_t(&[3, 2, 1, 1], &mut r)],
        &|t, v| t.depthwise_separable(v[0], v[1], v[2]),
    );
    case("avg_pool", vec![rand_t(&[2, 4, 6], &mut r)], &|t, v| t.avg_pool(v[0], 2));
    case("box_mean_valid", vec![rand_t(&[6, 7], &mut r)], &|t, v| t.box_mean_valid(v[0], 3));
    case("softmax", vec![rand_t(&[3, 5], &mut r)], &|t, v| Ok(t.softmax(v[0])));
    case(
        "bilinear_sample",
        vec![img.clone(), rand_fractional_flow(5, 6, &mut r)],
        &|t, v| t.bilinear_sample(v[0], v[1]),
    );
    case("matmul", vec![rand_t(&[3, 4], &mut r), rand_t(&[4, 5], &mut r)], &|t, v| t.matmul(v[0], v[1]));
    case("transpose", vec![rand_t(&[3, 4], &mut r)], &|t, v| t.transpose(v[0]));
    let grid = PatchGrid::new(4, 6, 2).unwrap();
    case("gather_patches", vec![rand_t(&[2, 4, 6], &mut r)], &move |t, v| {
        t.gather_patches(v[0], grid, &[0, 2, 5])
    });
    case("scatter_patches", vec![rand_t(&[3, 8], &mut r)], &move |t, v| {
        t.scatter_patches(v[0], grid, &[1, 3, 4], 2)
    });

    let cfg = LossConfig::default();
    let (h, w) = (9, 10);
    let ir = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r);
    let vis = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r);
    let fused = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r);
    {
        let (ir, vis) = (ir.clone(), vis.clone());
        case("pixel_loss", vec![fused.clone()], &move |t, v| loss::pixel_loss(t, v[0], &ir, &vis));
    }
    case("ssim", vec![fused.clone(), ir.clone()], &move |t, v| loss::ssim(t, v[0], v[1], &cfg));
    {
        let (ir, vis, cfg) = (ir.clone(), vis.clone(), cfg);
        case("spatial_loss", vec![fused.clone()], &move |t, v| loss::spatial_loss(t, v[0], &ir, &vis, &cfg));
    }
    {
        let fl = rand_fractional_flow(h, w, &mut r);
        let flow = FlowField::from_tensor(&fl).unwrap();
        let valid = Tensor::from_fn(&[h, w], |i| ((i * 7) % 3 != 0) as u8 as f64);
        case("temporal_loss", vec![fused.clone(), vis.clone()], &move |t, v| {
            let terms = [TemporalTerm {
                neighbor: v[1],
                flow: &flow,
                valid: &valid,
            }];
            loss::temporal_loss(t, v[0], &terms)
        });
    }

    let c = 2;
    let (h, w) = (6, 7);
    let prev = rand_fractional_flow(h, w, &mut r);
    let next = rand_fractional_flow(h, w, &mut r);
    let gate = checkerboard(h, w);
    let mut inputs: Vec<T64> = (0..4).map(|_| rand_t(&[c, h, w], &mut r)).collect();
    inputs.extend(mafm_weights(c, &mut r));
    {
        let (prev, next, gate) = (prev.clone(), next.clone(), gate.clone());
        case("mafm_align", inputs.clone(), &move |t, v| {
            let fp = t.constant(prev.clone());
            let fnx = t.constant(next.clone());
            mafm::align(t, [v[0], v[1], v[2]], v[3], fp, fnx, &gate, &mafm_vars(&v[4..]))
        });
    }
    {
        let gate = gate.clone();
        let mut with_flow = inputs.clone();
        with_flow.push(prev.clone());
        with_flow.push(next.clone());
        case("mafm_align_tracked_flow", with_flow, &move |t, v| {
            mafm::align(t, [v[0], v[1], v[2]], v[3], v[10], v[11], &gate, &mafm_vars(&v[4..10]))
        });
    }

    let p = 2;
    let x = rand_t(&[c, 6, 8], &mut r);
    let mask = Tensor::uniform(&[6, 8], 0.0, 1.0, &mut r);
    let mut inputs = vec![x];
    inputs.extend(mdim_weights(c, p, &mut r));
    for mode in [KvMode::AllPatches, KvMode::GlobalTokenOnly] {
        let mask = mask.clone();
        let settings = MdimSettings {
            patch: p,
            selection: Selection::TopK { tau: 0.25, k_max: 8 },
            kv_mode: mode,
            dynamic: true,
        };
        let name = match mode {
            KvMode::AllPatches => "mdim_forward_all_patches",
            KvMode::GlobalTokenOnly => "mdim_forward_global_token",
        };
        case(name, inputs.clone(), &move |t, v| {
            Ok(mdim::mdim_forward(t, v[0], &mask, &settings, &mdim_vars(&v[1..]))?.output)
        });
    }
    {
        let mut ins = vec![rand_t(&[3, 8], &mut r), rand_t(&[12, 8], &mut r)];
        ins.extend((0..3).map(|_| Tensor::uniform(&[8, 8], -0.35, 0.35, &mut r)));
        case("sparse_attention", ins, &|t, v| {
            let w = AttentionVars {
                query: v[2],
                key: v[3],
                value: v[4],
            };
            mdim::sparse_attention(t, v[0], v[1], KvMode::AllPatches, &w)
        });
    }

    // Composed micro-network: two MAFM passes, 1×1 join, MDIM, on 4 channels at 8×8.
    let (c, h, w, p) = (4, 8, 8, 4);
    let prev = rand_fractional_flow(h, w, &mut r);
    let next = rand_fractional_flow(h, w, &mut r);
    let gate = checkerboard(h, w);
    let mask = Tensor::uniform(&[h, w], 0.0, 1.0, &mut r);
    let mut inputs: Vec<T64> = (0..6).map(|_| rand_t(&[c, h, w], &mut r)).collect();
    inputs.extend(mafm_weights(c, &mut r));
    inputs.extend(mafm_weights(c, &mut r));
    inputs.push(Tensor::uniform(&[c, 2 * c, 1, 1], -0.4, 0.4, &mut r));
    inputs.extend(mdim_weights(c, p, &mut r));
    case("micro_net_mafm_mdim", inputs, &move |t, v| {
        let fp = t.constant(prev.clone());
        let fnx = t.constant(next.clone());
        let a = mafm::align(t, [v[0], v[1], v[2]], v[4], fp, fnx, &gate, &mafm_vars(&v[6..12]))?;
        let b = mafm::align(t, [v[3], v[4], v[5]], v[1], fp, fnx, &gate, &mafm_vars(&v[12..18]))?;
        let j = t.concat_channels(&[a, b])?;
        let x = t.conv2d(j, v[18], None)?;
        let settings = MdimSettings {
            patch: p,
            selection: Selection::TopK { tau: 0.25, k_max: 4 },
            kv_mode: KvMode::AllPatches,
            dynamic: true,
        };
        Ok(mdim::mdim_forward(t, x, &mask, &settings, &mdim_vars(&v[19..]))?.output)
    });
    out
}

// ---------- brute-force oracles ----------

pub fn conv2d_oracle(x: &T64, k: &T64, b: Option<&T64>) -> T64 {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let r = (ks / 2) as i64;
    Tensor::from_fn(&[cout, h, w], |i| {
        let (co, y, xx) = (i / (h * w), (i / w) % h, i % w);
        let mut s = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin {
            for ky in 0..ks {
                for kx in 0..ks {
                    let sy = y as i64 + ky as i64 - r;
                    let sx = xx as i64 + kx as i64 - r;
                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                        s += k.data()[((co * cin + ci) * ks + ky) * ks + kx] * x.data()[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        s
    })
}

pub fn depthwise_separable_oracle(x: &T64, dw: &T64, pw: &T64) -> T64 {
    let c = x.shape()[0];
    let ks = dw.shape()[1];
    let mut spatial = Vec::new();
    for ch in 0..c {
        let xc = Tensor::from_vec(&[1, x.shape()[1], x.shape()[2]], x.channel(ch).to_vec()).unwrap();
        let kc = Tensor::from_vec(&[1, 1, ks, ks], dw.data()[ch * ks * ks..(ch + 1) * ks * ks].to_vec()).unwrap();
        spatial.extend(conv2d_oracle(&xc, &kc, None).into_vec());
    }
    let s = Tensor::from_vec(x.shape(), spatial).unwrap();
    conv2d_oracle(&s, &pw.reshape(&[pw.shape()[0], c, 1, 1]).unwrap(), None)
}

pub fn avg_pool_oracle(x: &T64, p: usize) -> T64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / p, w / p);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, by, bx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = 0.0;
        for y in by * p..(by + 1) * p {
            for xx in bx * p..(bx + 1) * p {
                s += x.data()[(ch * h + y) * w + xx];
            }
        }
        s / (p * p) as f64
    })
}

/// `out(p) = Σ` bilinear weights of the four neighbours of the clamped position `p + flow(p)`.
pub fn bilinear_oracle(f: &T64, flow: &T64) -> T64 {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let px = (x as f64 + flow.data()[y * w + x]).clamp(0.0, (w - 1) as f64);
        let py = (y as f64 + flow.data()[h * w + y * w + x]).clamp(0.0, (h - 1) as f64);
        let mut s = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                let wx = (1.0 - (px - xx as f64).abs()).max(0.0);
                let wy = (1.0 - (py - yy as f64).abs()).max(0.0);
                s += wx * wy * f.data()[(ch * h + yy) * w + xx];
            }
        }
        s
    })
}

/// Repeated arg-max with the lowest index winning ties; returned ascending.
pub fn topk_oracle(scores: &[f64], tau: f64, k_max: usize) -> Vec<usize> {
    let k = ((scores.len() as f64 * tau).floor() as usize).min(k_max).max(1);
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    out
}

fn matmul_naive(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[i * k + j] = (0..m).map(|t| a[i * m + t] * b[t * k + j]).sum();
        }
    }
    out
}

/// Full attention with every token as a query, then the rows at `indices`.
pub fn dense_then_select(tokens: &T64, indices: &[usize], wq: &T64, wk: &T64, wv: &T64, mode: KvMode) -> T64 {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let t = tokens.data();
    let g: Vec<f64> = (0..d).map(|j| (0..n).map(|i| t[i * d + j]).sum::<f64>() / n as f64).collect();
    let (kv, m): (Vec<f64>, usize) = match mode {
        KvMode::AllPatches => ((0..n * d).map(|i| t[i] + g[i % d]).collect(), n),
        KvMode::GlobalTokenOnly => (g.clone(), 1),
    };
    let q = matmul_naive(t, wq.data(), n, d, d);
    let k = matmul_naive(&kv, wk.data(), m, d, d);
    let v = matmul_naive(&kv, wv.data(), m, d, d);
    let mut rows = Vec::new();
    for &qi in indices {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|c| q[qi * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            rows.push((0..m).map(|j| e[j] / z * v[j * d + c]).sum());
        }
    }
    Tensor::from_vec(&[indices.len(), d], rows).unwrap()
}

/// `F_static + smooth(M ⊙ crop(scatter(W ⊙ F_attn)))` with per-pixel loops.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_oracle(
    f_static: &T64,
    f_attn: &T64,
    weights: &[f64],
    indices: &[usize],
    grid: PatchGrid,
    mask: &T64,
    smooth: &T64,
) -> T64 {
    let (c, h, w) = (f_static.shape()[0], f_static.shape()[1], f_static.shape()[2]);
    let p = grid.patch;
    let d = c * p * p;
    let mut placed = vec![0.0; c * h * w];
    for (row, &pi) in indices.iter().enumerate() {
        let (oy, ox) = grid.origin(pi);
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (oy + dy, ox + dx);
                    if y < h && x < w {
                        placed[(ch * h + y) * w + x] =
                            f_attn.data()[row * d + (ch * p + dy) * p + dx] * weights[row] * mask.data()[y * w + x];
                    }
                }
            }
        }
    }
    let g = Tensor::from_vec(&[c, h, w], placed).unwrap();
    let s = conv2d_oracle(&g, smooth, None);
    f_static.zip_map(&s, |a, b| a + b)
}

pub struct OracleCase {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs: f64,
}

/// Library kernels against the oracles above on random small instances.
pub fn oracle_suite(instances: usize) -> Vec<OracleCase> {
    let mut r = rng(23);
    let mut out = Vec::new();
    let mut worst = |name: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64, r: &mut ChaCha8Rng| {
        let m = (0..instances).map(|_| f(r)).fold(0.0, f64::max);
        out.push(OracleCase {
            name,
            instances,
            max_abs: m,
        });
    };
    worst(
        "conv2d",
        &mut |r| {
            let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
            let x = rand_t(&[cin, h, w], r);
            let ker = rand_t(&[cout, cin, k, k], r);
            let b = r.gen_bool(0.5).then(|| rand_t(&[cout], r));
            ops::conv2d(&x, &ker, b.as_ref()).unwrap().max_abs_diff(&conv2d_oracle(&x, &ker, b.as_ref()))
        },
        &mut r,
    );
    worst(
        "depthwise_separable",
        &mut |r| {
            let (c, cout) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
            let x = rand_t(&[c, h, w], r);
            let dw = rand_t(&[c, k, k], r);
            let pw = rand_t(&[cout, c, 1, 1], r);
            ops::depthwise_separable(&x, &dw, &pw)
                .unwrap()
                .max_abs_diff(&depthwise_separable_oracle(&x, &dw, &pw))
        },
        &mut r,
    );
    worst(
        "avg_pool",
        &mut |r| {
            let p = r.gen_range(1..4);
            let (c, h, w) = (r.gen_range(1..4), p * r.gen_range(1..4), p * r.gen_range(1..4));
            let x = rand_t(&[c, h, w], r);
            ops::avg_pool(&x, p).unwrap().max_abs_diff(&avg_pool_oracle(&x, p))
        },
        &mut r,
    );
    worst(
        "bilinear_sample",
        &mut |r| {
            let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..8));
            let f = rand_t(&[c, h, w], r);
            let flow = Tensor::uniform(&[2, h, w], -3.0, 3.0, r);
            ops::bilinear_sample(&f, &flow).unwrap().max_abs_diff(&bilinear_oracle(&f, &flow))
        },
        &mut r,
    );
    worst(
        "topk_select",
        &mut |r| {
            let n = r.gen_range(1..40);
            // Coarse values force ties.
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64 / 4.0).collect();
            let tau = r.gen_range(0.01..=1.0);
            let k_max = r.gen_range(1..20);
            let got = mdim::topk_select(&scores, tau, k_max).unwrap();
            let want = topk_oracle(&scores, tau, k_max);
            let weights_ok = got.weights.iter().zip(&got.indices).all(|(&w, &i)| w == scores[i]);
            if got.indices == want && weights_ok {
                0.0
            } else {
                f64::INFINITY
            }
        },
        &mut r,
    );
    for mode in [KvMode::AllPatches, KvMode::GlobalTokenOnly] {
        let name = match mode {
            KvMode::AllPatches => "sparse_attention_all_patches",
            KvMode::GlobalTokenOnly => "sparse_attention_global_token",
        };
        worst(
            name,
            &mut |r| {
                let (n, d) = (r.gen_range(1..12), r.gen_range(1..7));
                let tokens = rand_t(&[n, d], r);
                let (wq, wk, wv) = (rand_t(&[d, d], r), rand_t(&[d, d], r), rand_t(&[d, d], r));
                let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
                let sel = mdim::topk_select(&scores, r.gen_range(0.05..=1.0), n).unwrap();
                let mut tape = Tape::new();
                let tv = tape.constant(tokens.clone());
                let qv = tape.constant(Tensor::from_fn(&[sel.len(), d], |i| tokens.data()[sel.indices[i / d] * d + i % d]));
                let w = AttentionVars {
                    query: tape.constant(wq.clone()),
                    key: tape.constant(wk.clone()),
                    value: tape.constant(wv.clone()),
                };
                let o = mdim::sparse_attention(&mut tape, qv, tv, mode, &w).unwrap();
                tape.value(o).max_abs_diff(&dense_then_select(&tokens, &sel.indices, &wq, &wk, &wv, mode))
            },
            &mut r,
        );
    }
    worst(
        "reconstruct",
        &mut |r| {
            let p = r.gen_range(1..4);
            let c = r.gen_range(1..3);
            let (h, w): (usize, usize) = (r.gen_range(1..9), r.gen_range(1..9));
            let grid = PatchGrid::new(h.div_ceil(p) * p, w.div_ceil(p) * p, p).unwrap();
            let n = grid.len();
            let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
            let sel = mdim::topk_select(&scores, r.gen_range(0.05..=1.0), n).unwrap();
            let d = c * p * p;
            let f_static = rand_t(&[c, h, w], r);
            let f_attn = rand_t(&[sel.len(), d], r);
            let mask = Tensor::uniform(&[h, w], 0.0, 1.0, r);
            let smooth = rand_t(&[c, c, 3, 3], r);
            let mut tape = Tape::new();
            let fs = tape.constant(f_static.clone());
            let fa = tape.constant(f_attn.clone());
            let wv = tape.constant(Tensor::from_vec(&[sel.len()], sel.weights.clone()).unwrap());
            let mv = tape.constant(mask.clone());
            let sv = tape.constant(smooth.clone());
            let y = mdim::reconstruct(&mut tape, fs, fa, wv, &sel.indices, grid, mv, sv).unwrap();
            tape.value(y)
                .max_abs_diff(&reconstruct_oracle(&f_static, &f_attn, &sel.weights, &sel.indices, grid, &mask, &smooth))
        },
        &mut r,
    );
    out
}

// ---------- module identities ----------

/// Zero flows, zero refinement weights and centre-dominant logits: aligned output vs `f_t`.
pub fn mafm_identity_error() -> f64 {
    let mut r = rng(31);
    let (c, h, w) = (3, 6, 7);
    let frames: Vec<T64> = (0..3).map(|_| rand_t(&[c, h, w], &mut r)).collect();
    let mut tape = Tape::new();
    let f: Vec<Var> = frames.iter().map(|t| tape.constant(t.clone())).collect();
    let anchor = tape.constant(rand_t(&[c, h, w], &mut r));
    let zero = tape.constant(Tensor::zeros(&[2, h, w]));
    let mut wts = vidfuse::mafm::MafmWeights::<f64>::zeros(c);
    wts.omega = Tensor::from_vec(&[3], vec![-20.0, 20.0, -20.0]).unwrap();
    let vars = wts.bind(&mut tape, false);
    let gate = Tensor::ones(&[h, w]);
    let y = mafm::align(&mut tape, [f[0], f[1], f[2]], anchor, zero, zero, &gate, &vars).unwrap();
    tape.value(y).max_abs_diff(&frames[1])
}

/// Largest `|Σ softmax(ω) − 1|` over random logits, including large magnitudes.
pub fn aggregate_weight_sum_error() -> f64 {
    let mut r = rng(37);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let scale = [1.0, 10.0, 100.0, 1000.0][i % 4];
        let omega = Tensor::<f64>::uniform(&[3], -scale, scale, &mut r);
        let mut tape = Tape::new();
        let o = tape.constant(omega);
        let s = tape.softmax(o);
        worst = worst.max((tape.value(s).sum() - 1.0).abs());
    }
    worst
}

/// Interaction output with an all-zero mask equals the static branch bit for bit.
pub fn zero_mask_is_static_exact() -> bool {
    let mut r = rng(41);
    let (c, p) = (2, 4);
    let x = Tensor::<f32>::uniform(&[c, 12, 10], -1.0, 1.0, &mut r);
    let w = vidfuse::mdim::MdimWeights::<f32>::init(c, p, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = w.bind(&mut tape, false);
    let settings = MdimSettings {
        patch: p,
        selection: Selection::TopK { tau: 0.25, k_max: 256 },
        kv_mode: KvMode::AllPatches,
        dynamic: true,
    };
    let y = mdim::mdim_forward(&mut tape, xv, &Tensor::zeros(&[12, 10]), &settings, &vars).unwrap();
    let s = mdim::static_branch(&mut tape, xv, &vars.static_branch).unwrap();
    tape.value(y.output).data() == tape.value(s).data()
}

/// With the global token as the only key, every output row is `mean(tokens)·W_v`.
pub fn single_key_attention_error() -> f64 {
    let mut r = rng(43);
    let (n, k, d) = (9, 4, 5);
    let tokens = rand_t(&[n, d], &mut r);
    let (wq, wk, wv) = (rand_t(&[d, d], &mut r), rand_t(&[d, d], &mut r), rand_t(&[d, d], &mut r));
    let mut tape = Tape::new();
    let t = tape.constant(tokens.clone());
    let q = tape.constant(rand_t(&[k, d], &mut r));
    let w = AttentionVars {
        query: tape.constant(wq),
        key: tape.constant(wk),
        value: tape.constant(wv.clone()),
    };
    let o = mdim::sparse_attention(&mut tape, q, t, KvMode::GlobalTokenOnly, &w).unwrap();
    let g: Vec<f64> = (0..d).map(|j| (0..n).map(|i| tokens.data()[i * d + j]).sum::<f64>() / n as f64).collect();
    let gv: Vec<f64> = (0..d).map(|j| (0..d).map(|c| g[c] * wv.data()[c * d + j]).sum()).collect();
    let want = Tensor::from_fn(&[k, d], |i| gv[i % d]);
    tape.value(o).max_abs_diff(&want)
}
