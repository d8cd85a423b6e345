use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidfuse::config::{FusionConfig, Variant};
use vidfuse::flow::FlowField;
use vidfuse::pipeline::{
    self, encode, flops_report, forward, fuse_sequence, moving_average, train, window_loss, ConvPair, FlowPair, FusionModel,
    TrainingSet, Window,
};
use vidfuse::synth::{generate, SceneSpec};
use vidfuse::{mdim, Tape, Tensor};

fn lean() -> FusionConfig {
    FusionConfig {
        channels: 4,
        patch: 4,
        crop: 32,
        batch: 1,
        lr: 1e-3,
        ..FusionConfig::default()
    }
}

fn scene(frames: usize) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let v = generate(&SceneSpec { frames, ..SceneSpec::default() }).unwrap();
    (v.ir, v.vis)
}

fn zero_flows(n: usize, w: usize, h: usize) -> Vec<FlowPair> {
    (0..n).map(|_| FlowPair::zeros(w, h)).collect()
}

fn static_scene(frames: usize) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let (ir, vis) = scene(1);
    (vec![ir[0].clone(); frames], vec![vis[0].clone(); frames])
}

fn fnv(frames: &[Tensor<f32>]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for f in frames {
        for v in f.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

#[test]
fn static_scene_reduces_to_plain_composition() {
    let cfg = lean();
    let model = FusionModel::<f64>::init(cfg.channels, cfg.patch, 3);
    let (ir, vis) = static_scene(1);
    let (ir, vis) = (ir[0].cast::<f64>(), vis[0].cast::<f64>());
    let (h, w) = ir.hw().unwrap();
    let out = forward(&model, &cfg, [&ir; 3], [&vis; 3], &FlowPair::zeros(w, h)).unwrap();

    let mut tape = Tape::new();
    let v = model.bind(&mut tape, false);
    let ei = encode(&mut tape, &ir, &v.enc_ir).unwrap();
    let ev = encode(&mut tape, &vis, &v.enc_vis).unwrap();
    let j = tape.concat_channels(&[ei, ev]).unwrap();
    let x = tape.conv2d(j, v.fuse, Some(v.fuse_bias)).unwrap();
    let s = mdim::static_branch(&mut tape, x, &v.mdim.static_branch).unwrap();
    let y = ConvPair::apply(&mut tape, s, &v.dec).unwrap();
    let y = tape.sigmoid(y);
    let manual = tape.value(y).reshape(&[h, w]).unwrap();
    assert!(out.fused.max_abs_diff(&manual) < 1e-12);
}

#[test]
fn dynamic_branch_is_inert_without_motion() {
    let (ir, vis) = static_scene(4);
    let (h, w) = ir[0].hw().unwrap();
    let flows = zero_flows(4, w, h);
    let model = FusionModel::<f32>::init(4, 4, 5);
    let run = |variant| fuse_sequence(&model, &FusionConfig { variant, ..lean() }, &ir, &vis, Some(&flows), 1).unwrap();
    let full = run(Variant::Full);
    assert_eq!(full, run(Variant::FullSb));
    let estimated = fuse_sequence(&model, &lean(), &ir, &vis, None, 1).unwrap();
    assert_eq!(full, estimated);
}

#[test]
fn inverted_mask_with_full_motion_matches_static_only() {
    let (ir, vis) = scene(3);
    let (h, w) = ir[0].hw().unwrap();
    let everywhere = FlowPair {
        prev: FlowField::uniform(w, h, 1.0, 0.0),
        next: FlowField::uniform(w, h, -1.0, 0.0),
    };
    let model = FusionModel::<f32>::init(4, 4, 9);
    let run = |variant| {
        forward(&model, &FusionConfig { variant, ..lean() }, [&ir[0], &ir[1], &ir[2]], [&vis[0], &vis[1], &vis[2]], &everywhere)
            .unwrap()
    };
    let inv = run(Variant::InvertedMask);
    assert_eq!(inv.mask.tensor().data().iter().fold(1.0f32, |a, &b| a.min(b)), 1.0);
    assert_eq!(inv.fused, run(Variant::FullSb).fused);
}

#[test]
fn full_sb_drops_the_salient_set() {
    let (ir, vis) = scene(5);
    let (h, w) = ir[0].hw().unwrap();
    let model = FusionModel::<f32>::init(4, 4, 2);
    let cfg = FusionConfig { variant: Variant::FullSb, ..lean() };
    let a = forward(&model, &cfg, [&ir[1], &ir[2], &ir[3]], [&vis[1], &vis[2], &vis[3]], &FlowPair::zeros(w, h)).unwrap();
    assert!(a.salient.is_none());
    let full = forward(&model, &lean(), [&ir[1], &ir[2], &ir[3]], [&vis[1], &vis[2], &vis[3]], &FlowPair::zeros(w, h)).unwrap();
    assert_eq!(a.fused, full.fused);
}

#[test]
fn threaded_fusion_matches_serial() {
    let (ir, vis) = scene(5);
    let model = FusionModel::<f32>::init(4, 4, 1);
    let flows = pipeline::sequence_flows(&vis, &Default::default()).unwrap();
    let serial = fuse_sequence(&model, &lean(), &ir, &vis, Some(&flows), 1).unwrap();
    for jobs in [2, 3, 8] {
        assert_eq!(serial, fuse_sequence(&model, &lean(), &ir, &vis, Some(&flows), jobs).unwrap());
    }
}

#[test]
fn fusion_is_reproducible() {
    let (ir, vis) = scene(4);
    let model = FusionModel::<f32>::init(4, 4, 11);
    let a = fuse_sequence(&model, &lean(), &ir, &vis, None, 1).unwrap();
    let b = fuse_sequence(&model, &lean(), &ir, &vis, None, 1).unwrap();
    assert_eq!(fnv(&a), fnv(&b));
    let other = FusionModel::<f32>::init(4, 4, 12);
    assert_ne!(fnv(&a), fnv(&fuse_sequence(&other, &lean(), &ir, &vis, None, 1).unwrap()));
}

#[test]
fn outputs_stay_finite_under_arbitrary_flow() {
    let (ir, vis) = scene(4);
    let (h, w) = ir[0].hw().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut random = || FlowField::from_fn(w, h, |_, _| (r.gen_range(-40.0..40.0), r.gen_range(-40.0..40.0)));
    let flows: Vec<FlowPair> = (0..4).map(|_| FlowPair { prev: random(), next: random() }).collect();
    let model = FusionModel::<f32>::init(4, 4, 6);
    for variant in Variant::ALL {
        let cfg = FusionConfig { variant, ..lean() };
        for fl in [flows.clone(), zero_flows(4, w, h)] {
            let out = fuse_sequence(&model, &cfg, &ir, &vis, Some(&fl), 1).unwrap();
            assert_eq!(out.len(), 4);
            assert!(out.iter().all(|f| f.data().iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0)));
        }
    }
}

#[test]
fn dense_attention_costs_more_than_sparse() {
    let total = |variant| {
        flops_report(&FusionConfig { variant, ..FusionConfig::default() }, 480, 640)
            .last()
            .unwrap()
            .macs
    };
    assert!(total(Variant::DenseAttention) >= total(Variant::Full));
    assert!(total(Variant::Full) >= total(Variant::FullSb));
}

#[test]
fn zero_gamma_drops_temporal_gradient() {
    let (ir, vis) = scene(3);
    let base = TrainingSet::new(ir.clone(), vis.clone()).unwrap();
    let mut all_valid = TrainingSet::new(ir, vis).unwrap();
    for m in all_valid.valid_prev.iter_mut().chain(all_valid.valid_next.iter_mut()) {
        *m = Tensor::ones(m.shape());
    }
    let model = FusionModel::<f64>::init(4, 4, 8);
    let win = Window { center: 1, x0: 8, y0: 8, size: 32 };
    let grads = |cfg: &FusionConfig, data: &TrainingSet| -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let l = window_loss(&mut tape, &vars, cfg, data, win).unwrap();
        let mut g = tape.backward(l).unwrap();
        vars.all().into_iter().map(|v| g.take(v).unwrap()).collect()
    };
    let zero = FusionConfig { gamma: 0.0, ..lean() };
    let (a, b) = (grads(&zero, &base), grads(&zero, &all_valid));
    assert!(a.iter().zip(&b).all(|(x, y)| x == y));
    let one = lean();
    let (c, d) = (grads(&one, &base), grads(&one, &all_valid));
    assert!(c.iter().zip(&d).any(|(x, y)| x != y));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (ir, vis) = scene(10);
    let data = TrainingSet::new(ir, vis).unwrap();
    let cfg = FusionConfig { iters: 300, ..lean() };
    let (m1, l1) = train(&cfg, &data, |_, _| {}).unwrap();
    let (m2, l2) = train(&cfg, &data, |_, _| {}).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    assert!(l1.iter().all(|l| l.is_finite()));
    let ma = moving_average(&l1, 50);
    assert!(ma.last().unwrap() < &l1[0], "{} vs {}", ma.last().unwrap(), l1[0]);
}

#[test]
fn training_needs_three_frames() {
    let (ir, vis) = scene(2);
    assert!(TrainingSet::new(ir, vis).is_err());
}
