mod common;

use common::{probe, randomize, rng, uniform};
use gmfuse_core::autograd::{bilinear_sample, Var};
use gmfuse_core::bev::{encode, PeConfig, PolarGrid};
use gmfuse_core::block::BlockConfig;
use gmfuse_core::fusion::attention::MAX_TOKENS;
use gmfuse_core::fusion::hca::reference_points;
use gmfuse_core::fusion::{ChannelAlign, GatedCrossAttention, GmFuseNet, GmFusion, Hca, NetworkConfig};
use gmfuse_core::gradcheck::{check_param, Entries, FD_STEP};
use gmfuse_core::nn::{Init, Linear};
use gmfuse_core::pillar::{GridConfig, FEATURES};
use gmfuse_core::{Error, Tensor};
use proptest::prelude::*;

fn grid(h: usize, w: usize) -> GridConfig {
    GridConfig::new(1.0, 0.0, h as f64, -(w as f64) / 2.0, w as f64 / 2.0).unwrap()
}

fn eye(c: usize) -> Linear {
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        data[i * c + i] = 1.0;
    }
    Linear {
        weight: Var::param(Tensor::new([c, c], data).unwrap()),
        bias: None,
    }
}

/// Four-neighbour weighted sum with zero outside the map.
fn bilinear_oracle(f: &Tensor, u: f64, v: f64) -> Vec<f64> {
    let [h, w, c] = [f.shape()[0], f.shape()[1], f.shape()[2]];
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let mut out = vec![0.0; c];
    for (di, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
        for (dj, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
            let (i, j) = (u0 + di, v0 + dj);
            if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
                continue;
            }
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wu * wv * f.at(&[i as usize, j as usize, ch]);
            }
        }
    }
    out
}

#[test]
fn bilinear_examples_and_oracle() {
    let f = uniform(&[5, 6, 3], -1.0, 1.0, &mut rng(1));
    let fv = Var::constant(f.clone());
    let at = |u: f64, v: f64| {
        bilinear_sample(&fv, &Var::constant(Tensor::new([1, 2], vec![u, v]).unwrap())).unwrap().value().clone().into_vec()
    };
    assert_eq!(at(2.0, 3.0), f.data()[(2 * 6 + 3) * 3..(2 * 6 + 4) * 3]);
    let mid = at(2.0, 3.5);
    for (ch, m) in mid.iter().enumerate() {
        let want = 0.5 * (f.at(&[2, 3, ch]) + f.at(&[2, 4, ch]));
        assert!((m - want).abs() < 1e-15);
    }
    assert_eq!(at(-3.0, 2.0), vec![0.0; 3]);
    assert_eq!(at(2.0, 9.0), vec![0.0; 3]);

    let mut g = rng(2);
    let pts = uniform(&[200, 2], -1.5, 7.0, &mut g);
    let got = bilinear_sample(&fv, &Var::constant(pts.clone())).unwrap();
    for k in 0..200 {
        let want = bilinear_oracle(&f, pts.data()[2 * k], pts.data()[2 * k + 1]);
        for (ch, w) in want.iter().enumerate() {
            assert!((got.value().data()[k * 3 + ch] - w).abs() <= 1e-12);
        }
    }
}

#[test]
fn align_open_gates_and_zero_input() {
    let mut align = ChannelAlign::<f64>::new(&mut Init::new(1), 4);
    let zero = Var::constant(Tensor::zeros([4, 4, 4]));
    assert!(align.forward(&zero, &zero).unwrap().value().data().iter().all(|&v| v == 0.0));

    align.excite.weight = Var::param(Tensor::zeros([2, 8]));
    align.excite.bias = Some(Var::param(Tensor::full([8], 60.0)));
    let mut g = rng(3);
    let img = Var::constant(uniform(&[4, 4, 4], -1.0, 1.0, &mut g));
    let bev = Var::constant(uniform(&[4, 4, 4], -1.0, 1.0, &mut g));
    let got = align.forward(&img, &bev).unwrap();
    let cat = Var::concat_last(&[img, bev]).unwrap().reshape([16, 8]).unwrap();
    let want = align.merge.forward(&cat).unwrap();
    assert!(got.value().reshape([16, 4]).unwrap().max_abs_diff(want.value()) < 1e-15);
}

#[test]
fn cross_attention_matches_double_loop() {
    let c = 8;
    let mut attn = GatedCrossAttention::<f64>::new(&mut Init::new(2), c);
    attn.gate_logits = Var::param(uniform(&[c], -2.0, 2.0, &mut rng(4)));
    let mut g = rng(5);
    let q = uniform(&[8, 8, c], -1.0, 1.0, &mut g);
    let kv = uniform(&[8, 8, c], -1.0, 1.0, &mut g);
    let got = attn.forward(&Var::constant(q.clone()), &Var::constant(kv.clone())).unwrap();

    let (n, m) = (64, 64);
    let mat = |x: &[f64], w: &Tensor, i: usize, o: usize| (0..c).map(|k| x[i * c + k] * w.at(&[k, o])).sum::<f64>();
    let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
        let rows = x.len() / c;
        (0..rows * c).map(|k| mat(x, w, k / c, k % c)).collect()
    };
    let qq = proj(q.data(), attn.wq.weight.value());
    let kk = proj(kv.data(), attn.wk.weight.value());
    let vv = proj(kv.data(), attn.wv.weight.value());
    for i in 0..n {
        let scores: Vec<f64> = (0..m)
            .map(|j| (0..c).map(|k| qq[i * c + k] * kk[j * c + k]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        assert!((e.iter().map(|v| v / z).sum::<f64>() - 1.0).abs() <= 1e-6);
        let mut mixed = vec![0.0; c];
        for j in 0..m {
            for k in 0..c {
                mixed[k] += e[j] / z * vv[j * c + k];
            }
        }
        for o in 0..c {
            let a: f64 = (0..c).map(|k| mixed[k] * attn.wo.weight.value().at(&[k, o])).sum();
            let gate = 1.0 / (1.0 + (-attn.gate_logits.value().data()[o]).exp());
            let want = gate * a + (1.0 - gate) * q.data()[i * c + o];
            assert!((got.value().data()[i * c + o] - want).abs() <= 1e-10);
        }
    }
    let w = attn.weights(&Var::constant(q), &Var::constant(kv)).unwrap();
    for row in w.value().data().chunks(m) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn self_attention_rows_are_convex() {
    let c = 4;
    let mut attn = GatedCrossAttention::<f64>::new(&mut Init::new(3), c);
    for l in [&mut attn.wq, &mut attn.wk, &mut attn.wv, &mut attn.wo] {
        *l = eye(c);
    }
    let x = uniform(&[6, 6, c], -2.0, 2.0, &mut rng(6));
    let xv = Var::constant(x.clone());
    let y = attn.attend(&xv, &xv).unwrap();
    for k in 0..c {
        let col: Vec<f64> = x.data().iter().skip(k).step_by(c).copied().collect();
        let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for i in 0..36 {
            let v = y.value().data()[i * c + k];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn token_overflow_is_an_error() {
    let attn = GatedCrossAttention::<f64>::new(&mut Init::new(0), 1);
    let big = Var::constant(Tensor::zeros([65, 64, 1]));
    let small = Var::constant(Tensor::zeros([4, 4, 1]));
    let err = attn.forward(&big, &small).unwrap_err();
    assert!(matches!(err, Error::TokenOverflow { tokens: 4160, limit: MAX_TOKENS }), "{err}");
    assert!(err.to_string().contains("downsampl"), "{err}");
    assert!(attn.forward(&small, &big).is_err());
}

#[test]
fn hca_zero_offsets_is_reference_sampling() {
    let (c, heads, points) = (8, 2, 4);
    let mut hca = Hca::<f64>::new(&mut Init::new(4), c, 2, heads, points).unwrap();
    for level in &mut hca.levels {
        level.offset = Linear::zeros(c, heads * points * 2, true);
        level.attn = Linear::zeros(c, heads * points, true);
    }
    let mut g = rng(7);
    let q = uniform(&[8, 8, c], -1.0, 1.0, &mut g);
    let pyramid = [uniform(&[8, 8, c], -1.0, 1.0, &mut g), uniform(&[4, 4, c], -1.0, 1.0, &mut g)];
    let pv: Vec<Var> = pyramid.iter().cloned().map(Var::constant).collect();
    let got = hca.forward(&Var::constant(q), &pv).unwrap();
    assert_eq!(got.shape(), &[8, 8, c]);

    let mut summed = vec![0.0; 64 * c];
    for (s, f) in pyramid.iter().enumerate() {
        let [hs, ws] = [f.shape()[0], f.shape()[1]];
        let value = hca.levels[s].value.forward(&Var::constant(f.reshape([hs * ws, c]).unwrap())).unwrap();
        let value = value.value().reshape([hs, ws, c]).unwrap();
        let refs = reference_points(8, 8, hs, ws);
        for cell in 0..64 {
            let v = bilinear_oracle(&value, refs[2 * cell], refs[2 * cell + 1]);
            for ch in 0..c {
                summed[cell * c + ch] += v[ch];
            }
        }
    }
    let want = hca.out.forward(&Var::constant(Tensor::new([64, c], summed).unwrap())).unwrap();
    assert!(got.value().reshape([64, c]).unwrap().max_abs_diff(want.value()) < 1e-12);
}

#[test]
fn reference_points_center_aligned() {
    assert_eq!(reference_points(2, 2, 2, 2), vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    assert_eq!(reference_points(4, 4, 2, 2)[..2], [-0.25, -0.25]);
}

fn toy_fusion(h: usize, c: usize, seed: u64) -> (GmFusion, PolarGrid) {
    let polar = PolarGrid::from_default_ego(&grid(h, h));
    let f = GmFusion::new(&mut Init::new(seed), BlockConfig::new(c), &polar, 4).unwrap();
    (f, polar)
}

fn pyramid(c: usize, seed: u64) -> Vec<Var> {
    let mut g = rng(seed);
    [64, 32, 16, 8].iter().map(|&s| Var::constant(uniform(&[s, s, c], -1.0, 1.0, &mut g))).collect()
}

#[test]
fn shapes_across_pyramid_levels() {
    let c = 8;
    let pyr = pyramid(c, 8);
    for &s in &[64usize, 32, 16, 8] {
        let (f, polar) = toy_fusion(s, c, s as u64);
        let pe = Var::constant(encode(&polar, &PeConfig::new(c, 10_000.0).unwrap()).unwrap().enc);
        let mut g = rng(9);
        let img = Var::constant(uniform(&[s, s, c], -1.0, 1.0, &mut g));
        let bev = Var::constant(uniform(&[s, s, c], -1.0, 1.0, &mut g));
        let t = f.trace(&img, &bev, &pyr, &pe).unwrap();
        for v in [&t.aligned, &t.cross, &t.hca, &t.output] {
            assert_eq!(v.shape(), &[s, s, c]);
        }
    }
}

#[test]
fn zero_image_leaves_only_bev_stream() {
    let c = 8;
    let (f, polar) = toy_fusion(16, c, 10);
    let pe = Var::constant(encode(&polar, &PeConfig::new(c, 10_000.0).unwrap()).unwrap().enc);
    let zeros: Vec<Var> = [64, 32, 16, 8].iter().map(|&s| Var::constant(Tensor::zeros([s, s, c]))).collect();
    let img = Var::constant(Tensor::zeros([16, 16, c]));
    let bev = Var::constant(uniform(&[16, 16, c], -1.0, 1.0, &mut rng(11)));
    let t = f.trace(&img, &bev, &zeros, &pe).unwrap();
    assert!(t.hca.value().data().iter().all(|&v| v == 0.0));

    let aligned = f.align.forward(&img, &bev).unwrap();
    let cross = f.cross.forward(&bev, &aligned).unwrap();
    let want = f.block_cross.forward(&cross, &pe).unwrap();
    assert_eq!(t.output.value(), want.value());

    let other = Var::constant(uniform(&[16, 16, c], -1.0, 1.0, &mut rng(12)));
    let moved = f.trace(&img, &other, &zeros, &pe).unwrap();
    assert_ne!(moved.output.value(), t.output.value());
}

#[test]
fn end_to_end_gradients() {
    let c = 8;
    let polar = PolarGrid::from_default_ego(&grid(8, 8));
    let mut f = GmFusion::new(&mut Init::new(13), BlockConfig::new(c), &polar, 2).unwrap();
    randomize(&mut f, 14, 0.5);
    // keep sample points clear of the bilinear kinks at integer coordinates
    for (level, extent) in f.hca.levels.iter_mut().zip([8.0f64, 4.0]) {
        let k = level.offset.weight.value().shape()[1];
        let w = level.offset.weight.value().map("scale", |v| v * 1e-3).unwrap();
        level.offset.weight = Var::param(w);
        level.offset.bias = Some(Var::param(Tensor::full([k], (0.4 / extent).atanh())));
    }
    let pe = Var::constant(encode(&polar, &PeConfig::new(c, 10_000.0).unwrap()).unwrap().enc);
    let mut g = rng(15);
    let img = Var::constant(uniform(&[8, 8, c], -1.0, 1.0, &mut g));
    let bev = Var::constant(uniform(&[8, 8, c], -1.0, 1.0, &mut g));
    let pyr = vec![
        Var::constant(uniform(&[8, 8, c], -1.0, 1.0, &mut g)),
        Var::constant(uniform(&[4, 4, c], -1.0, 1.0, &mut g)),
    ];
    let names = [
        "align.excite.bias",
        "align.merge.weight",
        "cross.gate_logits",
        "cross.wq.weight",
        "block_aligned.ssm_raster.lambda_raw",
        "block_bev.fuse.out.bias",
        "block_cross.ssm_zigzag.transition.logits",
        "hca.level0.offset.bias",
        "hca.level1.attn.weight",
        "hca.out.weight",
    ];
    for name in names {
        let r = check_param(&mut f, name, |m| probe(&m.forward(&img, &bev, &pyr, &pe)?, 16), Entries::AtMost(12), FD_STEP)
            .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn network_forward_shape_and_determinism() {
    let cfg = NetworkConfig::new(GridConfig::new(1.0, 0.0, 64.0, -32.0, 32.0).unwrap(), 4);
    let net = GmFuseNet::<f64>::new(3, cfg).unwrap();
    let pillars = Var::constant(uniform(&[64, 64, FEATURES], 0.0, 1.0, &mut rng(17)));
    let image = Var::constant(GmFuseNet::<f64>::synthetic_image(3, 64, 64));
    let a = net.forward(&pillars, &image).unwrap();
    assert_eq!(a.shape(), &[64, 64, 4]);
    let b = GmFuseNet::<f64>::new(3, cfg).unwrap().forward(&pillars, &image).unwrap();
    assert_eq!(a.value(), b.value());
    let bad = NetworkConfig::new(GridConfig::new(1.0, 0.0, 48.0, 0.0, 64.0).unwrap(), 4);
    assert!(GmFuseNet::<f64>::new(0, bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn align_scales_in_unit_interval(seed in any::<u64>(), bound in 0.1..20.0f64) {
        let align = ChannelAlign::<f64>::new(&mut Init::new(seed), 4);
        let mut g = rng(seed);
        let cat = Var::constant(uniform(&[4, 4, 8], -bound, bound, &mut g));
        let s = align.scales(&cat).unwrap();
        prop_assert!(s.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn hca_weights_are_simplices(seed in any::<u64>()) {
        let mut hca = Hca::<f64>::new(&mut Init::new(seed), 4, 2, 2, 4).unwrap();
        randomize(&mut hca, seed ^ 3, 2.0);
        let q = Var::constant(uniform(&[16, 4], -3.0, 3.0, &mut rng(seed)));
        for level in 0..2 {
            let w = hca.sampling_weights(&q, level).unwrap();
            for row in w.value().data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            let off = hca.sampling_offsets(&q, level, (8, 4)).unwrap();
            for pair in off.value().data().chunks(2) {
                prop_assert!(pair[0].abs() <= 8.0 && pair[1].abs() <= 4.0);
            }
        }
    }
}
