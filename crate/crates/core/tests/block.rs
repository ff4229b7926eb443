mod common;

use common::{randomize, rng, uniform};
use gmfuse_core::autograd::Var;
use gmfuse_core::bev::{encode, PeConfig, PolarGrid};
use gmfuse_core::block::{adaptive_fuse, dw_separable, gated_pe, multi_scale, BevSsmBlock, BlockConfig, FuseMlp};
use gmfuse_core::nn::{Init, Linear, Params};
use gmfuse_core::pillar::GridConfig;
use gmfuse_core::Tensor;
use proptest::prelude::*;

fn polar(h: usize, w: usize) -> PolarGrid {
    let grid = GridConfig::new(1.0, 0.0, h as f64, -(w as f64) / 2.0, w as f64 / 2.0).unwrap();
    PolarGrid::from_default_ego(&grid)
}

fn identity_pointwise(c: usize) -> Linear {
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    Linear {
        weight: Var::param(Tensor::new([c, c], eye).unwrap()),
        bias: Some(Var::param(Tensor::zeros([c]))),
    }
}

/// Direct zero-padded 3×3 depthwise convolution followed by `x W + b`.
fn naive_dw_separable(x: &Tensor, k: &Tensor, bias: &Tensor, pw: &Tensor, pw_bias: &Tensor) -> Vec<f64> {
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut mid = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = bias.data()[ch];
                for a in 0..3 {
                    for b in 0..3 {
                        let (si, sj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                            acc += x.at(&[si as usize, sj as usize, ch]) * k.at(&[ch, a, b]);
                        }
                    }
                }
                mid[(i * w + j) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for cell in 0..h * w {
        for o in 0..c {
            let mut acc = pw_bias.data()[o];
            for ch in 0..c {
                acc += mid[cell * c + ch] * pw.at(&[ch, o]);
            }
            out[cell * c + o] = acc;
        }
    }
    out
}

#[test]
fn gate_extremes() {
    let mut g = rng(1);
    let x = Var::constant(uniform(&[4, 4, 3], -1.0, 1.0, &mut g));
    let pe = Var::constant(uniform(&[4, 4, 3], -1.0, 1.0, &mut g));
    let closed = gated_pe(&x, &pe, &Var::constant(Tensor::full([3], -800.0))).unwrap();
    assert_eq!(closed.value(), x.value());
    let open = gated_pe(&x, &pe, &Var::constant(Tensor::full([3], 800.0))).unwrap();
    assert_eq!(open.value(), x.add(&pe).unwrap().value());
    assert!(gated_pe(&x, &Var::constant(Tensor::zeros([4, 4, 2])), &Var::constant(Tensor::zeros([3]))).is_err());
}

#[test]
fn dw_separable_matches_naive() {
    let mut g = rng(2);
    let x = uniform(&[8, 8, 4], -1.0, 1.0, &mut g);
    let k = uniform(&[4, 3, 3], -1.0, 1.0, &mut g);
    let b = uniform(&[4], -1.0, 1.0, &mut g);
    let pw = uniform(&[4, 4], -1.0, 1.0, &mut g);
    let pb = uniform(&[4], -1.0, 1.0, &mut g);
    let lin = Linear {
        weight: Var::param(pw.clone()),
        bias: Some(Var::param(pb.clone())),
    };
    let got = dw_separable(&Var::constant(x.clone()), &Var::constant(k.clone()), &Var::constant(b.clone()), &lin).unwrap();
    let want = naive_dw_separable(&x, &k, &b, &pw, &pb);
    for (a, w) in got.value().data().iter().zip(&want) {
        assert!((a - w).abs() <= 1e-10);
    }
}

#[test]
fn identity_kernels() {
    let c = 5;
    let x = uniform(&[6, 7, c], -1.0, 1.0, &mut rng(3));
    let mut k = vec![0.0; c * 9];
    for ch in 0..c {
        k[ch * 9 + 4] = 1.0;
    }
    let k = Var::constant(Tensor::new([c, 3, 3], k).unwrap());
    let y = dw_separable(&Var::constant(x.clone()), &k, &Var::constant(Tensor::zeros([c])), &identity_pointwise(c)).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn averaging_kernel_keeps_constant_interior() {
    let c = 2;
    let x = Tensor::full([6, 6, c], 2.5);
    let k = Var::constant(Tensor::full([c, 3, 3], 1.0 / 9.0));
    let y = dw_separable(&Var::constant(x), &k, &Var::constant(Tensor::zeros([c])), &identity_pointwise(c)).unwrap();
    for i in 1..5 {
        for j in 1..5 {
            for ch in 0..c {
                assert!((y.value().at(&[i, j, ch]) - 2.5).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn multi_scale_constant_and_impulse() {
    let logits = Var::constant(uniform(&[3, 3], -2.0, 2.0, &mut rng(4)));
    let y = multi_scale(&Var::constant(Tensor::full([8, 8, 3], -1.5)), &logits).unwrap();
    assert!(y.value().data().iter().all(|v| (v + 1.5).abs() < 1e-14));

    for (pi, pj) in [(0, 0), (5, 2), (7, 7), (3, 4)] {
        let mut data = vec![0.0; 16 * 16 * 3];
        for ch in 0..3 {
            data[(pi * 16 + pj) * 3 + ch] = 1.0;
        }
        let x = Var::constant(Tensor::new([16, 16, 3], data).unwrap());
        let y = multi_scale(&x, &logits).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let inside = i / 4 == pi / 4 && j / 4 == pj / 4;
                for ch in 0..3 {
                    let v = y.value().at(&[i, j, ch]);
                    if inside {
                        assert!(v > 0.0);
                    } else {
                        assert_eq!(v, 0.0, "({i},{j}) for impulse at ({pi},{pj})");
                    }
                }
            }
        }
    }
    assert!(multi_scale(&Var::constant(Tensor::<f64>::zeros([6, 8, 1])), &Var::constant(Tensor::zeros([1, 3]))).is_err());
}

#[test]
fn fresh_fusion_is_uniform_mean() {
    let mut g = rng(5);
    let branches: Vec<Var> = (0..4).map(|_| Var::constant(uniform(&[4, 4, 8], -1.0, 1.0, &mut g))).collect();
    let mlp = FuseMlp::new(&mut Init::new(0), 8);
    let (out, w) = adaptive_fuse(&branches, &mlp).unwrap();
    assert!(w.value().data().iter().all(|&v| v == 0.25));
    for (i, &v) in out.value().data().iter().enumerate() {
        let mean = branches.iter().map(|b| b.value().data()[i]).sum::<f64>() / 4.0;
        assert!((v - mean).abs() < 1e-15);
    }
}

#[test]
fn fusion_wrong_branch_count() {
    let b = Var::constant(Tensor::<f64>::zeros([4, 4, 4]));
    assert!(adaptive_fuse(&[b.clone(), b.clone(), b], &FuseMlp::new(&mut Init::new(0), 4)).is_err());
}

#[test]
fn branch_isolation() {
    let mut g = rng(6);
    let mut mlp = FuseMlp::new(&mut Init::new(1), 8);
    randomize(&mut mlp, 2, 1.0);
    let mut branches: Vec<Var> = (0..4).map(|_| Var::constant(uniform(&[4, 4, 8], -1.0, 1.0, &mut g))).collect();
    branches[2] = Var::constant(Tensor::zeros([4, 4, 8]));
    let (out, w) = adaptive_fuse(&branches, &mlp).unwrap();

    let n = 16.0;
    let pooled: Vec<f64> = (0..8)
        .map(|ch| (0..16).map(|cell| branches.iter().map(|b| b.value().data()[cell * 8 + ch]).sum::<f64>()).sum::<f64>() / n)
        .collect();
    let hidden = mlp.hidden.forward(&Var::constant(Tensor::new([1, 8], pooled).unwrap())).unwrap().silu().unwrap();
    let logits = mlp.out.forward(&hidden).unwrap().value().clone().into_vec();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let want_w: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
    for (a, b) in w.value().data().iter().zip(&want_w) {
        assert!((a - b).abs() < 1e-12);
    }
    for (i, &v) in out.value().data().iter().enumerate() {
        let want: f64 = [0, 1, 3].iter().map(|&k| want_w[k] * branches[k].value().data()[i]).sum();
        assert!((v - want).abs() < 1e-12);
    }
}

fn small_block(h: usize, w: usize, c: usize, seed: u64) -> BevSsmBlock {
    BevSsmBlock::new(&mut Init::new(seed), BlockConfig::new(c), &polar(h, w)).unwrap()
}

#[test]
fn block_shape() {
    let block = small_block(32, 32, 16, 1);
    let x = Var::constant(uniform(&[32, 32, 16], -1.0, 1.0, &mut rng(7)));
    let pe = Var::constant(encode(&polar(32, 32), &PeConfig::new(16, 10_000.0).unwrap()).unwrap().enc);
    let t = block.trace(&x, &pe).unwrap();
    assert_eq!(t.output.shape(), &[32, 32, 16]);
    assert_eq!(t.branches.len(), 4);
    let w = t.weights.value().data();
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6 && w.iter().all(|&v| v > 0.0));
}

#[test]
fn zero_input_zero_output() {
    let mut block = small_block(8, 12, 8, 2);
    for (name, v) in block.params_mut() {
        if name.ends_with("bias") {
            *v = Var::param(Tensor::zeros(v.shape().to_vec()));
        }
    }
    let zero = Var::constant(Tensor::zeros([8, 12, 8]));
    for residual in [true, false] {
        block.config.residual = residual;
        let y = block.forward(&zero, &zero).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn residual_toggle_adds_input() {
    let mut block = small_block(8, 8, 4, 3);
    let x = Var::constant(uniform(&[8, 8, 4], -1.0, 1.0, &mut rng(8)));
    let pe = Var::constant(Tensor::zeros([8, 8, 4]));
    let with = block.forward(&x, &pe).unwrap();
    block.config.residual = false;
    let without = block.forward(&x, &pe).unwrap();
    assert_eq!(with.value(), without.add(&x).unwrap().value());
}

#[test]
fn invalid_grids_rejected() {
    let cfg = BlockConfig::new(4);
    assert!(BevSsmBlock::<f64>::new(&mut Init::new(0), cfg, &polar(6, 8)).is_err());
    let block = small_block(8, 8, 4, 0);
    assert!(block.forward(&Var::constant(Tensor::zeros([8, 8, 3])), &Var::constant(Tensor::zeros([8, 8, 3]))).is_err());
}

#[test]
fn thread_count_independent() {
    let block = small_block(16, 16, 8, 4);
    let x = Var::constant(uniform(&[16, 16, 8], -1.0, 1.0, &mut rng(9)));
    let pe = Var::constant(uniform(&[16, 16, 8], -1.0, 1.0, &mut rng(10)));
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| block.forward(&x, &pe).unwrap().value().clone())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gated_pe_is_a_convex_blend(seed in any::<u64>(), bound in 0.1..50.0f64) {
        let mut g = rng(seed);
        let x = uniform(&[3, 4, 5], -bound, bound, &mut g);
        let pe = uniform(&[3, 4, 5], -1.0, 1.0, &mut g);
        let logits = uniform(&[5], -6.0, 6.0, &mut g);
        let y = gated_pe(&Var::constant(x.clone()), &Var::constant(pe.clone()), &Var::constant(logits)).unwrap();
        for ((&o, &a), &p) in y.value().data().iter().zip(x.data()).zip(pe.data()) {
            let (lo, hi) = if p < 0.0 { (a + p, a) } else { (a, a + p) };
            prop_assert!(o >= lo && o <= hi);
        }
    }

    #[test]
    fn fusion_convex_and_simplex(seed in any::<u64>(), scale in 0.1..4.0f64) {
        let mut mlp = FuseMlp::new(&mut Init::new(seed), 8);
        randomize(&mut mlp, seed ^ 5, scale);
        let b = Var::constant(uniform(&[4, 8, 8], -1.0, 1.0, &mut rng(seed)));
        let (out, w) = adaptive_fuse(&[b.clone(), b.clone(), b.clone(), b.clone()], &mlp).unwrap();
        let w = w.value().data();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        for (a, e) in out.value().data().iter().zip(b.value().data()) {
            prop_assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
}
