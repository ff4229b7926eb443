mod common;

use common::rng;
use gmfuse_core::pillar::eigen::symmetric_eigenvalues;
use gmfuse_core::pillar::features::{covariance, intensity_stats, pillar_features, pooled_features, shape_descriptors};
use gmfuse_core::pillar::{assign, pillarize, GridConfig, LidarPoint, FEATURES};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn pt(x: f64, y: f64, z: f64, r: f64, ring: u32) -> LidarPoint {
    LidarPoint::new(x, y, z, r, ring).unwrap()
}

fn random_pillar(n: usize, g: &mut ChaCha8Rng) -> Vec<LidarPoint> {
    (0..n)
        .map(|_| {
            pt(
                g.random_range(10.0..10.25),
                g.random_range(-3.0..-2.75),
                g.random_range(-1.0..2.0),
                g.random_range(0.0..255.0),
                g.random_range(0..64),
            )
        })
        .collect()
}

/// Closed-form roots of the characteristic cubic of a symmetric 3×3 matrix.
fn cubic_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    let mut b = a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

#[test]
fn half_open_bounds() {
    let cfg = GridConfig::default();
    assert_eq!(cfg.cell_of(0.0, -16.0), Some((0, 0)));
    assert_eq!(cfg.cell_of(32.0, 0.0), None);
    assert_eq!(cfg.cell_of(1.0, 16.0), None);
    let below = f64::from_bits(32f64.to_bits() - 1);
    assert_eq!(cfg.cell_of(below, 0.0).map(|c| c.0), Some(127));
}

#[test]
fn default_grid_is_128_square() {
    let cfg = GridConfig::default();
    assert_eq!((cfg.height(), cfg.width()), (128, 128));
}

#[test]
fn inexact_extent_rejected() {
    let err = GridConfig::new(3.0, 0.0, 1.1, 0.0, 1.0).unwrap_err();
    assert!(err.to_string().contains("x_max"), "{err}");
    assert!(GridConfig::new(0.0, 0.0, 1.0, 0.0, 1.0).unwrap_err().to_string().contains("rho"));
}

#[test]
fn counting_oracle() {
    let cfg = GridConfig::default();
    let mut g = rng(11);
    let pts: Vec<_> = (0..100_000)
        .map(|_| pt(g.random_range(0.0..32.0), g.random_range(-16.0..16.0), 0.0, 1.0, 0))
        .collect();
    let grid = pillarize(&pts, &cfg).unwrap();
    assert_eq!(grid.dropped, 0);
    assert_eq!(grid.total_points(), 100_000);

    let mut counts = vec![0u32; cfg.cells()];
    for p in &pts {
        let r = ((p.x - 0.0) * 4.0).floor() as usize;
        let c = ((p.y + 16.0) * 4.0).floor() as usize;
        counts[r * 128 + c] += 1;
    }
    assert_eq!(grid.occupancy, counts);
}

#[test]
fn empty_cloud() {
    let grid = pillarize(&[], &GridConfig::default()).unwrap();
    assert!(grid.features.data().iter().all(|&v| v == 0.0));
    assert!(grid.occupancy.iter().all(|&m| m == 0));
}

#[test]
fn empty_pillars_are_zero() {
    let cfg = GridConfig::new(1.0, 0.0, 4.0, 0.0, 4.0).unwrap();
    let grid = pillarize(&[pt(1.5, 2.5, 1.0, 3.0, 7)], &cfg).unwrap();
    assert_eq!(grid.occupied(), 1);
    for r in 0..4 {
        for c in 0..4 {
            let f = grid.feature(r, c);
            assert_eq!(f.len(), FEATURES);
            if (r, c) == (1, 2) {
                assert_eq!(&f[..5], &[1.5, 2.5, 1.0, 3.0, 7.0]);
            } else {
                assert!(f.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn pooled_matches_loop_max() {
    let mut g = rng(3);
    let pts = random_pillar(50, &mut g);
    let center = (10.125, -2.875);
    let got = pooled_features(&pts, center);
    let zm = pts.iter().map(|p| p.z).sum::<f64>() / 50.0;
    for (k, &v) in got.iter().enumerate() {
        let mut want = f64::NEG_INFINITY;
        for p in &pts {
            let x = [p.x, p.y, p.z, p.r, p.ring as f64, p.x - center.0, p.y - center.1, p.z - zm][k];
            if x > want {
                want = x;
            }
        }
        if k == 7 {
            assert!((v - want).abs() <= 1e-15 * want.abs().max(1.0), "{v} vs {want}");
        } else {
            assert_eq!(v, want, "channel {k}");
        }
    }
}

#[test]
fn two_heights() {
    let pts = [pt(0.1, 0.1, 1.0, 0.0, 0), pt(0.1, 0.1, 3.0, 2.0, 0)];
    assert_eq!(pooled_features(&pts, (0.0, 0.0))[7], 1.0);
    assert_eq!(intensity_stats(&pts), (1.0, 1.0));
}

#[test]
fn constant_intensity() {
    let pts: Vec<_> = (0..7).map(|i| pt(i as f64, 0.0, 0.0, 4.5, 0)).collect();
    assert_eq!(intensity_stats(&pts), (4.5, 0.0));
}

#[test]
fn intensity_matches_two_pass() {
    let pts = random_pillar(100, &mut rng(4));
    let (mu, var) = intensity_stats(&pts);
    let mean = pts.iter().map(|p| p.r).sum::<f64>() / 100.0;
    let v = pts.iter().map(|p| (p.r - mean).powi(2)).sum::<f64>() / 100.0;
    assert!((mu - mean).abs() <= 1e-12 * mean.abs());
    assert!((var - v).abs() <= 1e-12 * v.abs());
}

#[test]
fn collinear_points() {
    let pts: Vec<_> = (0..10).map(|i| pt(0.01 * i as f64, 0.02 * i as f64, -0.03 * i as f64, 1.0, 0)).collect();
    let [lin, pla, sph, ani] = shape_descriptors(&pts);
    assert!(lin >= 0.999);
    assert!(pla.abs() < 1e-9 && sph.abs() < 1e-9);
    assert!((ani - 1.0).abs() < 1e-9);
}

#[test]
fn degenerate_pillars_have_no_shape() {
    let two = [pt(0.0, 0.0, 0.0, 1.0, 0), pt(1.0, 1.0, 1.0, 1.0, 0)];
    assert_eq!(shape_descriptors(&two), [0.0; 4]);
    let same = [pt(0.5, 0.5, 0.5, 1.0, 0); 5];
    assert_eq!(shape_descriptors(&same), [0.0; 4]);
}

#[test]
fn ball_is_spherical() {
    let mut g = rng(5);
    let mut pts = Vec::new();
    while pts.len() < 10_000 {
        let v: [f64; 3] = [g.random_range(-1.0..1.0), g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)];
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            pts.push(pt(v[0], v[1], v[2], 0.0, 0));
        }
    }
    let [l1, l2, l3] = cubic_eigenvalues(covariance(&pts));
    let [_, _, sph, ani] = shape_descriptors(&pts);
    assert!((sph - l3 / l1).abs() < 0.05);
    assert!((ani - (l1 - l3) / l1).abs() < 0.05);
    // uniform ball of radius 1: every eigenvalue is 1/5
    for l in [l1, l2, l3] {
        assert!((l - 0.2).abs() < 0.05 * 0.2, "{l}");
    }
    assert!(sph > 0.9 && ani < 0.1, "{sph} {ani}");
}

#[test]
fn eigenvalues_match_cubic_roots() {
    let mut g = rng(6);
    for _ in 0..200 {
        let pts = random_pillar(20, &mut g);
        let cov = covariance(&pts);
        let got = symmetric_eigenvalues(cov);
        let want = cubic_eigenvalues(cov);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() <= 1e-8 * want[0].max(1.0), "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn simplex_on_many_pillars() {
    let cfg = GridConfig::default();
    let mut g = rng(7);
    let pts: Vec<_> = (0..20_000)
        .map(|_| {
            pt(
                g.random_range(0.0..32.0),
                g.random_range(-16.0..16.0),
                g.random_range(-2.0..3.0),
                g.random_range(0.0..1.0),
                g.random_range(0..32),
            )
        })
        .collect();
    let grid = pillarize(&pts, &cfg).unwrap();
    let mut checked = 0;
    for cell in 0..cfg.cells() {
        if grid.occupancy[cell] < 3 {
            continue;
        }
        let f = grid.feature(cell / 128, cell % 128);
        let s = f[10] + f[11] + f[12];
        if f[10..14].iter().all(|&v| v == 0.0) {
            continue;
        }
        assert!((s - 1.0).abs() <= 1e-10, "{s}");
        assert!(f[10..14].iter().all(|&v| (0.0..=1.0).contains(&v)));
        checked += 1;
    }
    assert!(checked >= 1000, "{checked}");
}

fn point_strategy() -> impl Strategy<Value = (f64, f64, f64, f64, u32)> {
    (0.0..4.0f64, 0.0..4.0f64, -2.0..2.0f64, 0.0..100.0f64, 0u32..256)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariance(raw in prop::collection::vec(point_strategy(), 0..200), seed in any::<u64>()) {
        let cfg = GridConfig::new(1.0, 0.0, 4.0, 0.0, 4.0).unwrap();
        let pts: Vec<_> = raw.iter().map(|&(x, y, z, r, ring)| pt(x, y, z, r, ring)).collect();
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = pillarize(&pts, &cfg).unwrap();
        let b = pillarize(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.features.data(), b.features.data());
        prop_assert_eq!(a.occupancy, b.occupancy);
    }

    #[test]
    fn conservation(raw in prop::collection::vec((-2.0..6.0f64, -2.0..6.0f64), 0..300)) {
        let cfg = GridConfig::new(2.0, 0.0, 4.0, 0.0, 4.0).unwrap();
        let pts: Vec<_> = raw.iter().map(|&(x, y)| pt(x, y, 0.0, 0.0, 0)).collect();
        let grid = pillarize(&pts, &cfg).unwrap();
        prop_assert_eq!(grid.total_points() + grid.dropped, pts.len());
        let a = assign(&pts, &cfg);
        let mut seen: Vec<usize> = a.cells.concat();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len() + a.dropped, pts.len());
    }

    #[test]
    fn descriptor_simplex(raw in prop::collection::vec(point_strategy(), 3..60)) {
        let pts: Vec<_> = raw.iter().map(|&(x, y, z, r, ring)| pt(x / 4.0, y / 4.0, z, r, ring)).collect();
        let d = shape_descriptors(&pts);
        if d != [0.0; 4] {
            prop_assert!((d[0] + d[1] + d[2] - 1.0).abs() <= 1e-10);
            prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn translation_invariance(
        raw in prop::collection::vec(point_strategy(), 3..60),
        off in (-10.0..10.0f64, -10.0..10.0f64, -5.0..5.0f64),
    ) {
        let mut pts: Vec<_> = raw.iter().map(|&(x, y, z, r, ring)| pt(x / 16.0, y / 16.0, z, r, ring)).collect();
        let mut moved: Vec<_> = pts.iter().map(|p| pt(p.x + off.0, p.y + off.1, p.z + off.2, p.r, p.ring)).collect();
        let a = pillar_features(&mut pts, (0.125, 0.125));
        let b = pillar_features(&mut moved, (0.125 + off.0, 0.125 + off.1));
        for k in 9..14 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-10 * a[k].abs().max(1.0), "channel {}: {} vs {}", k, a[k], b[k]);
        }
    }
}
