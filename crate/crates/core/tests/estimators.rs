use imoc_core::estimators::*;
use imoc_diffmath::{finite_difference_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn random_rows(rows: usize, d: usize, scale: f64, seed: u64) -> Rows {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..d).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

fn tensor(rows: &Rows) -> Tensor<f64> {
    Tensor::from_vec(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `tanh` via exponentials, independent of the library clamp.
fn oracle_clamp(s: f64, c1: f64, c2: f64) -> f64 {
    let u = s / (c1 * c2);
    let e = (-2.0 * u.abs()).exp();
    c2 * u.signum() * (1.0 - e) / (1.0 + e)
}

/// Scalar-loop contrastive loss over a precomputed similarity matrix.
fn oracle_nce_from_sims(s: &Rows, c1: f64, c2: f64) -> f64 {
    let n = s.len();
    let clamped: Rows = s
        .iter()
        .map(|r| r.iter().map(|&v| oracle_clamp(v, c1, c2)).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let j = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += clamped[i][k].exp();
            }
        }
        total += -(clamped[i][j].exp() / denom).ln();
    }
    total / n as f64
}

fn gram(z: &Rows) -> Rows {
    z.iter().map(|a| z.iter().map(|b| dot(a, b)).collect()).collect()
}

fn oracle_nce(z: &Rows, c1: f64, c2: f64) -> f64 {
    oracle_nce_from_sims(&gram(z), c1, c2)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn run(z: &Rows, f: impl Fn(&Graph<f64>, imoc_diffmath::Var) -> imoc_diffmath::Var) -> f64 {
    let g = Graph::new();
    let v = g.constant(tensor(z));
    let out = f(&g, v);
    g.item(out)
}

#[test]
fn clamp_examples() {
    let cfg = SimilarityConfig::new(1024.0, 20.0).unwrap();
    assert_eq!(clamp_similarity(0.0, cfg), 0.0);
    assert!((clamp_similarity(1e9, cfg) - 20.0).abs() < 1e-12);
    let want = oracle_clamp(1024.0, 1024.0, 20.0);
    assert!((want - 0.99917).abs() < 1e-5);
    assert!((clamp_similarity(1024.0, cfg) - want).abs() < 1e-15);
}

#[test]
fn similarity_config_rejects_non_positive() {
    assert!(SimilarityConfig::new(0.0, 20.0).is_err());
    assert!(SimilarityConfig::new(4.0, -1.0).is_err());
    assert_eq!(SimilarityConfig::for_latent(32).c1, 32.0);
    assert_eq!(SimilarityConfig::for_latent(32).c2, DEFAULT_C2);
}

#[test]
fn nce_uniform_similarities_give_ln3() {
    // Identical rows make every similarity equal.
    let z = vec![vec![0.3, -0.2]; 4];
    let cfg = SimilarityConfig::for_latent(2);
    let v = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
    assert!((v - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn nce_dominant_positive_is_near_zero() {
    // Orthogonal pair directions: positives saturate high, negatives at 0.
    let n = 8;
    let d = 2 * n;
    let mut z = vec![vec![0.0; d]; 2 * n];
    for k in 0..n {
        z[2 * k][k] = 100.0;
        z[2 * k + 1][k] = 100.0;
        z[2 * k][n + k] = 0.0;
    }
    let cfg = SimilarityConfig::new(1.0, 20.0).unwrap();
    let v = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
    let s_pos = oracle_clamp(1e4, 1.0, 20.0);
    let want = (1.0 + (2.0 * n as f64 - 2.0) * (-s_pos).exp()).ln();
    assert!((v - want).abs() < 1e-12);
    assert!(v < 1e-6);
}

#[test]
fn nce_random_8x4_matches_scalar_oracle() {
    let z = random_rows(8, 4, 1.5, 1);
    let cfg = SimilarityConfig::for_latent(4);
    let v = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
    assert!((v - oracle_nce(&z, 4.0, 20.0)).abs() < 1e-12);
}

#[test]
fn nce_rejects_batches_without_negatives() {
    let g = Graph::<f64>::new();
    let cfg = SimilarityConfig::for_latent(3);
    let z2 = g.constant(tensor(&random_rows(2, 3, 1.0, 2)));
    assert!(nce_pair_loss(&g, z2, cfg).is_err());
    let z5 = g.constant(tensor(&random_rows(5, 3, 1.0, 2)));
    assert!(nce_pair_loss(&g, z5, cfg).is_err());
}

fn map_tensor(maps: &[Rows]) -> Tensor<f64> {
    // maps[k] is d x n.
    let (d, n) = (maps[0].len(), maps[0][0].len());
    Tensor::from_vec(vec![maps.len(), d, n], maps.iter().flat_map(|m| m.concat()).collect()).unwrap()
}

fn random_maps(count: usize, d: usize, n: usize, seed: u64) -> Vec<Rows> {
    (0..count).map(|k| random_rows(d, n, 1.0, seed * 100 + k as u64)).collect()
}

/// Double sum over location pairs of the dot products, without the
/// spatial-sum shortcut.
fn map_sim(a: &Rows, b: &Rows) -> f64 {
    let (d, na, nb) = (a.len(), a[0].len(), b[0].len());
    let mut s = 0.0;
    for p in 0..na {
        for q in 0..nb {
            for c in 0..d {
                s += a[c][p] * b[c][q];
            }
        }
    }
    s
}

fn oracle_map_nce(phi1: &[Rows], phi2: &[Rows], c1: f64, c2: f64) -> f64 {
    let mut all = Vec::new();
    for k in 0..phi1.len() {
        all.push(phi1[k].clone());
        all.push(phi2[k].clone());
    }
    let s: Rows = all.iter().map(|a| all.iter().map(|b| map_sim(a, b)).collect()).collect();
    oracle_nce_from_sims(&s, c1, c2)
}

fn map_loss_value(phi1: &[Rows], phi2: &[Rows], cfg: SimilarityConfig) -> f64 {
    let g = Graph::new();
    let a = g.constant(map_tensor(phi1));
    let b = g.constant(map_tensor(phi2));
    let l = nce_map_loss(&g, a, b, cfg).unwrap();
    g.item(l)
}

#[test]
fn map_loss_random_matches_scalar_oracle() {
    let phi1 = random_maps(3, 4, 2, 1);
    let phi2 = random_maps(3, 4, 4, 2);
    let cfg = SimilarityConfig::for_latent(4);
    let v = map_loss_value(&phi1, &phi2, cfg);
    assert!((v - oracle_map_nce(&phi1, &phi2, 4.0, 20.0)).abs() < 1e-12);
}

#[test]
fn map_loss_single_location_reduces_to_pair_loss() {
    let z = random_rows(6, 5, 1.0, 9);
    let phi1: Vec<Rows> = (0..3).map(|k| z[2 * k].iter().map(|&v| vec![v]).collect()).collect();
    let phi2: Vec<Rows> = (0..3).map(|k| z[2 * k + 1].iter().map(|&v| vec![v]).collect()).collect();
    let cfg = SimilarityConfig::for_latent(5);
    let pair = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
    assert!((map_loss_value(&phi1, &phi2, cfg) - pair).abs() < 1e-14);
}

#[test]
fn map_loss_all_equal_maps_give_ln3() {
    let m = random_rows(3, 2, 1.0, 4);
    let cfg = SimilarityConfig::for_latent(3);
    let v = map_loss_value(&[m.clone(), m.clone()], &[m.clone(), m], cfg);
    assert!((v - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn map_loss_rejects_dimension_mismatch() {
    let g = Graph::new();
    let a = g.constant(map_tensor(&random_maps(2, 3, 2, 1)));
    let b = g.constant(map_tensor(&random_maps(2, 4, 2, 2)));
    assert!(nce_map_loss(&g, a, b, SimilarityConfig::for_latent(3)).is_err());
}

fn jsd_value(pos: &[f64], neg: &[f64]) -> f64 {
    let g = Graph::new();
    let p = g.constant(Tensor::from_vec(vec![pos.len()], pos.to_vec()).unwrap());
    let n = g.constant(Tensor::from_vec(vec![neg.len()], neg.to_vec()).unwrap());
    let l = jsd_mi_loss(&g, p, n).unwrap();
    g.item(l)
}

#[test]
fn jsd_examples() {
    assert!((jsd_value(&[0.0; 3], &[0.0; 5]) - 4f64.ln()).abs() < 1e-15);
    assert!(jsd_value(&[800.0], &[-800.0]) < 1e-300);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let pos: Vec<f64> = (0..7).map(|_| r.random_range(-10.0..10.0)).collect();
    let neg: Vec<f64> = (0..11).map(|_| r.random_range(-10.0..10.0)).collect();
    let want = pos.iter().map(|&v| softplus(-v)).sum::<f64>() / 7.0 + neg.iter().map(|&v| softplus(v)).sum::<f64>() / 11.0;
    assert!((jsd_value(&pos, &neg) - want).abs() < 1e-12);
}

#[test]
fn jsd_rejects_empty_scores() {
    let g = Graph::<f64>::new();
    let p = g.constant(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
    let empty = g.reshape(p, vec![1]).unwrap();
    // A zero-length tensor cannot be built, so emptiness is checked via a
    // batch too small to have negatives.
    let z = g.constant(tensor(&random_rows(2, 3, 1.0, 1)));
    assert!(jsd_pair_loss(&g, z, SimilarityConfig::for_latent(3)).is_err());
    assert!(jsd_mi_loss(&g, empty, p).is_ok());
}

#[test]
fn jsd_pair_loss_matches_oracle() {
    let z = random_rows(6, 3, 2.0, 12);
    let cfg = SimilarityConfig::for_latent(3);
    let s = gram(&z);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..6 {
        for j in 0..6 {
            let c = oracle_clamp(s[i][j], 3.0, 20.0);
            if j == (i ^ 1) {
                pos.push(c);
            } else if j != i {
                neg.push(c);
            }
        }
    }
    let want = pos.iter().map(|&v| softplus(-v)).sum::<f64>() / pos.len() as f64
        + neg.iter().map(|&v| softplus(v)).sum::<f64>() / neg.len() as f64;
    let v = run(&z, |g, v| jsd_pair_loss(g, v, cfg).unwrap());
    assert!((v - want).abs() < 1e-12);
}

fn entropy_value(z: &Rows, ent: EntropyConfig) -> f64 {
    run(z, |g, v| entropy_regularizer(g, v, ent).unwrap())
}

#[test]
fn entropy_examples() {
    let l1 = EntropyConfig::with_default_squaring(1);
    let l2 = EntropyConfig::with_default_squaring(2);
    assert_eq!(entropy_value(&vec![vec![0.0; 3]; 2], l1), 0.0);
    assert_eq!(entropy_value(&vec![vec![0.0; 3]; 2], l2), 0.0);
    assert_eq!(entropy_value(&vec![vec![3.0, 4.0]], l1), 7.0);
    assert_eq!(entropy_value(&vec![vec![3.0, 4.0]], l2), 25.0);
    let plain_l2 = EntropyConfig { p: 2, squared: false };
    assert!((entropy_value(&vec![vec![3.0, 4.0]], plain_l2) - 5.0).abs() < 1e-15);
    let squared_l1 = EntropyConfig { p: 1, squared: true };
    assert_eq!(entropy_value(&vec![vec![3.0, -4.0]], squared_l1), 49.0);
}

#[test]
fn entropy_random_matches_scalar_oracle() {
    let z = random_rows(7, 5, 2.0, 3);
    let l1: f64 = z.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / 7.0;
    let l2: f64 = z.iter().map(|r| dot(r, r)).sum::<f64>() / 7.0;
    assert!((entropy_value(&z, EntropyConfig::with_default_squaring(1)) - l1).abs() < 1e-12);
    assert!((entropy_value(&z, EntropyConfig::with_default_squaring(2)) - l2).abs() < 1e-12);
}

#[test]
fn entropy_rejects_other_orders() {
    let g = Graph::new();
    let z = g.constant(tensor(&random_rows(2, 2, 1.0, 1)));
    assert!(entropy_regularizer(&g, z, EntropyConfig { p: 3, squared: false }).is_err());
}

fn base(z: &Rows, beta: f64, est: Estimator) -> LossBreakdown {
    let g = Graph::new();
    let v = g.constant(tensor(z));
    let cfg = SimilarityConfig::for_latent(z[0].len());
    total_loss_base(&g, v, beta, EntropyConfig::with_default_squaring(1), est, cfg)
        .unwrap()
        .1
}

#[test]
fn base_total_composes_components() {
    let z = random_rows(8, 4, 1.0, 6);
    let b0 = base(&z, 0.0, Estimator::Nce);
    assert_eq!(b0.total, b0.nce);
    let b20 = base(&z, 20.0, Estimator::Nce);
    assert!((b20.nce - oracle_nce(&z, 4.0, 20.0)).abs() < 1e-12);
    let l1: f64 = z.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / 8.0;
    assert!((b20.entropy - l1).abs() < 1e-12);
    assert!((b20.total - (b20.nce + 20.0 * b20.entropy)).abs() < 1e-12);
    let g = Graph::<f64>::new();
    let v = g.constant(tensor(&z));
    let cfg = SimilarityConfig::for_latent(4);
    assert!(total_loss_base(&g, v, -1.0, EntropyConfig::with_default_squaring(1), Estimator::Nce, cfg).is_err());
}

#[test]
fn base_gradient_matches_finite_differences() {
    for est in [Estimator::Nce, Estimator::Jsd] {
        let z = tensor(&random_rows(8, 4, 1.0, 13));
        let cfg = SimilarityConfig::for_latent(4);
        let r = finite_difference_check(&[z], |g, v| {
            let ent = EntropyConfig::with_default_squaring(2);
            Ok(total_loss_base(g, v[0], 20.0, ent, est, cfg)
                .map_err(|e| imoc_diffmath::DiffError::InvalidArgument {
                    op: "test",
                    detail: e.to_string(),
                })?
                .0)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{est:?}: {r:?}");
    }
}

fn extension(g_rows: &Rows, l_maps: &[Rows], beta: f64) -> LossBreakdown {
    let g = Graph::new();
    let gv = g.constant(tensor(g_rows));
    let lv = g.constant(map_tensor(l_maps));
    let cfg = SimilarityConfig::for_latent(g_rows[0].len());
    total_loss_extension(&g, gv, lv, beta, EntropyConfig::with_default_squaring(1), Estimator::Nce, cfg)
        .unwrap()
        .1
}

#[test]
fn extension_degenerate_locals_equal_globals() {
    let z = random_rows(6, 4, 1.0, 17);
    let maps: Vec<Rows> = z.iter().map(|r| r.iter().map(|&v| vec![v]).collect()).collect();
    let b = extension(&z, &maps, 0.0);
    assert!((b.gvl - b.gvg).abs() < 1e-14);
    assert!((b.gvg - oracle_nce(&z, 4.0, 20.0)).abs() < 1e-12);
    assert_eq!(b.total, b.gvg + b.gvl);
}

#[test]
fn extension_random_matches_scalar_oracle() {
    let (n, d, npos) = (3, 4, 3);
    let g_rows = random_rows(2 * n, d, 1.0, 21);
    let maps = random_maps(2 * n, d, npos, 22);
    let beta = 2.5;
    let b = extension(&g_rows, &maps, beta);

    let c1 = d as f64;
    let gvg = oracle_nce(&g_rows, c1, 20.0);
    let as_map = |r: &Vec<f64>| -> Rows { r.iter().map(|&v| vec![v]).collect() };
    // Second-view globals against first-view locals, and the reverse.
    let cross = |gi: usize, li: usize| -> f64 {
        let phi1: Vec<Rows> = (0..n).map(|k| as_map(&g_rows[2 * k + gi])).collect();
        let phi2: Vec<Rows> = (0..n).map(|k| maps[2 * k + li].clone()).collect();
        oracle_map_nce(&phi1, &phi2, c1, 20.0)
    };
    let gvl = 0.5 * (cross(1, 0) + cross(0, 1));
    let ent: f64 = (0..2 * n)
        .map(|i| {
            g_rows[i].iter().map(|v| v.abs()).sum::<f64>()
                + maps[i].iter().flatten().map(|v| v.abs()).sum::<f64>()
        })
        .sum::<f64>()
        / (2 * n) as f64;
    assert!((b.gvg - gvg).abs() < 1e-12);
    assert!((b.gvl - gvl).abs() < 1e-12);
    assert!((b.entropy - ent).abs() < 1e-12);
    assert!((b.total - (gvg + gvl + beta * ent)).abs() < 1e-12);
}

#[test]
fn extension_zero_beta_is_mi_only() {
    let z = random_rows(4, 3, 1.0, 2);
    let maps = random_maps(4, 3, 2, 3);
    let b = extension(&z, &maps, 0.0);
    assert_eq!(b.total, b.gvg + b.gvl);
}

proptest! {
    #[test]
    fn nce_is_non_negative_and_bounded(seed in any::<u64>(), n in 2usize..6, scale in 0.01f64..20.0) {
        let z = random_rows(2 * n, 4, scale, seed);
        let cfg = SimilarityConfig::for_latent(4);
        let v = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
        prop_assert!(v >= 0.0);
        prop_assert!(v <= 4.0 * cfg.c2 + ((2 * n - 1) as f64).ln() + 1e-9);
    }

    #[test]
    fn nce_is_shift_invariant(seed in any::<u64>(), shift in -30.0f64..30.0) {
        // Shifting every similarity by a constant leaves the loss unchanged;
        // the oracle computes without the max subtraction.
        let z = random_rows(8, 3, 3.0, seed);
        let s = gram(&z);
        let base = oracle_nce_from_sims(&s, 3.0, 20.0);
        let cfg = SimilarityConfig::for_latent(3);
        let lib = run(&z, |g, v| nce_pair_loss(g, v, cfg).unwrap());
        prop_assert!((lib - base).abs() < 1e-9);
        // Shift after clamping: ℓ is a softmax cross-entropy.
        let n = s.len();
        let mut total = 0.0;
        for i in 0..n {
            let c: Vec<f64> = s[i].iter().map(|&v| oracle_clamp(v, 3.0, 20.0) + shift).collect();
            let j = i ^ 1;
            let denom: f64 = (0..n).filter(|&k| k != i).map(|k| c[k].exp()).sum();
            total += denom.ln() - c[j];
        }
        prop_assert!((total / n as f64 - base).abs() < 1e-9);
    }

    #[test]
    fn clamp_is_monotone_bounded_with_cubic_remainder(a in -1e4f64..1e4, b in -1e4f64..1e4, c1 in 0.5f64..64.0) {
        let cfg = SimilarityConfig::new(c1, 20.0).unwrap();
        let (ca, cb) = (clamp_similarity(a, cfg), clamp_similarity(b, cfg));
        prop_assert!(ca.abs() <= 20.0);
        if a < b {
            prop_assert!(ca <= cb);
        }
        // Cubic remainder of tanh around the rescaled similarity a/c1.
        let u = a / c1;
        let bound = u.abs().powi(3) / (3.0 * 20f64.powi(2));
        prop_assert!((ca - u).abs() <= bound * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn clamp_cubic_remainder_at_unit_scale(a in -1e4f64..1e4) {
        let cfg = SimilarityConfig::new(1.0, 20.0).unwrap();
        let bound = a.abs().powi(3) / (3.0 * 20f64.powi(2));
        prop_assert!((clamp_similarity(a, cfg) - a).abs() <= bound * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn entropy_scales_with_norm_order(seed in any::<u64>(), lambda in 0.1f64..10.0) {
        let z = random_rows(5, 3, 1.0, seed);
        let scaled: Rows = z.iter().map(|r| r.iter().map(|v| v * lambda).collect()).collect();
        let l1 = EntropyConfig::with_default_squaring(1);
        let l2 = EntropyConfig::with_default_squaring(2);
        prop_assert!((entropy_value(&scaled, l1) - lambda * entropy_value(&z, l1)).abs() < 1e-10);
        prop_assert!((entropy_value(&scaled, l2) - lambda * lambda * entropy_value(&z, l2)).abs() < 1e-9);
        prop_assert!(entropy_value(&z, l1) > 0.0);
    }

    #[test]
    fn jsd_is_non_negative(seed in any::<u64>()) {
        let z = random_rows(6, 3, 5.0, seed);
        let cfg = SimilarityConfig::for_latent(3);
        let v = run(&z, |g, v| jsd_pair_loss(g, v, cfg).unwrap());
        prop_assert!(v >= 0.0);
    }
}
