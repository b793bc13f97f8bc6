use proptest::prelude::*;

use robustnet::attacks::{attack_all, sample_lp_ball, AttackConfig};
use robustnet::rng::SeededRng;
use robustnet::robust_bound::{brute_force_sup, certify_all, fixed_t, rub_class_bound, rub_class_bounds, FixedT};
use robustnet::{Example, Network64, Norm};

fn net_from(widths: &[usize], seed: u64) -> Network64 {
    let mut net = Network64::init(widths, seed).unwrap();
    let mut rng = SeededRng::new(seed.wrapping_add(17));
    for l in net.layers_mut() {
        for b in l.bias.data_mut() {
            *b = rng.uniform(-0.5, 0.5);
        }
    }
    net
}

fn widths_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=6, prop::collection::vec(1usize..=12, 1..=3), 2usize..=4).prop_map(|(m, hidden, k)| {
        let mut w = vec![m];
        w.extend(hidden);
        w.push(k);
        w
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_dominates_sampled_margins(widths in widths_strategy(), seed in 0u64..10_000, rho in 0.0f64..1.5) {
        let net = net_from(&widths, seed);
        let mut rng = SeededRng::new(seed);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k = *widths.last().unwrap();
        let y = rng.below(k);
        for t in [fixed_t(&net, &x).unwrap(), FixedT::random(&net, &mut rng)] {
            let bounds = rub_class_bounds(&net, &x, y, rho, &t).unwrap();
            for _ in 0..200 {
                let d: Vec<f64> = sample_lp_ball(widths[0], Norm::L1, rho, &mut rng);
                let xd: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
                let z = net.logits(&xd).unwrap();
                for c in 0..k {
                    prop_assert!(z[c] - z[y] <= bounds[c] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn brute_force_never_exceeds_bound(widths in widths_strategy(), seed in 0u64..10_000, rho in 0.0f64..1.0) {
        let net = net_from(&widths, seed);
        let mut rng = SeededRng::new(seed ^ 5);
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let t = fixed_t(&net, &x).unwrap();
        let k = *widths.last().unwrap();
        for c in 0..k {
            let lower = brute_force_sup(&net, &x, 0, c, rho, 300, seed).unwrap();
            let upper = rub_class_bound(&net, &x, 0, c, rho, &t).unwrap();
            prop_assert!(lower <= upper + 1e-9);
        }
    }

    #[test]
    fn bound_grows_with_radius(widths in widths_strategy(), seed in 0u64..10_000, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let net = net_from(&widths, seed);
        let x: Vec<f64> = (0..widths[0]).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = fixed_t(&net, &x).unwrap();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let a = rub_class_bounds(&net, &x, 1, lo, &t).unwrap();
        let b = rub_class_bounds(&net, &x, 1, hi, &t).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!(u <= &(v + 1e-12));
        }
    }
}

/// The per-layer supremum over `s_l ∈ [0, 1]` collapses into one layer of the
/// branch network:
/// `sup_s p_l^T g(1) + q_l^T g(-1) = p_{l+1}^T g'(1) + q_{l+1}^T g'(-1) - (p_{l+1} - q_{l+1})^T b`
/// where `p_l = ([W]^+^T p' + [-W]^+^T q') ⊙ s`, `q_l = ([-W]^+^T p' + [W]^+^T q') ⊙ t`.
#[test]
fn layer_supremum_identity() {
    let mut rng = SeededRng::new(42);
    let pos = |v: f64| v.max(0.0);
    for _ in 0..200 {
        let (r_in, r_out) = (1 + rng.below(5), 1 + rng.below(5));
        let w: Vec<Vec<f64>> = (0..r_out).map(|_| (0..r_in).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let b: Vec<f64> = (0..r_out).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let p_next: Vec<f64> = (0..r_out).map(|_| rng.uniform(0.0, 2.0)).collect();
        let q_next: Vec<f64> = (0..r_out).map(|_| rng.uniform(0.0, 2.0)).collect();
        let t: Vec<f64> = (0..r_in).map(|_| rng.uniform(0.0, 1.0)).collect();
        let g_pos: Vec<f64> = (0..r_in).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let g_neg: Vec<f64> = (0..r_in).map(|_| rng.uniform(-2.0, 2.0)).collect();

        let a: Vec<f64> = (0..r_in)
            .map(|j| (0..r_out).map(|i| pos(w[i][j]) * p_next[i] + pos(-w[i][j]) * q_next[i]).sum())
            .collect();
        let c: Vec<f64> = (0..r_in)
            .map(|j| (0..r_out).map(|i| pos(-w[i][j]) * p_next[i] + pos(w[i][j]) * q_next[i]).sum())
            .collect();
        // the objective is linear in s, so the supremum sits at a vertex of [0, 1]^r
        let mut lhs = f64::NEG_INFINITY;
        for bits in 0..1usize << r_in {
            let v: f64 = (0..r_in)
                .map(|j| {
                    let s = (bits >> j & 1) as f64;
                    a[j] * s * g_pos[j] + c[j] * t[j] * g_neg[j]
                })
                .sum();
            lhs = lhs.max(v);
        }

        let next_pos: Vec<f64> = (0..r_out)
            .map(|i| {
                (0..r_in).map(|j| pos(w[i][j]) * pos(g_pos[j]) + pos(-w[i][j]) * g_neg[j] * t[j]).sum::<f64>() + b[i]
            })
            .collect();
        let next_neg: Vec<f64> = (0..r_out)
            .map(|i| {
                (0..r_in).map(|j| pos(-w[i][j]) * pos(g_pos[j]) + pos(w[i][j]) * g_neg[j] * t[j]).sum::<f64>() - b[i]
            })
            .collect();
        let rhs: f64 = (0..r_out)
            .map(|i| p_next[i] * next_pos[i] + q_next[i] * next_neg[i] - (p_next[i] - q_next[i]) * b[i])
            .sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}

#[test]
fn certificates_survive_pgd() {
    for seed in 0..6 {
        let net = net_from(&[4, 10, 10, 3], seed);
        let mut rng = SeededRng::new(seed);
        let xs: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let examples: Vec<Example<f64>> = xs.iter().map(|x| Example::new(x, net.predict(x).unwrap())).collect();
        for rho in [0.01, 0.05, 0.2] {
            let certs = certify_all(&net, &examples, rho).unwrap();
            let attacks = attack_all(&net, &examples, &AttackConfig::pgd(Norm::L1, rho).unwrap().with_seed(seed)).unwrap();
            for (c, a) in certs.iter().zip(&attacks) {
                assert!(!(c.certified && !a.correct()));
            }
        }
    }
}
