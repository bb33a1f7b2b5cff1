use pgf_core::glr::{discretize, scan_chunked, scan_sequential, AffinePair};
use pgf_core::numerics::{max_rel_dev, relative_error, LogShiftedLane};
use pgf_core::sample::normal_vec;
use pgf_core::scan::{fold, inclusive_scan_seq, inclusive_scan_tree, Monoid};
use pgf_core::tangent::{pgf_jvp_dense, AugLane, Perturbation};
use pgf_core::{Activation, GlrParams, ScanStrategy};
use proptest::prelude::*;

fn lane() -> impl Strategy<Value = AugLane<f64>> {
    (0.0f64..=1.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, k, b, j)| AugLane {
        a,
        k,
        b,
        j,
    })
}

fn close(x: f64, y: f64, rtol: f64) -> bool {
    (x - y).abs() <= rtol * x.abs().max(y.abs()).max(1.0)
}

fn lanes_close(x: AugLane<f64>, y: AugLane<f64>, rtol: f64) -> bool {
    close(x.a, y.a, rtol) && close(x.k, y.k, rtol) && close(x.b, y.b, rtol) && close(x.j, y.j, rtol)
}

proptest! {
    #[test]
    fn augmented_compose_is_associative(p in lane(), q in lane(), r in lane()) {
        let left = AugLane::compose(AugLane::compose(p, q), r);
        let right = AugLane::compose(p, AugLane::compose(q, r));
        prop_assert!(lanes_close(left, right, 1e-13));
        prop_assert_eq!(AugLane::compose(p, AugLane::identity()), p);
        prop_assert_eq!(AugLane::compose(AugLane::identity(), p), p);
    }

    #[test]
    fn affine_pairs_are_associative(a in prop::array::uniform3(0.0f64..1.0), b in prop::array::uniform3(-3.0f64..3.0)) {
        let p: Vec<AffinePair<f64>> = (0..3).map(|i| AffinePair { a: a[i], b: b[i] }).collect();
        let l = AffinePair::compose(AffinePair::compose(p[0], p[1]), p[2]);
        let r = AffinePair::compose(p[0], AffinePair::compose(p[1], p[2]));
        prop_assert!(close(l.a, r.a, 1e-13) && close(l.b, r.b, 1e-13));
    }

    #[test]
    fn tree_scan_matches_fold(xs in prop::collection::vec(lane(), 1..70)) {
        let mut tree = xs.clone();
        let mut seq = xs.clone();
        inclusive_scan_tree(&mut tree);
        inclusive_scan_seq(&mut seq);
        for (t, s) in tree.iter().zip(&seq) {
            prop_assert!(lanes_close(*t, *s, 1e-12));
        }
        prop_assert!(lanes_close(fold(&xs), *seq.last().unwrap(), 1e-12));
    }

    #[test]
    fn log_lanes_follow_augmented_algebra(
        l in prop::collection::vec((-8.0f64..0.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20)
    ) {
        let logs: Vec<LogShiftedLane<f64>> = l.iter().map(|&(m, t, b, j)| LogShiftedLane {
            log_magnitude: m, log_tangent: t, b, j,
        }).collect();
        let augs: Vec<AugLane<f64>> = l.iter().map(|&(m, t, b, j)| AugLane {
            a: m.exp(), k: m.exp() * t, b, j,
        }).collect();
        let lf = fold(&logs);
        let af = fold(&augs);
        let (a, k) = lf.transition();
        let rebuilt = AugLane { a, k, b: lf.b, j: lf.j };
        prop_assert!(lanes_close(rebuilt, af, 1e-12));
    }

    #[test]
    fn chunked_scan_is_chunk_invariant(seed in 0u64..1000, len in 1usize..300, chunk in 1usize..80) {
        let p = GlrParams::<f64>::random(2, 3, seed);
        let u: Vec<f64> = normal_vec(seed, 9, len * 2);
        let ops = discretize(&p, &u).unwrap();
        let h0 = normal_vec::<f64>(seed, 10, 6);
        let s = scan_sequential(&ops, &h0).unwrap();
        let c = scan_chunked(&ops, &h0, chunk).unwrap();
        let (hs, hc) = (s.states().unwrap(), c.states().unwrap());
        // denominators are floored at the trajectory's RMS so that states
        // crossing zero do not turn rounding into large ratios
        let rms = (hs.iter().map(|x| x * x).sum::<f64>() / hs.len() as f64).sqrt();
        prop_assert!(max_rel_dev(hc, hs, rms) <= 1e-12);
    }

    #[test]
    fn tangent_is_homogeneous(seed in 0u64..1000, alpha in -4.0f64..4.0, silu in any::<bool>()) {
        let act = if silu { Activation::Silu } else { Activation::Identity };
        let p = GlrParams::<f64>::random(2, 3, seed).with_activation(act);
        let u: Vec<f64> = normal_vec(seed, 1, 40 * 2);
        let du: Vec<f64> = normal_vec(seed, 2, 40 * 2);
        let scaled: Vec<f64> = du.iter().map(|x| alpha * x).collect();
        let a = pgf_jvp_dense(&p, &u, &du, None, ScanStrategy::Sequential).unwrap();
        let b = pgf_jvp_dense(&p, &u, &scaled, None, ScanStrategy::Sequential).unwrap();
        let want: Vec<f64> = a.dy.iter().map(|x| alpha * x).collect();
        prop_assert!(relative_error(&b.dy, &want) <= 1e-13);
    }

    #[test]
    fn tangent_is_causal(seed in 0u64..1000, t0 in 0usize..60, ch in 0usize..3) {
        let p = GlrParams::<f64>::random(3, 4, seed).with_activation(Activation::Silu);
        let u: Vec<f64> = normal_vec(seed, 1, 60 * 3);
        let pulse = Perturbation::pulse(60, 3, t0, ch, 1e-6);
        for strategy in [ScanStrategy::Sequential, ScanStrategy::Associative] {
            let out = pgf_jvp_dense(&p, &u, &pulse.du, None, strategy).unwrap();
            prop_assert!(out.dy[..t0 * 3].iter().all(|x| x.to_bits() == 0));
            prop_assert!(out.dy[t0 * 3..].iter().any(|&x| x != 0.0));
        }
    }
}

