//! Property tests over the pure functions the pipeline relies on.

use proptest::prelude::*;
use waverec::cf::{self, ScoreVector};
use waverec::ere;
use waverec::kgfile;
use waverec::synth::{self, EnvironmentSpec, GeneratorConfig, OracleConfig};
use waverec::train::trailing_protocol;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..40)
}

proptest! {
    #[test]
    fn probabilities_are_a_distribution(s in scores()) {
        let ids: Vec<String> = (0..s.len()).map(synth::waveform_id).collect();
        let v = ScoreVector::new("e".into(), ids, s);
        let total: f64 = v.probs.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(v.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn ranking_is_a_stable_descending_permutation(s in prop::collection::vec(-3i32..3, 1..30)) {
        let s: Vec<f64> = s.into_iter().map(f64::from).collect();
        let r = cf::ranking(&s);
        let mut seen = r.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..s.len()).collect::<Vec<_>>());
        for w in r.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn trailing_mean_stays_within_the_curve(curve in prop::collection::vec(0.0f64..=1.0, 0..250)) {
        let t = trailing_protocol(&curve, 20, 0.002, 100);
        prop_assert!(t.epochs_averaged <= 100.min(curve.len()));
        if t.epochs_averaged > 0 {
            let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(t.mean >= lo - 1e-12 && t.mean <= hi + 1e-12);
        }
        if t.complete {
            prop_assert_eq!(t.epochs_averaged, 100);
        }
    }

    #[test]
    fn expansion_product_is_outer_per_tap(k in 1usize..5, g in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let mut r = waverec::rng::stream(seed, &[]);
        use rand::Rng;
        let a = autograd::Tensor::new(vec![k, g], (0..k * g).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = autograd::Tensor::new(vec![k, c], (0..k * c).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let t = ere::expansion_product(&a, &b).unwrap();
        for ki in 0..k {
            for gi in 0..g {
                for ci in 0..c {
                    prop_assert_eq!(t.data()[(ki * g + gi) * c + ci], a.data()[ki * g + gi] * b.data()[ki * c + ci]);
                }
            }
        }
    }

    #[test]
    fn more_signal_never_breaks_feasibility(seed in any::<u64>(), extra in 0.0f64..10.0) {
        let gen = GeneratorConfig::default();
        let cfg = OracleConfig::default();
        let mut r = waverec::rng::stream(seed, &[1]);
        let env = synth::sample_environment("e", &gen, &mut r);
        let wf = synth::sample_waveform("w", &gen, &mut r);
        let better = EnvironmentSpec { ebn0_db: env.ebn0_db + extra, ..env.clone() };
        prop_assert!(synth::margin_db(&better, &wf, &cfg) >= synth::margin_db(&env, &wf, &cfg));
        if synth::oracle_feasible(&env, &wf, &cfg) {
            prop_assert!(synth::oracle_feasible(&better, &wf, &cfg));
        }
    }

    #[test]
    fn small_corpora_round_trip(nw in 2usize..5, ne in 2usize..8, seed in 0u64..1000) {
        let store = synth::gen_corpus(nw, ne, &OracleConfig::default(), seed).unwrap();
        let text = kgfile::to_string(&store);
        let back = kgfile::parse(&text).unwrap();
        prop_assert_eq!(kgfile::to_string(&back), text);
        prop_assert_eq!(synth::recount_ewbg(&back, &OracleConfig::default()).unwrap(), 0);
    }

    #[test]
    fn balanced_ce_is_finite_and_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let n = p.len();
        let probs: Vec<f64> = p.iter().chain(p.iter()).copied().collect();
        let labels: Vec<f64> = (0..2 * n).map(|i| f64::from(u8::from(i < n))).collect();
        let l = cf::ce_loss_value(&probs, &labels).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
