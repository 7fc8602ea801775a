use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use capfuse::capability::{capability_loss, CapabilityTarget, SharedHead};
use capfuse::encoder::{PooledVector, SourceField};
use capfuse::evaluation::{calibrate_linear, mean, pearson, population_std, threshold_by_rate};
use capfuse::fusion::{FeatureTriple, Fusion, FusionKind, FusionSettings};
use capfuse::llm::{parse_capability, render_prompt, CapabilityProfile, Level, Skill};
use capfuse::model::Objective;
use capfuse::nn::ForwardCtx;
use capfuse::params::ParamStore;
use capfuse::service::{finalize_score, rank, RankedCandidate};

fn vec_d(d: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, d)
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_fusions_ignore_input_order(
        kind in prop_oneof![Just(FusionKind::Average), Just(FusionKind::Sa1), Just(FusionKind::Sa2)],
        seed in 0u64..1000,
        a in vec_d(6), c in vec_d(6), i in vec_d(6),
    ) {
        let mut store = ParamStore::new();
        let settings = FusionSettings { init_std: 0.5, output_bias: true, ..FusionSettings::default() };
        let f = Fusion::new(&mut store, "f", kind, 6, settings, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let pv = |v: &Vec<f64>| PooledVector::new(v.clone(), SourceField::Composite).unwrap();
        let y = |x: &Vec<f64>, y: &Vec<f64>, z: &Vec<f64>| {
            let t = FeatureTriple::new(pv(x), pv(y), pv(z)).unwrap();
            f.apply(&store, &t, &mut ForwardCtx::eval()).unwrap().y
        };
        let base = y(&a, &c, &i);
        prop_assert!((base - y(&i, &a, &c)).abs() < 1e-9);
        prop_assert!((base - y(&c, &i, &a)).abs() < 1e-9);
        prop_assert!((base - y(&a, &i, &c)).abs() < 1e-9);
    }

    #[test]
    fn calibration_hits_target_moments(
        scores in proptest::collection::vec(-50.0f64..50.0, 2..60),
        mu in -5.0f64..10.0,
        sigma in 0.1f64..5.0,
    ) {
        prop_assume!(population_std(&scores) > 1e-6);
        let out = calibrate_linear(&scores, mu, sigma).unwrap();
        prop_assert!((mean(&out) - mu).abs() < 1e-8);
        prop_assert!((population_std(&out) - sigma).abs() < 1e-8);
        // order preserving
        for w in 0..scores.len() {
            for v in 0..scores.len() {
                if scores[w] < scores[v] {
                    prop_assert!(out[w] < out[v]);
                }
            }
        }
    }

    #[test]
    fn threshold_marks_the_top_fraction(
        probs in proptest::collection::vec(0.0f64..1.0, 1..200),
        rate in 0.01f64..0.99,
    ) {
        let out = threshold_by_rate(&probs, rate).unwrap();
        let n = probs.len() as f64;
        let k = out.iter().filter(|&&b| b).count();
        prop_assert!((k as f64 / n - rate).abs() <= 1.0 / n);
        let lowest_pos = probs.iter().zip(&out).filter(|(_, &b)| b).map(|(p, _)| *p).fold(f64::INFINITY, f64::min);
        let highest_neg = probs.iter().zip(&out).filter(|(_, &b)| !b).map(|(p, _)| *p).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_pos >= highest_neg);
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(population_std(&x) > 1e-6 && population_std(&y) > 1e-6);
        let r = pearson(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn capability_loss_terms_stay_in_range(
        c_hat in vec_d(5), c in vec_d(5), a in vec_d(5), w in vec_d(5),
        l1 in 0.0f64..1.0, l2 in 0.0f64..2.0,
    ) {
        prop_assume!(nonzero(&c_hat) && nonzero(&c) && nonzero(&a));
        let head = SharedHead { weight: w, bias: 0.3 };
        let target = CapabilityTarget { y_c: head.apply(&c), c, a };
        let t = capability_loss(&c_hat, &target, &head, l1, l2).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t.similarity));
        prop_assert!(t.anchor >= 0.0 && t.anchor <= l1 + 1e-12);
        prop_assert!(t.head >= 0.0);
        // scaling the prediction leaves the cosine terms alone
        let scaled: Vec<f64> = c_hat.iter().map(|x| 3.0 * x).collect();
        let s = capability_loss(&scaled, &target, &head, l1, l2).unwrap();
        prop_assert!((s.similarity - t.similarity).abs() < 1e-12);
        prop_assert!((s.anchor - t.anchor).abs() < 1e-12);
    }

    #[test]
    fn served_scores_stay_in_range(raw in -1e9f64..1e9) {
        let r = finalize_score(Objective::Rating, raw).unwrap();
        let p = finalize_score(Objective::Acceptance, raw).unwrap();
        prop_assert!((1.0..=10.0).contains(&r));
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn ranking_is_sorted_and_complete(scores in proptest::collection::vec(-5i32..5, 1..30)) {
        let input: Vec<RankedCandidate> = scores
            .iter()
            .enumerate()
            .map(|(k, &s)| RankedCandidate { id: format!("c{k:02}"), score: f64::from(s) })
            .collect();
        let out = rank(input.clone());
        prop_assert_eq!(out.len(), input.len());
        for w in out.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
        let best = input.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(out[0].score, best);
    }

    #[test]
    fn rendered_prompts_bind_every_hole(
        values in proptest::collection::vec("[a-z {}\"]{0,12}", 3),
    ) {
        let template = "x={x} y={y} {\"lit\": 1} z={z}";
        let bindings: BTreeMap<String, String> =
            ["x", "y", "z"].iter().zip(&values).map(|(k, v)| (k.to_string(), v.clone())).collect();
        let out = render_prompt(template, &bindings).unwrap();
        prop_assert_eq!(out, format!("x={} y={} {{\"lit\": 1}} z={}", values[0], values[1], values[2]));
    }

    #[test]
    fn capability_profiles_round_trip(
        levels in proptest::collection::vec(0usize..4, 6),
        n_exp in 5usize..=10,
        exp_level in 0usize..4,
    ) {
        let skills: BTreeMap<Skill, Level> =
            Skill::ALL.iter().zip(&levels).map(|(s, &l)| (*s, Level::ALL[l])).collect();
        let expertise = (0..n_exp).map(|k| (format!("area {k}"), Level::ALL[exp_level])).collect();
        let p = CapabilityProfile::new(skills, expertise, "two GPUs".into(), "none".into(), "weeks".into()).unwrap();
        let back = parse_capability(&p.rendered_text).unwrap();
        prop_assert_eq!(back.scores(), p.scores());
        prop_assert_eq!(back.expertise.len(), n_exp);
    }
}
