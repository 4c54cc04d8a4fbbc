mod common;

use common::{oracle_bleu, oracle_cider, oracle_em, oracle_rouge_l, random_corpus, Case};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sceneqa::metrics::{bleu, cider, em_at_1, rouge_l, EvalPair, MetricReport};

fn pairs(cases: &[Case]) -> Vec<EvalPair> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| EvalPair::new(i.to_string(), c.hyp.clone(), c.refs.clone()))
        .collect()
}

#[test]
fn metrics_agree_with_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..200 {
        let cases = random_corpus(&mut rng);
        let p = pairs(&cases);
        for n in 1..=4 {
            let (a, b) = (bleu(&p, n).score, oracle_bleu(&cases, n));
            assert!((a - b).abs() < 1e-9, "trial {trial} BLEU-{n}: {a} vs {b}");
        }
        assert!((rouge_l(&p) - oracle_rouge_l(&cases)).abs() < 1e-9, "trial {trial} ROUGE-L");
        assert!((cider(&p) - oracle_cider(&cases)).abs() < 1e-9, "trial {trial} CIDEr");
        assert!((em_at_1(&p) - oracle_em(&cases)).abs() < 1e-9, "trial {trial} EM");
    }
}

#[test]
fn cider_rewards_rare_matches() {
    let p = vec![
        EvalPair::new("a", "the red lamp", vec!["the red lamp".into()]),
        EvalPair::new("b", "the chair", vec!["the blue chair".into()]),
        EvalPair::new("c", "the box", vec!["the green box".into()]),
    ];
    let s = sceneqa::metrics::cider_per_pair(&p);
    assert!(s[0] > s[1] && s[0] > s[2]);
}

proptest! {
    #[test]
    fn scores_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = MetricReport::compute(&pairs(&random_corpus(&mut rng)));
        for b in r.bleu {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        }
        prop_assert!((0.0..=100.0 + 1e-9).contains(&r.rouge_l));
        prop_assert!((0.0..=1000.0 + 1e-9).contains(&r.cider));
        prop_assert!((0.0..=100.0).contains(&r.em_at_1));
    }

    #[test]
    fn identity_scores_full_marks(words in prop::collection::vec("[a-z]{1,6}", 1..8)) {
        let s = words.join(" ");
        let p = [EvalPair::new("x", s.clone(), vec![s])];
        prop_assert!((bleu(&p, 1).score - 100.0).abs() < 1e-9);
        prop_assert!((rouge_l(&p) - 100.0).abs() < 1e-9);
        prop_assert_eq!(em_at_1(&p), 100.0);
    }

    #[test]
    fn pair_order_does_not_change_corpus_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = pairs(&random_corpus(&mut rng));
        let before = MetricReport::compute(&p);
        p.reverse();
        let after = MetricReport::compute(&p);
        for k in 0..4 {
            prop_assert!((before.bleu[k] - after.bleu[k]).abs() < 1e-9);
        }
        prop_assert!((before.cider - after.cider).abs() < 1e-9);
        prop_assert!((before.rouge_l - after.rouge_l).abs() < 1e-9);
    }
}
