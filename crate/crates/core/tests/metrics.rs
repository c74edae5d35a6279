use proptest::prelude::*;
use volrep_core::metrics::{bce_loss, pr_auc, ConfusionMatrix};

proptest! {
    #[test]
    fn confusion_counts_partition_the_samples(pairs in proptest::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let (p, t): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let cm = ConfusionMatrix::from_predictions(&p, &t).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        let agree = pairs.iter().filter(|(a, b)| a == b).count() as f64;
        prop_assert!((cm.accuracy().unwrap() - agree / pairs.len() as f64).abs() < 1e-12);
        // Flipping every prediction swaps hits with misses.
        let flipped: Vec<bool> = p.iter().map(|x| !x).collect();
        let inv = ConfusionMatrix::from_predictions(&flipped, &t).unwrap();
        prop_assert_eq!((inv.tp, inv.fp, inv.fn_, inv.tn), (cm.fn_, cm.tn, cm.tp, cm.fp));
    }

    #[test]
    fn bce_matches_direct_formula(pairs in proptest::collection::vec((0.001f64..0.999, any::<bool>()), 1..50)) {
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let y: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
        let oracle = -pairs.iter().map(|&(q, t)| if t { q.ln() } else { (1.0 - q).ln() }).sum::<f64>() / p.len() as f64;
        prop_assert!((bce_loss(&p, &y).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn pr_auc_is_a_probability_and_rank_invariant(
        pairs in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..100),
    ) {
        prop_assume!(pairs.iter().any(|x| x.1));
        let s: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let t: Vec<bool> = pairs.iter().map(|x| x.1).collect();
        let a = pr_auc(&s, &t).unwrap().area;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        // A strictly increasing map of the scores leaves the curve unchanged.
        let squashed: Vec<f64> = s.iter().map(|x| (3.0 * x).exp()).collect();
        prop_assert!((pr_auc(&squashed, &t).unwrap().area - a).abs() < 1e-12);
    }

    #[test]
    fn pr_auc_matches_average_precision_for_distinct_scores(
        truth in proptest::collection::vec(any::<bool>(), 2..60),
        seed in any::<u64>(),
    ) {
        prop_assume!(truth.iter().any(|&x| x));
        // distinct scores by construction
        let n = truth.len();
        let scores: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1_000_003) as f64 + i as f64 / n as f64).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let pos = truth.iter().filter(|&&x| x).count() as f64;
        let (mut tp, mut ap) = (0.0, 0.0);
        for (k, &i) in order.iter().enumerate() {
            if truth[i] {
                tp += 1.0;
                ap += tp / (k + 1) as f64;
            }
        }
        prop_assert!((pr_auc(&scores, &truth).unwrap().area - ap / pos).abs() < 1e-12);
    }
}

#[test]
fn all_tied_scores_give_prevalence() {
    let t = [true, false, false, true, false];
    assert!((pr_auc(&[0.3; 5], &t).unwrap().area - 0.4).abs() < 1e-12);
}
