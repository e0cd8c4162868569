use proptest::prelude::*;
use tcape_core::eval::{average_precision, evaluate, far, roc_auc, FarScope, VideoScores, FAR_THRESHOLD};

fn auc_oracle(s: &[f64], l: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Precision at each positive, ranking by score then index.
fn ap_oracle(s: &[f64], l: &[u8]) -> f64 {
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
    let mut acc = 0.0;
    let mut pos = 0.0;
    for i in 0..s.len() {
        if l[i] == 1 {
            pos += 1.0;
            let rank = (0..s.len()).filter(|&j| ahead(i, j)).count() as f64;
            let hits = (0..s.len()).filter(|&j| l[j] == 1 && ahead(i, j)).count() as f64;
            acc += hits / rank;
        }
    }
    acc / pos
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (
        prop::collection::vec(0u32..40, 200),
        prop::collection::vec(0u8..2, 200),
    )
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        // coarse scores so ties are common
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 / 40.0).collect(), l))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_matches_pair_count((s, l) in problem()) {
        prop_assert!((roc_auc(&s, &l).unwrap() - auc_oracle(&s, &l)).abs() <= 1e-9);
    }

    #[test]
    fn ap_matches_precision_sum((s, l) in problem()) {
        prop_assert!((average_precision(&s, &l).unwrap() - ap_oracle(&s, &l)).abs() <= 1e-9);
    }

    #[test]
    fn far_matches_count((s, l) in problem()) {
        let alarms = s.iter().zip(&l).filter(|(&v, &y)| y == 0 && v >= 0.5).count();
        let neg = l.iter().filter(|&&y| y == 0).count();
        prop_assert_eq!(far(&s, &l, FAR_THRESHOLD).unwrap(), alarms as f64 / neg as f64);
    }
}

#[test]
fn far_hand_count() {
    let s = [0.1, 0.5, 0.49, 0.9, 0.7, 0.2];
    let l = [0, 0, 0, 0, 1, 1];
    assert_eq!(far(&s, &l, 0.5).unwrap(), 0.5);
}

#[test]
fn perfect_scores_give_unit_auc() {
    let frames = vec![0, 0, 1, 1, 1, 0];
    let v = vec![
        VideoScores {
            id: "a".into(),
            class: "fighting".into(),
            label: 1,
            scores: frames.iter().map(|&f| f as f64).collect(),
            frames: frames.clone(),
        },
        VideoScores {
            id: "b".into(),
            class: "normal".into(),
            label: 0,
            scores: vec![0.0; 4],
            frames: vec![0; 4],
        },
    ];
    let r = evaluate(&v, FarScope::NormalVideos).unwrap();
    assert_eq!((r.auc, r.ap, r.far), (1.0, 1.0, 0.0));
}

#[test]
fn shuffled_labels_give_chance_auc() {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = tcape_core::numkit::derive_rng(3, 0, 0);
    let s: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
    let mut l: Vec<u8> = s.iter().map(|&v| u8::from(v > 0.7)).collect();
    assert_eq!(roc_auc(&s, &l).unwrap(), 1.0);
    l.shuffle(&mut rng);
    let auc = roc_auc(&s, &l).unwrap();
    assert!((auc - 0.5).abs() <= 0.05, "{auc}");
}
