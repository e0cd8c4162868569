use proptest::prelude::*;
use tcape_core::eval::{smooth, SmoothMode, SmoothingConfig, Tail};

#[test]
fn worked_example() {
    let s = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(smooth(&s, &SmoothingConfig::new(SmoothMode::Moving, 2)), [1.5, 1.5, 3.5, 3.5]);
    assert_eq!(smooth(&s, &SmoothingConfig::new(SmoothMode::Sliding, 2)), [1.5, 2.5, 3.5, 2.0]);
}

#[test]
fn shrinking_tail() {
    let cfg = SmoothingConfig {
        mode: SmoothMode::Sliding,
        window: 2,
        tail: Tail::Shrink,
    };
    assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0], &cfg), [1.5, 2.5, 3.5, 4.0]);
}

proptest! {
    #[test]
    fn window_one_is_identity(s in prop::collection::vec(0.0f64..1.0, 0..100)) {
        for mode in [SmoothMode::Moving, SmoothMode::Sliding, SmoothMode::None] {
            prop_assert_eq!(&smooth(&s, &SmoothingConfig::new(mode, 1)), &s);
        }
    }

    #[test]
    fn none_ignores_window(s in prop::collection::vec(0.0f64..1.0, 0..100), k in 1usize..20) {
        prop_assert_eq!(&smooth(&s, &SmoothingConfig::new(SmoothMode::None, k)), &s);
    }

    #[test]
    fn length_and_range_preserved(s in prop::collection::vec(0.0f64..1.0, 1..100), k in 1usize..20) {
        for mode in [SmoothMode::Moving, SmoothMode::Sliding] {
            let out = smooth(&s, &SmoothingConfig::new(mode, k));
            prop_assert_eq!(out.len(), s.len());
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn moving_blocks_keep_their_sum(blocks in 1usize..10, k in 1usize..8, seed in prop::collection::vec(0.0f64..1.0, 80)) {
        let s = &seed[..blocks * k];
        let out = smooth(s, &SmoothingConfig::new(SmoothMode::Moving, k));
        prop_assert!((out.iter().sum::<f64>() - s.iter().sum::<f64>()).abs() < 1e-9);
    }
}
