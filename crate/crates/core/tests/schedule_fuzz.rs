mod common;

use d3_core::schedule::floor_scaled_power;
use d3_core::{DepthSchedule, KeptSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::exact_floor_scaled_power;

fn random_schedule(rng: &mut ChaCha8Rng) -> DepthSchedule {
    let l = rng.random_range(1..=128);
    match rng.random_range(0..3) {
        0 => DepthSchedule::d3(
            l,
            rng.random_range(0.0..1.0),
            if rng.random_bool(0.1) {
                1.0
            } else {
                rng.random_range(0.3..1.0)
            },
            rng.random_range(0..=3),
        )
        .unwrap(),
        1 => {
            let lower = rng.random_range(1..=l);
            DepthSchedule::linear_head(
                l,
                rng.random_range(lower..=l),
                lower,
                rng.random_range(1..=64),
            )
            .unwrap()
        }
        _ => DepthSchedule::constant_tail(l, rng.random_range(1..=l)).unwrap(),
    }
}

fn is_contiguous_drop(k: &KeptSet) -> bool {
    let ids: Vec<usize> = k.iter().collect();
    let gaps = ids.windows(2).filter(|w| w[1] != w[0] + 1).count();
    gaps <= 1 && k.dropped().len() == k.n_layers() - k.len()
}

#[test]
fn hundred_thousand_draws_keep_every_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100_000 {
        let s = random_schedule(&mut rng);
        let l = s.n_layers();
        let i = rng.random_range(0..500);
        let (a, b) = (s.kept_set(i), s.kept_set(i + 1));
        assert!(b.is_subset(&a), "{s} step {i}");
        assert_eq!(a.len(), s.kept_count(i));
        assert!((1..=l).contains(&a.len()));
        assert!(is_contiguous_drop(&a));
        assert_eq!(s.kept_set(0).len(), s.kept_count(0));
    }
}

#[test]
fn power_floor_agrees_with_big_integer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20_000 {
        let l = rng.random_range(1..=128);
        let alpha = match rng.random_range(0..3) {
            0 => 1.0 - 10f64.powf(-rng.random_range(1.0..6.0)),
            1 => rng.random_range(0.05..1.0),
            _ => rng.random_range(1..=64) as f64 / 64.0,
        };
        let i = rng.random_range(0..3000);
        assert_eq!(
            floor_scaled_power(l, alpha, i),
            exact_floor_scaled_power(l, alpha, i),
            "{l} {alpha} {i}"
        );
    }
}

#[test]
fn exact_dyadic_products_floor_on_the_integer() {
    // 64 · 0.5⁶ = 1 and 96 · 0.75² = 54 exactly
    assert_eq!(floor_scaled_power(64, 0.5, 6), 1);
    assert_eq!(floor_scaled_power(64, 0.5, 7), 0);
    assert_eq!(floor_scaled_power(96, 0.75, 2), 54);
    assert_eq!(exact_floor_scaled_power(96, 0.75, 2), 54);
}
