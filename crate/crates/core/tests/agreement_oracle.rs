mod support;

use inpaintkit_core::agreement::{best_of_four_exact, best_of_two_exact};
use support::oracle::{brute_best_of_four, brute_best_of_two, micro_set};

#[test]
fn pair_route_equals_enumeration() {
    for seed in 0..5 {
        let data = micro_set(seed);
        assert_eq!(data.n_samples(), 20);
        let (num, den) = brute_best_of_two(&data);
        let exact = best_of_two_exact(&data).unwrap();
        assert!(exact.same_ratio(num, den), "seed {seed}: {exact:?} vs {num}/{den}");
    }
}

#[test]
fn four_way_route_equals_enumeration() {
    for seed in 0..2 {
        let data = micro_set(seed);
        let (num, den) = brute_best_of_four(&data);
        let exact = best_of_four_exact(&data).unwrap();
        assert!(exact.same_ratio(num, den), "seed {seed}: {exact:?} vs {num}/{den}");
    }
}
