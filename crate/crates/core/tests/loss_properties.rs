use oxel::correspondence::CorrespondenceMap;
use oxel::loss::{batch_loss, between_loss, pixel_distance, within_loss, FeatureMap, Norm};
use oxel::sampling::build_sample_set;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map(h: usize, w: usize, d: usize, values: &[f64]) -> FeatureMap<f64> {
    FeatureMap::from_vec(h, w, d, values[..h * w * d].to_vec()).unwrap()
}

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2), Just(Norm::Inf)]
}

proptest! {
    #[test]
    fn distance_is_a_metric(
        a in prop::collection::vec(-3.0f64..3.0, 6),
        b in prop::collection::vec(-3.0f64..3.0, 6),
        c in prop::collection::vec(-3.0f64..3.0, 6),
        norm in norm_strategy(),
    ) {
        let ab = pixel_distance(&a, &b, norm);
        prop_assert_eq!(ab, pixel_distance(&b, &a, norm));
        prop_assert_eq!(pixel_distance(&a, &a, norm), 0.0);
        prop_assert!(ab <= pixel_distance(&a, &c, norm) + pixel_distance(&c, &b, norm) + 1e-12);
    }

    #[test]
    fn norms_are_ordered(a in prop::collection::vec(-3.0f64..3.0, 5), b in prop::collection::vec(-3.0f64..3.0, 5)) {
        let inf = pixel_distance(&a, &b, Norm::Inf);
        let two = pixel_distance(&a, &b, Norm::L2);
        let one = pixel_distance(&a, &b, Norm::L1);
        prop_assert!(inf <= two + 1e-12 && two <= one + 1e-12);
    }

    #[test]
    fn between_loss_is_bounded_below(values in prop::collection::vec(-2.0f64..2.0, 2 * 3 * 3 * 4), norm in norm_strategy()) {
        let a = map(3, 3, 4, &values);
        let b = map(3, 3, 4, &values[36..]);
        prop_assert!(between_loss(&a, &b, norm).unwrap() >= -0.25);
    }

    #[test]
    fn identical_views_have_zero_positive_loss(values in prop::collection::vec(-2.0f64..2.0, 4 * 4 * 4), seed in any::<u64>(), norm in norm_strategy()) {
        let f = map(4, 4, 4, &values);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = build_sample_set(&CorrespondenceMap::identity(4, 4), 1.0, &mut rng).unwrap();
        prop_assert!(s.negatives.is_empty());
        prop_assert_eq!(within_loss(&f, &f, &s, norm).unwrap(), 0.0);
    }

    #[test]
    fn lambda_one_ignores_the_between_term(values in prop::collection::vec(-2.0f64..2.0, 4 * 3 * 3 * 4), seed in any::<u64>()) {
        let v1 = vec![map(3, 3, 4, &values), map(3, 3, 4, &values[36..])];
        let v2 = vec![map(3, 3, 4, &values[72..]), map(3, 3, 4, &values[108..])];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<_> = (0..2).map(|_| build_sample_set(&CorrespondenceMap::identity(3, 3), 0.5, &mut rng).unwrap()).collect();
        let out = batch_loss(&v1, &v2, &s, 1.0, Norm::Inf).unwrap();
        let within = (within_loss(&v1[0], &v2[0], &s[0], Norm::Inf).unwrap() + within_loss(&v1[1], &v2[1], &s[1], Norm::Inf).unwrap()) / 2.0;
        prop_assert!((out.total - within).abs() < 1e-12);
    }
}
