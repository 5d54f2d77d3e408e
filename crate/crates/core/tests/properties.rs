mod common;

use common::{brute_force_auc, close, scalar_avg_pool, scalar_max_pool};
use m2fusion::aggregation::{avg_pool_bag, conv_aggregate, max_pool_bag, ConvAggregatorParams};
use m2fusion::domain::{FeatureBag, Label};
use m2fusion::evaluation::auc_from_scores;
use m2fusion::nn::rng_from_seed;
use ndarray::Array2;
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = Vec<(f64, bool)>> {
    // scores on a coarse grid so that ties are common
    prop::collection::vec((0u8..20, any::<bool>()), 2..120)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| (f64::from(s) / 19.0, l)).collect())
}

proptest! {
    #[test]
    fn auc_agrees_with_pairs_and_ignores_monotone_maps(data in scored_labels()) {
        let scores: Vec<f64> = data.iter().map(|p| p.0).collect();
        let positive: Vec<bool> = data.iter().map(|p| p.1).collect();
        let labels: Vec<Label> = positive.iter().map(|&p| if p { Label::Msi } else { Label::Mss }).collect();
        let fast = auc_from_scores(&scores, &labels).unwrap();
        prop_assert!((fast - brute_force_auc(&scores, &positive).unwrap()).abs() <= 1e-12);

        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
        prop_assert_eq!(auc_from_scores(&squashed, &labels).unwrap(), fast);
        let flipped: Vec<Label> = positive.iter().map(|&p| if p { Label::Mss } else { Label::Msi }).collect();
        prop_assert!((auc_from_scores(&scores, &flipped).unwrap() - (1.0 - fast)).abs() <= 1e-12);
    }

    #[test]
    fn pooling_ignores_patch_order(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 6), 1..30),
        seed in any::<u64>(),
    ) {
        let bag = |rows: &[Vec<f64>]| FeatureBag::new(Array2::from_shape_vec((rows.len(), 6), rows.concat()).unwrap()).unwrap();
        let mut rng = rng_from_seed(seed);
        let kernel = ConvAggregatorParams::init(&mut rng, 6, 3).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.rotate_left(rows.len() / 2);
        let (a, b) = (bag(&rows), bag(&shuffled));

        let max = max_pool_bag(&a);
        let avg = avg_pool_bag(&a);
        prop_assert_eq!(max.as_slice().to_vec(), scalar_max_pool(&rows));
        prop_assert!(close(avg.as_slice(), &scalar_avg_pool(&rows), 1e-12));
        prop_assert_eq!(&max, &max_pool_bag(&b));
        prop_assert!(close(avg.as_slice(), avg_pool_bag(&b).as_slice(), 1e-12));
        prop_assert!(max.as_slice().iter().zip(avg.as_slice()).all(|(m, v)| m + 1e-12 >= *v));

        // distinct norms make the canonical order unique
        let norms: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().to_bits()).collect();
        if norms.len() == rows.len() {
            prop_assert_eq!(conv_aggregate(&a, &kernel).unwrap(), conv_aggregate(&b, &kernel).unwrap());
        }
        let identity = ConvAggregatorParams::identity(6, 3).unwrap();
        prop_assert_eq!(conv_aggregate(&a, &identity).unwrap(), max);
    }
}
