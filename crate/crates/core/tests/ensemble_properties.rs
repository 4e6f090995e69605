use std::collections::HashMap;

use proptest::prelude::*;
use visgeo_core::ensemble::*;
use visgeo_core::synth::synthetic_molecule;
use visgeo_core::Error;

fn sort_slice_average(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop_low = (v.len() - k) / 2;
    let kept = &v[drop_low..drop_low + k];
    kept.iter().sum::<f64>() / k as f64
}

fn values_and_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-10.0f64..10.0, 1..30).prop_flat_map(|v| {
        let m = v.len();
        (Just(v), 1..=m)
    })
}

proptest! {
    #[test]
    fn matches_sort_slice_oracle((v, k) in values_and_k()) {
        prop_assert_eq!(trimmed_middle_mean(&v, k).unwrap(), sort_slice_average(&v, k));
    }

    #[test]
    fn permutation_invariant((v, k) in values_and_k(), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(trimmed_middle_mean(&v, k).unwrap(), trimmed_middle_mean(&shuffled, k).unwrap());
    }

    #[test]
    fn monotone_in_every_value((v, k) in values_and_k(), idx in any::<prop::sample::Index>(), bump in 0.0f64..5.0) {
        let i = idx.index(v.len());
        let mut up = v.clone();
        up[i] += bump;
        prop_assert!(trimmed_middle_mean(&up, k).unwrap() >= trimmed_middle_mean(&v, k).unwrap());
    }

    #[test]
    fn bounded_by_extremes((v, k) in values_and_k()) {
        let out = trimmed_middle_mean(&v, k).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= out && out <= hi);
    }

    #[test]
    fn single_middle_value_is_median(half in 0usize..12, v0 in prop::collection::vec(-10.0f64..10.0, 25)) {
        let v = &v0[..2 * half + 1];
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        prop_assert_eq!(trimmed_middle_mean(v, 1).unwrap(), s[half]);
    }
}

fn preds_for(id: &str, values: Vec<f64>) -> PredictionSet {
    let members = (0..values.len()).map(|m| format!("m{m}")).collect();
    PredictionSet::new(id, members, values).unwrap()
}

#[test]
fn routing_contract() {
    let (small, _) = synthetic_molecule(3, 1);
    let (edge, _) = synthetic_molecule(4, 2);
    let (large, _) = synthetic_molecule(10, 3);
    let table = LookupFallback::new(HashMap::from([
        (small.id().to_string(), 5.1),
        (edge.id().to_string(), -1.0),
        (large.id().to_string(), -1.0),
    ]));
    let rule = RoutingRule::new(RoutingRule::DEFAULT_THRESHOLD, &table).unwrap();
    let values: Vec<f64> = (1..=22).map(f64::from).collect();

    let r = route_and_predict(&small, None, &rule, 10).unwrap();
    assert_eq!((r.gap_ev, r.source), (5.1, Source::Fallback));

    let p = preds_for(edge.id(), values.clone());
    let r = route_and_predict(&edge, Some(&p), &rule, 10).unwrap();
    assert_eq!((r.gap_ev, r.source), (11.5, Source::Ensemble));

    let p = preds_for(large.id(), values);
    let r = route_and_predict(&large, Some(&p), &rule, 10).unwrap();
    assert_eq!((r.gap_ev, r.source), (11.5, Source::Ensemble));

    let empty = LookupFallback::default();
    let rule = RoutingRule::new(4, &empty).unwrap();
    match route_and_predict(&small, None, &rule, 10) {
        Err(Error::Routing { sample_id }) => assert_eq!(sample_id, small.id()),
        other => panic!("expected routing error, got {other:?}"),
    }
    assert!(RoutingRule::new(0, &empty).is_err());
}
