use nfad_core::dataeval::{make_moons, roc_auc, Label, Standardizer};
use nfad_core::flows::{CouplingKind, FlowSpec};
use nfad_core::ndmath::RngState;
use nfad_core::Mat;
use proptest::prelude::*;

fn brute_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Normal && *lj == Label::Anomaly {
                pairs += 1;
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(-5i32..5, n).prop_map(|v| v.into_iter().map(|k| k as f64 * 0.25).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter_map("both classes", |(s, b)| {
                let labels: Vec<Label> = b.into_iter().map(|x| if x { Label::Normal } else { Label::Anomaly }).collect();
                let has_both = labels.contains(&Label::Normal) && labels.contains(&Label::Anomaly);
                has_both.then_some((s, labels))
            })
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_counting((s, l) in scored_labels()) {
        prop_assert_eq!(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l));
    }

    #[test]
    fn auc_is_invariant_under_increasing_maps((s, l) in scored_labels(), c in 0.01f64..100.0) {
        let base = roc_auc(&s, &l).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        let warped: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() + v.powi(3)).collect();
        prop_assert_eq!(roc_auc(&scaled, &l).unwrap(), base);
        prop_assert_eq!(roc_auc(&warped, &l).unwrap(), base);
    }

    #[test]
    fn standardizer_round_trip(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut rng = RngState::new(seed);
        let x = Mat::from_shape_fn((40, 3), |_| shift + scale * rng.std_normal());
        let s = Standardizer::fit(&x).unwrap();
        let back = s.inverse_transform(&s.transform(&x).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn moons_class_counts_differ_by_at_most_one(n in 2usize..500, seed in any::<u64>()) {
        let ds = make_moons(n, 0.1, &mut RngState::new(seed)).unwrap();
        let a = ds.count(Label::Normal) as i64;
        let b = ds.count(Label::Anomaly) as i64;
        prop_assert!((a - b).abs() <= 1 && a + b == n as i64);
    }

    #[test]
    fn random_stacks_invert(seed in any::<u64>(), affine in any::<bool>(), dim in 2usize..5) {
        let mut rng = RngState::new(seed);
        let kind = if affine { CouplingKind::Affine } else { CouplingKind::Rqs };
        let mut stack = FlowSpec { kind, layers: 4, hidden: vec![8], ..FlowSpec::default() }.build(dim, &mut rng).unwrap();
        stack.perturb_params(0.3, &mut rng);
        let z = nfad_core::ndmath::sample_std_normal(32, dim, &mut rng);
        let (x, ld) = stack.forward(&z).unwrap();
        let (zb, ldi) = stack.inverse(&x).unwrap();
        for (a, b) in zb.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in ld.iter().zip(&ldi) {
            prop_assert!((a + b).abs() < 1e-8);
        }
    }
}
