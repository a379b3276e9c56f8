use std::collections::{BTreeMap, BTreeSet};

use biaswap_core::bias_partition::Partition;
use biaswap_core::bias_swap_augment::*;
use biaswap_core::dataset_forge::{Image, LabeledExample};
use proptest::prelude::*;

fn example(id: usize, target: usize) -> LabeledExample {
    LabeledExample {
        example_id: format!("x{id:04}"),
        image: Image::zeros(2, 2, 3),
        target,
        gt_bias_flag: Some(false),
        pseudo_bias_label: None,
        bias_attribute: None,
        provenance: None,
    }
}

/// Examples with `(target, contrary)` flags, each class guaranteed one contrary member.
fn labelled() -> impl Strategy<Value = Vec<(usize, bool)>> {
    prop::collection::vec((0usize..4, prop::bool::weighted(0.2)), 0..120).prop_map(|mut v| {
        for c in 0..4 {
            v.push((c, true));
            v.push((c, false));
        }
        v
    })
}

fn build(flags: &[(usize, bool)]) -> (Vec<LabeledExample>, Partition) {
    let examples: Vec<_> = flags.iter().enumerate().map(|(i, (t, _))| example(i, *t)).collect();
    let mut p = Partition { threshold: 0.5, guiding_ids: BTreeSet::new(), contrary_ids: BTreeSet::new(), scores: BTreeMap::new() };
    for (e, (_, c)) in examples.iter().zip(flags) {
        let set = if *c { &mut p.contrary_ids } else { &mut p.guiding_ids };
        set.insert(e.example_id.clone());
        p.scores.insert(e.example_id.clone(), if *c { 1.0 } else { 0.0 });
    }
    (examples, p)
}

proptest! {
    #[test]
    fn default_pairs_are_guiding_content_contrary_style(flags in labelled(), ratio in 0.1f64..3.0, seed in any::<u64>()) {
        let (examples, p) = build(&flags);
        let plan = AugmentationPlan { augment_ratio: ratio, seed, ..Default::default() };
        let pairs = build_pairs(&p, &examples, &plan).unwrap();
        let target: BTreeMap<_, _> = examples.iter().map(|e| (e.example_id.clone(), e.target)).collect();
        let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in &pairs {
            prop_assert!(p.guiding_ids.contains(&pair.content_id));
            prop_assert!(p.contrary_ids.contains(&pair.style_id));
            prop_assert_eq!(target[&pair.content_id], target[&pair.style_id]);
            *uses.entry(&pair.content_id).or_default() += 1;
        }
        for id in &p.guiding_ids {
            let n = uses.get(id.as_str()).copied().unwrap_or(0);
            prop_assert!(n == ratio.floor() as usize || n == ratio.ceil() as usize);
        }
        prop_assert_eq!(build_pairs(&p, &examples, &plan).unwrap(), pairs);
    }

    #[test]
    fn random_pairs_keep_the_pair_count(flags in labelled(), ratio in 0.1f64..3.0, seed in any::<u64>()) {
        let (examples, p) = build(&flags);
        let full = AugmentationPlan { augment_ratio: ratio, seed, ..Default::default() };
        let c1 = AugmentationPlan { pairing_policy: PairingPolicy::RandomPairs, ..full.clone() };
        let a = build_pairs(&p, &examples, &full).unwrap();
        let b = build_pairs(&p, &examples, &c1).unwrap();
        let g = p.guiding_ids.len() as f64;
        prop_assert_eq!(b.len(), (ratio * g).round() as usize);
        let per_class: usize = (0..4)
            .map(|c| {
                let n = examples.iter().filter(|e| e.target == c && p.guiding_ids.contains(&e.example_id)).count();
                (ratio * n as f64).round() as usize
            })
            .sum();
        prop_assert_eq!(a.len(), per_class);
    }
}

#[test]
fn class_without_contrary_examples_is_reported() {
    let (examples, mut p) = build(&[(0, false), (0, true), (1, false), (1, true)]);
    p.contrary_ids.remove("x0003");
    p.guiding_ids.insert("x0003".into());
    match build_pairs(&p, &examples, &AugmentationPlan::default()) {
        Err(biaswap_core::Error::EmptyContraryPool(classes)) => assert_eq!(classes, vec![1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pairing_policy_names_round_trip() {
    for p in [PairingPolicy::GuidingContentContraryStyle, PairingPolicy::RandomPairs] {
        assert_eq!(PairingPolicy::parse(p.name()).unwrap(), p);
    }
    assert!(PairingPolicy::parse("nope").is_err());
}
