use proptest::prelude::*;
use steerlab::conditions::{
    concat_conditions, encode_layout, encode_ring_label, parse_layout_boxes, sample_condition_level, Condition,
    LayoutBox,
};

fn arb_box(h: usize, w: usize) -> impl Strategy<Value = LayoutBox> {
    (1u32..20, 0..w, 0..h).prop_flat_map(move |(label, x0, y0)| {
        (Just(label), Just(x0), Just(y0), x0 + 1..=w, y0 + 1..=h)
            .prop_map(|(label, x0, y0, x1, y1)| LayoutBox { label, x0, y0, x1, y1 })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn layout_matches_brute_force(boxes in prop::collection::vec(arb_box(16, 16), 0..=10)) {
        let Condition::Layout(g) = encode_layout(&boxes, 16, 16).unwrap() else { unreachable!() };
        for y in 0..16 {
            for x in 0..16 {
                let covering: Vec<_> = boxes.iter().filter(|b| b.x0 <= x && x < b.x1 && b.y0 <= y && y < b.y1).collect();
                let sum: u32 = covering.iter().map(|b| b.label).sum();
                prop_assert_eq!(g.at(x, y), (sum, covering.len() as u32));
            }
        }
    }

    #[test]
    fn layout_ignores_box_order(boxes in prop::collection::vec(arb_box(12, 9), 0..=10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = boxes.clone();
        shuffled.shuffle(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
        prop_assert_eq!(encode_layout(&boxes, 12, 9).unwrap(), encode_layout(&shuffled, 12, 9).unwrap());
    }

    #[test]
    fn one_hot_round_trip(classes in 1usize..=16, pick in any::<prop::sample::Index>()) {
        let k = pick.index(classes);
        let v = encode_ring_label(k, classes).unwrap().flatten();
        prop_assert_eq!(v.len(), classes);
        prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        let argmax = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(argmax, k);
    }
}

#[test]
fn overlapping_boxes_golden() {
    let boxes = parse_layout_boxes("# two boxes sharing one corner\n3 0 0 2 2\n5 1 1 3 3\n").unwrap();
    let Condition::Layout(g) = encode_layout(&boxes, 3, 3).unwrap() else { unreachable!() };
    let sums: Vec<u32> = (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).map(|(x, y)| g.at(x, y).0).collect();
    let counts: Vec<u32> = (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).map(|(x, y)| g.at(x, y).1).collect();
    assert_eq!(sums, vec![3, 3, 0, 3, 8, 5, 0, 5, 5]);
    assert_eq!(counts, vec![1, 1, 0, 1, 2, 1, 0, 1, 1]);
}

#[test]
fn bad_boxes_are_rejected() {
    let b = |label, x0, y0, x1, y1| LayoutBox { label, x0, y0, x1, y1 };
    assert!(encode_layout(&[b(1, 0, 0, 9, 1)], 8, 8).is_err());
    assert!(encode_layout(&[b(1, 3, 0, 3, 1)], 8, 8).is_err());
    assert!(encode_layout(&[b(0, 0, 0, 1, 1)], 8, 8).is_err());
    assert!(parse_layout_boxes("1 2 3").is_err());
    assert!(encode_ring_label(2, 2).is_err());
}

#[test]
fn concatenation_preserves_order() {
    let a = encode_ring_label(1, 3).unwrap();
    let b = encode_layout(&[LayoutBox { label: 2, x0: 0, y0: 0, x1: 1, y1: 1 }], 1, 2).unwrap();
    let c = concat_conditions(vec![a.clone(), b.clone()]).unwrap();
    assert_eq!(c.dim(), 3 + 4);
    assert_eq!(c.flatten(), vec![0.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0]);
    let swapped = concat_conditions(vec![b, a]).unwrap();
    assert_ne!(c.flatten(), swapped.flatten());
    assert!(concat_conditions(vec![]).is_err());
}

#[test]
fn condition_levels_are_drawn_evenly() {
    let levels: Vec<_> = (0..4).map(|k| encode_ring_label(k, 4).unwrap()).collect();
    let mut counts = [0usize; 4];
    for seed in 0..4000 {
        let Condition::Label { index, .. } = sample_condition_level(&levels, seed).unwrap() else { unreachable!() };
        counts[index] += 1;
    }
    for c in counts {
        assert!((c as f64 - 1000.0).abs() < 3.5 * (4000.0f64 * 0.25 * 0.75).sqrt(), "{counts:?}");
    }
    assert!(sample_condition_level(&[], 0).is_err());
}

#[test]
fn condition_json_round_trip() {
    let c = concat_conditions(vec![
        encode_ring_label(0, 2).unwrap(),
        encode_layout(&[LayoutBox { label: 4, x0: 1, y0: 0, x1: 2, y1: 2 }], 2, 2).unwrap(),
    ])
    .unwrap();
    let back: Condition = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}
