use proptest::prelude::*;

use slotnav_core::decoder::{decode_iob, decode_span_baseline, decode_turn, navigate, span_invalid_fraction, SPAN_CAP};
use slotnav_core::schema::{apply_decisions, DialogueState, Ontology, SlotDecision};
use slotnav_core::text::{b_slot, i_slot, serialize_input, InputLayout, SerializedInput, Vocab};

fn fixture() -> (Ontology, SerializedInput) {
    let o = Ontology::new(["food", "area", "price"], ["dontcare", "none"]).unwrap();
    let v = Vocab::build(["any food preference ; i want thai food in the north"], 1).unwrap();
    let prev = DialogueState::from_values(vec![Some("thai".into()), None, Some("cheap".into())]);
    let history = [("hello", "i need a place to eat")];
    let layout = InputLayout {
        history: 1,
        ..InputLayout::default()
    };
    let ser = serialize_input(&o, &v, &prev, &history, "any food preference", "i want thai food in the north", &layout)
        .unwrap();
    (o, ser)
}

#[test]
fn closed_form_matches_enumeration() {
    for len in 0..40 {
        for cap in 1..14 {
            let mut bad = 0;
            for s in 0..len {
                for e in 0..len {
                    if e < s || e - s >= cap {
                        bad += 1;
                    }
                }
            }
            let want = if len == 0 { 0.0 } else { bad as f64 / (len * len) as f64 };
            assert!((span_invalid_fraction(len, cap) - want).abs() < 1e-15, "len {len} cap {cap}");
        }
    }
}

#[test]
fn ties_go_to_the_lowest_label() {
    assert_eq!(decode_iob(&[vec![0.2, 0.4, 0.4], vec![1.0, 1.0, 0.0]]), vec![1, 0]);
}

#[test]
fn coreference_reads_the_previous_state() {
    let prev = DialogueState::from_values(vec![Some("a".into()), Some("b".into()), None]);
    let next = apply_decisions(
        &prev,
        &[
            SlotDecision::Corefer { source: 1 },
            SlotDecision::Corefer { source: 0 },
            SlotDecision::Corefer { source: 0 },
        ],
    )
    .unwrap();
    assert_eq!(next.values(), &[Some("b".into()), Some("a".into()), Some("a".into())]);
    let kept = apply_decisions(&prev, &[SlotDecision::Corefer { source: 2 }, SlotDecision::NoOp, SlotDecision::Carryover])
        .unwrap();
    assert_eq!(kept, prev);
    assert!(apply_decisions(&prev, &[SlotDecision::NoOp]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn navigation_is_well_formed(labels in prop::collection::vec(0usize..7, 64), pointer in 0usize..64, slot in 0usize..3) {
        let (o, ser) = fixture();
        let iob = &labels[..ser.dial.len()];
        let pointer = pointer % ser.len();
        match navigate(pointer, iob, &ser, &o, slot) {
            SlotDecision::Update { value, start, len } => {
                prop_assert_eq!(start, pointer);
                prop_assert!(ser.is_content(start));
                let owner = b_slot(iob[start - ser.dial.start]);
                prop_assert!(owner.is_some());
                for i in start + 1..start + len {
                    prop_assert!(ser.is_content(i));
                    prop_assert_eq!(i_slot(iob[i - ser.dial.start]), owner);
                }
                // maximal: the next token does not continue the span
                let end = start + len;
                prop_assert!(end <= ser.dial.end);
                if end < ser.dial.end {
                    prop_assert!(!ser.is_content(end) || i_slot(iob[end - ser.dial.start]) != owner);
                }
                prop_assert_eq!(value, ser.tokens[start..end].join(" "));
            }
            SlotDecision::Carryover => prop_assert_eq!(ser.slot_anchors[slot], pointer),
            SlotDecision::Corefer { source } => {
                prop_assert_ne!(source, slot);
                prop_assert_eq!(ser.slot_anchors[source], pointer);
            }
            SlotDecision::Appendix { value } => {
                let j = ser.appd_anchors.iter().position(|&a| a == pointer).unwrap();
                prop_assert_eq!(&value, &o.appendix()[j]);
            }
            SlotDecision::NoOp => {
                let hit = ser.is_content(pointer) && b_slot(iob[pointer - ser.dial.start]).is_some();
                prop_assert!(!hit);
                prop_assert!(!ser.slot_anchors.contains(&pointer) && !ser.appd_anchors.contains(&pointer));
            }
        }
    }

    #[test]
    fn decoded_state_only_changes_where_decided(
        labels in prop::collection::vec(0usize..7, 64),
        pointers in prop::collection::vec(0usize..64, 3),
    ) {
        let (o, ser) = fixture();
        let iob = &labels[..ser.dial.len()];
        let pointers: Vec<usize> = pointers.iter().map(|p| p % ser.len()).collect();
        let prev = DialogueState::from_values(vec![Some("thai".into()), None, Some("cheap".into())]);
        let (decisions, next) = decode_turn(iob, &pointers, &ser, &o, &prev).unwrap();
        for (n, d) in decisions.iter().enumerate() {
            if matches!(d, SlotDecision::Carryover | SlotDecision::NoOp) {
                prop_assert_eq!(next.get(n), prev.get(n));
            }
        }
    }

    #[test]
    fn span_baseline_accepts_exactly_the_valid_pairs(s in 0usize..64, e in 0usize..64) {
        let (_, ser) = fixture();
        let (d, valid) = decode_span_baseline(s, e, &ser, SPAN_CAP);
        let want = s <= e && ser.dial.contains(&s) && ser.dial.contains(&e) && e - s < SPAN_CAP;
        prop_assert_eq!(valid, want);
        match d {
            SlotDecision::Update { start, len, .. } => {
                prop_assert!(valid);
                prop_assert_eq!((start, len), (s, e - s + 1));
            }
            other => {
                prop_assert!(!valid);
                prop_assert_eq!(other, SlotDecision::NoOp);
            }
        }
    }
}
