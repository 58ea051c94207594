//! Slot tagging navigation and the span-pointer baseline decoder.

use crate::model::{argmax, GateKind, HeadMode, ModelConfig, TurnLogits};
use crate::schema::{apply_decisions, DialogueState, Ontology, SchemaError, SlotDecision};
use crate::text::{b_slot, i_slot, SerializedInput};

/// Longest span the baseline decoder accepts.
pub const SPAN_CAP: usize = 10;

/// Per-token argmax over IOB distributions (or logits); ties go to the lowest label.
pub fn decode_iob(rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter().map(|r| argmax(r)).collect()
}

/// Turns one slot's pointer into a decision.
///
/// `iob` holds one label per dialogue-content token. Only utterance tokens
/// tagged `-B` are hits; the extracted value then runs right over
/// consecutive utterance tokens tagged `-I` of the same slot.
pub fn navigate(
    pointer: usize,
    iob: &[usize],
    ser: &SerializedInput,
    ontology: &Ontology,
    slot: usize,
) -> SlotDecision {
    if ser.dial.contains(&pointer) {
        let rel = pointer - ser.dial.start;
        let Some(owner) = iob.get(rel).copied().and_then(b_slot) else {
            return SlotDecision::NoOp;
        };
        if !ser.is_content(pointer) {
            return SlotDecision::NoOp;
        }
        let mut end = pointer + 1;
        while end < ser.dial.end
            && ser.is_content(end)
            && iob.get(end - ser.dial.start).copied().and_then(i_slot) == Some(owner)
        {
            end += 1;
        }
        return SlotDecision::Update {
            value: ser.tokens[pointer..end].join(" "),
            start: pointer,
            len: end - pointer,
        };
    }
    if let Some(m) = ser.slot_anchors.iter().position(|&a| a == pointer) {
        return if m == slot {
            SlotDecision::Carryover
        } else {
            SlotDecision::Corefer { source: m }
        };
    }
    if let Some(j) = ser.appd_anchors.iter().position(|&a| a == pointer) {
        return SlotDecision::Appendix {
            value: ontology.appendix()[j].clone(),
        };
    }
    SlotDecision::NoOp
}

/// Navigates every slot and applies the decisions to `prev`.
pub fn decode_turn(
    iob: &[usize],
    pointers: &[usize],
    ser: &SerializedInput,
    ontology: &Ontology,
    prev: &DialogueState,
) -> Result<(Vec<SlotDecision>, DialogueState), SchemaError> {
    let decisions: Vec<SlotDecision> = pointers
        .iter()
        .enumerate()
        .map(|(n, &p)| navigate(p, iob, ser, ontology, n))
        .collect();
    let state = apply_decisions(prev, &decisions)?;
    Ok((decisions, state))
}

/// Decodes a start/end pointer pair (absolute indices). Invalid pairs
/// become no-ops with `valid = false`.
pub fn decode_span_baseline(
    start: usize,
    end: usize,
    ser: &SerializedInput,
    cap: usize,
) -> (SlotDecision, bool) {
    let valid = start <= end
        && ser.dial.contains(&start)
        && ser.dial.contains(&end)
        && end - start < cap;
    if !valid {
        return (SlotDecision::NoOp, false);
    }
    (
        SlotDecision::Update {
            value: ser.tokens[start..=end].join(" "),
            start,
            len: end - start + 1,
        },
        true,
    )
}

/// Share of (start, end) pairs drawn uniformly from a dialogue range of
/// `len` tokens that the span decoder rejects.
pub fn span_invalid_fraction(len: usize, cap: usize) -> f64 {
    if len == 0 {
        return 0.0;
    }
    let reversed = len * (len - 1) / 2;
    let too_long = if len > cap {
        (len - cap) * (len - cap + 1) / 2
    } else {
        0
    };
    (reversed + too_long) as f64 / (len * len) as f64
}

/// Everything decoded from one turn's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnDecode {
    pub decisions: Vec<SlotDecision>,
    pub state: DialogueState,
    /// Argmax IOB labels over the dialogue content, when tagging is on.
    pub iob: Option<Vec<usize>>,
    /// Argmax pointer per slot (navigation) or start index (span).
    pub pointers: Vec<usize>,
    /// Slots whose decision came from the extraction path.
    pub attempts: usize,
    /// Extraction attempts that produced an ill-formed span.
    pub invalid: usize,
}

/// Decodes the outputs of any model variant into a new state.
pub fn decode_logits(
    logits: &TurnLogits,
    config: &ModelConfig,
    ser: &SerializedInput,
    ontology: &Ontology,
    prev: &DialogueState,
) -> Result<TurnDecode, SchemaError> {
    let n_slots = ontology.num_slots();
    let k = ontology.num_appendix();
    let iob = logits.iob.as_ref().map(|rows| decode_iob(rows));
    let gate: Option<Vec<usize>> = logits.gate.as_ref().map(|g| decode_iob(g));
    let mut decisions = Vec::with_capacity(n_slots);
    let mut pointers = Vec::with_capacity(n_slots);
    let (mut attempts, mut invalid) = (0, 0);

    for n in 0..n_slots {
        let g = gate.as_ref().map(|g| g[n]);
        let gated = match (config.gate(), g) {
            (GateKind::None, _) | (_, None) | (_, Some(0)) => None,
            (_, Some(c)) if c <= k => Some(SlotDecision::Appendix {
                value: ontology.appendix()[c - 1].clone(),
            }),
            _ => Some(SlotDecision::Carryover),
        };
        let (pointer, extracted) = match config.mode {
            HeadMode::Navigation => {
                let row = &logits.pointer.as_ref().expect("navigation logits")[n];
                let p = argmax(row);
                let labels = iob.as_deref().unwrap_or(&[]);
                (p, navigate(p, labels, ser, ontology, n))
            }
            HeadMode::Span => {
                let (s, e) = logits.span.as_ref().expect("span logits");
                let s = ser.dial.start + argmax(&s[n]);
                let e = ser.dial.start + argmax(&e[n]);
                let (d, ok) = decode_span_baseline(s, e, ser, SPAN_CAP);
                if gated.is_none() && !ok {
                    invalid += 1;
                }
                (s, d)
            }
        };
        pointers.push(pointer);
        match gated {
            Some(d) => decisions.push(d),
            None => {
                if matches!(extracted, SlotDecision::Update { .. }) || config.mode == HeadMode::Span {
                    attempts += 1;
                }
                decisions.push(extracted);
            }
        }
    }
    let state = apply_decisions(prev, &decisions)?;
    Ok(TurnDecode {
        decisions,
        state,
        iob,
        pointers,
        attempts,
        invalid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{b_label, i_label, serialize_input, InputLayout, Vocab};

    fn worked() -> (Ontology, SerializedInput, Vec<usize>) {
        let o = Ontology::new(["food", "area"], ["dontcare"]).unwrap();
        let v = Vocab::build(["any food preference ; i want thai food"], 1).unwrap();
        let ser = serialize_input(
            &o,
            &v,
            &o.empty_state(),
            &[],
            "any food preference",
            "i want thai food",
            &InputLayout::default(),
        )
        .unwrap();
        let mut iob = vec![0; ser.dial.len()];
        iob[8 - 1] = b_label(0);
        iob[9 - 1] = i_label(0);
        (o, ser, iob)
    }

    #[test]
    fn navigate_cases() {
        let (o, ser, iob) = worked();
        assert_eq!(
            navigate(8, &iob, &ser, &o, 0),
            SlotDecision::Update {
                value: "thai food".into(),
                start: 8,
                len: 2
            }
        );
        assert_eq!(navigate(15, &iob, &ser, &o, 1), SlotDecision::Carryover);
        assert_eq!(navigate(7, &iob, &ser, &o, 0), SlotDecision::NoOp);
        assert_eq!(
            navigate(19, &iob, &ser, &o, 0),
            SlotDecision::Appendix {
                value: "dontcare".into()
            }
        );
        assert_eq!(navigate(11, &iob, &ser, &o, 1), SlotDecision::Corefer { source: 0 });
        // -I token and value tokens inside the state section are not hits
        assert_eq!(navigate(9, &iob, &ser, &o, 0), SlotDecision::NoOp);
        assert_eq!(navigate(14, &iob, &ser, &o, 0), SlotDecision::NoOp);
    }

    #[test]
    fn mixed_runs_stop_at_other_slot() {
        let (o, ser, mut iob) = worked();
        iob[9 - 1] = i_label(1);
        assert_eq!(
            navigate(8, &iob, &ser, &o, 0),
            SlotDecision::Update {
                value: "thai".into(),
                start: 8,
                len: 1
            }
        );
        // a B tag on the closing [SEP] is ignored, and spans never run into it
        let mut iob = vec![0; ser.dial.len()];
        iob[9] = b_label(0);
        assert_eq!(navigate(10, &iob, &ser, &o, 0), SlotDecision::NoOp);
        iob[8] = b_label(0);
        iob[9] = i_label(0);
        assert_eq!(
            navigate(9, &iob, &ser, &o, 0),
            SlotDecision::Update {
                value: "food".into(),
                start: 9,
                len: 1
            }
        );
    }

    #[test]
    fn decode_turn_cases() {
        let (o, ser, iob) = worked();
        let prev = o.empty_state();
        let (_, s) = decode_turn(&iob, &[11, 15], &ser, &o, &prev).unwrap();
        assert_eq!(s, prev);
        let (_, s) = decode_turn(&iob, &[8, 15], &ser, &o, &prev).unwrap();
        assert_eq!(s.values(), &[Some("thai food".to_string()), None]);
    }

    #[test]
    fn decode_iob_ties_and_one_hot() {
        assert_eq!(decode_iob(&[vec![0.2; 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]]), vec![0, 2]);
    }

    #[test]
    fn span_baseline_cases() {
        let (_, ser, _) = worked();
        assert_eq!(
            decode_span_baseline(8, 9, &ser, SPAN_CAP),
            (
                SlotDecision::Update {
                    value: "thai food".into(),
                    start: 8,
                    len: 2
                },
                true
            )
        );
        assert_eq!(decode_span_baseline(9, 8, &ser, SPAN_CAP), (SlotDecision::NoOp, false));
        // "food preference ; i want thai food" is 7 tokens: fine under cap 10, rejected under cap 5
        assert!(decode_span_baseline(3, 9, &ser, SPAN_CAP).1);
        assert!(!decode_span_baseline(3, 9, &ser, 5).1);
        assert!(decode_span_baseline(5, 9, &ser, 5).1);
        assert!(!decode_span_baseline(8, 11, &ser, SPAN_CAP).1);
    }

    #[test]
    fn invalid_fraction_matches_enumeration() {
        for len in 1..30 {
            for cap in 1..12 {
                let mut bad = 0;
                for s in 0..len {
                    for e in 0..len {
                        if s > e || e - s + 1 > cap {
                            bad += 1;
                        }
                    }
                }
                let want = bad as f64 / (len * len) as f64;
                assert!((span_invalid_fraction(len, cap) - want).abs() < 1e-15);
            }
        }
        // with no cap in play only reversed pairs count
        assert!((span_invalid_fraction(10, 10) - 9.0 / 20.0).abs() < 1e-15);
    }
}
