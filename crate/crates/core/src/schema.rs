//! Slot ontology, dialogue transcripts, and the fixed-size dialogue state.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Surface form of an unset slot value inside serialized inputs.
pub const NULL_TOKEN: &str = "[NULL]";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("ontology has no slots")]
    NoSlots,
    #[error("empty slot name at position {0}")]
    EmptySlot(usize),
    #[error("duplicate slot name {0:?}")]
    DuplicateSlot(String),
    #[error("empty appendix value at position {0}")]
    EmptyAppendix(usize),
    #[error("duplicate appendix value {0:?}")]
    DuplicateAppendix(String),
    #[error("expected {expected} slot decisions, got {got}")]
    DecisionCount { expected: usize, got: usize },
    #[error("coreference source slot {0} out of range")]
    CorefOutOfRange(usize),
    #[error("states have {0} and {1} slots")]
    OntologyMismatch(usize, usize),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
}

/// Ordered slot names plus the special appendix values (e.g. `dontcare`).
///
/// Slot index `n` is a stable identity for the lifetime of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOntology", into = "RawOntology")]
pub struct Ontology {
    slots: Vec<String>,
    appendix: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawOntology {
    slots: Vec<String>,
    appendix: Vec<String>,
}

impl TryFrom<RawOntology> for Ontology {
    type Error = SchemaError;

    fn try_from(raw: RawOntology) -> Result<Self, Self::Error> {
        Ontology::new(raw.slots, raw.appendix)
    }
}

impl From<Ontology> for RawOntology {
    fn from(o: Ontology) -> Self {
        RawOntology {
            slots: o.slots,
            appendix: o.appendix,
        }
    }
}

impl Ontology {
    pub fn new<S: Into<String>, A: Into<String>>(
        slots: impl IntoIterator<Item = S>,
        appendix: impl IntoIterator<Item = A>,
    ) -> Result<Self, SchemaError> {
        let slots: Vec<String> = slots.into_iter().map(Into::into).collect();
        let appendix: Vec<String> = appendix.into_iter().map(Into::into).collect();
        if slots.is_empty() {
            return Err(SchemaError::NoSlots);
        }
        let mut seen = HashSet::new();
        for (i, s) in slots.iter().enumerate() {
            if s.trim().is_empty() {
                return Err(SchemaError::EmptySlot(i));
            }
            if !seen.insert(s.as_str()) {
                return Err(SchemaError::DuplicateSlot(s.clone()));
            }
        }
        let mut seen = HashSet::new();
        for (i, a) in appendix.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(SchemaError::EmptyAppendix(i));
            }
            if !seen.insert(a.as_str()) {
                return Err(SchemaError::DuplicateAppendix(a.clone()));
            }
        }
        Ok(Self { slots, appendix })
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn appendix(&self) -> &[String] {
        &self.appendix
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_appendix(&self) -> usize {
        self.appendix.len()
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == name)
    }

    pub fn appendix_index(&self, value: &str) -> Option<usize> {
        let v = normalize_value(value);
        self.appendix.iter().position(|a| normalize_value(a) == v)
    }

    /// Number of IOB labels: a B and an I label per slot plus O.
    pub fn iob_label_count(&self) -> usize {
        2 * self.slots.len() + 1
    }

    pub fn empty_state(&self) -> DialogueState {
        DialogueState {
            values: vec![None; self.slots.len()],
        }
    }
}

/// Canonical comparison form: the space-joined token sequence, so values
/// compare equal to their extracted surface form.
pub fn normalize_value(v: &str) -> String {
    crate::text::tokenize(v).join(" ")
}

/// Fixed-size slot memory. `None` is the NULL placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueState {
    values: Vec<Option<String>>,
}

impl DialogueState {
    pub fn from_values(values: Vec<Option<String>>) -> Self {
        Self { values }
    }

    /// Builds a state from a `slot name -> value` map; absent slots are NULL.
    pub fn from_map(
        ontology: &Ontology,
        map: &BTreeMap<String, String>,
    ) -> Result<Self, SchemaError> {
        let mut state = ontology.empty_state();
        for (slot, value) in map {
            let n = ontology
                .slot_index(slot)
                .ok_or_else(|| SchemaError::UnknownSlot(slot.clone()))?;
            if value != NULL_TOKEN {
                state.values[n] = Some(value.clone());
            }
        }
        Ok(state)
    }

    pub fn to_map(&self, ontology: &Ontology) -> BTreeMap<String, String> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(n, v)| v.as_ref().map(|v| (ontology.slots()[n].clone(), v.clone())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, slot: usize) -> Option<&str> {
        self.values[slot].as_deref()
    }

    pub fn set(&mut self, slot: usize, value: Option<String>) {
        self.values[slot] = value;
    }

    pub fn values(&self) -> &[Option<String>] {
        &self.values
    }

    pub fn slot_matches(&self, other: &DialogueState, slot: usize) -> bool {
        match (&self.values[slot], &other.values[slot]) {
            (None, None) => true,
            (Some(a), Some(b)) => normalize_value(a) == normalize_value(b),
            _ => false,
        }
    }
}

/// Compares two states slot by slot under value normalization.
pub fn states_equal(a: &DialogueState, b: &DialogueState) -> Result<bool, SchemaError> {
    if a.len() != b.len() {
        return Err(SchemaError::OntologyMismatch(a.len(), b.len()));
    }
    Ok((0..a.len()).all(|n| a.slot_matches(b, n)))
}

/// Per-slot action decoded from a pointer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotDecision {
    /// Value extracted from the dialogue content at `start..start + len`.
    Update { value: String, start: usize, len: usize },
    Carryover,
    /// Copy the previous value of another slot.
    Corefer { source: usize },
    Appendix { value: String },
    NoOp,
}

/// Applies one decision per slot to the previous state.
///
/// Coreference reads the previous state, never the partially updated one;
/// a coreference to a NULL slot leaves the target unchanged.
pub fn apply_decisions(
    prev: &DialogueState,
    decisions: &[SlotDecision],
) -> Result<DialogueState, SchemaError> {
    if decisions.len() != prev.len() {
        return Err(SchemaError::DecisionCount {
            expected: prev.len(),
            got: decisions.len(),
        });
    }
    let mut next = prev.clone();
    for (n, d) in decisions.iter().enumerate() {
        match d {
            SlotDecision::Update { value, .. } => next.values[n] = Some(value.clone()),
            SlotDecision::Appendix { value } => next.values[n] = Some(value.clone()),
            SlotDecision::Corefer { source } => {
                let src = prev
                    .values
                    .get(*source)
                    .ok_or(SchemaError::CorefOutOfRange(*source))?;
                if src.is_some() {
                    next.values[n] = src.clone();
                }
            }
            SlotDecision::Carryover | SlotDecision::NoOp => {}
        }
    }
    Ok(next)
}

/// Which utterance of a turn a span lies in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    System,
    User,
}

/// Token-level location of a slot value inside one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub slot: usize,
    pub side: Side,
    pub start: usize,
    pub len: usize,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub system: String,
    pub user: String,
    /// Gold state after this turn.
    pub state: DialogueState,
    pub spans: Vec<SpanAnnotation>,
    /// target slot -> source slot coreference marks for this turn.
    pub coref: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Gold state before turn `t`.
    pub fn prev_state(&self, ontology: &Ontology, t: usize) -> DialogueState {
        if t == 0 {
            ontology.empty_state()
        } else {
            self.turns[t - 1].state.clone()
        }
    }

    /// Utterance pairs only; rollout evaluation consumes this view.
    pub fn utterances(&self) -> Vec<(&str, &str)> {
        self.turns
            .iter()
            .map(|t| (t.system.as_str(), t.user.as_str()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn food_area() -> Ontology {
        Ontology::new(["food", "area"], ["dontcare"]).unwrap()
    }

    fn state(vals: &[Option<&str>]) -> DialogueState {
        DialogueState::from_values(vals.iter().map(|v| v.map(String::from)).collect())
    }

    #[test]
    fn ontology_construction() {
        let o = food_area();
        assert_eq!((o.num_slots(), o.num_appendix()), (2, 1));
        assert_eq!(
            Ontology::new(["food", "food"], ["dontcare"]),
            Err(SchemaError::DuplicateSlot("food".into()))
        );
        assert_eq!(
            Ontology::new(Vec::<String>::new(), ["dontcare"]),
            Err(SchemaError::NoSlots)
        );
        assert_eq!(Ontology::new(["a", " "], ["x"]), Err(SchemaError::EmptySlot(1)));
        assert_eq!(
            Ontology::new(["a"], ["x", "x"]),
            Err(SchemaError::DuplicateAppendix("x".into()))
        );
        let names: Vec<String> = (b'a'..=b'k').map(|c| (c as char).to_string()).collect();
        assert_eq!(Ontology::new(names, ["dontcare"]).unwrap().num_slots(), 11);
    }

    #[test]
    fn empty_state_is_all_null() {
        let s = food_area().empty_state();
        assert_eq!(s, state(&[None, None]));
        let five = Ontology::new(["a", "b", "c", "d", "e"], ["dontcare"]).unwrap();
        assert_eq!(five.empty_state().len(), 5);
    }

    #[test]
    fn apply_examples() {
        let prev = state(&[Some("thai"), None]);
        let next = apply_decisions(
            &prev,
            &[
                SlotDecision::NoOp,
                SlotDecision::Update {
                    value: "north".into(),
                    start: 0,
                    len: 1,
                },
            ],
        )
        .unwrap();
        assert_eq!(next, state(&[Some("thai"), Some("north")]));

        let next = apply_decisions(
            &prev,
            &[SlotDecision::Carryover, SlotDecision::Corefer { source: 0 }],
        )
        .unwrap();
        assert_eq!(next, state(&[Some("thai"), Some("thai")]));

        let prev = state(&[None]);
        let next = apply_decisions(
            &prev,
            &[SlotDecision::Appendix {
                value: "dontcare".into(),
            }],
        )
        .unwrap();
        assert_eq!(next, state(&[Some("dontcare")]));
    }

    #[test]
    fn apply_errors() {
        let prev = state(&[Some("thai"), None]);
        assert_eq!(
            apply_decisions(&prev, &[SlotDecision::NoOp]),
            Err(SchemaError::DecisionCount { expected: 2, got: 1 })
        );
        assert_eq!(
            apply_decisions(
                &prev,
                &[SlotDecision::Corefer { source: 5 }, SlotDecision::NoOp]
            ),
            Err(SchemaError::CorefOutOfRange(5))
        );
    }

    #[test]
    fn coref_to_null_keeps_value() {
        let prev = state(&[Some("thai"), None]);
        let next = apply_decisions(
            &prev,
            &[SlotDecision::Corefer { source: 1 }, SlotDecision::Carryover],
        )
        .unwrap();
        assert_eq!(next, prev);
    }

    #[test]
    fn coref_reads_previous_state() {
        // food updates and area copies food: area must get the OLD food value.
        let prev = state(&[Some("thai"), None]);
        let next = apply_decisions(
            &prev,
            &[
                SlotDecision::Update {
                    value: "greek".into(),
                    start: 0,
                    len: 1,
                },
                SlotDecision::Corefer { source: 0 },
            ],
        )
        .unwrap();
        assert_eq!(next, state(&[Some("greek"), Some("thai")]));
    }

    #[test]
    fn equality_normalizes() {
        // Hand-built normalization cases.
        let cases = [
            ("thai", "thai", true),
            ("Thai ", "thai", true),
            ("  THAI   food", "thai food", true),
            ("thai\tfood", "thai food", true),
            ("thaifood", "thai food", false),
            ("thai", "thai.", false),
        ];
        for (a, b, eq) in cases {
            assert_eq!(
                states_equal(&state(&[Some(a)]), &state(&[Some(b)])).unwrap(),
                eq,
                "{a:?} vs {b:?}"
            );
        }
        assert!(!states_equal(&state(&[Some("thai")]), &state(&[None])).unwrap());
        assert!(states_equal(&state(&[None]), &state(&[None])).unwrap());
        assert_eq!(
            states_equal(&state(&[None]), &state(&[None, None])),
            Err(SchemaError::OntologyMismatch(1, 2))
        );
    }

    #[test]
    fn state_map_round_trip() {
        let o = food_area();
        let s = state(&[Some("thai food"), None]);
        let m = s.to_map(&o);
        assert_eq!(DialogueState::from_map(&o, &m).unwrap(), s);
        let mut bad = BTreeMap::new();
        bad.insert("price".to_string(), "cheap".to_string());
        assert!(DialogueState::from_map(&o, &bad).is_err());
    }

    fn arb_state(n: usize) -> impl Strategy<Value = DialogueState> {
        prop::collection::vec(prop::option::of("[a-z]{1,6}"), n).prop_map(DialogueState::from_values)
    }

    fn arb_decision(n: usize) -> impl Strategy<Value = SlotDecision> {
        prop_oneof![
            Just(SlotDecision::Carryover),
            Just(SlotDecision::NoOp),
            (0..n).prop_map(|source| SlotDecision::Corefer { source }),
            "[a-z]{1,6}".prop_map(|value| SlotDecision::Appendix { value }),
            "[a-z]{1,6}".prop_map(|value| SlotDecision::Update {
                value,
                start: 0,
                len: 1
            }),
        ]
    }

    proptest! {
        #[test]
        fn all_carryover_is_identity(s in arb_state(6)) {
            let d = vec![SlotDecision::Carryover; 6];
            prop_assert_eq!(apply_decisions(&s, &d).unwrap(), s);
        }

        #[test]
        fn updates_never_produce_null(
            s in arb_state(5),
            d in prop::collection::vec(arb_decision(5), 5),
        ) {
            let next = apply_decisions(&s, &d).unwrap();
            for (n, dec) in d.iter().enumerate() {
                match dec {
                    SlotDecision::Update { .. } | SlotDecision::Appendix { .. } => {
                        prop_assert!(next.get(n).is_some())
                    }
                    SlotDecision::Corefer { source } if s.get(*source).is_some() => {
                        prop_assert!(next.get(n).is_some())
                    }
                    _ => {}
                }
            }
        }

        #[test]
        fn processing_order_is_irrelevant(
            s in arb_state(5),
            d in prop::collection::vec(arb_decision(5), 5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let expected = apply_decisions(&s, &d).unwrap();
            // Apply one slot at a time in a permuted order, each step reading `s`.
            let mut next = s.clone();
            for &n in &perm {
                let mut single = vec![SlotDecision::Carryover; 5];
                single[n] = d[n].clone();
                let v = apply_decisions(&s, &single).unwrap();
                next.set(n, v.get(n).map(String::from));
            }
            prop_assert_eq!(next, expected);
        }
    }
}
