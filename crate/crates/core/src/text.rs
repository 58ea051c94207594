//! Tokenization, vocabulary, encoder-input serialization, gold labels, and
//! the training-time word/value dropout corruptions.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{normalize_value, DialogueState, Ontology, Side, SpanAnnotation, NULL_TOKEN};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SLOT: &str = "[SLOT]";
pub const APPD: &str = "[APPD]";
pub const NULL: &str = NULL_TOKEN;
pub const UNK: &str = "[UNK]";
pub const TURN_SEP: &str = ";";
pub const VALUE_SEP: &str = "-";

/// Reserved tokens in id order.
pub const RESERVED: [&str; 9] = [PAD, CLS, SEP, SLOT, APPD, NULL, UNK, TURN_SEP, VALUE_SEP];

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const SLOT_ID: u32 = 3;
pub const APPD_ID: u32 = 4;
pub const NULL_ID: u32 = 5;
pub const UNK_ID: u32 = 6;
pub const TURN_SEP_ID: u32 = 7;
pub const VALUE_SEP_ID: u32 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary is missing reserved token {0}")]
    MissingReserved(&'static str),
    #[error("vocabulary token {0:?} appears twice")]
    DuplicateToken(String),
    #[error("state and appendix sections need {needed} tokens but max_len is {max_len}")]
    Unsatisfiable { needed: usize, max_len: usize },
    #[error("previous state has {got} slots, ontology has {expected}")]
    StateMismatch { expected: usize, got: usize },
    #[error("span references unknown slot {0}")]
    UnknownSlot(usize),
    #[error("span {start}+{len} exceeds utterance of {tokens} tokens")]
    SpanOutOfRange {
        start: usize,
        len: usize,
        tokens: usize,
    },
    #[error("dropout probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Lowercases and splits on whitespace and punctuation; every punctuation
/// character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary with dense ids; the reserved tokens occupy ids 0..9.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = TextError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(TextError::MissingReserved(r));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens plus every token of `texts` seen at least `min_freq`
    /// times, ordered by descending frequency then lexically.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
    ) -> Result<Self, TextError> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(TextError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::try_from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }
}

/// Which input sections are present and how long the input may grow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub use_prev_state: bool,
    pub use_appendix: bool,
    /// Turns of dialogue history to prepend (`l`).
    pub history: usize,
    pub max_len: usize,
}

impl Default for InputLayout {
    fn default() -> Self {
        Self {
            use_prev_state: true,
            use_appendix: true,
            history: 0,
            max_len: 128,
        }
    }
}

/// Role of each position in a serialized input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    /// `[SEP]` and the system/user `;` separator inside the dialogue content.
    Marker,
    /// An utterance token.
    Content,
    SlotAnchor,
    SlotName,
    ValueSep,
    SlotValue,
    AppdAnchor,
    AppdValue,
}

/// Where an utterance landed inside the serialized sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    /// 0 for the current turn, 1 for the previous one, and so on.
    pub turns_back: usize,
    pub side: Side,
    /// Sequence index of the first kept token.
    pub seq_start: usize,
    /// Utterance tokens dropped from the left by truncation.
    pub skipped: usize,
    /// Utterance tokens kept.
    pub kept: usize,
}

impl Placement {
    fn seq_index(&self, tok: usize) -> Option<usize> {
        (tok >= self.skipped && tok < self.skipped + self.kept)
            .then(|| self.seq_start + tok - self.skipped)
    }
}

/// Encoder input: `[CLS]`, dialogue content, previous-state blocks and appendix blocks, with section bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedInput {
    pub ids: Vec<u32>,
    /// Surface tokens; word dropout changes `ids` but never these.
    pub tokens: Vec<String>,
    pub segments: Vec<u8>,
    pub kinds: Vec<TokenKind>,
    /// Dialogue content, from the first history token through the closing `[SEP]`.
    pub dial: Range<usize>,
    pub slot_anchors: Vec<usize>,
    /// Value token range inside each slot block.
    pub slot_values: Vec<Range<usize>>,
    pub appd_anchors: Vec<usize>,
    pub history_used: usize,
    pub placements: Vec<Placement>,
}

impl SerializedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_content(&self, i: usize) -> bool {
        self.kinds.get(i) == Some(&TokenKind::Content)
    }

    pub fn placement(&self, turns_back: usize, side: Side) -> Option<&Placement> {
        self.placements
            .iter()
            .find(|p| p.turns_back == turns_back && p.side == side)
    }

    fn utterance_text(&self, side: Side) -> String {
        self.placement(0, side)
            .map(|p| self.tokens[p.seq_start..p.seq_start + p.kept].join(" "))
            .unwrap_or_default()
    }

    /// Recovers the current system utterance, user utterance, and previous
    /// state (in normalized token form) from the layout.
    pub fn reconstruct(&self) -> (String, String, Vec<Option<String>>) {
        let state = self
            .slot_values
            .iter()
            .map(|r| {
                let toks = &self.tokens[r.clone()];
                if toks.len() == 1 && toks[0] == NULL && self.ids[r.start] == NULL_ID {
                    None
                } else {
                    Some(toks.join(" "))
                }
            })
            .collect();
        (
            self.utterance_text(Side::System),
            self.utterance_text(Side::User),
            state,
        )
    }
}

struct Builder<'v> {
    vocab: &'v Vocab,
    ids: Vec<u32>,
    tokens: Vec<String>,
    segments: Vec<u8>,
    kinds: Vec<TokenKind>,
}

impl Builder<'_> {
    fn push_special(&mut self, tok: &str, id: u32, seg: u8, kind: TokenKind) -> usize {
        self.ids.push(id);
        self.tokens.push(tok.to_string());
        self.segments.push(seg);
        self.kinds.push(kind);
        self.ids.len() - 1
    }

    fn push_word(&mut self, tok: &str, seg: u8, kind: TokenKind) -> usize {
        let id = self.vocab.id(tok);
        self.push_special(tok, id, seg, kind)
    }
}

fn state_section_len(ontology: &Ontology, prev: &DialogueState) -> usize {
    ontology
        .slots()
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let v = prev.get(n).map_or(1, |v| tokenize(v).len().max(1));
            2 + tokenize(s).len() + v
        })
        .sum()
}

fn appendix_section_len(ontology: &Ontology) -> usize {
    ontology
        .appendix()
        .iter()
        .map(|a| 1 + tokenize(a).len())
        .sum()
}

/// Serializes one turn. `history` holds earlier `(system, user)` pairs,
/// oldest first; only the last `layout.history` of them are used.
///
/// Over-long inputs drop history turns oldest-first, then drop utterance
/// tokens from the left of the current turn. State and appendix sections are
/// never truncated.
pub fn serialize_input(
    ontology: &Ontology,
    vocab: &Vocab,
    prev_state: &DialogueState,
    history: &[(&str, &str)],
    system: &str,
    user: &str,
    layout: &InputLayout,
) -> Result<SerializedInput, TextError> {
    if prev_state.len() != ontology.num_slots() {
        return Err(TextError::StateMismatch {
            expected: ontology.num_slots(),
            got: prev_state.len(),
        });
    }
    let tail = if layout.use_prev_state {
        state_section_len(ontology, prev_state)
    } else {
        0
    } + if layout.use_appendix {
        appendix_section_len(ontology)
    } else {
        0
    };
    let fixed = 1 + 3 + tail;
    if fixed > layout.max_len {
        return Err(TextError::Unsatisfiable {
            needed: fixed,
            max_len: layout.max_len,
        });
    }

    let sys = tokenize(system);
    let usr = tokenize(user);
    let take = layout.history.min(history.len());
    let mut hist: Vec<(Vec<String>, Vec<String>)> = history[history.len() - take..]
        .iter()
        .map(|(y, u)| (tokenize(y), tokenize(u)))
        .collect();
    let hist_len = |h: &[(Vec<String>, Vec<String>)]| -> usize {
        h.iter().map(|(y, u)| y.len() + 1 + u.len()).sum()
    };
    while !hist.is_empty() && fixed + hist_len(&hist) + sys.len() + usr.len() > layout.max_len {
        hist.remove(0);
    }
    let mut overflow = (fixed + hist_len(&hist) + sys.len() + usr.len()).saturating_sub(layout.max_len);
    let skip_sys = overflow.min(sys.len());
    overflow -= skip_sys;
    let skip_usr = overflow.min(usr.len());

    let mut b = Builder {
        vocab,
        ids: Vec::with_capacity(layout.max_len),
        tokens: Vec::with_capacity(layout.max_len),
        segments: Vec::with_capacity(layout.max_len),
        kinds: Vec::with_capacity(layout.max_len),
    };
    let mut placements = Vec::new();
    b.push_special(CLS, CLS_ID, 1, TokenKind::Cls);
    let dial_start = b.ids.len();
    let history_used = hist.len();
    for (i, (y, u)) in hist.iter().enumerate() {
        let turns_back = history_used - i;
        let start = b.ids.len();
        for t in y {
            b.push_word(t, 0, TokenKind::Content);
        }
        placements.push(Placement {
            turns_back,
            side: Side::System,
            seq_start: start,
            skipped: 0,
            kept: y.len(),
        });
        b.push_special(TURN_SEP, TURN_SEP_ID, 0, TokenKind::Marker);
        let start = b.ids.len();
        for t in u {
            b.push_word(t, 0, TokenKind::Content);
        }
        placements.push(Placement {
            turns_back,
            side: Side::User,
            seq_start: start,
            skipped: 0,
            kept: u.len(),
        });
    }
    b.push_special(SEP, SEP_ID, 1, TokenKind::Marker);
    let start = b.ids.len();
    for t in &sys[skip_sys..] {
        b.push_word(t, 1, TokenKind::Content);
    }
    placements.push(Placement {
        turns_back: 0,
        side: Side::System,
        seq_start: start,
        skipped: skip_sys,
        kept: sys.len() - skip_sys,
    });
    b.push_special(TURN_SEP, TURN_SEP_ID, 1, TokenKind::Marker);
    let start = b.ids.len();
    for t in &usr[skip_usr..] {
        b.push_word(t, 1, TokenKind::Content);
    }
    placements.push(Placement {
        turns_back: 0,
        side: Side::User,
        seq_start: start,
        skipped: skip_usr,
        kept: usr.len() - skip_usr,
    });
    b.push_special(SEP, SEP_ID, 1, TokenKind::Marker);
    let dial = dial_start..b.ids.len();

    let mut slot_anchors = Vec::new();
    let mut slot_values = Vec::new();
    if layout.use_prev_state {
        for (n, name) in ontology.slots().iter().enumerate() {
            slot_anchors.push(b.push_special(SLOT, SLOT_ID, 1, TokenKind::SlotAnchor));
            for t in tokenize(name) {
                b.push_word(&t, 1, TokenKind::SlotName);
            }
            b.push_special(VALUE_SEP, VALUE_SEP_ID, 1, TokenKind::ValueSep);
            let vstart = b.ids.len();
            match prev_state.get(n).map(tokenize).filter(|t| !t.is_empty()) {
                Some(toks) => {
                    for t in toks {
                        b.push_word(&t, 1, TokenKind::SlotValue);
                    }
                }
                None => {
                    b.push_special(NULL, NULL_ID, 1, TokenKind::SlotValue);
                }
            }
            slot_values.push(vstart..b.ids.len());
        }
    }
    let mut appd_anchors = Vec::new();
    if layout.use_appendix {
        for a in ontology.appendix() {
            appd_anchors.push(b.push_special(APPD, APPD_ID, 1, TokenKind::AppdAnchor));
            for t in tokenize(a) {
                b.push_word(&t, 1, TokenKind::AppdValue);
            }
        }
    }
    debug_assert!(b.ids.len() <= layout.max_len);
    Ok(SerializedInput {
        ids: b.ids,
        tokens: b.tokens,
        segments: b.segments,
        kinds: b.kinds,
        dial,
        slot_anchors,
        slot_values,
        appd_anchors,
        history_used,
        placements,
    })
}

/// IOB label id for the B tag of `slot`.
pub fn b_label(slot: usize) -> usize {
    1 + 2 * slot
}

/// IOB label id for the I tag of `slot`.
pub fn i_label(slot: usize) -> usize {
    2 + 2 * slot
}

/// Slot owning a B label, if the label is a B label.
pub fn b_slot(label: usize) -> Option<usize> {
    (label > 0 && label % 2 == 1).then(|| (label - 1) / 2)
}

/// Slot owning an I label, if the label is an I label.
pub fn i_slot(label: usize) -> Option<usize> {
    (label > 0 && label % 2 == 0).then(|| (label - 2) / 2)
}

/// How a slot's gold value is reached from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotTarget {
    Carryover,
    Appendix(usize),
    Corefer(usize),
    /// Absolute inclusive token range in the dialogue content.
    Extract { start: usize, end: usize },
    Unresolvable,
}

/// Supervision targets for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldLabels {
    /// One label per dialogue-content token (`2N+1` classes).
    pub iob: Vec<usize>,
    pub iob_mask: Vec<bool>,
    /// Pointer target per slot into the full sequence.
    pub positions: Vec<usize>,
    /// Whether `positions[n]` is a real hit (false: own anchor or `[CLS]` placeholder).
    pub resolvable: Vec<bool>,
    pub targets: Vec<SlotTarget>,
    /// Absolute ranges of annotated spans that fully survived serialization.
    pub value_spans: Vec<Range<usize>>,
}

fn contains_subsequence(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Derives IOB and pointer targets for a serialized turn.
///
/// `spans_by_turn[b]` holds the span annotations of the turn `b` steps back
/// (index 0 is the current turn); missing entries mean no annotations.
pub fn build_gold_labels(
    ser: &SerializedInput,
    ontology: &Ontology,
    spans_by_turn: &[&[SpanAnnotation]],
    prev: &DialogueState,
    curr: &DialogueState,
    coref: &BTreeMap<usize, usize>,
) -> Result<GoldLabels, TextError> {
    let n_slots = ontology.num_slots();
    let dial_len = ser.dial.len();
    let mut iob = vec![0usize; dial_len];
    let mut iob_mask = vec![true; dial_len];
    // (slot, normalized value, start, end) for every fully surviving span
    let mut located: Vec<(usize, String, usize, usize)> = Vec::new();

    for (b, spans) in spans_by_turn.iter().enumerate() {
        for span in spans.iter() {
            if span.slot >= n_slots {
                return Err(TextError::UnknownSlot(span.slot));
            }
            let Some(pl) = ser.placement(b, span.side) else {
                continue;
            };
            let utt_len = pl.skipped + pl.kept;
            if span.len == 0 || span.start + span.len > utt_len {
                return Err(TextError::SpanOutOfRange {
                    start: span.start,
                    len: span.len,
                    tokens: utt_len,
                });
            }
            let positions: Vec<Option<usize>> =
                (span.start..span.start + span.len).map(|i| pl.seq_index(i)).collect();
            if positions.iter().all(Option::is_some) {
                let first = positions[0].unwrap();
                let last = positions[positions.len() - 1].unwrap();
                for (k, p) in positions.iter().enumerate() {
                    let label = if k == 0 { b_label(span.slot) } else { i_label(span.slot) };
                    iob[p.unwrap() - ser.dial.start] = label;
                }
                located.push((span.slot, normalize_value(&span.value), first, last));
            } else {
                // B token truncated away: the remainder is not a valid span
                for p in positions.into_iter().flatten() {
                    iob_mask[p - ser.dial.start] = false;
                }
            }
        }
    }

    let content_tokens: Vec<String> = ser
        .dial
        .clone()
        .filter(|&i| ser.is_content(i))
        .map(|i| ser.tokens[i].clone())
        .collect();

    let mut targets = Vec::with_capacity(n_slots);
    for n in 0..n_slots {
        let target = match (curr.get(n), prev.get(n)) {
            _ if prev.slot_matches(curr, n) => SlotTarget::Carryover,
            (None, Some(_)) => SlotTarget::Unresolvable,
            (Some(value), _) => {
                let value = normalize_value(value);
                if let Some(j) = ontology.appendix_index(&value) {
                    SlotTarget::Appendix(j)
                } else if let Some(&m) = coref.get(&n) {
                    SlotTarget::Corefer(m)
                } else {
                    let own = located
                        .iter()
                        .filter(|(s, v, _, _)| *s == n && *v == value)
                        .max_by_key(|(_, _, start, _)| *start);
                    let any = located
                        .iter()
                        .filter(|(_, v, _, _)| *v == value)
                        .max_by_key(|(_, _, start, _)| *start);
                    match own.or(any) {
                        Some(&(_, _, start, end)) => SlotTarget::Extract { start, end },
                        None => {
                            let source = (0..n_slots).find(|&m| {
                                m != n && prev.get(m).map(normalize_value).as_deref() == Some(&value)
                            });
                            let value_toks = tokenize(&value);
                            match source {
                                Some(m) if !contains_subsequence(&content_tokens, &value_toks) => {
                                    SlotTarget::Corefer(m)
                                }
                                _ => SlotTarget::Unresolvable,
                            }
                        }
                    }
                }
            }
            (None, None) => SlotTarget::Carryover,
        };
        targets.push(target);
    }

    let own_anchor = |n: usize| ser.slot_anchors.get(n).copied();
    let mut positions = Vec::with_capacity(n_slots);
    let mut resolvable = Vec::with_capacity(n_slots);
    for (n, t) in targets.iter().enumerate() {
        let hit = match *t {
            SlotTarget::Carryover => own_anchor(n),
            SlotTarget::Appendix(j) => ser.appd_anchors.get(j).copied(),
            SlotTarget::Corefer(m) => ser.slot_anchors.get(m).copied(),
            SlotTarget::Extract { start, .. } => Some(start),
            SlotTarget::Unresolvable => None,
        };
        positions.push(hit.or_else(|| own_anchor(n)).unwrap_or(0));
        resolvable.push(hit.is_some());
    }

    let value_spans = located.iter().map(|&(_, _, s, e)| s..e + 1).collect();
    Ok(GoldLabels {
        iob,
        iob_mask,
        positions,
        resolvable,
        targets,
        value_spans,
    })
}

fn check_probability(p: f64) -> Result<(), TextError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(TextError::BadProbability(p))
    }
}

/// Replaces each utterance token of the dialogue content by `[UNK]` with
/// probability `p`, independently.
pub fn apply_word_dropout<R: Rng + ?Sized>(
    ser: &SerializedInput,
    p: f64,
    rng: &mut R,
) -> Result<SerializedInput, TextError> {
    check_probability(p)?;
    let mut out = ser.clone();
    for i in ser.dial.clone() {
        if ser.is_content(i) && rng.random_bool(p) {
            out.ids[i] = UNK_ID;
        }
    }
    Ok(out)
}

/// Replaces each annotated value span, as a unit, by `[UNK]` tokens with
/// probability `p` (one draw per span).
pub fn apply_value_dropout<R: Rng + ?Sized>(
    ser: &SerializedInput,
    spans: &[Range<usize>],
    p: f64,
    rng: &mut R,
) -> Result<SerializedInput, TextError> {
    check_probability(p)?;
    let mut out = ser.clone();
    for span in spans {
        if rng.random_bool(p) {
            for i in span.clone() {
                if ser.is_content(i) {
                    out.ids[i] = UNK_ID;
                }
            }
        }
    }
    Ok(out)
}
