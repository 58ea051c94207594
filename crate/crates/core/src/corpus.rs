//! Seeded synthetic dialogue generation, corpus statistics, and loading of
//! span-annotated or state-only dialogue files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    apply_decisions, normalize_value, Dialogue, DialogueState, Ontology, SchemaError, Side, SlotDecision,
    SpanAnnotation, Turn,
};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("slot {0} has an empty lexicon")]
    EmptyLexicon(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed corpus file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dialogue {dialogue}, turn {turn}: {message}")]
    Invalid {
        dialogue: String,
        turn: usize,
        message: String,
    },
    #[error("{mismatched} of {checked} spans disagree with their values:\n{}", report.join("\n"))]
    SpanMismatch {
        checked: usize,
        mismatched: usize,
        report: Vec<String>,
    },
    #[error("missing {0} split")]
    MissingSplit(&'static str),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// A set of dialogues over one ontology.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Value list, either explicit or composed from a word pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lexicon {
    List(Vec<String>),
    /// `size` distinct values of `min..=max` distinct words drawn from `words`.
    Compose {
        words: Vec<String>,
        min: usize,
        max: usize,
        size: usize,
    },
}

impl Lexicon {
    /// Concrete values; composed lexicons are drawn with `rng`.
    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<String> {
        match self {
            Lexicon::List(v) => {
                let mut seen = BTreeSet::new();
                v.iter()
                    .map(|s| normalize_value(s))
                    .filter(|s| !s.is_empty() && seen.insert(s.clone()))
                    .collect()
            }
            Lexicon::Compose { words, min, max, size } => {
                let words: Vec<String> = words.iter().map(|w| normalize_value(w)).collect();
                let max = (*max).min(words.len());
                let min = (*min).clamp(1, max.max(1));
                let mut out = Vec::new();
                let mut seen = BTreeSet::new();
                let mut attempts = 0;
                while out.len() < *size && attempts < size * 100 && max > 0 {
                    attempts += 1;
                    let n = rng.random_range(min..=max);
                    let v = words.choose_multiple(rng, n).cloned().collect::<Vec<_>>().join(" ");
                    if seen.insert(v.clone()) {
                        out.push(v);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Lexicon,
    /// Test-only values; disjoint from `values`.
    #[serde(default)]
    pub held_out: Option<Lexicon>,
    /// Share of new test values drawn from `held_out`.
    #[serde(default)]
    pub unknown_rate: f64,
    /// User phrases with a `{v}` placeholder.
    pub inform: Vec<String>,
    #[serde(default)]
    pub request: Vec<String>,
    /// System phrases offering `{v}`.
    #[serde(default)]
    pub offer: Vec<String>,
    #[serde(default)]
    pub dontcare: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefRule {
    pub target: String,
    pub source: String,
    /// User phrases; `{source}` is replaced by the source slot's name.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn default_appendix() -> Vec<String> {
    strings(&["dontcare"])
}
fn default_accept() -> Vec<String> {
    strings(&["yes please", "that works", "sure , sounds good", "yes , that one"])
}
fn default_system() -> Vec<String> {
    strings(&["ok .", "sure .", "anything else ?", "great , what else ?"])
}
fn default_fillers() -> Vec<String> {
    strings(&["um ,", "well ,", "okay so", "hmm ,", "let me think ,"])
}
fn default_closings() -> Vec<String> {
    strings(&["that is all", "nothing else , thanks", "no , that is it"])
}
fn default_joiners() -> Vec<String> {
    strings(&["and", ", and", ", also"])
}
fn default_choice() -> Vec<String> {
    strings(&["would you like {a} or {b} ?", "there is {a} and {b} , which one ?"])
}

/// Synthetic corpus generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub slots: Vec<SlotSpec>,
    #[serde(default = "default_appendix")]
    pub appendix: Vec<String>,
    #[serde(default)]
    pub coref: Vec<CorefRule>,
    /// Per slot and turn: set a new value.
    pub p_new: f64,
    /// Per slot and turn: set the first appendix value.
    #[serde(default)]
    pub p_dontcare: f64,
    /// Per slot and turn: copy a coreference source's value.
    #[serde(default)]
    pub p_coref: f64,
    /// Per turn: the system offers one of the new values and the user accepts.
    #[serde(default)]
    pub p_offer: f64,
    /// Per turn: the system lists two candidates and the user picks one.
    #[serde(default)]
    pub p_choice: f64,
    /// Per turn: prefix the user utterance with a filler phrase.
    #[serde(default)]
    pub distractor_rate: f64,
    pub max_updates: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub dialogues: SplitCounts,
    pub seed: u64,
    /// Seed for composing lexicons, fixed so that every split sees the same values.
    #[serde(default)]
    pub lexicon_seed: u64,
    #[serde(default = "default_accept")]
    pub accept: Vec<String>,
    #[serde(default = "default_system")]
    pub system_generic: Vec<String>,
    #[serde(default = "default_fillers")]
    pub fillers: Vec<String>,
    #[serde(default = "default_closings")]
    pub closings: Vec<String>,
    #[serde(default = "default_joiners")]
    pub joiners: Vec<String>,
    #[serde(default = "default_choice")]
    pub choice: Vec<String>,
}

const MOVIE_WORDS: &[&str] = &[
    "midnight", "river", "silent", "golden", "shadow", "empire", "summer", "storm", "glass", "harbor",
    "broken", "crimson", "winter", "garden", "echo", "iron", "velvet", "paper", "moon", "city", "last",
    "lost", "wild", "secret", "northern", "hollow", "burning", "quiet", "electric", "stone", "silver",
    "blue", "dark", "fallen", "little", "distant", "morning", "ocean", "thunder", "desert",
];

const UNSEEN_MOVIE_WORDS: &[&str] = &[
    "lantern", "orchid", "cobalt", "meridian", "falcon", "saffron", "tundra", "marble", "juniper",
    "cascade", "ember", "prairie", "citadel", "willow", "obsidian", "mirage", "quartz", "harvest",
    "lagoon", "sparrow", "tempest", "canyon", "ivory", "nomad", "aurora", "beacon", "coral", "dune",
    "fjord", "glacier",
];

const THEATRE_WORDS: &[&str] = &[
    "regal", "royal", "grand", "plaza", "park", "central", "majestic", "union", "lyric", "star", "cinema",
    "palace",
];

impl GenConfig {
    /// Movie-ticket domain; `movie` holds 2-4 word titles and its test
    /// values come from a disjoint word pool.
    pub fn movies() -> Self {
        let slot = |name: &str, values, inform: &[&str], request: &[&str], offer: &[&str], dontcare: &[&str]| SlotSpec {
            name: name.into(),
            values,
            held_out: None,
            unknown_rate: 0.0,
            inform: strings(inform),
            request: strings(request),
            offer: strings(offer),
            dontcare: strings(dontcare),
        };
        let mut movie = slot(
            "movie",
            Lexicon::Compose {
                words: strings(MOVIE_WORDS),
                min: 2,
                max: 4,
                size: 80,
            },
            &[
                "i want to see {v}",
                "get me tickets for {v}",
                "{v} please",
                "i would like to watch {v}",
                "let us go with {v}",
                "is {v} showing",
            ],
            &["which movie would you like to see ?", "what movie are you interested in ?"],
            &["how about {v} ?", "{v} is playing , would that work ?"],
            &["any movie is fine", "i do not mind which movie"],
        );
        movie.held_out = Some(Lexicon::Compose {
            words: strings(UNSEEN_MOVIE_WORDS),
            min: 2,
            max: 4,
            size: 60,
        });
        movie.unknown_rate = 1.0;
        GenConfig {
            slots: vec![
                movie,
                slot(
                    "theatre_name",
                    Lexicon::Compose {
                        words: strings(THEATRE_WORDS),
                        min: 2,
                        max: 3,
                        size: 30,
                    },
                    &["at {v}", "i prefer {v}", "{v} theatre is good", "the one at {v}"],
                    &["which theatre ?", "do you have a theatre in mind ?"],
                    &["{v} has seats , ok ?"],
                    &["any theatre works"],
                ),
                slot(
                    "date",
                    Lexicon::List(strings(&[
                        "today", "tomorrow", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday",
                        "sunday", "next friday", "this weekend",
                    ])),
                    &["for {v}", "on {v}", "{v} would be best"],
                    &["what day ?", "which date works for you ?"],
                    &["we have seats {v} , ok ?"],
                    &["any day is fine"],
                ),
                slot(
                    "time",
                    Lexicon::List(strings(&[
                        "6 pm", "7 pm", "7 30 pm", "8 pm", "9 15 pm", "noon", "10 am", "11 30 am", "5 45 pm",
                        "4 pm",
                    ])),
                    &["at {v}", "around {v}", "the {v} show"],
                    &["what time ?", "which showing time ?"],
                    &["there is a show at {v} , ok ?"],
                    &["any time works"],
                ),
                slot(
                    "num_tickets",
                    Lexicon::List(strings(&["one", "two", "three", "four", "five", "six", "2", "3", "4"])),
                    &["{v} tickets", "for {v} people", "we need {v} seats"],
                    &["how many tickets ?", "for how many people ?"],
                    &[],
                    &[],
                ),
            ],
            appendix: default_appendix(),
            coref: Vec::new(),
            p_new: 0.3,
            p_dontcare: 0.04,
            p_coref: 0.0,
            p_offer: 0.15,
            p_choice: 0.15,
            distractor_rate: 0.2,
            max_updates: 3,
            min_turns: 2,
            max_turns: 5,
            dialogues: SplitCounts {
                train: 500,
                dev: 60,
                test: 200,
            },
            seed: 0,
            lexicon_seed: 17,
            accept: default_accept(),
            system_generic: default_system(),
            fillers: default_fillers(),
            closings: default_closings(),
            joiners: default_joiners(),
            choice: default_choice(),
        }
    }

    /// Three-slot hotel/restaurant domain with a coreference rule between
    /// the two area slots.
    pub fn restaurants() -> Self {
        let areas = Lexicon::List(strings(&["north", "south", "east", "west", "centre", "north east", "south west"]));
        let slot = |name: &str, values: &Lexicon, inform: &[&str], request: &[&str], offer: &[&str], dontcare: &[&str]| {
            SlotSpec {
                name: name.into(),
                values: values.clone(),
                held_out: None,
                unknown_rate: 0.0,
                inform: strings(inform),
                request: strings(request),
                offer: strings(offer),
                dontcare: strings(dontcare),
            }
        };
        GenConfig {
            slots: vec![
                slot(
                    "hotel_area",
                    &areas,
                    &["a hotel in the {v}", "stay in the {v}", "the hotel should be {v}"],
                    &["where should the hotel be ?"],
                    &["there is a hotel in the {v} , ok ?"],
                    &["any area for the hotel"],
                ),
                slot(
                    "restaurant_area",
                    &areas,
                    &["eat in the {v}", "a restaurant in the {v}", "dinner in the {v}"],
                    &["where would you like to eat ?"],
                    &["i found a place in the {v} , ok ?"],
                    &["the restaurant can be anywhere"],
                ),
                slot(
                    "food",
                    &Lexicon::List(strings(&[
                        "thai", "italian", "chinese", "indian", "modern european", "korean", "french", "sea food",
                        "british", "north african",
                    ])),
                    &["i want {v} food", "some {v} please", "{v} would be nice", "serving {v}"],
                    &["what kind of food ?", "any cuisine preference ?"],
                    &["how about {v} ?"],
                    &["any food is fine", "i do not care about the food"],
                ),
            ],
            appendix: default_appendix(),
            coref: vec![CorefRule {
                target: "restaurant_area".into(),
                source: "hotel_area".into(),
                templates: strings(&["a restaurant near the {source}", "eat in the same area as the hotel"]),
            }],
            p_new: 0.35,
            p_dontcare: 0.05,
            p_coref: 0.1,
            p_offer: 0.15,
            p_choice: 0.1,
            distractor_rate: 0.2,
            max_updates: 2,
            min_turns: 2,
            max_turns: 4,
            dialogues: SplitCounts {
                train: 50,
                dev: 20,
                test: 20,
            },
            seed: 0,
            lexicon_seed: 5,
            accept: default_accept(),
            system_generic: default_system(),
            fillers: default_fillers(),
            closings: default_closings(),
            joiners: default_joiners(),
            choice: default_choice(),
        }
    }

    pub fn ontology(&self) -> Result<Ontology, CorpusError> {
        Ok(Ontology::new(
            self.slots.iter().map(|s| s.name.clone()),
            self.appendix.iter().cloned(),
        )?)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        let probs = [
            ("p_new", self.p_new),
            ("p_dontcare", self.p_dontcare),
            ("p_coref", self.p_coref),
            ("p_offer", self.p_offer),
            ("p_choice", self.p_choice),
            ("distractor_rate", self.distractor_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.p_new + self.p_dontcare + self.p_coref > 1.0 + 1e-12 {
            return bad("per-turn action probabilities sum above 1".into());
        }
        if self.p_offer + self.p_choice > 1.0 + 1e-12 {
            return bad("offer and choice probabilities sum above 1".into());
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return bad("turn range must satisfy 1 <= min <= max".into());
        }
        if self.max_updates == 0 {
            return bad("max_updates must be positive".into());
        }
        let ontology = self.ontology()?;
        for s in &self.slots {
            if !(0.0..=1.0).contains(&s.unknown_rate) {
                return bad(format!("{}: unknown_rate outside [0, 1]", s.name));
            }
            if s.inform.is_empty() || s.inform.iter().chain(&s.offer).any(|t| !t.contains("{v}")) {
                return bad(format!("{}: inform and offer templates need a {{v}} placeholder", s.name));
            }
            if s.unknown_rate > 0.0 && s.held_out.is_none() {
                return bad(format!("{}: unknown_rate set without a held-out lexicon", s.name));
            }
        }
        for rule in &self.coref {
            for name in [&rule.target, &rule.source] {
                if ontology.slot_index(name).is_none() {
                    return bad(format!("coreference rule names unknown slot {name}"));
                }
            }
            if rule.templates.is_empty() {
                return bad("coreference rule without templates".into());
            }
        }
        Ok(())
    }

    fn lexicons(&self) -> Result<Vec<(Vec<String>, Vec<String>)>, CorpusError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.lexicon_seed);
        let mut out = Vec::new();
        for s in &self.slots {
            let train = s.values.materialize(&mut rng);
            if train.is_empty() {
                return Err(CorpusError::EmptyLexicon(s.name.clone()));
            }
            let held = s.held_out.as_ref().map(|l| l.materialize(&mut rng)).unwrap_or_default();
            if s.unknown_rate > 0.0 && held.is_empty() {
                return Err(CorpusError::EmptyLexicon(format!("{} (held out)", s.name)));
            }
            let train_set: BTreeSet<&String> = train.iter().collect();
            if held.iter().any(|v| train_set.contains(v)) {
                return Err(CorpusError::Config(format!("{}: held-out values overlap training values", s.name)));
            }
            out.push((train, held));
        }
        Ok(out)
    }
}

/// Token-level utterance under construction.
#[derive(Default)]
struct Utterance {
    tokens: Vec<String>,
    spans: Vec<(usize, usize, usize, String)>,
}

impl Utterance {
    fn push_text(&mut self, text: &str) {
        self.tokens.extend(tokenize(text));
    }

    /// Appends a template, replacing `{v}` (annotated for `slot`), `{a}`/`{b}`
    /// (annotated) and `{source}` (plain text).
    fn push_template(&mut self, template: &str, slot: usize, fills: &[(&str, &str)], annotate: &[&str]) {
        for piece in template.split_whitespace() {
            match fills.iter().find(|(k, _)| *k == piece) {
                Some((k, v)) => {
                    let toks = tokenize(v);
                    if annotate.contains(k) {
                        self.spans.push((slot, self.tokens.len(), toks.len(), v.to_string()));
                    }
                    self.tokens.extend(toks);
                }
                None => self.push_text(piece),
            }
        }
    }

    fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Action {
    New,
    Dontcare,
    Coref(usize),
}

struct Generator<'a> {
    cfg: &'a GenConfig,
    ontology: Ontology,
    lexicons: Vec<(Vec<String>, Vec<String>)>,
    split: Split,
}

impl Generator<'_> {
    fn sample_value<R: Rng>(&self, n: usize, rng: &mut R, avoid: &[Option<&str>]) -> String {
        let (train, held) = &self.lexicons[n];
        let pool = if self.split == Split::Test && !held.is_empty() && rng.random_bool(self.cfg.slots[n].unknown_rate) {
            held
        } else {
            train
        };
        let mut v = pool.choose(rng).expect("non-empty lexicon").clone();
        for _ in 0..20 {
            if !avoid.contains(&Some(v.as_str())) {
                break;
            }
            v = pool.choose(rng).expect("non-empty lexicon").clone();
        }
        v
    }

    fn pick<'s, R: Rng>(list: &'s [String], rng: &mut R) -> &'s str {
        list.choose(rng).map_or("", String::as_str)
    }

    fn display(&self, n: usize) -> String {
        self.ontology.slots()[n].replace('_', " ")
    }

    fn turn<R: Rng>(&self, prev: &DialogueState, rng: &mut R) -> Turn {
        let cfg = self.cfg;
        let n_slots = self.ontology.num_slots();
        let mut order: Vec<usize> = (0..n_slots).collect();
        order.shuffle(rng);
        let mut actions: Vec<(usize, Action)> = Vec::new();
        for &n in &order {
            if actions.len() >= cfg.max_updates {
                break;
            }
            let u: f64 = rng.random();
            let spec = &cfg.slots[n];
            let dontcare = self.ontology.appendix().first();
            let action = if u < cfg.p_new {
                Some(Action::New)
            } else if u < cfg.p_new + cfg.p_dontcare {
                (dontcare.is_some() && !spec.dontcare.is_empty() && prev.get(n) != dontcare.map(String::as_str))
                    .then_some(Action::Dontcare)
            } else if u < cfg.p_new + cfg.p_dontcare + cfg.p_coref {
                cfg.coref
                    .iter()
                    .filter(|r| r.target == spec.name)
                    .filter_map(|r| self.ontology.slot_index(&r.source))
                    .find(|&m| prev.get(m).is_some() && prev.get(m) != prev.get(n))
                    .map(Action::Coref)
            } else {
                None
            };
            if let Some(a) = action {
                actions.push((n, a));
            }
        }
        actions.sort_by_key(|(n, _)| *n);

        let mut decisions = vec![SlotDecision::Carryover; n_slots];
        let mut coref = BTreeMap::new();
        let mut news: Vec<(usize, String)> = Vec::new();
        for &(n, a) in &actions {
            match a {
                Action::New => {
                    let v = self.sample_value(n, rng, &[prev.get(n)]);
                    decisions[n] = SlotDecision::Update {
                        value: v.clone(),
                        start: 0,
                        len: 0,
                    };
                    news.push((n, v));
                }
                Action::Dontcare => {
                    decisions[n] = SlotDecision::Appendix {
                        value: self.ontology.appendix()[0].clone(),
                    };
                }
                Action::Coref(m) => {
                    decisions[n] = SlotDecision::Corefer { source: m };
                    coref.insert(n, m);
                }
            }
        }

        let mut system = Utterance::default();
        let mut user = Utterance::default();
        // slot whose new value the system voices instead of the user
        let mut offered: Option<usize> = None;
        let mut chosen: Option<usize> = None;
        let u: f64 = rng.random();
        let offerable: Vec<&(usize, String)> = news.iter().filter(|(n, _)| !cfg.slots[*n].offer.is_empty()).collect();
        if u < cfg.p_offer && !offerable.is_empty() {
            let &&(n, ref v) = offerable.choose(rng).expect("non-empty");
            system.push_template(Self::pick(&cfg.slots[n].offer, rng), n, &[("{v}", v)], &["{v}"]);
            offered = Some(n);
        } else if u < cfg.p_offer + cfg.p_choice && !news.is_empty() && !cfg.choice.is_empty() {
            let (n, v) = news.choose(rng).expect("non-empty").clone();
            let other = self.sample_value(n, rng, &[Some(v.as_str()), prev.get(n)]);
            let (a, b) = if rng.random_bool(0.5) { (v.clone(), other) } else { (other, v.clone()) };
            if a != b {
                system.push_template(Self::pick(&cfg.choice, rng), n, &[("{a}", &a), ("{b}", &b)], &["{a}", "{b}"]);
                chosen = Some(n);
            }
        }
        if system.tokens.is_empty() {
            let requestable: Vec<usize> = actions
                .iter()
                .map(|(n, _)| *n)
                .filter(|n| !cfg.slots[*n].request.is_empty())
                .collect();
            match requestable.choose(rng) {
                Some(&n) if rng.random_bool(0.7) => system.push_text(Self::pick(&cfg.slots[n].request, rng)),
                _ => system.push_text(Self::pick(&cfg.system_generic, rng)),
            }
        }

        if rng.random_bool(cfg.distractor_rate) && !cfg.fillers.is_empty() {
            user.push_text(Self::pick(&cfg.fillers, rng));
        }
        let mut clauses = 0;
        let mut clause = |user: &mut Utterance, rng: &mut R| {
            if clauses > 0 && !cfg.joiners.is_empty() {
                user.push_text(Self::pick(&cfg.joiners, rng));
            }
            clauses += 1;
        };
        if offered.is_some() {
            clause(&mut user, rng);
            user.push_text(Self::pick(&cfg.accept, rng));
        }
        for &(n, a) in &actions {
            if Some(n) == offered {
                continue;
            }
            clause(&mut user, rng);
            match a {
                Action::New => {
                    let v = news.iter().find(|(m, _)| *m == n).map(|(_, v)| v.clone()).expect("new value");
                    let t = if Some(n) == chosen { "{v}" } else { Self::pick(&cfg.slots[n].inform, rng) };
                    user.push_template(t, n, &[("{v}", &v)], &["{v}"]);
                }
                Action::Dontcare => user.push_text(Self::pick(&cfg.slots[n].dontcare, rng)),
                Action::Coref(m) => {
                    let rule = cfg
                        .coref
                        .iter()
                        .find(|r| r.target == cfg.slots[n].name && r.source == cfg.slots[m].name)
                        .expect("rule exists");
                    let src = self.display(m);
                    user.push_template(Self::pick(&rule.templates, rng), n, &[("{source}", &src)], &[]);
                }
            }
        }
        if clauses == 0 {
            user.push_text(Self::pick(&cfg.closings, rng));
        }

        let state = apply_decisions(prev, &decisions).expect("decision per slot");
        let spans = system
            .spans
            .iter()
            .map(|s| (Side::System, s))
            .chain(user.spans.iter().map(|s| (Side::User, s)))
            .map(|(side, &(slot, start, len, ref value))| SpanAnnotation {
                slot,
                side,
                start,
                len,
                value: value.clone(),
            })
            .collect();
        Turn {
            system: system.text(),
            user: user.text(),
            state,
            spans,
            coref,
        }
    }
}

/// Generates one split. Lexicons are fixed by `lexicon_seed`; dialogues are
/// drawn from `rng`.
pub fn generate_corpus<R: Rng>(cfg: &GenConfig, split: Split, rng: &mut R) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let gen = Generator {
        cfg,
        ontology: cfg.ontology()?,
        lexicons: cfg.lexicons()?,
        split,
    };
    let mut dialogues = Vec::new();
    for i in 0..cfg.dialogues.get(split) {
        let turns_n = rng.random_range(cfg.min_turns..=cfg.max_turns);
        let mut prev = gen.ontology.empty_state();
        let mut turns = Vec::with_capacity(turns_n);
        for _ in 0..turns_n {
            let t = gen.turn(&prev, rng);
            prev = t.state.clone();
            turns.push(t);
        }
        dialogues.push(Dialogue {
            id: format!("{}-{i:04}", split.name()),
            turns,
        });
    }
    Ok(Corpus {
        ontology: gen.ontology,
        dialogues,
    })
}

/// All three splits, each from its own stream derived from `cfg.seed`.
pub fn generate_splits(cfg: &GenConfig) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let make = |split: Split, offset: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(3).wrapping_add(offset));
        generate_corpus(cfg, split, &mut rng)
    };
    Ok((make(Split::Train, 0)?, make(Split::Dev, 1)?, make(Split::Test, 2)?))
}

/// Table-style dataset statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub slots: usize,
    pub train_dialogues: usize,
    pub dev_dialogues: usize,
    pub test_dialogues: usize,
    pub turns: [usize; 3],
    /// Percentage of distinct (slot, value) pairs of the test set never seen in training.
    pub usv_percent: f64,
    pub usv_by_slot: Vec<(String, f64)>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "slots {}  dialogues (train, dev, test) {}/{}/{}  USV {:.1}%",
            self.slots, self.train_dialogues, self.dev_dialogues, self.test_dialogues, self.usv_percent
        )?;
        for (s, p) in &self.usv_by_slot {
            writeln!(f, "  {s:<20} {p:.1}%")?;
        }
        Ok(())
    }
}

fn value_pairs(c: &Corpus) -> BTreeSet<(usize, String)> {
    let appendix: BTreeSet<String> = c.ontology.appendix().iter().map(|a| normalize_value(a)).collect();
    c.dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .flat_map(|t| {
            t.state
                .values()
                .iter()
                .enumerate()
                .filter_map(|(n, v)| v.as_ref().map(|v| (n, normalize_value(v))))
                .collect::<Vec<_>>()
        })
        .filter(|(_, v)| !appendix.contains(v))
        .collect()
}

pub fn corpus_stats(train: &Corpus, dev: &Corpus, test: &Corpus) -> Result<CorpusStats, CorpusError> {
    if train.dialogues.is_empty() {
        return Err(CorpusError::MissingSplit("train"));
    }
    if test.dialogues.is_empty() {
        return Err(CorpusError::MissingSplit("test"));
    }
    let seen = value_pairs(train);
    let test_pairs = value_pairs(test);
    let pct = |pairs: &mut dyn Iterator<Item = &(usize, String)>| {
        let (mut total, mut unseen) = (0usize, 0usize);
        for p in pairs {
            total += 1;
            unseen += usize::from(!seen.contains(p));
        }
        if total == 0 {
            0.0
        } else {
            100.0 * unseen as f64 / total as f64
        }
    };
    let usv_by_slot = (0..test.ontology.num_slots())
        .map(|n| {
            (
                test.ontology.slots()[n].clone(),
                pct(&mut test_pairs.iter().filter(|(m, _)| *m == n)),
            )
        })
        .collect();
    let turns = |c: &Corpus| c.dialogues.iter().map(|d| d.turns.len()).sum();
    Ok(CorpusStats {
        slots: train.ontology.num_slots(),
        train_dialogues: train.dialogues.len(),
        dev_dialogues: dev.dialogues.len(),
        test_dialogues: test.dialogues.len(),
        turns: [turns(train), turns(dev), turns(test)],
        usv_percent: pct(&mut test_pairs.iter()),
        usv_by_slot,
    })
}

/// Annotations found by matching state values against utterances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DerivedSpans {
    /// One list per turn.
    pub spans: Vec<Vec<SpanAnnotation>>,
    /// (turn, slot) pairs whose new value was not found.
    pub unresolved: Vec<(usize, usize)>,
}

fn rightmost(hay: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).rev().find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Locates every newly set, non-appendix state value as an exact token
/// subsequence of its turn, preferring the rightmost user-side match.
pub fn derive_iob_annotations(dialogue: &Dialogue, ontology: &Ontology) -> DerivedSpans {
    let mut out = DerivedSpans::default();
    for (t, turn) in dialogue.turns.iter().enumerate() {
        let prev = dialogue.prev_state(ontology, t);
        let sys = tokenize(&turn.system);
        let usr = tokenize(&turn.user);
        let mut spans = Vec::new();
        for n in 0..ontology.num_slots() {
            let Some(value) = turn.state.get(n) else { continue };
            if prev.slot_matches(&turn.state, n) || ontology.appendix_index(value).is_some() {
                continue;
            }
            let needle = tokenize(value);
            let hit = rightmost(&usr, &needle)
                .map(|i| (Side::User, i))
                .or_else(|| rightmost(&sys, &needle).map(|i| (Side::System, i)));
            match hit {
                Some((side, start)) => spans.push(SpanAnnotation {
                    slot: n,
                    side,
                    start,
                    len: needle.len(),
                    value: value.to_string(),
                }),
                None => out.unresolved.push((t, n)),
            }
        }
        out.spans.push(spans);
    }
    out
}

/// How spans are obtained when loading a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Spans come from the file and are validated.
    Annotated,
    /// Spans in the file are ignored and derived from the states.
    StateOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOntology {
    slots: Vec<String>,
    #[serde(default)]
    appendix: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSpan {
    slot: String,
    side: Side,
    start: usize,
    length: usize,
    value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTurn {
    system: String,
    user: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
    #[serde(default)]
    spans: Vec<RawSpan>,
    #[serde(default)]
    coref: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCorpus {
    ontology: RawOntology,
    dialogues: Vec<RawDialogue>,
}

impl Corpus {
    fn to_raw(&self) -> RawCorpus {
        let o = &self.ontology;
        let name = |n: usize| o.slots()[n].clone();
        RawCorpus {
            ontology: RawOntology {
                slots: o.slots().to_vec(),
                appendix: o.appendix().to_vec(),
            },
            dialogues: self
                .dialogues
                .iter()
                .map(|d| RawDialogue {
                    id: d.id.clone(),
                    turns: d
                        .turns
                        .iter()
                        .map(|t| RawTurn {
                            system: t.system.clone(),
                            user: t.user.clone(),
                            state: t.state.to_map(o),
                            spans: t
                                .spans
                                .iter()
                                .map(|s| RawSpan {
                                    slot: name(s.slot),
                                    side: s.side,
                                    start: s.start,
                                    length: s.len,
                                    value: s.value.clone(),
                                })
                                .collect(),
                            coref: t.coref.iter().map(|(&a, &b)| (name(a), name(b))).collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("plain data")
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_json()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parses corpus text. `tolerance` is the largest share of annotated
    /// spans allowed to disagree with their value; disagreeing spans are
    /// dropped, and a larger share is an error listing every offender.
    pub fn from_json(text: &str, format: DataFormat, tolerance: f64) -> Result<Self, CorpusError> {
        let raw: RawCorpus = serde_json::from_str(text)?;
        let ontology = Ontology::new(raw.ontology.slots, raw.ontology.appendix)?;
        let mut dialogues = Vec::with_capacity(raw.dialogues.len());
        let (mut checked, mut report) = (0usize, Vec::new());
        for rd in raw.dialogues {
            let invalid = |turn: usize, message: String| CorpusError::Invalid {
                dialogue: rd.id.clone(),
                turn,
                message,
            };
            let slot = |turn: usize, name: &str| {
                ontology
                    .slot_index(name)
                    .ok_or_else(|| invalid(turn, format!("unknown slot {name}")))
            };
            let mut turns = Vec::with_capacity(rd.turns.len());
            for (t, rt) in rd.turns.iter().enumerate() {
                let state = DialogueState::from_map(&ontology, &rt.state).map_err(|e| invalid(t, e.to_string()))?;
                let mut coref = BTreeMap::new();
                for (a, b) in &rt.coref {
                    coref.insert(slot(t, a)?, slot(t, b)?);
                }
                let mut spans = Vec::new();
                if format == DataFormat::Annotated {
                    for s in &rt.spans {
                        let n = slot(t, &s.slot)?;
                        checked += 1;
                        let utt = match s.side {
                            Side::System => &rt.system,
                            Side::User => &rt.user,
                        };
                        let toks = tokenize(utt);
                        let text = toks.get(s.start..s.start + s.length).map(|w| w.join(" "));
                        if s.length > 0 && text.as_deref() == Some(normalize_value(&s.value).as_str()) {
                            spans.push(SpanAnnotation {
                                slot: n,
                                side: s.side,
                                start: s.start,
                                len: s.length,
                                value: s.value.clone(),
                            });
                        } else {
                            report.push(format!(
                                "dialogue {} turn {t} slot {}: span {}+{} reads {:?}, expected {:?}",
                                rd.id,
                                s.slot,
                                s.start,
                                s.length,
                                text.unwrap_or_default(),
                                s.value
                            ));
                        }
                    }
                }
                turns.push(Turn {
                    system: rt.system.clone(),
                    user: rt.user.clone(),
                    state,
                    spans,
                    coref,
                });
            }
            let mut d = Dialogue { id: rd.id, turns };
            if format == DataFormat::StateOnly {
                let derived = derive_iob_annotations(&d, &ontology);
                for (turn, spans) in d.turns.iter_mut().zip(derived.spans) {
                    turn.spans = spans;
                }
            }
            dialogues.push(d);
        }
        if !report.is_empty() && report.len() as f64 > tolerance * checked as f64 {
            return Err(CorpusError::SpanMismatch {
                checked,
                mismatched: report.len(),
                report,
            });
        }
        Ok(Self { ontology, dialogues })
    }
}

pub fn load_dataset(path: &Path, format: DataFormat, tolerance: f64) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_json(&text, format, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cfg: GenConfig, n: usize) -> GenConfig {
        GenConfig {
            dialogues: SplitCounts {
                train: n,
                dev: n,
                test: n,
            },
            ..cfg
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(GenConfig::restaurants(), 10);
        let a = generate_corpus(&cfg, Split::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_corpus(&cfg, Split::Train, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spans_match_their_values() {
        for cfg in [GenConfig::restaurants(), GenConfig::movies()] {
            let cfg = small(cfg, 40);
            let (train, _, test) = generate_splits(&cfg).unwrap();
            for d in train.dialogues.iter().chain(&test.dialogues) {
                for t in &d.turns {
                    for s in &t.spans {
                        let utt = if s.side == Side::User { &t.user } else { &t.system };
                        let toks = tokenize(utt);
                        assert_eq!(toks[s.start..s.start + s.len].join(" "), normalize_value(&s.value));
                    }
                }
            }
        }
    }

    #[test]
    fn dontcare_only() {
        let mut cfg = small(GenConfig::restaurants(), 20);
        cfg.p_new = 0.0;
        cfg.p_coref = 0.0;
        cfg.p_dontcare = 1.0;
        let c = generate_corpus(&cfg, Split::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for d in &c.dialogues {
            for t in &d.turns {
                assert!(t.spans.is_empty());
                assert!(t.state.values().iter().flatten().all(|v| v == "dontcare"));
            }
        }
    }

    #[test]
    fn unknown_values_are_unseen() {
        let cfg = small(GenConfig::movies(), 60);
        let (train, dev, test) = generate_splits(&cfg).unwrap();
        let stats = corpus_stats(&train, &dev, &test).unwrap();
        assert_eq!(stats.usv_by_slot[0], ("movie".to_string(), 100.0));
        let same = corpus_stats(&train, &dev, &train).unwrap();
        assert_eq!(same.usv_percent, 0.0);
        assert_eq!((stats.train_dialogues, stats.dev_dialogues, stats.test_dialogues), (60, 60, 60));
    }

    #[test]
    fn config_validation() {
        let mut cfg = GenConfig::restaurants();
        cfg.p_new = 0.9;
        cfg.p_dontcare = 0.2;
        assert!(matches!(cfg.validate(), Err(CorpusError::Config(_))));
        let mut cfg = GenConfig::restaurants();
        cfg.slots[0].values = Lexicon::List(vec![]);
        assert!(matches!(
            generate_corpus(&cfg, Split::Train, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(CorpusError::EmptyLexicon(_))
        ));
    }

    #[test]
    fn derive_prefers_user_side() {
        let o = Ontology::new(["food"], ["dontcare"]).unwrap();
        let mk = |sys: &str, usr: &str, v: Option<&str>| Turn {
            system: sys.into(),
            user: usr.into(),
            state: DialogueState::from_values(vec![v.map(str::to_string)]),
            spans: vec![],
            coref: BTreeMap::new(),
        };
        let d = Dialogue {
            id: "x".into(),
            turns: vec![
                mk("thai food or sushi ?", "thai food , thai food please", Some("thai food")),
                mk("ok", "anything", Some("dontcare")),
                mk("ok", "something else", Some("korean")),
                mk("how about sushi ?", "yes", Some("sushi")),
            ],
        };
        let r = derive_iob_annotations(&d, &o);
        assert_eq!(r.spans[0].len(), 1);
        assert_eq!((r.spans[0][0].side, r.spans[0][0].start, r.spans[0][0].len), (Side::User, 3, 2));
        assert!(r.spans[1].is_empty() && r.spans[2].is_empty());
        assert_eq!(r.unresolved, vec![(2, 0)]);
        assert_eq!((r.spans[3][0].side, r.spans[3][0].start), (Side::System, 2));
    }

    #[test]
    fn file_round_trip_and_mismatch() {
        let cfg = small(GenConfig::restaurants(), 5);
        let c = generate_corpus(&cfg, Split::Dev, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let back = Corpus::from_json(&c.to_json(), DataFormat::Annotated, 0.0).unwrap();
        assert_eq!(back, c);

        let text = r#"{"ontology":{"slots":["food"],"appendix":["dontcare"]},
          "dialogues":[{"id":"bad-7","turns":[{"system":"hi","user":"i want thai food",
          "state":{"food":"thai food"},"spans":[{"slot":"food","side":"user","start":1,"length":2,"value":"thai food"}]}]}]}"#;
        match Corpus::from_json(text, DataFormat::Annotated, 0.0) {
            Err(CorpusError::SpanMismatch { report, .. }) => assert!(report[0].contains("bad-7")),
            other => panic!("expected mismatch, got {other:?}"),
        }
        let lenient = Corpus::from_json(text, DataFormat::Annotated, 1.0).unwrap();
        assert!(lenient.dialogues[0].turns[0].spans.is_empty());
        let derived = Corpus::from_json(text, DataFormat::StateOnly, 0.0).unwrap();
        assert_eq!(derived.dialogues[0].turns[0].spans[0].start, 2);
    }
}
