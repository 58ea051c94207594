//! Metrics, rollout evaluation, multi-seed reports, and the
//! generalization and ablation runners.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::Corpus;
use crate::decoder::{decode_iob, decode_logits, TurnDecode};
use crate::model::{argmax, HeadMode, ModelError, Variant};
use crate::numerics::Real;
use crate::schema::{normalize_value, states_equal, Dialogue, DialogueState, Ontology, SchemaError};
use crate::text::{serialize_input, tokenize, GoldLabels, SlotTarget, TextError};
use crate::trainer::{build_examples, train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: {pred} predictions for {gold} gold entries")]
    LengthMismatch {
        what: &'static str,
        pred: usize,
        gold: usize,
    },
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("ontology of the data does not match the checkpoint")]
    OntologyMismatch,
    #[error("split hygiene violated for slot {slot}: {count} test values also occur in training")]
    SplitHygiene { slot: String, count: usize },
    #[error("unknown slot {0}")]
    UnknownSlot(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

fn check_aligned(what: &'static str, pred: usize, gold: usize) -> Result<(), EvalError> {
    if pred != gold {
        return Err(EvalError::LengthMismatch { what, pred, gold });
    }
    if gold == 0 {
        return Err(EvalError::Empty(what));
    }
    Ok(())
}

/// Share of turns whose whole predicted state matches gold.
pub fn joint_goal_accuracy(pred: &[DialogueState], gold: &[DialogueState]) -> Result<f64, EvalError> {
    check_aligned("joint goal accuracy", pred.len(), gold.len())?;
    let mut hits = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        if states_equal(p, g)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

/// Per-slot share of turns where that slot's value matches gold.
pub fn slot_accuracy(
    pred: &[DialogueState],
    gold: &[DialogueState],
    ontology: &Ontology,
) -> Result<Vec<(String, f64)>, EvalError> {
    check_aligned("slot accuracy", pred.len(), gold.len())?;
    let n_slots = ontology.num_slots();
    let mut hits = vec![0usize; n_slots];
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != n_slots || g.len() != n_slots {
            return Err(SchemaError::OntologyMismatch(p.len(), g.len()).into());
        }
        for (n, h) in hits.iter_mut().enumerate() {
            if p.slot_matches(g, n) {
                *h += 1;
            }
        }
    }
    Ok(ontology
        .slots()
        .iter()
        .zip(hits)
        .map(|(s, h)| (s.clone(), h as f64 / gold.len() as f64))
        .collect())
}

/// Invalid extractions over extraction attempts; 0 when nothing was attempted.
pub fn invalid_extraction_rate(valid: &[bool]) -> f64 {
    if valid.is_empty() {
        return 0.0;
    }
    valid.iter().filter(|v| !**v).count() as f64 / valid.len() as f64
}

/// Token-level IOB accuracy over supervised dialogue tokens.
pub fn tagging_accuracy(pred: &[Vec<usize>], gold: &[&GoldLabels]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        for ((&pl, &gl), &m) in p.iter().zip(&g.iob).zip(&g.iob_mask) {
            if m {
                total += 1;
                hit += usize::from(pl == gl);
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Pointer accuracy over resolvable (turn, slot) pairs.
pub fn position_accuracy(pred: &[Vec<usize>], gold: &[&GoldLabels]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        for n in 0..g.positions.len() {
            if g.resolvable[n] {
                total += 1;
                hit += usize::from(p.get(n) == Some(&g.positions[n]));
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Tracks one dialogue turn by turn, feeding each predicted state into the
/// next turn. Only utterances are consumed.
pub fn rollout<T: Real>(ckpt: &Checkpoint<T>, utterances: &[(&str, &str)]) -> Result<Vec<TurnDecode>, EvalError> {
    let mut prev = ckpt.ontology.empty_state();
    let mut out = Vec::with_capacity(utterances.len());
    for (t, &(system, user)) in utterances.iter().enumerate() {
        let dec = track_turn(ckpt, &prev, &utterances[..t], system, user)?;
        prev = dec.state.clone();
        out.push(dec);
    }
    Ok(out)
}

/// Decodes a single turn against an explicit previous state.
pub fn track_turn<T: Real>(
    ckpt: &Checkpoint<T>,
    prev: &DialogueState,
    history: &[(&str, &str)],
    system: &str,
    user: &str,
) -> Result<TurnDecode, EvalError> {
    let ser = serialize_input(&ckpt.ontology, &ckpt.vocab, prev, history, system, user, &ckpt.layout)?;
    let logits = ckpt.model.predict(&ser)?;
    Ok(decode_logits(&logits, ckpt.model.config(), &ser, &ckpt.ontology, prev)?)
}

/// Rollout predictions and state metrics over a dialogue set.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub predicted: Vec<Vec<DialogueState>>,
    pub jga: f64,
    pub slot_accuracy: Vec<(String, f64)>,
    pub invalid_rate: f64,
    pub turns: usize,
}

pub fn rollout_dialogues<T: Real>(ckpt: &Checkpoint<T>, dialogues: &[Dialogue]) -> Result<RolloutResult, EvalError> {
    let mut predicted = Vec::with_capacity(dialogues.len());
    let mut flat_pred = Vec::new();
    let mut flat_gold = Vec::new();
    let (mut attempts, mut invalid) = (0usize, 0usize);
    for d in dialogues {
        let decs = rollout(ckpt, &d.utterances())?;
        let states: Vec<DialogueState> = decs.iter().map(|x| x.state.clone()).collect();
        for x in &decs {
            attempts += x.attempts;
            invalid += x.invalid;
        }
        flat_pred.extend(states.iter().cloned());
        flat_gold.extend(d.turns.iter().map(|t| t.state.clone()));
        predicted.push(states);
    }
    Ok(RolloutResult {
        jga: joint_goal_accuracy(&flat_pred, &flat_gold)?,
        slot_accuracy: slot_accuracy(&flat_pred, &flat_gold, &ckpt.ontology)?,
        invalid_rate: if attempts == 0 { 0.0 } else { invalid as f64 / attempts as f64 },
        turns: flat_gold.len(),
        predicted,
    })
}

/// Teacher-forced tagging and position accuracy against gold labels.
pub fn tagging_and_position_accuracy<T: Real>(
    ckpt: &Checkpoint<T>,
    dialogues: &[Dialogue],
) -> Result<(Option<f64>, Option<f64>), EvalError> {
    let cfg = ckpt.model.config();
    let examples = build_examples(dialogues, &ckpt.ontology, &ckpt.vocab, &ckpt.layout, cfg, true)?;
    if examples.is_empty() {
        return Err(EvalError::Empty("tagging and position accuracy"));
    }
    let mut iob_pred = Vec::new();
    let mut ptr_pred = Vec::new();
    let mut golds = Vec::new();
    let mut span_golds = Vec::new();
    for ex in &examples {
        let logits = ckpt.model.predict(&ex.ser)?;
        if let Some(rows) = &logits.iob {
            iob_pred.push(decode_iob(rows));
        }
        match cfg.mode {
            HeadMode::Navigation => {
                let rows = logits.pointer.as_ref().expect("navigation logits");
                ptr_pred.push(rows.iter().map(|r| argmax(r)).collect());
                golds.push(ex.gold.clone());
            }
            HeadMode::Span => {
                // span heads are scored on their start pointer over extractable slots
                let (s, _) = logits.span.as_ref().expect("span logits");
                ptr_pred.push(s.iter().map(|r| ex.ser.dial.start + argmax(r)).collect());
                let mut g = ex.gold.clone();
                for (n, t) in g.targets.iter().enumerate() {
                    g.resolvable[n] = matches!(t, SlotTarget::Extract { .. });
                    if let SlotTarget::Extract { start, .. } = *t {
                        g.positions[n] = start;
                    }
                }
                span_golds.push(g);
            }
        }
    }
    let all: Vec<&GoldLabels> = examples.iter().map(|e| &e.gold).collect();
    let tagging = if cfg.use_tagging {
        Some(tagging_accuracy(&iob_pred, &all).ok_or(EvalError::Empty("no supervised dialogue tokens"))?)
    } else {
        None
    };
    let pos_gold: Vec<&GoldLabels> = match cfg.mode {
        HeadMode::Navigation => golds.iter().collect(),
        HeadMode::Span => span_golds.iter().collect(),
    };
    Ok((tagging, position_accuracy(&ptr_pred, &pos_gold)))
}

/// All metrics of one model on one dialogue set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub joint_goal_accuracy: f64,
    pub slot_accuracy: Vec<(String, f64)>,
    pub tagging_accuracy: Option<f64>,
    pub position_accuracy: Option<f64>,
    pub invalid_extraction_rate: f64,
    pub turns: usize,
}

pub fn evaluate<T: Real>(ckpt: &Checkpoint<T>, dialogues: &[Dialogue]) -> Result<EvalMetrics, EvalError> {
    let r = rollout_dialogues(ckpt, dialogues)?;
    let (tagging, position) = tagging_and_position_accuracy(ckpt, dialogues)?;
    Ok(EvalMetrics {
        joint_goal_accuracy: r.jga,
        slot_accuracy: r.slot_accuracy,
        tagging_accuracy: tagging,
        position_accuracy: position,
        invalid_extraction_rate: r.invalid_rate,
        turns: r.turns,
    })
}

/// Per-seed values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
}

impl SeedSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
        let spread = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            per_seed: values,
            mean,
            spread,
        }
    }

    /// Percentage form, e.g. `85.4±1.4%`.
    pub fn percent(&self) -> String {
        format!("{:.1}±{:.1}%", 100.0 * self.mean, 100.0 * self.spread)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub turns: usize,
    pub joint_goal_accuracy: SeedSummary,
    pub slot_accuracy: Vec<(String, SeedSummary)>,
    pub tagging_accuracy: Option<SeedSummary>,
    pub position_accuracy: Option<SeedSummary>,
    pub invalid_extraction_rate: SeedSummary,
    pub runs: Vec<EvalMetrics>,
}

impl EvalReport {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<EvalMetrics>) -> Result<Self, EvalError> {
        let first = runs.first().ok_or(EvalError::Empty("no runs to aggregate"))?;
        let pick = |f: &dyn Fn(&EvalMetrics) -> f64| SeedSummary::new(runs.iter().map(f).collect());
        let opt = |f: &dyn Fn(&EvalMetrics) -> Option<f64>| {
            runs.iter().map(f).collect::<Option<Vec<f64>>>().map(SeedSummary::new)
        };
        let slot_accuracy = first
            .slot_accuracy
            .iter()
            .enumerate()
            .map(|(n, (name, _))| (name.clone(), pick(&|m| m.slot_accuracy[n].1)))
            .collect();
        Ok(Self {
            seeds,
            turns: first.turns,
            joint_goal_accuracy: pick(&|m| m.joint_goal_accuracy),
            slot_accuracy,
            tagging_accuracy: opt(&|m| m.tagging_accuracy),
            position_accuracy: opt(&|m| m.position_accuracy),
            invalid_extraction_rate: pick(&|m| m.invalid_extraction_rate),
            runs,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "turns                    {}", self.turns)?;
        if !self.seeds.is_empty() {
            let s: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            writeln!(f, "seeds                    {}", s.join(","))?;
        }
        writeln!(f, "joint goal accuracy      {}", self.joint_goal_accuracy.percent())?;
        if let Some(t) = &self.tagging_accuracy {
            writeln!(f, "slot tagging accuracy    {}", t.percent())?;
        }
        if let Some(p) = &self.position_accuracy {
            writeln!(f, "position accuracy        {}", p.percent())?;
        }
        writeln!(f, "invalid extraction rate  {}", self.invalid_extraction_rate.percent())?;
        for (name, s) in &self.slot_accuracy {
            writeln!(f, "  slot {name:<19} {}", s.percent())?;
        }
        Ok(())
    }
}

/// Evaluates a checkpoint directory, or `<dir>/seed-<n>` for each seed.
pub fn run_eval(dir: &Path, corpus: &Corpus, seeds: Option<&[u64]>) -> Result<EvalReport, EvalError> {
    let dirs: Vec<(Option<u64>, std::path::PathBuf)> = match seeds {
        Some(s) => s.iter().map(|&n| (Some(n), dir.join(format!("seed-{n}")))).collect(),
        None => vec![(None, dir.to_path_buf())],
    };
    let mut runs = Vec::new();
    for (_, d) in &dirs {
        let ckpt = Checkpoint::<f32>::load(d)?;
        if ckpt.ontology != corpus.ontology {
            return Err(EvalError::OntologyMismatch);
        }
        runs.push(evaluate(&ckpt, &corpus.dialogues)?);
    }
    EvalReport::from_runs(dirs.iter().filter_map(|(s, _)| *s).collect(), runs)
}

/// Distinct normalized values of a slot across the gold states of a set.
pub fn slot_values(dialogues: &[Dialogue], slot: usize) -> BTreeSet<String> {
    dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .filter_map(|t| t.state.get(slot).map(normalize_value))
        .collect()
}

/// Rejects a test set whose targeted slots share values with training.
pub fn check_split_hygiene(
    ontology: &Ontology,
    train_set: &[Dialogue],
    test_set: &[Dialogue],
    targeted: &[String],
) -> Result<(), EvalError> {
    for slot in targeted {
        let n = ontology
            .slot_index(slot)
            .ok_or_else(|| EvalError::UnknownSlot(slot.clone()))?;
        let seen = slot_values(train_set, n);
        let appendix: BTreeSet<String> = ontology.appendix().iter().map(|a| normalize_value(a)).collect();
        let count = slot_values(test_set, n)
            .iter()
            .filter(|v| seen.contains(*v) && !appendix.contains(*v))
            .count();
        if count > 0 {
            return Err(EvalError::SplitHygiene {
                slot: slot.clone(),
                count,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub joint_goal_accuracy: SeedSummary,
    pub slot_accuracy: Vec<(String, SeedSummary)>,
    pub invalid_extraction_rate: SeedSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub seeds: Vec<u64>,
    pub targeted: Vec<String>,
    /// Slots whose test values average more than one word.
    pub multi_word: Vec<String>,
    pub rows: Vec<VariantResult>,
}

impl fmt::Display for GeneralizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.rows {
            writeln!(f, "{:<30} JGA {}", row.label.trim(), row.joint_goal_accuracy.percent())?;
            for (slot, s) in &row.slot_accuracy {
                let mut tags = Vec::new();
                if self.targeted.contains(slot) {
                    tags.push("unknown values");
                }
                if self.multi_word.contains(slot) {
                    tags.push("multi-word");
                }
                let tags = if tags.is_empty() { String::new() } else { format!(" [{}]", tags.join(", ")) };
                writeln!(f, "  {slot:<20} {}{tags}", s.percent())?;
            }
        }
        Ok(())
    }
}

fn multi_word_slots(ontology: &Ontology, dialogues: &[Dialogue]) -> Vec<String> {
    (0..ontology.num_slots())
        .filter(|&n| {
            let vals = slot_values(dialogues, n);
            let words: usize = vals.iter().map(|v| tokenize(v).len()).sum();
            !vals.is_empty() && words as f64 / vals.len() as f64 > 1.0
        })
        .map(|n| ontology.slots()[n].clone())
        .collect()
}

fn train_and_score(
    cfg: &TrainConfig,
    variant: Variant,
    seeds: &[u64],
    train_set: &Corpus,
    dev_set: &Corpus,
    test_set: &Corpus,
) -> Result<VariantResult, EvalError> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let c = TrainConfig {
            variant,
            seed,
            ..cfg.clone()
        };
        let out = train::<f32>(&c, &train_set.ontology, &train_set.dialogues, &dev_set.dialogues)?;
        let r = rollout_dialogues(&out.checkpoint, &test_set.dialogues)?;
        runs.push(r);
    }
    let n_slots = train_set.ontology.num_slots();
    Ok(VariantResult {
        variant,
        label: variant.label().to_string(),
        joint_goal_accuracy: SeedSummary::new(runs.iter().map(|r| r.jga).collect()),
        slot_accuracy: (0..n_slots)
            .map(|n| {
                (
                    train_set.ontology.slots()[n].clone(),
                    SeedSummary::new(runs.iter().map(|r| r.slot_accuracy[n].1).collect()),
                )
            })
            .collect(),
        invalid_extraction_rate: SeedSummary::new(runs.iter().map(|r| r.invalid_rate).collect()),
    })
}

fn same_ontology(sets: &[&Corpus]) -> Result<(), EvalError> {
    if sets.windows(2).any(|w| w[0].ontology != w[1].ontology) {
        return Err(EvalError::OntologyMismatch);
    }
    Ok(())
}

/// Trains the configured variant (and optionally a comparison variant) per
/// seed and scores per-slot accuracy on a test set whose targeted slots hold
/// only values never seen in training.
pub fn run_generalization_study(
    cfg: &TrainConfig,
    train_set: &Corpus,
    dev_set: &Corpus,
    test_set: &Corpus,
    targeted: &[String],
    seeds: &[u64],
    compare: Option<Variant>,
) -> Result<GeneralizationReport, EvalError> {
    same_ontology(&[train_set, dev_set, test_set])?;
    check_split_hygiene(&train_set.ontology, &train_set.dialogues, &test_set.dialogues, targeted)?;
    if seeds.is_empty() {
        return Err(EvalError::Empty("no seeds"));
    }
    let mut rows = vec![train_and_score(cfg, cfg.variant, seeds, train_set, dev_set, test_set)?];
    if let Some(v) = compare {
        rows.push(train_and_score(cfg, v, seeds, train_set, dev_set, test_set)?);
    }
    Ok(GeneralizationReport {
        seeds: seeds.to_vec(),
        targeted: targeted.to_vec(),
        multi_word: multi_word_slots(&test_set.ontology, &test_set.dialogues),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantResult>,
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>14} {:>10}", "model", "JGA", "delta")?;
        let base = self.rows.first().map_or(0.0, |r| r.joint_goal_accuracy.mean);
        for r in &self.rows {
            writeln!(
                f,
                "{:<32} {:>14} {:>+9.1}%",
                r.label,
                r.joint_goal_accuracy.percent(),
                100.0 * (r.joint_goal_accuracy.mean - base)
            )?;
        }
        Ok(())
    }
}

/// Trains every rung of the ablation ladder and reports test JGA per rung.
pub fn run_ablation(
    cfg: &TrainConfig,
    train_set: &Corpus,
    dev_set: &Corpus,
    test_set: &Corpus,
    seeds: &[u64],
) -> Result<AblationReport, EvalError> {
    same_ontology(&[train_set, dev_set, test_set])?;
    if seeds.is_empty() {
        return Err(EvalError::Empty("no seeds"));
    }
    let rows = Variant::LADDER
        .iter()
        .map(|&v| train_and_score(cfg, v, seeds, train_set, dev_set, test_set))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
