//! Joint objective, learning-rate schedule, Adam, the training loop with
//! early stopping, and the gradient-check entry point.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::eval::{rollout_dialogues, EvalError};
use crate::model::{
    FrozenMasks, GateKind, HeadMode, HeadOutputs, MaskSource, Model, ModelConfig, ModelError,
    NoDropout, RngDropout, Variant,
};
use crate::numerics::{
    check_gradients, nll, GradCheckReport, NumericsError, Precision, Real, Tape, Tensor, Var,
};
use crate::schema::{Dialogue, DialogueState, Ontology, Side, SpanAnnotation, Turn};
use crate::text::{
    apply_value_dropout, apply_word_dropout, build_gold_labels, serialize_input, tokenize,
    GoldLabels, InputLayout, SerializedInput, SlotTarget, TextError, Vocab,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} corpus")]
    EmptyCorpus(&'static str),
    #[error("nothing supervised: {0}")]
    NoSupervision(&'static str),
    #[error("learning-rate schedule needs at least one step")]
    NoSteps,
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    Diverged { epoch: usize, step: usize, value: f64 },
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

/// Optimization and model-size settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub peak_lr: f64,
    pub warmup: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub word_dropout: f64,
    pub value_dropout: bool,
    pub value_dropout_p: f64,
    pub history: usize,
    pub max_len: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Leave slots without a real pointer hit out of the value loss. Off by
    /// default: every slot then counts, with unresolvable ones aimed at
    /// their own anchor.
    pub mask_unresolvable: bool,
    pub clip_norm: f64,
    pub min_freq: usize,
    /// Stop as soon as dev joint goal accuracy reaches this value.
    pub stop_at_dev_jga: Option<f64>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults for a from-scratch encoder.
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn: 512,
            dropout: 0.1,
            peak_lr: 1e-3,
            warmup: 0.1,
            batch_size: 16,
            max_epochs: 100,
            patience: 15,
            word_dropout: 0.1,
            value_dropout: false,
            value_dropout_p: 0.4,
            history: 0,
            max_len: 128,
            seed: 0,
            precision: Precision::F32,
            mask_unresolvable: false,
            clip_norm: 1.0,
            min_freq: 1,
            stop_at_dev_jga: None,
        }
    }
}

impl TrainConfig {
    /// Optimization settings as published for the pretrained encoder.
    pub fn paper() -> Self {
        Self {
            peak_lr: 4e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            return bad("warmup proportion must lie in (0, 1)");
        }
        if self.patience > self.max_epochs {
            return bad("patience exceeds max epochs");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive");
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return bad("peak learning rate must be positive");
        }
        for p in [self.word_dropout, self.value_dropout_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad("dropout probability outside [0, 1]");
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, ontology: &Ontology) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_positions: self.max_len,
            dropout: self.dropout,
            ..ModelConfig::desk(vocab_size, ontology.num_slots(), ontology.num_appendix())
        }
        .with_variant(self.variant)
    }

    pub fn layout(&self) -> InputLayout {
        let (_, use_prev_state, use_appendix, _) = self.variant.settings();
        InputLayout {
            use_prev_state,
            use_appendix,
            history: self.history,
            max_len: self.max_len,
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup · total` steps, then linear
/// decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup: f64) -> Result<f64, TrainError> {
    if total == 0 {
        return Err(TrainError::NoSteps);
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = warmup * total;
    Ok(if step < warm {
        peak * step / warm
    } else {
        peak * (total - step) / (total - warm)
    })
}

/// The three loss terms; `joint` is the sum of the other two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub iob: f64,
    pub value: f64,
    pub joint: f64,
}

/// Mean IOB NLL over supervised tokens plus mean pointer NLL over supervised
/// slots, from explicit probability vectors.
pub fn joint_loss(
    iob_probs: &[Vec<f64>],
    iob_gold: &[usize],
    iob_mask: &[bool],
    value_probs: &[Vec<f64>],
    positions: &[usize],
    supervised: &[bool],
) -> Result<LossParts, TrainError> {
    let mean_nll = |probs: &[Vec<f64>], gold: &[usize], mask: &[bool]| -> Result<Option<f64>, TrainError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ((p, &g), &m) in probs.iter().zip(gold).zip(mask) {
            if m {
                total += nll(p, g)?;
                count += 1;
            }
        }
        Ok((count > 0).then(|| total / count as f64))
    };
    let iob = mean_nll(iob_probs, iob_gold, iob_mask)?
        .ok_or(TrainError::NoSupervision("no supervised dialogue tokens"))?;
    let value = mean_nll(value_probs, positions, supervised)?
        .ok_or(TrainError::NoSupervision("no supervised slots"))?;
    Ok(LossParts {
        iob,
        value,
        joint: iob + value,
    })
}

/// Flat target indices for each head of one example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Supervision {
    /// Into `[|dial|, 2N+1]`.
    pub iob: Vec<usize>,
    /// Into `[N, L]`.
    pub pointer: Vec<usize>,
    /// Into `[N, |dial|]`.
    pub span_start: Vec<usize>,
    pub span_end: Vec<usize>,
    /// Into `[N, G]`.
    pub gate: Vec<usize>,
    /// Slots contributing at least one value term.
    pub value_slots: usize,
}

/// Maps gold labels onto the heads of a model variant.
pub fn supervision(
    config: &ModelConfig,
    ser: &SerializedInput,
    gold: &GoldLabels,
    mask_unresolvable: bool,
) -> Supervision {
    let mut s = Supervision::default();
    let labels = config.iob_labels();
    if config.use_tagging {
        for (r, (&label, &keep)) in gold.iob.iter().zip(&gold.iob_mask).enumerate() {
            if keep {
                s.iob.push(r * labels + label);
            }
        }
    }
    let len = ser.len();
    let dial = ser.dial.len();
    let k = config.num_appendix;
    let g = config.gate_classes();
    for (n, target) in gold.targets.iter().enumerate() {
        let mut any = false;
        let gate_label = match config.gate() {
            GateKind::None => None,
            GateKind::Binary => Some(match *target {
                SlotTarget::Appendix(j) => 1 + j,
                _ => 0,
            }),
            GateKind::Triple => match *target {
                SlotTarget::Appendix(j) => Some(1 + j),
                SlotTarget::Carryover => Some(k + 1),
                SlotTarget::Extract { .. } | SlotTarget::Unresolvable => Some(0),
                SlotTarget::Corefer(_) => None,
            },
        };
        if let Some(label) = gate_label {
            s.gate.push(n * g + label);
            any = true;
        }
        let points = gate_label.unwrap_or(0) == 0;
        match config.mode {
            HeadMode::Navigation if points => {
                let hit = match config.gate() {
                    GateKind::Triple => matches!(target, SlotTarget::Extract { .. }),
                    _ => gold.resolvable[n] || !mask_unresolvable,
                };
                if hit {
                    s.pointer.push(n * len + gold.positions[n]);
                    any = true;
                }
            }
            HeadMode::Span if points => {
                if let SlotTarget::Extract { start, end } = *target {
                    s.span_start.push(n * dial + start - ser.dial.start);
                    s.span_end.push(n * dial + end - ser.dial.start);
                    any = true;
                }
            }
            _ => {}
        }
        if any {
            s.value_slots += 1;
        }
    }
    s
}

/// Summed log-likelihood terms of one example, still on the tape.
struct ExampleTerms {
    iob: Option<Var>,
    iob_count: usize,
    value: Option<Var>,
    value_slots: usize,
}

fn picked_sum<T: Real>(tape: &mut Tape<T>, logits: Option<Var>, idx: &[usize]) -> Option<Var> {
    let logits = logits?;
    if idx.is_empty() {
        return None;
    }
    let ls = tape.log_softmax(logits);
    let p = tape.pick(ls, idx);
    Some(tape.sum(p))
}

fn add_opt<T: Real>(tape: &mut Tape<T>, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn example_terms<T: Real>(tape: &mut Tape<T>, out: &HeadOutputs, sup: &Supervision) -> ExampleTerms {
    let iob = picked_sum(tape, out.iob, &sup.iob);
    let mut value = picked_sum(tape, out.pointer, &sup.pointer);
    let gate = picked_sum(tape, out.gate, &sup.gate);
    value = add_opt(tape, value, gate);
    if let Some((s, e)) = out.span {
        let s = picked_sum(tape, Some(s), &sup.span_start);
        let e = picked_sum(tape, Some(e), &sup.span_end);
        let se = add_opt(tape, s, e);
        value = add_opt(tape, value, se);
    }
    ExampleTerms {
        iob,
        iob_count: sup.iob.len(),
        value,
        value_slots: sup.value_slots,
    }
}

/// Batch loss variables; `joint` is computed as `iob + value` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub iob: Var,
    pub value: Var,
    pub joint: Var,
}

/// One serialized training turn with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ser: SerializedInput,
    pub gold: GoldLabels,
    pub sup: Supervision,
}

/// Forward pass and joint loss for a batch of examples on a shared tape.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    batch: &[&Example],
    inputs: &[SerializedInput],
    masks: &mut dyn MaskSource<T>,
) -> Result<BatchLoss, TrainError> {
    let mut iob_sum = None;
    let mut value_sum = None;
    let (mut iob_count, mut value_count) = (0usize, 0usize);
    for (ex, ser) in batch.iter().zip(inputs) {
        let out = model.forward(tape, params, ser, masks)?;
        let t = example_terms(tape, &out, &ex.sup);
        iob_sum = add_opt(tape, iob_sum, t.iob);
        value_sum = add_opt(tape, value_sum, t.value);
        iob_count += t.iob_count;
        value_count += t.value_slots;
    }
    let mut mean = |sum: Option<Var>, count: usize| match sum {
        Some(v) => tape.scale(v, T::lit(-1.0 / count as f64)),
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let iob = mean(iob_sum, iob_count);
    let value = mean(value_sum, value_count);
    let joint = tape.add(iob, value);
    Ok(BatchLoss { iob, value, joint })
}

/// Vocabulary over training utterances, slot names and appendix values.
pub fn build_vocab(dialogues: &[Dialogue], ontology: &Ontology, min_freq: usize) -> Result<Vocab, TrainError> {
    let mut texts: Vec<&str> = Vec::new();
    for d in dialogues {
        for t in &d.turns {
            texts.push(&t.system);
            texts.push(&t.user);
        }
    }
    let mut vocab = Vocab::build(texts.iter().copied(), min_freq)?;
    let extra: Vec<String> = ontology
        .slots()
        .iter()
        .chain(ontology.appendix())
        .flat_map(|s| tokenize(s))
        .filter(|t| !vocab.contains(t))
        .collect();
    if !extra.is_empty() {
        let joined = extra.join(" ");
        let mut all = texts.clone();
        // schema words are always kept regardless of frequency
        all.extend(std::iter::repeat_n(joined.as_str(), min_freq.max(1)));
        vocab = Vocab::build(all.iter().copied(), min_freq)?;
    }
    Ok(vocab)
}

/// Serializes every turn with its gold previous state (teacher forcing).
pub fn build_examples(
    dialogues: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocab,
    layout: &InputLayout,
    config: &ModelConfig,
    mask_unresolvable: bool,
) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for d in dialogues {
        let utts = d.utterances();
        for (t, turn) in d.turns.iter().enumerate() {
            let prev = d.prev_state(ontology, t);
            let ex = build_example(ontology, vocab, layout, config, &d.turns[..t], &utts[..t], turn, &prev, mask_unresolvable)?;
            out.push(ex);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn build_example(
    ontology: &Ontology,
    vocab: &Vocab,
    layout: &InputLayout,
    config: &ModelConfig,
    earlier: &[Turn],
    history: &[(&str, &str)],
    turn: &Turn,
    prev: &DialogueState,
    mask_unresolvable: bool,
) -> Result<Example, TrainError> {
    let ser = serialize_input(ontology, vocab, prev, history, &turn.system, &turn.user, layout)?;
    let mut spans: Vec<&[SpanAnnotation]> = vec![&turn.spans];
    spans.extend(earlier.iter().rev().take(layout.history).map(|t| t.spans.as_slice()));
    let gold = build_gold_labels(&ser, ontology, &spans, prev, &turn.state, &turn.coref)?;
    let sup = supervision(config, &ser, &gold, mask_unresolvable);
    Ok(Example { ser, gold, sup })
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[Tensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: shapes.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &gj)) in params[i].data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_iob: f64,
    pub loss_value: f64,
    pub loss_joint: f64,
    pub dev_jga: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned checkpoint.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn best_dev_jga(&self) -> f64 {
        self.epochs[self.best_epoch].dev_jga
    }
}

/// A trained model with its history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: TrainHistory,
}

fn corrupt<R: Rng + ?Sized>(
    ex: &Example,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SerializedInput, TrainError> {
    let mut ser = apply_word_dropout(&ex.ser, cfg.word_dropout, rng)?;
    if cfg.value_dropout {
        ser = apply_value_dropout(&ser, &ex.gold.value_spans, cfg.value_dropout_p, rng)?;
    }
    Ok(ser)
}

/// Trains one model; the returned checkpoint is the epoch with the best dev
/// joint goal accuracy under full rollout.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    ontology: &Ontology,
    train_set: &[Dialogue],
    dev_set: &[Dialogue],
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus("training"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    let vocab = build_vocab(train_set, ontology, cfg.min_freq)?;
    let mcfg = cfg.model_config(vocab.len(), ontology);
    let layout = cfg.layout();
    let examples = build_examples(train_set, ontology, &vocab, &layout, &mcfg, cfg.mask_unresolvable)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<T>::init(mcfg, &mut rng)?;
    let mut adam = Adam::new(model.params().tensors());
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.max_epochs;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best_params = model.params().clone();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_iob, mut sum_value) = (0.0, 0.0);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let inputs = batch
                .iter()
                .map(|ex| corrupt(ex, cfg, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let loss = batch_loss(&model, &mut tape, &params, &batch, &inputs, &mut RngDropout(&mut rng))?;
            let joint = tape.scalar(loss.joint).as_f64();
            if !joint.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    value: joint,
                });
            }
            sum_iob += tape.scalar(loss.iob).as_f64();
            sum_value += tape.scalar(loss.value).as_f64();
            let grads = tape.backward(loss.joint);
            let mut g: Vec<Option<Tensor<T>>> = (0..params.len()).map(|i| grads.param(i)).collect();
            drop(grads);
            drop(tape);
            clip_global_norm(&mut g, cfg.clip_norm);
            lr = lr_at(step, total, cfg.peak_lr, cfg.warmup)?;
            adam.step(model.params_mut().tensors_mut(), &g, lr);
        }

        let ckpt = Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            ontology: ontology.clone(),
            layout,
        };
        let dev_jga = rollout_dialogues(&ckpt, dev_set)?.jga;
        let loss_iob = sum_iob / per_epoch as f64;
        let loss_value = sum_value / per_epoch as f64;
        history.epochs.push(EpochRecord {
            epoch,
            loss_iob,
            loss_value,
            loss_joint: loss_iob + loss_value,
            dev_jga,
            lr,
        });
        if dev_jga > best {
            best = dev_jga;
            best_params = model.params().clone();
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience || cfg.stop_at_dev_jga.is_some_and(|t| dev_jga >= t) {
            break;
        }
    }

    let model = Model::from_params(model.config().clone(), best_params)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab,
            ontology: ontology.clone(),
            layout,
        },
        history,
    })
}

/// Settings of the tiny model used for gradient checking.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub eps: f64,
    /// Std of Gaussian noise added to the initial weights so that the check
    /// runs away from the near-uniform attention of a fresh model.
    pub perturb: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            hidden: 16,
            layers: 1,
            heads: 2,
            max_len: 24,
            dropout: 0.1,
            eps: 1e-5,
            perturb: 0.3,
            seed: 0,
        }
    }
}

fn gradcheck_batch() -> (Ontology, Vec<Dialogue>) {
    let ontology = Ontology::new(["food", "area"], ["dontcare"]).expect("static ontology");
    let state = |f: Option<&str>, a: Option<&str>| {
        DialogueState::from_values(vec![f.map(str::to_string), a.map(str::to_string)])
    };
    let span = |slot, side, start, len, value: &str| SpanAnnotation {
        slot,
        side,
        start,
        len,
        value: value.into(),
    };
    let turns = vec![
        Turn {
            system: "what food ?".into(),
            user: "i want thai food".into(),
            state: state(Some("thai food"), None),
            spans: vec![span(0, Side::User, 2, 2, "thai food")],
            coref: BTreeMap::new(),
        },
        Turn {
            system: "which area ?".into(),
            user: "north please , any food".into(),
            state: state(Some("thai food"), Some("north")),
            spans: vec![span(1, Side::User, 0, 1, "north")],
            coref: BTreeMap::new(),
        },
        Turn {
            system: "ok".into(),
            user: "any area is fine".into(),
            state: state(Some("thai food"), Some("dontcare")),
            spans: vec![],
            coref: BTreeMap::new(),
        },
    ];
    let dialogue = Dialogue {
        id: "gradcheck".into(),
        turns,
    };
    (ontology, vec![dialogue])
}

/// Joint-loss gradient check of a tiny high-precision model on a fixed
/// three-turn batch with randomly initialized weights.
pub fn run_gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, TrainError> {
    let (ontology, dialogues) = gradcheck_batch();
    let vocab = build_vocab(&dialogues, &ontology, 1)?;
    let tc = TrainConfig {
        variant: cfg.variant,
        hidden: cfg.hidden,
        layers: cfg.layers,
        heads: cfg.heads,
        ffn: 4 * cfg.hidden,
        dropout: cfg.dropout,
        max_len: cfg.max_len,
        ..TrainConfig::default()
    };
    let mcfg = tc.model_config(vocab.len(), &ontology);
    let layout = tc.layout();
    let examples = build_examples(&dialogues, &ontology, &vocab, &layout, &mcfg, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::<f64>::init(mcfg, &mut rng)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let inputs: Vec<SerializedInput> = examples.iter().map(|e| e.ser.clone()).collect();
    let mut masks = FrozenMasks::<f64, _>::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let mut params: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    if cfg.perturb > 0.0 {
        let noise = Normal::new(0.0, cfg.perturb).map_err(|e| TrainError::Config(e.to_string()))?;
        for p in &mut params {
            for x in p.data_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let mut failure = None;
    let report = check_gradients(&mut params, cfg.eps, |tape, vars| {
        masks.rewind();
        let src: &mut dyn MaskSource<f64> = if cfg.dropout > 0.0 { &mut masks } else { &mut NoDropout };
        match batch_loss(&model, tape, vars, &batch, &inputs, src) {
            Ok(l) => l.joint,
            Err(e) => {
                failure.get_or_insert(e);
                tape.constant(Tensor::scalar(f64::NAN))
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(report?)
}
