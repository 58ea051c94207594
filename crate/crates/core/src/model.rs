//! Embedding stack, post-LN transformer encoder, the shared IOB head,
//! per-slot position heads, and the span/gate heads used by the ablations.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Real, Tape, Tensor, Var};
use crate::text::{InputLayout, SerializedInput};

/// Logit written over the `[CLS]` column of the pointer distribution.
pub const MASKED_LOGIT: f64 = -1e9;

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("hidden size {hidden} is not divisible by {heads} heads")]
    HeadSplit { hidden: usize, heads: usize },
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("sequence of {len} tokens exceeds {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input")]
    EmptyInput,
}

/// How slot values are located in the dialogue content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One pointer per slot over the whole input, resolved through IOB tags.
    Navigation,
    /// Independent start and end pointers over the dialogue content.
    Span,
}

/// Slot-value type classifier read from `[CLS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    None,
    /// pointer | appendix value
    Binary,
    /// extract | appendix value | none
    Triple,
}

/// Rows of the cascading ablation ladder, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAppendix,
    NoPrevState,
    NoPositionPrediction,
    NoSlotTagging,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [
        Variant::Full,
        Variant::NoAppendix,
        Variant::NoPrevState,
        Variant::NoPositionPrediction,
        Variant::NoSlotTagging,
    ];

    /// (mode, use_prev_state, use_appendix, use_tagging)
    pub fn settings(self) -> (HeadMode, bool, bool, bool) {
        match self {
            Variant::Full => (HeadMode::Navigation, true, true, true),
            Variant::NoAppendix => (HeadMode::Navigation, true, false, true),
            Variant::NoPrevState => (HeadMode::Navigation, false, false, true),
            Variant::NoPositionPrediction => (HeadMode::Span, false, false, true),
            Variant::NoSlotTagging => (HeadMode::Span, false, false, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoAppendix => "- appendix slot values",
            Variant::NoPrevState => "  - previous dialogue state",
            Variant::NoPositionPrediction => "    - position prediction",
            Variant::NoSlotTagging => "      - slot tagging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub num_slots: usize,
    pub num_appendix: usize,
    pub mode: HeadMode,
    pub use_prev_state: bool,
    pub use_appendix: bool,
    pub use_tagging: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: d=128, 2 layers, 4 heads, FFN 512, dropout 0.1.
    pub fn desk(vocab_size: usize, num_slots: usize, num_appendix: usize) -> Self {
        Self {
            vocab_size,
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn: 512,
            max_positions: 128,
            dropout: 0.1,
            num_slots,
            num_appendix,
            mode: HeadMode::Navigation,
            use_prev_state: true,
            use_appendix: true,
            use_tagging: true,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        let (mode, prev, appd, tag) = v.settings();
        self.mode = mode;
        self.use_prev_state = prev;
        self.use_appendix = appd;
        self.use_tagging = tag;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::HeadSplit {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.hidden == 0 || self.ffn == 0 || self.max_positions == 0 {
            return bad("zero-sized dimension");
        }
        if self.vocab_size == 0 || self.num_slots == 0 {
            return bad("empty vocabulary or slot set");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match self.mode {
            HeadMode::Navigation if !self.use_tagging => {
                bad("navigation decoding needs the IOB head")
            }
            HeadMode::Navigation if self.use_appendix && !self.use_prev_state => {
                bad("appendix pointing without the previous state is not supported")
            }
            HeadMode::Span if self.use_appendix => bad("span heads cannot point at appendix values"),
            _ => Ok(()),
        }
    }

    pub fn gate(&self) -> GateKind {
        match self.mode {
            HeadMode::Span => GateKind::Triple,
            HeadMode::Navigation if self.use_appendix => GateKind::None,
            HeadMode::Navigation if self.use_prev_state => GateKind::Binary,
            HeadMode::Navigation => GateKind::Triple,
        }
    }

    /// Output classes per slot of the gate head.
    pub fn gate_classes(&self) -> usize {
        match self.gate() {
            GateKind::None => 0,
            GateKind::Binary => 1 + self.num_appendix,
            GateKind::Triple => 2 + self.num_appendix,
        }
    }

    pub fn iob_labels(&self) -> usize {
        2 * self.num_slots + 1
    }

    pub fn layout(&self, history: usize, max_len: usize) -> InputLayout {
        InputLayout {
            use_prev_state: self.use_prev_state,
            use_appendix: self.use_appendix,
            history,
            max_len,
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ParamIds {
    token: usize,
    segment: usize,
    position: usize,
    emb_norm: Norm,
    layers: Vec<LayerIds>,
    iob: Option<Linear>,
    pointer: Option<Linear>,
    span_start: Option<Linear>,
    span_end: Option<Linear>,
    gate: Option<Linear>,
}

/// Source of dropout masks for a forward pass.
pub trait MaskSource<T> {
    /// A keep/scale mask of `len` entries, or `None` for identity.
    fn mask(&mut self, len: usize, p: f64) -> Option<Vec<T>>;
}

/// Evaluation mode: dropout is the identity.
pub struct NoDropout;

impl<T> MaskSource<T> for NoDropout {
    fn mask(&mut self, _len: usize, _p: f64) -> Option<Vec<T>> {
        None
    }
}

/// Inverted dropout driven by an rng.
pub struct RngDropout<'a, R: ?Sized>(pub &'a mut R);

fn sample_mask<T: Real, R: Rng + ?Sized>(rng: &mut R, len: usize, p: f64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random_bool(p) { T::zero() } else { keep })
        .collect()
}

impl<T: Real, R: Rng + ?Sized> MaskSource<T> for RngDropout<'_, R> {
    fn mask(&mut self, len: usize, p: f64) -> Option<Vec<T>> {
        (p > 0.0).then(|| sample_mask(self.0, len, p))
    }
}

/// Samples masks on first use and replays them afterwards, so repeated
/// forward passes see identical dropout.
pub struct FrozenMasks<T, R> {
    rng: R,
    masks: Vec<Vec<T>>,
    cursor: usize,
}

impl<T: Real, R: Rng> FrozenMasks<T, R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            masks: Vec::new(),
            cursor: 0,
        }
    }

    /// Restart replay from the first recorded mask.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl<T: Real, R: Rng> MaskSource<T> for FrozenMasks<T, R> {
    fn mask(&mut self, len: usize, p: f64) -> Option<Vec<T>> {
        if p <= 0.0 {
            return None;
        }
        if self.cursor == self.masks.len() {
            let m = sample_mask(&mut self.rng, len, p);
            self.masks.push(m);
        }
        let m = self.masks[self.cursor].clone();
        assert_eq!(m.len(), len, "frozen mask replayed against a different shape");
        self.cursor += 1;
        Some(m)
    }
}

/// Final hidden states plus the section views.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[L, d]`
    pub hidden: Var,
    pub len: usize,
    pub dial: Range<usize>,
    pub slot_anchors: Vec<usize>,
    pub appd_anchors: Vec<usize>,
}

/// Head outputs for one serialized input, as tape variables.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub encoder: EncoderOutput,
    /// `[|dial|, 2N+1]`
    pub iob: Option<Var>,
    /// `[N, L]`, `[CLS]` column masked.
    pub pointer: Option<Var>,
    /// `[N, |dial|]` start and end logits.
    pub span: Option<(Var, Var)>,
    /// `[N, G]`
    pub gate: Option<Var>,
}

/// Trainable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break x;
            }
        })
        .collect()
}

struct Init<'a, T, R: ?Sized> {
    store: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Init<'_, T, R> {
    fn weight(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        let data = truncated_normal(self.rng, n).into_iter().map(T::lit).collect();
        self.store.push(name, Tensor::new(shape, data))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.weight(format!("{name}.weight"), vec![fan_in, fan_out]);
        let b = self.store.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self
            .store
            .push(format!("{name}.gamma"), Tensor::filled(vec![d], T::one()));
        let beta = self.store.push(format!("{name}.beta"), Tensor::zeros(vec![d]));
        Norm { gamma, beta }
    }
}

fn build_ids<T: Real, R: Rng + ?Sized>(config: &ModelConfig, init: &mut Init<'_, T, R>) -> ParamIds {
    let d = config.hidden;
    let token = init.weight("embeddings.token".into(), vec![config.vocab_size, d]);
    let segment = init.weight("embeddings.segment".into(), vec![2, d]);
    let position = init.weight("embeddings.position".into(), vec![config.max_positions, d]);
    let emb_norm = init.norm("embeddings.norm", d);
    let layers = (0..config.layers)
        .map(|i| {
            let p = format!("encoder.{i}");
            LayerIds {
                q: init.linear(&format!("{p}.attention.query"), d, d),
                k: init.linear(&format!("{p}.attention.key"), d, d),
                v: init.linear(&format!("{p}.attention.value"), d, d),
                o: init.linear(&format!("{p}.attention.output"), d, d),
                attn_norm: init.norm(&format!("{p}.attention.norm"), d),
                ffn_in: init.linear(&format!("{p}.ffn.in"), d, config.ffn),
                ffn_out: init.linear(&format!("{p}.ffn.out"), config.ffn, d),
                ffn_norm: init.norm(&format!("{p}.ffn.norm"), d),
            }
        })
        .collect();
    let n = config.num_slots;
    let iob = config
        .use_tagging
        .then(|| init.linear("heads.iob", d, config.iob_labels()));
    // column n of the pointer weight is slot n's own prediction layer
    let pointer = (config.mode == HeadMode::Navigation).then(|| init.linear("heads.pointer", d, n));
    let (span_start, span_end) = if config.mode == HeadMode::Span {
        (
            Some(init.linear("heads.span_start", d, n)),
            Some(init.linear("heads.span_end", d, n)),
        )
    } else {
        (None, None)
    };
    let gate = (config.gate() != GateKind::None)
        .then(|| init.linear("heads.gate", d, n * config.gate_classes()));
    ParamIds {
        token,
        segment,
        position,
        emb_norm,
        layers,
        iob,
        pointer,
        span_start,
        span_end,
        gate,
    }
}

impl<T: Real> Model<T> {
    /// Random initialization: truncated normal (σ = 0.02) weights, zero
    /// biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init {
            store: ParamStore::new(),
            rng,
        };
        let ids = build_ids(&config, &mut init);
        Ok(Self {
            config,
            params: init.store,
            ids,
        })
    }

    /// Rebuilds a model around loaded parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut init: Init<'_, T, _> = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let ids = build_ids(&config, &mut init);
        let template = init.store;
        if template.names() != params.names() {
            return Err(ModelError::Invalid("parameter names do not match the config".into()));
        }
        for (a, b) in template.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Invalid(format!(
                    "parameter shape {:?} expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of per-slot pointer layers (columns of the pointer weight).
    pub fn pointer_heads(&self) -> usize {
        self.ids
            .pointer
            .map_or(0, |l| self.params.tensors()[l.w].cols())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Places every parameter on the tape; ids equal parameter indices.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(i, t.clone()))
            .collect()
    }

    fn linear(&self, tape: &mut Tape<T>, p: &[Var], l: Linear, x: Var) -> Var {
        let y = tape.matmul(x, p[l.w]);
        tape.add_row(y, p[l.b])
    }

    fn norm(&self, tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Var {
        tape.layer_norm(x, p[n.gamma], p[n.beta], LN_EPS)
    }

    fn drop(&self, tape: &mut Tape<T>, x: Var, masks: &mut dyn MaskSource<T>) -> Var {
        let len = tape.value(x).len();
        match masks.mask(len, self.config.dropout) {
            Some(m) => tape.dropout(x, m),
            None => x,
        }
    }

    /// Token + segment + position embeddings followed by the encoder stack.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        ser: &SerializedInput,
        masks: &mut dyn MaskSource<T>,
    ) -> Result<EncoderOutput, ModelError> {
        let len = ser.len();
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > self.config.max_positions {
            return Err(ModelError::TooLong {
                len,
                max: self.config.max_positions,
            });
        }
        let mut ids = Vec::with_capacity(len);
        for &id in &ser.ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            ids.push(id as usize);
        }
        let segs: Vec<usize> = ser.segments.iter().map(|&s| s as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let tok = tape.embed(p[self.ids.token], &ids);
        let seg = tape.embed(p[self.ids.segment], &segs);
        let pos = tape.embed(p[self.ids.position], &positions);
        let x = tape.add(tok, seg);
        let x = tape.add(x, pos);
        let x = self.norm(tape, p, self.ids.emb_norm, x);
        let mut x = self.drop(tape, x, masks);

        for layer in &self.ids.layers {
            let q = self.linear(tape, p, layer.q, x);
            let k = self.linear(tape, p, layer.k, x);
            let v = self.linear(tape, p, layer.v, x);
            let a = tape.attention(q, k, v, self.config.heads);
            let a = self.linear(tape, p, layer.o, a);
            let a = self.drop(tape, a, masks);
            let r = tape.add(x, a);
            x = self.norm(tape, p, layer.attn_norm, r);

            let h = self.linear(tape, p, layer.ffn_in, x);
            let h = tape.gelu(h);
            let h = self.linear(tape, p, layer.ffn_out, h);
            let h = self.drop(tape, h, masks);
            let r = tape.add(x, h);
            x = self.norm(tape, p, layer.ffn_norm, r);
        }
        Ok(EncoderOutput {
            hidden: x,
            len,
            dial: ser.dial.clone(),
            slot_anchors: ser.slot_anchors.clone(),
            appd_anchors: ser.appd_anchors.clone(),
        })
    }

    fn dial_hidden(&self, tape: &mut Tape<T>, enc: &EncoderOutput) -> Var {
        tape.rows(enc.hidden, enc.dial.start, enc.dial.end)
    }

    /// IOB logits for every dialogue-content token, `[|dial|, 2N+1]`.
    pub fn iob_logits(&self, tape: &mut Tape<T>, p: &[Var], enc: &EncoderOutput) -> Option<Var> {
        let head = self.ids.iob?;
        let h = self.dial_hidden(tape, enc);
        Some(self.linear(tape, p, head, h))
    }

    /// Pointer logits of every slot over the full input, `[N, L]`, with the
    /// `[CLS]` column masked.
    pub fn position_logits(&self, tape: &mut Tape<T>, p: &[Var], enc: &EncoderOutput) -> Option<Var> {
        let head = self.ids.pointer?;
        let scores = self.linear(tape, p, head, enc.hidden);
        let per_slot = tape.transpose(scores);
        let cls: Vec<usize> = (0..self.config.num_slots).map(|n| n * enc.len).collect();
        Some(tape.mask_fill(per_slot, &cls, T::lit(MASKED_LOGIT)))
    }

    /// Start and end logits of every slot over the dialogue content, each `[N, |dial|]`.
    pub fn span_logits(&self, tape: &mut Tape<T>, p: &[Var], enc: &EncoderOutput) -> Option<(Var, Var)> {
        let (start, end) = (self.ids.span_start?, self.ids.span_end?);
        let h = self.dial_hidden(tape, enc);
        let s = self.linear(tape, p, start, h);
        let e = self.linear(tape, p, end, h);
        Some((tape.transpose(s), tape.transpose(e)))
    }

    /// Gate logits of every slot from the `[CLS]` state, `[N, G]`.
    pub fn gate_logits(&self, tape: &mut Tape<T>, p: &[Var], enc: &EncoderOutput) -> Option<Var> {
        let head = self.ids.gate?;
        let cls = tape.rows(enc.hidden, 0, 1);
        let g = self.linear(tape, p, head, cls);
        Some(tape.reshape(g, vec![self.config.num_slots, self.config.gate_classes()]))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        ser: &SerializedInput,
        masks: &mut dyn MaskSource<T>,
    ) -> Result<HeadOutputs, ModelError> {
        let encoder = self.encode(tape, p, ser, masks)?;
        let iob = self.iob_logits(tape, p, &encoder);
        let pointer = self.position_logits(tape, p, &encoder);
        let span = self.span_logits(tape, p, &encoder);
        let gate = self.gate_logits(tape, p, &encoder);
        Ok(HeadOutputs {
            encoder,
            iob,
            pointer,
            span,
            gate,
        })
    }

    /// Evaluation-mode forward pass returning plain logits.
    pub fn predict(&self, ser: &SerializedInput) -> Result<TurnLogits, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let out = self.forward(&mut tape, &p, ser, &mut NoDropout)?;
        let rows = |tape: &Tape<T>, v: Var| -> Vec<Vec<f64>> {
            let t = tape.value(v);
            (0..t.rows())
                .map(|r| t.row(r).iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        Ok(TurnLogits {
            iob: out.iob.map(|v| rows(&tape, v)),
            pointer: out.pointer.map(|v| rows(&tape, v)),
            span: out.span.map(|(s, e)| (rows(&tape, s), rows(&tape, e))),
            gate: out.gate.map(|v| rows(&tape, v)),
        })
    }
}

/// Logits from one evaluation forward pass, row per token or per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnLogits {
    pub iob: Option<Vec<Vec<f64>>>,
    pub pointer: Option<Vec<Vec<f64>>>,
    pub span: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    pub gate: Option<Vec<Vec<f64>>>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Ontology;
    use crate::text::{serialize_input, Vocab};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Ontology, Vocab, SerializedInput) {
        let o = Ontology::new(["food", "area"], ["dontcare"]).unwrap();
        let v = Vocab::build(["any food preference ; i want thai food", "area dontcare"], 1).unwrap();
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
        (o, v, ser)
    }

    fn small(vocab: usize, n: usize) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            max_positions: 32,
            ..ModelConfig::desk(vocab, n, 1)
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small(20, 2);
        let a = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Model::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, c);
        let w = a.params().get("encoder.0.attention.query.weight").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
        assert!(a.params().get("encoder.0.attention.query.bias").unwrap().data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn head_shapes_follow_slot_count() {
        let m = Model::<f32>::init(small(20, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.params().get("heads.iob.weight").unwrap().shape(), &[16, 5]);
        let m = Model::<f32>::init(small(20, 5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.pointer_heads(), 5);
        assert_eq!(m.params().names().iter().filter(|n| n.starts_with("heads.iob")).count(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = small(20, 2);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::HeadSplit { .. })));
        let c = small(20, 2);
        for v in Variant::LADDER {
            assert!(c.clone().with_variant(v).validate().is_ok(), "{v:?}");
        }
        let mut bad = small(20, 2).with_variant(Variant::NoSlotTagging);
        bad.mode = HeadMode::Navigation;
        assert!(bad.validate().is_err());
        assert_eq!(small(20, 2).with_variant(Variant::NoAppendix).gate(), GateKind::Binary);
        assert_eq!(small(20, 2).with_variant(Variant::NoAppendix).gate_classes(), 2);
        assert_eq!(small(20, 2).with_variant(Variant::NoPrevState).gate_classes(), 3);
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let (_, v, ser) = setup();
        let m = Model::<f64>::init(small(v.len(), 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let out = m.forward(&mut tape, &p, &ser, &mut NoDropout).unwrap();
        assert_eq!(tape.value(out.encoder.hidden).shape(), &[21, 16]);
        assert_eq!(tape.value(out.iob.unwrap()).shape(), &[10, 5]);
        let ptr = tape.value(out.pointer.unwrap());
        assert_eq!(ptr.shape(), &[2, 21]);
        assert_eq!(ptr.data()[0], MASKED_LOGIT);
        assert_eq!(ptr.data()[21], MASKED_LOGIT);
        assert!(out.span.is_none() && out.gate.is_none());
        assert_eq!(m.predict(&ser).unwrap(), m.predict(&ser).unwrap());
    }

    #[test]
    fn position_embeddings_make_order_matter() {
        let (_, v, ser) = setup();
        let m = Model::<f64>::init(small(v.len(), 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut swapped = ser.clone();
        swapped.ids.swap(2, 3);
        assert_ne!(m.predict(&ser).unwrap(), m.predict(&swapped).unwrap());
    }

    #[test]
    fn zero_heads_give_uniform_and_lowest_index() {
        let (_, v, ser) = setup();
        let mut m = Model::<f64>::init(small(v.len(), 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (name, t) in m.params.names.iter().zip(m.params.tensors.iter_mut()) {
            if name.starts_with("heads.") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let out = m.predict(&ser).unwrap();
        for row in out.iob.unwrap() {
            let p = crate::numerics::softmax(&row).unwrap();
            assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-12));
        }
        for row in out.pointer.unwrap() {
            assert_eq!(argmax(&row), 1);
        }
    }

    #[test]
    fn hand_set_heads_match_manual_arithmetic() {
        // 1 slot, hidden 2: check the pointer and IOB linear maps on fixed hidden states
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
        let w = tape.constant(Tensor::new(vec![2, 1], vec![0.5, -1.0]));
        let b = tape.constant(Tensor::new(vec![1], vec![0.25]));
        let y = tape.matmul(h, w);
        let y = tape.add_row(y, b);
        // 1*.5 - 2 + .25 ; -1*.5 - .5 + .25 ; 0 - 3 + .25
        assert_eq!(tape.value(y).data(), &[-1.25, -0.75, -2.75]);

        let w3 = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.0, 1.0, 1.0]));
        let b3 = tape.constant(Tensor::new(vec![3], vec![0.0, 0.1, 0.2]));
        let rows = tape.rows(h, 0, 2);
        let z = tape.matmul(rows, w3);
        let z = tape.add_row(z, b3);
        assert_eq!(tape.value(z).data(), &[1.0, 2.1, 1.2, -1.0, 0.6, 1.7]);
    }

    #[test]
    fn gate_and_span_heads() {
        let (o, v, _) = setup();
        let cfg = small(v.len(), 2).with_variant(Variant::NoSlotTagging);
        let ser = serialize_input(
            &o,
            &v,
            &o.empty_state(),
            &[],
            "any food preference",
            "i want thai food",
            &cfg.layout(0, 32),
        )
        .unwrap();
        let m = Model::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let out = m.predict(&ser).unwrap();
        assert!(out.iob.is_none() && out.pointer.is_none());
        let (s, e) = out.span.unwrap();
        assert_eq!((s.len(), s[0].len(), e[0].len()), (2, 10, 10));
        let g = out.gate.unwrap();
        assert_eq!((g.len(), g[0].len()), (2, 3));
    }

    #[test]
    fn rejects_oversized_input() {
        let (_, v, ser) = setup();
        let mut cfg = small(v.len(), 2);
        cfg.max_positions = 10;
        let m = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.predict(&ser), Err(ModelError::TooLong { len: 21, max: 10 }));
    }

    #[test]
    fn frozen_masks_replay() {
        let mut f = FrozenMasks::<f64, _>::new(ChaCha8Rng::seed_from_u64(9));
        let a = f.mask(50, 0.5).unwrap();
        f.rewind();
        assert_eq!(f.mask(50, 0.5).unwrap(), a);
        assert!(a.iter().all(|&x| x == 0.0 || x == 2.0));
    }
}
