use serde::{Deserialize, Serialize};

use super::{DeactivationSet, ModelConfig, ModelWeights};
use crate::autograd::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// How much of the forward pass to keep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    #[default]
    None,
    Attention,
    Full,
}

/// Per-layer additive pre-softmax masks (`0` or `-inf`), `[seq, seq]` each,
/// applied to every head of the layer on top of the causal mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtraMask {
    layers: Vec<Option<Tensor<f64>>>,
}

impl ExtraMask {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_layer(&mut self, layer: usize, mask: Tensor<f64>) {
        self.layers[layer] = Some(mask);
    }

    pub fn layer(&self, layer: usize) -> Option<&Tensor<f64>> {
        self.layers.get(layer).and_then(Option::as_ref)
    }

    /// True when no layer carries a `-inf` entry.
    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|m| m.data().iter().all(|&v| v == 0.0))
    }

    /// Layers that carry a mask tensor.
    pub fn masked_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|_| i))
            .collect()
    }
}

/// Additive perturbation of one post-softmax attention probability. Used by
/// finite-difference checks on attention-matrix gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionEdit {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub extra_mask: Option<&'a ExtraMask>,
    pub deactivations: Option<&'a DeactivationSet>,
    pub trace: TraceLevel,
    pub attention_edits: &'a [AttentionEdit],
}

impl<'a> ForwardOptions<'a> {
    pub fn traced(level: TraceLevel) -> Self {
        Self {
            trace: level,
            ..Self::default()
        }
    }

    pub fn with_mask(mut self, mask: Option<&'a ExtraMask>) -> Self {
        self.extra_mask = mask;
        self
    }

    pub fn with_deactivations(mut self, set: Option<&'a DeactivationSet>) -> Self {
        self.deactivations = set;
        self
    }
}

/// Everything captured from one single-sequence forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<S = f64> {
    pub level: TraceLevel,
    pub seq_len: usize,
    pub n_heads: usize,
    /// Per layer `[heads, seq, seq]`, post-softmax.
    pub attention: Vec<Tensor<S>>,
    /// Per layer `[seq, d_ff]`, `act(h W_gate)` after any deactivation.
    pub gate: Vec<Tensor<S>>,
    /// Per layer `[seq, d_model]`.
    pub mha_delta: Vec<Tensor<S>>,
    pub mlp_delta: Vec<Tensor<S>>,
    /// Per layer residual stream after the block.
    pub hidden: Vec<Tensor<S>>,
    /// Residual stream entering layer 0 (token + position embedding).
    pub embedded: Option<Tensor<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    fn empty(level: TraceLevel, seq_len: usize, n_heads: usize) -> Self {
        Self {
            level,
            seq_len,
            n_heads,
            attention: Vec::new(),
            gate: Vec::new(),
            mha_delta: Vec::new(),
            mlp_delta: Vec::new(),
            hidden: Vec::new(),
            embedded: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.attention.len()
    }

    /// Attention probability of head `h`, layer `l`, query row `i`, key column `j`.
    pub fn attn(&self, layer: usize, head: usize, row: usize, col: usize) -> S {
        let t = self.seq_len;
        self.attention[layer].data()[(head * t + row) * t + col]
    }

    pub fn require_full(&self) -> Result<()> {
        if self.level < TraceLevel::Full || self.embedded.is_none() {
            return Err(Error::TraceLevel("hidden states"));
        }
        Ok(())
    }

    pub fn require_attention(&self) -> Result<()> {
        if self.level < TraceLevel::Attention {
            return Err(Error::TraceLevel("attention matrices"));
        }
        Ok(())
    }

    /// Residual stream entering `layer`.
    pub fn hidden_before(&self, layer: usize) -> Result<&Tensor<S>> {
        self.require_full()?;
        Ok(if layer == 0 {
            self.embedded.as_ref().expect("checked above")
        } else {
            &self.hidden[layer - 1]
        })
    }
}

/// Parameter handles on a tape, mirroring [`ModelWeights`].
pub struct ParamVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm_gain: Var,
    pub final_norm_bias: Var,
    pub unembedding: Var,
    /// Same order as [`ModelWeights::named_tensors`].
    pub all: Vec<Var>,
}

pub struct LayerVars {
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub mlp_norm_gain: Var,
    pub mlp_norm_bias: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl ParamVars {
    pub fn register<S: Scalar>(
        tape: &mut Tape<S>,
        weights: &ModelWeights<S>,
        requires_grad: bool,
    ) -> Self {
        let mut all = Vec::new();
        let mut leaf = |tape: &mut Tape<S>, t: &Tensor<S>| {
            let v = tape.leaf(t.clone(), requires_grad);
            all.push(v);
            v
        };
        let token_embedding = leaf(tape, &weights.token_embedding);
        let position_embedding = leaf(tape, &weights.position_embedding);
        let layers = weights
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm_gain: leaf(tape, &l.attn_norm_gain),
                attn_norm_bias: leaf(tape, &l.attn_norm_bias),
                w_q: leaf(tape, &l.w_q),
                w_k: leaf(tape, &l.w_k),
                w_v: leaf(tape, &l.w_v),
                w_o: leaf(tape, &l.w_o),
                mlp_norm_gain: leaf(tape, &l.mlp_norm_gain),
                mlp_norm_bias: leaf(tape, &l.mlp_norm_bias),
                w_gate: leaf(tape, &l.w_gate),
                w_up: leaf(tape, &l.w_up),
                w_down: leaf(tape, &l.w_down),
            })
            .collect();
        let final_norm_gain = leaf(tape, &weights.final_norm_gain);
        let final_norm_bias = leaf(tape, &weights.final_norm_bias);
        let unembedding = match &weights.unembedding {
            Some(u) => leaf(tape, u),
            None => token_embedding,
        };
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain,
            final_norm_bias,
            unembedding,
            all,
        }
    }
}

/// Handles to the interesting intermediates of a forward pass on a tape.
pub struct TapeForward {
    /// `[batch*seq, vocab]`
    pub logits: Var,
    /// Per layer `[batch*heads, seq, seq]`.
    pub attention: Vec<Var>,
    pub gate: Vec<Var>,
    pub mha_delta: Vec<Var>,
    pub mlp_delta: Vec<Var>,
    pub hidden: Vec<Var>,
    pub embedded: Var,
    pub batch: usize,
    pub seq_len: usize,
}

fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = S::neg_infinity();
        }
    }
    m
}

/// Validates a batch of equal-length sequences against the config.
fn check_tokens(config: &ModelConfig, batch: &[&[TokenId]]) -> Result<usize> {
    let t = batch.first().map_or(0, |s| s.len());
    if t == 0 {
        return Err(Error::Contract("forward needs a nonempty sequence".into()));
    }
    if batch.iter().any(|s| s.len() != t) {
        return Err(Error::Contract(
            "batched sequences must share one length".into(),
        ));
    }
    if t > config.max_seq {
        return Err(Error::Overlength {
            len: t,
            max: config.max_seq,
        });
    }
    for s in batch {
        if let Some(&id) = s.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(t)
}

/// Runs the model over a batch of equal-length sequences on `tape`.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    config: &ModelConfig,
    batch: &[&[TokenId]],
    opts: &ForwardOptions<'_>,
) -> Result<TapeForward> {
    let t = check_tokens(config, batch)?;
    let b = batch.len();
    let (h, dh) = (config.n_heads, config.head_dim());
    if let Some(set) = opts.deactivations {
        set.validate(config)?;
    }
    if let Some(mask) = opts.extra_mask {
        if mask.n_layers() > config.n_layers {
            return Err(Error::Shape(format!(
                "extra mask addresses {} layers, model has {}",
                mask.n_layers(),
                config.n_layers
            )));
        }
        for l in mask.masked_layers() {
            let shape = mask.layer(l).expect("listed").shape();
            if shape != [t, t] {
                return Err(Error::Shape(format!(
                    "extra mask for layer {l} is {shape:?}, sequence needs [{t}, {t}]"
                )));
            }
        }
    }
    for e in opts.attention_edits {
        if e.layer >= config.n_layers || e.head >= b * h || e.row >= t || e.col >= t {
            return Err(Error::Shape(format!("attention edit {e:?} out of range")));
        }
    }

    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.iter().map(|&x| x as usize))
        .collect();
    let pos: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let tok = tape.embedding(params.token_embedding, &ids)?;
    let pe = tape.embedding(params.position_embedding, &pos)?;
    let mut x = tape.add(tok, pe)?;
    let embedded = x;

    let causal = causal_mask::<S>(t);
    let eps = S::from_f64_lossy(config.layernorm_eps);
    let inv_sqrt = S::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out = TapeForward {
        logits: x,
        attention: Vec::with_capacity(config.n_layers),
        gate: Vec::with_capacity(config.n_layers),
        mha_delta: Vec::with_capacity(config.n_layers),
        mlp_delta: Vec::with_capacity(config.n_layers),
        hidden: Vec::with_capacity(config.n_layers),
        embedded,
        batch: b,
        seq_len: t,
    };

    for (l, lv) in params.layers.iter().enumerate() {
        let hn = tape.layernorm(x, lv.attn_norm_gain, lv.attn_norm_bias, eps)?;
        let q = tape.matmul(hn, lv.w_q)?;
        let k = tape.matmul(hn, lv.w_k)?;
        let v = tape.matmul(hn, lv.w_v)?;
        let qh = tape.split_heads(q, b, t, h)?;
        let kh = tape.split_heads(k, b, t, h)?;
        let vh = tape.split_heads(v, b, t, h)?;
        let raw = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(raw, inv_sqrt);
        let mask = match opts.extra_mask.and_then(|m| m.layer(l)) {
            Some(extra) => {
                let mut m = causal.clone();
                for (c, &e) in m.data_mut().iter_mut().zip(extra.data()) {
                    *c = *c + S::from_f64_lossy(e);
                }
                m
            }
            None => causal.clone(),
        };
        let mut probs = tape.softmax_masked(scores, Some(&mask))?;
        let edits: Vec<&AttentionEdit> = opts
            .attention_edits
            .iter()
            .filter(|e| e.layer == l)
            .collect();
        if !edits.is_empty() {
            let mut delta = Tensor::zeros(&[b * h, t, t]);
            for e in edits {
                let cur = delta.get(&[e.head, e.row, e.col]);
                delta.set(&[e.head, e.row, e.col], cur + S::from_f64_lossy(e.delta));
            }
            let dv = tape.constant(delta);
            probs = tape.add(probs, dv)?;
        }
        out.attention.push(probs);
        let ctx = tape.matmul(probs, vh)?;
        let merged = tape.merge_heads(ctx, b, t, h)?;
        let mha_delta = tape.matmul(merged, lv.w_o)?;
        out.mha_delta.push(mha_delta);
        let mid = tape.add(x, mha_delta)?;

        let hn2 = tape.layernorm(mid, lv.mlp_norm_gain, lv.mlp_norm_bias, eps)?;
        let pre_gate = tape.matmul(hn2, lv.w_gate)?;
        let mut gate = tape.activation(pre_gate, config.activation);
        if let Some(set) = opts.deactivations {
            let mut keep = Tensor::full(&[config.d_ff], S::one());
            let mut any = false;
            for j in set.in_layer(l) {
                keep.data_mut()[j] = S::zero();
                any = true;
            }
            if any {
                let kv = tape.constant(keep);
                gate = tape.mul(gate, kv)?;
            }
        }
        out.gate.push(gate);
        let up = tape.matmul(hn2, lv.w_up)?;
        let prod = tape.mul(gate, up)?;
        let mlp_delta = tape.matmul(prod, lv.w_down)?;
        out.mlp_delta.push(mlp_delta);
        x = tape.add(mid, mlp_delta)?;
        out.hidden.push(x);
    }

    let fin = tape.layernorm(x, params.final_norm_gain, params.final_norm_bias, eps)?;
    out.logits = tape.matmul_t(fin, params.unembedding, false, true)?;
    Ok(out)
}

/// Single-sequence forward pass returning `[seq, vocab]` logits and a trace.
pub fn forward<S: Scalar>(
    weights: &ModelWeights<S>,
    tokens: &[TokenId],
    opts: &ForwardOptions<'_>,
) -> Result<(Tensor<S>, ForwardTrace<S>)> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, weights, false);
    let fw = forward_on_tape(&mut tape, &params, &weights.config, &[tokens], opts)?;
    let trace = extract_trace(&mut tape, &fw, opts.trace, weights.config.n_heads);
    let logits = tape.take_value(fw.logits);
    Ok((logits, trace))
}

pub(crate) fn extract_trace<S: Scalar>(
    tape: &mut Tape<S>,
    fw: &TapeForward,
    level: TraceLevel,
    n_heads: usize,
) -> ForwardTrace<S> {
    let mut trace = ForwardTrace::empty(level, fw.seq_len, n_heads);
    if level >= TraceLevel::Attention {
        trace.attention = fw
            .attention
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();
    }
    if level >= TraceLevel::Full {
        let grab = |tape: &Tape<S>, vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        trace.gate = grab(tape, &fw.gate);
        trace.mha_delta = grab(tape, &fw.mha_delta);
        trace.mlp_delta = grab(tape, &fw.mlp_delta);
        trace.hidden = grab(tape, &fw.hidden);
        trace.embedded = Some(tape.value(fw.embedded).clone());
    }
    trace
}
