use serde::{Deserialize, Serialize};

use super::forward::{forward, ExtraMask, ForwardOptions, ForwardTrace};
use super::{DeactivationSet, ModelWeights};
use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_softmax_at<S: Scalar>(row: &[S], index: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    row[index].as_f64() - max - z.ln()
}

/// Greedy continuation of `prompt` for at most `max_new` tokens.
///
/// Stops early after emitting a token in `stop` (which is not included in
/// the result) or when the context reaches `max_seq`.
pub fn generate_greedy<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    max_new: usize,
    stop: &[TokenId],
    deactivations: Option<&DeactivationSet>,
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a nonempty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let opts = ForwardOptions::default().with_deactivations(deactivations);
    while out.len() < max_new && seq.len() < weights.config.max_seq {
        let (logits, _) = forward(weights, &seq, &opts)?;
        let next = argmax(logits.row(seq.len() - 1)) as TokenId;
        if stop.contains(&next) {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceProb {
    /// Sum of per-token log-probabilities.
    pub joint_logprob: f64,
    /// `exp(joint_logprob / len)`.
    pub geometric_mean: f64,
}

impl SequenceProb {
    pub fn joint(&self) -> f64 {
        self.joint_logprob.exp()
    }
}

/// Teacher-forced probability of `continuation` after `prompt`.
///
/// The extra mask may be sized for the prompt only; it is zero-padded to
/// cover the continuation positions.
pub fn sequence_logprob<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    continuation: &[TokenId],
    extra_mask: Option<&ExtraMask>,
    deactivations: Option<&DeactivationSet>,
) -> Result<SequenceProb> {
    if continuation.is_empty() {
        return Err(Error::Contract("continuation must be nonempty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&continuation[..continuation.len() - 1]);
    let mask = extra_mask.map(|m| m.resized(seq.len()));
    let opts = ForwardOptions::default()
        .with_mask(mask.as_ref())
        .with_deactivations(deactivations);
    let (logits, _) = forward(weights, &seq, &opts)?;
    let joint: f64 = continuation
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax_at(logits.row(prompt.len() - 1 + i), tok as usize))
        .sum();
    Ok(SequenceProb {
        joint_logprob: joint,
        geometric_mean: (joint / continuation.len() as f64).exp(),
    })
}

impl ExtraMask {
    /// Copy whose per-layer masks are cropped or zero-padded to `[t, t]`.
    pub fn resized(&self, t: usize) -> ExtraMask {
        let mut out = ExtraMask::new(self.n_layers());
        for l in self.masked_layers() {
            let m = self.layer(l).expect("listed");
            let old = m.shape()[0];
            let mut n = Tensor::zeros(&[t, t]);
            for i in 0..t.min(old) {
                for j in 0..t.min(old) {
                    n.data_mut()[i * t + j] = m.data()[i * old + j];
                }
            }
            out.set_layer(l, n);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// Unembed the residual stream itself.
    Cumulative,
    /// Unembed only one module's increment.
    Increment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensSource {
    PostMha,
    PostMlp,
}

/// Early decoding: final layernorm then unembedding applied to an
/// intermediate residual-stream state (or a single module's increment).
pub fn logit_lens<S: Scalar>(
    weights: &ModelWeights<S>,
    trace: &ForwardTrace<S>,
    position: usize,
    mode: LensMode,
    layer: usize,
    source: LensSource,
) -> Result<Vec<f64>> {
    trace.require_full()?;
    if layer >= trace.hidden.len() {
        return Err(Error::Contract(format!("layer {layer} not in trace")));
    }
    if position >= trace.seq_len {
        return Err(Error::Contract(format!(
            "position {position} beyond sequence"
        )));
    }
    let row: Vec<S> = match (mode, source) {
        (LensMode::Cumulative, LensSource::PostMlp) => trace.hidden[layer].row(position).to_vec(),
        (LensMode::Cumulative, LensSource::PostMha) => trace
            .hidden_before(layer)?
            .row(position)
            .iter()
            .zip(trace.mha_delta[layer].row(position))
            .map(|(&a, &b)| a + b)
            .collect(),
        (LensMode::Increment, LensSource::PostMha) => trace.mha_delta[layer].row(position).to_vec(),
        (LensMode::Increment, LensSource::PostMlp) => trace.mlp_delta[layer].row(position).to_vec(),
    };
    Ok(unembed_row(weights, &row))
}

/// `W^U · LayerNorm_final(h)` for one residual vector.
pub fn unembed_row<S: Scalar>(weights: &ModelWeights<S>, h: &[S]) -> Vec<f64> {
    let d = h.len();
    let dn = S::from_usize(d).unwrap_or_else(S::one);
    let mean = h.iter().copied().sum::<S>() / dn;
    let var = h.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
    let inv = S::one() / (var + S::from_f64_lossy(weights.config.layernorm_eps)).sqrt();
    let normed: Vec<S> = h
        .iter()
        .zip(weights.final_norm_gain.data())
        .zip(weights.final_norm_bias.data())
        .map(|((&x, &g), &b)| (x - mean) * inv * g + b)
        .collect();
    let u = weights.unembed();
    (0..u.shape()[0])
        .map(|v| {
            u.row(v)
                .iter()
                .zip(&normed)
                .map(|(&w, &x)| w * x)
                .sum::<S>()
                .as_f64()
        })
        .collect()
}
