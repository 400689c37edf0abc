//! Pre-norm decoder-only transformer with a GLU MLP.
//!
//! Block order is `x += MHA(LN(x)); x += MLP(LN(x))`, with
//! `MLP(h) = (act(h W_gate) ⊙ h W_up) W_down`. Positions use learned
//! absolute embeddings added to the token embeddings. Linear maps carry no
//! bias; layernorms do.

mod decode;
mod forward;
mod io;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Scalar, Tensor};
use crate::error::{Error, Result};

pub use decode::{
    generate_greedy, logit_lens, sequence_logprob, unembed_row, LensMode, LensSource, SequenceProb,
};
pub use forward::{
    forward, forward_on_tape, AttentionEdit, ExtraMask, ForwardOptions, ForwardTrace, ParamVars,
    TapeForward, TraceLevel,
};
pub use io::{load_weights, read_weights, save_weights, write_weights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_eps")]
    pub layernorm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S = f64> {
    pub attn_norm_gain: Tensor<S>,
    pub attn_norm_bias: Tensor<S>,
    /// `[d_model, d_model]` each, applied as `h · W`.
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub mlp_norm_gain: Tensor<S>,
    pub mlp_norm_bias: Tensor<S>,
    /// `[d_model, d_ff]`
    pub w_gate: Tensor<S>,
    /// `[d_model, d_ff]`
    pub w_up: Tensor<S>,
    /// `[d_ff, d_model]`; row `j` is neuron `j`'s write-out.
    pub w_down: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<S = f64> {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub token_embedding: Tensor<S>,
    /// `[max_seq, d_model]`
    pub position_embedding: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm_gain: Tensor<S>,
    pub final_norm_bias: Tensor<S>,
    /// `[vocab, d_model]`; absent when embeddings are tied.
    pub unembedding: Option<Tensor<S>>,
}

impl<S: Scalar> ModelWeights<S> {
    /// Gaussian initialization (std 0.02, output projections scaled down by
    /// `sqrt(2 n_layers)`), unit layernorm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let out_std = std / ((2 * config.n_layers) as f64).sqrt();
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut normal = |shape: &[usize], s: f64| -> Tensor<S> {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64_lossy(dist.sample(&mut rng)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("consistent shape")
        };
        let token_embedding = normal(&[v, d], std);
        let position_embedding = normal(&[config.max_seq, d], std);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: Tensor::full(&[d], S::one()),
                attn_norm_bias: Tensor::zeros(&[d]),
                w_q: normal(&[d, d], std),
                w_k: normal(&[d, d], std),
                w_v: normal(&[d, d], std),
                w_o: normal(&[d, d], out_std),
                mlp_norm_gain: Tensor::full(&[d], S::one()),
                mlp_norm_bias: Tensor::zeros(&[d]),
                w_gate: normal(&[d, f], std),
                w_up: normal(&[d, f], std),
                w_down: normal(&[f, d], out_std),
            })
            .collect();
        let unembedding = (!config.tie_embeddings).then(|| normal(&[v, d], std));
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: Tensor::full(&[d], S::one()),
            final_norm_bias: Tensor::zeros(&[d]),
            unembedding,
        })
    }

    /// Unembedding matrix `[vocab, d_model]` (the token embedding when tied).
    pub fn unembed(&self) -> &Tensor<S> {
        self.unembedding.as_ref().unwrap_or(&self.token_embedding)
    }

    /// All parameter tensors with stable names, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.token_embedding),
            ("pos_emb".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.attn_norm.gain"), &l.attn_norm_gain),
                (format!("layers.{i}.attn_norm.bias"), &l.attn_norm_bias),
                (format!("layers.{i}.attn.w_q"), &l.w_q),
                (format!("layers.{i}.attn.w_k"), &l.w_k),
                (format!("layers.{i}.attn.w_v"), &l.w_v),
                (format!("layers.{i}.attn.w_o"), &l.w_o),
                (format!("layers.{i}.mlp_norm.gain"), &l.mlp_norm_gain),
                (format!("layers.{i}.mlp_norm.bias"), &l.mlp_norm_bias),
                (format!("layers.{i}.mlp.w_gate"), &l.w_gate),
                (format!("layers.{i}.mlp.w_up"), &l.w_up),
                (format!("layers.{i}.mlp.w_down"), &l.w_down),
            ]);
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm_gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm_bias));
        if let Some(u) = &self.unembedding {
            out.push(("unembed".to_string(), u));
        }
        out
    }

    /// Mutable parameter tensors, same order as [`ModelWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm_gain,
                &mut l.attn_norm_bias,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.mlp_norm_gain,
                &mut l.mlp_norm_bias,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        if let Some(u) = &mut self.unembedding {
            out.push(u);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the shapes the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        if c.tie_embeddings == self.unembedding.is_some() {
            return Err(Error::Shape(
                "unembedding presence disagrees with tie_embeddings".into(),
            ));
        }
        for (name, t) in self.named_tensors() {
            let want: Vec<usize> = expected_shape(&name, d, f, v, c.max_seq)
                .ok_or_else(|| Error::Shape(format!("unexpected tensor `{name}`")))?;
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copy with the `W_down` rows of every deactivated neuron zeroed.
    pub fn with_down_rows_zeroed(&self, set: &DeactivationSet) -> Result<Self> {
        set.validate(&self.config)?;
        let mut out = self.clone();
        for &(layer, neuron) in set.iter() {
            out.layers[layer].w_down.row_mut(neuron).fill(S::zero());
        }
        Ok(out)
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        ModelWeights {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm_gain: l.attn_norm_gain.cast(),
                    attn_norm_bias: l.attn_norm_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    mlp_norm_gain: l.mlp_norm_gain.cast(),
                    mlp_norm_bias: l.mlp_norm_bias.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
            unembedding: self.unembedding.as_ref().map(Tensor::cast),
        }
    }
}

pub(crate) fn expected_shape(
    name: &str,
    d: usize,
    f: usize,
    v: usize,
    max_seq: usize,
) -> Option<Vec<usize>> {
    let suffix = name.rsplit_once("layers.").map_or(name, |(_, rest)| {
        rest.split_once('.').map_or(rest, |(_, tail)| tail)
    });
    Some(match suffix {
        "tok_emb" | "unembed" => vec![v, d],
        "pos_emb" => vec![max_seq, d],
        "attn.w_q" | "attn.w_k" | "attn.w_v" | "attn.w_o" => vec![d, d],
        "mlp.w_gate" | "mlp.w_up" => vec![d, f],
        "mlp.w_down" => vec![f, d],
        "attn_norm.gain" | "attn_norm.bias" | "mlp_norm.gain" | "mlp_norm.bias"
        | "final_norm.gain" | "final_norm.bias" => vec![d],
        _ => return None,
    })
}

/// Set of `(layer, neuron)` MLP neurons whose gate activation is forced to 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeactivationSet(BTreeSet<(usize, usize)>);

impl DeactivationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, neuron: usize) -> bool {
        self.0.insert((layer, neuron))
    }

    pub fn contains(&self, layer: usize, neuron: usize) -> bool {
        self.0.contains(&(layer, neuron))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }

    /// Every neuron of every layer.
    pub fn all(config: &ModelConfig) -> Self {
        (0..config.n_layers)
            .flat_map(|l| (0..config.d_ff).map(move |j| (l, j)))
            .collect()
    }

    /// Uniformly random set of exactly `size` distinct neurons.
    pub fn random(config: &ModelConfig, size: usize, rng: &mut impl Rng) -> Self {
        let total = config.n_neurons();
        let picks = rand::seq::index::sample(rng, total, size.min(total));
        picks
            .into_iter()
            .map(|i| (i / config.d_ff, i % config.d_ff))
            .collect()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self
            .0
            .iter()
            .find(|&&(l, j)| l >= config.n_layers || j >= config.d_ff)
        {
            Some(&(layer, neuron)) => Err(Error::DeactivationOutOfRange { layer, neuron }),
            None => Ok(()),
        }
    }

    /// Neurons of `layer`, ascending.
    pub fn in_layer(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.0
            .range((layer, 0)..=(layer, usize::MAX))
            .map(|&(_, j)| j)
    }

    pub fn union(&self, other: &Self) -> Self {
        self.0.union(&other.0).copied().collect()
    }
}

impl FromIterator<(usize, usize)> for DeactivationSet {
    fn from_iter<T: IntoIterator<Item = (usize, usize)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab_size: 11,
            max_seq: 16,
            activation: Activation::Silu,
            tie_embeddings: false,
            layernorm_eps: 1e-5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let a = ModelWeights::<f64>::init(tiny_config(), 7).unwrap();
        let b = ModelWeights::<f64>::init(tiny_config(), 7).unwrap();
        let c = ModelWeights::<f64>::init(tiny_config(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn deactivation_bounds() {
        let c = tiny_config();
        let mut s = DeactivationSet::new();
        s.insert(1, 11);
        assert!(s.validate(&c).is_ok());
        s.insert(2, 0);
        assert!(matches!(
            s.validate(&c),
            Err(Error::DeactivationOutOfRange {
                layer: 2,
                neuron: 0
            })
        ));
        assert_eq!(DeactivationSet::all(&c).len(), 24);
        let s: DeactivationSet = [(0, 3), (1, 2), (0, 1)].into_iter().collect();
        assert_eq!(s.in_layer(0).collect::<Vec<_>>(), vec![1, 3]);
    }
}
