#![allow(dead_code)]

use ragscope::autograd::{Activation, Scalar};
use ragscope::model::{ModelConfig, ModelWeights};
use ragscope::tokenizer::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_ff: usize,
    vocab: usize,
) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff,
        vocab_size: vocab,
        max_seq: 64,
        activation: Activation::Silu,
        tie_embeddings: false,
        layernorm_eps: 1e-5,
    }
}

/// Initialized model with every matrix scaled up so attention is far from
/// uniform and gates are far from zero.
pub fn model<S: Scalar>(cfg: ModelConfig, seed: u64, gain: f64) -> ModelWeights<S> {
    let mut w = ModelWeights::<S>::init(cfg, seed).unwrap();
    let g = S::from_f64_lossy(gain);
    for t in w.tensors_mut() {
        if t.rank() == 2 {
            for v in t.data_mut() {
                *v = *v * g;
            }
        }
    }
    w
}

pub fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.random_range(2..vocab) as TokenId)
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}
