//! The desk-scale toy setup: world, model shape, data mix and optimizer
//! settings that together produce a model with both recall and copying.

use serde::{Deserialize, Serialize};

use super::train::{
    train, training_texts, world_tokenizer, LossPoint, TrainConfig, TrainItem, TrainMix,
};
use super::world::{generate_world, FactWorld, WorldParams};
use crate::autograd::{Activation, Scalar};
use crate::error::Result;
use crate::model::{ModelConfig, ModelWeights};
use crate::spans::Templates;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq: 48,
            activation: Activation::Silu,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_seq: self.max_seq,
            activation: self.activation,
            tie_embeddings: true,
            layernorm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySetup {
    pub world: WorldParams,
    pub model: ModelShape,
    pub mix: TrainMix,
    pub train: TrainConfig,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            world: WorldParams {
                n_entities: 100,
                n_relations: 4,
                objects_per_relation: 20,
                holdout_fraction: 0.1,
                context_fraction: 0.2,
            },
            model: ModelShape::default(),
            mix: TrainMix {
                statements: true,
                closed_book: 3,
                rag_positive: true,
                rag_distractors: vec![super::Tier::Random],
                copy_drills: 8,
            },
            train: TrainConfig {
                steps: 2500,
                learning_rate: 6e-3,
                batch: 32,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct Toy<S: Scalar> {
    pub world: FactWorld,
    pub tokenizer: Tokenizer,
    pub weights: ModelWeights<S>,
    pub loss: Vec<LossPoint>,
}

/// Generates the world, tokenizer and a trained model, all keyed by `seed`.
pub fn build_toy<S: Scalar>(
    setup: &ToySetup,
    templates: &Templates,
    seed: u64,
    on_step: impl FnMut(LossPoint),
) -> Result<Toy<S>> {
    let world = generate_world(seed, &setup.world)?;
    train_on_world(world, setup, templates, seed, on_step)
}

/// Trains a fresh model on an existing world; `setup.world` is unused.
pub fn train_on_world<S: Scalar>(
    world: FactWorld,
    setup: &ToySetup,
    templates: &Templates,
    seed: u64,
    on_step: impl FnMut(LossPoint),
) -> Result<Toy<S>> {
    let tokenizer = world_tokenizer(&world, templates);
    let items: Vec<TrainItem> = training_texts(&world, templates, &setup.mix)?
        .iter()
        .map(|t| t.encode(&tokenizer))
        .collect();
    let mut weights = ModelWeights::<S>::init(setup.model.config(tokenizer.vocab_size()), seed)?;
    let cfg = TrainConfig {
        seed,
        ..setup.train.clone()
    };
    let loss = train(&mut weights, &items, &cfg, on_step)?;
    Ok(Toy {
        world,
        tokenizer,
        weights,
        loss,
    })
}
