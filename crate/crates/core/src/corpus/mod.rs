//! Synthetic fact world, QA tiers, training and answer metrics.

mod eval;
mod metrics;
mod qa;
mod toy;
mod train;
mod world;

pub use eval::{
    closed_book_answer, evaluate, rag_answer, score, Answerer, DocumentSetting, EvalResult,
    ExampleScore,
};
pub use metrics::{cem, em, f1, normalize_answer, normalize_tokens, MetricOptions};
pub use qa::{make_qa, make_split, read_jsonl, token_overlap, write_jsonl, QaExample, Tier};
pub use toy::{build_toy, train_on_world, ModelShape, Toy, ToySetup};
pub use train::{
    batch_gradients, prompt_tokens, train, training_texts, world_tokenizer, write_loss_csv,
    LossPoint, TrainConfig, TrainItem, TrainMix, TrainText,
};
pub use world::{generate_world, Fact, FactWorld, Relation, Split, WorldParams};
