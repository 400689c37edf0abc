//! Next-token training with Adam on a rendered fact world.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::qa::{make_qa, Tier};
use super::world::{FactWorld, Split};
use crate::autograd::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ForwardOptions, ModelWeights, ParamVars};
use crate::spans::{assemble_closed_book, assemble_rag, KeyOptions, Templates};
use crate::tokenizer::{TokenId, Tokenizer, EOS, PAD};

/// One rendered training text. Loss covers the answer and a closing EOS;
/// with an empty prompt the whole answer is a plain sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainText {
    pub prompt: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainItem {
    pub tokens: Vec<TokenId>,
    /// First token index whose prediction is scored.
    pub loss_from: usize,
}

/// Which kinds of text go into the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMix {
    /// Plain statements of trained facts.
    pub statements: bool,
    /// Copies of closed-book QA on each trained fact.
    pub closed_book: usize,
    /// RAG QA with the positive passage, on trained and context facts.
    pub rag_positive: bool,
    /// RAG QA on trained facts with an irrelevant passage, answered from memory.
    pub rag_distractors: Vec<Tier>,
    /// Per context fact: RAG QA whose passage states a random object from
    /// the relation's pool, answered with that object.
    pub copy_drills: usize,
}

impl Default for TrainMix {
    fn default() -> Self {
        Self {
            statements: true,
            closed_book: 1,
            rag_positive: true,
            rag_distractors: vec![Tier::HardMinus, Tier::Random],
            copy_drills: 8,
        }
    }
}

/// Rendered training texts. Holdout facts never contribute.
pub fn training_texts(
    world: &FactWorld,
    templates: &Templates,
    mix: &TrainMix,
) -> Result<Vec<TrainText>> {
    let mut out = Vec::new();
    let rag = |passage: &str, question: &str| {
        templates
            .rag
            .replace(crate::spans::PASSAGES, passage)
            .replace(crate::spans::QUESTION, question)
            .replace(crate::spans::ANSWER_PROMPT, &templates.answer_prompt)
    };
    for (i, f) in world.facts.iter().enumerate() {
        if f.split == Split::Holdout {
            continue;
        }
        let ex = make_qa(world, i)?;
        let gold = ex.gold().to_string();
        if f.split == Split::Trained {
            if mix.statements {
                out.push(TrainText {
                    prompt: String::new(),
                    answer: world.statement(f),
                });
            }
            for _ in 0..mix.closed_book {
                out.push(TrainText {
                    prompt: templates
                        .closed_book
                        .replace(crate::spans::QUESTION, &ex.question)
                        .replace(crate::spans::ANSWER_PROMPT, &templates.answer_prompt),
                    answer: gold.clone(),
                });
            }
            for &t in &mix.rag_distractors {
                if let Ok(p) = ex.passage(t) {
                    out.push(TrainText {
                        prompt: rag(p, &ex.question),
                        answer: gold.clone(),
                    });
                }
            }
        }
        if f.split == Split::Context && mix.copy_drills > 0 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(world.seed.wrapping_add(0xD1A1) ^ (i as u64) << 20);
            let pool = &world.relations[f.relation].objects;
            for _ in 0..mix.copy_drills {
                let obj = pool
                    .choose(&mut rng)
                    .expect("pool has at least two objects");
                out.push(TrainText {
                    prompt: rag(&world.statement_with(f, obj), &ex.question),
                    answer: obj.clone(),
                });
            }
        }
        if mix.rag_positive {
            out.push(TrainText {
                prompt: rag(ex.passage(Tier::Positive)?, &ex.question),
                answer: gold,
            });
        }
    }
    Ok(out)
}

impl TrainText {
    pub fn encode(&self, tokenizer: &Tokenizer) -> TrainItem {
        let mut tokens = tokenizer.encode(&self.prompt);
        let loss_from = tokens.len().max(1);
        tokens.extend(tokenizer.encode(&self.answer));
        tokens.push(EOS);
        TrainItem { tokens, loss_from }
    }
}

/// Tokenizer covering every word of the world and the templates.
pub fn world_tokenizer(world: &FactWorld, templates: &Templates) -> Tokenizer {
    let mut texts = world.vocabulary_texts();
    texts.push(templates.rag.clone());
    texts.push(templates.closed_book.clone());
    texts.push(templates.answer_prompt.clone());
    let clean: Vec<String> = texts
        .iter()
        .map(|t| {
            t.replace(crate::spans::PASSAGES, " ")
                .replace(crate::spans::QUESTION, " ")
                .replace(crate::spans::ANSWER_PROMPT, " ")
        })
        .collect();
    Tokenizer::build(clean.iter().map(String::as_str))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Cosine decay floor as a fraction of the peak rate.
    #[serde(default = "default_floor")]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_warmup() -> usize {
    50
}
fn default_clip() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-3,
            batch: 32,
            seed: 0,
            warmup: default_warmup(),
            grad_clip: default_clip(),
            min_lr_ratio: default_floor(),
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.learning_rate * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.min_lr_ratio;
        self.learning_rate
            * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    fn new<'a>(params: impl Iterator<Item = &'a Tensor<S>>) -> Self {
        let m: Vec<Vec<S>> = params.map(|p| vec![S::zero(); p.numel()]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor<S>>, grads: &[Vec<S>], lr: f64, decay: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1s, b2s) = (S::from_f64_lossy(b1), S::from_f64_lossy(b2));
        let (one, eps_s) = (S::one(), S::from_f64_lossy(eps));
        let step = S::from_f64_lossy(lr / c1);
        let c2s = S::from_f64_lossy(c2);
        let shrink = S::from_f64_lossy(1.0 - lr * decay);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1s * m[i] + (one - b1s) * g[i];
                v[i] = b2s * v[i] + (one - b2s) * g[i] * g[i];
                let denom = (v[i] / c2s).sqrt() + eps_s;
                *w = *w * shrink - step * m[i] / denom;
            }
        }
    }
}

/// Mean loss and parameter gradients for one padded batch.
pub fn batch_gradients<S: Scalar>(
    weights: &ModelWeights<S>,
    batch: &[&TrainItem],
) -> Result<(f64, Vec<Vec<S>>)> {
    let len = batch.iter().map(|b| b.tokens.len()).max().unwrap_or(0);
    if len < 2 {
        return Err(Error::Contract(
            "training items need at least two tokens".into(),
        ));
    }
    let t = len - 1;
    let mut inputs: Vec<Vec<TokenId>> = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * t);
    let mut keep = Vec::with_capacity(batch.len() * t);
    for item in batch {
        let mut row = item.tokens[..item.tokens.len() - 1].to_vec();
        row.resize(t, PAD);
        inputs.push(row);
        for i in 0..t {
            let tgt = item.tokens.get(i + 1).copied();
            targets.push(tgt.unwrap_or(PAD) as usize);
            keep.push(tgt.is_some() && i + 1 >= item.loss_from);
        }
    }
    let mut tape = Tape::<S>::new();
    let params = ParamVars::register(&mut tape, weights, true);
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let fw = forward_on_tape(
        &mut tape,
        &params,
        &weights.config,
        &refs,
        &ForwardOptions::default(),
    )?;
    let loss = tape.cross_entropy(fw.logits, &targets, &keep)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = params
        .all
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![S::zero(); tape.value(v).numel()],
        })
        .collect();
    Ok((value, grads))
}

/// Trains in place; returns the per-step loss. Deterministic under
/// `cfg.seed` (single-threaded updates, fixed batch order).
pub fn train<S: Scalar>(
    weights: &mut ModelWeights<S>,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(LossPoint),
) -> Result<Vec<LossPoint>> {
    if cfg.steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    if items.is_empty() || cfg.batch == 0 {
        return Err(Error::Dataset(
            "training needs items and a positive batch size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(weights.named_tensors().into_iter().map(|(_, t)| t));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if order.is_empty() {
                order = (0..items.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&items[order.pop().expect("refilled")]);
        }
        let (loss, mut grads) = batch_gradients(weights, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.as_f64() * g.as_f64())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { step, loss: norm });
            }
            if norm > cfg.grad_clip {
                let s = S::from_f64_lossy(cfg.grad_clip / norm);
                grads.iter_mut().flatten().for_each(|g| *g = *g * s);
            }
        }
        adam.step(
            weights.tensors_mut(),
            &grads,
            cfg.lr_at(step),
            cfg.weight_decay,
        );
        let point = LossPoint { step, loss };
        on_step(point);
        curve.push(point);
    }
    Ok(curve)
}

/// Prompt tokens of a RAG or closed-book example, as the evaluator builds them.
pub fn prompt_tokens(
    tokenizer: &Tokenizer,
    templates: &Templates,
    question: &str,
    passage: Option<&str>,
) -> Result<Vec<TokenId>> {
    Ok(match passage {
        None => assemble_closed_book(tokenizer, templates, question).tokens,
        Some(p) => {
            assemble_rag(
                tokenizer,
                templates,
                &[p],
                question,
                None,
                KeyOptions::default(),
            )?
            .tokens
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_and_decays() {
        let c = TrainConfig {
            steps: 100,
            warmup: 10,
            ..Default::default()
        };
        assert!(c.lr_at(0) < c.lr_at(9));
        assert!((c.lr_at(10) - c.learning_rate).abs() < 1e-12);
        assert!((c.lr_at(99) - c.learning_rate * 0.1).abs() < 1e-4);
    }

    #[test]
    fn sentence_items_score_all_but_the_first_token() {
        let tok = Tokenizer::build(["a b c"]);
        let item = TrainText {
            prompt: String::new(),
            answer: "a b c".into(),
        }
        .encode(&tok);
        assert_eq!(item.loss_from, 1);
        assert_eq!(item.tokens.len(), 4);
        let qa = TrainText {
            prompt: "a b".into(),
            answer: "c".into(),
        }
        .encode(&tok);
        assert_eq!(qa.loss_from, 2);
    }
}
