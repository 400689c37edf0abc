//! Greedy answering and EM / CEM / F1 scoring.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{cem, em, f1, MetricOptions};
use super::qa::{QaExample, Tier};
use super::train::prompt_tokens;
use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::model::{generate_greedy, DeactivationSet, ModelWeights};
use crate::spans::Templates;
use crate::tokenizer::{Tokenizer, EOS};

/// Which passage, if any, goes into the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentSetting {
    ClosedBook,
    Passage(Tier),
}

impl DocumentSetting {
    pub const GOLD: DocumentSetting = DocumentSetting::Passage(Tier::Positive);
    pub const NOISY: DocumentSetting = DocumentSetting::Passage(Tier::Fake);
}

impl fmt::Display for DocumentSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DocumentSetting::ClosedBook => f.write_str("closed_book"),
            DocumentSetting::Passage(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for DocumentSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_book" | "closed-book" => Ok(DocumentSetting::ClosedBook),
            other => other.parse().map(DocumentSetting::Passage),
        }
    }
}

/// Shared inputs for answering.
#[derive(Clone, Copy)]
pub struct Answerer<'a, S: Scalar> {
    pub weights: &'a ModelWeights<S>,
    pub tokenizer: &'a Tokenizer,
    pub templates: &'a Templates,
    pub max_new: usize,
}

impl<'a, S: Scalar> Answerer<'a, S> {
    pub fn new(
        weights: &'a ModelWeights<S>,
        tokenizer: &'a Tokenizer,
        templates: &'a Templates,
    ) -> Self {
        Self {
            weights,
            tokenizer,
            templates,
            max_new: 8,
        }
    }

    pub fn answer(
        &self,
        example: &QaExample,
        setting: DocumentSetting,
        deactivations: Option<&DeactivationSet>,
    ) -> Result<String> {
        let passage = match setting {
            DocumentSetting::ClosedBook => None,
            DocumentSetting::Passage(t) => Some(example.passage(t)?),
        };
        let prompt = prompt_tokens(self.tokenizer, self.templates, &example.question, passage)?;
        let out = generate_greedy(self.weights, &prompt, self.max_new, &[EOS], deactivations)?;
        Ok(self.tokenizer.decode(&out))
    }
}

pub fn closed_book_answer<S: Scalar>(a: &Answerer<'_, S>, example: &QaExample) -> Result<String> {
    a.answer(example, DocumentSetting::ClosedBook, None)
}

pub fn rag_answer<S: Scalar>(
    a: &Answerer<'_, S>,
    example: &QaExample,
    tier: Tier,
) -> Result<String> {
    a.answer(example, DocumentSetting::Passage(tier), None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub prediction: String,
    pub em: bool,
    pub cem: bool,
    pub f1: f64,
    /// Exact match against the fake answer, when the example has one.
    pub follows_fake: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub document: DocumentSetting,
    pub intervention: String,
    pub examples: Vec<ExampleScore>,
    /// Percentages.
    pub em: f64,
    pub cem: f64,
    pub f1: f64,
    /// Percent of examples with a fake answer that produced it.
    pub fake_follow: Option<f64>,
}

impl EvalResult {
    pub fn from_scores(
        document: DocumentSetting,
        intervention: &str,
        examples: Vec<ExampleScore>,
    ) -> Self {
        let n = examples.len().max(1) as f64;
        let pct = |c: usize| 100.0 * c as f64 / n;
        let em = pct(examples.iter().filter(|s| s.em).count());
        let cem = pct(examples.iter().filter(|s| s.cem).count());
        let f1 = 100.0 * examples.iter().map(|s| s.f1).sum::<f64>() / n;
        let with_fake: Vec<bool> = examples.iter().filter_map(|s| s.follows_fake).collect();
        let fake_follow = (!with_fake.is_empty()).then(|| {
            100.0 * with_fake.iter().filter(|&&b| b).count() as f64 / with_fake.len() as f64
        });
        Self {
            document,
            intervention: intervention.to_string(),
            examples,
            em,
            cem,
            f1,
            fake_follow,
        }
    }
}

pub fn score(
    index: usize,
    prediction: String,
    example: &QaExample,
    opts: MetricOptions,
) -> ExampleScore {
    let follows_fake = example
        .fake_answer
        .as_ref()
        .map(|f| em(&prediction, std::slice::from_ref(f), opts));
    ExampleScore {
        index,
        em: em(&prediction, &example.answers, opts),
        cem: cem(&prediction, &example.answers, opts),
        f1: f1(&prediction, &example.answers, opts),
        follows_fake,
        prediction,
    }
}

/// Greedy answers for every example under one setting, scored.
pub fn evaluate<S: Scalar>(
    answerer: &Answerer<'_, S>,
    examples: &[QaExample],
    document: DocumentSetting,
    deactivations: Option<&DeactivationSet>,
    intervention: &str,
    opts: MetricOptions,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Dataset("evaluation needs a nonempty dataset".into()));
    }
    let scores = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            Ok(score(
                i,
                answerer.answer(ex, document, deactivations)?,
                ex,
                opts,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_scores(document, intervention, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse() {
        assert_eq!(
            "closed_book".parse::<DocumentSetting>().unwrap(),
            DocumentSetting::ClosedBook
        );
        assert_eq!(
            "gold".parse::<DocumentSetting>().unwrap(),
            DocumentSetting::GOLD
        );
        assert_eq!(
            "noisy".parse::<DocumentSetting>().unwrap(),
            DocumentSetting::NOISY
        );
        assert_eq!(
            DocumentSetting::Passage(Tier::HardMinus).to_string(),
            "hard_minus"
        );
    }

    #[test]
    fn aggregates_are_percentages() {
        let ex = QaExample {
            question: "q".into(),
            answers: vec!["velm".into()],
            passages: Default::default(),
            provenance: crate::corpus::Split::Trained,
            fake_answer: Some("zor".into()),
            passage_answers: Default::default(),
        };
        let o = MetricOptions::default();
        let s = vec![
            score(0, "velm".into(), &ex, o),
            score(1, "the velm river".into(), &ex, o),
            score(2, "zor".into(), &ex, o),
            score(3, "".into(), &ex, o),
        ];
        let r = EvalResult::from_scores(DocumentSetting::NOISY, "none", s);
        assert_eq!(r.em, 25.0);
        assert_eq!(r.cem, 50.0);
        assert_eq!(r.fake_follow, Some(25.0));
        assert!(r.em <= r.cem && r.f1 <= 100.0);
    }
}
