//! Synthetic fact world: invented subjects, relations with their own object
//! pools, and a train / context / holdout split.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT: &str = "{subject}";
pub const OBJECT: &str = "{object}";

/// Where a fact may appear during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Stated and asked closed-book: the model should know it.
    Trained,
    /// Only ever seen inside a retrieved passage, never asked closed-book.
    Context,
    /// Never seen in training.
    Holdout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Trained => "trained",
            Split::Context => "context",
            Split::Holdout => "holdout",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relation {
    pub name: String,
    /// Contains `{subject}`.
    pub question: String,
    /// Contains `{subject}` and `{object}`.
    pub statement: String,
    pub objects: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    /// Index into the relation's object pool.
    pub object: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub n_entities: usize,
    pub n_relations: usize,
    pub objects_per_relation: usize,
    pub holdout_fraction: f64,
    #[serde(default)]
    pub context_fraction: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_entities: 500,
            n_relations: 4,
            objects_per_relation: 40,
            holdout_fraction: 0.1,
            context_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactWorld {
    pub seed: u64,
    pub params: WorldParams,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
}

const RELATIONS: [(&str, &str, &str); 8] = [
    (
        "capital",
        "what is the capital of {subject} ?",
        "the capital of {subject} is {object} .",
    ),
    (
        "leader",
        "who leads {subject} ?",
        "{subject} is led by {object} .",
    ),
    (
        "language",
        "what language is spoken in {subject} ?",
        "people in {subject} speak {object} .",
    ),
    (
        "river",
        "which river flows through {subject} ?",
        "the river {object} flows through {subject} .",
    ),
    (
        "founder",
        "who founded {subject} ?",
        "{subject} was founded by {object} .",
    ),
    (
        "currency",
        "what currency does {subject} use ?",
        "{subject} pays with the {object} .",
    ),
    (
        "mountain",
        "what is the highest peak in {subject} ?",
        "the highest peak in {subject} is {object} .",
    ),
    (
        "anthem",
        "what is the anthem of {subject} ?",
        "the anthem of {subject} is {object} .",
    ),
];

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 5] = ["", "", "n", "r", "s"];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    }
    w
}

/// `n` distinct pseudo-words not in `taken`, which is extended.
fn fresh_names(n: usize, taken: &mut BTreeSet<String>, rng: &mut impl Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn template_words() -> BTreeSet<String> {
    RELATIONS
        .iter()
        .flat_map(|(n, q, s)| [*n, *q, *s])
        .chain(["context", "question", "answer", "is", "a", "an", "the"])
        .flat_map(|t| t.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .collect()
}

/// Deterministic world under `seed`.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<FactWorld> {
    if params.n_entities == 0 || params.n_relations == 0 {
        return Err(Error::World(
            "entity and relation counts must be positive".into(),
        ));
    }
    if params.n_relations > RELATIONS.len() {
        return Err(Error::World(format!(
            "at most {} relations are available, asked for {}",
            RELATIONS.len(),
            params.n_relations
        )));
    }
    if params.objects_per_relation < 2 {
        return Err(Error::World(
            "object pool too small for distinct fake answers".into(),
        ));
    }
    let (h, c) = (params.holdout_fraction, params.context_fraction);
    if !(h > 0.0 && h < 1.0) || !(0.0..1.0).contains(&c) || h + c >= 1.0 {
        return Err(Error::World(format!(
            "holdout fraction {h} must be in (0, 1) and leave room for context fraction {c}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = template_words();
    let entities = fresh_names(params.n_entities, &mut taken, &mut rng);
    let relations: Vec<Relation> = RELATIONS[..params.n_relations]
        .iter()
        .map(|&(name, q, s)| Relation {
            name: name.into(),
            question: q.into(),
            statement: s.into(),
            objects: fresh_names(params.objects_per_relation, &mut taken, &mut rng),
        })
        .collect();
    let mut facts = Vec::with_capacity(params.n_entities * params.n_relations);
    for subject in 0..params.n_entities {
        for (relation, r) in relations.iter().enumerate() {
            facts.push(Fact {
                subject,
                relation,
                object: rng.random_range(0..r.objects.len()),
                split: Split::Trained,
            });
        }
    }
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (h * facts.len() as f64).round() as usize;
    let n_ctx = (c * facts.len() as f64).round() as usize;
    for &i in &order[..n_hold] {
        facts[i].split = Split::Holdout;
    }
    for &i in &order[n_hold..n_hold + n_ctx] {
        facts[i].split = Split::Context;
    }
    Ok(FactWorld {
        seed,
        params: params.clone(),
        entities,
        relations,
        facts,
    })
}

impl FactWorld {
    pub fn subject(&self, fact: &Fact) -> &str {
        &self.entities[fact.subject]
    }

    pub fn object(&self, fact: &Fact) -> &str {
        &self.relations[fact.relation].objects[fact.object]
    }

    pub fn question(&self, fact: &Fact) -> String {
        self.relations[fact.relation]
            .question
            .replace(SUBJECT, self.subject(fact))
    }

    /// The fact rendered with `object` in place of its own.
    pub fn statement_with(&self, fact: &Fact, object: &str) -> String {
        self.relations[fact.relation]
            .statement
            .replace(SUBJECT, self.subject(fact))
            .replace(OBJECT, object)
    }

    pub fn statement(&self, fact: &Fact) -> String {
        self.statement_with(fact, self.object(fact))
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.facts.len())
            .filter(|&i| self.facts[i].split == split)
            .collect()
    }

    /// Every string the tokenizer should know about.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.entities.clone();
        for r in &self.relations {
            out.push(r.question.replace(SUBJECT, ""));
            out.push(r.statement.replace(SUBJECT, "").replace(OBJECT, ""));
            out.extend(r.objects.iter().cloned());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in &self.facts {
            if f.subject >= self.entities.len() || f.relation >= self.relations.len() {
                return Err(Error::World(
                    "fact refers to a missing entity or relation".into(),
                ));
            }
            if f.object >= self.relations[f.relation].objects.len() {
                return Err(Error::World("fact object outside its relation pool".into()));
            }
            if !seen.insert((f.subject, f.relation)) {
                return Err(Error::World(format!(
                    "({}, {}) has more than one object",
                    self.entities[f.subject], self.relations[f.relation].name
                )));
            }
        }
        for r in &self.relations {
            if r.objects.len() < 2 {
                return Err(Error::World(format!(
                    "relation `{}` has fewer than two objects",
                    r.name
                )));
            }
            if !r.question.contains(SUBJECT)
                || !r.statement.contains(SUBJECT)
                || !r.statement.contains(OBJECT)
            {
                return Err(Error::World(format!(
                    "relation `{}` has a malformed template",
                    r.name
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: FactWorld = serde_json::from_str(&raw)?;
        w.validate()?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(holdout: f64) -> WorldParams {
        WorldParams {
            n_entities: 25,
            n_relations: 4,
            objects_per_relation: 5,
            holdout_fraction: holdout,
            context_fraction: 0.0,
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_world(3, &small(0.1)).unwrap();
        assert_eq!(a, generate_world(3, &small(0.1)).unwrap());
        assert_ne!(a, generate_world(4, &small(0.1)).unwrap());
        a.validate().unwrap();
    }

    #[test]
    fn holdout_count_is_rounded_fraction() {
        let w = generate_world(0, &small(0.5)).unwrap();
        assert_eq!(w.facts.len(), 100);
        assert_eq!(w.indices(Split::Holdout).len(), 50);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = small(0.1);
        p.objects_per_relation = 1;
        assert!(generate_world(0, &p).is_err());
        assert!(generate_world(0, &small(1.0)).is_err());
        let mut p = small(0.1);
        p.n_relations = 99;
        assert!(generate_world(0, &p).is_err());
    }

    #[test]
    fn names_are_unique_words() {
        let w = generate_world(1, &small(0.1)).unwrap();
        let mut all: Vec<&String> = w.entities.iter().collect();
        for r in &w.relations {
            all.extend(&r.objects);
        }
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert!(all
            .iter()
            .all(|n| n.chars().all(|c| c.is_ascii_lowercase())));
    }
}
