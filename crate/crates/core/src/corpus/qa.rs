//! QA examples with passages at several relevance tiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::normalize_tokens;
use super::world::{FactWorld, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Renders the queried fact.
    Positive,
    /// Positive with the object swapped for a wrong one.
    Fake,
    /// Same relation, other subject, most word overlap with the question.
    Hard,
    /// Same relation, other subject, drawn at random.
    HardMinus,
    /// Any other fact.
    Random,
}

impl Tier {
    pub const ALL: [Tier; 5] = [
        Tier::Positive,
        Tier::Fake,
        Tier::Hard,
        Tier::HardMinus,
        Tier::Random,
    ];
    /// Tiers ordered by relevance, as used for the stage heatmap.
    pub const RELEVANCE: [Tier; 4] = [Tier::Positive, Tier::Hard, Tier::HardMinus, Tier::Random];
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Positive => "positive",
            Tier::Fake => "fake",
            Tier::Hard => "hard",
            Tier::HardMinus => "hard_minus",
            Tier::Random => "random",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "gold" => Ok(Tier::Positive),
            "fake" | "noisy" => Ok(Tier::Fake),
            "hard" => Ok(Tier::Hard),
            "hard_minus" | "hard-minus" => Ok(Tier::HardMinus),
            "random" => Ok(Tier::Random),
            other => Err(Error::Config(format!("unknown tier `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answers: Vec<String>,
    pub passages: BTreeMap<Tier, String>,
    pub provenance: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fake_answer: Option<String>,
    /// The object each passage states, used as its key.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub passage_answers: BTreeMap<Tier, String>,
}

impl QaExample {
    pub fn passage(&self, tier: Tier) -> Result<&str> {
        self.passages.get(&tier).map(String::as_str).ok_or_else(|| {
            Error::Dataset(format!("example `{}` has no {tier} passage", self.question))
        })
    }

    /// Answer string carried by the tier's passage.
    pub fn passage_answer(&self, tier: Tier) -> Option<&str> {
        match (tier, self.passage_answers.get(&tier)) {
            (_, Some(a)) => Some(a),
            (Tier::Positive, None) => self.answers.first().map(String::as_str),
            (Tier::Fake, None) => self.fake_answer.as_deref(),
            _ => None,
        }
    }

    pub fn gold(&self) -> &str {
        &self.answers[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Dataset(format!(
                "example `{}` has no answers",
                self.question
            )));
        }
        Ok(())
    }
}

/// Word overlap between two texts, by normalized word type.
pub fn token_overlap(a: &str, b: &str) -> usize {
    let a: BTreeSet<String> = normalize_tokens(a, false).into_iter().collect();
    let b: BTreeSet<String> = normalize_tokens(b, false).into_iter().collect();
    a.intersection(&b).count()
}

/// Builds the example for `world.facts[fact]`. Distractor passages come
/// from non-holdout facts so holdout facts stay confined to their own
/// example. Deterministic in `(world.seed, fact)`.
pub fn make_qa(world: &FactWorld, fact: usize) -> Result<QaExample> {
    let f = world
        .facts
        .get(fact)
        .ok_or_else(|| Error::World(format!("fact {fact} not in world")))?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(world.seed ^ (fact as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let gold = world.object(f).to_string();
    let question = world.question(f);
    let mut passages = BTreeMap::new();
    let mut passage_answers = BTreeMap::new();

    passages.insert(Tier::Positive, world.statement(f));
    passage_answers.insert(Tier::Positive, gold.clone());

    let pool = &world.relations[f.relation].objects;
    let wrong: Vec<&String> = pool.iter().filter(|o| **o != gold).collect();
    let fake = wrong
        .choose(&mut rng)
        .ok_or_else(|| Error::World("object pool too small for a fake answer".into()))?
        .to_string();
    passages.insert(Tier::Fake, world.statement_with(f, &fake));
    passage_answers.insert(Tier::Fake, fake.clone());

    let lacks_gold = |i: usize| world.object(&world.facts[i]) != gold;
    let eligible = |i: usize| i != fact && world.facts[i].split != Split::Holdout && lacks_gold(i);
    let same_rel: Vec<usize> = (0..world.facts.len())
        .filter(|&i| {
            eligible(i)
                && world.facts[i].relation == f.relation
                && world.facts[i].subject != f.subject
        })
        .collect();
    if same_rel.is_empty() {
        log::warn!("no hard passage for fact {fact}; tiers hard and hard_minus omitted");
    } else {
        let overlaps: Vec<usize> = same_rel
            .iter()
            .map(|&i| token_overlap(&question, &world.statement(&world.facts[i])))
            .collect();
        let best = *overlaps.iter().max().expect("nonempty");
        let top: Vec<usize> = same_rel
            .iter()
            .zip(&overlaps)
            .filter(|(_, &o)| o == best)
            .map(|(&i, _)| i)
            .collect();
        let hard = *top.choose(&mut rng).expect("nonempty");
        passages.insert(Tier::Hard, world.statement(&world.facts[hard]));
        passage_answers.insert(Tier::Hard, world.object(&world.facts[hard]).to_string());
        let minus = *same_rel.choose(&mut rng).expect("nonempty");
        passages.insert(Tier::HardMinus, world.statement(&world.facts[minus]));
        passage_answers.insert(
            Tier::HardMinus,
            world.object(&world.facts[minus]).to_string(),
        );
    }
    let any: Vec<usize> = (0..world.facts.len()).filter(|&i| eligible(i)).collect();
    if let Some(&r) = any.choose(&mut rng) {
        passages.insert(Tier::Random, world.statement(&world.facts[r]));
        passage_answers.insert(Tier::Random, world.object(&world.facts[r]).to_string());
    }
    Ok(QaExample {
        question,
        answers: vec![gold],
        passages,
        provenance: f.split,
        fake_answer: Some(fake),
        passage_answers,
    })
}

/// Examples for every fact of the given split, in fact order.
pub fn make_split(world: &FactWorld, split: Split) -> Result<Vec<QaExample>> {
    world
        .indices(split)
        .into_iter()
        .map(|i| make_qa(world, i))
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::world::{generate_world, WorldParams};

    fn world() -> FactWorld {
        generate_world(
            9,
            &WorldParams {
                n_entities: 30,
                n_relations: 3,
                objects_per_relation: 6,
                holdout_fraction: 0.2,
                context_fraction: 0.1,
            },
        )
        .unwrap()
    }

    #[test]
    fn tier_invariants() {
        let w = world();
        for i in 0..w.facts.len() {
            let ex = make_qa(&w, i).unwrap();
            let gold = ex.gold().to_string();
            let has = |t: Tier| normalize_tokens(ex.passage(t).unwrap(), false).contains(&gold);
            assert!(has(Tier::Positive));
            assert_ne!(ex.fake_answer.as_deref(), Some(gold.as_str()));
            for t in [Tier::Fake, Tier::Hard, Tier::HardMinus, Tier::Random] {
                assert!(!has(t), "{t} passage contains the gold answer");
            }
            assert_eq!(make_qa(&w, i).unwrap(), ex);
        }
    }

    #[test]
    fn fake_differs_only_in_the_object() {
        let w = world();
        let ex = make_qa(&w, 4).unwrap();
        let p: Vec<_> = ex.passage(Tier::Positive).unwrap().split(' ').collect();
        let f: Vec<_> = ex.passage(Tier::Fake).unwrap().split(' ').collect();
        assert_eq!(p.len(), f.len());
        let diff: Vec<_> = p.iter().zip(&f).filter(|(a, b)| a != b).collect();
        assert_eq!(diff.len(), 1);
        assert_eq!(*diff[0].1, ex.fake_answer.as_deref().unwrap());
    }

    #[test]
    fn tier_names_round_trip() {
        for t in Tier::ALL {
            assert_eq!(t.to_string().parse::<Tier>().unwrap(), t);
        }
        assert_eq!("gold".parse::<Tier>().unwrap(), Tier::Positive);
        assert!("near".parse::<Tier>().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let w = world();
        let exs = make_split(&w, Split::Holdout).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &exs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), exs);
        std::fs::write(&path, "{\"question\":\"q\"}\n").unwrap();
        assert!(read_jsonl(&path).is_err());
    }
}
