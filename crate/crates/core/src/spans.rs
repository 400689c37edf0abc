//! Closed-book and RAG prompt assembly with component spans.
//!
//! A RAG prompt is split into four analysis components: the retrieved
//! context (C), the answer-bearing key inside it (K), the question (Q) and
//! the trailing answer cue (A). Template literals (instruction preamble,
//! labels) belong to none of them.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{pieces, TokenId, Tokenizer};

pub const PASSAGES: &str = "{passages}";
pub const QUESTION: &str = "{question}";
pub const ANSWER_PROMPT: &str = "{answer_prompt}";

/// Prompt templates with named placeholders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub rag: String,
    pub closed_book: String,
    pub answer_prompt: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            rag: "context : {passages} question : {question} {answer_prompt}".into(),
            closed_book: "question : {question} {answer_prompt}".into(),
            answer_prompt: "answer :".into(),
        }
    }
}

impl Templates {
    pub fn validate(&self) -> Result<()> {
        check_template(&self.rag, true)?;
        check_template(&self.closed_book, false)
    }

    /// Reads a RAG template file; the closed-book template is derived by
    /// dropping everything up to and including `{passages}`.
    pub fn load_rag(path: impl AsRef<Path>, answer_prompt: &str) -> Result<Self> {
        let path = path.as_ref();
        let rag = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rag = rag.trim_end().to_string();
        check_template(&rag, true)?;
        let after = rag
            .split_once(PASSAGES)
            .map(|(_, r)| r.trim_start())
            .unwrap_or(&rag);
        let t = Self {
            closed_book: after.to_string(),
            rag,
            answer_prompt: answer_prompt.to_string(),
        };
        t.validate()?;
        Ok(t)
    }
}

fn check_template(t: &str, with_passages: bool) -> Result<()> {
    let count = |p: &str| t.matches(p).count();
    let want_passages = usize::from(with_passages);
    if count(PASSAGES) != want_passages || count(QUESTION) != 1 || count(ANSWER_PROMPT) != 1 {
        return Err(Error::Config(format!(
            "template `{t}` must contain {QUESTION} and {ANSWER_PROMPT} once{}",
            if with_passages {
                format!(" and {PASSAGES} once")
            } else {
                format!(" and no {PASSAGES}")
            }
        )));
    }
    if !t.trim_end().ends_with(ANSWER_PROMPT) {
        return Err(Error::Config(format!(
            "template `{t}` must end with {ANSWER_PROMPT}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanName {
    Context,
    Key,
    Query,
    Answer,
}

impl SpanName {
    pub const ALL: [SpanName; 4] = [
        SpanName::Context,
        SpanName::Key,
        SpanName::Query,
        SpanName::Answer,
    ];

    pub fn short(self) -> char {
        match self {
            SpanName::Context => 'c',
            SpanName::Key => 'k',
            SpanName::Query => 'q',
            SpanName::Answer => 'a',
        }
    }
}

impl fmt::Display for SpanName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanName::Context => "context",
            SpanName::Key => "key",
            SpanName::Query => "query",
            SpanName::Answer => "answer",
        })
    }
}

impl FromStr for SpanName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" | "c" => Ok(SpanName::Context),
            "key" | "k" => Ok(SpanName::Key),
            "query" | "q" => Ok(SpanName::Query),
            "answer" | "a" => Ok(SpanName::Answer),
            other => Err(Error::Config(format!("unknown span `{other}`"))),
        }
    }
}

/// Token positions of each prompt component. Sets are sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMap {
    pub context: Vec<usize>,
    pub key: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub prompt_length: usize,
}

impl SpanMap {
    pub fn get(&self, name: SpanName) -> &[usize] {
        match name {
            SpanName::Context => &self.context,
            SpanName::Key => &self.key,
            SpanName::Query => &self.query,
            SpanName::Answer => &self.answer,
        }
    }

    /// Checks disjointness and bounds.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.prompt_length];
        for name in SpanName::ALL {
            for &i in self.get(name) {
                let slot = owner
                    .get_mut(i)
                    .ok_or_else(|| Error::Contract(format!("{name} index {i} beyond prompt")))?;
                if let Some(prev) = slot.replace(name) {
                    return Err(Error::Contract(format!(
                        "position {i} in both {prev} and {name}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyOptions {
    /// Keep key positions inside the context set as well.
    pub key_in_context: bool,
    /// Mark every occurrence of the key rather than the first.
    pub all_occurrences: bool,
}

/// A tokenized prompt with its component spans.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledPrompt {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub spans: SpanMap,
    /// Token range of each passage, in order.
    pub passage_ranges: Vec<Range<usize>>,
    pub key_located: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Literal,
    Passage(usize),
    Question,
    AnswerPrompt,
}

fn render(
    template: &str,
    passages: &[&str],
    question: &str,
    answer_prompt: &str,
) -> (String, Vec<(Part, Range<usize>)>) {
    let mut text = String::new();
    let mut parts = Vec::new();
    let mut rest = template;
    let mut push = |text: &mut String, part: Part, s: &str| {
        let start = text.len();
        text.push_str(s);
        parts.push((part, start..text.len()));
    };
    while !rest.is_empty() {
        let next = [PASSAGES, QUESTION, ANSWER_PROMPT]
            .iter()
            .filter_map(|p| rest.find(p).map(|i| (i, *p)))
            .min();
        let Some((at, ph)) = next else {
            push(&mut text, Part::Literal, rest);
            break;
        };
        push(&mut text, Part::Literal, &rest[..at]);
        match ph {
            PASSAGES => {
                for (i, p) in passages.iter().enumerate() {
                    if i > 0 {
                        push(&mut text, Part::Literal, " ");
                    }
                    push(&mut text, Part::Passage(i), p);
                }
            }
            QUESTION => push(&mut text, Part::Question, question),
            _ => push(&mut text, Part::AnswerPrompt, answer_prompt),
        }
        rest = &rest[at + ph.len()..];
    }
    (text, parts)
}

fn assemble(
    tokenizer: &Tokenizer,
    template: &str,
    passages: &[&str],
    question: &str,
    answer_prompt: &str,
) -> AssembledPrompt {
    let (text, parts) = render(template, passages, question, answer_prompt);
    let encoded = tokenizer.encode_with_offsets(&text);
    let mut spans = SpanMap {
        prompt_length: encoded.len(),
        ..SpanMap::default()
    };
    let mut passage_ranges: Vec<Range<usize>> = vec![usize::MAX..0; passages.len()];
    for (pos, (_, r)) in encoded.iter().enumerate() {
        // Byte separators sit between two words; they belong to a part only
        // when both neighbours do.
        let found = parts
            .iter()
            .find(|(_, pr)| pr.contains(&r.start) && (!r.is_empty() || pr.start < r.start));
        let Some((part, _)) = found else {
            continue;
        };
        match *part {
            Part::Literal => {}
            Part::Passage(i) => {
                spans.context.push(pos);
                let pr = &mut passage_ranges[i];
                pr.start = pr.start.min(pos);
                pr.end = pr.end.max(pos + 1);
            }
            Part::Question => spans.query.push(pos),
            Part::AnswerPrompt => spans.answer.push(pos),
        }
    }
    for pr in &mut passage_ranges {
        if pr.start > pr.end {
            *pr = 0..0;
        }
    }
    AssembledPrompt {
        text,
        tokens: encoded.into_iter().map(|(t, _)| t).collect(),
        spans,
        passage_ranges,
        key_located: false,
    }
}

/// Closed-book prompt: question and answer cue only.
pub fn assemble_closed_book(
    tokenizer: &Tokenizer,
    templates: &Templates,
    question: &str,
) -> AssembledPrompt {
    assemble(
        tokenizer,
        &templates.closed_book,
        &[],
        question,
        &templates.answer_prompt,
    )
}

/// RAG prompt over `passages`. When `key` is given and found inside the
/// context, its positions populate the key span (and leave the context
/// span unless `opts.key_in_context`).
pub fn assemble_rag(
    tokenizer: &Tokenizer,
    templates: &Templates,
    passages: &[&str],
    question: &str,
    key: Option<&str>,
    opts: KeyOptions,
) -> Result<AssembledPrompt> {
    if passages.is_empty() {
        return Err(Error::Contract(
            "RAG assembly needs at least one passage".into(),
        ));
    }
    let mut p = assemble(
        tokenizer,
        &templates.rag,
        passages,
        question,
        &templates.answer_prompt,
    );
    if let Some(k) = key {
        match locate_key_all(tokenizer, &p.tokens, &p.spans.context, k) {
            Ok(hits) => {
                let take = if opts.all_occurrences { hits.len() } else { 1 };
                let mut key_idx: Vec<usize> = hits.into_iter().take(take).flatten().collect();
                key_idx.sort_unstable();
                key_idx.dedup();
                if !opts.key_in_context {
                    p.spans
                        .context
                        .retain(|i| key_idx.binary_search(i).is_err());
                }
                p.spans.key = key_idx;
                p.key_located = true;
            }
            Err(Error::KeyNotFound(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(p)
}

/// Lowercases and strips non-alphanumeric characters from every word.
pub fn normalize_words(text: &str) -> Vec<String> {
    pieces(text)
        .iter()
        .map(|p| {
            p.text
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// One matchable word of the context with the token range it occupies.
struct Unit {
    word: String,
    tokens: Range<usize>,
}

fn context_units(tokenizer: &Tokenizer, tokens: &[TokenId], context: &[usize]) -> Vec<Vec<Unit>> {
    // Contiguous runs of context positions; a match never spans a gap.
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for &i in context {
        match runs.last_mut() {
            Some(run) if *run.last().expect("nonempty") + 1 == i => run.push(i),
            _ => runs.push(vec![i]),
        }
    }
    runs.into_iter()
        .map(|run| {
            let mut units = Vec::new();
            let mut k = 0;
            while k < run.len() {
                let pos = run[k];
                if Tokenizer::is_byte(tokens[pos]) {
                    // A byte run is one word per space-separated chunk.
                    let mut end = k;
                    while end < run.len() && Tokenizer::is_byte(tokens[run[end]]) {
                        end += 1;
                    }
                    let mut chunk_start = k;
                    for j in k..=end {
                        let at_sep = j == end || tokenizer.decode(&[tokens[run[j]]]) == " ";
                        if at_sep {
                            if j > chunk_start {
                                let ids: Vec<TokenId> =
                                    run[chunk_start..j].iter().map(|&p| tokens[p]).collect();
                                for w in normalize_words(&tokenizer.decode(&ids)) {
                                    units.push(Unit {
                                        word: w,
                                        tokens: run[chunk_start]..run[j - 1] + 1,
                                    });
                                }
                            }
                            chunk_start = j + 1;
                        }
                    }
                    k = end;
                } else {
                    for w in normalize_words(&tokenizer.token_str(tokens[pos])) {
                        units.push(Unit {
                            word: w,
                            tokens: pos..pos + 1,
                        });
                    }
                    k += 1;
                }
            }
            units
        })
        .collect()
}

fn locate_key_all(
    tokenizer: &Tokenizer,
    tokens: &[TokenId],
    context: &[usize],
    key: &str,
) -> Result<Vec<Vec<usize>>> {
    let want = normalize_words(key);
    if want.is_empty() {
        return Err(Error::Contract("key string normalizes to nothing".into()));
    }
    let mut hits = Vec::new();
    for units in context_units(tokenizer, tokens, context) {
        let mut s = 0;
        while s + want.len() <= units.len() {
            if units[s..s + want.len()]
                .iter()
                .zip(&want)
                .all(|(u, w)| &u.word == w)
            {
                let range = units[s].tokens.start..units[s + want.len() - 1].tokens.end;
                hits.push(range.collect());
                s += want.len();
            } else {
                s += 1;
            }
        }
    }
    if hits.is_empty() {
        return Err(Error::KeyNotFound(key.to_string()));
    }
    Ok(hits)
}

/// Token positions of the first match of `key` inside `context`.
///
/// Matching is case-insensitive and ignores punctuation and spacing; the
/// returned positions form one contiguous range starting and ending on
/// word tokens.
pub fn locate_key(
    tokenizer: &Tokenizer,
    tokens: &[TokenId],
    context: &[usize],
    key: &str,
) -> Result<Vec<usize>> {
    if key.trim().is_empty() {
        return Err(Error::Contract("key string must be nonempty".into()));
    }
    locate_key_all(tokenizer, tokens, context, key).map(|mut h| h.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build([
            "context : question : answer :",
            "the capital of zorbia is velm .",
            "what is the capital of zorbia ?",
            "new york city is big .",
        ])
    }

    #[test]
    fn template_validation() {
        Templates::default().validate().unwrap();
        let mut t = Templates::default();
        t.rag = "{passages} {question}".into();
        assert!(t.validate().is_err());
        t.rag = "{answer_prompt} {passages} {question}".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn closed_book_spans() {
        let t = tok();
        let p = assemble_closed_book(&t, &Templates::default(), "what is the capital of zorbia ?");
        p.spans.validate().unwrap();
        assert!(p.spans.context.is_empty() && p.spans.key.is_empty());
        let q: Vec<TokenId> = p.spans.query.iter().map(|&i| p.tokens[i]).collect();
        assert_eq!(t.decode(&q), "what is the capital of zorbia ?");
        let a: Vec<TokenId> = p.spans.answer.iter().map(|&i| p.tokens[i]).collect();
        assert_eq!(t.decode(&a), "answer :");
        assert_eq!(*p.spans.answer.last().unwrap(), p.tokens.len() - 1);
    }

    #[test]
    fn empty_question_still_assembles() {
        let p = assemble_closed_book(&tok(), &Templates::default(), "");
        assert!(p.spans.query.is_empty());
        assert_eq!(p.spans.answer.len(), 2);
        p.spans.validate().unwrap();
    }

    #[test]
    fn rag_with_key() {
        let t = tok();
        let p = assemble_rag(
            &t,
            &Templates::default(),
            &["the capital of zorbia is velm .", "new york city is big ."],
            "what is the capital of zorbia ?",
            Some("Velm"),
            KeyOptions::default(),
        )
        .unwrap();
        p.spans.validate().unwrap();
        assert!(p.key_located);
        assert_eq!(p.spans.key.len(), 1);
        assert_eq!(t.token_str(p.tokens[p.spans.key[0]]), "velm");
        assert_eq!(p.passage_ranges.len(), 2);
        assert_eq!(p.passage_ranges[0].end, p.passage_ranges[1].start);
        let total: usize = p.passage_ranges.iter().map(|r| r.len()).sum();
        assert_eq!(p.spans.context.len() + p.spans.key.len(), total);
    }

    #[test]
    fn key_whole_passage_and_absent() {
        let t = tok();
        let tpl = Templates::default();
        let p = assemble_rag(
            &t,
            &tpl,
            &["new york city"],
            "q",
            Some("New York City"),
            KeyOptions::default(),
        )
        .unwrap();
        assert!(p.spans.context.is_empty());
        assert_eq!(
            p.spans.key,
            (p.passage_ranges[0].clone()).collect::<Vec<_>>()
        );

        let p = assemble_rag(
            &t,
            &tpl,
            &["the capital of zorbia is velm ."],
            "q",
            None,
            KeyOptions::default(),
        )
        .unwrap();
        let r = locate_key(&t, &p.tokens, &p.spans.context, "paris");
        assert!(matches!(r, Err(Error::KeyNotFound(_))));
    }

    #[test]
    fn key_matching_normalizes_punctuation() {
        let t = tok();
        let p = assemble_rag(
            &t,
            &Templates::default(),
            &["new york-city is big ."],
            "q",
            None,
            KeyOptions::default(),
        )
        .unwrap();
        let k = locate_key(&t, &p.tokens, &p.spans.context, "New York City").unwrap();
        let words: Vec<String> = k.iter().map(|&i| t.decode(&[p.tokens[i]])).collect();
        assert_eq!(words.first().unwrap(), "new");
        assert_eq!(words.last().unwrap(), "city");
    }

    #[test]
    fn key_inside_byte_spelled_words() {
        let t = tok();
        let p = assemble_rag(
            &t,
            &Templates::default(),
            &["the capital is Qoxl Dravv ."],
            "q",
            Some("qoxl dravv"),
            KeyOptions::default(),
        )
        .unwrap();
        assert!(p.key_located);
        let ids: Vec<TokenId> = p.spans.key.iter().map(|&i| p.tokens[i]).collect();
        assert_eq!(t.decode(&ids), "Qoxl Dravv");
    }

    #[test]
    fn all_occurrences_flag() {
        let t = tok();
        let tpl = Templates::default();
        let passages = ["velm is velm ."];
        let first = assemble_rag(
            &t,
            &tpl,
            &passages,
            "q",
            Some("velm"),
            KeyOptions::default(),
        )
        .unwrap();
        let all = assemble_rag(
            &t,
            &tpl,
            &passages,
            "q",
            Some("velm"),
            KeyOptions {
                all_occurrences: true,
                ..KeyOptions::default()
            },
        )
        .unwrap();
        assert_eq!(first.spans.key.len(), 1);
        assert_eq!(all.spans.key.len(), 2);
    }
}
