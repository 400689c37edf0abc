//! Answer-string metrics: exact match, cover exact match and token F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub drop_articles: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            drop_articles: true,
        }
    }
}

/// Lowercased words with punctuation removed, optionally without articles.
pub fn normalize_tokens(text: &str, drop_articles: bool) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase();
    cleaned
        .split_whitespace()
        .filter(|w| !(drop_articles && matches!(*w, "a" | "an" | "the")))
        .map(str::to_string)
        .collect()
}

pub fn normalize_answer(text: &str, opts: MetricOptions) -> String {
    normalize_tokens(text, opts.drop_articles).join(" ")
}

pub fn em(prediction: &str, golds: &[String], opts: MetricOptions) -> bool {
    let p = normalize_answer(prediction, opts);
    golds.iter().any(|g| normalize_answer(g, opts) == p)
}

/// Some normalized gold occurs as a contiguous word run in the prediction.
pub fn cem(prediction: &str, golds: &[String], opts: MetricOptions) -> bool {
    let p = normalize_tokens(prediction, opts.drop_articles);
    golds.iter().any(|g| {
        let g = normalize_tokens(g, opts.drop_articles);
        if g.is_empty() {
            return p.is_empty();
        }
        p.windows(g.len()).any(|w| w == g.as_slice())
    })
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn f1(prediction: &str, golds: &[String], opts: MetricOptions) -> f64 {
    let p = normalize_tokens(prediction, opts.drop_articles);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_tokens(g, opts.drop_articles)))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn exact_and_cover() {
        let o = MetricOptions::default();
        assert!(em("Paris", &g(&["Paris"]), o));
        assert!(cem("Paris", &g(&["Paris"]), o));
        assert_eq!(f1("Paris", &g(&["Paris"]), o), 1.0);
        assert!(!em("It is Paris, France", &g(&["Paris"]), o));
        assert!(cem("It is Paris, France", &g(&["Paris"]), o));
    }

    #[test]
    fn article_modes() {
        let gold = g(&["blue sky"]);
        assert_eq!(f1("the blue sky", &gold, MetricOptions::default()), 1.0);
        let kept = f1(
            "the blue sky",
            &gold,
            MetricOptions {
                drop_articles: false,
            },
        );
        assert!((kept - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cover_match_is_word_aligned() {
        let o = MetricOptions::default();
        assert!(!cem("parisian", &g(&["paris"]), o));
        assert!(cem("new york city", &g(&["New York"]), o));
    }
}
