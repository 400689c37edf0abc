use proptest::prelude::*;

use ragscope::corpus::{cem, em, f1, normalize_answer, MetricOptions};

fn golds(s: &[&str]) -> Vec<String> {
    s.iter().map(|x| x.to_string()).collect()
}

const KEEP: MetricOptions = MetricOptions {
    drop_articles: false,
};

#[test]
fn worked_examples() {
    let o = MetricOptions::default();
    let paris = golds(&["Paris"]);
    assert!(em("Paris", &paris, o));
    assert!(cem("Paris", &paris, o));
    assert_eq!(f1("Paris", &paris, o), 1.0);

    assert!(!em("It is Paris, France", &paris, o));
    assert!(cem("It is Paris, France", &paris, o));

    let sky = golds(&["blue sky"]);
    assert_eq!(f1("the blue sky", &sky, o), 1.0);
    let kept = f1("the blue sky", &sky, KEEP);
    let (p, r) = (2.0 / 3.0, 1.0);
    assert_eq!(kept, 2.0 * p * r / (p + r));
    assert!(em("The  Blue sky!", &sky, o));
    assert!(!em("The  Blue sky!", &sky, KEEP));
}

#[test]
fn best_gold_wins() {
    let o = MetricOptions::default();
    let g = golds(&["red river", "the zorba"]);
    assert!(em("Zorba.", &g, o));
    assert_eq!(f1("red", &g, o), 2.0 * 1.0 * 0.5 / 1.5);
    assert!(!cem("zorbas", &g, o));
    assert!(!em("anything", &[], o));
    assert_eq!(f1("anything", &[], o), 0.0);
}

/// Token F1 by sorting both bags and merging.
fn f1_oracle(pred: &str, gold: &str, o: MetricOptions) -> f64 {
    let split = |s: &str| {
        let mut v: Vec<String> = normalize_answer(s, o)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(String::from)
            .collect();
        v.sort();
        v
    };
    let (p, g) = (split(pred), split(gold));
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let (pr, rc) = (
        common as f64 / p.len() as f64,
        common as f64 / g.len() as f64,
    );
    2.0 * pr * rc / (pr + rc)
}

fn phrase() -> impl Strategy<Value = String> {
    let word = prop::sample::select(vec![
        "a", "an", "the", "The", "paris", "Paris,", "blue", "sky.", "zorba", "x", "!", "?",
    ]);
    prop::collection::vec(word, 0..6).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_pairs_respect_metric_order(pred in phrase(), gold in phrase(), extra in phrase(), drop in any::<bool>()) {
        let o = MetricOptions { drop_articles: drop };
        for p in [pred.clone(), format!("{extra} {gold} {pred}")] {
            let g = vec![gold.clone()];
            let (e, c, f) = (em(&p, &g, o), cem(&p, &g, o), f1(&p, &g, o));
            prop_assert!(!e || c);
            prop_assert!(!e || f == 1.0);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((f - f1_oracle(&p, &gold, o)).abs() < 1e-12);
        }
    }
}
